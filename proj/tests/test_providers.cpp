#include <catch2/catch.hpp>

#include <cmath>

#include "apo/providers.hpp"

using namespace apo;

TEST_CASE("scripted endpoint rule table", "[providers]") {
  ScriptedEndpoint ep({{{"1+1"}, "The sum is 2. <answer>2</answer>"}}, "fallback");
  CHECK(ep.generate("Q: what is 1+1?", target_decoding()) == "The sum is 2. <answer>2</answer>");
  CHECK(ep.generate("something else", target_decoding()) == "fallback");
  CHECK(ep.call_count() == 2);

  // first matching rule wins
  ScriptedEndpoint ordered({{{"alpha"}, "first"}, {{"alpha", "beta"}, "second"}}, "none");
  CHECK(ordered.generate("alpha beta", target_decoding()) == "first");
}

TEST_CASE("tail-anchored rules see only the live block", "[providers]") {
  ScriptedRule rule({"MARK"}, "hit", {"ITEM7:"});
  // ITEM7: appears only in an exemplar block, not after the last separator
  CHECK_FALSE(rule.matches("Q: ITEM7: old\nA: done MARK\n==\n\nQ: ITEM9: new\nA: "));
  CHECK(rule.matches("Q: ITEM3: old\nA: done MARK\n==\n\nQ: ITEM7: new\nA: "));
  // without separators the whole prompt is the tail
  CHECK(rule.matches("Q: ITEM7: alone MARK\nA: "));
  CHECK_FALSE(rule.matches("Q: ITEM7: alone\nA: no mark"));
}

TEST_CASE("default decoding parameters", "[providers]") {
  DecodingParams target = target_decoding();
  CHECK(target.temperature == 0.0);
  CHECK_FALSE(target.top_k.has_value());
  CHECK_FALSE(target.top_p.has_value());
  CHECK(target.max_output_tokens == 1024);

  DecodingParams opt = optimizer_decoding();
  CHECK(opt.temperature == 1.0);
  CHECK(opt.top_k.value() == 40);
  CHECK(opt.top_p.value() == Approx(0.8));
}

TEST_CASE("hashed bag-of-words embedding", "[providers]") {
  SECTION("empty input maps to the zero vector") {
    auto v = hashed_bow_embed("", 64);
    for (double x : v) CHECK(x == 0.0);
  }

  SECTION("bag semantics: token order is irrelevant") {
    CHECK(hashed_bow_embed("a a b", 64) == hashed_bow_embed("b a a", 64));
  }

  SECTION("tokenization lowercases and splits on non-alphanumerics") {
    CHECK(hashed_bow_embed("Cat, cat; CAT!", 64) == hashed_bow_embed("cat cat cat", 64));
  }

  SECTION("frozen bucket: fnv1a64('cat') % 64 == 39") {
    CHECK(fnv1a64("cat") == 17718013163177550631ull);
    auto v = hashed_bow_embed("cat", 64);
    CHECK(v[39] == Approx(1.0));
  }

  SECTION("unit L2 norm within 1e-9 for non-empty input") {
    auto v = hashed_bow_embed("the quick brown fox jumps", 128);
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    CHECK(std::abs(std::sqrt(norm2) - 1.0) < 1e-9);
  }

  SECTION("frozen cosine comparison") {
    auto ab = hashed_bow_embed("alpha beta", 64);
    auto abg = hashed_bow_embed("alpha beta gamma", 64);
    auto de = hashed_bow_embed("delta epsilon", 64);
    // alpha/beta/gamma/delta/epsilon hash to distinct buckets at d=64, so
    // cos(ab, abg) = 2/(sqrt(2)*sqrt(3)) and cos(ab, de) = 0
    CHECK(cosine(ab, abg) == Approx(0.816496580927726).epsilon(1e-12));
    CHECK(cosine(ab, de) == Approx(0.0).margin(1e-15));
    CHECK(cosine(ab, abg) > cosine(ab, de));
  }

  SECTION("dimension below 16 is rejected") {
    CHECK_THROWS_AS(hashed_bow_embed("x", 8), ConfigError);
  }
}

TEST_CASE("embedder endpoint determinism and fixed dimension", "[providers]") {
  HashedBowEmbedder embedder(64);
  CHECK(embedder.dimension() == 64);
  CHECK(embedder.embed("same text") == embedder.embed("same text"));
  CHECK(embedder.embed("anything").size() == 64);
}
