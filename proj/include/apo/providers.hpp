#pragma once

#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "apo/errors.hpp"

namespace apo {

// temperature 0 means greedy decoding on the target model; the optimizer
// model samples at temperature 1.0, top_k 40, top_p 0.8.
struct DecodingParams {
  double temperature = 0.0;
  std::optional<int> top_k;
  std::optional<double> top_p;
  int max_output_tokens = 1024;
};

inline DecodingParams target_decoding() { return {0.0, std::nullopt, std::nullopt, 1024}; }

inline DecodingParams optimizer_decoding() { return {1.0, 40, 0.8, 1024}; }

class GenerationEndpoint {
 public:
  virtual ~GenerationEndpoint() = default;
  virtual std::string generate(const std::string& prompt_text, const DecodingParams& params) = 0;
  virtual std::string identity() const = 0;
};

class EmbeddingEndpoint {
 public:
  virtual ~EmbeddingEndpoint() = default;
  virtual std::vector<double> embed(const std::string& text) = 0;
  virtual std::size_t dimension() const = 0;
};

// One scripted rule: the response fires when every substring in
// `contains_all` occurs in the prompt text and every substring in
// `tail_contains` occurs after the last "==" exemplar separator (the live
// block; the whole prompt when no separator is present). First matching rule
// wins.
struct ScriptedRule {
  std::vector<std::string> contains_all;
  std::string response;
  std::vector<std::string> tail_contains;

  ScriptedRule() = default;
  ScriptedRule(std::vector<std::string> contains, std::string resp,
               std::vector<std::string> tail = {})
      : contains_all(std::move(contains)),
        response(std::move(resp)),
        tail_contains(std::move(tail)) {}

  static std::string_view tail_of(const std::string& prompt_text) {
    static constexpr const char* kSep = "\n==\n\n";
    std::size_t pos = prompt_text.rfind(kSep);
    if (pos == std::string::npos) return prompt_text;
    return std::string_view(prompt_text).substr(pos + 5);
  }

  bool matches(const std::string& prompt_text) const {
    for (const auto& needle : contains_all) {
      if (prompt_text.find(needle) == std::string::npos) return false;
    }
    if (!tail_contains.empty()) {
      std::string_view tail = tail_of(prompt_text);
      for (const auto& needle : tail_contains) {
        if (tail.find(needle) == std::string_view::npos) return false;
      }
    }
    return true;
  }
};

// Deterministic stand-in for a hosted model: a pure function of the prompt
// text. Keeps the whole pipeline byte-reproducible in tests and selftest.
class ScriptedEndpoint : public GenerationEndpoint {
 public:
  ScriptedEndpoint() = default;
  ScriptedEndpoint(std::vector<ScriptedRule> rules, std::string default_response,
                   std::string name = "scripted")
      : rules_(std::move(rules)),
        default_response_(std::move(default_response)),
        name_(std::move(name)) {}

  std::string generate(const std::string& prompt_text, const DecodingParams&) override {
    calls_.fetch_add(1, std::memory_order_relaxed);
    for (const auto& rule : rules_) {
      if (rule.matches(prompt_text)) return rule.response;
    }
    return default_response_;
  }

  std::string identity() const override { return name_; }

  std::uint64_t call_count() const { return calls_.load(std::memory_order_relaxed); }

  void add_rule(std::vector<std::string> contains_all, std::string response) {
    rules_.push_back({std::move(contains_all), std::move(response)});
  }
  void set_default_response(std::string r) { default_response_ = std::move(r); }

 private:
  std::vector<ScriptedRule> rules_;
  std::string default_response_;
  std::string name_ = "scripted";
  std::atomic<std::uint64_t> calls_{0};
};

// FNV-1a 64-bit; the constants are part of the embedding contract below.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Deterministic hashed bag-of-words embedding: lowercase, split on
// non-alphanumerics, bucket = fnv1a64(token) % d, count occurrences, then
// L2-normalize. All-zero input stays the zero vector.
inline std::vector<double> hashed_bow_embed(const std::string& text, std::size_t d) {
  if (d < 16) throw ConfigError("hashed_bow_embed: dimension must be >= 16");
  std::vector<double> vec(d, 0.0);
  std::string token;
  auto flush = [&] {
    if (!token.empty()) {
      vec[fnv1a64(token) % d] += 1.0;
      token.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      token.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  double norm2 = 0.0;
  for (double x : vec) norm2 += x * x;
  if (norm2 > 0.0) {
    double inv = 1.0 / std::sqrt(norm2);
    for (double& x : vec) x *= inv;
  }
  return vec;
}

class HashedBowEmbedder : public EmbeddingEndpoint {
 public:
  explicit HashedBowEmbedder(std::size_t dim = 256) : dim_(dim) {
    if (dim_ < 16) throw ConfigError("HashedBowEmbedder: dimension must be >= 16");
  }

  std::vector<double> embed(const std::string& text) override {
    return hashed_bow_embed(text, dim_);
  }

  std::size_t dimension() const override { return dim_; }

 private:
  std::size_t dim_;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  std::size_t n = a.size() < b.size() ? a.size() : b.size();
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace apo
