#include <catch2/catch.hpp>

#include <string>
#include <vector>

#include "apo/evaluation.hpp"

using namespace apo;

namespace {

std::vector<TaskItem> four_items() {
  return {{"ITEM0: probe", "a0", {}},
          {"ITEM1: probe", "a1", {}},
          {"ITEM2: probe", "a2", {}},
          {"ITEM3: probe", "a3", {}}};
}

// answers items 0..2 correctly, misses item 3
ScriptedEndpoint three_of_four_target() {
  std::vector<ScriptedRule> rules;
  for (int i = 0; i < 3; ++i) {
    rules.push_back({{"ITEM" + std::to_string(i) + ":"},
                     "Reasoning for " + std::to_string(i) + ". <answer>a" + std::to_string(i) +
                         "</answer>"});
  }
  return ScriptedEndpoint(std::move(rules), "<answer>wrong</answer>");
}

}  // namespace

TEST_CASE("answer extraction", "[evaluation]") {
  CHECK(extract_answer("…reasoning… <answer>(B)</answer>").value() == "(B)");
  CHECK_FALSE(extract_answer("no tags here").has_value());
  CHECK(extract_answer("<answer>(A)</answer> wait <answer>(C)</answer>").value() == "(C)");
  CHECK(extract_answer("backslash closer <answer>(A)<\\answer>").value() == "(A)");
  CHECK(extract_answer("<answer>  padded  </answer>").value() == "padded");
  CHECK(extract_answer("<answer>multi\nline</answer>").value() == "multi\nline");
  CHECK_FALSE(extract_answer("<answer>unclosed").has_value());
  // an unclosed span does not eat a later complete one
  CHECK(extract_answer("<answer>(A)</answer> then <answer>dangling").value() == "(A)");
}

TEST_CASE("scoring by answer kind", "[evaluation]") {
  AnswerKind mc = make_answer_kind(AnswerKindTag::multiple_choice);
  CHECK(score("(B)", "(B)", mc));
  CHECK(score("B", "(B)", mc));
  CHECK(score("(C) Ambiguous", "(C)", mc));
  CHECK_FALSE(score("(A)", "(B)", mc));

  AnswerKind yn = make_answer_kind(AnswerKindTag::yes_no);
  CHECK(score("Yes", "yes", yn));
  CHECK_FALSE(score("yes", "No", yn));

  AnswerKind tf = make_answer_kind(AnswerKindTag::boolean_true_false);
  CHECK(score("true", "True", tf));
  CHECK_FALSE(score("True", "False", tf));

  AnswerKind vi = make_answer_kind(AnswerKindTag::valid_invalid);
  CHECK(score("VALID", "valid", vi));

  AnswerKind ws = make_answer_kind(AnswerKindTag::word_sorting);
  CHECK(score("arapaho\nbacteria\nbela\nbock\nburley", "arapaho bacteria bela bock burley", ws));
  CHECK(score("alpha, beta, gamma", "alpha beta gamma", ws));
  CHECK_FALSE(score("beta alpha", "alpha beta", ws));

  AnswerKind fr = make_answer_kind(AnswerKindTag::free);
  CHECK(score(" 42 ", "42", fr));
  CHECK_FALSE(score("41", "42", fr));
}

TEST_CASE("evaluate_prompt accuracy and record order", "[evaluation]") {
  auto items = four_items();
  auto target = three_of_four_target();
  AnswerKind kind = make_answer_kind(AnswerKindTag::free);
  BudgetLedger ledger(8);
  Prompt prompt{seed_instruction(), {}, TemplateStyle::qa_block};

  EvalResult result = evaluate_prompt(prompt, items, kind, target, ledger);
  CHECK(result.accuracy == Approx(0.75));
  REQUIRE(result.records.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(result.records[static_cast<std::size_t>(i)].item_index == i);
  CHECK(result.records[3].correct == false);
  CHECK(result.records[0].extracted.value() == "a0");

  // stored accuracy equals recount
  int correct = 0;
  for (const auto& rec : result.records) correct += rec.correct ? 1 : 0;
  CHECK(result.accuracy == Approx(static_cast<double>(correct) / 4.0));
}

TEST_CASE("records stay ordered with concurrent workers", "[evaluation]") {
  std::vector<TaskItem> items;
  std::vector<ScriptedRule> rules;
  for (int i = 0; i < 24; ++i) {
    items.push_back({"ITEM" + std::to_string(i) + ": probe", "a" + std::to_string(i), {}});
    rules.push_back({{"ITEM" + std::to_string(i) + ":"},
                     "<answer>a" + std::to_string(i) + "</answer>"});
  }
  ScriptedEndpoint target(std::move(rules), "<answer>x</answer>");
  AnswerKind kind = make_answer_kind(AnswerKindTag::free);
  Prompt prompt{seed_instruction(), {}, TemplateStyle::qa_block};

  EvalOptions options;
  options.workers = 4;
  EvalResult result = evaluate_items(prompt, items, kind, target, options);
  CHECK(result.accuracy == Approx(1.0));
  for (int i = 0; i < 24; ++i) {
    CHECK(result.records[static_cast<std::size_t>(i)].item_index == i);
    CHECK(result.records[static_cast<std::size_t>(i)].extracted.value() ==
          "a" + std::to_string(i));
  }
}

TEST_CASE("budget: dedupe, charges and exhaustion", "[evaluation]") {
  auto items = four_items();
  auto target = three_of_four_target();
  AnswerKind kind = make_answer_kind(AnswerKindTag::free);

  SECTION("same prompt twice charges once") {
    BudgetLedger ledger(4);
    Prompt prompt{seed_instruction(), {}, TemplateStyle::qa_block};
    evaluate_prompt(prompt, items, kind, target, ledger);
    evaluate_prompt(prompt, items, kind, target, ledger);
    CHECK(ledger.consumed() == 1);
    CHECK(ledger.entries().size() == 1);
  }

  SECTION("distinct prompts charge until the cap, then throw") {
    BudgetLedger ledger(3);
    for (int i = 0; i < 3; ++i) {
      Prompt prompt{Instruction{"instruction " + std::to_string(i), InstructionOrigin::manual},
                    {},
                    TemplateStyle::qa_block};
      evaluate_prompt(prompt, items, kind, target, ledger);
    }
    CHECK(ledger.consumed() == 3);
    Prompt extra{Instruction{"one too many", InstructionOrigin::manual},
                 {},
                 TemplateStyle::qa_block};
    CHECK_THROWS_AS(evaluate_prompt(extra, items, kind, target, ledger), BudgetExhausted);
    // a cached digest still succeeds at the cap
    Prompt cached{Instruction{"instruction 0", InstructionOrigin::manual},
                  {},
                  TemplateStyle::qa_block};
    CHECK_NOTHROW(evaluate_prompt(cached, items, kind, target, ledger));
    CHECK(ledger.consumed() == 3);
  }

  SECTION("consumed equals the count of distinct digests") {
    BudgetLedger ledger(10);
    for (int i = 0; i < 3; ++i) {
      for (int repeat = 0; repeat < 2; ++repeat) {
        Prompt prompt{Instruction{"text " + std::to_string(i), InstructionOrigin::manual},
                      {},
                      TemplateStyle::qa_block};
        evaluate_prompt(prompt, items, kind, target, ledger);
      }
    }
    CHECK(ledger.consumed() == 3);
  }
}

namespace {

// fails on one item no matter how often it is asked
class FlakyEndpoint : public GenerationEndpoint {
 public:
  std::string generate(const std::string& prompt_text, const DecodingParams&) override {
    if (prompt_text.find("ITEM2:") != std::string::npos) {
      throw ExhaustedRetries("simulated outage");
    }
    return "<answer>a0</answer>";
  }
  std::string identity() const override { return "flaky"; }
};

}  // namespace

TEST_CASE("per-item endpoint failures mark the record incorrect", "[evaluation]") {
  auto items = four_items();
  FlakyEndpoint target;
  AnswerKind kind = make_answer_kind(AnswerKindTag::free);
  BudgetLedger ledger(2);
  Prompt prompt{seed_instruction(), {}, TemplateStyle::qa_block};

  EvalResult result = evaluate_prompt(prompt, items, kind, target, ledger);
  REQUIRE(result.records.size() == 4);
  CHECK_FALSE(result.records[2].correct);
  CHECK_FALSE(result.records[2].extracted.has_value());
  CHECK(ledger.consumed() == 1);  // the outage never duplicates the charge

  SECTION("the fatal flag promotes the failure") {
    BudgetLedger fresh(2);
    EvalOptions options;
    options.per_item_failure_fatal = true;
    CHECK_THROWS_AS(evaluate_prompt(prompt, items, kind, target, fresh, options),
                    ExhaustedRetries);
  }
}

TEST_CASE("instruction construction rejects blank text", "[evaluation]") {
  CHECK_THROWS_AS(make_instruction("   \n\t "), std::invalid_argument);
  CHECK(make_instruction("Think.").text == "Think.");
}

TEST_CASE("prompt digest identity", "[evaluation]") {
  AnswerKind kind = make_answer_kind(AnswerKindTag::free);
  Prompt a{seed_instruction(), {}, TemplateStyle::qa_block};
  Prompt b{seed_instruction(), {}, TemplateStyle::header_block};
  CHECK(prompt_digest(a, kind) != prompt_digest(b, kind));

  Exemplar e1;
  e1.query_text = "q";
  e1.model_output = "o <answer>1</answer>";
  e1.final_answer = "1";
  e1.source_index = 4;
  Exemplar e2 = e1;
  e2.source_index = 5;

  Prompt with1{seed_instruction(), {e1}, TemplateStyle::qa_block};
  Prompt with2{seed_instruction(), {e2}, TemplateStyle::qa_block};
  CHECK(prompt_digest(with1, kind) != prompt_digest(with2, kind));
  CHECK(prompt_digest(with1, kind) == prompt_digest(with1, kind));
}

TEST_CASE("bootstrapped pools", "[evaluation]") {
  auto items = four_items();
  auto target = three_of_four_target();
  AnswerKind kind = make_answer_kind(AnswerKindTag::free);
  BudgetLedger ledger(2);
  Prompt prompt{seed_instruction(), {}, TemplateStyle::qa_block};
  EvalResult result = evaluate_prompt(prompt, items, kind, target, ledger);

  ExemplarPool pool = bootstrap_pool(result, items, prompt.instruction);
  REQUIRE(pool.size() == 3);  // pool size equals correct-record count
  CHECK(pool.conditioning_instruction.text == kSeedInstruction);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Exemplar& e = pool.exemplars[i];
    CHECK(e.source_index == static_cast<int>(i));
    // full response retained, reasoning included, not just the answer span
    CHECK(e.model_output.find("Reasoning for") == 0);
    CHECK(e.model_output.find("<answer>") != std::string::npos);
    CHECK(score(e.final_answer, items[static_cast<std::size_t>(e.source_index)].target, kind));
  }

  SECTION("all-incorrect evaluation produces an empty pool") {
    ScriptedEndpoint hopeless({}, "<answer>never right</answer>");
    BudgetLedger fresh(2);
    EvalResult bad = evaluate_prompt(prompt, items, kind, hopeless, fresh);
    CHECK(bootstrap_pool(bad, items, prompt.instruction).empty());
  }
}
