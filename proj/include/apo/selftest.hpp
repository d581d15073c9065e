#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "apo/datasets.hpp"
#include "apo/orchestrator.hpp"
#include "apo/providers.hpp"

namespace apo {

// A fully scripted fixture: 40-item synthetic task plus target/optimizer
// endpoints whose behavior depends on the instruction wording and on which
// bootstrapped exemplars are present in the prompt. Everything downstream of
// these endpoints is byte-reproducible.
struct SelftestFixture {
  Task task;
  std::shared_ptr<ScriptedEndpoint> target;
  std::shared_ptr<ScriptedEndpoint> optimizer;
};

inline SelftestFixture make_selftest_fixture() {
  SelftestFixture fx;
  fx.task.name = "synthetic_signals";
  fx.task.answer_kind = make_answer_kind(AnswerKindTag::free);

  const int n = 40;
  for (int i = 0; i < n; ++i) {
    TaskItem item;
    item.input = "ITEM" + std::to_string(i) + ": map the signal.";
    item.target = "v" + std::to_string(i);
    fx.task.items.push_back(std::move(item));
  }

  // The selftest split (fraction 0.2, seed 11) is precomputed here so the
  // unlock map can wire validation items to each other: exemplars only ever
  // come from the validation split, so unlock targets must live there for
  // exemplar selection to matter.
  auto [val_items, test_items] = split_task(fx.task, fraction_split(0.2, 11));
  std::vector<int> val_ids;
  for (const auto& item : val_items) {
    val_ids.push_back(std::stoi(item.input.substr(4, item.input.find(':') - 4)));
  }
  auto rank_of = [&](int id) {
    for (std::size_t r = 0; r < val_ids.size(); ++r) {
      if (val_ids[r] == id) return static_cast<int>(r);
    }
    return -1;
  };

  // Target behavior; item rules are anchored to the live block so exemplar
  // echoes of other items never shadow the query being answered:
  //   1. item i answers correctly when the exemplar of item unlock(i) is in
  //      the prompt (its output carries the EXM<unlock(i)>. marker), where
  //      unlock maps validation items cyclically onto each other and test
  //      items onto validation items,
  //   2. even items answer correctly under any instruction containing
  //      "BRIGHT", plus items divisible by 5,
  //   3. even items answer correctly under the seed instruction.
  std::vector<ScriptedRule> rules;
  auto correct_response = [](int i) {
    return "Pattern EXM" + std::to_string(i) + ". applies here. <answer>v" + std::to_string(i) +
           "</answer>";
  };
  auto item_key = [](int i) { return "ITEM" + std::to_string(i) + ":"; };
  for (int i = 0; i < n; ++i) {
    int r = rank_of(i);
    int unlock = r >= 0 ? val_ids[static_cast<std::size_t>((r + 3) % val_ids.size())]
                        : val_ids[static_cast<std::size_t>(i) % val_ids.size()];
    ScriptedRule rule;
    rule.contains_all = {"EXM" + std::to_string(unlock) + "."};
    rule.tail_contains = {item_key(i)};
    rule.response = correct_response(i);
    rules.push_back(std::move(rule));
  }
  for (int i = 0; i < n; ++i) {
    if (i % 2 == 0 || i % 5 == 0) {
      rules.push_back({{"BRIGHT"}, correct_response(i), {item_key(i)}});
    }
  }
  for (int i = 0; i < n; i += 2) {
    rules.push_back({{"step by step"}, correct_response(i), {item_key(i)}});
  }
  fx.target = std::make_shared<ScriptedEndpoint>(std::move(rules),
                                                 "Signal unclear. <answer>unknown</answer>",
                                                 "scripted-target");

  // Optimizer: paraphrases of the seed discover the BRIGHT wording on the
  // second variation; paraphrases of BRIGHT instructions keep the keyword.
  std::vector<ScriptedRule> opt_rules;
  opt_rules.push_back(
      {{"variation 2", "Let's think step by step."}, "Focus on the BRIGHT pattern in each signal."});
  opt_rules.push_back(
      {{"variation 4", "Let's think step by step."}, "Trace each signal carefully before answering."});
  opt_rules.push_back({{"Let's think step by step."}, "Read the signal and answer plainly."});
  opt_rules.push_back({{"BRIGHT"}, "Keep the BRIGHT pattern front and center."});
  fx.optimizer = std::make_shared<ScriptedEndpoint>(std::move(opt_rules), "Answer with care.",
                                                    "scripted-optimizer");
  return fx;
}

// The selftest matrix: {none, ape} x {none, random, mutation} on the fixture
// task, shared budget 32, writing results.jsonl under out_dir. Returns the
// reports in run order.
inline std::vector<RunReport> run_selftest_matrix(const std::string& out_dir) {
  // determinism check: stale results must not accumulate across reruns
  std::error_code ec;
  std::filesystem::remove(std::filesystem::path(out_dir) / "results.jsonl", ec);

  SelftestFixture fx = make_selftest_fixture();

  TaskData data;
  data.kind = fx.task.answer_kind;
  auto [val, test] = split_task(fx.task, fraction_split(0.2, 11));
  data.val = std::move(val);
  data.test = std::move(test);

  Endpoints endpoints;
  endpoints.target = fx.target.get();
  endpoints.optimizer = fx.optimizer.get();

  std::vector<RunConfig> configs;
  for (IoMethod io : {IoMethod::none, IoMethod::ape}) {
    for (EsMethod es : {EsMethod::none, EsMethod::random, EsMethod::mutation}) {
      RunConfig c;
      c.task_name = fx.task.name;
      c.io_method = io;
      c.es_method = es;
      c.k = 3;
      c.m_total = 32;
      c.m_io = io == IoMethod::none ? 0 : 8;
      c.m_es = c.m_total - c.m_io;
      c.seed = 5;
      c.split_seed = 11;
      configs.push_back(std::move(c));
    }
  }
  return run_matrix(configs, data, endpoints, out_dir, /*force=*/true);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// byte comparison against the committed golden results file
inline bool selftest_matches_golden(const std::string& out_dir, const std::string& golden_path,
                                    std::string* diagnostic = nullptr) {
  const std::string produced = read_file(out_dir + "/results.jsonl");
  const std::string golden = read_file(golden_path);
  if (produced == golden) return true;
  if (diagnostic) {
    std::size_t i = 0;
    while (i < produced.size() && i < golden.size() && produced[i] == golden[i]) ++i;
    *diagnostic = "results.jsonl diverges from golden at byte " + std::to_string(i) +
                  " (produced " + std::to_string(produced.size()) + " bytes, golden " +
                  std::to_string(golden.size()) + ")";
  }
  return false;
}

}  // namespace apo
