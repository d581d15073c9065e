#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apo/core.hpp"
#include "apo/errors.hpp"
#include "apo/log.hpp"
#include "apo/rng.hpp"

namespace apo {

struct TaskItem {
  std::string input;                 // query shown to the model
  std::string target;                // gold answer
  std::vector<std::string> options;  // multiple-choice only, in file order
};

struct Task {
  std::string name;
  AnswerKind answer_kind;
  std::vector<TaskItem> items;  // file order
};

// Exactly one of the two modes: fraction split of a single file, or explicit
// val/test files passed through untouched.
struct SplitSpec {
  std::optional<double> val_fraction;  // in (0,1)
  std::uint64_t seed = 0;
  bool explicit_files = false;
};

inline SplitSpec fraction_split(double fraction, std::uint64_t seed) {
  SplitSpec s;
  s.val_fraction = fraction;
  s.seed = seed;
  return s;
}

inline SplitSpec explicit_split() {
  SplitSpec s;
  s.explicit_files = true;
  return s;
}

// Task-name table mirroring the constrained-answer task list; multiple-choice
// names cover the standard BBH suite. Unknown names fall back to target-shape
// inference with a warning.
inline AnswerKind answer_kind_for_task(const std::string& name,
                                       const std::vector<TaskItem>& items) {
  static const std::map<std::string, AnswerKindTag> table = {
      {"boolean_expressions", AnswerKindTag::boolean_true_false},
      {"formal_fallacies", AnswerKindTag::valid_invalid},
      {"navigate", AnswerKindTag::yes_no},
      {"sports_understanding", AnswerKindTag::yes_no},
      {"causal_judgement", AnswerKindTag::yes_no},
      {"web_of_lies", AnswerKindTag::yes_no},
      {"word_sorting", AnswerKindTag::word_sorting},
      {"date_understanding", AnswerKindTag::multiple_choice},
      {"disambiguation_qa", AnswerKindTag::multiple_choice},
      {"geometric_shapes", AnswerKindTag::multiple_choice},
      {"hyperbaton", AnswerKindTag::multiple_choice},
      {"logical_deduction_three_objects", AnswerKindTag::multiple_choice},
      {"logical_deduction_five_objects", AnswerKindTag::multiple_choice},
      {"logical_deduction_seven_objects", AnswerKindTag::multiple_choice},
      {"movie_recommendation", AnswerKindTag::multiple_choice},
      {"penguins_in_a_table", AnswerKindTag::multiple_choice},
      {"reasoning_about_colored_objects", AnswerKindTag::multiple_choice},
      {"ruin_names", AnswerKindTag::multiple_choice},
      {"salient_translation_error_detection", AnswerKindTag::multiple_choice},
      {"snarks", AnswerKindTag::multiple_choice},
      {"temporal_sequences", AnswerKindTag::multiple_choice},
      {"tracking_shuffled_objects_three_objects", AnswerKindTag::multiple_choice},
      {"tracking_shuffled_objects_five_objects", AnswerKindTag::multiple_choice},
      {"tracking_shuffled_objects_seven_objects", AnswerKindTag::multiple_choice},
      {"multistep_arithmetic_two", AnswerKindTag::free},
      {"object_counting", AnswerKindTag::free},
      {"dyck_languages", AnswerKindTag::free},
  };
  auto it = table.find(name);
  if (it != table.end()) return make_answer_kind(it->second);

  // infer: "(X)" targets mean multiple choice
  bool all_option_shaped = !items.empty();
  for (const auto& item : items) {
    const std::string t = trim_copy(item.target);
    if (!(t.size() == 3 && t[0] == '(' && t[2] == ')' && std::isalpha(static_cast<unsigned char>(t[1])))) {
      all_option_shaped = false;
      break;
    }
  }
  log_warn("task '" + name + "' not in the answer-kind table; inferred " +
           std::string(all_option_shaped ? "multiple_choice" : "free"));
  return make_answer_kind(all_option_shaped ? AnswerKindTag::multiple_choice
                                            : AnswerKindTag::free);
}

// pulls "(A) ..." option lines out of a BBH input, if an Options block exists
inline std::vector<std::string> parse_inline_options(const std::string& input) {
  std::vector<std::string> options;
  std::size_t pos = input.find("Options:");
  if (pos == std::string::npos) return options;
  std::istringstream lines(input.substr(pos));
  std::string line;
  std::getline(lines, line);  // skip "Options:" itself
  while (std::getline(lines, line)) {
    std::string t = trim_copy(line);
    if (t.size() >= 3 && t[0] == '(' && t[2] == ')') {
      options.push_back(t);
    } else if (!t.empty()) {
      break;
    }
  }
  return options;
}

// BBH task file: {"examples": [{"input": ..., "target": ...}, ...]}
inline Task load_bbh_task(const std::string& path, const std::string& task_name = "") {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open BBH task file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("BBH JSON parse error in " + path + ": " + e.what());
  }
  if (!doc.contains("examples") || !doc["examples"].is_array()) {
    throw SchemaError("BBH file missing \"examples\" array: " + path);
  }

  Task task;
  if (!task_name.empty()) {
    task.name = task_name;
  } else {
    // derive from filename: ".../word_sorting.json" -> "word_sorting"
    std::string stem = path;
    if (auto slash = stem.find_last_of("/\\"); slash != std::string::npos) stem = stem.substr(slash + 1);
    if (auto dot = stem.find_last_of('.'); dot != std::string::npos) stem = stem.substr(0, dot);
    task.name = stem;
  }

  for (const auto& rec : doc["examples"]) {
    if (!rec.contains("input") || !rec.contains("target")) {
      throw SchemaError("BBH record missing input/target in " + path);
    }
    TaskItem item;
    item.input = rec["input"].get<std::string>();
    item.target = rec["target"].get<std::string>();
    if (item.target.empty()) throw SchemaError("empty target in " + path);
    item.options = parse_inline_options(item.input);
    task.items.push_back(std::move(item));
  }
  if (task.items.empty()) throw SchemaError("BBH task has no examples: " + path);
  task.answer_kind = answer_kind_for_task(task.name, task.items);
  return task;
}

// minimal RFC-4180 row reader: quoted fields, doubled quotes, embedded
// newlines
inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open CSV file: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char c = data[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < data.size() && data[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
    } else {
      field.push_back(c);
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace detail {

inline std::vector<TaskItem> mmlu_items(const std::string& path) {
  std::vector<TaskItem> items;
  auto rows = read_csv(path);
  static const char* labels[4] = {"(A)", "(B)", "(C)", "(D)"};
  for (const auto& row : rows) {
    if (row.size() == 1 && row[0].empty()) continue;  // stray blank line
    if (row.size() != 6) {
      throw SchemaError("MMLU row in " + path + " has " + std::to_string(row.size()) +
                        " fields, expected 6");
    }
    TaskItem item;
    item.input = row[0];
    for (int i = 0; i < 4; ++i) {
      item.options.push_back(std::string(labels[i]) + " " + row[1 + i]);
      item.input += "\n" + item.options.back();
    }
    std::string ans = trim_copy(row[5]);
    if (ans.size() != 1 || ans[0] < 'A' || ans[0] > 'D') {
      throw SchemaError("MMLU answer letter '" + ans + "' out of range in " + path);
    }
    item.target = "(" + ans + ")";  // canonical "(X)" form
    items.push_back(std::move(item));
  }
  if (items.empty()) throw SchemaError("MMLU file has no rows: " + path);
  return items;
}

}  // namespace detail

// MMLU official splits: question, 4 options, answer letter per row. Items are
// returned in file order, targets normalized to "(X)".
inline std::pair<Task, Task> load_mmlu_task(const std::string& val_path,
                                            const std::string& test_path,
                                            const std::string& task_name) {
  Task val_task;
  val_task.name = task_name;
  val_task.answer_kind = make_answer_kind(AnswerKindTag::multiple_choice);
  val_task.items = detail::mmlu_items(val_path);

  Task test_task = val_task;
  test_task.items = detail::mmlu_items(test_path);
  return {val_task, test_task};
}

// Seeded uniform shuffle of item indices; the first ceil(fraction*N) indices
// become validation, the rest test. Each side is then re-sorted by original
// index so Exemplar.source_index stays a stable identity.
inline std::pair<std::vector<TaskItem>, std::vector<TaskItem>> split_task(const Task& task,
                                                                          const SplitSpec& spec) {
  if (spec.explicit_files) {
    throw ConfigError("split_task called with explicit-files spec; load the two files instead");
  }
  if (!spec.val_fraction || *spec.val_fraction <= 0.0 || *spec.val_fraction >= 1.0) {
    throw ConfigError("val_fraction must lie in (0,1)");
  }
  const std::size_t n = task.items.size();
  const auto n_val =
      static_cast<std::size_t>(std::ceil(*spec.val_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n) {
    throw DegenerateSplit("split leaves validation or test empty (N=" + std::to_string(n) +
                          ", fraction=" + std::to_string(*spec.val_fraction) + ")");
  }

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  SplitMix64 rng(spec.seed);
  shuffle(idx, rng);

  std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> test_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  std::vector<TaskItem> val, test;
  val.reserve(val_idx.size());
  test.reserve(test_idx.size());
  for (auto i : val_idx) val.push_back(task.items[i]);
  for (auto i : test_idx) test.push_back(task.items[i]);
  return {std::move(val), std::move(test)};
}

}  // namespace apo
