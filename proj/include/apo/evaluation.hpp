#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "apo/core.hpp"
#include "apo/datasets.hpp"
#include "apo/errors.hpp"
#include "apo/log.hpp"
#include "apo/providers.hpp"
#include "apo/sha256.hpp"

namespace apo {

// Returns the contents of the last well-formed <answer>...</answer> span
// (the "<\answer>" closer is accepted too), trimmed. No span -> nullopt.
// Models sometimes restate their answer; the final statement is the
// commitment, hence last-match.
inline std::optional<std::string> extract_answer(const std::string& raw_output) {
  static constexpr const char* kOpen = "<answer>";
  static constexpr const char* kCloseSlash = "</answer>";
  static constexpr const char* kCloseBackslash = "<\\answer>";

  std::optional<std::string> found;
  std::size_t pos = 0;
  while (true) {
    std::size_t open = raw_output.find(kOpen, pos);
    if (open == std::string::npos) break;
    std::size_t body = open + 8;
    std::size_t close_a = raw_output.find(kCloseSlash, body);
    std::size_t close_b = raw_output.find(kCloseBackslash, body);
    std::size_t close = std::min(close_a, close_b);
    if (close == std::string::npos) break;
    found = trim_copy(raw_output.substr(body, close - body));
    pos = close + 9;
  }
  return found;
}

namespace detail {

inline std::string fold_case(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// "(B)", "B" and "(B) full option text" all read as letter B
inline std::optional<char> option_letter(const std::string& s) {
  const std::string t = trim_copy(s);
  if (t.size() >= 3 && t[0] == '(' && t[2] == ')' &&
      std::isalpha(static_cast<unsigned char>(t[1]))) {
    return static_cast<char>(std::toupper(static_cast<unsigned char>(t[1])));
  }
  if (t.size() == 1 && std::isalpha(static_cast<unsigned char>(t[0]))) {
    return static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
  }
  return std::nullopt;
}

// commas and any whitespace runs (incl. newlines) collapse to single spaces
inline std::string normalize_word_list(const std::string& s) {
  std::string out;
  bool pending_space = false;
  for (char raw : s) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c) || raw == ',') {
      if (!out.empty()) pending_space = true;
    } else {
      if (pending_space) {
        out.push_back(' ');
        pending_space = false;
      }
      out.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  return out;
}

}  // namespace detail

// Kind-specific equality of an extracted answer against the gold target.
inline bool score(const std::string& extracted, const std::string& gold, const AnswerKind& kind) {
  switch (kind.kind) {
    case AnswerKindTag::multiple_choice: {
      auto a = detail::option_letter(extracted);
      auto b = detail::option_letter(gold);
      if (a && b) return *a == *b;
      return detail::fold_case(trim_copy(extracted)) == detail::fold_case(trim_copy(gold));
    }
    case AnswerKindTag::boolean_true_false:
    case AnswerKindTag::yes_no:
    case AnswerKindTag::valid_invalid:
      return detail::fold_case(trim_copy(extracted)) == detail::fold_case(trim_copy(gold));
    case AnswerKindTag::word_sorting:
      return detail::normalize_word_list(extracted) == detail::normalize_word_list(gold);
    case AnswerKindTag::free:
      return detail::fold_case(trim_copy(extracted)) == detail::fold_case(trim_copy(gold));
  }
  return false;
}

struct EvalRecord {
  int item_index = 0;
  std::string raw_output;
  std::optional<std::string> extracted;
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;  // (#correct) / (#records)
  std::vector<EvalRecord> records;
  std::string prompt_digest;
};

// Stable identity of a prompt independent of the live query: style tag,
// instruction text, exemplar source indices, and the rendered template with a
// sentinel in the query slot.
inline std::string prompt_digest(const Prompt& prompt, const AnswerKind& kind) {
  Sha256 h;
  h.update(to_string(prompt.style));
  h.update("\x1f");
  h.update(prompt.instruction.text);
  h.update("\x1f");
  std::string idx;
  for (const auto& e : prompt.exemplars) {
    idx += std::to_string(e.source_index);
    idx += ",";
  }
  h.update(idx);
  h.update("\x1f");
  h.update(render_prompt(prompt, "\x02query\x03", kind));
  return h.hex_digest();
}

struct EvalOptions {
  int workers = 1;
  bool per_item_failure_fatal = false;  // default: log and mark incorrect
};

// Runs one generate call per item (greedy target decoding) and scores the
// extractions. `prompt_for_item` lets per-query selections swap exemplars per
// item; records come back in item order no matter how workers interleave.
inline EvalResult evaluate_items(
    const std::function<std::string(const TaskItem&, int)>& prompt_for_item,
    const std::vector<TaskItem>& split, const AnswerKind& kind, GenerationEndpoint& target,
    const EvalOptions& options = {}) {
  if (split.empty()) throw ConfigError("evaluate_items: empty split");

  EvalResult result;
  result.records.resize(split.size());
  const DecodingParams params = target_decoding();

  auto eval_one = [&](int i) {
    EvalRecord rec;
    rec.item_index = i;
    try {
      rec.raw_output = target.generate(prompt_for_item(split[static_cast<std::size_t>(i)], i), params);
      rec.extracted = extract_answer(rec.raw_output);
      rec.correct =
          rec.extracted && score(*rec.extracted, split[static_cast<std::size_t>(i)].target, kind);
    } catch (const Error& e) {
      if (options.per_item_failure_fatal) throw;
      log_warn("item " + std::to_string(i) + " failed after retries: " + e.what());
      rec.raw_output.clear();
      rec.extracted = std::nullopt;
      rec.correct = false;
    }
    result.records[static_cast<std::size_t>(i)] = std::move(rec);
  };

  const int n = static_cast<int>(split.size());
  if (options.workers <= 1) {
    for (int i = 0; i < n; ++i) eval_one(i);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&] {
      while (true) {
        int i = next.fetch_add(1);
        if (i >= n) break;
        try {
          eval_one(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
          break;
        }
      }
    };
    std::vector<std::thread> threads;
    int n_threads = std::min(options.workers, n);
    threads.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  int correct = 0;
  for (const auto& rec : result.records) correct += rec.correct ? 1 : 0;
  result.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return result;
}

inline EvalResult evaluate_items(const Prompt& prompt, const std::vector<TaskItem>& split,
                                 const AnswerKind& kind, GenerationEndpoint& target,
                                 const EvalOptions& options = {}) {
  auto result = evaluate_items(
      [&](const TaskItem& item, int) { return render_prompt(prompt, item.input, kind); }, split,
      kind, target, options);
  result.prompt_digest = prompt_digest(prompt, kind);
  return result;
}

// Counts full-validation-split prompt evaluations by the target model — the
// sole cost unit. A digest is charged once; repeat evaluations return the
// cached result for free (a deterministic greedy rerun adds no information).
class BudgetLedger {
 public:
  explicit BudgetLedger(int cap) : cap_(cap) {
    if (cap < 0) throw ConfigError("budget cap must be >= 0");
  }

  int cap() const { return cap_; }

  int consumed() const {
    std::lock_guard<std::mutex> lock(mu_);
    return consumed_;
  }

  int remaining() const {
    std::lock_guard<std::mutex> lock(mu_);
    return cap_ - consumed_;
  }

  bool contains(const std::string& digest) const {
    std::lock_guard<std::mutex> lock(mu_);
    return cache_.count(digest) > 0;
  }

  const EvalResult* find(const std::string& digest) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(digest);
    return it == cache_.end() ? nullptr : &it->second;
  }

  // charged once, atomically, before dispatch
  void charge(const std::string& digest) {
    std::lock_guard<std::mutex> lock(mu_);
    if (cache_.count(digest)) return;
    if (consumed_ >= cap_) {
      throw BudgetExhausted("budget exhausted: " + std::to_string(consumed_) + "/" +
                            std::to_string(cap_) + " evaluations consumed");
    }
    ++consumed_;
  }

  void store(const std::string& digest, EvalResult result) {
    std::lock_guard<std::mutex> lock(mu_);
    entries_.emplace_back(digest, result.accuracy);
    cache_[digest] = std::move(result);
  }

  // (digest, score) in evaluation order
  std::vector<std::pair<std::string, double>> entries() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_;
  }

 private:
  int cap_;
  int consumed_ = 0;
  std::map<std::string, EvalResult> cache_;
  std::vector<std::pair<std::string, double>> entries_;
  mutable std::mutex mu_;
};

// The charged path: one budget unit per distinct prompt digest. A cached
// digest returns the stored result and charges nothing; an uncached request
// at the cap raises BudgetExhausted.
inline EvalResult evaluate_prompt(const Prompt& prompt, const std::vector<TaskItem>& split,
                                  const AnswerKind& kind, GenerationEndpoint& target,
                                  BudgetLedger& ledger, const EvalOptions& options = {}) {
  const std::string digest = prompt_digest(prompt, kind);
  if (const EvalResult* cached = ledger.find(digest)) return *cached;
  ledger.charge(digest);
  EvalResult result = evaluate_items(prompt, split, kind, target, options);
  ledger.store(digest, result);
  return result;
}

// One exemplar per correct record: the item's input, the model's full output
// (reasoning included, not just the answer span), and the parsed answer.
// Ordered by item index, which keeps the pool in validation-split order.
inline ExemplarPool bootstrap_pool(const EvalResult& result, const std::vector<TaskItem>& split,
                                   const Instruction& conditioning_instruction) {
  ExemplarPool pool;
  pool.conditioning_instruction = conditioning_instruction;
  for (const auto& rec : result.records) {
    if (!rec.correct) continue;
    Exemplar e;
    e.query_text = split[static_cast<std::size_t>(rec.item_index)].input;
    e.model_output = rec.raw_output;
    e.final_answer = *rec.extracted;
    e.source_index = rec.item_index;
    pool.exemplars.push_back(std::move(e));
  }
  return pool;
}

// validation accuracy minus test accuracy of the selected prompt
inline double generalization_gap(double val_accuracy, double test_accuracy) {
  return val_accuracy - test_accuracy;
}

}  // namespace apo
