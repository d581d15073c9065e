#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apo/core.hpp"
#include "apo/datasets.hpp"
#include "apo/evaluation.hpp"
#include "apo/exemplar_selection.hpp"
#include "apo/instruction_optimization.hpp"
#include "apo/log.hpp"
#include "apo/providers.hpp"
#include "apo/sha256.hpp"

namespace apo {

using ordered_json = nlohmann::ordered_json;

enum class EsMethod { none, random, nearest, diversity, all, random_search, mutation };

inline const char* to_string(EsMethod m) {
  switch (m) {
    case EsMethod::none: return "none";
    case EsMethod::random: return "random";
    case EsMethod::nearest: return "nearest";
    case EsMethod::diversity: return "diversity";
    case EsMethod::all: return "all";
    case EsMethod::random_search: return "random_search";
    case EsMethod::mutation: return "mutation";
  }
  return "?";
}

inline IoMethod io_method_from(const std::string& name) {
  if (name == "none") return IoMethod::none;
  if (name == "ape") return IoMethod::ape;
  if (name == "opro") return IoMethod::opro;
  if (name == "protegi") return IoMethod::protegi;
  throw ConfigError("unknown IO method: " + name);
}

inline EsMethod es_method_from(const std::string& name) {
  if (name == "none") return EsMethod::none;
  if (name == "random") return EsMethod::random;
  if (name == "nearest") return EsMethod::nearest;
  if (name == "diversity") return EsMethod::diversity;
  if (name == "all") return EsMethod::all;
  if (name == "random_search") return EsMethod::random_search;
  if (name == "mutation") return EsMethod::mutation;
  throw ConfigError("unknown ES method: " + name);
}

// a heuristic selection costs no validation evaluations
inline bool es_uses_budget(EsMethod m) {
  return m == EsMethod::random_search || m == EsMethod::mutation;
}

// Full description of one run. m_io + m_es must equal m_total; the IO stage
// spends at most m_io, the ES stage the rest.
struct RunConfig {
  std::string task_name = "task";
  std::string task_description;  // meta-prompt wording; defaults to task_name

  IoMethod io_method = IoMethod::none;
  EsMethod es_method = EsMethod::none;
  int k = 3;
  int m_total = 32;
  int m_io = 0;
  int m_es = 32;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::optional<TemplateStyle> style;  // unset: follow the IO method's convention
  int population = 8;                  // mutation-search generation size Q
  int workers = 1;
  bool audit_heuristic_val = false;  // charge the reporting eval of heuristic selections
  IoParams io;                       // per-method knobs; allocation/style/seed filled at run time

  void validate() const {
    if (m_io + m_es != m_total) {
      throw ConfigError("m_io + m_es must equal m_total (" + std::to_string(m_io) + "+" +
                        std::to_string(m_es) + " != " + std::to_string(m_total) + ")");
    }
    if (m_io < 0 || m_es < 0 || m_total < 0) throw ConfigError("budgets must be non-negative");
    if (k < 0) throw ConfigError("k must be non-negative");
  }

  TemplateStyle effective_style() const {
    return style ? *style : default_style_for(io_method);
  }

  std::string digest() const {
    ordered_json j;
    j["task"] = task_name;
    j["io"] = to_string(io_method);
    j["es"] = to_string(es_method);
    j["k"] = k;
    j["m_total"] = m_total;
    j["m_io"] = m_io;
    j["m_es"] = m_es;
    j["seed"] = seed;
    j["split_seed"] = split_seed;
    j["style"] = to_string(effective_style());
    j["population"] = population;
    return sha256_hex(j.dump());
  }
};

struct BudgetAudit {
  int cap = 0;
  int consumed = 0;
  int io_consumed = 0;
  int es_consumed = 0;
};

struct RunReport {
  std::string config_digest;
  std::string task_name;
  IoMethod io_method = IoMethod::none;
  EsMethod es_method = EsMethod::none;
  int k = 0;
  int m_total = 0, m_io = 0, m_es = 0;
  std::uint64_t seed = 0;

  Instruction instruction;
  std::string selection_label;
  std::vector<int> exemplar_indices;  // empty for per-query selections
  bool per_query = false;
  std::string pool_instruction;  // instruction the exemplar pool was bootstrapped under
  int pool_size = 0;

  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  double generalization_gap = 0.0;  // val - test, exactly

  IoTrace io_trace;
  EsTrace es_trace;
  BudgetAudit budget;

  bool failed = false;
  std::string failure;
};

// endpoints for one run; the orchestrator does not own task data
struct Endpoints {
  GenerationEndpoint* target = nullptr;
  GenerationEndpoint* optimizer = nullptr;  // required for budgeted IO methods
  EmbeddingEndpoint* embedder = nullptr;    // required for nearest/diversity
};

namespace detail {

// uncharged full-split evaluation for reporting (test split, heuristic
// validation accuracy); never touches the ledger
inline EvalResult report_eval(const Instruction& instruction, const ExemplarSelection& selection,
                              TemplateStyle style, const std::vector<TaskItem>& split,
                              const AnswerKind& kind, GenerationEndpoint& target,
                              const EvalOptions& options) {
  if (!selection.per_query()) {
    Prompt prompt{instruction, selection.sequence, style};
    return evaluate_items(prompt, split, kind, target, options);
  }
  return evaluate_items(
      [&](const TaskItem& item, int) {
        Prompt prompt{instruction, selection.retriever(item.input), style};
        return render_prompt(prompt, item.input, kind);
      },
      split, kind, target, options);
}

}  // namespace detail

// Two-stage optimization under one ledger: spend m_io on instructions, then
// bootstrap the pool D_c(I*) from I*'s zero-shot validation records and spend
// the remaining m_es on exemplars conditioned on I*. The test evaluation is
// never budget-charged; the budget counts validation evaluations only.
inline RunReport two_stage(const RunConfig& config, const std::vector<TaskItem>& val_split,
                           const std::vector<TaskItem>& test_split, const AnswerKind& kind,
                           const Endpoints& endpoints) {
  config.validate();
  if (!endpoints.target) throw ConfigError("two_stage: target endpoint is required");
  if ((config.es_method == EsMethod::nearest || config.es_method == EsMethod::diversity) &&
      !endpoints.embedder) {
    throw ConfigError("ES method needs an embedding endpoint");
  }

  RunReport report;
  report.config_digest = config.digest();
  report.task_name = config.task_name;
  report.io_method = config.io_method;
  report.es_method = config.es_method;
  report.k = config.k;
  report.m_total = config.m_total;
  report.m_io = config.m_io;
  report.m_es = config.m_es;
  report.seed = config.seed;

  const TemplateStyle style = config.effective_style();
  const EvalOptions eval_options{config.workers, false};
  BudgetLedger ledger(config.m_total);

  // ---- stage 1: instructions ----
  IoParams io_params = config.io;
  io_params.allocation = config.m_io;
  io_params.seed = config.seed;
  io_params.style = style;
  io_params.eval = eval_options;
  io_params.task_description =
      config.task_description.empty() ? config.task_name : config.task_description;

  IOResult io_result = run_io(config.io_method, seed_instruction(), val_split, kind,
                              *endpoints.target, endpoints.optimizer, ledger, io_params);
  report.instruction = io_result.best_instruction;
  report.io_trace = std::move(io_result.trace);
  report.budget.io_consumed = ledger.consumed();

  // ---- stage 2: exemplars conditioned on I* ----
  const Prompt zero_shot{report.instruction, {}, style};
  const std::string zero_digest = prompt_digest(zero_shot, kind);
  int es_spent_on_seed_eval = 0;
  EvalResult base_result;
  if (const EvalResult* cached = ledger.find(zero_digest)) {
    base_result = *cached;  // the usual case: IO already evaluated I*
  } else {
    if (config.m_es <= 0 && es_uses_budget(config.es_method)) {
      log_warn("no ES budget to evaluate I* zero-shot; the search will have nothing to spend");
    }
    if (config.m_es > 0 && ledger.remaining() > 0) {
      int before = ledger.consumed();
      base_result = evaluate_prompt(zero_shot, val_split, kind, *endpoints.target, ledger,
                                    eval_options);
      es_spent_on_seed_eval = ledger.consumed() - before;
    } else {
      // no stage budget to draw from; bootstrap still needs the records
      base_result = evaluate_items(zero_shot, val_split, kind, *endpoints.target, eval_options);
      log_info("evaluated I* zero-shot uncharged for pool bootstrap");
    }
  }
  ExemplarPool pool = bootstrap_pool(base_result, val_split, report.instruction);
  report.pool_instruction = pool.conditioning_instruction.text;
  report.pool_size = static_cast<int>(pool.size());

  ExemplarSelection selection = select_none();
  std::optional<double> search_val_accuracy;
  switch (config.es_method) {
    case EsMethod::none: selection = select_none(); break;
    case EsMethod::random: selection = select_random(pool, config.k, config.seed); break;
    case EsMethod::nearest:
      if (pool.empty()) {
        log_warn("empty pool; nearest degrades to no exemplars");
      } else {
        selection = select_nearest(pool, config.k, *endpoints.embedder);
      }
      break;
    case EsMethod::diversity:
      if (pool.empty()) {
        log_warn("empty pool; diversity degrades to no exemplars");
      } else {
        selection = select_diversity(pool, config.k, *endpoints.embedder, config.seed);
      }
      break;
    case EsMethod::all: selection = select_all(pool); break;
    case EsMethod::random_search:
    case EsMethod::mutation: {
      EsSearchParams params;
      params.k = config.k;
      params.allocation = std::max(0, config.m_es - es_spent_on_seed_eval);
      params.seed = config.seed;
      params.population = config.population;
      params.style = style;
      params.eval = eval_options;
      EsSearchResult es_result =
          config.es_method == EsMethod::random_search
              ? random_search(pool, report.instruction, val_split, kind, *endpoints.target,
                              ledger, params)
              : mutation_search(pool, report.instruction, val_split, kind, *endpoints.target,
                                ledger, params);
      selection = std::move(es_result.selection);
      report.es_trace = std::move(es_result.trace);
      if (report.es_trace.best_index >= 0) search_val_accuracy = report.es_trace.best_score();
      break;
    }
  }
  report.selection_label = selection.label;
  report.per_query = selection.per_query();
  if (!selection.per_query()) {
    for (const auto& e : selection.sequence) report.exemplar_indices.push_back(e.source_index);
  }

  // ---- validation accuracy of the chosen prompt ----
  if (search_val_accuracy) {
    report.val_accuracy = *search_val_accuracy;
  } else if (!selection.per_query() && selection.sequence.empty()) {
    report.val_accuracy = base_result.accuracy;  // zero-shot, already measured
  } else if (config.audit_heuristic_val &&
             ledger.consumed() - report.budget.io_consumed < config.m_es) {
    if (!selection.per_query()) {
      Prompt prompt{report.instruction, selection.sequence, style};
      report.val_accuracy =
          evaluate_prompt(prompt, val_split, kind, *endpoints.target, ledger, eval_options)
              .accuracy;
    } else {
      // a per-query selection has no single prompt digest; charge the pass
      // under a synthetic digest derived from the retriever identity
      const std::string digest =
          sha256_hex("per_query\x1f" + selection.label + "\x1f" + zero_digest);
      EvalResult result;
      if (const EvalResult* cached = ledger.find(digest)) {
        result = *cached;
      } else {
        ledger.charge(digest);
        result = detail::report_eval(report.instruction, selection, style, val_split, kind,
                                     *endpoints.target, eval_options);
        ledger.store(digest, result);
      }
      report.val_accuracy = result.accuracy;
    }
  } else {
    if (config.audit_heuristic_val) {
      log_warn("audit requested but the ES stage allocation is spent; reporting uncharged");
    }
    // heuristic selections are free by convention; report without charging
    report.val_accuracy = detail::report_eval(report.instruction, selection, style, val_split,
                                              kind, *endpoints.target, eval_options)
                              .accuracy;
  }
  report.budget.es_consumed = ledger.consumed() - report.budget.io_consumed;

  // ---- held-out test evaluation (never charged) ----
  report.test_accuracy = detail::report_eval(report.instruction, selection, style, test_split,
                                             kind, *endpoints.target, eval_options)
                             .accuracy;
  report.generalization_gap = report.val_accuracy - report.test_accuracy;

  report.budget.cap = ledger.cap();
  report.budget.consumed = ledger.consumed();
  return report;
}

// ---- serialization ----

inline ordered_json to_json(const IoTrace& trace) {
  ordered_json entries = ordered_json::array();
  for (const auto& e : trace.entries) {
    entries.push_back(ordered_json{
        {"instruction", e.candidate}, {"score", e.score}, {"budget_index", e.budget_index}});
  }
  return ordered_json{{"entries", entries}, {"best_index", trace.best_index}};
}

inline ordered_json to_json(const EsTrace& trace) {
  ordered_json entries = ordered_json::array();
  for (const auto& e : trace.entries) {
    entries.push_back(ordered_json{{"indices", e.candidate.indices},
                                   {"parent", e.candidate.parent},
                                   {"generation", e.candidate.generation},
                                   {"score", e.score},
                                   {"budget_index", e.budget_index}});
  }
  return ordered_json{{"entries", entries}, {"best_index", trace.best_index}};
}

inline ordered_json to_json(const RunReport& r) {
  ordered_json j;
  j["config_digest"] = r.config_digest;
  j["task"] = r.task_name;
  j["io"] = to_string(r.io_method);
  j["es"] = to_string(r.es_method);
  j["k"] = r.k;
  j["m_total"] = r.m_total;
  j["m_io"] = r.m_io;
  j["m_es"] = r.m_es;
  j["seed"] = r.seed;
  j["failed"] = r.failed;
  if (r.failed) {
    j["failure"] = r.failure;
    return j;
  }
  j["instruction"] = r.instruction.text;
  j["instruction_origin"] = to_string(r.instruction.origin);
  j["selection"] = r.selection_label;
  j["per_query"] = r.per_query;
  j["exemplar_indices"] = r.exemplar_indices;
  j["pool_instruction"] = r.pool_instruction;
  j["pool_size"] = r.pool_size;
  j["val_accuracy"] = r.val_accuracy;
  j["test_accuracy"] = r.test_accuracy;
  j["generalization_gap"] = r.generalization_gap;
  j["budget"] = ordered_json{{"cap", r.budget.cap},
                             {"consumed", r.budget.consumed},
                             {"io_consumed", r.budget.io_consumed},
                             {"es_consumed", r.budget.es_consumed}};
  j["io_trace"] = to_json(r.io_trace);
  j["es_trace"] = to_json(r.es_trace);
  return j;
}

// ---- results.jsonl persistence (append-only, digest-deduplicated) ----

// digests of runs already completed successfully; failed runs are retried
inline std::set<std::string> existing_digests(const std::string& results_path) {
  std::set<std::string> digests;
  std::ifstream in(results_path);
  if (!in) return digests;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.contains("config_digest") && !j.value("failed", false)) {
        digests.insert(j["config_digest"].get<std::string>());
      }
    } catch (const nlohmann::json::exception&) {
      log_warn("skipping unparsable line in " + results_path);
    }
  }
  return digests;
}

inline void append_report(const std::string& results_path, const RunReport& report) {
  std::ofstream out(results_path, std::ios::app);
  if (!out) throw IoError("cannot open for append: " + results_path);
  out << to_json(report).dump() << "\n";
}

// ---- aggregate tables ----

inline const std::vector<IoMethod>& io_method_order() {
  static const std::vector<IoMethod> order{IoMethod::none, IoMethod::ape, IoMethod::opro,
                                           IoMethod::protegi};
  return order;
}

inline const std::vector<EsMethod>& es_method_order() {
  static const std::vector<EsMethod> order{EsMethod::none,      EsMethod::random,
                                           EsMethod::nearest,   EsMethod::diversity,
                                           EsMethod::all,       EsMethod::random_search,
                                           EsMethod::mutation};
  return order;
}

struct MatrixCell {
  double sum = 0.0;
  int count = 0;
  double mean() const { return count == 0 ? 0.0 : sum / count; }
};

// rows = IO methods, columns = ES methods, cell = mean test accuracy over the
// reports that landed there; Max-delta row/column against the No IO / No ES
// baselines round out the table
struct MatrixTable {
  std::map<std::pair<IoMethod, EsMethod>, MatrixCell> cells;

  void add(const RunReport& r) {
    if (r.failed) return;
    auto& cell = cells[{r.io_method, r.es_method}];
    cell.sum += r.test_accuracy;
    cell.count += 1;
  }

  bool has(IoMethod io, EsMethod es) const { return cells.count({io, es}) > 0; }
  double at(IoMethod io, EsMethod es) const { return cells.at({io, es}).mean(); }
};

namespace detail {

inline std::string fmt_acc(double accuracy) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", accuracy * 100.0);
  return buf;
}

inline std::string fmt_delta(double delta) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f", delta * 100.0);
  return buf;
}

}  // namespace detail

inline std::string render_matrix_csv(const MatrixTable& table) {
  std::string out = "io";
  for (auto es : es_method_order()) out += std::string(",") + to_string(es);
  out += ",max_delta_over_no_es\n";
  for (auto io : io_method_order()) {
    bool row_any = false;
    for (auto es : es_method_order()) row_any = row_any || table.has(io, es);
    if (!row_any) continue;
    out += to_string(io);
    double best = -1.0;
    for (auto es : es_method_order()) {
      out += ",";
      if (table.has(io, es)) {
        out += detail::fmt_acc(table.at(io, es));
        if (es != EsMethod::none) best = std::max(best, table.at(io, es));
      }
    }
    out += ",";
    if (best >= 0.0 && table.has(io, EsMethod::none)) {
      out += detail::fmt_delta(best - table.at(io, EsMethod::none));
    }
    out += "\n";
  }
  // final row: max improvement over the No IO baseline per column
  out += "max_delta_over_no_io";
  for (auto es : es_method_order()) {
    out += ",";
    double best = -1.0;
    for (auto io : io_method_order()) {
      if (io != IoMethod::none && table.has(io, es)) best = std::max(best, table.at(io, es));
    }
    if (best >= 0.0 && table.has(IoMethod::none, es)) {
      out += detail::fmt_delta(best - table.at(IoMethod::none, es));
    }
  }
  out += ",\n";
  return out;
}

inline std::string render_matrix_md(const MatrixTable& table) {
  std::string out = "| IO \\ ES |";
  for (auto es : es_method_order()) out += std::string(" ") + to_string(es) + " |";
  out += " max Δ over no ES |\n|---|";
  for (std::size_t i = 0; i < es_method_order().size() + 1; ++i) out += "---|";
  out += "\n";
  for (auto io : io_method_order()) {
    bool row_any = false;
    for (auto es : es_method_order()) row_any = row_any || table.has(io, es);
    if (!row_any) continue;
    out += std::string("| ") + to_string(io) + " |";
    double best = -1.0;
    for (auto es : es_method_order()) {
      if (table.has(io, es)) {
        out += " " + detail::fmt_acc(table.at(io, es)) + " |";
        if (es != EsMethod::none) best = std::max(best, table.at(io, es));
      } else {
        out += "  |";
      }
    }
    if (best >= 0.0 && table.has(io, EsMethod::none)) {
      out += " " + detail::fmt_delta(best - table.at(io, EsMethod::none)) + " |";
    } else {
      out += "  |";
    }
    out += "\n";
  }
  return out;
}

inline std::string render_gaps_csv(const std::vector<RunReport>& reports) {
  std::string out = "run,val_accuracy,test_accuracy,generalization_gap\n";
  for (const auto& r : reports) {
    if (r.failed) continue;
    out += r.config_digest.substr(0, 12) + "-" + r.task_name + "-" + to_string(r.io_method) +
           "-" + to_string(r.es_method) + "," + detail::fmt_acc(r.val_accuracy) + "," +
           detail::fmt_acc(r.test_accuracy) + "," + detail::fmt_delta(r.generalization_gap) +
           "\n";
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write: " + path);
  out << content;
}

// matrix.csv, matrix.md and gaps.csv under out_dir, deterministic order
inline void emit_report(const std::vector<RunReport>& reports, const std::string& out_dir) {
  if (reports.empty()) throw ConfigError("emit_report: no reports");
  std::filesystem::create_directories(out_dir);
  MatrixTable table;
  for (const auto& r : reports) table.add(r);
  write_file(out_dir + "/matrix.csv", render_matrix_csv(table));
  write_file(out_dir + "/matrix.md", render_matrix_md(table));
  write_file(out_dir + "/gaps.csv", render_gaps_csv(reports));
}

struct TaskData {
  std::vector<TaskItem> val;
  std::vector<TaskItem> test;
  AnswerKind kind;
};

// Runs each config with a fresh ledger, appending to results.jsonl as runs
// complete; per-run failures are recorded and the matrix continues. Reruns of
// a digest already present are skipped unless force is set.
inline std::vector<RunReport> run_matrix(const std::vector<RunConfig>& configs,
                                         const TaskData& data, const Endpoints& endpoints,
                                         const std::string& out_dir, bool force = false) {
  std::filesystem::create_directories(out_dir);
  const std::string results_path = out_dir + "/results.jsonl";
  std::set<std::string> done = existing_digests(results_path);

  std::vector<RunReport> reports;
  for (const auto& config : configs) {
    const std::string digest = config.digest();
    if (!force && done.count(digest)) {
      log_info("skipping already-recorded run " + digest.substr(0, 12) + " (use --force to redo)");
      continue;
    }
    RunReport report;
    try {
      report = two_stage(config, data.val, data.test, data.kind, endpoints);
    } catch (const Error& e) {
      report.config_digest = digest;
      report.task_name = config.task_name;
      report.io_method = config.io_method;
      report.es_method = config.es_method;
      report.k = config.k;
      report.m_total = config.m_total;
      report.m_io = config.m_io;
      report.m_es = config.m_es;
      report.seed = config.seed;
      report.failed = true;
      report.failure = e.what();
      log_error("run failed: " + std::string(e.what()));
    }
    append_report(results_path, report);
    done.insert(digest);
    reports.push_back(std::move(report));
  }
  if (!reports.empty()) emit_report(reports, out_dir);
  return reports;
}

}  // namespace apo
