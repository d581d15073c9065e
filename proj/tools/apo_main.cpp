// apo: black-box prompt optimization over instructions and exemplars.
// Subcommands: run (one config), matrix (directory of configs), report
// (re-render tables from results.jsonl), selftest (scripted end-to-end check).

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "apo/config.hpp"
#include "apo/log.hpp"
#include "apo/orchestrator.hpp"
#include "apo/selftest.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string out_dir = "out";
  bool force = false;
  std::optional<std::string> io;
  std::optional<std::string> es;
  std::optional<int> k;
  std::optional<int> m;
  std::optional<int> m_io;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

void apply_overrides(apo::RunConfig& rc, const CommonFlags& flags) {
  if (flags.io) rc.io_method = apo::io_method_from(*flags.io);
  if (flags.es) rc.es_method = apo::es_method_from(*flags.es);
  if (flags.k) rc.k = *flags.k;
  if (flags.m) {
    rc.m_total = *flags.m;
    rc.m_es = rc.m_total - rc.m_io;
  }
  if (flags.m_io) {
    rc.m_io = *flags.m_io;
    rc.m_es = rc.m_total - rc.m_io;
  }
  if (flags.seed) rc.seed = *flags.seed;
  if (flags.workers) rc.workers = *flags.workers;
  rc.validate();
}

int cmd_run(const std::string& config_path, const CommonFlags& flags) {
  auto cfg = apo::KeyValueConfig::parse_file(config_path);
  apo::RunConfig rc = apo::run_config_from(cfg);
  apply_overrides(rc, flags);
  apo::TaskData data = apo::task_data_from_config(cfg);
  apo::OwnedEndpoints endpoints = apo::endpoints_from_config(cfg);

  auto reports = apo::run_matrix({rc}, data, endpoints.view(), flags.out_dir, flags.force);
  if (reports.empty()) {
    std::cout << "run already recorded in " << flags.out_dir << "/results.jsonl (use --force)\n";
    return 0;
  }
  const auto& r = reports.front();
  if (r.failed) {
    std::cout << "run failed: " << r.failure << "\n";
    return 1;
  }
  std::cout << "task            " << r.task_name << "\n"
            << "io/es           " << apo::to_string(r.io_method) << " / "
            << apo::to_string(r.es_method) << "\n"
            << "instruction     " << r.instruction.text << "\n"
            << "selection       " << r.selection_label << "\n"
            << "val accuracy    " << r.val_accuracy << "\n"
            << "test accuracy   " << r.test_accuracy << "\n"
            << "gap (val-test)  " << r.generalization_gap << "\n"
            << "budget          " << r.budget.consumed << "/" << r.budget.cap << " (io "
            << r.budget.io_consumed << ", es " << r.budget.es_consumed << ")\n"
            << "results         " << flags.out_dir << "/results.jsonl\n";
  return 0;
}

int cmd_matrix(const std::string& config_dir, const CommonFlags& flags) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(config_dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    if (ext == ".ini" || ext == ".cfg" || ext == ".conf") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::cerr << "no .ini/.cfg/.conf config files in " << config_dir << "\n";
    return 1;
  }

  int failures = 0;
  std::vector<apo::RunReport> all_reports;
  for (const auto& file : files) {
    auto cfg = apo::KeyValueConfig::parse_file(file.string());
    apo::RunConfig rc = apo::run_config_from(cfg);
    apply_overrides(rc, flags);
    apo::TaskData data = apo::task_data_from_config(cfg);
    apo::OwnedEndpoints endpoints = apo::endpoints_from_config(cfg);
    auto reports = apo::run_matrix({rc}, data, endpoints.view(), flags.out_dir, flags.force);
    for (auto& r : reports) {
      failures += r.failed ? 1 : 0;
      all_reports.push_back(std::move(r));
    }
  }
  if (!all_reports.empty()) apo::emit_report(all_reports, flags.out_dir);
  std::cout << "ran " << all_reports.size() << " config(s), " << failures << " failure(s); "
            << "tables in " << flags.out_dir << "\n";
  return failures == 0 ? 0 : 1;
}

int cmd_report(const std::string& results_path, const std::string& out_dir) {
  std::ifstream in(results_path);
  if (!in) {
    std::cerr << "cannot open " << results_path << "\n";
    return 1;
  }
  std::vector<apo::RunReport> reports;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      apo::log_warn("skipping unparsable line in " + results_path);
      continue;
    }
    apo::RunReport r;
    r.config_digest = j.value("config_digest", "");
    r.task_name = j.value("task", "");
    r.io_method = apo::io_method_from(j.value("io", "none"));
    r.es_method = apo::es_method_from(j.value("es", "none"));
    r.failed = j.value("failed", false);
    if (!r.failed) {
      r.val_accuracy = j.value("val_accuracy", 0.0);
      r.test_accuracy = j.value("test_accuracy", 0.0);
      r.generalization_gap = j.value("generalization_gap", 0.0);
    }
    reports.push_back(std::move(r));
  }
  if (reports.empty()) {
    std::cerr << "no reports in " << results_path << "\n";
    return 1;
  }
  apo::emit_report(reports, out_dir);
  std::cout << "re-rendered " << reports.size() << " report(s) into " << out_dir << "\n";
  return 0;
}

int cmd_selftest(const std::string& out_dir, const std::string& golden) {
  auto reports = apo::run_selftest_matrix(out_dir);
  int failures = 0;
  for (const auto& r : reports) {
    std::cout << (r.failed ? "FAIL" : "ok  ") << "  io=" << apo::to_string(r.io_method)
              << " es=" << apo::to_string(r.es_method) << "  val=" << r.val_accuracy
              << " test=" << r.test_accuracy << " budget=" << r.budget.consumed << "/"
              << r.budget.cap << "\n";
    failures += r.failed ? 1 : 0;
  }
  if (!golden.empty()) {
    std::string diagnostic;
    if (apo::selftest_matches_golden(out_dir, golden, &diagnostic)) {
      std::cout << "golden comparison: ok\n";
    } else {
      std::cout << "golden comparison: MISMATCH — " << diagnostic << "\n";
      return 1;
    }
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"black-box prompt optimization: instructions, exemplars, and both"};
  app.require_subcommand(1);

  CommonFlags flags;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "info-level logging");

  std::string config_path;
  auto* run = app.add_subcommand("run", "execute one run config");
  run->add_option("--config", config_path, "run config file")->required();
  run->add_option("--out-dir", flags.out_dir, "output directory");
  run->add_flag("--force", flags.force, "redo runs already recorded");
  run->add_option("--io", [&](auto& v) { flags.io = v[0]; return true; },
                  "override IO method (none|ape|opro|protegi)");
  run->add_option("--es", [&](auto& v) { flags.es = v[0]; return true; },
                  "override ES method (none|random|nearest|diversity|all|random_search|mutation)");
  run->add_option("--k", [&](auto& v) { flags.k = std::stoi(v[0]); return true; },
                  "override exemplar count k");
  run->add_option("--m", [&](auto& v) { flags.m = std::stoi(v[0]); return true; },
                  "override total evaluation budget");
  run->add_option("--m-io", [&](auto& v) { flags.m_io = std::stoi(v[0]); return true; },
                  "override the IO share of the budget");
  run->add_option("--seed", [&](auto& v) { flags.seed = std::stoull(v[0]); return true; },
                  "override search seed");
  run->add_option("--workers", [&](auto& v) { flags.workers = std::stoi(v[0]); return true; },
                  "concurrent evaluation workers");

  std::string config_dir;
  auto* matrix = app.add_subcommand("matrix", "execute every config in a directory");
  matrix->add_option("--config-dir", config_dir, "directory of run configs")->required();
  matrix->add_option("--out-dir", flags.out_dir, "output directory");
  matrix->add_flag("--force", flags.force, "redo runs already recorded");

  std::string results_path = "out/results.jsonl";
  std::string report_out = "out";
  auto* report = app.add_subcommand("report", "re-render tables from results.jsonl");
  report->add_option("--results", results_path, "results.jsonl path");
  report->add_option("--out-dir", report_out, "output directory");

  std::string selftest_out = "selftest-out";
  std::string golden;
  auto* selftest = app.add_subcommand("selftest", "scripted end-to-end determinism check");
  selftest->add_option("--out-dir", selftest_out, "output directory");
  selftest->add_option("--golden", golden, "golden results.jsonl to compare against");

  CLI11_PARSE(app, argc, argv);
  if (verbose) apo::log_level() = apo::LogLevel::info;

  try {
    if (run->parsed()) return cmd_run(config_path, flags);
    if (matrix->parsed()) return cmd_matrix(config_dir, flags);
    if (report->parsed()) return cmd_report(results_path, report_out);
    if (selftest->parsed()) return cmd_selftest(selftest_out, golden);
  } catch (const apo::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
