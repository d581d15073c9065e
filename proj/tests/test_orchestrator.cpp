#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

#include "apo/config.hpp"
#include "apo/orchestrator.hpp"
#include "apo/selftest.hpp"

using namespace apo;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  SelftestFixture fx = make_selftest_fixture();
  std::vector<TaskItem> val, test;
  Endpoints endpoints;

  Fixture() {
    auto [v, t] = split_task(fx.task, fraction_split(0.2, 11));
    val = std::move(v);
    test = std::move(t);
    endpoints.target = fx.target.get();
    endpoints.optimizer = fx.optimizer.get();
  }

  RunConfig config(IoMethod io, EsMethod es, int m_io) const {
    RunConfig c;
    c.task_name = fx.task.name;
    c.io_method = io;
    c.es_method = es;
    c.k = 3;
    c.m_total = 32;
    c.m_io = m_io;
    c.m_es = 32 - m_io;
    c.seed = 5;
    c.split_seed = 11;
    return c;
  }
};

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("apo_orch_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST_CASE("config validation", "[orchestrator]") {
  Fixture f;
  RunConfig bad = f.config(IoMethod::none, EsMethod::none, 0);
  bad.m_io = 8;  // 8 + 32 != 32
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  RunConfig ok = f.config(IoMethod::ape, EsMethod::mutation, 8);
  CHECK_NOTHROW(ok.validate());
  CHECK(ok.effective_style() == TemplateStyle::qa_block);
  RunConfig pg = f.config(IoMethod::protegi, EsMethod::none, 32);
  CHECK(pg.effective_style() == TemplateStyle::header_block);
}

TEST_CASE("two_stage budget split across the Fig-9 style allocations", "[orchestrator]") {
  Fixture f;
  for (int m_io : {32, 24, 16, 8, 0}) {
    RunConfig config = f.config(m_io == 0 ? IoMethod::none : IoMethod::ape, EsMethod::mutation,
                                m_io);
    RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);

    INFO("m_io=" << m_io);
    CHECK(report.budget.consumed <= 32);
    CHECK(report.budget.io_consumed <= m_io);
    CHECK(report.budget.es_consumed <= 32 - m_io);
    CHECK(report.budget.io_consumed + report.budget.es_consumed == report.budget.consumed);
    CHECK(report.generalization_gap ==
          Approx(report.val_accuracy - report.test_accuracy));
  }
}

TEST_CASE("two_stage conditions the pool on the stage-1 argmax", "[orchestrator]") {
  Fixture f;
  RunConfig config = f.config(IoMethod::ape, EsMethod::random_search, 8);
  RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);

  // stage-1 argmax must be the instruction of the final prompt; its score is
  // the trace max
  REQUIRE(report.io_trace.best_index >= 0);
  CHECK(report.instruction.text ==
        report.io_trace.entries[static_cast<std::size_t>(report.io_trace.best_index)].candidate);
}

TEST_CASE("degenerate stage splits", "[orchestrator]") {
  Fixture f;

  SECTION("m_io=0 reduces stage 1 to the seed") {
    RunConfig config = f.config(IoMethod::none, EsMethod::random_search, 0);
    RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
    CHECK(report.instruction.text == kSeedInstruction);
    CHECK(report.budget.io_consumed == 0);
  }

  SECTION("m_es=0 equals pure IO with no exemplars") {
    RunConfig config = f.config(IoMethod::ape, EsMethod::none, 32);
    RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
    CHECK(report.exemplar_indices.empty());
    CHECK(report.budget.es_consumed == 0);
  }

  SECTION("m_es=0 with an uncached instruction stays uncharged") {
    // io none never evaluates anything, so I* is uncached entering stage 2
    RunConfig config = f.config(IoMethod::none, EsMethod::random, 32);
    RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
    CHECK(report.budget.es_consumed == 0);
    CHECK(report.budget.consumed == 0);
    CHECK(report.pool_size > 0);  // bootstrap still happened
  }
}

TEST_CASE("test evaluations never touch the ledger", "[orchestrator]") {
  Fixture f;
  RunConfig config = f.config(IoMethod::none, EsMethod::random, 0);
  RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  // heuristic run: only the seed zero-shot evaluation is ever charged
  CHECK(report.budget.consumed == 1);
  CHECK(report.selection_label == "random:k=3");
}

TEST_CASE("per-query nearest selection reports cleanly", "[orchestrator]") {
  Fixture f;
  HashedBowEmbedder embedder(64);
  f.endpoints.embedder = &embedder;
  RunConfig config = f.config(IoMethod::none, EsMethod::nearest, 0);
  RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  CHECK(report.per_query);
  CHECK(report.exemplar_indices.empty());
  CHECK(report.budget.consumed == 1);
}

TEST_CASE("audited heuristic runs charge the reporting evaluation", "[orchestrator]") {
  Fixture f;
  RunConfig config = f.config(IoMethod::none, EsMethod::random, 0);
  config.audit_heuristic_val = true;
  RunReport report = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  // seed zero-shot eval + the audited few-shot validation eval
  CHECK(report.budget.consumed == 2);
  CHECK(report.budget.es_consumed == 2);

  RunConfig free_config = f.config(IoMethod::none, EsMethod::random, 0);
  RunReport free_report = two_stage(free_config, f.val, f.test, f.fx.task.answer_kind,
                                    f.endpoints);
  CHECK(free_report.budget.consumed == 1);
  CHECK(free_report.val_accuracy == Approx(report.val_accuracy));

  SECTION("per-query selections charge one audited unit too") {
    HashedBowEmbedder embedder(64);
    f.endpoints.embedder = &embedder;
    RunConfig nearest = f.config(IoMethod::none, EsMethod::nearest, 0);
    nearest.audit_heuristic_val = true;
    RunReport audited = two_stage(nearest, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
    CHECK(audited.budget.consumed == 2);
    CHECK(audited.per_query);
  }
}

TEST_CASE("reproducibility: identical configs yield identical reports", "[orchestrator]") {
  Fixture f;
  RunConfig config = f.config(IoMethod::ape, EsMethod::mutation, 8);
  RunReport a = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  RunReport b = two_stage(config, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  CHECK(to_json(a).dump() == to_json(b).dump());
}

TEST_CASE("worker count does not change results", "[orchestrator]") {
  Fixture f;
  RunConfig serial = f.config(IoMethod::ape, EsMethod::mutation, 8);
  RunConfig parallel = serial;
  parallel.workers = 3;
  RunReport a = two_stage(serial, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  RunReport b = two_stage(parallel, f.val, f.test, f.fx.task.answer_kind, f.endpoints);
  CHECK(a.val_accuracy == Approx(b.val_accuracy));
  CHECK(a.test_accuracy == Approx(b.test_accuracy));
  CHECK(a.instruction.text == b.instruction.text);
  CHECK(a.exemplar_indices == b.exemplar_indices);
}

TEST_CASE("run_matrix persists, dedupes, and renders tables", "[orchestrator]") {
  Fixture f;
  TempDir dir;
  TaskData data{f.val, f.test, f.fx.task.answer_kind};
  std::vector<RunConfig> configs{f.config(IoMethod::none, EsMethod::none, 0),
                                 f.config(IoMethod::none, EsMethod::random, 0)};

  auto reports = run_matrix(configs, data, f.endpoints, dir.path.string());
  CHECK(reports.size() == 2);

  std::ifstream results(dir.path / "results.jsonl");
  int lines = 0;
  std::string line;
  while (std::getline(results, line)) lines += line.empty() ? 0 : 1;
  CHECK(lines == 2);

  SECTION("a rerun without --force skips recorded digests") {
    auto again = run_matrix(configs, data, f.endpoints, dir.path.string());
    CHECK(again.empty());
    auto forced = run_matrix(configs, data, f.endpoints, dir.path.string(), /*force=*/true);
    CHECK(forced.size() == 2);
  }

  SECTION("matrix files exist with headers and blank missing cells") {
    CHECK(fs::exists(dir.path / "matrix.csv"));
    CHECK(fs::exists(dir.path / "matrix.md"));
    CHECK(fs::exists(dir.path / "gaps.csv"));
    std::string csv = read_file((dir.path / "matrix.csv").string());
    CHECK(csv.find("io,none,random,nearest,diversity,all,random_search,mutation") == 0);
  }
}

TEST_CASE("failed runs are recorded but retried on rerun", "[orchestrator]") {
  Fixture f;
  TempDir dir;
  TaskData data{f.val, f.test, f.fx.task.answer_kind};
  // nearest without an embedder fails inside two_stage
  std::vector<RunConfig> configs{f.config(IoMethod::none, EsMethod::nearest, 0)};

  auto first = run_matrix(configs, data, f.endpoints, dir.path.string());
  REQUIRE(first.size() == 1);
  CHECK(first[0].failed);

  // the failure is on record, but a rerun retries it; with an embedder
  // supplied it now succeeds
  HashedBowEmbedder embedder(64);
  Endpoints fixed = f.endpoints;
  fixed.embedder = &embedder;
  auto second = run_matrix(configs, data, fixed, dir.path.string());
  REQUIRE(second.size() == 1);
  CHECK_FALSE(second[0].failed);

  // and a further rerun skips the now-successful digest
  auto third = run_matrix(configs, data, fixed, dir.path.string());
  CHECK(third.empty());
}

TEST_CASE("key-value config files parse into run configs", "[orchestrator][config]") {
  const std::string text = R"(
# demo config
[task]
name = demo
val_fraction = 0.2
split_seed = 17

[search]
io = ape
es = mutation
k = 3
m_total = 32
m_io = 8
seed = 4
)";
  auto cfg = KeyValueConfig::parse_string(text);
  CHECK(cfg.get("task.name") == "demo");
  CHECK(cfg.get_double("task.val_fraction", 0) == Approx(0.2));

  RunConfig rc = run_config_from(cfg);
  CHECK(rc.io_method == IoMethod::ape);
  CHECK(rc.es_method == EsMethod::mutation);
  CHECK(rc.m_io == 8);
  CHECK(rc.m_es == 24);
  CHECK(rc.seed == 4);

  CHECK_THROWS_AS(KeyValueConfig::parse_string("no equals sign"), ConfigError);
  CHECK_THROWS_AS(run_config_from(KeyValueConfig::parse_string("[search]\nio = bogus\n")),
                  ConfigError);
}

TEST_CASE("selftest matrix is internally deterministic", "[orchestrator][selftest]") {
  TempDir a, b;
  run_selftest_matrix(a.path.string());
  run_selftest_matrix(b.path.string());
  CHECK(read_file((a.path / "results.jsonl").string()) ==
        read_file((b.path / "results.jsonl").string()));
}
