// End-to-end two-stage run on the scripted selftest fixture: APE for
// instructions, then mutation search over bootstrapped exemplars.

#include <iostream>

#include "apo/orchestrator.hpp"
#include "apo/selftest.hpp"

int main() {
  using namespace apo;

  SelftestFixture fx = make_selftest_fixture();
  auto [val, test] = split_task(fx.task, fraction_split(0.2, 11));

  RunConfig config;
  config.task_name = fx.task.name;
  config.io_method = IoMethod::ape;
  config.es_method = EsMethod::mutation;
  config.k = 3;
  config.m_total = 32;
  config.m_io = 8;
  config.m_es = 24;
  config.seed = 5;

  Endpoints endpoints;
  endpoints.target = fx.target.get();
  endpoints.optimizer = fx.optimizer.get();

  RunReport report = two_stage(config, val, test, fx.task.answer_kind, endpoints);

  std::cout << "instruction:    " << report.instruction.text << "\n"
            << "selection:      " << report.selection_label << " [";
  for (std::size_t i = 0; i < report.exemplar_indices.size(); ++i) {
    std::cout << (i ? "," : "") << report.exemplar_indices[i];
  }
  std::cout << "]\n"
            << "val accuracy:   " << report.val_accuracy << "\n"
            << "test accuracy:  " << report.test_accuracy << "\n"
            << "gap:            " << report.generalization_gap << "\n"
            << "budget:         " << report.budget.consumed << "/" << report.budget.cap
            << " (io " << report.budget.io_consumed << ", es " << report.budget.es_consumed
            << ")\n";
  return 0;
}
