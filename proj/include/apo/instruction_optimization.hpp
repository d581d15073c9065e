#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "apo/core.hpp"
#include "apo/evaluation.hpp"
#include "apo/exemplar_selection.hpp"
#include "apo/log.hpp"
#include "apo/providers.hpp"
#include "apo/rng.hpp"

namespace apo {

enum class IoMethod { none, ape, opro, protegi };

inline const char* to_string(IoMethod m) {
  switch (m) {
    case IoMethod::none: return "none";
    case IoMethod::ape: return "ape";
    case IoMethod::opro: return "opro";
    case IoMethod::protegi: return "protegi";
  }
  return "?";
}

// APE and OPRO render candidates in the qa_block style; ProTeGi follows its
// original header convention.
inline TemplateStyle default_style_for(IoMethod m) {
  return m == IoMethod::protegi ? TemplateStyle::header_block : TemplateStyle::qa_block;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

inline std::string render_meta_template(const std::string& tpl,
                                        const std::map<std::string, std::string>& values) {
  std::string out = tpl;
  for (const auto& [key, value] : values) out = replace_all(out, "{{ " + key + " }}", value);
  return out;
}

// The optimizer-model prompts. These are this library's own pinned wordings;
// a template directory can override any of them (paraphrase.txt,
// trajectory.txt, critique.txt, rewrite.txt). {{ VARIANT }} carries the
// candidate ordinal so repeated requests in one step differ textually, which
// keeps scripted optimizers (pure functions of the prompt) useful.
struct MetaPromptSet {
  std::string paraphrase;
  std::string trajectory;
  std::string critique;
  std::string rewrite;

  static MetaPromptSet defaults() {
    MetaPromptSet s;
    s.paraphrase =
        "Generate variation {{ VARIANT }} of the following instruction while keeping the "
        "semantic meaning.\n"
        "\n"
        "Task: {{ TASK_DESCRIPTION }}\n"
        "\n"
        "Instruction: {{ INSTRUCTION }}\n"
        "\n"
        "Reply with the new instruction only, without quotes or commentary.\n";
    s.trajectory =
        "You are optimizing the instruction given to a language model for the task below.\n"
        "\n"
        "Task: {{ TASK_DESCRIPTION }}\n"
        "\n"
        "Here are previous instructions with their validation scores (0-100, higher is "
        "better), best last:\n"
        "\n"
        "{{ TRAJECTORY }}\n"
        "\n"
        "Come up with a better instruction (proposal {{ VARIANT }}) that scores higher than "
        "all of the above. Reply with the instruction only, without quotes or commentary.\n";
    s.critique =
        "I am writing an instruction for a language model to solve the task below.\n"
        "\n"
        "Task: {{ TASK_DESCRIPTION }}\n"
        "\n"
        "Current instruction: {{ INSTRUCTION }}\n"
        "\n"
        "The model answered the following examples incorrectly under this instruction:\n"
        "\n"
        "{{ ERROR_CASES }}\n"
        "\n"
        "Give a short critique listing concrete reasons why the instruction led to these "
        "mistakes. Reply with the critique only.\n";
    s.rewrite =
        "I am improving the instruction given to a language model for the task below.\n"
        "\n"
        "Task: {{ TASK_DESCRIPTION }}\n"
        "\n"
        "Current instruction: {{ INSTRUCTION }}\n"
        "\n"
        "Critique of the current instruction:\n"
        "{{ CRITIQUE }}\n"
        "\n"
        "Based on the critique, write improved instruction {{ VARIANT }}. Reply with the "
        "instruction only, without quotes or commentary.\n";
    return s;
  }

  // any of the four files present in dir overrides its default
  static MetaPromptSet load_dir(const std::string& dir) {
    MetaPromptSet s = defaults();
    auto maybe_read = [&](const char* name, std::string& slot) {
      std::ifstream in(dir + "/" + name);
      if (!in) return;
      std::stringstream buf;
      buf << in.rdbuf();
      slot = buf.str();
    };
    maybe_read("paraphrase.txt", s.paraphrase);
    maybe_read("trajectory.txt", s.trajectory);
    maybe_read("critique.txt", s.critique);
    maybe_read("rewrite.txt", s.rewrite);
    s.validate();
    return s;
  }

  void validate() const {
    auto require = [](const std::string& tpl, const char* placeholder, const char* which) {
      if (tpl.find(placeholder) == std::string::npos) {
        throw ConfigError(std::string("meta template '") + which + "' is missing required " +
                          placeholder);
      }
    };
    require(paraphrase, "{{ INSTRUCTION }}", "paraphrase");
    require(trajectory, "{{ TRAJECTORY }}", "trajectory");
    require(critique, "{{ INSTRUCTION }}", "critique");
    require(critique, "{{ ERROR_CASES }}", "critique");
    require(rewrite, "{{ INSTRUCTION }}", "rewrite");
    require(rewrite, "{{ CRITIQUE }}", "rewrite");
  }
};

using IoTrace = SearchTrace<std::string>;

struct IOResult {
  Instruction best_instruction;
  IoTrace trace;
};

struct IoParams {
  int allocation = 32;  // max charged instruction evaluations
  std::uint64_t seed = 0;
  TemplateStyle style = TemplateStyle::qa_block;
  std::string task_description = "general reasoning task";
  MetaPromptSet templates = MetaPromptSet::defaults();
  DecodingParams optimizer_decoding_params = optimizer_decoding();
  EvalOptions eval;

  // ape
  int population = 8;
  int generations = 4;
  int survivors = 2;

  // opro
  int candidates_per_step = 8;
  int steps = 4;
  int trajectory_window = 20;

  // protegi
  int gradient_half = 4;
  int mc_half = 4;
  int beam_width = 4;
  int errors_sampled = 4;
};

inline IOResult seed_io(const std::string& seed_text = kSeedInstruction) {
  IOResult r;
  r.best_instruction = Instruction{seed_text, InstructionOrigin::seed};
  return r;
}

namespace detail {

// optimizer emissions arrive with wrappers now and then; strip quotes and
// stray answer tags, bound the length
inline std::optional<std::string> sanitize_candidate(const std::string& raw) {
  std::string s = raw;
  for (const char* tag : {"<answer>", "</answer>", "<\\answer>"}) s = replace_all(s, tag, "");
  s = trim_copy(s);
  while (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                           (s.front() == '\'' && s.back() == '\''))) {
    s = trim_copy(s.substr(1, s.size() - 2));
  }
  if (s.empty() || s.size() > 4096) return std::nullopt;
  return s;
}

// charged zero-shot evaluation of instruction candidates, with per-search
// allocation tracking on top of the shared ledger
struct InstructionEvaluator {
  const std::vector<TaskItem>& split;
  const AnswerKind& kind;
  GenerationEndpoint& target;
  BudgetLedger& ledger;
  const IoParams& params;
  InstructionOrigin origin;
  IoTrace* trace;
  int charges_spent = 0;
  std::map<std::string, EvalResult> results_by_text;

  InstructionEvaluator(const std::vector<TaskItem>& split_, const AnswerKind& kind_,
                       GenerationEndpoint& target_, BudgetLedger& ledger_,
                       const IoParams& params_, InstructionOrigin origin_, IoTrace* trace_)
      : split(split_), kind(kind_), target(target_), ledger(ledger_), params(params_),
        origin(origin_), trace(trace_) {}

  Prompt zero_shot(const std::string& text) const {
    return Prompt{Instruction{text, origin}, {}, params.style};
  }

  bool cannot_afford(const std::string& text) const {
    if (ledger.contains(prompt_digest(zero_shot(text), kind))) return false;
    return charges_spent >= params.allocation || ledger.remaining() == 0;
  }

  // false when the allocation ran out (caller returns best-so-far)
  bool evaluate(const std::string& text) {
    if (cannot_afford(text)) return false;
    int before = ledger.consumed();
    EvalResult result = evaluate_prompt(zero_shot(text), split, kind, target, ledger, params.eval);
    charges_spent += ledger.consumed() - before;
    trace->add(text, result.accuracy, ledger.consumed());
    results_by_text[text] = std::move(result);
    return true;
  }

  bool evaluated(const std::string& text) const { return results_by_text.count(text) > 0; }

  double score_of(const std::string& text) const { return results_by_text.at(text).accuracy; }
};

// one optimizer call with sanitation; empty or duplicate replies resample up
// to 5 times (the variant counter advances, so the meta-prompt changes), then
// fall back to the parent text
inline std::string propose(GenerationEndpoint& optimizer, const IoParams& params,
                           const std::string& tpl, std::map<std::string, std::string> values,
                           const std::string& parent_text, const std::set<std::string>& taken,
                           int& variant_counter) {
  for (int attempt = 0; attempt < 5; ++attempt) {
    values["VARIANT"] = std::to_string(++variant_counter);
    values["TASK_DESCRIPTION"] = params.task_description;
    std::string meta = render_meta_template(tpl, values);
    auto candidate =
        sanitize_candidate(optimizer.generate(meta, params.optimizer_decoding_params));
    if (candidate && taken.count(*candidate) == 0) return *candidate;
  }
  return parent_text;
}

inline std::string format_pct(double accuracy) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", accuracy * 100.0);
  return buf;
}

inline IOResult finish(IoTrace trace, const std::string& seed_text, InstructionOrigin origin) {
  IOResult r;
  r.trace = std::move(trace);
  if (r.trace.best_index < 0) {
    r.best_instruction = Instruction{seed_text, InstructionOrigin::seed};
  } else {
    const std::string& text =
        r.trace.entries[static_cast<std::size_t>(r.trace.best_index)].candidate;
    r.best_instruction =
        Instruction{text, text == seed_text ? InstructionOrigin::seed : origin};
  }
  return r;
}

}  // namespace detail

// Evolutionary paraphrase search: generation 1 is the seed plus
// population-1 paraphrases of it; each later generation refills the
// population with paraphrases of the top `survivors` instructions,
// round-robin. Candidates are scored zero-shot on the validation split.
inline IOResult ape_optimize(const Instruction& seed, const std::vector<TaskItem>& split,
                             const AnswerKind& kind, GenerationEndpoint& target,
                             GenerationEndpoint& optimizer, BudgetLedger& ledger,
                             const IoParams& params) {
  params.templates.validate();
  IoTrace trace;
  detail::InstructionEvaluator evaluator{split,  kind,   target, ledger,
                                         params, InstructionOrigin::ape, &trace};
  int variant_counter = 0;
  std::set<std::string> taken;  // every text ever queued or evaluated

  std::vector<std::string> generation{seed.text};
  taken.insert(seed.text);
  for (int i = 1; i < params.population; ++i) {
    std::string text = detail::propose(optimizer, params, params.templates.paraphrase,
                                       {{"INSTRUCTION", seed.text}}, seed.text, taken,
                                       variant_counter);
    taken.insert(text);
    generation.push_back(std::move(text));
  }

  for (int gen = 1; gen <= params.generations; ++gen) {
    for (const auto& text : generation) {
      if (!evaluator.evaluate(text)) {
        return detail::finish(std::move(trace), seed.text, InstructionOrigin::ape);
      }
    }
    if (gen == params.generations) break;

    // survivors: best distinct texts so far, earliest entry wins ties
    std::vector<std::pair<double, std::string>> ranked;
    std::set<std::string> ranked_seen;
    for (const auto& entry : trace.entries) {
      if (ranked_seen.insert(entry.candidate).second) {
        ranked.emplace_back(entry.score, entry.candidate);
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const int n_survivors = std::min<int>(params.survivors, static_cast<int>(ranked.size()));
    if (n_survivors == 0) break;

    generation.clear();
    for (int i = 0; i < params.population; ++i) {
      const std::string& parent = ranked[static_cast<std::size_t>(i % n_survivors)].second;
      std::string text = detail::propose(optimizer, params, params.templates.paraphrase,
                                         {{"INSTRUCTION", parent}}, parent, taken,
                                         variant_counter);
      taken.insert(text);
      generation.push_back(std::move(text));
    }
  }
  return detail::finish(std::move(trace), seed.text, InstructionOrigin::ape);
}

// Trajectory meta-prompting: each step shows the optimizer the evaluated
// (instruction, score) pairs sorted ascending by score (best last, at most
// trajectory_window of them) and asks for candidates_per_step new
// instructions.
inline IOResult opro_optimize(const Instruction& seed, const std::vector<TaskItem>& split,
                              const AnswerKind& kind, GenerationEndpoint& target,
                              GenerationEndpoint& optimizer, BudgetLedger& ledger,
                              const IoParams& params) {
  params.templates.validate();
  IoTrace trace;
  detail::InstructionEvaluator evaluator{split,  kind,   target, ledger,
                                         params, InstructionOrigin::opro, &trace};
  int variant_counter = 0;
  std::set<std::string> taken{seed.text};

  if (!evaluator.evaluate(seed.text)) {
    return detail::finish(std::move(trace), seed.text, InstructionOrigin::opro);
  }

  for (int step = 1; step <= params.steps; ++step) {
    // distinct evaluated pairs, ascending score, best last
    std::vector<std::pair<double, std::string>> pairs;
    std::set<std::string> seen;
    for (const auto& entry : trace.entries) {
      if (seen.insert(entry.candidate).second) pairs.emplace_back(entry.score, entry.candidate);
    }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    if (pairs.size() > static_cast<std::size_t>(params.trajectory_window)) {
      pairs.resize(static_cast<std::size_t>(params.trajectory_window));
    }
    std::reverse(pairs.begin(), pairs.end());

    std::string rows;
    for (const auto& [score, text] : pairs) {
      rows += "instruction: " + text + "\nscore: " + detail::format_pct(score) + "\n\n";
    }

    for (int c = 0; c < params.candidates_per_step; ++c) {
      // copy: the trace vector reallocates as candidates are evaluated
      const std::string best_text =
          trace.entries[static_cast<std::size_t>(trace.best_index)].candidate;
      std::string text = detail::propose(optimizer, params, params.templates.trajectory,
                                         {{"TRAJECTORY", rows}}, best_text, taken,
                                         variant_counter);
      taken.insert(text);
      if (!evaluator.evaluate(text)) {
        return detail::finish(std::move(trace), seed.text, InstructionOrigin::opro);
      }
    }
  }
  return detail::finish(std::move(trace), seed.text, InstructionOrigin::opro);
}

namespace detail {

inline std::string format_error_cases(const EvalResult& result,
                                      const std::vector<TaskItem>& split, int max_cases,
                                      SplitMix64& rng) {
  std::vector<std::size_t> error_positions;
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    if (!result.records[i].correct) error_positions.push_back(i);
  }
  auto picks = sample_without_replacement(
      error_positions.size(),
      std::min<std::size_t>(static_cast<std::size_t>(max_cases), error_positions.size()), rng);
  std::sort(picks.begin(), picks.end());

  auto clip = [](std::string s) {
    if (s.size() > 400) s = s.substr(0, 400) + "...";
    return s;
  };
  std::string out;
  for (auto p : picks) {
    const auto& rec = result.records[error_positions[p]];
    const auto& item = split[static_cast<std::size_t>(rec.item_index)];
    out += "input: " + clip(item.input) + "\n";
    out += "expected: " + item.target + "\n";
    out += "got: " + (rec.extracted ? *rec.extracted : std::string("(no parsable answer)")) +
           "\n\n";
  }
  return out;
}

}  // namespace detail

// Critique-plus-paraphrase beam search. Per step, gradient_half rewrites come
// from optimizer critiques of full-validation-set errors (no minibatching)
// and mc_half are plain paraphrases, spread round-robin over the beam; the
// top beam_width instructions survive. Beam entries with no errors skip the
// critique path.
inline IOResult protegi_optimize(const Instruction& seed, const std::vector<TaskItem>& split,
                                 const AnswerKind& kind, GenerationEndpoint& target,
                                 GenerationEndpoint& optimizer, BudgetLedger& ledger,
                                 const IoParams& params) {
  params.templates.validate();
  IoTrace trace;
  detail::InstructionEvaluator evaluator{split,  kind,   target, ledger,
                                         params, InstructionOrigin::protegi, &trace};
  int variant_counter = 0;
  std::set<std::string> taken{seed.text};
  SplitMix64 rng(params.seed);

  if (!evaluator.evaluate(seed.text)) {
    return detail::finish(std::move(trace), seed.text, InstructionOrigin::protegi);
  }
  std::vector<std::string> beam{seed.text};

  for (int step = 1; step <= params.steps; ++step) {
    std::vector<std::string> fresh;

    // gradient half: critique errors, then rewrite
    std::map<std::string, std::string> critiques;  // per beam entry per step
    bool any_errors = false;
    for (const auto& b : beam) {
      for (const auto& rec : evaluator.results_by_text.at(b).records) {
        if (!rec.correct) {
          any_errors = true;
          break;
        }
      }
    }
    if (any_errors) {
      int produced = 0;
      std::size_t j = 0;
      while (produced < params.gradient_half) {
        const std::string& b = beam[j % beam.size()];
        ++j;
        const EvalResult& res = evaluator.results_by_text.at(b);
        bool has_errors = false;
        for (const auto& rec : res.records) {
          if (!rec.correct) {
            has_errors = true;
            break;
          }
        }
        if (!has_errors) {
          if (j >= beam.size() * static_cast<std::size_t>(params.gradient_half)) break;
          continue;
        }
        if (!critiques.count(b)) {
          std::string error_cases =
              detail::format_error_cases(res, split, params.errors_sampled, rng);
          std::string meta = render_meta_template(
              params.templates.critique, {{"INSTRUCTION", b},
                                          {"ERROR_CASES", error_cases},
                                          {"TASK_DESCRIPTION", params.task_description}});
          critiques[b] = trim_copy(optimizer.generate(meta, params.optimizer_decoding_params));
        }
        std::string text = detail::propose(
            optimizer, params, params.templates.rewrite,
            {{"INSTRUCTION", b}, {"CRITIQUE", critiques[b]}}, b, taken, variant_counter);
        taken.insert(text);
        fresh.push_back(std::move(text));
        ++produced;
      }
    }

    // Monte Carlo half: plain paraphrases of beam entries
    for (int c = 0; c < params.mc_half; ++c) {
      const std::string& parent = beam[static_cast<std::size_t>(c) % beam.size()];
      std::string text = detail::propose(optimizer, params, params.templates.paraphrase,
                                         {{"INSTRUCTION", parent}}, parent, taken,
                                         variant_counter);
      taken.insert(text);
      fresh.push_back(std::move(text));
    }

    for (const auto& text : fresh) {
      if (!evaluator.evaluate(text)) {
        return detail::finish(std::move(trace), seed.text, InstructionOrigin::protegi);
      }
    }

    // keep the top beam_width across old beam plus new candidates
    std::vector<std::pair<double, std::string>> ranked;
    std::set<std::string> ranked_seen;
    for (const auto& entry : trace.entries) {
      if (!ranked_seen.insert(entry.candidate).second) continue;
      bool in_scope = std::find(beam.begin(), beam.end(), entry.candidate) != beam.end() ||
                      std::find(fresh.begin(), fresh.end(), entry.candidate) != fresh.end();
      if (in_scope) ranked.emplace_back(entry.score, entry.candidate);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    beam.clear();
    for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(params.beam_width);
         ++i) {
      beam.push_back(ranked[i].second);
    }
    if (beam.empty()) beam.push_back(seed.text);
  }
  return detail::finish(std::move(trace), seed.text, InstructionOrigin::protegi);
}

inline IOResult run_io(IoMethod method, const Instruction& seed,
                       const std::vector<TaskItem>& split, const AnswerKind& kind,
                       GenerationEndpoint& target, GenerationEndpoint* optimizer,
                       BudgetLedger& ledger, const IoParams& params) {
  if (method == IoMethod::none || params.allocation <= 0) {
    if (method != IoMethod::none && params.allocation <= 0) {
      log_warn(std::string(to_string(method)) + " with zero IO allocation degenerates to seed");
    }
    return seed_io(seed.text);
  }
  if (!optimizer) throw ConfigError("instruction optimization requires an optimizer endpoint");
  switch (method) {
    case IoMethod::ape: return ape_optimize(seed, split, kind, target, *optimizer, ledger, params);
    case IoMethod::opro:
      return opro_optimize(seed, split, kind, target, *optimizer, ledger, params);
    case IoMethod::protegi:
      return protegi_optimize(seed, split, kind, target, *optimizer, ledger, params);
    case IoMethod::none: break;
  }
  return seed_io(seed.text);
}

}  // namespace apo
