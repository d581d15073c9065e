#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "apo/core.hpp"
#include "apo/evaluation.hpp"
#include "apo/log.hpp"
#include "apo/providers.hpp"
#include "apo/rng.hpp"

namespace apo {

// Append-only log of evaluated candidates. best_index points at the maximal
// score; ties resolve to the earliest entry.
template <typename Candidate>
struct SearchTrace {
  struct Entry {
    Candidate candidate;
    double score = 0.0;
    int budget_index = 0;  // ledger.consumed() right after this evaluation
  };

  std::vector<Entry> entries;
  int best_index = -1;

  void add(Candidate candidate, double score, int budget_index) {
    entries.push_back({std::move(candidate), score, budget_index});
    if (best_index < 0 || score > entries[static_cast<std::size_t>(best_index)].score) {
      best_index = static_cast<int>(entries.size()) - 1;
    }
  }

  bool empty() const { return entries.empty(); }

  double best_score() const {
    return best_index < 0 ? std::numeric_limits<double>::quiet_NaN()
                          : entries[static_cast<std::size_t>(best_index)].score;
  }
};

// One candidate exemplar sequence, identified by validation source indices.
// parent/generation describe how mutation search produced it.
struct EsCandidate {
  std::vector<int> indices;
  std::vector<int> parent;  // empty for randomly drawn candidates
  int generation = 1;
};

using EsTrace = SearchTrace<EsCandidate>;

// Either a fixed exemplar sequence or a per-query retriever (Nearest). The
// retriever is deterministic for a fixed pool and embedder.
struct ExemplarSelection {
  enum class Mode { fixed_sequence, per_query };

  Mode mode = Mode::fixed_sequence;
  std::vector<Exemplar> sequence;
  std::function<std::vector<Exemplar>(const std::string&)> retriever;
  std::string label = "none";

  bool per_query() const { return mode == Mode::per_query; }

  std::vector<Exemplar> exemplars_for(const std::string& query) const {
    return per_query() ? retriever(query) : sequence;
  }
};

inline ExemplarSelection select_none() {
  ExemplarSelection s;
  s.label = "none";
  return s;
}

inline ExemplarSelection select_all(const ExemplarPool& pool) {
  ExemplarSelection s;
  s.sequence = pool.exemplars;
  s.label = "all";
  return s;
}

// Uniform sample of min(k, |pool|) exemplars without replacement; the
// sequence order is the draw order.
inline ExemplarSelection select_random(const ExemplarPool& pool, int k, std::uint64_t seed) {
  ExemplarSelection s;
  s.label = "random:k=" + std::to_string(k);
  if (k <= 0 || pool.empty()) return s;
  if (static_cast<std::size_t>(k) > pool.size()) {
    log_warn("select_random: pool has " + std::to_string(pool.size()) + " exemplars, k=" +
             std::to_string(k) + "; using the whole pool");
  }
  SplitMix64 rng(seed);
  auto picks = sample_without_replacement(pool.size(), static_cast<std::size_t>(k), rng);
  for (auto p : picks) s.sequence.push_back(pool.exemplars[p]);
  return s;
}

// Per-query retrieval of the top-k pool members whose *inputs* are most
// similar to the query under cosine similarity. Pool embeddings are computed
// once here and reused across queries; ties break on ascending source_index.
inline ExemplarSelection select_nearest(const ExemplarPool& pool, int k,
                                        EmbeddingEndpoint& embedder) {
  if (k < 1) throw ConfigError("select_nearest: k must be >= 1");
  ExemplarSelection s;
  s.mode = ExemplarSelection::Mode::per_query;
  s.label = "nearest:k=" + std::to_string(k);

  struct State {
    std::vector<Exemplar> exemplars;
    std::vector<std::vector<double>> embeddings;
    EmbeddingEndpoint* embedder;
    std::size_t k;
  };
  auto state = std::make_shared<State>();
  state->exemplars = pool.exemplars;
  state->embedder = &embedder;
  state->k = std::min<std::size_t>(static_cast<std::size_t>(k), pool.size());
  for (const auto& e : pool.exemplars) state->embeddings.push_back(embedder.embed(e.query_text));

  s.retriever = [state](const std::string& query) {
    std::vector<double> q = state->embedder->embed(query);
    std::vector<std::size_t> order(state->exemplars.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> sim(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) sim[i] = cosine(q, state->embeddings[i]);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sim[a] != sim[b]) return sim[a] > sim[b];
      return state->exemplars[a].source_index < state->exemplars[b].source_index;
    });
    std::vector<Exemplar> out;
    for (std::size_t i = 0; i < state->k; ++i) out.push_back(state->exemplars[order[i]]);
    return out;
  };
  return s;
}

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = a[i] - b[i];
    d += diff * diff;
  }
  return d;
}

struct KMeans {
  std::vector<std::vector<double>> centroids;
  std::vector<int> assignment;
};

// Lloyd's algorithm with seeded k-means++ initialization. Stops after
// max_iters or when no centroid moves more than tol. Assignment ties go to
// the lower cluster index; empty clusters keep their previous centroid.
inline KMeans kmeans(const std::vector<std::vector<double>>& points, int k, SplitMix64& rng,
                     int max_iters = 100, double tol = 1e-6) {
  const std::size_t n = points.size();
  KMeans km;
  km.assignment.assign(n, 0);

  // k-means++ seeding
  km.centroids.push_back(points[rng.bounded(n)]);
  std::vector<double> d2(n, 0.0);
  while (km.centroids.size() < static_cast<std::size_t>(k)) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : km.centroids) best = std::min(best, sq_dist(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.bounded(n);
    } else {
      double r = rng.next_double() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (r < cum) {
          pick = i;
          break;
        }
        pick = i;  // fp slack: fall through to the last point
      }
    }
    km.centroids.push_back(points[pick]);
  }

  for (int iter = 0; iter < max_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (int c = 0; c < k; ++c) {
        double d = sq_dist(points[i], km.centroids[static_cast<std::size_t>(c)]);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      km.assignment[i] = best_c;
    }

    double moved = 0.0;
    for (int c = 0; c < k; ++c) {
      std::vector<double> mean(points[0].size(), 0.0);
      int count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (km.assignment[i] != c) continue;
        for (std::size_t dim = 0; dim < mean.size(); ++dim) mean[dim] += points[i][dim];
        ++count;
      }
      if (count == 0) continue;  // keep previous centroid
      for (double& x : mean) x /= count;
      moved = std::max(moved, std::sqrt(sq_dist(mean, km.centroids[static_cast<std::size_t>(c)])));
      km.centroids[static_cast<std::size_t>(c)] = std::move(mean);
    }
    if (moved < tol) break;
  }
  return km;
}

}  // namespace detail

// k-means over pool query embeddings; one exemplar per cluster, the member
// closest to its centroid (ties by source_index), ordered by cluster index.
// A pool of at most k members is returned whole.
inline ExemplarSelection select_diversity(const ExemplarPool& pool, int k,
                                          EmbeddingEndpoint& embedder, std::uint64_t seed) {
  if (k < 1) throw ConfigError("select_diversity: k must be >= 1");
  ExemplarSelection s;
  s.label = "diversity:k=" + std::to_string(k);
  if (pool.empty()) return s;
  if (pool.size() <= static_cast<std::size_t>(k)) {
    s.sequence = pool.exemplars;
    return s;
  }

  std::vector<std::vector<double>> points;
  points.reserve(pool.size());
  for (const auto& e : pool.exemplars) points.push_back(embedder.embed(e.query_text));

  SplitMix64 rng(seed);
  auto km = detail::kmeans(points, k, rng);

  std::vector<bool> taken(pool.size(), false);
  for (int c = 0; c < k; ++c) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (km.assignment[i] != c || taken[i]) continue;
      double d = detail::sq_dist(points[i], km.centroids[static_cast<std::size_t>(c)]);
      if (d < best_d ||
          (d == best_d && best >= 0 &&
           pool.exemplars[i].source_index <
               pool.exemplars[static_cast<std::size_t>(best)].source_index)) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    if (best < 0) {
      // empty cluster: fall back to the nearest not-yet-taken member
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (taken[i]) continue;
        double d = detail::sq_dist(points[i], km.centroids[static_cast<std::size_t>(c)]);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(i);
        }
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      s.sequence.push_back(pool.exemplars[static_cast<std::size_t>(best)]);
    }
  }
  return s;
}

// knobs shared by the two optimization-based selections
struct EsSearchParams {
  int k = 3;
  int allocation = 32;  // max candidate evaluations this search may spend
  std::uint64_t seed = 0;
  int population = 8;  // mutation generation size Q
  TemplateStyle style = TemplateStyle::qa_block;
  EvalOptions eval;
};

struct EsSearchResult {
  ExemplarSelection selection;
  EsTrace trace;
};

namespace detail {

inline std::vector<int> to_source_indices(const ExemplarPool& pool,
                                          const std::vector<std::size_t>& positions) {
  std::vector<int> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(pool.exemplars[p].source_index);
  return out;
}

inline std::vector<Exemplar> exemplars_at(const ExemplarPool& pool,
                                          const std::vector<std::size_t>& positions) {
  std::vector<Exemplar> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(pool.exemplars[p]);
  return out;
}

// ordered k-sequences out of n members; saturates at 1e12 for "effectively
// unbounded"
inline double candidate_space_size(std::size_t n, std::size_t k) {
  double count = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    count *= static_cast<double>(n - i);
    if (count > 1e12) return 1e12;
  }
  return count;
}

struct CandidateEvaluator {
  const ExemplarPool& pool;
  const Instruction& instruction;
  const std::vector<TaskItem>& split;
  const AnswerKind& kind;
  GenerationEndpoint& target;
  BudgetLedger& ledger;
  const EsSearchParams& params;
  int charges_spent = 0;

  CandidateEvaluator(const ExemplarPool& pool_, const Instruction& instruction_,
                     const std::vector<TaskItem>& split_, const AnswerKind& kind_,
                     GenerationEndpoint& target_, BudgetLedger& ledger_,
                     const EsSearchParams& params_)
      : pool(pool_), instruction(instruction_), split(split_), kind(kind_), target(target_),
        ledger(ledger_), params(params_) {}

  // true if evaluating would charge a budget unit we no longer have
  bool cannot_afford(const Prompt& prompt) const {
    if (ledger.contains(prompt_digest(prompt, kind))) return false;
    return charges_spent >= params.allocation || ledger.remaining() == 0;
  }

  double evaluate(const std::vector<std::size_t>& positions) {
    Prompt prompt{instruction, exemplars_at(pool, positions), params.style};
    int before = ledger.consumed();
    EvalResult result = evaluate_prompt(prompt, split, kind, target, ledger, params.eval);
    charges_spent += ledger.consumed() - before;
    return result.accuracy;
  }

  Prompt prompt_for(const std::vector<std::size_t>& positions) const {
    return Prompt{instruction, exemplars_at(pool, positions), params.style};
  }
};

inline ExemplarSelection selection_from_trace(const ExemplarPool& pool, const EsTrace& trace,
                                              const std::string& label) {
  ExemplarSelection s;
  s.label = label;
  if (trace.best_index < 0) return s;
  const auto& best = trace.entries[static_cast<std::size_t>(trace.best_index)].candidate;
  for (int source : best.indices) {
    for (const auto& e : pool.exemplars) {
      if (e.source_index == source) {
        s.sequence.push_back(e);
        break;
      }
    }
  }
  return s;
}

}  // namespace detail

// Draws candidate sequences of k distinct pool members uniformly (repeat
// candidates are skipped, capped at 100*allocation rejections), evaluates
// each under the given instruction and returns the argmax by validation
// score. Heuristic-free: this is the DSPy-style random search.
inline EsSearchResult random_search(const ExemplarPool& pool, const Instruction& instruction,
                                    const std::vector<TaskItem>& split, const AnswerKind& kind,
                                    GenerationEndpoint& target, BudgetLedger& ledger,
                                    const EsSearchParams& params) {
  EsSearchResult result;
  result.selection.label = "random_search:k=" + std::to_string(params.k);
  if (pool.empty()) {
    log_warn("random_search: empty exemplar pool, degrading to no exemplars");
    result.selection = select_none();
    return result;
  }

  const std::size_t k_eff = std::min<std::size_t>(static_cast<std::size_t>(params.k), pool.size());
  const double space = detail::candidate_space_size(pool.size(), k_eff);
  detail::CandidateEvaluator evaluator{pool,   instruction, split, kind,
                                       target, ledger,      params};
  SplitMix64 rng(params.seed);
  std::set<std::vector<std::size_t>> seen;
  long long rejections = 0;
  const long long rejection_cap = 100LL * std::max(1, params.allocation);

  while (evaluator.charges_spent < params.allocation &&
         static_cast<double>(seen.size()) < space) {
    auto positions = sample_without_replacement(pool.size(), k_eff, rng);
    if (!seen.insert(positions).second) {
      if (++rejections > rejection_cap) break;
      continue;
    }
    if (evaluator.cannot_afford(evaluator.prompt_for(positions))) break;
    double score = evaluator.evaluate(positions);
    result.trace.add({detail::to_source_indices(pool, positions), {}, 1}, score,
                     ledger.consumed());
  }

  result.selection =
      detail::selection_from_trace(pool, result.trace, result.selection.label);
  return result;
}

// Evolutionary baseline: generation 1 is random (as random_search); each
// later generation evaluates Q mutations of the best-so-far sequence, where a
// mutation swaps one position for a pool member not already in the sequence.
// Best-so-far advances only on strict improvement. floor(allocation/Q) full
// generations run, plus a truncated final generation for any remainder.
inline EsSearchResult mutation_search(const ExemplarPool& pool, const Instruction& instruction,
                                      const std::vector<TaskItem>& split, const AnswerKind& kind,
                                      GenerationEndpoint& target, BudgetLedger& ledger,
                                      const EsSearchParams& params) {
  EsSearchResult result;
  result.selection.label = "mutation:k=" + std::to_string(params.k);
  if (pool.empty()) {
    log_warn("mutation_search: empty exemplar pool, degrading to no exemplars");
    result.selection = select_none();
    return result;
  }

  detail::CandidateEvaluator evaluator{pool,   instruction, split, kind,
                                       target, ledger,      params};

  if (pool.size() <= static_cast<std::size_t>(params.k)) {
    // nothing to swap in; evaluate the whole pool once
    log_warn("mutation_search: pool size " + std::to_string(pool.size()) +
             " <= k, evaluating the full pool once");
    std::vector<std::size_t> all(pool.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    if (!evaluator.cannot_afford(evaluator.prompt_for(all))) {
      double score = evaluator.evaluate(all);
      result.trace.add({detail::to_source_indices(pool, all), {}, 1}, score, ledger.consumed());
    }
    result.selection = detail::selection_from_trace(pool, result.trace, result.selection.label);
    return result;
  }

  const std::size_t n = pool.size();
  const std::size_t k = static_cast<std::size_t>(params.k);
  const int q = std::max(1, params.population);
  SplitMix64 rng(params.seed);

  int slots_left = params.allocation;
  std::vector<std::size_t> best;
  double best_score = -1.0;
  bool stopped = false;

  // generation 1: distinct random candidates
  {
    const int gen_size = std::min(q, slots_left);
    const double space = detail::candidate_space_size(n, k);
    std::set<std::vector<std::size_t>> seen;
    long long rejections = 0;
    const long long rejection_cap = 100LL * std::max(1, params.allocation);
    int produced = 0;
    while (produced < gen_size && static_cast<double>(seen.size()) < space) {
      auto positions = sample_without_replacement(n, k, rng);
      if (!seen.insert(positions).second) {
        if (++rejections > rejection_cap) break;
        continue;
      }
      if (evaluator.cannot_afford(evaluator.prompt_for(positions))) {
        stopped = true;
        break;
      }
      double score = evaluator.evaluate(positions);
      result.trace.add({detail::to_source_indices(pool, positions), {}, 1}, score,
                       ledger.consumed());
      --slots_left;
      ++produced;
      if (score > best_score) {
        best_score = score;
        best = positions;
      }
    }
  }

  int generation = 2;
  while (slots_left > 0 && !stopped && !best.empty()) {
    const int gen_size = std::min(q, slots_left);
    std::vector<int> parent_sources = detail::to_source_indices(pool, best);
    double gen_best_score = best_score;
    std::vector<std::size_t> gen_best = best;

    for (int m = 0; m < gen_size; ++m) {
      // outsiders = pool positions not in the parent
      std::vector<std::size_t> outsiders;
      outsiders.reserve(n - k);
      for (std::size_t i = 0; i < n; ++i) {
        if (std::find(best.begin(), best.end(), i) == best.end()) outsiders.push_back(i);
      }
      std::size_t pos = rng.bounded(k);
      std::size_t repl = outsiders[rng.bounded(outsiders.size())];
      auto child = best;
      child[pos] = repl;

      if (evaluator.cannot_afford(evaluator.prompt_for(child))) {
        stopped = true;
        break;
      }
      double score = evaluator.evaluate(child);
      result.trace.add({detail::to_source_indices(pool, child), parent_sources, generation},
                       score, ledger.consumed());
      --slots_left;
      if (score > gen_best_score) {  // strict improvement only
        gen_best_score = score;
        gen_best = child;
      }
    }
    best = gen_best;
    best_score = gen_best_score;
    ++generation;
  }

  result.selection = detail::selection_from_trace(pool, result.trace, result.selection.label);
  return result;
}

}  // namespace apo
