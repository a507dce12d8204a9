// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparsity-shift evolutionary search over a supernet.
//
// A plan assigns one ladder index per sublayer. Mutation shifts one ladder
// step between two distinct same-kind sublayers so overall sparsity is
// conserved; candidates are filtered through a multi-stage token-budget
// schedule, and the incumbent is elitist: it is replaced only by a candidate
// that strictly beats it on the final budget.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tyr/calibration.hpp"
#include "tyr/model.hpp"
#include "tyr/supernet.hpp"

namespace tyr {

struct SparsityPlan {
  std::vector<int> indices;  // ladder index per sublayer_index

  friend bool operator==(const SparsityPlan&, const SparsityPlan&) = default;
};

enum class Metric { kKlLogits, kKlHidden };

const char* to_string(Metric metric);
Metric metric_from_string(const std::string& name);

// Static description of the plan space: per-sublayer realized sparsities and
// parameter weights, the overall target, and the feasibility tolerance (one
// atomic unit's parameter weight).
class PlanSpace {
 public:
  PlanSpace(const SupernetStore& store, double target_sparsity);

  int sublayer_count() const { return static_cast<int>(kinds_.size()); }
  int ladder_size(int sublayer) const {
    return static_cast<int>(realized_[sublayer].size());
  }
  SublayerKind kind(int sublayer) const { return kinds_[sublayer]; }
  double realized_sparsity(int sublayer, int e) const {
    return realized_[sublayer][e];
  }
  long pruned_params(int sublayer, int e) const {
    return pruned_params_[sublayer][e];
  }
  long total_prunable() const { return total_prunable_; }
  double target() const { return target_; }
  double tolerance() const { return tolerance_; }

  // Realized overall sparsity: pruned prunable params / total prunable.
  double realized_overall(const SparsityPlan& plan) const;
  bool balanced(const SparsityPlan& plan) const;
  SparsityPlan center_plan() const;

  const std::vector<int>& same_kind_partners(int sublayer) const {
    return partners_[sublayer];
  }

 private:
  std::vector<SublayerKind> kinds_;
  std::vector<std::vector<double>> realized_;
  std::vector<std::vector<long>> pruned_params_;
  std::vector<std::vector<int>> partners_;
  long total_prunable_ = 0;
  double target_ = 0.0;
  double tolerance_ = 0.0;
};

double verify_overall_sparsity(const PlanSpace& space, const SparsityPlan& plan);

// One sparsity shift between two distinct same-kind sublayers. Infeasible
// draws are resampled (bounded retries); on exhaustion the plan is returned
// unchanged and *changed is false.
SparsityPlan mutate(const SparsityPlan& plan, const PlanSpace& space, Rng& rng,
                    bool* changed = nullptr);

// Just-in-time masked evaluation of subnet candidates against the dense
// model. Holds one full-size working copy of the weights and swaps pruned
// structures in from the store as plans change; fitness values are cached
// per (plan, budget) and evaluation slices are fixed per budget, so repeated
// queries are exact and deterministic.
class SubnetEvaluator {
 public:
  SubnetEvaluator(const TransformerWeights& dense, const SupernetStore& store,
                  const TokenCorpus& corpus, double target_sparsity,
                  std::uint64_t eval_seed, Metric metric = Metric::kKlLogits);

  // Mean KL to the dense logits (plus hidden-state terms for kKlHidden) on
  // the fixed slices of `budget` tokens. Lower is better.
  double fitness(const SparsityPlan& plan, long budget_tokens);

  const PlanSpace& space() const { return space_; }

  // Realized overall sparsity of every distinct (plan, budget) evaluation,
  // in evaluation order. Exposed for conservation audits.
  const std::vector<double>& evaluated_sparsities() const {
    return evaluated_sparsities_;
  }

 private:
  struct BudgetData {
    std::vector<std::span<const std::int32_t>> slices;
    std::vector<Matrix> dense_logits;
    std::vector<std::vector<Matrix>> dense_hidden;  // per slice, per probe
  };

  const BudgetData& budget_data(long budget_tokens);
  void swap_to(const SparsityPlan& plan);
  void apply_structure(int sublayer, int ladder_index);

  const TransformerWeights& dense_;
  const SupernetStore& store_;
  const TokenCorpus& corpus_;
  PlanSpace space_;
  Metric metric_;
  std::uint64_t eval_seed_;
  std::vector<SublayerId> probes_;  // captured sublayers for kKlHidden

  TransformerWeights working_;
  std::vector<int> current_;  // ladder index swapped into working_, -1 = dense

  std::map<long, BudgetData> budgets_;
  std::unordered_map<std::string, double> fitness_cache_;
  std::vector<double> evaluated_sparsities_;
};

struct Candidate {
  SparsityPlan plan;
  std::optional<double> fitness;
  long lineage = 0;  // generation the plan first appeared
  int multiplicity = 1;
};

struct SearchStage {
  int survivors = 0;       // candidates evaluated at this stage
  long budget_tokens = 0;  // evaluation budget
};

struct SearchConfig {
  int generations = 50;
  int offspring = 128;
  std::vector<SearchStage> stages = {
      {128, 2048}, {16, 16384}, {4, 131072}};
  std::uint64_t seed = 0;

  // Throws InputError unless survivor counts strictly decrease and budgets
  // strictly increase.
  void validate() const;
};

// Multi-stage selection: stage k evaluates the top `survivors` of the
// previous ranking on its budget. Ties break by (fitness, lineage, plan).
// Duplicates are evaluated once but keep their multiplicity for survivor
// counting. Returns the final-stage argmin.
Candidate select(std::vector<Candidate> candidates,
                 std::span<const SearchStage> stages, SubnetEvaluator& eval);

struct TraceEntry {
  int generation = 0;
  double incumbent_fitness = 0.0;
  long budget = 0;
  SparsityPlan plan;
  double realized_sparsity = 0.0;
};

struct SearchResult {
  SparsityPlan best;
  double best_fitness = 0.0;
  std::vector<TraceEntry> trace;
};

SearchResult evolutionary_search(SubnetEvaluator& eval,
                                 const SparsityPlan& init_plan,
                                 const SearchConfig& config);

}  // namespace tyr
