// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/search.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace tyr {

namespace {

constexpr int kMutateRetries = 32;

std::string plan_key(const SparsityPlan& plan, long budget) {
  std::ostringstream os;
  for (int e : plan.indices) os << e << '.';
  os << ':' << budget;
  return os.str();
}

bool candidate_less(const Candidate& a, const Candidate& b) {
  if (*a.fitness != *b.fitness) return *a.fitness < *b.fitness;
  if (a.lineage != b.lineage) return a.lineage < b.lineage;
  return a.plan.indices < b.plan.indices;
}

}  // namespace

const char* to_string(Metric metric) {
  return metric == Metric::kKlLogits ? "kl-logits" : "kl-hidden";
}

Metric metric_from_string(const std::string& name) {
  if (name == "kl-logits") return Metric::kKlLogits;
  if (name == "kl-hidden") return Metric::kKlHidden;
  throw InputError("unknown metric '" + name + "'");
}

PlanSpace::PlanSpace(const SupernetStore& store, double target_sparsity) {
  const ModelConfig& config = store.config();
  target_ = target_sparsity;
  long max_unit_params = 0;
  for (int sub = 0; sub < store.sublayer_count(); ++sub) {
    const auto& record = store.sublayer(sub);
    kinds_.push_back(record.id.kind);
    realized_.push_back(record.ladder.realized);

    const UnitParams per_unit = prunable_unit_params(config, record.id.kind);
    // Ladder counts are in atomic units: heads, or FFN groups.
    const long atomic_params =
        record.id.kind == SublayerKind::kMha
            ? per_unit.params_per_unit
            : per_unit.params_per_unit * store.ffn_group_size();
    max_unit_params = std::max(max_unit_params, atomic_params);

    std::vector<long> pruned;
    pruned.reserve(record.ladder.pruned_units.size());
    for (int count : record.ladder.pruned_units) {
      pruned.push_back(count * atomic_params);
    }
    pruned_params_.push_back(std::move(pruned));
    total_prunable_ += per_unit.params_per_unit * per_unit.total_units;
  }
  tolerance_ = static_cast<double>(max_unit_params) /
               static_cast<double>(total_prunable_);

  partners_.resize(kinds_.size());
  for (std::size_t a = 0; a < kinds_.size(); ++a) {
    for (std::size_t b = 0; b < kinds_.size(); ++b) {
      if (a != b && kinds_[a] == kinds_[b]) {
        partners_[a].push_back(static_cast<int>(b));
      }
    }
  }
}

double PlanSpace::realized_overall(const SparsityPlan& plan) const {
  if (static_cast<int>(plan.indices.size()) != sublayer_count()) {
    throw InputError("plan does not cover every sublayer");
  }
  long pruned = 0;
  for (int sub = 0; sub < sublayer_count(); ++sub) {
    const int e = plan.indices[static_cast<std::size_t>(sub)];
    if (e < 0 || e >= ladder_size(sub)) {
      throw InputError("plan ladder index out of range");
    }
    pruned += pruned_params_[static_cast<std::size_t>(sub)]
                            [static_cast<std::size_t>(e)];
  }
  return static_cast<double>(pruned) / static_cast<double>(total_prunable_);
}

bool PlanSpace::balanced(const SparsityPlan& plan) const {
  return std::abs(realized_overall(plan) - target_) <= tolerance_ + 1e-12;
}

SparsityPlan PlanSpace::center_plan() const {
  SparsityPlan plan;
  plan.indices.reserve(kinds_.size());
  for (int sub = 0; sub < sublayer_count(); ++sub) {
    plan.indices.push_back((ladder_size(sub) - 1) / 2);
  }
  return plan;
}

double verify_overall_sparsity(const PlanSpace& space,
                               const SparsityPlan& plan) {
  return space.realized_overall(plan);
}

SparsityPlan mutate(const SparsityPlan& plan, const PlanSpace& space, Rng& rng,
                    bool* changed) {
  if (static_cast<int>(plan.indices.size()) != space.sublayer_count()) {
    throw InputError("mutate: plan does not cover every sublayer");
  }
  for (int attempt = 0; attempt < kMutateRetries; ++attempt) {
    const int a = static_cast<int>(rng.uniform_int(
        static_cast<std::uint64_t>(space.sublayer_count())));
    const std::vector<int>& partners = space.same_kind_partners(a);
    if (partners.empty()) continue;
    const int b = partners[rng.uniform_int(partners.size())];
    SparsityPlan next = plan;
    next.indices[static_cast<std::size_t>(a)] -= 1;
    next.indices[static_cast<std::size_t>(b)] += 1;
    if (next.indices[static_cast<std::size_t>(a)] < 0) continue;
    if (next.indices[static_cast<std::size_t>(b)] >= space.ladder_size(b)) {
      continue;
    }
    if (!space.balanced(next)) continue;
    if (changed != nullptr) *changed = true;
    return next;
  }
  if (changed != nullptr) *changed = false;
  return plan;
}

SubnetEvaluator::SubnetEvaluator(const TransformerWeights& dense,
                                 const SupernetStore& store,
                                 const TokenCorpus& corpus,
                                 double target_sparsity,
                                 std::uint64_t eval_seed, Metric metric)
    : dense_(dense),
      store_(store),
      corpus_(corpus),
      space_(store, target_sparsity),
      metric_(metric),
      eval_seed_(eval_seed),
      working_(dense) {
  if (!dense.is_dense()) {
    throw InputError("subnet evaluator: reference model must be dense");
  }
  current_.assign(static_cast<std::size_t>(space_.sublayer_count()), -1);
  if (metric_ == Metric::kKlHidden) {
    const int n = dense.config.n_layers;
    std::vector<int> layers{0, n / 2, n - 1};
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (int l : layers) probes_.push_back({l, SublayerKind::kFfn});
  }
}

const SubnetEvaluator::BudgetData& SubnetEvaluator::budget_data(
    long budget_tokens) {
  auto it = budgets_.find(budget_tokens);
  if (it != budgets_.end()) return it->second;

  BudgetData bd;
  bd.slices = sample_batches(corpus_, budget_tokens, eval_seed_);
  bd.dense_logits.reserve(bd.slices.size());
  for (const auto& slice : bd.slices) {
    ForwardResult fr = forward(dense_, slice, probes_);
    bd.dense_logits.push_back(std::move(fr.logits));
    if (!probes_.empty()) {
      std::vector<Matrix> hidden;
      hidden.reserve(probes_.size());
      for (const SublayerId& probe : probes_) {
        hidden.push_back(std::move(fr.captured.at(sublayer_index(probe))));
      }
      bd.dense_hidden.push_back(std::move(hidden));
    }
  }
  return budgets_.emplace(budget_tokens, std::move(bd)).first->second;
}

void SubnetEvaluator::apply_structure(int sublayer, int ladder_index) {
  const SublayerId id = sublayer_from_index(sublayer);
  const PrunedSublayer structure =
      store_.load_structure({id.layer, id.kind, ladder_index});
  const ModelConfig& config = dense_.config;
  LayerWeights& layer = working_.layers[static_cast<std::size_t>(id.layer)];
  const int hd = config.head_dim;
  if (id.kind == SublayerKind::kMha) {
    layer.wq.setZero(config.d_model, config.d_model);
    layer.wk.setZero(config.d_model, config.d_model);
    layer.wv.setZero(config.d_model, config.d_model);
    layer.wo.setZero(config.d_model, config.d_model);
    for (std::size_t j = 0; j < structure.retained_units.size(); ++j) {
      const long src = static_cast<long>(j) * hd;
      const long dst = static_cast<long>(structure.retained_units[j]) * hd;
      layer.wq.middleCols(dst, hd) = structure.wq.middleCols(src, hd);
      layer.wk.middleCols(dst, hd) = structure.wk.middleCols(src, hd);
      layer.wv.middleCols(dst, hd) = structure.wv.middleCols(src, hd);
      layer.wo.middleRows(dst, hd) = structure.wo.middleRows(src, hd);
    }
  } else {
    layer.wgate.setZero(config.d_model, config.d_ffn);
    layer.wup.setZero(config.d_model, config.d_ffn);
    layer.wdown.setZero(config.d_ffn, config.d_model);
    for (std::size_t j = 0; j < structure.retained_units.size(); ++j) {
      const long dst = structure.retained_units[j];
      layer.wgate.col(dst) = structure.wgate.col(static_cast<long>(j));
      layer.wup.col(dst) = structure.wup.col(static_cast<long>(j));
      layer.wdown.row(dst) = structure.wdown.row(static_cast<long>(j));
    }
  }
}

void SubnetEvaluator::swap_to(const SparsityPlan& plan) {
  for (int sub = 0; sub < space_.sublayer_count(); ++sub) {
    const int e = plan.indices[static_cast<std::size_t>(sub)];
    if (current_[static_cast<std::size_t>(sub)] != e) {
      apply_structure(sub, e);
      current_[static_cast<std::size_t>(sub)] = e;
    }
  }
}

double SubnetEvaluator::fitness(const SparsityPlan& plan, long budget_tokens) {
  const std::string key = plan_key(plan, budget_tokens);
  auto hit = fitness_cache_.find(key);
  if (hit != fitness_cache_.end()) return hit->second;

  const BudgetData& bd = budget_data(budget_tokens);
  swap_to(plan);

  double kl_total = 0.0;
  double hidden_total = 0.0;
  for (std::size_t i = 0; i < bd.slices.size(); ++i) {
    ForwardResult fr = forward(working_, bd.slices[i], probes_);
    kl_total += kl_to_dense(bd.dense_logits[i], fr.logits);
    for (std::size_t p = 0; p < probes_.size(); ++p) {
      const Matrix& dense_h = bd.dense_hidden[i][p];
      const Matrix& sparse_h = fr.captured.at(sublayer_index(probes_[p]));
      hidden_total += (dense_h - sparse_h).squaredNorm() /
                      static_cast<double>(dense_h.rows());
    }
  }
  const double n = static_cast<double>(bd.slices.size());
  double fitness = kl_total / n;
  if (!probes_.empty()) {
    fitness += hidden_total / (n * static_cast<double>(probes_.size()));
  }
  fitness_cache_.emplace(key, fitness);
  evaluated_sparsities_.push_back(space_.realized_overall(plan));
  return fitness;
}

void SearchConfig::validate() const {
  if (generations < 0) throw InputError("search: generations must be >= 0");
  if (offspring < 1) throw InputError("search: offspring must be >= 1");
  if (stages.empty()) throw InputError("search: stage schedule is empty");
  for (std::size_t k = 0; k < stages.size(); ++k) {
    if (stages[k].survivors < 1 || stages[k].budget_tokens < 1) {
      throw InputError("search: stage survivors and budgets must be >= 1");
    }
    if (k > 0) {
      if (stages[k].survivors >= stages[k - 1].survivors) {
        throw InputError("search: stage survivors must strictly decrease");
      }
      if (stages[k].budget_tokens <= stages[k - 1].budget_tokens) {
        throw InputError("search: stage budgets must strictly increase");
      }
    }
  }
}

Candidate select(std::vector<Candidate> candidates,
                 std::span<const SearchStage> stages, SubnetEvaluator& eval) {
  if (candidates.empty()) throw InputError("select: no candidates");
  if (stages.empty()) throw InputError("select: no stages");

  // Dedup: evaluate each distinct plan once; duplicates keep their counts
  // for the survivor arithmetic. The earliest lineage wins.
  std::vector<Candidate> pool;
  std::map<std::vector<int>, std::size_t> index;
  for (Candidate& c : candidates) {
    auto it = index.find(c.plan.indices);
    if (it == index.end()) {
      index.emplace(c.plan.indices, pool.size());
      pool.push_back(std::move(c));
    } else {
      pool[it->second].multiplicity += c.multiplicity;
      pool[it->second].lineage = std::min(pool[it->second].lineage, c.lineage);
    }
  }

  for (const SearchStage& stage : stages) {
    // Keep ranked entries until their multiplicities cover the survivor count.
    std::vector<Candidate> entrants;
    int covered = 0;
    for (Candidate& c : pool) {
      if (covered >= stage.survivors) break;
      covered += c.multiplicity;
      entrants.push_back(std::move(c));
    }
    for (Candidate& c : entrants) {
      c.fitness = eval.fitness(c.plan, stage.budget_tokens);
    }
    std::sort(entrants.begin(), entrants.end(), candidate_less);
    pool = std::move(entrants);
  }
  return pool.front();
}

SearchResult evolutionary_search(SubnetEvaluator& eval,
                                 const SparsityPlan& init_plan,
                                 const SearchConfig& config) {
  config.validate();
  const PlanSpace& space = eval.space();
  if (!space.balanced(init_plan)) {
    throw InputError("evolutionary_search: init plan is not balanced");
  }
  const long final_budget = config.stages.back().budget_tokens;

  SearchResult result;
  result.best = init_plan;
  long incumbent_lineage = 0;
  if (config.generations == 0) {
    result.best_fitness = eval.fitness(init_plan, final_budget);
    return result;
  }

  for (int g = 1; g <= config.generations; ++g) {
    std::vector<Candidate> candidates;
    candidates.reserve(static_cast<std::size_t>(config.offspring) + 1);
    candidates.push_back({result.best, std::nullopt, incumbent_lineage, 1});
    for (int i = 0; i < config.offspring; ++i) {
      Rng rng(derive_seed(config.seed,
                          {0x6d75746174655fULL, static_cast<std::uint64_t>(g),
                           static_cast<std::uint64_t>(i)}));
      bool changed = false;
      SparsityPlan plan = mutate(result.best, space, rng, &changed);
      candidates.push_back(
          {std::move(plan), std::nullopt,
           changed ? g : incumbent_lineage, 1});
    }

    const Candidate winner = select(std::move(candidates), config.stages, eval);
    const double winner_fitness = eval.fitness(winner.plan, final_budget);
    const double incumbent_fitness = eval.fitness(result.best, final_budget);
    if (winner_fitness < incumbent_fitness) {
      result.best = winner.plan;
      incumbent_lineage = g;
    }

    TraceEntry entry;
    entry.generation = g;
    entry.incumbent_fitness = eval.fitness(result.best, final_budget);
    entry.budget = final_budget;
    entry.plan = result.best;
    entry.realized_sparsity = space.realized_overall(result.best);
    result.trace.push_back(std::move(entry));
  }
  result.best_fitness = eval.fitness(result.best, final_budget);
  return result;
}

}  // namespace tyr
