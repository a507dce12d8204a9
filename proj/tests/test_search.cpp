// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <set>

#include "test_util.hpp"
#include "tyr/search.hpp"

using namespace tyr;
using testutil::mem_corpus;
using testutil::small_config;
using testutil::small_model;
using testutil::TempDir;
using testutil::uniform_ladders;

namespace {

// 2 layers, 8 heads of 8, 8 FFN groups of 16, ladders {0, 0.5, 1}. A
// one-step MHA shift moves 4 heads, far beyond the one-unit tolerance, so
// with the FFN pinned exactly the three head-balanced plans are feasible,
// and index 0 / index 2 are the dense / fully-pruned structures.
struct SearchFixture {
  ModelConfig config = small_config(2, 64, 8, 128, 64, 256);
  TransformerWeights dense = small_model(50, config);
  TokenCorpus corpus =
      mem_corpus(testutil::random_tokens(6144, config.vocab_size, 51), 128);
  TempDir dir;
  SupernetStore store;

  explicit SearchFixture(bool ffn_fixed) : store(build(ffn_fixed)) {}

  SupernetStore build(bool ffn_fixed) {
    std::vector<SparsityLadder> ladders;
    for (int sub = 0; sub < config.sublayer_count(); ++sub) {
      const SublayerId id = sublayer_from_index(sub);
      if (id.kind == SublayerKind::kMha) {
        ladders.push_back(generate_ladder(0.5, 0.5, 3, config.n_heads));
      } else if (ffn_fixed) {
        ladders.push_back(generate_ladder(0.5, 0.25, 1, config.d_ffn / 16));
      } else {
        ladders.push_back(generate_ladder(0.5, 0.5, 3, config.d_ffn / 16));
      }
    }
    const auto batches = sample_batches(corpus, 1024, 1);
    return build_supernet(dense, batches, ladders, 16, 0.01,
                          dir.path() / "it", ErrorAccum::kExpectation, 52);
  }
};

}  // namespace

TEST_CASE("plan space: tolerance, balance, center plan") {
  SearchFixture fx(/*ffn_fixed=*/true);
  const PlanSpace space(fx.store, 0.5);
  CHECK(space.sublayer_count() == 4);
  // max atomic unit: FFN group = 3*64*16 = 3072 of 81920 prunable params.
  CHECK(space.total_prunable() == 81920);
  CHECK(space.tolerance() == doctest::Approx(3072.0 / 81920.0));

  const SparsityPlan center = space.center_plan();
  CHECK(center.indices == std::vector<int>{1, 0, 1, 0});
  CHECK(space.realized_overall(center) == doctest::Approx(0.5));
  CHECK(space.balanced(center));

  // Moving one MHA up without compensating breaks balance (2 heads = 4096).
  SparsityPlan lopsided = center;
  lopsided.indices[0] = 2;
  CHECK_FALSE(space.balanced(lopsided));
}

TEST_CASE("verify_overall_sparsity: shifts conserve, oracle matches tensors") {
  SearchFixture fx(/*ffn_fixed=*/true);
  const PlanSpace space(fx.store, 0.5);
  const SparsityPlan center = space.center_plan();

  SparsityPlan shifted = center;
  shifted.indices[0] = 0;
  shifted.indices[2] = 2;
  CHECK(std::abs(verify_overall_sparsity(space, shifted) -
                 verify_overall_sparsity(space, center)) <= 1e-12);

  // Parameter-count oracle: retained tensor sizes of the compacted model.
  for (const SparsityPlan& plan : {center, shifted}) {
    const TransformerWeights compacted =
        apply_plan(fx.dense, fx.store, plan.indices);
    long retained = 0;
    for (const auto& layer : compacted.layers) {
      retained += layer.wq.size() + layer.wk.size() + layer.wv.size() +
                  layer.wo.size() + layer.wgate.size() + layer.wup.size() +
                  layer.wdown.size();
    }
    const double realized =
        1.0 - static_cast<double>(retained) /
                  static_cast<double>(space.total_prunable());
    CHECK(verify_overall_sparsity(space, plan) == doctest::Approx(realized));
  }
}

TEST_CASE("mutate: same-kind one-step shifts, determinism, feasibility") {
  SearchFixture fx(/*ffn_fixed=*/false);
  const PlanSpace space(fx.store, 0.5);
  const SparsityPlan center = space.center_plan();

  Rng rng_a(99), rng_b(99);
  bool changed_a = false, changed_b = false;
  const SparsityPlan a = mutate(center, space, rng_a, &changed_a);
  const SparsityPlan b = mutate(center, space, rng_b, &changed_b);
  CHECK(a == b);
  CHECK(changed_a == changed_b);

  Rng rng(123);
  int changed_count = 0;
  for (int trial = 0; trial < 200; ++trial) {
    bool changed = false;
    const SparsityPlan next = mutate(center, space, rng, &changed);
    if (!changed) {
      CHECK(next == center);
      continue;
    }
    ++changed_count;
    int downs = 0, ups = 0;
    std::optional<SublayerKind> kind;
    for (int sub = 0; sub < space.sublayer_count(); ++sub) {
      const int delta = next.indices[sub] - center.indices[sub];
      CHECK(next.indices[sub] >= 0);
      CHECK(next.indices[sub] < space.ladder_size(sub));
      if (delta == 0) continue;
      CHECK(std::abs(delta) == 1);
      if (delta < 0) ++downs;
      if (delta > 0) ++ups;
      if (kind.has_value()) {
        CHECK(*kind == space.kind(sub));  // never mixes MHA and FFN
      } else {
        kind = space.kind(sub);
      }
    }
    CHECK(downs == 1);
    CHECK(ups == 1);
    CHECK(space.balanced(next));
  }
  CHECK(changed_count > 100);
}

TEST_CASE("mutate: no distinct same-kind partner leaves the plan unchanged") {
  const ModelConfig config = small_config(1, 64, 8, 128, 64, 256);
  const TransformerWeights dense = small_model(60, config);
  const TokenCorpus corpus =
      mem_corpus(testutil::random_tokens(1024, config.vocab_size, 61), 128);
  TempDir dir;
  std::vector<SparsityLadder> ladders;
  ladders.push_back(generate_ladder(0.5, 0.25, 3, config.n_heads));
  ladders.push_back(generate_ladder(0.5, 0.25, 3, config.d_ffn / 16));
  const SupernetStore store =
      build_supernet(dense, sample_batches(corpus, 512, 1), ladders, 16, 0.01,
                     dir.path() / "it", ErrorAccum::kExpectation, 62);
  const PlanSpace space(store, 0.5);
  Rng rng(5);
  bool changed = true;
  const SparsityPlan out = mutate(space.center_plan(), space, rng, &changed);
  CHECK_FALSE(changed);
  CHECK(out == space.center_plan());
}

TEST_CASE("fitness: dense plan is zero, all-pruned matches residual-only KL") {
  SearchFixture fx(/*ffn_fixed=*/false);
  SubnetEvaluator eval(fx.dense, fx.store, fx.corpus, 0.5, 77);

  SparsityPlan dense_plan;
  dense_plan.indices = {0, 0, 0, 0};
  CHECK(eval.fitness(dense_plan, 512) <= 1e-15);

  SparsityPlan empty_plan;
  empty_plan.indices = {2, 2, 2, 2};
  const double fit = eval.fitness(empty_plan, 512);
  CHECK(fit > 0.0);

  const TransformerWeights residual = testutil::residual_only_model(fx.dense);
  const auto slices = sample_batches(fx.corpus, 512, 77);
  double want = 0.0;
  for (const auto& s : slices) {
    want += kl_to_dense(forward(fx.dense, s).logits,
                        forward(residual, s).logits);
  }
  want /= static_cast<double>(slices.size());
  CHECK(fit == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("fitness: every feasible plan matches an exhaustive masked oracle") {
  SearchFixture fx(/*ffn_fixed=*/true);
  SubnetEvaluator eval(fx.dense, fx.store, fx.corpus, 0.5, 78);
  const auto slices = sample_batches(fx.corpus, 512, 78);

  for (int e0 = 0; e0 < 3; ++e0) {
    for (int e1 = 0; e1 < 3; ++e1) {
      SparsityPlan plan;
      plan.indices = {e0, 0, e1, 0};
      const double got = eval.fitness(plan, 512);
      const TransformerWeights masked =
          testutil::make_masked_model(fx.dense, fx.store, plan.indices);
      double want = 0.0;
      for (const auto& s : slices) {
        want += kl_to_dense(forward(fx.dense, s).logits,
                            forward(masked, s).logits);
      }
      want /= static_cast<double>(slices.size());
      CHECK(std::abs(got - want) < 1e-9);
    }
  }
}

TEST_CASE("select: single-stage argmin and staged survivor membership") {
  SearchFixture fx(/*ffn_fixed=*/true);
  SubnetEvaluator eval(fx.dense, fx.store, fx.corpus, 0.5, 79);

  std::vector<Candidate> cands;
  std::vector<SparsityPlan> plans;
  for (int e0 = 0; e0 < 3; ++e0) {
    for (int e1 = 0; e1 < 3; ++e1) {
      SparsityPlan p;
      p.indices = {e0, 0, e1, 0};
      plans.push_back(p);
      cands.push_back({p, std::nullopt, 0, 1});
    }
  }

  const std::vector<SearchStage> single{{9, 512}};
  const Candidate best = select(cands, single, eval);
  double best_direct = 1e300;
  SparsityPlan argmin;
  for (const auto& p : plans) {
    const double f = eval.fitness(p, 512);
    if (f < best_direct) {
      best_direct = f;
      argmin = p;
    }
  }
  CHECK(best.plan == argmin);
  CHECK(*best.fitness == doctest::Approx(best_direct));

  // Three stages: the winner is a stage-2 survivor and the argmin there on
  // the final budget.
  const std::vector<SearchStage> staged{{8, 256}, {2, 512}, {1, 1024}};
  std::vector<Candidate> eight(cands.begin(), cands.begin() + 8);
  const Candidate winner = select(eight, staged, eval);
  std::vector<std::pair<double, SparsityPlan>> ranked;
  for (std::size_t i = 0; i < 8; ++i) {
    ranked.emplace_back(eval.fitness(eight[i].plan, 256), eight[i].plan);
  }
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) {
              return a.first != b.first ? a.first < b.first
                                        : a.second.indices < b.second.indices;
            });
  const std::vector<SparsityPlan> survivors{ranked[0].second, ranked[1].second};
  CHECK((winner.plan == survivors[0] || winner.plan == survivors[1]));
  const double f0 = eval.fitness(survivors[0], 1024);
  const double f1 = eval.fitness(survivors[1], 1024);
  CHECK(*winner.fitness == doctest::Approx(std::min(f0, f1)));
}

TEST_CASE("select: duplicates are deduplicated but keep survivor counts") {
  SearchFixture fx(/*ffn_fixed=*/true);
  SubnetEvaluator eval(fx.dense, fx.store, fx.corpus, 0.5, 80);
  SparsityPlan a, b;
  a.indices = {1, 0, 1, 0};
  b.indices = {0, 0, 2, 0};

  const std::size_t before = eval.evaluated_sparsities().size();
  std::vector<Candidate> cands{{a, std::nullopt, 0, 1},
                               {a, std::nullopt, 1, 1},
                               {a, std::nullopt, 2, 1},
                               {b, std::nullopt, 0, 1}};
  const std::vector<SearchStage> staged{{4, 256}, {1, 512}};
  (void)select(cands, staged, eval);
  // Stage 1 evaluates the two distinct plans once each (multiplicities only
  // count toward the survivor quota); stage 2 evaluates the single winner.
  CHECK(eval.evaluated_sparsities().size() - before == 3);
}

TEST_CASE("evolutionary_search: zero generations returns the init plan") {
  SearchFixture fx(/*ffn_fixed=*/true);
  SubnetEvaluator eval(fx.dense, fx.store, fx.corpus, 0.5, 81);
  SearchConfig sc;
  sc.generations = 0;
  sc.offspring = 4;
  sc.stages = {{5, 256}, {1, 512}};
  sc.seed = 3;
  const SearchResult r =
      evolutionary_search(eval, eval.space().center_plan(), sc);
  CHECK(r.best == eval.space().center_plan());
  CHECK(r.trace.empty());
}

TEST_CASE("evolutionary_search: finds the exhaustive optimum, monotone trace") {
  SearchFixture fx(/*ffn_fixed=*/true);
  SubnetEvaluator eval(fx.dense, fx.store, fx.corpus, 0.5, 82);
  const PlanSpace& space = eval.space();

  // Exhaustive oracle over the <= 3 balanced plans.
  double best_fit = 1e300;
  SparsityPlan best_plan;
  int balanced_count = 0;
  for (int e0 = 0; e0 < 3; ++e0) {
    for (int e1 = 0; e1 < 3; ++e1) {
      SparsityPlan p;
      p.indices = {e0, 0, e1, 0};
      if (!space.balanced(p)) continue;
      ++balanced_count;
      const double f = eval.fitness(p, 1024);
      if (f < best_fit) {
        best_fit = f;
        best_plan = p;
      }
    }
  }
  CHECK(balanced_count == 3);

  SearchConfig sc;
  sc.generations = 12;
  sc.offspring = 8;
  sc.stages = {{9, 256}, {3, 512}, {1, 1024}};
  sc.seed = 4;
  const SearchResult r =
      evolutionary_search(eval, space.center_plan(), sc);
  CHECK(r.best == best_plan);
  CHECK(r.best_fitness == doctest::Approx(best_fit));

  double prev = 1e300;
  for (const TraceEntry& entry : r.trace) {
    CHECK(entry.incumbent_fitness <= prev);
    CHECK(entry.budget == 1024);
    prev = entry.incumbent_fitness;
  }

  // Every evaluated candidate conserved overall sparsity.
  for (double s : eval.evaluated_sparsities()) {
    CHECK(std::abs(s - 0.5) <= space.tolerance() + 1e-12);
  }
}

TEST_CASE("evolutionary_search: deterministic for a fixed seed") {
  SearchFixture fx(/*ffn_fixed=*/false);
  SearchConfig sc;
  sc.generations = 6;
  sc.offspring = 6;
  sc.stages = {{7, 256}, {2, 512}};
  sc.seed = 5;

  SubnetEvaluator eval_a(fx.dense, fx.store, fx.corpus, 0.5, 83);
  const SearchResult a =
      evolutionary_search(eval_a, eval_a.space().center_plan(), sc);
  SubnetEvaluator eval_b(fx.dense, fx.store, fx.corpus, 0.5, 83);
  const SearchResult b =
      evolutionary_search(eval_b, eval_b.space().center_plan(), sc);

  CHECK(a.best == b.best);
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].plan == b.trace[i].plan);
    CHECK(a.trace[i].incumbent_fitness == b.trace[i].incumbent_fitness);
  }
}

TEST_CASE("search config validation") {
  SearchConfig sc;
  sc.stages = {{8, 512}, {8, 1024}};
  CHECK_THROWS_AS(sc.validate(), InputError);
  sc.stages = {{8, 1024}, {2, 512}};
  CHECK_THROWS_AS(sc.validate(), InputError);
  sc.stages = {};
  CHECK_THROWS_AS(sc.validate(), InputError);
  sc.stages = {{8, 512}, {2, 1024}};
  CHECK_NOTHROW(sc.validate());
}
