// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion. Exit code is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <vector>

#include "test_util.hpp"
#include "tyr/checkpoint.hpp"
#include "tyr/orchestrator.hpp"
#include "tyr/search.hpp"
#include "tyr/supernet.hpp"
#include "tyr/toygen.hpp"

using namespace tyr;
using testutil::TempDir;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << (detail.tellp() > 0 ? "; " : "") << "FAILED: " << what;
    }
  }
  void note(const std::string& what) {
    detail << (detail.tellp() > 0 ? "; " : "") << what;
  }
};

Matrix random_mat(long rows, long cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

double rel_err(const Matrix& got, const Matrix& want) {
  const double denom = want.norm();
  return denom == 0.0 ? (got - want).norm() : (got - want).norm() / denom;
}

// ---------------------------------------------------------------------------
// C1: rank-1 inverse maintenance vs fresh factorizations.
void c1(Check& c) {
  double worst = 0.0;
  int trials = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 8 + (trial * 7) % 57;  // spans [8, 64]
    const Matrix x = random_mat(2 * d, d, 1000 + trial);
    const Matrix h = x.transpose() * x;
    Matrix w = random_mat(d, 6, 2000 + trial);
    HessianState state = build_hessian_state(w, h, 0.01);
    const UnitGrouping g{1, d};
    Rng rng(3000 + trial);
    std::vector<int> alive(d);
    for (int i = 0; i < d; ++i) alive[i] = i;
    const int steps = d - 1;
    for (int step = 0; step < steps; ++step) {
      const std::size_t pick = rng.uniform_int(alive.size());
      const int unit = alive[pick];
      alive.erase(alive.begin() + static_cast<long>(pick));
      prune_unit_step(state, w, unit, g);

      const std::vector<int> active = state.active_channels();
      Matrix damped = h(active, active);
      damped.diagonal().array() += state.lambda;
      const Matrix fresh =
          damped.llt().solve(Matrix::Identity(active.size(), active.size()));
      worst = std::max(worst, rel_err(state.inv_h(active, active), fresh));
    }
    ++trials;
  }
  c.expect(trials == 100, "ran 100 SPD instances");
  c.expect(worst < 1e-6, "maintained inverse within 1e-6 of fresh");
  std::ostringstream os;
  os << "worst relative error " << worst << " over " << trials << " instances";
  c.note(os.str());
}

// ---------------------------------------------------------------------------
// C2: adjustment matches the fresh-solve algebra; reconstruction error is
// nondecreasing along every trajectory.
void c2(Check& c) {
  double worst_adj = 0.0;
  bool monotone = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int d_in = 16, d_out = 8;
    const Matrix x = random_mat(3 * d_in, d_in, 4000 + trial);
    const Matrix h = x.transpose() * x;
    const Matrix w0 = random_mat(d_in, d_out, 5000 + trial);
    ActivationStats stats(d_in);
    stats.accumulate(x);
    const UnitGrouping g{2, 8};
    std::vector<double> every;
    for (int k = 0; k <= 8; ++k) every.push_back(k / 8.0);
    const PruneTrajectory traj = prune_progressive(w0, stats, g, every, 0.01);

    const double lambda =
        std::max(0.01 * h.trace() / d_in, 1e-8 * (1.0 + h.trace()));
    const Matrix dense_out = x * w0;
    double prev = -1.0;
    for (const auto& snap : traj.snapshots) {
      Matrix approx = Matrix::Zero(x.rows(), d_out);
      if (!snap.retained_channels.empty()) {
        // Oracle: W_active + H^-1_active G_active at the quadratic model's
        // stationary point == fresh damped solve of the retained system.
        Matrix damped = h(snap.retained_channels, snap.retained_channels);
        damped.diagonal().array() += lambda;
        const Matrix grad =
            (h(snap.retained_channels, Eigen::all) * w0).eval() +
            lambda * w0(snap.retained_channels, Eigen::all);
        const Matrix oracle = damped.llt().solve(grad);
        worst_adj = std::max(worst_adj, rel_err(snap.packed_w, oracle));
        approx = x(Eigen::all, snap.retained_channels) * snap.packed_w;
      }
      const double err = (dense_out - approx).squaredNorm();
      if (err < prev - 1e-9 * (1.0 + err)) monotone = false;
      prev = err;
    }
  }
  c.expect(worst_adj < 1e-9, "adjusted weights match the fresh-solve oracle");
  c.expect(monotone, "reconstruction error nondecreasing along trajectories");
  std::ostringstream os;
  os << "worst adjustment deviation " << worst_adj;
  c.note(os.str());
}

// ---------------------------------------------------------------------------
// C3: trajectory nesting across snapshot sets.
void c3(Check& c) {
  const std::vector<double> targets{0.25, 0.5, 0.75};
  for (int trial = 0; trial < 10; ++trial) {
    const int groups = 8;
    const int gs = trial % 2 == 0 ? 2 : 4;
    const int d_in = groups * gs;
    const Matrix x = random_mat(2 * d_in + 8, d_in, 6000 + trial);
    const Matrix w0 = random_mat(d_in, 8, 7000 + trial);
    ActivationStats stats(d_in);
    stats.accumulate(x);
    const UnitGrouping g{gs, groups};

    const PruneTrajectory joint = prune_progressive(w0, stats, g, targets, 0.01);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const PruneTrajectory solo = prune_progressive(
          w0, stats, g, std::vector<double>{targets[i]}, 0.01);
      c.expect(joint.snapshots[i].retained_units ==
                   solo.snapshots[0].retained_units,
               "identical retained sets");
      const Matrix& a = joint.snapshots[i].packed_w;
      const Matrix& b = solo.snapshots[0].packed_w;
      c.expect(a.rows() == b.rows() && a.cols() == b.cols() &&
                   std::memcmp(a.data(), b.data(),
                               sizeof(double) *
                                   static_cast<std::size_t>(a.size())) == 0,
               "bit-identical snapshot weights");
      if (i > 0) {
        for (int u : joint.snapshots[i].retained_units) {
          c.expect(std::find(joint.snapshots[i - 1].retained_units.begin(),
                             joint.snapshots[i - 1].retained_units.end(), u) !=
                       joint.snapshots[i - 1].retained_units.end(),
                   "snapshots are nested");
        }
      }
    }
  }
  c.note("10 modules, snapshot sets {0.25, 0.5, 0.75}");
}

// ---------------------------------------------------------------------------
// C4: the two published ladder instances and the halving schedule.
void c4(Check& c) {
  const SparsityLadder a = generate_ladder(0.5, 0.125, 9, 8);
  for (int e = 0; e < 9; ++e) {
    c.expect(std::abs(a.realized[e] - 0.125 * e) < 1e-15,
             "ladder(0.5, 0.125, 9) hits {0 .. 1} in 0.125 steps");
  }
  const SparsityLadder b = generate_ladder(0.375, 0.0625, 9, 16);
  for (int e = 0; e < 9; ++e) {
    c.expect(std::abs(b.realized[e] - (0.125 + 0.0625 * e)) < 1e-15,
             "ladder(0.375, 0.0625, 9) spans {0.125 .. 0.625}");
  }
  RunConfig cfg;
  cfg.initial_interval = 0.125;
  const double expected[4] = {0.125, 0.0625, 0.03125, 0.015625};
  for (int t = 1; t <= 4; ++t) {
    c.expect(cfg.interval_at(t) == expected[t - 1],
             "interval schedule 12.5% halving");
  }
  c.note("both instances exact; schedule {12.5, 6.25, 3.125, 1.5625}%");
}

// ---------------------------------------------------------------------------
// C5: expectation error accumulation orders below uniform/random/none.
void c5(Check& c) {
  const ModelConfig config = testutil::small_config(4, 64, 8, 256, 256, 512);
  int wins = 0;
  for (std::uint64_t seed : {101ULL, 202ULL, 303ULL}) {
    const TransformerWeights dense = testutil::small_model(seed, config);
    const TokenCorpus corpus = testutil::mem_corpus(
        testutil::random_tokens(16384, config.vocab_size, seed + 1), 128);
    const auto batches = sample_batches(corpus, 8192, 11);
    TempDir dir;

    std::map<ErrorAccum, double> kl;
    for (ErrorAccum mode : {ErrorAccum::kExpectation, ErrorAccum::kNone,
                            ErrorAccum::kRandom, ErrorAccum::kUniform}) {
      const SupernetStore store = build_supernet(
          dense, batches,
          testutil::uniform_ladders(config, 0.5, 0.125, 9, 16), 16, 0.01,
          dir.path() / to_string(mode), mode, 13);
      SubnetEvaluator eval(dense, store, corpus, 0.5, 17);
      kl[mode] = eval.fitness(eval.space().center_plan(), 4096);
    }
    std::ostringstream os;
    os << "seed " << seed << ": expectation " << kl[ErrorAccum::kExpectation]
       << ", uniform " << kl[ErrorAccum::kUniform] << ", random "
       << kl[ErrorAccum::kRandom] << ", none " << kl[ErrorAccum::kNone];
    c.note(os.str());
    c.expect(kl[ErrorAccum::kExpectation] < kl[ErrorAccum::kNone],
             "expectation < none (strict)");
    c.expect(kl[ErrorAccum::kExpectation] < kl[ErrorAccum::kUniform],
             "expectation < uniform");
    c.expect(kl[ErrorAccum::kExpectation] < kl[ErrorAccum::kRandom],
             "expectation < random");
    ++wins;
  }
  c.expect(wins == 3, "three seeds evaluated");
}

// ---------------------------------------------------------------------------
// C6: search returns the exhaustive optimum on a tiny space; incumbent trace
// is non-increasing over 50 generations; all candidates conserve sparsity.
void c6(Check& c) {
  {
    // Tiny space: 2 layers, MHA ladders E=3, FFN pinned at E=1.
    const ModelConfig config = testutil::small_config(2, 64, 8, 128, 64, 256);
    const TransformerWeights dense = testutil::small_model(50, config);
    const TokenCorpus corpus = testutil::mem_corpus(
        testutil::random_tokens(6144, config.vocab_size, 51), 128);
    TempDir dir;
    std::vector<SparsityLadder> ladders;
    for (int sub = 0; sub < config.sublayer_count(); ++sub) {
      const SublayerId id = sublayer_from_index(sub);
      ladders.push_back(id.kind == SublayerKind::kMha
                            ? generate_ladder(0.5, 0.25, 3, config.n_heads)
                            : generate_ladder(0.5, 0.25, 1, config.d_ffn / 16));
    }
    const SupernetStore store = build_supernet(
        dense, sample_batches(corpus, 1024, 1), ladders, 16, 0.01,
        dir.path() / "it", ErrorAccum::kExpectation, 52);
    SubnetEvaluator eval(dense, store, corpus, 0.5, 53);

    double best_fit = 1e300;
    SparsityPlan best;
    int balanced = 0;
    for (int e0 = 0; e0 < 3; ++e0) {
      for (int e1 = 0; e1 < 3; ++e1) {
        SparsityPlan p;
        p.indices = {e0, 0, e1, 0};
        if (!eval.space().balanced(p)) continue;
        ++balanced;
        const double f = eval.fitness(p, 1024);
        if (f < best_fit) {
          best_fit = f;
          best = p;
        }
      }
    }
    SearchConfig sc;
    sc.generations = 12;
    sc.offspring = 8;
    sc.stages = {{9, 256}, {3, 512}, {1, 1024}};
    sc.seed = 54;
    const SearchResult r =
        evolutionary_search(eval, eval.space().center_plan(), sc);
    std::ostringstream os;
    os << balanced << " balanced plans, optimum fitness " << best_fit;
    c.note(os.str());
    c.expect(balanced <= 3, "at most 3 balanced plans");
    c.expect(r.best == best, "evolutionary search finds the exhaustive optimum");
  }
  {
    // 50-generation run on the default toy model.
    const ModelConfig config = toy_config();
    const TransformerWeights dense = make_toy_model(config, 60);
    const TokenCorpus corpus = testutil::mem_corpus(
        testutil::random_tokens(16384, config.vocab_size, 61), 256);
    TempDir dir;
    const SupernetStore store = build_supernet(
        dense, sample_batches(corpus, 4096, 1),
        testutil::uniform_ladders(config, 0.5, 0.125, 9, 16), 16, 0.01,
        dir.path() / "it", ErrorAccum::kExpectation, 62);
    SubnetEvaluator eval(dense, store, corpus, 0.5, 63);
    SearchConfig sc;
    sc.generations = 50;
    sc.offspring = 16;
    sc.stages = {{17, 512}, {4, 1024}, {1, 2048}};
    sc.seed = 64;
    const SearchResult r =
        evolutionary_search(eval, eval.space().center_plan(), sc);
    c.expect(static_cast<int>(r.trace.size()) == 50, "50 generations traced");
    double prev = 1e300;
    bool monotone = true;
    for (const TraceEntry& entry : r.trace) {
      if (entry.incumbent_fitness > prev) monotone = false;
      prev = entry.incumbent_fitness;
    }
    c.expect(monotone, "incumbent final-budget fitness non-increasing");
    bool conserved = true;
    for (double s : eval.evaluated_sparsities()) {
      if (std::abs(s - 0.5) > eval.space().tolerance() + 1e-12) {
        conserved = false;
      }
    }
    c.expect(conserved, "every evaluated candidate conserves sparsity");
    std::ostringstream os;
    os << "final fitness " << r.best_fitness << " after 50 generations, "
       << eval.evaluated_sparsities().size() << " evaluations";
    c.note(os.str());
  }
}

// Windowed KL to the dense model over a held-out corpus.
double holdout_kl(const TransformerWeights& dense,
                  const TransformerWeights& model, const TokenCorpus& corpus,
                  int seq_len) {
  const long windows = corpus.size() / seq_len;
  double total = 0.0;
  for (long s = 0; s < windows; ++s) {
    const std::span<const std::int32_t> tokens(corpus.ids.data() + s * seq_len,
                                               static_cast<std::size_t>(seq_len));
    total += kl_to_dense(forward(dense, tokens).logits,
                         forward(model, tokens).logits);
  }
  return total / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------
// C7: the full T=4 run beats the T=1/E=1 isotropic baseline on held-out KL
// and perplexity; iteration fitness is non-increasing.
void c7(Check& c) {
  TempDir dir;
  ::unsetenv("TYR_STORE_ROOT");
  const ModelConfig config = toy_config();
  const TransformerWeights dense = make_toy_model(config, 9001);
  save_checkpoint(dir.path() / "ckpt", dense);
  const TokenCorpus calib = sample_corpus_from_model(dense, 32768, 256, 9002);
  write_corpus_bin(dir.path() / "calib.bin", calib);
  const TokenCorpus holdout =
      sample_corpus_from_model(dense, 16384, 256, 9003);

  RunConfig cfg;
  cfg.checkpoint = dir.path() / "ckpt";
  cfg.corpus = dir.path() / "calib.bin";
  cfg.out = dir.path() / "full";
  cfg.target_sparsity = 0.5;
  cfg.iterations = 4;
  cfg.initial_interval = 0.125;
  cfg.ladder_size = 9;
  cfg.sample_len = 256;
  cfg.calib_tokens = 32768;
  cfg.eval_seq_len = 256;
  cfg.seed = 9004;
  cfg.search.generations = 16;
  cfg.search.offspring = 16;
  cfg.search.stages = {{17, 1024}, {4, 4096}, {1, 8192}};
  const RunResult full = run_tyr(cfg);

  RunConfig base_cfg = cfg;
  base_cfg.out = dir.path() / "base";
  base_cfg.iterations = 1;
  base_cfg.ladder_size = 1;
  base_cfg.search.generations = 1;
  base_cfg.search.offspring = 1;
  base_cfg.search.stages = {{2, 1024}};
  const RunResult base = run_tyr(base_cfg);

  const TransformerWeights full_model = load_checkpoint(full.final_checkpoint);
  const TransformerWeights base_model = load_checkpoint(base.final_checkpoint);
  const double kl_full = holdout_kl(dense, full_model, holdout, 256);
  const double kl_base = holdout_kl(dense, base_model, holdout, 256);
  const double ppl_dense = perplexity(dense, holdout, 256);
  const double ppl_full = perplexity(full_model, holdout, 256);
  const double ppl_base = perplexity(base_model, holdout, 256);

  std::ostringstream os;
  os << "held-out KL " << kl_full << " vs baseline " << kl_base
     << "; held-out ppl " << ppl_full << " vs baseline " << ppl_base
     << " (dense " << ppl_dense << ")";
  c.note(os.str());
  c.expect(kl_full < kl_base, "final KL beats the isotropic baseline");
  c.expect(ppl_full < ppl_base, "final perplexity beats the baseline");
  double prev = 1e300;
  for (const IterationReport& r : full.iterations) {
    c.expect(r.final_fitness <= prev + 1e-12,
             "iteration-over-iteration fitness non-increasing");
    prev = r.final_fitness;
  }
}

// ---------------------------------------------------------------------------
// C8: byte-identical reruns.
void c8(Check& c) {
  TempDir dir;
  ::unsetenv("TYR_STORE_ROOT");
  const ModelConfig config = testutil::small_config(2, 64, 8, 128, 64, 256);
  const TransformerWeights dense = testutil::small_model(70, config);
  save_checkpoint(dir.path() / "ckpt", dense);
  write_corpus_bin(dir.path() / "corpus.bin",
                   make_toy_corpus(6144, config.vocab_size, 64, 71));

  RunConfig cfg;
  cfg.checkpoint = dir.path() / "ckpt";
  cfg.corpus = dir.path() / "corpus.bin";
  cfg.target_sparsity = 0.5;
  cfg.iterations = 2;
  cfg.initial_interval = 0.25;
  cfg.ladder_size = 3;
  cfg.sample_len = 64;
  cfg.calib_tokens = 1024;
  cfg.eval_seq_len = 64;
  cfg.seed = 72;
  cfg.search.generations = 3;
  cfg.search.offspring = 6;
  cfg.search.stages = {{7, 256}, {2, 512}};

  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
  };

  cfg.out = dir.path() / "a";
  const RunResult a = run_tyr(cfg);
  cfg.out = dir.path() / "b";
  const RunResult b = run_tyr(cfg);

  c.expect(read(a.final_checkpoint / "weights.bin") ==
               read(b.final_checkpoint / "weights.bin"),
           "final checkpoints byte-identical");
  c.expect(read(a.final_checkpoint / "manifest.json") ==
               read(b.final_checkpoint / "manifest.json"),
           "final manifests byte-identical");
  for (std::size_t t = 0; t < a.iterations.size(); ++t) {
    c.expect(read(a.iterations[t].trace_file) ==
                 read(b.iterations[t].trace_file),
             "search traces byte-identical");
  }
  c.note("two T=2 runs compared");
}

// ---------------------------------------------------------------------------
// C9: degenerate plans behave exactly.
void c9(Check& c) {
  const ModelConfig config = testutil::small_config(2, 64, 8, 128, 64, 256);
  const TransformerWeights dense = testutil::small_model(80, config);
  const TokenCorpus corpus = testutil::mem_corpus(
      testutil::random_tokens(4096, config.vocab_size, 81), 128);
  TempDir dir;
  const SupernetStore store = build_supernet(
      dense, sample_batches(corpus, 1024, 1),
      testutil::uniform_ladders(config, 0.5, 0.5, 3, 16), 16, 0.01,
      dir.path() / "it", ErrorAccum::kExpectation, 82);
  const auto tokens = testutil::random_tokens(64, config.vocab_size, 83);

  const TransformerWeights identity =
      apply_plan(dense, store, std::vector<int>(config.sublayer_count(), 0));
  const double d0 = (forward(identity, tokens).logits -
                     forward(dense, tokens).logits)
                        .cwiseAbs()
                        .maxCoeff();
  c.expect(d0 < 1e-6, "sparsity-0 plan reproduces dense logits");

  const TransformerWeights silent =
      apply_plan(dense, store, std::vector<int>(config.sublayer_count(), 2));
  const Matrix got = forward(silent, tokens).logits;
  Matrix x(static_cast<long>(tokens.size()), config.d_model);
  for (long t = 0; t < x.rows(); ++t) x.row(t) = dense.embed.row(tokens[t]);
  const Matrix want =
      rmsnorm(x, dense.final_norm, config.norm_epsilon) * dense.lm_head;
  c.expect((got - want).cwiseAbs().maxCoeff() < 1e-9,
           "sparsity-1 backbone equals the residual-stream-only model");

  double worst = 0.0;
  Rng rng(84);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> plan(config.sublayer_count());
    for (auto& e : plan) e = static_cast<int>(rng.uniform_int(3));
    const TransformerWeights compacted = apply_plan(dense, store, plan);
    const TransformerWeights masked =
        testutil::make_masked_model(dense, store, plan);
    worst = std::max(worst, (forward(compacted, tokens).logits -
                             forward(masked, tokens).logits)
                                .cwiseAbs()
                                .maxCoeff());
  }
  c.expect(worst < 1e-6, "compacted == masked on random plans");
  std::ostringstream os;
  os << "dense diff " << d0 << ", worst compacted-vs-masked diff " << worst;
  c.note(os.str());
}

struct Criterion {
  const char* id;
  const char* label;
  void (*fn)(Check&);
  double time_limit_s;  // 0 = no limit
};

}  // namespace

int main() {
  ::unsetenv("TYR_STORE_ROOT");
  const std::vector<Criterion> criteria{
      {"C1", "rank-1 inverse-Hessian maintenance", c1, 10.0},
      {"C2", "adjustment algebra and monotone reconstruction error", c2, 0.0},
      {"C3", "trajectory nesting", c3, 0.0},
      {"C4", "ladder instances and interval schedule", c4, 0.0},
      {"C5", "expectation error-accumulation ordering", c5, 300.0},
      {"C6", "search soundness and conservation", c6, 0.0},
      {"C7", "end-to-end improvement over the isotropic baseline", c7, 900.0},
      {"C8", "byte-identical determinism", c8, 0.0},
      {"C9", "degenerate plan correctness", c9, 0.0},
  };

  int failures = 0;
  for (const Criterion& criterion : criteria) {
    Check check;
    const auto start = std::chrono::steady_clock::now();
    try {
      criterion.fn(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    if (criterion.time_limit_s > 0.0 && seconds > criterion.time_limit_s) {
      std::ostringstream os;
      os << "runtime " << seconds << "s exceeds " << criterion.time_limit_s
         << "s";
      check.expect(false, os.str());
    }
    if (!check.ok) ++failures;
    std::cout << (check.ok ? "[PASS] " : "[FAIL] ") << criterion.id << " "
              << criterion.label << " (" << std::fixed << std::setprecision(1)
              << seconds << "s)";
    std::cout.unsetf(std::ios::fixed);
    std::cout << std::setprecision(6);
    const std::string detail = check.detail.str();
    if (!detail.empty()) std::cout << " -- " << detail;
    std::cout << "\n";
  }
  if (failures == 0) {
    std::cout << "all acceptance criteria passed\n";
  } else {
    std::cout << failures << " criteria failed\n";
  }
  return failures;
}
