// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Microbenchmarks for the hot paths: forward tokens/s, Hessian accumulation,
// rank-1 inverse maintenance, and supernet construction.

#include <benchmark/benchmark.h>

#include <filesystem>

#include "tyr/calibration.hpp"
#include "tyr/local_pruner.hpp"
#include "tyr/model.hpp"
#include "tyr/supernet.hpp"
#include "tyr/toygen.hpp"

namespace {

tyr::ModelConfig bench_config() { return tyr::toy_config(); }

void BM_Forward(benchmark::State& state) {
  const tyr::ModelConfig config = bench_config();
  const tyr::TransformerWeights model = tyr::make_toy_model(config, 1);
  const tyr::TokenCorpus corpus =
      tyr::make_toy_corpus(state.range(0), config.vocab_size, 256, 2);
  const std::span<const std::int32_t> tokens(corpus.ids.data(),
                                             corpus.ids.size());
  for (auto _ : state) {
    benchmark::DoNotOptimize(tyr::forward(model, tokens).logits);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(128)->Arg(256)->Arg(512);

void BM_HessianAccumulate(benchmark::State& state) {
  const long rows = 512;
  const long dim = state.range(0);
  const tyr::Matrix x = tyr::Matrix::Random(rows, dim);
  tyr::ActivationStats stats(static_cast<int>(dim));
  for (auto _ : state) {
    stats.accumulate(x);
    benchmark::DoNotOptimize(stats.h.data());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_HessianAccumulate)->Arg(128)->Arg(512);

void BM_PruneTrajectory(benchmark::State& state) {
  const int d_in = static_cast<int>(state.range(0));
  const tyr::Matrix x = tyr::Matrix::Random(2 * d_in, d_in);
  const tyr::Matrix w = tyr::Matrix::Random(d_in, 128);
  tyr::ActivationStats stats(d_in);
  stats.accumulate(x);
  const tyr::UnitGrouping grouping{16, d_in / 16};
  const std::vector<double> ladder{0.0, 0.25, 0.5, 0.75, 1.0};
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        tyr::prune_progressive(w, stats, grouping, ladder, 0.01));
  }
}
BENCHMARK(BM_PruneTrajectory)->Arg(128)->Arg(512);

void BM_BuildSupernet(benchmark::State& state) {
  const tyr::ModelConfig config = bench_config();
  const tyr::TransformerWeights model = tyr::make_toy_model(config, 3);
  const tyr::TokenCorpus corpus =
      tyr::make_toy_corpus(8192, config.vocab_size, 256, 4);
  const auto batches = tyr::sample_batches(corpus, 4096, 1);
  std::vector<tyr::SparsityLadder> ladders;
  for (int sub = 0; sub < config.sublayer_count(); ++sub) {
    const tyr::SublayerId id = tyr::sublayer_from_index(sub);
    const int units = id.kind == tyr::SublayerKind::kMha
                          ? config.n_heads
                          : config.d_ffn / 16;
    ladders.push_back(tyr::generate_ladder(0.5, 0.125, 9, units));
  }
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "tyr_bench_store";
  int tag = 0;
  for (auto _ : state) {
    const auto iter_dir = dir / ("iter_" + std::to_string(++tag));
    benchmark::DoNotOptimize(tyr::build_supernet(
        model, batches, ladders, 16, 0.01, iter_dir,
        tyr::ErrorAccum::kExpectation, 5));
  }
  std::error_code ec;
  std::filesystem::remove_all(dir, ec);
}
BENCHMARK(BM_BuildSupernet)->Unit(benchmark::kMillisecond)->Iterations(2);

}  // namespace

BENCHMARK_MAIN();
