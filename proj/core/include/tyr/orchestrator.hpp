// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// The iterative prune-and-search loop and its stage functions. Stages hand
// off through the filesystem (checkpoint -> supernet -> plan -> compacted
// checkpoint) so each is independently invocable from the CLI.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tyr/search.hpp"
#include "tyr/supernet.hpp"

namespace tyr {

struct RunConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path corpus;
  std::filesystem::path out;

  double target_sparsity = 0.5;
  int iterations = 4;
  double initial_interval = 0.125;
  int ladder_size = 9;
  int ffn_group_size = 16;
  double lambda_frac = 0.01;

  int sample_len = 256;
  long calib_tokens = 65536;
  int eval_seq_len = 256;

  ErrorAccum error_accum = ErrorAccum::kExpectation;
  Metric metric = Metric::kKlLogits;
  std::uint64_t seed = 0;
  bool gc_previous = true;

  SearchConfig search = {/*generations=*/50, /*offspring=*/32,
                         {{32, 2048}, {8, 8192}, {2, 16384}},
                         /*seed=*/0};

  // Store root defaults to out/supernet; TYR_STORE_ROOT overrides it.
  std::filesystem::path store_root() const;

  void validate() const;

  // Interval at iteration t (1-based): initial_interval / 2^(t-1).
  double interval_at(int iteration) const;
};

RunConfig parse_run_config(const std::filesystem::path& config_file);
// Flags already parsed by the CLI are merged by assigning fields directly.

std::string run_config_to_json(const RunConfig& config);

struct IterationReport {
  int iteration = 0;
  double interval = 0.0;
  std::vector<double> sublayer_sparsity;  // realized, per sublayer_index
  double first_fitness = 0.0;
  double final_fitness = 0.0;
  int generations = 0;
  double wall_clock_s = 0.0;
  std::uint64_t store_bytes = 0;
  std::filesystem::path trace_file;
  std::filesystem::path plan_file;
};

struct RunResult {
  std::vector<IterationReport> iterations;
  std::filesystem::path final_checkpoint;
  double final_kl = 0.0;
  double final_perplexity = 0.0;
};

// Stage functions; each reads and writes only on-disk artifacts.

// Builds iteration `t`'s supernet with per-sublayer ladders centered on
// `centers` and returns its directory.
std::filesystem::path stage_build_supernet(const RunConfig& config,
                                           const TransformerWeights& dense,
                                           const TokenCorpus& corpus,
                                           const std::vector<double>& centers,
                                           int iteration);

struct StageSearchResult {
  SparsityPlan plan;
  std::vector<double> realized;  // per sublayer
  double first_fitness = 0.0;
  double final_fitness = 0.0;
  int generations = 0;
};

// Runs the evolutionary search against an on-disk store; writes the winning
// plan JSON and the per-generation JSONL trace.
StageSearchResult stage_search(const RunConfig& config,
                               const TransformerWeights& dense,
                               const TokenCorpus& corpus,
                               const std::filesystem::path& store_dir,
                               int iteration,
                               const std::filesystem::path& plan_file,
                               const std::filesystem::path& trace_file);

// apply_plan + save_checkpoint from on-disk artifacts.
void stage_export(const TransformerWeights& dense,
                  const std::filesystem::path& store_dir,
                  const std::filesystem::path& plan_file,
                  const std::filesystem::path& out_dir);

SparsityPlan read_plan_file(const std::filesystem::path& plan_file);

// The full loop: per iteration generate ladders, build the supernet, search,
// recenter, halve the interval; finally compact and save the winner.
RunResult run_tyr(const RunConfig& config);

}  // namespace tyr
