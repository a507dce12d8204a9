// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Supernet construction and the disk-backed structure store.
//
// A supernet holds, per sublayer, a ladder of pruned structures produced by
// one progressive trajectory. While walking the layers front to back the
// builder propagates a mixed activation stream: each sublayer's candidate
// outputs are averaged with weights proportional to their kept fraction
// (1 - S_e), the residual and the next normalization are applied once, and
// the result feeds the next sublayer's Hessian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tyr/calibration.hpp"
#include "tyr/local_pruner.hpp"
#include "tyr/model.hpp"

namespace tyr {

struct SparsityLadder {
  double center = 0.0;
  double interval = 0.0;
  int count = 0;        // E
  int total_units = 0;  // atomic units of the sublayer (heads or FFN groups)
  std::vector<double> nominal;   // center + (e - (E-1)/2) * interval, clamped
  std::vector<double> realized;  // nominal rounded to achievable unit counts
  std::vector<int> pruned_units;
};

// E points centered on `center` with spacing `interval`, clamped to [0, 1]
// and quantized to unit counts. Duplicates stay index-stable.
SparsityLadder generate_ladder(double center, double interval, int count,
                               int total_units);

// Eq-style expectation mix: sum_e w_e * outputs[e] with
// w_e = (1 - S_e) / sum_e (1 - S_e). If every sparsity is 1 the weights
// degenerate; the unweighted mean is returned and *degenerate is set.
Matrix expected_mix(const std::vector<Matrix>& outputs,
                    std::span<const double> sparsities,
                    bool* degenerate = nullptr);

enum class ErrorAccum { kExpectation, kNone, kRandom, kUniform };

const char* to_string(ErrorAccum mode);
ErrorAccum error_accum_from_string(const std::string& name);

struct StructureKey {
  int layer = 0;
  SublayerKind kind = SublayerKind::kMha;
  int ladder_index = 0;

  friend bool operator==(const StructureKey&, const StructureKey&) = default;
};

std::string to_string(const StructureKey& key);

// Observation hook for the builder's layer walk: invoked after each sublayer
// replaces the stream (mixed output plus residual). Used by diagnostics.
using StreamHook =
    std::function<void(int sublayer_index, const std::vector<Matrix>& stream)>;

// Disk layout: <iteration_dir>/manifest.json plus
// structures/{layer}_{kind}_{e}.bin, each a 32-byte header followed by the
// packed f32 row-major payload. Ladder-index duplicates share one blob.
class SupernetStore {
 public:
  struct Entry {
    int ladder_index = 0;
    double realized_sparsity = 0.0;
    std::vector<int> retained_units;
    std::string file;
    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> byte_ranges;
  };

  struct SublayerRecord {
    SublayerId id;
    int total_units = 0;  // atomic units
    SparsityLadder ladder;
    std::vector<Entry> entries;
  };

  static SupernetStore open(const std::filesystem::path& iteration_dir);

  const std::filesystem::path& dir() const { return dir_; }
  const std::string& iteration_tag() const { return iteration_tag_; }
  const ModelConfig& config() const { return config_; }
  int ffn_group_size() const { return ffn_group_size_; }
  int sublayer_count() const { return static_cast<int>(sublayers_.size()); }
  const SublayerRecord& sublayer(int index) const;
  int ladder_size(int index) const { return sublayer(index).ladder.count; }

  // Decodes one pruned structure; repeated loads are bit-identical.
  // Throws StoreError naming the key for missing or corrupt blobs.
  PrunedSublayer load_structure(const StructureKey& key) const;

  friend SupernetStore build_supernet(const TransformerWeights&,
                                      const std::vector<std::span<const std::int32_t>>&,
                                      const std::vector<SparsityLadder>&,
                                      int, double, const std::filesystem::path&,
                                      ErrorAccum, std::uint64_t,
                                      const StreamHook&);

 private:
  SupernetStore() = default;

  std::filesystem::path dir_;
  std::string iteration_tag_;
  ModelConfig config_;
  int ffn_group_size_ = 16;
  std::vector<SublayerRecord> sublayers_;
};

// Builds and persists one iteration's supernet. `ladders` is indexed by
// sublayer_index. The manifest is written atomically at the end; on write
// failure no manifest is left behind.
SupernetStore build_supernet(const TransformerWeights& dense,
                             const std::vector<std::span<const std::int32_t>>& batches,
                             const std::vector<SparsityLadder>& ladders,
                             int ffn_group_size, double lambda_frac,
                             const std::filesystem::path& iteration_dir,
                             ErrorAccum mode, std::uint64_t seed,
                             const StreamHook& stream_hook = {});

// Assembles the physically compacted model selected by `plan` (one ladder
// index per sublayer). Throws StoreError for missing entries.
TransformerWeights apply_plan(const TransformerWeights& dense,
                              const SupernetStore& store,
                              std::span<const int> plan);

// Removes every iteration directory under store_root except keep_tag.
// Idempotent; returns freed bytes.
std::uint64_t gc_iteration(const std::filesystem::path& store_root,
                           const std::string& keep_tag);

}  // namespace tyr
