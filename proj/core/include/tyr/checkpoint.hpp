// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory I/O: manifest.json + raw little-endian f32 blobs.
//
// Tensor names follow layers.{i}.{wq|wk|wv|wo|wgate|wup|wdown|norm1|norm2},
// embed, final_norm, lm_head. Blobs are row-major. Round-trips are bit-exact.
// Compacted models additionally record per-layer retained units under
// config.pruned_units; dense checkpoints omit the field.

#pragma once

#include <filesystem>

#include "tyr/model.hpp"

namespace tyr {

void save_checkpoint(const std::filesystem::path& dir,
                     const TransformerWeights& weights);

TransformerWeights load_checkpoint(const std::filesystem::path& dir);

}  // namespace tyr
