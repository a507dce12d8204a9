// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded toy-model and corpus generators used by the CLI helper and tests.

#pragma once

#include <cstdint>
#include <filesystem>

#include "tyr/calibration.hpp"
#include "tyr/model.hpp"

namespace tyr {

// 4 layers, d_model 128, 8 heads, d_ffn 512, vocab 512: small enough that a
// full prune-and-search run completes in minutes on one core.
ModelConfig toy_config();

// Gaussian init scaled 1/sqrt(d_in) per projection, unit norm gains.
TransformerWeights make_toy_model(const ModelConfig& config,
                                  std::uint64_t seed);

// Uniform random ids in [0, vocab).
TokenCorpus make_toy_corpus(long n_tokens, int vocab_size, int sample_len,
                            std::uint64_t seed);

// Autoregressive samples from the model itself (temperature 1), generated as
// independent segment_len-long segments with a KV-cache decode loop. On such
// a corpus the dense model is near-optimal, so pruning damage shows up as a
// perplexity increase.
TokenCorpus sample_corpus_from_model(const TransformerWeights& model,
                                     long n_tokens, int segment_len,
                                     std::uint64_t seed);

void write_corpus_bin(const std::filesystem::path& path,
                      const TokenCorpus& corpus);

}  // namespace tyr
