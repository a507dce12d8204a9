// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Calibration corpora, layerwise Hessian accumulation, and evaluation
// metrics (perplexity, logits KL).

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tyr/model.hpp"

namespace tyr {

struct TokenCorpus {
  std::vector<std::int32_t> ids;
  int sample_len = 0;
  std::string source;

  long size() const { return static_cast<long>(ids.size()); }
  long sample_count() const { return size() / sample_len; }
};

// Reads a pre-tokenized stream: `.bin` is little-endian u32 ids, `.txt` is
// one integer per line (autodetected by extension). Ids are validated
// against a vocabulary only once paired with a model.
TokenCorpus load_corpus(const std::filesystem::path& path, int sample_len);

// Deterministic disjoint sample_len-sized slices covering at least n_tokens
// (rounded up to whole samples). Spans alias the corpus.
std::vector<std::span<const std::int32_t>> sample_batches(
    const TokenCorpus& corpus, long n_tokens, std::uint64_t seed);

// Running H = sum X^T X over calibration rows for one target module.
// Accumulation is a commutative monoid: partial stats merge in any order.
struct ActivationStats {
  Matrix h;
  long row_count = 0;

  explicit ActivationStats(int dim) : h(Matrix::Zero(dim, dim)) {}
  int dim() const { return static_cast<int>(h.rows()); }

  void accumulate(const Matrix& x);
  void merge(const ActivationStats& other);
};

// exp(mean next-token NLL) over all predicted positions of consecutive
// seq_len windows, natural log.
double perplexity(const TransformerWeights& weights, const TokenCorpus& corpus,
                  int seq_len);

// Mean over token positions of KL(softmax(dense_row) || softmax(sparse_row)),
// computed in log-space.
double kl_to_dense(const Matrix& dense_logits, const Matrix& sparse_logits);

}  // namespace tyr
