// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace tyr {

TokenCorpus load_corpus(const std::filesystem::path& path, int sample_len) {
  if (sample_len < 2) {
    throw InputError("load_corpus: sample_len must be at least 2");
  }
  TokenCorpus corpus;
  corpus.sample_len = sample_len;
  corpus.source = path.string();

  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("load_corpus: cannot open " + path.string());

  if (path.extension() == ".txt") {
    std::string line;
    std::ifstream text(path);
    while (std::getline(text, line)) {
      if (line.empty()) continue;
      std::size_t pos = 0;
      const long value = std::stol(line, &pos);
      corpus.ids.push_back(static_cast<std::int32_t>(value));
    }
  } else {
    in.seekg(0, std::ios::end);
    const std::streamoff bytes = in.tellg();
    in.seekg(0);
    if (bytes % 4 != 0) {
      throw FormatError("load_corpus: binary corpus size must be a multiple "
                        "of 4 bytes");
    }
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(bytes / 4));
    in.read(reinterpret_cast<char*>(raw.data()), bytes);
    if (!in) throw InputError("load_corpus: read failed");
    corpus.ids.reserve(raw.size());
    for (std::uint32_t v : raw) {
      corpus.ids.push_back(static_cast<std::int32_t>(v));
    }
  }

  if (corpus.ids.empty()) {
    throw InputError("load_corpus: empty corpus " + path.string());
  }
  if (corpus.size() < sample_len) {
    std::ostringstream os;
    os << "load_corpus: corpus has " << corpus.size()
       << " tokens, fewer than sample_len " << sample_len;
    throw InputError(os.str());
  }
  return corpus;
}

std::vector<std::span<const std::int32_t>> sample_batches(
    const TokenCorpus& corpus, long n_tokens, std::uint64_t seed) {
  if (n_tokens < 1) throw InputError("sample_batches: n_tokens must be >= 1");
  if (n_tokens > corpus.size()) {
    throw InputError("sample_batches: n_tokens exceeds corpus length");
  }
  const long slots = corpus.sample_count();
  const long wanted =
      (n_tokens + corpus.sample_len - 1) / corpus.sample_len;  // ceil
  if (wanted > slots) {
    std::ostringstream os;
    os << "sample_batches: need " << wanted << " disjoint samples of length "
       << corpus.sample_len << " but the corpus only holds " << slots;
    throw InputError(os.str());
  }

  // Seeded partial Fisher-Yates over slot indices; the first `wanted` slots
  // in draw order are the batch. Disjointness is by construction.
  std::vector<long> slot(slots);
  std::iota(slot.begin(), slot.end(), 0L);
  Rng rng(seed);
  std::vector<std::span<const std::int32_t>> batches;
  batches.reserve(static_cast<std::size_t>(wanted));
  for (long i = 0; i < wanted; ++i) {
    const long j = i + static_cast<long>(rng.uniform_int(
                           static_cast<std::uint64_t>(slots - i)));
    std::swap(slot[i], slot[j]);
    batches.emplace_back(corpus.ids.data() + slot[i] * corpus.sample_len,
                         static_cast<std::size_t>(corpus.sample_len));
  }
  return batches;
}

void ActivationStats::accumulate(const Matrix& x) {
  if (x.cols() != h.rows()) {
    std::ostringstream os;
    os << "accumulate_hessian: row width " << x.cols()
       << " does not match module d_in " << h.rows();
    throw InputError(os.str());
  }
  if (!x.allFinite()) {
    throw InputError("accumulate_hessian: non-finite activation rows");
  }
  // Rank-update keeps H bitwise symmetric.
  h.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), 1.0);
  h.triangularView<Eigen::StrictlyUpper>() =
      h.triangularView<Eigen::StrictlyLower>().transpose();
  row_count += x.rows();
}

void ActivationStats::merge(const ActivationStats& other) {
  if (other.dim() != dim()) {
    throw InputError("merge: dimension mismatch");
  }
  h += other.h;
  row_count += other.row_count;
}

namespace {

// Row-wise log-softmax, stable.
void log_softmax_row(const Matrix& logits, long row, Vector& out) {
  const double m = logits.row(row).maxCoeff();
  out = (logits.row(row).array() - m).transpose();
  const double lse = std::log(out.array().exp().sum());
  out.array() -= lse;
}

}  // namespace

double perplexity(const TransformerWeights& weights, const TokenCorpus& corpus,
                  int seq_len) {
  if (seq_len < 2) throw InputError("perplexity: seq_len must be at least 2");
  const long windows = corpus.size() / seq_len;
  if (windows < 1) {
    throw InputError("perplexity: corpus shorter than one sequence");
  }
  double nll_sum = 0.0;
  long positions = 0;
  Vector ls;
  for (long s = 0; s < windows; ++s) {
    const std::span<const std::int32_t> tokens(
        corpus.ids.data() + s * seq_len, static_cast<std::size_t>(seq_len));
    const Matrix logits = forward(weights, tokens).logits;
    for (long t = 0; t + 1 < seq_len; ++t) {
      log_softmax_row(logits, t, ls);
      nll_sum -= ls(tokens[static_cast<std::size_t>(t) + 1]);
      ++positions;
    }
  }
  return std::exp(nll_sum / static_cast<double>(positions));
}

double kl_to_dense(const Matrix& dense_logits, const Matrix& sparse_logits) {
  if (dense_logits.rows() != sparse_logits.rows() ||
      dense_logits.cols() != sparse_logits.cols()) {
    throw InputError("kl_to_dense: logit shapes differ");
  }
  double total = 0.0;
  Vector ld, ls;
  for (long t = 0; t < dense_logits.rows(); ++t) {
    log_softmax_row(dense_logits, t, ld);
    log_softmax_row(sparse_logits, t, ls);
    total += (ld.array().exp() * (ld - ls).array()).sum();
  }
  return total / static_cast<double>(dense_logits.rows());
}

}  // namespace tyr
