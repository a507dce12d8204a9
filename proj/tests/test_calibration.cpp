// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <set>

#include "reference.hpp"
#include "test_util.hpp"
#include "tyr/calibration.hpp"

using namespace tyr;
using testutil::TempDir;

TEST_CASE("load_corpus: binary and text encodings agree") {
  TempDir dir;
  const auto ids = testutil::random_tokens(512, 1000, 1);
  {
    std::ofstream bin(dir.path() / "c.bin", std::ios::binary);
    for (std::int32_t id : ids) {
      const std::uint32_t u = static_cast<std::uint32_t>(id);
      bin.write(reinterpret_cast<const char*>(&u), 4);
    }
    std::ofstream txt(dir.path() / "c.txt");
    for (std::int32_t id : ids) txt << id << "\n";
  }
  const TokenCorpus a = load_corpus(dir.path() / "c.bin", 128);
  const TokenCorpus b = load_corpus(dir.path() / "c.txt", 128);
  CHECK(a.ids == b.ids);
  CHECK(a.ids == ids);
}

TEST_CASE("load_corpus: sample accounting and error paths") {
  TempDir dir;
  {
    std::ofstream bin(dir.path() / "c.bin", std::ios::binary);
    for (std::uint32_t u = 0; u < 8192; ++u) {
      bin.write(reinterpret_cast<const char*>(&u), 4);
    }
    std::ofstream tiny(dir.path() / "tiny.bin", std::ios::binary);
    for (std::uint32_t u = 0; u < 100; ++u) {
      tiny.write(reinterpret_cast<const char*>(&u), 4);
    }
    std::ofstream(dir.path() / "empty.bin", std::ios::binary);
  }
  const TokenCorpus c = load_corpus(dir.path() / "c.bin", 2048);
  CHECK(c.sample_count() == 4);
  CHECK_THROWS_AS(load_corpus(dir.path() / "tiny.bin", 2048), InputError);
  CHECK_THROWS_AS(load_corpus(dir.path() / "empty.bin", 2048), InputError);
}

TEST_CASE("sample_batches: deterministic, disjoint, exact-fit") {
  const TokenCorpus corpus =
      testutil::mem_corpus(testutil::random_tokens(4096, 64, 2), 256);
  const auto a = sample_batches(corpus, 1024, 7);
  const auto b = sample_batches(corpus, 1024, 7);
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].data() == b[i].data());
  }

  // Disjointness oracle: explicit interval intersection over offsets.
  std::vector<std::pair<long, long>> intervals;
  for (const auto& s : a) {
    const long start = s.data() - corpus.ids.data();
    intervals.emplace_back(start, start + static_cast<long>(s.size()));
  }
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    for (std::size_t j = i + 1; j < intervals.size(); ++j) {
      const bool overlap = intervals[i].first < intervals[j].second &&
                           intervals[j].first < intervals[i].second;
      CHECK_FALSE(overlap);
    }
  }

  // n_tokens == sample_len -> exactly one sample.
  CHECK(sample_batches(corpus, 256, 1).size() == 1);
  // Rounds up to whole samples.
  CHECK(sample_batches(corpus, 257, 1).size() == 2);
  CHECK_THROWS_AS(sample_batches(corpus, 4097, 1), InputError);
}

TEST_CASE("accumulate_hessian: identity rows, associativity, zero rows") {
  ActivationStats stats(4);
  Matrix eye = Matrix::Identity(4, 4);
  stats.accumulate(eye);
  stats.accumulate(eye);
  stats.accumulate(eye);
  CHECK((stats.h - 3.0 * Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(stats.row_count == 12);

  // Split-batch associativity.
  const Matrix x = Matrix::Random(100, 8);
  ActivationStats one(8), two(8), half(8);
  one.accumulate(x);
  two.accumulate(x.topRows(37));
  half.accumulate(x.bottomRows(63));
  two.merge(half);
  CHECK((one.h - two.h).norm() <= 1e-10 * one.h.norm());
  CHECK(two.row_count == one.row_count);

  // A zero row contributes nothing.
  ActivationStats with_zero(8);
  Matrix padded(x.rows() + 1, 8);
  padded.topRows(x.rows()) = x;
  padded.bottomRows(1).setZero();
  with_zero.accumulate(padded);
  CHECK((with_zero.h - one.h).cwiseAbs().maxCoeff() == 0.0);

  ActivationStats wrong(8);
  CHECK_THROWS_AS(wrong.accumulate(Matrix::Random(5, 7)), InputError);
}

TEST_CASE("hessian is symmetric PSD after any accumulation sequence") {
  Rng rng(3);
  ActivationStats stats(12);
  for (int b = 0; b < 5; ++b) {
    Matrix x(7 + b, 12);
    for (long r = 0; r < x.rows(); ++r) {
      for (long c = 0; c < 12; ++c) x(r, c) = rng.normal();
    }
    stats.accumulate(x);
  }
  CHECK(stats.h == stats.h.transpose().eval());  // bitwise symmetric
  const Eigen::SelfAdjointEigenSolver<Matrix> es(stats.h);
  CHECK(es.eigenvalues().minCoeff() >= -1e-8 * stats.h.trace());
}

TEST_CASE("perplexity: uniform-logit model scores exactly vocab_size") {
  const ModelConfig config = testutil::small_config();
  TransformerWeights w = testutil::small_model(0, config);
  w.lm_head.setZero();  // logits all zero -> uniform softmax
  const TokenCorpus corpus =
      testutil::mem_corpus(testutil::random_tokens(512, config.vocab_size, 5), 64);
  const double ppl = perplexity(w, corpus, 64);
  CHECK(ppl == doctest::Approx(config.vocab_size).epsilon(1e-12));
}

TEST_CASE("perplexity approaches 1 for a confident correct model") {
  ModelConfig config = testutil::small_config(1);
  TransformerWeights w = testutil::small_model(0, config);
  // Zero backbone; embedding row c = e0; lm_head routes e0 to token c with a
  // large margin. On a constant corpus of token c every prediction is right.
  const int c = 3;
  for (auto& layer : w.layers) {
    layer.wq.setZero();
    layer.wk.setZero();
    layer.wv.setZero();
    layer.wo.setZero();
    layer.wgate.setZero();
    layer.wup.setZero();
    layer.wdown.setZero();
  }
  w.embed.setZero();
  w.embed(c, 0) = 1.0;
  w.lm_head.setZero();
  w.lm_head(0, c) = 40.0;
  const TokenCorpus corpus = testutil::mem_corpus(
      std::vector<std::int32_t>(256, c), 64);
  const double ppl = perplexity(w, corpus, 64);
  CHECK(ppl >= 1.0);
  CHECK(ppl < 1.0 + 1e-6);
}

TEST_CASE("perplexity matches the straight-line NLL oracle") {
  const ModelConfig config = testutil::small_config();
  const TransformerWeights w = testutil::small_model(21, config);
  const TokenCorpus corpus =
      testutil::mem_corpus(testutil::random_tokens(192, config.vocab_size, 6), 48);
  const double got = perplexity(w, corpus, 48);
  const double want = std::exp(static_cast<double>(
      ref::nll_mean(w, corpus.ids, 48)));
  CHECK(std::abs(got - want) / want < 1e-6);
}

TEST_CASE("kl_to_dense: zero on identical and shift-invariant inputs") {
  const Matrix logits = Matrix::Random(9, 17);
  CHECK(kl_to_dense(logits, logits) <= 1e-12);
  Matrix shifted = logits;
  for (long t = 0; t < shifted.rows(); ++t) {
    shifted.row(t).array() += 0.37 * static_cast<double>(t + 1);
  }
  CHECK(std::abs(kl_to_dense(logits, shifted)) <= 1e-12);
}

TEST_CASE("kl_to_dense: 3-class value matches the hand-expanded sum") {
  Matrix dense(1, 3), sparse(1, 3);
  dense << 0.9, -0.4, 1.7;
  sparse << -0.2, 0.8, 0.5;
  const double got = kl_to_dense(dense, sparse);
  const double want = static_cast<double>(ref::kl_rows(dense, sparse));
  CHECK(std::abs(got - want) <= 1e-12);
  CHECK(got > 0.0);
}

TEST_CASE("kl_to_dense: nonnegative on random pairs, shape-checked") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix a(4, 11), b(4, 11);
    for (long t = 0; t < 4; ++t) {
      for (long v = 0; v < 11; ++v) {
        a(t, v) = 2.0 * rng.normal();
        b(t, v) = 2.0 * rng.normal();
      }
    }
    CHECK(kl_to_dense(a, b) >= -1e-15);
  }
  CHECK_THROWS_AS(kl_to_dense(Matrix::Zero(2, 3), Matrix::Zero(2, 4)),
                  InputError);
}
