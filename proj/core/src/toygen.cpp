// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/toygen.hpp"

#include <cmath>
#include <fstream>

namespace tyr {

namespace {

// Values pass through f32 so checkpoints round-trip bit-exactly.
Matrix random_matrix(long rows, long cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      m(r, c) = static_cast<float>(stddev * rng.normal());
    }
  }
  return m;
}

}  // namespace

ModelConfig toy_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 128;
  c.n_heads = 8;
  c.head_dim = 16;
  c.d_ffn = 512;
  c.vocab_size = 512;
  c.norm_epsilon = 1e-5;
  c.max_seq_len = 1024;
  c.positional_scheme = PositionalScheme::kRotary;
  return c;
}

TransformerWeights make_toy_model(const ModelConfig& config,
                                  std::uint64_t seed) {
  config.validate();
  TransformerWeights w;
  w.config = config;
  const double proj = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const double down = 1.0 / std::sqrt(static_cast<double>(config.d_ffn));

  Rng rng(derive_seed(seed, {0x746f79ULL}));
  w.embed = random_matrix(config.vocab_size, config.d_model, 1.0, rng);
  w.layers.resize(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights& layer = w.layers[l];
    layer.wq = random_matrix(config.d_model, config.d_model, proj, rng);
    layer.wk = random_matrix(config.d_model, config.d_model, proj, rng);
    layer.wv = random_matrix(config.d_model, config.d_model, proj, rng);
    layer.wo = random_matrix(config.d_model, config.d_model, proj, rng);
    layer.wgate = random_matrix(config.d_model, config.d_ffn, proj, rng);
    layer.wup = random_matrix(config.d_model, config.d_ffn, proj, rng);
    layer.wdown = random_matrix(config.d_ffn, config.d_model, down, rng);
    layer.norm1 = Vector::Ones(config.d_model);
    layer.norm2 = Vector::Ones(config.d_model);
    layer.retained_heads.resize(config.n_heads);
    for (int h = 0; h < config.n_heads; ++h) layer.retained_heads[h] = h;
    layer.retained_ffn.resize(config.d_ffn);
    for (int f = 0; f < config.d_ffn; ++f) layer.retained_ffn[f] = f;
  }
  w.final_norm = Vector::Ones(config.d_model);
  w.lm_head = random_matrix(config.d_model, config.vocab_size, proj, rng);
  return w;
}

TokenCorpus make_toy_corpus(long n_tokens, int vocab_size, int sample_len,
                            std::uint64_t seed) {
  if (n_tokens < 1 || vocab_size < 1) {
    throw InputError("make_toy_corpus: need positive token count and vocab");
  }
  TokenCorpus corpus;
  corpus.sample_len = sample_len;
  corpus.source = "toy";
  corpus.ids.reserve(static_cast<std::size_t>(n_tokens));
  Rng rng(derive_seed(seed, {0x636f7270ULL}));
  for (long i = 0; i < n_tokens; ++i) {
    corpus.ids.push_back(static_cast<std::int32_t>(
        rng.uniform_int(static_cast<std::uint64_t>(vocab_size))));
  }
  return corpus;
}

namespace {

// Single-sequence KV-cache decode, used only for corpus sampling.
class Decoder {
 public:
  explicit Decoder(const TransformerWeights& model)
      : model_(model), config_(model.config) {
    const long width = static_cast<long>(config_.n_heads) * config_.head_dim;
    k_cache_.assign(config_.n_layers, Matrix(config_.max_seq_len, width));
    v_cache_.assign(config_.n_layers, Matrix(config_.max_seq_len, width));
    const int half = config_.head_dim / 2;
    inv_freq_.resize(half);
    for (int i = 0; i < half; ++i) {
      inv_freq_[i] = std::pow(10000.0, -2.0 * i / config_.head_dim);
    }
  }

  void reset() { pos_ = 0; }

  // Appends `token` and returns the logits row for the next position.
  Eigen::RowVectorXd step(std::int32_t token) {
    const int hd = config_.head_dim;
    const int heads = config_.n_heads;
    Eigen::RowVectorXd x = model_.embed.row(token);
    for (int l = 0; l < config_.n_layers; ++l) {
      const LayerWeights& layer = model_.layers[l];
      Eigen::RowVectorXd normed = norm_row(x, layer.norm1);
      Eigen::RowVectorXd q = normed * layer.wq;
      Eigen::RowVectorXd k = normed * layer.wk;
      Eigen::RowVectorXd v = normed * layer.wv;
      if (config_.positional_scheme == PositionalScheme::kRotary) {
        rotate(q);
        rotate(k);
      }
      k_cache_[l].row(pos_) = k;
      v_cache_[l].row(pos_) = v;
      Eigen::RowVectorXd attn(heads * hd);
      const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
      for (int h = 0; h < heads; ++h) {
        const auto keys = k_cache_[l].topRows(pos_ + 1).middleCols(h * hd, hd);
        const auto vals = v_cache_[l].topRows(pos_ + 1).middleCols(h * hd, hd);
        Vector scores = keys * q.segment(h * hd, hd).transpose() * scale;
        const double m = scores.maxCoeff();
        scores = (scores.array() - m).exp();
        scores /= scores.sum();
        attn.segment(h * hd, hd) = scores.transpose() * vals;
      }
      x += attn * layer.wo;
      Eigen::RowVectorXd normed2 = norm_row(x, layer.norm2);
      Eigen::RowVectorXd g = normed2 * layer.wgate;
      Eigen::RowVectorXd u = normed2 * layer.wup;
      for (long j = 0; j < g.size(); ++j) {
        const double gx = g(j);
        const double sig = gx >= 0.0 ? 1.0 / (1.0 + std::exp(-gx))
                                     : std::exp(gx) / (1.0 + std::exp(gx));
        g(j) = gx * sig * u(j);
      }
      x += g * layer.wdown;
    }
    ++pos_;
    return norm_row(x, model_.final_norm) * model_.lm_head;
  }

 private:
  Eigen::RowVectorXd norm_row(const Eigen::RowVectorXd& x,
                              const Vector& gain) const {
    const double ms = x.squaredNorm() / static_cast<double>(x.size());
    Eigen::RowVectorXd out = x / std::sqrt(ms + config_.norm_epsilon);
    out.array() *= gain.transpose().array();
    return out;
  }

  void rotate(Eigen::RowVectorXd& x) const {
    const int hd = config_.head_dim;
    const int half = hd / 2;
    for (int i = 0; i < half; ++i) {
      const double angle = static_cast<double>(pos_) * inv_freq_[i];
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      for (int h = 0; h < config_.n_heads; ++h) {
        const int base = h * hd;
        const double a = x(base + i);
        const double b = x(base + i + half);
        x(base + i) = a * c - b * s;
        x(base + i + half) = a * s + b * c;
      }
    }
  }

  const TransformerWeights& model_;
  const ModelConfig& config_;
  std::vector<Matrix> k_cache_, v_cache_;
  std::vector<double> inv_freq_;
  long pos_ = 0;
};

std::int32_t sample_from_logits(const Eigen::RowVectorXd& logits, Rng& rng) {
  const double m = logits.maxCoeff();
  Eigen::RowVectorXd p = (logits.array() - m).exp();
  p /= p.sum();
  const double u = rng.uniform();
  double cum = 0.0;
  for (long v = 0; v < p.size(); ++v) {
    cum += p(v);
    if (u < cum) return static_cast<std::int32_t>(v);
  }
  return static_cast<std::int32_t>(p.size() - 1);
}

}  // namespace

TokenCorpus sample_corpus_from_model(const TransformerWeights& model,
                                     long n_tokens, int segment_len,
                                     std::uint64_t seed) {
  if (n_tokens < 1) throw InputError("sample_corpus_from_model: n_tokens");
  if (segment_len < 2 || segment_len > model.config.max_seq_len) {
    throw InputError("sample_corpus_from_model: bad segment_len");
  }
  TokenCorpus corpus;
  corpus.sample_len = segment_len;
  corpus.source = "sampled";
  corpus.ids.reserve(static_cast<std::size_t>(n_tokens));
  Rng rng(derive_seed(seed, {0x73616d70ULL}));
  Decoder decoder(model);
  while (static_cast<long>(corpus.ids.size()) < n_tokens) {
    decoder.reset();
    std::int32_t token = static_cast<std::int32_t>(
        rng.uniform_int(static_cast<std::uint64_t>(model.config.vocab_size)));
    corpus.ids.push_back(token);
    for (int t = 1; t < segment_len &&
                    static_cast<long>(corpus.ids.size()) < n_tokens;
         ++t) {
      token = sample_from_logits(decoder.step(token), rng);
      corpus.ids.push_back(token);
    }
  }
  return corpus;
}

void write_corpus_bin(const std::filesystem::path& path,
                      const TokenCorpus& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string());
  std::vector<std::uint32_t> raw(corpus.ids.begin(), corpus.ids.end());
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
  if (!out) throw InputError("write failed for " + path.string());
}

}  // namespace tyr
