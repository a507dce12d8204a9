// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/model.hpp"

#include <cmath>
#include <sstream>

namespace tyr {

namespace {

constexpr double kRotaryBase = 10000.0;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_finite(const Matrix& m, int layer, const char* what) {
  if (!m.allFinite()) {
    std::ostringstream os;
    os << "non-finite " << what << " in layer " << layer;
    throw NumericError(os.str());
  }
}

// Rotates q/k head blocks in place: pair (i, i + hd/2) per head, angle
// position * base^(-2i/hd).
void apply_rotary(Matrix& x, int head_dim) {
  const int half = head_dim / 2;
  const long rows = x.rows();
  const int heads = static_cast<int>(x.cols()) / head_dim;
  std::vector<double> inv_freq(half);
  for (int i = 0; i < half; ++i) {
    inv_freq[i] = std::pow(kRotaryBase, -2.0 * i / head_dim);
  }
  for (long t = 0; t < rows; ++t) {
    for (int i = 0; i < half; ++i) {
      const double angle = static_cast<double>(t) * inv_freq[i];
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      for (int h = 0; h < heads; ++h) {
        const int base = h * head_dim;
        const double a = x(t, base + i);
        const double b = x(t, base + i + half);
        x(t, base + i) = a * c - b * s;
        x(t, base + i + half) = a * s + b * c;
      }
    }
  }
}

}  // namespace

const char* to_string(SublayerKind kind) {
  return kind == SublayerKind::kMha ? "mha" : "ffn";
}

void ModelConfig::validate(int ffn_group_size) const {
  auto fail = [](const std::string& msg) { throw FormatError("config: " + msg); };
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || head_dim < 1 ||
      d_ffn < 1 || vocab_size < 1 || max_seq_len < 1) {
    fail("all counts must be >= 1");
  }
  if (n_heads * head_dim != d_model) {
    std::ostringstream os;
    os << "n_heads * head_dim must equal d_model (" << n_heads << " * "
       << head_dim << " != " << d_model << ")";
    fail(os.str());
  }
  if (!(norm_epsilon > 0.0)) fail("norm_epsilon must be positive");
  if (ffn_group_size > 0 && d_ffn % ffn_group_size != 0) {
    std::ostringstream os;
    os << "d_ffn (" << d_ffn << ") must be divisible by the FFN group size ("
       << ffn_group_size << ")";
    fail(os.str());
  }
  if (positional_scheme == PositionalScheme::kRotary && head_dim % 2 != 0) {
    fail("rotary positions require an even head_dim");
  }
}

bool TransformerWeights::is_dense() const {
  for (const auto& layer : layers) {
    if (static_cast<int>(layer.retained_heads.size()) != config.n_heads ||
        static_cast<int>(layer.retained_ffn.size()) != config.d_ffn) {
      return false;
    }
  }
  return true;
}

Matrix rmsnorm(const Matrix& x, const Vector& gain, double epsilon) {
  if (x.cols() != gain.size()) {
    throw InputError("rmsnorm: input width does not match gain length");
  }
  Matrix out(x.rows(), x.cols());
  for (long t = 0; t < x.rows(); ++t) {
    const double ms = x.row(t).squaredNorm() / static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(ms + epsilon);
    out.row(t) = x.row(t) * inv;
  }
  out.array().rowwise() *= gain.transpose().array();
  return out;
}

Matrix attention_intermediate(const ModelConfig& config,
                              const LayerWeights& layer, const Matrix& input) {
  if (input.cols() != config.d_model) {
    throw InputError("attention: input width does not match d_model");
  }
  const int hd = config.head_dim;
  const int heads = static_cast<int>(layer.retained_heads.size());
  const long t_len = input.rows();
  if (layer.wq.cols() != heads * hd || layer.wq.rows() != config.d_model) {
    throw InputError("attention: wq shape does not match retained heads");
  }
  Matrix out = Matrix::Zero(t_len, static_cast<long>(heads) * hd);
  if (heads == 0) return out;

  Matrix q = input * layer.wq;
  Matrix k = input * layer.wk;
  Matrix v = input * layer.wv;
  if (config.positional_scheme == PositionalScheme::kRotary) {
    apply_rotary(q, hd);
    apply_rotary(k, hd);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix scores(t_len, t_len);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(static_cast<long>(h) * hd, hd);
    const auto kh = k.middleCols(static_cast<long>(h) * hd, hd);
    const auto vh = v.middleCols(static_cast<long>(h) * hd, hd);
    scores.noalias() = qh * kh.transpose() * scale;
    // Causal softmax over positions <= t, in place.
    for (long t = 0; t < t_len; ++t) {
      double m = scores(t, 0);
      for (long u = 1; u <= t; ++u) m = std::max(m, scores(t, u));
      double sum = 0.0;
      for (long u = 0; u <= t; ++u) {
        const double e = std::exp(scores(t, u) - m);
        scores(t, u) = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (long u = 0; u <= t; ++u) scores(t, u) *= inv;
      for (long u = t + 1; u < t_len; ++u) scores(t, u) = 0.0;
    }
    out.middleCols(static_cast<long>(h) * hd, hd).noalias() =
        scores * vh;
  }
  return out;
}

Matrix ffn_activation(const LayerWeights& layer, const Matrix& input) {
  if (input.cols() != layer.wgate.rows()) {
    throw InputError("ffn: input width does not match wgate");
  }
  Matrix g = input * layer.wgate;
  Matrix u = input * layer.wup;
  for (long i = 0; i < g.rows(); ++i) {
    for (long j = 0; j < g.cols(); ++j) {
      const double x = g(i, j);
      g(i, j) = x * stable_sigmoid(x) * u(i, j);
    }
  }
  return g;
}

Matrix forward_sublayer(const ModelConfig& config, const LayerWeights& layer,
                        const Matrix& input, SublayerKind kind) {
  if (kind == SublayerKind::kMha) {
    Matrix inter = attention_intermediate(config, layer, input);
    if (inter.cols() == 0) return Matrix::Zero(input.rows(), config.d_model);
    return inter * layer.wo;
  }
  Matrix act = ffn_activation(layer, input);
  if (act.cols() == 0) return Matrix::Zero(input.rows(), config.d_model);
  return act * layer.wdown;
}

ForwardResult forward(const TransformerWeights& weights,
                      std::span<const std::int32_t> tokens,
                      std::span<const SublayerId> capture) {
  const ModelConfig& config = weights.config;
  const long t_len = static_cast<long>(tokens.size());
  if (t_len == 0) throw InputError("forward: empty token sequence");
  if (t_len > config.max_seq_len) {
    throw InputError("forward: sequence exceeds max_seq_len");
  }
  for (std::int32_t id : tokens) {
    if (id < 0 || id >= config.vocab_size) {
      std::ostringstream os;
      os << "forward: token id " << id << " out of range [0, "
         << config.vocab_size << ")";
      throw InputError(os.str());
    }
  }

  std::vector<std::uint8_t> want(config.sublayer_count(), 0);
  for (const SublayerId& id : capture) want[sublayer_index(id)] = 1;

  ForwardResult result;
  Matrix x(t_len, config.d_model);
  for (long t = 0; t < t_len; ++t) x.row(t) = weights.embed.row(tokens[t]);

  for (int l = 0; l < config.n_layers; ++l) {
    const LayerWeights& layer = weights.layers[l];
    Matrix normed = rmsnorm(x, layer.norm1, config.norm_epsilon);
    Matrix mha_out =
        forward_sublayer(config, layer, normed, SublayerKind::kMha);
    check_finite(mha_out, l, "attention output");
    if (want[sublayer_index({l, SublayerKind::kMha})]) {
      result.captured[sublayer_index({l, SublayerKind::kMha})] = mha_out;
    }
    x += mha_out;

    Matrix normed2 = rmsnorm(x, layer.norm2, config.norm_epsilon);
    Matrix ffn_out =
        forward_sublayer(config, layer, normed2, SublayerKind::kFfn);
    check_finite(ffn_out, l, "ffn output");
    if (want[sublayer_index({l, SublayerKind::kFfn})]) {
      result.captured[sublayer_index({l, SublayerKind::kFfn})] = ffn_out;
    }
    x += ffn_out;
  }

  Matrix final_normed = rmsnorm(x, weights.final_norm, config.norm_epsilon);
  result.logits.noalias() = final_normed * weights.lm_head;
  check_finite(result.logits, config.n_layers, "logits");
  return result;
}

TransformerWeights apply_structures(
    const TransformerWeights& dense,
    const std::vector<std::optional<PrunedSublayer>>& structures) {
  if (static_cast<int>(structures.size()) != dense.config.sublayer_count()) {
    throw InputError("apply_structures: one entry per sublayer required");
  }
  TransformerWeights out = dense;
  for (int l = 0; l < dense.config.n_layers; ++l) {
    const auto& mha = structures[sublayer_index({l, SublayerKind::kMha})];
    if (mha.has_value()) {
      out.layers[l].wq = mha->wq;
      out.layers[l].wk = mha->wk;
      out.layers[l].wv = mha->wv;
      out.layers[l].wo = mha->wo;
      out.layers[l].retained_heads = mha->retained_units;
    }
    const auto& ffn = structures[sublayer_index({l, SublayerKind::kFfn})];
    if (ffn.has_value()) {
      out.layers[l].wgate = ffn->wgate;
      out.layers[l].wup = ffn->wup;
      out.layers[l].wdown = ffn->wdown;
      out.layers[l].retained_ffn = ffn->retained_units;
    }
  }
  return out;
}

UnitParams prunable_unit_params(const ModelConfig& config, SublayerKind kind) {
  if (kind == SublayerKind::kMha) {
    // One head: its wq/wk/wv columns and wo rows.
    return {4L * config.d_model * config.head_dim, config.n_heads};
  }
  // One neuron: its wgate/wup columns and wdown row.
  return {3L * config.d_model, config.d_ffn};
}

long total_prunable_params(const ModelConfig& config) {
  const UnitParams mha = prunable_unit_params(config, SublayerKind::kMha);
  const UnitParams ffn = prunable_unit_params(config, SublayerKind::kFfn);
  return config.n_layers * (mha.params_per_unit * mha.total_units +
                            ffn.params_per_unit * ffn.total_units);
}

}  // namespace tyr
