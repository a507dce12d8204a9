// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer data model and forward pass.
//
// Conventions: activations are row-per-token matrices (T x d); a linear map
// is y = x * W with W shaped d_in x d_out. The architecture is pre-norm
// RMSNorm with rotary positions and a SwiGLU feed-forward, i.e. the Llama
// family layout. Weights are immutable after load; forward is reentrant.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tyr/common.hpp"

namespace tyr {

enum class PositionalScheme { kRotary, kNone };

enum class SublayerKind { kMha, kFfn };

const char* to_string(SublayerKind kind);

struct SublayerId {
  int layer = 0;
  SublayerKind kind = SublayerKind::kMha;

  friend bool operator==(const SublayerId&, const SublayerId&) = default;
};

// Flat sublayer index: layer-major, MHA before FFN. L = 2 * n_layers.
inline int sublayer_index(const SublayerId& id) {
  return 2 * id.layer + (id.kind == SublayerKind::kFfn ? 1 : 0);
}
inline SublayerId sublayer_from_index(int index) {
  return SublayerId{index / 2,
                    index % 2 == 0 ? SublayerKind::kMha : SublayerKind::kFfn};
}

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int head_dim = 0;
  int d_ffn = 0;
  int vocab_size = 0;
  double norm_epsilon = 1e-5;
  int max_seq_len = 0;
  PositionalScheme positional_scheme = PositionalScheme::kRotary;

  int sublayer_count() const { return 2 * n_layers; }

  // Throws FormatError naming the violated invariant.
  void validate(int ffn_group_size = 1) const;
};

struct LayerWeights {
  Matrix wq, wk, wv;  // d_model x (retained_heads * head_dim)
  Matrix wo;          // (retained_heads * head_dim) x d_model
  Matrix wgate, wup;  // d_model x retained_ffn
  Matrix wdown;       // retained_ffn x d_model
  Vector norm1, norm2;

  // Which dense units survive in this layer. A dense model retains all of
  // them; apply_structures produces compacted layers with fewer.
  std::vector<int> retained_heads;
  std::vector<int> retained_ffn;  // neuron (channel) indices into dense d_ffn
};

struct TransformerWeights {
  ModelConfig config;
  Matrix embed;  // vocab x d_model
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix lm_head;  // d_model x vocab

  bool is_dense() const;
};

// One sublayer of a pruned structure with pruned rows/columns physically
// removed. retained_units holds head indices for MHA and neuron (channel)
// indices for FFN, sorted ascending.
struct PrunedSublayer {
  SublayerId id;
  std::vector<int> retained_units;
  double realized_sparsity = 0.0;
  Matrix wq, wk, wv, wo;       // MHA only
  Matrix wgate, wup, wdown;    // FFN only
};

struct ForwardResult {
  Matrix logits;  // T x vocab
  // Pre-residual sublayer outputs (T x d_model), keyed by sublayer_index.
  std::map<int, Matrix> captured;
};

// Full forward pass. `capture` selects sublayers whose pre-residual outputs
// are returned. Throws InputError for out-of-range token ids or overlong
// sequences, NumericError naming the layer when an intermediate goes
// non-finite.
ForwardResult forward(const TransformerWeights& weights,
                      std::span<const std::int32_t> tokens,
                      std::span<const SublayerId> capture = {});

// Low-level kernels shared by the forward pass and the supernet builder.
// `input` is the already-normalized sublayer input.
Matrix rmsnorm(const Matrix& x, const Vector& gain, double epsilon);

// Concatenated per-head attention outputs (T x retained_heads*head_dim),
// i.e. the input that feeds wo.
Matrix attention_intermediate(const ModelConfig& config,
                              const LayerWeights& layer, const Matrix& input);

// SwiGLU activation silu(x*wgate) .* (x*wup), the input that feeds wdown.
Matrix ffn_activation(const LayerWeights& layer, const Matrix& input);

// Pre-residual output of a single sublayer on a normalized input.
Matrix forward_sublayer(const ModelConfig& config, const LayerWeights& layer,
                        const Matrix& input, SublayerKind kind);

// Physically compacts `dense` per sublayer. `structures` is indexed by
// sublayer_index; a disengaged entry keeps the dense sublayer.
TransformerWeights apply_structures(
    const TransformerWeights& dense,
    const std::vector<std::optional<PrunedSublayer>>& structures);

// Prunable-parameter accounting. The atomic ranking unit here is one head
// (MHA) or one neuron (FFN); embeddings and lm_head are excluded.
struct UnitParams {
  long params_per_unit = 0;
  int total_units = 0;
};
UnitParams prunable_unit_params(const ModelConfig& config, SublayerKind kind);
long total_prunable_params(const ModelConfig& config);

}  // namespace tyr
