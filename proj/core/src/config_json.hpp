// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared (internal) JSON serialization of ModelConfig. Not installed.

#pragma once

#include <string>

#include "json.hpp"
#include "tyr/model.hpp"

namespace tyr::detail {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["head_dim"] = c.head_dim;
  j["d_ffn"] = c.d_ffn;
  j["vocab_size"] = c.vocab_size;
  j["norm_epsilon"] = c.norm_epsilon;
  j["max_seq_len"] = c.max_seq_len;
  j["positional_scheme"] =
      c.positional_scheme == PositionalScheme::kRotary ? "rotary" : "none";
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.norm_epsilon = j.at("norm_epsilon").get<double>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  const std::string pos = j.at("positional_scheme").get<std::string>();
  if (pos == "rotary") {
    c.positional_scheme = PositionalScheme::kRotary;
  } else if (pos == "none") {
    c.positional_scheme = PositionalScheme::kNone;
  } else {
    throw FormatError("config: unknown positional_scheme '" + pos + "'");
  }
  return c;
}

}  // namespace tyr::detail
