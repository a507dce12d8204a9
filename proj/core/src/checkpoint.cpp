// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "config_json.hpp"
#include "json.hpp"

namespace tyr {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

struct TensorRef {
  std::string name;
  const double* data = nullptr;  // row-major walk is done explicitly
  long rows = 0;
  long cols = 0;
  bool is_vector = false;
  const Matrix* matrix = nullptr;
  const Vector* vector = nullptr;
};

std::string layer_tensor_name(int layer, const char* suffix) {
  std::ostringstream os;
  os << "layers." << layer << "." << suffix;
  return os.str();
}

// Canonical tensor order; also the expected-set for validation on load.
std::vector<TensorRef> tensor_list(const TransformerWeights& w) {
  std::vector<TensorRef> refs;
  auto add_m = [&refs](std::string name, const Matrix& m) {
    refs.push_back({std::move(name), nullptr, m.rows(), m.cols(), false, &m, nullptr});
  };
  auto add_v = [&refs](std::string name, const Vector& v) {
    refs.push_back({std::move(name), nullptr, v.size(), 1, true, nullptr, &v});
  };
  add_m("embed", w.embed);
  for (int l = 0; l < w.config.n_layers; ++l) {
    const LayerWeights& layer = w.layers[l];
    add_m(layer_tensor_name(l, "wq"), layer.wq);
    add_m(layer_tensor_name(l, "wk"), layer.wk);
    add_m(layer_tensor_name(l, "wv"), layer.wv);
    add_m(layer_tensor_name(l, "wo"), layer.wo);
    add_m(layer_tensor_name(l, "wgate"), layer.wgate);
    add_m(layer_tensor_name(l, "wup"), layer.wup);
    add_m(layer_tensor_name(l, "wdown"), layer.wdown);
    add_v(layer_tensor_name(l, "norm1"), layer.norm1);
    add_v(layer_tensor_name(l, "norm2"), layer.norm2);
  }
  add_v("final_norm", w.final_norm);
  add_m("lm_head", w.lm_head);
  return refs;
}

json config_to_json(const TransformerWeights& w) {
  json j = detail::model_config_to_json(w.config);
  if (!w.is_dense()) {
    json layers = json::array();
    for (const LayerWeights& layer : w.layers) {
      layers.push_back({{"mha_heads", layer.retained_heads},
                        {"ffn_channels", layer.retained_ffn}});
    }
    j["pruned_units"] = {{"layers", layers}};
  }
  return j;
}

void validate_retained(const std::vector<int>& units, int limit,
                       const std::string& what) {
  int prev = -1;
  for (int u : units) {
    if (u <= prev || u >= limit) {
      throw FormatError("config: pruned_units." + what +
                        " must be sorted, unique, and in range");
    }
    prev = u;
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir,
                     const TransformerWeights& weights) {
  weights.config.validate();
  std::filesystem::create_directories(dir);
  const auto refs = tensor_list(weights);

  const std::filesystem::path blob_path = dir / "weights.bin";
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw FormatError("cannot open " + blob_path.string());

  json tensors = json::array();
  std::uint64_t offset = 0;
  std::vector<float> buf;
  for (const TensorRef& ref : refs) {
    buf.clear();
    buf.reserve(static_cast<std::size_t>(ref.rows) * ref.cols);
    if (ref.is_vector) {
      for (long i = 0; i < ref.rows; ++i) {
        buf.push_back(static_cast<float>((*ref.vector)(i)));
      }
    } else {
      for (long r = 0; r < ref.rows; ++r) {
        for (long c = 0; c < ref.cols; ++c) {
          buf.push_back(static_cast<float>((*ref.matrix)(r, c)));
        }
      }
    }
    blob.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
    json t;
    t["name"] = ref.name;
    t["dtype"] = "f32";
    t["shape"] = ref.is_vector ? json::array({ref.rows})
                               : json::array({ref.rows, ref.cols});
    t["file"] = "weights.bin";
    t["byte_offset"] = offset;
    tensors.push_back(std::move(t));
    offset += buf.size() * sizeof(float);
  }
  blob.flush();
  if (!blob) throw FormatError("write failed for " + blob_path.string());

  json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config_to_json(weights);
  manifest["tensors"] = std::move(tensors);
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw FormatError("write failed for manifest.json");
}

TransformerWeights load_checkpoint(const std::filesystem::path& dir) {
  const std::filesystem::path manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError("cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }

  TransformerWeights w;
  try {
    if (manifest.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported checkpoint format_version");
    }
    w.config = detail::model_config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  w.config.validate();

  // Retained units (compacted checkpoints) default to everything.
  w.layers.resize(w.config.n_layers);
  for (int l = 0; l < w.config.n_layers; ++l) {
    w.layers[l].retained_heads.resize(w.config.n_heads);
    for (int h = 0; h < w.config.n_heads; ++h) w.layers[l].retained_heads[h] = h;
    w.layers[l].retained_ffn.resize(w.config.d_ffn);
    for (int f = 0; f < w.config.d_ffn; ++f) w.layers[l].retained_ffn[f] = f;
  }
  if (manifest.at("config").contains("pruned_units")) {
    const json& layers = manifest["config"]["pruned_units"].at("layers");
    if (static_cast<int>(layers.size()) != w.config.n_layers) {
      throw FormatError("config: pruned_units must list every layer");
    }
    for (int l = 0; l < w.config.n_layers; ++l) {
      w.layers[l].retained_heads =
          layers[l].at("mha_heads").get<std::vector<int>>();
      w.layers[l].retained_ffn =
          layers[l].at("ffn_channels").get<std::vector<int>>();
      validate_retained(w.layers[l].retained_heads, w.config.n_heads,
                        "mha_heads");
      validate_retained(w.layers[l].retained_ffn, w.config.d_ffn,
                        "ffn_channels");
    }
  }

  // Expected shapes, by tensor name.
  struct Expected {
    long rows = 0, cols = 0;
    bool is_vector = false;
    Matrix* matrix = nullptr;
    Vector* vector = nullptr;
  };
  std::map<std::string, Expected> expected;
  auto exp_m = [&expected](const std::string& name, Matrix& m, long r, long c) {
    expected[name] = {r, c, false, &m, nullptr};
  };
  auto exp_v = [&expected](const std::string& name, Vector& v, long n) {
    expected[name] = {n, 1, true, nullptr, &v};
  };
  exp_m("embed", w.embed, w.config.vocab_size, w.config.d_model);
  for (int l = 0; l < w.config.n_layers; ++l) {
    LayerWeights& layer = w.layers[l];
    const long rq = static_cast<long>(layer.retained_heads.size()) *
                    w.config.head_dim;
    const long rf = static_cast<long>(layer.retained_ffn.size());
    exp_m(layer_tensor_name(l, "wq"), layer.wq, w.config.d_model, rq);
    exp_m(layer_tensor_name(l, "wk"), layer.wk, w.config.d_model, rq);
    exp_m(layer_tensor_name(l, "wv"), layer.wv, w.config.d_model, rq);
    exp_m(layer_tensor_name(l, "wo"), layer.wo, rq, w.config.d_model);
    exp_m(layer_tensor_name(l, "wgate"), layer.wgate, w.config.d_model, rf);
    exp_m(layer_tensor_name(l, "wup"), layer.wup, w.config.d_model, rf);
    exp_m(layer_tensor_name(l, "wdown"), layer.wdown, rf, w.config.d_model);
    exp_v(layer_tensor_name(l, "norm1"), layer.norm1, w.config.d_model);
    exp_v(layer_tensor_name(l, "norm2"), layer.norm2, w.config.d_model);
  }
  exp_v("final_norm", w.final_norm, w.config.d_model);
  exp_m("lm_head", w.lm_head, w.config.d_model, w.config.vocab_size);

  std::map<std::string, bool> seen;
  std::vector<float> buf;
  for (const json& t : manifest.at("tensors")) {
    std::string name;
    try {
      name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f32") {
        throw FormatError("tensor " + name + ": unsupported dtype");
      }
      auto it = expected.find(name);
      if (it == expected.end()) {
        throw FormatError("unexpected tensor " + name);
      }
      if (seen[name]) throw FormatError("duplicate tensor " + name);
      seen[name] = true;
      Expected& exp = it->second;

      const auto shape = t.at("shape").get<std::vector<long>>();
      const bool shape_ok =
          exp.is_vector ? (shape.size() == 1 && shape[0] == exp.rows)
                        : (shape.size() == 2 && shape[0] == exp.rows &&
                           shape[1] == exp.cols);
      if (!shape_ok) {
        throw FormatError("tensor " + name + ": shape does not match config");
      }

      const std::filesystem::path file = dir / t.at("file").get<std::string>();
      const std::uint64_t offset = t.at("byte_offset").get<std::uint64_t>();
      const std::uint64_t bytes =
          static_cast<std::uint64_t>(exp.rows) * exp.cols * sizeof(float);
      std::error_code ec;
      const std::uint64_t file_size = std::filesystem::file_size(file, ec);
      if (ec || file_size < offset + bytes) {
        throw FormatError("tensor " + name + ": truncated blob " +
                          file.string());
      }
      std::ifstream blob(file, std::ios::binary);
      if (!blob) throw FormatError("tensor " + name + ": cannot open blob");
      blob.seekg(static_cast<std::streamoff>(offset));
      buf.resize(static_cast<std::size_t>(exp.rows) * exp.cols);
      blob.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!blob) throw FormatError("tensor " + name + ": read failed");

      if (exp.is_vector) {
        exp.vector->resize(exp.rows);
        for (long i = 0; i < exp.rows; ++i) (*exp.vector)(i) = buf[i];
      } else {
        exp.matrix->resize(exp.rows, exp.cols);
        std::size_t k = 0;
        for (long r = 0; r < exp.rows; ++r) {
          for (long c = 0; c < exp.cols; ++c) (*exp.matrix)(r, c) = buf[k++];
        }
      }
    } catch (const json::exception& e) {
      throw FormatError("tensor entry: " + std::string(e.what()));
    }
  }
  for (const auto& [name, exp] : expected) {
    if (!seen[name]) throw FormatError("missing tensor " + name);
  }
  return w;
}

}  // namespace tyr
