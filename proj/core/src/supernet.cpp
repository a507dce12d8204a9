// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "config_json.hpp"
#include "json.hpp"

namespace tyr {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'T', 'Y', 'R', 'S', 'N', 'E', 'T', '1'};

struct BlobHeader {
  char magic[8];
  std::uint32_t layer;
  std::uint32_t kind;
  std::uint32_t ladder_index;
  std::uint32_t retained_units;
  std::uint32_t dim0;  // retained input channels
  std::uint32_t dim1;  // d_model
};
static_assert(sizeof(BlobHeader) == 32);

std::uint64_t write_packed(std::ofstream& out, const Matrix& m) {
  std::vector<float> buf;
  buf.reserve(static_cast<std::size_t>(m.rows()) * m.cols());
  for (long r = 0; r < m.rows(); ++r) {
    for (long c = 0; c < m.cols(); ++c) {
      buf.push_back(static_cast<float>(m(r, c)));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  return buf.size() * sizeof(float);
}

Matrix read_packed(std::ifstream& in, std::uint64_t offset, long rows,
                   long cols, const std::string& what) {
  std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
  in.seekg(static_cast<std::streamoff>(offset));
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw StoreError("structure blob read failed for " + what);
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) m(r, c) = buf[k++];
  }
  return m;
}

json ladder_to_json(const SparsityLadder& ladder) {
  return json{{"center", ladder.center},
              {"interval", ladder.interval},
              {"count", ladder.count},
              {"total_units", ladder.total_units},
              {"nominal", ladder.nominal},
              {"realized", ladder.realized},
              {"pruned_units", ladder.pruned_units}};
}

SparsityLadder ladder_from_json(const json& j) {
  SparsityLadder ladder;
  ladder.center = j.at("center").get<double>();
  ladder.interval = j.at("interval").get<double>();
  ladder.count = j.at("count").get<int>();
  ladder.total_units = j.at("total_units").get<int>();
  ladder.nominal = j.at("nominal").get<std::vector<double>>();
  ladder.realized = j.at("realized").get<std::vector<double>>();
  ladder.pruned_units = j.at("pruned_units").get<std::vector<int>>();
  return ladder;
}

}  // namespace

const char* to_string(ErrorAccum mode) {
  switch (mode) {
    case ErrorAccum::kExpectation: return "expectation";
    case ErrorAccum::kNone: return "none";
    case ErrorAccum::kRandom: return "random";
    case ErrorAccum::kUniform: return "uniform";
  }
  return "expectation";
}

ErrorAccum error_accum_from_string(const std::string& name) {
  if (name == "expectation") return ErrorAccum::kExpectation;
  if (name == "none") return ErrorAccum::kNone;
  if (name == "random") return ErrorAccum::kRandom;
  if (name == "uniform") return ErrorAccum::kUniform;
  throw InputError("unknown error-accum mode '" + name + "'");
}

std::string to_string(const StructureKey& key) {
  std::ostringstream os;
  os << key.layer << "_" << to_string(key.kind) << "_" << key.ladder_index;
  return os.str();
}

SparsityLadder generate_ladder(double center, double interval, int count,
                               int total_units) {
  if (interval <= 0.0) throw InputError("generate_ladder: interval must be > 0");
  if (count < 1 || count % 2 == 0) {
    throw InputError("generate_ladder: ladder size must be odd");
  }
  if (total_units < 1) {
    throw InputError("generate_ladder: total_units must be >= 1");
  }
  SparsityLadder ladder;
  ladder.center = center;
  ladder.interval = interval;
  ladder.count = count;
  ladder.total_units = total_units;
  const double mid = (count - 1) / 2.0;
  for (int e = 0; e < count; ++e) {
    const double nominal =
        std::clamp(center + (e - mid) * interval, 0.0, 1.0);
    const long pruned = std::llround(nominal * total_units);
    ladder.nominal.push_back(nominal);
    ladder.pruned_units.push_back(static_cast<int>(pruned));
    ladder.realized.push_back(static_cast<double>(pruned) / total_units);
  }
  return ladder;
}

Matrix expected_mix(const std::vector<Matrix>& outputs,
                    std::span<const double> sparsities, bool* degenerate) {
  if (outputs.empty() || outputs.size() != sparsities.size()) {
    throw InputError("expected_mix: need one sparsity per output");
  }
  for (const Matrix& m : outputs) {
    if (m.rows() != outputs[0].rows() || m.cols() != outputs[0].cols()) {
      throw InputError("expected_mix: output shapes differ");
    }
  }
  double total = 0.0;
  for (double s : sparsities) {
    if (s < 0.0 || s > 1.0) {
      throw InputError("expected_mix: sparsity outside [0, 1]");
    }
    total += 1.0 - s;
  }
  if (degenerate != nullptr) *degenerate = false;
  Matrix mix = Matrix::Zero(outputs[0].rows(), outputs[0].cols());
  if (total <= 0.0) {
    // Every structure is fully pruned; fall back to the unweighted mean.
    if (degenerate != nullptr) *degenerate = true;
    for (const Matrix& m : outputs) mix += m;
    mix /= static_cast<double>(outputs.size());
    return mix;
  }
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    const double w = (1.0 - sparsities[e]) / total;
    if (w != 0.0) mix += w * outputs[e];
  }
  return mix;
}

const SupernetStore::SublayerRecord& SupernetStore::sublayer(int index) const {
  if (index < 0 || index >= sublayer_count()) {
    throw StoreError("supernet store: sublayer index out of range");
  }
  return sublayers_[static_cast<std::size_t>(index)];
}

SupernetStore build_supernet(const TransformerWeights& dense,
                             const std::vector<std::span<const std::int32_t>>& batches,
                             const std::vector<SparsityLadder>& ladders,
                             int ffn_group_size, double lambda_frac,
                             const std::filesystem::path& iteration_dir,
                             ErrorAccum mode, std::uint64_t seed,
                             const StreamHook& stream_hook) {
  const ModelConfig& config = dense.config;
  config.validate(ffn_group_size);
  if (!dense.is_dense()) {
    throw InputError("build_supernet: input model must be dense");
  }
  if (static_cast<int>(ladders.size()) != config.sublayer_count()) {
    throw InputError("build_supernet: one ladder per sublayer required");
  }
  if (batches.empty()) {
    throw InputError("build_supernet: no calibration batches");
  }
  for (const auto& batch : batches) {
    for (std::int32_t id : batch) {
      if (id < 0 || id >= config.vocab_size) {
        throw InputError("build_supernet: calibration token id out of range");
      }
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(iteration_dir / "structures", ec);
  if (ec) {
    throw StoreError("build_supernet: cannot create " +
                     iteration_dir.string() + ": " + ec.message());
  }

  SupernetStore store;
  store.dir_ = iteration_dir;
  store.iteration_tag_ = iteration_dir.filename().string();
  store.config_ = config;
  store.ffn_group_size_ = ffn_group_size;

  // Residual stream, one matrix per calibration sequence.
  std::vector<Matrix> stream;
  stream.reserve(batches.size());
  for (const auto& batch : batches) {
    Matrix x(static_cast<long>(batch.size()), config.d_model);
    for (long t = 0; t < x.rows(); ++t) x.row(t) = dense.embed.row(batch[t]);
    stream.push_back(std::move(x));
  }

  for (int l = 0; l < config.n_layers; ++l) {
    const LayerWeights& layer = dense.layers[l];
    for (SublayerKind kind : {SublayerKind::kMha, SublayerKind::kFfn}) {
      const bool is_mha = kind == SublayerKind::kMha;
      const int sub = sublayer_index({l, kind});
      const SparsityLadder& ladder = ladders[static_cast<std::size_t>(sub)];
      const UnitGrouping grouping =
          is_mha ? UnitGrouping{config.head_dim, config.n_heads}
                 : UnitGrouping{ffn_group_size, config.d_ffn / ffn_group_size};
      if (ladder.total_units != grouping.unit_count) {
        throw InputError("build_supernet: ladder unit count mismatch at " +
                         to_string(StructureKey{l, kind, 0}));
      }
      const Matrix& w_dense = is_mha ? layer.wo : layer.wdown;

      // Pass 1: module inputs on the current stream, Hessian accumulation.
      ActivationStats stats(static_cast<int>(w_dense.rows()));
      std::vector<Matrix> inters;
      inters.reserve(stream.size());
      for (const Matrix& x : stream) {
        Matrix normed =
            rmsnorm(x, is_mha ? layer.norm1 : layer.norm2, config.norm_epsilon);
        Matrix inter = is_mha ? attention_intermediate(config, layer, normed)
                              : ffn_activation(layer, normed);
        stats.accumulate(inter);
        inters.push_back(std::move(inter));
      }

      // One trajectory snapshots every ladder point.
      PruneTrajectory traj = prune_progressive(
          w_dense, stats, grouping, ladder.realized, lambda_frac);

      // Persist the ladder (duplicated realized points share one blob).
      SupernetStore::SublayerRecord record;
      record.id = {l, kind};
      record.total_units = grouping.unit_count;
      record.ladder = ladder;
      std::map<int, int> first_with_count;  // pruned units -> ladder index
      for (int e = 0; e < ladder.count; ++e) {
        const TrajectorySnapshot& snap =
            traj.snapshots[static_cast<std::size_t>(e)];
        SupernetStore::Entry entry;
        entry.ladder_index = e;
        entry.realized_sparsity = snap.realized_sparsity;
        entry.retained_units = is_mha ? snap.retained_units
                                      : snap.retained_channels;
        const int pruned = ladder.pruned_units[static_cast<std::size_t>(e)];
        auto seen = first_with_count.find(pruned);
        if (seen != first_with_count.end()) {
          const SupernetStore::Entry& prev =
              record.entries[static_cast<std::size_t>(seen->second)];
          entry.file = prev.file;
          entry.byte_ranges = prev.byte_ranges;
        } else {
          first_with_count.emplace(pruned, e);
          const StructureKey key{l, kind, e};
          entry.file = "structures/" + to_string(key) + ".bin";
          const std::filesystem::path blob_path = iteration_dir / entry.file;
          std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
          if (!blob) {
            throw StoreError("build_supernet: cannot open " +
                             blob_path.string());
          }
          BlobHeader header{};
          std::memcpy(header.magic, kMagic, sizeof(kMagic));
          header.layer = static_cast<std::uint32_t>(l);
          header.kind = is_mha ? 0 : 1;
          header.ladder_index = static_cast<std::uint32_t>(e);
          header.retained_units =
              static_cast<std::uint32_t>(entry.retained_units.size());
          header.dim0 =
              static_cast<std::uint32_t>(snap.retained_channels.size());
          header.dim1 = static_cast<std::uint32_t>(config.d_model);
          blob.write(reinterpret_cast<const char*>(&header), sizeof(header));
          std::uint64_t offset = sizeof(header);
          auto emit = [&](const char* name, const Matrix& m) {
            const std::uint64_t len = write_packed(blob, m);
            entry.byte_ranges[name] = {offset, len};
            offset += len;
          };
          const auto& channels = snap.retained_channels;
          if (is_mha) {
            emit("wq", layer.wq(Eigen::all, channels));
            emit("wk", layer.wk(Eigen::all, channels));
            emit("wv", layer.wv(Eigen::all, channels));
            emit("wo", snap.packed_w);
          } else {
            emit("wgate", layer.wgate(Eigen::all, channels));
            emit("wup", layer.wup(Eigen::all, channels));
            emit("wdown", snap.packed_w);
          }
          blob.flush();
          if (!blob) {
            throw StoreError("build_supernet: write failed for " +
                             blob_path.string());
          }
        }
        record.entries.push_back(std::move(entry));
      }
      store.sublayers_.push_back(std::move(record));

      // Pass 2: per-structure outputs on the current stream, then the mixed
      // stream replaces it (residual applied once; the next sublayer norms).
      int random_pick = 0;
      if (mode == ErrorAccum::kRandom) {
        Rng rng(derive_seed(seed, {0x72616e64ULL, static_cast<std::uint64_t>(l),
                                   static_cast<std::uint64_t>(is_mha ? 0 : 1)}));
        random_pick = static_cast<int>(
            rng.uniform_int(static_cast<std::uint64_t>(ladder.count)));
      }
      for (std::size_t b = 0; b < stream.size(); ++b) {
        const Matrix& inter = inters[b];
        Matrix mixed;
        if (mode == ErrorAccum::kNone) {
          mixed.noalias() = inter * w_dense;
        } else {
          std::vector<Matrix> outputs;
          outputs.reserve(static_cast<std::size_t>(ladder.count));
          for (int e = 0; e < ladder.count; ++e) {
            const TrajectorySnapshot& snap =
                traj.snapshots[static_cast<std::size_t>(e)];
            if (snap.retained_channels.empty()) {
              outputs.push_back(Matrix::Zero(inter.rows(), config.d_model));
            } else {
              outputs.push_back(inter(Eigen::all, snap.retained_channels) *
                                snap.packed_w);
            }
          }
          if (mode == ErrorAccum::kExpectation) {
            mixed = expected_mix(outputs, ladder.realized);
          } else if (mode == ErrorAccum::kUniform) {
            mixed = Matrix::Zero(inter.rows(), config.d_model);
            for (const Matrix& out : outputs) mixed += out;
            mixed /= static_cast<double>(outputs.size());
          } else {
            mixed = outputs[static_cast<std::size_t>(random_pick)];
          }
        }
        stream[b] += mixed;
      }
      inters.clear();
      if (stream_hook) stream_hook(sub, stream);
    }
  }

  // Manifest last, atomically: a failed build leaves no manifest behind.
  json manifest;
  manifest["format_version"] = 1;
  manifest["iteration"] = store.iteration_tag_;
  manifest["error_accum"] = to_string(mode);
  manifest["seed"] = seed;
  manifest["ffn_group_size"] = ffn_group_size;
  manifest["config"] = detail::model_config_to_json(config);
  json sublayers = json::array();
  for (const auto& record : store.sublayers_) {
    json entries = json::array();
    for (const auto& entry : record.entries) {
      json ranges;
      for (const auto& [name, range] : entry.byte_ranges) {
        ranges[name] = {range.first, range.second};
      }
      entries.push_back({{"e", entry.ladder_index},
                         {"realized_sparsity", entry.realized_sparsity},
                         {"retained_units", entry.retained_units},
                         {"file", entry.file},
                         {"byte_ranges", std::move(ranges)}});
    }
    sublayers.push_back({{"layer", record.id.layer},
                         {"kind", to_string(record.id.kind)},
                         {"total_units", record.total_units},
                         {"ladder", ladder_to_json(record.ladder)},
                         {"entries", std::move(entries)}});
  }
  manifest["sublayers"] = std::move(sublayers);

  const std::filesystem::path tmp = iteration_dir / "manifest.json.tmp";
  {
    std::ofstream mf(tmp, std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    mf.flush();
    if (!mf) throw StoreError("build_supernet: manifest write failed");
  }
  std::filesystem::rename(tmp, iteration_dir / "manifest.json", ec);
  if (ec) {
    throw StoreError("build_supernet: manifest rename failed: " + ec.message());
  }
  return store;
}

SupernetStore SupernetStore::open(const std::filesystem::path& iteration_dir) {
  const std::filesystem::path manifest_path = iteration_dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw StoreError("supernet store: cannot open " +
                            manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw StoreError("supernet store manifest: " + std::string(e.what()));
  }

  SupernetStore store;
  store.dir_ = iteration_dir;
  try {
    if (manifest.at("format_version").get<int>() != 1) {
      throw StoreError("supernet store: unsupported format_version");
    }
    store.iteration_tag_ = manifest.at("iteration").get<std::string>();
    store.ffn_group_size_ = manifest.at("ffn_group_size").get<int>();
    store.config_ = detail::model_config_from_json(manifest.at("config"));
    for (const json& sj : manifest.at("sublayers")) {
      SublayerRecord record;
      record.id.layer = sj.at("layer").get<int>();
      record.id.kind = sj.at("kind").get<std::string>() == "mha"
                           ? SublayerKind::kMha
                           : SublayerKind::kFfn;
      record.total_units = sj.at("total_units").get<int>();
      record.ladder = ladder_from_json(sj.at("ladder"));
      for (const json& ej : sj.at("entries")) {
        Entry entry;
        entry.ladder_index = ej.at("e").get<int>();
        entry.realized_sparsity = ej.at("realized_sparsity").get<double>();
        entry.retained_units = ej.at("retained_units").get<std::vector<int>>();
        entry.file = ej.at("file").get<std::string>();
        for (const auto& [name, range] : ej.at("byte_ranges").items()) {
          entry.byte_ranges[name] = {range.at(0).get<std::uint64_t>(),
                                     range.at(1).get<std::uint64_t>()};
        }
        record.entries.push_back(std::move(entry));
      }
      if (static_cast<int>(record.entries.size()) != record.ladder.count) {
        throw StoreError("supernet store: entry count mismatch in manifest");
      }
      store.sublayers_.push_back(std::move(record));
    }
  } catch (const json::exception& e) {
    throw StoreError("supernet store manifest: " + std::string(e.what()));
  }
  if (static_cast<int>(store.sublayers_.size()) !=
      store.config_.sublayer_count()) {
    throw StoreError("supernet store: manifest does not cover every sublayer");
  }
  return store;
}

PrunedSublayer SupernetStore::load_structure(const StructureKey& key) const {
  const int sub = sublayer_index({key.layer, key.kind});
  if (sub < 0 || sub >= sublayer_count()) {
    throw StoreError("supernet store: no sublayer for key " + to_string(key));
  }
  const SublayerRecord& record = sublayers_[static_cast<std::size_t>(sub)];
  if (key.ladder_index < 0 ||
      key.ladder_index >= static_cast<int>(record.entries.size())) {
    throw StoreError("supernet store: missing entry for key " +
                     to_string(key));
  }
  const Entry& entry = record.entries[static_cast<std::size_t>(key.ladder_index)];
  const std::filesystem::path path = dir_ / entry.file;

  std::error_code ec;
  const std::uint64_t file_size = std::filesystem::file_size(path, ec);
  if (ec) {
    throw StoreError("supernet store: missing blob for key " + to_string(key));
  }
  std::uint64_t expect = sizeof(BlobHeader);
  for (const auto& [name, range] : entry.byte_ranges) {
    expect = std::max(expect, range.first + range.second);
  }
  if (file_size != expect) {
    std::ostringstream os;
    os << "supernet store: blob size " << file_size << " != expected "
       << expect << " for key " << to_string(key);
    throw StoreError(os.str());
  }

  std::ifstream blob(path, std::ios::binary);
  if (!blob) {
    throw StoreError("supernet store: cannot open blob for key " +
                     to_string(key));
  }
  BlobHeader header{};
  blob.read(reinterpret_cast<char*>(&header), sizeof(header));
  if (!blob || std::memcmp(header.magic, kMagic, sizeof(kMagic)) != 0 ||
      header.layer != static_cast<std::uint32_t>(key.layer) ||
      header.kind != (key.kind == SublayerKind::kMha ? 0u : 1u) ||
      header.retained_units != entry.retained_units.size() ||
      header.dim1 != static_cast<std::uint32_t>(config_.d_model)) {
    throw StoreError("supernet store: corrupt blob header for key " +
                     to_string(key));
  }

  PrunedSublayer structure;
  structure.id = {key.layer, key.kind};
  structure.retained_units = entry.retained_units;
  structure.realized_sparsity = entry.realized_sparsity;
  const long rc = header.dim0;
  const long d_model = config_.d_model;
  auto range_of = [&](const char* name) {
    auto it = entry.byte_ranges.find(name);
    if (it == entry.byte_ranges.end()) {
      throw StoreError("supernet store: manifest missing byte range '" +
                       std::string(name) + "' for key " + to_string(key));
    }
    return it->second;
  };
  if (key.kind == SublayerKind::kMha) {
    if (rc != static_cast<long>(entry.retained_units.size()) *
                  config_.head_dim) {
      throw StoreError("supernet store: corrupt blob header for key " +
                       to_string(key));
    }
    structure.wq = read_packed(blob, range_of("wq").first, d_model, rc, to_string(key));
    structure.wk = read_packed(blob, range_of("wk").first, d_model, rc, to_string(key));
    structure.wv = read_packed(blob, range_of("wv").first, d_model, rc, to_string(key));
    structure.wo = read_packed(blob, range_of("wo").first, rc, d_model, to_string(key));
  } else {
    if (rc != static_cast<long>(entry.retained_units.size())) {
      throw StoreError("supernet store: corrupt blob header for key " +
                       to_string(key));
    }
    structure.wgate = read_packed(blob, range_of("wgate").first, d_model, rc, to_string(key));
    structure.wup = read_packed(blob, range_of("wup").first, d_model, rc, to_string(key));
    structure.wdown = read_packed(blob, range_of("wdown").first, rc, d_model, to_string(key));
  }

  // Retained-count invariant: |retained| == (1 - realized) * total, exactly.
  const int total = key.kind == SublayerKind::kMha ? config_.n_heads
                                                   : config_.d_ffn;
  const long expect_retained =
      total - std::llround(structure.realized_sparsity * total);
  if (static_cast<long>(structure.retained_units.size()) != expect_retained) {
    throw StoreError("supernet store: retained-unit count does not match "
                     "realized sparsity for key " + to_string(key));
  }
  return structure;
}

TransformerWeights apply_plan(const TransformerWeights& dense,
                              const SupernetStore& store,
                              std::span<const int> plan) {
  if (static_cast<int>(plan.size()) != dense.config.sublayer_count()) {
    throw InputError("apply_plan: plan must cover every sublayer");
  }
  std::vector<std::optional<PrunedSublayer>> structures(plan.size());
  for (int sub = 0; sub < static_cast<int>(plan.size()); ++sub) {
    const SublayerId id = sublayer_from_index(sub);
    structures[static_cast<std::size_t>(sub)] =
        store.load_structure({id.layer, id.kind, plan[sub]});
  }
  return apply_structures(dense, structures);
}

std::uint64_t gc_iteration(const std::filesystem::path& store_root,
                           const std::string& keep_tag) {
  std::error_code ec;
  if (!std::filesystem::exists(store_root, ec)) return 0;
  std::uint64_t freed = 0;
  for (const auto& it : std::filesystem::directory_iterator(store_root, ec)) {
    if (!it.is_directory() || it.path().filename() == keep_tag) continue;
    for (const auto& f :
         std::filesystem::recursive_directory_iterator(it.path(), ec)) {
      if (f.is_regular_file()) {
        std::error_code size_ec;
        const std::uint64_t sz = f.file_size(size_ec);
        if (!size_ec) freed += sz;
      }
    }
    std::error_code rm_ec;
    std::filesystem::remove_all(it.path(), rm_ec);
    if (rm_ec) {
      throw StoreError("gc_iteration: failed to remove " + it.path().string() +
                       ": " + rm_ec.message());
    }
  }
  if (ec) {
    throw StoreError("gc_iteration: " + ec.message());
  }
  return freed;
}

}  // namespace tyr
