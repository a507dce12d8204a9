// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/orchestrator.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "config_json.hpp"
#include "json.hpp"
#include "tyr/checkpoint.hpp"

namespace tyr {

namespace {

using nlohmann::json;

std::string iteration_tag(int t) {
  std::ostringstream os;
  os << "iter_" << t;
  return os.str();
}

std::uint64_t directory_bytes(const std::filesystem::path& dir) {
  std::uint64_t total = 0;
  std::error_code ec;
  for (const auto& f : std::filesystem::recursive_directory_iterator(dir, ec)) {
    if (f.is_regular_file()) {
      std::error_code size_ec;
      const std::uint64_t sz = f.file_size(size_ec);
      if (!size_ec) total += sz;
    }
  }
  return total;
}

json stages_to_json(const std::vector<SearchStage>& stages) {
  json out = json::array();
  for (const SearchStage& s : stages) {
    out.push_back({s.survivors, s.budget_tokens});
  }
  return out;
}

std::vector<SearchStage> stages_from_json(const json& j) {
  std::vector<SearchStage> stages;
  for (const json& s : j) {
    stages.push_back({s.at(0).get<int>(), s.at(1).get<long>()});
  }
  return stages;
}

}  // namespace

std::filesystem::path RunConfig::store_root() const {
  if (const char* env = std::getenv("TYR_STORE_ROOT")) {
    if (env[0] != '\0') return std::filesystem::path(env);
  }
  return out / "supernet";
}

double RunConfig::interval_at(int iteration) const {
  return initial_interval / std::pow(2.0, iteration - 1);
}

void RunConfig::validate() const {
  if (!(target_sparsity > 0.0 && target_sparsity < 1.0)) {
    throw InputError("config: target_sparsity must be in (0, 1)");
  }
  if (iterations < 1) throw InputError("config: iterations must be >= 1");
  if (!(initial_interval > 0.0)) {
    throw InputError("config: interval must be > 0");
  }
  if (ladder_size < 1 || ladder_size % 2 == 0) {
    throw InputError("config: ladder size must be odd");
  }
  if (ffn_group_size < 1) {
    throw InputError("config: ffn_group_size must be >= 1");
  }
  if (lambda_frac < 0.0) throw InputError("config: lambda_frac must be >= 0");
  if (sample_len < 2) throw InputError("config: sample_len must be >= 2");
  if (calib_tokens < sample_len) {
    throw InputError("config: calib_tokens must cover one sample");
  }
  if (eval_seq_len < 2) throw InputError("config: eval_seq_len must be >= 2");
  search.validate();
}

RunConfig parse_run_config(const std::filesystem::path& config_file) {
  std::ifstream in(config_file);
  if (!in) throw InputError("cannot open config " + config_file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("config: " + std::string(e.what()));
  }

  RunConfig cfg;
  try {
    if (j.contains("checkpoint")) cfg.checkpoint = j["checkpoint"].get<std::string>();
    if (j.contains("corpus")) cfg.corpus = j["corpus"].get<std::string>();
    if (j.contains("out")) cfg.out = j["out"].get<std::string>();
    if (j.contains("target_sparsity")) cfg.target_sparsity = j["target_sparsity"].get<double>();
    if (j.contains("iterations")) cfg.iterations = j["iterations"].get<int>();
    if (j.contains("initial_interval")) cfg.initial_interval = j["initial_interval"].get<double>();
    if (j.contains("ladder_size")) cfg.ladder_size = j["ladder_size"].get<int>();
    if (j.contains("ffn_group_size")) cfg.ffn_group_size = j["ffn_group_size"].get<int>();
    if (j.contains("lambda_frac")) cfg.lambda_frac = j["lambda_frac"].get<double>();
    if (j.contains("sample_len")) cfg.sample_len = j["sample_len"].get<int>();
    if (j.contains("calib_tokens")) cfg.calib_tokens = j["calib_tokens"].get<long>();
    if (j.contains("eval_seq_len")) cfg.eval_seq_len = j["eval_seq_len"].get<int>();
    if (j.contains("error_accum")) {
      cfg.error_accum = error_accum_from_string(j["error_accum"].get<std::string>());
    }
    if (j.contains("metric")) cfg.metric = metric_from_string(j["metric"].get<std::string>());
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("gc_previous")) cfg.gc_previous = j["gc_previous"].get<bool>();
    if (j.contains("search")) {
      const json& s = j["search"];
      if (s.contains("generations")) cfg.search.generations = s["generations"].get<int>();
      if (s.contains("offspring")) cfg.search.offspring = s["offspring"].get<int>();
      if (s.contains("stages")) cfg.search.stages = stages_from_json(s["stages"]);
    }
  } catch (const json::exception& e) {
    throw FormatError("config: " + std::string(e.what()));
  }
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["checkpoint"] = cfg.checkpoint.string();
  j["corpus"] = cfg.corpus.string();
  j["out"] = cfg.out.string();
  j["target_sparsity"] = cfg.target_sparsity;
  j["iterations"] = cfg.iterations;
  j["initial_interval"] = cfg.initial_interval;
  j["ladder_size"] = cfg.ladder_size;
  j["ffn_group_size"] = cfg.ffn_group_size;
  j["lambda_frac"] = cfg.lambda_frac;
  j["sample_len"] = cfg.sample_len;
  j["calib_tokens"] = cfg.calib_tokens;
  j["eval_seq_len"] = cfg.eval_seq_len;
  j["error_accum"] = to_string(cfg.error_accum);
  j["metric"] = to_string(cfg.metric);
  j["seed"] = cfg.seed;
  j["gc_previous"] = cfg.gc_previous;
  j["search"] = {{"generations", cfg.search.generations},
                 {"offspring", cfg.search.offspring},
                 {"stages", stages_to_json(cfg.search.stages)}};
  return j.dump(2) + "\n";
}

std::filesystem::path stage_build_supernet(const RunConfig& config,
                                           const TransformerWeights& dense,
                                           const TokenCorpus& corpus,
                                           const std::vector<double>& centers,
                                           int iteration) {
  const ModelConfig& mc = dense.config;
  if (static_cast<int>(centers.size()) != mc.sublayer_count()) {
    throw InputError("stage_build_supernet: one center per sublayer required");
  }
  const double interval = config.interval_at(iteration);
  std::vector<SparsityLadder> ladders;
  ladders.reserve(centers.size());
  for (int sub = 0; sub < mc.sublayer_count(); ++sub) {
    const SublayerId id = sublayer_from_index(sub);
    const int units = id.kind == SublayerKind::kMha
                          ? mc.n_heads
                          : mc.d_ffn / config.ffn_group_size;
    ladders.push_back(generate_ladder(centers[static_cast<std::size_t>(sub)],
                                      interval, config.ladder_size, units));
  }

  const auto batches = sample_batches(
      corpus, config.calib_tokens, derive_seed(config.seed, {0x63616c6962ULL}));
  const std::filesystem::path dir =
      config.store_root() / iteration_tag(iteration);
  build_supernet(dense, batches, ladders, config.ffn_group_size,
                 config.lambda_frac, dir, config.error_accum,
                 derive_seed(config.seed, {0x6275696c64ULL,
                                           static_cast<std::uint64_t>(iteration)}));
  return dir;
}

StageSearchResult stage_search(const RunConfig& config,
                               const TransformerWeights& dense,
                               const TokenCorpus& corpus,
                               const std::filesystem::path& store_dir,
                               int iteration,
                               const std::filesystem::path& plan_file,
                               const std::filesystem::path& trace_file) {
  const SupernetStore store = SupernetStore::open(store_dir);
  SubnetEvaluator eval(dense, store, corpus, config.target_sparsity,
                       derive_seed(config.seed, {0x6576616cULL}),
                       config.metric);

  SearchConfig sc = config.search;
  sc.seed = derive_seed(config.seed,
                        {0x736561726368ULL, static_cast<std::uint64_t>(iteration)});
  const SparsityPlan init = eval.space().center_plan();
  const long final_budget = sc.stages.back().budget_tokens;
  const double first_fitness = eval.fitness(init, final_budget);

  const SearchResult result = evolutionary_search(eval, init, sc);

  StageSearchResult out;
  out.plan = result.best;
  out.first_fitness = first_fitness;
  out.final_fitness = result.best_fitness;
  out.generations = static_cast<int>(result.trace.size());
  for (int sub = 0; sub < eval.space().sublayer_count(); ++sub) {
    out.realized.push_back(eval.space().realized_sparsity(
        sub, result.best.indices[static_cast<std::size_t>(sub)]));
  }

  // Plan artifact: enough to recenter the next iteration and to export.
  json pj;
  pj["target_sparsity"] = config.target_sparsity;
  pj["iteration"] = store.iteration_tag();
  pj["indices"] = result.best.indices;
  pj["realized_overall"] = eval.space().realized_overall(result.best);
  json subs = json::array();
  for (int sub = 0; sub < eval.space().sublayer_count(); ++sub) {
    const SublayerId id = sublayer_from_index(sub);
    subs.push_back({{"layer", id.layer},
                    {"kind", to_string(id.kind)},
                    {"e", result.best.indices[static_cast<std::size_t>(sub)]},
                    {"realized_sparsity",
                     out.realized[static_cast<std::size_t>(sub)]}});
  }
  pj["sublayers"] = std::move(subs);
  std::filesystem::create_directories(plan_file.parent_path());
  {
    std::ofstream pf(plan_file, std::ios::trunc);
    pf << pj.dump(2) << "\n";
    if (!pf) throw StoreError("stage_search: cannot write " + plan_file.string());
  }
  {
    std::ofstream tf(trace_file, std::ios::trunc);
    for (const TraceEntry& entry : result.trace) {
      json tj;
      tj["generation"] = entry.generation;
      tj["incumbent_fitness"] = entry.incumbent_fitness;
      tj["budget"] = entry.budget;
      tj["plan"] = entry.plan.indices;
      tj["realized_sparsity"] = entry.realized_sparsity;
      tf << tj.dump() << "\n";
    }
    if (!tf) throw StoreError("stage_search: cannot write " + trace_file.string());
  }
  return out;
}

SparsityPlan read_plan_file(const std::filesystem::path& plan_file) {
  std::ifstream in(plan_file);
  if (!in) throw InputError("cannot open plan " + plan_file.string());
  try {
    const json j = json::parse(in);
    SparsityPlan plan;
    plan.indices = j.at("indices").get<std::vector<int>>();
    return plan;
  } catch (const json::exception& e) {
    throw FormatError("plan file: " + std::string(e.what()));
  }
}

void stage_export(const TransformerWeights& dense,
                  const std::filesystem::path& store_dir,
                  const std::filesystem::path& plan_file,
                  const std::filesystem::path& out_dir) {
  const SupernetStore store = SupernetStore::open(store_dir);
  const SparsityPlan plan = read_plan_file(plan_file);
  const TransformerWeights compacted = apply_plan(dense, store, plan.indices);
  save_checkpoint(out_dir, compacted);
}

RunResult run_tyr(const RunConfig& config) {
  config.validate();
  TransformerWeights dense = load_checkpoint(config.checkpoint);
  dense.config.validate(config.ffn_group_size);
  const TokenCorpus corpus = load_corpus(config.corpus, config.sample_len);

  // Quantization warnings: the finest interval may not move a whole unit.
  for (SublayerKind kind : {SublayerKind::kMha, SublayerKind::kFfn}) {
    const int units = kind == SublayerKind::kMha
                          ? dense.config.n_heads
                          : dense.config.d_ffn / config.ffn_group_size;
    if (config.interval_at(config.iterations) * units < 0.5) {
      std::cerr << "warning: finest interval "
                << config.interval_at(config.iterations) << " cannot move a whole "
                << (kind == SublayerKind::kMha ? "head" : "FFN group")
                << " (" << units << " units); ladder points will collapse\n";
    }
  }

  std::filesystem::create_directories(config.out);
  {
    std::ofstream cf(config.out / "run_config.json", std::ios::trunc);
    cf << run_config_to_json(config);
  }

  RunResult result;
  std::vector<double> centers(
      static_cast<std::size_t>(dense.config.sublayer_count()),
      config.target_sparsity);
  std::filesystem::path last_plan_file;
  std::filesystem::path last_store_dir;

  for (int t = 1; t <= config.iterations; ++t) {
    const auto start = std::chrono::steady_clock::now();
    const std::filesystem::path store_dir =
        stage_build_supernet(config, dense, corpus, centers, t);
    const std::filesystem::path plan_file =
        config.out / (iteration_tag(t) + "_plan.json");
    const std::filesystem::path trace_file =
        config.out / (iteration_tag(t) + "_trace.jsonl");
    const StageSearchResult outcome = stage_search(
        config, dense, corpus, store_dir, t, plan_file, trace_file);
    centers = outcome.realized;
    last_plan_file = plan_file;
    last_store_dir = store_dir;

    IterationReport report;
    report.iteration = t;
    report.interval = config.interval_at(t);
    report.sublayer_sparsity = outcome.realized;
    report.first_fitness = outcome.first_fitness;
    report.final_fitness = outcome.final_fitness;
    report.generations = outcome.generations;
    report.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    report.store_bytes = directory_bytes(store_dir);
    report.trace_file = trace_file;
    report.plan_file = plan_file;
    result.iterations.push_back(std::move(report));

    if (config.gc_previous && t > 1) {
      gc_iteration(config.store_root(), iteration_tag(t));
    }
  }

  result.final_checkpoint = config.out / "final";
  stage_export(dense, last_store_dir, last_plan_file, result.final_checkpoint);
  result.final_kl = result.iterations.back().final_fitness;
  const TransformerWeights compacted = load_checkpoint(result.final_checkpoint);
  result.final_perplexity = perplexity(compacted, corpus, config.eval_seq_len);

  json rj;
  rj["target_sparsity"] = config.target_sparsity;
  rj["seed"] = config.seed;
  json its = json::array();
  for (const IterationReport& r : result.iterations) {
    its.push_back({{"iteration", r.iteration},
                   {"interval", r.interval},
                   {"sublayer_sparsity", r.sublayer_sparsity},
                   {"first_fitness", r.first_fitness},
                   {"final_fitness", r.final_fitness},
                   {"generations", r.generations},
                   {"wall_clock_s", r.wall_clock_s},
                   {"store_bytes", r.store_bytes},
                   {"trace_file", r.trace_file.string()},
                   {"plan_file", r.plan_file.string()}});
  }
  rj["iterations"] = std::move(its);
  rj["final"] = {{"checkpoint", result.final_checkpoint.string()},
                 {"kl", result.final_kl},
                 {"perplexity", result.final_perplexity}};
  std::ofstream rf(config.out / "report.json", std::ios::trunc);
  rf << rj.dump(2) << "\n";
  return result;
}

}  // namespace tyr
