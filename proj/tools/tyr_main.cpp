// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// tyr: structural pruning for small decoder-only transformer checkpoints.
//
//   tyr run             iterative prune-and-search, end to end
//   tyr prune-local     one-shot isotropic local pruning (no search)
//   tyr build-supernet  build one iteration's supernet store
//   tyr search          evolutionary sparsity search over a store
//   tyr eval            perplexity / KL report for a checkpoint
//   tyr export          compact a plan into a standalone checkpoint
//
// Errors are reported as one JSON object on stderr and a nonzero exit code.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tyr/checkpoint.hpp"
#include "tyr/orchestrator.hpp"
#include "tyr/toygen.hpp"

namespace {

using nlohmann::json;

std::vector<tyr::SearchStage> parse_stages(const std::string& text) {
  // "32:2048,8:8192,2:16384" -> [(32, 2048), (8, 8192), (2, 16384)]
  std::vector<tyr::SearchStage> stages;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw tyr::InputError("bad --stages entry '" + item +
                            "', expected survivors:budget");
    }
    stages.push_back({std::stoi(item.substr(0, colon)),
                      std::stol(item.substr(colon + 1))});
  }
  return stages;
}

int cmd_eval(const std::filesystem::path& model_dir,
             const std::filesystem::path& corpus_path,
             const std::optional<std::filesystem::path>& dense_dir,
             int seq_len, std::uint64_t seed) {
  const tyr::TransformerWeights model = tyr::load_checkpoint(model_dir);
  const tyr::TokenCorpus corpus = tyr::load_corpus(corpus_path, seq_len);
  const double ppl = tyr::perplexity(model, corpus, seq_len);

  json report;
  report["perplexity"] = ppl;
  report["kl"] = nullptr;
  if (dense_dir.has_value()) {
    const tyr::TransformerWeights dense = tyr::load_checkpoint(*dense_dir);
    double kl_sum = 0.0;
    const long windows = corpus.size() / seq_len;
    for (long s = 0; s < windows; ++s) {
      const std::span<const std::int32_t> tokens(
          corpus.ids.data() + s * seq_len, static_cast<std::size_t>(seq_len));
      kl_sum += tyr::kl_to_dense(tyr::forward(dense, tokens).logits,
                                 tyr::forward(model, tokens).logits);
    }
    report["kl"] = kl_sum / static_cast<double>(windows);
  }
  report["tokens"] = (corpus.size() / seq_len) * seq_len;
  report["seed"] = seed;
  std::cout << report.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tyr: supernet-based structural pruning for small "
               "decoder-only transformers"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "iterative prune-and-search");
  std::string run_config_path;
  run->add_option("--config", run_config_path, "run config JSON")->required();
  std::string run_ckpt, run_corpus, run_out, run_accum, run_metric;
  std::uint64_t run_seed = 0;
  double run_target = 0.0, run_interval = 0.0;
  int run_iters = 0, run_ladder = 0;
  run->add_option("--model", run_ckpt, "dense checkpoint directory");
  run->add_option("--corpus", run_corpus, "token corpus file");
  run->add_option("--out", run_out, "output directory");
  run->add_option("--seed", run_seed, "master seed");
  run->add_option("--target-sparsity", run_target, "overall sparsity target");
  run->add_option("--iterations", run_iters, "prune-and-search iterations");
  run->add_option("--interval", run_interval, "initial sparsity interval");
  run->add_option("--ladder-size", run_ladder, "structures per sublayer");
  run->add_option("--error-accum", run_accum,
                  "expectation|none|random|uniform");
  run->add_option("--metric", run_metric, "kl-logits|kl-hidden");

  // prune-local
  auto* pl = app.add_subcommand("prune-local",
                                "isotropic progressive local pruning");
  std::string pl_model, pl_corpus, pl_out, pl_accum = "expectation";
  double pl_sparsity = 0.5, pl_lambda = 0.01;
  int pl_sample_len = 256, pl_group = 16;
  long pl_calib = 65536;
  std::uint64_t pl_seed = 0;
  pl->add_option("--model", pl_model)->required();
  pl->add_option("--corpus", pl_corpus)->required();
  pl->add_option("--out", pl_out)->required();
  pl->add_option("--target-sparsity", pl_sparsity, "uniform sparsity");
  pl->add_option("--calib-tokens", pl_calib);
  pl->add_option("--sample-len", pl_sample_len);
  pl->add_option("--lambda-frac", pl_lambda);
  pl->add_option("--ffn-group-size", pl_group);
  pl->add_option("--seed", pl_seed);
  pl->add_option("--error-accum", pl_accum);

  // build-supernet
  auto* bs = app.add_subcommand("build-supernet",
                                "build one iteration's supernet store");
  std::string bs_model, bs_corpus, bs_out, bs_accum = "expectation",
              bs_centers;
  double bs_target = 0.5, bs_interval = 0.125, bs_lambda = 0.01;
  int bs_ladder = 9, bs_sample_len = 256, bs_group = 16;
  long bs_calib = 65536;
  std::uint64_t bs_seed = 0;
  bs->add_option("--model", bs_model)->required();
  bs->add_option("--corpus", bs_corpus)->required();
  bs->add_option("--out", bs_out, "iteration directory, e.g. store/iter_1")
      ->required();
  bs->add_option("--target-sparsity", bs_target, "uniform ladder centers");
  bs->add_option("--centers", bs_centers,
                 "plan JSON whose realized sparsities become the centers");
  bs->add_option("--interval", bs_interval);
  bs->add_option("--ladder-size", bs_ladder);
  bs->add_option("--error-accum", bs_accum);
  bs->add_option("--calib-tokens", bs_calib);
  bs->add_option("--sample-len", bs_sample_len);
  bs->add_option("--lambda-frac", bs_lambda);
  bs->add_option("--ffn-group-size", bs_group);
  bs->add_option("--seed", bs_seed);

  // search
  auto* se = app.add_subcommand("search",
                                "evolutionary sparsity search over a store");
  std::string se_model, se_corpus, se_store, se_out, se_trace,
      se_metric = "kl-logits", se_stages = "32:2048,8:8192,2:16384";
  double se_target = 0.5;
  int se_generations = 50, se_offspring = 32, se_sample_len = 256;
  std::uint64_t se_seed = 0;
  se->add_option("--model", se_model)->required();
  se->add_option("--corpus", se_corpus)->required();
  se->add_option("--store", se_store, "iteration directory")->required();
  se->add_option("--out", se_out, "winning plan JSON path")->required();
  se->add_option("--trace", se_trace, "trace JSONL path");
  se->add_option("--target-sparsity", se_target);
  se->add_option("--generations", se_generations);
  se->add_option("--offspring", se_offspring);
  se->add_option("--stages", se_stages, "survivors:budget[,...]");
  se->add_option("--metric", se_metric);
  se->add_option("--sample-len", se_sample_len);
  se->add_option("--seed", se_seed);

  // eval
  auto* ev = app.add_subcommand("eval", "perplexity / KL report");
  std::string ev_model, ev_corpus, ev_dense;
  int ev_seq_len = 256;
  std::uint64_t ev_seed = 0;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--corpus", ev_corpus)->required();
  ev->add_option("--dense", ev_dense, "dense reference for the KL term");
  ev->add_option("--seq-len", ev_seq_len);
  ev->add_option("--seed", ev_seed);

  // export
  auto* ex = app.add_subcommand("export", "compact a plan into a checkpoint");
  std::string ex_model, ex_store, ex_plan, ex_out;
  ex->add_option("--model", ex_model)->required();
  ex->add_option("--store", ex_store)->required();
  ex->add_option("--plan", ex_plan)->required();
  ex->add_option("--out", ex_out)->required();

  try {
    app.parse(argc, argv);

    if (*run) {
      tyr::RunConfig cfg = tyr::parse_run_config(run_config_path);
      if (run->count("--model")) cfg.checkpoint = run_ckpt;
      if (run->count("--corpus")) cfg.corpus = run_corpus;
      if (run->count("--out")) cfg.out = run_out;
      if (run->count("--seed")) cfg.seed = run_seed;
      if (run->count("--target-sparsity")) cfg.target_sparsity = run_target;
      if (run->count("--iterations")) cfg.iterations = run_iters;
      if (run->count("--interval")) cfg.initial_interval = run_interval;
      if (run->count("--ladder-size")) cfg.ladder_size = run_ladder;
      if (run->count("--error-accum")) {
        cfg.error_accum = tyr::error_accum_from_string(run_accum);
      }
      if (run->count("--metric")) cfg.metric = tyr::metric_from_string(run_metric);
      const tyr::RunResult result = tyr::run_tyr(cfg);
      json summary;
      summary["final_checkpoint"] = result.final_checkpoint.string();
      summary["final_kl"] = result.final_kl;
      summary["final_perplexity"] = result.final_perplexity;
      summary["iterations"] = result.iterations.size();
      std::cout << summary.dump() << "\n";
      return 0;
    }

    if (*pl) {
      const tyr::TransformerWeights dense = tyr::load_checkpoint(pl_model);
      dense.config.validate(pl_group);
      const tyr::TokenCorpus corpus = tyr::load_corpus(pl_corpus, pl_sample_len);
      const auto batches = tyr::sample_batches(
          corpus, pl_calib, tyr::derive_seed(pl_seed, {0x63616c6962ULL}));
      std::vector<tyr::SparsityLadder> ladders;
      for (int sub = 0; sub < dense.config.sublayer_count(); ++sub) {
        const tyr::SublayerId id = tyr::sublayer_from_index(sub);
        const int units = id.kind == tyr::SublayerKind::kMha
                              ? dense.config.n_heads
                              : dense.config.d_ffn / pl_group;
        ladders.push_back(tyr::generate_ladder(pl_sparsity, 0.125, 1, units));
      }
      const std::filesystem::path store_dir =
          std::filesystem::path(pl_out) / "supernet" / "iter_1";
      const tyr::SupernetStore store = tyr::build_supernet(
          dense, batches, ladders, pl_group, pl_lambda, store_dir,
          tyr::error_accum_from_string(pl_accum), pl_seed);
      const std::vector<int> plan(dense.config.sublayer_count(), 0);
      tyr::save_checkpoint(std::filesystem::path(pl_out) / "final",
                           tyr::apply_plan(dense, store, plan));
      json summary;
      summary["final_checkpoint"] = (std::filesystem::path(pl_out) / "final").string();
      summary["store"] = store_dir.string();
      std::cout << summary.dump() << "\n";
      return 0;
    }

    if (*bs) {
      const tyr::TransformerWeights dense = tyr::load_checkpoint(bs_model);
      dense.config.validate(bs_group);
      const tyr::TokenCorpus corpus = tyr::load_corpus(bs_corpus, bs_sample_len);
      const auto batches = tyr::sample_batches(
          corpus, bs_calib, tyr::derive_seed(bs_seed, {0x63616c6962ULL}));
      std::vector<double> centers(
          static_cast<std::size_t>(dense.config.sublayer_count()), bs_target);
      if (!bs_centers.empty()) {
        std::ifstream in(bs_centers);
        if (!in) throw tyr::InputError("cannot open " + bs_centers);
        const json pj = json::parse(in);
        centers.clear();
        for (const json& sub : pj.at("sublayers")) {
          centers.push_back(sub.at("realized_sparsity").get<double>());
        }
      }
      if (static_cast<int>(centers.size()) != dense.config.sublayer_count()) {
        throw tyr::InputError("--centers does not cover every sublayer");
      }
      std::vector<tyr::SparsityLadder> ladders;
      for (int sub = 0; sub < dense.config.sublayer_count(); ++sub) {
        const tyr::SublayerId id = tyr::sublayer_from_index(sub);
        const int units = id.kind == tyr::SublayerKind::kMha
                              ? dense.config.n_heads
                              : dense.config.d_ffn / bs_group;
        ladders.push_back(tyr::generate_ladder(
            centers[static_cast<std::size_t>(sub)], bs_interval, bs_ladder,
            units));
      }
      tyr::build_supernet(dense, batches, ladders, bs_group, bs_lambda, bs_out,
                          tyr::error_accum_from_string(bs_accum), bs_seed);
      json summary;
      summary["store"] = bs_out;
      std::cout << summary.dump() << "\n";
      return 0;
    }

    if (*se) {
      const tyr::TransformerWeights dense = tyr::load_checkpoint(se_model);
      const tyr::TokenCorpus corpus = tyr::load_corpus(se_corpus, se_sample_len);
      tyr::RunConfig cfg;
      cfg.checkpoint = se_model;
      cfg.corpus = se_corpus;
      cfg.target_sparsity = se_target;
      cfg.sample_len = se_sample_len;
      cfg.metric = tyr::metric_from_string(se_metric);
      cfg.seed = se_seed;
      cfg.search.generations = se_generations;
      cfg.search.offspring = se_offspring;
      cfg.search.stages = parse_stages(se_stages);
      const std::filesystem::path trace_path =
          se_trace.empty() ? std::filesystem::path(se_out).replace_extension(
                                 ".trace.jsonl")
                           : std::filesystem::path(se_trace);
      const tyr::StageSearchResult result = tyr::stage_search(
          cfg, dense, corpus, se_store, 1, se_out, trace_path);
      json summary;
      summary["plan"] = se_out;
      summary["trace"] = trace_path.string();
      summary["first_fitness"] = result.first_fitness;
      summary["final_fitness"] = result.final_fitness;
      std::cout << summary.dump() << "\n";
      return 0;
    }

    if (*ev) {
      std::optional<std::filesystem::path> dense;
      if (!ev_dense.empty()) dense = ev_dense;
      return cmd_eval(ev_model, ev_corpus, dense, ev_seq_len, ev_seed);
    }

    if (*ex) {
      const tyr::TransformerWeights dense = tyr::load_checkpoint(ex_model);
      tyr::stage_export(dense, ex_store, ex_plan, ex_out);
      json summary;
      summary["checkpoint"] = ex_out;
      std::cout << summary.dump() << "\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    json err;
    err["error"] = {{"type", "usage_error"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const tyr::Error& e) {
    json err;
    err["error"] = {{"type", e.kind()}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    json err;
    err["error"] = {{"type", "internal_error"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 3;
  }
  return 0;
}
