// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// tyr-make-toy: generates a seeded toy checkpoint plus calibration and
// held-out corpora, so the pipeline can be exercised without real weights.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tyr/checkpoint.hpp"
#include "tyr/toygen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate a toy checkpoint and token corpora"};
  std::string out = "toy_ckpt";
  std::string corpus = "corpus.bin";
  std::string holdout;
  long tokens = 131072;
  long holdout_tokens = 32768;
  std::string mode = "sampled";
  int segment_len = 256;
  std::uint64_t seed = 1;
  tyr::ModelConfig config = tyr::toy_config();
  app.add_option("--out", out, "checkpoint directory");
  app.add_option("--corpus", corpus, "calibration corpus path (.bin)");
  app.add_option("--holdout", holdout, "optional held-out corpus path");
  app.add_option("--tokens", tokens, "calibration corpus size");
  app.add_option("--holdout-tokens", holdout_tokens);
  app.add_option("--mode", mode,
                 "corpus source: sampled (from the model) or uniform");
  app.add_option("--segment-len", segment_len, "sampled segment length");
  app.add_option("--seed", seed);
  app.add_option("--layers", config.n_layers);
  app.add_option("--d-model", config.d_model);
  app.add_option("--heads", config.n_heads);
  app.add_option("--d-ffn", config.d_ffn);
  app.add_option("--vocab", config.vocab_size);
  app.add_option("--max-seq", config.max_seq_len);

  try {
    app.parse(argc, argv);
    config.head_dim = config.d_model / config.n_heads;
    config.validate();

    const tyr::TransformerWeights model = tyr::make_toy_model(config, seed);
    tyr::save_checkpoint(out, model);
    auto make = [&](long n, std::uint64_t s) {
      if (mode == "sampled") {
        return tyr::sample_corpus_from_model(model, n, segment_len, s);
      }
      if (mode == "uniform") {
        return tyr::make_toy_corpus(n, config.vocab_size, segment_len, s);
      }
      throw tyr::InputError("--mode must be sampled or uniform");
    };
    tyr::write_corpus_bin(corpus, make(tokens, seed));
    if (!holdout.empty()) {
      tyr::write_corpus_bin(
          holdout, make(holdout_tokens, tyr::derive_seed(seed, {0x686f6c64ULL})));
    }
    nlohmann::json summary;
    summary["checkpoint"] = out;
    summary["corpus"] = corpus;
    if (!holdout.empty()) summary["holdout"] = holdout;
    summary["seed"] = seed;
    std::cout << summary.dump() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = {{"type", "error"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 2;
  }
}
