#pragma once

#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

#include <cstdint>
#include <fstream>

namespace testutil {

// A small world plus a model trained to memorize it, built once and shared
// across test cases (training takes a few seconds).
struct TinyLab {
  factlab::corpus::SyntheticWorld world;
  factlab::model::TransformerWeights weights;
  factlab::corpus::RecallReport recall;
};

inline const TinyLab& tiny_lab() {
  static const TinyLab lab = [] {
    using namespace factlab;
    TinyLab out;
    out.world = corpus::generate_world(/*seed=*/7, /*n_subjects=*/10, /*n_relations=*/4,
                                       /*objects_per_relation=*/6);
    model::ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 32;
    cfg.inner_dim = 64;
    cfg.num_heads = 2;
    cfg.vocab_size = out.world.tokenizer.vocab_size();
    cfg.max_seq_len = 24;
    out.weights = model::TransformerWeights::random_init(cfg, 7);
    corpus::TrainConfig tc;
    tc.max_epochs = 800;
    tc.target_recall = 1.0;
    tc.learning_rate = 2e-3;
    tc.batch_size = 16;
    tc.eval_every = 25;
    tc.seed = 7;
    out.recall = corpus::train_to_memorize(out.weights, out.world, tc);
    return out;
  }();
  return lab;
}

inline std::uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace testutil
