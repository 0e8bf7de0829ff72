#pragma once

// Small corpora and models shared by the unit tests.

#include <numeric>
#include <random>
#include <vector>

#include "coavt/dataio.hpp"
#include "coavt/encoders.hpp"
#include "coavt/trainer.hpp"

namespace coavt::testing_support {

inline data::CorpusConfig micro_corpus_config(std::uint64_t seed = 1) {
  data::CorpusConfig cfg;
  cfg.n_train = 16;
  cfg.n_test = 8;
  cfg.n_classes = 4;
  cfg.latent_dim = 6;
  cfg.attribute_tokens_per_item = 2;
  cfg.vocab_size = 24;
  cfg.audio_frames = 16;
  cfg.audio_bins = 8;
  cfg.frame_size = 8;
  cfg.frames_per_video = 3;
  cfg.seed = seed;
  return cfg;
}

inline model::ModelConfig micro_model_config() {
  model::ModelConfig cfg;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.av_layers = 1;
  cfg.text_layers = 1;
  cfg.num_queries = 4;
  cfg.vocab_size = 24;
  cfg.max_text_len = 8;
  cfg.proj_dim = 8;
  cfg.audio_frames = 16;
  cfg.audio_bins = 8;
  cfg.audio_patch = 4;
  cfg.frame_size = 8;
  cfg.visual_patch = 4;
  return cfg;
}

inline train::TrainConfig micro_train_config() {
  train::TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.peak_lr = 1e-3;
  cfg.seed = 3;
  return cfg;
}

inline const data::Corpus& micro_corpus() {
  static const data::Corpus corpus = data::generate_corpus(micro_corpus_config());
  return corpus;
}

inline objectives::Batch micro_batch(std::size_t n, const model::ModelConfig& mcfg, std::uint64_t seed = 0) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  return train::make_batch(micro_corpus().train, idx, mcfg, train::FrameChoice::kCentral, 0.0, 0.0, rng);
}

}  // namespace coavt::testing_support
