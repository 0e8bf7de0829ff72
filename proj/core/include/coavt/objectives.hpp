#pragma once

// Per-pair contrastive, matching, and language-modeling losses, summed per
// pair and over the (AV, A, V) pairs.

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "coavt/dataio.hpp"
#include "coavt/encoders.hpp"

namespace coavt::objectives {

using model::Condition;
using model::Tensor;

/// g_q and g_t: linear maps into a shared unit-normalized space.
struct ProjectionHead {
  model::Linear query;
  model::Linear text;

  static ProjectionHead make(model::Initializer& init, std::size_t hidden, std::size_t proj_dim);
  /// (B, N_q, C) -> (B, N_q, d), rows unit length.
  Tensor project_queries(const Tensor& queries) const;
  /// (B, C) -> (B, d), rows unit length.
  Tensor project_text(const Tensor& cls) const;
};

/// Learnable temperature, tau = exp(log_tau).
struct ContrastiveHead {
  Tensor log_tau;

  static ContrastiveHead make(double tau_init);
  double tau() const;
};

/// Two-class classifier applied to every query row independently.
/// Class 1 means "matched".
struct MatchingHead {
  model::Linear classifier;

  static MatchingHead make(model::Initializer& init, std::size_t hidden);
  Tensor logits(const Tensor& queries) const;
};

struct PretrainHeads {
  ProjectionHead projection;
  ContrastiveHead contrastive;
  MatchingHead matching;

  static PretrainHeads make(const model::ModelConfig& cfg, std::uint64_t seed);
  void collect(model::ParameterList& out) const;
};

/// s(X_i, T_j) for every pair: max over queries of the projected cosine.
/// Returns (B_x, B_t).
Tensor similarity_matrix(const model::QueryBlockOutput& qx, const Tensor& t_cls, const ProjectionHead& head);
/// Single pair; `t_cls` is (C) or (1, C) and `qx` holds one item.
double similarity(const model::QueryBlockOutput& qx, const Tensor& t_cls, const ProjectionHead& head);

struct ContrastiveTerms {
  Tensor x_to_text;
  Tensor text_to_x;
  Tensor loss;  // mean of the two directions
};

ContrastiveTerms contrastive_loss(const Tensor& sim, const ContrastiveHead& head);
ContrastiveTerms contrastive_loss(const Tensor& sim, double tau);

/// Mean over rows and queries of the two-class cross-entropy.
/// `logits` is (N, N_q, 2); `labels` holds N values in {0, 1}.
Tensor matching_loss(const Tensor& logits, std::span<const std::size_t> labels);
Tensor matching_loss(const model::QueryBlockOutput& match_out, const MatchingHead& head,
                     std::span<const std::size_t> labels);
/// Mean matched-class probability over queries, per batch row.
std::vector<double> matching_scores(const model::QueryBlockOutput& match_out, const MatchingHead& head);

/// Decoder inputs ([BOS] + caption without [CLS], last position dropped) and
/// next-token targets; targets equal to [PAD] are ignored.
struct LmInputs {
  data::TokenBatch decoder_input;
  std::vector<std::size_t> targets;
};
LmInputs make_lm_inputs(const data::TokenBatch& captions);

/// Mean next-token cross-entropy over non-[PAD] targets of (B, L, V) logits.
Tensor lm_loss(const Tensor& logits, std::span<const std::size_t> targets);

struct PairTerms {
  double xtc = 0.0;
  double xtm = 0.0;
  double xlm = 0.0;
  double total() const { return xtc + xtm + xlm; }
  bool operator==(const PairTerms&) const = default;
};

struct LossReport {
  std::size_t step = 0;
  PairTerms av;
  PairTerms a;
  PairTerms v;
  double total = 0.0;
  double tau = 0.0;

  const PairTerms& pair(Condition c) const;
  PairTerms& pair(Condition c);
  double sum_of_terms() const;
  /// One JSON object, no trailing newline.
  std::string to_json() const;
  static LossReport from_json(const std::string& line);
  bool operator==(const LossReport&) const = default;
};

struct LossOptions {
  bool pair_a = true;
  bool pair_v = true;
  bool matching = true;
  bool lm = true;
};

struct Batch {
  data::PatchBatch audio;
  data::PatchBatch visual;
  data::TokenBatch captions;
  std::size_t size() const { return captions.batch; }
};

/// One in-batch negative text and one negative condition per item, drawn
/// uniformly from the other B - 1 items. Empty for B < 2.
struct NegativeSample {
  std::vector<std::size_t> text;
  std::vector<std::size_t> cond;
};
NegativeSample sample_negatives(std::size_t batch, std::mt19937_64& rng);

struct PairLoss {
  Tensor xtc;
  Tensor xtm;  // undefined when matching is disabled
  Tensor xlm;  // undefined when language modeling is disabled
  Tensor total;
  PairTerms terms() const;
};

/// Everything the three pair losses share within one step.
struct EncodedBatch {
  model::JointOutputs joint;
  model::TextOutputs text;
  data::TokenBatch captions;
  LmInputs lm;
};

EncodedBatch encode_batch(const model::Encoders& enc, const Batch& batch);

PairLoss pair_loss(Condition pair, const model::Encoders& enc, const PretrainHeads& heads, const EncodedBatch& encoded,
                   const NegativeSample& negatives, const LossOptions& options);

struct TotalLoss {
  Tensor total;
  LossReport report;
};

/// L_AV + L_A + L_V, with pairs switched off by `options` reported as zeros.
TotalLoss total_loss(const model::Encoders& enc, const PretrainHeads& heads, const Batch& batch,
                     const LossOptions& options, std::mt19937_64& rng);

}  // namespace coavt::objectives
