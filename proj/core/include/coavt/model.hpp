#pragma once

// The full trainable model: encoders, pre-training heads, and any attached
// classification heads.

#include <cstdint>
#include <map>

#include "coavt/encoders.hpp"
#include "coavt/objectives.hpp"

namespace coavt::model {

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return encoders_.config(); }
  const Encoders& encoders() const { return encoders_; }
  const objectives::PretrainHeads& heads() const { return heads_; }

  /// Fresh randomly initialized C -> classes head over mean-pooled Q_X.
  /// Replaces an existing head for the same conditioning.
  void add_classifier(Condition c, std::size_t classes, std::uint64_t seed);
  bool has_classifier(Condition c) const { return classifiers_.contains(c); }
  /// Throws ContractError when no head is attached for `c`.
  const Linear& classifier(Condition c) const;

  /// (B, K) class logits for conditioning `c`.
  Tensor classify_logits(Condition c, const data::PatchBatch* audio, const data::PatchBatch* visual) const;

  /// Every learnable tensor exactly once, in a stable order.
  ParameterList parameters() const;

 private:
  Encoders encoders_;
  objectives::PretrainHeads heads_;
  std::map<Condition, Linear> classifiers_;
};

}  // namespace coavt::model
