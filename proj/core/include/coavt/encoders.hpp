#pragma once

// Joint audio-visual encoder, text encoder, and the query encoder that
// shares its self-attention and feed-forward weights with the text encoder.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "coavt/dataio.hpp"
#include "coavt/diffcore.hpp"

namespace coavt::model {

using diff::Tensor;

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t av_layers = 2;
  std::size_t text_layers = 2;
  std::size_t num_queries = 16;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 16;
  std::size_t proj_dim = 32;
  // input geometry
  std::size_t audio_frames = 64;
  std::size_t audio_bins = 16;
  std::size_t audio_patch = 4;
  std::size_t frame_size = 32;
  std::size_t frame_channels = 3;
  std::size_t visual_patch = 4;
  // initialization
  double init_std = 0.02;
  double tau_init = 0.07;

  void validate() const;
  std::size_t head_dim() const { return hidden / heads; }
  std::size_t audio_patch_dim() const { return audio_patch * audio_patch; }
  std::size_t audio_positions() const { return (audio_frames / audio_patch) * (audio_bins / audio_patch); }
  std::size_t visual_patch_dim() const { return visual_patch * visual_patch * frame_channels; }
  std::size_t visual_positions() const { return (frame_size / visual_patch) * (frame_size / visual_patch); }
};

struct ParameterRef {
  std::string name;
  Tensor tensor;
  bool decay = false;  // decoupled weight decay applies
};
using ParameterList = std::vector<ParameterRef>;

/// Truncated-normal (at two standard deviations) initializer.
class Initializer {
 public:
  Initializer(std::uint64_t seed, double std) : rng_(seed), std_(std) {}
  Tensor normal(diff::Shape shape);
  Tensor zeros(diff::Shape shape) { return Tensor::zeros(std::move(shape), true); }
  Tensor ones(diff::Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

 private:
  std::mt19937_64 rng_;
  double std_;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  static Linear make(Initializer& init, std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams make(Initializer& init, std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct AttentionParams {
  Linear query, key, value, output;

  static AttentionParams make(Initializer& init, std::size_t hidden);
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Pre-norm transformer layer: x + attn(norm1(x)), then h + ff(norm2(h)).
struct SharedBlock {
  LayerNormParams norm1;
  AttentionParams self_attn;
  LayerNormParams norm2;
  Linear ff_in, ff_out;

  static SharedBlock make(Initializer& init, std::size_t hidden);
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct CrossAttentionParams {
  LayerNormParams norm;
  AttentionParams attn;

  static CrossAttentionParams make(Initializer& init, std::size_t hidden);
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// The query path's view of one layer: the text layer plus its cross-attention.
struct QueryBlockView {
  const SharedBlock& shared;
  const CrossAttentionParams& cross;
};

/// Multi-head scaled dot-product attention of `x` over `context`, both (B, n, C).
Tensor multi_head_attention(const AttentionParams& p, const Tensor& x, const Tensor& context, std::size_t heads,
                            const diff::AttentionMask* mask);

enum class Condition : std::uint8_t { kA, kV, kAV };
const char* condition_name(Condition c);
Condition condition_from_name(const std::string& name);

enum class Provenance : std::uint8_t {
  kAudioEncoder,
  kVisualEncoder,
  kJointAudio,
  kJointVisual,
  kJointAudioVisual,
  kTextEncoder,
};

/// (B, n, C) embeddings tagged with the pass that produced them.
struct EmbeddingSequence {
  Tensor vectors;
  Provenance provenance = Provenance::kAudioEncoder;

  std::size_t batch() const { return vectors.extent(0); }
  std::size_t length() const { return vectors.extent(1); }
};

struct JointOutputs {
  EmbeddingSequence audio;         // E_A
  EmbeddingSequence visual;        // E_V
  EmbeddingSequence audio_visual;  // E_AV

  const EmbeddingSequence& of(Condition c) const;
};

struct TextOutputs {
  Tensor cls;  // (B, C)
  EmbeddingSequence tokens;
};

enum class QueryMode : std::uint8_t { kExtract, kMatch, kGenerate };

struct QueryBlockOutput {
  Tensor outputs;  // (B, N_q, C)
  Condition conditioning = Condition::kAV;
};

struct QueryForwardResult {
  QueryBlockOutput queries;
  Tensor text;    // (B, T, C) for match/generate
  Tensor logits;  // (B, T, V) for generate
};

class Encoders {
 public:
  Encoders(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  EmbeddingSequence encode_audio(const data::PatchBatch& patches) const;
  EmbeddingSequence encode_visual(const data::PatchBatch& patches) const;
  /// One pass of the shared joint layer over a single-modality stream.
  EmbeddingSequence joint_single(const EmbeddingSequence& stream) const;
  /// Three independent passes: audio, visual, and their concatenation.
  JointOutputs joint_forward(const EmbeddingSequence& audio, const EmbeddingSequence& visual) const;
  /// The concatenated pass alone (E_AV).
  EmbeddingSequence joint_pair(const EmbeddingSequence& audio, const EmbeddingSequence& visual) const;
  /// Encoders plus joint layer for one conditioning; only the needed inputs are read.
  EmbeddingSequence condition(Condition c, const data::PatchBatch* audio, const data::PatchBatch* visual) const;
  /// Bidirectional encoding; [PAD] keys are masked out. Rows must start with [CLS].
  TextOutputs encode_text(const data::TokenBatch& tokens) const;
  /// extract: queries only. match: queries + `text` with a full mask.
  /// generate: queries + `text` (decoder inputs) with the multimodal causal
  /// mask, plus tied-projection logits over the vocabulary.
  QueryForwardResult query_forward(const EmbeddingSequence& cond, QueryMode mode,
                                   const data::TokenBatch* text = nullptr) const;

  const SharedBlock& text_block(std::size_t i) const { return text_blocks_.at(i); }
  QueryBlockView query_block(std::size_t i) const { return {text_blocks_.at(i), cross_.at(i)}; }
  const Tensor& query_embeddings() const { return queries_; }
  const Tensor& token_embeddings() const { return token_embed_; }

  void collect(ParameterList& out) const;

 private:
  struct PatchEncoder {
    Linear patch;
    Tensor positions;
    std::vector<SharedBlock> blocks;
  };

  EmbeddingSequence encode_patches(const PatchEncoder& enc, const data::PatchBatch& patches,
                                   data::Modality expected, Provenance provenance) const;
  Tensor run_block(const SharedBlock& block, const CrossAttentionParams* cross, const Tensor& x, const Tensor* cond,
                   std::size_t query_rows, const diff::AttentionMask* mask) const;
  Tensor embed_text(const data::TokenBatch& tokens) const;

  ModelConfig cfg_;
  PatchEncoder audio_;
  PatchEncoder visual_;
  SharedBlock joint_block_;
  Tensor type_audio_;
  Tensor type_visual_;
  LayerNormParams joint_norm_;
  Tensor token_embed_;
  Tensor text_positions_;
  LayerNormParams embed_norm_;
  std::vector<SharedBlock> text_blocks_;
  LayerNormParams text_norm_;
  Tensor queries_;
  std::vector<CrossAttentionParams> cross_;
};

}  // namespace coavt::model
