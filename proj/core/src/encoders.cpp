#include "coavt/encoders.hpp"

#include <cmath>
#include <numeric>

namespace coavt::model {

using diff::AttentionMask;
using diff::Shape;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("model config: " + what); };
  if (hidden == 0 || heads == 0 || hidden % heads != 0) fail("hidden size must be a positive multiple of heads");
  if (av_layers == 0 || text_layers == 0) fail("layer counts must be positive");
  if (num_queries == 0) fail("num_queries must be positive");
  if (vocab_size <= data::tokens::kFirstFree) fail("vocab_size must exceed the special tokens");
  if (max_text_len < 2) fail("max_text_len must be at least 2");
  if (proj_dim == 0) fail("proj_dim must be positive");
  if (audio_patch == 0 || audio_frames % audio_patch != 0 || audio_bins % audio_patch != 0)
    fail("audio extents must be divisible by audio_patch");
  if (visual_patch == 0 || frame_size % visual_patch != 0) fail("frame_size must be divisible by visual_patch");
  if (frame_channels != 1 && frame_channels != 3) fail("frame_channels must be 1 or 3");
  if (!(init_std > 0.0) || !(tau_init > 0.0)) fail("init_std and tau_init must be positive");
}

Tensor Initializer::normal(Shape shape) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(diff::numel(shape));
  for (double& x : v) {
    double z = dist(rng_);
    while (std::abs(z) > 2.0) z = dist(rng_);
    x = z * std_;
  }
  return Tensor::parameter(std::move(shape), std::move(v));
}

Linear Linear::make(Initializer& init, std::size_t in, std::size_t out) { return {init.normal({in, out}), init.zeros({out})}; }

Tensor Linear::operator()(const Tensor& x) const { return diff::add(diff::matmul(x, weight), bias); }

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

LayerNormParams LayerNormParams::make(Initializer& init, std::size_t dim) { return {init.ones({dim}), init.zeros({dim})}; }

Tensor LayerNormParams::operator()(const Tensor& x) const { return diff::layer_norm(x, gain, bias); }

void LayerNormParams::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain, false});
  out.push_back({prefix + ".bias", bias, false});
}

AttentionParams AttentionParams::make(Initializer& init, std::size_t hidden) {
  AttentionParams p;
  p.query = Linear::make(init, hidden, hidden);
  p.key = Linear::make(init, hidden, hidden);
  p.value = Linear::make(init, hidden, hidden);
  p.output = Linear::make(init, hidden, hidden);
  return p;
}

void AttentionParams::collect(ParameterList& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

SharedBlock SharedBlock::make(Initializer& init, std::size_t hidden) {
  SharedBlock b;
  b.norm1 = LayerNormParams::make(init, hidden);
  b.self_attn = AttentionParams::make(init, hidden);
  b.norm2 = LayerNormParams::make(init, hidden);
  b.ff_in = Linear::make(init, hidden, 4 * hidden);
  b.ff_out = Linear::make(init, 4 * hidden, hidden);
  return b;
}

void SharedBlock::collect(ParameterList& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  self_attn.collect(out, prefix + ".attn");
  norm2.collect(out, prefix + ".norm2");
  ff_in.collect(out, prefix + ".ff_in");
  ff_out.collect(out, prefix + ".ff_out");
}

CrossAttentionParams CrossAttentionParams::make(Initializer& init, std::size_t hidden) {
  return {LayerNormParams::make(init, hidden), AttentionParams::make(init, hidden)};
}

void CrossAttentionParams::collect(ParameterList& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  attn.collect(out, prefix + ".attn");
}

namespace {

/// (B, n, C) -> (B, H, n, C/H)
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.extent(0), n = x.extent(1), c = x.extent(2);
  static constexpr std::size_t kAxes[] = {0, 2, 1, 3};
  return diff::permute(diff::reshape(x, {b, n, heads, c / heads}), kAxes);
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.extent(0), h = x.extent(1), n = x.extent(2), d = x.extent(3);
  static constexpr std::size_t kAxes[] = {0, 2, 1, 3};
  return diff::reshape(diff::permute(x, kAxes), {b, n, h * d});
}

std::vector<std::size_t> repeated_range(std::size_t batch, std::size_t n) {
  std::vector<std::size_t> ids(batch * n);
  for (std::size_t b = 0; b < batch; ++b) std::iota(ids.begin() + static_cast<std::ptrdiff_t>(b * n),
                                                    ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * n), 0);
  return ids;
}

bool is_pad(const data::TokenBatch& t, std::size_t b, std::size_t j) { return t.ids[b * t.length + j] == data::tokens::kPad; }

AttentionMask padding_mask(const data::TokenBatch& t, std::size_t prefix) {
  const std::size_t n = prefix + t.length;
  AttentionMask m{{t.batch, n, n}, std::vector<std::uint8_t>(t.batch * n * n, 0)};
  for (std::size_t b = 0; b < t.batch; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = prefix; j < n; ++j) m.blocked[(b * n + i) * n + j] = is_pad(t, b, j - prefix);
  return m;
}

/// Queries see only queries; text position i sees all queries and text <= i.
AttentionMask multimodal_causal_mask(const data::TokenBatch& t, std::size_t queries) {
  const std::size_t n = queries + t.length;
  AttentionMask m{{t.batch, n, n}, std::vector<std::uint8_t>(t.batch * n * n, 0)};
  for (std::size_t b = 0; b < t.batch; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = queries; j < n; ++j) {
        const bool blocked = i < queries || j > i || is_pad(t, b, j - queries);
        m.blocked[(b * n + i) * n + j] = blocked;
      }
  return m;
}

}  // namespace

Tensor multi_head_attention(const AttentionParams& p, const Tensor& x, const Tensor& context, std::size_t heads,
                            const AttentionMask* mask) {
  const Tensor q = split_heads(p.query(x), heads);
  const Tensor k = split_heads(p.key(context), heads);
  const Tensor v = split_heads(p.value(context), heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.extent(-1)));
  Tensor scores = diff::scale(diff::matmul(q, k, diff::Transpose::kRhs), scale);
  if (mask) scores = diff::masked_fill(scores, *mask);
  const Tensor ctx = diff::matmul(diff::softmax(scores), v);
  return p.output(merge_heads(ctx));
}

const char* condition_name(Condition c) {
  switch (c) {
    case Condition::kA: return "a";
    case Condition::kV: return "v";
    case Condition::kAV: return "av";
  }
  return "?";
}

Condition condition_from_name(const std::string& name) {
  if (name == "a" || name == "A") return Condition::kA;
  if (name == "v" || name == "V") return Condition::kV;
  if (name == "av" || name == "AV") return Condition::kAV;
  throw ContractError("unknown modality '" + name + "' (expected a, v, or av)");
}

const EmbeddingSequence& JointOutputs::of(Condition c) const {
  switch (c) {
    case Condition::kA: return audio;
    case Condition::kV: return visual;
    case Condition::kAV: return audio_visual;
  }
  throw ContractError("unknown condition");
}

// ---------------------------------------------------------------------------

Encoders::Encoders(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(seed, cfg.init_std);
  const std::size_t c = cfg.hidden;
  auto make_patch_encoder = [&](std::size_t patch_dim, std::size_t positions) {
    PatchEncoder enc;
    enc.patch = Linear::make(init, patch_dim, c);
    enc.positions = init.normal({positions, c});
    for (std::size_t i = 0; i < cfg.av_layers; ++i) enc.blocks.push_back(SharedBlock::make(init, c));
    return enc;
  };
  audio_ = make_patch_encoder(cfg.audio_patch_dim(), cfg.audio_positions());
  visual_ = make_patch_encoder(cfg.visual_patch_dim(), cfg.visual_positions());
  joint_block_ = SharedBlock::make(init, c);
  type_audio_ = init.normal({c});
  type_visual_ = init.normal({c});
  joint_norm_ = LayerNormParams::make(init, c);
  token_embed_ = init.normal({cfg.vocab_size, c});
  text_positions_ = init.normal({cfg.max_text_len, c});
  embed_norm_ = LayerNormParams::make(init, c);
  for (std::size_t i = 0; i < cfg.text_layers; ++i) text_blocks_.push_back(SharedBlock::make(init, c));
  text_norm_ = LayerNormParams::make(init, c);
  queries_ = init.normal({cfg.num_queries, c});
  for (std::size_t i = 0; i < cfg.text_layers; ++i) cross_.push_back(CrossAttentionParams::make(init, c));
}

void Encoders::collect(ParameterList& out) const {
  auto patch_encoder = [&](const PatchEncoder& enc, const std::string& prefix) {
    enc.patch.collect(out, prefix + ".patch");
    out.push_back({prefix + ".positions", enc.positions, false});
    for (std::size_t i = 0; i < enc.blocks.size(); ++i) enc.blocks[i].collect(out, prefix + ".blocks." + std::to_string(i));
  };
  patch_encoder(audio_, "audio");
  patch_encoder(visual_, "visual");
  joint_block_.collect(out, "joint.block");
  out.push_back({"joint.type_audio", type_audio_, false});
  out.push_back({"joint.type_visual", type_visual_, false});
  joint_norm_.collect(out, "joint.norm");
  out.push_back({"text.token_embed", token_embed_, true});
  out.push_back({"text.positions", text_positions_, false});
  embed_norm_.collect(out, "text.embed_norm");
  for (std::size_t i = 0; i < text_blocks_.size(); ++i) text_blocks_[i].collect(out, "text.blocks." + std::to_string(i));
  text_norm_.collect(out, "text.norm");
  out.push_back({"query.embeddings", queries_, false});
  for (std::size_t i = 0; i < cross_.size(); ++i) cross_[i].collect(out, "query.cross." + std::to_string(i));
}

Tensor Encoders::run_block(const SharedBlock& block, const CrossAttentionParams* cross, const Tensor& x,
                           const Tensor* cond, std::size_t query_rows, const AttentionMask* mask) const {
  const Tensor normed = block.norm1(x);
  Tensor h = diff::add(x, multi_head_attention(block.self_attn, normed, normed, cfg_.heads, mask));
  if (cross) {
    const std::size_t n = h.extent(1);
    Tensor q = query_rows == n ? h : diff::slice_seq(h, 0, query_rows);
    q = diff::add(q, multi_head_attention(cross->attn, cross->norm(q), *cond, cfg_.heads, nullptr));
    h = query_rows == n ? q : diff::concat_seq(q, diff::slice_seq(h, query_rows, n - query_rows));
  }
  return diff::add(h, block.ff_out(diff::gelu(block.ff_in(block.norm2(h)))));
}

EmbeddingSequence Encoders::encode_patches(const PatchEncoder& enc, const data::PatchBatch& patches,
                                           data::Modality expected, Provenance provenance) const {
  const char* name = expected == data::Modality::kAudio ? "encode_audio" : "encode_visual";
  if (patches.modality != expected) throw ContractError(std::string(name) + ": wrong modality");
  const std::size_t dim = enc.patch.weight.extent(0);
  if (patches.patch_dim != dim)
    throw ShapeError(std::string(name) + ": patch length " + std::to_string(patches.patch_dim) +
                     " differs from embedding input size " + std::to_string(dim));
  if (patches.total_patches != enc.positions.extent(0))
    throw ShapeError(std::string(name) + ": source grid has " + std::to_string(patches.total_patches) +
                     " patches, model expects " + std::to_string(enc.positions.extent(0)));
  if (patches.batch == 0 || patches.length == 0) throw ContractError(std::string(name) + ": empty input");
  const Tensor raw = Tensor::constant({patches.batch, patches.length, dim}, patches.patches);
  Tensor x = diff::add(enc.patch(raw), diff::embedding(enc.positions, patches.positions, {patches.batch, patches.length}));
  for (const auto& block : enc.blocks) x = run_block(block, nullptr, x, nullptr, 0, nullptr);
  return {x, provenance};
}

EmbeddingSequence Encoders::encode_audio(const data::PatchBatch& patches) const {
  return encode_patches(audio_, patches, data::Modality::kAudio, Provenance::kAudioEncoder);
}

EmbeddingSequence Encoders::encode_visual(const data::PatchBatch& patches) const {
  return encode_patches(visual_, patches, data::Modality::kVisual, Provenance::kVisualEncoder);
}

EmbeddingSequence Encoders::joint_single(const EmbeddingSequence& stream) const {
  if (!stream.vectors.defined() || stream.length() == 0) throw ContractError("joint_forward: empty input sequence");
  if (stream.provenance == Provenance::kAudioEncoder) {
    const Tensor x = run_block(joint_block_, nullptr, diff::add(stream.vectors, type_audio_), nullptr, 0, nullptr);
    return {joint_norm_(x), Provenance::kJointAudio};
  }
  if (stream.provenance == Provenance::kVisualEncoder) {
    const Tensor x = run_block(joint_block_, nullptr, diff::add(stream.vectors, type_visual_), nullptr, 0, nullptr);
    return {joint_norm_(x), Provenance::kJointVisual};
  }
  throw ContractError("joint_forward: input must come from the audio or visual encoder");
}

EmbeddingSequence Encoders::joint_pair(const EmbeddingSequence& audio, const EmbeddingSequence& visual) const {
  if (audio.provenance != Provenance::kAudioEncoder || visual.provenance != Provenance::kVisualEncoder)
    throw ContractError("joint_forward: expects audio-encoder and visual-encoder outputs");
  const Tensor both =
      diff::concat_seq(diff::add(audio.vectors, type_audio_), diff::add(visual.vectors, type_visual_));
  return {joint_norm_(run_block(joint_block_, nullptr, both, nullptr, 0, nullptr)), Provenance::kJointAudioVisual};
}

JointOutputs Encoders::joint_forward(const EmbeddingSequence& audio, const EmbeddingSequence& visual) const {
  if (audio.provenance != Provenance::kAudioEncoder || visual.provenance != Provenance::kVisualEncoder)
    throw ContractError("joint_forward: expects audio-encoder and visual-encoder outputs");
  return {joint_single(audio), joint_single(visual), joint_pair(audio, visual)};
}

EmbeddingSequence Encoders::condition(Condition c, const data::PatchBatch* audio,
                                      const data::PatchBatch* visual) const {
  if ((c != Condition::kV && audio == nullptr) || (c != Condition::kA && visual == nullptr))
    throw ContractError(std::string("condition ") + condition_name(c) + ": missing modality input");
  switch (c) {
    case Condition::kA: return joint_single(encode_audio(*audio));
    case Condition::kV: return joint_single(encode_visual(*visual));
    case Condition::kAV: return joint_pair(encode_audio(*audio), encode_visual(*visual));
  }
  throw ContractError("condition: unknown value");
}

Tensor Encoders::embed_text(const data::TokenBatch& tokens) const {
  if (tokens.length > cfg_.max_text_len)
    throw ContractError("text: length " + std::to_string(tokens.length) + " exceeds max_text_len " +
                        std::to_string(cfg_.max_text_len));
  for (std::size_t id : tokens.ids)
    if (id >= cfg_.vocab_size)
      throw ContractError("text: token id " + std::to_string(id) + " >= vocab size " + std::to_string(cfg_.vocab_size));
  const Tensor tok = diff::embedding(token_embed_, tokens.ids, {tokens.batch, tokens.length});
  const auto pos_ids = repeated_range(tokens.batch, tokens.length);
  const Tensor pos = diff::embedding(text_positions_, pos_ids, {tokens.batch, tokens.length});
  return embed_norm_(diff::add(tok, pos));
}

TextOutputs Encoders::encode_text(const data::TokenBatch& tokens) const {
  if (tokens.batch == 0 || tokens.length == 0) throw ContractError("encode_text: empty input");
  for (std::size_t b = 0; b < tokens.batch; ++b)
    if (tokens.ids[b * tokens.length] != data::tokens::kCls) throw ContractError("encode_text: sequence must start with [CLS]");
  Tensor x = embed_text(tokens);
  const AttentionMask mask = padding_mask(tokens, 0);
  for (const auto& block : text_blocks_) x = run_block(block, nullptr, x, nullptr, 0, &mask);
  x = text_norm_(x);
  const Tensor cls = diff::reshape(diff::slice_seq(x, 0, 1), {tokens.batch, cfg_.hidden});
  return {cls, {x, Provenance::kTextEncoder}};
}

QueryForwardResult Encoders::query_forward(const EmbeddingSequence& cond, QueryMode mode,
                                           const data::TokenBatch* text) const {
  Condition conditioning;
  switch (cond.provenance) {
    case Provenance::kJointAudio: conditioning = Condition::kA; break;
    case Provenance::kJointVisual: conditioning = Condition::kV; break;
    case Provenance::kJointAudioVisual: conditioning = Condition::kAV; break;
    default: throw ContractError("query_forward: condition must be E_A, E_V, or E_AV");
  }
  if (!cond.vectors.defined() || cond.length() == 0) throw ContractError("query_forward: empty condition");
  const std::size_t batch = cond.batch();
  const std::size_t nq = cfg_.num_queries;
  const auto query_ids = repeated_range(batch, nq);
  Tensor x = diff::embedding(queries_, query_ids, {batch, nq});

  AttentionMask mask;
  const AttentionMask* mask_ptr = nullptr;
  if (mode == QueryMode::kMatch || mode == QueryMode::kGenerate) {
    if (!text) throw ContractError("query_forward: match/generate modes need text");
    if (text->batch != batch) throw ContractError("query_forward: text batch differs from condition batch");
    x = diff::concat_seq(x, embed_text(*text));
    mask = mode == QueryMode::kMatch ? padding_mask(*text, nq) : multimodal_causal_mask(*text, nq);
    mask_ptr = &mask;
  } else if (mode != QueryMode::kExtract) {
    throw ContractError("query_forward: unknown mode");
  }

  for (std::size_t i = 0; i < text_blocks_.size(); ++i)
    x = run_block(text_blocks_[i], &cross_[i], x, &cond.vectors, nq, mask_ptr);
  x = text_norm_(x);

  QueryForwardResult out;
  out.queries.conditioning = conditioning;
  if (mode == QueryMode::kExtract) {
    out.queries.outputs = x;
    return out;
  }
  out.queries.outputs = diff::slice_seq(x, 0, nq);
  out.text = diff::slice_seq(x, nq, text->length);
  if (mode == QueryMode::kGenerate) out.logits = diff::matmul(out.text, token_embed_, diff::Transpose::kRhs);
  return out;
}

}  // namespace coavt::model
