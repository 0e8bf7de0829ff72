#include "coavt/trainer.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace coavt::train {

namespace diff = coavt::diff;
using diff::Tensor;

void TrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("train config: batch_size must be positive");
  if (epochs == 0 && max_steps == 0) throw ContractError("train config: epochs or max_steps must be positive");
  if (!(min_lr > 0.0) || !(min_lr <= peak_lr)) throw ContractError("train config: need 0 < min_lr <= peak_lr");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
    throw ContractError("train config: betas must lie in (0, 1)");
  if (!(adam_eps > 0.0)) throw ContractError("train config: adam_eps must be positive");
  if (weight_decay < 0.0) throw ContractError("train config: weight_decay must be non-negative");
  if (grad_clip < 0.0) throw ContractError("train config: grad_clip must be non-negative");
  if (!(mask_ratio_audio >= 0.0 && mask_ratio_audio < 1.0) || !(mask_ratio_visual >= 0.0 && mask_ratio_visual < 1.0))
    throw ContractError("train config: mask ratios must lie in [0, 1)");
}

std::size_t TrainConfig::resolved_warmup(std::size_t total_steps) const {
  if (warmup_steps >= 0) return std::min(static_cast<std::size_t>(warmup_steps), total_steps);
  return std::min<std::size_t>(2000, total_steps / 10);
}

objectives::LossOptions TrainConfig::loss_options() const {
  return {!disable_a, !disable_v, !disable_matching, !disable_lm};
}

double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t total_steps) {
  if (step > total_steps)
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  const std::size_t warmup = cfg.resolved_warmup(total_steps);
  if (step < warmup) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const std::size_t decay_steps = total_steps - warmup;
  const double progress =
      decay_steps == 0 ? 0.0 : static_cast<double>(step - warmup) / static_cast<double>(decay_steps);
  return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<const model::ParameterRef> params, OptimizerState& state, double lr,
                const TrainConfig& cfg) {
  if (lr < 0.0) throw ContractError("adamw_step: negative learning rate");
  const std::size_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  // check every shape before touching anything
  for (const auto& p : params) {
    const auto it = state.moments.find(p.name);
    if (it != state.moments.end() && it->second.m.size() != p.tensor.numel())
      throw ShapeError("adamw_step: optimizer state for " + p.name + " holds " + std::to_string(it->second.m.size()) +
                       " values, parameter has " + std::to_string(p.tensor.numel()));
  }
  for (const auto& p : params) {
    Tensor tensor = p.tensor;
    auto theta = tensor.mutable_values();
    auto& mom = state.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(theta.size(), 0.0);
      mom.v.assign(theta.size(), 0.0);
    }
    const bool has_grad = tensor.has_grad();
    const auto grad = has_grad ? tensor.grad() : std::span<const double>{};
    const double shrink = p.decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
      mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      theta[i] = theta[i] * shrink - lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
  state.step = t;
}

double clip_grad_norm(std::span<const model::ParameterRef> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor tensor = p.tensor;
      for (double& g : tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::size_t central_frame(std::size_t frames) {
  if (frames == 0) throw ContractError("central_frame: item has no frames");
  return frames / 2;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

objectives::Batch make_batch(std::span<const data::TripletExample> items, std::span<const std::size_t> indices,
                             const model::ModelConfig& mcfg, FrameChoice frames, double mask_audio,
                             double mask_visual, std::mt19937_64& rng) {
  if (indices.empty()) throw ContractError("make_batch: no items");
  std::vector<data::PatchSequence> audio, visual;
  std::vector<data::TokenSequence> captions;
  audio.reserve(indices.size());
  visual.reserve(indices.size());
  captions.reserve(indices.size());
  for (std::size_t idx : indices) {
    if (idx >= items.size()) throw ContractError("make_batch: item index out of range");
    const auto& item = items[idx];
    if (item.video_frames.empty()) throw ContractError("make_batch: item has no video frames");
    const std::size_t f =
        frames == FrameChoice::kCentral
            ? central_frame(item.video_frames.size())
            : std::uniform_int_distribution<std::size_t>(0, item.video_frames.size() - 1)(rng);
    if (item.audio.bins != mcfg.audio_bins)
      throw ContractError("make_batch: spectrogram has " + std::to_string(item.audio.bins) + " bins, model expects " +
                          std::to_string(mcfg.audio_bins));
    const auto& frame = item.video_frames[f];
    if (frame.height != mcfg.frame_size || frame.width != mcfg.frame_size || frame.channels != mcfg.frame_channels)
      throw ContractError("make_batch: frame geometry does not match the model");
    data::PatchSequence a = data::patchify(
        item.audio.frames == mcfg.audio_frames ? item.audio : data::crop_or_pad(item.audio, mcfg.audio_frames, &rng),
        mcfg.audio_patch);
    data::PatchSequence v = data::patchify(frame, mcfg.visual_patch);
    if (mask_audio > 0.0) a = data::mask_patches(a, mask_audio, rng);
    if (mask_visual > 0.0) v = data::mask_patches(v, mask_visual, rng);
    audio.push_back(std::move(a));
    visual.push_back(std::move(v));
    captions.push_back(item.caption);
  }
  return {data::PatchBatch::stack(audio), data::PatchBatch::stack(visual), data::TokenBatch::stack(captions)};
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kEpochStream = 0x65706f63;
constexpr std::uint64_t kStepStream = 0x73746570;
constexpr std::uint64_t kHeadStream = 0x68656164;

std::size_t epoch_steps(std::size_t n, const TrainConfig& cfg) {
  if (n == 0) throw ContractError("train: empty corpus");
  if (n < cfg.batch_size)
    throw ContractError("train: corpus of " + std::to_string(n) + " items is smaller than batch_size " +
                        std::to_string(cfg.batch_size));
  return n / cfg.batch_size;
}

std::size_t planned_steps(std::size_t per_epoch, const TrainConfig& cfg) {
  return cfg.max_steps > 0 ? cfg.max_steps : per_epoch * cfg.epochs;
}

std::vector<std::size_t> epoch_batch(std::size_t n, std::size_t per_epoch, const TrainConfig& cfg, std::size_t s) {
  const std::size_t epoch = s / per_epoch;
  const std::size_t pos = s % per_epoch;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = stream_rng(cfg.seed, kEpochStream, epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return {order.begin() + static_cast<std::ptrdiff_t>(pos * cfg.batch_size),
          order.begin() + static_cast<std::ptrdiff_t>((pos + 1) * cfg.batch_size)};
}

// Updates only parameters that received a gradient this step.
void optimize(const model::ParameterList& all, OptimizerState& state, double lr, const TrainConfig& cfg) {
  model::ParameterList touched;
  for (const auto& p : all)
    if (p.tensor.has_grad()) touched.push_back(p);
  clip_grad_norm(touched, cfg.grad_clip);
  adamw_step(touched, state, lr, cfg);
  for (const auto& p : all) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void zero_all(const model::ParameterList& all) {
  for (const auto& p : all) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace

Pretrainer::Pretrainer(model::Model& model, std::span<const data::TripletExample> train, TrainConfig cfg,
                       bool fine_tuning)
    : model_(model), train_(train), cfg_(std::move(cfg)), fine_tuning_(fine_tuning) {
  cfg_.validate();
  steps_per_epoch_ = epoch_steps(train_.size(), cfg_);
  total_steps_ = planned_steps(steps_per_epoch_, cfg_);
}

std::vector<std::size_t> Pretrainer::batch_indices(std::size_t s) const {
  return epoch_batch(train_.size(), steps_per_epoch_, cfg_, s);
}

LossReport Pretrainer::step(OptimizerState& state) const {
  const std::size_t s = state.step;
  if (s >= total_steps_) throw ContractError("pretrain: all " + std::to_string(total_steps_) + " steps already run");
  const auto indices = batch_indices(s);
  auto rng = stream_rng(cfg_.seed, kStepStream, s);
  const bool masking = !(fine_tuning_ || cfg_.disable_masking);
  const auto batch = make_batch(train_, indices, model_.config(), FrameChoice::kUniform,
                                masking ? cfg_.mask_ratio_audio : 0.0, masking ? cfg_.mask_ratio_visual : 0.0, rng);
  const auto params = model_.parameters();
  zero_all(params);
  auto loss = objectives::total_loss(model_.encoders(), model_.heads(), batch, cfg_.loss_options(), rng);
  diff::backward(loss.total);
  optimize(params, state, lr_at(s + 1, cfg_, total_steps_), cfg_);
  loss.report.step = s + 1;
  return loss.report;
}

std::vector<LossReport> Pretrainer::run(OptimizerState& state, const LoopCallbacks& callbacks) const {
  std::vector<LossReport> reports;
  while (state.step < total_steps_) {
    reports.push_back(step(state));
    if (callbacks.on_step) callbacks.on_step(reports.back());
    if (callbacks.on_epoch_end && (state.step % steps_per_epoch_ == 0 || state.step == total_steps_))
      callbacks.on_epoch_end((state.step + steps_per_epoch_ - 1) / steps_per_epoch_);
  }
  return reports;
}

std::vector<LossReport> pretrain(model::Model& model, std::span<const data::TripletExample> train,
                                 const TrainConfig& cfg, OptimizerState& state, const LoopCallbacks& callbacks) {
  return Pretrainer(model, train, cfg).run(state, callbacks);
}

FinetuneTask finetune_task_from_name(const std::string& name) {
  if (name == "retrieval") return FinetuneTask::kRetrieval;
  if (name == "classification") return FinetuneTask::kClassification;
  throw ContractError("finetune: unknown task '" + name + "' (expected retrieval or classification)");
}

FinetuneResult finetune(model::Model& model, std::span<const data::TripletExample> train, FinetuneTask task,
                        Condition cond, std::size_t n_classes, const TrainConfig& cfg, OptimizerState& state,
                        const LoopCallbacks& callbacks,
                        const std::function<void(const ClassificationStep&)>& on_cls_step) {
  FinetuneResult result;
  if (task == FinetuneTask::kRetrieval) {
    result.retrieval = Pretrainer(model, train, cfg, true).run(state, callbacks);
    return result;
  }
  cfg.validate();
  const std::size_t per_epoch = epoch_steps(train.size(), cfg);
  const std::size_t total = planned_steps(per_epoch, cfg);
  for (const auto& item : train)
    if (item.class_id >= n_classes) throw ContractError("finetune: class id beyond n_classes");
  if (!model.has_classifier(cond) || state.step == 0) model.add_classifier(cond, n_classes, cfg.seed ^ kHeadStream);

  while (state.step < total) {
    const std::size_t s = state.step;
    const auto indices = epoch_batch(train.size(), per_epoch, cfg, s);
    auto rng = stream_rng(cfg.seed, kStepStream, s);
    const auto batch = make_batch(train, indices, model.config(), FrameChoice::kUniform, 0.0, 0.0, rng);
    std::vector<std::size_t> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) labels.push_back(train[i].class_id);

    const auto params = model.parameters();
    zero_all(params);
    const Tensor logits = model.classify_logits(cond, &batch.audio, &batch.visual);
    const Tensor loss = diff::cross_entropy(logits, labels);
    diff::backward(loss);

    std::size_t correct = 0;
    const auto values = logits.values();
    for (std::size_t b = 0; b < labels.size(); ++b) {
      const auto row = values.subspan(b * n_classes, n_classes);
      correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[b];
    }
    optimize(params, state, lr_at(s + 1, cfg, total), cfg);

    ClassificationStep rec{state.step, loss.item(), 100.0 * static_cast<double>(correct) / labels.size()};
    result.classification.push_back(rec);
    if (on_cls_step) on_cls_step(rec);
    if (callbacks.on_epoch_end && (state.step % per_epoch == 0 || state.step == total))
      callbacks.on_epoch_end((state.step + per_epoch - 1) / per_epoch);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_tensor(std::ostream& out, const std::string& name, const diff::Shape& shape, std::span<const double> values) {
  put_string(out, name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t e : shape) put<std::uint64_t>(out, e);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T get() {
    T v{};
    read(&v, sizeof(T));
    return v;
  }

  std::string get_string(std::size_t limit) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw FormatError("checkpoint: string length " + std::to_string(n) + " is implausible");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("checkpoint: truncated file");
  }

 private:
  std::istream& in_;
};

struct TensorRecord {
  std::string name;
  diff::Shape shape;
  std::vector<double> values;
};

}  // namespace

void save_checkpoint(const model::Model& model, const OptimizerState* state, const std::filesystem::path& path) {
  const auto params = model.parameters();
  std::vector<TensorRecord> extra;
  if (state) {
    for (const auto& p : params) {
      const auto it = state->moments.find(p.name);
      if (it == state->moments.end()) continue;
      extra.push_back({"optim.m." + p.name, p.tensor.shape(), it->second.m});
      extra.push_back({"optim.v." + p.name, p.tensor.shape(), it->second.v});
    }
    extra.push_back({"optim.step", {}, {static_cast<double>(state->step)}});
  }
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot write " + tmp);
    out << kCheckpointHeader << '\n';
    put_string(out, to_config_text(model.config()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size() + extra.size()));
    for (const auto& p : params) put_tensor(out, p.name, p.tensor.shape(), p.tensor.values());
    for (const auto& r : extra) put_tensor(out, r.name, r.shape, r.values);
    out.flush();
    if (!out) throw IoError("checkpoint: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: cannot move into place " + path.string() + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  if (header != kCheckpointHeader)
    throw FormatError("checkpoint: unsupported version header '" + header.substr(0, 32) + "', expected '" +
                      kCheckpointHeader + "'");
  Reader r(in);
  const std::string cfg_text = r.get_string(1 << 20);
  const auto n = r.get<std::uint32_t>();
  std::vector<TensorRecord> records;
  records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorRecord rec;
    rec.name = r.get_string(4096);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: tensor " + rec.name + " has implausible rank");
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.shape.push_back(r.get<std::uint64_t>());
      count *= rec.shape.back();
    }
    if (count > (std::size_t{1} << 31)) throw FormatError("checkpoint: tensor " + rec.name + " is implausibly large");
    rec.values.resize(count);
    r.read(rec.values.data(), count * sizeof(double));
    records.push_back(std::move(rec));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after last record");

  const RunConfig run = apply_config(ConfigFile::parse_text(cfg_text));
  LoadedCheckpoint out{model::Model(run.model, 0), {}};
  for (const auto& rec : records) {
    if (rec.name.rfind("cls.", 0) == 0 && rec.name.ends_with(".weight")) {
      const std::string cond = rec.name.substr(4, rec.name.size() - 4 - 7);
      if (rec.shape.size() != 2) throw FormatError("checkpoint: classifier " + rec.name + " must be rank 2");
      out.model.add_classifier(model::condition_from_name(cond), rec.shape[1], 0);
    }
  }
  const auto params = out.model.parameters();
  std::map<std::string, const model::ParameterRef*> by_name;
  for (const auto& p : params) by_name[p.name] = &p;
  std::map<std::string, const TensorRecord*> seen;
  for (const auto& rec : records) {
    if (!seen.emplace(rec.name, &rec).second) throw FormatError("checkpoint: duplicate tensor " + rec.name);
    if (rec.name == "optim.step") {
      if (rec.values.size() != 1 || rec.values[0] < 0) throw FormatError("checkpoint: malformed optim.step");
      out.state.step = static_cast<std::size_t>(rec.values[0]);
      continue;
    }
    const bool is_m = rec.name.rfind("optim.m.", 0) == 0;
    const bool is_v = rec.name.rfind("optim.v.", 0) == 0;
    const std::string target = (is_m || is_v) ? rec.name.substr(8) : rec.name;
    const auto it = by_name.find(target);
    if (it == by_name.end()) throw FormatError("checkpoint: unknown tensor name " + rec.name);
    if (rec.shape != it->second->tensor.shape())
      throw FormatError("checkpoint: tensor " + rec.name + " has shape " + diff::to_string(rec.shape) + ", expected " +
                        diff::to_string(it->second->tensor.shape()));
    if (is_m) {
      out.state.moments[target].m = rec.values;
    } else if (is_v) {
      out.state.moments[target].v = rec.values;
    }
  }
  for (const auto& p : params)
    if (!seen.contains(p.name)) throw FormatError("checkpoint: missing tensor " + p.name);
  for (const auto& [name, mom] : out.state.moments)
    if (mom.m.size() != mom.v.size()) throw FormatError("checkpoint: incomplete optimizer moments for " + name);
  // everything validated; copy values in
  for (const auto& p : params) {
    Tensor t = p.tensor;
    std::ranges::copy(seen.at(p.name)->values, t.mutable_values().begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config files

ConfigFile ConfigFile::parse_file(const std::filesystem::path& path) {
  ConfigFile cfg;
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  cfg.parse_into(ss.str(), path.parent_path(), 0);
  return cfg;
}

ConfigFile ConfigFile::parse_text(const std::string& text, const std::filesystem::path& base_dir) {
  ConfigFile cfg;
  cfg.parse_into(text, base_dir, 0);
  return cfg;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

void ConfigFile::parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth) {
  if (depth > 16) throw ContractError("config: include nesting too deep");
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include", 0) == 0 && line.size() > 7 && (line[7] == ' ' || line[7] == '\t')) {
      const std::filesystem::path inc = trim(std::string_view(line).substr(8));
      const auto full = inc.is_absolute() ? inc : base_dir / inc;
      std::ifstream f(full);
      if (!f) throw IoError("config: cannot open included file " + full.string());
      std::stringstream ss;
      ss << f.rdbuf();
      parse_into(ss.str(), full.parent_path(), depth + 1);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config: line " + std::to_string(line_no) + " is not key=value: '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ContractError("config: empty key on line " + std::to_string(line_no));
    values_[key] = value;
  }
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end)
    throw ContractError("config: key '" + key + "' expects a number, got '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "no") return false;
  throw ContractError("config: key '" + key + "' expects a boolean, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter field(T TrainConfig::* member) {
  return [member](RunConfig& c, const std::string& k, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>)
      c.train.*member = parse_bool(k, v);
    else
      c.train.*member = parse_number<T>(k, v);
  };
}

template <typename T>
Setter field(T model::ModelConfig::* member) {
  return [member](RunConfig& c, const std::string& k, const std::string& v) { c.model.*member = parse_number<T>(k, v); };
}

template <typename T>
Setter field(T data::CorpusConfig::* member) {
  return [member](RunConfig& c, const std::string& k, const std::string& v) { c.corpus.*member = parse_number<T>(k, v); };
}

Setter both(Setter a, Setter b) {
  return [a, b](RunConfig& c, const std::string& k, const std::string& v) {
    a(c, k, v);
    b(c, k, v);
  };
}

const std::map<std::string, Setter>& setters() {
  using M = model::ModelConfig;
  using D = data::CorpusConfig;
  using T = TrainConfig;
  static const std::map<std::string, Setter> table = {
      {"batch_size", field(&T::batch_size)},
      {"epochs", field(&T::epochs)},
      {"max_steps", field(&T::max_steps)},
      {"peak_lr", field(&T::peak_lr)},
      {"min_lr", field(&T::min_lr)},
      {"warmup_steps", field(&T::warmup_steps)},
      {"beta1", field(&T::beta1)},
      {"beta2", field(&T::beta2)},
      {"adam_eps", field(&T::adam_eps)},
      {"weight_decay", field(&T::weight_decay)},
      {"grad_clip", field(&T::grad_clip)},
      {"mask_ratio_audio", field(&T::mask_ratio_audio)},
      {"mask_ratio_visual", field(&T::mask_ratio_visual)},
      {"seed", field(&T::seed)},
      {"disable_a", field(&T::disable_a)},
      {"disable_v", field(&T::disable_v)},
      {"disable_masking", field(&T::disable_masking)},
      {"disable_matching", field(&T::disable_matching)},
      {"disable_lm", field(&T::disable_lm)},
      {"hidden", field(&M::hidden)},
      {"heads", field(&M::heads)},
      {"av_layers", field(&M::av_layers)},
      {"text_layers", field(&M::text_layers)},
      {"num_queries", field(&M::num_queries)},
      {"max_text_len", field(&M::max_text_len)},
      {"proj_dim", field(&M::proj_dim)},
      {"audio_patch", field(&M::audio_patch)},
      {"visual_patch", field(&M::visual_patch)},
      {"init_std", field(&M::init_std)},
      {"tau_init", field(&M::tau_init)},
      {"vocab_size", both(field(&M::vocab_size), field(&D::vocab_size))},
      {"audio_frames", both(field(&M::audio_frames), field(&D::audio_frames))},
      {"audio_bins", both(field(&M::audio_bins), field(&D::audio_bins))},
      {"frame_size", both(field(&M::frame_size), field(&D::frame_size))},
      {"frame_channels", both(field(&M::frame_channels), field(&D::frame_channels))},
      {"n_train", field(&D::n_train)},
      {"n_test", field(&D::n_test)},
      {"n_classes", field(&D::n_classes)},
      {"latent_dim", field(&D::latent_dim)},
      {"offset_scale", field(&D::offset_scale)},
      {"audio_noise", field(&D::audio_noise)},
      {"visual_noise", field(&D::visual_noise)},
      {"attribute_tokens_per_item", field(&D::attribute_tokens_per_item)},
      {"frames_per_video", field(&D::frames_per_video)},
      {"corpus_seed", field(&D::seed)},
  };
  return table;
}

// Shortest text that reads back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void model_lines(std::ostream& out, const model::ModelConfig& m) {
  out << "hidden=" << m.hidden << "\nheads=" << m.heads << "\nav_layers=" << m.av_layers
      << "\ntext_layers=" << m.text_layers << "\nnum_queries=" << m.num_queries << "\nvocab_size=" << m.vocab_size
      << "\nmax_text_len=" << m.max_text_len << "\nproj_dim=" << m.proj_dim << "\naudio_frames=" << m.audio_frames
      << "\naudio_bins=" << m.audio_bins << "\naudio_patch=" << m.audio_patch << "\nframe_size=" << m.frame_size
      << "\nframe_channels=" << m.frame_channels << "\nvisual_patch=" << m.visual_patch
      << "\ninit_std=" << fmt_double(m.init_std) << "\ntau_init=" << fmt_double(m.tau_init) << '\n';
}

}  // namespace

RunConfig apply_config(const ConfigFile& file, RunConfig base) {
  const auto& table = setters();
  for (const auto& [key, value] : file.values()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ContractError("config: unknown key '" + key + "'");
    it->second(base, key, value);
  }
  return base;
}

std::string to_config_text(const model::ModelConfig& cfg) {
  std::ostringstream out;
  model_lines(out, cfg);
  return out.str();
}

std::string to_config_text(const RunConfig& cfg) {
  std::ostringstream out;
  const auto& t = cfg.train;
  const auto& d = cfg.corpus;
  out << "batch_size=" << t.batch_size << "\nepochs=" << t.epochs << "\nmax_steps=" << t.max_steps
      << "\npeak_lr=" << fmt_double(t.peak_lr) << "\nmin_lr=" << fmt_double(t.min_lr)
      << "\nwarmup_steps=" << t.warmup_steps << "\nbeta1=" << fmt_double(t.beta1) << "\nbeta2=" << fmt_double(t.beta2)
      << "\nadam_eps=" << fmt_double(t.adam_eps) << "\nweight_decay=" << fmt_double(t.weight_decay)
      << "\ngrad_clip=" << fmt_double(t.grad_clip) << "\nmask_ratio_audio=" << fmt_double(t.mask_ratio_audio)
      << "\nmask_ratio_visual=" << fmt_double(t.mask_ratio_visual) << "\nseed=" << t.seed
      << "\ndisable_a=" << t.disable_a << "\ndisable_v=" << t.disable_v << "\ndisable_masking=" << t.disable_masking
      << "\ndisable_matching=" << t.disable_matching << "\ndisable_lm=" << t.disable_lm << '\n';
  model_lines(out, cfg.model);
  out << "n_train=" << d.n_train << "\nn_test=" << d.n_test << "\nn_classes=" << d.n_classes
      << "\nlatent_dim=" << d.latent_dim << "\noffset_scale=" << fmt_double(d.offset_scale)
      << "\naudio_noise=" << fmt_double(d.audio_noise) << "\nvisual_noise=" << fmt_double(d.visual_noise)
      << "\nattribute_tokens_per_item=" << d.attribute_tokens_per_item << "\nframes_per_video=" << d.frames_per_video
      << "\ncorpus_seed=" << d.seed << '\n';
  return out.str();
}

}  // namespace coavt::train
