#pragma once

// AdamW with warmup-cosine schedule, the pre-training and fine-tuning loops,
// checkpoints, and flat key=value configuration files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "coavt/dataio.hpp"
#include "coavt/model.hpp"
#include "coavt/objectives.hpp"

namespace coavt::train {

using model::Condition;
using objectives::LossReport;

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::size_t max_steps = 0;  // 0: run every epoch
  double peak_lr = 1e-4;
  double min_lr = 1e-6;
  long warmup_steps = -1;  // negative: min(2000, 10% of total steps)
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 1.0;  // global norm; 0 disables
  double mask_ratio_audio = 0.75;
  double mask_ratio_visual = 0.5;
  std::uint64_t seed = 0;
  bool disable_a = false;
  bool disable_v = false;
  bool disable_masking = false;
  bool disable_matching = false;
  bool disable_lm = false;

  void validate() const;
  std::size_t resolved_warmup(std::size_t total_steps) const;
  objectives::LossOptions loss_options() const;
};

/// Learning rate for 1-based optimizer step `step`; step 0 is the ramp start.
double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t total_steps);

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::map<std::string, Moments> moments;
  std::size_t step = 0;  // completed optimizer steps
};

/// One bias-corrected AdamW update. Missing gradients count as zero. Decay
/// is applied only to parameters flagged `decay`.
void adamw_step(std::span<const model::ParameterRef> params, OptimizerState& state, double lr,
                const TrainConfig& cfg);

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const model::ParameterRef> params, double max_norm);

// ---------------------------------------------------------------------------
// Batches

enum class FrameChoice : std::uint8_t { kUniform, kCentral };

std::size_t central_frame(std::size_t frames);

/// Stacks the listed items into one batch. Masking is skipped when both
/// ratios are zero.
objectives::Batch make_batch(std::span<const data::TripletExample> items, std::span<const std::size_t> indices,
                             const model::ModelConfig& mcfg, FrameChoice frames, double mask_audio,
                             double mask_visual, std::mt19937_64& rng);

/// Deterministic RNG for (seed, stream, index).
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

// ---------------------------------------------------------------------------
// Loops

struct LoopCallbacks {
  std::function<void(const LossReport&)> on_step;
  /// Called after the last step of each epoch with the 1-based epoch number.
  std::function<void(std::size_t epoch)> on_epoch_end;
};

/// Schedules `epochs` shuffled passes (or max_steps) over `train`; resumes
/// from `state.step`. The batch and randomness of step s depend only on
/// (seed, s), so a resumed run replays the uninterrupted one.
class Pretrainer {
 public:
  Pretrainer(model::Model& model, std::span<const data::TripletExample> train, TrainConfig cfg,
             bool fine_tuning = false);

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return total_steps_; }
  const TrainConfig& config() const { return cfg_; }

  /// Batch indices of 0-based step `s`.
  std::vector<std::size_t> batch_indices(std::size_t s) const;
  /// Runs optimizer step state.step + 1.
  LossReport step(OptimizerState& state) const;
  /// Runs until total_steps; returns the reports of the steps it ran.
  std::vector<LossReport> run(OptimizerState& state, const LoopCallbacks& callbacks = {}) const;

 private:
  model::Model& model_;
  std::span<const data::TripletExample> train_;
  TrainConfig cfg_;
  bool fine_tuning_;
  std::size_t steps_per_epoch_;
  std::size_t total_steps_;
};

std::vector<LossReport> pretrain(model::Model& model, std::span<const data::TripletExample> train,
                                 const TrainConfig& cfg, OptimizerState& state,
                                 const LoopCallbacks& callbacks = {});

enum class FinetuneTask : std::uint8_t { kRetrieval, kClassification };
FinetuneTask finetune_task_from_name(const std::string& name);

struct ClassificationStep {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // percent, on the step's batch
};

struct FinetuneResult {
  std::vector<LossReport> retrieval;
  std::vector<ClassificationStep> classification;
};

/// Retrieval reuses the pre-training objective with masking off.
/// Classification attaches a fresh head for `cond` over `n_classes` and
/// minimizes cross-entropy of class ids.
FinetuneResult finetune(model::Model& model, std::span<const data::TripletExample> train, FinetuneTask task,
                        Condition cond, std::size_t n_classes, const TrainConfig& cfg, OptimizerState& state,
                        const LoopCallbacks& callbacks = {},
                        const std::function<void(const ClassificationStep&)>& on_cls_step = {});

// ---------------------------------------------------------------------------
// COAVT-CKPT v1

inline constexpr const char* kCheckpointHeader = "COAVT-CKPT v1";

void save_checkpoint(const model::Model& model, const OptimizerState* state, const std::filesystem::path& path);

struct LoadedCheckpoint {
  model::Model model;
  OptimizerState state;
};

/// Validates the whole file before returning; nothing is partially applied.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Config files

/// Flat key=value lines; `#` starts a comment; `include <path>` splices
/// another file (relative to the including file). Later keys override.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::filesystem::path& path);
  static ConfigFile parse_text(const std::string& text, const std::filesystem::path& base_dir = ".");

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  void parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth);
  std::map<std::string, std::string> values_;
};

struct RunConfig {
  TrainConfig train;
  model::ModelConfig model;
  data::CorpusConfig corpus;
};

/// Applies every key to whichever configs define it; unknown keys and
/// malformed values raise ContractError.
RunConfig apply_config(const ConfigFile& file, RunConfig base = {});
/// Serializes as key=value lines that apply_config reads back.
std::string to_config_text(const RunConfig& cfg);
std::string to_config_text(const model::ModelConfig& cfg);

}  // namespace coavt::train
