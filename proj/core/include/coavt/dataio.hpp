#pragma once

// Patch tokenization, input masking, caption construction, and the
// synthetic correlated audio/visual/text corpus.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "coavt/error.hpp"

namespace coavt::data {

enum class Modality : std::uint8_t { kAudio, kVisual };

/// Log-mel style magnitudes, `frames` rows of `bins` values each.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> values;

  bool operator==(const Spectrogram&) const = default;
};

/// Image in height-width-channel order.
struct Frame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  bool operator==(const Frame&) const = default;
};

/// Flattened square patches in row-major grid order. Each patch is laid out
/// row by row, channels innermost. `positions` index into the source grid.
struct PatchSequence {
  Modality modality = Modality::kAudio;
  std::size_t patch_edge = 0;
  std::size_t channels = 1;
  std::size_t total_patches = 0;
  std::vector<std::size_t> positions;
  std::vector<double> patches;

  std::size_t size() const { return positions.size(); }
  std::size_t patch_dim() const { return patch_edge * patch_edge * channels; }
  std::span<const double> patch(std::size_t i) const { return {patches.data() + i * patch_dim(), patch_dim()}; }
};

PatchSequence patchify(const Spectrogram& source, std::size_t patch_edge);
PatchSequence patchify(const Frame& source, std::size_t patch_edge);

/// round-half-up((1 - ratio) * n).
std::size_t retained_count(std::size_t n, double ratio);

/// Keeps a uniformly chosen subset of retained_count(n, ratio) patches in
/// their original order. Throws for ratio outside [0, 1).
PatchSequence mask_patches(const PatchSequence& seq, double ratio, std::mt19937_64& rng);

/// Random crop (or zero pad at the end) to exactly `frames` time steps.
/// A null rng crops from the start.
Spectrogram crop_or_pad(const Spectrogram& source, std::size_t frames, std::mt19937_64* rng);

namespace tokens {
inline constexpr std::size_t kCls = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kPad = 2;
inline constexpr std::size_t kEos = 3;
inline constexpr std::size_t kFirstFree = 4;
}  // namespace tokens

struct TokenSequence {
  std::vector<std::size_t> ids;

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

/// [CLS] + labels + [EOS], no separators.
TokenSequence caption_from_labels(std::span<const std::size_t> labels);

struct TripletExample {
  std::uint32_t item_id = 0;
  std::uint16_t class_id = 0;
  Spectrogram audio;
  std::vector<Frame> video_frames;
  TokenSequence caption;

  bool operator==(const TripletExample&) const = default;
};

struct CorpusConfig {
  std::size_t n_train = 512;
  std::size_t n_test = 128;
  std::size_t n_classes = 16;
  std::size_t latent_dim = 16;
  double offset_scale = 0.5;
  double audio_noise = 0.5;
  double visual_noise = 0.5;
  std::size_t attribute_tokens_per_item = 3;
  std::size_t vocab_size = 64;
  std::size_t audio_frames = 64;
  std::size_t audio_bins = 16;
  std::size_t frame_size = 32;
  std::size_t frame_channels = 3;
  std::size_t frames_per_video = 10;
  std::uint64_t seed = 0;

  /// Throws ContractError naming the first violated constraint.
  void validate() const;
  std::size_t attribute_bins() const;
  std::size_t class_token(std::size_t class_id) const { return tokens::kFirstFree + class_id; }
  std::size_t attribute_token(std::size_t slot, std::size_t bin) const;
};

/// Fixed class centroids and linear renderings shared by every item of a corpus.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const CorpusConfig& cfg);

  std::vector<double> latent(std::size_t class_id, std::span<const double> offset) const;
  Spectrogram render_audio(std::span<const double> latent, std::mt19937_64& rng) const;
  Frame render_frame(std::span<const double> latent, std::mt19937_64& rng) const;
  /// Class token followed by one quantized attribute token per slot.
  std::vector<std::size_t> labels(std::size_t class_id, std::span<const double> offset) const;

  const CorpusConfig& config() const { return cfg_; }

 private:
  CorpusConfig cfg_;
  std::vector<double> centroids_;  // n_classes x latent_dim
  std::vector<double> audio_map_;  // (frames*bins) x latent_dim
  std::vector<double> visual_map_;  // (size*size*channels) x latent_dim
};

struct Corpus {
  std::vector<TripletExample> train;
  std::vector<TripletExample> test;
};

/// Deterministic in cfg (including seed). Item ids are 0..n_train+n_test-1,
/// train first; classes are assigned round-robin; captions are unique.
Corpus generate_corpus(const CorpusConfig& cfg);

/// Nearest-centroid classification of raw test spectrograms, centroids
/// estimated on the train split. Sanity oracle for generated corpora.
double nearest_centroid_accuracy(const Corpus& corpus, std::size_t n_classes);

// ---------------------------------------------------------------------------
// Batching

/// Equal-length patch sequences stacked for one forward pass.
struct PatchBatch {
  Modality modality = Modality::kAudio;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t patch_dim = 0;
  std::size_t total_patches = 0;
  std::vector<double> patches;          // batch x length x patch_dim
  std::vector<std::size_t> positions;  // batch x length

  static PatchBatch stack(std::span<const PatchSequence> items);
};

/// Token sequences padded with [PAD] to a common length.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> ids;  // batch x length

  static TokenBatch stack(std::span<const TokenSequence> items);
  static TokenBatch stack(std::span<const TokenSequence> items, std::size_t length);
  TokenSequence row(std::size_t b) const;
};

// ---------------------------------------------------------------------------
// COAVT-CORPUS v1

inline constexpr const char* kCorpusHeader = "COAVT-CORPUS v1";

void write_corpus(std::ostream& out, std::span<const TripletExample> items);
std::vector<TripletExample> read_corpus(std::istream& in);
void write_corpus_file(const std::filesystem::path& path, std::span<const TripletExample> items);
std::vector<TripletExample> read_corpus_file(const std::filesystem::path& path);

}  // namespace coavt::data
