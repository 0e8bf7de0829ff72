#include "coavt/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

namespace coavt::data {

namespace {

PatchSequence patchify_grid(const std::vector<double>& values, std::size_t rows, std::size_t cols,
                            std::size_t channels, std::size_t edge, Modality modality) {
  if (edge == 0) throw ContractError("patchify: patch edge must be positive");
  if (rows % edge != 0 || cols % edge != 0)
    throw ContractError("patchify: extents " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " are not divisible by patch edge " + std::to_string(edge));
  if (values.size() != rows * cols * channels) throw ContractError("patchify: value buffer does not match extents");
  PatchSequence seq;
  seq.modality = modality;
  seq.patch_edge = edge;
  seq.channels = channels;
  const std::size_t grid_rows = rows / edge;
  const std::size_t grid_cols = cols / edge;
  seq.total_patches = grid_rows * grid_cols;
  seq.positions.resize(seq.total_patches);
  std::iota(seq.positions.begin(), seq.positions.end(), 0);
  seq.patches.reserve(values.size());
  for (std::size_t gr = 0; gr < grid_rows; ++gr)
    for (std::size_t gc = 0; gc < grid_cols; ++gc)
      for (std::size_t r = 0; r < edge; ++r) {
        const std::size_t start = ((gr * edge + r) * cols + gc * edge) * channels;
        seq.patches.insert(seq.patches.end(), values.begin() + static_cast<std::ptrdiff_t>(start),
                           values.begin() + static_cast<std::ptrdiff_t>(start + edge * channels));
      }
  return seq;
}

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

PatchSequence patchify(const Spectrogram& source, std::size_t patch_edge) {
  return patchify_grid(source.values, source.frames, source.bins, 1, patch_edge, Modality::kAudio);
}

PatchSequence patchify(const Frame& source, std::size_t patch_edge) {
  return patchify_grid(source.values, source.height, source.width, source.channels, patch_edge, Modality::kVisual);
}

std::size_t retained_count(std::size_t n, double ratio) {
  // The small slack keeps exact halves (e.g. 3.5 computed as 3.4999...) rounding up.
  return static_cast<std::size_t>(std::floor((1.0 - ratio) * static_cast<double>(n) + 0.5 + 1e-9));
}

PatchSequence mask_patches(const PatchSequence& seq, double ratio, std::mt19937_64& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ContractError("mask_patches: ratio must lie in [0, 1)");
  if (ratio == 0.0) return seq;
  const std::size_t keep = retained_count(seq.size(), ratio);
  std::vector<std::size_t> slots(seq.size());
  std::iota(slots.begin(), slots.end(), 0);
  std::vector<std::size_t> chosen;
  chosen.reserve(keep);
  std::sample(slots.begin(), slots.end(), std::back_inserter(chosen), keep, rng);

  PatchSequence out = seq;
  out.positions.clear();
  out.patches.clear();
  for (std::size_t slot : chosen) {
    out.positions.push_back(seq.positions[slot]);
    const auto p = seq.patch(slot);
    out.patches.insert(out.patches.end(), p.begin(), p.end());
  }
  return out;
}

Spectrogram crop_or_pad(const Spectrogram& source, std::size_t frames, std::mt19937_64* rng) {
  if (frames == 0) throw ContractError("crop_or_pad: target frame count must be positive");
  Spectrogram out{frames, source.bins, std::vector<double>(frames * source.bins, 0.0)};
  if (source.frames >= frames) {
    std::size_t start = 0;
    if (rng && source.frames > frames)
      start = std::uniform_int_distribution<std::size_t>(0, source.frames - frames)(*rng);
    std::copy_n(source.values.begin() + static_cast<std::ptrdiff_t>(start * source.bins), frames * source.bins,
                out.values.begin());
  } else {
    std::copy(source.values.begin(), source.values.end(), out.values.begin());
  }
  return out;
}

TokenSequence caption_from_labels(std::span<const std::size_t> labels) {
  if (labels.empty()) throw ContractError("caption_from_labels: empty label list");
  TokenSequence t;
  t.ids.reserve(labels.size() + 2);
  t.ids.push_back(tokens::kCls);
  t.ids.insert(t.ids.end(), labels.begin(), labels.end());
  t.ids.push_back(tokens::kEos);
  return t;
}

// ---------------------------------------------------------------------------
// Corpus

void CorpusConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("corpus config: " + what); };
  if (n_train == 0) fail("n_train must be positive");
  if (n_classes == 0) fail("n_classes must be positive");
  if (n_test < 2 * n_classes) fail("n_test must be at least 2 * n_classes");
  if (latent_dim == 0) fail("latent_dim must be positive");
  if (attribute_tokens_per_item > latent_dim) fail("attribute_tokens_per_item exceeds latent_dim");
  if (!(offset_scale > 0.0)) fail("offset_scale must be positive");
  if (audio_noise < 0.0 || visual_noise < 0.0) fail("noise sigma must be non-negative");
  if (audio_frames == 0 || audio_bins == 0 || frame_size == 0) fail("input extents must be positive");
  if (frame_channels != 1 && frame_channels != 3) fail("frame_channels must be 1 or 3");
  if (frames_per_video == 0) fail("frames_per_video must be positive");
  if (vocab_size <= tokens::kFirstFree + n_classes) fail("vocab_size leaves no room for class tokens");
  if (vocab_size > 65536) fail("vocab_size must fit 16-bit token ids");
  if (n_classes > 65535) fail("n_classes must fit 16 bits");
  if (attribute_tokens_per_item > 0 && attribute_bins() < 2) fail("vocab_size leaves fewer than 2 bins per attribute slot");
}

std::size_t CorpusConfig::attribute_bins() const {
  if (attribute_tokens_per_item == 0) return 0;
  return (vocab_size - tokens::kFirstFree - n_classes) / attribute_tokens_per_item;
}

std::size_t CorpusConfig::attribute_token(std::size_t slot, std::size_t bin) const {
  return tokens::kFirstFree + n_classes + slot * attribute_bins() + bin;
}

SyntheticWorld::SyntheticWorld(const CorpusConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x776fu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cfg.latent_dim;
  centroids_.resize(cfg.n_classes * d);
  for (double& v : centroids_) v = normal(rng);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(d));
  audio_map_.resize(cfg.audio_frames * cfg.audio_bins * d);
  for (double& v : audio_map_) v = normal(rng) * map_scale;
  visual_map_.resize(cfg.frame_size * cfg.frame_size * cfg.frame_channels * d);
  for (double& v : visual_map_) v = normal(rng) * map_scale;
}

std::vector<double> SyntheticWorld::latent(std::size_t class_id, std::span<const double> offset) const {
  const std::size_t d = cfg_.latent_dim;
  if (class_id >= cfg_.n_classes || offset.size() != d) throw ContractError("latent: bad class id or offset size");
  std::vector<double> z(d);
  for (std::size_t i = 0; i < d; ++i) z[i] = centroids_[class_id * d + i] + offset[i];
  return z;
}

namespace {
std::vector<double> render(const std::vector<double>& map, std::size_t rows, std::span<const double> z, double sigma,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = z.size();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += map[r * d + i] * z[i];
    out[r] = acc;
  }
  if (sigma > 0.0)
    for (double& v : out) v += sigma * normal(rng);
  return out;
}
}  // namespace

Spectrogram SyntheticWorld::render_audio(std::span<const double> latent, std::mt19937_64& rng) const {
  return {cfg_.audio_frames, cfg_.audio_bins,
          render(audio_map_, cfg_.audio_frames * cfg_.audio_bins, latent, cfg_.audio_noise, rng)};
}

Frame SyntheticWorld::render_frame(std::span<const double> latent, std::mt19937_64& rng) const {
  return {cfg_.frame_size, cfg_.frame_size, cfg_.frame_channels,
          render(visual_map_, cfg_.frame_size * cfg_.frame_size * cfg_.frame_channels, latent, cfg_.visual_noise, rng)};
}

std::vector<std::size_t> SyntheticWorld::labels(std::size_t class_id, std::span<const double> offset) const {
  std::vector<std::size_t> out{cfg_.class_token(class_id)};
  const std::size_t bins = cfg_.attribute_bins();
  for (std::size_t slot = 0; slot < cfg_.attribute_tokens_per_item; ++slot) {
    const double u = standard_normal_cdf(offset[slot] / cfg_.offset_scale);
    const auto bin = std::min(bins - 1, static_cast<std::size_t>(u * static_cast<double>(bins)));
    out.push_back(cfg_.attribute_token(slot, bin));
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& cfg) {
  const SyntheticWorld world(cfg);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x6974u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, cfg.offset_scale);

  Corpus corpus;
  std::set<std::vector<std::size_t>> used;
  const std::size_t total = cfg.n_train + cfg.n_test;
  constexpr int kMaxAttempts = 10000;
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t cls = i % cfg.n_classes;
    std::vector<double> offset(cfg.latent_dim);
    std::vector<std::size_t> labels;
    int attempts = 0;
    do {
      if (++attempts > kMaxAttempts)
        throw ContractError("generate_corpus: attribute vocabulary too small for unique captions");
      for (double& o : offset) o = normal(rng);
      labels = world.labels(cls, offset);
    } while (!used.insert(labels).second);

    const auto z = world.latent(cls, offset);
    TripletExample ex;
    ex.item_id = static_cast<std::uint32_t>(i);
    ex.class_id = static_cast<std::uint16_t>(cls);
    ex.audio = world.render_audio(z, rng);
    for (std::size_t f = 0; f < cfg.frames_per_video; ++f) ex.video_frames.push_back(world.render_frame(z, rng));
    ex.caption = caption_from_labels(labels);
    (i < cfg.n_train ? corpus.train : corpus.test).push_back(std::move(ex));
  }
  return corpus;
}

double nearest_centroid_accuracy(const Corpus& corpus, std::size_t n_classes) {
  if (corpus.train.empty() || corpus.test.empty()) throw ContractError("nearest_centroid_accuracy: empty split");
  const std::size_t dim = corpus.train.front().audio.values.size();
  std::vector<double> centroids(n_classes * dim, 0.0);
  std::vector<std::size_t> counts(n_classes, 0);
  for (const auto& ex : corpus.train) {
    for (std::size_t j = 0; j < dim; ++j) centroids[ex.class_id * dim + j] += ex.audio.values[j];
    ++counts[ex.class_id];
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t j = 0; j < dim; ++j) centroids[c * dim + j] /= static_cast<double>(std::max<std::size_t>(1, counts[c]));
  std::size_t correct = 0;
  for (const auto& ex : corpus.test) {
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (counts[c] == 0) continue;
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = ex.audio.values[j] - centroids[c * dim + j];
        d += diff * diff;
      }
      if (d < best_dist) {
        best_dist = d;
        best = c;
      }
    }
    correct += best == ex.class_id;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.test.size());
}

// ---------------------------------------------------------------------------
// Batching

PatchBatch PatchBatch::stack(std::span<const PatchSequence> items) {
  if (items.empty()) throw ContractError("PatchBatch: no sequences");
  PatchBatch b;
  b.modality = items[0].modality;
  b.batch = items.size();
  b.length = items[0].size();
  b.patch_dim = items[0].patch_dim();
  b.total_patches = items[0].total_patches;
  if (b.length == 0) throw ContractError("PatchBatch: empty patch sequence");
  for (const auto& s : items) {
    if (s.modality != b.modality || s.size() != b.length || s.patch_dim() != b.patch_dim ||
        s.total_patches != b.total_patches)
      throw ContractError("PatchBatch: sequences differ in modality, length, or patch size");
    b.patches.insert(b.patches.end(), s.patches.begin(), s.patches.end());
    b.positions.insert(b.positions.end(), s.positions.begin(), s.positions.end());
  }
  return b;
}

TokenBatch TokenBatch::stack(std::span<const TokenSequence> items) {
  std::size_t len = 0;
  for (const auto& t : items) len = std::max(len, t.size());
  return stack(items, len);
}

TokenBatch TokenBatch::stack(std::span<const TokenSequence> items, std::size_t length) {
  if (items.empty() || length == 0) throw ContractError("TokenBatch: no tokens");
  TokenBatch b;
  b.batch = items.size();
  b.length = length;
  b.ids.assign(b.batch * length, tokens::kPad);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].size() > length) throw ContractError("TokenBatch: sequence longer than batch length");
    std::copy(items[i].ids.begin(), items[i].ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * length));
  }
  return b;
}

TokenSequence TokenBatch::row(std::size_t b) const {
  TokenSequence t;
  t.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(b * length),
               ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * length));
  return t;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

class Writer {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  const std::string& bytes() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  double f64() { return std::bit_cast<double>(get(8)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::uint64_t get(int n) {
    if (pos_ + static_cast<std::size_t>(n) > bytes_.size()) throw FormatError("corpus: truncated record");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xffffffffu) throw ContractError("corpus: extent exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

std::string encode_item(const TripletExample& ex) {
  Writer w;
  w.u32(ex.item_id);
  w.u16(ex.class_id);
  w.u32(checked_u32(ex.audio.frames));
  w.u32(checked_u32(ex.audio.bins));
  for (double v : ex.audio.values) w.f64(v);
  w.u32(checked_u32(ex.video_frames.size()));
  for (const auto& f : ex.video_frames) {
    w.u32(checked_u32(f.height));
    w.u32(checked_u32(f.width));
    w.u32(checked_u32(f.channels));
    for (double v : f.values) w.f64(v);
  }
  w.u32(checked_u32(ex.caption.size()));
  for (std::size_t id : ex.caption.ids) {
    if (id > 0xffff) throw ContractError("corpus: token id exceeds 16 bits");
    w.u16(static_cast<std::uint16_t>(id));
  }
  return w.bytes();
}

TripletExample decode_item(std::string_view bytes) {
  Reader r(bytes);
  TripletExample ex;
  ex.item_id = r.u32();
  ex.class_id = r.u16();
  ex.audio.frames = r.u32();
  ex.audio.bins = r.u32();
  const std::size_t n_audio = ex.audio.frames * ex.audio.bins;
  if (n_audio * 8 > bytes.size()) throw FormatError("corpus: spectrogram extents exceed record");
  ex.audio.values.resize(n_audio);
  for (double& v : ex.audio.values) v = r.f64();
  const std::uint32_t n_frames = r.u32();
  for (std::uint32_t i = 0; i < n_frames; ++i) {
    Frame f;
    f.height = r.u32();
    f.width = r.u32();
    f.channels = r.u32();
    const std::size_t n = f.height * f.width * f.channels;
    if (n * 8 > bytes.size()) throw FormatError("corpus: frame extents exceed record");
    f.values.resize(n);
    for (double& v : f.values) v = r.f64();
    ex.video_frames.push_back(std::move(f));
  }
  const std::uint32_t n_tokens = r.u32();
  if (n_tokens * 2ull > bytes.size()) throw FormatError("corpus: token count exceeds record");
  ex.caption.ids.resize(n_tokens);
  for (std::size_t& id : ex.caption.ids) id = r.u16();
  if (!r.done()) throw FormatError("corpus: record length does not match its contents");
  return ex;
}

}  // namespace

void write_corpus(std::ostream& out, std::span<const TripletExample> items) {
  out << kCorpusHeader << '\n';
  for (const auto& ex : items) {
    const std::string rec = encode_item(ex);
    Writer len;
    len.u32(checked_u32(rec.size()));
    out.write(len.bytes().data(), static_cast<std::streamsize>(len.bytes().size()));
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw IoError("corpus: write failed");
}

std::vector<TripletExample> read_corpus(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header != kCorpusHeader)
    throw FormatError("corpus: expected header '" + std::string(kCorpusHeader) + "', got '" + header.substr(0, 40) +
                      "'");
  std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<TripletExample> items;
  std::size_t pos = 0;
  while (pos < rest.size()) {
    if (pos + 4 > rest.size()) throw FormatError("corpus: truncated length prefix");
    const std::uint32_t len = Reader(std::string_view(rest).substr(pos, 4)).u32();
    pos += 4;
    if (pos + len > rest.size()) throw FormatError("corpus: truncated record");
    items.push_back(decode_item(std::string_view(rest).substr(pos, len)));
    pos += len;
  }
  return items;
}

void write_corpus_file(const std::filesystem::path& path, std::span<const TripletExample> items) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_corpus(out, items);
}

std::vector<TripletExample> read_corpus_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return read_corpus(in);
}

}  // namespace coavt::data
