#pragma once

// Text-to-X retrieval with contrastive candidates and matching re-rank,
// Recall@k, frame-aggregated classification with accuracy/mAP, and
// audio-visual retrieval over mean-pooled query outputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "coavt/dataio.hpp"
#include "coavt/model.hpp"

namespace coavt::eval {

using model::Condition;
using model::Tensor;

enum class Stage : std::uint8_t { kContrastive, kReranked };

struct RankedList {
  std::uint32_t query_id = 0;
  std::vector<std::uint32_t> ids;
  std::vector<double> scores;  // non-increasing
  Stage stage = Stage::kContrastive;
};

/// Top-k of `scores` (one per gallery id), descending, ties by ascending id.
RankedList rank_contrastive(std::uint32_t query_id, std::span<const double> scores,
                            std::span<const std::uint32_t> gallery_ids, std::size_t k);

/// Rescores every candidate with `score(candidate_id)` and stable-sorts
/// descending, so equal scores keep the contrastive order.
RankedList rerank_matching(const RankedList& candidates, const std::function<double(std::uint32_t)>& score);

/// Percent of lists whose ground truth is within the first k entries.
/// `ground_truth[i]` belongs to `lists[i]`.
double recall_at_k(std::span<const RankedList> lists, std::span<const std::uint32_t> ground_truth, std::size_t k);

/// Gallery-side state for text -> X retrieval, computed once.
struct RetrievalIndex {
  Condition cond = Condition::kAV;
  std::vector<std::uint32_t> ids;
  Tensor query_vectors;           // (N, N_q, d), projected and unit-norm
  Tensor text_vectors;            // (N, d), projected t_cls, unit-norm
  Tensor conditioning;            // (N, n, C) joint-layer output for X
  model::Provenance provenance = model::Provenance::kJointAudioVisual;
  data::TokenBatch captions;

  std::size_t size() const { return ids.size(); }
};

/// Central frame per item, no masking, no gradient tracking.
RetrievalIndex build_index(const model::Model& model, std::span<const data::TripletExample> items, Condition cond,
                           std::size_t batch_size = 32);

/// (N_text, N_items) max-over-queries cosine similarities.
std::vector<double> similarity_table(const RetrievalIndex& index);

/// Mean matched probability of (conditioning of `item_rows`, caption of
/// `text_row`) pairs, in one batched forward.
std::vector<double> matching_scores(const model::Model& model, const RetrievalIndex& index, std::size_t text_row,
                                    std::span<const std::size_t> item_rows);

struct RetrievalOptions {
  std::size_t k = 128;  // clipped to the gallery size
  bool rerank = true;
};

struct RetrievalMetrics {
  Condition cond = Condition::kAV;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  std::size_t n_queries = 0;
  std::size_t k = 0;
};

/// Every caption queries the gallery of all items; ground truth is the
/// caption's own item.
RetrievalMetrics text_to_x(const model::Model& model, const RetrievalIndex& index, const RetrievalOptions& options = {},
                           std::vector<RankedList>* lists = nullptr);

/// Post-softmax class probabilities. A: one pass; V and AV: every stored
/// frame is scored and the probabilities are averaged.
std::vector<double> classify(const model::Model& model, const data::TripletExample& item, Condition cond);

/// Arithmetic mean of per-frame probability vectors.
std::vector<double> aggregate_frames(std::span<const std::vector<double>> per_frame);

struct ClassificationMetrics {
  double accuracy = 0.0;  // percent
  double map = 0.0;       // percent, macro one-vs-rest
  std::size_t excluded_classes = 0;  // classes without test items
  std::size_t n_items = 0;
};

/// Average precision of one ranking: `scores` vs binary `relevant`.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> relevant);

/// `scores` is items x n_classes, row-major.
ClassificationMetrics accuracy_and_map(std::span<const double> scores, std::span<const std::size_t> labels,
                                       std::size_t n_classes);

ClassificationMetrics evaluate_classification(const model::Model& model, std::span<const data::TripletExample> items,
                                              Condition cond, std::size_t n_classes);

enum class AvDirection : std::uint8_t { kAudioToVisual, kVisualToAudio };

struct AvRetrievalMetrics {
  AvDirection direction = AvDirection::kAudioToVisual;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  std::size_t n_queries = 0;
};

/// Mean over N_q of Q_A (resp. Q_V), one vector per item, (N, C).
Tensor pooled_queries(const model::Model& model, std::span<const data::TripletExample> items, Condition cond,
                      std::size_t batch_size = 32);

/// Ranks by cosine similarity of pooled vectors, ties by ascending id.
AvRetrievalMetrics av_retrieval_from_vectors(const Tensor& audio, const Tensor& visual,
                                             std::span<const std::uint32_t> ids, AvDirection direction);

AvRetrievalMetrics av_retrieval(const model::Model& model, std::span<const data::TripletExample> items,
                                AvDirection direction);

const char* direction_name(AvDirection d);

std::string to_json(const RetrievalMetrics& m, std::uint64_t seed, const std::string& checkpoint);
std::string to_json(const ClassificationMetrics& m, Condition cond, std::uint64_t seed, const std::string& checkpoint);
std::string to_json(const AvRetrievalMetrics& m, std::uint64_t seed, const std::string& checkpoint);

}  // namespace coavt::eval
