#include "coavt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "coavt/trainer.hpp"

namespace coavt::eval {

namespace diff = coavt::diff;

RankedList rank_contrastive(std::uint32_t query_id, std::span<const double> scores,
                            std::span<const std::uint32_t> gallery_ids, std::size_t k) {
  if (gallery_ids.empty()) throw ContractError("rank_contrastive: empty gallery");
  if (scores.size() != gallery_ids.size()) throw ShapeError("rank_contrastive: one score per gallery item required");
  if (k == 0 || k > gallery_ids.size())
    throw ContractError("rank_contrastive: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(gallery_ids.size()) + "]");
  std::vector<std::size_t> order(gallery_ids.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return gallery_ids[a] < gallery_ids[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  RankedList out{query_id, {}, {}, Stage::kContrastive};
  for (std::size_t i = 0; i < k; ++i) {
    out.ids.push_back(gallery_ids[order[i]]);
    out.scores.push_back(scores[order[i]]);
  }
  return out;
}

RankedList rerank_matching(const RankedList& candidates, const std::function<double(std::uint32_t)>& score) {
  if (candidates.stage != Stage::kContrastive) throw ContractError("rerank_matching: list is already re-ranked");
  std::vector<std::pair<std::uint32_t, double>> rows;
  rows.reserve(candidates.ids.size());
  for (std::uint32_t id : candidates.ids) rows.emplace_back(id, score(id));
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  RankedList out{candidates.query_id, {}, {}, Stage::kReranked};
  for (const auto& [id, s] : rows) {
    out.ids.push_back(id);
    out.scores.push_back(s);
  }
  return out;
}

double recall_at_k(std::span<const RankedList> lists, std::span<const std::uint32_t> ground_truth, std::size_t k) {
  if (lists.empty()) throw ContractError("recall_at_k: no queries");
  if (ground_truth.size() != lists.size()) throw ContractError("recall_at_k: missing ground truth for some queries");
  if (k == 0) throw ContractError("recall_at_k: k must be positive");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const auto& ids = lists[i].ids;
    const auto end = ids.begin() + static_cast<std::ptrdiff_t>(std::min(k, ids.size()));
    hits += std::find(ids.begin(), end, ground_truth[i]) != end;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(lists.size());
}

// ---------------------------------------------------------------------------

namespace {

struct Rows {
  std::vector<double> values;
  diff::Shape tail;
  std::size_t count = 0;

  void append(const Tensor& t) {
    const auto v = t.values();
    values.insert(values.end(), v.begin(), v.end());
    tail.assign(t.shape().begin() + 1, t.shape().end());
    count += t.extent(0);
  }
  Tensor tensor() const {
    diff::Shape s{count};
    s.insert(s.end(), tail.begin(), tail.end());
    return Tensor::constant(std::move(s), values);
  }
};

objectives::Batch central_batch(const model::Model& model, std::span<const data::TripletExample> items,
                                std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  std::mt19937_64 unused(0);
  return train::make_batch(items, idx, model.config(), train::FrameChoice::kCentral, 0.0, 0.0, unused);
}

void check_items(std::span<const data::TripletExample> items, const char* what) {
  if (items.empty()) throw ContractError(std::string(what) + ": empty item set");
}

}  // namespace

RetrievalIndex build_index(const model::Model& model, std::span<const data::TripletExample> items, Condition cond,
                           std::size_t batch_size) {
  check_items(items, "build_index");
  if (batch_size == 0) throw ContractError("build_index: batch_size must be positive");
  diff::NoGradGuard no_grad;
  const auto& enc = model.encoders();
  const auto& proj = model.heads().projection;
  RetrievalIndex index;
  index.cond = cond;
  Rows queries, texts, conds;
  std::vector<data::TokenSequence> captions;
  for (std::size_t begin = 0; begin < items.size(); begin += batch_size) {
    const std::size_t end = std::min(items.size(), begin + batch_size);
    const auto batch = central_batch(model, items, begin, end);
    const auto c = enc.condition(cond, &batch.audio, &batch.visual);
    index.provenance = c.provenance;
    const auto q = enc.query_forward(c, model::QueryMode::kExtract);
    queries.append(proj.project_queries(q.queries.outputs));
    texts.append(proj.project_text(enc.encode_text(batch.captions).cls));
    conds.append(c.vectors);
  }
  std::set<std::uint32_t> unique;
  for (const auto& item : items) {
    if (!unique.insert(item.item_id).second) throw ContractError("build_index: duplicate item id");
    index.ids.push_back(item.item_id);
    captions.push_back(item.caption);
  }
  index.query_vectors = queries.tensor();
  index.text_vectors = texts.tensor();
  index.conditioning = conds.tensor();
  index.captions = data::TokenBatch::stack(captions);
  return index;
}

std::vector<double> similarity_table(const RetrievalIndex& index) {
  const std::size_t n = index.size();
  const std::size_t nq = index.query_vectors.extent(1);
  const std::size_t d = index.query_vectors.extent(2);
  const auto q = index.query_vectors.values();
  const auto t = index.text_vectors.values();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ti = t.data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < nq; ++r) {
        const double* qr = q.data() + (j * nq + r) * d;
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += qr[c] * ti[c];
        best = std::max(best, dot);
      }
      out[i * n + j] = best;
    }
  }
  return out;
}

std::vector<double> matching_scores(const model::Model& model, const RetrievalIndex& index, std::size_t text_row,
                                    std::span<const std::size_t> item_rows) {
  if (item_rows.empty()) return {};
  diff::NoGradGuard no_grad;
  const std::size_t len = index.captions.length;
  data::TokenBatch texts{item_rows.size(), len, {}};
  const auto first = index.captions.ids.begin() + static_cast<std::ptrdiff_t>(text_row * len);
  for (std::size_t i = 0; i < item_rows.size(); ++i) texts.ids.insert(texts.ids.end(), first, first + static_cast<std::ptrdiff_t>(len));
  const model::EmbeddingSequence cond{diff::gather_batch(index.conditioning, item_rows), index.provenance};
  const auto out = model.encoders().query_forward(cond, model::QueryMode::kMatch, &texts);
  return objectives::matching_scores(out.queries, model.heads().matching);
}

RetrievalMetrics text_to_x(const model::Model& model, const RetrievalIndex& index, const RetrievalOptions& options,
                           std::vector<RankedList>* lists) {
  if (index.size() == 0) throw ContractError("text_to_x: empty gallery");
  const std::size_t n = index.size();
  const std::size_t k = std::min(options.k, n);
  const auto sims = similarity_table(index);
  std::map<std::uint32_t, std::size_t> row_of;
  for (std::size_t j = 0; j < n; ++j) row_of[index.ids[j]] = j;

  std::vector<RankedList> ranked;
  ranked.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    RankedList list = rank_contrastive(index.ids[i], std::span(sims).subspan(i * n, n), index.ids, k);
    if (options.rerank && k > 1) {
      std::vector<std::size_t> rows;
      for (std::uint32_t id : list.ids) rows.push_back(row_of.at(id));
      const auto scores = matching_scores(model, index, i, rows);
      std::map<std::uint32_t, double> by_id;
      for (std::size_t c = 0; c < rows.size(); ++c) by_id[list.ids[c]] = scores[c];
      list = rerank_matching(list, [&](std::uint32_t id) { return by_id.at(id); });
    }
    ranked.push_back(std::move(list));
  }
  RetrievalMetrics m;
  m.cond = index.cond;
  m.n_queries = n;
  m.k = k;
  m.r1 = recall_at_k(ranked, index.ids, 1);
  m.r5 = recall_at_k(ranked, index.ids, 5);
  m.r10 = recall_at_k(ranked, index.ids, 10);
  if (lists) *lists = std::move(ranked);
  return m;
}

// ---------------------------------------------------------------------------

std::vector<double> aggregate_frames(std::span<const std::vector<double>> per_frame) {
  if (per_frame.empty()) throw ContractError("aggregate_frames: no frames");
  std::vector<double> out(per_frame[0].size(), 0.0);
  for (const auto& p : per_frame) {
    if (p.size() != out.size()) throw ShapeError("aggregate_frames: frames disagree on class count");
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += p[c];
  }
  for (double& v : out) v /= static_cast<double>(per_frame.size());
  return out;
}

std::vector<double> classify(const model::Model& model, const data::TripletExample& item, Condition cond) {
  model.classifier(cond);  // throws when missing
  diff::NoGradGuard no_grad;
  const auto& mcfg = model.config();
  if (item.video_frames.empty()) throw ContractError("classify: item has no frames");
  const std::size_t frames = cond == Condition::kA ? 1 : item.video_frames.size();
  const data::Spectrogram audio =
      item.audio.frames == mcfg.audio_frames ? item.audio : data::crop_or_pad(item.audio, mcfg.audio_frames, nullptr);
  const auto a = data::patchify(audio, mcfg.audio_patch);
  std::vector<data::PatchSequence> as(frames, a), vs;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t which = cond == Condition::kA ? train::central_frame(item.video_frames.size()) : f;
    vs.push_back(data::patchify(item.video_frames[which], mcfg.visual_patch));
  }
  const auto ab = data::PatchBatch::stack(as);
  const auto vb = data::PatchBatch::stack(vs);
  const Tensor probs = diff::softmax(model.classify_logits(cond, &ab, &vb));
  const std::size_t k = probs.extent(1);
  std::vector<std::vector<double>> per_frame;
  for (std::size_t f = 0; f < frames; ++f) {
    const auto row = probs.values().subspan(f * k, k);
    per_frame.emplace_back(row.begin(), row.end());
  }
  return aggregate_frames(per_frame);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> relevant) {
  if (scores.size() != relevant.size()) throw ShapeError("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!relevant[order[r]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) throw ContractError("average_precision: no relevant items");
  return sum / static_cast<double>(hits);
}

ClassificationMetrics accuracy_and_map(std::span<const double> scores, std::span<const std::size_t> labels,
                                       std::size_t n_classes) {
  if (labels.empty()) throw ContractError("accuracy_and_map: no items");
  if (n_classes == 0 || scores.size() != labels.size() * n_classes)
    throw ShapeError("accuracy_and_map: scores must be items x classes");
  ClassificationMetrics m;
  m.n_items = labels.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) throw ContractError("accuracy_and_map: label out of range");
    const auto row = scores.subspan(i * n_classes, n_classes);
    correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i];
  }
  m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
  double ap_sum = 0.0;
  std::size_t used = 0;
  std::vector<double> column(labels.size());
  std::vector<std::uint8_t> rel(labels.size());
  for (std::size_t c = 0; c < n_classes; ++c) {
    bool any = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      column[i] = scores[i * n_classes + c];
      rel[i] = labels[i] == c;
      any = any || rel[i];
    }
    if (!any) {
      ++m.excluded_classes;
      continue;
    }
    ap_sum += average_precision(column, rel);
    ++used;
  }
  m.map = used == 0 ? 0.0 : 100.0 * ap_sum / static_cast<double>(used);
  return m;
}

ClassificationMetrics evaluate_classification(const model::Model& model, std::span<const data::TripletExample> items,
                                              Condition cond, std::size_t n_classes) {
  check_items(items, "evaluate_classification");
  std::vector<double> scores;
  std::vector<std::size_t> labels;
  for (const auto& item : items) {
    const auto p = classify(model, item, cond);
    if (p.size() != n_classes) throw ContractError("evaluate_classification: head class count differs from n_classes");
    scores.insert(scores.end(), p.begin(), p.end());
    labels.push_back(item.class_id);
  }
  return accuracy_and_map(scores, labels, n_classes);
}

// ---------------------------------------------------------------------------

Tensor pooled_queries(const model::Model& model, std::span<const data::TripletExample> items, Condition cond,
                      std::size_t batch_size) {
  check_items(items, "av_retrieval");
  if (cond == Condition::kAV) throw ContractError("pooled_queries: expects a single modality");
  diff::NoGradGuard no_grad;
  Rows rows;
  for (std::size_t begin = 0; begin < items.size(); begin += batch_size) {
    const std::size_t end = std::min(items.size(), begin + batch_size);
    const auto batch = central_batch(model, items, begin, end);
    const auto c = model.encoders().condition(cond, &batch.audio, &batch.visual);
    rows.append(diff::mean_pool(model.encoders().query_forward(c, model::QueryMode::kExtract).queries.outputs));
  }
  return rows.tensor();
}

AvRetrievalMetrics av_retrieval_from_vectors(const Tensor& audio, const Tensor& visual,
                                             std::span<const std::uint32_t> ids, AvDirection direction) {
  if (ids.empty()) throw ContractError("av_retrieval: empty item set");
  if (audio.shape() != visual.shape() || audio.rank() != 2 || audio.extent(0) != ids.size())
    throw ShapeError("av_retrieval: expects two (N, C) tensors with one row per id");
  diff::NoGradGuard no_grad;
  const Tensor a = diff::l2_normalize(audio);
  const Tensor v = diff::l2_normalize(visual);
  const Tensor& src = direction == AvDirection::kAudioToVisual ? a : v;
  const Tensor& dst = direction == AvDirection::kAudioToVisual ? v : a;
  const std::size_t n = ids.size();
  const std::size_t c = audio.extent(1);
  std::vector<RankedList> lists;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> scores(n);
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t x = 0; x < c; ++x) dot += src.values()[i * c + x] * dst.values()[j * c + x];
      scores[j] = dot;
    }
    lists.push_back(rank_contrastive(ids[i], scores, ids, std::min<std::size_t>(n, 10)));
  }
  AvRetrievalMetrics m{direction, recall_at_k(lists, ids, 1), recall_at_k(lists, ids, 5), recall_at_k(lists, ids, 10),
                       n};
  return m;
}

AvRetrievalMetrics av_retrieval(const model::Model& model, std::span<const data::TripletExample> items,
                                AvDirection direction) {
  check_items(items, "av_retrieval");
  std::vector<std::uint32_t> ids;
  for (const auto& item : items) ids.push_back(item.item_id);
  return av_retrieval_from_vectors(pooled_queries(model, items, Condition::kA),
                                   pooled_queries(model, items, Condition::kV), ids, direction);
}

const char* direction_name(AvDirection d) { return d == AvDirection::kAudioToVisual ? "a2v" : "v2a"; }

std::string to_json(const RetrievalMetrics& m, std::uint64_t seed, const std::string& checkpoint) {
  return nlohmann::json{{"task", "retrieval"}, {"modality", model::condition_name(m.cond)},
                        {"R@1", m.r1},         {"R@5", m.r5},
                        {"R@10", m.r10},       {"n_queries", m.n_queries},
                        {"k", m.k},            {"seed", seed},
                        {"checkpoint", checkpoint}}
      .dump();
}

std::string to_json(const ClassificationMetrics& m, Condition cond, std::uint64_t seed,
                    const std::string& checkpoint) {
  return nlohmann::json{{"task", "classification"},
                        {"modality", model::condition_name(cond)},
                        {"accuracy", m.accuracy},
                        {"mAP", m.map},
                        {"excluded_classes", m.excluded_classes},
                        {"n_queries", m.n_items},
                        {"seed", seed},
                        {"checkpoint", checkpoint}}
      .dump();
}

std::string to_json(const AvRetrievalMetrics& m, std::uint64_t seed, const std::string& checkpoint) {
  return nlohmann::json{{"task", "av-retrieval"}, {"direction", direction_name(m.direction)},
                        {"R@1", m.r1},            {"R@5", m.r5},
                        {"R@10", m.r10},          {"n_queries", m.n_queries},
                        {"seed", seed},           {"checkpoint", checkpoint}}
      .dump();
}

}  // namespace coavt::eval
