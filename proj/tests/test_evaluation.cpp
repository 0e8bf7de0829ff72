#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "coavt/evaluation.hpp"
#include "fixtures.hpp"

namespace {

using namespace coavt;
using namespace coavt::eval;
using testing_support::micro_corpus;
using testing_support::micro_model_config;

std::vector<std::uint32_t> ids_upto(std::size_t n) {
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  return ids;
}

/// Indices sorted by descending score, ties by ascending id.
std::vector<std::uint32_t> brute_order(const std::vector<double>& scores, const std::vector<std::uint32_t>& ids) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      const auto a = idx[i], b = idx[j];
      if (scores[b] > scores[a] || (scores[b] == scores[a] && ids[b] < ids[a])) std::swap(idx[i], idx[j]);
    }
  std::vector<std::uint32_t> out;
  for (auto i : idx) out.push_back(ids[i]);
  return out;
}

TEST(RankContrastive, FullGalleryGivesFullOrdering) {
  const std::vector<double> scores{0.1, 0.9, 0.4};
  const auto ids = ids_upto(3);
  const auto list = rank_contrastive(7, scores, ids, 3);
  EXPECT_EQ(list.ids, (std::vector<std::uint32_t>{1, 2, 0}));
  EXPECT_EQ(list.scores, (std::vector<double>{0.9, 0.4, 0.1}));
  EXPECT_EQ(list.query_id, 7u);
  EXPECT_EQ(list.stage, Stage::kContrastive);
}

TEST(RankContrastive, PerfectScoreRanksFirst) {
  const std::vector<double> scores{0.2, 0.3, 1.0, -0.5};
  const auto ids = ids_upto(4);
  EXPECT_EQ(rank_contrastive(2, scores, ids, 2).ids.front(), 2u);
}

TEST(RankContrastive, MatchesBruteForceSortWithTies) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> level(0, 4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(10);
    for (double& s : scores) s = 0.1 * level(rng);  // forces ties
    std::vector<std::uint32_t> ids{40, 3, 17, 9, 22, 1, 8, 30, 12, 5};
    std::shuffle(ids.begin(), ids.end(), rng);
    EXPECT_EQ(rank_contrastive(0, scores, ids, 10).ids, brute_order(scores, ids));
    const auto top4 = rank_contrastive(0, scores, ids, 4).ids;
    const auto full = brute_order(scores, ids);
    EXPECT_EQ(top4, std::vector<std::uint32_t>(full.begin(), full.begin() + 4));
  }
}

TEST(RankContrastive, RejectsEmptyGalleryAndLargeK) {
  EXPECT_THROW(rank_contrastive(0, {}, {}, 0), ContractError);
  const std::vector<double> s{1.0};
  const auto ids = ids_upto(1);
  EXPECT_THROW(rank_contrastive(0, s, ids, 2), ContractError);
}

TEST(Rerank, SingleCandidateIsUnchanged) {
  const std::vector<double> s{0.2, 0.7};
  const auto ids = ids_upto(2);
  const auto list = rank_contrastive(0, s, ids, 1);
  const auto out = rerank_matching(list, [](std::uint32_t id) { return id == 1 ? 0.0 : 1.0; });
  EXPECT_EQ(out.ids, list.ids);
  EXPECT_EQ(out.stage, Stage::kReranked);
}

TEST(Rerank, MatchingScoresInvertTopTwo) {
  const std::vector<double> s{0.9, 0.8};
  const std::vector<std::uint32_t> ids{11, 12};
  const auto list = rank_contrastive(0, s, ids, 2);
  ASSERT_EQ(list.ids, (std::vector<std::uint32_t>{11, 12}));
  const auto out = rerank_matching(list, [](std::uint32_t id) { return id == 11 ? 0.3 : 0.95; });
  EXPECT_EQ(out.ids, (std::vector<std::uint32_t>{12, 11}));
  EXPECT_EQ(out.scores, (std::vector<double>{0.95, 0.3}));
}

TEST(Rerank, EqualScoresKeepContrastiveOrder) {
  const std::vector<double> s{0.1, 0.5, 0.5, 0.9};
  const auto ids = ids_upto(4);
  const auto list = rank_contrastive(0, s, ids, 4);
  EXPECT_EQ(rerank_matching(list, [](std::uint32_t) { return 0.5; }).ids, list.ids);
}

TEST(Rerank, ReturnsPermutationOfCandidates) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + trial % 20;
    std::vector<double> s(n);
    for (double& v : s) v = u(rng);
    const auto ids = ids_upto(n);
    const auto list = rank_contrastive(0, s, ids, std::max<std::size_t>(1, n / 2));
    std::vector<double> m(n);
    for (double& v : m) v = u(rng);
    const auto out = rerank_matching(list, [&](std::uint32_t id) { return m[id]; });
    EXPECT_TRUE(std::is_permutation(out.ids.begin(), out.ids.end(), list.ids.begin(), list.ids.end()));
    EXPECT_TRUE(std::is_sorted(out.scores.rbegin(), out.scores.rend()));
  }
}

TEST(Rerank, RejectsAlreadyRerankedList) {
  const std::vector<double> s{0.1};
  const auto ids = ids_upto(1);
  const auto once = rerank_matching(rank_contrastive(0, s, ids, 1), [](std::uint32_t) { return 1.0; });
  EXPECT_THROW(rerank_matching(once, [](std::uint32_t) { return 1.0; }), ContractError);
}

TEST(Recall, RankOneEverywhereIsHundred) {
  const std::vector<double> s{1.0, 0.0};
  const auto ids = ids_upto(2);
  const std::vector<RankedList> lists{rank_contrastive(0, s, ids, 2)};
  const std::vector<std::uint32_t> truth{0};
  EXPECT_EQ(recall_at_k(lists, truth, 1), 100.0);
}

TEST(Recall, MonotoneInKAndRejectsMissingTruth) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<RankedList> lists;
  std::vector<std::uint32_t> truth;
  const auto ids = ids_upto(20);
  for (std::uint32_t q = 0; q < 20; ++q) {
    std::vector<double> s(20);
    for (double& v : s) v = u(rng);
    lists.push_back(rank_contrastive(q, s, ids, 20));
    truth.push_back(q);
  }
  double prev = 0.0;
  for (std::size_t k = 1; k <= 20; ++k) {
    const double r = recall_at_k(lists, truth, k);
    EXPECT_GE(r, prev);
    prev = r;
  }
  EXPECT_EQ(prev, 100.0);
  const std::vector<std::uint32_t> short_truth{0};
  EXPECT_THROW(recall_at_k(lists, short_truth, 1), ContractError);
}

TEST(Recall, RandomRankingOverGallery128IsChance) {
  std::mt19937_64 rng(4);
  const auto ids = ids_upto(128);
  const std::vector<std::uint32_t> truth{0};
  double total = 0.0;
  const int shuffles = 10000;
  for (int t = 0; t < shuffles; ++t) {
    RankedList list;
    list.ids = ids;
    std::shuffle(list.ids.begin(), list.ids.end(), rng);
    list.scores.assign(128, 0.0);
    total += recall_at_k(std::span<const RankedList>(&list, 1), truth, 1);
  }
  EXPECT_NEAR(total / shuffles, 100.0 / 128.0, 0.3);
}

TEST(Aggregation, MeanOfFrameProbabilities) {
  const std::vector<std::vector<double>> two{{0.2, 0.8}, {0.6, 0.4}};
  const auto mean = aggregate_frames(two);
  EXPECT_NEAR(mean[0], 0.4, 1e-15);
  EXPECT_NEAR(mean[1], 0.6, 1e-15);
  const std::vector<std::vector<double>> one{{0.3, 0.7}};
  EXPECT_EQ(aggregate_frames(one), one[0]);
}

TEST(Classify, VisualAveragesEveryFramePass) {
  auto ccfg = testing_support::micro_corpus_config(5);
  ccfg.frames_per_video = 10;
  const auto corpus = data::generate_corpus(ccfg);
  const auto mcfg = micro_model_config();
  model::Model m(mcfg, 4);
  m.add_classifier(model::Condition::kV, 4, 9);
  const auto& item = corpus.test[0];
  std::vector<double> expected(4, 0.0);
  for (const auto& frame : item.video_frames) {
    const std::vector<data::PatchSequence> seq{data::patchify(frame, mcfg.visual_patch)};
    const auto pb = data::PatchBatch::stack(seq);
    const auto logits = m.classify_logits(model::Condition::kV, nullptr, &pb);
    double z = 0.0;
    for (double l : logits.values()) z += std::exp(l);
    for (std::size_t k = 0; k < 4; ++k) expected[k] += std::exp(logits.values()[k]) / z / 10.0;
  }
  const auto got = classify(m, item, model::Condition::kV);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(got[k], expected[k], 1e-12);
  EXPECT_THROW(classify(m, item, model::Condition::kA), ContractError);
}

TEST(AveragePrecision, HandWorkedFixture) {
  // ranks of relevant items: 1, 3, 5 -> (1/1 + 2/3 + 3/5) / 3
  const std::vector<double> scores{0.5, 0.9, 0.6, 0.7, 0.8};
  const std::vector<std::uint8_t> relevant{1, 1, 0, 1, 0};
  EXPECT_NEAR(average_precision(scores, relevant), (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0, 1e-15);
  const std::vector<std::uint8_t> none{0, 0, 0, 0, 0};
  EXPECT_THROW(average_precision(scores, none), ContractError);
}

TEST(AccuracyAndMap, PerfectScores) {
  const std::vector<double> scores{0.9, 0.1, 0.2, 0.8, 0.7, 0.3};
  const std::vector<std::size_t> labels{0, 1, 0};
  const auto m = accuracy_and_map(scores, labels, 2);
  EXPECT_EQ(m.accuracy, 100.0);
  EXPECT_EQ(m.map, 100.0);
  EXPECT_EQ(m.n_items, 3u);
}

TEST(AccuracyAndMap, UniformScoresAreChance) {
  std::vector<double> scores(64 * 16, 1.0 / 16);
  std::vector<std::size_t> labels(64);
  for (std::size_t i = 0; i < 64; ++i) labels[i] = i % 16;
  EXPECT_NEAR(accuracy_and_map(scores, labels, 16).accuracy, 6.25, 1e-12);
}

TEST(AccuracyAndMap, MacroAverageExcludesAbsentClasses) {
  // 5 items, 3 classes, class 2 absent
  const std::vector<double> scores{0.6, 0.3, 0.1,  //
                                   0.4, 0.5, 0.1,  //
                                   0.2, 0.7, 0.1,  //
                                   0.5, 0.4, 0.1,  //
                                   0.3, 0.6, 0.1};
  const std::vector<std::size_t> labels{0, 0, 1, 1, 1};
  const auto m = accuracy_and_map(scores, labels, 3);
  // class 0 ranking by column 0: items 0,3,1,4,2 -> relevant at 1 and 3
  const double ap0 = (1.0 + 2.0 / 3.0) / 2.0;
  // class 1 ranking by column 1: items 2,4,1,3,0 -> relevant at 1, 2, 4
  const double ap1 = (1.0 + 1.0 + 3.0 / 4.0) / 3.0;
  EXPECT_NEAR(m.map, 100.0 * (ap0 + ap1) / 2.0, 1e-12);
  EXPECT_NEAR(m.accuracy, 60.0, 1e-12);
  EXPECT_EQ(m.excluded_classes, 1u);
}

TEST(AvRetrieval, SingleItemRetrievesItself) {
  const auto a = diff::Tensor::constant({1, 3}, {1, 2, 3});
  const auto v = diff::Tensor::constant({1, 3}, {-1, 0, 2});
  const std::vector<std::uint32_t> ids{5};
  EXPECT_EQ(av_retrieval_from_vectors(a, v, ids, AvDirection::kAudioToVisual).r1, 100.0);
}

TEST(AvRetrieval, MeanPoolOfIdenticalRowsIsTheRow) {
  const auto q = diff::Tensor::constant({1, 3, 2}, {0.5, -1, 0.5, -1, 0.5, -1});
  const auto pooled = diff::mean_pool(q);
  EXPECT_EQ(pooled.values()[0], 0.5);
  EXPECT_EQ(pooled.values()[1], -1.0);
}

TEST(AvRetrieval, MatchesBruteForceCosineRanking) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  const std::size_t N = 20, C = 6;
  std::vector<double> av(N * C), vv(N * C);
  for (std::size_t i = 0; i < N * C; ++i) {
    av[i] = n(rng);
    vv[i] = 0.6 * av[i] + n(rng);
  }
  const auto ids = ids_upto(N);
  const auto a = diff::Tensor::constant({N, C}, av);
  const auto v = diff::Tensor::constant({N, C}, vv);
  auto cosine = [&](const std::vector<double>& x, std::size_t i, const std::vector<double>& y, std::size_t j) {
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t c = 0; c < C; ++c) {
      dot += x[i * C + c] * y[j * C + c];
      nx += x[i * C + c] * x[i * C + c];
      ny += y[j * C + c] * y[j * C + c];
    }
    return dot / std::sqrt(nx * ny);
  };
  for (auto dir : {AvDirection::kAudioToVisual, AvDirection::kVisualToAudio}) {
    const auto& query = dir == AvDirection::kAudioToVisual ? av : vv;
    const auto& gallery = dir == AvDirection::kAudioToVisual ? vv : av;
    double hits[3] = {0, 0, 0};
    for (std::size_t q = 0; q < N; ++q) {
      std::vector<double> s(N);
      for (std::size_t g = 0; g < N; ++g) s[g] = cosine(query, q, gallery, g);
      const auto order = brute_order(s, ids);
      const auto rank = std::find(order.begin(), order.end(), q) - order.begin();
      hits[0] += rank < 1;
      hits[1] += rank < 5;
      hits[2] += rank < 10;
    }
    const auto m = av_retrieval_from_vectors(a, v, ids, dir);
    EXPECT_NEAR(m.r1, 100.0 * hits[0] / N, 1e-9);
    EXPECT_NEAR(m.r5, 100.0 * hits[1] / N, 1e-9);
    EXPECT_NEAR(m.r10, 100.0 * hits[2] / N, 1e-9);
    EXPECT_EQ(m.n_queries, N);
  }
  EXPECT_THROW(av_retrieval_from_vectors(diff::Tensor::zeros({0, 0}), diff::Tensor::zeros({0, 0}), {}, AvDirection::kAudioToVisual),
               std::exception);
}

class RetrievalTest : public ::testing::Test {
 protected:
  model::Model model{micro_model_config(), 12};
};

TEST_F(RetrievalTest, IndexVectorsAreUnitNorm) {
  const auto index = build_index(model, micro_corpus().test, model::Condition::kAV);
  EXPECT_EQ(index.size(), micro_corpus().test.size());
  const std::size_t d = index.text_vectors.extent(1);
  for (std::size_t r = 0; r < index.query_vectors.numel() / d; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::pow(index.query_vectors.values()[r * d + c], 2);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (std::size_t r = 0; r < index.size(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::pow(index.text_vectors.values()[r * d + c], 2);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST_F(RetrievalTest, RejectsDuplicateIds) {
  std::vector<data::TripletExample> items{micro_corpus().test[0], micro_corpus().test[0]};
  EXPECT_THROW(build_index(model, items, model::Condition::kA), ContractError);
}

TEST_F(RetrievalTest, EvaluationIsSideEffectFree) {
  const auto first = build_index(model, micro_corpus().test, model::Condition::kV);
  const auto second = build_index(model, micro_corpus().test, model::Condition::kV);
  EXPECT_EQ(similarity_table(first), similarity_table(second));
  const auto m1 = text_to_x(model, first);
  const auto m2 = text_to_x(model, second);
  EXPECT_EQ(m1.r1, m2.r1);
  EXPECT_EQ(m1.r10, m2.r10);
  EXPECT_EQ(m1.k, micro_corpus().test.size());
}

TEST_F(RetrievalTest, RerankPermutesContrastiveCandidates) {
  const auto index = build_index(model, micro_corpus().test, model::Condition::kAV);
  RetrievalOptions contrastive_only{4, false};
  RetrievalOptions reranked{4, true};
  std::vector<RankedList> a, b;
  text_to_x(model, index, contrastive_only, &a);
  text_to_x(model, index, reranked, &b);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].stage, Stage::kContrastive);
    EXPECT_EQ(b[i].stage, Stage::kReranked);
    EXPECT_TRUE(std::is_permutation(a[i].ids.begin(), a[i].ids.end(), b[i].ids.begin(), b[i].ids.end()));
  }
}

TEST_F(RetrievalTest, FullGalleryRecallIsHundred) {
  const auto index = build_index(model, micro_corpus().test, model::Condition::kA);
  std::vector<RankedList> lists;
  text_to_x(model, index, {index.size(), false}, &lists);
  std::vector<std::uint32_t> truth;
  for (const auto& l : lists) truth.push_back(l.query_id);
  EXPECT_EQ(recall_at_k(lists, truth, index.size()), 100.0);
}

TEST_F(RetrievalTest, MatchingScoresAreProbabilities) {
  const auto index = build_index(model, micro_corpus().test, model::Condition::kAV);
  const std::vector<std::size_t> rows{0, 1, 2};
  for (double s : matching_scores(model, index, 0, rows)) {
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
}

TEST(MetricsJson, CarriesTheDocumentedKeys) {
  RetrievalMetrics r;
  const auto js = to_json(r, 3, "x.ckpt");
  for (const char* key : {"\"task\"", "\"modality\"", "\"R@1\"", "\"R@5\"", "\"R@10\"", "\"n_queries\"", "\"k\"",
                          "\"seed\"", "\"checkpoint\""})
    EXPECT_NE(js.find(key), std::string::npos) << key;
  const auto cj = to_json(ClassificationMetrics{}, model::Condition::kV, 3, "");
  EXPECT_NE(cj.find("\"mAP\""), std::string::npos);
  EXPECT_NE(cj.find("\"accuracy\""), std::string::npos);
}

}  // namespace
