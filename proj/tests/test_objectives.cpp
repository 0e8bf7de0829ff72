#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "coavt/model.hpp"
#include "coavt/objectives.hpp"
#include "fixtures.hpp"
#include "gradcheck_suite.hpp"

namespace {

using namespace coavt;
using namespace coavt::objectives;
using diff::Shape;
using diff::Tensor;
using testing_support::micro_batch;
using testing_support::micro_model_config;

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(diff::numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

std::vector<double> project_and_normalize(std::span<const double> x, const model::Linear& lin) {
  const std::size_t in = lin.weight.extent(0), out = lin.weight.extent(1);
  std::vector<double> y(out);
  for (std::size_t j = 0; j < out; ++j) {
    double s = lin.bias.values()[j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * lin.weight.values()[i * out + j];
    y[j] = s;
  }
  double norm = 0.0;
  for (double v : y) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : y) v /= norm;
  return y;
}

double brute_similarity(const Tensor& q, const Tensor& t, const ProjectionHead& head) {
  const std::size_t nq = q.extent(1), c = q.extent(2);
  const auto tp = project_and_normalize(t.values().subspan(0, c), head.text);
  double best = -2.0;
  for (std::size_t i = 0; i < nq; ++i) {
    const auto qp = project_and_normalize(q.values().subspan(i * c, c), head.query);
    double dot = 0.0;
    for (std::size_t k = 0; k < qp.size(); ++k) dot += qp[k] * tp[k];
    best = std::max(best, dot);
  }
  return best;
}

ProjectionHead make_projection(std::size_t hidden, std::size_t proj, std::uint64_t seed) {
  model::Initializer init(seed, 0.3);
  return ProjectionHead::make(init, hidden, proj);
}

TEST(Similarity, MatchesBruteForceOverAllQueries) {
  const auto head = make_projection(64, 32, 1);
  const model::QueryBlockOutput q{random_tensor({1, 16, 64}, 2), model::Condition::kAV};
  const auto t = random_tensor({1, 64}, 3);
  const double s = similarity(q, t, head);
  EXPECT_NEAR(s, brute_similarity(q.outputs, t, head), 1e-12);
  EXPECT_LE(std::abs(s), 1.0);
}

TEST(Similarity, EqualQueriesGiveTheSingleCosine) {
  const auto head = make_projection(8, 4, 4);
  auto row = random_tensor({1, 1, 8}, 5);
  std::vector<double> rep;
  for (int i = 0; i < 3; ++i) rep.insert(rep.end(), row.values().begin(), row.values().end());
  const model::QueryBlockOutput q3{Tensor::constant({1, 3, 8}, rep), model::Condition::kA};
  const model::QueryBlockOutput q1{row, model::Condition::kA};
  const auto t = random_tensor({8}, 6);
  EXPECT_NEAR(similarity(q3, t, head), similarity(q1, t, head), 1e-15);
}

TEST(Similarity, InvariantUnderQueryPermutation) {
  const auto head = make_projection(8, 4, 7);
  const auto q = random_tensor({1, 5, 8}, 8);
  std::vector<double> reversed;
  for (std::size_t i = 5; i-- > 0;) reversed.insert(reversed.end(), q.values().begin() + i * 8, q.values().begin() + (i + 1) * 8);
  const auto t = random_tensor({8}, 9);
  EXPECT_EQ(similarity({q, model::Condition::kV}, t, head),
            similarity({Tensor::constant({1, 5, 8}, reversed), model::Condition::kV}, t, head));
}

TEST(Similarity, MatrixEntriesAgreeWithPairwiseScore) {
  const auto head = make_projection(8, 4, 10);
  const auto q = random_tensor({3, 4, 8}, 11);
  const auto t = random_tensor({3, 8}, 12);
  const auto sim = similarity_matrix({q, model::Condition::kAV}, t, head);
  ASSERT_EQ(sim.shape(), (Shape{3, 3}));
  for (std::size_t i = 0; i < 3; ++i) {
    const model::QueryBlockOutput qi{diff::gather_batch(q, std::vector<std::size_t>{i}), model::Condition::kAV};
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(sim.values()[i * 3 + j], similarity(qi, diff::gather_batch(t, std::vector<std::size_t>{j}), head),
                  1e-14);
  }
}

TEST(Contrastive, SingleItemIsZero) {
  EXPECT_EQ(contrastive_loss(Tensor::constant({1, 1}, {0.4}), 0.07).loss.item(), 0.0);
}

TEST(Contrastive, EqualEntriesGiveLogB) {
  EXPECT_NEAR(contrastive_loss(Tensor::full({4, 4}, 0.2), 0.07).loss.item(), std::log(4.0), 1e-12);
}

TEST(Contrastive, ConfidentDiagonalClosedForm) {
  const auto terms = contrastive_loss(Tensor::constant({2, 2}, {10, 0, 0, 10}), 1.0);
  const double expected = -std::log(std::exp(10.0) / (std::exp(10.0) + 1.0));
  EXPECT_NEAR(expected, 4.54e-5, 1e-7);
  EXPECT_NEAR(terms.x_to_text.item(), expected, 1e-15);
  EXPECT_NEAR(terms.text_to_x.item(), expected, 1e-15);
  EXPECT_NEAR(terms.loss.item(), expected, 1e-15);
}

TEST(Contrastive, TransposeSwapsDirections) {
  const auto sim = random_tensor({5, 5}, 13);
  const std::vector<std::size_t> axes{1, 0};
  const auto a = contrastive_loss(sim, 0.5);
  const auto b = contrastive_loss(diff::permute(sim, axes), 0.5);
  EXPECT_NEAR(a.x_to_text.item(), b.text_to_x.item(), 1e-14);
  EXPECT_NEAR(a.text_to_x.item(), b.x_to_text.item(), 1e-14);
  EXPECT_NEAR(a.loss.item(), b.loss.item(), 1e-14);
}

TEST(Contrastive, ShiftInvariant) {
  const auto sim = random_tensor({6, 6}, 14);
  std::vector<double> shifted(sim.values().begin(), sim.values().end());
  for (double& v : shifted) v += 0.37;
  EXPECT_NEAR(contrastive_loss(sim, 0.1).loss.item(), contrastive_loss(Tensor::constant({6, 6}, shifted), 0.1).loss.item(),
              1e-9);
}

TEST(Contrastive, RejectsNonSquare) {
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 3}), 1.0), ShapeError);
}

TEST(Contrastive, TemperatureGradientIsNonzero) {
  const auto head = ContrastiveHead::make(0.07);
  diff::backward(contrastive_loss(random_tensor({4, 4}, 15, 0.3), head).loss);
  ASSERT_TRUE(head.log_tau.has_grad());
  EXPECT_NE(head.log_tau.grad()[0], 0.0);
  EXPECT_NEAR(head.tau(), 0.07, 1e-15);
}

Tensor logits_for_probabilities(const std::vector<double>& p) {
  std::vector<double> v;
  for (double x : p) {
    v.push_back(0.0);
    v.push_back(std::log(x / (1.0 - x)));
  }
  return Tensor::constant({1, p.size(), 2}, v);
}

TEST(Matching, HandArithmetic) {
  const std::vector<std::size_t> y1{1};
  EXPECT_NEAR(matching_loss(logits_for_probabilities({0.9, 0.7}), y1).item(), (-std::log(0.9) - std::log(0.7)) / 2,
              1e-12);
  EXPECT_NEAR(matching_loss(logits_for_probabilities({0.9, 0.7}), y1).item(), 0.2310, 5e-5);
}

TEST(Matching, UninformativeIsLogTwo) {
  for (std::size_t y : {0u, 1u}) {
    const std::vector<std::size_t> labels{y};
    EXPECT_NEAR(matching_loss(Tensor::zeros({1, 16, 2}), labels).item(), std::log(2.0), 1e-12);
  }
}

TEST(Matching, MatchesPerQueryLoop) {
  const auto logits = random_tensor({3, 16, 2}, 16, 2.0);
  const std::vector<std::size_t> labels{1, 0, 1};
  double total = 0.0;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t q = 0; q < 16; ++q) {
      const double l0 = logits.values()[(r * 16 + q) * 2], l1 = logits.values()[(r * 16 + q) * 2 + 1];
      const double p = std::exp(l1) / (std::exp(l0) + std::exp(l1));
      total += labels[r] == 1 ? -std::log(p) : -std::log(1.0 - p);
    }
  EXPECT_NEAR(matching_loss(logits, labels).item(), total / 48.0, 1e-12);
}

TEST(Matching, RejectsBadLabels) {
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(matching_loss(Tensor::zeros({1, 2, 2}), bad), ContractError);
  const std::vector<std::size_t> two{1, 0};
  EXPECT_THROW(matching_loss(Tensor::zeros({1, 2, 2}), two), ShapeError);
}

TEST(LanguageModel, UniformLogitsGiveLogV) {
  const std::vector<std::size_t> targets{4, 5, 6};
  EXPECT_NEAR(lm_loss(Tensor::zeros({1, 3, 64}), targets).item(), std::log(64.0), 1e-12);
}

TEST(LanguageModel, LargeGapIsNearZero) {
  std::vector<double> v(2 * 8, 0.0);
  v[5] = 50.0;
  v[8 + 3] = 50.0;
  const std::vector<std::size_t> targets{5, 3};
  EXPECT_LT(lm_loss(Tensor::constant({1, 2, 8}, v), targets).item(), 1e-20);
}

TEST(LanguageModel, MatchesPositionLoopAndSkipsPad) {
  const auto logits = random_tensor({1, 5, 10}, 17);
  const std::vector<std::size_t> targets{4, 9, data::tokens::kPad, 3, 7};
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    if (targets[i] == data::tokens::kPad) continue;
    double z = 0.0;
    for (std::size_t k = 0; k < 10; ++k) z += std::exp(logits.values()[i * 10 + k]);
    total += std::log(z) - logits.values()[i * 10 + targets[i]];
    ++count;
  }
  EXPECT_NEAR(lm_loss(logits, targets).item(), total / count, 1e-12);
}

TEST(LanguageModel, RejectsLengthMismatch) {
  const std::vector<std::size_t> targets{4, 5};
  EXPECT_THROW(lm_loss(Tensor::zeros({1, 3, 8}), targets), ShapeError);
}

TEST(LanguageModel, InputsShiftCaptions) {
  const std::vector<data::TokenSequence> caps{{{0, 7, 9, 3}}, {{0, 8, 3}}};
  const auto lm = make_lm_inputs(data::TokenBatch::stack(caps));
  EXPECT_EQ(lm.decoder_input.length, 3u);
  EXPECT_EQ(lm.decoder_input.ids, (std::vector<std::size_t>{1, 7, 9, 1, 8, 3}));
  EXPECT_EQ(lm.targets, (std::vector<std::size_t>{7, 9, 3, 8, 3, 2}));
}

TEST(Negatives, NeverPickTheItemItself) {
  std::mt19937_64 rng(18);
  std::vector<int> counts(5, 0);
  for (int trial = 0; trial < 4000; ++trial) {
    const auto neg = sample_negatives(5, rng);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_NE(neg.text[i], i);
      EXPECT_NE(neg.cond[i], i);
    }
    ++counts[neg.text[0]];
  }
  EXPECT_EQ(counts[0], 0);
  for (int k = 1; k < 5; ++k) EXPECT_NEAR(counts[k] / 4000.0, 0.25, 0.03);
  EXPECT_TRUE(sample_negatives(1, rng).text.empty());
}

class PairLossTest : public ::testing::Test {
 protected:
  model::ModelConfig cfg = micro_model_config();
  model::Model model{cfg, 21};
  Batch batch = micro_batch(4, cfg);
};

TEST_F(PairLossTest, TotalRecomposesFromIndependentSubLosses) {
  const auto& enc = model.encoders();
  const auto& heads = model.heads();
  const auto encoded = encode_batch(enc, batch);
  std::mt19937_64 rng(1);
  const auto neg = sample_negatives(4, rng);
  const auto loss = pair_loss(model::Condition::kAV, enc, heads, encoded, neg, {});

  // recompute each term from scratch
  const auto ea = enc.encode_audio(batch.audio);
  const auto ev = enc.encode_visual(batch.visual);
  const auto eav = enc.joint_pair(ea, ev);
  const auto text = enc.encode_text(batch.captions);
  const auto q = enc.query_forward(eav, model::QueryMode::kExtract);
  const double xtc = contrastive_loss(similarity_matrix(q.queries, text.cls, heads.projection), heads.contrastive)
                         .loss.item();
  const auto lm = make_lm_inputs(batch.captions);
  const double xlm = lm_loss(enc.query_forward(eav, model::QueryMode::kGenerate, &lm.decoder_input).logits, lm.targets)
                         .item();
  EXPECT_NEAR(loss.xtc.item(), xtc, 1e-12);
  EXPECT_NEAR(loss.xlm.item(), xlm, 1e-12);
  EXPECT_NEAR(loss.total.item(), loss.xtc.item() + loss.xtm.item() + loss.xlm.item(), 1e-12);
  EXPECT_GT(loss.xtm.item(), 0.0);
}

TEST_F(PairLossTest, DroppingLanguageModelingRemovesExactlyThatTerm) {
  const auto encoded = encode_batch(model.encoders(), batch);
  std::mt19937_64 rng(2);
  const auto neg = sample_negatives(4, rng);
  const auto full = pair_loss(model::Condition::kV, model.encoders(), model.heads(), encoded, neg, {});
  LossOptions no_lm;
  no_lm.lm = false;
  const auto partial = pair_loss(model::Condition::kV, model.encoders(), model.heads(), encoded, neg, no_lm);
  EXPECT_NEAR(full.total.item() - partial.total.item(), full.xlm.item(), 1e-12);
  EXPECT_FALSE(partial.xlm.defined());
}

TEST_F(PairLossTest, ReportTotalsAndAblation) {
  std::mt19937_64 rng(3);
  const auto full = total_loss(model.encoders(), model.heads(), batch, {}, rng);
  EXPECT_NEAR(full.report.total, full.report.sum_of_terms(), 1e-12);
  for (auto c : {model::Condition::kAV, model::Condition::kA, model::Condition::kV}) {
    const auto& t = full.report.pair(c);
    EXPECT_GE(t.xtc, 0.0);
    EXPECT_GT(t.xtm, 0.0);
    EXPECT_GT(t.xlm, 0.0);
  }

  LossOptions vanilla;
  vanilla.pair_a = vanilla.pair_v = false;
  std::mt19937_64 r1(4), r2(4);
  const auto van = total_loss(model.encoders(), model.heads(), batch, vanilla, r1);
  const auto encoded = encode_batch(model.encoders(), batch);
  const auto av = pair_loss(model::Condition::kAV, model.encoders(), model.heads(), encoded, sample_negatives(4, r2), {});
  EXPECT_EQ(van.report.total, av.total.item());
  EXPECT_EQ(van.report.a.total(), 0.0);
  EXPECT_EQ(van.report.v.total(), 0.0);
}

TEST_F(PairLossTest, ReportJsonRoundTrips) {
  std::mt19937_64 rng(5);
  auto report = total_loss(model.encoders(), model.heads(), batch, {}, rng).report;
  report.step = 17;
  const auto line = report.to_json();
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(LossReport::from_json(line), report);
}

TEST(TotalLossScale, RandomInitContrastiveNearLogBatch) {
  data::CorpusConfig ccfg;
  ccfg.n_train = 32;
  ccfg.n_test = 32;
  ccfg.frames_per_video = 1;
  const auto corpus = data::generate_corpus(ccfg);
  const model::ModelConfig mcfg;
  const model::Model m(mcfg, 0);
  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(6);
  const auto batch = train::make_batch(corpus.train, idx, mcfg, train::FrameChoice::kUniform, 0.75, 0.5, rng);
  diff::NoGradGuard guard;
  const auto report = total_loss(m.encoders(), m.heads(), batch, {}, rng).report;
  for (auto c : {model::Condition::kAV, model::Condition::kA, model::Condition::kV})
    EXPECT_NEAR(report.pair(c).xtc, std::log(32.0), 0.1 * std::log(32.0)) << model::condition_name(c);
}

TEST(TotalLossGradient, MicroModelPassesFiniteDifferences) {
  tools::GradcheckSuiteOptions opt;
  opt.primitives = false;
  const auto report = tools::run_gradcheck_suite(opt);
  ASSERT_EQ(report.cases.size(), 1u);
  EXPECT_EQ(report.cases[0].primitive, "total_loss");
  EXPECT_LE(report.cases[0].max_rel_error, 1e-4);
}

}  // namespace
