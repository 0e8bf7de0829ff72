#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "coavt/diffcore.hpp"
#include "coavt/objectives.hpp"
#include "gradcheck_suite.hpp"

namespace {

using namespace coavt;
using namespace coavt::diff;

Tensor random_leaf(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

TEST(DiffTensor, ConstructionChecksBufferLength) {
  EXPECT_THROW(Tensor::constant({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::constant({2, 0}, {}), ShapeError);
  const auto t = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.extent(-1), 3u);
  EXPECT_FALSE(t.requires_grad());
}

TEST(DiffTensor, ShapeErrorsNameThePrimitive) {
  const auto a = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
  const auto b = Tensor::constant({4, 2}, std::vector<double>(8, 1.0));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(DiffTensor, PrimitiveNamesRoundTrip) {
  for (Primitive p : all_primitives()) EXPECT_EQ(primitive_from_name(std::string(primitive_name(p))), p);
  EXPECT_THROW(primitive_from_name("convolution"), ContractError);
}

TEST(DiffOps, MatmulByIdentityIsIdentity) {
  const auto eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto m = random_leaf({3, 3}, 1);
  const auto out = matmul(eye, m);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(out.values()[i], m.values()[i]);
}

TEST(DiffOps, TransposedRightOperandMatchesLoop) {
  const auto a = random_leaf({2, 3, 4}, 2);
  const auto b = random_leaf({5, 4}, 3);
  const auto out = matmul(a, b, Transpose::kRhs);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 5}));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 4; ++k) dot += a.values()[r * 4 + k] * b.values()[j * 4 + k];
      EXPECT_NEAR(out.values()[r * 5 + j], dot, 1e-14);
    }
}

TEST(DiffOps, SoftmaxOfZerosIsUniform) {
  const auto out = softmax(Tensor::zeros({4}));
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(DiffOps, SoftmaxRowsSumToOne) {
  const auto out = softmax(random_leaf({5, 7}, 4, -20, 20));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += out.values()[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(DiffOps, CrossEntropyOfEqualLogitsIsLogClasses) {
  const std::vector<std::size_t> targets{3};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 8}), targets).item(), std::log(8.0), 1e-12);
}

TEST(DiffOps, CrossEntropyIgnoresTargets) {
  const auto logits = random_leaf({3, 4}, 5);
  const std::vector<std::size_t> all{1, 2, 0};
  const std::vector<std::size_t> first{1};
  const double masked = cross_entropy(logits, all, 2).item();
  const double manual = (cross_entropy(slice_seq(logits, 0, 1), first).item() +
                         cross_entropy(slice_seq(logits, 2, 1), std::vector<std::size_t>{0}).item()) /
                        2.0;
  EXPECT_NEAR(masked, manual, 1e-14);
}

TEST(DiffOps, MaskedLogitsVanishAfterSoftmax) {
  AttentionMask mask{{2, 2}, {0, 1, 0, 0}};
  const auto out = softmax(masked_fill(random_leaf({2, 2}, 6), mask));
  EXPECT_EQ(out.values()[1], 0.0);
  EXPECT_EQ(out.values()[0], 1.0);
}

TEST(DiffOps, MaxReduceRoutesGradientToFirstMaximum) {
  const auto x = Tensor::parameter({1, 4}, {1.0, 3.0, 3.0, 2.0});
  backward(sum(max_reduce(x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0, 0}));
}

TEST(DiffOps, OutputsAreBitwiseDeterministic) {
  const auto x = random_leaf({3, 8}, 7);
  const auto g = random_leaf({8}, 8);
  const auto b = random_leaf({8}, 9);
  const auto y1 = gelu(layer_norm(x, g, b));
  const auto y2 = gelu(layer_norm(x, g, b));
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1.values()[i], y2.values()[i]);
}

TEST(Backward, SumGivesOnes) {
  const auto x = Tensor::parameter({5}, {1, 2, 3, 4, 5});
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  const auto x = Tensor::parameter({3}, {1, 2, 3});
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, RejectsNonScalarRoot) {
  const auto x = random_leaf({3}, 10);
  EXPECT_THROW(backward(exp(x)), ContractError);
}

TEST(Backward, RejectsDetachedRoot) {
  const auto x = Tensor::constant({3}, {1, 2, 3});
  EXPECT_THROW(backward(sum(x)), ContractError);
  const auto y = random_leaf({3}, 11);
  EXPECT_THROW(backward(sum(y.detach())), ContractError);
}

TEST(Backward, GraphIsTopologicalAndVisitsEachNodeOnce) {
  const auto x = random_leaf({2, 3}, 12);
  const auto h = gelu(x);
  const auto root = sum(add(h, h));  // h feeds two edges
  const auto graph = backward(root);
  std::set<std::uint64_t> seen;
  for (const auto& n : graph.nodes) {
    for (auto in : n.inputs) EXPECT_TRUE(seen.contains(in)) << "input after consumer";
    EXPECT_TRUE(seen.insert(n.id).second) << "node visited twice";
  }
  EXPECT_EQ(graph.output, root.id());
  EXPECT_EQ(graph.nodes.size(), 4u);
}

TEST(Backward, IsLinearInTheRoot) {
  const auto x = random_leaf({3, 4}, 13);
  const auto g = random_leaf({4}, 14);
  const auto b = random_leaf({4}, 15);
  auto f = [&] { return sum(mul(gelu(layer_norm(x, g, b)), layer_norm(x, g, b))); };
  auto h = [&] { return sum(softmax(mul(x, x))); };
  std::vector<double> gf, gh, gc;
  Tensor xs = x;
  xs.zero_grad();
  backward(f());
  gf.assign(x.grad().begin(), x.grad().end());
  xs.zero_grad();
  backward(h());
  gh.assign(x.grad().begin(), x.grad().end());
  xs.zero_grad();
  backward(add(scale(f(), 2.5), scale(h(), -0.75)));
  gc.assign(x.grad().begin(), x.grad().end());
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gh[i], 1e-10);
}

TEST(Backward, GradientsAreFinite) {
  const auto x = random_leaf({4, 6}, 16, -10, 10);
  const auto g = random_leaf({6}, 17);
  const auto b = random_leaf({6}, 18);
  backward(sum(l2_normalize(gelu(layer_norm(x, g, b)))));
  for (const auto* t : {&x, &g, &b})
    for (double v : t->grad()) EXPECT_TRUE(std::isfinite(v));
}

TEST(NoGrad, GuardSkipsHistory) {
  const auto x = random_leaf({3}, 19);
  {
    NoGradGuard guard;
    const auto y = exp(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_FALSE(grad_enabled());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(exp(x).requires_grad());
}

TEST(Gradcheck, SquareAtThree) {
  const auto x = Tensor::parameter({}, {3.0});
  const std::vector<NamedTensor> leaves{{"x", x}};
  const auto report = finite_diff_gradcheck([&] { return mul(x, x); }, leaves, 1e-5);
  EXPECT_LT(report.max_rel_error(), 1e-8);
}

TEST(Gradcheck, LayerNormOnTwoByFour) {
  const auto x = random_leaf({2, 4}, 20);
  const auto g = random_leaf({4}, 21);
  const auto b = random_leaf({4}, 22);
  const auto w = random_leaf({2, 4}, 23).detach();
  const std::vector<NamedTensor> leaves{{"x", x}, {"gain", g}, {"bias", b}};
  const auto report = finite_diff_gradcheck([&] { return sum(mul(layer_norm(x, g, b), w)); }, leaves, 1e-5);
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(Gradcheck, ContrastiveLossOnBatchOfThree) {
  const auto sim = random_leaf({3, 3}, 24);
  const auto log_tau = Tensor::parameter({}, {std::log(0.3)});
  const objectives::ContrastiveHead head{log_tau};
  const std::vector<NamedTensor> leaves{{"sim", sim}, {"log_tau", log_tau}};
  const auto report =
      finite_diff_gradcheck([&] { return objectives::contrastive_loss(sim, head).loss; }, leaves, 1e-5);
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(Gradcheck, DetectsNonDeterministicFunction) {
  const auto x = random_leaf({2}, 25);
  int calls = 0;
  const std::vector<NamedTensor> leaves{{"x", x}};
  EXPECT_THROW(finite_diff_gradcheck([&] { return scale(sum(x), 1.0 + ++calls); }, leaves, 1e-5), ContractError);
}

TEST(Gradcheck, EveryPrimitiveOnTwoShapes) {
  tools::GradcheckSuiteOptions opt;
  opt.full_loss = false;
  const auto report = tools::run_gradcheck_suite(opt);
  std::map<std::string, int> shapes;
  for (const auto& c : report.cases) {
    EXPECT_LE(c.max_rel_error, 1e-4) << c.primitive << " " << c.variant;
    ++shapes[c.primitive];
  }
  for (Primitive p : all_primitives()) {
    if (p == Primitive::kLeaf) continue;
    EXPECT_GE(shapes[std::string(primitive_name(p))], 2) << primitive_name(p);
  }
}

TEST(Gradcheck, CorruptedGeluDerivativeIsCaught) {
  const auto x = random_leaf({3, 3}, 26, -2, 2);
  const std::vector<NamedTensor> leaves{{"x", x}};
  auto f = [&] { return sum(mul(gelu(x), x)); };
  EXPECT_LT(finite_diff_gradcheck(f, leaves, 1e-5).max_rel_error(), 1e-4);
  coavt::diff::testing::ScopedGeluGradientFault fault(1.05);
  EXPECT_GT(finite_diff_gradcheck(f, leaves, 1e-5).max_rel_error(), 1e-3);
}

}  // namespace
