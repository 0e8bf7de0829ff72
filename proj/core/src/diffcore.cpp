#include "coavt/diffcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace coavt::diff {

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Primitive op = Primitive::kLeaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;
std::atomic<double> g_gelu_grad_factor{1.0};

constexpr std::array kPrimitiveNames = {
    std::pair{Primitive::kLeaf, std::string_view{"leaf"}},
    std::pair{Primitive::kMatMul, std::string_view{"matmul"}},
    std::pair{Primitive::kAdd, std::string_view{"add"}},
    std::pair{Primitive::kScale, std::string_view{"scale"}},
    std::pair{Primitive::kSoftmax, std::string_view{"softmax-last-axis"}},
    std::pair{Primitive::kLayerNorm, std::string_view{"layer-norm"}},
    std::pair{Primitive::kGelu, std::string_view{"gelu"}},
    std::pair{Primitive::kEmbedding, std::string_view{"embedding-lookup"}},
    std::pair{Primitive::kConcatSeq, std::string_view{"concat-seq"}},
    std::pair{Primitive::kMeanPool, std::string_view{"mean-pool"}},
    std::pair{Primitive::kMaxReduce, std::string_view{"max-reduce"}},
    std::pair{Primitive::kMaskedFill, std::string_view{"masked-fill"}},
    std::pair{Primitive::kCrossEntropy, std::string_view{"cross-entropy-from-logits"}},
    std::pair{Primitive::kSigmoid, std::string_view{"sigmoid"}},
    std::pair{Primitive::kLog, std::string_view{"log"}},
    std::pair{Primitive::kSum, std::string_view{"sum"}},
    std::pair{Primitive::kMul, std::string_view{"mul"}},
    std::pair{Primitive::kExp, std::string_view{"exp"}},
    std::pair{Primitive::kL2Normalize, std::string_view{"l2-normalize"}},
    std::pair{Primitive::kPermute, std::string_view{"permute"}},
    std::pair{Primitive::kReshape, std::string_view{"reshape"}},
    std::pair{Primitive::kSliceSeq, std::string_view{"slice-seq"}},
    std::pair{Primitive::kGatherBatch, std::string_view{"gather-batch"}},
};

constexpr auto kAllPrimitives = [] {
  std::array<Primitive, kPrimitiveNames.size() - 1> out{};
  for (std::size_t i = 1; i < kPrimitiveNames.size(); ++i) out[i - 1] = kPrimitiveNames[i].first;
  return out;
}();

[[noreturn]] void shape_error(Primitive op, const std::string& what) {
  throw ShapeError(std::string(primitive_name(op)) + ": " + what);
}

const Node& node_of(const Tensor& t, Primitive op) {
  if (!t.defined()) shape_error(op, "undefined input tensor");
  return *t.node();
}

NodePtr new_node(Primitive op, Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

/// Wraps a forward result. History is recorded only when some input needs it.
Tensor make_result(Primitive op, Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto n = new_node(op, std::move(shape), std::move(value));
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) n->inputs.push_back(in->node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

Tensor make_result_n(Primitive op, Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                     std::function<void(Node&)> backward) {
  auto n = new_node(op, std::move(shape), std::move(value));
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Tensor& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

/// Gradient buffer of an input, allocated on first use; empty span when the
/// input does not participate in differentiation.
std::span<double> grad_buffer(Node& n) {
  if (!n.requires_grad) return {};
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

std::size_t leading_count(const Shape& s, std::size_t trailing) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing < s.size(); ++i) n *= s[i];
  return n;
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

// ---------------------------------------------------------------------------

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

std::string_view primitive_name(Primitive op) {
  for (const auto& [p, name] : kPrimitiveNames)
    if (p == op) return name;
  return "unknown";
}

Primitive primitive_from_name(std::string_view name) {
  for (const auto& [p, n] : kPrimitiveNames)
    if (n == name && p != Primitive::kLeaf) return p;
  throw ContractError("unknown primitive id '" + std::string(name) + "'");
}

std::span<const Primitive> all_primitives() { return kAllPrimitives; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (diff::numel(shape) != values.size())
    throw ShapeError("tensor: shape " + to_string(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  for (std::size_t e : shape)
    if (e == 0) throw ShapeError("tensor: zero extent in " + to_string(shape));
  return Tensor(new_node(Primitive::kLeaf, std::move(shape), std::move(values)));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(diff::numel(shape), value);
  return requires_grad ? parameter(std::move(shape), std::move(v)) : constant(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::extent(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? r + axis : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw ContractError("only leaf tensors may be mutated in place");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->op == Primitive::kLeaf; }
bool Tensor::has_grad() const { return node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }
std::uint64_t Tensor::id() const { return node_->id; }
Primitive Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return Tensor(new_node(Primitive::kLeaf, node_->shape, node_->value)); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b, Transpose t) {
  constexpr auto op = Primitive::kMatMul;
  const auto& as = node_of(a, op).shape;
  const auto& bs = node_of(b, op).shape;
  if (as.empty() || bs.size() < 2) shape_error(op, "operands must have rank >= 1 and >= 2");
  const bool tr = t == Transpose::kRhs;
  const std::size_t k = as.back();

  if (bs.size() == 2) {
    const std::size_t bk = tr ? bs[1] : bs[0];
    const std::size_t m = tr ? bs[0] : bs[1];
    if (bk != k)
      shape_error(op, "inner extents differ: lhs " + to_string(as) + " vs rhs " + to_string(bs) +
                          (tr ? " (rhs transposed)" : ""));
    const std::size_t rows = a.numel() / k;
    Shape out_shape = drop_last(as);
    out_shape.push_back(m);
    std::vector<double> out(rows * m);
    ConstMap A(a.values().data(), rows, k);
    ConstMap B(b.values().data(), bs[0], bs[1]);
    MutMap Y(out.data(), rows, m);
    if (tr)
      Y.noalias() = A * B.transpose();
    else
      Y.noalias() = A * B;
    return make_result(op, std::move(out_shape), std::move(out), {&a, &b}, [rows, k, m, tr, bs](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      ConstMap dY(self.grad.data(), rows, m);
      if (auto ga = grad_buffer(na); !ga.empty()) {
        ConstMap B(nb.value.data(), bs[0], bs[1]);
        MutMap dA(ga.data(), rows, k);
        if (tr)
          dA.noalias() += dY * B;
        else
          dA.noalias() += dY * B.transpose();
      }
      if (auto gb = grad_buffer(nb); !gb.empty()) {
        ConstMap A(na.value.data(), rows, k);
        MutMap dB(gb.data(), bs[0], bs[1]);
        if (tr)
          dB.noalias() += dY.transpose() * A;
        else
          dB.noalias() += A.transpose() * dY;
      }
    });
  }

  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))
    shape_error(op, "batched operands need equal leading extents: " + to_string(as) + " vs " + to_string(bs));
  const std::size_t n = as[as.size() - 2];
  const std::size_t br = bs[bs.size() - 2];
  const std::size_t bc = bs.back();
  const std::size_t bk = tr ? bc : br;
  const std::size_t m = tr ? br : bc;
  if (bk != k) shape_error(op, "inner extents differ: lhs " + to_string(as) + " vs rhs " + to_string(bs));
  const std::size_t batch = leading_count(as, 2);
  Shape out_shape = drop_last(as);
  out_shape.push_back(m);
  std::vector<double> out(batch * n * m);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap A(a.values().data() + i * n * k, n, k);
    ConstMap B(b.values().data() + i * br * bc, br, bc);
    MutMap Y(out.data() + i * n * m, n, m);
    if (tr)
      Y.noalias() = A * B.transpose();
    else
      Y.noalias() = A * B;
  }
  return make_result(op, std::move(out_shape), std::move(out), {&a, &b},
                     [batch, n, k, m, br, bc, tr](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       auto ga = grad_buffer(na);
                       auto gb = grad_buffer(nb);
                       for (std::size_t i = 0; i < batch; ++i) {
                         ConstMap dY(self.grad.data() + i * n * m, n, m);
                         if (!ga.empty()) {
                           ConstMap B(nb.value.data() + i * br * bc, br, bc);
                           MutMap dA(ga.data() + i * n * k, n, k);
                           if (tr)
                             dA.noalias() += dY * B;
                           else
                             dA.noalias() += dY * B.transpose();
                         }
                         if (!gb.empty()) {
                           ConstMap A(na.value.data() + i * n * k, n, k);
                           MutMap dB(gb.data() + i * br * bc, br, bc);
                           if (tr)
                             dB.noalias() += dY.transpose() * A;
                           else
                             dB.noalias() += A.transpose() * dY;
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  constexpr auto op = Primitive::kAdd;
  const auto& as = node_of(a, op).shape;
  const auto& bs = node_of(b, op).shape;
  if (as == bs) {
    std::vector<double> out(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_result(op, as, std::move(out), {&a, &b}, [](Node& self) {
      for (auto& in : self.inputs) {
        if (auto g = grad_buffer(*in); !g.empty())
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  if (bs.size() == 1 && !as.empty() && as.back() == bs[0]) {
    const std::size_t c = bs[0];
    const std::size_t rows = a.numel() / c;
    std::vector<double> out(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bv[j];
    return make_result(op, as, std::move(out), {&a, &b}, [rows, c](Node& self) {
      if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      if (auto g = grad_buffer(*self.inputs[1]); !g.empty())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
    });
  }
  shape_error(op, "cannot add " + to_string(as) + " and " + to_string(bs) +
                      " (only equal shapes or a trailing-axis bias are allowed)");
}

Tensor scale(const Tensor& x, double factor) {
  constexpr auto op = Primitive::kScale;
  node_of(x, op);
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= factor;
  return make_result(op, x.shape(), std::move(out), {&x}, [factor](Node& self) {
    if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor scale(const Tensor& x, const Tensor& factor) {
  constexpr auto op = Primitive::kScale;
  node_of(x, op);
  if (node_of(factor, op).value.size() != 1)
    shape_error(op, "factor must hold one value, got shape " + to_string(factor.shape()));
  const double f = factor.values()[0];
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= f;
  return make_result(op, x.shape(), std::move(out), {&x, &factor}, [f](Node& self) {
    Node& nx = *self.inputs[0];
    if (auto g = grad_buffer(nx); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.grad[i];
    if (auto g = grad_buffer(*self.inputs[1]); !g.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += nx.value[i] * self.grad[i];
      g[0] += acc;
    }
  });
}

Tensor softmax(const Tensor& x) {
  constexpr auto op = Primitive::kSoftmax;
  const auto& s = node_of(x, op).shape;
  const std::size_t c = s.back();
  const std::size_t rows = x.numel() / c;
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double* o = out.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  return make_result(op, s, std::move(out), {&x}, [rows, c](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  constexpr auto op = Primitive::kLayerNorm;
  const auto& s = node_of(x, op).shape;
  const std::size_t c = s.back();
  if (node_of(gain, op).shape != Shape{c} || node_of(bias, op).shape != Shape{c})
    shape_error(op, "gain/bias must be (" + std::to_string(c) + "), got " + to_string(gain.shape()) + " and " +
                        to_string(bias.shape()));
  const std::size_t rows = x.numel() / c;
  std::vector<double> normed(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += in[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normed[r * c + j] = (in[j] - mean) * rstd[r];
      out[r * c + j] = normed[r * c + j] * gv[j] + bv[j];
    }
  }
  return make_result(op, s, std::move(out), {&x, &gain, &bias},
                     [rows, c, normed = std::move(normed), rstd = std::move(rstd)](Node& self) {
                       Node& ng = *self.inputs[1];
                       auto gx = grad_buffer(*self.inputs[0]);
                       auto gg = grad_buffer(ng);
                       auto gb = grad_buffer(*self.inputs[2]);
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * c;
                         const double* xh = normed.data() + r * c;
                         if (!gg.empty())
                           for (std::size_t j = 0; j < c; ++j) gg[j] += dy[j] * xh[j];
                         if (!gb.empty())
                           for (std::size_t j = 0; j < c; ++j) gb[j] += dy[j];
                         if (gx.empty()) continue;
                         double mean_d = 0.0;
                         double mean_dx = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double d = dy[j] * ng.value[j];
                           mean_d += d;
                           mean_dx += d * xh[j];
                         }
                         mean_d *= inv_c;
                         mean_dx *= inv_c;
                         for (std::size_t j = 0; j < c; ++j)
                           gx[r * c + j] += rstd[r] * (dy[j] * ng.value[j] - mean_d - xh[j] * mean_dx);
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  constexpr auto op = Primitive::kGelu;
  node_of(x, op);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  const double fault = g_gelu_grad_factor.load(std::memory_order_relaxed);
  return make_result(op, x.shape(), std::move(out), {&x}, [fault](Node& self) {
    Node& nx = *self.inputs[0];
    auto g = grad_buffer(nx);
    if (g.empty()) return;
    const double inv_sqrt_2pi = std::numbers::inv_sqrtpi * kInvSqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = nx.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += fault * self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, Shape ids_shape) {
  constexpr auto op = Primitive::kEmbedding;
  const auto& ts = node_of(table, op).shape;
  if (ts.size() != 2) shape_error(op, "table must be rank 2, got " + to_string(ts));
  if (numel(ids_shape) != ids.size() || ids.empty())
    shape_error(op, "ids shape " + to_string(ids_shape) + " does not match " + std::to_string(ids.size()) + " ids");
  const std::size_t rows = ts[0];
  const std::size_t c = ts[1];
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * c);
  const auto tv = table.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows)
      shape_error(op, "id " + std::to_string(idx[i]) + " out of range for table of " + std::to_string(rows) + " rows");
    std::copy_n(tv.data() + idx[i] * c, c, out.data() + i * c);
  }
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(c);
  return make_result(op, std::move(out_shape), std::move(out), {&table}, [idx = std::move(idx), c](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

Tensor concat_seq(std::span<const Tensor> parts) {
  constexpr auto op = Primitive::kConcatSeq;
  if (parts.empty()) shape_error(op, "no inputs");
  const Shape& first = node_of(parts[0], op).shape;
  if (first.size() < 2) shape_error(op, "inputs must have rank >= 2, got " + to_string(first));
  const std::size_t c = first.back();
  const std::size_t outer = leading_count(first, 2);
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = node_of(p, op).shape;
    if (s.size() != first.size() || s.back() != c || !std::equal(s.begin(), s.end() - 2, first.begin()))
      shape_error(op, "incompatible parts " + to_string(first) + " and " + to_string(s));
    lens.push_back(s[s.size() - 2]);
    total += lens.back();
  }
  std::vector<double> out(outer * total * c);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t block = lens[p] * c;
      std::copy_n(parts[p].values().data() + o * block, block, out.data() + (o * total + offset) * c);
      offset += lens[p];
    }
  }
  Shape out_shape = first;
  out_shape[out_shape.size() - 2] = total;
  return make_result_n(op, std::move(out_shape), std::move(out), parts,
                       [outer, total, c, lens = std::move(lens)](Node& self) {
                         std::size_t offset = 0;
                         for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                           auto g = grad_buffer(*self.inputs[p]);
                           const std::size_t block = lens[p] * c;
                           if (!g.empty())
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t i = 0; i < block; ++i)
                                 g[o * block + i] += self.grad[(o * total + offset) * c + i];
                           offset += lens[p];
                         }
                       });
}

Tensor concat_seq(const Tensor& a, const Tensor& b) {
  const std::array parts{a, b};
  return concat_seq(std::span<const Tensor>(parts));
}

Tensor mean_pool(const Tensor& x) {
  constexpr auto op = Primitive::kMeanPool;
  const auto& s = node_of(x, op).shape;
  if (s.size() < 2) shape_error(op, "input must have rank >= 2, got " + to_string(s));
  const std::size_t c = s.back();
  const std::size_t n = s[s.size() - 2];
  const std::size_t outer = leading_count(s, 2);
  std::vector<double> out(outer * c, 0.0);
  const auto xv = x.values();
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[o * c + j] += xv[(o * n + i) * c + j] * inv;
  Shape out_shape(s.begin(), s.end() - 2);
  out_shape.push_back(c);
  return make_result(op, std::move(out_shape), std::move(out), {&x}, [outer, n, c, inv](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) g[(o * n + i) * c + j] += self.grad[o * c + j] * inv;
  });
}

Tensor max_reduce(const Tensor& x) {
  constexpr auto op = Primitive::kMaxReduce;
  const auto& s = node_of(x, op).shape;
  const std::size_t n = s.back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(rows);
  std::vector<std::size_t> arg(rows);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    arg[r] = static_cast<std::size_t>(std::max_element(in, in + n) - in);
    out[r] = in[arg[r]];
  }
  Shape out_shape = s.size() > 1 ? drop_last(s) : Shape{1};
  return make_result(op, std::move(out_shape), std::move(out), {&x}, [n, arg = std::move(arg)](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < arg.size(); ++r) g[r * n + arg[r]] += self.grad[r];
  });
}

Tensor masked_fill(const Tensor& x, const AttentionMask& mask) {
  constexpr auto op = Primitive::kMaskedFill;
  const auto& s = node_of(x, op).shape;
  if (numel(mask.shape) != mask.blocked.size()) shape_error(op, "mask buffer does not match its shape");
  if (s.size() < 2) shape_error(op, "input must have rank >= 2, got " + to_string(s));
  const std::size_t q = s[s.size() - 2];
  const std::size_t k = s.back();
  std::vector<double> out(x.values().begin(), x.values().end());
  if (mask.shape == Shape{q, k} || mask.shape == s) {
    const std::size_t period = mask.blocked.size();
    for (std::size_t i = 0; i < out.size(); ++i)
      if (mask.blocked[i % period]) out[i] += kMaskedLogit;
  } else if (s.size() == 4 && mask.shape == Shape{s[0], q, k}) {
    const std::size_t heads = s[1];
    for (std::size_t b = 0; b < s[0]; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < q * k; ++i)
          if (mask.blocked[b * q * k + i]) out[(b * heads + h) * q * k + i] += kMaskedLogit;
  } else {
    shape_error(op, "mask " + to_string(mask.shape) + " does not broadcast onto " + to_string(s));
  }
  return make_result(op, s, std::move(out), {&x}, [](Node& self) {
    if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::size_t ignore_index) {
  constexpr auto op = Primitive::kCrossEntropy;
  const auto& s = node_of(logits, op).shape;
  const std::size_t v = s.back();
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows)
    shape_error(op, std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows of " +
                        to_string(s));
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<double> probs(logits.numel());
  const auto lv = logits.values();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = lv.data() + r * v;
    double* p = probs.data() + r * v;
    const double mx = *std::max_element(in, in + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      p[j] = std::exp(in[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < v; ++j) p[j] /= z;
    if (tgt[r] == ignore_index) continue;
    if (tgt[r] >= v) shape_error(op, "target " + std::to_string(tgt[r]) + " >= " + std::to_string(v) + " classes");
    total += (mx + std::log(z)) - in[tgt[r]];
    ++counted;
  }
  const double inv = counted ? 1.0 / static_cast<double>(counted) : 0.0;
  return make_result(op, {1}, {total * inv}, {&logits},
                     [v, inv, ignore_index, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
                       auto g = grad_buffer(*self.inputs[0]);
                       if (g.empty()) return;
                       const double up = self.grad[0] * inv;
                       for (std::size_t r = 0; r < tgt.size(); ++r) {
                         if (tgt[r] == ignore_index) continue;
                         for (std::size_t j = 0; j < v; ++j) g[r * v + j] += up * probs[r * v + j];
                         g[r * v + tgt[r]] -= up;
                       }
                     });
}

Tensor sigmoid(const Tensor& x) {
  constexpr auto op = Primitive::kSigmoid;
  node_of(x, op);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return make_result(op, x.shape(), std::move(out), {&x}, [](Node& self) {
    if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
  });
}

Tensor log(const Tensor& x) {
  constexpr auto op = Primitive::kLog;
  node_of(x, op);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(xv[i] > 0.0)) throw ContractError("log: non-positive input " + std::to_string(xv[i]));
    out[i] = std::log(xv[i]);
  }
  return make_result(op, x.shape(), std::move(out), {&x}, [](Node& self) {
    Node& nx = *self.inputs[0];
    if (auto g = grad_buffer(nx); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / nx.value[i];
  });
}

Tensor sum(const Tensor& x) {
  constexpr auto op = Primitive::kSum;
  node_of(x, op);
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result(op, {1}, {total}, {&x}, [](Node& self) {
    if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
      for (double& v : g) v += self.grad[0];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  constexpr auto op = Primitive::kMul;
  if (node_of(a, op).shape != node_of(b, op).shape)
    shape_error(op, "shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result(op, a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (auto g = grad_buffer(na); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    if (auto g = grad_buffer(nb); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
  });
}

Tensor exp(const Tensor& x) {
  constexpr auto op = Primitive::kExp;
  node_of(x, op);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.values()[i]);
  return make_result(op, x.shape(), std::move(out), {&x}, [](Node& self) {
    if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor l2_normalize(const Tensor& x) {
  constexpr auto op = Primitive::kL2Normalize;
  const auto& s = node_of(x, op).shape;
  const std::size_t c = s.back();
  const std::size_t rows = x.numel() / c;
  std::vector<double> out(x.numel());
  std::vector<double> norms(rows);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += xv[r * c + j] * xv[r * c + j];
    norms[r] = std::max(std::sqrt(sq), 1e-12);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] / norms[r];
  }
  return make_result(op, s, std::move(out), {&x}, [rows, c, norms = std::move(norms)](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += (dy[j] - y[j] * dot) / norms[r];
    }
  });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> axes) {
  constexpr auto op = Primitive::kPermute;
  const auto& s = node_of(x, op).shape;
  const std::size_t r = s.size();
  if (axes.size() != r) shape_error(op, "axes count differs from rank of " + to_string(s));
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) shape_error(op, "axes are not a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[axes[i]];
    step[i] = in_strides[axes[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        offset += step[d];
        break;
      }
      offset -= step[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  return make_result(op, std::move(out_shape), std::move(out), {&x}, [src = std::move(src)](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  constexpr auto op = Primitive::kReshape;
  node_of(x, op);
  if (numel(shape) != x.numel()) shape_error(op, "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(op, std::move(shape), std::move(out), {&x}, [](Node& self) {
    if (auto g = grad_buffer(*self.inputs[0]); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t length) {
  constexpr auto op = Primitive::kSliceSeq;
  const auto& s = node_of(x, op).shape;
  if (s.size() < 2) shape_error(op, "input must have rank >= 2, got " + to_string(s));
  const std::size_t n = s[s.size() - 2];
  const std::size_t c = s.back();
  if (length == 0 || start + length > n)
    shape_error(op, "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " +
                        to_string(s));
  const std::size_t outer = leading_count(s, 2);
  std::vector<double> out(outer * length * c);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.values().data() + (o * n + start) * c, length * c, out.data() + o * length * c);
  Shape out_shape = s;
  out_shape[s.size() - 2] = length;
  return make_result(op, std::move(out_shape), std::move(out), {&x}, [outer, n, c, start, length](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < length * c; ++i) g[(o * n + start) * c + i] += self.grad[o * length * c + i];
  });
}

Tensor gather_batch(const Tensor& x, std::span<const std::size_t> indices) {
  constexpr auto op = Primitive::kGatherBatch;
  const auto& s = node_of(x, op).shape;
  if (indices.empty()) shape_error(op, "no indices");
  const std::size_t block = x.numel() / s[0];
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * block);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= s[0]) shape_error(op, "index " + std::to_string(idx[i]) + " outside leading extent of " + to_string(s));
    std::copy_n(x.values().data() + idx[i] * block, block, out.data() + i * block);
  }
  Shape out_shape = s;
  out_shape[0] = idx.size();
  return make_result(op, std::move(out_shape), std::move(out), {&x}, [block, idx = std::move(idx)](Node& self) {
    auto g = grad_buffer(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < block; ++j) g[idx[i] * block + j] += self.grad[i * block + j];
  });
}

Tensor apply_primitive(Primitive op, std::span<const Tensor> in, const PrimitiveAttrs& attrs) {
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi)
      shape_error(op, "expects " + std::to_string(lo) + (lo == hi ? "" : ".." + std::to_string(hi)) + " inputs, got " +
                          std::to_string(in.size()));
  };
  switch (op) {
    case Primitive::kMatMul: arity(2, 2); return matmul(in[0], in[1], attrs.transpose);
    case Primitive::kAdd: arity(2, 2); return add(in[0], in[1]);
    case Primitive::kScale:
      arity(1, 2);
      return in.size() == 2 ? scale(in[0], in[1]) : scale(in[0], attrs.factor);
    case Primitive::kSoftmax: arity(1, 1); return softmax(in[0]);
    case Primitive::kLayerNorm: arity(3, 3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case Primitive::kGelu: arity(1, 1); return gelu(in[0]);
    case Primitive::kEmbedding: arity(1, 1); return embedding(in[0], attrs.indices, attrs.shape);
    case Primitive::kConcatSeq: arity(1, in.size() ? in.size() : 1); return concat_seq(in);
    case Primitive::kMeanPool: arity(1, 1); return mean_pool(in[0]);
    case Primitive::kMaxReduce: arity(1, 1); return max_reduce(in[0]);
    case Primitive::kMaskedFill: arity(1, 1); return masked_fill(in[0], attrs.mask);
    case Primitive::kCrossEntropy: arity(1, 1); return cross_entropy(in[0], attrs.indices, attrs.ignore_index);
    case Primitive::kSigmoid: arity(1, 1); return sigmoid(in[0]);
    case Primitive::kLog: arity(1, 1); return log(in[0]);
    case Primitive::kSum: arity(1, 1); return sum(in[0]);
    case Primitive::kMul: arity(2, 2); return mul(in[0], in[1]);
    case Primitive::kExp: arity(1, 1); return exp(in[0]);
    case Primitive::kL2Normalize: arity(1, 1); return l2_normalize(in[0]);
    case Primitive::kPermute: arity(1, 1); return permute(in[0], attrs.indices);
    case Primitive::kReshape: arity(1, 1); return reshape(in[0], attrs.shape);
    case Primitive::kSliceSeq: arity(1, 1); return slice_seq(in[0], attrs.start, attrs.length);
    case Primitive::kGatherBatch: arity(1, 1); return gather_batch(in[0], attrs.indices);
    case Primitive::kLeaf: break;
  }
  throw ContractError("unknown primitive id " + std::to_string(static_cast<int>(op)));
}

// ---------------------------------------------------------------------------
// Differentiation

namespace {

std::vector<Node*> reachable_sorted(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (seen.insert(in.get()).second) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id < b->id; });
  return order;
}

ComputationGraph record(const std::vector<Node*>& order, std::uint64_t output) {
  ComputationGraph g;
  g.output = output;
  g.nodes.reserve(order.size());
  for (const Node* n : order) {
    GraphNodeRecord r{n->id, n->op, {}};
    for (const auto& in : n->inputs) r.inputs.push_back(in->id);
    g.nodes.push_back(std::move(r));
  }
  return g;
}

}  // namespace

ComputationGraph trace(const Tensor& root) {
  if (!root.defined()) throw ContractError("trace: undefined root");
  return record(reachable_sorted(root), root.id());
}

ComputationGraph backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: undefined root");
  if (root.numel() != 1) throw ContractError("backward: root must be scalar, got shape " + to_string(root.shape()));
  if (!root.requires_grad()) throw ContractError("backward: root is detached from every differentiable leaf");
  auto order = reachable_sorted(root);
  Node* r = root.node().get();
  if (r->op == Primitive::kLeaf) {
    grad_buffer(*r)[0] += 1.0;
    return record(order, r->id);
  }
  for (Node* n : order)
    if (n->op != Primitive::kLeaf) n->grad.clear();
  r->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->op == Primitive::kLeaf || !n->backward || n->grad.empty()) continue;
    n->backward(*n);
  }
  auto graph = record(order, r->id);
  for (Node* n : order)
    if (n->op != Primitive::kLeaf) std::vector<double>().swap(n->grad);
  return graph;
}

// ---------------------------------------------------------------------------
// Finite differences

double GradcheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& l : leaves) worst = std::max(worst, l.max_rel_error);
  return worst;
}

GradcheckReport finite_diff_gradcheck(const std::function<Tensor()>& f, std::span<const NamedTensor> leaves,
                                      double eps, const GradcheckOptions& options) {
  if (!(eps > 0.0)) throw ContractError("gradcheck: eps must be positive");
  for (const auto& l : leaves) {
    if (!l.tensor.defined() || !l.tensor.is_leaf() || !l.tensor.requires_grad())
      throw ContractError("gradcheck: '" + l.name + "' is not a differentiable leaf");
  }
  auto evaluate = [&] {
    NoGradGuard guard;
    return f().item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (first != second) throw ContractError("gradcheck: function is non-deterministic (two evaluations differ)");

  for (const auto& l : leaves) Tensor(l.tensor).zero_grad();
  backward(f());

  GradcheckReport report;
  for (const auto& l : leaves) {
    Tensor t = l.tensor;
    std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                : std::vector<double>(t.numel(), 0.0);
    auto values = t.mutable_values();
    const std::size_t n = values.size();
    const std::size_t limit = options.max_elements_per_leaf;
    const std::size_t stride = (limit == 0 || n <= limit) ? 1 : (n + limit - 1) / limit;
    LeafGradReport leaf{l.name, 0.0, 0};
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate();
      values[i] = saved - eps;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      leaf.max_rel_error = std::max(leaf.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++leaf.elements_checked;
    }
    report.leaves.push_back(std::move(leaf));
  }
  return report;
}

namespace testing {
ScopedGeluGradientFault::ScopedGeluGradientFault(double factor) : previous_(g_gelu_grad_factor.exchange(factor)) {}
ScopedGeluGradientFault::~ScopedGeluGradientFault() { g_gelu_grad_factor.store(previous_); }
}  // namespace testing

}  // namespace coavt::diff
