#pragma once

// Dense 64-bit array engine with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Every primitive creates a
// new node that remembers its inputs and a backward closure; node ids grow
// monotonically, so sorting reachable nodes by id yields a topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "coavt/error.hpp"

namespace coavt::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class Primitive : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kScale,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kEmbedding,
  kConcatSeq,
  kMeanPool,
  kMaxReduce,
  kMaskedFill,
  kCrossEntropy,
  kSigmoid,
  kLog,
  // structural and helper primitives
  kSum,
  kMul,
  kExp,
  kL2Normalize,
  kPermute,
  kReshape,
  kSliceSeq,
  kGatherBatch,
};

std::string_view primitive_name(Primitive op);
/// Throws ContractError for names that are not registered primitives.
Primitive primitive_from_name(std::string_view name);
/// Every primitive except kLeaf, in declaration order.
std::span<const Primitive> all_primitives();

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t extent(int axis) const;  // negative axes count from the back

  std::span<const double> values() const;
  /// Writable view; only leaves may be mutated (optimizer, finite differences).
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  std::uint64_t id() const;
  Primitive op() const;

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Primitives

enum class Transpose : std::uint8_t { kNone, kRhs };

/// (..., n, k) x (k, m) with a shared right operand, or batched
/// (..., n, k) x (..., k, m) when both operands have equal leading extents.
Tensor matmul(const Tensor& a, const Tensor& b, Transpose t = Transpose::kNone);
/// Elementwise sum of equal shapes, or trailing-axis bias add when `b` is 1-D.
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Multiplies by a learnable scalar (shape {1} or {}).
Tensor scale(const Tensor& x, const Tensor& factor);
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);
/// Rows of `table` (V, C) selected by `ids`; output shape is ids_shape + {C}.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, Shape ids_shape);
/// Concatenation along the sequence axis (second to last).
Tensor concat_seq(std::span<const Tensor> parts);
Tensor concat_seq(const Tensor& a, const Tensor& b);
/// Mean over the sequence axis: (..., n, C) -> (..., C).
Tensor mean_pool(const Tensor& x);
/// Max over the last axis: (..., n) -> (...). Gradient routes to the first maximum.
Tensor max_reduce(const Tensor& x);

/// Boolean mask over the trailing two axes of an attention-logit tensor.
/// `shape` is either {q, k} (shared by every leading index) or {b, q, k}
/// for a rank-4 (b, heads, q, k) input, shared across heads.
struct AttentionMask {
  Shape shape;
  std::vector<std::uint8_t> blocked;
};
inline constexpr double kMaskedLogit = -1e9;
/// Adds kMaskedLogit wherever the mask is set.
Tensor masked_fill(const Tensor& x, const AttentionMask& mask);

/// Mean token cross-entropy of (N, V) logits; targets equal to ignore_index
/// are excluded from both sum and count.
inline constexpr std::size_t kNoIgnore = static_cast<std::size_t>(-1);
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::size_t ignore_index = kNoIgnore);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& x);
/// Unit L2 norm along the last axis (norm floored at 1e-12).
Tensor l2_normalize(const Tensor& x);
Tensor permute(const Tensor& x, std::span<const std::size_t> axes);
Tensor reshape(const Tensor& x, Shape shape);
/// Rows [start, start + length) of the sequence axis.
Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t length);
/// Selects entries of the leading axis; indices may repeat.
Tensor gather_batch(const Tensor& x, std::span<const std::size_t> indices);

/// Non-tensor arguments for the generic dispatcher.
struct PrimitiveAttrs {
  double factor = 1.0;
  double eps = 1e-5;
  Transpose transpose = Transpose::kNone;
  std::vector<std::size_t> indices;  // ids, targets, axes, gather indices
  Shape shape;                       // ids shape / reshape target
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t ignore_index = kNoIgnore;
  AttentionMask mask;
};

Tensor apply_primitive(Primitive op, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs = {});

// ---------------------------------------------------------------------------
// Differentiation

struct GraphNodeRecord {
  std::uint64_t id;
  Primitive op;
  std::vector<std::uint64_t> inputs;
};

/// Reachable subgraph of a root, inputs before consumers.
struct ComputationGraph {
  std::vector<GraphNodeRecord> nodes;
  std::uint64_t output = 0;
};

ComputationGraph trace(const Tensor& root);

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// Returns the visited graph. Throws for a non-scalar root or a root that
/// does not depend on any differentiable leaf.
ComputationGraph backward(const Tensor& root);

// ---------------------------------------------------------------------------
// Finite-difference verification

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct LeafGradReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t elements_checked = 0;
};

struct GradcheckReport {
  std::vector<LeafGradReport> leaves;
  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() <= tolerance; }
};

struct GradcheckOptions {
  /// 0 checks every element; otherwise a deterministic evenly-strided subset.
  std::size_t max_elements_per_leaf = 0;
};

/// Compares backward() against central differences on every leaf element.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
GradcheckReport finite_diff_gradcheck(const std::function<Tensor()>& f, std::span<const NamedTensor> leaves,
                                      double eps, const GradcheckOptions& options = {});

namespace testing {
/// Multiplies the gelu derivative by `factor` while alive. Used to prove that
/// the gradient harness detects a wrong backward rule.
class ScopedGeluGradientFault {
 public:
  explicit ScopedGeluGradientFault(double factor);
  ~ScopedGeluGradientFault();
  ScopedGeluGradientFault(const ScopedGeluGradientFault&) = delete;
  ScopedGeluGradientFault& operator=(const ScopedGeluGradientFault&) = delete;

 private:
  double previous_;
};
}  // namespace testing

}  // namespace coavt::diff
