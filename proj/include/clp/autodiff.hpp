#pragma once

// Reverse-mode automatic differentiation over dense Tensors.
//
// Nodes are immutable once created and reference their parents, so a graph
// is a DAG ordered by node id. Every backward rule is written in terms of
// the same differentiable primitives, which makes grad(..., create_graph =
// true) return Vars that can themselves be differentiated. That is what the
// one-step lookahead and the input-gradient penalty need.
//
// Broadcasting is limited to scalar-with-tensor. Row/column expansion is an
// explicit primitive (expand / reduce_to).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "clp/simd/kernels.hpp"
#include "clp/tensor.hpp"

namespace clp::ad {

enum class Primitive {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Relu,
  Tanh,
  Exp,
  Log,
  Sum,
  Mean,
  RowGather,
  RowScatter,
  Clamp,
  Scale,
  Square,
  Sqrt,
  Softmax,
  LogSoftmax,
  Expand,
  ReduceTo,
  Slice,
  Pad,
  Reshape,
  Sign,
};

std::string_view primitive_name(Primitive p) noexcept;

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  // A value that never receives a gradient.
  static Var constant(Tensor value);
  // A graph input; requires_grad controls whether gradients flow to it.
  static Var leaf(Tensor value, bool requires_grad = true);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool requires_grad() const noexcept;
  std::uint64_t id() const noexcept;
  Primitive op() const noexcept;
  const std::vector<Var>& parents() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// need[i] tells the rule whether parent i needs a gradient; entries for
// parents that don't may be left undefined.
using BackwardFn =
    std::function<std::vector<Var>(const Var& self, const Var& grad_out, std::span<const bool> need)>;

struct Node {
  std::uint64_t id = 0;
  Tensor value;
  Primitive op = Primitive::Leaf;
  std::vector<Var> parents;
  bool requires_grad = false;
  BackwardFn backward;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// Elementwise; operands must match in shape or one must hold a single element.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var scale(const Var& a, double c);
Var neg(const Var& a);

Var matmul(const Var& a, const Var& b, simd::Layout layout = simd::Layout::NN);

Var relu(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
// Gradient is 1 on [lo, hi], 0 outside.
Var clamp(const Var& x, double lo, double hi);
// Forward only: the result is detached.
Var sign(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

// Row-wise over the last axis of a rank-1 or rank-2 tensor; needs >= 2 columns.
Var softmax(const Var& x);
Var log_softmax(const Var& x);

// out[i] = x[i, index[i]]; x is NxC, result is Nx1.
Var row_gather(const Var& x, std::span<const std::size_t> index);
// Inverse of row_gather: g (Nx1) placed into zeros(N, cols).
Var row_scatter(const Var& g, std::span<const std::size_t> index, std::size_t cols);

// expand: scalar -> any, Nx1 -> NxC, 1xC or {C} -> NxC. reduce_to sums back.
Var expand(const Var& x, const Shape& target);
Var reduce_to(const Var& x, const Shape& target);

// Contiguous flat range [offset, offset + numel(shape)) of x, reshaped.
Var slice(const Var& x, std::size_t offset, const Shape& shape);
// Zeros of `target` with x's data written at flat `offset`.
Var pad(const Var& x, std::size_t offset, const Shape& target);
Var reshape(const Var& x, const Shape& shape);

// Generic entry for the attribute-free primitives.
Var apply_primitive(Primitive op, std::span<const Var> inputs);

// d root / d wrt[i]. root must hold exactly one element. Inputs the root
// does not depend on get a zero tensor of matching shape. With create_graph
// the returned gradients are differentiable.
std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph = false);
Var grad(const Var& root, const Var& wrt, bool create_graph = false);

}  // namespace clp::ad
