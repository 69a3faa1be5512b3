#include "clp/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "clp/errors.hpp"

namespace clp::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

bool single(const Shape& s) { return shape_numel(s) == 1; }

Var make(Primitive op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") +
                       std::string(primitive_name(op)));
  }
  auto node = std::make_shared<Node>();
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->value = std::move(value);
  node->op = op;
  bool rg = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

// Sums a broadcast gradient back down to a single-element operand.
Var unbroadcast(const Var& g, const Shape& target) {
  if (g.shape() == target) return g;
  return reshape(sum(g), target);
}

Shape binary_shape(const Var& a, const Var& b, Primitive op) {
  if (a.shape() == b.shape()) return a.shape();
  if (single(b.shape())) return a.shape();
  if (single(a.shape())) return b.shape();
  throw ShapeError(std::string(primitive_name(op)) + ": shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()) + " do not conform");
}

template <class F>
Tensor binary_values(const Tensor& a, const Tensor& b, const Shape& out_shape, F f) {
  Tensor out(out_shape);
  const std::size_t n = out.numel();
  const bool sa = a.numel() == 1 && n != 1;
  const bool sb = b.numel() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(sa ? a[0] : a[i], sb ? b[0] : b[i]);
  return out;
}

template <class F>
Tensor unary_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

void require_rows(const Var& x, const char* what) {
  if (x.value().rank() > 2) {
    throw ShapeError(std::string(what) + ": expected rank <= 2, got " + shape_str(x.shape()));
  }
}

}  // namespace

std::string_view primitive_name(Primitive p) noexcept {
  switch (p) {
    case Primitive::Leaf: return "leaf";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Mul: return "mul";
    case Primitive::Div: return "div";
    case Primitive::MatMul: return "matmul";
    case Primitive::Relu: return "relu";
    case Primitive::Tanh: return "tanh";
    case Primitive::Exp: return "exp";
    case Primitive::Log: return "log";
    case Primitive::Sum: return "sum";
    case Primitive::Mean: return "mean";
    case Primitive::RowGather: return "row_gather";
    case Primitive::RowScatter: return "row_scatter";
    case Primitive::Clamp: return "clamp";
    case Primitive::Scale: return "scale";
    case Primitive::Square: return "square";
    case Primitive::Sqrt: return "sqrt";
    case Primitive::Softmax: return "softmax";
    case Primitive::LogSoftmax: return "log_softmax";
    case Primitive::Expand: return "expand";
    case Primitive::ReduceTo: return "reduce_to";
    case Primitive::Slice: return "slice";
    case Primitive::Pad: return "pad";
    case Primitive::Reshape: return "reshape";
    case Primitive::Sign: return "sign";
  }
  return "?";
}

// ---- Var --------------------------------------------------------------------

Var Var::constant(Tensor value) {
  NoGradGuard guard;
  return make(Primitive::Leaf, std::move(value), {}, {});
}

Var Var::leaf(Tensor value, bool requires_grad) {
  Var v = constant(std::move(value));
  v.node_->requires_grad = requires_grad;
  return v;
}

const Tensor& Var::value() const {
  if (!node_) throw ContractError("access to undefined Var");
  return node_->value;
}

bool Var::requires_grad() const noexcept { return node_ && node_->requires_grad; }
std::uint64_t Var::id() const noexcept { return node_ ? node_->id : 0; }
Primitive Var::op() const noexcept { return node_ ? node_->op : Primitive::Leaf; }

const std::vector<Var>& Var::parents() const {
  if (!node_) throw ContractError("access to undefined Var");
  return node_->parents;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() noexcept { return t_grad_enabled; }

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  const Shape s = binary_shape(a, b, Primitive::Add);
  return make(Primitive::Add, binary_values(a.value(), b.value(), s, std::plus<>{}), {a, b},
              [](const Var& self, const Var& g, std::span<const bool> need) {
                const auto& p = self.parents();
                return std::vector<Var>{need[0] ? unbroadcast(g, p[0].shape()) : Var{},
                                        need[1] ? unbroadcast(g, p[1].shape()) : Var{}};
              });
}

Var sub(const Var& a, const Var& b) {
  const Shape s = binary_shape(a, b, Primitive::Sub);
  return make(Primitive::Sub, binary_values(a.value(), b.value(), s, std::minus<>{}), {a, b},
              [](const Var& self, const Var& g, std::span<const bool> need) {
                const auto& p = self.parents();
                return std::vector<Var>{need[0] ? unbroadcast(g, p[0].shape()) : Var{},
                                        need[1] ? unbroadcast(neg(g), p[1].shape()) : Var{}};
              });
}

Var mul(const Var& a, const Var& b) {
  const Shape s = binary_shape(a, b, Primitive::Mul);
  return make(Primitive::Mul, binary_values(a.value(), b.value(), s, std::multiplies<>{}), {a, b},
              [](const Var& self, const Var& g, std::span<const bool> need) {
                const auto& p = self.parents();
                return std::vector<Var>{need[0] ? unbroadcast(mul(g, p[1]), p[0].shape()) : Var{},
                                        need[1] ? unbroadcast(mul(g, p[0]), p[1].shape()) : Var{}};
              });
}

Var div(const Var& a, const Var& b) {
  const Shape s = binary_shape(a, b, Primitive::Div);
  return make(Primitive::Div, binary_values(a.value(), b.value(), s, std::divides<>{}), {a, b},
              [](const Var& self, const Var& g, std::span<const bool> need) {
                const auto& p = self.parents();
                Var ga, gb;
                if (need[0]) ga = unbroadcast(div(g, p[1]), p[0].shape());
                if (need[1]) gb = unbroadcast(neg(div(mul(g, self), p[1])), p[1].shape());
                return std::vector<Var>{ga, gb};
              });
}

Var add_scalar(const Var& a, double c) { return add(a, Var::constant(Tensor::scalar(c))); }

Var scale(const Var& a, double c) {
  return make(Primitive::Scale, unary_values(a.value(), [c](double v) { return c * v; }), {a},
              [c](const Var&, const Var& g, std::span<const bool>) {
                return std::vector<Var>{scale(g, c)};
              });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& x) {
  return make(Primitive::Relu, unary_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
              {x}, [](const Var& self, const Var& g, std::span<const bool>) {
                const Tensor& xv = self.parents()[0].value();
                Var mask = Var::constant(unary_values(xv, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                return std::vector<Var>{mul(g, mask)};
              });
}

Var tanh(const Var& x) {
  return make(Primitive::Tanh, unary_values(x.value(), [](double v) { return std::tanh(v); }), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                Var one_minus = sub(Var::constant(Tensor::scalar(1.0)), square(self));
                return std::vector<Var>{mul(g, one_minus)};
              });
}

Var exp(const Var& x) {
  return make(Primitive::Exp, unary_values(x.value(), [](double v) { return std::exp(v); }), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{mul(g, self)};
              });
}

Var log(const Var& x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return make(Primitive::Log, unary_values(x.value(), [](double v) { return std::log(v); }), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{div(g, self.parents()[0])};
              });
}

Var square(const Var& x) {
  return make(Primitive::Square, unary_values(x.value(), [](double v) { return v * v; }), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{mul(g, scale(self.parents()[0], 2.0))};
              });
}

Var sqrt(const Var& x) {
  for (double v : x.value().data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return make(Primitive::Sqrt, unary_values(x.value(), [](double v) { return std::sqrt(v); }), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{div(g, scale(self, 2.0))};
              });
}

Var clamp(const Var& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return make(Primitive::Clamp, unary_values(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); }),
              {x}, [lo, hi](const Var& self, const Var& g, std::span<const bool>) {
                const Tensor& xv = self.parents()[0].value();
                Var mask = Var::constant(
                    unary_values(xv, [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }));
                return std::vector<Var>{mul(g, mask)};
              });
}

Var sign(const Var& x) {
  return Var::constant(unary_values(x.value(), [](double v) { return double((v > 0.0) - (v < 0.0)); }));
}

// ---- reductions -------------------------------------------------------------

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make(Primitive::Sum, Tensor::scalar(s), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{expand(g, self.parents()[0].shape())};
              });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make(Primitive::Mean, Tensor::scalar(s / n), {x},
              [n](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{scale(expand(g, self.parents()[0].shape()), 1.0 / n)};
              });
}

// ---- matmul -----------------------------------------------------------------

Var matmul(const Var& a, const Var& b, simd::Layout layout) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) {
    throw ShapeError("matmul: operands must be rank 2, got " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  std::size_t m = 0, n = 0, k = 0, kb = 0;
  switch (layout) {
    case simd::Layout::NN:
      m = av.shape()[0], k = av.shape()[1], kb = bv.shape()[0], n = bv.shape()[1];
      break;
    case simd::Layout::NT:
      m = av.shape()[0], k = av.shape()[1], n = bv.shape()[0], kb = bv.shape()[1];
      break;
    case simd::Layout::TN:
      k = av.shape()[0], m = av.shape()[1], kb = bv.shape()[0], n = bv.shape()[1];
      break;
  }
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  simd::gemm(layout, m, n, k, av.data().data(), bv.data().data(), out.data().data());
  return make(Primitive::MatMul, std::move(out), {a, b},
              [layout](const Var& self, const Var& g, std::span<const bool> need) {
                const Var& A = self.parents()[0];
                const Var& B = self.parents()[1];
                Var ga, gb;
                using simd::Layout;
                switch (layout) {
                  case Layout::NN:
                    if (need[0]) ga = matmul(g, B, Layout::NT);
                    if (need[1]) gb = matmul(A, g, Layout::TN);
                    break;
                  case Layout::NT:
                    if (need[0]) ga = matmul(g, B, Layout::NN);
                    if (need[1]) gb = matmul(g, A, Layout::TN);
                    break;
                  case Layout::TN:
                    if (need[0]) ga = matmul(B, g, Layout::NT);
                    if (need[1]) gb = matmul(A, g, Layout::NN);
                    break;
                }
                return std::vector<Var>{ga, gb};
              });
}

// ---- row-wise ---------------------------------------------------------------

namespace {

Tensor softmax_values(const Tensor& x, bool log_space) {
  Tensor out(x.shape());
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    double* oi = out.data().data() + i * c;
    double mx = xi[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    if (log_space) {
      const double lz = std::log(z);
      for (std::size_t j = 0; j < c; ++j) oi[j] = xi[j] - mx - lz;
    } else {
      for (std::size_t j = 0; j < c; ++j) oi[j] = std::exp(xi[j] - mx) / z;
    }
  }
  return out;
}

Shape row_sum_shape(const Shape& s) {
  if (s.size() == 2) return Shape{s[0], 1};
  return Shape{};
}

}  // namespace

Var softmax(const Var& x) {
  require_rows(x, "softmax");
  if (x.value().cols() < 2) throw ShapeError("softmax: need at least 2 classes");
  return make(Primitive::Softmax, softmax_values(x.value(), false), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                const Shape& s = self.shape();
                Var dotted = expand(reduce_to(mul(g, self), row_sum_shape(s)), s);
                return std::vector<Var>{mul(self, sub(g, dotted))};
              });
}

Var log_softmax(const Var& x) {
  require_rows(x, "log_softmax");
  if (x.value().cols() < 2) throw ShapeError("log_softmax: need at least 2 classes");
  return make(Primitive::LogSoftmax, softmax_values(x.value(), true), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                const Shape& s = self.shape();
                Var gsum = expand(reduce_to(g, row_sum_shape(s)), s);
                return std::vector<Var>{sub(g, mul(exp(self), gsum))};
              });
}

Var row_gather(const Var& x, std::span<const std::size_t> index) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || index.size() != xv.shape()[0]) {
    throw ShapeError("row_gather: need NxC input with N indices, got " + shape_str(xv.shape()) +
                     " and " + std::to_string(index.size()) + " indices");
  }
  const std::size_t n = xv.shape()[0], c = xv.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  Tensor out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if ((*idx)[i] >= c) throw ShapeError("row_gather: index out of range");
    out[i] = xv.at(i, (*idx)[i]);
  }
  return make(Primitive::RowGather, std::move(out), {x},
              [idx, c](const Var&, const Var& g, std::span<const bool>) {
                return std::vector<Var>{row_scatter(g, *idx, c)};
              });
}

Var row_scatter(const Var& g, std::span<const std::size_t> index, std::size_t cols) {
  const Tensor& gv = g.value();
  if (gv.rank() != 2 || gv.shape()[1] != 1 || index.size() != gv.shape()[0]) {
    throw ShapeError("row_scatter: need Nx1 input with N indices, got " + shape_str(gv.shape()));
  }
  const std::size_t n = gv.shape()[0];
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  Tensor out(Shape{n, cols});
  for (std::size_t i = 0; i < n; ++i) {
    if ((*idx)[i] >= cols) throw ShapeError("row_scatter: index out of range");
    out.at(i, (*idx)[i]) = gv[i];
  }
  return make(Primitive::RowScatter, std::move(out), {g},
              [idx](const Var&, const Var& gg, std::span<const bool>) {
                return std::vector<Var>{row_gather(gg, *idx)};
              });
}

// ---- shape plumbing ---------------------------------------------------------

namespace {

enum class ExpandKind { Same, Fill, Cols, Rows };

// Cols: Nx1 replicated across columns. Rows: 1xC / {C} replicated down rows.
ExpandKind classify_expand(const Shape& small, const Shape& big) {
  if (small == big) return ExpandKind::Same;
  if (single(small)) return ExpandKind::Fill;
  if (big.size() == 2) {
    if (small.size() == 2 && small[0] == big[0] && small[1] == 1) return ExpandKind::Cols;
    if (small.size() == 2 && small[0] == 1 && small[1] == big[1]) return ExpandKind::Rows;
    if (small.size() == 1 && small[0] == big[1]) return ExpandKind::Rows;
  }
  throw ShapeError("cannot expand " + shape_str(small) + " to " + shape_str(big));
}

}  // namespace

Var expand(const Var& x, const Shape& target) {
  const ExpandKind kind = classify_expand(x.shape(), target);
  if (kind == ExpandKind::Same) return x;
  const Tensor& xv = x.value();
  Tensor out(target);
  const std::size_t n = out.numel();
  switch (kind) {
    case ExpandKind::Fill:
      for (std::size_t i = 0; i < n; ++i) out[i] = xv[0];
      break;
    case ExpandKind::Cols:
      for (std::size_t i = 0; i < target[0]; ++i)
        for (std::size_t j = 0; j < target[1]; ++j) out.at(i, j) = xv[i];
      break;
    case ExpandKind::Rows:
      for (std::size_t i = 0; i < target[0]; ++i)
        for (std::size_t j = 0; j < target[1]; ++j) out.at(i, j) = xv[j];
      break;
    case ExpandKind::Same:
      break;
  }
  return make(Primitive::Expand, std::move(out), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{reduce_to(g, self.parents()[0].shape())};
              });
}

Var reduce_to(const Var& x, const Shape& target) {
  const ExpandKind kind = classify_expand(target, x.shape());
  if (kind == ExpandKind::Same) return x;
  const Tensor& xv = x.value();
  Tensor out(target);
  switch (kind) {
    case ExpandKind::Fill: {
      double s = 0.0;
      for (double v : xv.data()) s += v;
      out[0] = s;
      break;
    }
    case ExpandKind::Cols:
      for (std::size_t i = 0; i < xv.shape()[0]; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < xv.shape()[1]; ++j) s += xv.at(i, j);
        out[i] = s;
      }
      break;
    case ExpandKind::Rows:
      for (std::size_t i = 0; i < xv.shape()[0]; ++i)
        for (std::size_t j = 0; j < xv.shape()[1]; ++j) out[j] += xv.at(i, j);
      break;
    case ExpandKind::Same:
      break;
  }
  return make(Primitive::ReduceTo, std::move(out), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{expand(g, self.parents()[0].shape())};
              });
}

Var slice(const Var& x, std::size_t offset, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  if (offset + n > x.numel()) {
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                     ") exceeds " + std::to_string(x.numel()) + " elements");
  }
  const auto src = x.value().data().subspan(offset, n);
  Tensor out(shape, std::vector<double>(src.begin(), src.end()));
  return make(Primitive::Slice, std::move(out), {x},
              [offset](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{pad(g, offset, self.parents()[0].shape())};
              });
}

Var pad(const Var& x, std::size_t offset, const Shape& target) {
  Tensor out(target);
  if (offset + x.numel() > out.numel()) throw ShapeError("pad: source does not fit in target");
  std::copy(x.value().data().begin(), x.value().data().end(), out.data().begin() + offset);
  return make(Primitive::Pad, std::move(out), {x},
              [offset](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{slice(g, offset, self.parents()[0].shape())};
              });
}

Var reshape(const Var& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  if (shape == x.shape()) return x;
  return make(Primitive::Reshape, x.value().reshaped(shape), {x},
              [](const Var& self, const Var& g, std::span<const bool>) {
                return std::vector<Var>{reshape(g, self.parents()[0].shape())};
              });
}

Var apply_primitive(Primitive op, std::span<const Var> in) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ContractError(std::string(primitive_name(op)) + " expects " + std::to_string(n) +
                          " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case Primitive::Add: arity(2); return add(in[0], in[1]);
    case Primitive::Sub: arity(2); return sub(in[0], in[1]);
    case Primitive::Mul: arity(2); return mul(in[0], in[1]);
    case Primitive::Div: arity(2); return div(in[0], in[1]);
    case Primitive::MatMul: arity(2); return matmul(in[0], in[1]);
    case Primitive::Relu: arity(1); return relu(in[0]);
    case Primitive::Tanh: arity(1); return tanh(in[0]);
    case Primitive::Exp: arity(1); return exp(in[0]);
    case Primitive::Log: arity(1); return log(in[0]);
    case Primitive::Sum: arity(1); return sum(in[0]);
    case Primitive::Mean: arity(1); return mean(in[0]);
    case Primitive::Square: arity(1); return square(in[0]);
    case Primitive::Sqrt: arity(1); return sqrt(in[0]);
    case Primitive::Softmax: arity(1); return softmax(in[0]);
    case Primitive::LogSoftmax: arity(1); return log_softmax(in[0]);
    case Primitive::Sign: arity(1); return sign(in[0]);
    default:
      throw ContractError(std::string(primitive_name(op)) + " takes attributes; call it directly");
  }
}

// ---- backward ---------------------------------------------------------------

std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("grad: root must be a single-element tensor");
  }
  std::vector<Var> result(wrt.size());
  auto zeros_for = [](const Var& w) { return Var::constant(Tensor(w.shape())); };

  if (!root.requires_grad()) {
    for (std::size_t i = 0; i < wrt.size(); ++i) result[i] = zeros_for(wrt[i]);
    return result;
  }

  // Collect the differentiable ancestry of root.
  std::vector<Var> nodes;
  std::unordered_set<std::uint64_t> seen;
  std::vector<Var> stack{root};
  seen.insert(root.id());
  while (!stack.empty()) {
    Var v = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : v.parents()) {
      if (p.requires_grad() && seen.insert(p.id()).second) stack.push_back(p);
    }
    nodes.push_back(std::move(v));
  }
  // Parents always have smaller ids than children.
  std::sort(nodes.begin(), nodes.end(), [](const Var& a, const Var& b) { return a.id() < b.id(); });

  std::unordered_set<std::uint64_t> targets;
  for (const auto& w : wrt) {
    if (w.defined()) targets.insert(w.id());
  }
  // A node is needed if a target is reachable from it through parent links.
  std::unordered_set<std::uint64_t> needed;
  for (const auto& v : nodes) {
    bool nd = targets.count(v.id()) > 0;
    for (const auto& p : v.parents()) nd = nd || needed.count(p.id()) > 0;
    if (nd) needed.insert(v.id());
  }

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::unordered_map<std::uint64_t, Var> grads;
  grads.emplace(root.id(), Var::constant(Tensor(root.shape(), 1.0)));

  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Var& v = *it;
    if (!needed.count(v.id())) continue;
    auto git = grads.find(v.id());
    if (git == grads.end()) continue;
    const auto& parents = v.parents();
    if (parents.empty()) continue;
    const std::unique_ptr<bool[]> need(new bool[parents.size()]);
    bool any = false;
    for (std::size_t i = 0; i < parents.size(); ++i) {
      need[i] = parents[i].requires_grad() && needed.count(parents[i].id()) > 0;
      any = any || need[i];
    }
    if (!any) continue;
    const Var g = git->second;
    std::vector<Var> pg = v.node()->backward(v, g, std::span<const bool>(need.get(), parents.size()));
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!need[i] || !pg[i].defined()) continue;
      auto [pit, inserted] = grads.try_emplace(parents[i].id(), pg[i]);
      if (!inserted) pit->second = add(pit->second, pg[i]);
    }
    // Free intermediate gradients that will not be read again.
    if (!targets.count(v.id())) grads.erase(v.id());
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (!wrt[i].defined()) continue;
    auto git = grads.find(wrt[i].id());
    result[i] = git == grads.end() ? zeros_for(wrt[i]) : git->second;
  }
  return result;
}

Var grad(const Var& root, const Var& wrt, bool create_graph) {
  return grad(root, std::span<const Var>(&wrt, 1), create_graph)[0];
}

}  // namespace clp::ad
