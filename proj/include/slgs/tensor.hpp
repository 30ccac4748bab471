#pragma once

// Dense float32 tensors with a reverse-mode tape.
//
// A Tensor is a shape plus a shared, contiguous row-major buffer. Buffers
// produced by ops are never mutated afterwards, so backward closures can hold
// on to their inputs by reference count instead of copying. A Tensor becomes
// "tracked" once it is watched by a Tape or produced by an op with a tracked
// input; the tape records one node per tracked result, in creation order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slgs/errors.hpp"

namespace slgs::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tape;

class Tensor {
 public:
  // Eigen chooses where vectorized reductions start from the buffer address,
  // so storage is aligned to make summation order (and results) reproducible.
  using Buffer = std::vector<float, Eigen::aligned_allocator<float>>;

  Tensor() : Tensor(Shape{1}) {}

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    check_shape();
    buf_ = std::make_shared<Buffer>(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
    check_shape();
    if (values.size() != numel(shape_))
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + to_string(shape_));
    buf_ = std::make_shared<Buffer>(values.begin(), values.end());
  }

  static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_[normalize_axis(axis)]; }
  std::size_t size() const { return buf_->size(); }

  std::span<float> data() { return {buf_->data(), buf_->size()}; }
  std::span<const float> data() const { return {buf_->data(), buf_->size()}; }
  std::vector<float> values() const { return {buf_->begin(), buf_->end()}; }
  float operator[](std::size_t i) const { return (*buf_)[i]; }
  float& operator[](std::size_t i) { return (*buf_)[i]; }

  float item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*buf_)[0];
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same buffer, no tape association.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  /// Deep copy with no tape association.
  Tensor clone() const {
    Tensor t = detach();
    t.buf_ = std::make_shared<Buffer>(*buf_);
    return t;
  }

  int normalize_axis(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
    return a;
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw ShapeError("Tensor: empty shape");
    for (int d : shape_)
      if (d < 0) throw ShapeError("Tensor: negative dimension in " + to_string(shape_));
  }

  Shape shape_;
  std::shared_ptr<Buffer> buf_;
  Tape* tape_ = nullptr;
  int node_ = -1;

  friend class Tape;
};

/// Backward closure: receives d(loss)/d(output) and accumulates into the
/// gradient buffers of its inputs. Untracked inputs get a null pointer.
using BackwardFn = std::function<void(std::span<const float> grad_out,
                                      std::span<float* const> grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `leaf` as a differentiable input. The result aliases its data.
  Tensor watch(const Tensor& leaf) {
    if (leaf.tracked()) throw StateError("watch: tensor is already tracked");
    Tensor t = leaf;
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back({leaf.shape(), {}, nullptr});
    return t;
  }

  Tensor record(Tensor out, std::span<const Tensor* const> inputs, BackwardFn fn) {
    if (backward_done_) throw StateError("record: tape already consumed by backward()");
    Node n{out.shape(), {}, std::move(fn)};
    for (const Tensor* in : inputs) {
      if (in->tracked() && in->tape_ != this)
        throw StateError("record: inputs belong to different tapes");
      n.inputs.push_back(in->tracked() ? in->node_ : -1);
    }
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(n));
    return out;
  }

  void backward(const Tensor& loss) {
    if (backward_done_) throw StateError("backward: called twice on the same tape without reset()");
    if (loss.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
    if (loss.tape_ != this) throw StateError("backward: loss is not recorded on this tape");
    backward_done_ = true;
    grads_.assign(nodes_.size(), {});
    grads_[loss.node_].assign(1, 1.0f);
    std::vector<float*> in_ptrs;
    for (int i = loss.node_; i >= 0; --i) {
      Node& n = nodes_[i];
      if (grads_[i].empty() || !n.fn) continue;
      in_ptrs.clear();
      for (int id : n.inputs) {
        if (id < 0) {
          in_ptrs.push_back(nullptr);
          continue;
        }
        if (grads_[id].empty()) grads_[id].assign(numel(nodes_[id].shape), 0.0f);
        in_ptrs.push_back(grads_[id].data());
      }
      n.fn(grads_[i], in_ptrs);
    }
  }

  /// d(loss)/d(t); zeros when t did not influence the loss.
  Tensor grad(const Tensor& t) const {
    if (t.tape_ != this) throw StateError("grad: tensor is not recorded on this tape");
    if (!backward_done_) throw StateError("grad: backward() has not run");
    const auto& g = grads_[t.node_];
    Tensor out(t.shape(), 0.0f);
    std::copy(g.begin(), g.end(), out.data().begin());
    return out;
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<int> inputs;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor::Buffer> grads_;
  bool backward_done_ = false;
};

/// Attaches `out` to the tape of the first tracked input (if any). This is
/// the extension point for custom differentiable operations.
inline Tensor make_result(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs)
    if (in->tracked()) {
      tape = in->tape();
      break;
    }
  if (!tape) return out;
  return tape->record(std::move(out), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                      std::move(fn));
}

inline Tensor make_result(Tensor out, const std::vector<const Tensor*>& inputs, BackwardFn fn) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs)
    if (in->tracked()) {
      tape = in->tape();
      break;
    }
  if (!tape) return out;
  return tape->record(std::move(out), std::span<const Tensor* const>(inputs), std::move(fn));
}

// ---------------------------------------------------------------------------
// Construction helpers

inline Tensor uniform(const Shape& shape, float lo, float hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t(shape);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor normal(const Shape& shape, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Tensor t(shape);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy-style broadcasting

namespace detail {

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index, b_index;  // empty when `same`
};

inline std::shared_ptr<const Broadcast> plan_broadcast(const Shape& a, const Shape& b) {
  auto plan = std::make_shared<Broadcast>();
  if (a == b) {
    plan->out = a;
    plan->same = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  plan->out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    plan->out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> s(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      s[i] = p[i] == 1 ? 0 : acc;
      acc *= static_cast<std::size_t>(p[i]);
    }
    return s;
  };
  const auto sa = strides(pa), sb = strides(pb);
  const std::size_t n = numel(plan->out);
  plan->a_index.resize(n);
  plan->b_index.resize(n);
  std::vector<int> idx(r, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d < r; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    plan->a_index[k] = ia;
    plan->b_index[k] = ib;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < plan->out[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

// f(a, b) -> value; da(a, b) and db(a, b) -> partials.
template <class F, class Fa, class Fb>
Tensor binary(const Tensor& a, const Tensor& b, F f, Fa da, Fb db) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  Tensor out(plan->out);
  auto o = out.data();
  const auto av = a.data(), bv = b.data();
  if (plan->same) {
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = f(av[k], bv[k]);
  } else {
    for (std::size_t k = 0; k < o.size(); ++k)
      o[k] = f(av[plan->a_index[k]], bv[plan->b_index[k]]);
  }
  Tensor ac = a.detach(), bc = b.detach();
  return make_result(std::move(out), {&a, &b},
                     [plan, ac, bc, da, db](std::span<const float> g, std::span<float* const> gi) {
                       const auto av = ac.data(), bv = bc.data();
                       for (std::size_t k = 0; k < g.size(); ++k) {
                         const std::size_t ia = plan->same ? k : plan->a_index[k];
                         const std::size_t ib = plan->same ? k : plan->b_index[k];
                         if (gi[0]) gi[0][ia] += g[k] * da(av[ia], bv[ib]);
                         if (gi[1]) gi[1][ib] += g[k] * db(av[ia], bv[ib]);
                       }
                     });
}

template <class F, class Df>
Tensor unary(const Tensor& x, F f, Df df) {
  Tensor out(x.shape());
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = f(xv[k]);
  Tensor xc = x.detach(), oc = out.detach();
  return make_result(std::move(out), {&x},
                     [xc, oc, df](std::span<const float> g, std::span<float* const> gi) {
                       const auto xv = xc.data(), ov = oc.data();
                       for (std::size_t k = 0; k < g.size(); ++k) gi[0][k] += g[k] * df(xv[k], ov[k]);
                     });
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](float x, float y) { return x / y; }, [](float, float y) { return 1.0f / y; },
      [](float x, float y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& x, float c) {
  return detail::unary(
      x, [c](float v) { return c * v; }, [c](float, float) { return c; });
}
inline Tensor add_scalar(const Tensor& x, float c) {
  return detail::unary(
      x, [c](float v) { return v + c; }, [](float, float) { return 1.0f; });
}
inline Tensor neg(const Tensor& x) { return scale(x, -1.0f); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, float c) { return scale(a, c); }
inline Tensor operator*(float c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

/// ELU with alpha = 1.
inline Tensor elu(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return v > 0.0f ? v : std::expm1(v); },
      [](float v, float y) { return v > 0.0f ? 1.0f : y + 1.0f; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](float, float y) { return y * (1.0f - y); });
}
inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}
inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::abs(v); },
      [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}
inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::sqrt(v); },
      [](float, float y) { return y > 0.0f ? 0.5f / y : 0.0f; });
}
inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}


// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const std::size_t n = x.size();
  return make_result(Tensor::scalar(static_cast<float>(acc)), {&x},
                     [n](std::span<const float> g, std::span<float* const> gi) {
                       for (std::size_t k = 0; k < n; ++k) gi[0][k] += g[0];
                     });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.size())); }

/// Sum over one axis; the axis is kept with extent 1.
inline Tensor sum(const Tensor& x, int axis) {
  const int a = x.normalize_axis(axis);
  const auto sp = detail::split_axis(x.shape(), a);
  Shape os = x.shape();
  os[a] = 1;
  Tensor out(os);
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t p = 0; p < sp.outer; ++p)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) o[p * sp.inner + i] += xv[(p * sp.n + k) * sp.inner + i];
  return make_result(std::move(out), {&x},
                     [sp](std::span<const float> g, std::span<float* const> gi) {
                       for (std::size_t p = 0; p < sp.outer; ++p)
                         for (std::size_t k = 0; k < sp.n; ++k)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                             gi[0][(p * sp.n + k) * sp.inner + i] += g[p * sp.inner + i];
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  Tensor out(std::move(shape), x.values());
  return make_result(std::move(out), {&x}, [](std::span<const float> g, std::span<float* const> gi) {
    for (std::size_t k = 0; k < g.size(); ++k) gi[0][k] += g[k];
  });
}

/// Elements [start, start + length) along `axis`.
inline Tensor slice(const Tensor& x, int axis, int start, int length) {
  const int a = x.normalize_axis(axis);
  if (start < 0 || length < 1 || start + length > x.dim(a))
    throw ShapeError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for axis " + std::to_string(a) + " of " + to_string(x.shape()));
  const auto sp = detail::split_axis(x.shape(), a);
  Shape os = x.shape();
  os[a] = length;
  Tensor out(os);
  auto o = out.data();
  const auto xv = x.data();
  const std::size_t run = static_cast<std::size_t>(length) * sp.inner;
  for (std::size_t p = 0; p < sp.outer; ++p)
    std::copy_n(xv.begin() + (p * sp.n + start) * sp.inner, run, o.begin() + p * run);
  return make_result(std::move(out), {&x},
                     [sp, start, run](std::span<const float> g, std::span<float* const> gi) {
                       for (std::size_t p = 0; p < sp.outer; ++p) {
                         float* dst = gi[0] + (p * sp.n + start) * sp.inner;
                         for (std::size_t k = 0; k < run; ++k) dst[k] += g[p * run + k];
                       }
                     });
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int a = xs[0].normalize_axis(axis);
  Shape os = xs[0].shape();
  os[a] = 0;
  for (const Tensor& t : xs) {
    Shape probe = t.shape();
    if (probe.size() != os.size()) throw ShapeError("concat: rank mismatch " + to_string(xs[0].shape()) + " vs " + to_string(probe));
    for (std::size_t d = 0; d < os.size(); ++d)
      if (static_cast<int>(d) != a && probe[d] != xs[0].shape()[d])
        throw ShapeError("concat: shape mismatch " + to_string(xs[0].shape()) + " vs " + to_string(probe));
    os[a] += probe[a];
  }
  const auto sp = detail::split_axis(os, a);
  Tensor out(os);
  auto o = out.data();
  std::vector<std::size_t> offsets, runs;
  std::size_t off = 0;
  for (const Tensor& t : xs) {
    const std::size_t run = static_cast<std::size_t>(t.dim(a)) * sp.inner;
    for (std::size_t p = 0; p < sp.outer; ++p)
      std::copy_n(t.data().begin() + p * run, run, o.begin() + p * sp.n * sp.inner + off);
    offsets.push_back(off);
    runs.push_back(run);
    off += run;
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& t : xs) inputs.push_back(&t);
  const std::size_t row = sp.n * sp.inner, outer = sp.outer;
  return make_result(std::move(out), inputs,
                     [offsets, runs, row, outer](std::span<const float> g, std::span<float* const> gi) {
                       for (std::size_t k = 0; k < gi.size(); ++k) {
                         if (!gi[k]) continue;
                         for (std::size_t p = 0; p < outer; ++p)
                           for (std::size_t i = 0; i < runs[k]; ++i)
                             gi[k][p * runs[k] + i] += g[p * row + offsets[k] + i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;
// Forward products accumulate in double and round once, which keeps float32
// outputs accurate enough for finite-difference checks at h = 1e-3.
template <class A, class B>
RowMat product(const A& a, const B& b) {
  return (a.template cast<double>() * b.template cast<double>()).template cast<float>();
}

}  // namespace detail

/// (m x k) @ (k x n) -> (m x n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  detail::MapMat(out.data().data(), m, n) =
      detail::product(detail::MapConstMat(a.data().data(), m, k), detail::MapConstMat(b.data().data(), k, n));
  Tensor ac = a.detach(), bc = b.detach();
  return make_result(std::move(out), {&a, &b},
                     [ac, bc, m, k, n](std::span<const float> g, std::span<float* const> gi) {
                       detail::MapConstMat gm(g.data(), m, n);
                       if (gi[0])
                         detail::MapMat(gi[0], m, k).noalias() +=
                             gm * detail::MapConstMat(bc.data().data(), k, n).transpose();
                       if (gi[1])
                         detail::MapMat(gi[1], k, n).noalias() +=
                             detail::MapConstMat(ac.data().data(), m, k).transpose() * gm;
                     });
}

/// Normalizes each slice along `axis` to zero mean and unit variance.
inline Tensor layer_norm(const Tensor& x, int axis, float eps = 1e-5f) {
  const int a = x.normalize_axis(axis);
  const auto sp = detail::split_axis(x.shape(), a);
  Tensor out(x.shape());
  auto o = out.data();
  const auto xv = x.data();
  auto inv_std = std::make_shared<std::vector<float>>(sp.outer * sp.inner);
  for (std::size_t p = 0; p < sp.outer; ++p)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = 0.0, v = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) m += xv[(p * sp.n + k) * sp.inner + i];
      m /= sp.n;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double d = xv[(p * sp.n + k) * sp.inner + i] - m;
        v += d * d;
      }
      v /= sp.n;
      const float is = static_cast<float>(1.0 / std::sqrt(v + eps));
      (*inv_std)[p * sp.inner + i] = is;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = (p * sp.n + k) * sp.inner + i;
        o[idx] = static_cast<float>((xv[idx] - m) * is);
      }
    }
  Tensor oc = out.detach();
  return make_result(std::move(out), {&x},
                     [sp, inv_std, oc](std::span<const float> g, std::span<float* const> gi) {
                       const auto y = oc.data();
                       for (std::size_t p = 0; p < sp.outer; ++p)
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           double mg = 0.0, mgy = 0.0;
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t idx = (p * sp.n + k) * sp.inner + i;
                             mg += g[idx];
                             mgy += g[idx] * y[idx];
                           }
                           mg /= sp.n;
                           mgy /= sp.n;
                           const float is = (*inv_std)[p * sp.inner + i];
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t idx = (p * sp.n + k) * sp.inner + i;
                             gi[0][idx] += static_cast<float>(is * (g[idx] - mg - y[idx] * mgy));
                           }
                         }
                     });
}

/// Rows of an (n x d) tensor scaled to unit length. All-zero rows map to
/// (0, ..., 0, 1) with zero gradient.
inline Tensor normalize_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("normalize_rows: expected rank 2, got " + to_string(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  auto norms = std::make_shared<std::vector<float>>(n);
  for (int r = 0; r < n; ++r) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += double(x[r * d + c]) * x[r * d + c];
    const float len = static_cast<float>(std::sqrt(s));
    (*norms)[r] = len;
    for (int c = 0; c < d; ++c)
      out[r * d + c] = len > 1e-12f ? x[r * d + c] / len : (c == d - 1 ? 1.0f : 0.0f);
  }
  Tensor oc = out.detach();
  return make_result(std::move(out), {&x},
                     [norms, oc, n, d](std::span<const float> g, std::span<float* const> gi) {
                       for (int r = 0; r < n; ++r) {
                         const float len = (*norms)[r];
                         if (len <= 1e-12f) continue;
                         double dot = 0.0;
                         for (int c = 0; c < d; ++c) dot += g[r * d + c] * oc[r * d + c];
                         for (int c = 0; c < d; ++c)
                           gi[0][r * d + c] += static_cast<float>((g[r * d + c] - dot * oc[r * d + c]) / len);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Image ops. Feature maps are (C x H x W).

namespace detail {

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// (C*k*k) x (Ho*Wo) patch matrix with zero padding.
inline void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
                   float* col) {
  const int hw = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill_n(row + oy * wo, wo, 0.0f);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
}

inline void col2im(const float* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
                   float* x) {
  const int hw = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          float* dst = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Square-kernel 2D convolution. x: (C x H x W), weight: (O x C x k x k),
/// bias: (O) or empty pointer.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride = 1, int pad = 0) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3))
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0)))
    throw ShapeError("conv2d: bias " + to_string(bias->shape()) + " vs weight " + to_string(weight.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int o = weight.dim(0), k = weight.dim(2);
  const int ho = detail::conv_out_size(h, k, stride, pad), wo = detail::conv_out_size(w, k, stride, pad);
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: empty output for input " + to_string(x.shape()));
  const int ckk = c * k * k, hw = ho * wo;
  auto col = std::make_shared<Tensor::Buffer>(static_cast<std::size_t>(ckk) * hw);
  detail::im2col(x.data().data(), c, h, w, k, stride, pad, ho, wo, col->data());
  Tensor out(Shape{o, ho, wo});
  detail::MapMat om(out.data().data(), o, hw);
  {
    Eigen::MatrixXd acc = detail::MapConstMat(weight.data().data(), o, ckk).cast<double>() *
                          detail::MapConstMat(col->data(), ckk, hw).cast<double>();
    if (bias)
      for (int oc = 0; oc < o; ++oc) acc.row(oc).array() += double((*bias)[oc]);
    om = acc.cast<float>();
  }
  Tensor wc = weight.detach();
  static const Tensor kNoBias;
  return make_result(std::move(out), {&x, &weight, bias ? bias : &kNoBias},
                     [col, wc, c, h, w, o, k, stride, pad, ho, wo, ckk, hw](std::span<const float> g,
                                                                            std::span<float* const> gi) {
                       detail::MapConstMat gm(g.data(), o, hw);
                       if (gi[1])
                         detail::MapMat(gi[1], o, ckk).noalias() +=
                             gm * detail::MapConstMat(col->data(), ckk, hw).transpose();
                       if (gi[2])
                         for (int oc = 0; oc < o; ++oc) gi[2][oc] += gm.row(oc).sum();
                       if (gi[0]) {
                         detail::RowMat dcol = detail::MapConstMat(wc.data().data(), o, ckk).transpose() * gm;
                         detail::col2im(dcol.data(), c, h, w, k, stride, pad, ho, wo, gi[0]);
                       }
                     });
}

/// Adjoint of conv2d with the same geometry. x: (C_in x H x W),
/// weight: (C_in x C_out x k x k).
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride = 1,
                               int pad = 0) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(0) != x.dim(0) || weight.dim(2) != weight.dim(3))
    throw ShapeError("conv_transpose2d: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  const int ci = x.dim(0), hi = x.dim(1), wi = x.dim(2);
  const int co = weight.dim(1), k = weight.dim(2);
  const int ho = (hi - 1) * stride - 2 * pad + k, wo = (wi - 1) * stride - 2 * pad + k;
  if (ho < 1 || wo < 1) throw ShapeError("conv_transpose2d: empty output for " + to_string(x.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != co))
    throw ShapeError("conv_transpose2d: bias " + to_string(bias->shape()) + " vs weight " +
                     to_string(weight.shape()));
  const int ckk = co * k * k, hw = hi * wi;
  // col = W^T x, viewed as the patch matrix of the output image.
  detail::RowMat col = detail::product(detail::MapConstMat(weight.data().data(), ci, ckk).transpose(),
                                       detail::MapConstMat(x.data().data(), ci, hw));
  Tensor out(Shape{co, ho, wo});
  detail::col2im(col.data(), co, ho, wo, k, stride, pad, hi, wi, out.data().data());
  if (bias)
    for (int c = 0; c < co; ++c)
      for (int p = 0; p < ho * wo; ++p) out[static_cast<std::size_t>(c) * ho * wo + p] += (*bias)[c];
  Tensor xc = x.detach(), wc = weight.detach();
  static const Tensor kNoBias;
  return make_result(std::move(out), {&x, &weight, bias ? bias : &kNoBias},
                     [xc, wc, ci, hi, wi, co, k, stride, pad, ho, wo, ckk, hw](std::span<const float> g,
                                                                               std::span<float* const> gi) {
                       Tensor::Buffer gcol(static_cast<std::size_t>(ckk) * hw);
                       detail::im2col(g.data(), co, ho, wo, k, stride, pad, hi, wi, gcol.data());
                       detail::MapConstMat gc(gcol.data(), ckk, hw);
                       if (gi[0])
                         detail::MapMat(gi[0], ci, hw).noalias() +=
                             detail::MapConstMat(wc.data().data(), ci, ckk) * gc;
                       if (gi[1])
                         detail::MapMat(gi[1], ci, ckk).noalias() +=
                             detail::MapConstMat(xc.data().data(), ci, hw) * gc.transpose();
                       if (gi[2])
                         for (int c = 0; c < co; ++c)
                           for (int p = 0; p < ho * wo; ++p) gi[2][c] += g[static_cast<std::size_t>(c) * ho * wo + p];
                     });
}

/// Non-overlapping k x k average pooling; H and W must be multiples of k.
inline Tensor avg_pool2d(const Tensor& x, int k) {
  if (x.rank() != 3 || x.dim(1) % k || x.dim(2) % k)
    throw ShapeError("avg_pool2d: shape " + to_string(x.shape()) + " not divisible by " + std::to_string(k));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h / k, wo = w / k;
  Tensor out(Shape{c, ho, wo});
  const float inv = 1.0f / static_cast<float>(k * k);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<std::size_t>(ch) * ho + y / k) * wo + xx / k] +=
            inv * x[(static_cast<std::size_t>(ch) * h + y) * w + xx];
  return make_result(std::move(out), {&x},
                     [c, h, w, ho, wo, k, inv](std::span<const float> g, std::span<float* const> gi) {
                       for (int ch = 0; ch < c; ++ch)
                         for (int y = 0; y < h; ++y)
                           for (int xx = 0; xx < w; ++xx)
                             gi[0][(static_cast<std::size_t>(ch) * h + y) * w + xx] +=
                                 inv * g[(static_cast<std::size_t>(ch) * ho + y / k) * wo + xx / k];
                     });
}

inline Tensor upsample_nearest2d(const Tensor& x, int factor) {
  if (x.rank() != 3 || factor < 1) throw ShapeError("upsample_nearest2d: bad input " + to_string(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h * factor, wo = w * factor;
  Tensor out(Shape{c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(static_cast<std::size_t>(ch) * ho + y) * wo + xx] =
            x[(static_cast<std::size_t>(ch) * h + y / factor) * w + xx / factor];
  return make_result(std::move(out), {&x},
                     [c, h, w, ho, wo, factor](std::span<const float> g, std::span<float* const> gi) {
                       for (int ch = 0; ch < c; ++ch)
                         for (int y = 0; y < ho; ++y)
                           for (int xx = 0; xx < wo; ++xx)
                             gi[0][(static_cast<std::size_t>(ch) * h + y / factor) * w + xx / factor] +=
                                 g[(static_cast<std::size_t>(ch) * ho + y) * wo + xx];
                     });
}

/// Reflect-pads the bottom and right edges (no edge repeat, like numpy's
/// "reflect"). Each pad must be smaller than the corresponding extent.
inline Tensor pad_reflect2d(const Tensor& x, int pad_bottom, int pad_right) {
  if (x.rank() != 3 || pad_bottom < 0 || pad_right < 0 || pad_bottom >= x.dim(1) || pad_right >= x.dim(2))
    throw ShapeError("pad_reflect2d: cannot pad " + to_string(x.shape()));
  if (pad_bottom == 0 && pad_right == 0) return x;
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h + pad_bottom, wo = w + pad_right;
  auto src = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(c) * ho * wo);
  Tensor out(Shape{c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        const int sy = y < h ? y : 2 * (h - 1) - y;
        const int sx = xx < w ? xx : 2 * (w - 1) - xx;
        const std::size_t o = (static_cast<std::size_t>(ch) * ho + y) * wo + xx;
        (*src)[o] = (static_cast<std::size_t>(ch) * h + sy) * w + sx;
        out[o] = x[(*src)[o]];
      }
  return make_result(std::move(out), {&x}, [src](std::span<const float> g, std::span<float* const> gi) {
    for (std::size_t o = 0; o < g.size(); ++o) gi[0][(*src)[o]] += g[o];
  });
}

/// Top-left (h x w) crop of a (C x H x W) map.
inline Tensor crop2d(const Tensor& x, int h, int w) {
  if (x.rank() != 3 || h > x.dim(1) || w > x.dim(2)) throw ShapeError("crop2d: cannot crop " + to_string(x.shape()));
  if (h == x.dim(1) && w == x.dim(2)) return x;
  return slice(slice(x, 1, 0, h), 2, 0, w);
}

}  // namespace slgs::ad
