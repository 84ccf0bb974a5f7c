#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <new>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maskspec/common.hpp"

namespace maskspec {

/// When enabled (the default), every op verifies that its output is finite
/// and raises numeric_error otherwise. NaN/Inf is always an error state;
/// this switch only controls where it is caught.
inline std::atomic<bool>& finite_checks() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

namespace detail {

template <typename T>
using EigenRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const EigenRM<T>>;
template <typename T>
using MMap = Eigen::Map<EigenRM<T>>;

// Reductions with a summation order fixed by the element count alone.
// Library reduction kernels peel to the buffer's alignment, which makes the
// rounding depend on where the allocator placed the data; these lane-wise
// loops give bit-identical results for identical inputs no matter the
// buffer address.
inline constexpr int kReduxLanes = 16;

template <typename T, typename F>
T fixed_order_reduce(long n, F&& term) {
  T lanes[kReduxLanes] = {};
  long i = 0;
  for (; i + kReduxLanes <= n; i += kReduxLanes) {
    for (int k = 0; k < kReduxLanes; ++k) lanes[k] += term(i + k);
  }
  T tail = T(0);
  for (; i < n; ++i) tail += term(i);
  for (int width = kReduxLanes / 2; width > 0; width /= 2) {
    for (int k = 0; k < width; ++k) lanes[k] += lanes[k + width];
  }
  return lanes[0] + tail;
}

template <typename T>
T fixed_order_sum(const T* p, long n) {
  return fixed_order_reduce<T>(n, [p](long i) { return p[i]; });
}

template <typename T>
T fixed_order_dot(const T* a, const T* b, long n) {
  return fixed_order_reduce<T>(n, [a, b](long i) { return a[i] * b[i]; });
}

template <typename T>
T fixed_order_sum_sq(const T* p, long n) {
  return fixed_order_reduce<T>(n, [p](long i) { return p[i] * p[i]; });
}

// C (+)= alpha * op(A) * op(B) with A stored ar x ac and B stored br x bc.
// Vector-shaped products bypass the library kernels, whose inner reductions
// round differently depending on buffer alignment.
template <typename T>
void gemm(const T* a, long ar, long ac, bool ta, const T* b, long br, long bc, bool tb, T* c,
          bool accumulate, T alpha = T(1)) {
  const long gm = ta ? ac : ar;
  const long gn = tb ? br : bc;
  const long gk = ta ? ar : ac;
  if (gm == 1 || gn == 1) {
    for (long i = 0; i < gm; ++i) {
      for (long j = 0; j < gn; ++j) {
        const T dot = fixed_order_reduce<T>(gk, [=](long k) {
          const T av = ta ? a[k * ac + i] : a[i * ac + k];
          const T bv = tb ? b[j * bc + k] : b[k * bc + j];
          return av * bv;
        });
        if (accumulate) {
          c[i * gn + j] += alpha * dot;
        } else {
          c[i * gn + j] = alpha * dot;
        }
      }
    }
    return;
  }
  CMap<T> ma(a, ar, ac);
  CMap<T> mb(b, br, bc);
  const long m = ta ? ac : ar;
  const long n = tb ? br : bc;
  MMap<T> mc(c, m, n);
  auto assign = [&](const auto& product) {
    if (alpha == T(1)) {
      if (accumulate) mc.noalias() += product; else mc.noalias() = product;
    } else {
      if (accumulate) mc.noalias() += alpha * product; else mc.noalias() = alpha * product;
    }
  };
  if (!ta && !tb) {
    assign(ma * mb);
  } else if (!ta && tb) {
    assign(ma * mb.transpose());
  } else if (ta && !tb) {
    assign(ma.transpose() * mb);
  } else {
    assign(ma.transpose() * mb.transpose());
  }
}

/// Recycles tensor buffers between graph builds. Training rebuilds the same
/// graph shapes every step; without reuse each step hands hundreds of MB
/// back to the kernel and faults it in again.
template <typename T>
class BufferPool {
 public:
  static BufferPool& instance() {
    thread_local BufferPool pool;
    return pool;
  }

  /// An empty vector whose capacity is at least (and keyed as exactly) n.
  std::vector<T> acquire(std::size_t n) {
    auto it = buckets_.find(n);
    if (it != buckets_.end() && !it->second.empty()) {
      std::vector<T> v = std::move(it->second.back());
      it->second.pop_back();
      v.clear();
      return v;
    }
    std::vector<T> v;
    v.reserve(n);
    return v;
  }

  void release(std::vector<T>&& v) {
    if (v.capacity() == 0) return;
    auto& bucket = buckets_[v.capacity()];
    if (bucket.size() < 64) bucket.push_back(std::move(v));
  }

  void clear() { buckets_.clear(); }

 private:
  std::unordered_map<std::size_t, std::vector<std::vector<T>>> buckets_;
};

/// Zero-filled buffer of length n drawn from the pool.
template <typename T>
std::vector<T> pooled_buffer(std::size_t n) {
  std::vector<T> v = BufferPool<T>::instance().acquire(n);
  v.assign(n, T(0));
  return v;
}

template <typename T>
std::vector<T> pooled_copy(const std::vector<T>& src) {
  std::vector<T> v = BufferPool<T>::instance().acquire(src.size());
  v.assign(src.begin(), src.end());
  return v;
}

/// Pool-backed shared scratch vector for values a backward pass reuses.
template <typename T>
std::shared_ptr<std::vector<T>> pooled_shared(std::size_t n) {
  auto* raw = new std::vector<T>(BufferPool<T>::instance().acquire(n));
  raw->resize(n);
  return std::shared_ptr<std::vector<T>>(raw, [](std::vector<T>* ptr) {
    BufferPool<T>::instance().release(std::move(*ptr));
    delete ptr;
  });
}

template <typename T>
struct Node {
  std::vector<long> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand, same length as value
  bool requires_grad{false};
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node() {
    BufferPool<T>::instance().release(std::move(value));
    BufferPool<T>::instance().release(std::move(grad));
  }

  long size() const { return static_cast<long>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) {
      grad = BufferPool<T>::instance().acquire(value.size());
      grad.assign(value.size(), T(0));
    }
  }
};

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using AlignedArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;

// Determinism note. The evaluator behind map expressions peels elements to
// reach an aligned address, and its packet kernels round compound
// expressions (and polynomial exp/erf) differently from the peeled scalar
// path, so results would depend on where a buffer happens to live. Map
// statements are therefore restricted to single arithmetic ops (bit-exact in
// both paths); transcendentals run in place on the 64-byte scratch below
// (the split then depends only on the length); everything else is a plain
// loop the compiler treats uniformly.

/// Thread-local 64-byte-aligned scratch, grown on demand.
template <typename T>
T* aligned_scratch(std::size_t n) {
  thread_local T* buf = nullptr;
  thread_local std::size_t cap = 0;
  if (cap < n) {
    std::free(buf);
    buf = static_cast<T*>(std::aligned_alloc(64, ((n * sizeof(T) + 63) / 64) * 64));
    if (!buf) throw std::bad_alloc();
    cap = n;
  }
  return buf;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  if (!finite_checks().load(std::memory_order_relaxed)) return;
  // x - x is zero for every finite x and NaN for NaN/Inf, so a single fused
  // reduction classifies the whole buffer.
  const CArrMap<T> x(v.data(), static_cast<long>(v.size()));
  const T probe = (x - x).sum();
  if (!(probe == T(0))) {
    throw numeric_error(std::string(op) + ": non-finite value in result");
  }
}

inline long shape_size(const std::vector<long>& shape) {
  long n = 1;
  for (long d : shape) {
    if (d <= 0) throw contract_error("tensor shape dimensions must be positive");
    n *= d;
  }
  return n;
}

}  // namespace detail

/// Value-semantics handle to a node in a dynamically built gradient graph.
/// Tensor values are immutable through the op API; graphs are built by one
/// thread and released when the last handle goes out of scope.
template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor from_data(std::vector<long> shape, std::vector<T> data, bool requires_grad = false) {
    if (detail::shape_size(shape) != static_cast<long>(data.size())) {
      throw contract_error("Tensor: data size does not match shape");
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
  }

  static Tensor constant(const Matrix<T>& m) {
    return from_data({m.rows, m.cols}, m.data, false);
  }

  static Tensor zeros(std::vector<long> shape, bool requires_grad = false) {
    const long n = detail::shape_size(shape);
    return from_data(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)), requires_grad);
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<long>& shape() const { return node_->shape; }
  long ndim() const { return static_cast<long>(node_->shape.size()); }
  long size() const { return node_->size(); }

  /// Row/column view: 1-D tensors count as a single row.
  long rows() const { return ndim() == 2 ? node_->shape[0] : 1; }
  long cols() const { return ndim() == 2 ? node_->shape[1] : node_->shape[0]; }

  const std::vector<T>& values() const { return node_->value; }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }

  T item() const {
    if (size() != 1) throw contract_error("item: tensor is not a scalar");
    return node_->value[0];
  }

  Matrix<T> to_matrix() const { return Matrix<T>(rows(), cols(), node_->value); }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
  }

  /// Direct mutation hooks for the optimizer; never call while a graph that
  /// references this tensor is still alive.
  std::vector<T>& values_mut() { return node_->value; }
  std::vector<T>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(const char* name, std::vector<long> shape, std::vector<T> value,
                  std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backprop) {
  check_finite(value, name);
  bool grad = false;
  for (const auto& p : parents) grad = grad || p->requires_grad;
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(value), false);
  auto& node = *out.node();
  node.requires_grad = grad;
  if (grad) {
    node.parents = std::move(parents);
    node.backprop = std::move(backprop);
  }
  return out;
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.ndim() != 2) throw contract_error(std::string(op) + ": expected a 2-D tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

/// C = alpha * op(A) * op(B). Inner dimensions must agree after the
/// optional transposes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
                 bool transpose_b = false, T alpha = T(1)) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const long ar = a.shape()[0], ac = a.shape()[1];
  const long br = b.shape()[0], bc = b.shape()[1];
  const long m = transpose_a ? ac : ar;
  const long ka = transpose_a ? ar : ac;
  const long kb = transpose_b ? bc : br;
  const long n = transpose_b ? br : bc;
  if (ka != kb) throw contract_error("matmul: inner dimensions do not agree");

  std::vector<T> out = detail::pooled_buffer<T>(static_cast<std::size_t>(m) * n);
  detail::gemm(a.values().data(), ar, ac, transpose_a, b.values().data(), br, bc, transpose_b,
               out.data(), false, alpha);

  auto pa = a.node();
  auto pb = b.node();
  const bool ta = transpose_a, tb = transpose_b;
  return detail::make_op<T>(
      "matmul", {m, n}, std::move(out), {pa, pb},
      [pa, pb, ar, ac, br, bc, m, n, ta, tb, alpha](detail::Node<T>& self) {
        const T* g = self.grad.data();
        if (pa->requires_grad) {
          pa->ensure_grad();
          if (!ta && !tb) {
            detail::gemm(g, m, n, false, pb->value.data(), br, bc, true, pa->grad.data(), true,
                         alpha);
          } else if (!ta && tb) {
            detail::gemm(g, m, n, false, pb->value.data(), br, bc, false, pa->grad.data(), true,
                         alpha);
          } else if (ta && !tb) {
            detail::gemm(pb->value.data(), br, bc, false, g, m, n, true, pa->grad.data(), true,
                         alpha);
          } else {
            std::vector<T> tmp(static_cast<std::size_t>(m) * ar);  // (dC * B): m x ar
            detail::gemm(g, m, n, false, pb->value.data(), br, bc, false, tmp.data(), false,
                         alpha);
            for (long i = 0; i < ar; ++i)
              for (long j = 0; j < ac; ++j) pa->grad[i * ac + j] += tmp[j * ar + i];
          }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          if (!ta && !tb) {
            detail::gemm(pa->value.data(), ar, ac, true, g, m, n, false, pb->grad.data(), true,
                         alpha);
          } else if (!ta && tb) {
            detail::gemm(g, m, n, true, pa->value.data(), ar, ac, false, pb->grad.data(), true,
                         alpha);
          } else if (ta && !tb) {
            detail::gemm(pa->value.data(), ar, ac, false, g, m, n, false, pb->grad.data(), true,
                         alpha);
          } else {
            std::vector<T> tmp(static_cast<std::size_t>(ar) * n);  // (A * dC): ar x n
            detail::gemm(pa->value.data(), ar, ac, false, g, m, n, false, tmp.data(), false,
                         alpha);
            for (long i = 0; i < br; ++i)
              for (long j = 0; j < bc; ++j) pb->grad[i * bc + j] += tmp[j * br + i];
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw contract_error("add: shape mismatch");
  std::vector<T> out = detail::pooled_copy(a.values());
  detail::ArrMap<T>(out.data(), a.size()) += detail::CArrMap<T>(b.values().data(), a.size());
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_op<T>("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node<T>& self) {
    const long n = self.size();
    const detail::CArrMap<T> g(self.grad.data(), n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::ArrMap<T>(pa->grad.data(), n) += g;
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::ArrMap<T>(pb->grad.data(), n) += g;
    }
  });
}

/// Adds a length-d vector to every row of an m x d tensor.
template <typename T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_2d(x, "add_row_vector");
  if (v.ndim() != 1 || v.size() != x.shape()[1]) {
    throw contract_error("add_row_vector: vector length must equal column count");
  }
  const long m = x.shape()[0], d = x.shape()[1];
  std::vector<T> out = detail::pooled_copy(x.values());
  const detail::CArrMap<T> vv(v.values().data(), d);
  for (long r = 0; r < m; ++r) detail::ArrMap<T>(out.data() + r * d, d) += vv;
  auto px = x.node();
  auto pv = v.node();
  return detail::make_op<T>("add_row_vector", x.shape(), std::move(out), {px, pv},
                            [px, pv, m, d](detail::Node<T>& self) {
                              if (px->requires_grad) {
                                px->ensure_grad();
                                detail::ArrMap<T>(px->grad.data(), m * d) +=
                                    detail::CArrMap<T>(self.grad.data(), m * d);
                              }
                              if (pv->requires_grad) {
                                pv->ensure_grad();
                                detail::ArrMap<T> gv(pv->grad.data(), d);
                                for (long r = 0; r < m; ++r)
                                  gv += detail::CArrMap<T>(self.grad.data() + r * d, d);
                              }
                            });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out = detail::pooled_copy(x.values());
  detail::ArrMap<T>(out.data(), x.size()) *= s;
  auto px = x.node();
  return detail::make_op<T>("scale", x.shape(), std::move(out), {px}, [px, s](detail::Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const long n = self.size();
    T* pg = px->grad.data();
    const T* g = self.grad.data();
    for (long i = 0; i < n; ++i) pg[i] += s * g[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  std::vector<T> out = detail::pooled_copy(x.values());
  detail::ArrMap<T> o(out.data(), x.size());
  o *= o;
  auto px = x.node();
  return detail::make_op<T>("square", x.shape(), std::move(out), {px}, [px](detail::Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const long n = self.size();
    T* pg = px->grad.data();
    const T* xv = px->value.data();
    const T* g = self.grad.data();
    for (long i = 0; i < n; ++i) pg[i] += T(2) * xv[i] * g[i];
  });
}

/// Exact-erf GELU: x * Phi(x). Math runs at the tensor's own precision and
/// the forward Phi values are kept for the backward pass.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  constexpr T half = T(0.5), one = T(1);
  const long n = x.size();
  auto phi = detail::pooled_shared<T>(static_cast<std::size_t>(n));
  std::vector<T> out = detail::pooled_buffer<T>(static_cast<std::size_t>(n));
  {
    const T* in = x.values().data();
    T* scratch = detail::aligned_scratch<T>(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) scratch[i] = in[i] * inv_sqrt2;
    detail::AlignedArrMap<T> sm(scratch, n);
    sm = sm.erf();
    T* ph = phi->data();
    T* o = out.data();
    for (long i = 0; i < n; ++i) {
      ph[i] = half * (one + scratch[i]);
      o[i] = in[i] * ph[i];
    }
  }
  auto px = x.node();
  return detail::make_op<T>("gelu", x.shape(), std::move(out), {px},
                            [px, phi](detail::Node<T>& self) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              constexpr T c_pdf = T(0.39894228040143267794);
                              constexpr T c_half = T(0.5);
                              const long n = self.size();
                              const T* in = px->value.data();
                              const T* ph = phi->data();
                              const T* g = self.grad.data();
                              T* pg = px->grad.data();
                              T* scratch = detail::aligned_scratch<T>(static_cast<std::size_t>(n));
                              for (long i = 0; i < n; ++i) scratch[i] = -c_half * in[i] * in[i];
                              detail::AlignedArrMap<T> sm(scratch, n);
                              sm = sm.exp();
                              for (long i = 0; i < n; ++i) {
                                pg[i] += (ph[i] + in[i] * (c_pdf * scratch[i])) * g[i];
                              }
                            });
}

/// Softmax along one axis, computed with max subtraction. For 1-D input the
/// only valid axis is 0; for 2-D input axis 1 normalizes each row.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (x.ndim() == 1) {
    if (axis != 0) throw contract_error("softmax: axis out of range for 1-D input");
  } else if (x.ndim() == 2) {
    if (axis != 0 && axis != 1) throw contract_error("softmax: axis out of range for 2-D input");
  } else {
    throw contract_error("softmax: expected 1-D or 2-D input");
  }
  const long rows = x.rows(), cols = x.cols();
  const bool along_cols = (x.ndim() == 1) || (axis == 1);

  std::vector<T> out = detail::pooled_buffer<T>(x.values().size());
  if (along_cols) {
    T* scratch = detail::aligned_scratch<T>(static_cast<std::size_t>(cols));
    detail::AlignedArrMap<T> sm(scratch, cols);
    for (long r = 0; r < rows; ++r) {
      const T* in = x.values().data() + r * cols;
      T mx = in[0];
      for (long c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
      for (long c = 0; c < cols; ++c) scratch[c] = in[c] - mx;
      sm = sm.exp();
      const T sum = detail::fixed_order_sum(scratch, cols);
      T* o = out.data() + r * cols;
      for (long c = 0; c < cols; ++c) o[c] = scratch[c] / sum;
    }
  } else {
    for (long c = 0; c < cols; ++c) {
      T mx = x.values()[c];
      for (long r = 1; r < rows; ++r) mx = std::max(mx, x.values()[r * cols + c]);
      T sum = T(0);
      for (long r = 0; r < rows; ++r) {
        const T e = std::exp(x.values()[r * cols + c] - mx);
        out[r * cols + c] = e;
        sum += e;
      }
      for (long r = 0; r < rows; ++r) out[r * cols + c] /= sum;
    }
  }
  auto px = x.node();
  return detail::make_op<T>(
      "softmax", x.shape(), std::move(out), {px},
      [px, rows, cols, along_cols](detail::Node<T>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        if (along_cols) {
          for (long r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * cols;
            const T* g = self.grad.data() + r * cols;
            T* pg = px->grad.data() + r * cols;
            const T dot = detail::fixed_order_dot(y, g, cols);
            for (long c = 0; c < cols; ++c) pg[c] += y[c] * (g[c] - dot);
          }
        } else {
          for (long c = 0; c < cols; ++c) {
            T dot = T(0);
            for (long r = 0; r < rows; ++r) dot += self.grad[r * cols + c] * self.value[r * cols + c];
            for (long r = 0; r < rows; ++r) {
              px->grad[r * cols + c] +=
                  self.value[r * cols + c] * (self.grad[r * cols + c] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  return softmax(x, x.ndim() == 1 ? 0 : 1);
}

/// Per-row layer normalization over the last dimension followed by the
/// gamma/beta affine map.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-6) {
  const long m = x.rows(), d = x.cols();
  if (gamma.ndim() != 1 || gamma.size() != d || beta.ndim() != 1 || beta.size() != d) {
    throw contract_error("layer_norm: gamma/beta must be 1-D with length equal to the last dim");
  }
  std::vector<T> out = detail::pooled_buffer<T>(x.values().size());
  auto xhat = detail::pooled_shared<T>(x.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(m);
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (long r = 0; r < m; ++r) {
    const T* xr = x.values().data() + r * d;
    T* h = (*xhat).data() + r * d;
    const T mean = detail::fixed_order_sum(xr, d) / static_cast<T>(d);
    for (long c = 0; c < d; ++c) h[c] = xr[c] - mean;
    const T var = detail::fixed_order_sum_sq(h, d) / static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = inv;
    T* o = out.data() + r * d;
    for (long c = 0; c < d; ++c) {
      h[c] *= inv;
      o[c] = h[c] * gv[c] + bv[c];
    }
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return detail::make_op<T>(
      "layer_norm", x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, xhat, inv_std, m, d](detail::Node<T>& self) {
        if (pg->requires_grad) {
          pg->ensure_grad();
          T* gg = pg->grad.data();
          for (long r = 0; r < m; ++r) {
            const T* g = self.grad.data() + r * d;
            const T* h = (*xhat).data() + r * d;
            for (long c = 0; c < d; ++c) gg[c] += g[c] * h[c];
          }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          T* gb = pb->grad.data();
          for (long r = 0; r < m; ++r) {
            const T* g = self.grad.data() + r * d;
            for (long c = 0; c < d; ++c) gb[c] += g[c];
          }
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const T* gv = pg->value.data();
          std::vector<T> dh(static_cast<std::size_t>(d));
          for (long r = 0; r < m; ++r) {
            const T* g = self.grad.data() + r * d;
            const T* h = (*xhat).data() + r * d;
            for (long c = 0; c < d; ++c) dh[c] = g[c] * gv[c];
            const T mean_dh = detail::fixed_order_sum(dh.data(), d) / static_cast<T>(d);
            const T mean_dh_h = detail::fixed_order_dot(dh.data(), h, d) / static_cast<T>(d);
            const T inv = (*inv_std)[r];
            T* pgx = px->grad.data() + r * d;
            for (long c = 0; c < d; ++c) {
              pgx[c] += inv * (dh[c] - mean_dh - h[c] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, long start, long count) {
  detail::require_2d(x, "slice_cols");
  const long m = x.shape()[0], d = x.shape()[1];
  if (start < 0 || count <= 0 || start + count > d) throw contract_error("slice_cols: range out of bounds");
  std::vector<T> out = detail::pooled_buffer<T>(static_cast<std::size_t>(m) * count);
  for (long r = 0; r < m; ++r)
    std::copy_n(x.values().data() + r * d + start, count, out.data() + r * count);
  auto px = x.node();
  return detail::make_op<T>("slice_cols", {m, count}, std::move(out), {px},
                            [px, m, d, start, count](detail::Node<T>& self) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              for (long r = 0; r < m; ++r) {
                                detail::ArrMap<T>(px->grad.data() + r * d + start, count) +=
                                    detail::CArrMap<T>(self.grad.data() + r * count, count);
                              }
                            });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: no parts");
  const long m = parts[0].shape()[0];
  long d = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.shape()[0] != m) throw contract_error("concat_cols: row counts differ");
    d += p.shape()[1];
  }
  std::vector<T> out = detail::pooled_buffer<T>(static_cast<std::size_t>(m) * d);
  std::vector<std::shared_ptr<detail::Node<T>>> parents;
  std::vector<long> widths;
  long off = 0;
  for (const auto& p : parts) {
    const long w = p.shape()[1];
    for (long r = 0; r < m; ++r) std::copy_n(p.values().data() + r * w, w, out.data() + r * d + off);
    parents.push_back(p.node());
    widths.push_back(w);
    off += w;
  }
  auto ps = parents;
  return detail::make_op<T>("concat_cols", {m, d}, std::move(out), std::move(parents),
                            [ps, widths, m, d](detail::Node<T>& self) {
                              long off = 0;
                              for (std::size_t k = 0; k < ps.size(); ++k) {
                                const long w = widths[k];
                                if (ps[k]->requires_grad) {
                                  ps[k]->ensure_grad();
                                  for (long r = 0; r < m; ++r) {
                                    detail::ArrMap<T>(ps[k]->grad.data() + r * w, w) +=
                                        detail::CArrMap<T>(self.grad.data() + r * d + off, w);
                                  }
                                }
                                off += w;
                              }
                            });
}

/// Selects rows by index. Indices may repeat; gradients accumulate.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<long>& indices) {
  detail::require_2d(x, "gather_rows");
  const long m = x.shape()[0], d = x.shape()[1];
  std::vector<T> out = detail::pooled_buffer<T>(indices.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const long r = indices[i];
    if (r < 0 || r >= m) throw contract_error("gather_rows: index out of range");
    std::copy_n(x.values().data() + r * d, d, out.data() + i * d);
  }
  auto px = x.node();
  auto idx = indices;
  return detail::make_op<T>("gather_rows", {static_cast<long>(indices.size()), d}, std::move(out),
                            {px}, [px, idx, d](detail::Node<T>& self) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                detail::ArrMap<T>(px->grad.data() + idx[i] * d, d) +=
                                    detail::CArrMap<T>(self.grad.data() + i * d, d);
                              }
                            });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0.0;
  for (const T v : x.values()) s += static_cast<double>(v);
  auto px = x.node();
  return detail::make_op<T>("sum", {1}, {static_cast<T>(s)}, {px}, [px](detail::Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    detail::ArrMap<T>(px->grad.data(), static_cast<long>(px->grad.size())) += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const long n = x.size();
  double s = 0.0;
  for (const T v : x.values()) s += static_cast<double>(v);
  auto px = x.node();
  return detail::make_op<T>("mean", {1}, {static_cast<T>(s / n)}, {px}, [px, n](detail::Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    detail::ArrMap<T>(px->grad.data(), static_cast<long>(px->grad.size())) +=
        self.grad[0] / static_cast<T>(n);
  });
}

/// Column means: m x d -> 1 x d.
template <typename T>
Tensor<T> mean_over_rows(const Tensor<T>& x) {
  detail::require_2d(x, "mean_over_rows");
  const long m = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(d, T(0));
  for (long r = 0; r < m; ++r)
    for (long c = 0; c < d; ++c) out[c] += x.values()[r * d + c];
  for (auto& v : out) v /= static_cast<T>(m);
  auto px = x.node();
  return detail::make_op<T>("mean_over_rows", {1, d}, std::move(out), {px},
                            [px, m, d](detail::Node<T>& self) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              for (long r = 0; r < m; ++r)
                                for (long c = 0; c < d; ++c)
                                  px->grad[r * d + c] += self.grad[c] / static_cast<T>(m);
                            });
}

/// Mean binary cross-entropy over all logit entries, numerically stable for
/// large magnitudes. Targets may be soft.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Matrix<T>& targets) {
  if (logits.rows() != targets.rows || logits.cols() != targets.cols) {
    throw contract_error("bce_with_logits: shape mismatch");
  }
  const long n = logits.size();
  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    const double z = static_cast<double>(logits.values()[i]);
    const double y = static_cast<double>(targets.data[i]);
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto pz = logits.node();
  auto tgt = std::make_shared<std::vector<T>>(targets.data);
  return detail::make_op<T>("bce_with_logits", {1}, {static_cast<T>(loss / n)}, {pz},
                            [pz, tgt, n](detail::Node<T>& self) {
                              if (!pz->requires_grad) return;
                              pz->ensure_grad();
                              for (long i = 0; i < n; ++i) {
                                const double z = static_cast<double>(pz->value[i]);
                                const double sig = 1.0 / (1.0 + std::exp(-z));
                                pz->grad[i] += static_cast<T>((sig - static_cast<double>((*tgt)[i])) / n *
                                                              static_cast<double>(self.grad[0]));
                              }
                            });
}

/// Mean cross-entropy between row-softmax of logits and soft target rows.
/// Every target row must sum to one.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Matrix<T>& targets) {
  if (logits.rows() != targets.rows || logits.cols() != targets.cols) {
    throw contract_error("softmax_cross_entropy: shape mismatch");
  }
  const long m = logits.rows(), d = logits.cols();
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m) * d);
  double loss = 0.0;
  for (long r = 0; r < m; ++r) {
    const T* zr = logits.values().data() + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (long c = 0; c < d; ++c) mx = std::max(mx, static_cast<double>(zr[c]));
    double sum = 0.0;
    for (long c = 0; c < d; ++c) sum += std::exp(static_cast<double>(zr[c]) - mx);
    const double lse = mx + std::log(sum);
    for (long c = 0; c < d; ++c) {
      (*probs)[r * d + c] = static_cast<T>(std::exp(static_cast<double>(zr[c]) - lse));
      loss += static_cast<double>(targets(r, c)) * (lse - static_cast<double>(zr[c]));
    }
  }
  auto pz = logits.node();
  auto tgt = std::make_shared<std::vector<T>>(targets.data);
  return detail::make_op<T>("softmax_cross_entropy", {1}, {static_cast<T>(loss / m)}, {pz},
                            [pz, tgt, probs, m, d](detail::Node<T>& self) {
                              if (!pz->requires_grad) return;
                              pz->ensure_grad();
                              for (long r = 0; r < m; ++r)
                                for (long c = 0; c < d; ++c)
                                  pz->grad[r * d + c] += static_cast<T>(
                                      (static_cast<double>((*probs)[r * d + c]) -
                                       static_cast<double>((*tgt)[r * d + c])) /
                                      m * static_cast<double>(self.grad[0]));
                            });
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires them; leaves keep their gradients until
/// the optimizer (or zero_grad) clears them.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw contract_error("backward: loss must be a scalar tensor");
  }
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  // Iterative post-order: parents first, node afterwards.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backprop && node->requires_grad) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

/// Named learnable tensor. The gradient buffer always matches the value
/// shape and starts at zero.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;

  Parameter() = default;
  Parameter(std::string n, std::vector<long> shape, std::vector<T> data)
      : name(std::move(n)), tensor(Tensor<T>::from_data(std::move(shape), std::move(data), true)) {}

  long size() const { return tensor.size(); }
};

}  // namespace maskspec
