#pragma once

// Dense tensors with define-by-run reverse-mode autodiff. The graph is taped
// per forward pass (each result node holds its parents plus a backward
// closure) and released when the result tensors go out of scope. Kernels may
// parallelize internally; every output element is written by exactly one
// thread with a fixed accumulation order, so results are identical for any
// thread count.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "chainflow/rng.hpp"

namespace chainflow {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
  os << ']';
  return os.str();
}

[[noreturn]] inline void op_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

// Thread-local switch: with grads disabled no graph is taped (rollouts, EMA
// evaluation, data generation).
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
class Tensor;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Tensor<T>> parents;
  std::function<void(TensorImpl<T>&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Lightweight shared handle; copies alias the same storage (torch-style).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      op_error("tensor", "shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)), T(0));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
    rng.fill_normal(d, 0.0, stddev);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    return impl_->shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return impl_->numel(); }
  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  std::vector<T>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad_or_empty() const { return impl_->grad; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  void zero_grad() { impl_->grad.clear(); }
  T item() const {
    if (numel() != 1) op_error("item", "tensor " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
  }
  TensorImpl<T>* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl<T>> impl_ptr() const { return impl_; }

  // Detached copy (no graph edge, no grad).
  Tensor detach() const {
    Tensor t(impl_->shape, impl_->data, false);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, bool track,
                      std::vector<Tensor<T>> parents,
                      std::function<void(TensorImpl<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (track && grad_enabled()) {
    out.impl()->requires_grad = true;
    out.impl()->parents = std::move(parents);
    out.impl()->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename T>
bool any_requires_grad(const std::vector<Tensor<T>>& ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

inline Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      op_error(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Strides for reading `from` as if broadcast to rank r; broadcast axes get 0.
inline std::vector<int64_t> broadcast_strides(const Shape& from, size_t r) {
  auto base = contiguous_strides(from);
  std::vector<int64_t> st(r, 0);
  const size_t off = r - from.size();
  for (size_t i = 0; i < from.size(); ++i) st[off + i] = from[i] == 1 ? 0 : base[i];
  return st;
}

// Sum `g` (shaped `from`) down to `to` by collapsing broadcast axes.
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& from, const Shape& to) {
  if (from == to) return g;
  const size_t r = from.size();
  std::vector<T> out(static_cast<size_t>(shape_numel(to)), T(0));
  const auto out_st = broadcast_strides(to, r);
  std::vector<int64_t> idx(r, 0);
  const int64_t n = shape_numel(from);
  int64_t out_off = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    out[static_cast<size_t>(out_off)] += g[static_cast<size_t>(lin)];
    for (size_t ax = r; ax-- > 0;) {
      idx[ax]++;
      out_off += out_st[ax];
      if (idx[ax] < from[ax]) break;
      out_off -= out_st[ax] * from[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Tensor<T> binary_op(const std::string& name, const Tensor<T>& a, const Tensor<T>& b, FwdFn f,
                    DaFn da, DbFn db) {
  const Shape out_shape = detail::broadcast_shape(name, a.shape(), b.shape());
  const size_t r = out_shape.size();
  const auto sa = detail::broadcast_strides(a.shape(), r);
  const auto sb = detail::broadcast_strides(b.shape(), r);
  const int64_t n = shape_numel(out_shape);
  std::vector<T> out(static_cast<size_t>(n));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
  } else {
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
      out[static_cast<size_t>(lin)] = f(pa[oa], pb[ob]);
      for (size_t ax = r; ax-- > 0;) {
        idx[ax]++;
        oa += sa[ax];
        ob += sb[ax];
        if (idx[ax] < out_shape[ax]) break;
        oa -= sa[ax] * out_shape[ax];
        ob -= sb[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  }
  const bool track = a.requires_grad() || b.requires_grad();
  Tensor<T> a_cap = a, b_cap = b;
  return detail::make_result<T>(
      out_shape, std::move(out), track, {a, b},
      [a_cap, b_cap, out_shape, da, db](TensorImpl<T>& self) {
        const size_t r2 = out_shape.size();
        const auto sa2 = detail::broadcast_strides(a_cap.shape(), r2);
        const auto sb2 = detail::broadcast_strides(b_cap.shape(), r2);
        const int64_t n2 = shape_numel(out_shape);
        const T* pa2 = a_cap.data().data();
        const T* pb2 = b_cap.data().data();
        std::vector<T> ga, gb;
        if (a_cap.requires_grad()) ga.assign(static_cast<size_t>(n2), T(0));
        if (b_cap.requires_grad()) gb.assign(static_cast<size_t>(n2), T(0));
        std::vector<int64_t> idx(r2, 0);
        int64_t oa = 0, ob = 0;
        for (int64_t lin = 0; lin < n2; ++lin) {
          const T g = self.grad[static_cast<size_t>(lin)];
          if (!ga.empty()) ga[static_cast<size_t>(lin)] = g * da(pa2[oa], pb2[ob]);
          if (!gb.empty()) gb[static_cast<size_t>(lin)] = g * db(pa2[oa], pb2[ob]);
          for (size_t ax = r2; ax-- > 0;) {
            idx[ax]++;
            oa += sa2[ax];
            ob += sb2[ax];
            if (idx[ax] < out_shape[ax]) break;
            oa -= sa2[ax] * out_shape[ax];
            ob -= sb2[ax] * out_shape[ax];
            idx[ax] = 0;
          }
        }
        if (!ga.empty()) {
          auto red = detail::reduce_to_shape(ga, out_shape, a_cap.shape());
          a_cap.impl()->ensure_grad();
          auto& dst = a_cap.impl()->grad;
          for (size_t i = 0; i < dst.size(); ++i) dst[i] += red[i];
        }
        if (!gb.empty()) {
          auto red = detail::reduce_to_shape(gb, out_shape, b_cap.shape());
          b_cap.impl()->ensure_grad();
          auto& dst = b_cap.impl()->grad;
          for (size_t i = 0; i < dst.size(); ++i) dst[i] += red[i];
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const std::string& name, const Tensor<T>& a, FwdFn f, BwdFn dfdx) {
  (void)name;
  const int64_t n = a.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const T* p = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(p[static_cast<size_t>(i)]);
  Tensor<T> a_cap = a;
  return detail::make_result<T>(
      a.shape(), std::move(out), a.requires_grad(), {a},
      [a_cap, dfdx](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        const T* p2 = a_cap.data().data();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += self.grad[i] * dfdx(p2[i], self.data[i]);
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary_op<T>(
      "mul_scalar", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op<T>(
      "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  for (T v : a.data())
    if (!(v > T(0))) op_error("log", "input must be positive, got " + std::to_string(v));
  return unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
  return unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> sin_op(const Tensor<T>& a) {
  return unary_op<T>(
      "sin", a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return unary_op<T>(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary_op<T>(
      "silu", a,
      [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

// tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_op<T>(
      "gelu", a,
      [](T x) {
        const T u = T(kC) * (x + T(kA) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
      },
      [](T x, T) {
        const T u = T(kC) * (x + T(kA) * x * x * x);
        const T th = std::tanh(u);
        const T du = T(kC) * (T(1) + T(3) * T(kA) * x * x);
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Gradient passes through the interior and is zero where the clamp binds.
template <typename T>
Tensor<T> clamp_op(const Tensor<T>& a, T lo, T hi) {
  return unary_op<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// Elementwise minimum; ties route the gradient to the first operand.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "minimum", a, b, [](T x, T y) { return std::min(x, y); },
      [](T x, T y) { return x <= y ? T(1) : T(0); },
      [](T x, T y) { return x <= y ? T(0) : T(1); });
}

// Keeps positions where mask != 0, overwrites the rest with `value`; gradient
// flows only through kept positions.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, const std::vector<uint8_t>& mask, T value) {
  if (static_cast<int64_t>(mask.size()) != a.numel())
    op_error("masked_fill", "mask length " + std::to_string(mask.size()) + " vs tensor " +
                                shape_str(a.shape()));
  std::vector<T> out(a.data());
  for (size_t i = 0; i < out.size(); ++i)
    if (!mask[i]) out[i] = value;
  Tensor<T> a_cap = a;
  auto mask_cap = std::make_shared<std::vector<uint8_t>>(mask);
  return detail::make_result<T>(
      a.shape(), std::move(out), a.requires_grad(), {a},
      [a_cap, mask_cap](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        for (size_t i = 0; i < dst.size(); ++i)
          if ((*mask_cap)[i]) dst[i] += self.grad[i];
      });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N], row-major raw kernel (ikj order).
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct BatchedView {
  Shape lead;                 // broadcast leading dims
  std::vector<int64_t> sa;    // per-lead-dim strides into A batches (0 = broadcast)
  std::vector<int64_t> sb;
  int64_t batches = 1;
};

inline BatchedView matmul_batch_view(const std::string& op, const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    op_error(op, "operands must have rank >= 2, got " + shape_str(a) + " and " + shape_str(b));
  Shape la(a.begin(), a.end() - 2), lb(b.begin(), b.end() - 2);
  BatchedView v;
  v.lead = broadcast_shape(op, la, lb);
  v.batches = shape_numel(v.lead);
  v.sa = broadcast_strides(la, v.lead.size());
  v.sb = broadcast_strides(lb, v.lead.size());
  return v;
}

template <typename T, typename KernelFn>
void batched_apply(const BatchedView& v, const Shape& lead, KernelFn kernel) {
  const size_t r = lead.size();
  if (v.batches == 1) {
    kernel(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t bi = 0; bi < v.batches; ++bi) {
    kernel(bi, oa, ob);
    for (size_t ax = r; ax-- > 0;) {
      idx[ax]++;
      oa += v.sa[ax];
      ob += v.sb[ax];
      if (idx[ax] < lead[ax]) break;
      oa -= v.sa[ax] * lead[ax];
      ob -= v.sb[ax] * lead[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

// Batched matrix product over the last two axes; leading axes broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto view = detail::matmul_batch_view("matmul", as, bs);
  const int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  const int64_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != k2)
    op_error("matmul", "inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
  Shape out_shape = view.lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<size_t>(view.batches * m * n), T(0));

  // Collect (batch, a-offset, b-offset) triples, then run the kernel across
  // batches in parallel. Each output block is owned by one iteration.
  std::vector<std::array<int64_t, 3>> offs;
  offs.reserve(static_cast<size_t>(view.batches));
  detail::batched_apply<T>(view, view.lead, [&](int64_t bi, int64_t oa, int64_t ob) {
    offs.push_back({bi, oa, ob});
  });
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data();
  const int64_t nb = static_cast<int64_t>(offs.size());
#pragma omp parallel for schedule(static) if (nb > 1 && nb * m * n * k > 16384)
  for (int64_t i = 0; i < nb; ++i) {
    const auto& o = offs[static_cast<size_t>(i)];
    detail::gemm_acc(pa + o[1] * m * k, pb + o[2] * k * n, pc + o[0] * m * n, m, k, n);
  }

  const bool track = a.requires_grad() || b.requires_grad();
  Tensor<T> a_cap = a, b_cap = b;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), track, {a, b},
      [a_cap, b_cap, view, m, k, n](TensorImpl<T>& self) {
        const T* pg = self.grad.data();
        const T* pa2 = a_cap.data().data();
        const T* pb2 = b_cap.data().data();
        const Shape& as2 = a_cap.shape();
        const Shape& bs2 = b_cap.shape();
        // Leading-broadcast operands accumulate across batches, so the batch
        // loop stays sequential here.
        if (a_cap.requires_grad()) {
          std::vector<T> ga(static_cast<size_t>(shape_numel(as2)), T(0));
          const bool a_bcast = shape_numel(as2) != view.batches * m * k;
          detail::batched_apply<T>(view, view.lead, [&](int64_t bi, int64_t oa, int64_t ob) {
            detail::gemm_nt_acc(pg + bi * m * n, pb2 + ob * k * n,
                                ga.data() + (a_bcast ? oa : bi) * m * k, m, n, k);
          });
          a_cap.impl()->ensure_grad();
          auto& dst = a_cap.impl()->grad;
          for (size_t i = 0; i < dst.size(); ++i) dst[i] += ga[i];
        }
        if (b_cap.requires_grad()) {
          std::vector<T> gb(static_cast<size_t>(shape_numel(bs2)), T(0));
          const bool b_bcast = shape_numel(bs2) != view.batches * k * n;
          detail::batched_apply<T>(view, view.lead, [&](int64_t bi, int64_t oa, int64_t ob) {
            detail::gemm_tn_acc(pa2 + oa * m * k, pg + bi * m * n,
                                gb.data() + (b_bcast ? ob : bi) * k * n, m, k, n);
          });
          b_cap.impl()->ensure_grad();
          auto& dst = b_cap.impl()->grad;
          for (size_t i = 0; i < dst.size(); ++i) dst[i] += gb[i];
        }
      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  // One -1 axis is inferred.
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) op_error("reshape", "more than one inferred axis");
      infer = static_cast<int64_t>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) new_shape[static_cast<size_t>(infer)] = a.numel() / known;
  if (shape_numel(new_shape) != a.numel())
    op_error("reshape", shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                            " changes element count");
  Tensor<T> a_cap = a;
  std::vector<T> out(a.data());
  return detail::make_result<T>(
      std::move(new_shape), std::move(out), a.requires_grad(), {a},
      [a_cap](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += self.grad[i];
      });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r)
    op_error("permute", "perm size " + std::to_string(perm.size()) + " vs rank " +
                            std::to_string(r));
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);
  const auto in_st = detail::contiguous_strides(a.shape());
  std::vector<int64_t> gather_st(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) gather_st[static_cast<size_t>(i)] = in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const int64_t n = a.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const T* p = a.data().data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t src = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    out[static_cast<size_t>(lin)] = p[src];
    for (int ax = r; ax-- > 0;) {
      idx[static_cast<size_t>(ax)]++;
      src += gather_st[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
      src -= gather_st[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
  std::vector<int> inv(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
  Tensor<T> a_cap = a;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), a.requires_grad(), {a},
      [a_cap, inv](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        // scatter grad back through the inverse permutation
        const int r2 = static_cast<int>(inv.size());
        const auto g_st = detail::contiguous_strides(self.shape);
        std::vector<int64_t> gather_st2(static_cast<size_t>(r2));
        for (int i = 0; i < r2; ++i)
          gather_st2[static_cast<size_t>(i)] = g_st[static_cast<size_t>(inv[static_cast<size_t>(i)])];
        const Shape& ash = a_cap.shape();
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        std::vector<int64_t> idx(static_cast<size_t>(r2), 0);
        int64_t src = 0;
        for (int64_t lin = 0; lin < static_cast<int64_t>(dst.size()); ++lin) {
          dst[static_cast<size_t>(lin)] += self.grad[static_cast<size_t>(src)];
          for (int ax = r2; ax-- > 0;) {
            idx[static_cast<size_t>(ax)]++;
            src += gather_st2[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < ash[static_cast<size_t>(ax)]) break;
            src -= gather_st2[static_cast<size_t>(ax)] * ash[static_cast<size_t>(ax)];
            idx[static_cast<size_t>(ax)] = 0;
          }
        }
      });
}

// Swap the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  std::vector<int> perm(static_cast<size_t>(a.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  if (perm.size() < 2) op_error("transpose", "rank must be >= 2, got " + shape_str(a.shape()));
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

namespace detail {
template <typename T>
void concat_geometry(const std::string& op, const std::vector<Tensor<T>>& parts, int axis,
                     int64_t& outer, int64_t& inner, std::vector<int64_t>& widths) {
  if (parts.empty()) op_error(op, "no tensors given");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  for (const auto& t : parts) {
    if (t.rank() != r) op_error(op, "rank mismatch: " + shape_str(t.shape()));
    for (int i = 0; i < r; ++i)
      if (i != axis && t.dim(i) != parts[0].dim(i))
        op_error(op, "shape mismatch off-axis: " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(t.shape()));
  }
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= parts[0].dim(i);
  inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= parts[0].dim(i);
  widths.clear();
  for (const auto& t : parts) widths.push_back(t.dim(axis) * inner);
}
}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  int64_t outer, inner;
  std::vector<int64_t> widths;
  detail::concat_geometry("concat", parts, axis, outer, inner, widths);
  const int r = parts[0].rank();
  const int ax = axis < 0 ? axis + r : axis;
  Shape out_shape = parts[0].shape();
  int64_t total_axis = 0;
  for (const auto& t : parts) total_axis += t.dim(ax);
  out_shape[static_cast<size_t>(ax)] = total_axis;
  const int64_t row = total_axis * inner;
  std::vector<T> out(static_cast<size_t>(outer * row));
  int64_t col = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const T* p = parts[pi].data().data();
    const int64_t w = widths[pi];
    for (int64_t o = 0; o < outer; ++o)
      std::copy(p + o * w, p + (o + 1) * w, out.begin() + o * row + col);
    col += w;
  }
  std::vector<Tensor<T>> caps = parts;
  const bool track = detail::any_requires_grad(parts);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), track, parts,
      [caps, outer, row, widths](TensorImpl<T>& self) {
        int64_t col = 0;
        for (size_t pi = 0; pi < caps.size(); ++pi) {
          const int64_t w = widths[pi];
          if (caps[pi].requires_grad()) {
            caps[pi].impl()->ensure_grad();
            auto& dst = caps[pi].impl()->grad;
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t j = 0; j < w; ++j)
                dst[static_cast<size_t>(o * w + j)] += self.grad[static_cast<size_t>(o * row + col + j)];
          }
          col += w;
        }
      });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, int axis, const std::vector<int64_t>& sizes) {
  const int r = a.rank();
  const int ax = axis < 0 ? axis + r : axis;
  int64_t total = 0;
  for (int64_t s : sizes) total += s;
  if (total != a.dim(ax))
    op_error("split", "sizes sum " + std::to_string(total) + " vs axis extent " +
                          std::to_string(a.dim(ax)) + " of " + shape_str(a.shape()));
  int64_t outer = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  int64_t inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= a.dim(i);
  const int64_t row = a.dim(ax) * inner;
  std::vector<Tensor<T>> outs;
  int64_t col = 0;
  for (int64_t s : sizes) {
    Shape os = a.shape();
    os[static_cast<size_t>(ax)] = s;
    const int64_t w = s * inner;
    std::vector<T> od(static_cast<size_t>(outer * w));
    const T* p = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(p + o * row + col, p + o * row + col + w, od.begin() + o * w);
    Tensor<T> a_cap = a;
    const int64_t col_cap = col;
    outs.push_back(detail::make_result<T>(
        std::move(os), std::move(od), a.requires_grad(), {a},
        [a_cap, outer, row, w, col_cap](TensorImpl<T>& self) {
          if (!a_cap.requires_grad()) return;
          a_cap.impl()->ensure_grad();
          auto& dst = a_cap.impl()->grad;
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < w; ++j)
              dst[static_cast<size_t>(o * row + col_cap + j)] += self.grad[static_cast<size_t>(o * w + j)];
        }));
    col += w;
  }
  return outs;
}

// Row gather on axis 0: out[i, ...] = a[idx[i], ...]; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int64_t>& idx) {
  if (a.rank() < 1) op_error("gather_rows", "rank must be >= 1");
  const int64_t rows = a.dim(0);
  const int64_t inner = a.numel() / rows;
  for (int64_t i : idx)
    if (i < 0 || i >= rows)
      op_error("gather_rows", "index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(rows) + ")");
  Shape os = a.shape();
  os[0] = static_cast<int64_t>(idx.size());
  std::vector<T> out(static_cast<size_t>(os[0] * inner));
  const T* p = a.data().data();
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(p + idx[i] * inner, p + (idx[i] + 1) * inner, out.begin() + static_cast<int64_t>(i) * inner);
  Tensor<T> a_cap = a;
  auto idx_cap = std::make_shared<std::vector<int64_t>>(idx);
  return detail::make_result<T>(
      std::move(os), std::move(out), a.requires_grad(), {a},
      [a_cap, idx_cap, inner](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        for (size_t i = 0; i < idx_cap->size(); ++i)
          for (int64_t j = 0; j < inner; ++j)
            dst[static_cast<size_t>((*idx_cap)[i] * inner + j)] +=
                self.grad[static_cast<size_t>(static_cast<int64_t>(i) * inner + j)];
      });
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> a_cap = a;
  return detail::make_result<T>(
      Shape{}, std::vector<T>{acc}, a.requires_grad(), {a},
      [a_cap](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        const T g = self.grad[0];
        for (auto& v : dst) v += g;
      });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// Sum over one axis (kept as size 1 if keepdim).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis, bool keepdim = false) {
  const int r = a.rank();
  const int ax = axis < 0 ? axis + r : axis;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < r; ++i) inner *= a.dim(i);
  const int64_t extent = a.dim(ax);
  Shape os;
  for (int i = 0; i < r; ++i) {
    if (i == ax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.dim(i));
    }
  }
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  const T* p = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t e = 0; e < extent; ++e)
      for (int64_t j = 0; j < inner; ++j)
        out[static_cast<size_t>(o * inner + j)] += p[(o * extent + e) * inner + j];
  Tensor<T> a_cap = a;
  return detail::make_result<T>(
      std::move(os), std::move(out), a.requires_grad(), {a},
      [a_cap, outer, inner, extent](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t e = 0; e < extent; ++e)
            for (int64_t j = 0; j < inner; ++j)
              dst[static_cast<size_t>((o * extent + e) * inner + j)] +=
                  self.grad[static_cast<size_t>(o * inner + j)];
      });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis, bool keepdim = false) {
  const int ax = axis < 0 ? axis + a.rank() : axis;
  return mul_scalar(sum_axis(a, axis, keepdim), T(1) / static_cast<T>(a.dim(ax)));
}

// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* p = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = p + r * d;
    T* y = out.data() + r * d;
    T mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T sum = T(0);
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const T inv = T(1) / sum;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  Tensor<T> a_cap = a;
  return detail::make_result<T>(
      a.shape(), std::move(out), a.requires_grad(), {a},
      [a_cap, d, rows](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        const T* y = self.data.data();
        const T* g = self.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
          T dot = T(0);
          for (int64_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
          for (int64_t i = 0; i < d; ++i)
            dst[static_cast<size_t>(r * d + i)] += y[r * d + i] * (g[r * d + i] - dot);
        }
      });
}

// Layer normalization over the last axis, no affine (modulation layers apply
// scale/shift separately). A constant row maps to zeros.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  std::vector<T> out(static_cast<size_t>(a.numel()));
  std::vector<T> invstd(static_cast<size_t>(rows));
  const T* p = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = p + r * d;
    T mean = T(0);
    for (int64_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) {
      const T c = x[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    invstd[static_cast<size_t>(r)] = is;
    for (int64_t i = 0; i < d; ++i) out[static_cast<size_t>(r * d + i)] = (x[i] - mean) * is;
  }
  Tensor<T> a_cap = a;
  auto is_cap = std::make_shared<std::vector<T>>(std::move(invstd));
  return detail::make_result<T>(
      a.shape(), std::move(out), a.requires_grad(), {a},
      [a_cap, is_cap, d, rows](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        const T* xh = self.data.data();
        const T* g = self.grad.data();
        const T dn = static_cast<T>(d);
        for (int64_t r = 0; r < rows; ++r) {
          T gsum = T(0), gx = T(0);
          for (int64_t i = 0; i < d; ++i) {
            gsum += g[r * d + i];
            gx += g[r * d + i] * xh[r * d + i];
          }
          const T is = (*is_cap)[static_cast<size_t>(r)];
          for (int64_t i = 0; i < d; ++i)
            dst[static_cast<size_t>(r * d + i)] +=
                is / dn * (dn * g[r * d + i] - gsum - xh[r * d + i] * gx);
        }
      });
}

// RMS normalization over the last axis.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& a, T eps = T(1e-5)) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  std::vector<T> out(static_cast<size_t>(a.numel()));
  std::vector<T> inv(static_cast<size_t>(rows));
  const T* p = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = p + r * d;
    T ms = T(0);
    for (int64_t i = 0; i < d; ++i) ms += x[i] * x[i];
    ms /= static_cast<T>(d);
    const T ir = T(1) / std::sqrt(ms + eps);
    inv[static_cast<size_t>(r)] = ir;
    for (int64_t i = 0; i < d; ++i) out[static_cast<size_t>(r * d + i)] = x[i] * ir;
  }
  Tensor<T> a_cap = a;
  auto inv_cap = std::make_shared<std::vector<T>>(std::move(inv));
  return detail::make_result<T>(
      a.shape(), std::move(out), a.requires_grad(), {a},
      [a_cap, inv_cap, d, rows](TensorImpl<T>& self) {
        if (!a_cap.requires_grad()) return;
        a_cap.impl()->ensure_grad();
        auto& dst = a_cap.impl()->grad;
        const T* x = a_cap.data().data();
        const T* g = self.grad.data();
        const T dn = static_cast<T>(d);
        for (int64_t r = 0; r < rows; ++r) {
          const T ir = (*inv_cap)[static_cast<size_t>(r)];
          T gx = T(0);
          for (int64_t i = 0; i < d; ++i) gx += g[r * d + i] * x[r * d + i];
          for (int64_t i = 0; i < d; ++i)
            dst[static_cast<size_t>(r * d + i)] +=
                ir * g[r * d + i] - ir * ir * ir / dn * x[r * d + i] * gx;
        }
      });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Grads accumulate; call zero_grad on
// parameters between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    op_error("backward", "loss must be scalar, got " + shape_str(loss.shape()));
  // iterative post-order DFS
  std::vector<TensorImpl<T>*> topo;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, size_t>> stack;
  stack.push_back({loss.impl(), 0});
  visited.insert(loss.impl());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      TensorImpl<T>* p = node->parents[child].impl();
      ++child;
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  // Interior nodes get a fresh gradient each sweep; only leaves accumulate
  // across repeated backward calls.
  for (TensorImpl<T>* node : topo)
    if (node->backward_fn) node->grad.clear();
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += T(1);
  for (size_t i = topo.size(); i-- > 0;) {
    TensorImpl<T>* node = topo[i];
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

// Ordered, uniquely named parameter registry shared by models and optimizers.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    for (const auto& p : params_)
      if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
  }
  Tensor<T> add_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor<T>::zeros(std::move(shape)));
  }
  Tensor<T> add_randn(const std::string& name, Shape shape, Rng& rng, double stddev) {
    return add(name, Tensor<T>::randn(std::move(shape), rng, stddev));
  }
  // Xavier-uniform for weight matrices [in, out].
  Tensor<T> add_xavier(const std::string& name, int64_t in, int64_t out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<T> d(static_cast<size_t>(in * out));
    rng.fill_uniform(d, -a, a);
    return add(name, Tensor<T>(Shape{in, out}, std::move(d)));
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  size_t size() const { return params_.size(); }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }
  Tensor<T> find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw std::invalid_argument("no parameter named " + name);
  }

 private:
  std::vector<Parameter<T>> params_;
};

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

// Central differences against reverse-mode grads. Returns the max over all
// parameter entries of |analytic - numeric| / max(1, |numeric|).
template <typename T, typename LossFn>
double grad_check(LossFn f, ParamStore<T>& params, double eps) {
  if (eps < 1e-6 || eps > 1e-3)
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  params.zero_grad();
  Tensor<T> loss = f();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  for (auto& p : params.params()) {
    auto& g = p.tensor.grad();
    analytic.push_back(g);
  }
  double max_err = 0.0;
  for (size_t pi = 0; pi < params.params().size(); ++pi) {
    auto& w = params.params()[pi].tensor.data();
    for (size_t i = 0; i < w.size(); ++i) {
      const T orig = w[i];
      w[i] = orig + static_cast<T>(eps);
      const double lp = static_cast<double>(f().item());
      w[i] = orig - static_cast<T>(eps);
      const double lm = static_cast<double>(f().item());
      w[i] = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[pi][i]);
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace chainflow
