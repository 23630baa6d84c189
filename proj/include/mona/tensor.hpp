#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mona/error.hpp"

namespace mona {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string format_shape(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty == absent
};

inline std::vector<double>& grad_buf(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

}  // namespace detail

// Dense row-major f64 tensor. Copying a Tensor copies the handle; the
// underlying buffer is shared. Values are written once at creation and then
// only mutated through grad accumulation or an optimizer step.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.impl_->data.assign(numel_of(shape), 0.0);
    t.impl_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, double value) {
    Tensor t;
    t.impl_->data.assign(numel_of(shape), value);
    t.impl_->shape = std::move(shape);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> values) {
    if (numel_of(shape) != values.size()) {
      throw DimensionError("from_data: shape " + format_shape(shape) + " wants " +
                           std::to_string(numel_of(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor zeros_like(const Tensor& other) { return zeros(other.shape()); }

  Tensor clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double value() const {
    if (numel() != 1) {
      throw ContractError("value(): tensor of shape " + format_shape(shape()) +
                          " is not a scalar");
    }
    return impl_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    return impl_->data[flat_index(idx)];
  }

  double& at(std::initializer_list<std::size_t> idx) {
    return impl_->data[flat_index(idx)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool same_buffer(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
      throw DimensionError("index rank " + std::to_string(idx.size()) +
                           " vs tensor shape " + format_shape(shape()));
    }
    std::size_t flat = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) {
      flat = flat * impl_->shape[d] + i;
      ++d;
    }
    return flat;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Ops append their backward rule while a Tape::Scope is
// active; backward() replays the rules in reverse and then drops them. A tape
// belongs to exactly one forward/backward cycle.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current_) { current_ = &tape; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_; }

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and visits every recorded op exactly once in
  // reverse order. Entries are freed afterwards.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          format_shape(loss.shape()));
    }
    detail::grad_buf(*loss.impl())[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

 private:
  std::vector<std::function<void()>> entries_;
  inline static thread_local Tape* current_ = nullptr;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
#if !defined(NDEBUG) || defined(MONA_FORCE_FINITE_CHECKS)
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw ContractError(std::string(op) + ": produced non-finite value");
    }
  }
#else
  (void)t;
  (void)op;
#endif
}

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Elementwise binary shapes: equal, or either side a single-element scalar.
enum class BinKind { Same, ScalarLeft, ScalarRight };

inline BinKind binary_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return BinKind::Same;
  if (a.numel() == 1) return BinKind::ScalarLeft;
  if (b.numel() == 1) return BinKind::ScalarRight;
  throw DimensionError(std::string(op) + ": shape mismatch " +
                       format_shape(a.shape()) + " vs " + format_shape(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (equal shapes or scalar broadcast)
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 BwdA bwd_a, BwdB bwd_b) {
  const BinKind kind = binary_kind(a, b, name);
  const Tensor& big = (kind == BinKind::ScalarLeft) ? b : a;
  Tensor out = Tensor::zeros_like(big);
  const std::size_t n = out.numel();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double av = (kind == BinKind::ScalarLeft) ? pa[0] : pa[i];
    const double bv = (kind == BinKind::ScalarRight) ? pb[0] : pb[i];
    po[i] = fwd(av, bv);
  }
  check_finite(out, name);
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    Tape::current()->record([ai, bi, oi, kind, n, bwd_a, bwd_b]() {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        auto& ga = grad_buf(*ai);
        for (std::size_t i = 0; i < n; ++i) {
          const double av = (kind == BinKind::ScalarLeft) ? ai->data[0] : ai->data[i];
          const double bv = (kind == BinKind::ScalarRight) ? bi->data[0] : bi->data[i];
          const std::size_t ia = (kind == BinKind::ScalarLeft) ? 0 : i;
          ga[ia] += bwd_a(g[i], av, bv);
        }
      }
      if (bi->requires_grad) {
        auto& gb = grad_buf(*bi);
        for (std::size_t i = 0; i < n; ++i) {
          const double av = (kind == BinKind::ScalarLeft) ? ai->data[0] : ai->data[i];
          const double bv = (kind == BinKind::ScalarRight) ? bi->data[0] : bi->data[i];
          const std::size_t ib = (kind == BinKind::ScalarRight) ? 0 : i;
          gb[ib] += bwd_b(g[i], av, bv);
        }
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

// Multiply by a plain (non-learnable) constant.
inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros_like(a);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  detail::check_finite(out, "scale");
  if (detail::recording({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto oi = out.impl();
    Tape::current()->record([ai, oi, c, n]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      auto& ga = detail::grad_buf(*ai);
      for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i] * c;
    });
  }
  return out;
}

// Elementwise arithmetic mean of k same-shape tensors.
inline Tensor mean_over_list(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ContractError("mean_over_list: empty input list");
  const Shape& shape = inputs.front().shape();
  for (const Tensor& t : inputs) {
    if (t.shape() != shape) {
      throw DimensionError("mean_over_list: shape mismatch " + format_shape(shape) +
                           " vs " + format_shape(t.shape()));
    }
  }
  Tensor out = Tensor::zeros(shape);
  const std::size_t n = out.numel();
  const double inv = 1.0 / static_cast<double>(inputs.size());
  // Shifted form t0 + sum(tj - t0)/k: the mean of identical inputs is exactly
  // the input, which the zero-kernel skip paths rely on.
  const std::vector<double>& base = inputs.front().data();
  for (std::size_t j = 1; j < inputs.size(); ++j) {
    const std::vector<double>& tj = inputs[j].data();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] += tj[i] - base[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.data()[i] = base[i] + out.data()[i] * inv;
  }
  detail::check_finite(out, "mean_over_list");

  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  if (Tape::current() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorImpl>> ins;
    ins.reserve(inputs.size());
    for (const Tensor& t : inputs) ins.push_back(t.impl());
    auto oi = out.impl();
    Tape::current()->record([ins, oi, n, inv]() {
      if (oi->grad.empty()) return;
      for (auto& in : ins) {
        if (!in->requires_grad) continue;
        auto& g = detail::grad_buf(*in);
        for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matmul with broadcastable batch prefixes
// ---------------------------------------------------------------------------

namespace detail {

struct BatchMap {
  Shape out_batch;
  std::vector<std::size_t> a_dims;  // aligned to out_batch, 1 = broadcast
  std::vector<std::size_t> b_dims;
};

inline BatchMap broadcast_batches(const Tensor& a, const Tensor& b) {
  const std::size_t ra = a.rank() - 2;
  const std::size_t rb = b.rank() - 2;
  const std::size_t r = std::max(ra, rb);
  BatchMap m;
  m.out_batch.resize(r);
  m.a_dims.resize(r);
  m.b_dims.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = (i < r - ra) ? 1 : a.dim(i - (r - ra));
    const std::size_t db = (i < r - rb) ? 1 : b.dim(i - (r - rb));
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("matmul: batch dims incompatible " +
                           format_shape(a.shape()) + " vs " + format_shape(b.shape()));
    }
    m.out_batch[i] = std::max(da, db);
    m.a_dims[i] = da;
    m.b_dims[i] = db;
  }
  return m;
}

// Maps a linear out-batch index to offsets into a and b (broadcast dims pin
// to 0).
inline void batch_offsets(const BatchMap& m, std::size_t linear, std::size_t& oa,
                          std::size_t& ob) {
  oa = 0;
  ob = 0;
  for (std::size_t i = m.out_batch.size(); i-- > 0;) {
    const std::size_t idx = linear % m.out_batch[i];
    linear /= m.out_batch[i];
    std::size_t stride_a = 1, stride_b = 1;
    for (std::size_t j = i + 1; j < m.out_batch.size(); ++j) {
      stride_a *= m.a_dims[j];
      stride_b *= m.b_dims[j];
    }
    oa += (m.a_dims[i] == 1 ? 0 : idx) * stride_a;
    ob += (m.b_dims[i] == 1 ? 0 : idx) * stride_b;
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " +
                         format_shape(a.shape()) + " and " + format_shape(b.shape()));
  }
  const std::size_t M = a.dim(a.rank() - 2);
  const std::size_t K = a.dim(a.rank() - 1);
  const std::size_t Kb = b.dim(b.rank() - 2);
  const std::size_t N = b.dim(b.rank() - 1);
  if (K != Kb) {
    throw DimensionError("matmul: inner dims disagree, " + format_shape(a.shape()) +
                         " x " + format_shape(b.shape()));
  }
  const detail::BatchMap map = detail::broadcast_batches(a, b);
  Shape out_shape = map.out_batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor out = Tensor::zeros(out_shape);

  const std::size_t batches = numel_of(map.out_batch);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t batch = 0; batch < batches; ++batch) {
    std::size_t oa, ob;
    detail::batch_offsets(map, batch, oa, ob);
    const double* A = pa + oa * M * K;
    const double* B = pb + ob * K * N;
    double* C = po + batch * M * N;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const double av = A[i * K + k];
        const double* brow = B + k * N;
        double* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  }
  detail::check_finite(out, "matmul");

  if (detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    Tape::current()->record([ai, bi, oi, map, batches, M, K, N]() {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        auto& ga = detail::grad_buf(*ai);
        for (std::size_t batch = 0; batch < batches; ++batch) {
          std::size_t oa, ob;
          detail::batch_offsets(map, batch, oa, ob);
          const double* G = g + batch * M * N;
          const double* B = bi->data.data() + ob * K * N;
          double* dA = ga.data() + oa * M * K;
          for (std::size_t i = 0; i < M; ++i) {
            for (std::size_t k = 0; k < K; ++k) {
              const double* grow = G + i * N;
              const double* brow = B + k * N;
              double acc = 0.0;
              for (std::size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
              dA[i * K + k] += acc;
            }
          }
        }
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_buf(*bi);
        for (std::size_t batch = 0; batch < batches; ++batch) {
          std::size_t oa, ob;
          detail::batch_offsets(map, batch, oa, ob);
          const double* G = g + batch * M * N;
          const double* A = ai->data.data() + oa * M * K;
          double* dB = gb.data() + ob * K * N;
          for (std::size_t i = 0; i < M; ++i) {
            for (std::size_t k = 0; k < K; ++k) {
              const double av = A[i * K + k];
              const double* grow = G + i * N;
              double* brow = dB + k * N;
              for (std::size_t j = 0; j < N; ++j) brow[j] += av * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel()) {
    throw DimensionError("reshape: " + format_shape(x.shape()) + " -> " +
                         format_shape(new_shape) + " changes element count");
  }
  Tensor out = Tensor::from_data(std::move(new_shape), x.data());
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, oi]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = detail::grad_buf(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) {
    throw DimensionError("permute: got " + std::to_string(axes.size()) +
                         " axes for tensor of shape " + format_shape(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = x.dim(axes[d]);

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * x.dim(d + 1);
  std::vector<std::size_t> gather_strides(r);
  for (std::size_t d = 0; d < r; ++d) gather_strides[d] = in_strides[axes[d]];

  Tensor out = Tensor::zeros(out_shape);
  const std::size_t n = out.numel();
  std::vector<std::size_t> idx(r, 0);
  const double* px = x.data().data();
  double* po = out.data().data();
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = px[src];
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      src += gather_strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= gather_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }

  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, oi, gather_strides, out_shape, n, r]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = detail::grad_buf(*xi);
      std::vector<std::size_t> idx(r, 0);
      std::size_t src = 0;
      for (std::size_t i = 0; i < n; ++i) {
        g[src] += oi->grad[i];
        for (std::size_t d = r; d-- > 0;) {
          idx[d]++;
          src += gather_strides[d];
          if (idx[d] < out_shape[d]) break;
          src -= gather_strides[d] * out_shape[d];
          idx[d] = 0;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  detail::check_finite(out, "sum_all");
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, oi]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = detail::grad_buf(*xi);
      const double go = oi->grad[0];
      for (double& v : g) v += go;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) +
                         " out of range for " + format_shape(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t n = x.dim(axis);
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (d != axis) out_shape.push_back(x.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = Tensor::zeros(out_shape);
  const double inv = 1.0 / static_cast<double>(n);
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double* row = px + (o * n + k) * inner;
      double* orow = po + o * inner;
      for (std::size_t i = 0; i < inner; ++i) orow[i] += row[i];
    }
  }
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] *= inv;
  detail::check_finite(out, "mean_axis");

  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, oi, outer, inner, n, inv]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = detail::grad_buf(*xi);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
          double* row = g.data() + (o * n + k) * inner;
          const double* grow = oi->grad.data() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) row[i] += grow[i] * inv;
        }
      }
    });
  }
  return out;
}

}  // namespace mona
