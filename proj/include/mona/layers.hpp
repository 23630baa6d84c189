#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mona/error.hpp"
#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

inline void fill_kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
}

inline void fill_constant(Tensor& t, double value) {
  for (double& v : t.data()) v = value;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

// Exact GeLU: x * Phi(x) with the Gaussian CDF via erf.
inline Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor out = Tensor::zeros_like(x);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
  }
  detail::check_finite(out, "gelu");
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, oi, n]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = detail::grad_buf(*xi);
      for (std::size_t i = 0; i < n; ++i) {
        const double v = xi->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        g[i] += oi->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Numerically stable softmax over the last dimension.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("softmax: rank-0 input");
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros_like(x);
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double* orow = po + r * d;
    double mx = row[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      orow[i] = std::exp(row[i] - mx);
      sum += orow[i];
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < d; ++i) orow[i] *= inv;
  }
  detail::check_finite(out, "softmax");
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, oi, rows, d]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& gx = detail::grad_buf(*xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = oi->data.data() + r * d;
        const double* g = oi->grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
        double* gr = gx.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) gr[i] += y[i] * (g[i] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

// out[.., o] = sum_i x[.., i] * W[o, i] (+ b[o]). Weight is [out, in].
inline Tensor linear_apply(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  if (weight.rank() != 2) {
    throw DimensionError("linear: weight must be rank 2, got " +
                         format_shape(weight.shape()));
  }
  const std::size_t out_f = weight.dim(0);
  const std::size_t in_f = weight.dim(1);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != in_f) {
    throw DimensionError("linear: input " + format_shape(x.shape()) +
                         " does not end in " + std::to_string(in_f) +
                         " (weight " + format_shape(weight.shape()) + ")");
  }
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != out_f)) {
    throw DimensionError("linear: bias " + format_shape(bias->shape()) +
                         " does not match out features " + std::to_string(out_f));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t rows = x.numel() / in_f;
  const double* px = x.data().data();
  const double* pw = weight.data().data();
  const double* pb = bias ? bias->data().data() : nullptr;
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * in_f;
    double* orow = po + r * out_f;
    for (std::size_t o = 0; o < out_f; ++o) {
      const double* wr = pw + o * in_f;
      double acc = pb ? pb[o] : 0.0;
      for (std::size_t i = 0; i < in_f; ++i) acc += xr[i] * wr[i];
      orow[o] = acc;
    }
  }
  detail::check_finite(out, "linear");

  const bool rec = bias ? detail::recording({&x, &weight, bias})
                        : detail::recording({&x, &weight});
  if (rec) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto wi = weight.impl();
    auto bi = bias ? bias->impl() : nullptr;
    auto oi = out.impl();
    Tape::current()->record([xi, wi, bi, oi, rows, in_f, out_f]() {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        auto& gx = detail::grad_buf(*xi);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g + r * out_f;
          double* xrow = gx.data() + r * in_f;
          for (std::size_t o = 0; o < out_f; ++o) {
            const double gv = grow[o];
            const double* wr = wi->data.data() + o * in_f;
            for (std::size_t i = 0; i < in_f; ++i) xrow[i] += gv * wr[i];
          }
        }
      }
      if (wi->requires_grad) {
        auto& gw = detail::grad_buf(*wi);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g + r * out_f;
          const double* xrow = xi->data.data() + r * in_f;
          for (std::size_t o = 0; o < out_f; ++o) {
            const double gv = grow[o];
            double* wr = gw.data() + o * in_f;
            for (std::size_t i = 0; i < in_f; ++i) wr[i] += gv * xrow[i];
          }
        }
      }
      if (bi && bi->requires_grad) {
        auto& gb = detail::grad_buf(*bi);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g + r * out_f;
          for (std::size_t o = 0; o < out_f; ++o) gb[o] += grow[o];
        }
      }
    });
  }
  return out;
}

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  LinearLayer() = default;
  LinearLayer(std::size_t in_features, std::size_t out_features)
      : weight(Tensor::zeros({out_features, in_features})),
        bias(Tensor::zeros({out_features})) {}

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  void init_kaiming(Rng& rng) { fill_kaiming_uniform(weight, in_features(), rng); }

  Tensor forward(const Tensor& x) const { return linear_apply(x, weight, &bias); }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension
// ---------------------------------------------------------------------------

inline Tensor layernorm_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps) {
  const std::size_t d = gamma.numel();
  if (beta.numel() != d) {
    throw DimensionError("layernorm: gamma " + format_shape(gamma.shape()) +
                         " vs beta " + format_shape(beta.shape()));
  }
  if (x.rank() < 1 || x.dim(x.rank() - 1) != d) {
    throw DimensionError("layernorm: input " + format_shape(x.shape()) +
                         " does not end in " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros_like(x);
  // Normalized values are kept for the backward rule.
  std::vector<double> ys(x.numel());
  std::vector<double> inv_sigmas(rows);
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pbeta = beta.data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = row[i] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    inv_sigmas[r] = inv_sigma;
    double* yrow = ys.data() + r * d;
    double* orow = po + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      yrow[i] = (row[i] - mu) * inv_sigma;
      orow[i] = pg[i] * yrow[i] + pbeta[i];
    }
  }
  detail::check_finite(out, "layernorm");

  if (detail::recording({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    auto oi = out.impl();
    Tape::current()->record(
        [xi, gi, bi, oi, rows, d, ys = std::move(ys), inv_sigmas = std::move(inv_sigmas)]() {
          if (oi->grad.empty()) return;
          const double* g = oi->grad.data();
          if (bi->requires_grad) {
            auto& gb = detail::grad_buf(*bi);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
            }
          }
          if (gi->requires_grad) {
            auto& gg = detail::grad_buf(*gi);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * ys[r * d + i];
            }
          }
          if (xi->requires_grad) {
            auto& gx = detail::grad_buf(*xi);
            for (std::size_t r = 0; r < rows; ++r) {
              const double* grow = g + r * d;
              const double* yrow = ys.data() + r * d;
              double mean_h = 0.0, mean_hy = 0.0;
              for (std::size_t i = 0; i < d; ++i) {
                const double h = grow[i] * gi->data[i];
                mean_h += h;
                mean_hy += h * yrow[i];
              }
              mean_h /= static_cast<double>(d);
              mean_hy /= static_cast<double>(d);
              double* xrow = gx.data() + r * d;
              for (std::size_t i = 0; i < d; ++i) {
                const double h = grow[i] * gi->data[i];
                xrow[i] += (h - mean_h - yrow[i] * mean_hy) * inv_sigmas[r];
              }
            }
          }
        });
  }
  return out;
}

struct LayerNormLayer {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::size_t dim)
      : gamma(Tensor::full({dim}, 1.0)), beta(Tensor::zeros({dim})) {}

  std::size_t dim() const { return gamma.numel(); }

  Tensor forward(const Tensor& x) const { return layernorm_apply(x, gamma, beta, eps); }
};

// ---------------------------------------------------------------------------
// Convolutions on [B, C, H, W] grids
// ---------------------------------------------------------------------------

// Per-channel cross-correlation, stride 1, zero "same" padding of k/2.
inline Tensor depthwise_conv2d_apply(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 4) {
    throw DimensionError("depthwise_conv2d: input must be [B, C, H, W], got " +
                         format_shape(x.shape()));
  }
  if (kernel.rank() != 3 || kernel.dim(1) != kernel.dim(2)) {
    throw DimensionError("depthwise_conv2d: kernel must be [C, k, k], got " +
                         format_shape(kernel.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = kernel.dim(1);
  if (kernel.dim(0) != C) {
    throw DimensionError("depthwise_conv2d: channel mismatch, input " +
                         format_shape(x.shape()) + " vs kernel " +
                         format_shape(kernel.shape()));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out = Tensor::zeros_like(x);
  const double* px = x.data().data();
  const double* pk = kernel.data().data();
  double* po = out.data().data();
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(W);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = px + (b * C + c) * H * W;
      const double* kc = pk + c * k * k;
      double* oplane = po + (b * C + c) * H * W;
      for (std::ptrdiff_t i = 0; i < h; ++i) {
        for (std::ptrdiff_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u < k; ++u) {
            const std::ptrdiff_t y = i + static_cast<std::ptrdiff_t>(u) - pad;
            if (y < 0 || y >= h) continue;
            for (std::size_t v = 0; v < k; ++v) {
              const std::ptrdiff_t xcol = j + static_cast<std::ptrdiff_t>(v) - pad;
              if (xcol < 0 || xcol >= w) continue;
              acc += kc[u * k + v] * plane[y * w + xcol];
            }
          }
          oplane[i * w + j] = acc;
        }
      }
    }
  }
  detail::check_finite(out, "depthwise_conv2d");

  if (detail::recording({&x, &kernel})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto ki = kernel.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, ki, oi, B, C, H, W, k, pad]() {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H);
      const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(W);
      double* gx = xi->requires_grad ? detail::grad_buf(*xi).data() : nullptr;
      double* gk = ki->requires_grad ? detail::grad_buf(*ki).data() : nullptr;
      if (gx == nullptr && gk == nullptr) return;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t base = (b * C + c) * H * W;
          const double* kc = ki->data.data() + c * k * k;
          const double* xc = xi->data.data() + base;
          for (std::ptrdiff_t i = 0; i < h; ++i) {
            for (std::ptrdiff_t j = 0; j < w; ++j) {
              const double gv = g[base + i * w + j];
              if (gv == 0.0) continue;
              for (std::size_t u = 0; u < k; ++u) {
                const std::ptrdiff_t y = i + static_cast<std::ptrdiff_t>(u) - pad;
                if (y < 0 || y >= h) continue;
                for (std::size_t v = 0; v < k; ++v) {
                  const std::ptrdiff_t xcol = j + static_cast<std::ptrdiff_t>(v) - pad;
                  if (xcol < 0 || xcol >= w) continue;
                  if (gk) gk[c * k * k + u * k + v] += gv * xc[y * w + xcol];
                  if (gx) gx[base + y * w + xcol] += gv * kc[u * k + v];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// 1x1 convolution: a shared linear map across channels at every pixel.
inline Tensor pointwise_conv2d_apply(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 4) {
    throw DimensionError("pointwise_conv2d: input must be [B, C, H, W], got " +
                         format_shape(x.shape()));
  }
  if (kernel.rank() != 2) {
    throw DimensionError("pointwise_conv2d: kernel must be [Cout, Cin], got " +
                         format_shape(kernel.shape()));
  }
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = kernel.dim(0);
  if (kernel.dim(1) != Cin) {
    throw DimensionError("pointwise_conv2d: channel mismatch, input " +
                         format_shape(x.shape()) + " vs kernel " +
                         format_shape(kernel.shape()));
  }
  const std::size_t P = H * W;
  Tensor out = Tensor::zeros({B, Cout, H, W});
  const double* px = x.data().data();
  const double* pk = kernel.data().data();
  double* po = out.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Cout; ++o) {
      double* oplane = po + (b * Cout + o) * P;
      for (std::size_t c = 0; c < Cin; ++c) {
        const double coef = pk[o * Cin + c];
        const double* plane = px + (b * Cin + c) * P;
        for (std::size_t p = 0; p < P; ++p) oplane[p] += coef * plane[p];
      }
    }
  }
  detail::check_finite(out, "pointwise_conv2d");

  if (detail::recording({&x, &kernel})) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto ki = kernel.impl();
    auto oi = out.impl();
    Tape::current()->record([xi, ki, oi, B, Cin, Cout, P]() {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        auto& gx = detail::grad_buf(*xi);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < Cout; ++o) {
            const double* gplane = g + (b * Cout + o) * P;
            for (std::size_t c = 0; c < Cin; ++c) {
              const double coef = ki->data[o * Cin + c];
              double* xplane = gx.data() + (b * Cin + c) * P;
              for (std::size_t p = 0; p < P; ++p) xplane[p] += coef * gplane[p];
            }
          }
        }
      }
      if (ki->requires_grad) {
        auto& gk = detail::grad_buf(*ki);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < Cout; ++o) {
            const double* gplane = g + (b * Cout + o) * P;
            for (std::size_t c = 0; c < Cin; ++c) {
              const double* xplane = xi->data.data() + (b * Cin + c) * P;
              double acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) acc += gplane[p] * xplane[p];
              gk[o * Cin + c] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

struct DepthwiseConvLayer {
  Tensor kernel;  // [C, k, k], no bias

  DepthwiseConvLayer() = default;
  DepthwiseConvLayer(std::size_t channels, std::size_t kernel_size)
      : kernel(Tensor::zeros({channels, kernel_size, kernel_size})) {
    if (kernel_size != 3 && kernel_size != 5 && kernel_size != 7) {
      throw ConfigError("depthwise kernel size must be 3, 5 or 7, got " +
                        std::to_string(kernel_size));
    }
  }

  std::size_t channels() const { return kernel.dim(0); }
  std::size_t kernel_size() const { return kernel.dim(1); }

  void init_kaiming(Rng& rng) {
    fill_kaiming_uniform(kernel, kernel_size() * kernel_size(), rng);
  }

  Tensor forward(const Tensor& x) const { return depthwise_conv2d_apply(x, kernel); }
};

struct PointwiseConvLayer {
  Tensor kernel;  // [Cout, Cin], no bias

  PointwiseConvLayer() = default;
  PointwiseConvLayer(std::size_t in_channels, std::size_t out_channels)
      : kernel(Tensor::zeros({out_channels, in_channels})) {}

  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t out_channels() const { return kernel.dim(0); }

  Tensor forward(const Tensor& x) const { return pointwise_conv2d_apply(x, kernel); }
};

// ---------------------------------------------------------------------------
// Windowed multi-head self-attention
// ---------------------------------------------------------------------------

// Non-overlapping windows over the token sequence; softmax(QK^T / sqrt(dh)) V
// per window and head, then an output projection.
struct WindowedSelfAttention {
  LinearLayer wq, wk, wv, wo;
  std::size_t heads = 1;
  std::size_t window = 1;

  WindowedSelfAttention() = default;
  WindowedSelfAttention(std::size_t dim, std::size_t num_heads, std::size_t window_size)
      : wq(dim, dim), wk(dim, dim), wv(dim, dim), wo(dim, dim),
        heads(num_heads), window(window_size) {
    if (num_heads == 0 || dim % num_heads != 0) {
      throw ConfigError("attention: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(num_heads));
    }
    if (window_size == 0) throw ConfigError("attention: window must be positive");
  }

  std::size_t dim() const { return wq.in_features(); }

  // Optional hook adding a parallel term to a projection ("q", "k", "v");
  // returns an empty tensor for projections it leaves alone.
  using ProjectionDelta = std::function<Tensor(const char* proj, const Tensor& tokens)>;

  Tensor forward(const Tensor& x) const { return forward(x, ProjectionDelta{}); }

  Tensor forward(const Tensor& x, const ProjectionDelta& delta) const {
    if (x.rank() != 3 || x.dim(2) != dim()) {
      throw DimensionError("attention: input must be [B, T, " + std::to_string(dim()) +
                           "], got " + format_shape(x.shape()));
    }
    const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    if (T % window != 0) {
      throw ConfigError("attention: T=" + std::to_string(T) +
                        " not divisible by window=" + std::to_string(window));
    }
    const std::size_t G = B * (T / window);
    const std::size_t dh = d / heads;

    const Tensor xw = reshape(x, {G, window, d});
    auto split_heads = [&](const Tensor& t) {
      // [G, w, d] -> [G, heads, w, dh]
      return permute(reshape(t, {G, window, heads, dh}), {0, 2, 1, 3});
    };
    auto project = [&](const LinearLayer& proj, const char* name) {
      Tensor p = proj.forward(xw);
      if (delta) {
        Tensor extra = delta(name, xw);
        if (extra.numel() > 0) p = add(p, extra);
      }
      return p;
    };
    const Tensor q = split_heads(project(wq, "q"));
    const Tensor k = split_heads(project(wk, "k"));
    const Tensor v = split_heads(project(wv, "v"));

    const Tensor kt = permute(k, {0, 1, 3, 2});  // [G, heads, dh, w]
    const Tensor scores = scale(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor attn = softmax_lastdim(scores);           // [G, heads, w, w]
    const Tensor ctx = matmul(attn, v);                    // [G, heads, w, dh]
    const Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {G, window, d});
    return reshape(wo.forward(merged), {B, T, d});
  }
};

}  // namespace mona
