#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mona/error.hpp"
#include "mona/layers.hpp"
#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

// ---------------------------------------------------------------------------
// Token sequence <-> spatial grid
// ---------------------------------------------------------------------------

// [B, T, C] -> [B, C, h, w] with T == h*w, row-major over (h, w). Exact
// bijection with grid_to_tokens.
inline Tensor tokens_to_grid(const Tensor& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3) {
    throw DimensionError("tokens_to_grid: expected [B, T, C], got " +
                         format_shape(x.shape()));
  }
  if (x.dim(1) != h * w) {
    throw GeometryError("tokens_to_grid: T=" + std::to_string(x.dim(1)) +
                        " != h*w=" + std::to_string(h) + "*" + std::to_string(w));
  }
  const std::size_t B = x.dim(0), C = x.dim(2);
  return reshape(permute(x, {0, 2, 1}), {B, C, h, w});
}

inline Tensor grid_to_tokens(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("grid_to_tokens: expected [B, C, h, w], got " +
                         format_shape(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2) * x.dim(3);
  return permute(reshape(x, {B, C, T}), {0, 2, 1});
}

// ---------------------------------------------------------------------------
// Mona adapter
// ---------------------------------------------------------------------------

struct MonaConfig {
  std::size_t in_dim = 0;            // m: hosting sublayer width
  std::size_t intermediate_dim = 64; // n: bottleneck width

  MonaConfig() = default;
  MonaConfig(std::size_t m, std::size_t n) : in_dim(m), intermediate_dim(n) {
    if (m < 1 || n < 1) throw ConfigError("mona: dimensions must be >= 1");
  }

  static constexpr std::size_t kKernelSizes[3] = {3, 5, 7};
};

// Closed-form trainable scalar count of one adapter:
//   norm + scales: 2m + 2, projections: 2mn + m + n,
//   depthwise kernels: (9 + 25 + 49) n = 83n, pointwise: n^2
// which totals (2n + 3) m + n^2 + 84n + 2.
inline std::size_t mona_param_count(const MonaConfig& cfg) {
  const std::size_t m = cfg.in_dim;
  const std::size_t n = cfg.intermediate_dim;
  return (2 * n + 3) * m + n * n + 84 * n + 2;
}

// Bottleneck adapter with scaled-norm input mixing, three depthwise filters
// averaged plus a pointwise aggregation (both with skips), and an outer
// residual. Shape-preserving on [B, T, m].
struct MonaModule {
  MonaConfig cfg;
  LayerNormLayer norm;  // over m
  Tensor s1, s2;        // scalar mixing weights
  LinearLayer down;     // m -> n
  DepthwiseConvLayer dw3, dw5, dw7;
  PointwiseConvLayer pw;  // n -> n
  LinearLayer up;         // n -> m

  MonaModule() = default;

  explicit MonaModule(const MonaConfig& config, Rng& rng)
      : cfg(config),
        norm(config.in_dim),
        s1(Tensor::scalar(1.0)),
        s2(Tensor::scalar(0.0)),
        down(config.in_dim, config.intermediate_dim),
        dw3(config.intermediate_dim, 3),
        dw5(config.intermediate_dim, 5),
        dw7(config.intermediate_dim, 7),
        pw(config.intermediate_dim, config.intermediate_dim),
        up(config.intermediate_dim, config.in_dim) {
    down.init_kaiming(rng);
    dw3.init_kaiming(rng);
    dw5.init_kaiming(rng);
    dw7.init_kaiming(rng);
    // pw kernel and the whole up projection stay zero: the module is an
    // exact identity until training moves them.
  }

  // s1 * LN(x0) + s2 * x0
  Tensor input_optimize(const Tensor& x0) const {
    if (x0.rank() < 1 || x0.dim(x0.rank() - 1) != cfg.in_dim) {
      throw DimensionError("mona.input_optimize: input " + format_shape(x0.shape()) +
                           " does not end in m=" + std::to_string(cfg.in_dim));
    }
    return add(mul(s1, norm.forward(x0)), mul(s2, x0));
  }

  // f_dw = x + mean(dw3(x), dw5(x), dw7(x)); f_pw = f_dw + pw(f_dw)
  Tensor multi_filter(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg.intermediate_dim) {
      throw DimensionError("mona.multi_filter: input " + format_shape(x.shape()) +
                           " does not carry n=" + std::to_string(cfg.intermediate_dim) +
                           " channels");
    }
    const Tensor f_dw =
        add(x, mean_over_list({dw3.forward(x), dw5.forward(x), dw7.forward(x)}));
    return add(f_dw, pw.forward(f_dw));
  }

  // x0 + up(GeLU(multi_filter(down(input_optimize(x0))))) on the (h, w) grid.
  Tensor forward(const Tensor& x0, std::size_t h, std::size_t w) const {
    if (x0.rank() != 3) {
      throw DimensionError("mona.forward: expected [B, T, m], got " +
                           format_shape(x0.shape()));
    }
    const Tensor mixed = input_optimize(x0);
    const Tensor compressed = down.forward(mixed);
    const Tensor grid = tokens_to_grid(compressed, h, w);
    const Tensor filtered = multi_filter(grid);
    const Tensor tokens = grid_to_tokens(filtered);
    return add(x0, up.forward(gelu(tokens)));
  }

  std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const {
    return {
        {prefix + "norm.gamma", norm.gamma}, {prefix + "norm.beta", norm.beta},
        {prefix + "s1", s1},                 {prefix + "s2", s2},
        {prefix + "down.weight", down.weight}, {prefix + "down.bias", down.bias},
        {prefix + "dw3.kernel", dw3.kernel}, {prefix + "dw5.kernel", dw5.kernel},
        {prefix + "dw7.kernel", dw7.kernel}, {prefix + "pw.kernel", pw.kernel},
        {prefix + "up.weight", up.weight},   {prefix + "up.bias", up.bias},
    };
  }
};

}  // namespace mona
