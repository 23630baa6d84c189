#include "mona/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "mona/rng.hpp"
#include "test_util.hpp"

using namespace mona;
using testutil::finite_diff_check;
using testutil::rand_tensor;

namespace {
std::size_t pick_kernel_size(mona::Rng& rng) {
  const std::size_t choices[3] = {3, 5, 7};
  return choices[rng.next_u64() % 3];
}
}  // namespace

TEST(Linear, IdentityWeight) {
  LinearLayer l(2, 2);
  l.weight.at({0, 0}) = 1.0;
  l.weight.at({1, 1}) = 1.0;
  Tensor x = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(l.forward(x).data(), x.data());
}

TEST(Linear, ZeroWeightConstantBias) {
  LinearLayer l(3, 2);
  fill_constant(l.bias, 4.5);
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = l.forward(x);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 4.5);
}

TEST(Linear, ManualArithmetic) {
  LinearLayer l(2, 2);
  l.weight = Tensor::from_data({2, 2}, {1, 1, 1, -1});
  Tensor y = l.forward(Tensor::from_data({1, 2}, {2, 3}));
  EXPECT_DOUBLE_EQ(y.at({0, 0}), 5.0);
  EXPECT_DOUBLE_EQ(y.at({0, 1}), -1.0);
}

TEST(Linear, DimMismatch) {
  LinearLayer l(3, 2);
  EXPECT_THROW(l.forward(Tensor::zeros({2, 4})), DimensionError);
}

TEST(Linear, LeadingDimsPreserved) {
  Rng rng(9);
  LinearLayer l(3, 5);
  l.init_kaiming(rng);
  Tensor x = rand_tensor({2, 4, 3}, rng);
  EXPECT_EQ(l.forward(x).shape(), (Shape{2, 4, 5}));
}

TEST(LayerNorm, ConstantRowGoesToZero) {
  LayerNormLayer ln(4);
  Tensor x = Tensor::full({2, 4}, 3.25);
  Tensor y = ln.forward(x);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
  LayerNormLayer ln(2);
  ln.eps = 1e-12;
  Tensor y = ln.forward(Tensor::from_data({1, 2}, {1, -1}));
  EXPECT_NEAR(y.at({0, 0}), 1.0, 1e-9);
  EXPECT_NEAR(y.at({0, 1}), -1.0, 1e-9);
}

TEST(LayerNorm, PreAffineMeanVar) {
  LayerNormLayer ln(3);
  ln.eps = 1e-12;
  Tensor y = ln.forward(Tensor::from_data({1, 3}, {0, 2, 4}));
  double mu = 0.0, var = 0.0;
  for (double v : y.data()) mu += v;
  mu /= 3.0;
  for (double v : y.data()) var += (v - mu) * (v - mu);
  var /= 3.0;
  EXPECT_LT(std::abs(mu), 1e-9);
  EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(LayerNorm, RandomRowsStayNormalized) {
  Rng rng(41);
  LayerNormLayer ln(8);
  ln.eps = 1e-10;
  Tensor x = rand_tensor({4, 6, 8}, rng);
  Tensor y = ln.forward(x);
  for (std::size_t r = 0; r < 24; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 8; ++i) mu += y.data()[r * 8 + i];
    mu /= 8.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double c = y.data()[r * 8 + i] - mu;
      var += c * c;
    }
    var /= 8.0;
    EXPECT_LT(std::abs(mu), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Gelu, ZeroAndAsymptote) {
  Tensor y = gelu(Tensor::from_data({2}, {0.0, 10.0}));
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 10.0, 1e-6);
}

TEST(Gelu, ErfClosedFormAtOne) {
  // 0.5 * (1 + erf(1/sqrt(2))) to 16 digits.
  const double expected = 0.8413447460685429;
  Tensor y = gelu(Tensor::scalar(1.0));
  EXPECT_NEAR(y.value(), expected, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(13);
  Tensor x = rand_tensor({3, 4, 5}, rng, -6.0, 6.0);
  Tensor y = softmax_lastdim(x);
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += y.data()[r * 5 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(DepthwiseConv, DeltaKernelIsIdentity) {
  Rng rng(15);
  DepthwiseConvLayer conv(3, 5);
  for (std::size_t c = 0; c < 3; ++c) conv.kernel.at({c, 2, 2}) = 1.0;
  Tensor x = rand_tensor({2, 3, 4, 6}, rng);
  EXPECT_EQ(conv.forward(x).data(), x.data());
}

TEST(DepthwiseConv, ZeroKernelIsZero) {
  Rng rng(16);
  DepthwiseConvLayer conv(2, 3);
  Tensor y = conv.forward(rand_tensor({1, 2, 3, 3}, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(DepthwiseConv, OnesKernelOnConstantInput) {
  DepthwiseConvLayer conv(1, 3);
  fill_constant(conv.kernel, 1.0);
  const double c = 0.75;
  Tensor y = conv.forward(Tensor::full({1, 1, 5, 5}, c));
  EXPECT_DOUBLE_EQ(y.at({0, 0, 2, 2}), 9.0 * c);  // interior
  EXPECT_DOUBLE_EQ(y.at({0, 0, 0, 0}), 4.0 * c);  // corner
  EXPECT_DOUBLE_EQ(y.at({0, 0, 0, 2}), 6.0 * c);  // edge
}

TEST(DepthwiseConv, ChannelMismatch) {
  DepthwiseConvLayer conv(2, 3);
  EXPECT_THROW(conv.forward(Tensor::zeros({1, 3, 4, 4})), DimensionError);
}

TEST(DepthwiseConv, UnsupportedKernelSize) {
  EXPECT_THROW(DepthwiseConvLayer(2, 4), ConfigError);
  EXPECT_THROW(DepthwiseConvLayer(2, 9), ConfigError);
}

TEST(DepthwiseConv, MatchesNaiveReference) {
  Rng rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t B = 1 + rng.next_u64() % 2;
    const std::size_t C = 1 + rng.next_u64() % 4;
    const std::size_t H = 1 + rng.next_u64() % 9;
    const std::size_t W = 1 + rng.next_u64() % 9;
    const std::size_t k = pick_kernel_size(rng);
    DepthwiseConvLayer conv(C, k);
    conv.init_kaiming(rng);
    Tensor x = rand_tensor({B, C, H, W}, rng);
    Tensor y = conv.forward(x);
    auto ref = testutil::naive_depthwise(x.data(), B, C, H, W, conv.kernel.data(), k);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
    }
  }
}

TEST(PointwiseConv, IdentityKernel) {
  Rng rng(61);
  PointwiseConvLayer conv(3, 3);
  for (std::size_t c = 0; c < 3; ++c) conv.kernel.at({c, c}) = 1.0;
  Tensor x = rand_tensor({2, 3, 2, 2}, rng);
  EXPECT_EQ(conv.forward(x).data(), x.data());
}

TEST(PointwiseConv, OnesKernelSumsChannels) {
  PointwiseConvLayer conv(4, 1);
  fill_constant(conv.kernel, 1.0);
  Tensor y = conv.forward(Tensor::full({1, 4, 3, 3}, 0.5));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(PointwiseConv, EqualsPerPixelLinear) {
  Rng rng(62);
  PointwiseConvLayer conv(3, 5);
  fill_kaiming_uniform(conv.kernel, 3, rng);
  Tensor x = rand_tensor({2, 3, 4, 4}, rng);
  Tensor y = conv.forward(x);
  // Independent route: move channels last, apply the kernel as a linear map.
  Tensor tokens = permute(x, {0, 2, 3, 1});
  Tensor lin = linear_apply(tokens, conv.kernel, nullptr);
  Tensor back = permute(lin, {0, 3, 1, 2});
  EXPECT_LT(testutil::max_abs_diff(y, back), 1e-12);
}

TEST(PointwiseConv, MatchesNaiveReference) {
  Rng rng(63);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t B = 1 + rng.next_u64() % 2;
    const std::size_t Cin = 1 + rng.next_u64() % 4;
    const std::size_t Cout = 1 + rng.next_u64() % 4;
    const std::size_t H = 1 + rng.next_u64() % 9;
    const std::size_t W = 1 + rng.next_u64() % 9;
    PointwiseConvLayer conv(Cin, Cout);
    fill_kaiming_uniform(conv.kernel, Cin, rng);
    Tensor x = rand_tensor({B, Cin, H, W}, rng);
    Tensor y = conv.forward(x);
    auto ref = testutil::naive_pointwise(x.data(), B, Cin, H, W, conv.kernel.data(), Cout);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
    }
  }
}

TEST(Attention, SingleTokenWindowIdentity) {
  Rng rng(71);
  WindowedSelfAttention attn(2, 1, 1);
  attn.wq.init_kaiming(rng);
  attn.wk.init_kaiming(rng);
  attn.wv.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  attn.wo.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor x = rand_tensor({1, 3, 2}, rng);
  Tensor y = attn.forward(x);
  EXPECT_LT(testutil::max_abs_diff(y, x), 1e-12);
}

TEST(Attention, UniformAttentionAveragesWindow) {
  Rng rng(72);
  WindowedSelfAttention attn(2, 1, 2);
  // Wq = Wk = 0 -> softmax of zeros -> uniform weights.
  attn.wv.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  attn.wo.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from_data({1, 4, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor y = attn.forward(x);
  // Window 0 = tokens {0,1}, window 1 = tokens {2,3}; each output is the mean.
  EXPECT_NEAR(y.at({0, 0, 0}), 2.0, 1e-12);
  EXPECT_NEAR(y.at({0, 1, 1}), 3.0, 1e-12);
  EXPECT_NEAR(y.at({0, 2, 0}), 20.0, 1e-12);
  EXPECT_NEAR(y.at({0, 3, 1}), 30.0, 1e-12);
}

TEST(Attention, TwoTokenManualOracle) {
  WindowedSelfAttention attn(1, 1, 2);
  attn.wq.weight = Tensor::from_data({1, 1}, {2.0});
  attn.wk.weight = Tensor::from_data({1, 1}, {1.0});
  attn.wv.weight = Tensor::from_data({1, 1}, {1.5});
  attn.wo.weight = Tensor::from_data({1, 1}, {1.0});
  const double x0 = 0.3, x1 = -0.7;
  Tensor x = Tensor::from_data({1, 2, 1}, {x0, x1});
  Tensor y = attn.forward(x);

  // Manual: q_i = 2 x_i, k_j = x_j, v_j = 1.5 x_j, scores s_ij = q_i k_j.
  auto row = [&](double q) {
    const double s0 = q * x0, s1 = q * x1;
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const double z = e0 + e1;
    return (e0 / z) * (1.5 * x0) + (e1 / z) * (1.5 * x1);
  };
  EXPECT_NEAR(y.at({0, 0, 0}), row(2 * x0), 1e-12);
  EXPECT_NEAR(y.at({0, 1, 0}), row(2 * x1), 1e-12);
}

TEST(Attention, IndivisibleTokenCountRejected) {
  WindowedSelfAttention attn(2, 1, 4);
  EXPECT_THROW(attn.forward(Tensor::zeros({1, 6, 2})), ConfigError);
}

TEST(Gradients, LinearFiniteDifference) {
  Rng rng(81);
  LinearLayer l(3, 4);
  l.init_kaiming(rng);
  l.weight.set_requires_grad(true);
  l.bias.set_requires_grad(true);
  Tensor x = rand_tensor({2, 3}, rng).set_requires_grad(true);
  Tensor probe = rand_tensor({2, 4}, rng);
  auto loss = [&]() { return mean_all(mul(l.forward(x), probe)); };
  auto r = finite_diff_check({l.weight, l.bias, x}, loss);
  EXPECT_LT(r.max_err, 1e-5) << r.where;
}

TEST(Gradients, LayerNormFiniteDifference) {
  Rng rng(82);
  LayerNormLayer ln(5);
  ln.gamma.set_requires_grad(true);
  ln.beta.set_requires_grad(true);
  for (double& v : ln.gamma.data()) v = rng.uniform(0.5, 1.5);
  Tensor x = rand_tensor({3, 5}, rng).set_requires_grad(true);
  Tensor probe = rand_tensor({3, 5}, rng);
  auto loss = [&]() { return mean_all(mul(ln.forward(x), probe)); };
  auto r = finite_diff_check({ln.gamma, ln.beta, x}, loss);
  EXPECT_LT(r.max_err, 1e-5) << r.where;
}

TEST(Gradients, GeluFiniteDifference) {
  Rng rng(83);
  Tensor x = rand_tensor({7}, rng).set_requires_grad(true);
  auto loss = [&]() { return sum_all(gelu(x)); };
  auto r = finite_diff_check({x}, loss);
  EXPECT_LT(r.max_err, 1e-5) << r.where;
}

TEST(Gradients, SoftmaxFiniteDifference) {
  Rng rng(84);
  Tensor x = rand_tensor({2, 4}, rng).set_requires_grad(true);
  Tensor probe = rand_tensor({2, 4}, rng);
  auto loss = [&]() { return sum_all(mul(softmax_lastdim(x), probe)); };
  auto r = finite_diff_check({x}, loss);
  EXPECT_LT(r.max_err, 1e-5) << r.where;
}

TEST(Gradients, ConvFiniteDifference) {
  Rng rng(85);
  DepthwiseConvLayer dw(2, 3);
  dw.init_kaiming(rng);
  dw.kernel.set_requires_grad(true);
  PointwiseConvLayer pw(2, 2);
  fill_kaiming_uniform(pw.kernel, 2, rng);
  pw.kernel.set_requires_grad(true);
  Tensor x = rand_tensor({1, 2, 4, 4}, rng).set_requires_grad(true);
  Tensor probe = rand_tensor({1, 2, 4, 4}, rng);
  auto loss = [&]() { return mean_all(mul(pw.forward(dw.forward(x)), probe)); };
  auto r = finite_diff_check({dw.kernel, pw.kernel, x}, loss);
  EXPECT_LT(r.max_err, 1e-5) << r.where;
}

TEST(Gradients, AttentionFiniteDifference) {
  Rng rng(86);
  WindowedSelfAttention attn(4, 2, 2);
  attn.wq.init_kaiming(rng);
  attn.wk.init_kaiming(rng);
  attn.wv.init_kaiming(rng);
  attn.wo.init_kaiming(rng);
  for (Tensor t : {attn.wq.weight, attn.wk.weight, attn.wv.weight, attn.wo.weight,
                   attn.wq.bias, attn.wk.bias, attn.wv.bias, attn.wo.bias}) {
    t.set_requires_grad(true);
  }
  Tensor x = rand_tensor({1, 4, 4}, rng).set_requires_grad(true);
  Tensor probe = rand_tensor({1, 4, 4}, rng);
  auto loss = [&]() { return mean_all(mul(attn.forward(x), probe)); };
  auto r = finite_diff_check(
      {attn.wq.weight, attn.wk.weight, attn.wv.weight, attn.wo.weight, x}, loss);
  EXPECT_LT(r.max_err, 1e-5) << r.where;
}
