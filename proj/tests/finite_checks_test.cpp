// Compiled with MONA_FORCE_FINITE_CHECKS so the debug-only forward checks are
// active regardless of NDEBUG.

#include <gtest/gtest.h>

#include "mona/layers.hpp"
#include "mona/tensor.hpp"

using namespace mona;

TEST(FiniteChecks, OverflowingOpThrows) {
  Tensor huge = Tensor::full({4}, 1e308);
  EXPECT_THROW(mul(huge, huge), ContractError);
  EXPECT_THROW(scale(huge, 1e10), ContractError);
}

TEST(FiniteChecks, OrdinaryOpsPass) {
  Tensor a = Tensor::from_data({3}, {1.0, -2.0, 3.0});
  EXPECT_NO_THROW(mul(a, a));
  EXPECT_NO_THROW(gelu(a));
  EXPECT_NO_THROW(softmax_lastdim(a));
}
