#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"
#include "lsst/tensor.hpp"

namespace lsst {
namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t({r, c});
  for (double& v : t.values()) v = u(gen);
  return t;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(acc);
    }
  }
  return out;
}

TEST(Tensor, MatmulSmallLiteral) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(a, b), Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Tensor, MatmulVariantsAgreeWithNaiveProduct) {
  const Tensor a = random_matrix(5, 7, 1);
  const Tensor b = random_matrix(7, 3, 2);
  const Tensor ref = naive_matmul(a, b);
  EXPECT_LT(max_abs_diff(matmul(a, b), ref), 1e-14);
  EXPECT_LT(max_abs_diff(matmul_transposed(a, transpose(b)), ref), 1e-14);
  EXPECT_LT(max_abs_diff(transposed_matmul(transpose(a), b), ref), 1e-14);
}

TEST(Tensor, MatmulRejectsInnerMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Tensor, MatmulCountsFlops) {
  WorkCounters c;
  {
    CounterScope scope(c);
    CategoryScope cat(FlopCategory::kScore);
    matmul(Tensor({2, 3}), Tensor({3, 4}));
  }
  EXPECT_EQ(c.flops_in(FlopCategory::kScore), 2u * 2 * 3 * 4);
  EXPECT_EQ(c.total_flops(), 48u);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  const Tensor p = softmax_rows(random_matrix(6, 9, 3));
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < p.cols(); ++j) s += p(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, SoftmaxIsShiftInvariantAndStable) {
  Tensor big = Tensor::matrix({{1000, 1001, 1002}});
  const Tensor p = softmax_rows(big);
  const Tensor q = softmax_rows(Tensor::matrix({{0, 1, 2}}));
  EXPECT_LT(max_abs_diff(p, q), 1e-15);
}

TEST(Tensor, MaskedEntriesAreExactlyZero) {
  const Mask m = Mask::causal(3, 5, 2);
  const Tensor p = softmax_rows(random_matrix(3, 5, 4), m);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i + 2) {
        EXPECT_EQ(p(i, j), 0.0);
      } else {
        EXPECT_GT(p(i, j), 0.0);
      }
    }
  }
}

TEST(Tensor, FullyMaskedRowThrows) {
  Mask m = Mask::all(2, 2);
  m.allowed[2] = m.allowed[3] = 0;
  EXPECT_THROW(softmax_rows(Tensor({2, 2}), m), DegenerateRowError);
}

TEST(Tensor, FinalizeRejectsNonFinite) {
  Tensor t({2});
  t[1] = std::nan("");
  EXPECT_THROW(finalize(t), NumericError);
}

TEST(Tensor, SinglePrecisionRoundsStoredValues) {
  const Tensor t = finalize(Tensor({1}, {0.1}, Precision::kSingle));
  EXPECT_EQ(t[0], static_cast<double>(0.1f));
  EXPECT_NE(t[0], 0.1);
}

TEST(Tensor, SplitConcatRoundTripOnEveryAxis) {
  Tensor t({4, 6, 2});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::size_t parts = t.dim(axis) == 2 ? 2 : t.dim(axis) / 2;
    const auto pieces = split(t, axis, parts);
    ASSERT_EQ(pieces.size(), parts);
    EXPECT_EQ(concat(pieces, axis), t);
  }
}

TEST(Tensor, SplitRejectsIndivisibleAxis) {
  EXPECT_THROW(split(Tensor({5, 2}), 0, 2), ShapeError);
}

TEST(Tensor, SplitBlocksAreContiguous) {
  const Tensor t = Tensor::matrix({{0, 1}, {2, 3}, {4, 5}, {6, 7}});
  const auto pieces = split(t, 0, 2);
  EXPECT_EQ(pieces[1], Tensor::matrix({{4, 5}, {6, 7}}));
}

TEST(Tensor, StackUnstack) {
  const Tensor a = random_matrix(3, 2, 5);
  const Tensor b = random_matrix(3, 2, 6);
  const std::vector<Tensor> mats{a, b};
  const Tensor s = stack(mats);
  EXPECT_EQ(s.shape(), (Shape{2, 3, 2}));
  EXPECT_EQ(unstack_at(s, 1), b);
}

TEST(Tensor, ColumnHelpers) {
  Tensor t({2, 4});
  set_cols(t, 1, Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(slice_cols(t, 1, 3), Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(column_sum(t), Tensor::vector({0, 4, 6, 0}));
  EXPECT_EQ(slice_rows(t, 1, 2), Tensor::matrix({{0, 3, 4, 0}}));
}

TEST(Tensor, ElementwiseShapeChecks) {
  EXPECT_THROW(add(Tensor({2}), Tensor({3})), ShapeError);
  EXPECT_THROW(hadamard(Tensor({2, 1}), Tensor({1, 2})), ShapeError);
}

TEST(Tensor, CausalMaskUsesGlobalOffset) {
  const Mask m = Mask::causal(2, 6, 3);
  EXPECT_TRUE(m(0, 3));
  EXPECT_FALSE(m(0, 4));
  EXPECT_TRUE(m(1, 4));
  EXPECT_FALSE(m(1, 5));
}

}  // namespace
}  // namespace lsst
