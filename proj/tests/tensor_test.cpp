#include "tpfuse/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using tpfuse::concat_feat;
using tpfuse::concat_seq;
using tpfuse::matmul;
using tpfuse::Matrix;
using tpfuse::randint_fill;
using tpfuse::ShapeError;
using tpfuse::softmax_rows;
using tpfuse::split_seq;
using tpfuse::Tensor;

// Independent oracle: plain quadruple loop, no shared code with matmul.
Tensor matmul_oracle(const Tensor& x, const Matrix& w) {
  Tensor out(x.batch(), x.seq(), w.cols());
  for (int64_t b = 0; b < x.batch(); ++b)
    for (int64_t s = 0; s < x.seq(); ++s)
      for (int64_t k = 0; k < x.feat(); ++k)
        for (int64_t c = 0; c < w.cols(); ++c)
          out(b, s, c) += x(b, s, k) * w(k, c);
  return out;
}

Tensor iota_tensor(int64_t batch, int64_t seq, int64_t feat) {
  Tensor t(batch, seq, feat);
  double v = 1.0;
  for (double& x : t.raw()) x = v++;
  return t;
}

}  // namespace

TEST(Matmul, IdentityWeight) {
  const Tensor x = Tensor::filled(1, 2, 3, 1.0);
  EXPECT_EQ(matmul(x, Matrix::identity(3)), x);
}

TEST(Matmul, ZeroAnnihilation) {
  const Tensor x(2, 4, 8);
  Matrix w(8, 5);
  for (double& v : w.raw()) v = 3.0;
  const Tensor out = matmul(x, w);
  EXPECT_EQ(out, Tensor(2, 4, 5));
}

TEST(Matmul, AllOnesWeightGivesRowSums) {
  const Tensor x = iota_tensor(1, 2, 3);  // rows [1,2,3], [4,5,6]
  Matrix ones(3, 2);
  for (double& v : ones.raw()) v = 1.0;
  const Tensor out = matmul(x, ones);
  EXPECT_DOUBLE_EQ(out(0, 0, 0), 6.0);
  EXPECT_DOUBLE_EQ(out(0, 0, 1), 6.0);
  EXPECT_DOUBLE_EQ(out(0, 1, 0), 15.0);
  EXPECT_DOUBLE_EQ(out(0, 1, 1), 15.0);
}

TEST(Matmul, AgreesWithNaiveOracleOnIntegers) {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    const Tensor x = randint_fill(2, 5, 7, -4, 5, seed);
    const Matrix w = tpfuse::randint_matrix(7, 6, -3, 4, seed + 100);
    EXPECT_EQ(matmul(x, w), matmul_oracle(x, w)) << "seed " << seed;
  }
}

TEST(Matmul, DimensionMismatchNamesBothShapes) {
  const Tensor x(1, 2, 3);
  const Matrix w(4, 2);
  try {
    matmul(x, w);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1,2,3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4,2)"), std::string::npos) << msg;
  }
}

TEST(Softmax, ConstantRowIsUniform) {
  const Tensor row = Tensor::filled(1, 1, 4, 3.7);
  const Tensor out = softmax_rows(row);
  for (int64_t d = 0; d < 4; ++d) EXPECT_DOUBLE_EQ(out(0, 0, d), 0.25);
}

TEST(Softmax, ClosedFormTwoElementRow) {
  Tensor row(1, 1, 2);
  row(0, 0, 0) = 0.0;
  row(0, 0, 1) = std::log(3.0);
  const Tensor out = softmax_rows(row);
  EXPECT_NEAR(out(0, 0, 0), 0.25, 1e-15);
  EXPECT_NEAR(out(0, 0, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937 rng(99);
  std::uniform_real_distribution<double> dist(-30.0, 30.0);
  Tensor scores(3, 4, 9);
  for (double& v : scores.raw()) v = dist(rng);
  const Tensor out = softmax_rows(scores);
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t s = 0; s < 4; ++s) {
      double sum = 0.0;
      for (int64_t d = 0; d < 9; ++d) sum += out(b, s, d);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  // Adding a constant per row must not change the result.
  Tensor shifted = scores;
  for (double& v : shifted.raw()) v += 17.5;
  EXPECT_LE(tpfuse::max_abs_diff(softmax_rows(shifted), out), 1e-14);
  EXPECT_TRUE(out.all_finite());
}

TEST(SplitConcat, SingleSliceIsIdentity) {
  const Tensor x = iota_tensor(2, 4, 3);
  const auto parts = split_seq(x, 1);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts[0], x);
}

TEST(SplitConcat, UnitSlicesInPositionOrder) {
  const Tensor x = iota_tensor(1, 4, 1);
  const auto parts = split_seq(x, 4);
  ASSERT_EQ(parts.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(parts[static_cast<size_t>(i)].seq(), 1);
    EXPECT_DOUBLE_EQ(parts[static_cast<size_t>(i)](0, 0, 0), i + 1.0);
  }
}

TEST(SplitConcat, RoundTripForEveryDivisor) {
  const Tensor x = randint_fill(2, 12, 5, 0, 9, 11);
  for (int n : {1, 2, 3, 4, 6, 12}) {
    EXPECT_EQ(concat_seq(split_seq(x, n)), x) << "n=" << n;
  }
}

TEST(SplitConcat, NonDivisibleNamesSequenceAndCount) {
  const Tensor x(1, 10, 2);
  try {
    split_seq(x, 3);
    FAIL() << "expected divisibility error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("10"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3"), std::string::npos) << msg;
  }
}

TEST(SplitConcat, ConcatFeatInterleavesByListOrder) {
  Tensor a(1, 1, 2), b(1, 1, 2);
  a(0, 0, 0) = 1.0;
  a(0, 0, 1) = 2.0;
  b(0, 0, 0) = 3.0;
  b(0, 0, 1) = 4.0;
  const Tensor out = concat_feat({a, b});
  ASSERT_EQ(out.feat(), 4);
  EXPECT_DOUBLE_EQ(out(0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out(0, 0, 1), 2.0);
  EXPECT_DOUBLE_EQ(out(0, 0, 2), 3.0);
  EXPECT_DOUBLE_EQ(out(0, 0, 3), 4.0);
  EXPECT_EQ(concat_feat({a}), a);
}

TEST(SplitConcat, AxisMismatchIsShapeError) {
  EXPECT_THROW(concat_seq({Tensor(1, 2, 3), Tensor(1, 2, 4)}), ShapeError);
  EXPECT_THROW(concat_feat({Tensor(1, 2, 3), Tensor(1, 3, 3)}), ShapeError);
}

TEST(Accumulate, IdentityDoublingAndOracle) {
  const Tensor x = randint_fill(2, 3, 4, -5, 6, 21);
  Tensor with_zero = x;
  tpfuse::accumulate(with_zero, Tensor(2, 3, 4));
  EXPECT_EQ(with_zero, x);

  Tensor doubled = x;
  tpfuse::accumulate(doubled, x);
  for (size_t i = 0; i < x.raw().size(); ++i)
    EXPECT_DOUBLE_EQ(doubled.raw()[i], 2.0 * x.raw()[i]);

  // Integer sums are exact in any order.
  const Tensor y = randint_fill(2, 3, 4, -5, 6, 22);
  Tensor xy = x, yx = y;
  tpfuse::accumulate(xy, y);
  tpfuse::accumulate(yx, x);
  EXPECT_EQ(xy, yx);

  Tensor bad = x;
  EXPECT_THROW(tpfuse::accumulate(bad, Tensor(2, 3, 5)), ShapeError);
}

TEST(RandintFill, DeterministicForSeed) {
  EXPECT_EQ(randint_fill(2, 3, 4, 0, 10, 5), randint_fill(2, 3, 4, 0, 10, 5));
  EXPECT_FALSE(randint_fill(2, 3, 4, 0, 10, 5) ==
               randint_fill(2, 3, 4, 0, 10, 6));
}

TEST(RandintFill, DegenerateRangeIsAllLo) {
  EXPECT_EQ(randint_fill(2, 2, 2, 0, 1, 9), Tensor(2, 2, 2));
}

TEST(RandintFill, GoldenValuesSeed42) {
  // Frozen from the first run of this generator.
  const Tensor t = randint_fill(1, 2, 2, 0, 8, 42);
  EXPECT_DOUBLE_EQ(t(0, 0, 0), 6.0);
  EXPECT_DOUBLE_EQ(t(0, 0, 1), 0.0);
  EXPECT_DOUBLE_EQ(t(0, 1, 0), 2.0);
  EXPECT_DOUBLE_EQ(t(0, 1, 1), 6.0);
}

TEST(RandintFill, RejectsEmptyRange) {
  EXPECT_THROW(randint_fill(1, 1, 1, 3, 3, 0), std::invalid_argument);
  EXPECT_THROW(randint_fill(1, 1, 1, 5, 2, 0), std::invalid_argument);
}

TEST(Heads, SplitMergeRoundTrip) {
  const Tensor x = randint_fill(2, 3, 8, -9, 9, 31);
  for (int heads : {1, 2, 4, 8}) {
    const Tensor folded = tpfuse::split_heads(x, heads);
    EXPECT_EQ(folded.batch(), 2 * heads);
    EXPECT_EQ(tpfuse::merge_heads(folded, heads), x) << "heads=" << heads;
  }
  EXPECT_THROW(tpfuse::split_heads(x, 3), ShapeError);
}

TEST(Tensor, OperationsKeepValuesFinite) {
  const Tensor x = randint_fill(2, 4, 6, -7, 8, 77);
  const Matrix w = tpfuse::randint_matrix(6, 6, -3, 4, 78);
  EXPECT_TRUE(matmul(x, w).all_finite());
  EXPECT_TRUE(softmax_rows(x).all_finite());
  EXPECT_TRUE(concat_seq(split_seq(x, 2)).all_finite());
}
