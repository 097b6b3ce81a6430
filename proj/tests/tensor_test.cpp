#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mtpd/rng.hpp"
#include "mtpd/tensor.hpp"

namespace mtpd {
namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < a.dim(1); ++p) acc += a(i, p) * b(p, j);
      c(i, j) = acc;
    }
  return c;
}

TEST(RngStream, SameSeedSameStream) {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  RngStream c(42, 50);
  RngStream d(42);
  for (int i = 0; i < 50; ++i) d.next_u64();
  EXPECT_EQ(c.next_u64(), d.next_u64());
}

TEST(RngStream, KnownSplitMixValues) {
  // Reference outputs of SplitMix64 seeded with 0.
  RngStream rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(rng.next_u64(), 0x06C45D188009454FULL);
}

TEST(RngStream, RandomTensorsBitIdentical) {
  RngStream a(7), b(7);
  EXPECT_EQ(random_normal({5, 6}, 1.0, a), random_normal({5, 6}, 1.0, b));
  EXPECT_EQ(random_uniform({3, 3}, -1, 1, a), random_uniform({3, 3}, -1, 1, b));
}

TEST(Matmul, IdentityCase) {
  const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), m), m);
}

TEST(Matmul, Projector) {
  EXPECT_EQ(matmul(Tensor::from_rows({{1, 0}, {0, 0}}), Tensor::from_rows({{5}, {7}})),
            Tensor::from_rows({{5}, {0}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  RngStream rng(11);
  const Tensor a = random_normal({7, 3}, 1.0, rng);
  const Tensor b = random_normal({3, 5}, 1.0, rng);
  const Tensor c = matmul(a, b);
  const Tensor expected = naive_matmul(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], expected[i], 1e-12);
  const Tensor nt = matmul_nt(a, transpose(b));
  const Tensor tn = matmul_tn(transpose(a), b);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(nt[i], expected[i], 1e-12);
    EXPECT_NEAR(tn[i], expected[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, AssociativityProperty) {
  RngStream rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.next_below(6), k = 1 + rng.next_below(6), n = 1 + rng.next_below(6),
                      p = 1 + rng.next_below(6);
    const Tensor a = random_normal({m, k}, 1.0, rng);
    const Tensor b = random_normal({k, n}, 1.0, rng);
    const Tensor c = random_normal({n, p}, 1.0, rng);
    const Tensor left = matmul(matmul(a, b), c);
    const Tensor right = matmul(a, matmul(b, c));
    const double scale = std::sqrt(squared_norm(left)) + 1.0;
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left[i], right[i], 1e-9 * scale);
  }
}

TEST(NearestUpsample, Examples) {
  EXPECT_EQ(nearest_upsample(Tensor::from_rows({{1, 2}}), 2), Tensor::from_rows({{1, 1, 2, 2}}));
  RngStream rng(5);
  const Tensor f = random_normal({3, 4}, 1.0, rng);
  EXPECT_EQ(nearest_upsample(f, 1), f);
  EXPECT_THROW(nearest_upsample(f, 0), ArgumentError);
}

TEST(NearestUpsample, SubsampleIsLeftInverse) {
  RngStream rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t c = 1 + rng.next_below(5), p = 1 + rng.next_below(6), factor = 1 + rng.next_below(4);
    const Tensor f = random_normal({c, p}, 1.0, rng);
    const Tensor up = nearest_upsample(f, factor);
    ASSERT_EQ(up.shape(), (Shape{c, p * factor}));
    for (std::size_t j = 0; j < p * factor; ++j)
      for (std::size_t i = 0; i < c; ++i) EXPECT_EQ(up(i, j), f(i, j / factor));
    EXPECT_EQ(stride_subsample(up, factor), f);
  }
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  const std::vector<std::size_t> labels{0, 1, 2, 3};
  const LossAndGrad r = softmax_cross_entropy(Tensor({4, 4}), labels);
  EXPECT_EQ(r.loss, std::log(4.0));
}

TEST(SoftmaxCrossEntropy, LargeCorrectLogitDrivesLossToZero) {
  const std::vector<std::size_t> labels{2};
  double previous = std::log(3.0);
  for (double magnitude : {10.0, 20.0}) {
    Tensor logits({1, 3});
    logits(0, 2) = magnitude;
    const double loss = softmax_cross_entropy(logits, labels).loss;
    EXPECT_LT(loss, previous);
    EXPECT_GT(loss, 0.0);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-8);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  RngStream rng(21);
  const Tensor logits = random_normal({4, 5}, 1.0, rng);
  const std::vector<std::size_t> labels{0, 3, 4, 1};
  const LossAndGrad r = softmax_cross_entropy(logits, labels);
  const double h = 1e-5;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor plus = logits, minus = logits;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (softmax_cross_entropy(plus, labels).loss - softmax_cross_entropy(minus, labels).loss) / (2 * h);
    EXPECT_LT(std::abs(fd - r.grad[i]), 1e-6 * std::max(std::abs(fd), 1e-3)) << "entry " << i;
  }
}

TEST(SoftmaxCrossEntropy, GradientRowsSumToZero) {
  RngStream rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.next_below(6), k = 2 + rng.next_below(6);
    const Tensor logits = random_normal({b, k}, 3.0, rng);
    std::vector<std::size_t> labels(b);
    for (auto& l : labels) l = rng.next_below(k);
    const Tensor g = softmax_cross_entropy(logits, labels).grad;
    for (std::size_t i = 0; i < b; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += g(i, j);
      EXPECT_NEAR(sum, 0.0, 1e-15);
    }
  }
}

TEST(SoftmaxCrossEntropy, RejectsOutOfRangeLabel) {
  const std::vector<std::size_t> labels{4};
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 4}), labels), ArgumentError);
}

TEST(Sse, Examples) {
  RngStream rng(2);
  const Tensor f = random_normal({3, 2}, 1.0, rng);
  EXPECT_EQ(sse(f, f, Normalization::kSum), 0.0);
  EXPECT_EQ(sse(Tensor::from_rows({{1, 0}, {1, 0}}), Tensor::from_rows({{0, 1}, {0, 1}}), Normalization::kSum), 4.0);
  const Tensor g = random_normal({3, 2}, 1.0, rng);
  EXPECT_NEAR(sse(f, g, Normalization::kMean), sse(f, g, Normalization::kSum) / 6.0, 1e-15);
  EXPECT_THROW(sse(f, Tensor({2, 3}), Normalization::kSum), DimensionError);
}

TEST(Tensor, RejectsZeroExtentsAndSizeMismatch) {
  EXPECT_THROW(Tensor({0, 3}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

}  // namespace
}  // namespace mtpd
