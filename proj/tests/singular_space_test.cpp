#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "noisesearch/singular_space.hpp"

namespace ns = noisesearch;

namespace {

ns::NoiseTensor random_noise(const ns::TensorShape& shape, std::uint64_t seed) {
  ns::Rng rng(seed);
  return ns::sample_standard_noise(shape, rng);
}

double relative_frobenius(std::span<const double> a, std::span<const double> b) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

double max_orthogonality_error(const std::vector<double>& m, std::size_t n) {
  double worst = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += m[i * n + p] * m[i * n + q];
      worst = std::max(worst, std::abs(s - (p == q ? 1.0 : 0.0)));
    }
  }
  return worst;
}

}  // namespace

TEST(Decompose, DiagonalSlice) {
  const ns::NoiseTensor x(ns::TensorShape::batched(1, 2), {3, 0, 0, 2});
  const auto space = ns::decompose(x);
  EXPECT_EQ(space.sigma_init().values, (std::vector<double>{3, 2}));
  EXPECT_EQ(space.slice(0).u, (std::vector<double>{1, 0, 0, 1}));
  EXPECT_EQ(space.slice(0).v, (std::vector<double>{1, 0, 0, 1}));
}

TEST(Decompose, AntiDiagonalSliceReconstructs) {
  const ns::NoiseTensor x(ns::TensorShape::batched(1, 2), {0, 2, 3, 0});
  const auto space = ns::decompose(x);
  const auto sigma = space.sigma_init();
  EXPECT_NEAR(sigma.values[0], 3.0, 1e-14);
  EXPECT_NEAR(sigma.values[1], 2.0, 1e-14);
  // Oracle: multiply the factors out by hand.
  const auto& s = space.slice(0);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double r = s.u_at(i, 0) * 3.0 * s.v_at(j, 0) + s.u_at(i, 1) * 2.0 * s.v_at(j, 1);
      EXPECT_NEAR(r, x[i * 2 + j], 1e-10);
    }
  }
}

TEST(Decompose, InvariantsOnRandomBatch) {
  const ns::TensorShape shape({8, 16, 16, 16}, {8, 64});
  const auto x = random_noise(shape, 5);
  const auto space = ns::decompose(x);
  for (std::size_t c = 0; c < space.channels(); ++c) {
    const auto& s = space.slice(c);
    EXPECT_LT(max_orthogonality_error(s.u, 64), 1e-6);
    EXPECT_LT(max_orthogonality_error(s.v, 64), 1e-6);
    EXPECT_TRUE(std::is_sorted(s.sigma.rbegin(), s.sigma.rend()));
    EXPECT_GE(s.sigma.back(), 0.0);
  }
  const auto back = ns::reconstruct(space, space.sigma_init(), false);
  EXPECT_LT(relative_frobenius(back.values(), x.values()), 1e-6);
  // Deterministic.
  const auto again = ns::decompose(x);
  for (std::size_t c = 0; c < space.channels(); ++c) EXPECT_EQ(space.slice(c).u, again.slice(c).u);
}

TEST(Decompose, NonFiniteInputRejected) {
  // NoiseTensor refuses NaN, so reach the SVD directly.
  const std::vector<double> bad{1.0, NAN, 0.0, 1.0};
  EXPECT_THROW(ns::jacobi_svd(bad, 2), ns::NumericError);
}

TEST(Reconstruct, ZeroSigmaAnnihilates) {
  const auto x = random_noise(ns::TensorShape::batched(2, 4), 1);
  const auto space = ns::decompose(x);
  const ns::SigmaCandidate zero{std::vector<double>(space.dimension(), 0.0), std::nullopt};
  const auto y = ns::reconstruct(space, zero, false);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(ns::reconstruct(space, zero, true), ns::DegenerateInputError);
}

TEST(Reconstruct, LinearInSigma) {
  const auto x = random_noise(ns::TensorShape::batched(3, 8), 2);
  const auto space = ns::decompose(x);
  auto doubled = space.sigma_init();
  for (double& v : doubled.values) v *= 2.0;
  const auto y = ns::reconstruct(space, doubled, false);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], 2.0 * x[i], 1e-6);
}

TEST(Reconstruct, NormalizeAppliesGaussianNormalization) {
  const auto x = random_noise(ns::TensorShape::batched(3, 8), 4);
  const auto space = ns::decompose(x);
  const auto y = ns::reconstruct(space, space.sigma_init(), true);
  const auto m = ns::moments(y.values());
  EXPECT_NEAR(m.mean, 0.0, 1e-12);
  EXPECT_NEAR(m.stddev(), 1.0, 1e-12);
}

TEST(Reconstruct, DimensionMismatch) {
  const auto space = ns::decompose(random_noise(ns::TensorShape::batched(2, 4), 3));
  EXPECT_THROW(ns::reconstruct(space, ns::SigmaCandidate{{1.0, 2.0}, std::nullopt}, false), ns::ShapeError);
}

TEST(SampleCandidates, ZeroEtaReturnsPivot) {
  const auto space = ns::decompose(random_noise(ns::TensorShape::batched(2, 4), 3));
  ns::Rng rng(0);
  const auto cands = ns::sample_candidates(space, 5, 0.0, rng);
  ASSERT_EQ(cands.size(), 5u);
  for (const auto& c : cands) EXPECT_EQ(c.values, space.sigma_init().values);
}

TEST(SampleCandidates, SpreadMatchesEta) {
  const auto space = ns::decompose(random_noise(ns::TensorShape::batched(1, 2), 3));
  ns::Rng rng(9);
  const auto cands = ns::sample_candidates(space, 10000, 3.0, rng);
  std::vector<double> first;
  for (const auto& c : cands) first.push_back(c.values[0]);
  const auto m = ns::moments(first);
  EXPECT_NEAR(m.stddev(), 3.0, 0.15);
  EXPECT_NEAR(m.mean, space.sigma_init().values[0], 0.1);
  // Unclamped: some draws around a sigma of ~1-2 go negative.
  EXPECT_TRUE(std::any_of(first.begin(), first.end(), [](double v) { return v < 0.0; }));
}

TEST(SampleCandidates, DeterministicAndDistinct) {
  const auto space = ns::decompose(random_noise(ns::TensorShape::batched(2, 4), 3));
  ns::Rng a(42);
  ns::Rng b(42);
  const auto ca = ns::sample_candidates(space, 6, 1.0, a);
  const auto cb = ns::sample_candidates(space, 6, 1.0, b);
  for (std::size_t i = 0; i < ca.size(); ++i) {
    EXPECT_EQ(ca[i].values, cb[i].values);
    for (std::size_t j = i + 1; j < ca.size(); ++j) EXPECT_NE(ca[i].values, ca[j].values);
  }
  EXPECT_THROW(ns::sample_candidates(space, 0, 1.0, a), ns::ArgumentError);
  EXPECT_THROW(ns::sample_candidates(space, 1, -1.0, a), ns::ArgumentError);
}

TEST(ShouldReset, Threshold) {
  // [0.5 +- 0.02236] has population variance 0.0005.
  const double h = std::sqrt(0.0005);
  const std::vector<double> tight{0.5 - h, 0.5 + h};
  EXPECT_TRUE(ns::should_reset(tight, 0.001));
  const std::vector<double> spread{0.1, 0.9};
  EXPECT_FALSE(ns::should_reset(spread, 0.001));
  const std::vector<double> flat{0.5, 0.5, 0.5};
  EXPECT_TRUE(ns::should_reset(flat));
  EXPECT_THROW(ns::should_reset(std::vector<double>{}), ns::ArgumentError);
}

TEST(ResetSpace, FixedPointAndRoundTrip) {
  const auto x = random_noise(ns::TensorShape::batched(4, 16), 8);
  const auto space = ns::decompose(x);
  const auto pivot = ns::reconstruct(space, space.sigma_init(), false);
  const auto again = ns::reset_space(pivot);
  const auto s0 = space.sigma_init().values;
  const auto s1 = again.sigma_init().values;
  for (std::size_t i = 0; i < s0.size(); ++i) EXPECT_NEAR(s0[i], s1[i], 1e-6);
  EXPECT_GT(ns::singular_vector_similarity(space, again, ns::SimilarityMetric::kAbsoluteCosine), 1.0 - 1e-6);
  const auto back = ns::reconstruct(again, again.sigma_init(), false);
  EXPECT_LT(relative_frobenius(back.values(), pivot.values()), 1e-6);
}

TEST(ResetSpace, VarianceRecoversAfterReset) {
  // Landscape: negative mean squared distance to a fixed target noise.
  const ns::TensorShape shape = ns::TensorShape::batched(4, 16);
  const auto target = random_noise(shape, 100);
  auto score = [&](const ns::NoiseTensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - target[i]) * (x[i] - target[i]);
    return -s / 16.0;
  };
  ns::Rng rng(1);
  auto space = ns::decompose(random_noise(shape, 2));
  // Tiny eta collapses the candidate-score variance...
  std::vector<double> scores;
  for (const auto& c : ns::sample_candidates(space, 8, 1e-4, rng)) scores.push_back(score(ns::reconstruct(space, c, true)));
  ASSERT_TRUE(ns::should_reset(scores));
  // ...resetting at the best and sampling with the default eta restores it.
  const auto best = ns::reconstruct(space, space.sigma_init(), true);
  space = ns::reset_space(best);
  scores.clear();
  for (const auto& c : ns::sample_candidates(space, 8, 3.0, rng)) scores.push_back(score(ns::reconstruct(space, c, true)));
  EXPECT_FALSE(ns::should_reset(scores));
}

TEST(Similarity, IdentityAndShapeMismatch) {
  const auto a = ns::decompose(random_noise(ns::TensorShape::batched(2, 8), 1));
  EXPECT_NEAR(ns::singular_vector_similarity(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ns::singular_vector_similarity(a, a, ns::SimilarityMetric::kAbsoluteCosine), 1.0, 1e-12);
  const auto b = ns::decompose(random_noise(ns::TensorShape::batched(2, 4), 1));
  EXPECT_THROW(ns::singular_vector_similarity(a, b), ns::ShapeError);
}

TEST(Similarity, OrthogonalColumnsContributeZero) {
  // Permutation matrices: columns of the two spaces are disjoint unit vectors.
  const ns::NoiseTensor x(ns::TensorShape::batched(1, 2), {2, 0, 0, 1});
  const ns::NoiseTensor y(ns::TensorShape::batched(1, 2), {1, 0, 0, 2});
  const auto a = ns::decompose(x);
  const auto b = ns::decompose(y);
  EXPECT_NEAR(ns::singular_vector_similarity(a, b), 0.0, 1e-15);
  EXPECT_NEAR(ns::singular_vector_similarity(a, b, ns::SimilarityMetric::kAbsoluteCosine), 0.0, 1e-15);
}

TEST(Similarity, IndependentNoiseFloors) {
  // Independent random frames: |cos| ~ sqrt(2/(pi n)); absolute entries ~ 2/pi.
  const auto a = ns::decompose(random_noise(ns::TensorShape::batched(4, 64), 1));
  const auto b = ns::decompose(random_noise(ns::TensorShape::batched(4, 64), 2));
  EXPECT_NEAR(ns::singular_vector_similarity(a, b), 2.0 / M_PI, 0.02);
  EXPECT_NEAR(ns::singular_vector_similarity(a, b, ns::SimilarityMetric::kAbsoluteCosine),
              std::sqrt(2.0 / (M_PI * 64.0)), 0.02);
}

TEST(Properties, ReconstructDecomposeRecoversSortedPositiveSigma) {
  const ns::TensorShape shape = ns::TensorShape::batched(3, 12);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto space = ns::decompose(random_noise(shape, seed));
    ns::Rng rng(seed + 1000);
    // Positive, distinct, descending per slice.
    ns::SigmaCandidate sigma{std::vector<double>(space.dimension()), std::nullopt};
    for (std::size_t c = 0; c < space.channels(); ++c) {
      double v = 20.0;
      for (std::size_t k = 0; k < space.side(); ++k) {
        v -= 0.5 + rng.uniform();
        sigma.values[c * space.side() + k] = v;
      }
    }
    const auto again = ns::decompose(ns::reconstruct(space, sigma, false));
    const auto got = again.sigma_init().values;
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], sigma.values[i], 1e-8);
    for (std::size_t c = 0; c < space.channels(); ++c) {
      for (std::size_t k = 0; k < space.side(); ++k) {
        double cu = 0.0;
        double cv = 0.0;
        for (std::size_t i = 0; i < space.side(); ++i) {
          cu += space.slice(c).u_at(i, k) * again.slice(c).u_at(i, k);
          cv += space.slice(c).v_at(i, k) * again.slice(c).v_at(i, k);
        }
        ASSERT_GT(std::abs(cu), 1.0 - 1e-8);
        ASSERT_GT(std::abs(cv), 1.0 - 1e-8);
      }
    }
  }
}

TEST(Properties, CompressionFactorIsSide) {
  const ns::TensorShape cube({14, 32, 32, 32}, {7, 256});
  EXPECT_EQ(cube.view().channels * cube.view().side, cube.element_count() / cube.view().side);
  EXPECT_EQ(7u * 256u, 458752u / 256u);
  const ns::TensorShape trellis({8, 16, 16, 16}, {8, 64});
  EXPECT_EQ(trellis.view().channels * trellis.view().side, trellis.element_count() / trellis.view().side);
  EXPECT_EQ(8u * 64u, 32768u / 64u);
}
