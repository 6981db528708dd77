#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "noisesearch/errors.hpp"
#include "noisesearch/noise.hpp"
#include "noisesearch/rng.hpp"
#include "noisesearch/svd.hpp"

namespace noisesearch {

/// Point in the compressed search space: one singular-value vector per
/// batched slice, flattened as channels x side. Entries may be negative.
struct SigmaCandidate {
  std::vector<double> values;
  std::optional<double> score;
};

/// Frozen per-slice singular vectors plus the pivot singular values.
class SingularSpace {
 public:
  SingularSpace(TensorShape shape, std::vector<SquareSvd> slices)
      : shape_(std::move(shape)), slices_(std::move(slices)) {
    if (slices_.size() != shape_.view().channels) throw ShapeError("singular space: slice count mismatch");
    for (const auto& s : slices_) {
      if (s.n != shape_.view().side) throw ShapeError("singular space: slice side mismatch");
    }
  }

  const TensorShape& shape() const noexcept { return shape_; }
  std::size_t channels() const noexcept { return shape_.view().channels; }
  std::size_t side() const noexcept { return shape_.view().side; }
  /// Dimensionality of a SigmaCandidate (channels * side).
  std::size_t dimension() const noexcept { return channels() * side(); }
  const SquareSvd& slice(std::size_t c) const { return slices_.at(c); }

  SigmaCandidate sigma_init() const {
    SigmaCandidate out;
    out.values.reserve(dimension());
    for (const auto& s : slices_) out.values.insert(out.values.end(), s.sigma.begin(), s.sigma.end());
    return out;
  }

 private:
  TensorShape shape_;
  std::vector<SquareSvd> slices_;
};

inline SingularSpace decompose(const NoiseTensor& x) {
  const BatchedMatrices batched = to_batched(x);
  std::vector<SquareSvd> slices;
  slices.reserve(batched.view.channels);
  for (std::size_t c = 0; c < batched.view.channels; ++c) {
    slices.push_back(jacobi_svd(batched.slice(c), batched.view.side));
  }
  return SingularSpace(x.shape(), std::move(slices));
}

/// U diag(sigma) V^T per slice, optionally followed by Gaussian normalization.
inline NoiseTensor reconstruct(const SingularSpace& space, const SigmaCandidate& sigma, bool normalize) {
  if (sigma.values.size() != space.dimension()) {
    throw ShapeError("reconstruct: candidate has " + std::to_string(sigma.values.size()) + " values, space needs " +
                     std::to_string(space.dimension()));
  }
  const std::size_t n = space.side();
  BatchedMatrices out{space.shape().view(), std::vector<double>(space.shape().element_count(), 0.0)};
  std::vector<double> scaled_v(n * n);
  for (std::size_t c = 0; c < space.channels(); ++c) {
    const SquareSvd& s = space.slice(c);
    const double* sig = &sigma.values[c * n];
    // scaled_v[j][k] = V[j][k] * sigma_k, then X = U * scaled_v^T.
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) scaled_v[j * n + k] = s.v[j * n + k] * sig[k];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double* urow = &s.u[i * n];
      for (std::size_t j = 0; j < n; ++j) {
        out.at(c, i, j) = detail::dot(urow, &scaled_v[j * n], n);
      }
    }
  }
  NoiseTensor x = from_batched(std::move(out), space.shape());
  return normalize ? gaussian_normalize(x) : x;
}

/// Draws n candidates from N(sigma_init, eta^2 I): sigma_init + eta * z.
/// Negative entries are kept as-is.
inline std::vector<SigmaCandidate> sample_candidates(const SingularSpace& space, std::size_t n, double eta, Rng& rng) {
  if (n < 1) throw ArgumentError("sample_candidates: need n >= 1");
  if (!(eta >= 0.0)) throw ArgumentError("sample_candidates: eta must be non-negative");
  const SigmaCandidate pivot = space.sigma_init();
  std::vector<SigmaCandidate> out(n, pivot);
  for (auto& cand : out) {
    for (double& v : cand.values) v += eta * rng.normal();
  }
  return out;
}

inline constexpr double kDefaultResetThreshold = 1e-3;

/// True iff the population variance of the scores falls below zeta.
inline bool should_reset(std::span<const double> scores, double zeta = kDefaultResetThreshold) {
  if (scores.empty()) throw ArgumentError("should_reset: empty score list");
  return moments(scores).variance < zeta;
}

/// Re-anchors the space at the best candidate found so far.
inline SingularSpace reset_space(const NoiseTensor& best_noise) { return decompose(best_noise); }

enum class SimilarityMetric {
  /// cos(|a|, |b|) on element-wise absolute values. Two independent random
  /// unit vectors score about 2/pi under this metric.
  kAbsoluteEntries,
  /// |cos(a, b)|.
  kAbsoluteCosine,
};

/// Mean column-wise similarity between the singular vectors of two spaces,
/// matched by sorted index, averaged over every slice and over U and V.
inline double singular_vector_similarity(const SingularSpace& a, const SingularSpace& b,
                                         SimilarityMetric metric = SimilarityMetric::kAbsoluteEntries) {
  if (a.channels() != b.channels() || a.side() != b.side()) {
    throw ShapeError("singular_vector_similarity: shape mismatch");
  }
  const std::size_t n = a.side();
  auto column_similarity = [&](const std::vector<double>& ma, const std::vector<double>& mb, std::size_t k) {
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double x = ma[i * n + k];
      double y = mb[i * n + k];
      if (metric == SimilarityMetric::kAbsoluteEntries) {
        x = std::abs(x);
        y = std::abs(y);
      }
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return std::abs(ab) / std::sqrt(aa * bb);
  };
  double total = 0.0;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    const SquareSvd& sa = a.slice(c);
    const SquareSvd& sb = b.slice(c);
    for (std::size_t k = 0; k < n; ++k) {
      total += column_similarity(sa.u, sb.u, k) + column_similarity(sa.v, sb.v, k);
    }
  }
  return total / static_cast<double>(2 * a.channels() * n);
}

}  // namespace noisesearch
