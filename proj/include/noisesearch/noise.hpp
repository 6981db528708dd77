#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "noisesearch/errors.hpp"
#include "noisesearch/rng.hpp"

namespace noisesearch {

/// Batched-matrix relabeling of a tensor: `channels` square matrices of
/// side `side`.
struct BatchedView {
  std::size_t channels = 0;
  std::size_t side = 0;

  std::size_t element_count() const noexcept { return channels * side * side; }
  bool operator==(const BatchedView&) const = default;
};

/// Search-space shape: the model-facing dims plus the square batched view
/// used by the singular-value search. Both describe the same element count.
class TensorShape {
 public:
  TensorShape(std::vector<std::size_t> dims, BatchedView view) : dims_(std::move(dims)), view_(view) {
    if (dims_.empty()) throw ShapeError("tensor shape needs at least one dim");
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("tensor dims must be positive");
    }
    if (view_.channels < 1 || view_.side < 2) {
      throw ShapeError("batched view needs channels >= 1 and side >= 2");
    }
    if (element_count() != view_.element_count()) {
      throw ShapeError("dims hold " + std::to_string(element_count()) + " elements but batched view (" +
                       std::to_string(view_.channels) + "," + std::to_string(view_.side) + "," +
                       std::to_string(view_.side) + ") holds " + std::to_string(view_.element_count()));
    }
  }

  /// Shape whose dims already are (C, N, N).
  static TensorShape batched(std::size_t channels, std::size_t side) {
    return TensorShape({channels, side, side}, BatchedView{channels, side});
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  const BatchedView& view() const noexcept { return view_; }

  std::size_t element_count() const noexcept {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  bool operator==(const TensorShape&) const = default;

 private:
  std::vector<std::size_t> dims_;
  BatchedView view_;
};

/// Where a tensor came from: the RNG seed that produced it (if any) and the
/// chain of transformations applied since.
struct SeedLineage {
  std::optional<std::uint64_t> seed;
  std::vector<std::string> history;
};

/// Initial noise x_T, stored flat in row-major order. Finite by construction.
class NoiseTensor {
 public:
  NoiseTensor(TensorShape shape, std::vector<double> values, SeedLineage lineage = {})
      : shape_(std::move(shape)), values_(std::move(values)), lineage_(std::move(lineage)) {
    if (values_.size() != shape_.element_count()) {
      throw ShapeError("noise tensor has " + std::to_string(values_.size()) + " values, shape needs " +
                       std::to_string(shape_.element_count()));
    }
    for (double v : values_) {
      if (!std::isfinite(v)) throw NumericError("noise tensor contains a non-finite value");
    }
  }

  const TensorShape& shape() const noexcept { return shape_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  const SeedLineage& lineage() const noexcept { return lineage_; }

  /// Copy with one more history entry.
  NoiseTensor with_history(std::string step) const {
    SeedLineage lineage = lineage_;
    lineage.history.push_back(std::move(step));
    return NoiseTensor(shape_, values_, std::move(lineage));
  }

  bool operator==(const NoiseTensor& other) const {
    return shape_ == other.shape_ && values_ == other.values_;
  }

 private:
  TensorShape shape_;
  std::vector<double> values_;
  SeedLineage lineage_;
};

struct MomentStats {
  double mean = 0.0;
  double variance = 0.0;  // population
  double stddev() const { return std::sqrt(variance); }
};

/// Two-pass population mean/variance.
inline MomentStats moments(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("moments of an empty sequence");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, ss / n};
}

inline NoiseTensor sample_standard_noise(const TensorShape& shape, Rng& rng) {
  std::vector<double> values(shape.element_count());
  for (double& v : values) v = rng.normal();
  return NoiseTensor(shape, std::move(values), SeedLineage{rng.seed(), {"standard_normal"}});
}

enum class NormalizeMode { kStd, kVariance };

inline constexpr double kDegenerateVariance = 1e-12;

/// Recenters and rescales with global (whole-sequence) scalar statistics.
/// kStd divides by the population standard deviation, kVariance divides
/// by the population variance.
inline std::vector<double> gaussian_normalize(std::span<const double> values,
                                              NormalizeMode mode = NormalizeMode::kStd) {
  const MomentStats stats = moments(values);
  if (!(stats.variance > kDegenerateVariance)) {
    throw DegenerateInputError("gaussian_normalize: variance " + std::to_string(stats.variance) +
                               " is too small to normalize");
  }
  const double denom = mode == NormalizeMode::kStd ? stats.stddev() : stats.variance;
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (values[i] - stats.mean) / denom;
  return out;
}

inline NoiseTensor gaussian_normalize(const NoiseTensor& x, NormalizeMode mode = NormalizeMode::kStd) {
  SeedLineage lineage = x.lineage();
  lineage.history.emplace_back(mode == NormalizeMode::kStd ? "normalize_std" : "normalize_variance");
  return NoiseTensor(x.shape(), gaussian_normalize(x.values(), mode), std::move(lineage));
}

/// Row-major (channels, side, side) stack of square matrices.
struct BatchedMatrices {
  BatchedView view;
  std::vector<double> data;

  double at(std::size_t c, std::size_t i, std::size_t j) const { return data[(c * view.side + i) * view.side + j]; }
  double& at(std::size_t c, std::size_t i, std::size_t j) { return data[(c * view.side + i) * view.side + j]; }

  std::span<const double> slice(std::size_t c) const {
    const std::size_t n = view.side * view.side;
    return std::span<const double>(data).subspan(c * n, n);
  }
};

inline BatchedMatrices to_batched(const NoiseTensor& x) {
  return BatchedMatrices{x.shape().view(), std::vector<double>(x.values().begin(), x.values().end())};
}

inline NoiseTensor from_batched(BatchedMatrices batched, const TensorShape& shape) {
  if (batched.data.size() != shape.element_count() || batched.view.element_count() != batched.data.size()) {
    throw ShapeError("from_batched: element count mismatch");
  }
  return NoiseTensor(shape, std::move(batched.data));
}

}  // namespace noisesearch
