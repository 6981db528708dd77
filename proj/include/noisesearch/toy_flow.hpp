#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "noisesearch/errors.hpp"
#include "noisesearch/rng.hpp"

namespace noisesearch {

/// Diagonal-covariance Gaussian with a mixture weight and class label.
struct MixtureComponent {
  std::vector<double> mean;
  std::vector<double> variance;
  double weight = 1.0;
  std::string label;
};

/// Gaussian-mixture data distribution. Rectified-flow marginals, velocity
/// and score are all closed-form for this family.
class MixtureModel {
 public:
  explicit MixtureModel(std::vector<MixtureComponent> components) : components_(std::move(components)) {
    if (components_.empty()) throw ArgumentError("mixture needs at least one component");
    dim_ = components_.front().mean.size();
    if (dim_ == 0) throw ArgumentError("mixture dimension must be positive");
    double total = 0.0;
    for (const auto& c : components_) {
      if (c.mean.size() != dim_ || c.variance.size() != dim_) {
        throw ArgumentError("mixture component dimension mismatch");
      }
      if (!(c.weight > 0.0)) throw ArgumentError("mixture weights must be positive");
      for (double v : c.variance) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ArgumentError("mixture variances must be positive and finite");
      }
      for (double m : c.mean) {
        if (!std::isfinite(m)) throw ArgumentError("mixture means must be finite");
      }
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("mixture weights must sum to 1");
  }

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<MixtureComponent>& components() const noexcept { return components_; }

  bool has_label(const std::string& label) const {
    return std::any_of(components_.begin(), components_.end(), [&](const auto& c) { return c.label == label; });
  }

  /// Mean and diagonal of the covariance of the full mixture.
  std::vector<double> mixture_mean() const {
    std::vector<double> m(dim_, 0.0);
    for (const auto& c : components_) {
      for (std::size_t i = 0; i < dim_; ++i) m[i] += c.weight * c.mean[i];
    }
    return m;
  }

 private:
  std::vector<MixtureComponent> components_;
  std::size_t dim_ = 0;
};

/// Uniform Euler grid from t = 1 down to t = 0.
struct FlowSchedule {
  std::size_t steps = 20;
  /// Lower bound on sigma_t = t inside the FK weight.
  double sigma_floor = 1e-3;

  double time(std::size_t k) const { return k >= steps ? 0.0 : 1.0 - static_cast<double>(k) / static_cast<double>(steps); }
  void validate() const {
    if (steps < 1) throw ArgumentError("flow schedule needs at least one step");
    if (!(sigma_floor > 0.0)) throw ArgumentError("sigma_floor must be positive");
  }
};

struct GuidanceConfig {
  double beta = 0.7;
  std::optional<std::string> condition;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ArgumentError("guidance beta must lie in [0, 1]");
  }
};

/// Increment-only NFE tally shared by every generation of a pipeline.
class NfeCounter {
 public:
  void add(std::uint64_t n) noexcept { count_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const noexcept { return count_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> count_{0};
};

namespace detail {

// Per-component posterior quantities at one (x, t).
struct ComponentTerms {
  std::vector<double> log_joint;  // log w_k + log N(x; (1-t) mu_k, s_k)
  std::vector<double> velocity;   // K x d, E[eps - x0 | x_t = x, k]
  std::vector<double> score;      // K x d, grad log N(x; (1-t) mu_k, s_k)
};

inline ComponentTerms component_terms(const MixtureModel& model, std::span<const double> x, double t) {
  const std::size_t d = model.dim();
  const std::size_t kc = model.components().size();
  ComponentTerms out;
  out.log_joint.resize(kc);
  out.velocity.resize(kc * d);
  out.score.resize(kc * d);
  const double a = 1.0 - t;
  const double log_two_pi = std::log(2.0 * std::numbers::pi);
  for (std::size_t k = 0; k < kc; ++k) {
    const auto& c = model.components()[k];
    double lj = std::log(c.weight);
    for (std::size_t i = 0; i < d; ++i) {
      const double s = a * a * c.variance[i] + t * t;
      const double diff = x[i] - a * c.mean[i];
      lj -= 0.5 * (diff * diff / s + std::log(s) + log_two_pi);
      const double eps_hat = t * diff / s;
      const double x0_hat = c.mean[i] + a * c.variance[i] * diff / s;
      out.velocity[k * d + i] = eps_hat - x0_hat;
      out.score[k * d + i] = -diff / s;
    }
    out.log_joint[k] = lj;
  }
  return out;
}

// Softmax of log_joint restricted to components carrying `label`
// (all components when absent).
inline std::vector<double> responsibilities(const MixtureModel& model, const ComponentTerms& terms,
                                            const std::optional<std::string>& label) {
  const std::size_t kc = model.components().size();
  std::vector<double> r(kc, 0.0);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < kc; ++k) {
    if (!label || model.components()[k].label == *label) peak = std::max(peak, terms.log_joint[k]);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < kc; ++k) {
    if (!label || model.components()[k].label == *label) {
      r[k] = std::exp(terms.log_joint[k] - peak);
      total += r[k];
    }
  }
  for (double& v : r) v /= total;
  return r;
}

inline std::vector<double> combine(const std::vector<double>& weights, const std::vector<double>& per_component,
                                   std::size_t d) {
  std::vector<double> out(d, 0.0);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] == 0.0) continue;
    for (std::size_t i = 0; i < d; ++i) out[i] += weights[k] * per_component[k * d + i];
  }
  return out;
}

inline void check_query(const MixtureModel& model, std::span<const double> x, double t,
                        const std::optional<std::string>& label) {
  if (!(t > 0.0) || t > 1.0) throw TimeDomainError("flow time must lie in (0, 1], got " + std::to_string(t));
  if (x.size() != model.dim()) throw ArgumentError("state dimension does not match the mixture");
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericError("non-finite flow state");
  }
  if (label && !model.has_label(*label)) throw ArgumentError("unknown class label '" + *label + "'");
}

}  // namespace detail

/// Rectified-flow velocity E[eps - x0 | x_t = x] under x_t = (1-t) x0 + t eps.
inline std::vector<double> velocity(const MixtureModel& model, std::span<const double> x, double t,
                                    const std::optional<std::string>& condition = std::nullopt) {
  detail::check_query(model, x, t, condition);
  const auto terms = detail::component_terms(model, x, t);
  return detail::combine(detail::responsibilities(model, terms, condition), terms.velocity, model.dim());
}

/// grad log q_t(x) of the time-t marginal. Related to the velocity by
///   v = -(x + t * score) / (1 - t),   t in (0, 1).
inline std::vector<double> marginal_score(const MixtureModel& model, std::span<const double> x, double t,
                                          const std::optional<std::string>& condition = std::nullopt) {
  detail::check_query(model, x, t, condition);
  const auto terms = detail::component_terms(model, x, t);
  return detail::combine(detail::responsibilities(model, terms, condition), terms.score, model.dim());
}

/// log q_t(x); used only to finite-difference the score.
inline double marginal_log_density(const MixtureModel& model, std::span<const double> x, double t,
                                   const std::optional<std::string>& condition = std::nullopt) {
  detail::check_query(model, x, t, condition);
  const auto terms = detail::component_terms(model, x, t);
  double peak = -std::numeric_limits<double>::infinity();
  double wsum = 0.0;
  for (std::size_t k = 0; k < terms.log_joint.size(); ++k) {
    if (!condition || model.components()[k].label == *condition) {
      peak = std::max(peak, terms.log_joint[k]);
      wsum += model.components()[k].weight;
    }
  }
  double total = 0.0;
  for (std::size_t k = 0; k < terms.log_joint.size(); ++k) {
    if (!condition || model.components()[k].label == *condition) total += std::exp(terms.log_joint[k] - peak);
  }
  return peak + std::log(total) - std::log(wsum);
}

struct CfgVelocity {
  std::vector<double> uncond;
  std::vector<double> cond;
  std::vector<double> guided;
};

/// Unconditional, conditional and guided fields, guided = (1-beta) v_uncond + beta v_cond.
inline CfgVelocity cfg_velocity(const MixtureModel& model, std::span<const double> x, double t,
                                const GuidanceConfig& g) {
  g.validate();
  if (!g.condition) throw ArgumentError("cfg_velocity needs a condition label");
  detail::check_query(model, x, t, g.condition);
  const auto terms = detail::component_terms(model, x, t);
  CfgVelocity out;
  out.uncond = detail::combine(detail::responsibilities(model, terms, std::nullopt), terms.velocity, model.dim());
  out.cond = detail::combine(detail::responsibilities(model, terms, g.condition), terms.velocity, model.dim());
  out.guided.resize(model.dim());
  for (std::size_t i = 0; i < model.dim(); ++i) {
    out.guided[i] = (1.0 - g.beta) * out.uncond[i] + g.beta * out.cond[i];
  }
  return out;
}

/// beta(1-beta) / (2 sigma^2) * |v1 - v2|^2 * dt
inline double fk_increment(double beta, double sigma, std::span<const double> v_uncond,
                           std::span<const double> v_cond, double dt) {
  double sq = 0.0;
  for (std::size_t i = 0; i < v_uncond.size(); ++i) {
    const double diff = v_uncond[i] - v_cond[i];
    sq += diff * diff;
  }
  return beta * (1.0 - beta) / (2.0 * sigma * sigma) * sq * dt;
}

struct Trajectory {
  std::vector<double> sample;
  double fk_log_weight = 0.0;
};

/// Deterministic Euler integration from t = 1 to t = 0, accumulating the FK
/// log-weight along the guided path when a condition is set.
inline Trajectory integrate(const MixtureModel& model, const FlowSchedule& schedule, const GuidanceConfig& g,
                            std::span<const double> x_init, NfeCounter* nfe = nullptr) {
  schedule.validate();
  g.validate();
  if (x_init.size() != model.dim()) {
    throw ArgumentError("initial noise has " + std::to_string(x_init.size()) + " entries, model expects " +
                        std::to_string(model.dim()));
  }
  Trajectory out;
  out.sample.assign(x_init.begin(), x_init.end());
  auto& x = out.sample;
  for (std::size_t k = 0; k < schedule.steps; ++k) {
    const double t = schedule.time(k);
    const double dt = schedule.time(k + 1) - t;  // negative
    std::vector<double> v;
    if (g.condition) {
      CfgVelocity f = cfg_velocity(model, x, t, g);
      out.fk_log_weight += fk_increment(g.beta, std::max(t, schedule.sigma_floor), f.uncond, f.cond, -dt);
      v = std::move(f.guided);
    } else {
      v = velocity(model, x, t);
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += v[i] * dt;
      if (!std::isfinite(x[i])) throw NumericError("non-finite sampler state at step " + std::to_string(k));
    }
  }
  if (nfe) nfe->add(schedule.steps);
  return out;
}

inline std::vector<double> sample(const MixtureModel& model, const FlowSchedule& schedule, const GuidanceConfig& g,
                                  std::span<const double> x_init, NfeCounter& nfe) {
  return integrate(model, schedule, g, x_init, &nfe).sample;
}

/// Accumulated FK log-weight along the guided Euler trajectory; sigma_t = t
/// clamped below by schedule.sigma_floor. Always >= 0.
inline double fk_log_weight(const MixtureModel& model, const FlowSchedule& schedule, const GuidanceConfig& g,
                            std::span<const double> x_init, NfeCounter* nfe = nullptr) {
  if (!g.condition) throw ArgumentError("fk_log_weight needs a condition label");
  return integrate(model, schedule, g, x_init, nfe).fk_log_weight;
}

struct ToyMixtureOptions {
  std::vector<std::string> labels{"a", "b"};
  std::size_t components_per_label = 2;
  /// Per-coordinate std of the component means.
  double mean_scale = 0.5;
  double variance_min = 0.25;
  double variance_max = 1.0;
};

/// Seeded random mixture with equal weights.
inline MixtureModel make_toy_mixture(std::size_t dim, std::uint64_t seed, const ToyMixtureOptions& opts = {}) {
  if (opts.labels.empty() || opts.components_per_label == 0) throw ArgumentError("toy mixture needs components");
  Rng rng(seed);
  const std::size_t total = opts.labels.size() * opts.components_per_label;
  std::vector<MixtureComponent> comps;
  comps.reserve(total);
  for (const auto& label : opts.labels) {
    for (std::size_t c = 0; c < opts.components_per_label; ++c) {
      MixtureComponent comp;
      comp.label = label;
      comp.weight = 1.0 / static_cast<double>(total);
      comp.mean.resize(dim);
      comp.variance.resize(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        comp.mean[i] = opts.mean_scale * rng.normal();
        comp.variance[i] = opts.variance_min + (opts.variance_max - opts.variance_min) * rng.uniform();
      }
      comps.push_back(std::move(comp));
    }
  }
  // Weights sum to 1 up to rounding; renormalize exactly on the last one.
  double rest = 1.0;
  for (std::size_t k = 0; k + 1 < comps.size(); ++k) rest -= comps[k].weight;
  comps.back().weight = rest;
  return MixtureModel(std::move(comps));
}

}  // namespace noisesearch
