#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "noisesearch/errors.hpp"
#include "noisesearch/noise.hpp"
#include "noisesearch/pipeline.hpp"
#include "noisesearch/rng.hpp"
#include "noisesearch/singular_space.hpp"

namespace noisesearch {

enum class Algorithm { kRandom, kZeroOrder, kFirefly };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kRandom: return "random";
    case Algorithm::kZeroOrder: return "zero_order";
    case Algorithm::kFirefly: return "firefly";
  }
  return "unknown";
}

inline Algorithm parse_algorithm(std::string_view name) {
  if (name == "random") return Algorithm::kRandom;
  if (name == "zero_order" || name == "zero-order") return Algorithm::kZeroOrder;
  if (name == "firefly") return Algorithm::kFirefly;
  throw ConfigError("unknown search algorithm '" + std::string(name) + "'");
}

struct SearchConfig {
  Algorithm algorithm = Algorithm::kZeroOrder;
  std::size_t candidates = 5;   // N
  std::size_t iterations = 200; // K
  double lambda = 2.0;          // zero-order radius
  double eta = 3.0;             // CSS perturbation scale
  double zeta = kDefaultResetThreshold;
  double beta0 = 1.0;
  double gamma = 1e-5;
  double alpha = 0.97;
  bool use_gn = true;
  bool use_css = true;
  bool use_ssr = true;
  /// Zero-order: keep the pivot in the argmax set.
  bool elitism = true;
  /// Random search in CSS mode: reset on every new best.
  bool reset_on_new_best = true;
  /// Random search in CSS mode: reset when the last `variance_window`
  /// scores have variance below zeta.
  bool reset_on_low_variance = false;
  std::size_t variance_window = 10;
  /// Firefly: move every firefly against a snapshot of the swarm taken at
  /// the start of the iteration, then evaluate each moved firefly once.
  bool firefly_snapshot = false;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> nfe_budget;

  /// Defaults per algorithm, sized to roughly 1000 evaluations.
  static SearchConfig defaults(Algorithm algorithm) {
    SearchConfig cfg;
    cfg.algorithm = algorithm;
    switch (algorithm) {
      case Algorithm::kRandom:
        cfg.candidates = 1000;
        cfg.iterations = 1;
        break;
      case Algorithm::kZeroOrder:
        cfg.candidates = 5;
        cfg.iterations = 200;
        break;
      case Algorithm::kFirefly:
        // ~10 initial + ~45 pair moves per iteration.
        cfg.candidates = 10;
        cfg.iterations = 22;
        break;
    }
    return cfg;
  }

  void validate() const {
    if (candidates < 1) throw ConfigError("candidates must be >= 1");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
    if (!(zeta > 0.0)) throw ConfigError("zeta must be > 0");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (reset_on_low_variance && variance_window < 2) throw ConfigError("variance_window must be >= 2");
  }
};

struct TraceRecord {
  std::size_t iter = 0;
  double best_score = 0.0;
  std::uint64_t nfe = 0;
  std::uint64_t evals = 0;
  double score_var = 0.0;
  bool reset = false;
  double elapsed_ms = 0.0;
  /// Mean population std of the noise tensors generated in this iteration.
  double cand_std = 0.0;
};

struct SearchTrace {
  SearchConfig config;
  std::vector<TraceRecord> records;
  std::optional<NoiseTensor> best_noise;
  double best_score = -std::numeric_limits<double>::infinity();
  std::uint64_t total_evals = 0;
  std::uint64_t total_nfe = 0;
  std::size_t reset_count = 0;
  bool budget_exhausted = false;
};

/// Index of the maximum score; ties go to the lowest index.
inline std::size_t select_best(std::span<const double> scores) {
  if (scores.empty()) throw ArgumentError("select_best: empty candidate list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

struct ScoredNoise {
  NoiseTensor noise;
  double score;
};

inline const ScoredNoise& select_best(std::span<const ScoredNoise> candidates) {
  if (candidates.empty()) throw ArgumentError("select_best: empty candidate list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (candidates[i].score > candidates[best].score) best = i;
  }
  return candidates[best];
}

/// exp(-gamma r^2) scaled by beta0.
inline double firefly_attractiveness(double beta0, double gamma, double squared_distance) {
  return beta0 * std::exp(-gamma * squared_distance);
}

namespace detail {

inline double population_variance(std::span<const double> xs) { return xs.empty() ? 0.0 : moments(xs).variance; }

inline std::vector<double> perturb(std::span<const double> base, double scale, Rng& rng) {
  std::vector<double> out(base.begin(), base.end());
  for (double& v : out) v += scale * rng.normal();
  return out;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Owns the budget, the global best and the trace for one run.
template <NoisePipeline P>
class SearchRun {
 public:
  SearchRun(P& pipeline, const SearchConfig& cfg)
      : pipeline_(pipeline), steps_(pipeline.steps_per_evaluation()), nfe_start_(pipeline.nfe()),
        start_(std::chrono::steady_clock::now()) {
    trace_.config = cfg;
  }

  bool exhausted() const noexcept { return exhausted_; }

  /// Scores x, or returns nullopt once the NFE budget cannot afford it.
  std::optional<double> evaluate(const NoiseTensor& x) {
    if (exhausted_) return std::nullopt;
    const auto& budget = trace_.config.nfe_budget;
    if (budget && (trace_.total_evals + 1) * steps_ > *budget) {
      exhausted_ = true;
      trace_.budget_exhausted = true;
      return std::nullopt;
    }
    const double s = pipeline_.evaluate(x);
    if (!std::isfinite(s)) throw NumericError("pipeline returned a non-finite score");
    ++trace_.total_evals;
    ++iter_evals_;
    iter_std_sum_ += moments(x.values()).stddev();
    if (s > trace_.best_score) {
      trace_.best_score = s;
      trace_.best_noise = x;
    }
    return s;
  }

  double best_score() const noexcept { return trace_.best_score; }
  const NoiseTensor& best_noise() const { return *trace_.best_noise; }

  /// Closes an iteration. Iterations without evaluations leave no record.
  void record(std::size_t iter, double score_var, bool reset) {
    if (iter_evals_ == 0) return;
    TraceRecord r;
    r.iter = iter;
    r.best_score = trace_.best_score;
    r.nfe = pipeline_.nfe() - nfe_start_;
    r.evals = trace_.total_evals;
    r.score_var = score_var;
    r.reset = reset;
    r.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    r.cand_std = iter_std_sum_ / static_cast<double>(iter_evals_);
    trace_.records.push_back(r);
    if (reset) ++trace_.reset_count;
    iter_evals_ = 0;
    iter_std_sum_ = 0.0;
  }

  SearchTrace finish() {
    trace_.total_nfe = pipeline_.nfe() - nfe_start_;
    return std::move(trace_);
  }

 private:
  P& pipeline_;
  std::size_t steps_;
  std::uint64_t nfe_start_;
  std::chrono::steady_clock::time_point start_;
  SearchTrace trace_;
  bool exhausted_ = false;
  std::uint64_t iter_evals_ = 0;
  double iter_std_sum_ = 0.0;
};

inline NoiseTensor maybe_normalize(NoiseTensor x, bool use_gn) { return use_gn ? gaussian_normalize(x) : x; }

inline NoiseTensor tensor_like(const NoiseTensor& like, std::vector<double> values) {
  return NoiseTensor(like.shape(), std::move(values));
}

}  // namespace detail

/// Random search. Vanilla: N independent standard-normal noises, one trace
/// record per candidate. CSS: candidates are drawn around a decomposed
/// pivot in singular-value space, with the space reset to the best noise
/// on improvement (and optionally on low score variance).
template <NoisePipeline P>
SearchTrace run_random(const SearchConfig& cfg, P& pipeline, const TensorShape& shape) {
  cfg.validate();
  Rng rng(cfg.seed);
  detail::SearchRun<P> run(pipeline, cfg);
  std::vector<double> scores;

  if (!cfg.use_css) {
    for (std::size_t i = 0; i < cfg.candidates; ++i) {
      const auto s = run.evaluate(detail::maybe_normalize(sample_standard_noise(shape, rng), cfg.use_gn));
      if (!s) break;
      scores.push_back(*s);
      run.record(i, detail::population_variance(scores), false);
    }
    return run.finish();
  }

  const NoiseTensor x0 = detail::maybe_normalize(sample_standard_noise(shape, rng), cfg.use_gn);
  const auto s0 = run.evaluate(x0);
  if (!s0) return run.finish();
  scores.push_back(*s0);
  run.record(0, 0.0, false);
  SingularSpace space = decompose(x0);
  std::vector<double> window{*s0};

  for (std::size_t i = 1; i < cfg.candidates; ++i) {
    const double best_before = run.best_score();
    SigmaCandidate sigma = sample_candidates(space, 1, cfg.eta, rng).front();
    const auto s = run.evaluate(reconstruct(space, sigma, cfg.use_gn));
    if (!s) break;
    scores.push_back(*s);
    window.push_back(*s);
    if (cfg.reset_on_low_variance && window.size() > cfg.variance_window) window.erase(window.begin());
    bool reset = false;
    if (cfg.use_ssr) {
      const bool improved = cfg.reset_on_new_best && *s > best_before;
      const bool stalled = cfg.reset_on_low_variance && window.size() == cfg.variance_window &&
                           should_reset(window, cfg.zeta);
      if (improved || stalled) {
        space = reset_space(run.best_noise());
        reset = true;
        if (stalled) window.clear();
      }
    }
    const double var = cfg.reset_on_low_variance ? detail::population_variance(window)
                                                 : detail::population_variance(scores);
    run.record(i, var, reset);
  }
  return run.finish();
}

/// Zero-order search: K rounds of N Gaussian perturbations (scale lambda)
/// of a pivot, in noise space or singular-value space. The pivot starts
/// unscored; with elitism it competes with its own candidates afterwards.
template <NoisePipeline P>
SearchTrace run_zero_order(const SearchConfig& cfg, P& pipeline, const TensorShape& shape) {
  cfg.validate();
  Rng rng(cfg.seed);
  detail::SearchRun<P> run(pipeline, cfg);

  NoiseTensor pivot_noise = detail::maybe_normalize(sample_standard_noise(shape, rng), cfg.use_gn);
  std::optional<double> pivot_score;
  std::optional<SingularSpace> space;
  std::vector<double> pivot_sigma;
  if (cfg.use_css) {
    space = decompose(pivot_noise);
    pivot_sigma = space->sigma_init().values;
  }

  for (std::size_t t = 0; t < cfg.iterations && !run.exhausted(); ++t) {
    std::vector<double> scores;
    std::vector<NoiseTensor> noises;
    std::vector<std::vector<double>> sigmas;
    for (std::size_t i = 0; i < cfg.candidates; ++i) {
      std::optional<NoiseTensor> cand;
      if (cfg.use_css) {
        SigmaCandidate sigma{detail::perturb(pivot_sigma, cfg.lambda, rng), std::nullopt};
        cand = reconstruct(*space, sigma, cfg.use_gn);
        sigmas.push_back(std::move(sigma.values));
      } else {
        cand = detail::maybe_normalize(
            detail::tensor_like(pivot_noise, detail::perturb(pivot_noise.values(), cfg.lambda, rng)), cfg.use_gn);
      }
      const auto s = run.evaluate(*cand);
      if (!s) break;
      scores.push_back(*s);
      noises.push_back(std::move(*cand));
    }
    if (scores.empty()) break;

    const std::size_t best = select_best(scores);
    if (!(cfg.elitism && pivot_score && *pivot_score >= scores[best])) {
      pivot_score = scores[best];
      pivot_noise = noises[best];
      if (cfg.use_css) pivot_sigma = sigmas[best];
    }
    const double var = detail::population_variance(scores);
    bool reset = false;
    if (cfg.use_css && cfg.use_ssr && should_reset(scores, cfg.zeta)) {
      space = reset_space(pivot_noise);
      pivot_sigma = space->sigma_init().values;
      reset = true;
    }
    run.record(t, var, reset);
  }
  return run.finish();
}

/// Firefly search. Dimmer fireflies move toward brighter ones,
/// x_i += beta0 exp(-gamma r^2) (x_j - x_i) + alpha eps, and are re-scored
/// after every move. In CSS mode positions are singular values and a low
/// brightness variance resets the space to the global best and re-seeds
/// the swarm around it.
template <NoisePipeline P>
SearchTrace run_firefly(const SearchConfig& cfg, P& pipeline, const TensorShape& shape) {
  cfg.validate();
  Rng rng(cfg.seed);
  detail::SearchRun<P> run(pipeline, cfg);
  const std::size_t n = cfg.candidates;

  std::optional<SingularSpace> space;
  std::vector<std::vector<double>> pos(n);
  std::vector<double> bright(n, -std::numeric_limits<double>::infinity());

  auto materialize = [&](const std::vector<double>& p) {
    if (cfg.use_css) return reconstruct(*space, SigmaCandidate{p, std::nullopt}, cfg.use_gn);
    return NoiseTensor(shape, p);
  };
  auto seed_swarm_from_space = [&]() -> bool {
    auto sigmas = sample_candidates(*space, n, cfg.eta, rng);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = std::move(sigmas[i].values);
      const auto s = run.evaluate(materialize(pos[i]));
      if (!s) return false;
      bright[i] = *s;
    }
    return true;
  };

  bool alive = true;
  if (cfg.use_css) {
    space = decompose(sample_standard_noise(shape, rng));
    alive = seed_swarm_from_space();
  } else {
    for (std::size_t i = 0; i < n && alive; ++i) {
      const NoiseTensor x = detail::maybe_normalize(sample_standard_noise(shape, rng), cfg.use_gn);
      pos[i].assign(x.values().begin(), x.values().end());
      const auto s = run.evaluate(x);
      if (!s) alive = false;
      else bright[i] = *s;
    }
  }
  run.record(0, detail::population_variance(bright), false);

  // In vanilla mode with GN the stored position is the normalized tensor.
  auto move = [&](std::vector<double>& xi, const std::vector<double>& xj) {
    const double beta = firefly_attractiveness(cfg.beta0, cfg.gamma, detail::sq_dist(xi, xj));
    for (std::size_t k = 0; k < xi.size(); ++k) xi[k] += beta * (xj[k] - xi[k]) + cfg.alpha * rng.normal();
    if (!cfg.use_css && cfg.use_gn) {
      const NoiseTensor normalized = gaussian_normalize(NoiseTensor(shape, xi));
      xi.assign(normalized.values().begin(), normalized.values().end());
    }
  };

  for (std::size_t t = 1; t <= cfg.iterations && alive; ++t) {
    if (cfg.firefly_snapshot) {
      const auto snap_pos = pos;
      const auto snap_bright = bright;
      for (std::size_t i = 0; i < n && alive; ++i) {
        bool moved = false;
        for (std::size_t j = 0; j < n; ++j) {
          if (j != i && snap_bright[j] > snap_bright[i]) {
            move(pos[i], snap_pos[j]);
            moved = true;
          }
        }
        if (moved) {
          const auto s = run.evaluate(materialize(pos[i]));
          if (!s) alive = false;
          else bright[i] = *s;
        }
      }
    } else {
      for (std::size_t i = 0; i < n && alive; ++i) {
        for (std::size_t j = 0; j < n && alive; ++j) {
          if (j == i || !(bright[j] > bright[i])) continue;
          move(pos[i], pos[j]);
          const auto s = run.evaluate(materialize(pos[i]));
          if (!s) alive = false;
          else bright[i] = *s;
        }
      }
    }
    const double var = detail::population_variance(bright);
    bool reset = false;
    if (alive && cfg.use_css && cfg.use_ssr && should_reset(bright, cfg.zeta)) {
      space = reset_space(run.best_noise());
      reset = true;
      alive = seed_swarm_from_space();
    }
    run.record(t, var, reset);
  }
  return run.finish();
}

/// Dispatches on cfg.algorithm. Stops after K iterations or once the NFE
/// budget cannot pay for another generation.
template <NoisePipeline P>
SearchTrace run_search(const SearchConfig& cfg, P& pipeline, const TensorShape& shape) {
  switch (cfg.algorithm) {
    case Algorithm::kRandom: return run_random(cfg, pipeline, shape);
    case Algorithm::kZeroOrder: return run_zero_order(cfg, pipeline, shape);
    case Algorithm::kFirefly: return run_firefly(cfg, pipeline, shape);
  }
  throw ConfigError("unknown search algorithm");
}

}  // namespace noisesearch
