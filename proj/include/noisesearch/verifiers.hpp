#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "noisesearch/errors.hpp"
#include "noisesearch/noise.hpp"
#include "noisesearch/rng.hpp"
#include "noisesearch/toy_flow.hpp"

namespace noisesearch {

struct ScoreRequest {
  std::vector<double> sample;
  std::string context;
  std::uint64_t request_id = 0;
};

/// Higher is better.
struct VerifierScore {
  double value = 0.0;
  std::string verifier_name;
};

template <class V>
concept Verifier = requires(V& v, const ScoreRequest& req) {
  { v.score(req) } -> std::convertible_to<VerifierScore>;
};

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ArgumentError("dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct Bowl {
  std::vector<double> center;
  double height = 0.0;
};

/// Synthetic preference landscape over generated samples:
///   score(y) = max_k ( height_k - sharpness * |y - center_k|^2 ).
/// A single bowl with height 0 is the canonical negative squared distance.
struct SyntheticLandscape {
  std::vector<Bowl> bowls;
  double sharpness = 1.0;

  static SyntheticLandscape single(std::vector<double> target, double sharpness) {
    return SyntheticLandscape{{Bowl{std::move(target), 0.0}}, sharpness};
  }

  double evaluate(std::span<const double> sample) const {
    if (bowls.empty()) throw ArgumentError("landscape has no bowls");
    if (!(sharpness > 0.0)) throw ArgumentError("landscape sharpness must be positive");
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& b : bowls) best = std::max(best, b.height - sharpness * squared_distance(sample, b.center));
    return best;
  }
};

/// -sharpness * |sample - target|^2
inline VerifierScore score_synthetic(const SyntheticLandscape& landscape, const ScoreRequest& req) {
  return VerifierScore{landscape.evaluate(req.sample), "synthetic"};
}

class SyntheticVerifier {
 public:
  explicit SyntheticVerifier(SyntheticLandscape landscape) : landscape_(std::move(landscape)) {}

  VerifierScore score(const ScoreRequest& req) const { return score_synthetic(landscape_, req); }
  const SyntheticLandscape& landscape() const noexcept { return landscape_; }

 private:
  SyntheticLandscape landscape_;
};

struct ReachableLandscapeOptions {
  std::size_t bowls = 3;
  /// Height gap between consecutive bowls; bowl 0 is the global optimum.
  double height_step = 0.05;
  /// Defaults to 1 / dim when unset (<= 0), keeping scores O(1).
  double sharpness = 0.0;
};

/// Multi-modal landscape whose bowl centers are generated samples of seeded
/// noises, so every optimum is reachable by the sampler. The seed is a hash
/// of the context string, so distinct prompts give distinct landscapes.
inline SyntheticLandscape make_reachable_landscape(const MixtureModel& model, const FlowSchedule& schedule,
                                                   const GuidanceConfig& guidance, std::string_view context,
                                                   const ReachableLandscapeOptions& opts = {}) {
  if (opts.bowls == 0) throw ArgumentError("landscape needs at least one bowl");
  const std::uint64_t base = fnv1a(context);
  SyntheticLandscape out;
  out.sharpness = opts.sharpness > 0.0 ? opts.sharpness : 1.0 / static_cast<double>(model.dim());
  for (std::size_t k = 0; k < opts.bowls; ++k) {
    Rng rng(derive_seed(base, k));
    std::vector<double> noise(model.dim());
    for (double& v : noise) v = rng.normal();
    out.bowls.push_back(
        Bowl{integrate(model, schedule, guidance, noise).sample, -opts.height_step * static_cast<double>(k)});
  }
  return out;
}

/// Self-supervised verifier: negated (by default) FK log-weight of the
/// trajectory that starts at the given noise.
class FkVerifier {
 public:
  FkVerifier(const MixtureModel& model, FlowSchedule schedule, GuidanceConfig guidance, bool negate = true)
      : model_(&model), schedule_(schedule), guidance_(std::move(guidance)), negate_(negate) {
    if (!guidance_.condition) throw ArgumentError("FK verifier needs a condition label");
  }

  VerifierScore score_noise(std::span<const double> x_init, NfeCounter* nfe = nullptr) const {
    const double w = fk_log_weight(*model_, schedule_, guidance_, x_init, nfe);
    return VerifierScore{negate_ ? 0.0 - w : w, "fk"};
  }

 private:
  const MixtureModel* model_;
  FlowSchedule schedule_;
  GuidanceConfig guidance_;
  bool negate_;
};

inline VerifierScore score_fk(const MixtureModel& model, const FlowSchedule& schedule, const GuidanceConfig& g,
                              const NoiseTensor& x_init) {
  return FkVerifier(model, schedule, g).score_noise(x_init.values());
}

}  // namespace noisesearch
