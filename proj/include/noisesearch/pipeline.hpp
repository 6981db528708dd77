#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>

#include "noisesearch/errors.hpp"
#include "noisesearch/noise.hpp"
#include "noisesearch/toy_flow.hpp"
#include "noisesearch/verifiers.hpp"

namespace noisesearch {

/// Noise in, score out. Every evaluate() call is one generation costing
/// steps_per_evaluation() NFE, reflected in nfe().
template <class P>
concept NoisePipeline = requires(P& p, const NoiseTensor& x) {
  { p.evaluate(x) } -> std::convertible_to<double>;
  { p.steps_per_evaluation() } -> std::convertible_to<std::size_t>;
  { p.nfe() } -> std::convertible_to<std::uint64_t>;
};

/// Toy-flow sampler followed by a sample-space verifier.
template <Verifier V>
class GenerativePipeline {
 public:
  GenerativePipeline(const MixtureModel& model, FlowSchedule schedule, GuidanceConfig guidance, V& verifier,
                     std::string context = {})
      : model_(&model),
        schedule_(schedule),
        guidance_(std::move(guidance)),
        verifier_(&verifier),
        context_(std::move(context)) {
    schedule_.validate();
    guidance_.validate();
  }

  std::vector<double> generate(const NoiseTensor& x) { return sample(*model_, schedule_, guidance_, x.values(), nfe_); }

  double evaluate(const NoiseTensor& x) {
    ScoreRequest req{generate(x), context_, next_id_++};
    return verifier_->score(req).value;
  }

  std::size_t steps_per_evaluation() const noexcept { return schedule_.steps; }
  std::uint64_t nfe() const noexcept { return nfe_.value(); }

 private:
  const MixtureModel* model_;
  FlowSchedule schedule_;
  GuidanceConfig guidance_;
  V* verifier_;
  std::string context_;
  NfeCounter nfe_;
  std::uint64_t next_id_ = 0;
};

/// Scores noise with the FK self-supervised verifier. The weight comes from
/// the same trajectory a generation would run, so it costs the same NFE.
class FkPipeline {
 public:
  FkPipeline(const MixtureModel& model, FlowSchedule schedule, GuidanceConfig guidance, bool negate = true)
      : verifier_(model, schedule, guidance, negate), steps_(schedule.steps) {}

  double evaluate(const NoiseTensor& x) { return verifier_.score_noise(x.values(), &nfe_).value; }
  std::size_t steps_per_evaluation() const noexcept { return steps_; }
  std::uint64_t nfe() const noexcept { return nfe_.value(); }

 private:
  FkVerifier verifier_;
  std::size_t steps_;
  NfeCounter nfe_;
};

/// Scores noise with a plain function; each call is billed `steps` NFE.
class FunctionPipeline {
 public:
  explicit FunctionPipeline(std::function<double(const NoiseTensor&)> f, std::size_t steps = 1)
      : f_(std::move(f)), steps_(steps) {
    if (!f_) throw ArgumentError("function pipeline needs a callable");
    if (steps_ < 1) throw ArgumentError("steps per evaluation must be >= 1");
  }

  double evaluate(const NoiseTensor& x) {
    nfe_ += steps_;
    return f_(x);
  }
  std::size_t steps_per_evaluation() const noexcept { return steps_; }
  std::uint64_t nfe() const noexcept { return nfe_; }

 private:
  std::function<double(const NoiseTensor&)> f_;
  std::size_t steps_;
  std::uint64_t nfe_ = 0;
};

/// Type-erased owning pipeline, for callers that pick the verifier at runtime.
class AnyPipeline {
 public:
  template <NoisePipeline P>
  explicit AnyPipeline(std::shared_ptr<P> impl)
      : evaluate_([impl](const NoiseTensor& x) { return impl->evaluate(x); }),
        steps_([impl] { return impl->steps_per_evaluation(); }),
        nfe_([impl] { return impl->nfe(); }),
        keep_alive_(std::move(impl)) {}

  double evaluate(const NoiseTensor& x) { return evaluate_(x); }
  std::size_t steps_per_evaluation() const { return steps_(); }
  std::uint64_t nfe() const { return nfe_(); }

 private:
  std::function<double(const NoiseTensor&)> evaluate_;
  std::function<std::size_t()> steps_;
  std::function<std::uint64_t()> nfe_;
  std::shared_ptr<void> keep_alive_;
};

}  // namespace noisesearch
