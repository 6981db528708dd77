#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "noisesearch/errors.hpp"
#include "noisesearch/external_verifier.hpp"
#include "noisesearch/noise.hpp"
#include "noisesearch/pipeline.hpp"
#include "noisesearch/search.hpp"
#include "noisesearch/singular_space.hpp"
#include "noisesearch/toy_flow.hpp"
#include "noisesearch/trace_io.hpp"
#include "noisesearch/verifiers.hpp"

namespace noisesearch {

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

/// Verbosity from ITS_LOG (error|warn|info|debug or 0-3); warn when unset.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("ITS_LOG");
    if (!env) return LogLevel::kWarn;
    const std::string v(env);
    if (v == "error" || v == "0") return LogLevel::kError;
    if (v == "info" || v == "2") return LogLevel::kInfo;
    if (v == "debug" || v == "3") return LogLevel::kDebug;
    return LogLevel::kWarn;
  }();
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  static std::mutex mu;
  static constexpr const char* kNames[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(mu);
  std::clog << "[" << kNames[static_cast<int>(level)] << "] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Small utilities

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw ArgumentError("mean of empty list");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// thrown by any task is rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Mixture files

/// {"components": [{"mean": [...], "variance": [...], "weight": w, "label": "a"}, ...]}
inline MixtureModel mixture_from_json(const nlohmann::json& j) {
  try {
    std::vector<MixtureComponent> comps;
    for (const auto& c : j.at("components")) {
      comps.push_back(MixtureComponent{c.at("mean").get<std::vector<double>>(),
                                       c.at("variance").get<std::vector<double>>(), c.value("weight", 1.0),
                                       c.value("label", std::string{})});
    }
    return MixtureModel(std::move(comps));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad mixture document: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("bad mixture document: ") + e.what());
  }
}

inline nlohmann::json to_json(const MixtureModel& m) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : m.components()) {
    comps.push_back({{"mean", c.mean}, {"variance", c.variance}, {"weight", c.weight}, {"label", c.label}});
  }
  return {{"components", comps}};
}

inline MixtureModel load_mixture(const std::filesystem::path& path) { return mixture_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Pipeline settings

/// Everything needed to turn noise into a score. The toy mixture is
/// generated from mixture_seed unless a mixture file is given.
struct PipelineSpec {
  std::optional<std::string> mixture_file;
  std::uint64_t mixture_seed = 7;
  std::vector<std::size_t> dims{4, 16, 16};
  BatchedView view{4, 16};
  FlowSchedule schedule;
  GuidanceConfig guidance{0.7, std::string("a")};
  /// synthetic | fk | external:<shell command>
  std::string verifier = "synthetic";
  std::string context = "a toy prompt";
  ReachableLandscapeOptions landscape;
  double external_timeout_s = 60.0;

  TensorShape shape() const { return TensorShape(dims, view); }

  void validate() const {
    try {
      (void)shape();
      schedule.validate();
      guidance.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (verifier != "synthetic" && verifier != "fk" && !verifier.starts_with("external:")) {
      throw ConfigError("verifier must be synthetic, fk or external:<command>, got '" + verifier + "'");
    }
    if (verifier == "external:") throw ConfigError("external verifier needs a command");
    if (verifier == "fk" && !guidance.condition) throw ConfigError("fk verifier needs a condition");
    if (landscape.bowls == 0) throw ConfigError("landscape_bowls must be >= 1");
    if (!(external_timeout_s > 0.0)) throw ConfigError("external_timeout_s must be > 0");
  }
};

inline bool is_pipeline_key(std::string_view key) {
  static const std::set<std::string, std::less<>> keys = {
      "mixture",  "mixture_seed", "dims",    "view",           "steps",           "sigma_floor",
      "beta",     "condition",    "verifier", "context",       "landscape_bowls", "landscape_height_step",
      "landscape_sharpness", "external_timeout_s"};
  return keys.contains(key);
}

/// Overlays pipeline keys of `j` onto `base`; other keys are ignored.
/// Relative mixture paths are resolved against `base_dir`.
inline PipelineSpec pipeline_spec_from_json(const nlohmann::json& j, PipelineSpec base = {},
                                            const std::filesystem::path& base_dir = {}) {
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "mixture") {
        if (v.is_null()) {
          base.mixture_file.reset();
        } else {
          std::filesystem::path p = v.get<std::string>();
          if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
          base.mixture_file = p.string();
        }
      } else if (key == "mixture_seed") base.mixture_seed = v.get<std::uint64_t>();
      else if (key == "dims") base.dims = v.get<std::vector<std::size_t>>();
      else if (key == "view") {
        const auto view = v.get<std::vector<std::size_t>>();
        if (view.size() != 2) throw ConfigError("view must be [channels, side]");
        base.view = BatchedView{view[0], view[1]};
      } else if (key == "steps") base.schedule.steps = v.get<std::size_t>();
      else if (key == "sigma_floor") base.schedule.sigma_floor = v.get<double>();
      else if (key == "beta") base.guidance.beta = v.get<double>();
      else if (key == "condition") {
        if (v.is_null()) base.guidance.condition.reset();
        else base.guidance.condition = v.get<std::string>();
      } else if (key == "verifier") base.verifier = v.get<std::string>();
      else if (key == "context") base.context = v.get<std::string>();
      else if (key == "landscape_bowls") base.landscape.bowls = v.get<std::size_t>();
      else if (key == "landscape_height_step") base.landscape.height_step = v.get<double>();
      else if (key == "landscape_sharpness") base.landscape.sharpness = v.get<double>();
      else if (key == "external_timeout_s") base.external_timeout_s = v.get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad pipeline setting: ") + e.what());
  }
  return base;
}

inline nlohmann::json to_json(const PipelineSpec& p) {
  nlohmann::json j = {{"mixture", nullptr},
                      {"mixture_seed", p.mixture_seed},
                      {"dims", p.dims},
                      {"view", {p.view.channels, p.view.side}},
                      {"steps", p.schedule.steps},
                      {"sigma_floor", p.schedule.sigma_floor},
                      {"beta", p.guidance.beta},
                      {"condition", nullptr},
                      {"verifier", p.verifier},
                      {"context", p.context},
                      {"landscape_bowls", p.landscape.bowls},
                      {"landscape_height_step", p.landscape.height_step},
                      {"landscape_sharpness", p.landscape.sharpness},
                      {"external_timeout_s", p.external_timeout_s}};
  if (p.mixture_file) j["mixture"] = *p.mixture_file;
  if (p.guidance.condition) j["condition"] = *p.guidance.condition;
  return j;
}

namespace detail {

// Owns an external connection and the pipeline that drives it.
struct ExternalPipeline {
  ExternalPipeline(const MixtureModel& model, const PipelineSpec& spec)
      : verifier(std::make_unique<ExternalVerifier>(endpoint(spec), model.dim())),
        pipeline(model, spec.schedule, spec.guidance, *verifier, spec.context) {}

  static ProcessEndpoint endpoint(const PipelineSpec& spec) {
    auto ep = ProcessEndpoint::shell(spec.verifier.substr(std::string_view("external:").size()));
    ep.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(spec.external_timeout_s * 1000.0));
    return ep;
  }

  double evaluate(const NoiseTensor& x) { return pipeline.evaluate(x); }
  std::size_t steps_per_evaluation() const { return pipeline.steps_per_evaluation(); }
  std::uint64_t nfe() const { return pipeline.nfe(); }

  std::unique_ptr<ExternalVerifier> verifier;
  GenerativePipeline<ExternalVerifier> pipeline;
};

struct SyntheticPipeline {
  SyntheticPipeline(const MixtureModel& model, const PipelineSpec& spec, const SyntheticLandscape& landscape)
      : verifier(landscape), pipeline(model, spec.schedule, spec.guidance, verifier, spec.context) {}

  double evaluate(const NoiseTensor& x) { return pipeline.evaluate(x); }
  std::size_t steps_per_evaluation() const { return pipeline.steps_per_evaluation(); }
  std::uint64_t nfe() const { return pipeline.nfe(); }

  SyntheticVerifier verifier;
  GenerativePipeline<SyntheticVerifier> pipeline;
};

}  // namespace detail

/// Resolved model and landscape for a PipelineSpec. Each call to make()
/// returns an independent pipeline with its own NFE counter (and, for
/// external verifiers, its own process).
class PipelineFactory {
 public:
  explicit PipelineFactory(PipelineSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    model_ = std::make_shared<const MixtureModel>(spec_.mixture_file ? load_mixture(*spec_.mixture_file)
                                                                     : make_toy_mixture(spec_.shape().element_count(),
                                                                                        spec_.mixture_seed));
    if (model_->dim() != spec_.shape().element_count()) {
      throw ConfigError("mixture dimension " + std::to_string(model_->dim()) + " does not match noise shape (" +
                        std::to_string(spec_.shape().element_count()) + " elements)");
    }
    if (spec_.guidance.condition && !model_->has_label(*spec_.guidance.condition)) {
      throw ConfigError("mixture has no component labelled '" + *spec_.guidance.condition + "'");
    }
    if (spec_.verifier == "synthetic") {
      landscape_ = make_reachable_landscape(*model_, spec_.schedule, spec_.guidance, spec_.context, spec_.landscape);
    }
  }

  const PipelineSpec& spec() const noexcept { return spec_; }
  const MixtureModel& model() const noexcept { return *model_; }
  TensorShape shape() const { return spec_.shape(); }
  /// Only set for the synthetic verifier.
  const std::optional<SyntheticLandscape>& landscape() const noexcept { return landscape_; }

  AnyPipeline make() const {
    if (spec_.verifier == "synthetic") {
      return AnyPipeline(std::make_shared<detail::SyntheticPipeline>(*model_, spec_, *landscape_));
    }
    if (spec_.verifier == "fk") {
      return AnyPipeline(std::make_shared<FkPipeline>(*model_, spec_.schedule, spec_.guidance));
    }
    return AnyPipeline(std::make_shared<detail::ExternalPipeline>(*model_, spec_));
  }

 private:
  PipelineSpec spec_;
  std::shared_ptr<const MixtureModel> model_;
  std::optional<SyntheticLandscape> landscape_;
};

// ---------------------------------------------------------------------------
// Experiments

struct LabeledConfig {
  std::string label;
  SearchConfig config;
};

struct ExperimentSpec {
  std::string name = "experiment";
  PipelineSpec pipeline;
  std::vector<std::uint64_t> seeds;
  std::vector<LabeledConfig> configs;
  std::string output_dir = "out";
  std::size_t jobs = 1;
  /// Score levels for the NFE-to-threshold summary.
  std::vector<double> thresholds;

  void validate() const {
    pipeline.validate();
    if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
    if (configs.empty()) throw ConfigError("experiment needs at least one search config");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    std::set<std::string> labels;
    for (const auto& c : configs) {
      if (c.label.empty()) throw ConfigError("config label must not be empty");
      if (c.label.find_first_of("/\\") != std::string::npos) throw ConfigError("config label may not contain slashes");
      if (!labels.insert(c.label).second) throw ConfigError("duplicate config label '" + c.label + "'");
      try {
        c.config.validate();
      } catch (const ConfigError& e) {
        throw ConfigError(c.label + ": " + e.what());
      }
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("duplicate seed in seed list");
    }
  }
};

/// Top level: name, seeds, configs, output_dir, jobs, thresholds, plus any
/// pipeline key. Each config entry is a search config with an optional
/// label; unlabelled entries are named after their algorithm and position.
inline ExperimentSpec experiment_spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  ExperimentSpec spec;
  spec.pipeline = pipeline_spec_from_json(j, {}, base_dir);
  try {
    for (const auto& [key, v] : j.items()) {
      if (is_pipeline_key(key)) continue;
      if (key == "name") spec.name = v.get<std::string>();
      else if (key == "seeds") spec.seeds = v.get<std::vector<std::uint64_t>>();
      else if (key == "output_dir") {
        std::filesystem::path p = v.get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        spec.output_dir = p.string();
      } else if (key == "jobs") spec.jobs = v.get<std::size_t>();
      else if (key == "thresholds") spec.thresholds = v.get<std::vector<double>>();
      else if (key == "configs") {
        if (!v.is_array()) throw ConfigError("configs must be an array");
        for (std::size_t i = 0; i < v.size(); ++i) {
          const auto& c = v[i];
          LabeledConfig lc{c.value("label", std::string{}), search_config_from_json(c)};
          if (lc.label.empty()) lc.label = std::string(to_string(lc.config.algorithm)) + "_" + std::to_string(i);
          spec.configs.push_back(std::move(lc));
        }
      } else {
        throw ConfigError("unknown experiment key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment value: ") + e.what());
  }
  return spec;
}

inline ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  return experiment_spec_from_json(read_json_file(path), path.parent_path());
}

struct CellResult {
  std::string label;
  std::uint64_t seed = 0;
  std::optional<SearchTrace> trace;
  std::string error;
  std::string trace_file;  // relative to the output directory
};

struct ExperimentResult {
  std::vector<CellResult> cells;
  nlohmann::json report;
  std::size_t failures() const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [](const CellResult& c) { return !c.trace; }));
  }
};

inline std::string trace_file_name(const std::string& label, std::uint64_t seed) {
  return "traces/" + label + "__seed" + std::to_string(seed) + ".jsonl";
}

/// First cumulative NFE at which best-so-far reaches `threshold`.
inline std::optional<std::uint64_t> nfe_to_threshold(const SearchTrace& t, double threshold) {
  for (const auto& r : t.records) {
    if (r.best_score >= threshold) return r.nfe;
  }
  return std::nullopt;
}

/// Summary built only from trace contents, so it can be recomputed from the
/// emitted files. Cells are (label, seed, trace) in spec order.
inline nlohmann::json summarize(const std::vector<std::string>& labels, const std::vector<std::uint64_t>& seeds,
                                const std::vector<double>& thresholds, const std::vector<CellResult>& cells) {
  using nlohmann::json;
  std::map<std::string, std::map<std::uint64_t, const SearchTrace*>> by;
  for (const auto& c : cells) {
    if (c.trace) by[c.label][c.seed] = &*c.trace;
  }
  json aggregates = json::object();
  for (const auto& label : labels) {
    std::vector<double> finals, resets;
    json thr = json::array();
    for (const auto& [seed, t] : by[label]) {
      finals.push_back(t->best_score);
      resets.push_back(static_cast<double>(t->reset_count));
    }
    for (double level : thresholds) {
      std::vector<double> hit;
      for (const auto& [seed, t] : by[label]) {
        if (auto n = nfe_to_threshold(*t, level)) hit.push_back(static_cast<double>(*n));
      }
      thr.push_back({{"threshold", level},
                     {"reached", hit.size()},
                     {"median_nfe", hit.empty() ? json(nullptr) : json(median(hit))}});
    }
    json a = {{"n", finals.size()}, {"nfe_to_threshold", thr}};
    if (!finals.empty()) {
      a["median"] = median(finals);
      a["mean"] = mean(finals);
      a["std"] = sample_std(finals);
      a["resets_mean"] = mean(resets);
      a["resets_total"] = static_cast<std::uint64_t>(mean(resets) * static_cast<double>(resets.size()) + 0.5);
    }
    aggregates[label] = a;
  }
  json paired = json::array();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t k = 0; k < labels.size(); ++k) {
      if (i == k) continue;
      std::size_t wins = 0, losses = 0, ties = 0;
      for (auto seed : seeds) {
        const auto a = by[labels[i]].find(seed);
        const auto b = by[labels[k]].find(seed);
        if (a == by[labels[i]].end() || b == by[labels[k]].end()) continue;
        const double sa = a->second->best_score, sb = b->second->best_score;
        if (sa > sb) ++wins;
        else if (sa < sb) ++losses;
        else ++ties;
      }
      const std::size_t n = wins + losses + ties;
      // Ties count half.
      paired.push_back({{"config", labels[i]},
                        {"versus", labels[k]},
                        {"n", n},
                        {"wins", wins},
                        {"losses", losses},
                        {"ties", ties},
                        {"win_rate", n ? (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
                                             static_cast<double>(n)
                                       : 0.0}});
    }
  }
  json cell_list = json::array();
  for (const auto& c : cells) {
    if (!c.trace) continue;
    cell_list.push_back({{"config", c.label},
                         {"seed", c.seed},
                         {"trace", c.trace_file},
                         {"final_best", c.trace->best_score},
                         {"total_nfe", c.trace->total_nfe},
                         {"resets", c.trace->reset_count}});
  }
  return {{"configs", labels}, {"seeds", seeds}, {"thresholds", thresholds},
          {"aggregates", aggregates}, {"paired", paired}, {"cells", cell_list}};
}

inline std::vector<std::string> labels_of(const ExperimentSpec& spec) {
  std::vector<std::string> out;
  for (const auto& c : spec.configs) out.push_back(c.label);
  return out;
}

inline std::string curves_csv(const std::vector<CellResult>& cells) {
  std::string out = "config,seed,nfe,best_score\n";
  for (const auto& c : cells) {
    if (!c.trace) continue;
    for (const auto& r : c.trace->records) {
      out += c.label + "," + std::to_string(c.seed) + "," + std::to_string(r.nfe) + "," + format_double(r.best_score) +
             "\n";
    }
  }
  return out;
}

struct ExperimentOptions {
  TraceWriteOptions trace;
  /// Skip writing files; the result still carries traces and the report.
  bool dry_run = false;
};

/// Runs every (config, seed) cell. Each cell uses the seed value directly
/// as its search seed, so cells that share a seed start from the same noise.
/// Failed cells are listed in the report and do not stop the others.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const ExperimentOptions& opts = {}) {
  namespace fs = std::filesystem;
  spec.validate();
  const PipelineFactory factory(spec.pipeline);
  const fs::path out_dir(spec.output_dir);
  if (!opts.dry_run) {
    std::error_code ec;
    fs::create_directories(out_dir / "traces", ec);
    if (ec) throw Error("cannot create output directory " + out_dir.string() + ": " + ec.message());
  }

  ExperimentResult result;
  for (const auto& c : spec.configs) {
    for (auto seed : spec.seeds) result.cells.push_back(CellResult{c.label, seed, std::nullopt, {}, {}});
  }
  const std::size_t per_config = spec.seeds.size();
  parallel_for(result.cells.size(), spec.jobs, [&](std::size_t i) {
    CellResult& cell = result.cells[i];
    SearchConfig cfg = spec.configs[i / per_config].config;
    cfg.seed = cell.seed;
    try {
      AnyPipeline pipeline = factory.make();
      cell.trace = run_search(cfg, pipeline, factory.shape());
      cell.trace_file = trace_file_name(cell.label, cell.seed);
      if (!opts.dry_run) {
        write_trace_file((out_dir / cell.trace_file).string(), *cell.trace, opts.trace,
                         nlohmann::json{{"label", cell.label}, {"experiment", spec.name}});
      }
      log(LogLevel::kInfo, cell.label + " seed " + std::to_string(cell.seed) + ": best " +
                               format_double(cell.trace->best_score) + " after " +
                               std::to_string(cell.trace->total_nfe) + " NFE");
    } catch (const std::exception& e) {
      cell.trace.reset();
      cell.error = e.what();
      log(LogLevel::kError, cell.label + " seed " + std::to_string(cell.seed) + " failed: " + e.what());
    }
  });

  result.report = summarize(labels_of(spec), spec.seeds, spec.thresholds, result.cells);
  result.report["name"] = spec.name;
  result.report["pipeline"] = to_json(spec.pipeline);
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& c : result.cells) {
    if (!c.trace) failures.push_back({{"config", c.label}, {"seed", c.seed}, {"error", c.error}});
  }
  result.report["failures"] = failures;
  if (!opts.dry_run) {
    write_text_file(out_dir / "curves.csv", curves_csv(result.cells));
    write_text_file(out_dir / "report.json", result.report.dump(2) + "\n");
  }
  return result;
}

/// Recomputes the summary of report.json from the trace files it lists and
/// returns the keys whose recomputed value differs (empty when consistent).
inline std::vector<std::string> audit_experiment(const std::filesystem::path& out_dir) {
  const auto report = read_json_file(out_dir / "report.json");
  std::vector<CellResult> cells;
  for (const auto& c : report.at("cells")) {
    std::ifstream in(out_dir / c.at("trace").get<std::string>());
    if (!in) throw Error("missing trace file " + c.at("trace").get<std::string>());
    CellResult cell{c.at("config").get<std::string>(), c.at("seed").get<std::uint64_t>(), read_trace(in), {},
                    c.at("trace").get<std::string>()};
    cells.push_back(std::move(cell));
  }
  const auto again = summarize(report.at("configs").get<std::vector<std::string>>(),
                               report.at("seeds").get<std::vector<std::uint64_t>>(),
                               report.at("thresholds").get<std::vector<double>>(), cells);
  std::vector<std::string> diffs;
  for (const auto& [key, value] : again.items()) {
    if (!report.contains(key) || report[key] != value) diffs.push_back(key);
  }
  return diffs;
}

// ---------------------------------------------------------------------------
// Singular-vector similarity diagnostics

struct SimilarityRow {
  double lambda = 0.0;
  double mean_similarity = 0.0;
  double std_similarity = 0.0;
  std::size_t pairs = 0;
};

/// For each lambda: source = fresh standard noise, target = its singular
/// values perturbed by lambda * z, reconstructed and decomposed again.
/// Reports the mean and (population) std of the similarity over the pairs.
inline std::vector<SimilarityRow> run_similarity_diagnostics(const TensorShape& shape, const std::vector<double>& lambdas,
                                                             std::size_t pairs, std::uint64_t seed,
                                                             SimilarityMetric metric = SimilarityMetric::kAbsoluteEntries,
                                                             std::size_t jobs = 1) {
  if (pairs < 1) throw ArgumentError("need at least one pair per lambda");
  for (double l : lambdas) {
    if (!(l > 0.0) || !std::isfinite(l)) throw ArgumentError("lambda values must be positive");
  }
  std::vector<SimilarityRow> rows;
  for (std::size_t li = 0; li < lambdas.size(); ++li) {
    std::vector<double> sims(pairs);
    parallel_for(pairs, jobs, [&](std::size_t p) {
      Rng rng(derive_seed(derive_seed(seed, li), p));
      const SingularSpace source = decompose(sample_standard_noise(shape, rng));
      SigmaCandidate sigma = source.sigma_init();
      for (double& s : sigma.values) s += lambdas[li] * rng.normal();
      const SingularSpace target = decompose(reconstruct(source, sigma, false));
      sims[p] = singular_vector_similarity(source, target, metric);
    });
    const auto m = moments(sims);
    rows.push_back(SimilarityRow{lambdas[li], m.mean, m.stddev(), pairs});
  }
  return rows;
}

inline std::string similarity_csv(const std::vector<SimilarityRow>& rows) {
  std::string out = "lambda,mean_similarity,std_similarity,pairs\n";
  for (const auto& r : rows) {
    out += format_double(r.lambda) + "," + format_double(r.mean_similarity) + "," + format_double(r.std_similarity) +
           "," + std::to_string(r.pairs) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Search-space comparison

struct SpaceSample {
  double radius = 0.0;
  std::string space;  // "vanilla" | "compressed"
  std::size_t pivot = 0;
  std::size_t candidate = 0;
  double score = 0.0;
};

struct SpaceComparisonOptions {
  std::vector<double> radii{0.01, 1.0, 2.0, 3.0};
  std::size_t pivots = 10;
  std::size_t candidates = 10;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  /// Apply Gaussian normalization to both candidate kinds.
  bool normalize = false;
};

/// Mean over pivots of the best candidate score, per (radius, space).
inline nlohmann::json summarize_space_samples(const std::vector<SpaceSample>& samples) {
  std::map<std::pair<double, std::string>, std::map<std::size_t, double>> best;
  std::vector<double> radii;
  for (const auto& s : samples) {
    auto& slot = best[{s.radius, s.space}];
    auto it = slot.find(s.pivot);
    if (it == slot.end()) slot[s.pivot] = s.score;
    else it->second = std::max(it->second, s.score);
    if (std::find(radii.begin(), radii.end(), s.radius) == radii.end()) radii.push_back(s.radius);
  }
  nlohmann::json rows = nlohmann::json::array();
  std::size_t wins = 0;
  for (double r : radii) {
    std::vector<double> v, c;
    for (const auto& [p, s] : best[{r, "vanilla"}]) v.push_back(s);
    for (const auto& [p, s] : best[{r, "compressed"}]) c.push_back(s);
    if (v.empty() || c.empty()) throw ArgumentError("space comparison needs both spaces at every radius");
    const double mv = mean(v), mc = mean(c);
    const bool ge = mc >= mv;
    wins += ge;
    rows.push_back({{"radius", r}, {"vanilla_mean_best", mv}, {"compressed_mean_best", mc}, {"compressed_ge_vanilla", ge}});
  }
  return {{"radii", rows}, {"compressed_ge_count", wins}, {"radius_count", radii.size()}};
}

/// Vanilla candidates are x + eps z; compressed candidates are
/// reconstruct(sigma + eps z) in the pivot's own singular space. With
/// opts.normalize both are Gaussian-normalized before generation.
inline std::vector<SpaceSample> run_space_comparison(const PipelineFactory& factory, const SpaceComparisonOptions& opts) {
  if (opts.pivots < 1 || opts.candidates < 1) throw ArgumentError("need at least one pivot and one candidate");
  for (double r : opts.radii) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ArgumentError("radii must be non-negative");
  }
  const TensorShape shape = factory.shape();
  std::vector<std::vector<SpaceSample>> per_pivot(opts.pivots);
  parallel_for(opts.pivots, opts.jobs, [&](std::size_t p) {
    AnyPipeline pipeline = factory.make();
    Rng pivot_rng(derive_seed(opts.seed, p));
    const NoiseTensor pivot = sample_standard_noise(shape, pivot_rng);
    const SingularSpace space = decompose(pivot);
    for (std::size_t ri = 0; ri < opts.radii.size(); ++ri) {
      const double eps = opts.radii[ri];
      Rng rng(derive_seed(derive_seed(opts.seed, p), ri + 1));
      for (std::size_t k = 0; k < opts.candidates; ++k) {
        std::vector<double> v(pivot.values().begin(), pivot.values().end());
        for (double& x : v) x += eps * rng.normal();
        NoiseTensor cand(shape, std::move(v));
        const double sv = pipeline.evaluate(opts.normalize ? gaussian_normalize(cand) : cand);
        per_pivot[p].push_back(SpaceSample{eps, "vanilla", p, k, sv});
      }
      for (std::size_t k = 0; k < opts.candidates; ++k) {
        SigmaCandidate sigma = space.sigma_init();
        for (double& s : sigma.values) s += eps * rng.normal();
        const double sc = pipeline.evaluate(reconstruct(space, sigma, opts.normalize));
        per_pivot[p].push_back(SpaceSample{eps, "compressed", p, k, sc});
      }
    }
  });
  std::vector<SpaceSample> out;
  for (auto& v : per_pivot) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::string space_samples_csv(const std::vector<SpaceSample>& samples) {
  std::string out = "radius,space,pivot,candidate,score\n";
  for (const auto& s : samples) {
    out += format_double(s.radius) + "," + s.space + "," + std::to_string(s.pivot) + "," + std::to_string(s.candidate) +
           "," + format_double(s.score) + "\n";
  }
  return out;
}

inline std::vector<SpaceSample> parse_space_samples_csv(std::istream& in) {
  std::vector<SpaceSample> out;
  std::string line;
  if (!std::getline(in, line)) throw Error("empty space-comparison CSV");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw Error("bad space-comparison CSV row: " + line);
    SpaceSample s;
    std::from_chars(f[0].data(), f[0].data() + f[0].size(), s.radius);
    s.space = f[1];
    s.pivot = std::stoul(f[2]);
    s.candidate = std::stoul(f[3]);
    std::from_chars(f[4].data(), f[4].data() + f[4].size(), s.score);
    out.push_back(s);
  }
  return out;
}

}  // namespace noisesearch
