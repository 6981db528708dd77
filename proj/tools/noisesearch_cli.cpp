// Command-line front end: single searches, experiment grids, and the two
// search-space diagnostics. Exit codes: 0 success, 2 config error,
// 3 runtime failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "noisesearch/noisesearch.hpp"

namespace ns = noisesearch;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct SearchFlags {
  std::string config;
  std::optional<std::string> algorithm;
  std::optional<std::size_t> candidates;
  std::optional<std::size_t> iterations;
  std::optional<double> lambda;
  std::optional<double> eta;
  std::optional<double> zeta;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> verifier;
  std::optional<std::string> context;
  std::optional<std::uint64_t> nfe_budget;
  std::string out;
  bool no_gn = false;
  bool no_css = false;
  bool no_ssr = false;
  bool timing = false;
};

// Splits a flat config document into pipeline keys and search keys.
std::pair<nlohmann::json, nlohmann::json> split_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ns::ConfigError("config file must be a JSON object");
  nlohmann::json pipeline = nlohmann::json::object(), search = nlohmann::json::object();
  for (const auto& [k, v] : doc.items()) (ns::is_pipeline_key(k) ? pipeline : search)[k] = v;
  return {pipeline, search};
}

int run_search_command(const SearchFlags& f) {
  nlohmann::json doc = nlohmann::json::object();
  fs::path base_dir;
  if (!f.config.empty()) {
    doc = ns::read_json_file(f.config);
    base_dir = fs::path(f.config).parent_path();
  }
  auto [pipeline_doc, search_doc] = split_config(doc);
  if (f.algorithm) search_doc["algorithm"] = *f.algorithm;
  if (f.verifier) pipeline_doc["verifier"] = *f.verifier;
  if (f.context) pipeline_doc["context"] = *f.context;

  ns::SearchConfig cfg = ns::search_config_from_json(search_doc);
  if (f.candidates) cfg.candidates = *f.candidates;
  if (f.iterations) cfg.iterations = *f.iterations;
  if (f.lambda) cfg.lambda = *f.lambda;
  if (f.eta) cfg.eta = *f.eta;
  if (f.zeta) cfg.zeta = *f.zeta;
  if (f.seed) cfg.seed = *f.seed;
  if (f.nfe_budget) cfg.nfe_budget = *f.nfe_budget;
  if (f.no_gn) cfg.use_gn = false;
  if (f.no_css) cfg.use_css = false;
  if (f.no_ssr) cfg.use_ssr = false;
  cfg.validate();

  const ns::PipelineFactory factory(ns::pipeline_spec_from_json(pipeline_doc, {}, base_dir));
  ns::AnyPipeline pipeline = factory.make();
  const ns::SearchTrace trace = ns::run_search(cfg, pipeline, factory.shape());
  const ns::TraceWriteOptions opts{f.timing};
  const nlohmann::json extra{{"pipeline", ns::to_json(factory.spec())}};
  if (f.out.empty()) {
    ns::write_trace(std::cout, trace, opts, extra);
  } else {
    ns::write_trace_file(f.out, trace, opts, extra);
    std::cout << "best_score " << ns::format_double(trace.best_score) << " evals " << trace.total_evals << " nfe "
              << trace.total_nfe << " resets " << trace.reset_count << "\n";
  }
  return 0;
}

int run_experiment_command(const std::string& spec_path, const std::optional<std::string>& out,
                           std::optional<std::size_t> jobs, bool timing) {
  ns::ExperimentSpec spec = ns::load_experiment_spec(spec_path);
  if (out) spec.output_dir = *out;
  if (jobs) spec.jobs = *jobs;
  ns::ExperimentOptions opts;
  opts.trace.include_timing = timing;
  const auto result = ns::run_experiment(spec, opts);
  for (const auto& label : ns::labels_of(spec)) {
    const auto& a = result.report["aggregates"][label];
    std::cout << label << ": n=" << a["n"];
    if (a.contains("median")) std::cout << " median=" << ns::format_double(a["median"].get<double>());
    std::cout << "\n";
  }
  std::cout << "wrote " << spec.output_dir << "\n";
  if (result.failures() > 0) {
    std::cerr << result.failures() << " cell(s) failed; see report.json\n";
    return kExitRuntime;
  }
  return 0;
}

int run_audit_command(const std::string& dir) {
  const auto diffs = ns::audit_experiment(dir);
  if (diffs.empty()) {
    std::cout << "report consistent with traces\n";
    return 0;
  }
  for (const auto& d : diffs) std::cerr << "mismatch: " << d << "\n";
  return kExitRuntime;
}

struct SimilarityFlags {
  std::vector<std::size_t> dims{8, 64, 64};
  std::vector<std::size_t> view{8, 64};
  std::vector<double> lambdas{0.1, 1.0, 2.0};
  std::size_t pairs = 100;
  std::uint64_t seed = 0;
  std::string metric = "entries";
  std::string out;
  std::size_t jobs = 1;
};

int run_similarity_command(const SimilarityFlags& f) {
  if (f.view.size() != 2) throw ns::ConfigError("--view takes channels and side");
  if (f.pairs < 1) throw ns::ConfigError("--pairs must be >= 1");
  for (double l : f.lambdas) {
    if (!(l > 0.0)) throw ns::ConfigError("--lambdas must be positive");
  }
  ns::SimilarityMetric metric;
  if (f.metric == "entries") metric = ns::SimilarityMetric::kAbsoluteEntries;
  else if (f.metric == "cosine") metric = ns::SimilarityMetric::kAbsoluteCosine;
  else throw ns::ConfigError("--metric must be entries or cosine");
  ns::TensorShape shape = [&] {
    try {
      return ns::TensorShape(f.dims, ns::BatchedView{f.view[0], f.view[1]});
    } catch (const ns::Error& e) {
      throw ns::ConfigError(e.what());
    }
  }();
  const auto csv = ns::similarity_csv(ns::run_similarity_diagnostics(shape, f.lambdas, f.pairs, f.seed, metric, f.jobs));
  if (f.out.empty()) std::cout << csv;
  else ns::write_text_file(f.out, csv);
  return 0;
}

struct SpaceFlags {
  std::string config;
  std::vector<double> radii{0.01, 1.0, 2.0, 3.0};
  std::size_t pivots = 10;
  std::size_t candidates = 10;
  std::uint64_t seed = 0;
  std::string out = "space_comparison";
  std::size_t jobs = 1;
  bool normalize = false;
};

int run_space_command(const SpaceFlags& f) {
  nlohmann::json doc = nlohmann::json::object();
  fs::path base_dir;
  if (!f.config.empty()) {
    doc = ns::read_json_file(f.config);
    base_dir = fs::path(f.config).parent_path();
  }
  auto [pipeline_doc, rest] = split_config(doc);
  if (!rest.empty()) throw ns::ConfigError("unknown pipeline key '" + rest.begin().key() + "'");
  const ns::PipelineFactory factory(ns::pipeline_spec_from_json(pipeline_doc, {}, base_dir));
  if (f.pivots < 1 || f.candidates < 1) throw ns::ConfigError("--pivots and --candidates must be >= 1");
  for (double r : f.radii) {
    if (!(r >= 0.0)) throw ns::ConfigError("--radii must be non-negative");
  }
  ns::SpaceComparisonOptions opts{f.radii, f.pivots, f.candidates, f.seed, f.jobs, f.normalize};
  const auto samples = ns::run_space_comparison(factory, opts);
  auto report = ns::summarize_space_samples(samples);
  report["pipeline"] = ns::to_json(factory.spec());
  report["pivots"] = f.pivots;
  report["candidates"] = f.candidates;
  report["seed"] = f.seed;
  report["normalize"] = f.normalize;
  fs::create_directories(f.out);
  ns::write_text_file(fs::path(f.out) / "candidates.csv", ns::space_samples_csv(samples));
  ns::write_text_file(fs::path(f.out) / "report.json", report.dump(2) + "\n");
  for (const auto& r : report["radii"]) {
    std::cout << "eps=" << ns::format_double(r["radius"].get<double>())
              << " vanilla=" << ns::format_double(r["vanilla_mean_best"].get<double>())
              << " compressed=" << ns::format_double(r["compressed_mean_best"].get<double>()) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Verifier-guided inference-time noise search"};
  app.require_subcommand(1);

  SearchFlags sf;
  auto* search = app.add_subcommand("search", "Run one search and write its trace");
  search->add_option("--config", sf.config, "Flat JSON config (search and pipeline keys)");
  search->add_option("--algorithm", sf.algorithm, "random | zero_order | firefly");
  search->add_option("--candidates", sf.candidates, "Candidates per iteration (N)");
  search->add_option("--iterations", sf.iterations, "Iterations (K)");
  search->add_option("--lambda", sf.lambda, "Zero-order radius");
  search->add_option("--eta", sf.eta, "Singular-value perturbation scale");
  search->add_option("--zeta", sf.zeta, "Reset threshold on score variance");
  search->add_option("--seed", sf.seed, "Search seed");
  search->add_option("--verifier", sf.verifier, "synthetic | fk | external:<command>");
  search->add_option("--context", sf.context, "Context string passed to the verifier");
  search->add_option("--nfe-budget", sf.nfe_budget, "Stop once another generation would exceed this NFE");
  search->add_option("--out", sf.out, "Trace file (default: stdout)");
  search->add_flag("--no-gn", sf.no_gn, "Disable Gaussian normalization");
  search->add_flag("--no-css", sf.no_css, "Search the full noise space");
  search->add_flag("--no-ssr", sf.no_ssr, "Disable singular-space reset");
  search->add_flag("--timing", sf.timing, "Record wall-clock times in the trace");

  std::string spec_path;
  std::optional<std::string> exp_out;
  std::optional<std::size_t> exp_jobs;
  bool exp_timing = false;
  auto* experiment = app.add_subcommand("experiment", "Run a (config x seed) grid from a spec file");
  experiment->add_option("spec", spec_path, "Experiment spec (JSON)")->required();
  experiment->add_option("--out", exp_out, "Output directory (overrides the spec)");
  experiment->add_option("--jobs", exp_jobs, "Concurrent cells")->check(CLI::PositiveNumber);
  experiment->add_flag("--timing", exp_timing, "Record wall-clock times in traces");

  std::string audit_dir;
  auto* audit = app.add_subcommand("audit", "Recompute an experiment report from its traces");
  audit->add_option("dir", audit_dir, "Experiment output directory")->required();

  SimilarityFlags simf;
  auto* sim = app.add_subcommand("similarity", "Singular-vector similarity under singular-value perturbation");
  sim->add_option("--dims", simf.dims, "Noise tensor dims");
  sim->add_option("--view", simf.view, "Batched view: channels side");
  sim->add_option("--lambdas", simf.lambdas, "Perturbation scales");
  sim->add_option("--pairs", simf.pairs, "Pairs per lambda");
  sim->add_option("--seed", simf.seed, "Seed");
  sim->add_option("--metric", simf.metric, "entries | cosine");
  sim->add_option("--out", simf.out, "CSV file (default: stdout)");
  sim->add_option("--jobs", simf.jobs, "Worker threads")->check(CLI::PositiveNumber);

  SpaceFlags spf;
  auto* cmp = app.add_subcommand("compare-spaces", "Compare vanilla and compressed candidate spaces");
  cmp->add_option("--config", spf.config, "Flat JSON with pipeline keys");
  cmp->add_option("--radii", spf.radii, "Perturbation radii");
  cmp->add_option("--pivots", spf.pivots, "Pivot noises");
  cmp->add_option("--candidates", spf.candidates, "Candidates per pivot and radius");
  cmp->add_option("--seed", spf.seed, "Seed");
  cmp->add_option("--out", spf.out, "Output directory");
  cmp->add_option("--jobs", spf.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmp->add_flag("--normalize", spf.normalize, "Gaussian-normalize candidates of both spaces");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*search) return run_search_command(sf);
    if (*experiment) return run_experiment_command(spec_path, exp_out, exp_jobs, exp_timing);
    if (*audit) return run_audit_command(audit_dir);
    if (*sim) return run_similarity_command(simf);
    if (*cmp) return run_space_command(spf);
  } catch (const ns::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
