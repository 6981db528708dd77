#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "noisesearch/errors.hpp"
#include "noisesearch/search.hpp"

namespace noisesearch {

inline nlohmann::json to_json(const SearchConfig& c) {
  nlohmann::json j = {
      {"algorithm", std::string(to_string(c.algorithm))},
      {"candidates", c.candidates},
      {"iterations", c.iterations},
      {"lambda", c.lambda},
      {"eta", c.eta},
      {"zeta", c.zeta},
      {"beta0", c.beta0},
      {"gamma", c.gamma},
      {"alpha", c.alpha},
      {"gn", c.use_gn},
      {"css", c.use_css},
      {"ssr", c.use_ssr},
      {"elitism", c.elitism},
      {"reset_on_new_best", c.reset_on_new_best},
      {"reset_on_low_variance", c.reset_on_low_variance},
      {"variance_window", c.variance_window},
      {"firefly_snapshot", c.firefly_snapshot},
      {"seed", c.seed},
      {"nfe_budget", nullptr},
  };
  if (c.nfe_budget) j["nfe_budget"] = *c.nfe_budget;
  return j;
}

/// Overlays keys present in `j` onto `base`. Unknown keys are a config error.
inline SearchConfig search_config_from_json(const nlohmann::json& j, SearchConfig base) {
  if (!j.is_object()) throw ConfigError("search config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "algorithm") base.algorithm = parse_algorithm(value.get<std::string>());
      else if (key == "candidates") base.candidates = value.get<std::size_t>();
      else if (key == "iterations") base.iterations = value.get<std::size_t>();
      else if (key == "lambda") base.lambda = value.get<double>();
      else if (key == "eta") base.eta = value.get<double>();
      else if (key == "zeta") base.zeta = value.get<double>();
      else if (key == "beta0") base.beta0 = value.get<double>();
      else if (key == "gamma") base.gamma = value.get<double>();
      else if (key == "alpha") base.alpha = value.get<double>();
      else if (key == "gn") base.use_gn = value.get<bool>();
      else if (key == "css") base.use_css = value.get<bool>();
      else if (key == "ssr") base.use_ssr = value.get<bool>();
      else if (key == "elitism") base.elitism = value.get<bool>();
      else if (key == "reset_on_new_best") base.reset_on_new_best = value.get<bool>();
      else if (key == "reset_on_low_variance") base.reset_on_low_variance = value.get<bool>();
      else if (key == "variance_window") base.variance_window = value.get<std::size_t>();
      else if (key == "firefly_snapshot") base.firefly_snapshot = value.get<bool>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "nfe_budget") {
        if (value.is_null()) base.nfe_budget.reset();
        else base.nfe_budget = value.get<std::uint64_t>();
      } else if (key == "label") {
        continue;
      } else {
        throw ConfigError("unknown search config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad search config value: ") + e.what());
  }
  return base;
}

/// Reads the algorithm first so per-algorithm defaults apply to unset keys.
inline SearchConfig search_config_from_json(const nlohmann::json& j) {
  Algorithm algorithm = Algorithm::kZeroOrder;
  if (j.is_object() && j.contains("algorithm")) {
    if (!j["algorithm"].is_string()) throw ConfigError("algorithm must be a string");
    algorithm = parse_algorithm(j["algorithm"].get<std::string>());
  }
  return search_config_from_json(j, SearchConfig::defaults(algorithm));
}

inline nlohmann::json to_json(const TraceRecord& r, bool include_timing) {
  return {{"iter", r.iter},
          {"best_score", r.best_score},
          {"nfe", r.nfe},
          {"evals", r.evals},
          {"score_var", r.score_var},
          {"reset", r.reset},
          {"elapsed_ms", include_timing ? r.elapsed_ms : 0.0},
          {"cand_std", r.cand_std}};
}

inline TraceRecord trace_record_from_json(const nlohmann::json& j) {
  TraceRecord r;
  r.iter = j.at("iter").get<std::size_t>();
  r.best_score = j.at("best_score").get<double>();
  r.nfe = j.at("nfe").get<std::uint64_t>();
  r.evals = j.value("evals", std::uint64_t{0});
  r.score_var = j.at("score_var").get<double>();
  r.reset = j.at("reset").get<bool>();
  r.elapsed_ms = j.value("elapsed_ms", 0.0);
  r.cand_std = j.value("cand_std", 0.0);
  return r;
}

inline nlohmann::json to_json(const NoiseTensor& x) {
  const auto& v = x.shape().view();
  return {{"dims", x.shape().dims()},
          {"view", {v.channels, v.side}},
          {"values", std::vector<double>(x.values().begin(), x.values().end())}};
}

inline NoiseTensor noise_from_json(const nlohmann::json& j) {
  const auto view = j.at("view").get<std::vector<std::size_t>>();
  if (view.size() != 2) throw ShapeError("noise view must be [channels, side]");
  TensorShape shape(j.at("dims").get<std::vector<std::size_t>>(), BatchedView{view[0], view[1]});
  return NoiseTensor(shape, j.at("values").get<std::vector<double>>());
}

struct TraceWriteOptions {
  /// Wall-clock timings make trace files differ run to run; off by default
  /// (elapsed_ms is written as 0).
  bool include_timing = false;
};

/// JSON lines: {"header": ...}, one object per record, then {"final": ...}.
inline void write_trace(std::ostream& out, const SearchTrace& trace, const TraceWriteOptions& opts = {},
                        const nlohmann::json& extra_header = nlohmann::json::object()) {
  nlohmann::json header = {{"config", to_json(trace.config)}, {"seed", trace.config.seed}};
  for (const auto& [k, v] : extra_header.items()) header[k] = v;
  out << nlohmann::json{{"header", header}}.dump() << '\n';
  for (const auto& r : trace.records) out << to_json(r, opts.include_timing).dump() << '\n';
  nlohmann::json fin = {{"best_score", trace.best_score},
                        {"total_evals", trace.total_evals},
                        {"total_nfe", trace.total_nfe},
                        {"reset_count", trace.reset_count},
                        {"budget_exhausted", trace.budget_exhausted},
                        {"best_noise", nullptr}};
  if (trace.best_noise) fin["best_noise"] = to_json(*trace.best_noise);
  out << nlohmann::json{{"final", fin}}.dump() << '\n';
}

inline void write_trace_file(const std::string& path, const SearchTrace& trace, const TraceWriteOptions& opts = {},
                             const nlohmann::json& extra_header = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open trace file for writing: " + path);
  write_trace(out, trace, opts, extra_header);
  if (!out) throw Error("failed writing trace file: " + path);
}

/// Parses a trace written by write_trace. The best noise is restored when present.
inline SearchTrace read_trace(std::istream& in) {
  SearchTrace trace;
  std::string line;
  bool saw_header = false;
  while (std::getline(in, line)) try {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.contains("header")) {
      trace.config = search_config_from_json(j["header"].at("config"));
      saw_header = true;
    } else if (j.contains("final")) {
      const auto& f = j["final"];
      trace.best_score = f.at("best_score").get<double>();
      trace.total_evals = f.at("total_evals").get<std::uint64_t>();
      trace.total_nfe = f.at("total_nfe").get<std::uint64_t>();
      trace.reset_count = f.at("reset_count").get<std::size_t>();
      trace.budget_exhausted = f.value("budget_exhausted", false);
      if (!f.at("best_noise").is_null()) trace.best_noise = noise_from_json(f["best_noise"]);
    } else {
      trace.records.push_back(trace_record_from_json(j));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed trace line: ") + e.what());
  }
  if (!saw_header) throw Error("trace has no header line");
  return trace;
}

}  // namespace noisesearch
