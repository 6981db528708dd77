#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = NOISESEARCH_CLI_PATH;
const std::string kMock = MOCK_VERIFIER_PATH;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("noisesearch_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Runs the CLI with stdout captured to a file; returns the exit code.
int run(const std::string& args, const fs::path& stdout_file = "/dev/null") {
  const std::string cmd = "'" + kCli + "' " + args + " > '" + stdout_file.string() + "' 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const std::string kSmall = "\"dims\":[2,8,8],\"view\":[2,8],\"steps\":4";

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("search --no-such-flag"), 2);
  EXPECT_EQ(run("search --candidates many"), 2);
  EXPECT_EQ(run("experiment"), 2);
}

TEST(Cli, SearchWritesDeterministicTrace) {
  const auto dir = fresh_dir("search");
  write(dir / "cfg.json", "{" + kSmall + ",\"algorithm\":\"firefly\",\"candidates\":4,\"iterations\":3}");
  const std::string base = "search --config '" + (dir / "cfg.json").string() + "' --seed 5 --out ";
  ASSERT_EQ(run(base + "'" + (dir / "a.jsonl").string() + "'"), 0);
  ASSERT_EQ(run(base + "'" + (dir / "b.jsonl").string() + "'"), 0);
  const std::string a = slurp(dir / "a.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b.jsonl"));

  std::istringstream lines(a);
  std::string first;
  std::getline(lines, first);
  const auto header = json::parse(first)["header"];
  EXPECT_EQ(header["config"]["algorithm"], "firefly");
  EXPECT_EQ(header["config"]["candidates"], 4);
  EXPECT_EQ(header["seed"], 5);
  EXPECT_EQ(header["pipeline"]["steps"], 4);
}

TEST(Cli, FlagsOverrideConfigFile) {
  const auto dir = fresh_dir("override");
  write(dir / "cfg.json", "{" + kSmall + ",\"algorithm\":\"zero_order\",\"iterations\":9,\"lambda\":1.0}");
  ASSERT_EQ(run("search --config '" + (dir / "cfg.json").string() +
                    "' --iterations 2 --lambda 0.5 --no-ssr --nfe-budget 40",
                dir / "trace.jsonl"),
            0);
  std::string first;
  std::ifstream in(dir / "trace.jsonl");
  std::getline(in, first);
  const auto cfg = json::parse(first)["header"]["config"];
  EXPECT_EQ(cfg["iterations"], 2);
  EXPECT_EQ(cfg["lambda"], 0.5);
  EXPECT_EQ(cfg["ssr"], false);
  EXPECT_EQ(cfg["nfe_budget"], 40);
}

TEST(Cli, ConfigErrorsExitTwo) {
  const auto dir = fresh_dir("config_errors");
  write(dir / "unknown.json", "{\"lamda\":2.0}");
  EXPECT_EQ(run("search --config '" + (dir / "unknown.json").string() + "'"), 2);
  write(dir / "broken.json", "{not json");
  EXPECT_EQ(run("search --config '" + (dir / "broken.json").string() + "'"), 2);
  EXPECT_EQ(run("search --config '" + (dir / "missing.json").string() + "'"), 2);
  EXPECT_EQ(run("search --algorithm simplex"), 2);
  EXPECT_EQ(run("search --verifier oracle"), 2);
  EXPECT_EQ(run("search --zeta 0"), 2);
}

TEST(Cli, ExternalVerifier) {
  const auto dir = fresh_dir("external");
  write(dir / "cfg.json", "{" + kSmall + "}");
  const std::string cfg = "search --config '" + (dir / "cfg.json").string() + "' --iterations 2 ";
  EXPECT_EQ(run(cfg + "--verifier 'external:" + kMock + " echo' --out '" + (dir / "t.jsonl").string() + "'"), 0);
  EXPECT_EQ(run(cfg + "--verifier 'external:" + kMock + " die-after 3'"), 3);
  EXPECT_EQ(run(cfg + "--verifier 'external:" + kMock + " garbage'"), 3);
}

TEST(Cli, ExperimentAndAudit) {
  const auto dir = fresh_dir("experiment");
  const json spec = json::parse("{" + kSmall + R"(,
    "name": "cli", "seeds": [0, 1], "output_dir": "out",
    "configs": [{"label": "zo", "algorithm": "zero_order", "iterations": 3},
                {"label": "ff", "algorithm": "firefly", "candidates": 3, "iterations": 2}]})");
  write(dir / "spec.json", spec.dump());
  ASSERT_EQ(run("experiment '" + (dir / "spec.json").string() + "' --jobs 2"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "out" / "curves.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "traces" / "ff__seed1.jsonl"));
  EXPECT_EQ(run("audit '" + (dir / "out").string() + "'"), 0);

  auto report = json::parse(slurp(dir / "out" / "report.json"));
  report["paired"][0]["wins"] = 99;
  write(dir / "out" / "report.json", report.dump());
  EXPECT_EQ(run("audit '" + (dir / "out").string() + "'"), 3);

  json failing = spec;
  failing["verifier"] = "external:exit 1";
  write(dir / "failing.json", failing.dump());
  EXPECT_EQ(run("experiment '" + (dir / "failing.json").string() + "' --out '" + (dir / "fail_out").string() + "'"), 3);
  EXPECT_TRUE(fs::exists(dir / "fail_out" / "report.json"));

  json bad = spec;
  bad["seeds"] = json::array();
  write(dir / "bad.json", bad.dump());
  EXPECT_EQ(run("experiment '" + (dir / "bad.json").string() + "'"), 2);
}

TEST(Cli, Similarity) {
  const auto dir = fresh_dir("similarity");
  ASSERT_EQ(run("similarity --dims 2 8 8 --view 2 8 --lambdas 0.1 2 --pairs 4 --out '" + (dir / "s.csv").string() + "'"),
            0);
  std::istringstream csv(slurp(dir / "s.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "lambda,mean_similarity,std_similarity,pairs");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2u);
  EXPECT_EQ(run("similarity --lambdas -1"), 2);
  EXPECT_EQ(run("similarity --dims 2 8 8 --view 2 7"), 2);
}

TEST(Cli, CompareSpaces) {
  const auto dir = fresh_dir("spaces");
  write(dir / "cfg.json", "{" + kSmall + "}");
  ASSERT_EQ(run("compare-spaces --config '" + (dir / "cfg.json").string() + "' --pivots 2 --candidates 2 --out '" +
                (dir / "out").string() + "'"),
            0);
  const auto report = json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report["radius_count"], 4);
  EXPECT_TRUE(fs::exists(dir / "out" / "candidates.csv"));
  write(dir / "search_keys.json", "{\"lambda\":1}");
  EXPECT_EQ(run("compare-spaces --config '" + (dir / "search_keys.json").string() + "'"), 2);
}
