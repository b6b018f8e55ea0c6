#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "ssrgnet_cli_tests"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    ASSERT_EQ(run("synth --count 3 --length 24 --seed 4 --out syn").code, 0);
    ASSERT_EQ(run("ingest --npz syn/netsurf.npz --out ing").code, 0);
    ASSERT_EQ(run("coords --store ing --pdb-dir syn/pdb --out crd").code, 0);
    ASSERT_EQ(run("graphs --store crd --out g").code, 0);
  }

  static void TearDownTestSuite() { fs::remove_all(root()); }

  static Result run(const std::string& args) {
    const fs::path err = root() / "stderr.txt";
    const std::string cmd = "cd \"" + root().string() + "\" && \"" SSRGNET_CLI "\" " + args + " > /dev/null 2> \"" +
                            err.string() + "\"";
    const int status = std::system(cmd.c_str());
    std::ifstream in(err);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
  }

  static json read_json(const fs::path& rel) {
    std::ifstream in(root() / rel);
    return json::parse(in);
  }

  static void expect_error(const Result& r, int code, const std::string& category) {
    EXPECT_EQ(r.code, code) << r.err;
    const json j = json::parse(r.err.substr(0, r.err.find('\n')));
    EXPECT_EQ(j["error"]["exit_code"], code);
    EXPECT_EQ(j["error"]["category"], category);
    EXPECT_FALSE(j["error"]["message"].get<std::string>().empty());
  }

  static constexpr const char* kSmall = " --d-in 8 --d-g 8 --hidden 8 --heads 2 --epochs 3";
};

TEST_F(Cli, PipelineProducesArtifacts) {
  const json cache = read_json("g/cache_manifest.json");
  EXPECT_EQ(cache["graphs"].size(), 3u);
  for (const auto& e : cache["graphs"]) EXPECT_TRUE(fs::exists(root() / "g" / e["file"].get<std::string>()));
  EXPECT_TRUE(fs::exists(root() / "crd/coords_report.json"));

  ASSERT_EQ(run(std::string("train --store crd --graphs g --out tr") + kSmall).code, 0);
  const json summary = read_json("tr/train_summary.json");
  EXPECT_TRUE(summary.contains("stop_reason"));
  EXPECT_TRUE(fs::exists(root() / "tr/checkpoint/manifest.json"));
  std::ifstream log(root() / "tr/train_log.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(log, line)) ++n;
  EXPECT_EQ(n, 3u);

  ASSERT_EQ(run("evaluate --checkpoint tr/checkpoint --store crd --graphs g --dataset toy --out ev").code, 0);
  const json m = read_json("ev/metrics.json");
  EXPECT_EQ(m["dataset"], "toy");
  EXPECT_EQ(m["class_order"], "HEC");
  EXPECT_GE(m["q_accuracy"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(root() / "ev/confusion.csv"));
  EXPECT_TRUE(fs::exists(root() / "ev/predictions.jsonl"));
  const json manifest = read_json("ev/run_manifest.json");
  EXPECT_EQ(manifest["command"], "evaluate");
}

TEST_F(Cli, TrainingIsReproducible) {
  ASSERT_EQ(run(std::string("train --store crd --graphs g --out ra") + kSmall).code, 0);
  ASSERT_EQ(run(std::string("train --store crd --graphs g --out rb") + kSmall).code, 0);
  for (const auto& e : fs::recursive_directory_iterator(root() / "ra/checkpoint")) {
    if (!e.is_regular_file()) continue;
    const fs::path other = root() / "rb/checkpoint" / fs::relative(e.path(), root() / "ra/checkpoint");
    std::ifstream a(e.path(), std::ios::binary), b(other, std::ios::binary);
    const std::string sa{std::istreambuf_iterator<char>(a), {}}, sb{std::istreambuf_iterator<char>(b), {}};
    EXPECT_EQ(sa, sb) << e.path();
  }
}

TEST_F(Cli, GraphConfigMismatchExitsFour) {
  expect_error(run(std::string("train --store crd --graphs g --k 5 --out bad") + kSmall), 4, "config_hash_mismatch");
}

TEST_F(Cli, UsageErrorsExitTwo) {
  expect_error(run("graphs --store crd --bogus 1 --out x"), 2, "usage");
  expect_error(run("frobnicate"), 2, "usage");
  expect_error(run("train --graphs g --out x"), 2, "usage");
  expect_error(run("train --store crd --preset nope --out x"), 2, "usage");
}

TEST_F(Cli, MissingInputsExitThree) {
  expect_error(run("ingest --npz absent.npz --out x"), 3, "missing_input");
  expect_error(run("evaluate --checkpoint absent --store crd --out x"), 3, "missing_input");
  expect_error(run("graphs --store absent --out x"), 3, "missing_input");
}

TEST_F(Cli, ConfigFileAndFlagPrecedence) {
  {
    std::ofstream(root() / "cfg.json") << R"({"k": 5, "epochs": 2})";
  }
  // The file asks for k=5, which the cache was not built with.
  expect_error(run(std::string("train --store crd --graphs g --config cfg.json --out c1") + kSmall), 4,
               "config_hash_mismatch");
  // A flag overrides the file.
  ASSERT_EQ(run("train --store crd --graphs g --config cfg.json --k 10 --d-in 8 --d-g 8 --hidden 8 --heads 2 --out c2")
                .code,
            0);
  const json cfg = read_json("c2/train_config.json");
  EXPECT_EQ(cfg["max_epochs"], 2);
  {
    std::ofstream(root() / "broken.json") << "{";
  }
  expect_error(run("train --store crd --config broken.json --out c3"), 5, "invalid_config");
}

TEST_F(Cli, RunRootFromEnvironment) {
  const fs::path rr = root() / "rr";
  ASSERT_EQ(run("--run-root rr graphs --store crd").code, 0);
  bool found = false;
  for (const auto& e : fs::recursive_directory_iterator(rr))
    if (e.path().filename() == "cache_manifest.json") found = true;
  EXPECT_TRUE(found);
  const std::string env = "env SSRGNET_RUN_ROOT=\"" + (root() / "er").string() + "\" \"" SSRGNET_CLI "\"";
  const std::string cmd = "cd \"" + root().string() + "\" && " + env + " graphs --store crd > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(root() / "er"));
}

}  // namespace
