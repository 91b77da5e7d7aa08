#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "geomf/cli.hpp"
#include "geomf/training.hpp"

namespace geomf {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("geomf_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
    unsetenv("GEOMF_SEED");
  }
  void TearDown() override {
    fs::remove_all(dir_);
    unsetenv("GEOMF_SEED");
  }
  std::string file(const std::string& name) const { return (dir_ / name).string(); }

  std::string small_data() {
    const std::string path = file("small.ndjson");
    const CliResult r = cli({"gen-data", "--out", path, "--train", "10", "--valid", "5", "--test", "5", "--seed", "3"});
    EXPECT_EQ(r.code, 0) << r.err;
    return path;
  }

  std::string small_checkpoint(const std::string& data) {
    const std::string ckpt = file("model.ckpt");
    const CliResult r = cli({"train", "--data", data, "--epochs", "1", "--train-size", "10", "--width", "8", "--heads",
                       "2", "--ffn-width", "8", "--kernels", "6", "--layers", "1", "--checkpoint", ckpt});
    EXPECT_EQ(r.code, 0) << r.err;
    return ckpt;
  }

  fs::path dir_;
};

std::string line_value(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  return "";
}

// ---------------------------------------------------------------------------
// gen-data

TEST_F(CliTest, GenDataDefaultsToReferenceSplitSizes) {
  const std::string path = file("data.ndjson");
  const CliResult r = cli({"gen-data", "--out", path, "--seed", "7"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset d = read_dataset(path);
  EXPECT_EQ(d.train.size(), 3000u);
  EXPECT_EQ(d.valid.size(), 2000u);
  EXPECT_EQ(d.test.size(), 2000u);
  EXPECT_EQ(d.base_seed, 7u);
  EXPECT_EQ(line_value(r.out, "fnv1a64"), file_hash(path));
  EXPECT_NE(r.out.find("train 3000"), std::string::npos);
}

TEST_F(CliTest, GenDataIsReproducibleAcrossRunsAndThreads) {
  const std::vector<std::string> base{"--train", "20", "--valid", "10", "--test", "10", "--seed", "5"};
  auto run = [&](const std::string& name, const std::string& threads) {
    std::vector<std::string> args{"gen-data", "--out", file(name), "--threads", threads};
    args.insert(args.end(), base.begin(), base.end());
    EXPECT_EQ(cli(args).code, 0);
    return file_hash(file(name));
  };
  const std::string a = run("a.ndjson", "1");
  EXPECT_EQ(a, run("b.ndjson", "1"));
  EXPECT_EQ(a, run("c.ndjson", "3"));
}

TEST_F(CliTest, GenDataUnwritablePathIsAnIoFailure) {
  const CliResult r = cli({"gen-data", "--out", "/nonexistent-dir/x/data.ndjson", "--train", "2", "--valid", "1", "--test",
                     "1"});
  EXPECT_EQ(r.code, kExitIo);
  EXPECT_NE(r.err.find("/nonexistent-dir/x/data.ndjson"), std::string::npos);
}

TEST_F(CliTest, GenDataRejectsInvalidSimulation) {
  EXPECT_EQ(cli({"gen-data", "--out", file("d.ndjson"), "--dt", "-1"}).code, kExitConfig);
  EXPECT_FALSE(fs::exists(file("d.ndjson")));
}

// ---------------------------------------------------------------------------
// train

TEST_F(CliTest, TrainHelpShowsReferenceDefaults) {
  const CliResult r = cli({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* expected : {"--layers UINT [4]", "--width UINT [80]", "--heads UINT [8]", "--ffn-width UINT [80]",
                               "--kernels UINT [64]", "--lr FLOAT [0.0003]", "--batch-size UINT [100]",
                               "--dropout FLOAT [0.4]", "--beta1 FLOAT [0.9]", "--beta2 FLOAT [0.999]",
                               "--adam-eps FLOAT [1e-08]", "--patience UINT [200]", "--clip FLOAT [0]"})
    EXPECT_NE(r.out.find(expected), std::string::npos) << expected;
}

TEST_F(CliTest, EverySubcommandHelpListsDefaults) {
  for (const char* sub : {"gen-data", "train", "eval", "check", "inspect"}) {
    const CliResult r = cli({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--config"), std::string::npos) << sub;
  }
  EXPECT_NE(cli({"gen-data", "--help"}).out.find("--train UINT [3000]"), std::string::npos);
  EXPECT_NE(cli({"check", "--help"}).out.find("--trials UINT [100]"), std::string::npos);
  EXPECT_NE(cli({"eval", "--help"}).out.find("--split TEXT [test]"), std::string::npos);
}

TEST_F(CliTest, TrainSmokeRunWritesArtifacts) {
  const std::string data = small_data();
  const std::string before = file_hash(data);
  const CliResult r = cli({"train", "--data", data, "--epochs", "1", "--train-size", "10", "--checkpoint",
                     file("best.ckpt"), "--metrics", file("metrics.ndjson")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(file("best.ckpt")));
  EXPECT_TRUE(fs::exists(file("metrics.ndjson")));
  EXPECT_FALSE(line_value(r.out, "test_mse").empty());
  EXPECT_FALSE(line_value(r.out, "baseline_mse").empty());
  EXPECT_EQ(file_hash(data), before);
}

TEST_F(CliTest, TrainMissingDatasetNamesThePath) {
  const CliResult r = cli({"train", "--data", file("nope.ndjson"), "--epochs", "1"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find(file("nope.ndjson")), std::string::npos);
}

TEST_F(CliTest, TrainInvalidConfigStopsBeforeAnyWork) {
  const std::string data = small_data();
  const CliResult r = cli({"train", "--data", data, "--heads", "3", "--metrics", file("m.ndjson")});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_FALSE(fs::exists(file("m.ndjson")));
  EXPECT_EQ(cli({"train", "--data", data, "--batch-size", "11", "--train-size", "10"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--data", data, "--mode", "so3"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--data", data, "--epochs", "abc"}).code, kExitConfig);
}

TEST_F(CliTest, TrainRefusesToOverwriteItsInput) {
  const std::string data = small_data();
  const std::string before = file_hash(data);
  EXPECT_EQ(cli({"train", "--data", data, "--epochs", "1", "--metrics", data}).code, kExitConfig);
  EXPECT_EQ(file_hash(data), before);
}

TEST_F(CliTest, TrainNonFiniteLossIsNumericFailure) {
  Dataset d = generate_dataset({4, 2, 2}, 1, SimulationConfig{});
  d.train[1].pT[0][2] = 1e300;
  write_dataset(file("bad.ndjson"), d);
  const CliResult r = cli({"train", "--data", file("bad.ndjson"), "--epochs", "1", "--batch-size", "4", "--width", "8",
                     "--heads", "2", "--ffn-width", "8", "--layers", "1"});
  EXPECT_EQ(r.code, kExitNumeric);
  EXPECT_NE(r.err.find("epoch 1"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainIsByteIdenticalAcrossThreadCounts) {
  const std::string data = small_data();
  auto run = [&](const std::string& tag, const std::string& threads) {
    const CliResult r = cli({"train", "--data", data, "--epochs", "2", "--train-size", "10", "--batch-size", "5",
                       "--width", "8", "--heads", "2", "--ffn-width", "8", "--kernels", "6", "--layers", "2",
                       "--chunk", "2", "--seed", "4", "--no-wallclock", "--threads", threads, "--checkpoint",
                       file(tag + ".ckpt"), "--metrics", file(tag + ".ndjson")});
    EXPECT_EQ(r.code, 0) << r.err;
  };
  run("a", "1");
  run("b", "1");
  run("c", "2");
  for (const char* ext : {".ckpt", ".ndjson"}) {
    EXPECT_EQ(file_hash(file(std::string("a") + ext)), file_hash(file(std::string("b") + ext))) << ext;
    EXPECT_EQ(file_hash(file(std::string("a") + ext)), file_hash(file(std::string("c") + ext))) << ext;
  }
}

// ---------------------------------------------------------------------------
// config file and environment

TEST_F(CliTest, ConfigFileSuppliesValuesAndFlagsOverride) {
  std::ofstream(file("cfg.json")) << R"({"train": 4, "valid": 3, "test": 2, "seed": 11})";
  ASSERT_EQ(cli({"gen-data", "--config", file("cfg.json"), "--out", file("a.ndjson")}).code, 0);
  Dataset a = read_dataset(file("a.ndjson"));
  EXPECT_EQ(a.train.size(), 4u);
  EXPECT_EQ(a.test.size(), 2u);
  EXPECT_EQ(a.base_seed, 11u);
  ASSERT_EQ(cli({"gen-data", "--config", file("cfg.json"), "--out", file("b.ndjson"), "--test", "5"}).code, 0);
  EXPECT_EQ(read_dataset(file("b.ndjson")).test.size(), 5u);
}

TEST_F(CliTest, ConfigFileErrorsAreConfigFailures) {
  std::ofstream(file("unknown.json")) << R"({"trian": 4})";
  std::ofstream(file("typed.json")) << R"({"train": "many"})";
  std::ofstream(file("broken.json")) << R"({"train": )";
  for (const char* name : {"unknown.json", "typed.json", "broken.json", "absent.json"}) {
    const CliResult r = cli({"gen-data", "--config", file(name), "--out", file("x.ndjson")});
    EXPECT_EQ(r.code, kExitConfig) << name;
  }
  EXPECT_NE(cli({"gen-data", "--config", file("unknown.json"), "--out", file("x.ndjson")}).err.find("trian"),
            std::string::npos);
}

TEST_F(CliTest, EnvironmentSeedOverridesConfigButNotFlag) {
  std::ofstream(file("cfg.json")) << R"({"train": 2, "valid": 1, "test": 1, "seed": 11})";
  setenv("GEOMF_SEED", "40", 1);
  ASSERT_EQ(cli({"gen-data", "--config", file("cfg.json"), "--out", file("a.ndjson")}).code, 0);
  EXPECT_EQ(read_dataset(file("a.ndjson")).base_seed, 40u);
  ASSERT_EQ(cli({"gen-data", "--config", file("cfg.json"), "--out", file("b.ndjson"), "--seed", "9"}).code, 0);
  EXPECT_EQ(read_dataset(file("b.ndjson")).base_seed, 9u);
  setenv("GEOMF_SEED", "forty", 1);
  EXPECT_EQ(cli({"gen-data", "--config", file("cfg.json"), "--out", file("c.ndjson")}).code, kExitConfig);
}

// ---------------------------------------------------------------------------
// eval and inspect

TEST_F(CliTest, EvalIsRepeatableAndMatchesLibrary) {
  const std::string data = small_data();
  const std::string ckpt = small_checkpoint(data);
  const CliResult a = cli({"eval", "--checkpoint", ckpt, "--data", data});
  const CliResult b = cli({"eval", "--checkpoint", ckpt, "--data", data});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(std::stod(line_value(a.out, "mse")), evaluate_checkpoint(ckpt, data, Split::kTest));
  const CliResult v = cli({"eval", "--checkpoint", ckpt, "--data", data, "--split", "valid"});
  EXPECT_EQ(std::stod(line_value(v.out, "mse")), evaluate_checkpoint(ckpt, data, Split::kValid));
}

TEST_F(CliTest, EvalLinearBaselineNeedsNoCheckpoint) {
  const std::string data = small_data();
  const CliResult r = cli({"eval", "--baseline", "linear", "--data", data});
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset d = read_dataset(data);
  EXPECT_EQ(std::stod(line_value(r.out, "mse")), linear_baseline_mse(d.test, d.sim.steps * d.sim.dt));
  EXPECT_EQ(cli({"eval", "--baseline", "quadratic", "--data", data}).code, kExitConfig);
}

TEST_F(CliTest, EvalCorruptCheckpointNamesFirstBadEntry) {
  const std::string data = small_data();
  const std::string ckpt = small_checkpoint(data);
  std::ifstream in(ckpt, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const std::string from = "\"name\":\"embedding\"";
  const std::size_t pos = bytes.find(from);
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, from.size(), "\"name\":\"embeddinx\"");
  std::ofstream(ckpt, std::ios::binary | std::ios::trunc) << bytes;
  const CliResult r = cli({"eval", "--checkpoint", ckpt, "--data", data});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("embeddinx"), std::string::npos) << r.err;
}

TEST_F(CliTest, InspectPrintsManifest) {
  const std::string data = small_data();
  const std::string ckpt = small_checkpoint(data);
  const CliResult r = cli({"inspect", "--checkpoint", ckpt});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("embedding  [2×8]  offset 0"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("head.equ_w"), std::string::npos);
  EXPECT_NE(r.out.find("\"width\":8"), std::string::npos);
  EXPECT_EQ(cli({"inspect", "--checkpoint", file("none.ckpt")}).code, kExitConfig);
}

// ---------------------------------------------------------------------------
// check

TEST_F(CliTest, CheckFreshModelPasses) {
  const CliResult r = cli({"check", "--trials", "10"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS rotation"), std::string::npos);
  EXPECT_EQ(r.out.find("reflection"), std::string::npos);
}

TEST_F(CliTest, CheckE3AddsReflection) {
  const CliResult r = cli({"check", "--trials", "10", "--mode", "e3", "--skip-gradients"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS reflection"), std::string::npos);
}

TEST_F(CliTest, CheckMutationIsAnAuditFailure) {
  const CliResult r = cli({"check", "--trials", "10", "--mutate", "gelu-on-equ", "--skip-gradients"});
  EXPECT_EQ(r.code, kExitAudit);
  EXPECT_NE(r.out.find("FAIL rotation"), std::string::npos);
  EXPECT_EQ(cli({"check", "--trials", "5", "--mutate", "corrupt-product-backward"}).code, kExitAudit);
  EXPECT_EQ(cli({"check", "--mutate", "nonsense"}).code, kExitConfig);
}

TEST_F(CliTest, CheckWritesReport) {
  const CliResult r = cli({"check", "--trials", "5", "--report", file("report.ndjson"), "--seed", "3"});
  ASSERT_EQ(r.code, 0);
  std::ifstream in(file("report.ndjson"));
  std::string line, last;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    last = line;
    ++rows;
  }
  const auto summary = nlohmann::json::parse(last);
  EXPECT_TRUE(summary["pass"].get<bool>());
  EXPECT_EQ(summary["seed"], 3);
  EXPECT_EQ(summary["checks"].get<std::size_t>() + 1, rows);
}

TEST_F(CliTest, CheckAuditsLoadedCheckpoint) {
  const std::string data = small_data();
  const std::string ckpt = small_checkpoint(data);
  const CliResult r = cli({"check", "--trials", "5", "--checkpoint", ckpt, "--skip-gradients"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
}

TEST_F(CliTest, UnknownSubcommandOrFlagIsConfigFailure) {
  EXPECT_EQ(cli({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(cli({}).code, kExitConfig);
  EXPECT_EQ(cli({"eval", "--bogus"}).code, kExitConfig);
}

}  // namespace
}  // namespace geomf
