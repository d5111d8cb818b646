#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <string>

#include "efr/efr.hpp"
#include "efr/io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(EFR_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("efr_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return efr::read_file(p); }

/// Shared pretrained checkpoint, built once per process.
const fs::path& source_dir() {
  static const fs::path dir = [] {
    const fs::path d = fresh_dir("source");
    const RunResult r = run("pretrain --seed 0 --out " + d.string());
    if (r.code != 0) throw std::runtime_error("pretrain failed: " + r.output);
    return d;
  }();
  return dir;
}

const fs::path& shots_file() {
  static const fs::path file = [] {
    const fs::path d = fresh_dir("shots");
    const RunResult r = run("make-shots --preset rotated-mixture --seed 1 --out " + (d / "shots.csv").string());
    if (r.code != 0) throw std::runtime_error("make-shots failed: " + r.output);
    return d / "shots.csv";
  }();
  return file;
}

double reported_error(const std::string& output) {
  std::smatch m;
  const std::regex re(R"(\|\|R Q - I\|\|_F = ([0-9eE.+-]+))");
  if (!std::regex_search(output, m, re)) return -1.0;
  return std::stod(m[1]);
}

}  // namespace

TEST(Cli, HelpListsPresetsDefaultsAndEnvironment) {
  const RunResult r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"gauss2d-ring", "rotated-mixture", "scaled-mixture", "shifted-mixture", "lambda1 = 0.6",
                        "lambda2 = 0.4", "lr = 0.002", "beta1 = 0", "beta2 = 0.99", "batch 8",
                        "1000 iterations", "EFR_OUTPUT_DIR"})
    EXPECT_NE(r.output.find(s), std::string::npos) << s;
}

TEST(Cli, UnknownPresetListsAvailableOnes) {
  const fs::path d = fresh_dir("badpreset");
  const RunResult r = run("pretrain --preset nope --out " + d.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("gauss2d-ring"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("rotated-mixture"), std::string::npos) << r.output;
}

TEST(Cli, UnknownCommandIsUsageError) { EXPECT_EQ(run("frobnicate").code, 1); }

TEST(Cli, PretrainWritesArtifactsDeterministically) {
  const fs::path& d = source_dir();
  for (const char* f : {"checkpoint.efr", "manifest.json", "metrics.csv"}) EXPECT_TRUE(fs::exists(d / f)) << f;
  const json manifest = json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(manifest["command"], "pretrain");
  EXPECT_EQ(manifest["status"], "ok");
  for (const char* k : {"seed", "build", "output_dir", "config", "started_at", "finished_at"})
    EXPECT_TRUE(manifest.contains(k)) << k;
  EXPECT_FALSE(manifest["finished_at"].is_null());

  const fs::path again = fresh_dir("source_again");
  ASSERT_EQ(run("pretrain --seed 0 --out " + again.string()).code, 0);
  EXPECT_EQ(slurp(again / "metrics.csv"), slurp(d / "metrics.csv"));
  EXPECT_EQ(slurp(again / "checkpoint.efr"), slurp(d / "checkpoint.efr"));
}

TEST(Cli, PretrainGateMissedExitsTwoAndStillWritesCheckpoint) {
  const fs::path d = fresh_dir("gate");
  const RunResult r = run("pretrain --seed 0 --max-steps 1 --out " + d.string());
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_TRUE(fs::exists(d / "checkpoint.efr"));
}

TEST(Cli, BadConfigKeyIsNamed) {
  const fs::path d = fresh_dir("badcfg");
  std::ofstream(d / "cfg.txt") << "lambda1 = 0.5\nlamda2 = 0.1\n";
  const RunResult r = run("pretrain --config " + (d / "cfg.txt").string() + " --out " + d.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("lamda2"), std::string::npos) << r.output;
}

TEST(Cli, MakeShotsWritesRequestedRows) {
  const efr::Matrix shots = efr::load_csv_matrix(shots_file());
  EXPECT_EQ(shots.rows(), 10);
  EXPECT_EQ(shots.cols(), 2);
}

TEST(Cli, AdaptSummaryHasAllLossTerms) {
  const fs::path d = fresh_dir("adapt");
  const RunResult r = run("adapt --source-checkpoint " + (source_dir() / "checkpoint.efr").string() +
                          " --shots-file " + shots_file().string() + " --iterations 20 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const json summary = json::parse(slurp(d / "summary.json"));
  for (const char* k : {"final_loss_g", "final_loss_d", "final_loss_ins", "final_loss_dis", "eval_sliced_gw",
                        "frechet_gaussian_distance"})
    EXPECT_TRUE(summary.contains(k) && summary[k].is_number()) << k;
  const std::string metrics = slurp(d / "metrics.csv");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 21);
  EXPECT_TRUE(fs::exists(d / "checkpoint.efr"));
}

TEST(Cli, AdaptWithZeroIterationsKeepsGeneratorWeights) {
  const fs::path d = fresh_dir("adapt0");
  const RunResult r = run("adapt --source-checkpoint " + (source_dir() / "checkpoint.efr").string() +
                          " --shots-file " + shots_file().string() + " --iterations 0 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const efr::TrainState in = efr::load_checkpoint(source_dir() / "checkpoint.efr");
  const efr::TrainState out = efr::load_checkpoint(d / "checkpoint.efr");
  EXPECT_EQ(out.gen, in.gen);
}

TEST(Cli, AdaptMissingShotsFileFails) {
  const fs::path d = fresh_dir("noshots");
  const RunResult r = run("adapt --source-checkpoint " + (source_dir() / "checkpoint.efr").string() +
                          " --shots-file /nonexistent/shots.csv --out " + d.string());
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, AdaptWrongMagicNamesExpectedAndFound) {
  const fs::path d = fresh_dir("magic");
  std::string bytes = slurp(source_dir() / "checkpoint.efr");
  bytes.replace(0, 4, "XYZ9");
  efr::write_file_atomic(d / "bad.efr", bytes);
  const RunResult r = run("adapt --source-checkpoint " + (d / "bad.efr").string() + " --shots-file " +
                          shots_file().string() + " --out " + d.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("EFR1"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("XYZ9"), std::string::npos) << r.output;
}

TEST(Cli, OutputDirectoryFromEnvironment) {
  const fs::path d = fresh_dir("envout");
  const RunResult r = run("demo-rotation --steps 5 --restarts 1", "EFR_OUTPUT_DIR=" + d.string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(d / "manifest.json"));
  EXPECT_TRUE(fs::exists(d / "recovery_loss.csv"));
}

TEST(Cli, GradcheckAllPassesOnCorrectBuild) {
  const RunResult r = run("gradcheck --target all");
  EXPECT_EQ(r.code, 0) << r.output;
}

TEST(Cli, GradcheckReportsErrorPerTarget) {
  const RunResult r = run("gradcheck --target rotation --instances 5");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("rotation"), std::string::npos);
  EXPECT_NE(r.output.find("max_relative_error"), std::string::npos) << r.output;
}

TEST(Cli, GradcheckInjectedSignFlipFails) {
  EXPECT_EQ(run("gradcheck --target all --instances 3 --inject-sign-flip").code, 1);
}

TEST(Cli, DemoRotationAtFortyFiveDegrees) {
  const fs::path d = fresh_dir("demo45");
  const RunResult r = run("demo-rotation --dim 2 --angle-deg 45 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const double err = reported_error(r.output);
  EXPECT_GE(err, 0.0) << r.output;
  EXPECT_LT(err, 0.1);
}

TEST(Cli, DemoRotationAtZeroAngle) {
  const fs::path d = fresh_dir("demo0");
  const RunResult r = run("demo-rotation --dim 2 --angle-deg 0 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const double err = reported_error(r.output);
  EXPECT_GE(err, 0.0) << r.output;
  EXPECT_LT(err, 1e-3);
}

TEST(Cli, DemoRotationCsvHasRestartsTimesStepsRows) {
  const fs::path d = fresh_dir("demorows");
  ASSERT_EQ(run("demo-rotation --restarts 3 --steps 50 --out " + d.string()).code, 0);
  const std::string csv = slurp(d / "recovery_loss.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "restart,step,loss");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 50);
}
