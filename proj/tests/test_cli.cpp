#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfd/report.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(MFD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mfd_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  fs::path dir_;
};

const char* kSmallTrial =
    "site,z,g,y\n"
    "1,1,1,1\n1,1,1,0\n1,1,0,2\n1,1,0,3\n1,1,0,1\n"
    "1,0,1,2\n1,0,1,1\n1,0,0,3\n1,0,0,4\n1,0,0,2\n";

mfd::CsvTable estimates(const fs::path& dir) { return mfd::read_table(dir / "estimates.csv"); }

}  // namespace

TEST_F(Cli, EstimateMatchesClosedFormWithoutCovariates) {
  const auto in = write("trial.csv", kSmallTrial);
  ASSERT_EQ(run("estimate --input " + in.string() + " --out " + (dir_ / "out").string()), 0);
  const auto t = estimates(dir_ / "out");
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[0][t.column("method")], "mfd");
  // cell means: y11 0.5, y10 2, y01 1.5, y00 3
  const double closed = 1.0 - (0.5 - 2.0) / (1.5 - 3.0);
  EXPECT_NEAR(std::stod(t.rows[0][t.column("tau_hat")]), closed, 1e-8);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "manifest.json"));
  EXPECT_NE(slurp(dir_ / "out" / "manifest.json").find("input_sha256"), std::string::npos);
}

TEST_F(Cli, SCorrectedNeedsSpecificity) {
  const auto in = write("trial.csv", kSmallTrial);
  const auto out = (dir_ / "out").string();
  EXPECT_EQ(run("estimate --input " + in.string() + " --estimators s_corrected --out " + out), 2);
  ASSERT_EQ(run("estimate --input " + in.string() + " --estimators naive,s_corrected --s 0.8 --out " + out), 0);
  const auto t = estimates(out);
  ASSERT_EQ(t.rows.size(), 2u);
  const double naive = std::stod(t.rows[0][t.column("tau_hat")]);
  EXPECT_NEAR(std::stod(t.rows[1][t.column("tau_hat")]), naive / 0.8, 1e-8);
  EXPECT_EQ(run("estimate --input " + in.string() + " --estimators s_corrected --s-interval 0.7,0.9 --out " + out), 0);
  EXPECT_EQ(run("estimate --input " + in.string() + " --estimators s_corrected --s 1.5 --out " + out), 2);
}

TEST_F(Cli, InvalidInputsExitWithTwo) {
  const auto bad = write("bad.csv", "site,z,g,y\n1,1,1,abc\n");
  EXPECT_EQ(run("estimate --input " + bad.string() + " --out " + (dir_ / "o").string()), 2);
  const auto empty_cell = write("cell.csv", "site,z,g,y\n1,1,1,1\n1,1,0,1\n1,0,0,1\n");
  EXPECT_EQ(run("estimate --input " + empty_cell.string() + " --out " + (dir_ / "o").string()), 2);
  EXPECT_EQ(run("estimate --out x"), 2);
  EXPECT_EQ(run("nonsense"), 2);
  EXPECT_EQ(run("report --inputs " + (dir_ / "nothing").string() + " --out " + (dir_ / "r").string()), 2);
  fs::create_directories(dir_ / "emptydir");
  EXPECT_EQ(run("report --inputs " + (dir_ / "emptydir").string() + " --out " + (dir_ / "r").string()), 2);
}

TEST_F(Cli, SimulateSingleReplication) {
  const auto cfg = write("one.cfg", "name = one\nn = 400\nn_sim = 1\nseed = 4\n");
  const auto out = dir_ / "sim";
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + out.string()), 0);
  const auto reps = mfd::read_table(out / "replications.csv");
  EXPECT_EQ(reps.rows.size(), 3u);
  const auto sum = mfd::read_table(out / "summary.csv");
  EXPECT_EQ(sum.rows.size(), 3u);
  EXPECT_EQ(sum.rows[0][sum.column("n_sim")], "1");
  ASSERT_EQ(run("report --inputs " + out.string() + " --out " + (dir_ / "rep").string()), 0);
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "figure_series.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "combined_summary.csv"));
}

TEST_F(Cli, SimulateIndependentOfJobs) {
  const auto cfg = write("jobs.cfg", "name = jobs\nn = 400\nn_sim = 16\nJ = 2\n");
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --jobs 1 --out " + (dir_ / "a").string()), 0);
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --jobs 8 --out " + (dir_ / "b").string()), 0);
  EXPECT_EQ(slurp(dir_ / "a" / "summary.csv"), slurp(dir_ / "b" / "summary.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "replications.csv"), slurp(dir_ / "b" / "replications.csv"));
}

TEST_F(Cli, SeedFromEnvironment) {
  const auto cfg = write("env.cfg", "name = env\nn = 400\nn_sim = 2\n");
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + (dir_ / "a").string()), 0);
  ::setenv("MFD_SEED", "777", 1);
  const int rc = run("simulate --config " + cfg.string() + " --out " + (dir_ / "b").string());
  ::unsetenv("MFD_SEED");
  ASSERT_EQ(rc, 0);
  EXPECT_NE(slurp(dir_ / "a" / "replications.csv"), slurp(dir_ / "b" / "replications.csv"));
  EXPECT_NE(slurp(dir_ / "b" / "manifest.json").find("777"), std::string::npos);
}

TEST_F(Cli, SurvivalGenerateThenEstimate) {
  const auto cfg = write("surv.cfg", "outcome = survival\nname = surv\nn = 2000\nn_sim = 1\n");
  const auto csv = dir_ / "surv.csv";
  ASSERT_EQ(run("generate --config " + cfg.string() + " --out " + csv.string()), 0);
  ASSERT_EQ(run("estimate --input " + csv.string() + " --outcome survival --out " + (dir_ / "e").string()), 0);
  const auto t = estimates(dir_ / "e");
  ASSERT_GE(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0][t.column("method")], "cox_mfd");
  EXPECT_TRUE(std::isfinite(std::stod(t.rows[0][t.column("se")])));
  EXPECT_EQ(run("estimate --input " + csv.string() + " --outcome survival --estimators s_corrected --s 0.8 --out " +
                (dir_ / "e").string()),
            2);
}

TEST_F(Cli, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(MFD_CONFIG_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_EQ(run("generate --config " + entry.path().string() + " --out " + (dir_ / "g.csv").string()), 0)
        << entry.path();
  }
}
