#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <sys/wait.h>

#ifndef VAECE_CLI_PATH
#error "VAECE_CLI_PATH must point at the command-line binary"
#endif

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(VAECE_CLI_PATH) + " " + args + " --quiet > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const std::string& body) {
  const auto path = dir / "config.toml";
  std::ofstream(path) << body;
  return path;
}

const char* kTinyConfig =
    "scenario = \"hybrid\"\n"
    "[geometry]\nn_antennas = 16\nrf_chains = [4]\n"
    "[channel]\nquadrature_points = 512\n"
    "[data]\ntrain = 32\nvalidation = 16\ntest = 8\n"
    "[evaluation]\nsnr_db = [10.0]\nestimators = [\"global_cov\", \"vae_real_fix\"]\n"
    "[training]\nepochs = 1\nbatch_size = 16\n"
    "[model]\nlatent_dim = 2\nencoder_channels = [4]\ndecoder_channels = [4]\nkernel_size = 3\n";

}  // namespace

TEST(Cli, ConfigurationErrorsExitWithTwo) {
  const auto dir = vaece::testing::scratch_dir("cli_config");
  EXPECT_EQ(run("gen-data"), 2);  // --config is required
  EXPECT_EQ(run("gen-data --config " + (dir / "absent.toml").string()), 2);
  const auto bad = write_config(dir, "scenario = \"hybrid\"\nunknown_key = 1\n");
  EXPECT_EQ(run("gen-data --config " + bad.string() + " --out-dir " + (dir / "out").string()), 2);
  const auto good = write_config(dir, kTinyConfig);
  EXPECT_EQ(run("gen-data --config " + good.string() + " --profile huge"), 2);
  EXPECT_EQ(run("frobnicate --config " + good.string()), 2);
}

TEST(Cli, FullRunSucceedsAndMissingArtifactsAreNotConfigErrors) {
  const auto dir = vaece::testing::scratch_dir("cli_run");
  const auto cfg = write_config(dir, kTinyConfig);
  const std::string common = " --config " + cfg.string() + " --seed 3 --profile desk --out-dir " + (dir / "out").string();
  EXPECT_EQ(run("evaluate" + common), 1);
  EXPECT_EQ(run("gen-data" + common), 0);
  EXPECT_EQ(run("train" + common), 0);
  EXPECT_EQ(run("evaluate" + common), 0);
  EXPECT_EQ(run("sweep-snr" + common), 0);
  EXPECT_EQ(run("sweep-rf" + common), 0);
  std::ifstream csv(dir / "out" / "results" / "nmse.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "estimator,snr_db,geometry,nmse,n_test,seed");
  std::string row;
  std::getline(csv, row);
  EXPECT_EQ(row.rfind("global_cov,10,hybrid_n16_nr4,", 0), 0u) << row;
  EXPECT_NE(row.find(",8,3"), std::string::npos) << row;
}
