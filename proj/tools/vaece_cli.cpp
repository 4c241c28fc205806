// Command-line front end for dataset generation, training and evaluation.
//
// Exit codes: 0 success, 1 missing or unreadable artifacts, 2 configuration
// error, 3 numerical failure.

#include "vaece/bench.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> profile;
  std::optional<std::string> audit_log;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Experiment configuration (TOML)")->required();
  cmd->add_option("--seed", o.seed, "Override the master seed");
  cmd->add_option("--out-dir", o.out_dir, "Override the output directory");
  cmd->add_option("--profile", o.profile, "Override the scale profile")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--audit-log", o.audit_log, "Append every file the run opens to this log");
  cmd->add_flag("--quiet", o.quiet, "Suppress progress output");
}

vaece::bench::ExperimentConfig resolve(const CommonOptions& o) {
  vaece::bench::ConfigOverrides ov;
  if (o.profile) ov.profile = vaece::bench::profile_from_string(*o.profile);
  ov.seed = o.seed;
  if (o.out_dir) ov.out_dir = *o.out_dir;
  return vaece::bench::load_config(o.config, ov);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel estimation with variational autoencoders in underdetermined systems"};
  app.require_subcommand(1);
  CommonOptions opts;
  auto* gen = app.add_subcommand("gen-data", "Generate channel datasets, operators and observation streams");
  auto* train = app.add_subcommand("train", "Train one model per (variant, geometry)");
  auto* evaluate = app.add_subcommand("evaluate", "NMSE of every estimator at every geometry and SNR");
  auto* sweep_snr = app.add_subcommand("sweep-snr", "NMSE over the SNR grid for the first geometry");
  auto* sweep_rf = app.add_subcommand("sweep-rf", "NMSE over the RF-chain counts at the sweep SNR");
  for (auto* cmd : {gen, train, evaluate, sweep_snr, sweep_rf}) add_common(cmd, opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  vaece::bench::Log log;
  if (!opts.quiet) log = [](const std::string& line) { std::cerr << line << '\n'; };

  try {
    if (opts.audit_log) vaece::io::FileAudit::enable(*opts.audit_log);
    const auto cfg = resolve(opts);
    if (gen->parsed()) {
      vaece::bench::gen_data(cfg, log);
    } else if (train->parsed()) {
      vaece::bench::train_all(cfg, log);
    } else if (evaluate->parsed()) {
      vaece::bench::evaluate(cfg, log);
    } else if (sweep_snr->parsed()) {
      vaece::bench::sweep_snr(cfg, log);
    } else if (sweep_rf->parsed()) {
      vaece::bench::sweep_rf(cfg, log);
    }
    return kExitOk;
  } catch (const vaece::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const vaece::InvalidParameter& e) {
    std::cerr << "invalid parameter: " << e.what() << '\n';
    return kExitConfig;
  } catch (const vaece::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const vaece::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  }
}
