#pragma once

// Experiment orchestration: configuration, dataset generation, training,
// evaluation sweeps and report emission. Every artifact lives below the
// configured output directory:
//
//   data/{train,validation,test}.{bin,json}      channel datasets
//   <geometry>/operator.{json,bin}                evaluation operator
//   <geometry>/corpus/<variant>_{train,validation}.*   recorded observations
//   <geometry>/models/<variant>.{json,bin}        checkpoints
//   <geometry>/models/<variant>_loss.csv          loss curves
//   results/{nmse,snr_sweep,rf_sweep}.{csv,dat}   reports

#include "vaece/channel_models.hpp"
#include "vaece/core.hpp"
#include "vaece/estimators.hpp"
#include "vaece/io.hpp"
#include "vaece/observation.hpp"
#include "vaece/train.hpp"
#include "vaece/vae.hpp"

#include <toml.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace vaece::bench {

namespace fs = std::filesystem;
using Log = std::function<void(const std::string&)>;

enum class Scenario { Hybrid, Wideband };
enum class Profile { Desk, Paper };

inline std::string to_string(Scenario s) { return s == Scenario::Hybrid ? "hybrid" : "wideband"; }
inline std::string to_string(Profile p) { return p == Profile::Desk ? "desk" : "paper"; }

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "hybrid") return Scenario::Hybrid;
  if (s == "wideband") return Scenario::Wideband;
  throw ConfigError("unknown scenario '" + s + "' (expected hybrid or wideband)");
}

inline Profile profile_from_string(const std::string& s) {
  if (s == "desk") return Profile::Desk;
  if (s == "paper") return Profile::Paper;
  throw ConfigError("unknown profile '" + s + "' (expected desk or paper)");
}

inline const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> ids{"genie_cme", "global_cov", "genie_omp", "li",
                                            "global_li", "vae_noisy", "vae_real_fix", "vae_real_var"};
  return ids;
}

inline bool is_vae_estimator(const std::string& id) { return id.rfind("vae_", 0) == 0; }

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  Scenario scenario = Scenario::Hybrid;
  Profile profile = Profile::Desk;
  std::uint64_t seed = 1;
  fs::path out_dir = "runs";

  // hybrid geometry
  Index n_antennas = 32;
  std::vector<Index> rf_chains{8, 16};
  double angular_spread_deg = 2.0;
  Index quadrature_points = 4096;

  // wideband geometry
  Index n_subcarriers = 12;
  Index n_timeslots = 14;
  Index n_pilots = 20;
  PilotLayout layout = PilotLayout::Lattice;
  LatticeSpec lattice;

  // dataset sizes
  Index n_train = 20000;
  Index n_val = 2000;
  Index n_test = 5000;

  // evaluation
  std::vector<double> snr_db{-10, 0, 10, 20, 30, 40};
  double rf_sweep_snr_db = 20.0;
  std::vector<std::string> estimators;

  // training
  Index epochs = 50;
  Index batch_size = 128;
  double learning_rate = 5e-4;
  SnrRange train_snr;

  // model
  Index latent_dim = 16;
  std::vector<Index> encoder_channels{16, 32, 64};
  std::vector<Index> decoder_channels{32, 16, 8};
  Index kernel_size = 7;

  Index dimension() const { return scenario == Scenario::Hybrid ? n_antennas : n_subcarriers * n_timeslots; }

  std::vector<Variant> variants() const {
    std::vector<Variant> out;
    for (const auto& e : estimators)
      if (is_vae_estimator(e)) out.push_back(variant_from_string(e));
    return out;
  }

  bool uses(const std::string& estimator) const {
    return std::find(estimators.begin(), estimators.end(), estimator) != estimators.end();
  }

  Architecture architecture() const {
    Architecture a;
    a.n = dimension();
    if (scenario == Scenario::Wideband) {
      a.covariance = StructureKind::BlockToeplitz;
      a.n_timeslots = n_timeslots;
      a.n_subcarriers = n_subcarriers;
    }
    a.latent_dim = latent_dim;
    a.encoder_channels = encoder_channels;
    a.decoder_channels = decoder_channels;
    a.kernel_size = kernel_size;
    return a;
  }

  void validate() const {
    auto check = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    check(n_train > 1 && n_val > 0 && n_test > 0, "dataset sizes must be positive (train > 1)");
    check(!snr_db.empty(), "SNR grid must be non-empty");
    for (double s : snr_db) check(std::isfinite(s), "SNR grid entries must be finite");
    check(std::set<double>(snr_db.begin(), snr_db.end()).size() == snr_db.size(), "SNR grid has duplicates");
    check(std::isfinite(rf_sweep_snr_db), "rf sweep SNR must be finite");
    check(!estimators.empty(), "estimator list must be non-empty");
    check(std::set<std::string>(estimators.begin(), estimators.end()).size() == estimators.size(),
          "estimator list has duplicates");
    for (const auto& e : estimators) {
      const auto& known = known_estimators();
      check(std::find(known.begin(), known.end(), e) != known.end(), "unknown estimator '" + e + "'");
    }
    if (scenario == Scenario::Hybrid) {
      check(n_antennas > 1, "antenna count must exceed one");
      check(!rf_chains.empty(), "rf_chains must be non-empty");
      check(std::set<Index>(rf_chains.begin(), rf_chains.end()).size() == rf_chains.size(), "rf_chains has duplicates");
      for (Index m : rf_chains) check(m > 0 && m < n_antennas, "rf chain counts must lie in [1, N)");
      check(angular_spread_deg > 0.0, "angular spread must be positive");
      check(quadrature_points >= 512, "quadrature needs at least 512 points");
      check(!uses("li") && !uses("global_li"), "interpolation estimators need the wideband pilot grid");
    } else {
      check(n_subcarriers > 0 && n_timeslots > 0, "grid dimensions must be positive");
      check(n_pilots > 0 && n_pilots < dimension(), "pilot count must lie in [1, N)");
      check(!uses("genie_cme"), "genie covariances exist only for the hybrid scenario");
      if (layout == PilotLayout::Lattice)
        check(static_cast<Index>(lattice.subcarriers.size() * lattice.timeslots.size()) == n_pilots,
              "lattice layout does not provide n_pilots positions");
      for (Index s : lattice.subcarriers) check(s >= 0 && s < n_subcarriers, "lattice subcarrier out of range");
      for (Index t : lattice.timeslots) check(t >= 0 && t < n_timeslots, "lattice timeslot out of range");
    }
    check(epochs > 0, "epoch count must be positive");
    check(batch_size > 1, "batch size must exceed one");
    check(learning_rate > 0.0, "learning rate must be positive");
    check(train_snr.max_db >= train_snr.min_db, "training SNR range is empty");
    try {
      architecture().validate();
    } catch (const InvalidParameter& e) {
      throw ConfigError(std::string("invalid model: ") + e.what());
    }
  }
};

/// Built-in defaults for a scenario at a profile.
inline ExperimentConfig default_config(Scenario scenario, Profile profile) {
  ExperimentConfig c;
  c.scenario = scenario;
  c.profile = profile;
  const bool paper = profile == Profile::Paper;
  if (scenario == Scenario::Hybrid) {
    c.n_antennas = paper ? 128 : 32;
    c.rf_chains = paper ? std::vector<Index>{8, 16, 32, 64} : std::vector<Index>{8, 16};
    c.estimators = {"genie_cme", "global_cov", "genie_omp", "vae_noisy", "vae_real_fix", "vae_real_var"};
    c.latent_dim = 16;
    c.epochs = paper ? 100 : 50;
  } else {
    c.estimators = {"global_cov", "li", "global_li", "vae_noisy", "vae_real_fix", "vae_real_var"};
    c.latent_dim = 24;
    c.epochs = paper ? 100 : 15;
  }
  if (paper) {
    c.n_train = 180000;
    c.n_val = 10000;
    c.n_test = 10000;
    c.snr_db = {-10, -5, 0, 5, 10, 15, 20, 25, 30, 35, 40};
    c.encoder_channels = {32, 64, 128};
    c.decoder_channels = {128, 64, 32};
  }
  return c;
}

struct ConfigOverrides {
  std::optional<Profile> profile;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out_dir;
};

namespace detail {

inline void reject_unknown_keys(const toml::table& t, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, value] : t) {
    (void)value;
    if (!allowed.count(std::string(key.str())))
      throw ConfigError("unknown key '" + std::string(key.str()) + "' in " + where);
  }
}

template <class T>
void read_scalar(const toml::table& t, const char* key, T& out, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return;
  if constexpr (std::is_same_v<T, double>) {
    if (auto v = node->value<double>()) {
      out = *v;
      return;
    }
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = node->value<std::string>()) {
      out = *v;
      return;
    }
  } else if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node->value<bool>()) {
      out = *v;
      return;
    }
  } else {
    if (node->is_integer()) {
      const auto v = node->as_integer()->get();
      if constexpr (std::is_unsigned_v<T>) {
        if (v < 0) throw ConfigError(where + "." + key + " must be non-negative");
      }
      out = static_cast<T>(v);
      return;
    }
  }
  throw ConfigError(where + "." + key + " has the wrong type");
}

template <class T>
void read_array(const toml::table& t, const char* key, std::vector<T>& out, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return;
  const auto* arr = node->as_array();
  if (!arr) throw ConfigError(where + "." + key + " must be an array");
  std::vector<T> values;
  for (const auto& el : *arr) {
    if constexpr (std::is_same_v<T, double>) {
      auto v = el.value<double>();
      if (!v) throw ConfigError(where + "." + key + " must hold numbers");
      values.push_back(*v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      auto v = el.value<std::string>();
      if (!v) throw ConfigError(where + "." + key + " must hold strings");
      values.push_back(*v);
    } else {
      if (!el.is_integer()) throw ConfigError(where + "." + key + " must hold integers");
      values.push_back(static_cast<T>(el.as_integer()->get()));
    }
  }
  out = std::move(values);
}

inline const toml::table* subtable(const toml::table& root, const char* name) {
  const auto* node = root.get(name);
  if (!node) return nullptr;
  const auto* t = node->as_table();
  if (!t) throw ConfigError(std::string("'") + name + "' must be a table");
  return t;
}

}  // namespace detail

/// Parses TOML text. The profile (override, then file, then desk) selects
/// the defaults; keys present in the file replace them; overrides win last.
inline ExperimentConfig parse_config(const std::string& text, const ConfigOverrides& overrides = {}) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream ss;
    ss << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(ss.str());
  }
  detail::reject_unknown_keys(root,
                              {"scenario", "profile", "seed", "out_dir", "geometry", "channel", "data", "evaluation",
                               "training", "model"},
                              "top level");
  std::string scenario_name;
  detail::read_scalar(root, "scenario", scenario_name, "config");
  if (scenario_name.empty()) throw ConfigError("config must set 'scenario'");
  std::string profile_name = "desk";
  detail::read_scalar(root, "profile", profile_name, "config");
  const Profile profile = overrides.profile ? *overrides.profile : profile_from_string(profile_name);
  ExperimentConfig c = default_config(scenario_from_string(scenario_name), profile);

  detail::read_scalar(root, "seed", c.seed, "config");
  std::string out_dir;
  detail::read_scalar(root, "out_dir", out_dir, "config");
  if (!out_dir.empty()) c.out_dir = out_dir;

  if (const auto* g = detail::subtable(root, "geometry")) {
    detail::reject_unknown_keys(*g,
                                {"n_antennas", "rf_chains", "n_subcarriers", "n_timeslots", "n_pilots", "layout",
                                 "lattice_subcarriers", "lattice_timeslots"},
                                "[geometry]");
    detail::read_scalar(*g, "n_antennas", c.n_antennas, "geometry");
    detail::read_array(*g, "rf_chains", c.rf_chains, "geometry");
    detail::read_scalar(*g, "n_subcarriers", c.n_subcarriers, "geometry");
    detail::read_scalar(*g, "n_timeslots", c.n_timeslots, "geometry");
    detail::read_scalar(*g, "n_pilots", c.n_pilots, "geometry");
    std::string layout;
    detail::read_scalar(*g, "layout", layout, "geometry");
    if (layout == "random") c.layout = PilotLayout::Random;
    else if (layout == "lattice") c.layout = PilotLayout::Lattice;
    else if (!layout.empty()) throw ConfigError("geometry.layout must be 'lattice' or 'random'");
    detail::read_array(*g, "lattice_subcarriers", c.lattice.subcarriers, "geometry");
    detail::read_array(*g, "lattice_timeslots", c.lattice.timeslots, "geometry");
  }
  if (const auto* ch = detail::subtable(root, "channel")) {
    detail::reject_unknown_keys(*ch, {"angular_spread_deg", "quadrature_points"}, "[channel]");
    detail::read_scalar(*ch, "angular_spread_deg", c.angular_spread_deg, "channel");
    detail::read_scalar(*ch, "quadrature_points", c.quadrature_points, "channel");
  }
  if (const auto* d = detail::subtable(root, "data")) {
    detail::reject_unknown_keys(*d, {"train", "validation", "test"}, "[data]");
    detail::read_scalar(*d, "train", c.n_train, "data");
    detail::read_scalar(*d, "validation", c.n_val, "data");
    detail::read_scalar(*d, "test", c.n_test, "data");
  }
  if (const auto* e = detail::subtable(root, "evaluation")) {
    detail::reject_unknown_keys(*e, {"snr_db", "rf_sweep_snr_db", "estimators"}, "[evaluation]");
    detail::read_array(*e, "snr_db", c.snr_db, "evaluation");
    detail::read_scalar(*e, "rf_sweep_snr_db", c.rf_sweep_snr_db, "evaluation");
    detail::read_array(*e, "estimators", c.estimators, "evaluation");
  }
  if (const auto* t = detail::subtable(root, "training")) {
    detail::reject_unknown_keys(*t, {"epochs", "batch_size", "learning_rate", "snr_min_db", "snr_max_db"}, "[training]");
    detail::read_scalar(*t, "epochs", c.epochs, "training");
    detail::read_scalar(*t, "batch_size", c.batch_size, "training");
    detail::read_scalar(*t, "learning_rate", c.learning_rate, "training");
    detail::read_scalar(*t, "snr_min_db", c.train_snr.min_db, "training");
    detail::read_scalar(*t, "snr_max_db", c.train_snr.max_db, "training");
  }
  if (const auto* m = detail::subtable(root, "model")) {
    detail::reject_unknown_keys(*m, {"latent_dim", "encoder_channels", "decoder_channels", "kernel_size"}, "[model]");
    detail::read_scalar(*m, "latent_dim", c.latent_dim, "model");
    detail::read_array(*m, "encoder_channels", c.encoder_channels, "model");
    detail::read_array(*m, "decoder_channels", c.decoder_channels, "model");
    detail::read_scalar(*m, "kernel_size", c.kernel_size, "model");
  }

  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.out_dir) c.out_dir = *overrides.out_dir;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path, const ConfigOverrides& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

// ---------------------------------------------------------------------------
// Geometry, seeds and artifact locations
// ---------------------------------------------------------------------------

struct Geometry {
  std::string tag;
  Index rf_chains = 0;  // hybrid only
};

inline std::vector<Geometry> geometries(const ExperimentConfig& c) {
  std::vector<Geometry> out;
  if (c.scenario == Scenario::Hybrid) {
    for (Index m : c.rf_chains) out.push_back({"hybrid_n" + std::to_string(c.n_antennas) + "_nr" + std::to_string(m), m});
  } else {
    out.push_back({"wideband_nc" + std::to_string(c.n_subcarriers) + "_nt" + std::to_string(c.n_timeslots) + "_np" +
                       std::to_string(c.n_pilots) + (c.layout == PilotLayout::Lattice ? "_lattice" : "_random"),
                   0});
  }
  return out;
}

/// Stable 64-bit FNV-1a hash used to key seeds by name.
inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t snr_key(double snr_db) { return static_cast<std::uint64_t>(std::llround(snr_db * 1000.0) + (1LL << 40)); }

struct Paths {
  fs::path root;

  fs::path dataset(Split s) const { return root / "data" / to_string(s); }
  fs::path geometry(const std::string& tag) const { return root / tag; }
  fs::path operator_stem(const std::string& tag) const { return geometry(tag) / "operator"; }
  fs::path corpus(const std::string& tag, Variant v, Split s) const {
    return geometry(tag) / "corpus" / (to_string(v) + "_" + to_string(s));
  }
  fs::path model(const std::string& tag, Variant v) const { return geometry(tag) / "models" / to_string(v); }
  fs::path loss_curve(const std::string& tag, Variant v) const {
    return geometry(tag) / "models" / (to_string(v) + "_loss.csv");
  }
  fs::path report(const std::string& name) const { return root / "results" / name; }
};

inline ObservationOperator evaluation_operator(const ExperimentConfig& c, const Geometry& g) {
  const std::uint64_t seed = derive_seed(c.seed, {0x0b5e7ULL, name_hash(g.tag)});
  if (c.scenario == Scenario::Hybrid) return io::quantize(build_phase_shift_operator(g.rf_chains, c.n_antennas, seed));
  return build_pilot_selection_operator(c.layout, c.n_pilots, c.n_subcarriers, c.n_timeslots, seed, c.lattice);
}

/// Operators for varying-operator training: fresh phase shifts, or fresh
/// random pilot positions on the grid.
inline OperatorFactory training_operator_factory(const ExperimentConfig& c, const Geometry& g) {
  if (c.scenario == Scenario::Hybrid) {
    const Index m = g.rf_chains, n = c.n_antennas;
    return [m, n](std::uint64_t seed) { return io::quantize(build_phase_shift_operator(m, n, seed)); };
  }
  const Index p = c.n_pilots, nc = c.n_subcarriers, nt = c.n_timeslots;
  return [p, nc, nt](std::uint64_t seed) {
    return build_pilot_selection_operator(PilotLayout::Random, p, nc, nt, seed);
  };
}

inline TrainConfig training_config(const ExperimentConfig& c, const Geometry& g, Variant v) {
  TrainConfig t;
  t.batch_size = c.batch_size;
  t.epochs = c.epochs;
  t.learning_rate = c.learning_rate;
  t.snr = c.train_snr;
  t.seed = derive_seed(c.seed, {0x7a1aULL, name_hash(g.tag), name_hash(to_string(v))});
  t.resampling = v == Variant::RealVaryingA ? OperatorResampling::PerIteration : OperatorResampling::Fixed;
  return t;
}

inline std::uint64_t model_init_seed(const ExperimentConfig& c, const Geometry& g, Variant v) {
  return derive_seed(c.seed, {0x1417ULL, name_hash(g.tag), name_hash(to_string(v))});
}

inline std::uint64_t dataset_seed(const ExperimentConfig& c, Split s) {
  return derive_seed(c.seed, {0xda7aULL, name_hash(to_string(s))});
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

inline io::Json generator_json(const ExperimentConfig& c) {
  io::Json j;
  j["scenario"] = to_string(c.scenario);
  if (c.scenario == Scenario::Hybrid) {
    const SpatialPrior p;
    j["n_antennas"] = c.n_antennas;
    j["angle_range_rad"] = {p.min_angle, p.max_angle};
    j["angular_spread_deg"] = c.angular_spread_deg;
    j["angular_power_spectrum"] = "laplacian";
    j["quadrature_points"] = c.quadrature_points;
  } else {
    const WidebandPrior p;
    j["paths"] = {p.min_paths, p.max_paths};
    j["max_delay_s"] = p.max_delay;
    j["delay_decay_s"] = p.delay_decay;
    j["velocity_kmh"] = {p.min_velocity_kmh, p.max_velocity_kmh};
    j["indoor_probability"] = p.indoor_probability;
    j["indoor_attenuation_db"] = p.indoor_attenuation_db;
  }
  return j;
}

inline ChannelDataset generate_split(const ExperimentConfig& c, Split s) {
  const Index n = s == Split::Train ? c.n_train : (s == Split::Validation ? c.n_val : c.n_test);
  if (c.scenario == Scenario::Hybrid) {
    SpatialPrior prior;
    prior.angular_spread = c.angular_spread_deg * kPi / 180.0;
    prior.quadrature_points = c.quadrature_points;
    return sample_spatial_channels(n, c.n_antennas, dataset_seed(c, s), prior, s);
  }
  WidebandGrid grid;
  grid.n_subcarriers = c.n_subcarriers;
  grid.n_timeslots = c.n_timeslots;
  return sample_wideband_channels(n, dataset_seed(c, s), WidebandPrior{}, grid, s);
}

/// Writes the three channel splits, one evaluation operator per geometry and,
/// for real variants, the recorded observation streams they train on.
inline void gen_data(const ExperimentConfig& c, const Log& log = {}) {
  c.validate();
  const Paths paths{c.out_dir};
  std::map<Split, ChannelDataset> sets;
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    sets[s] = generate_split(c, s);
    // the stored float32 values are what every later stage sees
    sets[s].channels = io::round_to_f32(sets[s].channels);
    io::save_dataset(paths.dataset(s), sets[s], generator_json(c));
    if (log) log("wrote " + to_string(s) + " split: " + std::to_string(sets[s].size()) + " samples");
  }
  for (const auto& g : geometries(c)) {
    const auto op = evaluation_operator(c, g);
    io::save_operator(paths.operator_stem(g.tag), op);
    for (Variant v : c.variants()) {
      if (!is_real_variant(v)) continue;
      const auto tcfg = training_config(c, g, v);
      auto sources = make_training_sources(v, sets[Split::Train].channels, sets[Split::Validation].channels, op,
                                           training_operator_factory(c, g), tcfg);
      auto train_stream = record_training_stream(*sources.train, tcfg.epochs, tcfg.batch_size, tcfg.seed);
      train_stream.observations = io::round_to_f32(train_stream.observations);
      io::save_corpus(paths.corpus(g.tag, v, Split::Train), train_stream);
      auto val_stream = record_evaluation_stream(*sources.validation, tcfg.batch_size);
      val_stream.observations = io::round_to_f32(val_stream.observations);
      io::save_corpus(paths.corpus(g.tag, v, Split::Validation), val_stream);
      if (log)
        log(g.tag + ": recorded " + std::to_string(train_stream.epochs()) + " epochs of observations for " +
            to_string(v) + " (" + std::to_string(train_stream.operators.size()) + " operators)");
    }
  }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainedModel {
  std::string geometry;
  Variant variant;
  TrainResult result;
};

inline void require_artifact(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw IoError("missing artifact " + p.string() + " (" + hint + ")");
}

/// Trains one model. Real variants read only their recorded observation
/// streams; the noisy variant reads the channel splits.
inline TrainedModel train_one(const ExperimentConfig& c, const Geometry& g, Variant v, const Log& log = {}) {
  const Paths paths{c.out_dir};
  const auto tcfg = training_config(c, g, v);
  VaeModel model(c.architecture(), v, model_init_seed(c, g, v));
  auto on_epoch = [&](const EpochRecord& r) {
    if (log)
      log(g.tag + " " + to_string(v) + " epoch " + std::to_string(r.epoch) + ": train " + io::format_double(r.train_loss) +
          ", validation " + io::format_double(r.val_loss));
  };
  TrainResult result;
  if (is_real_variant(v)) {
    const auto train_stem = paths.corpus(g.tag, v, Split::Train);
    const auto val_stem = paths.corpus(g.tag, v, Split::Validation);
    require_artifact(train_stem.string() + ".json", "run gen-data first");
    require_artifact(val_stem.string() + ".json", "run gen-data first");
    RecordedObservations train_source(io::load_corpus(train_stem));
    RecordedObservations val_source(io::load_corpus(val_stem));
    if (train_source.corpus().epochs() < tcfg.epochs)
      throw IoError("observation stream " + train_stem.string() + " holds " +
                    std::to_string(train_source.corpus().epochs()) + " epochs but " + std::to_string(tcfg.epochs) +
                    " are configured; rerun gen-data");
    result = train(model, train_source, val_source, tcfg, on_epoch);
  } else {
    require_artifact(io::dataset_paths(paths.dataset(Split::Train)).sidecar, "run gen-data first");
    const auto train_set = io::load_dataset(paths.dataset(Split::Train));
    const auto val_set = io::load_dataset(paths.dataset(Split::Validation));
    const auto op = io::load_operator(paths.operator_stem(g.tag));
    if (train_set.dimension() != c.dimension()) throw ConfigError("dataset dimension does not match the configuration");
    result = train(model, train_set, val_set, op, training_operator_factory(c, g), tcfg, on_epoch);
  }
  io::Json extra{{"best_epoch", result.best_epoch},
                 {"best_val_loss", result.best_val_loss},
                 {"iterations", result.iterations},
                 {"geometry", g.tag}};
  io::save_model(paths.model(g.tag, v), model, extra);
  io::save_loss_curve(paths.loss_curve(g.tag, v), result.curve);
  return {g.tag, v, result};
}

inline std::vector<TrainedModel> train_all(const ExperimentConfig& c, const Log& log = {}) {
  c.validate();
  std::vector<TrainedModel> out;
  for (const auto& g : geometries(c))
    for (Variant v : c.variants()) out.push_back(train_one(c, g, v, log));
  return out;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct NmseRow {
  std::string estimator;
  double snr_db = 0.0;
  std::string geometry;
  double nmse = 0.0;
  Index n_test = 0;
  std::uint64_t seed = 0;
};

struct NmseReport {
  std::vector<NmseRow> rows;

  static constexpr const char* kHeader = "estimator,snr_db,geometry,nmse,n_test,seed";

  std::string to_csv() const {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows)
      out += r.estimator + "," + io::format_double(r.snr_db) + "," + r.geometry + "," + io::format_double(r.nmse) + "," +
             std::to_string(r.n_test) + "," + std::to_string(r.seed) + "\n";
    return out;
  }

  std::optional<double> find(const std::string& estimator, double snr_db, const std::string& geometry) const {
    for (const auto& r : rows)
      if (r.estimator == estimator && r.snr_db == snr_db && r.geometry == geometry) return r.nmse;
    return std::nullopt;
  }

  double at(const std::string& estimator, double snr_db, const std::string& geometry) const {
    const auto v = find(estimator, snr_db, geometry);
    if (!v) throw InvalidParameter("report has no row for " + estimator + " at " + io::format_double(snr_db) + " dB on " + geometry);
    return *v;
  }
};

/// Runs body(0..count-1) on up to hardware_concurrency workers. The first
/// exception is rethrown after all workers finish.
inline void parallel_for(Index count, const std::function<void(Index)>& body) {
  const auto hw = std::max(1u, std::thread::hardware_concurrency());
  const auto workers = static_cast<Index>(std::min<std::size_t>(hw, static_cast<std::size_t>(std::max<Index>(count, 1))));
  if (workers <= 1) {
    for (Index i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> threads;
  for (Index w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      try {
        for (Index i = next++; i < count; i = next++) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
        next = count;
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace detail {

/// A^H-side observations of `channels` at one SNR with a seeded noise draw.
inline CMatrix observe_all(const CMatrix& channels, const ObservationOperator& op, double noise_variance,
                           std::uint64_t seed) {
  Rng rng = make_rng(seed);
  CMatrix y = op.apply(channels);
  for (Index j = 0; j < y.cols(); ++j) y.col(j) += complex_normal_vector(rng, op.rows(), noise_variance);
  return y;
}

}  // namespace detail

/// NMSE of every configured estimator at every (geometry, SNR) pair. All
/// estimators see the same noisy test observations; noise is drawn afresh
/// for every SNR. Rows are ordered by geometry, estimator, then SNR as given.
inline NmseReport evaluate_grid(const ExperimentConfig& c, const std::vector<Geometry>& geoms,
                                const std::vector<double>& snrs, const Log& log = {}) {
  c.validate();
  const Paths paths{c.out_dir};
  require_artifact(io::dataset_paths(paths.dataset(Split::Test)).sidecar, "run gen-data first");
  const auto test = io::load_dataset(paths.dataset(Split::Test));
  if (test.dimension() != c.dimension()) throw ConfigError("test set dimension does not match the configuration");

  std::optional<ChannelDataset> train_set;
  if (c.uses("global_cov") || c.uses("global_li")) train_set = io::load_dataset(paths.dataset(Split::Train));
  std::optional<CMatrix> global_cov;
  if (c.uses("global_cov")) global_cov = sample_covariance(train_set->channels);
  std::optional<CMatrix> dictionary;
  if (c.uses("genie_omp")) dictionary = oversampled_dft_dictionary(c.dimension());

  NmseReport report;
  for (const auto& g : geoms) {
    const auto op = io::load_operator(paths.operator_stem(g.tag));
    std::map<std::string, VaeModel> models;
    for (const auto& e : c.estimators)
      if (is_vae_estimator(e)) {
        const auto stem = paths.model(g.tag, variant_from_string(e));
        require_artifact(stem.string() + ".json", "run train first");
        models.emplace(e, io::load_model(stem));
      }
    const std::uint64_t geo_seed = derive_seed(c.seed, {0xe7a1ULL, name_hash(g.tag)});
    std::vector<CMatrix> observations;
    for (double snr : snrs)
      observations.push_back(detail::observe_all(test.channels, op, noise_variance_from_snr_db(snr),
                                                 derive_seed(geo_seed, snr_key(snr))));

    const auto n_est = static_cast<Index>(c.estimators.size());
    const auto n_snr = static_cast<Index>(snrs.size());
    std::vector<double> cells(static_cast<std::size_t>(n_est * n_snr));
    parallel_for(n_est * n_snr, [&](Index cell) {
      const auto& est = c.estimators[static_cast<std::size_t>(cell / n_snr)];
      const auto s = static_cast<std::size_t>(cell % n_snr);
      const NoiseModel noise{noise_variance_from_snr_db(snrs[s])};
      const CMatrix& y = observations[s];
      CMatrix h_hat(test.dimension(), test.size());
      if (est == "genie_cme") {
        for (Index i = 0; i < test.size(); ++i)
          h_hat.col(i) = LmmseFilter(test.genie_covariance(i).matrix, op, noise.variance).apply(CVector(y.col(i)));
      } else if (est == "global_cov") {
        h_hat = LmmseFilter(*global_cov, op, noise.variance).apply(y);
      } else if (est == "genie_omp") {
        for (Index i = 0; i < test.size(); ++i)
          h_hat.col(i) = estimate_genie_omp(y.col(i), op, noise, test.sample(i), *dictionary).estimate;
      } else if (est == "li") {
        for (Index i = 0; i < test.size(); ++i) h_hat.col(i) = estimate_li(y.col(i), op, c.n_subcarriers).estimate;
      } else if (est == "global_li") {
        const CMatrix y_train = detail::observe_all(train_set->channels, op, noise.variance,
                                                    derive_seed(geo_seed, {snr_key(snrs[s]), 0x6e0b1ULL}));
        CMatrix li(train_set->dimension(), train_set->size());
        for (Index i = 0; i < train_set->size(); ++i) li.col(i) = estimate_li(y_train.col(i), op, c.n_subcarriers).estimate;
        h_hat = LmmseFilter(li_covariance(li, noise.variance), op, noise.variance).apply(y);
      } else {
        h_hat = estimate_vae_batch(models.at(est), y, op, noise);
      }
      const double value = nmse(h_hat, test.channels);
      if (!std::isfinite(value)) throw NumericalError(est + " produced a non-finite NMSE at " + io::format_double(snrs[s]) + " dB");
      cells[static_cast<std::size_t>(cell)] = value;
    });
    for (Index e = 0; e < n_est; ++e)
      for (Index s = 0; s < n_snr; ++s) {
        NmseRow row{c.estimators[static_cast<std::size_t>(e)], snrs[static_cast<std::size_t>(s)], g.tag,
                    cells[static_cast<std::size_t>(e * n_snr + s)], test.size(), c.seed};
        if (log) log(g.tag + " " + row.estimator + " @ " + io::format_double(row.snr_db) + " dB: NMSE " + io::format_double(row.nmse));
        report.rows.push_back(std::move(row));
      }
  }
  return report;
}

/// gnuplot data: one block per geometry (separated by two blank lines, so
/// `index` selects a geometry), first column `x`, one column per estimator.
inline std::string gnuplot_by_snr(const NmseReport& report, const ExperimentConfig& c, const std::vector<Geometry>& geoms,
                                  const std::vector<double>& snrs) {
  std::string out;
  for (std::size_t gi = 0; gi < geoms.size(); ++gi) {
    if (gi > 0) out += "\n\n";
    out += "# geometry " + geoms[gi].tag + "\n# snr_db";
    for (const auto& e : c.estimators) out += " " + e;
    out += "\n";
    for (double snr : snrs) {
      out += io::format_double(snr);
      for (const auto& e : c.estimators) out += " " + io::format_double(report.at(e, snr, geoms[gi].tag));
      out += "\n";
    }
  }
  return out;
}

inline std::string gnuplot_by_rf(const NmseReport& report, const ExperimentConfig& c, const std::vector<Geometry>& geoms,
                                 double snr) {
  std::string out = "# snr_db " + io::format_double(snr) + "\n# rf_chains";
  for (const auto& e : c.estimators) out += " " + e;
  out += "\n";
  for (const auto& g : geoms) {
    out += std::to_string(g.rf_chains);
    for (const auto& e : c.estimators) out += " " + io::format_double(report.at(e, snr, g.tag));
    out += "\n";
  }
  return out;
}

inline void write_report(const fs::path& stem, const NmseReport& report, const std::string& gnuplot) {
  io::write_text(stem.string() + ".csv", report.to_csv());
  io::write_text(stem.string() + ".dat", gnuplot);
}

/// Every geometry at every configured SNR -> results/nmse.{csv,dat}.
inline NmseReport evaluate(const ExperimentConfig& c, const Log& log = {}) {
  const auto geoms = geometries(c);
  auto report = evaluate_grid(c, geoms, c.snr_db, log);
  write_report(Paths{c.out_dir}.report("nmse"), report, gnuplot_by_snr(report, c, geoms, c.snr_db));
  return report;
}

/// The first geometry over the SNR grid -> results/snr_sweep.{csv,dat}.
inline NmseReport sweep_snr(const ExperimentConfig& c, const Log& log = {}) {
  const std::vector<Geometry> geoms{geometries(c).front()};
  auto report = evaluate_grid(c, geoms, c.snr_db, log);
  write_report(Paths{c.out_dir}.report("snr_sweep"), report, gnuplot_by_snr(report, c, geoms, c.snr_db));
  return report;
}

/// Every RF-chain count at the sweep SNR -> results/rf_sweep.{csv,dat}.
inline NmseReport sweep_rf(const ExperimentConfig& c, const Log& log = {}) {
  if (c.scenario != Scenario::Hybrid) throw ConfigError("the RF-chain sweep applies to the hybrid scenario only");
  const auto geoms = geometries(c);
  auto report = evaluate_grid(c, geoms, {c.rf_sweep_snr_db}, log);
  write_report(Paths{c.out_dir}.report("rf_sweep"), report, gnuplot_by_rf(report, c, geoms, c.rf_sweep_snr_db));
  return report;
}

}  // namespace vaece::bench
