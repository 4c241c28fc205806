#pragma once

// On-disk formats. Complex arrays are little-endian float32 interleaved
// (re, im), row-major with one sample per row, next to a JSON sidecar.
// Model checkpoints keep a float64 payload so that a save/load round trip
// is exact.

#include "vaece/channel_models.hpp"
#include "vaece/core.hpp"
#include "vaece/observation.hpp"
#include "vaece/train.hpp"
#include "vaece/vae.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

namespace vaece::io {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// File-access audit
// ---------------------------------------------------------------------------

/// Records every file the I/O layer opens. When a log path is set, each
/// access is also appended to that file as "<mode> <path>".
class FileAudit {
 public:
  static void enable(const fs::path& log_path) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    s.log_path = log_path;
  }

  static void disable() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    s.log_path.clear();
  }

  static void record(const char* mode, const fs::path& path) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    const std::string canonical = fs::weakly_canonical(path).string();
    s.entries.push_back(std::string(mode) + " " + canonical);
    if (!s.log_path.empty()) {
      std::ofstream log(s.log_path, std::ios::app);
      log << mode << ' ' << canonical << '\n';
    }
  }

  static std::vector<std::string> entries() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    return s.entries;
  }

  static void clear() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    s.entries.clear();
  }

  /// True if `path` was opened for reading since the last clear().
  static bool was_read(const fs::path& path) {
    const std::string needle = "read " + fs::weakly_canonical(path).string();
    for (const auto& e : entries())
      if (e == needle) return true;
    return false;
  }

 private:
  struct State {
    std::mutex mutex;
    fs::path log_path;
    std::vector<std::string> entries;
  };
  static State& state() {
    static State s;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Primitive readers and writers
// ---------------------------------------------------------------------------

inline std::ofstream open_write(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  FileAudit::record("write", path);
  return out;
}

inline std::ifstream open_read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  FileAudit::record("read", path);
  return in;
}

inline void write_text(const fs::path& path, const std::string& text) {
  auto out = open_write(path);
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  auto in = open_read(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

namespace detail {

template <class T>
void put_le(std::vector<char>& buf, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.insert(buf.end(), bytes, bytes + sizeof(T));
}

template <class T>
T get_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline std::vector<char> read_bytes(const fs::path& path) {
  auto in = open_read(path);
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const fs::path& path, const std::vector<char>& buf) {
  auto out = open_write(path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

/// Writes the columns of `x` (one sample each) as rows of float32 (re, im) pairs.
inline void write_complex_f32(const fs::path& path, const CMatrix& x) {
  std::vector<char> buf;
  buf.reserve(static_cast<std::size_t>(x.size()) * 8);
  for (Index c = 0; c < x.cols(); ++c)
    for (Index r = 0; r < x.rows(); ++r) {
      detail::put_le(buf, static_cast<float>(x(r, c).real()));
      detail::put_le(buf, static_cast<float>(x(r, c).imag()));
    }
  detail::write_bytes(path, buf);
}

/// Inverse of write_complex_f32: returns a rows x cols matrix.
inline CMatrix read_complex_f32(const fs::path& path, Index rows, Index cols) {
  const auto buf = detail::read_bytes(path);
  if (static_cast<Index>(buf.size()) != rows * cols * 8)
    throw IoError("unexpected size of " + path.string() + ": " + std::to_string(buf.size()) + " bytes");
  CMatrix x(rows, cols);
  const char* p = buf.data();
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r, p += 8)
      x(r, c) = {detail::get_le<float>(p), detail::get_le<float>(p + 4)};
  return x;
}

/// Rounds every entry to the nearest float32 pair, as a save/load cycle would.
inline CMatrix round_to_f32(const CMatrix& x) {
  CMatrix out(x.rows(), x.cols());
  const double* src = reinterpret_cast<const double*>(x.data());
  double* dst = reinterpret_cast<double*>(out.data());
  for (Index i = 0; i < 2 * x.size(); ++i) dst[i] = static_cast<double>(static_cast<float>(src[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetPaths {
  fs::path data;
  fs::path sidecar;
};

/// `<stem>.bin` and `<stem>.json`.
inline DatasetPaths dataset_paths(const fs::path& stem) {
  return {fs::path(stem.string() + ".bin"), fs::path(stem.string() + ".json")};
}

inline Json to_json(const WidebandGrid& g) {
  return {{"n_subcarriers", g.n_subcarriers},
          {"n_timeslots", g.n_timeslots},
          {"carrier_frequency", g.carrier_frequency},
          {"bandwidth", g.bandwidth},
          {"slot_duration", g.slot_duration}};
}

inline WidebandGrid wideband_grid_from_json(const Json& j) {
  WidebandGrid g;
  g.n_subcarriers = j.at("n_subcarriers").get<Index>();
  g.n_timeslots = j.at("n_timeslots").get<Index>();
  g.carrier_frequency = j.at("carrier_frequency").get<double>();
  g.bandwidth = j.at("bandwidth").get<double>();
  g.slot_duration = j.at("slot_duration").get<double>();
  return g;
}

/// `generator` is free-form provenance (prior parameters) stored verbatim.
inline void save_dataset(const fs::path& stem, const ChannelDataset& ds, const Json& generator = Json::object()) {
  const auto paths = dataset_paths(stem);
  write_complex_f32(paths.data, ds.channels);
  Json j;
  j["format"] = "complex64-le-interleaved-row-major";
  j["shape"] = {ds.size(), ds.dimension()};
  j["split"] = to_string(ds.split);
  j["seed"] = ds.rng_seed;
  j["normalization_scale"] = ds.normalization_scale;
  j["generator"] = generator;
  if (ds.hybrid) {
    Json h;
    h["n_antennas"] = ds.hybrid->n_antennas;
    h["quadrature_points"] = ds.hybrid->quadrature_points;
    std::vector<double> gain, angle, spread;
    for (const auto& c : ds.hybrid->clusters) {
      gain.push_back(c.path_gain);
      angle.push_back(c.angle_of_arrival);
      spread.push_back(c.angular_spread);
    }
    h["path_gain"] = gain;
    h["angle_of_arrival"] = angle;
    h["angular_spread"] = spread;
    j["scenario"] = "hybrid";
    j["hybrid"] = h;
  }
  if (ds.wideband) {
    j["scenario"] = "wideband";
    j["wideband"] = to_json(*ds.wideband);
  }
  write_json(paths.sidecar, j);
}

inline Json load_dataset_sidecar(const fs::path& stem) { return read_json(dataset_paths(stem).sidecar); }

inline ChannelDataset load_dataset(const fs::path& stem) {
  const auto paths = dataset_paths(stem);
  const Json j = read_json(paths.sidecar);
  try {
    ChannelDataset ds;
    const auto t = j.at("shape").at(0).get<Index>();
    const auto n = j.at("shape").at(1).get<Index>();
    ds.channels = read_complex_f32(paths.data, n, t);
    ds.split = split_from_string(j.at("split").get<std::string>());
    ds.rng_seed = j.at("seed").get<std::uint64_t>();
    ds.normalization_scale = j.at("normalization_scale").get<double>();
    if (j.contains("hybrid")) {
      const auto& h = j["hybrid"];
      HybridMetadata meta;
      meta.n_antennas = h.at("n_antennas").get<Index>();
      meta.quadrature_points = h.at("quadrature_points").get<Index>();
      const auto gain = h.at("path_gain").get<std::vector<double>>();
      const auto angle = h.at("angle_of_arrival").get<std::vector<double>>();
      const auto spread = h.at("angular_spread").get<std::vector<double>>();
      if (gain.size() != static_cast<std::size_t>(t) || angle.size() != gain.size() || spread.size() != gain.size())
        throw IoError("cluster metadata does not match sample count in " + paths.sidecar.string());
      for (std::size_t i = 0; i < gain.size(); ++i) meta.clusters.push_back({gain[i], angle[i], spread[i]});
      ds.hybrid = std::move(meta);
    }
    if (j.contains("wideband")) ds.wideband = wideband_grid_from_json(j["wideband"]);
    return ds;
  } catch (const Json::exception& e) {
    throw IoError("malformed dataset sidecar " + paths.sidecar.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Observation operators
// ---------------------------------------------------------------------------

/// Phase-shift matrices are rounded to float32 so that an operator behaves
/// identically before and after a save/load cycle.
inline ObservationOperator quantize(const ObservationOperator& op) {
  if (op.kind() == OperatorKind::PilotSelection) return op;
  return ObservationOperator::phase_shift(round_to_f32(op.matrix()));
}

inline Json operator_header(const ObservationOperator& op) {
  Json j;
  j["kind"] = op.kind() == OperatorKind::PhaseShift ? "phase_shift" : "pilot_selection";
  j["rows"] = op.rows();
  j["cols"] = op.cols();
  if (op.kind() == OperatorKind::PilotSelection) j["pilots"] = op.pilots();
  return j;
}

/// `<stem>.json` (metadata) plus `<stem>.bin` for phase-shift matrices,
/// stored one row per line of the row-major payload.
inline void save_operator(const fs::path& stem, const ObservationOperator& op) {
  Json j = operator_header(op);
  if (op.kind() == OperatorKind::PhaseShift) {
    write_complex_f32(stem.string() + ".bin", op.matrix().transpose());
    j["payload"] = fs::path(stem.string() + ".bin").filename().string();
  }
  write_json(stem.string() + ".json", j);
}

inline ObservationOperator load_operator(const fs::path& stem) {
  const Json j = read_json(stem.string() + ".json");
  try {
    const auto kind = j.at("kind").get<std::string>();
    const auto rows = j.at("rows").get<Index>();
    const auto cols = j.at("cols").get<Index>();
    if (kind == "pilot_selection") return ObservationOperator::pilot_selection(j.at("pilots").get<std::vector<Index>>(), cols);
    if (kind == "phase_shift") {
      const CMatrix at = read_complex_f32(stem.parent_path() / j.at("payload").get<std::string>(), cols, rows);
      return ObservationOperator::phase_shift(at.transpose());
    }
    throw IoError("unknown operator kind: " + kind);
  } catch (const Json::exception& e) {
    throw IoError("malformed operator file " + stem.string() + ".json: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Observation corpora
// ---------------------------------------------------------------------------

/// `<stem>.json` (batch table, pilot sets), `<stem>.obs.bin` (observations),
/// `<stem>.noise.bin` (float64 noise variances) and, for phase-shift
/// operators, `<stem>.ops.bin` (one row-major matrix per row).
inline void save_corpus(const fs::path& stem, const ObservationCorpus& corpus) {
  corpus.validate();
  const auto& first = corpus.operators.front();
  Json j;
  j["rows"] = first.rows();
  j["cols"] = first.cols();
  j["kind"] = first.kind() == OperatorKind::PhaseShift ? "phase_shift" : "pilot_selection";
  j["samples_per_epoch"] = corpus.samples_per_epoch;
  j["epoch_begin"] = corpus.epoch_begin;
  Json batches = Json::array();
  for (const auto& b : corpus.batches) batches.push_back({b.begin, b.size, b.op_index});
  j["batches"] = batches;
  j["n_operators"] = corpus.operators.size();
  write_complex_f32(stem.string() + ".obs.bin", corpus.observations);
  std::vector<char> noise;
  for (Index i = 0; i < corpus.noise_variances.size(); ++i) detail::put_le(noise, corpus.noise_variances[i]);
  detail::write_bytes(stem.string() + ".noise.bin", noise);
  if (first.kind() == OperatorKind::PhaseShift) {
    CMatrix stacked(first.rows() * first.cols(), static_cast<Index>(corpus.operators.size()));
    for (std::size_t i = 0; i < corpus.operators.size(); ++i) {
      const auto& op = corpus.operators[i];
      require(op.kind() == OperatorKind::PhaseShift && op.rows() == first.rows() && op.cols() == first.cols(),
              "corpus operators differ in kind or shape");
      const CMatrix row_major = op.matrix().transpose();
      stacked.col(static_cast<Index>(i)) = Eigen::Map<const CVector>(row_major.data(), row_major.size());
    }
    write_complex_f32(stem.string() + ".ops.bin", stacked);
  } else {
    Json pilots = Json::array();
    for (const auto& op : corpus.operators) pilots.push_back(op.pilots());
    j["pilots"] = pilots;
  }
  write_json(stem.string() + ".json", j);
}

inline ObservationCorpus load_corpus(const fs::path& stem) {
  const Json j = read_json(stem.string() + ".json");
  try {
    ObservationCorpus c;
    const auto m = j.at("rows").get<Index>();
    const auto n = j.at("cols").get<Index>();
    const auto n_ops = j.at("n_operators").get<Index>();
    c.samples_per_epoch = j.at("samples_per_epoch").get<Index>();
    c.epoch_begin = j.at("epoch_begin").get<std::vector<Index>>();
    Index columns = 0;
    for (const auto& b : j.at("batches")) {
      c.batches.push_back({b.at(0).get<Index>(), b.at(1).get<Index>(), b.at(2).get<Index>()});
      columns += c.batches.back().size;
    }
    c.observations = read_complex_f32(stem.string() + ".obs.bin", m, columns);
    const auto noise = detail::read_bytes(stem.string() + ".noise.bin");
    if (static_cast<Index>(noise.size()) != columns * 8) throw IoError("noise variance file size mismatch: " + stem.string());
    c.noise_variances.resize(columns);
    for (Index i = 0; i < columns; ++i) c.noise_variances[i] = detail::get_le<double>(noise.data() + 8 * i);
    if (j.at("kind").get<std::string>() == "phase_shift") {
      const CMatrix stacked = read_complex_f32(stem.string() + ".ops.bin", m * n, n_ops);
      for (Index i = 0; i < n_ops; ++i) {
        const CVector col = stacked.col(i);
        const CMatrix at = Eigen::Map<const CMatrix>(col.data(), n, m);
        c.operators.push_back(ObservationOperator::phase_shift(at.transpose()));
      }
    } else {
      for (const auto& p : j.at("pilots"))
        c.operators.push_back(ObservationOperator::pilot_selection(p.get<std::vector<Index>>(), n));
    }
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw IoError("malformed corpus file " + stem.string() + ".json: " + e.what());
  } catch (const InvalidParameter& e) {
    throw IoError("inconsistent corpus " + stem.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

inline Json to_json(const Architecture& a) {
  return {{"n", a.n},
          {"covariance", a.covariance == StructureKind::Circulant ? "circulant" : "block_toeplitz"},
          {"n_timeslots", a.n_timeslots},
          {"n_subcarriers", a.n_subcarriers},
          {"latent_dim", a.latent_dim},
          {"encoder_channels", a.encoder_channels},
          {"decoder_channels", a.decoder_channels},
          {"kernel_size", a.kernel_size},
          {"zero_init_encoder_head", a.zero_init_encoder_head}};
}

inline Architecture architecture_from_json(const Json& j) {
  Architecture a;
  a.n = j.at("n").get<Index>();
  const auto cov = j.at("covariance").get<std::string>();
  if (cov == "circulant") a.covariance = StructureKind::Circulant;
  else if (cov == "block_toeplitz") a.covariance = StructureKind::BlockToeplitz;
  else throw IoError("unknown covariance structure: " + cov);
  a.n_timeslots = j.at("n_timeslots").get<Index>();
  a.n_subcarriers = j.at("n_subcarriers").get<Index>();
  a.latent_dim = j.at("latent_dim").get<Index>();
  a.encoder_channels = j.at("encoder_channels").get<std::vector<Index>>();
  a.decoder_channels = j.at("decoder_channels").get<std::vector<Index>>();
  a.kernel_size = j.at("kernel_size").get<Index>();
  a.zero_init_encoder_head = j.at("zero_init_encoder_head").get<bool>();
  return a;
}

/// `<stem>.json` (architecture, variant, tensor shapes) + `<stem>.bin`
/// (float64 little-endian, tensors in VaeModel::state() order, column-major).
inline void save_model(const fs::path& stem, VaeModel& model, const Json& extra = Json::object()) {
  Json j;
  j["architecture"] = to_json(model.architecture());
  j["variant"] = to_string(model.variant());
  j["dtype"] = "float64-le";
  j["payload"] = fs::path(stem.string() + ".bin").filename().string();
  j["extra"] = extra;
  Json shapes = Json::array();
  std::vector<char> buf;
  for (const RMatrix* t : model.state()) {
    shapes.push_back({t->rows(), t->cols()});
    for (Index i = 0; i < t->size(); ++i) detail::put_le(buf, t->data()[i]);
  }
  j["tensors"] = shapes;
  detail::write_bytes(stem.string() + ".bin", buf);
  write_json(stem.string() + ".json", j);
}

inline VaeModel load_model(const fs::path& stem) {
  const Json j = read_json(stem.string() + ".json");
  try {
    VaeModel model(architecture_from_json(j.at("architecture")), variant_from_string(j.at("variant").get<std::string>()), 0);
    const auto buf = detail::read_bytes(stem.parent_path() / j.at("payload").get<std::string>());
    const auto state = model.state();
    const auto& shapes = j.at("tensors");
    if (shapes.size() != state.size()) throw IoError("checkpoint tensor count does not match architecture");
    std::size_t offset = 0;
    for (std::size_t i = 0; i < state.size(); ++i) {
      RMatrix* t = state[i];
      if (shapes[i].at(0).get<Index>() != t->rows() || shapes[i].at(1).get<Index>() != t->cols())
        throw IoError("checkpoint tensor shape does not match architecture");
      if (offset + static_cast<std::size_t>(t->size()) * 8 > buf.size()) throw IoError("checkpoint payload truncated");
      for (Index k = 0; k < t->size(); ++k, offset += 8) t->data()[k] = detail::get_le<double>(buf.data() + offset);
    }
    if (offset != buf.size()) throw IoError("checkpoint payload has trailing bytes");
    return model;
  } catch (const Json::exception& e) {
    throw IoError("malformed checkpoint " + stem.string() + ".json: " + e.what());
  } catch (const InvalidParameter& e) {
    throw IoError("invalid checkpoint " + stem.string() + ".json: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV helpers
// ---------------------------------------------------------------------------

/// Shortest representation that reads back to the same double.
inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline void save_loss_curve(const fs::path& path, const std::vector<EpochRecord>& curve) {
  std::string text = "epoch,train_loss,val_loss\n";
  for (const auto& r : curve)
    text += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "\n";
  write_text(path, text);
}

}  // namespace vaece::io
