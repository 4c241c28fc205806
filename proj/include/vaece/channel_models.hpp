#pragma once

// Synthetic channel families: hybrid spatial SIMO channels drawn from a
// one-cluster Laplacian angular spectrum, and time-frequency wideband channels
// built from a parametric multipath sum.

#include "vaece/core.hpp"
#include "vaece/rng.hpp"

#include <Eigen/Eigenvalues>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace vaece {

// ---------------------------------------------------------------------------
// Spatial (hybrid) channels
// ---------------------------------------------------------------------------

struct ClusterDescriptor {
  double path_gain = 1.0;
  double angle_of_arrival = 0.0;  // radians, [-pi/2, pi/2)
  double angular_spread = 2.0 * kPi / 180.0;  // RMS spread, radians
};

struct SpatialChannelParams {
  ClusterDescriptor cluster;
  Index n_antennas = 32;
};

struct GenieCovariance {
  CMatrix matrix;
};

/// Prior over cluster descriptors used when sampling datasets.
struct SpatialPrior {
  double min_angle = -kPi / 3.0;
  double max_angle = kPi / 3.0;
  double angular_spread = 2.0 * kPi / 180.0;
  double path_gain = 1.0;
  Index quadrature_points = 4096;
};

/// Half-wavelength ULA steering vector, a_m = exp(j pi m sin(angle)).
inline CVector steering_vector(Index n_antennas, double angle) {
  CVector a(n_antennas);
  const double s = std::sin(angle);
  for (Index m = 0; m < n_antennas; ++m) a[m] = std::exp(kJ * (kPi * static_cast<double>(m) * s));
  return a;
}

/// Laplacian angular power density with RMS spread `spread`, unnormalized.
inline double laplacian_density(double angle, double center, double spread) {
  const double b = spread / std::numbers::sqrt2;
  return std::exp(-std::abs(angle - center) / b) / (2.0 * b);
}

namespace detail {

inline constexpr std::array<double, 4> kGaussNodes8 = {0.1834346424956498, 0.5255324099163290, 0.7966664774136267,
                                                       0.9602898564975363};
inline constexpr std::array<double, 4> kGaussWeights8 = {0.3626837833783620, 0.3137066458778873,
                                                         0.2223810344533745, 0.1012285362903763};

// Composite 8-point Gauss-Legendre rule on [lo, hi] with `panels` panels.
inline void append_gauss_panels(double lo, double hi, Index panels, std::vector<double>& nodes,
                                std::vector<double>& weights) {
  if (hi <= lo) return;
  const double width = (hi - lo) / static_cast<double>(panels);
  for (Index p = 0; p < panels; ++p) {
    const double mid = lo + (static_cast<double>(p) + 0.5) * width;
    const double half = 0.5 * width;
    for (std::size_t q = 0; q < kGaussNodes8.size(); ++q) {
      nodes.push_back(mid - half * kGaussNodes8[q]);
      weights.push_back(half * kGaussWeights8[q]);
      nodes.push_back(mid + half * kGaussNodes8[q]);
      weights.push_back(half * kGaussWeights8[q]);
    }
  }
}

// Fills a Hermitian Toeplitz matrix from its first column.
inline CMatrix hermitian_toeplitz(const CVector& first_column) {
  const Index n = first_column.size();
  CMatrix c(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) c(i, j) = i >= j ? first_column[i - j] : std::conj(first_column[j - i]);
  return c;
}

}  // namespace detail

/// C = int g(theta) a(theta) a(theta)^H dtheta over [-pi, pi], with g a
/// Laplacian density normalized so that tr(C) = N * path_gain.
///
/// The integrand has a derivative jump at the cluster center, so the domain is
/// split there and each side is integrated with composite Gauss-Legendre
/// panels. Support is truncated at 40 Laplace scale lengths (tail mass
/// below 1e-17). Only the first column is integrated; the Toeplitz structure
/// fills the rest.
inline GenieCovariance build_genie_covariance(const SpatialChannelParams& params, Index quadrature_points = 4096) {
  const auto& cl = params.cluster;
  require(cl.angular_spread > 0.0, "angular spread must be positive");
  require(cl.path_gain > 0.0, "path gain must be positive");
  require(params.n_antennas > 0, "antenna count must be positive");
  require(quadrature_points >= 512, "quadrature needs at least 512 points");

  const double b = cl.angular_spread / std::numbers::sqrt2;
  const double lo = std::max(-kPi, cl.angle_of_arrival - 40.0 * b);
  const double hi = std::min(kPi, cl.angle_of_arrival + 40.0 * b);
  const Index panels = std::max<Index>(1, quadrature_points / 16);

  std::vector<double> nodes, weights;
  nodes.reserve(static_cast<std::size_t>(quadrature_points));
  weights.reserve(static_cast<std::size_t>(quadrature_points));
  detail::append_gauss_panels(lo, cl.angle_of_arrival, panels, nodes, weights);
  detail::append_gauss_panels(cl.angle_of_arrival, hi, panels, nodes, weights);

  double mass = 0.0;
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    weights[q] *= laplacian_density(nodes[q], cl.angle_of_arrival, cl.angular_spread);
    mass += weights[q];
  }
  const double scale = cl.path_gain / mass;

  const Index n = params.n_antennas;
  CVector first_column = CVector::Zero(n);
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    const double s = std::sin(nodes[q]);
    const double w = weights[q] * scale;
    for (Index d = 0; d < n; ++d) first_column[d] += w * std::exp(kJ * (kPi * static_cast<double>(d) * s));
  }
  first_column[0] = first_column[0].real();

  GenieCovariance cov{detail::hermitian_toeplitz(first_column)};

  Eigen::SelfAdjointEigenSolver<CMatrix> eig(cov.matrix, Eigen::EigenvaluesOnly);
  const double trace = cov.matrix.trace().real();
  const double floor = -1e-10 * trace / static_cast<double>(n);
  if (eig.eigenvalues().minCoeff() < floor)
    throw NumericalError("covariance quadrature produced an indefinite matrix");
  return cov;
}

/// Hermitian square root with negative eigenvalues clamped to zero.
inline CMatrix psd_sqrt(const CMatrix& c) {
  Eigen::SelfAdjointEigenSolver<CMatrix> eig(c);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const RVector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().adjoint();
}

/// Projection onto the PSD cone by clamping negative eigenvalues.
inline CMatrix clamp_psd(const CMatrix& c) {
  Eigen::SelfAdjointEigenSolver<CMatrix> eig(c);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const RVector lambda = eig.eigenvalues().cwiseMax(0.0);
  CMatrix out = eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().adjoint();
  return (out + out.adjoint()) / 2.0;
}

// ---------------------------------------------------------------------------
// Wideband channels
// ---------------------------------------------------------------------------

struct PropagationPath {
  cdouble gain{1.0, 0.0};
  double delay = 0.0;    // seconds
  double doppler = 0.0;  // Hz
};

struct WidebandGrid {
  Index n_subcarriers = 12;
  Index n_timeslots = 14;
  double carrier_frequency = 2.1e9;
  double bandwidth = 180e3;
  double slot_duration = 1e-3 / 14.0;

  Index size() const { return n_subcarriers * n_timeslots; }
  double subcarrier_spacing() const { return bandwidth / static_cast<double>(n_subcarriers); }
  /// Baseband-relative frequency of subcarrier i.
  double frequency(Index i) const {
    return (static_cast<double>(i) - static_cast<double>(n_subcarriers - 1) / 2.0) * subcarrier_spacing();
  }
  /// Position of grid entry (subcarrier, timeslot) in vec(H).
  Index vec_index(Index subcarrier, Index timeslot) const { return timeslot * n_subcarriers + subcarrier; }
};

struct WidebandChannelParams {
  WidebandGrid grid;
  std::vector<PropagationPath> paths;
  double mt_velocity = 0.0;  // m/s
  bool indoor = false;
};

struct WidebandPrior {
  Index min_paths = 5;
  Index max_paths = 25;
  double max_delay = 5e-6;
  double delay_decay = 1e-6;
  double min_velocity_kmh = 0.0;
  double max_velocity_kmh = 300.0;
  double indoor_probability = 0.2;
  double indoor_attenuation_db = 10.0;
};

inline constexpr double kSpeedOfLight = 299792458.0;

/// H(i, k) = sum_l G_l exp(j 2 pi nu_l t_k) exp(-j 2 pi f_i tau_l), as an
/// N_c x N_t matrix.
inline CMatrix wideband_channel_matrix(const WidebandChannelParams& params) {
  const auto& g = params.grid;
  require(!params.paths.empty(), "wideband channel needs at least one path");
  require(g.n_subcarriers > 0 && g.n_timeslots > 0, "grid dimensions must be positive");
  require(g.subcarrier_spacing() > 0.0, "subcarrier spacing must be positive");
  CMatrix h = CMatrix::Zero(g.n_subcarriers, g.n_timeslots);
  for (const auto& p : params.paths) {
    require(p.delay >= 0.0, "path delays must be non-negative");
    for (Index k = 0; k < g.n_timeslots; ++k) {
      const cdouble time_phase = std::exp(kJ * (2.0 * kPi * p.doppler * static_cast<double>(k) * g.slot_duration));
      for (Index i = 0; i < g.n_subcarriers; ++i)
        h(i, k) += p.gain * time_phase * std::exp(-kJ * (2.0 * kPi * g.frequency(i) * p.delay));
    }
  }
  return h;
}

/// Column-major vec(H): subcarrier index runs fastest.
inline CVector vectorize(const CMatrix& h) { return h.reshaped(); }

inline CMatrix unvectorize(const CVector& h, Index n_subcarriers, Index n_timeslots) {
  require(h.size() == n_subcarriers * n_timeslots, "vector length does not match grid");
  return h.reshaped(n_subcarriers, n_timeslots);
}

inline WidebandChannelParams draw_wideband_params(const WidebandPrior& prior, const WidebandGrid& grid, Rng& rng) {
  require(prior.min_paths >= 1 && prior.max_paths >= prior.min_paths, "invalid path-count range");
  WidebandChannelParams params;
  params.grid = grid;
  const auto n_paths = static_cast<Index>(std::uniform_int_distribution<long long>(prior.min_paths, prior.max_paths)(rng));
  require(prior.max_velocity_kmh >= prior.min_velocity_kmh, "invalid velocity range");
  params.mt_velocity = uniform(rng, prior.min_velocity_kmh, prior.max_velocity_kmh) / 3.6;
  params.indoor = uniform(rng, 0.0, 1.0) < prior.indoor_probability;

  std::vector<double> delays(static_cast<std::size_t>(n_paths)), powers(delays.size());
  double total = 0.0;
  for (std::size_t l = 0; l < delays.size(); ++l) {
    delays[l] = uniform(rng, 0.0, prior.max_delay);
    powers[l] = std::exp(-delays[l] / prior.delay_decay);
    total += powers[l];
  }
  const double attenuation = params.indoor ? std::pow(10.0, -prior.indoor_attenuation_db / 20.0) : 1.0;
  const double max_doppler = params.mt_velocity * grid.carrier_frequency / kSpeedOfLight;
  for (std::size_t l = 0; l < delays.size(); ++l) {
    const double phase = uniform(rng, 0.0, 2.0 * kPi);
    const double arrival = uniform(rng, 0.0, 2.0 * kPi);
    PropagationPath p;
    p.gain = attenuation * std::sqrt(powers[l] / total) * std::exp(kJ * phase);
    p.delay = delays[l];
    p.doppler = max_doppler * std::cos(arrival);
    params.paths.push_back(p);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Split { Train, Validation, Test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "train";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  throw InvalidParameter("unknown split: " + s);
}

struct HybridMetadata {
  Index n_antennas = 0;
  Index quadrature_points = 4096;
  std::vector<ClusterDescriptor> clusters;  // one per sample
};

/// Channels stored one sample per column (N x T); the on-disk layout is the
/// same bytes read as a row-major T x N array.
struct ChannelDataset {
  CMatrix channels;
  Split split = Split::Train;
  double normalization_scale = 1.0;
  std::uint64_t rng_seed = 0;
  std::optional<HybridMetadata> hybrid;
  std::optional<WidebandGrid> wideband;

  Index size() const { return channels.cols(); }
  Index dimension() const { return channels.rows(); }
  CVector sample(Index i) const { return channels.col(i); }

  /// Per-sample covariance, already scaled by the dataset normalization.
  GenieCovariance genie_covariance(Index i) const {
    if (!hybrid) throw InvalidParameter("genie covariances exist only for hybrid datasets");
    SpatialChannelParams p{hybrid->clusters.at(static_cast<std::size_t>(i)), hybrid->n_antennas};
    auto cov = build_genie_covariance(p, hybrid->quadrature_points);
    cov.matrix *= normalization_scale * normalization_scale;
    return cov;
  }
};

/// (1 / (T N)) sum_i ||h_i||^2
inline double mean_power_per_entry(const CMatrix& channels) {
  return channels.squaredNorm() / static_cast<double>(channels.size());
}

/// Rescales so that the empirical E||h||^2 equals N; returns the scale.
inline double normalize_channels(CMatrix& channels) {
  const double power = mean_power_per_entry(channels);
  if (!(power > 0.0)) throw NumericalError("cannot normalize an all-zero dataset");
  const double scale = 1.0 / std::sqrt(power);
  channels *= scale;
  return scale;
}

inline ChannelDataset sample_spatial_channels(Index n_samples, Index antenna_count, std::uint64_t rng_seed,
                                              const SpatialPrior& prior = {}, Split split = Split::Train) {
  require(n_samples > 0, "sample count must be positive");
  require(antenna_count > 0, "antenna count must be positive");
  ChannelDataset ds;
  ds.split = split;
  ds.rng_seed = rng_seed;
  ds.channels.resize(antenna_count, n_samples);
  HybridMetadata meta;
  meta.n_antennas = antenna_count;
  meta.quadrature_points = prior.quadrature_points;
  meta.clusters.resize(static_cast<std::size_t>(n_samples));
  for (Index i = 0; i < n_samples; ++i) {
    Rng rng = make_rng(derive_seed(rng_seed, static_cast<std::uint64_t>(i)));
    ClusterDescriptor cl;
    cl.path_gain = prior.path_gain;
    cl.angular_spread = prior.angular_spread;
    cl.angle_of_arrival = uniform(rng, prior.min_angle, prior.max_angle);
    const auto cov = build_genie_covariance({cl, antenna_count}, prior.quadrature_points);
    ds.channels.col(i) = psd_sqrt(cov.matrix) * complex_normal_vector(rng, antenna_count);
    meta.clusters[static_cast<std::size_t>(i)] = cl;
  }
  ds.hybrid = std::move(meta);
  ds.normalization_scale = normalize_channels(ds.channels);
  return ds;
}

inline ChannelDataset sample_wideband_channels(Index n_samples, std::uint64_t rng_seed, const WidebandPrior& prior = {},
                                               const WidebandGrid& grid = {}, Split split = Split::Train) {
  require(n_samples > 0, "sample count must be positive");
  ChannelDataset ds;
  ds.split = split;
  ds.rng_seed = rng_seed;
  ds.wideband = grid;
  ds.channels.resize(grid.size(), n_samples);
  for (Index i = 0; i < n_samples; ++i) {
    Rng rng = make_rng(derive_seed(rng_seed, static_cast<std::uint64_t>(i)));
    ds.channels.col(i) = vectorize(wideband_channel_matrix(draw_wideband_params(prior, grid, rng)));
  }
  ds.normalization_scale = normalize_channels(ds.channels);
  return ds;
}

}  // namespace vaece
