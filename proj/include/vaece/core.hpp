#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace vaece {

using cdouble = std::complex<double>;
using Index = Eigen::Index;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;
using RVector = Eigen::VectorXd;
using RMatrix = Eigen::MatrixXd;

inline constexpr double kPi = std::numbers::pi;
inline constexpr cdouble kJ{0.0, 1.0};

// Error taxonomy. The CLI maps InvalidParameter/ConfigError to exit code 2 and
// NumericalError to exit code 3.
struct InvalidParameter : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidParameter(message);
}

/// Noise variance for a given SNR in dB. Channels are normalized to unit
/// average power per entry, so SNR = 1 / variance.
inline double noise_variance_from_snr_db(double snr_db) { return std::pow(10.0, -snr_db / 10.0); }

inline double snr_db_from_noise_variance(double variance) { return -10.0 * std::log10(variance); }

inline bool all_finite(const RMatrix& m) { return m.allFinite(); }
inline bool all_finite(const CMatrix& m) { return m.allFinite(); }

}  // namespace vaece
