#pragma once

#include "vaece/core.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace vaece::testing {

template <class A, class B>
double rel_err(const A& a, const B& b) {
  const double denom = std::max(b.norm(), 1e-300);
  return (a - b).norm() / denom;
}

inline double rel_err_scalar(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

inline CMatrix random_complex(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  CMatrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = {n(rng), n(rng)};
  return m;
}

inline RVector random_positive(Index n, std::uint64_t seed, double lo = 0.2, double hi = 3.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  RVector v(n);
  for (Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

/// Fresh empty directory below the system temp directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vaece_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace vaece::testing
