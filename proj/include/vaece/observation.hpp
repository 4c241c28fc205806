#pragma once

#include "vaece/channel_models.hpp"
#include "vaece/core.hpp"
#include "vaece/rng.hpp"

#include <algorithm>
#include <set>
#include <utility>
#include <vector>

namespace vaece {

enum class OperatorKind { PhaseShift, PilotSelection };
enum class PilotLayout { Lattice, Random };

/// Pilot positions of the lattice layout on an N_c x N_t grid.
struct LatticeSpec {
  std::vector<Index> subcarriers{1, 4, 7, 10};
  std::vector<Index> timeslots{0, 3, 6, 10, 13};
};

/// Wide observation matrix A (M x N). Phase-shift operators hold the dense
/// matrix; pilot-selection operators hold the selected positions of vec(H).
/// Immutable after construction.
class ObservationOperator {
 public:
  static ObservationOperator phase_shift(CMatrix matrix) {
    require(matrix.rows() > 0 && matrix.cols() > 0, "operator must be non-empty");
    ObservationOperator op;
    op.kind_ = OperatorKind::PhaseShift;
    op.m_ = matrix.rows();
    op.n_ = matrix.cols();
    op.matrix_ = std::move(matrix);
    return op;
  }

  static ObservationOperator pilot_selection(std::vector<Index> pilots, Index n_cols) {
    require(!pilots.empty(), "pilot set must be non-empty");
    require(static_cast<Index>(pilots.size()) <= n_cols, "more pilots than grid positions");
    std::set<Index> unique(pilots.begin(), pilots.end());
    require(unique.size() == pilots.size(), "pilot positions must be distinct");
    require(*unique.begin() >= 0 && *unique.rbegin() < n_cols, "pilot position out of range");
    ObservationOperator op;
    op.kind_ = OperatorKind::PilotSelection;
    op.m_ = static_cast<Index>(pilots.size());
    op.n_ = n_cols;
    op.pilots_ = std::move(pilots);
    return op;
  }

  OperatorKind kind() const { return kind_; }
  Index rows() const { return m_; }
  Index cols() const { return n_; }
  const CMatrix& matrix() const { return matrix_; }
  const std::vector<Index>& pilots() const { return pilots_; }

  bool operator==(const ObservationOperator& o) const {
    return kind_ == o.kind_ && m_ == o.m_ && n_ == o.n_ && pilots_ == o.pilots_ && matrix_ == o.matrix_;
  }

  /// A x
  CVector apply(const CVector& x) const {
    require(x.size() == n_, "operator input has wrong dimension");
    if (kind_ == OperatorKind::PhaseShift) return matrix_ * x;
    CVector y(m_);
    for (Index r = 0; r < m_; ++r) y[r] = x[pilots_[static_cast<std::size_t>(r)]];
    return y;
  }

  /// A^H y
  CVector adjoint(const CVector& y) const {
    require(y.size() == m_, "adjoint input has wrong dimension");
    if (kind_ == OperatorKind::PhaseShift) return matrix_.adjoint() * y;
    CVector x = CVector::Zero(n_);
    for (Index r = 0; r < m_; ++r) x[pilots_[static_cast<std::size_t>(r)]] = y[r];
    return x;
  }

  /// A X for a block of column vectors.
  CMatrix apply(const CMatrix& x) const {
    require(x.rows() == n_, "operator input has wrong dimension");
    if (kind_ == OperatorKind::PhaseShift) return matrix_ * x;
    CMatrix y(m_, x.cols());
    for (Index r = 0; r < m_; ++r) y.row(r) = x.row(pilots_[static_cast<std::size_t>(r)]);
    return y;
  }

  CMatrix adjoint(const CMatrix& y) const {
    require(y.rows() == m_, "adjoint input has wrong dimension");
    if (kind_ == OperatorKind::PhaseShift) return matrix_.adjoint() * y;
    CMatrix x = CMatrix::Zero(n_, y.cols());
    for (Index r = 0; r < m_; ++r) x.row(pilots_[static_cast<std::size_t>(r)]) = y.row(r);
    return x;
  }

  CMatrix dense() const {
    if (kind_ == OperatorKind::PhaseShift) return matrix_;
    CMatrix a = CMatrix::Zero(m_, n_);
    for (Index r = 0; r < m_; ++r) a(r, pilots_[static_cast<std::size_t>(r)]) = 1.0;
    return a;
  }

 private:
  ObservationOperator() = default;

  OperatorKind kind_ = OperatorKind::PhaseShift;
  Index m_ = 0;
  Index n_ = 0;
  CMatrix matrix_;
  std::vector<Index> pilots_;
};

struct NoiseModel {
  double variance = 1.0;

  static NoiseModel from_snr_db(double snr_db) { return {noise_variance_from_snr_db(snr_db)}; }
  double snr() const { return 1.0 / variance; }
  double snr_db() const { return snr_db_from_noise_variance(variance); }
};

/// A_{i,k} = exp(j phi) / sqrt(M), phi ~ U[0, 2 pi).
inline ObservationOperator build_phase_shift_operator(Index m_rows, Index n_cols, std::uint64_t rng_seed) {
  require(m_rows > 0, "row count must be positive");
  require(m_rows < n_cols, "phase-shift operator must be wide (M < N)");
  Rng rng = make_rng(rng_seed);
  CMatrix a(m_rows, n_cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m_rows));
  for (Index k = 0; k < n_cols; ++k)
    for (Index i = 0; i < m_rows; ++i) a(i, k) = scale * std::exp(kJ * uniform(rng, 0.0, 2.0 * kPi));
  return ObservationOperator::phase_shift(std::move(a));
}

/// Pilot positions (indices into vec(H)) in ascending order.
inline std::vector<Index> lattice_pilots(const LatticeSpec& lattice, Index n_subcarriers, Index n_timeslots) {
  std::vector<Index> pilots;
  for (Index t : lattice.timeslots) {
    require(t >= 0 && t < n_timeslots, "lattice timeslot out of range");
    for (Index s : lattice.subcarriers) {
      require(s >= 0 && s < n_subcarriers, "lattice subcarrier out of range");
      pilots.push_back(t * n_subcarriers + s);
    }
  }
  std::sort(pilots.begin(), pilots.end());
  return pilots;
}

inline ObservationOperator build_pilot_selection_operator(PilotLayout layout, Index n_pilots, Index n_subcarriers,
                                                          Index n_timeslots, std::uint64_t rng_seed,
                                                          const LatticeSpec& lattice = {}) {
  const Index grid = n_subcarriers * n_timeslots;
  require(n_pilots > 0, "pilot count must be positive");
  require(n_pilots <= grid, "more pilots than grid positions");
  if (layout == PilotLayout::Lattice) {
    auto pilots = lattice_pilots(lattice, n_subcarriers, n_timeslots);
    require(static_cast<Index>(pilots.size()) == n_pilots, "lattice layout does not provide the requested pilot count");
    return ObservationOperator::pilot_selection(std::move(pilots), grid);
  }
  Rng rng = make_rng(rng_seed);
  return ObservationOperator::pilot_selection(sample_without_replacement(rng, grid, n_pilots), grid);
}

/// y = A h + n with the supplied noise realization.
inline CVector observe_with_noise(const CVector& h, const ObservationOperator& op, const CVector& noise) {
  require(noise.size() == op.rows(), "noise vector has wrong dimension");
  return op.apply(h) + noise;
}

/// y = A h + n, n ~ CN(0, variance I), deterministic given the seed.
inline CVector observe(const CVector& h, const ObservationOperator& op, const NoiseModel& noise, std::uint64_t rng_seed) {
  require(h.size() == op.cols(), "channel dimension does not match operator");
  require(noise.variance >= 0.0, "noise variance must be non-negative");
  Rng rng = make_rng(rng_seed);
  return observe_with_noise(h, op, complex_normal_vector(rng, op.rows(), noise.variance));
}

}  // namespace vaece
