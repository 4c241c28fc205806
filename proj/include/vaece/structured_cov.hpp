#pragma once

// Structured Hermitian covariances C = P^H diag(c) P.
//
//   circulant:      P = F, the unitary N-point DFT; K = N.
//   block-Toeplitz: P = Q_t kron Q_c, where Q_t holds the first N_t columns
//                   of the unitary 2N_t-point DFT (Q_c likewise); K = 4 N_t N_c.
//
// Truncating columns of a unitary matrix keeps them orthonormal, so with the
// unitary scaling Q^H Q = I and c = 1 gives C = I in both cases.

#include "vaece/core.hpp"

#include <unsupported/Eigen/FFT>

#include <memory>
#include <variant>

namespace vaece {

/// F x with F_{k,m} = exp(-2 pi j k m / N) / sqrt(N).
inline CVector unitary_dft(const CVector& x) {
  thread_local Eigen::FFT<double> fft;
  CVector out(x.size());
  fft.fwd(out, x);
  return out / std::sqrt(static_cast<double>(x.size()));
}

/// F^H x
inline CVector unitary_idft(const CVector& x) {
  thread_local Eigen::FFT<double> fft;
  CVector out(x.size());
  fft.inv(out, x);
  return out * std::sqrt(static_cast<double>(x.size()));
}

/// Unnormalized DFT kernel W_{k,m} = exp(-2 pi j k m / n), rows x cols.
inline CMatrix dft_kernel(Index rows, Index cols, Index n) {
  CMatrix w(rows, cols);
  for (Index m = 0; m < cols; ++m)
    for (Index k = 0; k < rows; ++k)
      w(k, m) = std::exp(-kJ * (2.0 * kPi * static_cast<double>((k * m) % n) / static_cast<double>(n)));
  return w;
}

inline CMatrix unitary_dft_matrix(Index n) { return dft_kernel(n, n, n) / std::sqrt(static_cast<double>(n)); }

enum class StructureKind { Circulant, BlockToeplitz };

namespace detail {

struct BlockToeplitzBasis {
  Index n_timeslots;
  Index n_subcarriers;
  CMatrix time_kernel;  // 2N_t x 2N_t unnormalized DFT
  CMatrix freq_kernel;  // 2N_c x 2N_c unnormalized DFT
  CMatrix factor;       // Q = Q_t kron Q_c, 4 N_t N_c x N_t N_c

  BlockToeplitzBasis(Index nt, Index nc)
      : n_timeslots(nt),
        n_subcarriers(nc),
        time_kernel(dft_kernel(2 * nt, 2 * nt, 2 * nt)),
        freq_kernel(dft_kernel(2 * nc, 2 * nc, 2 * nc)) {
    const CMatrix qt = dft_kernel(2 * nt, nt, 2 * nt) / std::sqrt(2.0 * static_cast<double>(nt));
    const CMatrix qc = dft_kernel(2 * nc, nc, 2 * nc) / std::sqrt(2.0 * static_cast<double>(nc));
    factor.resize(4 * nt * nc, nt * nc);
    for (Index k = 0; k < 2 * nt; ++k)
      for (Index t = 0; t < nt; ++t) factor.block(k * 2 * nc, t * nc, 2 * nc, nc) = qt(k, t) * qc;
  }
};

}  // namespace detail

/// Shape descriptor shared by decoder outputs and covariance objects.
class CovarianceStructure {
 public:
  static CovarianceStructure circulant(Index n) {
    require(n > 0, "dimension must be positive");
    CovarianceStructure s;
    s.kind_ = StructureKind::Circulant;
    s.n_ = n;
    return s;
  }

  static CovarianceStructure block_toeplitz(Index n_timeslots, Index n_subcarriers) {
    require(n_timeslots > 0 && n_subcarriers > 0, "grid dimensions must be positive");
    CovarianceStructure s;
    s.kind_ = StructureKind::BlockToeplitz;
    s.n_ = n_timeslots * n_subcarriers;
    s.basis_ = std::make_shared<const detail::BlockToeplitzBasis>(n_timeslots, n_subcarriers);
    return s;
  }

  StructureKind kind() const { return kind_; }
  Index dimension() const { return n_; }
  Index spectrum_size() const { return kind_ == StructureKind::Circulant ? n_ : 4 * n_; }
  Index n_timeslots() const { return basis_ ? basis_->n_timeslots : 0; }
  Index n_subcarriers() const { return basis_ ? basis_->n_subcarriers : 0; }
  const detail::BlockToeplitzBasis& basis() const { return *basis_; }

  /// Dense P with C = P^H diag(c) P (K x N).
  CMatrix factor() const { return kind_ == StructureKind::Circulant ? unitary_dft_matrix(n_) : basis_->factor; }

  bool operator==(const CovarianceStructure& o) const {
    return kind_ == o.kind_ && n_ == o.n_ && n_timeslots() == o.n_timeslots();
  }

 private:
  CovarianceStructure() = default;

  StructureKind kind_ = StructureKind::Circulant;
  Index n_ = 0;
  std::shared_ptr<const detail::BlockToeplitzBasis> basis_;
};

inline void validate_spectrum(const RVector& c) {
  if (c.size() == 0) throw InvalidParameter("covariance spectrum is empty");
  for (Index i = 0; i < c.size(); ++i)
    if (!(c[i] > 0.0) || !std::isfinite(c[i])) throw InvalidParameter("covariance spectrum must be positive and finite");
}

/// Cholesky factor of a Hermitian PD matrix. On failure a jitter of
/// `jitter_scale * I` is added once before giving up.
class HermitianFactor {
 public:
  explicit HermitianFactor(const CMatrix& c, double jitter_scale = 0.0) : n_(c.rows()) {
    llt_.compute(c);
    if (llt_.info() != Eigen::Success && jitter_scale > 0.0) {
      llt_.compute(c + jitter_scale * CMatrix::Identity(n_, n_));
      jittered_ = true;
    }
    if (llt_.info() != Eigen::Success) throw NumericalError("Hermitian factorization failed");
    const auto& l = llt_.matrixLLT();
    for (Index i = 0; i < n_; ++i) {
      const double d = l(i, i).real();
      if (!(d > 0.0) || !std::isfinite(d)) throw NumericalError("Hermitian factorization failed");
      logdet_ += 2.0 * std::log(d);
    }
  }

  CVector solve(const CVector& b) const { return llt_.solve(b); }
  CMatrix solve(const CMatrix& b) const { return llt_.solve(b); }
  /// C^{-1} = L^{-H} L^{-1}, assembled from one triangular solve and a
  /// Hermitian rank-n update (exactly Hermitian by construction).
  CMatrix inverse() const {
    CMatrix w = CMatrix::Identity(n_, n_);
    llt_.matrixL().solveInPlace(w);
    CMatrix inv = CMatrix::Zero(n_, n_);
    inv.selfadjointView<Eigen::Lower>().rankUpdate(w.adjoint());
    return inv.selfadjointView<Eigen::Lower>();
  }
  double logdet() const { return logdet_; }
  bool jittered() const { return jittered_; }

 private:
  Index n_;
  Eigen::LLT<CMatrix> llt_;
  double logdet_ = 0.0;
  bool jittered_ = false;
};

class CirculantCovariance {
 public:
  explicit CirculantCovariance(RVector spectrum) : c_(std::move(spectrum)) { validate_spectrum(c_); }

  Index dimension() const { return c_.size(); }
  const RVector& spectrum() const { return c_; }

  /// F^H (c .* F x), O(N log N)
  CVector apply(const CVector& x) const {
    require(x.size() == c_.size(), "vector length does not match covariance");
    return unitary_idft(unitary_dft(x).cwiseProduct(c_.cast<cdouble>()));
  }

  /// F^H (F x ./ c), O(N log N)
  CVector solve(const CVector& x) const {
    require(x.size() == c_.size(), "vector length does not match covariance");
    return unitary_idft(unitary_dft(x).cwiseQuotient(c_.cast<cdouble>()));
  }

  /// log det(pi C) = sum log(pi c_i)
  double logdet_pi() const { return (kPi * c_.array()).log().sum(); }

  CMatrix dense() const {
    const CMatrix f = unitary_dft_matrix(c_.size());
    CMatrix c = f.adjoint() * c_.cast<cdouble>().asDiagonal() * f;
    return (c + c.adjoint()) / 2.0;
  }

 private:
  RVector c_;
};

class BlockToeplitzCovariance {
 public:
  BlockToeplitzCovariance(CovarianceStructure structure, RVector spectrum)
      : structure_(std::move(structure)), c_(std::move(spectrum)) {
    require(structure_.kind() == StructureKind::BlockToeplitz, "structure is not block-Toeplitz");
    require(c_.size() == structure_.spectrum_size(), "spectrum length must be 4 N_t N_c");
    validate_spectrum(c_);
  }

  Index dimension() const { return structure_.dimension(); }
  const RVector& spectrum() const { return c_; }
  const CovarianceStructure& structure() const { return structure_; }

  /// r(a, b) for time offset a (mod 2N_t) and frequency offset b (mod 2N_c);
  /// C[(t,f),(t',f')] = r(t'-t, f'-f).
  CMatrix autocorrelation() const {
    const auto& basis = structure_.basis();
    const Index nt2 = 2 * basis.n_timeslots, nc2 = 2 * basis.n_subcarriers;
    CMatrix grid(nt2, nc2);
    for (Index k = 0; k < nt2; ++k)
      for (Index l = 0; l < nc2; ++l) grid(k, l) = c_[k * nc2 + l];
    return basis.time_kernel * grid * basis.freq_kernel / static_cast<double>(nt2 * nc2);
  }

  CMatrix dense() const {
    const auto& basis = structure_.basis();
    const Index nt = basis.n_timeslots, nc = basis.n_subcarriers;
    const CMatrix r = autocorrelation();
    const Index n = nt * nc;
    CMatrix c(n, n);
    for (Index t2 = 0; t2 < nt; ++t2)
      for (Index f2 = 0; f2 < nc; ++f2)
        for (Index t1 = 0; t1 < nt; ++t1)
          for (Index f1 = 0; f1 < nc; ++f1)
            c(t1 * nc + f1, t2 * nc + f2) = r((t2 - t1 + 2 * nt) % (2 * nt), (f2 - f1 + 2 * nc) % (2 * nc));
    return (c + c.adjoint()) / 2.0;
  }

  HermitianFactor factorize() const { return HermitianFactor(dense(), 1e-9 * c_.mean()); }

  CVector apply(const CVector& x) const {
    require(x.size() == dimension(), "vector length does not match covariance");
    const CMatrix& q = structure_.basis().factor;
    return q.adjoint() * (c_.cast<cdouble>().cwiseProduct(q * x));
  }

  CVector solve(const CVector& x) const { return factorize().solve(x); }

  double logdet_pi() const {
    return static_cast<double>(dimension()) * std::log(kPi) + factorize().logdet();
  }

  /// dL/dc for a loss with differential dL = tr(G dC), G Hermitian N x N.
  RVector spectrum_gradient(const CMatrix& g) const {
    const auto& basis = structure_.basis();
    const Index nt = basis.n_timeslots, nc = basis.n_subcarriers;
    const Index nt2 = 2 * nt, nc2 = 2 * nc;
    CMatrix sums = CMatrix::Zero(nt2, nc2);
    for (Index t1 = 0; t1 < nt; ++t1)
      for (Index f1 = 0; f1 < nc; ++f1)
        for (Index t2 = 0; t2 < nt; ++t2)
          for (Index f2 = 0; f2 < nc; ++f2)
            sums((t2 - t1 + nt2) % nt2, (f2 - f1 + nc2) % nc2) += g(t2 * nc + f2, t1 * nc + f1);
    const CMatrix spec = basis.time_kernel * sums * basis.freq_kernel / static_cast<double>(nt2 * nc2);
    RVector out(nt2 * nc2);
    for (Index k = 0; k < nt2; ++k)
      for (Index l = 0; l < nc2; ++l) out[k * nc2 + l] = spec(k, l).real();
    return out;
  }

 private:
  CovarianceStructure structure_;
  RVector c_;
};

/// Either structured form behind one interface.
class StructuredCovariance {
 public:
  StructuredCovariance(const CovarianceStructure& structure, RVector spectrum)
      : form_(make(structure, std::move(spectrum))) {}

  bool is_circulant() const { return std::holds_alternative<CirculantCovariance>(form_); }
  const CirculantCovariance& circulant() const { return std::get<CirculantCovariance>(form_); }
  const BlockToeplitzCovariance& block_toeplitz() const { return std::get<BlockToeplitzCovariance>(form_); }

  Index dimension() const {
    return std::visit([](const auto& c) { return c.dimension(); }, form_);
  }
  const RVector& spectrum() const {
    return std::visit([](const auto& c) -> const RVector& { return c.spectrum(); }, form_);
  }
  CVector apply(const CVector& x) const {
    return std::visit([&](const auto& c) { return c.apply(x); }, form_);
  }
  CVector solve(const CVector& x) const {
    return std::visit([&](const auto& c) { return c.solve(x); }, form_);
  }
  double logdet_pi() const {
    return std::visit([](const auto& c) { return c.logdet_pi(); }, form_);
  }
  CMatrix dense() const {
    return std::visit([](const auto& c) { return c.dense(); }, form_);
  }

 private:
  using Form = std::variant<CirculantCovariance, BlockToeplitzCovariance>;

  static Form make(const CovarianceStructure& structure, RVector spectrum) {
    require(spectrum.size() == structure.spectrum_size(), "spectrum length does not match structure");
    if (structure.kind() == StructureKind::Circulant) return CirculantCovariance(std::move(spectrum));
    return BlockToeplitzCovariance(structure, std::move(spectrum));
  }

  Form form_;
};

}  // namespace vaece
