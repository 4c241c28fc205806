#pragma once

// Channel estimators: the VAE conditional-mean approximation and the
// baselines (genie covariance, global sample covariance, genie-OMP, linear
// interpolation, and LMMSE on the interpolated-channel covariance).

#include "vaece/channel_models.hpp"
#include "vaece/core.hpp"
#include "vaece/observation.hpp"
#include "vaece/structured_cov.hpp"
#include "vaece/vae.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace vaece {

struct EstimatorOutput {
  CVector estimate;
  std::string estimator_id;
  std::optional<Index> sparsity;  // genie-OMP only
};

/// W = C A^H (A C A^H + noise_variance I)^{-1}, so that h_hat = W y + (I - W A) mean.
class LmmseFilter {
 public:
  LmmseFilter(const CMatrix& cov, const ObservationOperator& op, double noise_variance) {
    require(cov.rows() == op.cols() && cov.cols() == op.cols(), "covariance does not match operator");
    require(noise_variance >= 0.0, "noise variance must be non-negative");
    const CMatrix ac = op.apply(cov);  // A C
    CMatrix s = op.apply(CMatrix(ac.adjoint()));  // A C A^H
    s.diagonal().array() += noise_variance;
    s = (s + s.adjoint()).eval() / 2.0;
    const double scale = std::max(s.diagonal().real().mean(), 1e-300);
    const HermitianFactor factor(s, 1e-10 * scale);
    filter_ = factor.solve(ac).adjoint();
  }

  CVector apply(const CVector& y) const { return filter_ * y; }
  CMatrix apply(const CMatrix& y) const { return filter_ * y; }
  const CMatrix& matrix() const { return filter_; }

 private:
  CMatrix filter_;
};

inline CVector lmmse_estimate(const CMatrix& cov, const ObservationOperator& op, const NoiseModel& noise, const CVector& y) {
  return LmmseFilter(cov, op, noise.variance).apply(y);
}

/// (1/T) sum_i h_i h_i^H for channels stored one per column.
inline CMatrix sample_covariance(const CMatrix& channels) {
  require(channels.cols() > 0, "sample covariance of an empty set");
  CMatrix c = channels * channels.adjoint() / static_cast<double>(channels.cols());
  return (c + c.adjoint()) / 2.0;
}

// ---------------------------------------------------------------------------
// VAE estimator
// ---------------------------------------------------------------------------

/// t(z, y) = mu(z) + C(z) A^H (A C(z) A^H + Sigma)^{-1} (y - A mu(z)) with the
/// single latent sample z = mu_phi(A^H y). Columns of `y` are independent
/// observations through the same operator.
inline CMatrix estimate_vae_batch(const VaeModel& model, const CMatrix& y, const ObservationOperator& op,
                                  const NoiseModel& noise) {
  require(op.cols() == model.dimension(), "operator does not match the model geometry");
  require(y.rows() == op.rows(), "observation dimension does not match operator");
  const Index n = model.dimension(), nl = model.latent_dim();
  const Index k = model.architecture().spectrum_size();
  const CMatrix synthesis = model.structure().factor().adjoint();  // P^H
  const CMatrix b_factor = op.apply(synthesis);                      // A P^H
  CMatrix out(n, y.cols());

  constexpr Index kChunk = 256;
  for (Index start = 0; start < y.cols(); start += kChunk) {
    const Index len = std::min(kChunk, y.cols() - start);
    const CMatrix ys = y.middleCols(start, len);
    const RMatrix enc = model.encoder().infer(pack_complex(op.adjoint(ys)));
    const RMatrix dec = model.decoder().infer(enc.topRows(nl));
    if (!dec.allFinite()) throw NumericalError("decoder produced non-finite output");
    for (Index j = 0; j < len; ++j) {
      CVector mean(n);
      for (Index i = 0; i < n; ++i) mean[i] = {dec(i, j), dec(n + i, j)};
      const RVector c = spectrum_from_raw(dec.col(j).segment(2 * n, k));
      const CMatrix bc = b_factor * c.cast<cdouble>().asDiagonal();
      CMatrix s = bc * b_factor.adjoint();
      s.diagonal().array() += noise.variance;
      s = (s + s.adjoint()).eval() / 2.0;
      const HermitianFactor factor(s, 1e-9 * c.mean());
      const CVector w = factor.solve(CVector(ys.col(j) - op.apply(mean)));
      out.col(start + j) = mean + synthesis * (bc.adjoint() * w);
    }
  }
  return out;
}

inline EstimatorOutput estimate_vae(const VaeModel& model, const CVector& y, const ObservationOperator& op,
                                    const NoiseModel& noise) {
  return {estimate_vae_batch(model, CMatrix(y), op, noise).col(0), to_string(model.variant()), std::nullopt};
}

// ---------------------------------------------------------------------------
// Covariance-based baselines
// ---------------------------------------------------------------------------

inline EstimatorOutput estimate_genie_cme(const CVector& y, const ObservationOperator& op, const NoiseModel& noise,
                                          const GenieCovariance& genie) {
  if (genie.matrix.size() == 0) throw InvalidParameter("genie covariance is missing");
  return {lmmse_estimate(genie.matrix, op, noise, y), "genie_cme", std::nullopt};
}

inline EstimatorOutput estimate_global_cov(const CVector& y, const ObservationOperator& op, const NoiseModel& noise,
                                           const CMatrix& sample_cov) {
  return {lmmse_estimate(sample_cov, op, noise, y), "global_cov", std::nullopt};
}

// ---------------------------------------------------------------------------
// Genie-OMP
// ---------------------------------------------------------------------------

/// Twice-oversampled DFT dictionary with unit-norm columns,
/// D(m, k) = exp(j 2 pi m k / (2N)) / sqrt(N), N x 2N.
inline CMatrix oversampled_dft_dictionary(Index n) {
  CMatrix d(n, 2 * n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (Index k = 0; k < 2 * n; ++k)
    for (Index m = 0; m < n; ++m)
      d(m, k) = scale * std::exp(kJ * (2.0 * kPi * static_cast<double>((m * k) % (2 * n)) / static_cast<double>(2 * n)));
  return d;
}

struct OmpPath {
  std::vector<Index> support;               // atom chosen at each step
  std::vector<CVector> coefficients;        // least-squares weights after step s (length s)
  std::vector<double> residual_norms;       // ||y - Phi x_s|| after step s
};

/// Orthogonal matching pursuit with an incrementally grown QR factorization.
/// Stops after `max_sparsity` atoms or once the residual vanishes.
inline OmpPath orthogonal_matching_pursuit(const CMatrix& sensing, const CVector& y, Index max_sparsity) {
  const Index m = sensing.rows(), k = sensing.cols();
  require(y.size() == m, "observation length does not match the sensing matrix");
  require(max_sparsity >= 1 && max_sparsity <= m, "sparsity limit must lie in [1, M]");
  const RVector norms = sensing.colwise().norm().transpose();
  OmpPath path;
  CMatrix q(m, 0);
  CMatrix r(0, 0);
  CVector qty(0);
  CVector residual = y;
  std::vector<bool> used(static_cast<std::size_t>(k), false);
  const double y_norm = y.norm();

  for (Index s = 1; s <= max_sparsity; ++s) {
    if (residual.norm() <= 1e-13 * std::max(y_norm, 1e-300)) break;
    const CVector corr = sensing.adjoint() * residual;
    Index best = -1;
    double best_score = -1.0;
    for (Index j = 0; j < k; ++j) {
      if (used[static_cast<std::size_t>(j)] || norms[j] == 0.0) continue;
      const double score = std::abs(corr[j]) / norms[j];
      if (score > best_score) {
        best_score = score;
        best = j;
      }
    }
    if (best < 0) break;

    CVector v = sensing.col(best);
    CVector proj = CVector::Zero(s - 1);
    for (int pass = 0; pass < 2; ++pass) {
      const CVector c = q.adjoint() * v;
      v -= q * c;
      proj += c;
    }
    const double vn = v.norm();
    if (vn <= 1e-12 * norms[best]) break;  // atom already in the span
    used[static_cast<std::size_t>(best)] = true;

    q.conservativeResize(m, s);
    q.col(s - 1) = v / vn;
    r.conservativeResize(s, s);
    r.row(s - 1).setZero();
    r.col(s - 1).head(s - 1) = proj;
    r(s - 1, s - 1) = vn;
    qty.conservativeResize(s);
    qty[s - 1] = q.col(s - 1).dot(y);

    path.support.push_back(best);
    path.coefficients.push_back(r.triangularView<Eigen::Upper>().solve(qty));
    residual = y - q * qty;
    path.residual_norms.push_back(residual.norm());
  }
  return path;
}

/// OMP on the effective sensing matrix A D; the sparsity order is the one
/// whose estimate is closest to the true channel.
inline EstimatorOutput estimate_genie_omp(const CVector& y, const ObservationOperator& op, const NoiseModel&,
                                          const CVector& h_true, const CMatrix& dictionary,
                                          std::optional<Index> max_sparsity = std::nullopt) {
  require(h_true.size() == op.cols() && dictionary.rows() == op.cols(), "dimension mismatch");
  const Index s_max = max_sparsity.value_or(op.rows());
  require(s_max >= 1 && s_max <= op.rows(), "sparsity limit must lie in [1, M]");
  const CMatrix sensing = op.apply(dictionary);
  const auto path = orthogonal_matching_pursuit(sensing, y, s_max);

  EstimatorOutput out{CVector::Zero(op.cols()), "genie_omp", Index{0}};
  double best = h_true.squaredNorm();  // empty support
  for (std::size_t s = 0; s < path.coefficients.size(); ++s) {
    CVector est = CVector::Zero(op.cols());
    for (std::size_t j = 0; j <= s; ++j) est += path.coefficients[s][static_cast<Index>(j)] * dictionary.col(path.support[j]);
    const double err = (h_true - est).squaredNorm();
    if (err < best) {
      best = err;
      out.estimate = est;
      out.sparsity = static_cast<Index>(s + 1);
    }
  }
  return out;
}

inline EstimatorOutput estimate_genie_omp(const CVector& y, const ObservationOperator& op, const NoiseModel& noise,
                                          const CVector& h_true) {
  return estimate_genie_omp(y, op, noise, h_true, oversampled_dft_dictionary(op.cols()));
}

// ---------------------------------------------------------------------------
// Linear interpolation on the pilot grid
// ---------------------------------------------------------------------------

namespace detail {

// Piecewise-linear interpolation through (x, v), constant beyond the ends.
inline cdouble interpolate_1d(const std::vector<Index>& x, const std::vector<cdouble>& v, Index q) {
  if (x.size() == 1 || q <= x.front()) return v.front();
  if (q >= x.back()) return v.back();
  const auto it = std::upper_bound(x.begin(), x.end(), q);
  const auto hi = static_cast<std::size_t>(it - x.begin());
  const auto lo = hi - 1;
  const double t = static_cast<double>(q - x[lo]) / static_cast<double>(x[hi] - x[lo]);
  return (1.0 - t) * v[lo] + t * v[hi];
}

}  // namespace detail

/// Scatters A^T y onto the N_c x N_t grid, interpolates along frequency in
/// every pilot-bearing timeslot, then along time for every subcarrier.
inline EstimatorOutput estimate_li(const CVector& y, const ObservationOperator& op, Index n_subcarriers) {
  require(op.kind() == OperatorKind::PilotSelection, "linear interpolation needs a pilot-selection operator");
  require(n_subcarriers > 0 && op.cols() % n_subcarriers == 0, "grid does not match operator");
  require(y.size() == op.rows(), "observation length does not match operator");
  const Index nc = n_subcarriers, nt = op.cols() / nc;

  std::vector<std::vector<Index>> freq_pos(static_cast<std::size_t>(nt));
  std::vector<std::vector<cdouble>> freq_val(static_cast<std::size_t>(nt));
  std::vector<std::pair<Index, Index>> order;
  for (Index r = 0; r < op.rows(); ++r) order.emplace_back(op.pilots()[static_cast<std::size_t>(r)], r);
  std::sort(order.begin(), order.end());
  for (const auto& [pos, r] : order) {
    freq_pos[static_cast<std::size_t>(pos / nc)].push_back(pos % nc);
    freq_val[static_cast<std::size_t>(pos / nc)].push_back(y[r]);
  }

  CMatrix grid = CMatrix::Zero(nc, nt);
  std::vector<Index> pilot_slots;
  for (Index t = 0; t < nt; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    if (freq_pos[ts].empty()) continue;
    pilot_slots.push_back(t);
    for (Index f = 0; f < nc; ++f) grid(f, t) = detail::interpolate_1d(freq_pos[ts], freq_val[ts], f);
  }
  for (Index f = 0; f < nc; ++f) {
    std::vector<cdouble> vals;
    for (Index t : pilot_slots) vals.push_back(grid(f, t));
    for (Index t = 0; t < nt; ++t) grid(f, t) = detail::interpolate_1d(pilot_slots, vals, t);
  }
  return {vectorize(grid), "li", std::nullopt};
}

/// Sample covariance of interpolated channels minus noise_variance * I,
/// projected onto the PSD cone.
inline CMatrix li_covariance(const CMatrix& li_estimates, double noise_variance) {
  CMatrix c = sample_covariance(li_estimates);
  if (noise_variance > 0.0) c.diagonal().array() -= noise_variance;
  return clamp_psd(c);
}

inline EstimatorOutput estimate_global_li(const CVector& y, const ObservationOperator& op, const NoiseModel& noise,
                                          const CMatrix& li_cov) {
  return {lmmse_estimate(li_cov, op, noise, y), "global_li", std::nullopt};
}

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

/// (1 / (T N)) sum_i ||h_i - h_hat_i||^2 with one sample per column.
inline double nmse(const CMatrix& estimates, const CMatrix& truths) {
  require(estimates.size() > 0, "NMSE of an empty set");
  require(estimates.rows() == truths.rows() && estimates.cols() == truths.cols(), "estimate and truth counts differ");
  return (estimates - truths).squaredNorm() / static_cast<double>(truths.size());
}

}  // namespace vaece
