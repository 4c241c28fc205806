#include "vaece/structured_cov.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace vaece;
using vaece::testing::random_complex;
using vaece::testing::random_positive;
using vaece::testing::rel_err;
using vaece::testing::rel_err_scalar;

TEST(UnitaryDft, MatchesDenseMatrixAndIsUnitary) {
  const CVector x = random_complex(24, 1, 1);
  const CMatrix f = unitary_dft_matrix(24);
  EXPECT_LT(rel_err(unitary_dft(x), CVector(f * x)), 1e-13);
  EXPECT_LT(rel_err(unitary_idft(x), CVector(f.adjoint() * x)), 1e-13);
  EXPECT_LT((f.adjoint() * f - CMatrix::Identity(24, 24)).norm(), 1e-12);
}

TEST(CirculantCovariance, UnitSpectrumIsTheIdentity) {
  const CirculantCovariance cov(RVector::Ones(32));
  const CVector x = random_complex(32, 1, 2);
  EXPECT_LT(rel_err(cov.apply(x), x), 1e-14);
  EXPECT_LT(rel_err(cov.solve(x), x), 1e-14);
  EXPECT_NEAR(cov.logdet_pi(), 32.0 * std::log(kPi), 1e-12);
}

TEST(CirculantCovariance, FastPathMatchesDenseOracle) {
  const Index n = 128;
  const RVector c = random_positive(n, 3);
  const CirculantCovariance cov(c);
  const CMatrix f = unitary_dft_matrix(n);
  const CMatrix dense = f.adjoint() * c.cast<cdouble>().asDiagonal() * f;
  const CVector x = random_complex(n, 1, 4);
  EXPECT_LT(rel_err(cov.apply(x), CVector(dense * x)), 1e-10);
  EXPECT_LT(rel_err(cov.solve(x), CVector(dense.ldlt().solve(x))), 1e-10);
  Eigen::SelfAdjointEigenSolver<CMatrix> eig(dense);
  const double oracle = static_cast<double>(n) * std::log(kPi) + eig.eigenvalues().array().log().sum();
  EXPECT_LT(rel_err_scalar(cov.logdet_pi(), oracle), 1e-10);
  EXPECT_LT(rel_err(cov.solve(cov.apply(x)), x), 1e-10);
  // circulant: each row is the previous one shifted by one
  const CMatrix d = cov.dense();
  for (Index i = 1; i < n; ++i)
    for (Index j = 0; j < n; ++j) EXPECT_LT(std::abs(d(i, j) - d(i - 1, (j + n - 1) % n)), 1e-12);
}

TEST(CirculantCovariance, RejectsNonPositiveSpectrum) {
  RVector c = RVector::Ones(8);
  c[3] = 0.0;
  EXPECT_THROW(CirculantCovariance{c}, InvalidParameter);
  c[3] = -1.0;
  EXPECT_THROW(CirculantCovariance{c}, InvalidParameter);
  c[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(CirculantCovariance{c}, InvalidParameter);
}

TEST(CirculantCovariance, LogdetGradientIsReciprocalSpectrum) {
  const RVector c = random_positive(16, 5);
  const double step = 1e-6;
  for (Index i = 0; i < 16; ++i) {
    RVector up = c, down = c;
    up[i] += step;
    down[i] -= step;
    const double fd = (CirculantCovariance(up).logdet_pi() - CirculantCovariance(down).logdet_pi()) / (2.0 * step);
    EXPECT_LT(rel_err_scalar(fd, 1.0 / c[i]), 1e-5);
  }
}

TEST(BlockToeplitzCovariance, FactorHasOrthonormalColumnsAndUnitSpectrumGivesIdentity) {
  const auto s = CovarianceStructure::block_toeplitz(14, 12);
  const CMatrix q = s.factor();
  EXPECT_EQ(q.rows(), 672);
  EXPECT_EQ(q.cols(), 168);
  EXPECT_LT((q.adjoint() * q - CMatrix::Identity(168, 168)).norm(), 1e-11);
  const BlockToeplitzCovariance cov(s, RVector::Ones(672));
  EXPECT_LT((cov.dense() - CMatrix::Identity(168, 168)).norm(), 1e-11);
}

TEST(BlockToeplitzCovariance, DenseAssemblyMatchesExplicitFactorProduct) {
  const auto s = CovarianceStructure::block_toeplitz(5, 4);
  const RVector c = random_positive(80, 6);
  const BlockToeplitzCovariance cov(s, c);
  const CMatrix q = s.factor();
  const CMatrix oracle = q.adjoint() * c.cast<cdouble>().asDiagonal() * q;
  EXPECT_LT(rel_err(cov.dense(), oracle), 1e-12);
}

TEST(BlockToeplitzCovariance, AssembledMatrixIsTwoLevelToeplitzAndHermitian) {
  const Index nt = 14, nc = 12;
  const BlockToeplitzCovariance cov(CovarianceStructure::block_toeplitz(nt, nc), random_positive(4 * nt * nc, 7));
  const CMatrix c = cov.dense();
  EXPECT_LT((c - c.adjoint()).cwiseAbs().maxCoeff(), 1e-12 * c.cwiseAbs().maxCoeff());
  double worst = 0.0;
  for (Index t1 = 1; t1 < nt; ++t1)
    for (Index f1 = 1; f1 < nc; ++f1)
      for (Index t2 = 1; t2 < nt; ++t2)
        for (Index f2 = 1; f2 < nc; ++f2)
          worst = std::max(worst, std::abs(c(t1 * nc + f1, t2 * nc + f2) - c((t1 - 1) * nc + f1 - 1, (t2 - 1) * nc + f2 - 1)));
  EXPECT_LT(worst, 1e-10);
  // within a block, shifting both frequencies leaves entries unchanged too
  for (Index f1 = 1; f1 < nc; ++f1)
    for (Index f2 = 1; f2 < nc; ++f2) EXPECT_LT(std::abs(c(3 * nc + f1, 7 * nc + f2) - c(3 * nc + f1 - 1, 7 * nc + f2 - 1)), 1e-10);
}

TEST(BlockToeplitzCovariance, LogdetApplySolveMatchDenseOracles) {
  const Index nt = 14, nc = 12, n = nt * nc;
  const BlockToeplitzCovariance cov(CovarianceStructure::block_toeplitz(nt, nc), random_positive(4 * n, 8));
  const CMatrix c = cov.dense();
  Eigen::SelfAdjointEigenSolver<CMatrix> eig(c);
  const double oracle = static_cast<double>(n) * std::log(kPi) + eig.eigenvalues().array().log().sum();
  EXPECT_LT(rel_err_scalar(cov.logdet_pi(), oracle), 1e-8);
  const CVector x = random_complex(n, 1, 9);
  EXPECT_LT(rel_err(cov.apply(x), CVector(c * x)), 1e-10);
  EXPECT_LT(rel_err(cov.solve(x), CVector(c.ldlt().solve(x))), 1e-8);
  EXPECT_GT(x.dot(cov.apply(x)).real(), 0.0);
}

TEST(BlockToeplitzCovariance, SpectrumGradientMatchesTraceDerivative) {
  // d tr(G C) / d c_k = (Q G Q^H)_{kk}
  const auto s = CovarianceStructure::block_toeplitz(6, 5);
  const Index n = 30;
  const BlockToeplitzCovariance cov(s, random_positive(4 * n, 10));
  CMatrix g = random_complex(n, n, 11);
  g = (g + g.adjoint()).eval();
  const CMatrix q = s.factor();
  const RVector oracle = (q * g * q.adjoint()).diagonal().real();
  EXPECT_LT(rel_err(cov.spectrum_gradient(g), oracle), 1e-11);
}

TEST(StructuredCovariance, DispatchesToTheMatchingForm) {
  const StructuredCovariance circ(CovarianceStructure::circulant(8), RVector::Constant(8, 2.0));
  EXPECT_TRUE(circ.is_circulant());
  EXPECT_NEAR(circ.logdet_pi(), 8.0 * std::log(2.0 * kPi), 1e-12);
  const StructuredCovariance bt(CovarianceStructure::block_toeplitz(3, 2), RVector::Constant(24, 2.0));
  EXPECT_FALSE(bt.is_circulant());
  EXPECT_LT((bt.dense() - 2.0 * CMatrix::Identity(6, 6)).norm(), 1e-12);
  EXPECT_THROW(StructuredCovariance(CovarianceStructure::circulant(8), RVector::Ones(7)), InvalidParameter);
}

TEST(HermitianFactor, JitterRescuesSingularPsdAndInverseIsExact) {
  const CMatrix singular = CMatrix::Ones(4, 4);
  const HermitianFactor f(singular, 1e-6);
  EXPECT_TRUE(f.jittered());
  EXPECT_THROW(HermitianFactor(CMatrix(-CMatrix::Identity(3, 3)), 1e-9), NumericalError);
  CMatrix a = random_complex(10, 10, 12);
  a = a * a.adjoint() + CMatrix::Identity(10, 10);
  const HermitianFactor fa(a);
  EXPECT_FALSE(fa.jittered());
  EXPECT_LT(rel_err(fa.inverse(), CMatrix(a.inverse())), 1e-12);
  EXPECT_EQ(fa.inverse(), CMatrix(fa.inverse().adjoint()));
}
