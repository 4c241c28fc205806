#include "vaece/nn.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <functional>

using namespace vaece;
using namespace vaece::nn;

namespace {

RMatrix random_real(Index rows, Index cols, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  RMatrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = standard_normal(rng);
  return m;
}

/// Checks input and parameter gradients of `net` for loss = <W, net(x)>
/// against central finite differences.
void check_gradients(Sequential& net, const RMatrix& x, double tol) {
  const RMatrix out = net.forward(x, true);
  const RMatrix w = random_real(out.rows(), out.cols(), 99);
  auto loss = [&](const RMatrix& in) { return net.forward(in, true).cwiseProduct(w).sum(); };
  const auto params = net.parameters();
  zero_grad(params);
  net.forward(x, true);
  const RMatrix dx = net.backward(w);
  const double h = 1e-6;
  auto agree = [&](double fd, double an) { return std::abs(fd - an) <= tol * (1.0 + std::abs(an)); };
  for (Index i = 0; i < x.size(); i += std::max<Index>(1, x.size() / 23)) {
    RMatrix up = x, down = x;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double fd = (loss(up) - loss(down)) / (2.0 * h);
    EXPECT_TRUE(agree(fd, dx.data()[i])) << "input " << i << ": fd " << fd << " vs " << dx.data()[i];
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    RMatrix& v = *params[p].value;
    const RMatrix grad = *params[p].grad;
    for (Index i = 0; i < v.size(); i += std::max<Index>(1, v.size() / 17)) {
      const double keep = v.data()[i];
      v.data()[i] = keep + h;
      const double lp = loss(x);
      v.data()[i] = keep - h;
      const double lm = loss(x);
      v.data()[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      EXPECT_TRUE(agree(fd, grad.data()[i])) << "parameter " << p << "[" << i << "]: fd " << fd << " vs "
                                             << grad.data()[i];
    }
  }
}

}  // namespace

TEST(Linear, MatchesAffineMapAndZeroInit) {
  Rng rng = make_rng(1);
  Linear lin(5, 3, rng);
  const RMatrix x = random_real(5, 4, 2);
  const auto p = lin.parameters();
  RMatrix oracle = *p[0].value * x;
  oracle.colwise() += p[1].value->col(0);
  EXPECT_LT((lin.infer(x) - oracle).norm(), 1e-14);
  Linear zero(5, 3, rng, true);
  EXPECT_EQ(zero.infer(x).norm(), 0.0);
}

TEST(Conv1d, MatchesDirectStridedConvolution) {
  Rng rng = make_rng(3);
  const Index cin = 2, cout = 3, k = 5, stride = 2, pad = 2, len = 11, batch = 2;
  Conv1d conv(cin, cout, k, stride, pad, len, rng);
  const Index positions = (len + 2 * pad - k) / stride + 1;
  EXPECT_EQ(conv.out_length(), positions);
  const RMatrix x = random_real(cin, batch * len, 4);
  const auto p = conv.parameters();
  const RMatrix& w = *p[0].value;
  const RMatrix& bias = *p[1].value;
  const RMatrix y = conv.infer(x);
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index q = 0; q < positions; ++q) {
        double acc = bias(o, 0);
        for (Index c = 0; c < cin; ++c)
          for (Index t = 0; t < k; ++t) {
            const Index s = q * stride - pad + t;
            if (s >= 0 && s < len) acc += w(o, c * k + t) * x(c, b * len + s);
          }
        EXPECT_NEAR(y(o, b * positions + q), acc, 1e-12);
      }
}

TEST(ConvTranspose1d, MatchesDirectScatterAndDoublesLength) {
  Rng rng = make_rng(5);
  const Index cin = 3, cout = 2, k = 7, stride = 2, pad = 3, len = 8, batch = 2;
  ConvTranspose1d deconv(cin, cout, k, stride, pad, 1, len, rng);
  const Index out_len = deconv.out_length();
  EXPECT_EQ(out_len, 2 * len);
  const RMatrix x = random_real(cin, batch * len, 6);
  const auto p = deconv.parameters();
  const RMatrix& w = *p[0].value;
  const RMatrix& bias = *p[1].value;
  RMatrix oracle(cout, batch * out_len);
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index s = 0; s < out_len; ++s) oracle(o, b * out_len + s) = bias(o, 0);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < cin; ++c)
      for (Index i = 0; i < len; ++i)
        for (Index t = 0; t < k; ++t) {
          const Index s = i * stride - pad + t;
          if (s < 0 || s >= out_len) continue;
          for (Index o = 0; o < cout; ++o) oracle(o, b * out_len + s) += w(c, o * k + t) * x(c, b * len + i);
        }
  EXPECT_LT((deconv.infer(x) - oracle).norm(), 1e-12 * oracle.norm());
}

TEST(BatchNorm, TrainingOutputIsStandardizedAndInferenceUsesRunningStatistics) {
  BatchNorm bn(3, 1.0);
  RMatrix x = random_real(3, 50, 7);
  x.row(1) = (x.row(1).array() * 4.0 + 2.0).matrix();
  const RMatrix y = bn.forward(x, true);
  for (Index c = 0; c < 3; ++c) {
    EXPECT_NEAR(y.row(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.row(c).squaredNorm() / 50.0, 1.0, 1e-4);
  }
  // momentum 1 keeps exactly the last batch statistics (unbiased variance)
  const RMatrix z = bn.infer(x);
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(z.row(c).squaredNorm() / 49.0, 1.0, 1e-4);
}

TEST(Gradients, LinearReluStackMatchesFiniteDifferences) {
  Rng rng = make_rng(8);
  Sequential net;
  net.add<Linear>(6, 5, rng);
  net.add<ReLU>();
  net.add<Linear>(5, 4, rng);
  check_gradients(net, random_real(6, 3, 9), 1e-6);
}

TEST(Gradients, ConvolutionalEncoderMatchesFiniteDifferences) {
  Rng rng = make_rng(10);
  Sequential net;
  auto& conv = net.add<Conv1d>(2, 3, 3, 2, 1, 8, rng);
  net.add<BatchNorm>(3);
  net.add<Flatten>(3, conv.out_length());
  net.add<Linear>(3 * conv.out_length(), 4, rng);
  check_gradients(net, random_real(2, 4 * 8, 11), 1e-5);
}

TEST(Gradients, TransposedConvolutionalDecoderMatchesFiniteDifferences) {
  Rng rng = make_rng(12);
  Sequential net;
  net.add<Linear>(3, 2 * 4, rng);
  net.add<Unflatten>(2, 4);
  auto& deconv = net.add<ConvTranspose1d>(2, 3, 3, 2, 1, 1, 4, rng);
  net.add<BatchNorm>(3);
  net.add<Flatten>(3, deconv.out_length());
  check_gradients(net, random_real(3, 5, 13), 1e-5);
}

TEST(FlattenLayout, FeatureIndexIsChannelMajor) {
  const RMatrix x = random_real(3, 2 * 4, 14);
  const RMatrix f = flatten(x, 3, 4);
  EXPECT_EQ(f.rows(), 12);
  EXPECT_EQ(f.cols(), 2);
  EXPECT_EQ(f(2 * 4 + 1, 1), x(2, 1 * 4 + 1));
  EXPECT_EQ(unflatten(f, 3, 4), x);
}

TEST(Sequential, CopiesAreDeepAndIndependent) {
  Rng rng = make_rng(15);
  Sequential a;
  a.add<Linear>(2, 2, rng);
  Sequential b = a;
  a.parameters()[0].value->setZero();
  EXPECT_GT(b.parameters()[0].value->norm(), 0.0);
}

TEST(Adam, FirstStepHasLearningRateMagnitudeAndMinimizesQuadratic) {
  RMatrix v = RMatrix::Constant(2, 1, 3.0);
  v(1, 0) = -2.0;
  RMatrix g = RMatrix::Zero(2, 1);
  const std::vector<Parameter> params{{&v, &g}};
  Adam opt(0.1);
  g = 2.0 * v;
  opt.step(params);
  EXPECT_NEAR(v(0, 0), 2.9, 1e-6);
  EXPECT_NEAR(v(1, 0), -1.9, 1e-6);
  for (int i = 0; i < 2000; ++i) {
    g = 2.0 * v;
    opt.step(params);
  }
  EXPECT_LT(v.norm(), 1e-2);
  EXPECT_EQ(opt.steps(), 2001);
}
