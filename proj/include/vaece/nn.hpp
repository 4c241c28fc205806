#pragma once

// Minimal layer stack with explicit backpropagation.
//
// Two activation layouts are used:
//   sequence layout  C x (B * L): channel per row, column b * L + l
//   feature layout   F x B:       one sample per column
// Flatten/Unflatten convert between them with feature index c * L + l.

#include "vaece/core.hpp"
#include "vaece/rng.hpp"

#include <memory>
#include <string>
#include <vector>

namespace vaece::nn {

struct Parameter {
  RMatrix* value;
  RMatrix* grad;
};

class Layer {
 public:
  virtual ~Layer() = default;

  /// Forward pass that caches what backward() needs.
  virtual RMatrix forward(const RMatrix& x, bool training) = 0;
  /// Inference pass; no caching, batch-norm uses running statistics.
  virtual RMatrix infer(const RMatrix& x) const = 0;
  virtual RMatrix backward(const RMatrix& grad_out) = 0;

  virtual std::vector<Parameter> parameters() { return {}; }
  /// Non-trainable state that must be serialized (batch-norm running stats).
  virtual std::vector<RMatrix*> buffers() { return {}; }
  virtual std::string name() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

inline void uniform_fill(RMatrix& m, Rng& rng, double bound) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = uniform(rng, -bound, bound);
}

class Linear final : public Layer {
 public:
  Linear(Index in, Index out, Rng& rng, bool zero_init = false) : weight_(out, in), bias_(out, 1) {
    if (zero_init) {
      weight_.setZero();
      bias_.setZero();
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      uniform_fill(weight_, rng, bound);
      uniform_fill(bias_, rng, bound);
    }
    grad_w_ = RMatrix::Zero(out, in);
    grad_b_ = RMatrix::Zero(out, 1);
  }

  RMatrix forward(const RMatrix& x, bool) override {
    input_ = x;
    return infer(x);
  }

  RMatrix infer(const RMatrix& x) const override {
    require(x.rows() == weight_.cols(), "linear layer input has wrong size");
    RMatrix y = weight_ * x;
    y.colwise() += bias_.col(0);
    return y;
  }

  RMatrix backward(const RMatrix& g) override {
    grad_w_.noalias() += g * input_.transpose();
    grad_b_.col(0) += g.rowwise().sum();
    return weight_.transpose() * g;
  }

  std::vector<Parameter> parameters() override { return {{&weight_, &grad_w_}, {&bias_, &grad_b_}}; }
  std::string name() const override { return "linear"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

 private:
  RMatrix weight_, bias_, grad_w_, grad_b_, input_;
};

/// Geometry of a strided 1D window: position p of a length-`positions`
/// output reads source index p * stride - padding + q, q < kernel.
struct Window {
  Index channels;
  Index source_length;
  Index positions;
  Index kernel;
  Index stride;
  Index padding;
};

/// (C x B*Ls) -> (C*k x B*P)
inline RMatrix gather_windows(const RMatrix& src, const Window& w) {
  const Index batch = src.cols() / w.source_length;
  RMatrix cols = RMatrix::Zero(w.channels * w.kernel, batch * w.positions);
  for (Index b = 0; b < batch; ++b)
    for (Index p = 0; p < w.positions; ++p)
      for (Index q = 0; q < w.kernel; ++q) {
        const Index s = p * w.stride - w.padding + q;
        if (s < 0 || s >= w.source_length) continue;
        for (Index c = 0; c < w.channels; ++c) cols(c * w.kernel + q, b * w.positions + p) = src(c, b * w.source_length + s);
      }
  return cols;
}

/// Adjoint of gather_windows.
inline RMatrix scatter_windows(const RMatrix& cols, const Window& w) {
  const Index batch = cols.cols() / w.positions;
  RMatrix dst = RMatrix::Zero(w.channels, batch * w.source_length);
  for (Index b = 0; b < batch; ++b)
    for (Index p = 0; p < w.positions; ++p)
      for (Index q = 0; q < w.kernel; ++q) {
        const Index s = p * w.stride - w.padding + q;
        if (s < 0 || s >= w.source_length) continue;
        for (Index c = 0; c < w.channels; ++c) dst(c, b * w.source_length + s) += cols(c * w.kernel + q, b * w.positions + p);
      }
  return dst;
}

class Conv1d final : public Layer {
 public:
  Conv1d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding, Index in_length, Rng& rng)
      : window_{in_channels, in_length, (in_length + 2 * padding - kernel) / stride + 1, kernel, stride, padding},
        weight_(out_channels, in_channels * kernel),
        bias_(out_channels, 1) {
    require(window_.positions > 0, "convolution output would be empty");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel));
    uniform_fill(weight_, rng, bound);
    uniform_fill(bias_, rng, bound);
    grad_w_ = RMatrix::Zero(weight_.rows(), weight_.cols());
    grad_b_ = RMatrix::Zero(bias_.rows(), 1);
  }

  Index out_length() const { return window_.positions; }

  RMatrix forward(const RMatrix& x, bool) override {
    cols_ = gather_windows(x, window_);
    RMatrix y = weight_ * cols_;
    y.colwise() += bias_.col(0);
    return y;
  }

  RMatrix infer(const RMatrix& x) const override {
    require(x.rows() == window_.channels, "convolution input has wrong channel count");
    RMatrix y = weight_ * gather_windows(x, window_);
    y.colwise() += bias_.col(0);
    return y;
  }

  RMatrix backward(const RMatrix& g) override {
    grad_w_.noalias() += g * cols_.transpose();
    grad_b_.col(0) += g.rowwise().sum();
    return scatter_windows(weight_.transpose() * g, window_);
  }

  std::vector<Parameter> parameters() override { return {{&weight_, &grad_w_}, {&bias_, &grad_b_}}; }
  std::string name() const override { return "conv1d"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv1d>(*this); }

 private:
  Window window_;
  RMatrix weight_, bias_, grad_w_, grad_b_, cols_;
};

/// Transposed convolution; the adjoint of Conv1d with the same geometry.
class ConvTranspose1d final : public Layer {
 public:
  ConvTranspose1d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding,
                  Index output_padding, Index in_length, Rng& rng)
      : in_channels_(in_channels),
        window_{out_channels, (in_length - 1) * stride - 2 * padding + kernel + output_padding, in_length, kernel, stride,
                padding},
        weight_(in_channels, out_channels * kernel),
        bias_(out_channels, 1) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(out_channels * kernel));
    uniform_fill(weight_, rng, bound);
    uniform_fill(bias_, rng, bound);
    grad_w_ = RMatrix::Zero(weight_.rows(), weight_.cols());
    grad_b_ = RMatrix::Zero(bias_.rows(), 1);
  }

  Index out_length() const { return window_.source_length; }

  RMatrix forward(const RMatrix& x, bool) override {
    input_ = x;
    return infer(x);
  }

  RMatrix infer(const RMatrix& x) const override {
    require(x.rows() == in_channels_, "transposed convolution input has wrong channel count");
    RMatrix y = scatter_windows(weight_.transpose() * x, window_);
    y.colwise() += bias_.col(0);
    return y;
  }

  RMatrix backward(const RMatrix& g) override {
    const RMatrix dcols = gather_windows(g, window_);
    grad_w_.noalias() += input_ * dcols.transpose();
    grad_b_.col(0) += g.rowwise().sum();
    return weight_ * dcols;
  }

  std::vector<Parameter> parameters() override { return {{&weight_, &grad_w_}, {&bias_, &grad_b_}}; }
  std::string name() const override { return "conv_transpose1d"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvTranspose1d>(*this); }

 private:
  Index in_channels_;
  Window window_;
  RMatrix weight_, bias_, grad_w_, grad_b_, input_;
};

/// Per-row normalization over all columns (channels for sequence layout,
/// features for feature layout).
class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(Index channels, double momentum = 0.1, double eps = 1e-5)
      : gamma_(RMatrix::Ones(channels, 1)),
        beta_(RMatrix::Zero(channels, 1)),
        grad_gamma_(RMatrix::Zero(channels, 1)),
        grad_beta_(RMatrix::Zero(channels, 1)),
        running_mean_(RMatrix::Zero(channels, 1)),
        running_var_(RMatrix::Ones(channels, 1)),
        momentum_(momentum),
        eps_(eps) {}

  RMatrix forward(const RMatrix& x, bool training) override {
    if (!training) return infer(x);
    const auto n = static_cast<double>(x.cols());
    require(x.cols() > 1, "batch normalization needs more than one value per channel");
    const RVector mean = x.rowwise().mean();
    xhat_ = x.colwise() - mean;
    const RVector var = xhat_.rowwise().squaredNorm() / n;
    inv_std_ = (var.array() + eps_).rsqrt().matrix();
    xhat_ = inv_std_.asDiagonal() * xhat_;
    running_mean_.col(0) = (1.0 - momentum_) * running_mean_.col(0) + momentum_ * mean;
    running_var_.col(0) = (1.0 - momentum_) * running_var_.col(0) + momentum_ * var * (n / (n - 1.0));
    RMatrix y = gamma_.col(0).asDiagonal() * xhat_;
    y.colwise() += beta_.col(0);
    return y;
  }

  RMatrix infer(const RMatrix& x) const override {
    require(x.rows() == gamma_.rows(), "batch normalization input has wrong channel count");
    const RVector scale = gamma_.col(0).cwiseProduct((running_var_.col(0).array() + eps_).rsqrt().matrix());
    RMatrix y = scale.asDiagonal() * (x.colwise() - running_mean_.col(0));
    y.colwise() += beta_.col(0);
    return y;
  }

  RMatrix backward(const RMatrix& g) override {
    const auto n = static_cast<double>(g.cols());
    grad_gamma_.col(0) += g.cwiseProduct(xhat_).rowwise().sum();
    grad_beta_.col(0) += g.rowwise().sum();
    const RMatrix dxhat = gamma_.col(0).asDiagonal() * g;
    const RVector sum_d = dxhat.rowwise().sum();
    const RVector sum_dx = dxhat.cwiseProduct(xhat_).rowwise().sum();
    RMatrix dx = (dxhat * n).colwise() - sum_d;
    dx -= sum_dx.asDiagonal() * xhat_;
    return (inv_std_ / n).asDiagonal() * dx;
  }

  std::vector<Parameter> parameters() override { return {{&gamma_, &grad_gamma_}, {&beta_, &grad_beta_}}; }
  std::vector<RMatrix*> buffers() override { return {&running_mean_, &running_var_}; }
  std::string name() const override { return "batch_norm"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

 private:
  RMatrix gamma_, beta_, grad_gamma_, grad_beta_, running_mean_, running_var_;
  double momentum_, eps_;
  RMatrix xhat_;
  RVector inv_std_;
};

class ReLU final : public Layer {
 public:
  RMatrix forward(const RMatrix& x, bool) override {
    mask_ = (x.array() > 0.0).cast<double>().matrix();
    return x.cwiseProduct(mask_);
  }
  RMatrix infer(const RMatrix& x) const override { return x.cwiseMax(0.0); }
  RMatrix backward(const RMatrix& g) override { return g.cwiseProduct(mask_); }
  std::string name() const override { return "relu"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }

 private:
  RMatrix mask_;
};

/// Sequence layout (C x B*L) -> feature layout (C*L x B).
inline RMatrix flatten(const RMatrix& x, Index channels, Index length) {
  const Index batch = x.cols() / length;
  RMatrix y(channels * length, batch);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) y.block(c * length, b, length, 1) = x.block(c, b * length, 1, length).transpose();
  return y;
}

inline RMatrix unflatten(const RMatrix& y, Index channels, Index length) {
  const Index batch = y.cols();
  RMatrix x(channels, batch * length);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) x.block(c, b * length, 1, length) = y.block(c * length, b, length, 1).transpose();
  return x;
}

class Flatten final : public Layer {
 public:
  Flatten(Index channels, Index length) : channels_(channels), length_(length) {}
  RMatrix forward(const RMatrix& x, bool) override { return infer(x); }
  RMatrix infer(const RMatrix& x) const override { return flatten(x, channels_, length_); }
  RMatrix backward(const RMatrix& g) override { return unflatten(g, channels_, length_); }
  std::string name() const override { return "flatten"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }

 private:
  Index channels_, length_;
};

class Unflatten final : public Layer {
 public:
  Unflatten(Index channels, Index length) : channels_(channels), length_(length) {}
  RMatrix forward(const RMatrix& x, bool) override { return infer(x); }
  RMatrix infer(const RMatrix& x) const override { return unflatten(x, channels_, length_); }
  RMatrix backward(const RMatrix& g) override { return flatten(g, channels_, length_); }
  std::string name() const override { return "unflatten"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Unflatten>(*this); }

 private:
  Index channels_, length_;
};

class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& other) {
    if (this != &other) {
      Sequential copy(other);
      layers_ = std::move(copy.layers_);
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  RMatrix forward(const RMatrix& x, bool training) {
    RMatrix h = x;
    for (auto& l : layers_) h = l->forward(h, training);
    return h;
  }

  RMatrix infer(const RMatrix& x) const {
    RMatrix h = x;
    for (const auto& l : layers_) h = l->infer(h);
    return h;
  }

  RMatrix backward(const RMatrix& g) {
    RMatrix d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }

  std::vector<Parameter> parameters() {
    std::vector<Parameter> out;
    for (auto& l : layers_)
      for (auto p : l->parameters()) out.push_back(p);
    return out;
  }

  std::vector<RMatrix*> buffers() {
    std::vector<RMatrix*> out;
    for (auto& l : layers_)
      for (auto* b : l->buffers()) out.push_back(b);
    return out;
  }

  std::size_t size() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

inline void zero_grad(const std::vector<Parameter>& params) {
  for (const auto& p : params) p.grad->setZero();
}

/// Adaptive-moment gradient descent.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(RMatrix::Zero(p.value->rows(), p.value->cols()));
        v_.push_back(RMatrix::Zero(p.value->rows(), p.value->cols()));
      }
    }
    require(m_.size() == params.size(), "optimizer bound to a different parameter set");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const RMatrix& g = *params[i].grad;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
      params[i].value->array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<RMatrix> m_, v_;
};

}  // namespace vaece::nn
