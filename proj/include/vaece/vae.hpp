#pragma once

// Variational autoencoder with a conditionally Gaussian decoder whose
// covariance is structured (circulant or block-Toeplitz), plus the two
// training objectives:
//
//   noisy: ground-truth h scores the decoder,
//          NLL = log det(pi C) + (h - mu)^H C^{-1} (h - mu)
//   real:  only y is available; the decoder moments are pushed through A,
//          NLL = log det(pi S) + (y - A mu)^H S^{-1} (y - A mu),
//          S = A C A^H + noise_variance I
//
// Both add the closed-form KL(N(mu, diag(sigma^2)) || N(0, I)).

#include "vaece/core.hpp"
#include "vaece/nn.hpp"
#include "vaece/observation.hpp"
#include "vaece/rng.hpp"
#include "vaece/structured_cov.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace vaece {

enum class Variant { Noisy, RealFixedA, RealVaryingA };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Noisy: return "vae_noisy";
    case Variant::RealFixedA: return "vae_real_fix";
    case Variant::RealVaryingA: return "vae_real_var";
  }
  return "vae_noisy";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "vae_noisy" || s == "noisy") return Variant::Noisy;
  if (s == "vae_real_fix" || s == "real_fix") return Variant::RealFixedA;
  if (s == "vae_real_var" || s == "real_var") return Variant::RealVaryingA;
  throw InvalidParameter("unknown VAE variant: " + s);
}

inline bool is_real_variant(Variant v) { return v != Variant::Noisy; }

inline constexpr double kRawClamp = 20.0;

/// Layer inventory of encoder and decoder. Fully determines parameter shapes.
struct Architecture {
  Index n = 32;  // channel dimension
  StructureKind covariance = StructureKind::Circulant;
  Index n_timeslots = 0;  // block-Toeplitz only
  Index n_subcarriers = 0;
  Index latent_dim = 16;
  std::vector<Index> encoder_channels{16, 32, 64};
  std::vector<Index> decoder_channels{32, 16, 8};
  Index kernel_size = 7;
  bool zero_init_encoder_head = true;

  CovarianceStructure structure() const {
    if (covariance == StructureKind::Circulant) return CovarianceStructure::circulant(n);
    require(n_timeslots * n_subcarriers == n, "grid does not match channel dimension");
    return CovarianceStructure::block_toeplitz(n_timeslots, n_subcarriers);
  }
  Index spectrum_size() const { return covariance == StructureKind::Circulant ? n : 4 * n; }
  Index output_size() const { return 2 * n + spectrum_size(); }

  void validate() const {
    require(n > 0, "channel dimension must be positive");
    require(latent_dim > 0, "latent dimension must be positive");
    require(!encoder_channels.empty(), "encoder needs at least one convolution");
    require(decoder_channels.size() == encoder_channels.size(), "decoder must mirror the encoder depth");
    require(kernel_size > 0 && kernel_size % 2 == 1, "kernel size must be odd");
    for (auto c : encoder_channels) require(c > 0, "channel counts must be positive");
    for (auto c : decoder_channels) require(c > 0, "channel counts must be positive");
  }
};

struct LatentGaussian {
  RVector mean;
  RVector std;
};

struct DecoderOutput {
  CVector mean;
  StructuredCovariance cov;
};

/// (re, im) channel pair in sequence layout: 2 x (B * N).
inline RMatrix pack_complex(const CMatrix& x) {
  const Index n = x.rows(), batch = x.cols();
  RMatrix out(2, n * batch);
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < n; ++i) {
      out(0, b * n + i) = x(i, b).real();
      out(1, b * n + i) = x(i, b).imag();
    }
  return out;
}

inline RVector clamp_raw(const RVector& raw) { return raw.cwiseMax(-kRawClamp).cwiseMin(kRawClamp); }

/// sigma = exp(raw / 2)
inline RVector std_from_raw(const RVector& raw) { return (clamp_raw(raw) / 2.0).array().exp().matrix(); }

/// c = exp(raw)
inline RVector spectrum_from_raw(const RVector& raw) { return clamp_raw(raw).array().exp().matrix(); }

class VaeModel {
 public:
  VaeModel(Architecture arch, Variant variant, std::uint64_t init_seed)
      : arch_(std::move(arch)), variant_(variant), structure_(arch_.structure()) {
    arch_.validate();
    Rng rng = make_rng(init_seed);
    const Index k = arch_.kernel_size, pad = (k - 1) / 2;

    Index length = arch_.n, channels = 2;
    for (Index c : arch_.encoder_channels) {
      auto& conv = encoder_.add<nn::Conv1d>(channels, c, k, 2, pad, length, rng);
      encoder_.add<nn::BatchNorm>(c);
      encoder_.add<nn::ReLU>();
      length = conv.out_length();
      channels = c;
    }
    encoder_.add<nn::Flatten>(channels, length);
    encoder_.add<nn::Linear>(channels * length, 2 * arch_.latent_dim, rng, arch_.zero_init_encoder_head);

    decoder_.add<nn::Linear>(arch_.latent_dim, channels * length, rng);
    decoder_.add<nn::ReLU>();
    decoder_.add<nn::Unflatten>(channels, length);
    for (Index c : arch_.decoder_channels) {
      auto& deconv = decoder_.add<nn::ConvTranspose1d>(channels, c, k, 2, pad, 1, length, rng);
      decoder_.add<nn::BatchNorm>(c);
      decoder_.add<nn::ReLU>();
      length = deconv.out_length();
      channels = c;
    }
    decoder_.add<nn::Flatten>(channels, length);
    decoder_.add<nn::Linear>(channels * length, arch_.output_size(), rng);
  }

  const Architecture& architecture() const { return arch_; }
  Variant variant() const { return variant_; }
  const CovarianceStructure& structure() const { return structure_; }
  Index latent_dim() const { return arch_.latent_dim; }
  Index dimension() const { return arch_.n; }

  nn::Sequential& encoder() { return encoder_; }
  nn::Sequential& decoder() { return decoder_; }
  const nn::Sequential& encoder() const { return encoder_; }
  const nn::Sequential& decoder() const { return decoder_; }

  std::vector<nn::Parameter> parameters() {
    auto p = encoder_.parameters();
    for (auto q : decoder_.parameters()) p.push_back(q);
    return p;
  }

  /// Every serialized tensor in a fixed order: parameters, then buffers.
  std::vector<RMatrix*> state() {
    std::vector<RMatrix*> s;
    for (auto p : parameters()) s.push_back(p.value);
    for (auto* b : encoder_.buffers()) s.push_back(b);
    for (auto* b : decoder_.buffers()) s.push_back(b);
    return s;
  }

  Index parameter_count() {
    Index n = 0;
    for (auto p : parameters()) n += p.value->size();
    return n;
  }

 private:
  Architecture arch_;
  Variant variant_;
  CovarianceStructure structure_;
  nn::Sequential encoder_;
  nn::Sequential decoder_;
};

// ---------------------------------------------------------------------------
// Single-sample inference API
// ---------------------------------------------------------------------------

/// Encoder input is A^H y (A^T y for selections), as two real channels.
inline LatentGaussian encode(const VaeModel& model, const CVector& input) {
  require(input.size() == model.dimension(), "encoder input has wrong dimension");
  const RMatrix out = model.encoder().infer(pack_complex(input));
  const Index nl = model.latent_dim();
  return {out.col(0).head(nl), std_from_raw(out.col(0).tail(nl))};
}

inline RVector reparameterize(const LatentGaussian& lat, std::uint64_t rng_seed) {
  Rng rng = make_rng(rng_seed);
  return lat.mean + lat.std.cwiseProduct(normal_vector(rng, lat.mean.size()));
}

inline DecoderOutput unpack_decoder_output(const RVector& raw, const Architecture& arch,
                                           const CovarianceStructure& structure) {
  if (!raw.allFinite()) throw NumericalError("decoder produced non-finite output");
  const Index n = arch.n;
  CVector mean(n);
  for (Index i = 0; i < n; ++i) mean[i] = {raw[i], raw[n + i]};
  return {mean, StructuredCovariance(structure, spectrum_from_raw(raw.tail(arch.spectrum_size())))};
}

inline DecoderOutput decode(const VaeModel& model, const RVector& z) {
  require(z.size() == model.latent_dim(), "latent vector has wrong dimension");
  const RMatrix out = model.decoder().infer(z);
  return unpack_decoder_output(out.col(0), model.architecture(), model.structure());
}

// ---------------------------------------------------------------------------
// Objective terms with gradients
// ---------------------------------------------------------------------------

/// Value plus gradients with respect to the decoder mean (as
/// dL/dRe + j dL/dIm) and the covariance spectrum.
struct NllGradient {
  double value = 0.0;
  CVector d_mean;
  RVector d_spectrum;
};

/// KL(N(mu, diag(sigma^2)) || N(0, I)) = 1/2 sum(sigma^2 + mu^2 - 1 - log sigma^2)
inline double kl_divergence(const RVector& mean, const RVector& std) {
  const RVector var = std.cwiseAbs2();
  return 0.5 * (var.array() + mean.array().square() - 1.0 - var.array().log()).sum();
}

/// log det(pi C) + (h - mu)^H C^{-1} (h - mu) via the structured fast path.
inline NllGradient noisy_nll(const CVector& h, const CVector& mean, const RVector& spectrum,
                             const CovarianceStructure& structure) {
  require(h.size() == structure.dimension() && mean.size() == h.size(), "channel dimension mismatch");
  NllGradient out;
  const CVector d = h - mean;
  if (structure.kind() == StructureKind::Circulant) {
    validate_spectrum(spectrum);
    const CVector v = unitary_dft(d);
    const RVector power = v.cwiseAbs2();
    out.value = (kPi * spectrum.array()).log().sum() + (power.array() / spectrum.array()).sum();
    out.d_spectrum = (1.0 / spectrum.array() - power.array() / spectrum.array().square()).matrix();
    out.d_mean = -2.0 * unitary_idft(v.cwiseQuotient(spectrum.cast<cdouble>()));
    return out;
  }
  const BlockToeplitzCovariance cov(structure, spectrum);
  const HermitianFactor factor = cov.factorize();
  const CVector u = factor.solve(d);
  out.value = static_cast<double>(d.size()) * std::log(kPi) + factor.logdet() + d.dot(u).real();
  CMatrix g = factor.inverse();
  g.noalias() -= u * u.adjoint();
  out.d_spectrum = cov.spectrum_gradient(g);
  out.d_mean = -2.0 * u;
  return out;
}

/// log det(pi S) + e^H S^{-1} e with S = B diag(c) B^H + noise_variance I,
/// e = y - A mu, and B = A P^H the observed covariance factor.
inline NllGradient real_nll(const CVector& y, const CVector& mean, const RVector& spectrum, const CMatrix& observed_factor,
                            const ObservationOperator& op, double noise_variance) {
  require(y.size() == op.rows() && observed_factor.rows() == op.rows(), "observation dimension mismatch");
  require(observed_factor.cols() == spectrum.size(), "spectrum length does not match observed factor");
  require(noise_variance >= 0.0, "noise variance must be non-negative");
  validate_spectrum(spectrum);
  const Index m = op.rows();
  const CVector e = y - op.apply(mean);
  const CMatrix bc = observed_factor * spectrum.cast<cdouble>().asDiagonal();
  CMatrix s = bc * observed_factor.adjoint();
  s.diagonal().array() += noise_variance;
  s = (s + s.adjoint()).eval() / 2.0;
  const HermitianFactor factor(s, 1e-9 * spectrum.mean());
  const CVector u = factor.solve(e);

  NllGradient out;
  out.value = static_cast<double>(m) * std::log(kPi) + factor.logdet() + e.dot(u).real();
  CMatrix g = factor.inverse();
  g.noalias() -= u * u.adjoint();
  const CMatrix w = g * observed_factor;
  out.d_spectrum = observed_factor.conjugate().cwiseProduct(w).colwise().sum().real().transpose();
  out.d_mean = -2.0 * op.adjoint(u);
  return out;
}

/// B = A P^H for the structure's synthesis factor.
inline CMatrix observed_factor(const ObservationOperator& op, const CovarianceStructure& structure) {
  require(op.cols() == structure.dimension(), "operator does not match covariance dimension");
  return op.apply(CMatrix(structure.factor().adjoint()));
}

// ---------------------------------------------------------------------------
// Batched objectives
// ---------------------------------------------------------------------------

/// Observations sharing one operator. Carries no ground truth.
struct ObservationBatch {
  const ObservationOperator* op = nullptr;
  CMatrix observations;  // M x B
  RVector noise_variances;  // B

  Index size() const { return observations.cols(); }
};

struct LossTerms {
  double total = 0.0;
  double nll = 0.0;
  double kl = 0.0;
};

enum class Mode { Train, Eval };

namespace detail {

struct ForwardPass {
  RMatrix enc_out;
  RMatrix eps;
  RMatrix z;
  RMatrix dec_out;
};

inline ForwardPass run_forward(VaeModel& model, const ObservationBatch& batch, const RMatrix& eps, Mode mode) {
  require(batch.op != nullptr, "observation batch has no operator");
  require(eps.rows() == model.latent_dim() && eps.cols() == batch.size(), "noise matrix has wrong shape");
  const bool train = mode == Mode::Train;
  ForwardPass f;
  const RMatrix input = pack_complex(batch.op->adjoint(batch.observations));
  f.enc_out = train ? model.encoder().forward(input, true) : model.encoder().infer(input);
  const Index nl = model.latent_dim();
  f.eps = eps;
  f.z.resize(nl, batch.size());
  for (Index b = 0; b < batch.size(); ++b)
    f.z.col(b) = f.enc_out.col(b).head(nl) + std_from_raw(f.enc_out.col(b).tail(nl)).cwiseProduct(eps.col(b));
  f.dec_out = train ? model.decoder().forward(f.z, true) : model.decoder().infer(f.z);
  if (!f.dec_out.allFinite()) throw NumericalError("decoder produced non-finite output");
  return f;
}

/// Backpropagates per-sample NLL gradients and the KL term through the
/// decoder, the reparameterization and the encoder. Gradients are averaged
/// over the batch.
inline void run_backward(VaeModel& model, const ForwardPass& f, const std::vector<NllGradient>& grads) {
  const Index n = model.dimension(), nl = model.latent_dim();
  const Index k = model.architecture().spectrum_size();
  const auto batch = static_cast<Index>(grads.size());
  const double inv_b = 1.0 / static_cast<double>(batch);

  RMatrix d_dec(f.dec_out.rows(), batch);
  for (Index b = 0; b < batch; ++b) {
    const auto& g = grads[static_cast<std::size_t>(b)];
    d_dec.col(b).head(n) = g.d_mean.real();
    d_dec.col(b).segment(n, n) = g.d_mean.imag();
    for (Index i = 0; i < k; ++i) {
      const double raw = f.dec_out(2 * n + i, b);
      const bool active = raw > -kRawClamp && raw < kRawClamp;
      d_dec(2 * n + i, b) = active ? g.d_spectrum[i] * std::exp(raw) : 0.0;
    }
  }
  d_dec *= inv_b;
  const RMatrix dz = model.decoder().backward(d_dec);

  RMatrix d_enc(2 * nl, batch);
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < nl; ++i) {
      const double mu = f.enc_out(i, b);
      const double raw = f.enc_out(nl + i, b);
      const bool active = raw > -kRawClamp && raw < kRawClamp;
      const double sigma = std::exp(std::clamp(raw, -kRawClamp, kRawClamp) / 2.0);
      d_enc(i, b) = (dz(i, b) + mu * inv_b);
      d_enc(nl + i, b) = active ? dz(i, b) * f.eps(i, b) * sigma / 2.0 + 0.5 * (sigma * sigma - 1.0) * inv_b : 0.0;
    }
  model.encoder().backward(d_enc);
}

inline double batch_kl(const VaeModel& model, const RMatrix& enc_out) {
  const Index nl = model.latent_dim();
  double kl = 0.0;
  for (Index b = 0; b < enc_out.cols(); ++b)
    kl += kl_divergence(enc_out.col(b).head(nl), std_from_raw(enc_out.col(b).tail(nl)));
  return kl;
}

inline CVector decoder_mean(const RMatrix& dec_out, Index b, Index n) {
  CVector mean(n);
  for (Index i = 0; i < n; ++i) mean[i] = {dec_out(i, b), dec_out(n + i, b)};
  return mean;
}

inline LossTerms finish(VaeModel& model, const ForwardPass& f, const std::vector<NllGradient>& grads, bool backprop) {
  LossTerms t;
  for (const auto& g : grads) t.nll += g.value;
  t.kl = batch_kl(model, f.enc_out);
  const auto batch = static_cast<double>(grads.size());
  t.nll /= batch;
  t.kl /= batch;
  t.total = t.nll + t.kl;
  if (!std::isfinite(t.total)) throw NumericalError("objective is not finite");
  if (backprop) run_backward(model, f, grads);
  return t;
}

}  // namespace detail

/// Noisy-variant objective averaged over the batch: the encoder sees A^H y,
/// the decoder likelihood is evaluated on the ground-truth channels.
/// With backprop, gradients accumulate into the model (Train mode only).
inline LossTerms noisy_objective(VaeModel& model, const CMatrix& channels, const ObservationBatch& batch,
                                 const RMatrix& eps, Mode mode, bool backprop) {
  require(channels.cols() == batch.size() && channels.rows() == model.dimension(), "channel batch has wrong shape");
  require(!backprop || mode == Mode::Train, "backpropagation requires a training-mode forward pass");
  const auto f = detail::run_forward(model, batch, eps, mode);
  const Index n = model.dimension();
  const Index k = model.architecture().spectrum_size();
  std::vector<NllGradient> grads(static_cast<std::size_t>(batch.size()));
  for (Index b = 0; b < batch.size(); ++b)
    grads[static_cast<std::size_t>(b)] = noisy_nll(channels.col(b), detail::decoder_mean(f.dec_out, b, n),
                                                   spectrum_from_raw(f.dec_out.col(b).segment(2 * n, k)),
                                                   model.structure());
  return detail::finish(model, f, grads, backprop);
}

/// Real-variant objective: only observations enter the loss.
inline LossTerms real_objective(VaeModel& model, const ObservationBatch& batch, const RMatrix& eps, Mode mode,
                                bool backprop) {
  require(!backprop || mode == Mode::Train, "backpropagation requires a training-mode forward pass");
  const auto f = detail::run_forward(model, batch, eps, mode);
  const Index n = model.dimension();
  const Index k = model.architecture().spectrum_size();
  const CMatrix b_factor = observed_factor(*batch.op, model.structure());
  std::vector<NllGradient> grads(static_cast<std::size_t>(batch.size()));
  for (Index b = 0; b < batch.size(); ++b)
    grads[static_cast<std::size_t>(b)] =
        real_nll(batch.observations.col(b), detail::decoder_mean(f.dec_out, b, n),
                 spectrum_from_raw(f.dec_out.col(b).segment(2 * n, k)), b_factor, *batch.op, batch.noise_variances[b]);
  return detail::finish(model, f, grads, backprop);
}

inline ObservationBatch single_observation(const ObservationOperator& op, const CVector& y, const NoiseModel& noise) {
  ObservationBatch batch{&op, CMatrix(y), RVector::Constant(1, noise.variance)};
  return batch;
}

/// One-sample noisy loss in inference mode with a single z draw.
inline double loss_vae_noisy(VaeModel& model, const CVector& h, const CVector& y, const ObservationOperator& op,
                             const NoiseModel& noise, std::uint64_t rng_seed) {
  Rng rng = make_rng(rng_seed);
  const RMatrix eps = normal_vector(rng, model.latent_dim());
  return noisy_objective(model, CMatrix(h), single_observation(op, y, noise), eps, Mode::Eval, false).total;
}

/// One-sample real loss in inference mode. Never sees the channel.
inline double loss_vae_real(VaeModel& model, const CVector& y, const ObservationOperator& op, const NoiseModel& noise,
                            std::uint64_t rng_seed) {
  Rng rng = make_rng(rng_seed);
  const RMatrix eps = normal_vector(rng, model.latent_dim());
  return real_objective(model, single_observation(op, y, noise), eps, Mode::Eval, false).total;
}

}  // namespace vaece
