#pragma once

#include "vaece/channel_models.hpp"
#include "vaece/nn.hpp"
#include "vaece/observation.hpp"
#include "vaece/rng.hpp"
#include "vaece/vae.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace vaece {

enum class OperatorResampling { Fixed, PerIteration };

struct SnrRange {
  double min_db = -10.0;
  double max_db = 40.0;
};

struct TrainConfig {
  Index batch_size = 128;
  Index epochs = 50;
  double learning_rate = 5e-4;
  std::uint64_t seed = 0;
  SnrRange snr;
  OperatorResampling resampling = OperatorResampling::Fixed;

  void validate() const {
    require(batch_size > 1, "batch size must exceed one (batch normalization)");
    require(epochs > 0, "epoch count must be positive");
    require(learning_rate > 0.0, "learning rate must be positive");
    require(snr.max_db >= snr.min_db, "invalid SNR range");
  }
};

/// Produces a fresh observation operator from a seed.
using OperatorFactory = std::function<ObservationOperator(std::uint64_t)>;

struct TrainingBatch {
  ObservationBatch observations;
  std::optional<CMatrix> channels;  // present only for sources feeding the noisy objective
};

/// Supplies training batches. Each batch shares one observation operator.
class TrainingSource {
 public:
  virtual ~TrainingSource() = default;
  virtual Index size() const = 0;
  virtual bool exposes_channels() const = 0;

  /// Index groups for one pass; each group becomes one optimizer step.
  virtual std::vector<std::vector<Index>> schedule(std::uint64_t epoch, Index batch_size, std::uint64_t seed) const {
    Rng rng = make_rng(derive_seed(seed, {epoch, 0x5c4edULL}));
    return chunk(permutation(rng, size()), batch_size);
  }

  /// The returned batch may reference operator storage owned by the source;
  /// it stays valid until the next call.
  virtual TrainingBatch batch(const std::vector<Index>& indices, std::uint64_t epoch, std::uint64_t iteration) = 0;

 protected:
  static std::vector<std::vector<Index>> chunk(const std::vector<Index>& order, Index batch_size) {
    std::vector<std::vector<Index>> out;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
      const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    // a trailing single-sample batch cannot be batch-normalized
    if (out.size() > 1 && out.back().size() == 1) {
      out[out.size() - 2].push_back(out.back().front());
      out.pop_back();
    }
    return out;
  }
};

/// Synthesizes y = A h + n from channels held privately. Noise and the
/// per-sample SNR are redrawn for every epoch; the operator is either fixed or
/// redrawn for every batch.
class SimulatedObservations final : public TrainingSource {
 public:
  SimulatedObservations(CMatrix channels, ObservationOperator fixed_op, SnrRange snr, std::uint64_t seed,
                        bool expose_channels)
      : channels_(std::move(channels)), current_(std::move(fixed_op)), snr_(snr), seed_(seed), expose_(expose_channels) {
    require(current_->cols() == channels_.rows(), "operator does not match channel dimension");
  }

  SimulatedObservations(CMatrix channels, OperatorFactory factory, SnrRange snr, std::uint64_t seed,
                        bool expose_channels)
      : channels_(std::move(channels)), factory_(std::move(factory)), snr_(snr), seed_(seed), expose_(expose_channels) {}

  Index size() const override { return channels_.cols(); }
  bool exposes_channels() const override { return expose_; }

  TrainingBatch batch(const std::vector<Index>& indices, std::uint64_t epoch, std::uint64_t iteration) override {
    if (factory_) {
      current_ = factory_(derive_seed(seed_, {epoch, iteration, 0xa11ceULL}));
      require(current_->cols() == channels_.rows(), "operator does not match channel dimension");
    }
    const auto& op = *current_;
    const auto b = static_cast<Index>(indices.size());
    TrainingBatch out;
    out.observations.op = &op;
    out.observations.observations.resize(op.rows(), b);
    out.observations.noise_variances.resize(b);
    CMatrix h(channels_.rows(), b);
    for (Index j = 0; j < b; ++j) {
      const Index i = indices[static_cast<std::size_t>(j)];
      h.col(j) = channels_.col(i);
      Rng rng = make_rng(derive_seed(seed_, {epoch, static_cast<std::uint64_t>(i), 0x4015eULL}));
      const double variance = noise_variance_from_snr_db(uniform(rng, snr_.min_db, snr_.max_db));
      out.observations.noise_variances[j] = variance;
      out.observations.observations.col(j) = observe_with_noise(h.col(j), op, complex_normal_vector(rng, op.rows(), variance));
    }
    if (expose_) out.channels = std::move(h);
    return out;
  }

 private:
  CMatrix channels_;
  std::optional<ObservationOperator> current_;
  OperatorFactory factory_;
  SnrRange snr_;
  std::uint64_t seed_;
  bool expose_;
};

/// A recorded stream of training batches: the observations, noise
/// variances and operators a source produced, epoch by epoch. Columns of
/// `observations` are grouped into consecutive batches.
struct ObservationCorpus {
  struct Batch {
    Index begin = 0;     // first column
    Index size = 0;
    Index op_index = 0;  // into `operators`
  };

  std::vector<ObservationOperator> operators;
  CMatrix observations;  // M x (epochs * samples_per_epoch)
  RVector noise_variances;
  std::vector<Batch> batches;
  std::vector<Index> epoch_begin;  // first batch of each epoch, plus one past the end
  Index samples_per_epoch = 0;

  Index epochs() const { return static_cast<Index>(epoch_begin.size()) - 1; }
  Index columns() const { return observations.cols(); }

  void validate() const {
    require(!operators.empty(), "corpus has no operators");
    require(epoch_begin.size() >= 2 && epoch_begin.front() == 0, "corpus has no epochs");
    require(epoch_begin.back() == static_cast<Index>(batches.size()), "corpus epoch table is inconsistent");
    require(noise_variances.size() == observations.cols(), "corpus noise variances do not match observations");
    Index next = 0;
    for (const auto& b : batches) {
      require(b.begin == next && b.size > 0, "corpus batches must tile the observations");
      require(b.op_index >= 0 && b.op_index < static_cast<Index>(operators.size()), "corpus operator index out of range");
      require(operators[static_cast<std::size_t>(b.op_index)].rows() == observations.rows(),
              "corpus operator does not match observation length");
      next += b.size;
    }
    require(next == observations.cols(), "corpus batches must tile the observations");
    for (Index e = 0; e < epochs(); ++e) {
      Index count = 0;
      for (Index b = epoch_begin[static_cast<std::size_t>(e)]; b < epoch_begin[static_cast<std::size_t>(e) + 1]; ++b)
        count += batches[static_cast<std::size_t>(b)].size;
      require(count == samples_per_epoch, "every corpus epoch must cover the same number of samples");
    }
  }
};

/// Records `epochs` training passes of `source` exactly as train() would
/// request them (same schedule and iteration counter). Channels are dropped.
inline ObservationCorpus record_training_stream(TrainingSource& source, Index epochs, Index batch_size,
                                                std::uint64_t seed) {
  require(epochs > 0 && batch_size > 1, "invalid recording schedule");
  ObservationCorpus corpus;
  corpus.samples_per_epoch = source.size();
  std::vector<CMatrix> blocks;
  std::vector<RVector> variances;
  Index iteration = 0, column = 0;
  for (Index epoch = 1; epoch <= epochs; ++epoch) {
    corpus.epoch_begin.push_back(static_cast<Index>(corpus.batches.size()));
    for (const auto& group : source.schedule(static_cast<std::uint64_t>(epoch), batch_size, seed)) {
      const auto b = source.batch(group, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(iteration++));
      const auto& op = *b.observations.op;
      if (corpus.operators.empty() || !(corpus.operators.back() == op)) corpus.operators.push_back(op);
      corpus.batches.push_back({column, b.observations.size(), static_cast<Index>(corpus.operators.size()) - 1});
      column += b.observations.size();
      blocks.push_back(b.observations.observations);
      variances.push_back(b.observations.noise_variances);
    }
  }
  corpus.epoch_begin.push_back(static_cast<Index>(corpus.batches.size()));
  const Index m = corpus.operators.front().rows();
  corpus.observations.resize(m, column);
  corpus.noise_variances.resize(column);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    corpus.observations.middleCols(corpus.batches[i].begin, corpus.batches[i].size) = blocks[i];
    corpus.noise_variances.segment(corpus.batches[i].begin, corpus.batches[i].size) = variances[i];
  }
  return corpus;
}

/// Records one pass in the sequential order evaluate_objective() uses.
inline ObservationCorpus record_evaluation_stream(TrainingSource& source, Index batch_size) {
  require(batch_size > 0, "batch size must be positive");
  ObservationCorpus corpus;
  corpus.samples_per_epoch = source.size();
  corpus.epoch_begin.push_back(0);
  std::vector<CMatrix> blocks;
  std::vector<RVector> variances;
  Index iteration = 0;
  for (Index i = 0; i < source.size(); i += batch_size, ++iteration) {
    std::vector<Index> idx;
    for (Index j = i; j < std::min(source.size(), i + batch_size); ++j) idx.push_back(j);
    const auto b = source.batch(idx, 0, static_cast<std::uint64_t>(iteration));
    const auto& op = *b.observations.op;
    if (corpus.operators.empty() || !(corpus.operators.back() == op)) corpus.operators.push_back(op);
    corpus.batches.push_back({i, static_cast<Index>(idx.size()), static_cast<Index>(corpus.operators.size()) - 1});
    blocks.push_back(b.observations.observations);
    variances.push_back(b.observations.noise_variances);
  }
  corpus.epoch_begin.push_back(static_cast<Index>(corpus.batches.size()));
  corpus.observations.resize(corpus.operators.front().rows(), source.size());
  corpus.noise_variances.resize(source.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    corpus.observations.middleCols(corpus.batches[i].begin, corpus.batches[i].size) = blocks[i];
    corpus.noise_variances.segment(corpus.batches[i].begin, corpus.batches[i].size) = variances[i];
  }
  return corpus;
}

/// Replays a recorded stream. Training epoch e replays recorded epoch
/// ((e - 1) mod epochs) + 1 batch by batch; index i of a sequential pass
/// maps to column i of the first recorded epoch.
class RecordedObservations final : public TrainingSource {
 public:
  explicit RecordedObservations(ObservationCorpus corpus) : corpus_(std::move(corpus)) {
    corpus_.validate();
    batch_of_column_.resize(static_cast<std::size_t>(corpus_.columns()));
    for (std::size_t b = 0; b < corpus_.batches.size(); ++b)
      for (Index c = 0; c < corpus_.batches[b].size; ++c)
        batch_of_column_[static_cast<std::size_t>(corpus_.batches[b].begin + c)] = static_cast<Index>(b);
  }

  const ObservationCorpus& corpus() const { return corpus_; }
  Index size() const override { return corpus_.samples_per_epoch; }
  bool exposes_channels() const override { return false; }

  std::vector<std::vector<Index>> schedule(std::uint64_t epoch, Index, std::uint64_t) const override {
    require(epoch >= 1, "epochs are numbered from one");
    const auto e = static_cast<std::size_t>((static_cast<Index>(epoch) - 1) % corpus_.epochs());
    std::vector<std::vector<Index>> out;
    for (Index b = corpus_.epoch_begin[e]; b < corpus_.epoch_begin[e + 1]; ++b) {
      const auto& rec = corpus_.batches[static_cast<std::size_t>(b)];
      std::vector<Index> cols(static_cast<std::size_t>(rec.size));
      std::iota(cols.begin(), cols.end(), rec.begin);
      out.push_back(std::move(cols));
    }
    return out;
  }

  TrainingBatch batch(const std::vector<Index>& indices, std::uint64_t, std::uint64_t) override {
    require(!indices.empty(), "empty batch");
    const Index op_index = op_of(indices.front());
    const auto& op = corpus_.operators[static_cast<std::size_t>(op_index)];
    TrainingBatch out;
    out.observations.op = &op;
    out.observations.observations.resize(op.rows(), static_cast<Index>(indices.size()));
    out.observations.noise_variances.resize(static_cast<Index>(indices.size()));
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (op_of(indices[j]) != op_index) throw std::logic_error("batch mixes observation operators");
      out.observations.observations.col(static_cast<Index>(j)) = corpus_.observations.col(indices[j]);
      out.observations.noise_variances[static_cast<Index>(j)] = corpus_.noise_variances[indices[j]];
    }
    return out;
  }

 private:
  Index op_of(Index column) const {
    require(column >= 0 && column < corpus_.columns(), "corpus column out of range");
    return corpus_.batches[static_cast<std::size_t>(batch_of_column_[static_cast<std::size_t>(column)])].op_index;
  }

  ObservationCorpus corpus_;
  std::vector<Index> batch_of_column_;
};

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  Index best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  Index iterations = 0;
};

/// Raised when the objective stops being finite.
struct TrainingDiverged : NumericalError {
  TrainingDiverged(Index epoch, const std::string& what)
      : NumericalError("training diverged in epoch " + std::to_string(epoch) + ": " + what), epoch(epoch) {}
  Index epoch;
};

namespace detail {

inline LossTerms objective_for(VaeModel& model, const TrainingBatch& batch, const RMatrix& eps, Mode mode,
                               bool backprop) {
  if (model.variant() == Variant::Noisy) {
    if (!batch.channels) throw std::logic_error("noisy objective needs ground-truth channels");
    return noisy_objective(model, *batch.channels, batch.observations, eps, mode, backprop);
  }
  if (batch.channels) throw std::logic_error("real-variant training must not receive ground-truth channels");
  return real_objective(model, batch.observations, eps, mode, backprop);
}

inline RMatrix latent_noise(Index latent_dim, Index batch, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  RMatrix eps(latent_dim, batch);
  for (Index j = 0; j < batch; ++j)
    for (Index i = 0; i < latent_dim; ++i) eps(i, j) = standard_normal(rng);
  return eps;
}

}  // namespace detail

/// Mean objective over a source in inference mode with seeded latent noise.
inline double evaluate_objective(VaeModel& model, TrainingSource& source, Index batch_size, std::uint64_t seed) {
  std::vector<Index> order(static_cast<std::size_t>(source.size()));
  std::iota(order.begin(), order.end(), Index{0});
  double total = 0.0;
  Index count = 0, iteration = 0;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size), ++iteration) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<Index> idx(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    const auto batch = source.batch(idx, 0, static_cast<std::uint64_t>(iteration));
    const RMatrix eps = detail::latent_noise(model.latent_dim(), batch.observations.size(),
                                             derive_seed(seed, {static_cast<std::uint64_t>(iteration), 0xe7a1ULL}));
    const auto terms = detail::objective_for(model, batch, eps, Mode::Eval, false);
    total += terms.total * static_cast<double>(idx.size());
    count += static_cast<Index>(idx.size());
  }
  return total / static_cast<double>(count);
}

/// Trains with adaptive-moment descent and a single latent sample per step.
/// Keeps the parameters of the epoch with the lowest validation objective.
inline TrainResult train(VaeModel& model, TrainingSource& train_source, TrainingSource& val_source, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (is_real_variant(model.variant()) && (train_source.exposes_channels() || val_source.exposes_channels()))
    throw std::logic_error("real-variant training sources must not expose ground-truth channels");

  nn::Adam optimizer(cfg.learning_rate);
  const auto params = model.parameters();
  TrainResult result;
  std::optional<VaeModel> best;

  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    double epoch_loss = 0.0;
    Index seen = 0;
    const auto plan = train_source.schedule(e, cfg.batch_size, cfg.seed);
    for (std::size_t it = 0; it < plan.size(); ++it) {
      const auto batch = train_source.batch(plan[it], e, static_cast<std::uint64_t>(result.iterations));
      const RMatrix eps = detail::latent_noise(model.latent_dim(), batch.observations.size(),
                                               derive_seed(cfg.seed, {e, static_cast<std::uint64_t>(it), 0xe95ULL}));
      nn::zero_grad(params);
      LossTerms terms;
      try {
        terms = detail::objective_for(model, batch, eps, Mode::Train, true);
      } catch (const NumericalError& err) {
        throw TrainingDiverged(epoch, err.what());
      }
      optimizer.step(params);
      ++result.iterations;
      epoch_loss += terms.total * static_cast<double>(plan[it].size());
      seen += static_cast<Index>(plan[it].size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(std::max<Index>(seen, 1));
    try {
      rec.val_loss = evaluate_objective(model, val_source, cfg.batch_size, derive_seed(cfg.seed, 0x7a1ULL));
    } catch (const NumericalError& err) {
      throw TrainingDiverged(epoch, err.what());
    }
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss))
      throw TrainingDiverged(epoch, "non-finite loss");
    result.curve.push_back(rec);
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      best = model;
    }
    if (on_epoch) on_epoch(rec);
  }
  if (best) model = std::move(*best);
  return result;
}

struct TrainingSources {
  std::unique_ptr<TrainingSource> train;
  std::unique_ptr<TrainingSource> validation;
};

/// Training and validation sources for a variant. Noisy and RealFixedA
/// observe through `fixed_op`; RealVaryingA draws a new operator from
/// `factory` for every iteration. Validation always uses `fixed_op`, the
/// evaluation geometry. Only the noisy variant sees channels.
inline TrainingSources make_training_sources(Variant variant, const CMatrix& train_channels, const CMatrix& val_channels,
                                             const ObservationOperator& fixed_op, const OperatorFactory& factory,
                                             const TrainConfig& cfg) {
  const bool noisy = variant == Variant::Noisy;
  const bool varying = variant == Variant::RealVaryingA;
  if (varying) require(static_cast<bool>(factory), "varying-operator training needs an operator factory");
  const std::uint64_t train_seed = derive_seed(cfg.seed, 0x7ea1ULL);
  const std::uint64_t val_seed = derive_seed(cfg.seed, 0x7a11ULL);
  TrainingSources s;
  if (varying)
    s.train = std::make_unique<SimulatedObservations>(train_channels, factory, cfg.snr, train_seed, noisy);
  else
    s.train = std::make_unique<SimulatedObservations>(train_channels, fixed_op, cfg.snr, train_seed, noisy);
  s.validation = std::make_unique<SimulatedObservations>(val_channels, fixed_op, cfg.snr, val_seed, noisy);
  return s;
}

/// Builds the variant's sources and trains.
inline TrainResult train(VaeModel& model, const ChannelDataset& train_set, const ChannelDataset& val_set,
                         const ObservationOperator& fixed_op, const OperatorFactory& factory, TrainConfig cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.resampling = model.variant() == Variant::RealVaryingA ? OperatorResampling::PerIteration : OperatorResampling::Fixed;
  auto sources = make_training_sources(model.variant(), train_set.channels, val_set.channels, fixed_op, factory, cfg);
  return train(model, *sources.train, *sources.validation, cfg, on_epoch);
}

}  // namespace vaece
