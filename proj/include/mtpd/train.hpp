#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mtpd/dataset.hpp"
#include "mtpd/error.hpp"
#include "mtpd/model.hpp"
#include "mtpd/rng.hpp"
#include "mtpd/tensor.hpp"

namespace mtpd {

enum class LrSchedule { kConstant, kStep, kLinear };

inline const char* to_string(LrSchedule schedule) {
  switch (schedule) {
    case LrSchedule::kConstant: return "constant";
    case LrSchedule::kStep: return "step";
    case LrSchedule::kLinear: return "linear";
  }
  return "?";
}

struct TrainConfig {
  std::int64_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  LrSchedule schedule = LrSchedule::kStep;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ArgumentError("train: epochs must be >= 0, got " + std::to_string(epochs));
    if (batch_size == 0) throw ArgumentError("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ArgumentError("train: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("train: momentum must be in [0, 1)");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Learning rate for `iteration` of `total` (0-based) during `epoch` of `epochs`.
/// step: x0.1 from 2/3 of the stage, x0.01 from 8/9. linear: decays towards 0.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t epoch, std::size_t iteration,
                           std::size_t total_iterations) {
  const auto epochs = static_cast<std::size_t>(cfg.epochs);
  switch (cfg.schedule) {
    case LrSchedule::kConstant:
      return cfg.learning_rate;
    case LrSchedule::kStep: {
      double lr = cfg.learning_rate;
      if (epoch * 3 >= epochs * 2) lr *= 0.1;
      if (epoch * 9 >= epochs * 8) lr *= 0.1;
      return lr;
    }
    case LrSchedule::kLinear:
      return cfg.learning_rate *
             (1.0 - static_cast<double>(iteration) / static_cast<double>(total_iterations));
  }
  return cfg.learning_rate;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_task_loss = 0.0;
  double train_distill_loss = 0.0;
  double val_task_loss = 0.0;
  double val_accuracy = 0.0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct MetricsLog {
  std::vector<EpochMetrics> epochs;

  friend bool operator==(const MetricsLog&, const MetricsLog&) = default;
};

struct Evaluation {
  double task_loss = 0.0;
  double accuracy = 0.0;

  friend bool operator==(const Evaluation&, const Evaluation&) = default;
};

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class).
inline Evaluation evaluate(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw ArgumentError("evaluate: empty dataset");
  const Tensor logits = forward(model, data.inputs).logits;
  const std::size_t classes = logits.dim(1);
  Evaluation result;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double* row = logits.data() + i * classes;
    std::size_t best = 0;
    double peak = row[0];
    for (std::size_t k = 1; k < classes; ++k) {
      if (row[k] > peak) {
        peak = row[k];
        best = k;
      }
    }
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(row[k] - peak);
    const double loss = std::log(denom) - (row[data.labels[i]] - peak);
    result.task_loss += (loss - result.task_loss) / static_cast<double>(i + 1);
    if (best == data.labels[i]) ++correct;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  if (!std::isfinite(result.task_loss)) throw NumericError("evaluate: non-finite task loss");
  return result;
}

struct BatchLoss {
  double task = 0.0;
  double distill = 0.0;
  Gradients model;
  std::vector<Tensor> extra;  // matches LossProvider::extra_parameters()
};

/// Supplies the per-batch objective to train(): plain task loss, or task loss
/// plus a weighted distillation term with its own trainable parameters.
class LossProvider {
 public:
  virtual ~LossProvider() = default;
  virtual BatchLoss compute(const Model& model, const Dataset& data,
                            std::span<const std::size_t> batch) = 0;
  virtual std::vector<Tensor*> extra_parameters() { return {}; }
};

class TaskLoss final : public LossProvider {
 public:
  BatchLoss compute(const Model& model, const Dataset& data,
                    std::span<const std::size_t> batch) override {
    const Dataset sub = data.subset(batch);
    ForwardResult fwd = forward(model, sub.inputs);
    LossAndGrad ce = softmax_cross_entropy(fwd.logits, sub.labels);
    BatchLoss out;
    out.task = ce.loss;
    out.model = backward(model, fwd.tape, OutputGrads{std::move(ce.grad), {}});
    return out;
  }
};

struct TrainResult {
  Model model;
  MetricsLog log;
};

/// Momentum SGD over shuffled mini-batches. Shuffling depends only on cfg.seed.
inline TrainResult train(Model model, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg, LossProvider& provider) {
  cfg.validate();
  if (train_set.size() == 0) throw ArgumentError("train: empty training set");
  if (train_set.dims() != model.spec.input_dim || val_set.dims() != model.spec.input_dim) {
    throw DimensionError("train: dataset dims do not match model '" + model.spec.id + "'");
  }
  TrainResult result{std::move(model), {}};
  if (cfg.epochs == 0) return result;

  Model& m = result.model;
  std::vector<Layer> velocity;
  for (const auto& layer : m.layers) velocity.push_back({Tensor(layer.weight.shape()), Tensor(layer.bias.shape())});
  std::vector<Tensor> extra_velocity;
  for (const Tensor* t : provider.extra_parameters()) extra_velocity.emplace_back(t->shape());

  const std::size_t n = train_set.size();
  const std::size_t batch_size = std::min(cfg.batch_size, n);
  const std::size_t per_epoch = (n + batch_size - 1) / batch_size;
  const std::size_t epochs = static_cast<std::size_t>(cfg.epochs);
  const std::size_t total = per_epoch * epochs;

  std::vector<std::size_t> order(n);
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream rng(derive_seed(cfg.seed, "shuffle/" + std::to_string(epoch)));
    shuffle_in_place(order, rng);

    double task_sum = 0.0, distill_sum = 0.0;
    for (std::size_t start = 0; start < n; start += batch_size, ++iteration) {
      const std::size_t stop = std::min(start + batch_size, n);
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      BatchLoss loss = provider.compute(m, train_set, batch);
      if (!std::isfinite(loss.task) || !std::isfinite(loss.distill)) {
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) + " for model '" +
                           m.spec.id + "'");
      }
      task_sum += loss.task * static_cast<double>(batch.size());
      distill_sum += loss.distill * static_cast<double>(batch.size());

      const double lr = scheduled_lr(cfg, epoch, iteration, total);
      for (std::size_t l = 0; l < m.layers.size(); ++l) {
        for (auto [param, vel, grad] :
             {std::tuple{&m.layers[l].weight, &velocity[l].weight, &loss.model[l].weight},
              std::tuple{&m.layers[l].bias, &velocity[l].bias, &loss.model[l].bias}}) {
          for (std::size_t i = 0; i < param->size(); ++i) {
            (*vel)[i] = cfg.momentum * (*vel)[i] + (*grad)[i];
            (*param)[i] -= lr * (*vel)[i];
          }
        }
      }
      auto extra = provider.extra_parameters();
      for (std::size_t e = 0; e < extra.size() && e < loss.extra.size(); ++e) {
        for (std::size_t i = 0; i < extra[e]->size(); ++i) {
          extra_velocity[e][i] = cfg.momentum * extra_velocity[e][i] + loss.extra[e][i];
          (*extra[e])[i] -= lr * extra_velocity[e][i];
        }
      }
    }

    const Evaluation val = evaluate(m, val_set);
    result.log.epochs.push_back({epoch, task_sum / static_cast<double>(n),
                                 distill_sum / static_cast<double>(n), val.task_loss, val.accuracy});
  }
  return result;
}

inline TrainResult train(Model model, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg) {
  TaskLoss provider;
  return train(std::move(model), train_set, val_set, cfg, provider);
}

}  // namespace mtpd
