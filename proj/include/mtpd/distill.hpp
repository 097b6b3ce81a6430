#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtpd/dataset.hpp"
#include "mtpd/error.hpp"
#include "mtpd/model.hpp"
#include "mtpd/tensor.hpp"
#include "mtpd/train.hpp"

namespace mtpd {

enum class AdapterKind { kIdentity, kChannelMap, kUpsample, kSubsample, kComposed };

inline const char* to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kIdentity: return "identity";
    case AdapterKind::kChannelMap: return "channel_map";
    case AdapterKind::kUpsample: return "upsample";
    case AdapterKind::kSubsample: return "subsample";
    case AdapterKind::kComposed: return "composed";
  }
  return "?";
}

/// Dimension matcher r(.) for one neck level: an optional channel matrix
/// [C_out x C_in] followed by nearest-neighbour resampling of positions.
struct AdapterLevel {
  NeckLevel in;
  NeckLevel out;
  Tensor channel_map;  // empty when channels pass through

  bool has_channel_map() const noexcept { return !channel_map.empty(); }

  AdapterKind kind() const noexcept {
    const bool resample = in.positions != out.positions;
    if (has_channel_map()) return resample ? AdapterKind::kComposed : AdapterKind::kChannelMap;
    if (!resample) return AdapterKind::kIdentity;
    return out.positions > in.positions ? AdapterKind::kUpsample : AdapterKind::kSubsample;
  }

  friend bool operator==(const AdapterLevel&, const AdapterLevel&) = default;
};

struct Adapter {
  std::vector<AdapterLevel> levels;
  bool trainable = true;

  std::vector<NeckLevel> input_shapes() const {
    std::vector<NeckLevel> s;
    for (const auto& l : levels) s.push_back(l.in);
    return s;
  }
  std::vector<NeckLevel> output_shapes() const {
    std::vector<NeckLevel> s;
    for (const auto& l : levels) s.push_back(l.out);
    return s;
  }

  friend bool operator==(const Adapter&, const Adapter&) = default;
};

/// Picks identity / channel_map / upsample / composed per level from the
/// student and teacher neck shapes. Channel maps start uniform(-s, s),
/// s = sqrt(1 / C_student).
inline Adapter make_adapter(std::span<const NeckLevel> student, std::span<const NeckLevel> teacher,
                            std::uint64_t seed) {
  if (student.size() != teacher.size()) {
    throw AdapterError("make_adapter: student has " + std::to_string(student.size()) +
                       " neck levels, teacher has " + std::to_string(teacher.size()));
  }
  Adapter adapter;
  for (std::size_t l = 0; l < student.size(); ++l) {
    const NeckLevel s = student[l], t = teacher[l];
    if (t.positions % s.positions != 0) {
      throw AdapterError("make_adapter: level " + std::to_string(l) + " teacher positions " +
                         std::to_string(t.positions) + " are not a multiple of student positions " +
                         std::to_string(s.positions));
    }
    AdapterLevel level{s, t, {}};
    if (s.channels != t.channels) {
      RngStream rng(derive_seed(seed, "adapter/" + std::to_string(l)));
      const double bound = std::sqrt(1.0 / static_cast<double>(s.channels));
      level.channel_map = random_uniform({t.channels, s.channels}, -bound, bound, rng);
    }
    adapter.levels.push_back(std::move(level));
  }
  return adapter;
}

namespace detail {

inline void check_level_input(const AdapterLevel& level, const Tensor& f, std::size_t index) {
  if (f.rank() != 3 || f.dim(1) != level.in.channels || f.dim(2) != level.in.positions) {
    throw DimensionError("adapter level " + std::to_string(index) + " expects [B x " +
                         std::to_string(level.in.channels) + " x " + std::to_string(level.in.positions) +
                         "], got " + shape_string(f.shape()));
  }
}

// Channel map only (positions unchanged): [B x C_out x P_in].
inline Tensor map_channels(const AdapterLevel& level, const Tensor& f) {
  if (!level.has_channel_map()) return f;
  const std::size_t batch = f.dim(0), cin = level.in.channels, cout = level.out.channels,
                    pos = level.in.positions;
  Tensor out({batch, cout, pos});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < cout; ++c) {
      double* dst = out.data() + (b * cout + c) * pos;
      for (std::size_t j = 0; j < cin; ++j) {
        const double m = level.channel_map(c, j);
        const double* src = f.data() + (b * cin + j) * pos;
        for (std::size_t p = 0; p < pos; ++p) dst[p] += m * src[p];
      }
    }
  }
  return out;
}

}  // namespace detail

inline Tensor apply_adapter_level(const AdapterLevel& level, const Tensor& f, std::size_t index = 0) {
  detail::check_level_input(level, f, index);
  if (level.kind() == AdapterKind::kIdentity) return f;
  Tensor mapped = detail::map_channels(level, f);
  if (level.in.positions == level.out.positions) return mapped;
  return nearest_resample(mapped, level.out.positions);
}

inline FeatureSet apply_adapter(const Adapter& adapter, const FeatureSet& features) {
  if (features.levels.size() != adapter.levels.size()) {
    throw DimensionError("apply_adapter: " + std::to_string(features.levels.size()) +
                         " feature levels for a " + std::to_string(adapter.levels.size()) +
                         "-level adapter");
  }
  FeatureSet out;
  for (std::size_t l = 0; l < adapter.levels.size(); ++l)
    out.levels.push_back(apply_adapter_level(adapter.levels[l], features.levels[l], l));
  return out;
}

enum class Aggregation { kSum, kMean };

struct LossConfig {
  double lambda = 0.5;
  Normalization normalization = Normalization::kMean;
  Aggregation level_aggregation = Aggregation::kSum;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw ArgumentError("loss config: lambda must be a finite value >= 0");
    }
  }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct DistillLoss {
  double value = 0.0;
  std::vector<Tensor> student_grads;  // per level, student feature shapes
  std::vector<Tensor> adapter_grads;  // per level, empty where no channel map
};

/// Feature-matching loss || F_T - r(F_S) ||^2 per level, aggregated over
/// levels, with analytic gradients for the student features and channel maps.
inline DistillLoss distill_loss(const FeatureSet& teacher, const FeatureSet& student,
                                const Adapter& adapter, const LossConfig& cfg) {
  if (teacher.levels.size() != adapter.levels.size() || student.levels.size() != adapter.levels.size()) {
    throw DimensionError("distill_loss: level counts differ (teacher " +
                         std::to_string(teacher.levels.size()) + ", student " +
                         std::to_string(student.levels.size()) + ", adapter " +
                         std::to_string(adapter.levels.size()) + ")");
  }
  const std::size_t levels = adapter.levels.size();
  const double level_scale = cfg.level_aggregation == Aggregation::kMean ? 1.0 / static_cast<double>(levels) : 1.0;

  DistillLoss out;
  for (std::size_t l = 0; l < levels; ++l) {
    const AdapterLevel& level = adapter.levels[l];
    const Tensor& fs = student.levels[l];
    const Tensor& ft = teacher.levels[l];
    const Tensor mapped = (detail::check_level_input(level, fs, l), detail::map_channels(level, fs));
    const Tensor adapted =
        level.in.positions == level.out.positions ? mapped : nearest_resample(mapped, level.out.positions);
    if (adapted.shape() != ft.shape()) {
      throw DimensionError("distill_loss: adapted student level " + std::to_string(l) + " is " +
                           shape_string(adapted.shape()) + " but teacher is " + shape_string(ft.shape()));
    }
    out.value += level_scale * sse(ft, adapted, cfg.normalization);

    const double norm = cfg.normalization == Normalization::kMean ? static_cast<double>(ft.size()) : 1.0;
    const double coeff = 2.0 * level_scale / norm;
    const std::size_t batch = fs.dim(0), cout = level.out.channels, pin = level.in.positions,
                      pout = level.out.positions;
    // Gradient w.r.t. the mapped (pre-resample) tensor: scatter-add over repeats.
    Tensor gmapped({batch, cout, pin});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t p = 0; p < pout; ++p)
          gmapped(b, c, p * pin / pout) += coeff * (adapted(b, c, p) - ft(b, c, p));

    if (!level.has_channel_map()) {
      out.student_grads.push_back(std::move(gmapped));
      out.adapter_grads.emplace_back();
      continue;
    }
    const std::size_t cin = level.in.channels;
    Tensor gstudent({batch, cin, pin});
    Tensor gmap({cout, cin});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < cout; ++c) {
        const double* g = gmapped.data() + (b * cout + c) * pin;
        for (std::size_t j = 0; j < cin; ++j) {
          const double* x = fs.data() + (b * cin + j) * pin;
          double* gx = gstudent.data() + (b * cin + j) * pin;
          const double m = level.channel_map(c, j);
          double acc = 0.0;
          for (std::size_t p = 0; p < pin; ++p) {
            acc += g[p] * x[p];
            gx[p] += m * g[p];
          }
          gmap(c, j) += acc;
        }
      }
    }
    out.student_grads.push_back(std::move(gstudent));
    out.adapter_grads.push_back(std::move(gmap));
  }
  return out;
}

// L = lambda * L_distill + L_task
inline double total_loss(double task_loss, double distill, double lambda) {
  if (!(lambda >= 0.0)) throw ArgumentError("total_loss: lambda must be >= 0");
  return lambda * distill + task_loss;
}

/// Task loss plus lambda times the mean feature-matching loss against one or
/// more frozen targets. Targets are precomputed over the whole training set
/// and gathered per batch; each target owns its adapter.
class FeatureDistillLoss final : public LossProvider {
 public:
  struct Member {
    FeatureSet targets;  // [N x C x P] per level, aligned with the training set
    Adapter adapter;
  };

  FeatureDistillLoss(std::vector<Member> members, LossConfig cfg)
      : members_(std::move(members)), cfg_(cfg) {
    cfg_.validate();
    if (members_.empty()) throw ArgumentError("FeatureDistillLoss: no distillation targets");
  }

  BatchLoss compute(const Model& model, const Dataset& data, std::span<const std::size_t> batch) override {
    const Dataset sub = data.subset(batch);
    ForwardResult fwd = forward(model, sub.inputs);
    LossAndGrad ce = softmax_cross_entropy(fwd.logits, sub.labels);

    BatchLoss out;
    out.task = ce.loss;
    std::vector<Tensor> feature_grads;
    for (const auto& t : fwd.features.levels) feature_grads.emplace_back(t.shape());
    const double share = 1.0 / static_cast<double>(members_.size());
    for (const Member& member : members_) {
      DistillLoss d = distill_loss(member.targets.gather(batch), fwd.features, member.adapter, cfg_);
      out.distill += d.value;
      for (std::size_t l = 0; l < feature_grads.size(); ++l) axpy(cfg_.lambda * share, d.student_grads[l], feature_grads[l]);
      if (!member.adapter.trainable) continue;
      for (const Tensor& g : d.adapter_grads) {
        if (!g.empty()) out.extra.push_back(scaled(g, cfg_.lambda * share));
      }
    }
    out.distill *= share;

    OutputGrads grads{std::move(ce.grad), {}};
    if (cfg_.lambda > 0.0) grads.features = std::move(feature_grads);
    out.model = backward(model, fwd.tape, grads);
    return out;
  }

  std::vector<Tensor*> extra_parameters() override {
    std::vector<Tensor*> params;
    for (Member& member : members_) {
      if (!member.adapter.trainable) continue;
      for (AdapterLevel& level : member.adapter.levels)
        if (level.has_channel_map()) params.push_back(&level.channel_map);
    }
    return params;
  }

  const std::vector<Member>& members() const noexcept { return members_; }

 private:
  std::vector<Member> members_;
  LossConfig cfg_;
};

struct StageConfig {
  std::string teacher_id;
  TrainConfig train;
  LossConfig loss;
  std::uint64_t adapter_seed = 0;
};

struct StageResult {
  Model student;
  MetricsLog log;
  std::vector<Adapter> adapters;  // final state, one per distillation target
};

namespace detail {

inline StageResult run_distill(Model student, std::vector<FeatureDistillLoss::Member> members,
                               const Dataset& train_set, const Dataset& val_set, const StageConfig& stage) {
  FeatureDistillLoss provider(std::move(members), stage.loss);
  TrainResult trained = train(std::move(student), train_set, val_set, stage.train, provider);
  StageResult result{std::move(trained.model), std::move(trained.log), {}};
  for (const auto& member : provider.members()) result.adapters.push_back(member.adapter);
  return result;
}

}  // namespace detail

/// One distillation stage: the student trains on lambda * L_distill + L_task
/// against a frozen teacher; a fresh adapter is created for the stage.
inline StageResult distill_stage(Model student, const Model& teacher, const Dataset& train_set,
                                 const Dataset& val_set, const StageConfig& stage) {
  if (!stage.teacher_id.empty() && stage.teacher_id != teacher.spec.id) {
    throw ArgumentError("distill_stage: stage names teacher '" + stage.teacher_id + "' but got '" +
                        teacher.spec.id + "'");
  }
  Adapter adapter = make_adapter(student.spec.neck, teacher.spec.neck, stage.adapter_seed);
  std::vector<FeatureDistillLoss::Member> members;
  members.push_back({forward(teacher, train_set.inputs).features, std::move(adapter)});
  return detail::run_distill(std::move(student), std::move(members), train_set, val_set, stage);
}

/// Simultaneous distillation from several teachers. Teachers with identical
/// neck shapes are averaged into one target; otherwise each teacher gets its
/// own adapter and the distillation loss is the mean over teachers.
inline StageResult ensemble_stage(Model student, std::span<const Model> teachers, const Dataset& train_set,
                                  const Dataset& val_set, const StageConfig& stage) {
  if (teachers.empty()) throw ArgumentError("ensemble_stage: empty teacher list");
  bool homogeneous = true;
  for (const Model& t : teachers) homogeneous = homogeneous && t.spec.neck == teachers.front().spec.neck;

  std::vector<FeatureDistillLoss::Member> members;
  if (homogeneous) {
    FeatureSet mean = forward(teachers.front(), train_set.inputs).features;
    for (std::size_t i = 1; i < teachers.size(); ++i) {
      const FeatureSet f = forward(teachers[i], train_set.inputs).features;
      for (std::size_t l = 0; l < mean.levels.size(); ++l) axpy(1.0, f.levels[l], mean.levels[l]);
    }
    const double inv = 1.0 / static_cast<double>(teachers.size());
    if (teachers.size() > 1)
      for (auto& level : mean.levels)
        for (double& v : level.values()) v *= inv;
    members.push_back({std::move(mean), make_adapter(student.spec.neck, teachers.front().spec.neck, stage.adapter_seed)});
  } else {
    for (std::size_t i = 0; i < teachers.size(); ++i) {
      const std::uint64_t seed = i == 0 ? stage.adapter_seed : derive_seed(stage.adapter_seed, "ensemble/" + std::to_string(i));
      members.push_back({forward(teachers[i], train_set.inputs).features,
                         make_adapter(student.spec.neck, teachers[i].spec.neck, seed)});
    }
  }
  return detail::run_distill(std::move(student), std::move(members), train_set, val_set, stage);
}

}  // namespace mtpd
