#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mtpd/config.hpp"
#include "mtpd/cost_graph.hpp"
#include "mtpd/curriculum.hpp"
#include "mtpd/dataset.hpp"
#include "mtpd/distill.hpp"
#include "mtpd/error.hpp"
#include "mtpd/io.hpp"
#include "mtpd/model.hpp"
#include "mtpd/rng.hpp"
#include "mtpd/train.hpp"

namespace mtpd {

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dims() != b.dims() || a.num_classes != b.num_classes) throw DimensionError("concat: incompatible datasets");
  Tensor inputs({a.size() + b.size(), a.dims()});
  std::copy(a.inputs.values().begin(), a.inputs.values().end(), inputs.values().begin());
  std::copy(b.inputs.values().begin(), b.inputs.values().end(),
            inputs.values().begin() + static_cast<std::ptrdiff_t>(a.inputs.size()));
  Dataset out{std::move(inputs), a.labels, a.num_classes, a.split, a.gen_seed};
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

struct ExperimentData {
  Dataset train;  // student training split
  Dataset val;
  std::optional<Dataset> teacher_only;  // extra samples only teachers see

  /// Student split plus the first `samples` teacher-only samples (all if unset).
  Dataset teacher_train(std::optional<std::size_t> samples) const {
    if (!teacher_only) return train;
    const std::size_t n = std::min(samples.value_or(teacher_only->size()), teacher_only->size());
    if (n == 0) return train;
    std::vector<std::size_t> head(n);
    std::iota(head.begin(), head.end(), std::size_t{0});
    return concat(train, teacher_only->subset(head));
  }
};

inline ExperimentData make_data(const ExperimentConfig& cfg) {
  const SynthConfig s = cfg.synth();
  auto [train_set, val_set] = synth_dataset(s);
  ExperimentData data{std::move(train_set), std::move(val_set), std::nullopt};
  if (cfg.task.n_teacher_train > 0)
    data.teacher_only = synth_samples(s, cfg.task.n_teacher_train, "teacher_train", Split::kTrain);
  return data;
}

struct TeacherPool {
  std::vector<Model> teachers;  // config order
  PerformanceTable quality;     // val accuracy

  const Model& get(std::string_view id) const {
    for (const auto& t : teachers)
      if (t.spec.id == id) return t;
    throw ConfigError("unknown teacher id '" + std::string(id) + "'");
  }
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, const std::string& id) {
  return dir / (id + ".ckpt");
}

inline Model train_teacher(const ExperimentConfig& cfg, const TeacherEntry& entry, const ExperimentData& data) {
  TrainConfig train_cfg = entry.train;
  train_cfg.seed = derive_seed(cfg.seed, "train/" + entry.spec.id);
  Model init = build_model(entry.spec, derive_seed(cfg.seed, "init/" + entry.spec.id));
  return train(std::move(init), data.teacher_train(entry.samples), data.val, train_cfg).model;
}

enum class PoolSource { kTrain, kLoad, kLoadOrTrain };

/// Teachers are independent: each depends only on (config, its own id).
/// kLoadOrTrain saves every teacher it has to train into checkpoint_dir.
inline TeacherPool prepare_pool(const ExperimentConfig& cfg, const ExperimentData& data,
                                PoolSource source = PoolSource::kTrain,
                                const std::filesystem::path& checkpoint_dir = {}) {
  TeacherPool pool;
  for (const auto& entry : cfg.teachers) {
    const auto path = checkpoint_path(checkpoint_dir, entry.spec.id);
    Model model;
    if (source != PoolSource::kTrain && std::filesystem::exists(path)) {
      model = decode_checkpoint(read_file(path));
      if (model.spec != entry.spec) throw ConfigError("checkpoint '" + path.string() + "' does not match config spec");
    } else if (source == PoolSource::kLoad) {
      throw IoError("missing teacher checkpoint '" + path.string() + "'");
    } else {
      model = train_teacher(cfg, entry, data);
      if (source == PoolSource::kLoadOrTrain && !checkpoint_dir.empty()) write_file(path, encode_checkpoint(model));
    }
    pool.quality[entry.spec.id] = evaluate(model, data.val).accuracy;
    pool.teachers.push_back(std::move(model));
  }
  return pool;
}

/// The off-the-shelf student: trained on the task alone.
inline Model train_ots_student(const ExperimentConfig& cfg, const ExperimentData& data) {
  TrainConfig train_cfg = cfg.student_train;
  train_cfg.seed = derive_seed(cfg.seed, "train/" + cfg.student.id);
  Model init = build_model(cfg.student, derive_seed(cfg.seed, "init/" + cfg.student.id));
  return train(std::move(init), data.train, data.val, train_cfg).model;
}

inline CostConfig cost_config(const ExperimentConfig& cfg) {
  CostConfig c;
  c.ridge_eps = cfg.plan.ridge_eps;
  c.normalization = cfg.distill.loss.normalization;
  c.level_aggregation = cfg.distill.loss.level_aggregation;
  return c;
}

inline CostGraph pool_cost_graph(const ExperimentConfig& cfg, const Model& student, const TeacherPool& pool,
                                 const ExperimentData& data) {
  return build_cost_graph(student, pool.teachers, data.train, cost_config(cfg), "synth-" + std::to_string(cfg.synth().seed));
}

inline Curriculum choose_curriculum(const ExperimentConfig& cfg, const CostGraph& graph, const PerformanceTable& q) {
  if (!cfg.plan.order.empty()) return {cfg.plan.order, "config", cfg.plan.order.size(), "config"};
  return plan(graph, q, cfg.plan.algorithm, cfg.plan.k);
}

struct StageRecord {
  std::string teacher_id;  // "-" for plain task training
  std::uint64_t initial_hash = 0;
  std::uint64_t final_hash = 0;
  MetricsLog log;

  friend bool operator==(const StageRecord&, const StageRecord&) = default;
};

struct FinalMetrics {
  double train_task_loss = 0.0;
  double val_task_loss = 0.0;
  double val_accuracy = 0.0;

  friend bool operator==(const FinalMetrics&, const FinalMetrics&) = default;
};

struct RunRecord {
  std::uint64_t config_hash = 0;
  RunMode mode = RunMode::kProgressive;
  std::vector<std::string> curriculum;
  std::vector<StageRecord> stages;
  FinalMetrics final;
  double wall_seconds = 0.0;  // excluded from equality

  std::size_t total_epochs() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.log.epochs.size();
    return n;
  }

  friend bool operator==(const RunRecord& a, const RunRecord& b) {
    return a.config_hash == b.config_hash && a.mode == b.mode && a.curriculum == b.curriculum &&
           a.stages == b.stages && a.final == b.final;
  }
};

struct RunOutput {
  RunRecord record;
  Model student;
};

inline FinalMetrics final_metrics(const Model& student, const ExperimentData& data) {
  const Evaluation tr = evaluate(student, data.train);
  const Evaluation va = evaluate(student, data.val);
  return {tr.task_loss, va.task_loss, va.accuracy};
}

/// Runs one mode from a trained OTS student. Every mode spends
/// len(curriculum) * stage.epochs epochs.
inline RunOutput run_mode(const ExperimentConfig& cfg, RunMode mode, const std::vector<std::string>& curriculum,
                          const Model& ots, const TeacherPool& pool, const ExperimentData& data,
                          const TrainConfig& stage_train) {
  if (curriculum.empty()) throw ConfigError("run: empty curriculum");
  for (const auto& id : curriculum) pool.get(id);
  const auto started = std::chrono::steady_clock::now();

  RunOutput out{{config_hash(cfg), mode, curriculum, {}, {}, 0.0}, ots};
  const std::size_t stages = curriculum.size();
  auto stage_config = [&](std::size_t index, const std::string& teacher_id, std::int64_t epochs) {
    StageConfig stage{teacher_id, stage_train, cfg.distill.loss, derive_seed(cfg.seed, "adapter/" + std::to_string(index))};
    stage.train.epochs = epochs;
    stage.train.seed = derive_seed(cfg.seed, "stage/" + std::to_string(index));
    return stage;
  };
  auto record = [&](const std::string& id, std::uint64_t before, const Model& after, MetricsLog log) {
    out.record.stages.push_back({id, before, checkpoint_hash(after), std::move(log)});
  };

  switch (mode) {
    case RunMode::kProgressive:
    case RunMode::kSweep:
      for (std::size_t i = 0; i < stages; ++i) {
        const std::uint64_t before = checkpoint_hash(out.student);
        StageResult r = distill_stage(std::move(out.student), pool.get(curriculum[i]), data.train, data.val,
                                      stage_config(i, curriculum[i], stage_train.epochs));
        out.student = std::move(r.student);
        record(curriculum[i], before, out.student, std::move(r.log));
      }
      break;
    case RunMode::kDirect: {
      const std::string& final_teacher = curriculum.back();
      const std::uint64_t before = checkpoint_hash(out.student);
      StageResult r = distill_stage(std::move(out.student), pool.get(final_teacher), data.train, data.val,
                                    stage_config(0, final_teacher, stage_train.epochs * static_cast<std::int64_t>(stages)));
      out.student = std::move(r.student);
      record(final_teacher, before, out.student, std::move(r.log));
      break;
    }
    case RunMode::kEnsemble: {
      std::vector<Model> members;
      std::string ids;
      for (const auto& id : curriculum) {
        members.push_back(pool.get(id));
        ids += (ids.empty() ? "" : "+") + id;
      }
      const std::uint64_t before = checkpoint_hash(out.student);
      StageResult r = ensemble_stage(std::move(out.student), members, data.train, data.val,
                                     stage_config(0, "", stage_train.epochs * static_cast<std::int64_t>(stages)));
      out.student = std::move(r.student);
      record(ids, before, out.student, std::move(r.log));
      break;
    }
    case RunMode::kLongerBaseline: {
      // Same segments as the progressive run, each restarting the LR schedule,
      // reported as one stage.
      const std::uint64_t before = checkpoint_hash(out.student);
      MetricsLog log;
      for (std::size_t i = 0; i < stages; ++i) {
        StageConfig stage = stage_config(i, "", stage_train.epochs);
        TrainResult r = train(std::move(out.student), data.train, data.val, stage.train);
        out.student = std::move(r.model);
        for (auto m : r.log.epochs) {
          m.epoch = log.epochs.size();
          log.epochs.push_back(m);
        }
      }
      record("-", before, out.student, std::move(log));
      break;
    }
  }
  out.record.final = final_metrics(out.student, data);
  out.record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

/// Everything a run needs before the mode-specific stages.
struct PreparedExperiment {
  ExperimentConfig cfg;
  ExperimentData data;
  TeacherPool pool;
  Model ots;
  CostGraph graph;
  Curriculum curriculum;
};

inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg, PoolSource source = PoolSource::kTrain,
                                             const std::filesystem::path& checkpoint_dir = {}) {
  cfg.validate();
  PreparedExperiment p{cfg, make_data(cfg), {}, {}, {}, {}};
  p.pool = prepare_pool(cfg, p.data, source, checkpoint_dir);
  p.ots = train_ots_student(cfg, p.data);
  p.graph = pool_cost_graph(cfg, p.ots, p.pool, p.data);
  p.curriculum = choose_curriculum(cfg, p.graph, p.pool.quality);
  return p;
}

inline RunOutput run_prepared(const PreparedExperiment& p, RunMode mode) {
  return run_mode(p.cfg, mode, p.curriculum.order, p.ots, p.pool, p.data, p.cfg.distill.stage);
}

inline RunRecord run_experiment(const ExperimentConfig& cfg) {
  if (cfg.distill.mode == RunMode::kSweep) throw ConfigError("run_experiment: use sweep_orders for mode=sweep");
  return run_prepared(prepare_experiment(cfg), cfg.distill.mode).record;
}

struct SweepRow {
  std::vector<std::string> order;
  double val_accuracy = 0.0;
  double val_task_loss = 0.0;
  std::size_t rank = 0;  // competition rank by val accuracy, 1 = best

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepTable {
  std::vector<SweepRow> rows;      // enumeration order
  std::vector<std::string> bgs_order;
  std::size_t bgs_rank = 0;
  std::size_t total = 0;

  const SweepRow& best() const {
    return *std::min_element(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.rank < b.rank; });
  }
};

inline constexpr std::size_t kSweepLimit = 1000;

/// Mini-budget progressive run for every order of length 1..k over the pool.
inline SweepTable sweep_orders(const PreparedExperiment& p) {
  std::vector<std::string> ids;
  for (const auto& t : p.pool.teachers) ids.push_back(t.spec.id);
  const std::size_t k = std::min(p.cfg.plan.k, ids.size());
  const std::size_t total = count_orders(ids.size(), k);
  if (total > kSweepLimit) {
    throw ConfigError("sweep_orders: " + std::to_string(total) + " orders exceed the limit of " +
                      std::to_string(kSweepLimit));
  }
  TrainConfig mini = p.cfg.distill.stage;
  mini.epochs = static_cast<std::int64_t>(p.cfg.plan.sweep_epochs);
  mini.learning_rate = p.cfg.plan.sweep_learning_rate;
  mini.schedule = LrSchedule::kLinear;

  SweepTable table;
  table.total = total;
  for (const Curriculum& c : enumerate_orders(ids, k)) {
    const RunRecord r = run_mode(p.cfg, RunMode::kSweep, c.order, p.ots, p.pool, p.data, mini).record;
    table.rows.push_back({c.order, r.final.val_accuracy, r.final.val_task_loss, 0});
  }
  for (auto& row : table.rows) {
    row.rank = 1;
    for (const auto& other : table.rows)
      if (other.val_accuracy > row.val_accuracy) ++row.rank;
  }
  table.bgs_order = bgs(p.graph, p.pool.quality, k).order;
  for (const auto& row : table.rows)
    if (row.order == table.bgs_order) table.bgs_rank = row.rank;
  return table;
}

struct LandscapeGrid {
  std::vector<double> coords;  // shared by both axes
  Tensor loss;                 // [points x points], row = first direction

  double center() const { return loss(coords.size() / 2, coords.size() / 2); }

  /// Mean loss increase over the grid relative to the center.
  double flatness() const {
    double mean = 0.0;
    for (double v : loss.values()) mean += v;
    return mean / static_cast<double>(loss.size()) - center();
  }
};

/// Random direction in parameter space, rescaled row by row to the norm of the
/// matching parameter row; bias entries are zero.
inline std::vector<Layer> filter_normalized_direction(const Model& model, RngStream& rng) {
  std::vector<Layer> dir;
  for (const auto& layer : model.layers) {
    Layer d{random_normal(layer.weight.shape(), 1.0, rng), Tensor(layer.bias.shape())};
    const std::size_t rows = layer.weight.dim(0), cols = layer.weight.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      double dn = 0.0, pn = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        dn += d.weight(r, c) * d.weight(r, c);
        pn += layer.weight(r, c) * layer.weight(r, c);
      }
      const double s = dn > 0.0 ? std::sqrt(pn / dn) : 0.0;
      for (std::size_t c = 0; c < cols; ++c) d.weight(r, c) *= s;
    }
    dir.push_back(std::move(d));
  }
  return dir;
}

inline LandscapeGrid landscape_probe(const Model& model, const Dataset& data, double radius, std::size_t points,
                                     std::uint64_t seed) {
  if (points < 3 || points % 2 == 0) throw ArgumentError("landscape_probe: grid_points must be odd and >= 3");
  if (!(radius > 0.0)) throw ArgumentError("landscape_probe: grid_radius must be > 0");
  RngStream rng(seed);
  const auto d1 = filter_normalized_direction(model, rng);
  const auto d2 = filter_normalized_direction(model, rng);
  LandscapeGrid grid{{}, Tensor({points, points})};
  const auto half = static_cast<double>(points / 2);
  for (std::size_t i = 0; i < points; ++i)
    grid.coords.push_back(i == points / 2 ? 0.0 : radius * (static_cast<double>(i) - half) / half);

  for (std::size_t i = 0; i < points; ++i) {
    for (std::size_t j = 0; j < points; ++j) {
      const double a = grid.coords[i], b = grid.coords[j];
      Model probe = model;
      if (a != 0.0 || b != 0.0) {
        for (std::size_t l = 0; l < probe.layers.size(); ++l) {
          axpy(a, d1[l].weight, probe.layers[l].weight);
          axpy(b, d2[l].weight, probe.layers[l].weight);
        }
      }
      grid.loss(i, j) = evaluate(probe, data).task_loss;
    }
  }
  return grid;
}

}  // namespace mtpd
