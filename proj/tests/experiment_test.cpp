#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "mtpd/experiment.hpp"
#include "mtpd/report.hpp"

namespace mtpd {
namespace {

ExperimentConfig tiny() { return load_config(MTPD_SOURCE_DIR "/configs/tiny.ini"); }

// Training the pool dominates; share one prepared experiment across tests.
const PreparedExperiment& prepared() {
  static const PreparedExperiment p = prepare_experiment(tiny());
  return p;
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

TEST(Experiment, DataSplitsAndTeacherSamples) {
  const PreparedExperiment& p = prepared();
  EXPECT_EQ(p.data.train.size(), 64u);
  EXPECT_EQ(p.data.val.size(), 64u);
  ASSERT_TRUE(p.data.teacher_only.has_value());
  EXPECT_EQ(p.data.teacher_train(64).size(), 128u);
  EXPECT_EQ(p.data.teacher_train(std::nullopt).size(), 64u + 256u);
  EXPECT_EQ(p.pool.teachers.size(), 3u);
  EXPECT_EQ(p.pool.quality.size(), 3u);
  EXPECT_EQ(p.curriculum.order.back(), argmax_quality(p.pool.quality));
}

TEST(Experiment, ZeroEpochBaselineKeepsOtsMetrics) {
  const PreparedExperiment& p = prepared();
  TrainConfig none = p.cfg.distill.stage;
  none.epochs = 0;
  const RunOutput r = run_mode(p.cfg, RunMode::kLongerBaseline, p.curriculum.order, p.ots, p.pool, p.data, none);
  EXPECT_EQ(r.student, p.ots);
  EXPECT_EQ(r.record.final, final_metrics(p.ots, p.data));
  EXPECT_EQ(r.record.total_epochs(), 0u);
}

TEST(Experiment, RunsAreDeterministic) {
  const ExperimentConfig cfg = tiny();
  const RunRecord a = run_experiment(cfg);
  const RunRecord b = run_experiment(cfg);
  EXPECT_EQ(a, b);
  EXPECT_EQ(metrics_csv(a), metrics_csv(b));
  EXPECT_EQ(a.config_hash, config_hash(cfg));
}

TEST(Experiment, StageCountsAndBudgetParity) {
  const PreparedExperiment& p = prepared();
  const std::size_t len = p.curriculum.order.size();
  const std::size_t budget = len * static_cast<std::size_t>(p.cfg.distill.stage.epochs);
  for (RunMode mode : {RunMode::kProgressive, RunMode::kDirect, RunMode::kEnsemble, RunMode::kLongerBaseline}) {
    const RunRecord r = run_prepared(p, mode).record;
    EXPECT_EQ(r.total_epochs(), budget) << to_string(mode);
    EXPECT_EQ(r.stages.size(), mode == RunMode::kProgressive ? len : 1u) << to_string(mode);
    EXPECT_EQ(r.stages.front().initial_hash, checkpoint_hash(p.ots));
  }
  EXPECT_EQ(run_prepared(p, RunMode::kDirect).record.stages[0].teacher_id, p.curriculum.order.back());
}

TEST(Experiment, StagesCarryTheStudentForward) {
  const PreparedExperiment& p = prepared();
  std::vector<std::string> order;
  for (const auto& t : p.pool.teachers) order.push_back(t.spec.id);
  const RunOutput r = run_mode(p.cfg, RunMode::kProgressive, order, p.ots, p.pool, p.data, p.cfg.distill.stage);
  ASSERT_EQ(r.record.stages.size(), 3u);
  for (std::size_t i = 1; i < r.record.stages.size(); ++i)
    EXPECT_EQ(r.record.stages[i].initial_hash, r.record.stages[i - 1].final_hash);
  EXPECT_EQ(r.record.stages.back().final_hash, checkpoint_hash(r.student));
}

TEST(Experiment, RejectsUnknownCurriculumIds) {
  const PreparedExperiment& p = prepared();
  EXPECT_THROW(run_mode(p.cfg, RunMode::kProgressive, {"Z"}, p.ots, p.pool, p.data, p.cfg.distill.stage), Error);
  EXPECT_THROW(run_mode(p.cfg, RunMode::kProgressive, {}, p.ots, p.pool, p.data, p.cfg.distill.stage), ConfigError);
}

TEST(Experiment, CheckpointsReloadBitExactly) {
  const auto dir = std::filesystem::temp_directory_path() / "mtpd_experiment_ckpt";
  std::filesystem::remove_all(dir);
  const ExperimentConfig cfg = tiny();
  const ExperimentData data = make_data(cfg);
  EXPECT_THROW(prepare_pool(cfg, data, PoolSource::kLoad, dir), IoError);
  const TeacherPool trained = prepare_pool(cfg, data, PoolSource::kLoadOrTrain, dir);
  const TeacherPool loaded = prepare_pool(cfg, data, PoolSource::kLoad, dir);
  EXPECT_EQ(trained.teachers, loaded.teachers);
  EXPECT_EQ(trained.quality, loaded.quality);
  std::filesystem::remove_all(dir);
}

TEST(Sweep, RowsMatchEnumerationAndRanksAreConsistent) {
  const PreparedExperiment& p = prepared();
  const SweepTable t = sweep_orders(p);
  EXPECT_EQ(t.rows.size(), count_orders(3, 2));
  EXPECT_EQ(t.total, 9u);
  EXPECT_EQ(t.bgs_order, bgs(p.graph, p.pool.quality, 2).order);
  EXPECT_GE(t.bgs_rank, 1u);
  for (const auto& row : t.rows) {
    std::size_t better = 0;
    for (const auto& other : t.rows) better += other.val_accuracy > row.val_accuracy;
    EXPECT_EQ(row.rank, better + 1);
  }
  EXPECT_EQ(t.best().rank, 1u);
}

TEST(Sweep, SingleTeacherSingleOrder) {
  ExperimentConfig cfg = tiny();
  cfg.teachers.resize(1);
  cfg.plan.k = 1;
  const PreparedExperiment p = prepare_experiment(cfg);
  const SweepTable t = sweep_orders(p);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].rank, 1u);
  EXPECT_EQ(t.bgs_rank, 1u);
}

TEST(Sweep, RefusesOversizedEnumeration) {
  PreparedExperiment p = prepared();
  for (int i = 0; i < 4; ++i) {
    Model extra = p.pool.teachers[0];
    extra.spec.id = "X" + std::to_string(i);
    p.pool.teachers.push_back(extra);
    p.pool.quality[extra.spec.id] = 0.0;
  }
  p.cfg.plan.k = 7;  // 7 teachers, k = 7: 13699 orders
  try {
    sweep_orders(p);
    FAIL() << "expected the guard to trip";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("13699"), std::string::npos);
  }
}

TEST(Landscape, CenterShapeAndErrors) {
  const PreparedExperiment& p = prepared();
  const LandscapeGrid g = landscape_probe(p.ots, p.data.train, 0.5, 5, 7);
  EXPECT_EQ(g.loss.shape(), (Shape{5, 5}));
  EXPECT_EQ(g.coords, (std::vector<double>{-0.5, -0.25, 0.0, 0.25, 0.5}));
  EXPECT_NEAR(g.center(), evaluate(p.ots, p.data.train).task_loss, 1e-9);
  EXPECT_EQ(landscape_probe(p.ots, p.data.train, 0.5, 5, 7).loss, g.loss);
  EXPECT_THROW(landscape_probe(p.ots, p.data.train, 0.5, 4, 7), ArgumentError);
  EXPECT_THROW(landscape_probe(p.ots, p.data.train, 0.5, 1, 7), ArgumentError);
}

TEST(Landscape, DirectionsAreFilterNormalized) {
  const PreparedExperiment& p = prepared();
  RngStream rng(3);
  const auto dir = filter_normalized_direction(p.ots, rng);
  for (std::size_t l = 0; l < dir.size(); ++l) {
    const Tensor& w = p.ots.layers[l].weight;
    for (std::size_t r = 0; r < w.dim(0); ++r) {
      double dn = 0.0, pn = 0.0;
      for (std::size_t c = 0; c < w.dim(1); ++c) {
        dn += dir[l].weight(r, c) * dir[l].weight(r, c);
        pn += w(r, c) * w(r, c);
      }
      EXPECT_NEAR(std::sqrt(dn), std::sqrt(pn), 1e-12);
    }
    for (double b : dir[l].bias.values()) EXPECT_EQ(b, 0.0);
  }
}

TEST(Report, FilesAreConsistentAndReproducible) {
  const PreparedExperiment& p = prepared();
  Report report;
  report.records.push_back(run_prepared(p, RunMode::kProgressive).record);
  report.records.push_back(run_prepared(p, RunMode::kLongerBaseline).record);
  report.graph = p.graph;
  report.quality = p.pool.quality;
  report.curriculum = p.curriculum;
  report.landscape = landscape_probe(p.ots, p.data.train, 1.0, 3, 1);
  report.sweep = sweep_orders(p);
  report.seed = p.cfg.seed;

  const auto dir = std::filesystem::temp_directory_path() / "mtpd_report_test";
  std::filesystem::remove_all(dir);
  const auto written = emit_report(report, dir);
  std::vector<std::string> first;
  for (const auto& path : written) first.push_back(read_file(path));
  const auto again = emit_report(report, dir);
  ASSERT_EQ(again, written);
  for (std::size_t i = 0; i < written.size(); ++i) EXPECT_EQ(read_file(written[i]), first[i]) << written[i];

  const std::string metrics = read_file(dir / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), kMetricsHeader);
  EXPECT_EQ(count_lines(metrics), report.records[0].total_epochs() + 1);
  EXPECT_EQ(count_lines(read_file(dir / "metrics_1_longer_baseline.csv")), report.records[1].total_epochs() + 1);
  EXPECT_EQ(count_lines(read_file(dir / "landscape.csv")), 4u);

  const auto summary = nlohmann::json::parse(read_file(dir / "summary.json"));
  const SweepRow& best = report.sweep->best();
  EXPECT_EQ(summary["sweep"]["best_order"].get<std::vector<std::string>>(), best.order);
  EXPECT_EQ(best.rank, 1u);
  EXPECT_EQ(summary["curriculum"].get<std::vector<std::string>>(), p.curriculum.order);
  EXPECT_EQ(summary["runs"].size(), 2u);

  const std::string sweep = read_file(dir / "sweep.csv");
  EXPECT_EQ(count_lines(sweep), report.sweep->rows.size() + 1);
  EXPECT_NE(sweep.find(join_order(best.order) + ","), std::string::npos);
  EXPECT_EQ(cost_graph_from_csv(read_file(dir / "cost_matrix.csv")).costs, p.graph.costs);
  std::filesystem::remove_all(dir);
}

TEST(Report, RequiresARecord) {
  EXPECT_THROW(emit_report(Report{}, std::filesystem::temp_directory_path() / "mtpd_empty_report"), ArgumentError);
}

}  // namespace
}  // namespace mtpd
