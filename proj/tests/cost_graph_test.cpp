#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "mtpd/config.hpp"
#include "mtpd/cost_graph.hpp"
#include "mtpd/io.hpp"
#include "test_support.hpp"

namespace mtpd {
namespace {

FeatureSet random_features(RngStream& rng, std::size_t batch, const std::vector<NeckLevel>& shapes) {
  FeatureSet f;
  for (const auto& s : shapes) f.levels.push_back(random_normal({batch, s.channels, s.positions}, 1.0, rng));
  return f;
}

// Applies a fixed channel matrix per level: the target a perfect fit recovers.
FeatureSet planted(const FeatureSet& from, const std::vector<Tensor>& maps) {
  Adapter a;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const Tensor& f = from.levels[l];
    a.levels.push_back({{f.dim(1), f.dim(2)}, {maps[l].dim(0), f.dim(2)}, maps[l]});
  }
  return apply_adapter(a, from);
}

double training_residual(const Adapter& a, const FeatureSet& from, const FeatureSet& to) {
  return adapter_objective(a, from, to, 0.0);
}

TEST(FitAdapter, IdentityTargetIsFitExactly) {
  RngStream rng(1);
  const FeatureSet f = random_features(rng, 40, {{4, 3}, {2, 2}});
  const Adapter a = fit_adapter_closed_form(f, f, 1e-14);
  EXPECT_LE(training_residual(a, f, f), 1e-10);
  EXPECT_FALSE(a.trainable);
}

TEST(FitAdapter, RecoversPlantedMap) {
  RngStream rng(2);
  const FeatureSet f = random_features(rng, 50, {{4, 3}, {3, 1}});
  const std::vector<Tensor> maps{random_normal({6, 4}, 1.0, rng), random_normal({2, 3}, 1.0, rng)};
  const Adapter a = fit_adapter_closed_form(f, planted(f, maps), 1e-12);
  for (std::size_t l = 0; l < maps.size(); ++l)
    for (std::size_t i = 0; i < maps[l].size(); ++i) EXPECT_NEAR(a.levels[l].channel_map[i], maps[l][i], 1e-6);
}

TEST(FitAdapter, RankDeficientTwoByTwo) {
  Tensor from({1, 2, 2}), to({1, 2, 2});
  from(0, 0, 0) = from(0, 1, 0) = 1.0;
  to(0, 0, 1) = to(0, 1, 1) = 1.0;
  // Columns: x = (1,1) -> y = (0,0) and x = (0,0) -> y = (1,1). The second
  // column is unreachable by any linear map, so the residual floor is |(1,1)|^2.
  const Adapter a = fit_adapter_closed_form({{from}}, {{to}}, 0.0, SingularPolicy::kMinimumNorm);
  EXPECT_NEAR(training_residual(a, {{from}}, {{to}}), 2.0, 1e-12);
  EXPECT_THROW(fit_adapter_closed_form({{from}}, {{to}}, 0.0), NumericError);
  EXPECT_NO_THROW(fit_adapter_closed_form({{from}}, {{to}}, 1e-9));
}

TEST(FitAdapter, UpsamplesSourcePositions) {
  RngStream rng(3);
  const FeatureSet f = random_features(rng, 30, {{3, 2}});
  const std::vector<Tensor> maps{random_normal({5, 3}, 1.0, rng)};
  Adapter up;
  up.levels.push_back({{3, 2}, {5, 4}, maps[0]});
  const FeatureSet target = apply_adapter(up, f);
  const Adapter a = fit_adapter_closed_form(f, target, 1e-12);
  EXPECT_EQ(a.levels[0].kind(), AdapterKind::kComposed);
  EXPECT_LE(training_residual(a, f, target), 1e-10);
}

TEST(FitAdapter, RejectsBadInputs) {
  RngStream rng(4);
  const FeatureSet f = random_features(rng, 5, {{2, 2}});
  EXPECT_THROW(fit_adapter_closed_form(f, random_features(rng, 5, {{2, 2}, {1, 1}}), 1e-9), AdapterError);
  EXPECT_THROW(fit_adapter_closed_form(f, random_features(rng, 5, {{2, 3}}), 1e-9), AdapterError);
  EXPECT_THROW(fit_adapter_closed_form(f, random_features(rng, 4, {{2, 2}}), 1e-9), DimensionError);
  EXPECT_THROW(fit_adapter_closed_form(f, f, -1.0), ArgumentError);
}

TEST(FitAdapter, ClosedFormIsOptimalAndStationary) {
  RngStream rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t cf = 1 + rng.next_below(4), ct = 1 + rng.next_below(4), p = 1 + rng.next_below(3);
    const FeatureSet from = random_features(rng, 12, {{cf, p}});
    const FeatureSet to = random_features(rng, 12, {{ct, p * (1 + rng.next_below(2))}});
    const double ridge = 1e-9;
    const Adapter closed = fit_adapter_closed_form(from, to, ridge);
    const Adapter iterative = fit_adapter_iterative(from, to, ridge, 500);
    EXPECT_LE(adapter_objective(closed, from, to, ridge), adapter_objective(iterative, from, to, ridge) + 1e-8);
    const std::vector<Tensor> g = adapter_objective_gradient(closed, from, to, ridge);
    EXPECT_LE(std::sqrt(squared_norm(g[0])), 1e-8);
  }
}

TEST(FitAdapter, GradientMatchesFiniteDifferences) {
  RngStream rng(6);
  const FeatureSet from = random_features(rng, 6, {{3, 2}});
  const FeatureSet to = random_features(rng, 6, {{2, 4}});
  Adapter a = make_adapter(std::vector<NeckLevel>{{3, 2}}, std::vector<NeckLevel>{{2, 4}}, 1);
  const double ridge = 0.3;
  const Tensor g = adapter_objective_gradient(a, from, to, ridge)[0];
  for (std::size_t i = 0; i < g.size(); ++i) {
    double& m = a.levels[0].channel_map[i];
    const double saved = m;
    m = saved + 1e-4;
    const double up = adapter_objective(a, from, to, ridge);
    m = saved - 1e-4;
    const double down = adapter_objective(a, from, to, ridge);
    m = saved;
    EXPECT_LT(testing::relative_error(g[i], (up - down) / 2e-4), 1e-7);
  }
}

TEST(FitAdapter, RidgeNeverLowersTrainingResidual) {
  RngStream rng(7);
  const FeatureSet from = random_features(rng, 10, {{5, 2}});
  const FeatureSet to = random_features(rng, 10, {{3, 2}});
  double previous = -1.0;
  for (double ridge : {0.0, 1e-6, 1e-3, 0.1, 1.0, 10.0, 1000.0}) {
    const double r = training_residual(fit_adapter_closed_form(from, to, ridge), from, to);
    EXPECT_GE(r, previous - 1e-12);
    previous = r;
  }
}

TEST(AdaptationCost, SelfAndPlantedPairsAreFree) {
  RngStream rng(8);
  const std::vector<NeckLevel> shapes{{4, 2}, {3, 1}};
  const FeatureSet a_train = random_features(rng, 40, shapes), a_val = random_features(rng, 10, shapes);
  CostConfig cfg;
  EXPECT_LE(adaptation_cost_from_features(a_train, a_train, a_val, a_val, cfg), 1e-8);

  const std::vector<Tensor> maps{random_normal({6, 4}, 1.0, rng), random_normal({2, 3}, 1.0, rng)};
  EXPECT_LE(adaptation_cost_from_features(a_train, planted(a_train, maps), a_val, planted(a_val, maps), cfg), 1e-8);
}

TEST(AdaptationCost, SelfCostOfModelIsFree) {
  const ModelSpec spec{"A", Role::kTeacher, 6, {10}, {{4, 2}, {3, 1}}, 3};
  const Model m = build_model(spec, 1);
  SynthConfig task;
  task.classes = 3;
  task.dims = 6;
  task.n_train = 64;
  task.n_val = 16;
  const auto [train_set, val_set] = synth_dataset(task);
  EXPECT_LE(adaptation_cost(m, m, train_set, val_set, CostConfig{}), 1e-8);
}

TEST(AdaptationCost, InvariantToSampleOrder) {
  RngStream rng(9);
  const FeatureSet ft = random_features(rng, 30, {{3, 2}}), tt = random_features(rng, 30, {{4, 4}});
  const FeatureSet fv = random_features(rng, 8, {{3, 2}}), tv = random_features(rng, 8, {{4, 4}});
  std::vector<std::size_t> p_train(30), p_val(8);
  std::iota(p_train.begin(), p_train.end(), 0);
  std::iota(p_val.begin(), p_val.end(), 0);
  std::reverse(p_train.begin(), p_train.end());
  std::rotate(p_val.begin(), p_val.begin() + 3, p_val.end());
  CostConfig cfg;
  const double base = adaptation_cost_from_features(ft, tt, fv, tv, cfg);
  const double permuted =
      adaptation_cost_from_features(ft.gather(p_train), tt.gather(p_train), fv.gather(p_val), tv.gather(p_val), cfg);
  EXPECT_NEAR(permuted, base, 1e-12 * base);
}

std::vector<Model> bundled_ladder(const ExperimentConfig& cfg, Model* student) {
  *student = build_model(cfg.student, 1);
  std::vector<Model> pool;
  for (std::size_t i = 0; i < cfg.teachers.size(); ++i) pool.push_back(build_model(cfg.teachers[i].spec, 2 + i));
  return pool;
}

TEST(CostGraph, BundledLadderIsCompleteAndNonSymmetric) {
  const ExperimentConfig cfg = load_config(MTPD_SOURCE_DIR "/configs/bundled.ini");
  Model student;
  const std::vector<Model> pool = bundled_ladder(cfg, &student);
  SynthConfig task = cfg.synth();
  task.n_val = 16;
  const Dataset probe = synth_dataset(task).first;
  const CostGraph g = build_cost_graph(student, pool, probe, CostConfig{}, "bundled");

  EXPECT_EQ(g.edge_count(), (pool.size() + 1) * pool.size());
  std::size_t asymmetric = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (i == j) continue;
      const double c = g.cost(g.ids[i], g.ids[j]);
      EXPECT_TRUE(std::isfinite(c) && c >= 0.0);
      asymmetric += c != g.cost(g.ids[j], g.ids[i]);
    }
  }
  EXPECT_EQ(asymmetric, g.edge_count());
}

TEST(CostGraph, EntriesMatchPairwiseRecomputation) {
  const ExperimentConfig cfg = load_config(MTPD_SOURCE_DIR "/configs/bundled.ini");
  Model student;
  const std::vector<Model> pool = bundled_ladder(cfg, &student);
  SynthConfig task = cfg.synth();
  task.n_train = 100;
  task.n_val = 16;
  const Dataset probe = synth_dataset(task).first;
  CostConfig cc;
  const CostGraph g = build_cost_graph(student, pool, probe, cc);

  const auto [fit_idx, score_idx] = probe_split(probe.size(), cc.probe_train_fraction);
  const Dataset fit = probe.subset(fit_idx), score = probe.subset(score_idx);
  std::vector<const Model*> all{&student};
  for (const Model& t : pool) all.push_back(&t);
  for (const Model* a : all)
    for (const Model* b : all)
      if (a != b) {
        EXPECT_EQ(g.cost(a->spec.id, b->spec.id), adaptation_cost(*a, *b, fit, score, cc));
      }
}

TEST(CostGraph, CsvRoundTripsBitExactly) {
  RngStream rng(10);
  CostGraph g = make_empty_graph({"S", "A", "B", "C"});
  for (const auto& from : g.ids)
    for (const auto& to : g.ids)
      if (from != to) g.set(from, to, std::exp(rng.normal() * 5.0));
  const std::string text = cost_graph_to_csv(g);
  const CostGraph back = cost_graph_from_csv(text);
  EXPECT_EQ(back.ids, g.ids);
  EXPECT_EQ(back.costs, g.costs);
  EXPECT_EQ(cost_graph_to_csv(back), text);
}

TEST(CostGraph, FixtureCsvParses) {
  const CostGraph g = cost_graph_from_csv(read_file(MTPD_SOURCE_DIR "/fixtures/ladder/costs.csv"));
  EXPECT_EQ(g.student(), "S");
  EXPECT_EQ(g.teachers(), (std::vector<std::string>{"I", "II", "III", "IV"}));
  EXPECT_EQ(g.cost("S", "I"), 0.939);
  EXPECT_EQ(g.cost("II", "I"), 1.181);
  EXPECT_EQ(g.cost("IV", "III"), 1.248);
}

TEST(CostGraph, RejectsDuplicatesAndBadEntries) {
  EXPECT_THROW(make_empty_graph({"S", "A", "A"}), ArgumentError);
  const ModelSpec spec{"A", Role::kTeacher, 4, {}, {{2, 1}}, 2};
  const Model a = build_model(spec, 1);
  const std::vector<Model> pool{a};
  SynthConfig task;
  task.classes = 2;
  task.dims = 4;
  task.n_train = 20;
  EXPECT_THROW(build_cost_graph(a, pool, synth_dataset(task).first, CostConfig{}), ArgumentError);

  CostGraph g = make_empty_graph({"S", "A"});
  EXPECT_THROW(g.set("S", "A", -1.0), NumericError);
  EXPECT_THROW(g.set("S", "S", 1.0), ArgumentError);
  EXPECT_THROW(g.cost("S", "Z"), ArgumentError);
  EXPECT_THROW(cost_graph_from_csv("from/to,S,A\nS,-,1\nA,x,-\n"), ConfigError);
  EXPECT_THROW(cost_graph_from_csv("from/to,S,A\nS,-,1\nA,-2,-\n"), ConfigError);
  EXPECT_THROW(cost_graph_from_csv("from/to,S,A\nS,-,1\n"), ConfigError);
}

TEST(ProbeSplit, EightyTwentyPrefix) {
  const auto [fit, score] = probe_split(10, 0.8);
  EXPECT_EQ(fit.size(), 8u);
  EXPECT_EQ(score, (std::vector<std::size_t>{8, 9}));
  EXPECT_THROW(probe_split(1, 0.8), ArgumentError);
}

}  // namespace
}  // namespace mtpd
