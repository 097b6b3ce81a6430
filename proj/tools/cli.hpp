#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtpd/config.hpp"
#include "mtpd/cost_graph.hpp"
#include "mtpd/curriculum.hpp"
#include "mtpd/error.hpp"
#include "mtpd/experiment.hpp"
#include "mtpd/io.hpp"
#include "mtpd/report.hpp"

namespace mtpd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  // plan
  std::string algo;
  std::optional<std::size_t> k;
  std::string costs;
  std::string quality;
  // distill / landscape / report
  std::string mode;
  std::optional<double> radius;
  std::optional<std::size_t> points;
};

inline ExperimentConfig load(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required for this subcommand");
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output.dir = o.out;
  if (!o.algo.empty()) cfg.plan.algorithm = parse_plan_algorithm(o.algo);
  if (o.k) cfg.plan.k = *o.k;
  if (!o.mode.empty()) cfg.distill.mode = detail::parse_mode(o.mode, "--mode");
  if (o.radius) cfg.output.landscape_radius = *o.radius;
  if (o.points) cfg.output.landscape_points = *o.points;
  cfg.validate();
  return cfg;
}

inline std::filesystem::path teacher_dir(const ExperimentConfig& cfg) { return cfg.output.dir / "teachers"; }

inline int gen_data(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  const ExperimentData data = make_data(cfg);
  const auto dir = cfg.output.dir / "data";
  write_file(dir / "train.bin", encode_dataset(data.train));
  write_file(dir / "val.bin", encode_dataset(data.val));
  if (data.teacher_only) write_file(dir / "teacher_only.bin", encode_dataset(*data.teacher_only));
  out << "wrote " << data.train.size() << " train / " << data.val.size() << " val samples to " << dir.string() << "\n";
  return kExitOk;
}

inline int train_teachers(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  const ExperimentData data = make_data(cfg);
  const TeacherPool pool = prepare_pool(cfg, data);
  for (const Model& t : pool.teachers) {
    write_file(checkpoint_path(teacher_dir(cfg), t.spec.id), encode_checkpoint(t));
    out << t.spec.id << " params=" << t.spec.parameter_count() << " val_accuracy=" << format_cost(pool.quality.at(t.spec.id))
        << "\n";
  }
  write_file(cfg.output.dir / "quality.csv", performance_to_csv(pool.quality));
  return kExitOk;
}

inline int cost_graph(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  const ExperimentData data = make_data(cfg);
  const TeacherPool pool = prepare_pool(cfg, data, PoolSource::kLoadOrTrain, teacher_dir(cfg));
  const Model ots = train_ots_student(cfg, data);
  write_file(cfg.output.dir / "student_ots.ckpt", encode_checkpoint(ots));
  const CostGraph graph = pool_cost_graph(cfg, ots, pool, data);
  write_file(cfg.output.dir / "cost_matrix.csv", cost_graph_to_csv(graph));
  write_file(cfg.output.dir / "quality.csv", performance_to_csv(pool.quality));
  out << cost_graph_to_csv(graph);
  return kExitOk;
}

/// With --costs/--quality the planner runs on the given tables; otherwise
/// the tables are computed from --config.
inline int plan_cmd(const Options& o, std::ostream& out) {
  CostGraph graph;
  PerformanceTable q;
  PlanAlgorithm algo = PlanAlgorithm::kBgs;
  std::size_t k = 3;
  std::filesystem::path dir;
  if (!o.costs.empty() || !o.quality.empty()) {
    if (o.costs.empty() || o.quality.empty()) throw ConfigError("plan: --costs and --quality go together");
    graph = cost_graph_from_csv(read_file(o.costs));
    q = performance_from_csv(read_file(o.quality));
    if (!o.algo.empty()) algo = parse_plan_algorithm(o.algo);
    if (o.k) k = *o.k;
    if (!o.out.empty()) dir = o.out;
  } else {
    const ExperimentConfig cfg = load(o);
    const PreparedExperiment p = prepare_experiment(cfg, PoolSource::kLoadOrTrain, teacher_dir(cfg));
    graph = p.graph;
    q = p.pool.quality;
    algo = cfg.plan.algorithm;
    k = cfg.plan.k;
    dir = cfg.output.dir;
  }
  const Curriculum c = plan(graph, q, algo, k);
  if (!dir.empty()) write_file(dir / "plan.json", plan_to_json(graph, c).dump(2) + "\n");
  out << c.joined(",") << "\n";
  return kExitOk;
}

inline Report base_report(const PreparedExperiment& p) {
  Report r;
  r.graph = p.graph;
  r.quality = p.pool.quality;
  r.curriculum = p.curriculum;
  r.seed = p.cfg.seed;
  return r;
}

inline void print_record(std::ostream& out, const RunRecord& r) {
  out << to_string(r.mode) << " [" << join_order(r.curriculum, ",") << "] epochs=" << r.total_epochs()
      << " val_accuracy=" << format_cost(r.final.val_accuracy) << " val_task_loss=" << format_cost(r.final.val_task_loss)
      << " train_task_loss=" << format_cost(r.final.train_task_loss) << "\n";
}

inline int distill_cmd(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  if (cfg.distill.mode == RunMode::kSweep) throw ConfigError("distill: mode=sweep is handled by sweep-orders");
  const PreparedExperiment p = prepare_experiment(cfg, PoolSource::kLoadOrTrain, teacher_dir(cfg));
  const RunOutput run = run_prepared(p, cfg.distill.mode);
  write_file(cfg.output.dir / "student_final.ckpt", encode_checkpoint(run.student));
  Report report = base_report(p);
  report.records.push_back(run.record);
  emit_report(report, cfg.output.dir);
  print_record(out, run.record);
  return kExitOk;
}

inline int sweep_cmd(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  const PreparedExperiment p = prepare_experiment(cfg, PoolSource::kLoadOrTrain, teacher_dir(cfg));
  const SweepTable table = sweep_orders(p);
  Report report = base_report(p);
  report.curriculum = Curriculum{table.bgs_order, "bgs", cfg.plan.k, "sweep"};
  report.records.push_back(run_mode(cfg, RunMode::kSweep, table.bgs_order, p.ots, p.pool, p.data,
                                    TrainConfig{static_cast<std::int64_t>(cfg.plan.sweep_epochs), cfg.distill.stage.batch_size,
                                                cfg.plan.sweep_learning_rate, cfg.distill.stage.momentum,
                                                LrSchedule::kLinear, 0})
                                .record);
  report.sweep = table;
  emit_report(report, cfg.output.dir);
  out << sweep_csv(table);
  out << "bgs order " << join_order(table.bgs_order, ",") << " rank " << table.bgs_rank << "/" << table.rows.size() << "\n";
  return kExitOk;
}

inline LandscapeGrid probe_student(const ExperimentConfig& cfg, const Model& student, const Dataset& data) {
  return landscape_probe(student, data, cfg.output.landscape_radius, cfg.output.landscape_points,
                         derive_seed(cfg.seed, "landscape"));
}

inline int landscape_cmd(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  if (cfg.distill.mode == RunMode::kSweep) throw ConfigError("landscape: mode=sweep has no single student");
  const PreparedExperiment p = prepare_experiment(cfg, PoolSource::kLoadOrTrain, teacher_dir(cfg));
  const RunOutput run = run_prepared(p, cfg.distill.mode);
  const LandscapeGrid grid = probe_student(cfg, run.student, p.data.train);
  write_file(cfg.output.dir / "landscape.csv", landscape_csv(grid));
  out << "center=" << format_cost(grid.center()) << " flatness=" << format_cost(grid.flatness()) << "\n";
  return kExitOk;
}

/// Full pipeline: configured run plus the longer baseline, cost matrix, plan
/// and the landscape of the configured run's student.
inline int report_cmd(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load(o);
  if (cfg.distill.mode == RunMode::kSweep) throw ConfigError("report: use sweep-orders for mode=sweep");
  const PreparedExperiment p = prepare_experiment(cfg, PoolSource::kLoadOrTrain, teacher_dir(cfg));
  Report report = base_report(p);
  const RunOutput main_run = run_prepared(p, cfg.distill.mode);
  report.records.push_back(main_run.record);
  if (cfg.distill.mode != RunMode::kLongerBaseline) report.records.push_back(run_prepared(p, RunMode::kLongerBaseline).record);
  report.landscape = probe_student(cfg, main_run.student, p.data.train);
  for (const auto& path : emit_report(report, cfg.output.dir)) out << path.string() << "\n";
  for (const auto& r : report.records) print_record(out, r);
  return kExitOk;
}

/// Parses argv and dispatches. Exit codes: 0 success, 2 usage or config
/// error, 3 numeric failure, 1 anything else.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-teacher progressive feature distillation on synthetic surrogates", "mtpd"};
  app.require_subcommand(1);
  Options o;

  auto shared = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (INI)");
    sub->add_option("--seed", o.seed, "Override the global seed");
    sub->add_option("--out", o.out, "Output directory");
  };
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&, std::ostream&);
  };
  const Command commands[] = {
      {"gen-data", "Write the synthetic train/val splits", gen_data},
      {"train-teachers", "Train the teacher pool and save checkpoints", train_teachers},
      {"cost-graph", "Train the off-the-shelf student and measure adaptation costs", cost_graph},
      {"plan", "Plan a teacher curriculum", plan_cmd},
      {"distill", "Run the configured distillation mode", distill_cmd},
      {"sweep-orders", "Mini-budget run of every teacher order", sweep_cmd},
      {"landscape", "Loss landscape around the distilled student", landscape_cmd},
      {"report", "Full pipeline with every report file", report_cmd},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    shared(sub);
    subs.emplace_back(sub, &c);
  }
  CLI::App* plan_sub = app.get_subcommand("plan");
  plan_sub->add_option("--algo", o.algo, "bgs | forward | sp-sum | sp-max | topk")
      ->check(CLI::IsMember({"bgs", "forward", "sp-sum", "sp-max", "topk"}));
  plan_sub->add_option("--k", o.k, "Maximum curriculum length")->check(CLI::PositiveNumber);
  plan_sub->add_option("--costs", o.costs, "Cost matrix CSV");
  plan_sub->add_option("--quality", o.quality, "Teacher quality CSV");
  for (const char* name : {"distill", "landscape", "report"}) {
    app.get_subcommand(name)->add_option("--mode", o.mode, "progressive | direct | ensemble | longer_baseline");
  }
  app.get_subcommand("landscape")->add_option("--radius", o.radius, "Grid radius");
  app.get_subcommand("landscape")->add_option("--points", o.points, "Odd number of grid points per axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    for (const auto& [sub, command] : subs)
      if (sub->parsed()) return command->run(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitConfig;
}

}  // namespace mtpd::cli
