#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mtpd/cost_graph.hpp"
#include "mtpd/curriculum.hpp"
#include "mtpd/dataset.hpp"
#include "mtpd/distill.hpp"
#include "mtpd/error.hpp"
#include "mtpd/model.hpp"
#include "mtpd/rng.hpp"
#include "mtpd/train.hpp"

namespace mtpd {

enum class RunMode { kProgressive, kDirect, kEnsemble, kLongerBaseline, kSweep };

inline const char* to_string(RunMode mode) {
  switch (mode) {
    case RunMode::kProgressive: return "progressive";
    case RunMode::kDirect: return "direct";
    case RunMode::kEnsemble: return "ensemble";
    case RunMode::kLongerBaseline: return "longer_baseline";
    case RunMode::kSweep: return "sweep";
  }
  return "?";
}

struct TaskSection {
  SynthConfig synth;
  std::size_t n_teacher_train = 0;  // extra samples seen only by teachers
  bool explicit_seed = false;       // otherwise derived from the global seed

  friend bool operator==(const TaskSection& a, const TaskSection& b) {
    return a.synth.classes == b.synth.classes && a.synth.dims == b.synth.dims && a.synth.n_train == b.synth.n_train &&
           a.synth.n_val == b.synth.n_val && a.synth.noise_sigma == b.synth.noise_sigma &&
           a.synth.seed == b.synth.seed && a.n_teacher_train == b.n_teacher_train &&
           a.explicit_seed == b.explicit_seed;
  }
};

struct TeacherEntry {
  ModelSpec spec;
  TrainConfig train;
  std::optional<std::size_t> samples;  // teacher-only samples used; all if unset

  friend bool operator==(const TeacherEntry&, const TeacherEntry&) = default;
};

struct DistillSection {
  LossConfig loss;
  TrainConfig stage;  // per-stage budget; seed is replaced per stage
  RunMode mode = RunMode::kProgressive;

  friend bool operator==(const DistillSection& a, const DistillSection& b) {
    return a.loss.lambda == b.loss.lambda && a.loss.normalization == b.loss.normalization &&
           a.loss.level_aggregation == b.loss.level_aggregation && a.stage == b.stage && a.mode == b.mode;
  }
};

struct PlanSection {
  PlanAlgorithm algorithm = PlanAlgorithm::kBgs;
  std::size_t k = 3;
  std::vector<std::string> order;  // explicit curriculum; overrides the planner
  double ridge_eps = 1e-9;
  std::size_t sweep_epochs = 3;
  double sweep_learning_rate = 0.05;

  friend bool operator==(const PlanSection&, const PlanSection&) = default;
};

struct OutputSection {
  std::filesystem::path dir = "out";
  double landscape_radius = 1.0;
  std::size_t landscape_points = 11;

  friend bool operator==(const OutputSection&, const OutputSection&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  TaskSection task;
  ModelSpec student;
  TrainConfig student_train;  // [train]: off-the-shelf student training
  std::vector<TeacherEntry> teachers;
  DistillSection distill;
  PlanSection plan;
  OutputSection output;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  const TeacherEntry& teacher(std::string_view id) const {
    for (const auto& t : teachers)
      if (t.spec.id == id) return t;
    throw ConfigError("unknown teacher id '" + std::string(id) + "'");
  }

  /// Seed for the synthetic task: explicit [task] seed, else derived.
  SynthConfig synth() const {
    SynthConfig s = task.synth;
    if (!task.explicit_seed) s.seed = derive_seed(seed, "data");
    return s;
  }

  void validate() const {
    try {
      if (task.synth.classes < 2) throw ConfigError("[task] classes must be >= 2");
      if (task.synth.dims < task.synth.classes) throw ConfigError("[task] dims must be >= classes");
      if (task.synth.n_train == 0 || task.synth.n_val == 0) throw ConfigError("[task] split sizes must be positive");
      student.validate();
      if (student.input_dim != task.synth.dims || student.num_classes != task.synth.classes) {
        throw ConfigError("[student] input_dim/num_classes must match [task]");
      }
      student_train.validate();
      if (teachers.empty()) throw ConfigError("config declares no [teachers.<id>] sections");
      std::set<std::string> ids{student.id};
      for (const auto& t : teachers) {
        t.spec.validate();
        t.train.validate();
        if (t.spec.input_dim != task.synth.dims || t.spec.num_classes != task.synth.classes) {
          throw ConfigError("[teachers." + t.spec.id + "] input_dim/num_classes must match [task]");
        }
        if (t.samples && *t.samples > task.n_teacher_train) {
          throw ConfigError("[teachers." + t.spec.id + "] samples exceeds [task] n_teacher_train");
        }
        if (!ids.insert(t.spec.id).second) throw ConfigError("duplicate model id '" + t.spec.id + "'");
      }
      distill.loss.validate();
      distill.stage.validate();
      if (plan.k == 0) throw ConfigError("[plan] k must be >= 1");
      for (const auto& id : plan.order) teacher(id);
      if (!(plan.ridge_eps >= 0.0)) throw ConfigError("[plan] ridge_eps must be >= 0");
      if (output.landscape_points < 3 || output.landscape_points % 2 == 0) {
        throw ConfigError("[output] landscape_points must be odd and >= 3");
      }
    } catch (const ArgumentError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

using boost::property_tree::ptree;

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_integer(const std::string& raw, const std::string& where) {
  const std::string text = trim(raw);
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError(where + ": expected an integer, got '" + raw + "'");
  }
  return value;
}

inline double parse_real(const std::string& raw, const std::string& where) { return parse_double(trim(raw), where); }

inline std::vector<std::string> parse_list(const std::string& raw) {
  std::vector<std::string> out;
  std::stringstream in(raw);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<std::size_t> parse_widths(const std::string& raw, const std::string& where) {
  std::vector<std::size_t> out;
  for (const auto& item : parse_list(raw)) out.push_back(parse_integer<std::size_t>(item, where));
  return out;
}

// "8x4, 16x8" -> {(8, 4), (16, 8)}
inline std::vector<NeckLevel> parse_neck(const std::string& raw, const std::string& where) {
  std::vector<NeckLevel> out;
  for (const auto& item : parse_list(raw)) {
    const auto x = item.find('x');
    if (x == std::string::npos) throw ConfigError(where + ": neck level must look like CxP, got '" + item + "'");
    out.push_back({parse_integer<std::size_t>(item.substr(0, x), where),
                   parse_integer<std::size_t>(item.substr(x + 1), where)});
  }
  return out;
}

inline LrSchedule parse_schedule(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v == "constant") return LrSchedule::kConstant;
  if (v == "step") return LrSchedule::kStep;
  if (v == "linear") return LrSchedule::kLinear;
  throw ConfigError(where + ": unknown schedule '" + raw + "'");
}

inline Normalization parse_normalization(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v == "mean") return Normalization::kMean;
  if (v == "sum") return Normalization::kSum;
  throw ConfigError(where + ": unknown normalization '" + raw + "'");
}

inline Aggregation parse_aggregation(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v == "mean") return Aggregation::kMean;
  if (v == "sum") return Aggregation::kSum;
  throw ConfigError(where + ": unknown aggregation '" + raw + "'");
}

inline RunMode parse_mode(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  for (RunMode m : {RunMode::kProgressive, RunMode::kDirect, RunMode::kEnsemble, RunMode::kLongerBaseline,
                    RunMode::kSweep})
    if (v == to_string(m)) return m;
  throw ConfigError(where + ": unknown mode '" + raw + "'");
}

// Shared by [train], [teachers.<id>] and [distill].
inline bool apply_train_key(TrainConfig& cfg, const std::string& key, const std::string& value,
                            const std::string& where) {
  if (key == "epochs") cfg.epochs = parse_integer<std::int64_t>(value, where);
  else if (key == "batch_size") cfg.batch_size = parse_integer<std::size_t>(value, where);
  else if (key == "learning_rate") cfg.learning_rate = parse_real(value, where);
  else if (key == "momentum") cfg.momentum = parse_real(value, where);
  else if (key == "schedule") cfg.schedule = parse_schedule(value, where);
  else return false;
  return true;
}

inline bool apply_spec_key(ModelSpec& spec, const std::string& key, const std::string& value,
                           const std::string& where) {
  if (key == "backbone") spec.backbone = parse_widths(value, where);
  else if (key == "neck") spec.neck = parse_neck(value, where);
  else return false;
  return true;
}

inline std::string join_widths(const std::vector<std::size_t>& widths) {
  std::string out;
  for (std::size_t i = 0; i < widths.size(); ++i) out += (i ? "," : "") + std::to_string(widths[i]);
  return out;
}

inline std::string join_neck(const std::vector<NeckLevel>& neck) {
  std::string out;
  for (std::size_t i = 0; i < neck.size(); ++i)
    out += (i ? "," : "") + std::to_string(neck[i].channels) + "x" + std::to_string(neck[i].positions);
  return out;
}

// Shortest text that parses back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_train(std::ostream& out, const TrainConfig& cfg) {
  out << "epochs = " << cfg.epochs << "\n"
      << "batch_size = " << cfg.batch_size << "\n"
      << "learning_rate = " << format_real(cfg.learning_rate) << "\n"
      << "momentum = " << format_real(cfg.momentum) << "\n"
      << "schedule = " << to_string(cfg.schedule) << "\n";
}

}  // namespace detail

/// Parses the INI experiment description. Every key is checked; anything
/// unrecognised is a ConfigError so typos never silently fall back to defaults.
inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  ExperimentConfig cfg;
  cfg.student = {"student", Role::kStudent, 0, {}, {}, 0};
  bool saw_student = false;
  for (const auto& [section, body] : tree) {
    const std::string where = "[" + section + "]";
    if (body.empty() && !body.data().empty()) {
      if (section == "seed") {
        cfg.seed = detail::parse_integer<std::uint64_t>(body.data(), "seed");
        continue;
      }
      throw ConfigError("config: unknown top-level key '" + section + "'");
    }
    auto unknown = [&](const std::string& key) { return ConfigError("config: unknown key '" + key + "' in " + where); };

    if (section == "task") {
      for (const auto& [key, node] : body) {
        const std::string& v = node.data();
        const std::string at = where + " " + key;
        if (key == "classes") cfg.task.synth.classes = detail::parse_integer<std::size_t>(v, at);
        else if (key == "dims") cfg.task.synth.dims = detail::parse_integer<std::size_t>(v, at);
        else if (key == "n_train") cfg.task.synth.n_train = detail::parse_integer<std::size_t>(v, at);
        else if (key == "n_val") cfg.task.synth.n_val = detail::parse_integer<std::size_t>(v, at);
        else if (key == "n_teacher_train") cfg.task.n_teacher_train = detail::parse_integer<std::size_t>(v, at);
        else if (key == "noise_sigma") cfg.task.synth.noise_sigma = detail::parse_real(v, at);
        else if (key == "seed") {
          cfg.task.synth.seed = detail::parse_integer<std::uint64_t>(v, at);
          cfg.task.explicit_seed = true;
        } else throw unknown(key);
      }
    } else if (section == "student") {
      saw_student = true;
      for (const auto& [key, node] : body) {
        const std::string at = where + " " + key;
        if (key == "id") cfg.student.id = detail::trim(node.data());
        else if (!detail::apply_spec_key(cfg.student, key, node.data(), at)) throw unknown(key);
      }
    } else if (section.rfind("teachers.", 0) == 0) {
      TeacherEntry entry{{section.substr(9), Role::kTeacher, 0, {}, {}, 0}, {}, std::nullopt};
      if (entry.spec.id.empty()) throw ConfigError("config: teacher section needs an id");
      for (const auto& [key, node] : body) {
        const std::string at = where + " " + key;
        if (key == "samples") entry.samples = detail::parse_integer<std::size_t>(node.data(), at);
        else if (!detail::apply_spec_key(entry.spec, key, node.data(), at) &&
            !detail::apply_train_key(entry.train, key, node.data(), at))
          throw unknown(key);
      }
      cfg.teachers.push_back(std::move(entry));
    } else if (section == "train") {
      for (const auto& [key, node] : body)
        if (!detail::apply_train_key(cfg.student_train, key, node.data(), where + " " + key)) throw unknown(key);
    } else if (section == "distill") {
      for (const auto& [key, node] : body) {
        const std::string& v = node.data();
        const std::string at = where + " " + key;
        if (key == "lambda") cfg.distill.loss.lambda = detail::parse_real(v, at);
        else if (key == "normalization") cfg.distill.loss.normalization = detail::parse_normalization(v, at);
        else if (key == "level_aggregation") cfg.distill.loss.level_aggregation = detail::parse_aggregation(v, at);
        else if (key == "mode") cfg.distill.mode = detail::parse_mode(v, at);
        else if (!detail::apply_train_key(cfg.distill.stage, key, v, at)) throw unknown(key);
      }
    } else if (section == "plan") {
      for (const auto& [key, node] : body) {
        const std::string& v = node.data();
        const std::string at = where + " " + key;
        if (key == "algorithm") cfg.plan.algorithm = parse_plan_algorithm(detail::trim(v));
        else if (key == "k") cfg.plan.k = detail::parse_integer<std::size_t>(v, at);
        else if (key == "order") cfg.plan.order = detail::parse_list(v);
        else if (key == "ridge_eps") cfg.plan.ridge_eps = detail::parse_real(v, at);
        else if (key == "sweep_epochs") cfg.plan.sweep_epochs = detail::parse_integer<std::size_t>(v, at);
        else if (key == "sweep_learning_rate") cfg.plan.sweep_learning_rate = detail::parse_real(v, at);
        else throw unknown(key);
      }
    } else if (section == "output") {
      for (const auto& [key, node] : body) {
        const std::string& v = node.data();
        const std::string at = where + " " + key;
        if (key == "dir") cfg.output.dir = detail::trim(v);
        else if (key == "landscape_radius") cfg.output.landscape_radius = detail::parse_real(v, at);
        else if (key == "landscape_points") cfg.output.landscape_points = detail::parse_integer<std::size_t>(v, at);
        else throw unknown(key);
      }
    } else {
      throw ConfigError("config: unknown section " + where);
    }
  }
  if (!saw_student) throw ConfigError("config: missing [student] section");

  cfg.student.input_dim = cfg.task.synth.dims;
  cfg.student.num_classes = cfg.task.synth.classes;
  for (auto& t : cfg.teachers) {
    t.spec.input_dim = cfg.task.synth.dims;
    t.spec.num_classes = cfg.task.synth.classes;
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Canonical text form: parse_config(to_ini(c)) == c, and the config hash is
/// taken over this text so formatting differences in the source do not matter.
inline std::string to_ini(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "seed = " << cfg.seed << "\n\n[task]\n"
      << "classes = " << cfg.task.synth.classes << "\n"
      << "dims = " << cfg.task.synth.dims << "\n"
      << "n_train = " << cfg.task.synth.n_train << "\n"
      << "n_val = " << cfg.task.synth.n_val << "\n"
      << "n_teacher_train = " << cfg.task.n_teacher_train << "\n"
      << "noise_sigma = " << detail::format_real(cfg.task.synth.noise_sigma) << "\n";
  if (cfg.task.explicit_seed) out << "seed = " << cfg.task.synth.seed << "\n";
  out << "\n[student]\nid = " << cfg.student.id << "\n"
      << "backbone = " << detail::join_widths(cfg.student.backbone) << "\n"
      << "neck = " << detail::join_neck(cfg.student.neck) << "\n";
  out << "\n[train]\n";
  detail::write_train(out, cfg.student_train);
  for (const auto& t : cfg.teachers) {
    out << "\n[teachers." << t.spec.id << "]\n"
        << "backbone = " << detail::join_widths(t.spec.backbone) << "\n"
        << "neck = " << detail::join_neck(t.spec.neck) << "\n";
    if (t.samples) out << "samples = " << *t.samples << "\n";
    detail::write_train(out, t.train);
  }
  out << "\n[distill]\n"
      << "mode = " << to_string(cfg.distill.mode) << "\n"
      << "lambda = " << detail::format_real(cfg.distill.loss.lambda) << "\n"
      << "normalization = " << (cfg.distill.loss.normalization == Normalization::kMean ? "mean" : "sum") << "\n"
      << "level_aggregation = " << (cfg.distill.loss.level_aggregation == Aggregation::kMean ? "mean" : "sum")
      << "\n";
  detail::write_train(out, cfg.distill.stage);
  out << "\n[plan]\n"
      << "algorithm = " << to_string(cfg.plan.algorithm) << "\n"
      << "k = " << cfg.plan.k << "\n";
  if (!cfg.plan.order.empty()) {
    out << "order = ";
    for (std::size_t i = 0; i < cfg.plan.order.size(); ++i) out << (i ? "," : "") << cfg.plan.order[i];
    out << "\n";
  }
  out << "ridge_eps = " << detail::format_real(cfg.plan.ridge_eps) << "\n"
      << "sweep_epochs = " << cfg.plan.sweep_epochs << "\n"
      << "sweep_learning_rate = " << detail::format_real(cfg.plan.sweep_learning_rate) << "\n";
  out << "\n[output]\n"
      << "dir = " << cfg.output.dir.string() << "\n"
      << "landscape_radius = " << detail::format_real(cfg.output.landscape_radius) << "\n"
      << "landscape_points = " << cfg.output.landscape_points << "\n";
  return out.str();
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a64(to_ini(cfg)); }

}  // namespace mtpd
