#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpd/config.hpp"
#include "mtpd/cost_graph.hpp"
#include "mtpd/curriculum.hpp"
#include "mtpd/error.hpp"
#include "mtpd/experiment.hpp"
#include "mtpd/io.hpp"

namespace mtpd {

inline constexpr const char* kMetricsHeader =
    "stage,teacher_id,epoch,train_task_loss,train_distill_loss,val_task_loss,val_accuracy";

/// Inputs for emit_report. Only `records` is required; each optional part
/// produces its own file when present.
struct Report {
  std::vector<RunRecord> records;
  std::optional<CostGraph> graph;
  std::optional<PerformanceTable> quality;
  std::optional<Curriculum> curriculum;
  std::optional<LandscapeGrid> landscape;
  std::optional<SweepTable> sweep;
  std::uint64_t seed = 0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string metrics_csv(const RunRecord& record) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (std::size_t s = 0; s < record.stages.size(); ++s) {
    const StageRecord& stage = record.stages[s];
    for (const EpochMetrics& m : stage.log.epochs) {
      out += std::to_string(s) + "," + stage.teacher_id + "," + std::to_string(m.epoch) + "," +
             detail::format_real(m.train_task_loss) + "," + detail::format_real(m.train_distill_loss) + "," +
             detail::format_real(m.val_task_loss) + "," + detail::format_real(m.val_accuracy) + "\n";
    }
  }
  return out;
}

/// Row and column headers are the grid coordinates (rows: first direction).
inline std::string landscape_csv(const LandscapeGrid& grid) {
  std::string out = "a\\b";
  for (double c : grid.coords) out += "," + detail::format_real(c);
  out += "\n";
  for (std::size_t i = 0; i < grid.coords.size(); ++i) {
    out += detail::format_real(grid.coords[i]);
    for (std::size_t j = 0; j < grid.coords.size(); ++j) out += "," + detail::format_real(grid.loss(i, j));
    out += "\n";
  }
  return out;
}

inline std::string join_order(const std::vector<std::string>& order, const char* sep = ">") {
  std::string out;
  for (std::size_t i = 0; i < order.size(); ++i) out += (i ? sep : "") + order[i];
  return out;
}

inline std::string sweep_csv(const SweepTable& table) {
  std::string out = "order,length,val_accuracy,val_task_loss,rank,is_bgs\n";
  for (const SweepRow& row : table.rows) {
    out += join_order(row.order) + "," + std::to_string(row.order.size()) + "," +
           detail::format_real(row.val_accuracy) + "," + detail::format_real(row.val_task_loss) + "," +
           std::to_string(row.rank) + "," + (row.order == table.bgs_order ? "1" : "0") + "\n";
  }
  return out;
}

inline nlohmann::ordered_json record_json(const RunRecord& r) {
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const StageRecord& s : r.stages) {
    stages.push_back({{"teacher_id", s.teacher_id},
                      {"epochs", s.log.epochs.size()},
                      {"initial_checkpoint", hex64(s.initial_hash)},
                      {"final_checkpoint", hex64(s.final_hash)}});
  }
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.mode);
  j["curriculum"] = r.curriculum;
  j["total_epochs"] = r.total_epochs();
  j["stages"] = std::move(stages);
  j["final"] = {{"train_task_loss", r.final.train_task_loss},
                {"val_task_loss", r.final.val_task_loss},
                {"val_accuracy", r.final.val_accuracy}};
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

inline nlohmann::ordered_json summary_json(const Report& report) {
  nlohmann::ordered_json j;
  j["config_hash"] = hex64(report.records.front().config_hash);
  j["seed"] = report.seed;
  if (report.curriculum) j["curriculum"] = report.curriculum->order;
  if (report.quality) {
    nlohmann::ordered_json q;
    for (const auto& [id, v] : *report.quality) q[id] = v;
    j["teacher_quality"] = std::move(q);
  }
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& r : report.records) runs.push_back(record_json(r));
  j["runs"] = std::move(runs);
  if (report.sweep) {
    const SweepRow& best = report.sweep->best();
    j["sweep"] = {{"orders", report.sweep->rows.size()},
                  {"best_order", best.order},
                  {"best_val_accuracy", best.val_accuracy},
                  {"bgs_order", report.sweep->bgs_order},
                  {"bgs_rank", report.sweep->bgs_rank}};
  }
  if (report.landscape) {
    j["landscape"] = {{"center_loss", report.landscape->center()}, {"flatness", report.landscape->flatness()}};
  }
  return j;
}

inline std::string metrics_file_name(const Report& report, std::size_t index) {
  if (index == 0) return "metrics.csv";
  return std::string("metrics_") + std::to_string(index) + "_" + to_string(report.records[index].mode) + ".csv";
}

/// Writes every artifact into `dir`, overwriting earlier files. Returns the
/// written paths in a fixed order.
inline std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir) {
  if (report.records.empty()) throw ArgumentError("emit_report: no run records");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());

  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& text) {
    write_file(dir / name, text);
    written.push_back(dir / name);
  };
  for (std::size_t i = 0; i < report.records.size(); ++i) put(metrics_file_name(report, i), metrics_csv(report.records[i]));
  if (report.graph) put("cost_matrix.csv", cost_graph_to_csv(*report.graph));
  if (report.quality) put("quality.csv", performance_to_csv(*report.quality));
  if (report.graph && report.curriculum) put("plan.json", plan_to_json(*report.graph, *report.curriculum).dump(2) + "\n");
  if (report.landscape) put("landscape.csv", landscape_csv(*report.landscape));
  if (report.sweep) put("sweep.csv", sweep_csv(*report.sweep));
  put("summary.json", summary_json(report).dump(2) + "\n");
  return written;
}

}  // namespace mtpd
