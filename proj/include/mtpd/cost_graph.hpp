#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mtpd/dataset.hpp"
#include "mtpd/distill.hpp"
#include "mtpd/error.hpp"
#include "mtpd/model.hpp"
#include "mtpd/tensor.hpp"

namespace mtpd {

struct CostConfig {
  double ridge_eps = 1e-9;
  Normalization normalization = Normalization::kMean;
  Aggregation level_aggregation = Aggregation::kSum;
  double probe_train_fraction = 0.8;

  LossConfig loss_config() const { return {1.0, normalization, level_aggregation}; }
};

// What to do when the normal matrix is singular and ridge_eps == 0.
enum class SingularPolicy { kThrow, kMinimumNorm };

namespace detail {

using MatrixX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_probe_level(const Tensor& from, const Tensor& to, std::size_t l) {
  if (from.rank() != 3 || to.rank() != 3 || from.dim(0) != to.dim(0)) {
    throw DimensionError("adapter fit: level " + std::to_string(l) + " batches are not aligned (" +
                         shape_string(from.shape()) + " vs " + shape_string(to.shape()) + ")");
  }
  const std::size_t pf = from.dim(2), pt = to.dim(2);
  if (pt % pf != 0 && pf % pt != 0) {
    throw AdapterError("adapter fit: level " + std::to_string(l) + " positions " + std::to_string(pf) +
                       " -> " + std::to_string(pt) + " are not an integer ratio");
  }
}

struct NormalEquations {
  MatrixX gram;   // sum x x^T            [C_from x C_from]
  MatrixX cross;  // sum y x^T            [C_to x C_from]
  double target_energy = 0.0;  // sum |y|^2
};

// Columns are gathered across samples and target positions; target position p
// reads source position floor(p * P_from / P_to).
inline NormalEquations accumulate_normal_equations(const Tensor& from, const Tensor& to) {
  const std::size_t batch = from.dim(0), cf = from.dim(1), pf = from.dim(2), ct = to.dim(1), pt = to.dim(2);
  NormalEquations ne{MatrixX::Zero(cf, cf), MatrixX::Zero(ct, cf), 0.0};
  std::vector<double> x(cf);
  std::vector<double> y(ct);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < pt; ++p) {
      const std::size_t q = p * pf / pt;
      for (std::size_t j = 0; j < cf; ++j) x[j] = from(b, j, q);
      for (std::size_t c = 0; c < ct; ++c) y[c] = to(b, c, p);
      for (std::size_t i = 0; i < cf; ++i)
        for (std::size_t j = 0; j < cf; ++j) ne.gram(i, j) += x[i] * x[j];
      for (std::size_t c = 0; c < ct; ++c) {
        ne.target_energy += y[c] * y[c];
        for (std::size_t j = 0; j < cf; ++j) ne.cross(c, j) += y[c] * x[j];
      }
    }
  }
  return ne;
}

inline Tensor to_tensor(const MatrixX& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  std::copy_n(m.data(), t.size(), t.data());
  return t;
}

inline MatrixX to_matrix(const Tensor& t) {
  MatrixX m(t.dim(0), t.dim(1));
  std::copy_n(t.data(), t.size(), m.data());
  return m;
}

}  // namespace detail

/// Least-squares channel map per level: argmin_M sum |F_to - M up(F_from)|^2
/// + ridge_eps |M|^2, solved through the normal equations. The returned
/// adapter is frozen and always carries a channel map, square ones included.
inline Adapter fit_adapter_closed_form(const FeatureSet& from, const FeatureSet& to, double ridge_eps,
                                       SingularPolicy policy = SingularPolicy::kThrow) {
  if (from.levels.size() != to.levels.size()) {
    throw AdapterError("adapter fit: " + std::to_string(from.levels.size()) + " source levels vs " +
                       std::to_string(to.levels.size()) + " target levels");
  }
  if (!(ridge_eps >= 0.0)) throw ArgumentError("adapter fit: ridge_eps must be >= 0");
  Adapter adapter;
  adapter.trainable = false;
  for (std::size_t l = 0; l < from.levels.size(); ++l) {
    const Tensor& f = from.levels[l];
    const Tensor& t = to.levels[l];
    detail::check_probe_level(f, t, l);
    const detail::NormalEquations ne = detail::accumulate_normal_equations(f, t);
    const auto n = ne.gram.rows();
    detail::MatrixX a = ne.gram + ridge_eps * detail::MatrixX::Identity(n, n);
    const detail::MatrixX rhs = ne.cross.transpose();

    detail::MatrixX solution;  // M^T
    bool singular = false;
    if (ridge_eps == 0.0) {
      Eigen::SelfAdjointEigenSolver<detail::MatrixX> eig(a, Eigen::EigenvaluesOnly);
      const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
      singular = !(eig.eigenvalues().minCoeff() > 1e-12 * std::max(top, 1e-300));
    }
    if (singular) {
      if (policy == SingularPolicy::kThrow) {
        throw NumericError("adapter fit: normal matrix of level " + std::to_string(l) +
                           " is singular; use ridge_eps > 0");
      }
      solution = Eigen::CompleteOrthogonalDecomposition<detail::MatrixX>(a).solve(rhs);
    } else {
      Eigen::LLT<detail::MatrixX> llt(a);
      if (llt.info() != Eigen::Success) {
        throw NumericError("adapter fit: normal matrix of level " + std::to_string(l) +
                           " is not positive definite; increase ridge_eps");
      }
      solution = llt.solve(rhs);
      solution += llt.solve(rhs - a * solution);  // one refinement step
    }
    if (!solution.allFinite()) throw NumericError("adapter fit: non-finite solution");
    adapter.levels.push_back({{f.dim(1), f.dim(2)}, {t.dim(1), t.dim(2)}, detail::to_tensor(solution.transpose())});
  }
  return adapter;
}

/// The ridge objective sum |F_to - M up(F_from)|^2 + ridge_eps |M|^2 summed over levels.
inline double adapter_objective(const Adapter& adapter, const FeatureSet& from, const FeatureSet& to,
                                double ridge_eps) {
  const FeatureSet mapped = apply_adapter(adapter, from);
  double value = 0.0;
  for (std::size_t l = 0; l < mapped.levels.size(); ++l) {
    value += sse(to.levels[l], mapped.levels[l], Normalization::kSum);
    if (adapter.levels[l].has_channel_map()) value += ridge_eps * squared_norm(adapter.levels[l].channel_map);
  }
  return value;
}

// Gradient of adapter_objective w.r.t. each level's channel map: 2 (M A - B).
inline std::vector<Tensor> adapter_objective_gradient(const Adapter& adapter, const FeatureSet& from,
                                                      const FeatureSet& to, double ridge_eps) {
  std::vector<Tensor> grads;
  for (std::size_t l = 0; l < adapter.levels.size(); ++l) {
    detail::check_probe_level(from.levels[l], to.levels[l], l);
    const detail::NormalEquations ne = detail::accumulate_normal_equations(from.levels[l], to.levels[l]);
    const detail::MatrixX m = detail::to_matrix(adapter.levels[l].channel_map);
    const auto n = ne.gram.rows();
    const detail::MatrixX g =
        2.0 * (m * (ne.gram + ridge_eps * detail::MatrixX::Identity(n, n)) - ne.cross);
    grads.push_back(detail::to_tensor(g));
  }
  return grads;
}

/// Plain gradient descent on the ridge objective from a zero map, step 1/L.
/// Exists to cross-check fit_adapter_closed_form.
inline Adapter fit_adapter_iterative(const FeatureSet& from, const FeatureSet& to, double ridge_eps,
                                     std::size_t steps) {
  Adapter adapter;
  adapter.trainable = false;
  for (std::size_t l = 0; l < from.levels.size(); ++l) {
    const Tensor& f = from.levels[l];
    const Tensor& t = to.levels[l];
    detail::check_probe_level(f, t, l);
    const detail::NormalEquations ne = detail::accumulate_normal_equations(f, t);
    const auto n = ne.gram.rows();
    const detail::MatrixX a = ne.gram + ridge_eps * detail::MatrixX::Identity(n, n);
    Eigen::SelfAdjointEigenSolver<detail::MatrixX> eig(a, Eigen::EigenvaluesOnly);
    const double lipschitz = 2.0 * std::max(eig.eigenvalues().maxCoeff(), 1e-300);
    detail::MatrixX m = detail::MatrixX::Zero(ne.cross.rows(), n);
    for (std::size_t s = 0; s < steps; ++s) m -= (2.0 / lipschitz) * (m * a - ne.cross);
    adapter.levels.push_back({{f.dim(1), f.dim(2)}, {t.dim(1), t.dim(2)}, detail::to_tensor(m)});
  }
  return adapter;
}

/// C(A, B): fit the linear map from A's to B's features on the probe-train
/// split, report the feature-matching loss on the probe-val split.
inline double adaptation_cost_from_features(const FeatureSet& from_train, const FeatureSet& to_train,
                                            const FeatureSet& from_val, const FeatureSet& to_val,
                                            const CostConfig& cfg) {
  const Adapter adapter = fit_adapter_closed_form(from_train, to_train, cfg.ridge_eps);
  return distill_loss(to_val, from_val, adapter, cfg.loss_config()).value;
}

inline double adaptation_cost(const Model& from, const Model& to, const Dataset& train_split,
                              const Dataset& val_split, const CostConfig& cfg) {
  return adaptation_cost_from_features(forward(from, train_split.inputs).features,
                                       forward(to, train_split.inputs).features,
                                       forward(from, val_split.inputs).features,
                                       forward(to, val_split.inputs).features, cfg);
}

/// Dense, non-symmetric matrix of adaptation costs. ids[0] is the student.
struct CostGraph {
  std::vector<std::string> ids;
  std::vector<double> costs;  // row-major [from][to]; diagonal unused
  std::string dataset_id;
  double ridge_eps = 0.0;
  Normalization normalization = Normalization::kMean;

  std::size_t size() const noexcept { return ids.size(); }
  const std::string& student() const { return ids.at(0); }
  std::vector<std::string> teachers() const { return {ids.begin() + 1, ids.end()}; }

  std::size_t index_of(std::string_view id) const {
    const auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) throw ArgumentError("cost graph: unknown model id '" + std::string(id) + "'");
    return static_cast<std::size_t>(it - ids.begin());
  }

  double cost(std::string_view from, std::string_view to) const {
    const std::size_t i = index_of(from), j = index_of(to);
    if (i == j) throw ArgumentError("cost graph: no self-edge for '" + std::string(from) + "'");
    return costs[i * ids.size() + j];
  }

  void set(std::string_view from, std::string_view to, double value) {
    const std::size_t i = index_of(from), j = index_of(to);
    if (i == j) throw ArgumentError("cost graph: no self-edge for '" + std::string(from) + "'");
    if (!(value >= 0.0) || !std::isfinite(value)) {
      throw NumericError("cost graph: cost must be finite and >= 0");
    }
    costs[i * ids.size() + j] = value;
  }

  std::size_t edge_count() const noexcept { return ids.size() * (ids.size() - 1); }

  friend bool operator==(const CostGraph&, const CostGraph&) = default;
};

inline CostGraph make_empty_graph(std::vector<std::string> ids) {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (id.empty()) throw ArgumentError("cost graph: empty model id");
    if (!seen.insert(id).second) throw ArgumentError("cost graph: duplicate model id '" + id + "'");
  }
  CostGraph g;
  g.costs.assign(ids.size() * ids.size(), 0.0);
  g.ids = std::move(ids);
  return g;
}

// First floor(fraction * N) samples for fitting, the rest for scoring.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> probe_split(std::size_t n,
                                                                                 double fraction) {
  const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (cut == 0 || cut >= n) {
    throw ArgumentError("cost graph: probe split of " + std::to_string(n) + " samples at " +
                        std::to_string(fraction) + " leaves an empty side");
  }
  std::vector<std::size_t> fit(cut), score(n - cut);
  for (std::size_t i = 0; i < cut; ++i) fit[i] = i;
  for (std::size_t i = cut; i < n; ++i) score[i - cut] = i;
  return {fit, score};
}

/// All ordered pairs from precomputed feature sets. entries[0] is the student.
inline CostGraph build_cost_graph_from_features(
    const std::vector<std::pair<std::string, FeatureSet>>& entries, const CostConfig& cfg,
    std::string dataset_id = {}) {
  if (entries.size() < 2) throw ArgumentError("cost graph: need a student and at least one teacher");
  std::vector<std::string> ids;
  for (const auto& [id, _] : entries) ids.push_back(id);
  CostGraph graph = make_empty_graph(std::move(ids));
  graph.dataset_id = std::move(dataset_id);
  graph.ridge_eps = cfg.ridge_eps;
  graph.normalization = cfg.normalization;

  const std::size_t n = entries.front().second.batch();
  for (const auto& [id, f] : entries) {
    if (f.batch() != n) throw DimensionError("cost graph: feature sample counts differ for '" + id + "'");
  }
  const auto [fit_idx, score_idx] = probe_split(n, cfg.probe_train_fraction);
  std::vector<FeatureSet> fit, score;
  for (const auto& [_, f] : entries) {
    fit.push_back(f.gather(fit_idx));
    score.push_back(f.gather(score_idx));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (std::size_t j = 0; j < entries.size(); ++j) {
      if (i == j) continue;
      graph.set(graph.ids[i], graph.ids[j],
                adaptation_cost_from_features(fit[i], fit[j], score[i], score[j], cfg));
    }
  }
  return graph;
}

/// Forwards every model once over `data` and fills all ordered pairs.
inline CostGraph build_cost_graph(const Model& student, std::span<const Model> pool, const Dataset& data,
                                  const CostConfig& cfg, std::string dataset_id = {}) {
  if (pool.empty()) throw ArgumentError("cost graph: empty teacher pool");
  std::vector<std::string> ids{student.spec.id};
  for (const Model& t : pool) ids.push_back(t.spec.id);
  make_empty_graph(ids);  // duplicate check before any forward pass

  std::vector<std::pair<std::string, FeatureSet>> entries;
  entries.emplace_back(student.spec.id, forward(student, data.inputs).features);
  for (const Model& t : pool) entries.emplace_back(t.spec.id, forward(t, data.inputs).features);
  return build_cost_graph_from_features(entries, cfg, std::move(dataset_id));
}

// Shortest text that parses back to the same double.
inline std::string format_cost(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return {buf, res.ptr};
}

/// Comma-separated matrix: header row and first column carry model ids, the
/// diagonal is "-", entries use 9 significant digits.
inline std::string cost_graph_to_csv(const CostGraph& graph) {
  std::ostringstream out;
  out << "from/to";
  for (const auto& id : graph.ids) out << ',' << id;
  out << '\n';
  for (std::size_t i = 0; i < graph.size(); ++i) {
    out << graph.ids[i];
    for (std::size_t j = 0; j < graph.size(); ++j) {
      out << ',' << (i == j ? std::string("-") : format_cost(graph.costs[i * graph.size() + j]));
    }
    out << '\n';
  }
  return out.str();
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_double(const std::string& text, const std::string& context) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(context + ": '" + text + "' is not a number");
  }
}

}  // namespace detail

inline CostGraph cost_graph_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r" || line.front() == '#') continue;
    rows.push_back(detail::split_csv_line(line));
  }
  if (rows.size() < 3) throw ConfigError("cost matrix: need a header and at least two rows");
  const std::vector<std::string> ids(rows[0].begin() + 1, rows[0].end());
  if (rows.size() != ids.size() + 1) throw ConfigError("cost matrix: row count does not match header");
  CostGraph graph = make_empty_graph(ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& row = rows[i + 1];
    if (row.size() != ids.size() + 1) throw ConfigError("cost matrix: ragged row for '" + row[0] + "'");
    if (row[0] != ids[i]) throw ConfigError("cost matrix: row " + std::to_string(i + 1) + " is '" + row[0] + "', expected '" + ids[i] + "'");
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (i == j) continue;
      const double v = detail::parse_double(row[j + 1], "cost matrix " + ids[i] + "->" + ids[j]);
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("cost matrix: negative or non-finite cost");
      graph.costs[i * ids.size() + j] = v;
    }
  }
  return graph;
}

}  // namespace mtpd
