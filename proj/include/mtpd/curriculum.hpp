#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpd/cost_graph.hpp"
#include "mtpd/error.hpp"

namespace mtpd {

// Quality score Q(T) per teacher id. Only comparisons between scores matter.
using PerformanceTable = std::map<std::string, double>;

enum class PlanAlgorithm { kBgs, kForward, kShortestPathSum, kShortestPathMax, kTopK };

inline const char* to_string(PlanAlgorithm algo) {
  switch (algo) {
    case PlanAlgorithm::kBgs: return "bgs";
    case PlanAlgorithm::kForward: return "forward";
    case PlanAlgorithm::kShortestPathSum: return "sp-sum";
    case PlanAlgorithm::kShortestPathMax: return "sp-max";
    case PlanAlgorithm::kTopK: return "topk";
  }
  return "?";
}

inline PlanAlgorithm parse_plan_algorithm(const std::string& name) {
  for (auto algo : {PlanAlgorithm::kBgs, PlanAlgorithm::kForward, PlanAlgorithm::kShortestPathSum,
                    PlanAlgorithm::kShortestPathMax, PlanAlgorithm::kTopK}) {
    if (name == to_string(algo)) return algo;
  }
  throw ConfigError("unknown planning algorithm '" + name + "' (expected bgs|forward|sp-sum|sp-max|topk)");
}

struct Curriculum {
  std::vector<std::string> order;  // first-used ... last-used
  std::string algorithm;
  std::size_t k = 0;
  std::string provenance;

  std::string joined(std::string_view sep = ",") const {
    std::string out;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i) out += sep;
      out += order[i];
    }
    return out;
  }

  friend bool operator==(const Curriculum&, const Curriculum&) = default;
};

enum class PathMode { kSum, kMax };

namespace detail {

inline std::vector<std::string> sorted_pool(const CostGraph& graph, const PerformanceTable& q) {
  std::vector<std::string> pool = graph.teachers();
  if (pool.empty()) throw ArgumentError("planner: empty teacher pool");
  std::sort(pool.begin(), pool.end());
  for (const auto& id : pool) {
    if (!q.contains(id)) throw ArgumentError("planner: no performance score for teacher '" + id + "'");
  }
  return pool;
}

// argmax Q over `candidates` (sorted), ties to the smallest id.
inline std::string best_teacher(const std::vector<std::string>& candidates, const PerformanceTable& q) {
  std::string best = candidates.front();
  for (const auto& id : candidates)
    if (q.at(id) > q.at(best)) best = id;
  return best;
}

inline void require_k(std::size_t k) {
  if (k == 0) throw ArgumentError("planner: k must be >= 1");
}

inline std::string provenance(const CostGraph& graph) {
  return "graph:" + (graph.dataset_id.empty() ? std::string("unnamed") : graph.dataset_id);
}

}  // namespace detail

inline std::string argmax_quality(const PerformanceTable& q) {
  if (q.empty()) throw ArgumentError("planner: empty performance table");
  std::vector<std::string> ids;
  for (const auto& [id, _] : q) ids.push_back(id);
  return detail::best_teacher(ids, q);
}

/// Backward Greedy Selection. The best teacher goes last; each earlier slot
/// takes the remaining teacher closest to its successor, provided that teacher
/// is strictly closer than the student is. Stops when no teacher qualifies or
/// k slots are filled.
inline Curriculum bgs(const CostGraph& graph, const PerformanceTable& q, std::size_t k) {
  detail::require_k(k);
  std::vector<std::string> remaining = detail::sorted_pool(graph, q);
  const std::string& student = graph.student();

  std::vector<std::string> reversed{detail::best_teacher(remaining, q)};
  std::erase(remaining, reversed.back());
  while (reversed.size() < k) {
    const std::string& next = reversed.back();
    const double student_cost = graph.cost(student, next);
    const std::string* pick = nullptr;
    for (const auto& id : remaining) {
      const double c = graph.cost(id, next);
      if (c < student_cost && (!pick || c < graph.cost(*pick, next))) pick = &id;
    }
    if (!pick) break;
    reversed.push_back(*pick);
    std::erase(remaining, reversed.back());
  }
  return {{reversed.rbegin(), reversed.rend()}, "bgs", k, detail::provenance(graph)};
}

/// Greedy walk from the student: always step to the nearest unused teacher.
inline Curriculum forward_construction(const CostGraph& graph, const PerformanceTable& q, std::size_t k) {
  detail::require_k(k);
  std::vector<std::string> remaining = detail::sorted_pool(graph, q);
  const std::size_t length = std::min(k, remaining.size());
  std::vector<std::string> order;
  std::string current = graph.student();
  while (order.size() < length) {
    std::string pick = remaining.front();
    for (const auto& id : remaining)
      if (graph.cost(current, id) < graph.cost(current, pick)) pick = id;
    order.push_back(pick);
    std::erase(remaining, pick);
    current = pick;
  }
  return {order, "forward", k, detail::provenance(graph)};
}

/// The k highest-Q teachers in ascending Q order.
inline Curriculum top_k_performance(const PerformanceTable& q, std::size_t k) {
  detail::require_k(k);
  if (k > q.size()) {
    throw ArgumentError("top-k: k = " + std::to_string(k) + " exceeds pool size " + std::to_string(q.size()));
  }
  std::vector<std::string> ids;
  for (const auto& [id, _] : q) ids.push_back(id);
  std::stable_sort(ids.begin(), ids.end(), [&](const auto& a, const auto& b) { return q.at(a) > q.at(b); });
  ids.resize(k);
  std::reverse(ids.begin(), ids.end());
  return {ids, "topk", k, "performance"};
}

inline Curriculum top_k_performance(const CostGraph& graph, const PerformanceTable& q, std::size_t k) {
  detail::sorted_pool(graph, q);
  PerformanceTable pool;
  for (const auto& id : graph.teachers()) pool[id] = q.at(id);
  Curriculum c = top_k_performance(pool, k);
  c.provenance = detail::provenance(graph);
  return c;
}

inline double path_cost(const CostGraph& graph, const std::vector<std::string>& order, PathMode mode) {
  double total = 0.0;
  std::string prev = graph.student();
  for (const auto& id : order) {
    const double c = graph.cost(prev, id);
    total = mode == PathMode::kSum ? total + c : std::max(total, c);
    prev = id;
  }
  return total;
}

/// Cheapest simple path student -> ... -> argmax-Q teacher through exactly k
/// distinct teachers, cost = sum or max of edges. Dynamic programming over
/// (visited set, current node); the lexicographically smallest optimal
/// sequence wins ties.
inline Curriculum shortest_path(const CostGraph& graph, const PerformanceTable& q, std::size_t k, PathMode mode) {
  detail::require_k(k);
  const std::vector<std::string> pool = detail::sorted_pool(graph, q);
  const std::size_t n = pool.size();
  if (k > n) throw ArgumentError("shortest path: k = " + std::to_string(k) + " exceeds pool size " + std::to_string(n));
  if (n > 20) throw ArgumentError("shortest path: pool of " + std::to_string(n) + " is too large");
  const std::string target_id = detail::best_teacher(pool, q);
  const std::size_t target = static_cast<std::size_t>(std::find(pool.begin(), pool.end(), target_id) - pool.begin());

  std::vector<std::vector<double>> edge(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) edge[i][j] = graph.cost(pool[i], pool[j]);

  const auto combine = [mode](double a, double b) { return mode == PathMode::kSum ? a + b : std::max(a, b); };
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t full = std::size_t{1} << n;
  // best[mask][v]: cheapest completion from v (already visited, mask includes v) to target
  // using exactly k - popcount(mask) more teachers.
  std::vector<std::vector<double>> best(full, std::vector<double>(n, kInf));
  std::vector<std::size_t> by_count(full);
  for (std::size_t mask = 0; mask < full; ++mask) by_count[mask] = static_cast<std::size_t>(std::popcount(mask));
  std::vector<std::size_t> masks(full);
  std::iota(masks.begin(), masks.end(), std::size_t{0});
  std::stable_sort(masks.begin(), masks.end(), [&](auto a, auto b) { return by_count[a] > by_count[b]; });
  for (std::size_t mask : masks) {
    if (by_count[mask] == 0 || by_count[mask] > k) continue;
    for (std::size_t v = 0; v < n; ++v) {
      if (!(mask >> v & 1)) continue;
      if (by_count[mask] == k) {
        best[mask][v] = v == target ? 0.0 : kInf;
        continue;
      }
      if (v == target) continue;  // target only as last node
      double value = kInf;
      for (std::size_t u = 0; u < n; ++u) {
        if (mask >> u & 1) continue;
        const double rest = best[mask | (std::size_t{1} << u)][u];
        if (rest < kInf) value = std::min(value, combine(edge[v][u], rest));
      }
      best[mask][v] = value;
    }
  }

  // Forward reconstruction, visiting candidates in id order.
  const std::string& student = graph.student();
  double optimum = kInf;
  for (std::size_t u = 0; u < n; ++u) {
    const double rest = best[std::size_t{1} << u][u];
    if (rest < kInf) optimum = std::min(optimum, combine(graph.cost(student, pool[u]), rest));
  }
  if (!(optimum < kInf)) throw ArgumentError("shortest path: no path of length " + std::to_string(k));

  std::vector<std::string> order;
  std::size_t mask = 0;
  std::size_t current = n;  // n stands for the student
  double remaining = optimum;
  while (order.size() < k) {
    bool advanced = false;
    for (std::size_t u = 0; u < n && !advanced; ++u) {
      if (mask >> u & 1) continue;
      const std::size_t next_mask = mask | (std::size_t{1} << u);
      const double rest = best[next_mask][u];
      if (!(rest < kInf)) continue;
      const double step = current == n ? graph.cost(student, pool[u]) : edge[current][u];
      if (combine(step, rest) == remaining) {
        order.push_back(pool[u]);
        mask = next_mask;
        current = u;
        remaining = rest;
        advanced = true;
      }
    }
    if (!advanced) throw NumericError("shortest path: reconstruction failed");
  }
  return {order, mode == PathMode::kSum ? "sp-sum" : "sp-max", k, detail::provenance(graph)};
}

inline Curriculum plan(const CostGraph& graph, const PerformanceTable& q, PlanAlgorithm algo, std::size_t k) {
  switch (algo) {
    case PlanAlgorithm::kBgs: return bgs(graph, q, k);
    case PlanAlgorithm::kForward: return forward_construction(graph, q, k);
    case PlanAlgorithm::kShortestPathSum: return shortest_path(graph, q, k, PathMode::kSum);
    case PlanAlgorithm::kShortestPathMax: return shortest_path(graph, q, k, PathMode::kMax);
    case PlanAlgorithm::kTopK: return top_k_performance(graph, q, k);
  }
  throw ArgumentError("planner: unknown algorithm");
}

/// Number of repetition-free sequences of length 1..k over n items.
inline std::size_t count_orders(std::size_t n, std::size_t k) {
  std::size_t total = 0, perms = 1;
  for (std::size_t len = 1; len <= std::min(k, n); ++len) {
    perms *= n - len + 1;
    total += perms;
  }
  return total;
}

/// Every repetition-free sequence of length 1..k, grouped by length, each
/// group in lexicographic order of ids.
inline std::vector<Curriculum> enumerate_orders(std::vector<std::string> pool, std::size_t k) {
  detail::require_k(k);
  if (k > pool.size()) {
    throw ArgumentError("enumerate_orders: k = " + std::to_string(k) + " exceeds pool size " + std::to_string(pool.size()));
  }
  std::sort(pool.begin(), pool.end());
  std::vector<Curriculum> out;
  std::vector<std::string> current;
  std::vector<bool> used(pool.size(), false);
  std::function<void(std::size_t)> extend = [&](std::size_t length) {
    if (current.size() == length) {
      out.push_back({current, "enumerate", k, "pool"});
      return;
    }
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (used[i]) continue;
      used[i] = true;
      current.push_back(pool[i]);
      extend(length);
      current.pop_back();
      used[i] = false;
    }
  };
  for (std::size_t length = 1; length <= k; ++length) extend(length);
  return out;
}

/// Structured plan export with stable key order.
inline nlohmann::ordered_json plan_to_json(const CostGraph& graph, const Curriculum& curriculum) {
  nlohmann::ordered_json edges = nlohmann::ordered_json::array();
  std::string prev = graph.student();
  for (const auto& id : curriculum.order) {
    edges.push_back({{"from", prev}, {"to", id}, {"cost", graph.cost(prev, id)}});
    prev = id;
  }
  nlohmann::ordered_json j;
  j["student"] = graph.student();
  j["algorithm"] = curriculum.algorithm;
  j["k"] = curriculum.k;
  j["order"] = curriculum.order;
  j["final_teacher"] = curriculum.order.empty() ? std::string() : curriculum.order.back();
  j["edge_costs_used"] = std::move(edges);
  return j;
}

inline PerformanceTable performance_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  PerformanceTable q;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r" || line.front() == '#') continue;
    const auto cells = detail::split_csv_line(line);
    if (header) {
      header = false;
      if (cells.size() == 2 && cells[0] == "teacher_id") continue;
    }
    if (cells.size() != 2) throw ConfigError("performance table: expected 'teacher_id,quality' rows");
    if (!q.emplace(cells[0], detail::parse_double(cells[1], "performance of " + cells[0])).second) {
      throw ConfigError("performance table: duplicate teacher '" + cells[0] + "'");
    }
  }
  if (q.empty()) throw ConfigError("performance table: no rows");
  return q;
}

inline std::string performance_to_csv(const PerformanceTable& q) {
  std::string out = "teacher_id,quality\n";
  for (const auto& [id, value] : q) out += id + "," + format_cost(value) + "\n";
  return out;
}

}  // namespace mtpd
