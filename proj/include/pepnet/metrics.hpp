#ifndef PEPNET_METRICS_HPP
#define PEPNET_METRICS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "pepnet/algorithm.hpp"
#include "pepnet/partition.hpp"

namespace pepnet {

enum class Sense { eq, leq, geq };

struct Constraint {
  ScalarExpr expr;
  Sense sense = Sense::eq;
  double rhs = 0.0;
  std::string label;
};

// Performance criteria. The averaged kinds aggregate uniformly over the
// agents; the worst-agent kinds read a designated singleton class (index 0);
// the percentile kind reads a pivot singleton (index 1) dominated by an
// excluded class (index 0).
enum class MetricKind {
  avg_function_gap,    // f(avg iterate) - f(optimum), f the global average
  avg_iterate_error,   // mean squared distance of the iterates to the optimum
  worst_function_gap,  // f at the pinned worst agent's iterate - f(optimum)
  worst_iterate_error,
  percentile_iterate_error,
};

struct Metric {
  MetricKind kind = MetricKind::avg_iterate_error;
  std::string at;         // measured point; empty means the trace's final point
  double percent = 80.0;  // percentile kind only
};

inline bool metric_scale_invariant(MetricKind kind) {
  return kind == MetricKind::avg_function_gap || kind == MetricKind::avg_iterate_error;
}

struct CompiledMetric {
  ScalarExpr objective;  // maximized
  std::vector<Constraint> constraints;
  bool scale_invariant = false;
};

// Starting assumptions. Distance kinds default to the initial iterate,
// gradient kinds to the gradient at the optimum.
enum class InitialConditionKind {
  avg_distance,        //  mean ||x_i - x*||^2        <= bound
  per_agent_distance,  //  ||x_i - x*||^2 per agent   <= bound
  avg_gradient,        //  mean ||g_i||^2             <= bound
  per_agent_gradient,  //  ||g_i||^2 per agent        <= bound
  avg_spread,          //  mean ||x_i - mean(x)||^2   <= bound
  equal_starts,        //  x_i all equal
  avg_function_gap,    //  mean f_i(mean(x)) - f_i(x*) <= bound
};

struct InitialCondition {
  InitialConditionKind kind = InitialConditionKind::avg_distance;
  double bound = 1.0;
  std::string tag;  // point (or gradient column) the condition reads
};

namespace metrics_detail {

inline bool singleton_class(const EquivalencePartition& p, int u) {
  return p.is_finite() ? p.size(u) == 1 : (p.pinned(u) && p.pinned_size(u) == 1);
}

inline ScalarExpr same_agent_norm(const AlgorithmTrace& trace, const std::string& tag, int u) {
  const VectorExpr& x = variant_at(trace.point(tag), u);
  return scalar_product(x, x, Pairing::same_agent, 1.0, u);
}

inline const CommonPoint& find_common(const AlgorithmTrace& trace, CommonPointKind kind,
                                      const std::string& of) {
  for (const auto& cp : trace.common_points)
    if (cp.kind == kind && cp.of == of) return cp;
  throw DanglingReference("no shared point registered for " + of);
}

}  // namespace metrics_detail

// System-level stationarity at the optimum: the agent-averaged gradient at
// the origin vanishes. The point itself needs no constraint since its
// coefficient vector is zero.
inline Constraint optimality_constraint(const AlgorithmTrace& trace) {
  VectorExpr g = VectorExpr::unit(trace.registry, "gstar");
  return {scalar_product(g, g, Pairing::cross_agent), Sense::eq, 0.0, "optimality"};
}

// Defining constraints of one shared point: either it equals the agent
// average of its anchor, or it copies the anchor iterate of a designated
// singleton class into every agent, one row per class.
inline std::vector<Constraint> common_point_constraints(const CommonPoint& cp,
                                                        const EquivalencePartition& partition,
                                                        const AlgorithmTrace& trace) {
  VectorExpr xc = VectorExpr::unit(trace.registry, cp.point_tag);
  const VariantVec& anchor = trace.point(cp.of);
  std::vector<Constraint> out;
  if (cp.kind == CommonPointKind::agent_average) {
    VariantVec xcv{xc};
    ScalarExpr e = detail::vprod(xcv, xcv, Pairing::same_agent, 1.0) +
                   detail::vprod(anchor, anchor, Pairing::cross_agent, 1.0) -
                   detail::vprod(anchor, xcv, Pairing::cross_agent, 2.0);
    out.push_back({std::move(e), Sense::eq, 0.0, cp.point_tag + " = mean " + cp.of});
  } else {
    const int a = cp.anchor_class;
    if (a >= partition.num_classes() || !metrics_detail::singleton_class(partition, a))
      throw PartitionMetricMismatch("shared point " + cp.point_tag +
                                    " needs a singleton anchor class");
    const VectorExpr& x = variant_at(anchor, a);
    for (int u = 0; u < partition.num_classes(); ++u) {
      ScalarExpr e;
      if (u == a) {
        VectorExpr diff = xc - x;
        e = scalar_product(diff, diff, Pairing::same_agent, 1.0, a);
      } else {
        e = scalar_product(xc, xc, Pairing::same_agent, 1.0, u) +
            scalar_product(x, x, Pairing::same_agent, 1.0, a) -
            scalar_product(xc, x, Pairing::class_pair, 2.0, u, a);
      }
      out.push_back({std::move(e), Sense::eq, 0.0,
                     cp.point_tag + " = " + cp.of + " of class " + std::to_string(a) +
                         " at class " + std::to_string(u)});
    }
  }
  return out;
}

// Shared points the trace must carry for a metric: the function-gap kinds
// sample every local function at one designated point.
inline std::vector<CommonPointNeed> metric_trace_needs(const Metric& metric,
                                                       const AlgorithmSpec& spec) {
  std::string at = metric.at.empty() ? spec.final_point : metric.at;
  switch (metric.kind) {
    case MetricKind::avg_function_gap:
      return {{CommonPointKind::agent_average, at, 0}};
    case MetricKind::worst_function_gap:
      return {{CommonPointKind::specific_agent, at, 0}};
    default:
      return {};
  }
}

inline std::vector<CommonPointNeed> initial_condition_trace_needs(
    const std::vector<InitialCondition>& conds) {
  std::vector<CommonPointNeed> out;
  for (const auto& c : conds)
    if (c.kind == InitialConditionKind::avg_function_gap)
      out.push_back({CommonPointKind::agent_average, c.tag.empty() ? "x0" : c.tag, 0});
  return out;
}

inline CompiledMetric compile_metric(const Metric& metric, const EquivalencePartition& partition,
                                     const AlgorithmTrace& trace) {
  using metrics_detail::find_common;
  using metrics_detail::same_agent_norm;
  using metrics_detail::singleton_class;
  std::string at = metric.at.empty() ? trace.final_point : metric.at;
  if (at.empty()) throw DanglingReference("metric without a measured point");

  CompiledMetric out;
  out.scale_invariant = metric_scale_invariant(metric.kind);
  switch (metric.kind) {
    case MetricKind::avg_iterate_error: {
      const VariantVec& x = trace.point(at);
      out.objective = detail::vprod(x, x, Pairing::same_agent, 1.0);
      break;
    }
    case MetricKind::avg_function_gap: {
      const CommonPoint& cp = find_common(trace, CommonPointKind::agent_average, at);
      out.objective = value_of(trace.registry, cp.value_tag) - value_of(trace.registry, "fstar");
      for (auto& c : common_point_constraints(cp, partition, trace))
        out.constraints.push_back(std::move(c));
      break;
    }
    case MetricKind::worst_iterate_error: {
      if (partition.num_classes() < 2 || !singleton_class(partition, 0))
        throw PartitionMetricMismatch("worst-agent metric needs a leading singleton class");
      out.objective = same_agent_norm(trace, at, 0);
      break;
    }
    case MetricKind::worst_function_gap: {
      if (partition.num_classes() < 2 || !singleton_class(partition, 0))
        throw PartitionMetricMismatch("worst-agent metric needs a leading singleton class");
      const CommonPoint& cp = find_common(trace, CommonPointKind::specific_agent, at);
      out.objective = value_of(trace.registry, cp.value_tag) - value_of(trace.registry, "fstar");
      for (auto& c : common_point_constraints(cp, partition, trace))
        out.constraints.push_back(std::move(c));
      break;
    }
    case MetricKind::percentile_iterate_error: {
      if (partition.num_classes() < 3 || !singleton_class(partition, 1))
        throw PartitionMetricMismatch(
            "percentile metric needs an excluded class followed by a pivot singleton");
      out.objective = same_agent_norm(trace, at, 1);
      out.constraints.push_back({same_agent_norm(trace, at, 0) - same_agent_norm(trace, at, 1),
                                 Sense::geq, 0.0, "excluded class dominates the pivot"});
      break;
    }
  }
  return out;
}

inline std::vector<Constraint> compile_initial_conditions(
    const std::vector<InitialCondition>& conds, const EquivalencePartition& partition,
    const AlgorithmTrace& trace) {
  using metrics_detail::find_common;
  std::vector<Constraint> out;
  for (const auto& c : conds) {
    switch (c.kind) {
      case InitialConditionKind::avg_distance:
      case InitialConditionKind::avg_gradient: {
        bool dist = c.kind == InitialConditionKind::avg_distance;
        std::string tag = c.tag.empty() ? (dist ? "x0" : "gstar") : c.tag;
        const VariantVec& x = trace.point(tag);
        out.push_back({detail::vprod(x, x, Pairing::same_agent, 1.0), Sense::leq, c.bound,
                       "mean squared " + tag});
        break;
      }
      case InitialConditionKind::per_agent_distance:
      case InitialConditionKind::per_agent_gradient: {
        bool dist = c.kind == InitialConditionKind::per_agent_distance;
        std::string tag = c.tag.empty() ? (dist ? "x0" : "gstar") : c.tag;
        for (int u = 0; u < partition.num_classes(); ++u)
          out.push_back({metrics_detail::same_agent_norm(trace, tag, u), Sense::leq, c.bound,
                         "squared " + tag + " at class " + std::to_string(u)});
        break;
      }
      case InitialConditionKind::avg_spread:
      case InitialConditionKind::equal_starts: {
        std::string tag = c.tag.empty() ? "x0" : c.tag;
        const VariantVec& x = trace.point(tag);
        ScalarExpr e = detail::vcentered(x, x);
        if (c.kind == InitialConditionKind::avg_spread)
          out.push_back({std::move(e), Sense::leq, c.bound, "spread of " + tag});
        else
          out.push_back({std::move(e), Sense::eq, 0.0, "equal " + tag});
        break;
      }
      case InitialConditionKind::avg_function_gap: {
        std::string tag = c.tag.empty() ? "x0" : c.tag;
        const CommonPoint& cp = find_common(trace, CommonPointKind::agent_average, tag);
        ScalarExpr e =
            value_of(trace.registry, cp.value_tag) - value_of(trace.registry, "fstar");
        out.push_back({std::move(e), Sense::leq, c.bound, "mean value gap at mean " + tag});
        for (auto& def : common_point_constraints(cp, partition, trace))
          out.push_back(std::move(def));
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitions matching the per-agent metrics.
inline EquivalencePartition worst_agent_partition(long long n) {
  if (n < 2) throw InvalidPartition("need at least two agents");
  return EquivalencePartition::finite({1, n - 1});
}

// Excluded share, pivot singleton, rest. The excluded count rounds down.
inline EquivalencePartition percentile_partition(long long n, double percent) {
  if (!(percent > 0.0) || !(percent < 100.0))
    throw InvalidPartition("percentile " + std::to_string(percent));
  long long excluded =
      static_cast<long long>(std::floor((100.0 - percent) * static_cast<double>(n) / 100.0 + 1e-9));
  long long rest = n - excluded - 1;
  if (excluded < 1 || rest < 1)
    throw InvalidPartition("percentile classes collapse for n=" + std::to_string(n));
  return EquivalencePartition::finite({excluded, 1, rest});
}

inline EquivalencePartition percentile_limit_partition(double percent) {
  if (!(percent > 0.0) || !(percent < 100.0))
    throw InvalidPartition("percentile " + std::to_string(percent));
  double rho = (100.0 - percent) / 100.0;
  return EquivalencePartition::limit({rho, 0.0, 1.0 - rho}, {1, 1, 1});
}

}  // namespace pepnet

#endif
