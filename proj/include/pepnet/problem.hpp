#ifndef PEPNET_PROBLEM_HPP
#define PEPNET_PROBLEM_HPP

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pepnet/algorithm.hpp"
#include "pepnet/function_classes.hpp"
#include "pepnet/metrics.hpp"

namespace pepnet {

// Symmetric matrix of scalar expressions, required to be negative
// semidefinite as a whole.
struct LmiConstraint {
  std::vector<std::vector<ScalarExpr>> entries;
  std::string label;
};

// compact: class-symmetric variables; class sizes enter as coefficients only.
// limit:   class fractions instead of sizes (agent count sent to infinity).
// agent:   one class per agent, keeping the collective Gram whole.
enum class PepMode { compact, limit, agent };

// Worst-case performance estimation problem over one algorithm trace:
// maximize `objective` over every instance satisfying the scalar rows and the
// matrix inequalities. All expressions live on the trace registry.
struct PepProblem {
  PepMode mode = PepMode::compact;
  AlgorithmTrace trace;
  EquivalencePartition partition = EquivalencePartition::all_equivalent(2);
  std::vector<FunctionClass> fclasses;  // one entry per class
  MatrixClass mclass;
  // When set, consensus steps use exactly this averaging matrix instead of
  // ranging over the whole spectral class (needs one class per agent).
  std::optional<Eigen::MatrixXd> known_matrix;
  ScalarExpr objective;
  std::vector<Constraint> constraints;
  std::vector<LmiConstraint> lmis;
};

namespace problem_detail {

inline std::vector<FunctionClass> broadcast_classes(std::vector<FunctionClass> fs, int U) {
  if (fs.empty()) throw InvalidClass("no function class given");
  if (fs.size() == 1 && U > 1) {
    FunctionClass base = fs.front();
    fs.assign(static_cast<std::size_t>(U), base);
  }
  if (static_cast<int>(fs.size()) != U)
    throw ShapeError("function class list length " + std::to_string(fs.size()) + " for " +
                     std::to_string(U) + " classes");
  for (const auto& f : fs) f.validate();
  return fs;
}

inline bool has_definition(const std::vector<Constraint>& rows, const std::string& tag) {
  const std::string prefix = tag + " = ";
  for (const auto& c : rows)
    if (c.label.rfind(prefix, 0) == 0) return true;
  return false;
}

inline void validate_known_matrix(const Eigen::MatrixXd& W, int n, const MatrixClass& cls) {
  if (W.rows() != n || W.cols() != n)
    throw ShapeError("averaging matrix is " + std::to_string(W.rows()) + "x" +
                     std::to_string(W.cols()) + " for " + std::to_string(n) + " agents");
  const double scale = std::max(1.0, W.cwiseAbs().maxCoeff());
  if ((W - W.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw NotInMcl(cls.symbol + ": matrix is not symmetric");
  Eigen::VectorXd rs = W.rowwise().sum();
  if ((rs - Eigen::VectorXd::Ones(n)).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw NotInMcl(cls.symbol + ": rows do not sum to one");
  Eigen::MatrixXd V = consensus_complement_basis(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(V.transpose() * W * V,
                                                    Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo < cls.lam_minus - 1e-9 || hi > cls.lam_plus + 1e-9)
    throw NotInMcl(cls.symbol + ": complement spectrum [" + std::to_string(lo) + ", " +
                   std::to_string(hi) + "] outside the class bounds");
}

// ||y_i - sum_j W_ij x_j||^2 == 0, one row per consensus pair and agent.
inline std::vector<Constraint> known_matrix_rows(const ConsensusSet& set, const std::string& symbol,
                                                 const Eigen::MatrixXd& W) {
  const int n = static_cast<int>(W.rows());
  std::vector<Constraint> out;
  int k = 0;
  for (const auto& [xs, ys] : set.pairs) {
    for (int i = 0; i < n; ++i) {
      ScalarExpr e = scalar_product(variant_at(ys, i), variant_at(ys, i), Pairing::same_agent,
                                    1.0, i);
      for (int j = 0; j < n; ++j)
        e += scalar_product(variant_at(ys, i), variant_at(xs, j), Pairing::class_pair,
                            -2.0 * W(i, j), i, j);
      for (int j = 0; j < n; ++j)
        for (int l = 0; l < n; ++l)
          e += scalar_product(variant_at(xs, j), variant_at(xs, l), Pairing::class_pair,
                              W(i, j) * W(i, l), j, l);
      out.push_back({std::move(e), Sense::eq, 0.0,
                     symbol + " fixed matrix " + std::to_string(k) + " agent " +
                         std::to_string(i)});
    }
    ++k;
  }
  return out;
}

}  // namespace problem_detail

// Appends everything the instance set itself imposes: definitions of shared
// points the metric did not emit, the interpolation rows of every class, the
// consensus coupling (relaxed or with a fixed matrix), and stationarity of
// the optimum. Metric and initial-condition rows are expected to sit in
// `constraints` already so shared-point definitions are not duplicated.
inline void append_structure(PepProblem& prob) {
  prob.mclass.validate();
  const int U = prob.partition.num_classes();
  if (static_cast<int>(prob.fclasses.size()) != U)
    throw ShapeError("function class list length " + std::to_string(prob.fclasses.size()) +
                     " for " + std::to_string(U) + " classes");

  for (const auto& cp : prob.trace.common_points)
    if (!problem_detail::has_definition(prob.constraints, cp.point_tag))
      for (auto& c : common_point_constraints(cp, prob.partition, prob.trace))
        prob.constraints.push_back(std::move(c));

  for (int u = 0; u < U; ++u) {
    auto ts = prob.trace.gradient_triplets(u);
    auto rows = interpolation_constraints(prob.fclasses[u], ts);
    std::size_t r = 0;
    for (std::size_t k = 0; k < ts.size(); ++k)
      for (std::size_t l = 0; l < ts.size(); ++l) {
        if (k == l) continue;
        prob.constraints.push_back({std::move(rows.at(r++)), Sense::leq, 0.0,
                                    "interp class " + std::to_string(u) + " " + ts[k].f + ":" +
                                        ts[l].f});
      }
  }

  if (prob.known_matrix) {
    for (int u = 0; u < U; ++u)
      if (!prob.partition.is_finite() || prob.partition.size(u) != 1)
        throw InvalidPartition("a fixed averaging matrix needs one class per agent");
    problem_detail::validate_known_matrix(*prob.known_matrix, U, prob.mclass);
  }
  for (const auto& [symbol, base] : prob.trace.consensus_sets) {
    ConsensusSet set = base;
    set.mclass = prob.mclass;
    set.mclass.symbol = symbol;
    if (prob.known_matrix) {
      for (auto& c : problem_detail::known_matrix_rows(set, symbol, *prob.known_matrix))
        prob.constraints.push_back(std::move(c));
    } else {
      ConsensusConstraints cc = consensus_constraints(set);
      prob.constraints.push_back(
          {std::move(cc.average_preservation), Sense::eq, 0.0, symbol + " average preservation"});
      int t = 0;
      for (auto& e : cc.symmetry)
        prob.constraints.push_back(
            {std::move(e), Sense::eq, 0.0, symbol + " symmetry " + std::to_string(t++)});
      prob.lmis.push_back({std::move(cc.lmi), symbol + " spectral box"});
    }
  }

  prob.constraints.push_back(optimality_constraint(prob.trace));
  // Function values only ever enter through differences, so the value at the
  // optimum is pinned to remove the per-class constant shift.
  for (int u = 0; u < U; ++u)
    prob.constraints.push_back({value_of(prob.trace.registry, "fstar", u), Sense::eq, 0.0,
                                "fstar normalization class " + std::to_string(u)});
}

// Trace-level assembly: performance metric as the objective, initial
// conditions, then the structural rows.
inline PepProblem build_pep(PepMode mode, AlgorithmTrace trace,
                            const EquivalencePartition& partition,
                            std::vector<FunctionClass> fclasses, const MatrixClass& mclass,
                            const Metric& metric, const std::vector<InitialCondition>& conditions,
                            std::optional<Eigen::MatrixXd> known_matrix = {}) {
  PepProblem prob;
  prob.mode = mode;
  prob.partition = partition;
  prob.fclasses = problem_detail::broadcast_classes(std::move(fclasses), partition.num_classes());
  prob.mclass = mclass;
  prob.known_matrix = std::move(known_matrix);

  CompiledMetric cm = compile_metric(metric, partition, trace);
  prob.objective = std::move(cm.objective);
  prob.constraints = std::move(cm.constraints);
  for (auto& c : compile_initial_conditions(conditions, partition, trace))
    prob.constraints.push_back(std::move(c));

  prob.trace = std::move(trace);
  append_structure(prob);
  return prob;
}

// Assembly without a metric, for problems whose objective is written by hand
// (set `objective` and any extra rows afterwards; the structural rows are
// already in place).
inline PepProblem structural_pep(PepMode mode, AlgorithmTrace trace,
                                 const EquivalencePartition& partition,
                                 std::vector<FunctionClass> fclasses, const MatrixClass& mclass,
                                 std::optional<Eigen::MatrixXd> known_matrix = {}) {
  PepProblem prob;
  prob.mode = mode;
  prob.partition = partition;
  prob.fclasses = problem_detail::broadcast_classes(std::move(fclasses), partition.num_classes());
  prob.mclass = mclass;
  prob.known_matrix = std::move(known_matrix);
  prob.trace = std::move(trace);
  append_structure(prob);
  return prob;
}

// Shared points required by the metric and the initial conditions, merged
// without duplicates.
inline std::vector<CommonPointNeed> trace_needs(const Metric& metric, const AlgorithmSpec& spec,
                                                const std::vector<InitialCondition>& conditions) {
  std::vector<CommonPointNeed> needs = metric_trace_needs(metric, spec);
  for (const auto& n : initial_condition_trace_needs(conditions)) {
    bool seen = false;
    for (const auto& e : needs)
      seen = seen || (e.kind == n.kind && e.of == n.of && e.anchor_class == n.anchor_class);
    if (!seen) needs.push_back(n);
  }
  return needs;
}

inline PepProblem assemble_compact_pep(const AlgorithmTrace& trace,
                                       const EquivalencePartition& partition,
                                       const std::vector<FunctionClass>& fclasses,
                                       const MatrixClass& mclass, const Metric& metric,
                                       const std::vector<InitialCondition>& conditions) {
  if (!partition.is_finite())
    throw InvalidPartition("class-symmetric assembly needs explicit class sizes");
  return build_pep(PepMode::compact, trace, partition, fclasses, mclass, metric, conditions);
}

inline PepProblem assemble_compact_pep(const AlgorithmSpec& spec,
                                       const EquivalencePartition& partition,
                                       const std::vector<FunctionClass>& fclasses,
                                       const MatrixClass& mclass, const Metric& metric,
                                       const std::vector<InitialCondition>& conditions) {
  if (!partition.is_finite())
    throw InvalidPartition("class-symmetric assembly needs explicit class sizes");
  return build_pep(PepMode::compact, unroll(spec, trace_needs(metric, spec, conditions)),
                   partition, fclasses, mclass, metric, conditions);
}

inline PepProblem assemble_limit_pep(const AlgorithmTrace& trace,
                                     const EquivalencePartition& partition,
                                     const std::vector<FunctionClass>& fclasses,
                                     const MatrixClass& mclass, const Metric& metric,
                                     const std::vector<InitialCondition>& conditions) {
  if (partition.is_finite())
    throw InvalidPartition("limit assembly needs asymptotic class fractions");
  return build_pep(PepMode::limit, trace, partition, fclasses, mclass, metric, conditions);
}

inline PepProblem assemble_limit_pep(const AlgorithmSpec& spec,
                                     const EquivalencePartition& partition,
                                     const std::vector<FunctionClass>& fclasses,
                                     const MatrixClass& mclass, const Metric& metric,
                                     const std::vector<InitialCondition>& conditions) {
  if (partition.is_finite())
    throw InvalidPartition("limit assembly needs asymptotic class fractions");
  return build_pep(PepMode::limit, unroll(spec, trace_needs(metric, spec, conditions)), partition,
                   fclasses, mclass, metric, conditions);
}

// One class per agent: the honest agent-dependent problem whose size grows
// with the agent count. `fclasses` holds one entry per agent or a single
// shared entry.
inline PepProblem assemble_agent_pep(const AlgorithmTrace& trace, int n_agents,
                                     const std::vector<FunctionClass>& fclasses,
                                     const MatrixClass& mclass, const Metric& metric,
                                     const std::vector<InitialCondition>& conditions,
                                     std::optional<Eigen::MatrixXd> known_matrix = {}) {
  if (n_agents < 2) throw InvalidPartition("agent-level problems need at least two agents");
  EquivalencePartition part =
      EquivalencePartition::finite(std::vector<long long>(static_cast<std::size_t>(n_agents), 1));
  return build_pep(PepMode::agent, trace, part, fclasses, mclass, metric, conditions,
                   std::move(known_matrix));
}

inline PepProblem assemble_agent_pep(const AlgorithmSpec& spec, int n_agents,
                                     const std::vector<FunctionClass>& fclasses,
                                     const MatrixClass& mclass, const Metric& metric,
                                     const std::vector<InitialCondition>& conditions,
                                     std::optional<Eigen::MatrixXd> known_matrix = {}) {
  return assemble_agent_pep(unroll(spec, trace_needs(metric, spec, conditions)), n_agents,
                            fclasses, mclass, metric, conditions, std::move(known_matrix));
}

}  // namespace pepnet

#endif
