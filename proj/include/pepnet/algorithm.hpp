#ifndef PEPNET_ALGORITHM_HPP
#define PEPNET_ALGORITHM_HPP

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "pepnet/function_classes.hpp"
#include "pepnet/matrix_classes.hpp"

namespace pepnet {

// The three operations a decentralized first-order method is built from:
// local gradient sampling, an averaging consensus exchange, and coordinated
// linear combinations of local variables.
struct GradientEval {
  std::string at;         // point the gradient is sampled at
  std::string grad_tag;   // fresh column receiving the gradient
  std::string value_tag;  // fresh value entry receiving the function value
};

struct Consensus {
  std::string symbol;  // matrix identity: equal symbols share one matrix
  std::string input;
  std::string output;  // fresh column receiving the averaged variable
};

// One coefficient shared by every equivalence class, or one per class
// (uncoordinated algorithm parameters).
struct CombineTerm {
  std::vector<double> coeff;
  std::string point;
};

// output := sum of coeff * point. Folded into coefficient vectors, so no
// basis column is spent on it.
struct Combine {
  std::string output;
  std::vector<CombineTerm> terms;
};

using AlgorithmStep = std::variant<GradientEval, Consensus, Combine>;

struct AlgorithmSpec {
  std::string name;
  int iterations = 0;
  std::vector<AlgorithmStep> steps;
  // Unconstrained extra points (columns), e.g. for implicit gradient steps.
  std::vector<std::string> free_points;
  std::map<std::string, double> parameters;
  std::string final_point;
};

// Per-iteration step sizes; each entry holds one value shared by every class
// or one value per class.
using StepSchedule = std::vector<std::vector<double>>;

// Extra data the performance criterion needs in the trace: points shared by
// all agents, each sampled by every local function (fresh gradient column and
// value entry). The defining constraints are emitted by the problem builder.
enum class CommonPointKind { agent_average, specific_agent };

struct CommonPointNeed {
  CommonPointKind kind = CommonPointKind::agent_average;
  std::string of;        // point being averaged or copied
  int anchor_class = 0;  // specific_agent: class holding the reference agent
};

struct CommonPoint {
  CommonPointKind kind = CommonPointKind::agent_average;
  std::string of;
  int anchor_class = 0;
  std::string point_tag, grad_tag, value_tag;
};

// One gradient sample: the point it was taken at (per-class variants), and
// the column/value tags holding the outcome.
struct SampledPoint {
  VariantVec x;
  std::string grad_tag, value_tag;
};

inline const VectorExpr& variant_at(const VariantVec& v, int cls) {
  if (v.empty()) throw ShapeError("empty variant list");
  return v.size() == 1 ? v[0] : v.at(static_cast<std::size_t>(cls));
}

// Fully resolved execution of an AlgorithmSpec over the basis registry:
// every point is a combination of registered columns, consensus steps are
// grouped by matrix symbol, and gradient samples carry the interpolation
// data. The optimum sample (x* at the origin, g*, f*) is always last.
struct AlgorithmTrace {
  RegistryPtr registry;
  std::vector<AlgorithmStep> steps;
  std::map<std::string, ConsensusSet> consensus_sets;  // spectral bounds set by the assembler
  std::map<std::string, VariantVec> defined_points;
  std::vector<SampledPoint> samples;
  std::vector<CommonPoint> common_points;
  int iterations = 0;
  std::string final_point;

  int num_columns() const { return registry->num_columns(); }
  int num_values() const { return registry->num_values(); }

  const VariantVec& point(const std::string& tag) const {
    auto it = defined_points.find(tag);
    if (it == defined_points.end()) throw DanglingReference("point " + tag);
    return it->second;
  }
  bool has_point(const std::string& tag) const { return defined_points.count(tag) > 0; }

  // Interpolation set of one equivalence class (bound_class >= 0), or of the
  // whole agent set for unpartitioned problems (-1, uniform traces only).
  std::vector<Triplet> gradient_triplets(int bound_class = -1) const {
    std::vector<Triplet> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
      VectorExpr g = VectorExpr::unit(registry, s.grad_tag);
      if (bound_class < 0) {
        if (s.x.size() != 1)
          throw InvalidClass("class-dependent point in an unpartitioned interpolation set");
        out.push_back({s.x[0], g, s.value_tag});
      } else {
        out.push_back({variant_at(s.x, bound_class).bound_to(bound_class),
                       g.bound_to(bound_class), s.value_tag});
      }
    }
    return out;
  }
};

inline AlgorithmTrace unroll(const AlgorithmSpec& spec,
                             const std::vector<CommonPointNeed>& needs = {}) {
  auto reg = std::make_shared<BasisRegistry>();
  reg->add_column("x0");
  for (const auto& tag : spec.free_points) reg->add_column(tag);
  for (const auto& step : spec.steps) {
    if (const auto* g = std::get_if<GradientEval>(&step)) {
      reg->add_column(g->grad_tag);
      reg->add_value(g->value_tag);
    } else if (const auto* c = std::get_if<Consensus>(&step)) {
      reg->add_column(c->output);
    }
  }
  std::vector<CommonPoint> commons;
  for (const auto& need : needs) {
    std::string suffix = commons.empty() ? "" : "_" + std::to_string(commons.size());
    CommonPoint cp;
    cp.kind = need.kind;
    cp.of = need.of;
    cp.anchor_class = need.anchor_class;
    cp.point_tag = "xc" + suffix;
    cp.grad_tag = "gc" + suffix;
    cp.value_tag = "fc" + suffix;
    reg->add_column(cp.point_tag);
    reg->add_column(cp.grad_tag);
    reg->add_value(cp.value_tag);
    commons.push_back(std::move(cp));
  }
  reg->add_column("gstar");
  reg->add_value("fstar");

  AlgorithmTrace trace;
  trace.registry = reg;
  trace.steps = spec.steps;
  trace.common_points = commons;
  trace.iterations = spec.iterations;
  trace.final_point = spec.final_point;

  auto define = [&](const std::string& tag, VariantVec combo) {
    if (trace.defined_points.count(tag)) throw DuplicateTag("point " + tag);
    trace.defined_points.emplace(tag, std::move(combo));
  };
  auto resolve = [&](const std::string& tag) -> const VariantVec& {
    auto it = trace.defined_points.find(tag);
    if (it == trace.defined_points.end()) throw DanglingReference("point " + tag);
    return it->second;
  };

  define("x0", {VectorExpr::unit(reg, "x0")});
  define("xstar", {VectorExpr::zero(reg)});
  for (const auto& tag : spec.free_points) define(tag, {VectorExpr::unit(reg, tag)});

  for (const auto& step : spec.steps) {
    if (const auto* g = std::get_if<GradientEval>(&step)) {
      trace.samples.push_back({resolve(g->at), g->grad_tag, g->value_tag});
      define(g->grad_tag, {VectorExpr::unit(reg, g->grad_tag)});
    } else if (const auto* c = std::get_if<Consensus>(&step)) {
      const VariantVec& in = resolve(c->input);
      VariantVec out{VectorExpr::unit(reg, c->output)};
      trace.consensus_sets[c->symbol].pairs.emplace_back(in, out);
      define(c->output, std::move(out));
    } else {
      const auto& cb = std::get<Combine>(step);
      if (cb.terms.empty()) throw ShapeError("combination " + cb.output + " without terms");
      std::size_t width = 1;
      for (const auto& t : cb.terms) {
        if (t.coeff.empty()) throw ShapeError("term without coefficients in " + cb.output);
        width = std::max({width, t.coeff.size(), resolve(t.point).size()});
      }
      VariantVec combo;
      for (std::size_t cls = 0; cls < width; ++cls) {
        VectorExpr e = VectorExpr::zero(reg);
        for (const auto& t : cb.terms) {
          if (t.coeff.size() != 1 && t.coeff.size() != width)
            throw ShapeError("per-class coefficient lists of different lengths in " + cb.output);
          const VariantVec& pt = resolve(t.point);
          if (pt.size() != 1 && pt.size() != width)
            throw ShapeError("per-class variants of different lengths in " + cb.output);
          double a = t.coeff.size() == 1 ? t.coeff[0] : t.coeff[cls];
          e += a * variant_at(pt, static_cast<int>(cls));
        }
        combo.push_back(std::move(e));
      }
      define(cb.output, std::move(combo));
    }
  }

  for (const auto& cp : commons) {
    resolve(cp.of);
    define(cp.point_tag, {VectorExpr::unit(reg, cp.point_tag)});
    trace.samples.push_back({{VectorExpr::unit(reg, cp.point_tag)}, cp.grad_tag, cp.value_tag});
    define(cp.grad_tag, {VectorExpr::unit(reg, cp.grad_tag)});
  }

  define("gstar", {VectorExpr::unit(reg, "gstar")});
  trace.samples.push_back({{VectorExpr::zero(reg)}, "gstar", "fstar"});
  return trace;
}

// ---------------------------------------------------------------------------
// Built-in encodings.

// y^k = W x^k, then x^{k+1} = y^k - alpha^k g(x^k). All iterations share one
// averaging matrix.
inline AlgorithmSpec build_dgd(int iterations, const StepSchedule& alpha) {
  if (iterations < 1) throw ShapeError("iteration count " + std::to_string(iterations));
  if (static_cast<int>(alpha.size()) != iterations)
    throw InvalidStepSize("schedule of length " + std::to_string(alpha.size()) + " for " +
                          std::to_string(iterations) + " iterations");
  for (const auto& entry : alpha) {
    if (entry.empty()) throw InvalidStepSize("empty step-size entry");
    for (double a : entry)
      if (!(a > 0.0)) throw InvalidStepSize(std::to_string(a));
  }

  AlgorithmSpec spec;
  spec.name = "dgd";
  spec.iterations = iterations;
  spec.final_point = "x" + std::to_string(iterations);
  for (int k = 0; k < iterations; ++k) {
    std::string xk = "x" + std::to_string(k);
    std::string yk = "y" + std::to_string(k);
    std::string gk = "g" + std::to_string(k);
    spec.steps.push_back(Consensus{"W", xk, yk});
    spec.steps.push_back(GradientEval{xk, gk, "f" + std::to_string(k)});
    std::vector<double> neg = alpha[k];
    for (double& a : neg) a = -a;
    spec.steps.push_back(Combine{"x" + std::to_string(k + 1), {{{1.0}, yk}, {neg, gk}}});
  }
  if (alpha[0].size() == 1) {
    bool constant = true;
    for (const auto& entry : alpha) constant = constant && entry == alpha[0];
    if (constant) spec.parameters["alpha"] = alpha[0][0];
  }
  return spec;
}

inline AlgorithmSpec build_dgd(int iterations, double alpha) {
  return build_dgd(iterations, StepSchedule(std::max(iterations, 0), {alpha}));
}

// x^1 = W x^0 - alpha g(x^0), then
// x^{k+2} = x^{k+1} + W x^{k+1} - (W x^k + x^k)/2 - alpha (g(x^{k+1}) - g(x^k)),
// the one-new-consensus-per-iteration form with the second matrix folded to
// (W + I)/2. The step size is constant, optionally per class.
inline AlgorithmSpec build_extra(int iterations, const std::vector<double>& alpha) {
  if (iterations < 1) throw ShapeError("iteration count " + std::to_string(iterations));
  if (alpha.empty()) throw InvalidStepSize("empty step-size entry");
  for (double a : alpha)
    if (!(a > 0.0)) throw InvalidStepSize(std::to_string(a));
  std::vector<double> neg = alpha;
  for (double& a : neg) a = -a;

  AlgorithmSpec spec;
  spec.name = "extra";
  spec.iterations = iterations;
  spec.final_point = "x" + std::to_string(iterations);
  spec.steps.push_back(Consensus{"W", "x0", "wx0"});
  spec.steps.push_back(GradientEval{"x0", "g0", "f0"});
  spec.steps.push_back(Combine{"x1", {{{1.0}, "wx0"}, {neg, "g0"}}});
  for (int k = 0; k + 2 <= iterations; ++k) {
    std::string xk = "x" + std::to_string(k);
    std::string xk1 = "x" + std::to_string(k + 1);
    std::string wxk = "wx" + std::to_string(k);
    std::string wxk1 = "wx" + std::to_string(k + 1);
    std::string gk = "g" + std::to_string(k);
    std::string gk1 = "g" + std::to_string(k + 1);
    spec.steps.push_back(Consensus{"W", xk1, wxk1});
    spec.steps.push_back(GradientEval{xk1, gk1, "f" + std::to_string(k + 1)});
    spec.steps.push_back(Combine{"x" + std::to_string(k + 2),
                                 {{{1.0}, xk1},
                                  {{1.0}, wxk1},
                                  {{-0.5}, wxk},
                                  {{-0.5}, xk},
                                  {neg, gk1},
                                  {alpha, gk}}});
  }
  if (alpha.size() == 1) spec.parameters["alpha"] = alpha[0];
  return spec;
}

inline AlgorithmSpec build_extra(int iterations, double alpha) {
  return build_extra(iterations, std::vector<double>{alpha});
}

// ---------------------------------------------------------------------------
// Numeric execution of a trace on an explicit problem translated so that the
// optimum sits at the origin. Produces the per-agent column matrices and
// value vectors in registry layout, directly consumable by evaluate().
struct ReplayOracles {
  std::function<Eigen::VectorXd(int agent, const Eigen::VectorXd&)> gradient;
  std::function<double(int agent, const Eigen::VectorXd&)> value;
};

inline ExplicitInstanceData replay_trace(const AlgorithmTrace& trace,
                                         const ReplayOracles& oracles,
                                         const std::map<std::string, Eigen::MatrixXd>& matrices,
                                         const std::vector<Eigen::VectorXd>& starts,
                                         std::vector<int> agent_class = {}) {
  const int n = static_cast<int>(starts.size());
  if (n == 0) throw ShapeError("replay without agents");
  const auto d = starts[0].size();
  if (agent_class.empty()) agent_class.assign(n, 0);
  if (static_cast<int>(agent_class.size()) != n) throw ShapeError("class assignment length");

  const BasisRegistry& reg = *trace.registry;
  ExplicitInstanceData inst;
  inst.agent_class = agent_class;
  inst.P.assign(n, Eigen::MatrixXd::Zero(d, reg.num_columns()));
  inst.values.assign(n, Eigen::VectorXd::Zero(reg.num_values()));

  std::vector<bool> written(reg.num_columns(), false);
  auto materialize = [&](int i, const std::string& tag) -> Eigen::VectorXd {
    const Eigen::VectorXd& c = variant_at(trace.point(tag), agent_class[i]).coeffs();
    for (int j = 0; j < c.size(); ++j)
      if (c[j] != 0.0 && !written[j])
        throw DanglingReference("point " + tag + " uses column " + reg.column_tags()[j] +
                                " before it is produced");
    return inst.P[i] * c;
  };
  auto emit = [&](int i, const std::string& col, const Eigen::VectorXd& v) {
    inst.P[i].col(reg.column(col)) = v;
    written[reg.column(col)] = true;
  };

  for (int i = 0; i < n; ++i) emit(i, "x0", starts[i]);

  for (const auto& step : trace.steps) {
    if (const auto* g = std::get_if<GradientEval>(&step)) {
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd at = materialize(i, g->at);
        emit(i, g->grad_tag, oracles.gradient(i, at));
        inst.values[i][reg.value(g->value_tag)] = oracles.value(i, at);
      }
    } else if (const auto* c = std::get_if<Consensus>(&step)) {
      auto mit = matrices.find(c->symbol);
      if (mit == matrices.end()) throw DanglingReference("matrix " + c->symbol);
      const Eigen::MatrixXd& W = mit->second;
      if (W.rows() != n || W.cols() != n) throw ShapeError("averaging matrix size");
      Eigen::MatrixXd in(d, n);
      for (int i = 0; i < n; ++i) in.col(i) = materialize(i, c->input);
      Eigen::MatrixXd out = in * W.transpose();
      for (int i = 0; i < n; ++i) emit(i, c->output, out.col(i));
    }
  }

  for (const auto& cp : trace.common_points) {
    Eigen::VectorXd xc;
    if (cp.kind == CommonPointKind::agent_average) {
      xc = Eigen::VectorXd::Zero(d);
      for (int i = 0; i < n; ++i) xc += materialize(i, cp.of);
      xc /= static_cast<double>(n);
    } else {
      int owner = -1;
      for (int i = 0; i < n && owner < 0; ++i)
        if (agent_class[i] == cp.anchor_class) owner = i;
      if (owner < 0) throw InvalidClass("no agent in the anchor class");
      xc = materialize(owner, cp.of);
    }
    for (int i = 0; i < n; ++i) {
      emit(i, cp.point_tag, xc);
      emit(i, cp.grad_tag, oracles.gradient(i, xc));
      inst.values[i][reg.value(cp.value_tag)] = oracles.value(i, xc);
    }
  }

  Eigen::VectorXd origin = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < n; ++i) {
    emit(i, "gstar", oracles.gradient(i, origin));
    inst.values[i][reg.value("fstar")] = oracles.value(i, origin);
  }
  return inst;
}

}  // namespace pepnet

#endif
