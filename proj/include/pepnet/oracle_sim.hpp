#ifndef PEPNET_ORACLE_SIM_HPP
#define PEPNET_ORACLE_SIM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "pepnet/algorithm.hpp"
#include "pepnet/function_classes.hpp"
#include "pepnet/matrix_classes.hpp"
#include "pepnet/metrics.hpp"
#include "pepnet/rng.hpp"

namespace pepnet {

// Concrete decentralized problem: one convex quadratic per agent plus an
// explicit gossip matrix. Serves as the ground-truth side of the pipeline:
// running an algorithm on such an instance gives an empirical lower bound on
// any worst-case certificate for a class containing it.
//
// Instances are kept in centered form: the global minimizer of the average
// objective sits exactly at the origin, so squared errors and function gaps
// read off directly.
struct ExplicitInstance {
  int n = 0;
  int d = 0;
  FunctionClass fclass;
  std::vector<Eigen::MatrixXd> H;  // local curvature, spectrum inside [mu, L]
  std::vector<Eigen::VectorXd> c;  // local centers: f_i(x) = 1/2 (x-c_i)'H_i(x-c_i)
  Eigen::MatrixXd W;
  std::vector<Eigen::VectorXd> x0;

  Eigen::VectorXd gradient(int i, const Eigen::VectorXd& x) const { return H[i] * (x - c[i]); }
  double value(int i, const Eigen::VectorXd& x) const {
    return 0.5 * (x - c[i]).dot(H[i] * (x - c[i]));
  }
  double favg(const Eigen::VectorXd& x) const {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += value(i, x);
    return s / n;
  }
  // f(x) - f(minimizer); nonnegative once the instance is centered
  double gap(const Eigen::VectorXd& x) const {
    return favg(x) - favg(Eigen::VectorXd::Zero(d));
  }

  // Minimizer of the average objective, via one exact linear solve. The
  // minimum-norm solution is used when the average curvature is singular.
  Eigen::VectorXd minimizer() const {
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd r = Eigen::VectorXd::Zero(d);
    for (int i = 0; i < n; ++i) {
      S += H[i];
      r += H[i] * c[i];
    }
    return S.completeOrthogonalDecomposition().solve(r);
  }

  // Translate so the minimizer lands on the origin.
  void recenter() {
    const Eigen::VectorXd xs = minimizer();
    for (auto& ci : c) ci -= xs;
    for (auto& xi : x0) xi -= xs;
  }

  ReplayOracles oracles() const {
    return {[this](int i, const Eigen::VectorXd& x) { return gradient(i, x); },
            [this](int i, const Eigen::VectorXd& x) { return value(i, x); }};
  }
};

// Per-agent snapshots of every tagged point produced by a run.
struct SimulationOutcome {
  std::map<std::string, std::vector<Eigen::VectorXd>> points;
  std::string final_tag;
  double e_f = 0.0;                  // gap of the average final iterate
  double e_x = 0.0;                  // mean squared final error
  std::vector<double> agent_errors;  // squared final error per agent
};

namespace sim_detail {

inline void check_spectra(const ExplicitInstance& inst) {
  const double tol = 1e-9 * std::max(1.0, inst.fclass.L);
  for (int i = 0; i < inst.n; ++i) {
    if ((inst.H[i] - inst.H[i].transpose()).cwiseAbs().maxCoeff() > tol)
      throw NotInClass("agent " + std::to_string(i) + ": curvature not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inst.H[i], Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
    if (lo < inst.fclass.mu - tol || hi > inst.fclass.L + tol)
      throw NotInClass("agent " + std::to_string(i) + ": spectrum [" + std::to_string(lo) +
                       ", " + std::to_string(hi) + "] leaves the class");
  }
}

inline int excluded_count(int n, double percent) {
  if (!(percent > 0.0) || !(percent < 100.0))
    throw InvalidPartition("percentile " + std::to_string(percent));
  const int excluded = static_cast<int>(std::floor((100.0 - percent) * n / 100.0 + 1e-9));
  if (excluded < 1 || n - excluded - 1 < 1)
    throw InvalidPartition("percentile classes collapse for n=" + std::to_string(n));
  return excluded;
}

}  // namespace sim_detail

// Run an algorithm on a concrete instance by direct recursion: consensus
// steps multiply by the instance's matrix, gradient steps query the
// quadratics, and combinations are taken coefficient-wise (per class when the
// schedule is uncoordinated). Rejects instances whose curvature leaves the
// declared class.
inline SimulationOutcome simulate_run(const ExplicitInstance& inst, const AlgorithmSpec& spec,
                                      int iterations = -1, std::vector<int> agent_class = {}) {
  if (iterations >= 0 && iterations != spec.iterations)
    throw ShapeError("horizon " + std::to_string(iterations) + " does not match the program");
  if (!spec.free_points.empty())
    throw ShapeError("cannot simulate a program with unconstrained points");
  if (agent_class.empty()) agent_class.assign(inst.n, 0);
  if (static_cast<int>(agent_class.size()) != inst.n) throw ShapeError("class assignment length");
  sim_detail::check_spectra(inst);

  SimulationOutcome out;
  out.points["x0"] = inst.x0;
  auto at = [&](const std::string& tag) -> const std::vector<Eigen::VectorXd>& {
    auto it = out.points.find(tag);
    if (it == out.points.end()) throw DanglingReference("no point tagged " + tag);
    return it->second;
  };

  for (const auto& step : spec.steps) {
    if (const auto* g = std::get_if<GradientEval>(&step)) {
      const auto& x = at(g->at);
      std::vector<Eigen::VectorXd> grads(inst.n);
      for (int i = 0; i < inst.n; ++i) grads[i] = inst.gradient(i, x[i]);
      out.points[g->grad_tag] = std::move(grads);
    } else if (const auto* w = std::get_if<Consensus>(&step)) {
      const auto& x = at(w->input);
      std::vector<Eigen::VectorXd> mixed(inst.n, Eigen::VectorXd::Zero(inst.d));
      for (int i = 0; i < inst.n; ++i)
        for (int j = 0; j < inst.n; ++j) mixed[i] += inst.W(i, j) * x[j];
      out.points[w->output] = std::move(mixed);
    } else {
      const auto& comb = std::get<Combine>(step);
      std::vector<Eigen::VectorXd> res(inst.n, Eigen::VectorXd::Zero(inst.d));
      for (const auto& term : comb.terms) {
        const auto& x = at(term.point);
        for (int i = 0; i < inst.n; ++i) {
          const int u = term.coeff.size() == 1 ? 0 : agent_class[i];
          if (u >= static_cast<int>(term.coeff.size()))
            throw ShapeError("coefficient list shorter than the class count");
          res[i] += term.coeff[u] * x[i];
        }
      }
      out.points[comb.output] = std::move(res);
    }
  }

  out.final_tag = spec.final_point;
  const auto& xf = at(out.final_tag);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(inst.d);
  out.agent_errors.resize(inst.n);
  for (int i = 0; i < inst.n; ++i) {
    mean += xf[i];
    out.agent_errors[i] = xf[i].squaredNorm();
    out.e_x += out.agent_errors[i];
  }
  mean /= inst.n;
  out.e_x /= inst.n;
  out.e_f = inst.gap(mean);
  return out;
}

// Evaluate one performance criterion on a finished run, at the criterion's
// measured point (final point when unspecified). Worst-agent kinds take the
// max over agents; the percentile kind discards the worst floor((100-p)n/100)
// agents and reports the next one.
inline double metric_value(const ExplicitInstance& inst, const SimulationOutcome& out,
                           const Metric& m) {
  const std::string tag = m.at.empty() ? out.final_tag : m.at;
  auto it = out.points.find(tag);
  if (it == out.points.end()) throw DanglingReference("no point tagged " + tag);
  const auto& x = it->second;

  switch (m.kind) {
    case MetricKind::avg_function_gap: {
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(inst.d);
      for (const auto& xi : x) mean += xi;
      return inst.gap(mean / inst.n);
    }
    case MetricKind::avg_iterate_error: {
      double s = 0.0;
      for (const auto& xi : x) s += xi.squaredNorm();
      return s / inst.n;
    }
    case MetricKind::worst_function_gap: {
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& xi : x) best = std::max(best, inst.gap(xi));
      return best;
    }
    case MetricKind::worst_iterate_error: {
      double best = 0.0;
      for (const auto& xi : x) best = std::max(best, xi.squaredNorm());
      return best;
    }
    case MetricKind::percentile_iterate_error: {
      std::vector<double> err(x.size());
      for (size_t i = 0; i < x.size(); ++i) err[i] = x[i].squaredNorm();
      std::sort(err.begin(), err.end());
      return err[err.size() - sim_detail::excluded_count(inst.n, m.percent) - 1];
    }
  }
  throw ShapeError("unknown metric kind");
}

// Closed-form guarantee for strongly convex smooth objectives run with the
// small constant step 1/(4L): a geometric decay whose rate mixes the
// condition number with the gossip gap. Inputs: horizon, smoothness L,
// strong convexity mu, consensus contraction lam = max(|lam_minus|,
// |lam_plus|) in [0, 1), and the two initial radii (mean squared distance R1,
// mean squared gradient dispersion R2).
struct RateBound {
  double e_f = 0.0;
  double e_x = 0.0;
  double tau = 0.0;  // per-step decay factor
};

inline RateBound theoretical_bound(int iterations, double L, double mu, double lam, double R1,
                                   double R2) {
  if (!(lam >= 0.0) || lam >= 1.0)
    throw InvalidSpectralBound("contraction factor " + std::to_string(lam));
  if (!(mu > 0.0) || !(L >= mu))
    throw NotInClass("rate needs 0 < mu <= L, got mu=" + std::to_string(mu) +
                     " L=" + std::to_string(L));
  if (iterations < 0) throw ShapeError("horizon " + std::to_string(iterations));
  RateBound b;
  b.tau = 1.0 / (39.0 * (L / mu + 1.0 / (1.0 - lam)));
  const double decay = std::pow(1.0 - b.tau, iterations);
  b.e_f = decay * (L * R1 + R2 / L) / (1.0 - lam);
  b.e_x = decay * (R1 + R2 / (L * L)) / (1.0 - lam);
  return b;
}

// ---------------------------------------------------------------------------
// Randomized search for bad instances.

// Everything the sampler needs: sizes, the two classes, the starting
// assumptions to normalize against, and the criterion to maximize.
struct SearchSettings {
  int n = 2;
  int d = 2;
  FunctionClass fclass{0.1, 1.0};
  MatrixClass mclass{-0.5, 0.5};
  std::vector<InitialCondition> ics;
  Metric metric;
};

namespace sim_detail {

// Orthonormal basis of the complement of the all-ones direction.
inline Eigen::MatrixXd ones_complement(int n) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, 1);
  a.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  return q.rightCols(n - 1);
}

inline Eigen::MatrixXd random_orthogonal(int d, std::mt19937_64& rng) {
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = gauss(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return Eigen::MatrixXd(qr.householderQ());
}

// Gossip matrix with the fixed averaging eigenvector and a prescribed
// spectrum on its complement.
inline Eigen::MatrixXd gossip_from_spectrum(const Eigen::MatrixXd& V, const Eigen::VectorXd& lam) {
  const int n = static_cast<int>(V.rows());
  return Eigen::MatrixXd::Constant(n, n, 1.0 / n) + V * lam.asDiagonal() * V.transpose();
}

// Free parameters behind one instance; rebuilding from them keeps every
// constraint satisfiable by construction.
struct InstanceSeed {
  std::vector<Eigen::MatrixXd> H;
  std::vector<Eigen::VectorXd> c;
  std::vector<Eigen::VectorXd> x0;
  Eigen::VectorXd lam;    // complement spectrum of the gossip matrix
  Eigen::MatrixXd basis;  // ones-complement basis, fixed per dimension
};

// Enforce the declared starting assumptions exactly where a single global
// scaling suffices; per-agent kinds are satisfied with the worst agent tight.
inline void normalize_ics(ExplicitInstance& inst, const std::vector<InitialCondition>& ics) {
  auto scale_x0 = [&](double s) {
    for (auto& xi : inst.x0) xi *= s;
  };
  for (const auto& ic : ics)
    if (ic.kind == InitialConditionKind::equal_starts) {
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(inst.d);
      for (const auto& xi : inst.x0) mean += xi;
      mean /= inst.n;
      for (auto& xi : inst.x0) xi = mean;
    }
  for (const auto& ic : ics) {
    switch (ic.kind) {
      case InitialConditionKind::avg_spread: {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(inst.d);
        for (const auto& xi : inst.x0) mean += xi;
        mean /= inst.n;
        double dev = 0.0;
        for (const auto& xi : inst.x0) dev += (xi - mean).squaredNorm();
        dev /= inst.n;
        if (dev > 1e-300)
          for (auto& xi : inst.x0) xi = mean + std::sqrt(ic.bound / dev) * (xi - mean);
        break;
      }
      case InitialConditionKind::avg_distance: {
        double s = 0.0;
        for (const auto& xi : inst.x0) s += xi.squaredNorm();
        if (s > 1e-300) scale_x0(std::sqrt(ic.bound * inst.n / s));
        break;
      }
      case InitialConditionKind::per_agent_distance: {
        double worst = 0.0;
        for (const auto& xi : inst.x0) worst = std::max(worst, xi.squaredNorm());
        if (worst > 1e-300) scale_x0(std::sqrt(ic.bound / worst));
        break;
      }
      case InitialConditionKind::avg_gradient: {
        double s = 0.0;
        for (int i = 0; i < inst.n; ++i) s += (inst.H[i] * inst.c[i]).squaredNorm();
        if (s > 1e-300) {
          const double sc = std::sqrt(ic.bound * inst.n / s);
          for (auto& ci : inst.c) ci *= sc;
        }
        break;
      }
      case InitialConditionKind::per_agent_gradient: {
        double worst = 0.0;
        for (int i = 0; i < inst.n; ++i)
          worst = std::max(worst, (inst.H[i] * inst.c[i]).squaredNorm());
        if (worst > 1e-300) {
          const double sc = std::sqrt(ic.bound / worst);
          for (auto& ci : inst.c) ci *= sc;
        }
        break;
      }
      case InitialConditionKind::avg_function_gap: {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(inst.d);
        for (const auto& xi : inst.x0) mean += xi;
        mean /= inst.n;
        // gap(s * mean) = a s^2 + b s with a >= 0; solve for the bound
        double a = 0.0, b = 0.0;
        for (int i = 0; i < inst.n; ++i) {
          a += 0.5 * mean.dot(inst.H[i] * mean);
          b -= inst.c[i].dot(inst.H[i] * mean);
        }
        a /= inst.n;
        b /= inst.n;
        if (a > 1e-300) scale_x0((-b + std::sqrt(b * b + 4.0 * a * ic.bound)) / (2.0 * a));
        break;
      }
      case InitialConditionKind::equal_starts:
        break;
    }
  }
}

inline ExplicitInstance build_from_seed(const InstanceSeed& seed, const SearchSettings& st) {
  ExplicitInstance inst;
  inst.n = st.n;
  inst.d = st.d;
  inst.fclass = st.fclass;
  inst.H = seed.H;
  inst.c = seed.c;
  inst.x0 = seed.x0;
  Eigen::VectorXd lam = seed.lam;
  for (int i = 0; i < lam.size(); ++i)
    lam[i] = std::min(st.mclass.lam_plus, std::max(st.mclass.lam_minus, lam[i]));
  inst.W = gossip_from_spectrum(seed.basis, lam);
  inst.recenter();
  normalize_ics(inst, st.ics);
  return inst;
}

inline InstanceSeed sample_seed(const SearchSettings& st, std::mt19937_64& rng, int variant) {
  InstanceSeed seed;
  seed.basis = ones_complement(st.n);
  seed.lam.resize(st.n - 1);
  const double ext =
      std::abs(st.mclass.lam_plus) >= std::abs(st.mclass.lam_minus) ? st.mclass.lam_plus
                                                                    : st.mclass.lam_minus;
  for (int i = 0; i < st.n - 1; ++i)
    seed.lam[i] = variant == 1 ? ext : uniform(rng, st.mclass.lam_minus, st.mclass.lam_plus);

  const double top = std::isfinite(st.fclass.L) ? st.fclass.L : 1.0;
  seed.H.resize(st.n);
  for (int i = 0; i < st.n; ++i) {
    Eigen::VectorXd ev(st.d);
    for (int j = 0; j < st.d; ++j) {
      if (variant == 1)
        ev[j] = j % 2 == 0 ? top : std::max(st.fclass.mu, 1e-12);
      else if (variant == 2)
        ev[j] = top;
      else
        ev[j] = uniform(rng, st.fclass.mu, top);
    }
    const Eigen::MatrixXd q = random_orthogonal(st.d, rng);
    seed.H[i] = q * ev.asDiagonal() * q.transpose();
    seed.H[i] = 0.5 * (seed.H[i] + seed.H[i].transpose());
  }

  seed.c.resize(st.n);
  seed.x0.resize(st.n);
  for (int i = 0; i < st.n; ++i) {
    seed.c[i].resize(st.d);
    seed.x0[i].resize(st.d);
    for (int j = 0; j < st.d; ++j) {
      seed.c[i][j] = gauss(rng);
      seed.x0[i][j] = gauss(rng);
    }
  }
  if (variant == 1) {
    // start aligned with the extreme gossip direction, one coordinate axis
    for (int i = 0; i < st.n; ++i) {
      seed.x0[i].setZero();
      seed.x0[i][0] = seed.basis(i, 0);
    }
  }
  return seed;
}

}  // namespace sim_detail

// Draw a random member of the declared classes: curvature by conjugating a
// spectrum sampled inside [mu, L], the gossip matrix by eigen-construction
// around the fixed averaging direction, centers recentred so the optimum is
// exact, and starts rescaled onto the initial conditions.
inline ExplicitInstance make_instance(const SearchSettings& st, std::mt19937_64& rng) {
  if (st.n < 2 || st.d < 1) throw ShapeError("instance needs n >= 2, d >= 1");
  st.fclass.validate();
  st.mclass.validate();
  return sim_detail::build_from_seed(sim_detail::sample_seed(st, rng, 0), st);
}

struct SearchResult {
  ExplicitInstance instance;
  double value = -std::numeric_limits<double>::infinity();
};

// Best-of-budget adversarial search. Half the budget goes to independent
// samples (cycling a plain draw, an aligned extreme draw, and a stiff draw),
// the rest to coordinate-wise refinement of the incumbent: perturb one block
// of parameters, rebuild, keep on improvement. Deterministic for a fixed
// seed. With budget 1 this is exactly one sampled instance.
inline SearchResult lower_bound_search(const SearchSettings& st, const AlgorithmSpec& spec,
                                       int budget, std::uint64_t seed = 0) {
  if (budget < 1) throw ShapeError("budget " + std::to_string(budget));
  if (st.n < 2 || st.d < 1) throw ShapeError("instance needs n >= 2, d >= 1");
  st.fclass.validate();
  st.mclass.validate();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);

  auto eval = [&](const sim_detail::InstanceSeed& s) {
    ExplicitInstance inst = sim_detail::build_from_seed(s, st);
    return std::pair<double, ExplicitInstance>(
        metric_value(inst, simulate_run(inst, spec), st.metric), std::move(inst));
  };

  SearchResult best;
  sim_detail::InstanceSeed best_seed;
  const int samples = (budget + 1) / 2;
  for (int s = 0; s < samples; ++s) {
    auto seed_s = sim_detail::sample_seed(st, rng, s % 3);
    auto [v, inst] = eval(seed_s);
    if (v > best.value) {
      best.value = v;
      best.instance = std::move(inst);
      best_seed = std::move(seed_s);
    }
  }

  double step = 0.5;
  for (int it = 0; it < budget - samples; ++it) {
    sim_detail::InstanceSeed trial = best_seed;
    switch (it % 3) {
      case 0:
        for (auto& xi : trial.x0)
          for (int j = 0; j < st.d; ++j) xi[j] += step * gauss(rng);
        break;
      case 1:
        for (auto& ci : trial.c)
          for (int j = 0; j < st.d; ++j) ci[j] += step * gauss(rng);
        break;
      default:
        for (int j = 0; j < trial.lam.size(); ++j) trial.lam[j] += 0.2 * step * gauss(rng);
        break;
    }
    auto [v, inst] = eval(trial);
    if (v > best.value) {
      best.value = v;
      best.instance = std::move(inst);
      best_seed = std::move(trial);
      step = std::min(2.0, step * 1.3);
    } else {
      step = std::max(1e-4, step * 0.85);
    }
  }
  return best;
}

}  // namespace pepnet

#endif
