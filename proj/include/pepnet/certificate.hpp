#ifndef PEPNET_CERTIFICATE_HPP
#define PEPNET_CERTIFICATE_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pepnet/compact.hpp"

namespace pepnet {

// Explicit worst-case instance extracted from a solved problem: agent i
// realizes the registry columns as the columns of points[i] (dimension x
// columns), with inner products matching the solved collective Gram, and
// carries the function values values[i].
struct WorstCaseCertificate {
  SolveStatus status = SolveStatus::numerical_trouble;
  double value = std::numeric_limits<double>::quiet_NaN();
  int dimension = 0;
  std::vector<Eigen::MatrixXd> points;
  std::vector<Eigen::VectorXd> values;
  std::vector<int> agent_class;
  double gram_residual = 0.0;
  std::optional<Eigen::MatrixXd> fitted_matrix;  // averaging matrix attaining the bound

  ExplicitInstanceData instance() const { return {points, values, agent_class}; }
};

// Factor the expanded collective Gram into per-agent point matrices, keeping
// the eigen-directions above `eig_cutoff` relative to the largest one (solver
// noise lives below that). Requires a finite partition and an optimal solve; a
// clearly indefinite Gram is an error.
inline WorstCaseCertificate recover_certificate(const PepSolution& sol, const PepProblem& prob,
                                                double eig_cutoff = 1e-6) {
  WorstCaseCertificate cert;
  cert.status = sol.status;
  cert.value = sol.value;
  if (sol.status != SolveStatus::optimal) return cert;

  auto [F, G] = expand_solution(sol.blocks, prob.partition);
  const long long n = prob.partition.total();
  const int p = sol.blocks.p, q = sol.blocks.q;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (G + G.transpose()));
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -1e-6 * scale)
    throw NumericalRankError("collective Gram has eigenvalue " + std::to_string(ev.minCoeff()));

  std::vector<int> keep;
  for (int i = 0; i < ev.size(); ++i)
    if (ev[i] > eig_cutoff * scale) keep.push_back(i);
  const int d = std::max<int>(1, static_cast<int>(keep.size()));

  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(d, G.rows());
  for (std::size_t r = 0; r < keep.size(); ++r)
    P.row(static_cast<int>(r)) =
        std::sqrt(ev[keep[r]]) * es.eigenvectors().col(keep[r]).transpose();

  cert.dimension = d;
  cert.gram_residual = (P.transpose() * P - G).norm() / std::max(1.0, G.norm());
  for (long long i = 0; i < n; ++i) {
    cert.points.push_back(P.middleCols(i * p, p));
    cert.values.push_back(F.segment(i * q, q));
    cert.agent_class.push_back(prob.partition.agent_class(i));
  }
  return cert;
}

struct CertificateReport {
  double constraint_violation = 0.0;  // worst scalar-row violation
  double interpolation_margin = std::numeric_limits<double>::infinity();
  double consensus_residual = 0.0;   // worst averaging-matrix fit residual
  double spectral_violation = 0.0;
  double alignment_residual = 0.0;   // worst within-class orthogonal mismatch
  double value_spread = 0.0;         // worst within-class value disagreement
  bool consensus_tight = true;       // every symbol admits an exact matrix
  bool tight = false;
  std::map<std::string, Eigen::MatrixXd> fitted;
  std::vector<std::string> notes;
};

// Replays the certificate against the problem it came from: scalar rows by
// direct evaluation, consensus steps by fitting an admissible averaging
// matrix to the recovered points, and the class symmetry by aligning agents
// of one class with an orthogonal map.
inline CertificateReport verify_certificate(const WorstCaseCertificate& cert,
                                            const PepProblem& prob, double tol = 1e-6) {
  CertificateReport rep;
  if (cert.points.empty()) {
    rep.consensus_tight = false;
    rep.notes.push_back("no points to verify");
    return rep;
  }
  ExplicitInstanceData inst = cert.instance();

  for (const auto& c : prob.constraints) {
    const double val = evaluate(c.expr, inst);
    double viol = 0.0;
    switch (c.sense) {
      case Sense::eq: viol = std::abs(val - c.rhs); break;
      case Sense::leq: viol = std::max(0.0, val - c.rhs); break;
      case Sense::geq: viol = std::max(0.0, c.rhs - val); break;
    }
    if (viol > rep.constraint_violation) {
      rep.constraint_violation = viol;
      if (viol > tol) rep.notes.push_back("violated: " + c.label);
    }
    if (c.label.rfind("interp", 0) == 0)
      rep.interpolation_margin = std::min(rep.interpolation_margin, c.rhs - val);
  }

  const long long n = prob.partition.total();
  const int d = cert.dimension;
  if (prob.known_matrix) {
    rep.fitted.emplace(prob.mclass.symbol, *prob.known_matrix);
  } else {
    for (const auto& [symbol, set] : prob.trace.consensus_sets) {
      std::vector<Eigen::VectorXd> xs, ys;
      for (const auto& [in, out] : set.pairs) {
        Eigen::VectorXd x(n * d), y(n * d);
        for (long long i = 0; i < n; ++i) {
          const int u = prob.partition.agent_class(i);
          x.segment(i * d, d) = cert.points[i] * variant_at(in, u).coeffs();
          y.segment(i * d, d) = cert.points[i] * variant_at(out, u).coeffs();
        }
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
      }
      MatrixClass cls = prob.mclass;
      cls.symbol = symbol;
      RecoveryResult rec = recover_averaging_matrix(xs, ys, static_cast<int>(n), cls);
      rep.consensus_residual = std::max(rep.consensus_residual, rec.residual);
      rep.spectral_violation = std::max(rep.spectral_violation, rec.spectral_violation);
      if (rec.feasible())
        rep.fitted.emplace(symbol, *rec.W);
      else {
        rep.consensus_tight = false;
        rep.notes.push_back(symbol + ": no admissible averaging matrix fits the points");
      }
    }
  }

  for (int u = 0; u < prob.partition.num_classes(); ++u) {
    const auto members = prob.partition.agents_of(u);
    if (members.size() < 2) continue;
    const Eigen::MatrixXd& ref = cert.points[members[0]];
    for (std::size_t m = 1; m < members.size(); ++m) {
      const Eigen::MatrixXd& Pi = cert.points[members[m]];
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(ref * Pi.transpose());
      const double gap = ref.squaredNorm() + Pi.squaredNorm() - 2.0 * svd.singularValues().sum();
      rep.alignment_residual = std::max(rep.alignment_residual, std::sqrt(std::max(0.0, gap)));
      rep.value_spread = std::max(
          rep.value_spread,
          (cert.values[members[m]] - cert.values[members[0]]).cwiseAbs().maxCoeff());
    }
  }

  rep.tight = rep.consensus_tight && rep.constraint_violation <= tol;
  return rep;
}

struct CertifiedSolve {
  PepSolution solution;
  WorstCaseCertificate certificate;
  CertificateReport report;
};

// Solve, extract the attaining instance, and replay it (finite partitions).
inline CertifiedSolve solve_and_certify(const PepProblem& prob,
                                        const SolverOptions& opts = solver_options_from_env()) {
  CertifiedSolve out;
  out.solution = solve_pep(prob, opts);
  out.certificate = recover_certificate(out.solution, prob);
  if (out.certificate.status == SolveStatus::optimal) {
    out.report = verify_certificate(out.certificate, prob);
    if (!out.report.fitted.empty())
      out.certificate.fitted_matrix = out.report.fitted.begin()->second;
  }
  return out;
}

}  // namespace pepnet

#endif
