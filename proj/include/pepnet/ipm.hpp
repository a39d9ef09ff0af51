#ifndef PEPNET_IPM_HPP
#define PEPNET_IPM_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pepnet/conic.hpp"

namespace pepnet {

enum class SolveStatus { optimal, infeasible, unbounded, numerical_trouble };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::infeasible: return "infeasible";
    case SolveStatus::unbounded: return "unbounded";
    default: return "numerical-trouble";
  }
}

struct SolverOptions {
  double feastol = 1e-8;
  double gaptol = 1e-7;
  int max_iter = 250;
  bool facial_reduction = true;
  bool verbose = false;
  bool self_check = false;
};

// PEPNET_SOLVER_TOL overrides both tolerances; PEPNET_FACIAL_REDUCTION
// toggles the preprocessing step.
inline SolverOptions solver_options_from_env(SolverOptions base = SolverOptions{}) {
  if (const char* t = std::getenv("PEPNET_SOLVER_TOL")) {
    char* end = nullptr;
    double v = std::strtod(t, &end);
    if (end != t && v > 0) {
      base.feastol = v;
      base.gaptol = v;
    }
  }
  if (const char* f = std::getenv("PEPNET_FACIAL_REDUCTION"))
    base.facial_reduction = std::string(f) != "0";
  return base;
}

struct Solution {
  SolveStatus status = SolveStatus::numerical_trouble;
  double value = std::numeric_limits<double>::quiet_NaN();
  double dual_value = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd xf, xl;
  std::vector<Eigen::MatrixXd> X;
  Eigen::VectorXd y, zl;
  std::vector<Eigen::MatrixXd> Z;
  int iterations = 0;
  double pres = 0, dres = 0, relgap = 0;
  double newton_residual = 0;
  std::string message;
};

namespace ipm_detail {

// Nesterov-Todd scaling point of a PD pair: R^{-1} X R^{-T} = R^T Z R = diag(lam).
struct NTBlock {
  Eigen::MatrixXd R, Rinv, Theta;
  Eigen::VectorXd lam;
  bool ok = false;
};

inline NTBlock nt_scaling(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z) {
  NTBlock out;
  Eigen::LLT<Eigen::MatrixXd> lx(X), lz(Z);
  if (lx.info() != Eigen::Success || lz.info() != Eigen::Success) return out;
  Eigen::MatrixXd Lx = lx.matrixL(), Lz = lz.matrixL();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(Lz.transpose() * Lx),
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::VectorXd sv = svd.singularValues();
  if (sv.size() == 0 || sv.minCoeff() <= 0) return out;
  Eigen::VectorXd si = sv.cwiseSqrt().cwiseInverse();
  out.R = Lx * svd.matrixV() * si.asDiagonal();
  out.Rinv = si.asDiagonal() * svd.matrixU().transpose() * Lz.transpose();
  out.Theta = out.R * out.R.transpose();
  out.lam = sv;
  out.ok = true;
  return out;
}

struct ScaledRow {
  std::vector<std::pair<int, double>> free_nz, lin_nz;
  std::vector<std::vector<FactorTerm>> psd;
  double rhs = 0;
};

class Ipm {
 public:
  Ipm(const ConicProgram& prog, const SolverOptions& opts) : P(prog), opt(opts) {
    m = static_cast<int>(P.rows.size());
    nb = P.num_psd();
    nf = P.num_free;
    nl = P.num_lin;
    nu = nl;
    for (int d : P.psd_dims) nu += d;
    if (nu == 0) throw ShapeError("program has no cone variables");

    rows.resize(m);
    for (int i = 0; i < m; ++i) {
      rows[i].free_nz = merge_nz(P.rows[i].free_nz);
      rows[i].lin_nz = merge_nz(P.rows[i].lin_nz);
      rows[i].psd = P.rows[i].psd;
      rows[i].rhs = P.rows[i].rhs;
    }
    cost.free_nz = merge_nz(P.cost.free_nz);
    cost.lin_nz = merge_nz(P.cost.lin_nz);
    cost.psd = P.cost.psd;
    cost.rhs = 0;

    auto frob = [&](const ScaledRow& r) {
      ConicProgram::Row tmp;
      tmp.free_nz = r.free_nz;
      tmp.lin_nz = r.lin_nz;
      tmp.psd = r.psd;
      return std::sqrt(P.frob_norm_sq(tmp));
    };
    row_scale.assign(m, 1.0);
    for (int i = 0; i < m; ++i) {
      double nrm = frob(rows[i]);
      if (nrm > 1e-12) {
        row_scale[i] = 1.0 / nrm;
        scale_row(rows[i], row_scale[i]);
      }
    }
    double bn = 0, cn = frob(cost);
    for (int i = 0; i < m; ++i) bn = std::max(bn, std::abs(rows[i].rhs));
    sb = std::max(1.0, bn);
    sc = std::max(1.0, cn);
    for (int i = 0; i < m; ++i) rows[i].rhs /= sb;
    scale_row(cost, 1.0 / sc);

    // dense factor matrices per block
    F.resize(nb);
    for (int b = 0; b < nb; ++b) {
      const int p = P.psd_dims[b];
      const int k = static_cast<int>(P.factor_pool[b].size());
      F[b] = Eigen::MatrixXd::Zero(p, k);
      for (int j = 0; j < k; ++j)
        for (auto& [i, c] : P.factor_pool[b][j].nz) F[b](i, j) = c;
    }
    // linear-variable usage lists
    lin_usage.assign(nl, {});
    for (int i = 0; i < m; ++i)
      for (auto& [l, c] : rows[i].lin_nz) lin_usage[l].push_back({i, c});
    // free-variable matrix
    Af = Eigen::MatrixXd::Zero(m, nf);
    for (int i = 0; i < m; ++i)
      for (auto& [j, c] : rows[i].free_nz) Af(i, j) = c;
    cf = Eigen::VectorXd::Zero(nf);
    for (auto& [j, c] : cost.free_nz) cf[j] = c;
    bvec = Eigen::VectorXd::Zero(m);
    for (int i = 0; i < m; ++i) bvec[i] = rows[i].rhs;
    Cb.resize(nb);
    for (int b = 0; b < nb; ++b) Cb[b] = dense_block(cost, b);
    cl = Eigen::VectorXd::Zero(nl);
    for (auto& [l, c] : cost.lin_nz) cl[l] = c;
    nu_deg = nl + 1;  // +1 for the homogenizing pair
    for (int d : P.psd_dims) nu_deg += d;
  }

  Solution run() {
    init_point();
    Solution best;
    best.pres = best.dres = best.relgap = std::numeric_limits<double>::infinity();
    double best_score = std::numeric_limits<double>::infinity();
    int slow = 0;
    for (iter = 0; iter < opt.max_iter; ++iter) {
      compute_residuals();
      Solution cur = current_solution();
      double score = std::max({cur.pres, cur.dres, cur.relgap});
      if (score < best_score) {
        best_score = score;
        best = cur;
      }
      if (cur.pres <= opt.feastol && cur.dres <= opt.feastol && cur.relgap <= opt.gaptol) {
        cur.status = SolveStatus::optimal;
        cur.message = "converged";
        return cur;
      }
      if (auto cert = check_certificates()) return *cert;

      if (!compute_scaling()) return trouble(best, "scaling breakdown");
      if (!factor_schur()) return trouble(best, "kkt factorization failed");
      // predictor
      Dir aff;
      make_rhs_affine(aff);
      if (!solve_kkt(aff)) return trouble(best, "kkt solve failed");
      double alpha_aff = max_step(aff);
      double mu_aff = trial_mu(aff, alpha_aff);
      double sigma = std::pow(std::max(0.0, mu_aff / mu), 3.0);
      sigma = std::min(sigma, 0.999999);
      // combined corrector
      Dir dir;
      make_rhs_corrector(dir, aff, sigma);
      if (!solve_kkt(dir)) return trouble(best, "kkt solve failed");
      if (opt.self_check) newton_check = std::max(newton_check, check_newton(dir, sigma));
      double alpha = 0.99 * max_step(dir);
      alpha = std::min(alpha, 1.0);
      if (alpha < 1e-7) {
        if (++slow >= 3) return trouble(best, "step too small");
      } else {
        slow = 0;
      }
      take_step(dir, alpha);
    }
    return trouble(best, "iteration limit");
  }

  double newton_check = 0;

 private:
  struct Dir {
    Eigen::VectorXd y, xf, xl, zl;
    std::vector<Eigen::MatrixXd> X, Z;
    double tau = 0, kappa = 0;
    // rhs pieces
    Eigen::VectorXd r4l;
    std::vector<Eigen::MatrixXd> r4b;
    double r5 = 0;
    Eigen::VectorXd rp;  // -target primal residual
    std::vector<Eigen::MatrixXd> rdb;
    Eigen::VectorXd rdl, rdf;
    double rg = 0;
  };

  static std::vector<std::pair<int, double>> merge_nz(std::vector<std::pair<int, double>> v) {
    std::sort(v.begin(), v.end());
    std::vector<std::pair<int, double>> out;
    for (auto& [i, c] : v) {
      if (!out.empty() && out.back().first == i)
        out.back().second += c;
      else
        out.push_back({i, c});
    }
    std::erase_if(out, [](const auto& p) { return p.second == 0.0; });
    return out;
  }

  static void scale_row(ScaledRow& r, double s) {
    for (auto& [i, c] : r.free_nz) c *= s;
    for (auto& [i, c] : r.lin_nz) c *= s;
    for (auto& blk : r.psd)
      for (auto& t : blk) t.c *= s;
    r.rhs *= s;
  }

  Eigen::MatrixXd dense_block(const ScaledRow& r, int b) const {
    const int n = P.psd_dims[b];
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    for (const auto& t : r.psd[b]) {
      const auto& u = P.factor_pool[b][t.fu].nz;
      const auto& v = P.factor_pool[b][t.fv].nz;
      for (auto& [i, ci] : u)
        for (auto& [j, cj] : v) {
          A(i, j) += 0.5 * t.c * ci * cj;
          A(j, i) += 0.5 * t.c * ci * cj;
        }
    }
    return A;
  }

  double row_dot_dense(const ScaledRow& r, int b, const Eigen::MatrixXd& D) const {
    double s = 0;
    for (const auto& t : r.psd[b]) {
      const auto& u = P.factor_pool[b][t.fu].nz;
      const auto& v = P.factor_pool[b][t.fv].nz;
      double acc = 0;
      for (auto& [i, ci] : u) {
        double rowdot = 0;
        for (auto& [j, cj] : v) rowdot += cj * D(i, j);
        acc += ci * rowdot;
      }
      s += t.c * acc;
    }
    return s;
  }

  void add_outer(Eigen::MatrixXd& D, const ScaledRow& r, int b, double w) const {
    for (const auto& t : r.psd[b]) {
      const auto& u = P.factor_pool[b][t.fu].nz;
      const auto& v = P.factor_pool[b][t.fv].nz;
      double c = 0.5 * w * t.c;
      for (auto& [i, ci] : u)
        for (auto& [j, cj] : v) {
          D(i, j) += c * ci * cj;
          D(j, i) += c * ci * cj;
        }
    }
  }

  double apply_row(const ScaledRow& r, const Eigen::VectorXd& vxf, const Eigen::VectorXd& vxl,
                   const std::vector<Eigen::MatrixXd>& vX) const {
    double s = 0;
    for (auto& [i, c] : r.free_nz) s += c * vxf[i];
    for (auto& [i, c] : r.lin_nz) s += c * vxl[i];
    for (int b = 0; b < nb; ++b) s += row_dot_dense(r, b, vX[b]);
    return s;
  }

  void init_point() {
    X.assign(nb, Eigen::MatrixXd());
    Z.assign(nb, Eigen::MatrixXd());
    for (int b = 0; b < nb; ++b) {
      X[b] = Eigen::MatrixXd::Identity(P.psd_dims[b], P.psd_dims[b]);
      Z[b] = X[b];
    }
    xl = Eigen::VectorXd::Ones(nl);
    zl = Eigen::VectorXd::Ones(nl);
    xf = Eigen::VectorXd::Zero(nf);
    y = Eigen::VectorXd::Zero(m);
    tau = 1;
    kappa = 1;
  }

  void compute_residuals() {
    // rp = A x - b tau ; rd = A^T y + z - c tau ; rg = c^T x - b^T y + kappa
    rp_cur = Eigen::VectorXd(m);
    for (int i = 0; i < m; ++i) rp_cur[i] = apply_row(rows[i], xf, xl, X) - bvec[i] * tau;
    rd_cur_b.assign(nb, Eigen::MatrixXd());
    for (int b = 0; b < nb; ++b) {
      Eigen::MatrixXd D = Z[b] - Cb[b] * tau;
      for (int i = 0; i < m; ++i)
        if (!rows[i].psd[b].empty()) add_outer(D, rows[i], b, y[i]);
      rd_cur_b[b] = D;
    }
    rd_cur_l = zl - cl * tau;
    for (int l = 0; l < nl; ++l)
      for (auto& [i, c] : lin_usage[l]) rd_cur_l[l] += c * y[i];
    rd_cur_f = Af.transpose() * y - cf * tau;
    double cx = cost_dot(xf, xl, X);
    rg_cur = cx - bvec.dot(y) + kappa;
    gap_cur = xl.dot(zl);
    for (int b = 0; b < nb; ++b) gap_cur += X[b].cwiseProduct(Z[b]).sum();
    mu = (gap_cur + tau * kappa) / nu_deg;
    cx_cur = cx;
    by_cur = bvec.dot(y);
  }

  double cost_dot(const Eigen::VectorXd& vxf, const Eigen::VectorXd& vxl,
                  const std::vector<Eigen::MatrixXd>& vX) const {
    double s = cf.dot(vxf) + cl.dot(vxl);
    for (int b = 0; b < nb; ++b) s += row_dot_dense(cost, b, vX[b]);
    return s;
  }

  Solution current_solution() const {
    Solution s;
    double t = tau;
    s.xf = xf * (sb / t);
    s.xl = xl * (sb / t);
    s.X.resize(nb);
    s.Z.resize(nb);
    for (int b = 0; b < nb; ++b) {
      s.X[b] = X[b] * (sb / t);
      s.Z[b] = Z[b] * (sc / t);
    }
    s.zl = zl * (sc / t);
    s.y = Eigen::VectorXd(m);
    for (int i = 0; i < m; ++i) s.y[i] = y[i] * sc * row_scale[i] / t;
    s.value = cost_dot(s.xf / sb, s.xl / sb, [&] {
                std::vector<Eigen::MatrixXd> t2(nb);
                for (int b = 0; b < nb; ++b) t2[b] = s.X[b] / sb;
                return t2;
              }()) *
                  sc * sb +
              P.cost_offset;
    s.dual_value = bvec.dot(y) / t * sc * sb + P.cost_offset;
    s.pres = rp_cur.norm() / t / (1.0 + bvec.norm());
    double dn = 0;
    for (int b = 0; b < nb; ++b) dn += rd_cur_b[b].squaredNorm();
    dn += rd_cur_l.squaredNorm() + rd_cur_f.squaredNorm();
    s.dres = std::sqrt(dn) / t / (1.0 + std::sqrt(P.frob_norm_sq(P.cost)) / sc);
    double cx = cx_cur / t, by = by_cur / t;
    s.relgap = std::abs(cx - by) / std::max({1.0, std::abs(cx), std::abs(by)});
    s.iterations = iter;
    s.newton_residual = newton_check;
    return s;
  }

  std::optional<Solution> check_certificates() {
    // primal infeasibility: A^T y + z = 0 with b^T y > 0
    double by = bvec.dot(y);
    if (by > 1e-10) {
      double dn = 0;
      for (int b = 0; b < nb; ++b) {
        Eigen::MatrixXd D = Z[b];
        for (int i = 0; i < m; ++i)
          if (!rows[i].psd[b].empty()) add_outer(D, rows[i], b, y[i]);
        dn += D.squaredNorm();
      }
      Eigen::VectorXd dl = zl;
      for (int l = 0; l < nl; ++l)
        for (auto& [i, c] : lin_usage[l]) dl[l] += c * y[i];
      dn += dl.squaredNorm() + (Af.transpose() * y).squaredNorm();
      if (std::sqrt(dn) / by <= opt.feastol * 0.1) {
        Solution s = current_solution();
        s.status = SolveStatus::infeasible;
        s.message = "primal infeasibility certificate";
        return s;
      }
    }
    // dual infeasibility: A x = 0, x in K, c^T x < 0
    double cx = cost_dot(xf, xl, X);
    if (cx < -1e-10) {
      double pn = 0;
      for (int i = 0; i < m; ++i) {
        double v = apply_row(rows[i], xf, xl, X);
        pn += v * v;
      }
      if (std::sqrt(pn) / (-cx) <= opt.feastol * 0.1) {
        Solution s = current_solution();
        s.status = SolveStatus::unbounded;
        s.message = "dual infeasibility certificate";
        return s;
      }
    }
    return std::nullopt;
  }

  bool compute_scaling() {
    R.assign(nb, Eigen::MatrixXd());
    Rinv.assign(nb, Eigen::MatrixXd());
    Theta.assign(nb, Eigen::MatrixXd());
    lam.assign(nb, Eigen::VectorXd());
    for (int b = 0; b < nb; ++b) {
      NTBlock nt = nt_scaling(X[b], Z[b]);
      if (!nt.ok) return false;
      R[b] = std::move(nt.R);
      Rinv[b] = std::move(nt.Rinv);
      Theta[b] = std::move(nt.Theta);
      lam[b] = std::move(nt.lam);
    }
    theta_l = xl.cwiseQuotient(zl);
    lam_l = xl.cwiseProduct(zl).cwiseSqrt();
    return true;
  }

  bool factor_schur() {
    // per-block factor gram S_b = F^T Theta F
    Sg.resize(nb);
    for (int b = 0; b < nb; ++b) Sg[b].noalias() = F[b].transpose() * (Theta[b] * F[b]);
    M.setZero(m, m);
    for (int b = 0; b < nb; ++b) {
      const auto& S = Sg[b];
      std::vector<int> touch;
      for (int i = 0; i < m; ++i)
        if (!rows[i].psd[b].empty()) touch.push_back(i);
      for (std::size_t a = 0; a < touch.size(); ++a) {
        int i = touch[a];
        for (std::size_t b2 = a; b2 < touch.size(); ++b2) {
          int j = touch[b2];
          double acc = 0;
          for (const auto& ti : rows[i].psd[b])
            for (const auto& tj : rows[j].psd[b])
              acc += ti.c * tj.c * 0.5 *
                     (S(ti.fu, tj.fu) * S(ti.fv, tj.fv) + S(ti.fu, tj.fv) * S(ti.fv, tj.fu));
          M(i, j) += acc;
          if (i != j) M(j, i) += acc;
        }
      }
    }
    for (int l = 0; l < nl; ++l) {
      const auto& us = lin_usage[l];
      for (std::size_t a = 0; a < us.size(); ++a)
        for (std::size_t b2 = a; b2 < us.size(); ++b2) {
          double v = theta_l[l] * us[a].second * us[b2].second;
          M(us[a].first, us[b2].first) += v;
          if (us[a].first != us[b2].first) M(us[b2].first, us[a].first) += v;
        }
    }
    // h = A Theta c, cTc = <c, Theta c>
    hvec = Eigen::VectorXd::Zero(m);
    ThC.resize(nb);
    for (int b = 0; b < nb; ++b) {
      ThC[b] = Theta[b] * Cb[b] * Theta[b];
      for (int i = 0; i < m; ++i)
        if (!rows[i].psd[b].empty()) hvec[i] += row_dot_dense(rows[i], b, ThC[b]);
    }
    for (int l = 0; l < nl; ++l)
      for (auto& [i, c] : lin_usage[l]) hvec[i] += c * theta_l[l] * cl[l];
    cthc = cl.dot(theta_l.cwiseProduct(cl));
    for (int b = 0; b < nb; ++b) cthc += Cb[b].cwiseProduct(ThC[b]).sum();

    double base = 1e-13 * (1.0 + M.trace() / std::max(1, m));
    for (int attempt = 0; attempt < 6; ++attempt) {
      Eigen::MatrixXd Mr = M;
      if (attempt > 0) Mr.diagonal().array() += base * std::pow(100.0, attempt - 1);
      llt.compute(Mr);
      if (llt.info() == Eigen::Success) {
        // free-variable elimination
        if (nf > 0) {
          MiAf = llt.solve(Af);
          Eigen::MatrixXd Sff = Af.transpose() * MiAf;
          ldlt_f.compute(Sff);
          if (ldlt_f.info() != Eigen::Success) continue;
        }
        return true;
      }
    }
    return false;
  }

  // Solve [M Af; Af^T 0] [dy; dxf] = [r1; r2] with one refinement pass.
  void kkt_solve(const Eigen::VectorXd& r1, const Eigen::VectorXd& r2, Eigen::VectorXd& dy,
                 Eigen::VectorXd& dxf) const {
    auto solve_once = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b2,
                          Eigen::VectorXd& oy, Eigen::VectorXd& of) {
      Eigen::VectorXd t = llt.solve(a);
      if (nf > 0) {
        of = ldlt_f.solve(Af.transpose() * t - b2);
        oy = t - MiAf * of;
      } else {
        of = Eigen::VectorXd::Zero(0);
        oy = t;
      }
    };
    solve_once(r1, r2, dy, dxf);
    // refinement
    Eigen::VectorXd e1 = r1 - M * dy;
    if (nf > 0) e1 -= Af * dxf;
    Eigen::VectorXd e2 = nf > 0 ? Eigen::VectorXd(r2 - Af.transpose() * dy) : Eigen::VectorXd();
    Eigen::VectorXd cy, cfree;
    solve_once(e1, nf > 0 ? e2 : Eigen::VectorXd::Zero(0), cy, cfree);
    dy += cy;
    if (nf > 0) dxf += cfree;
  }

  void make_rhs_affine(Dir& d) {
    d.rp = -rp_cur;
    d.rdb.resize(nb);
    for (int b = 0; b < nb; ++b) d.rdb[b] = -rd_cur_b[b];
    d.rdl = -rd_cur_l;
    d.rdf = -rd_cur_f;
    d.rg = -rg_cur;
    d.r4b.resize(nb);
    for (int b = 0; b < nb; ++b) d.r4b[b] = -X[b];
    d.r4l = -xl;
    d.r5 = -tau * kappa;
  }

  void make_rhs_corrector(Dir& d, const Dir& aff, double sigma) {
    d.rp = -rp_cur;
    d.rdb.resize(nb);
    for (int b = 0; b < nb; ++b) d.rdb[b] = -rd_cur_b[b];
    d.rdl = -rd_cur_l;
    d.rdf = -rd_cur_f;
    d.rg = -rg_cur;
    d.r4b.resize(nb);
    for (int b = 0; b < nb; ++b) {
      // scaled-space target: sigma*mu*I - lambda^2 - (dx_s o dz_s)
      Eigen::MatrixXd dxs = Rinv[b] * aff.X[b] * Rinv[b].transpose();
      Eigen::MatrixXd dzs = R[b].transpose() * aff.Z[b] * R[b];
      Eigen::MatrixXd prod = 0.5 * (dxs * dzs + dzs * dxs);
      const int p = P.psd_dims[b];
      Eigen::MatrixXd tgt(p, p);
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) {
          double rhs = -prod(i, j);
          if (i == j) rhs += sigma * mu - lam[b][i] * lam[b][i];
          tgt(i, j) = 2.0 * rhs / (lam[b][i] + lam[b][j]);
        }
      d.r4b[b] = R[b] * tgt * R[b].transpose();
    }
    d.r4l = ((sigma * mu - xl.array() * zl.array() - aff.xl.array() * aff.zl.array()) /
             zl.array())
                .matrix();
    d.r5 = sigma * mu - tau * kappa - aff.tau * aff.kappa;
  }

  bool solve_kkt(Dir& d) {
    // q_i = <A_i, r4 + Theta rd Theta>, e0 likewise for the cost row
    Eigen::VectorXd q = Eigen::VectorXd::Zero(m);
    std::vector<Eigen::MatrixXd> r4rd(nb);
    for (int b = 0; b < nb; ++b) {
      r4rd[b] = d.r4b[b] + Theta[b] * (-d.rdb[b]) * Theta[b];
      for (int i = 0; i < m; ++i)
        if (!rows[i].psd[b].empty()) q[i] += row_dot_dense(rows[i], b, r4rd[b]);
    }
    Eigen::VectorXd lin_part = d.r4l + theta_l.cwiseProduct(-d.rdl);
    for (int l = 0; l < nl; ++l)
      for (auto& [i, c] : lin_usage[l]) q[i] += c * lin_part[l];

    Eigen::VectorXd g1 = d.rp - q;
    Eigen::VectorXd g2 = hvec + bvec;
    Eigen::VectorXd y1, xf1, y2, xf2;
    kkt_solve(g1, d.rdf, y1, xf1);
    kkt_solve(g2, cf, y2, xf2);

    double e0 = 0;
    for (int b = 0; b < nb; ++b) e0 += Cb[b].cwiseProduct(r4rd[b]).sum();
    e0 += cl.dot(lin_part);
    // scalar equation for dtau
    double num = d.rg - d.r5 / tau - e0 - cf.dot(xf1) - (hvec - bvec).dot(y1);
    double den = cf.dot(xf2) + (hvec - bvec).dot(y2) - cthc - kappa / tau;
    if (std::abs(den) < 1e-300) return false;
    d.tau = num / den;
    d.y = y1 + d.tau * y2;
    d.xf = nf > 0 ? Eigen::VectorXd(xf1 + d.tau * xf2) : Eigen::VectorXd::Zero(0);
    d.kappa = (d.r5 - kappa * d.tau) / tau;

    // recover cone directions
    d.X.resize(nb);
    d.Z.resize(nb);
    for (int b = 0; b < nb; ++b) {
      // dual equation: A^T dy + dZ - C dtau = rdb  =>  dZ = rdb + C dtau - A^T dy
      Eigen::MatrixXd T = -d.rdb[b] - Cb[b] * d.tau;
      for (int i = 0; i < m; ++i)
        if (!rows[i].psd[b].empty()) add_outer(T, rows[i], b, d.y[i]);
      d.Z[b] = -T;
      d.X[b] = d.r4b[b] - Theta[b] * d.Z[b] * Theta[b];
      d.X[b] = 0.5 * (d.X[b] + d.X[b].transpose()).eval();
      d.Z[b] = 0.5 * (d.Z[b] + d.Z[b].transpose()).eval();
    }
    d.zl = Eigen::VectorXd(nl);
    for (int l = 0; l < nl; ++l) {
      double aty = 0;
      for (auto& [i, c] : lin_usage[l]) aty += c * d.y[i];
      d.zl[l] = d.rdl[l] + cl[l] * d.tau - aty;
    }
    d.xl = d.r4l - theta_l.cwiseProduct(d.zl);
    return true;
  }

  double check_newton(const Dir& d, double sigma) const {
    double worst = 0;
    // primal rows
    for (int i = 0; i < m; ++i) {
      double v = apply_row(rows[i], d.xf, d.xl, d.X) - bvec[i] * d.tau - d.rp[i];
      worst = std::max(worst, std::abs(v));
    }
    // dual blocks
    for (int b = 0; b < nb; ++b) {
      Eigen::MatrixXd D = d.Z[b] - Cb[b] * d.tau - d.rdb[b];
      for (int i = 0; i < m; ++i)
        if (!rows[i].psd[b].empty()) add_outer(D, rows[i], b, d.y[i]);
      worst = std::max(worst, D.cwiseAbs().maxCoeff());
    }
    // gap row
    double v = cost_dot(d.xf, d.xl, d.X) - bvec.dot(d.y) + d.kappa - d.rg;
    worst = std::max(worst, std::abs(v));
    worst = std::max(worst, std::abs(tau * d.kappa + kappa * d.tau - d.r5));
    return worst;
  }

  double max_step(const Dir& d) const {
    double a = 1e12;
    auto psd_step = [&](const Eigen::MatrixXd& S, const Eigen::MatrixXd& dS) {
      Eigen::LLT<Eigen::MatrixXd> ll(S);
      if (ll.info() != Eigen::Success) return 0.0;
      Eigen::MatrixXd L = ll.matrixL();
      Eigen::MatrixXd B = L.triangularView<Eigen::Lower>().solve(dS);
      B = L.triangularView<Eigen::Lower>().solve(B.transpose().eval());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (B + B.transpose()),
                                                        Eigen::EigenvaluesOnly);
      double lmin = es.eigenvalues().minCoeff();
      return lmin >= -1e-14 ? 1e12 : -1.0 / lmin;
    };
    for (int b = 0; b < nb; ++b) {
      a = std::min(a, psd_step(X[b], d.X[b]));
      a = std::min(a, psd_step(Z[b], d.Z[b]));
    }
    for (int l = 0; l < nl; ++l) {
      if (d.xl[l] < 0) a = std::min(a, -xl[l] / d.xl[l]);
      if (d.zl[l] < 0) a = std::min(a, -zl[l] / d.zl[l]);
    }
    if (d.tau < 0) a = std::min(a, -tau / d.tau);
    if (d.kappa < 0) a = std::min(a, -kappa / d.kappa);
    return a;
  }

  double trial_mu(const Dir& d, double astep) const {
    double a = std::min(1.0, 0.99 * astep);
    double g = (xl + a * d.xl).dot(zl + a * d.zl);
    for (int b = 0; b < nb; ++b)
      g += (X[b] + a * d.X[b]).cwiseProduct(Z[b] + a * d.Z[b]).sum();
    g += (tau + a * d.tau) * (kappa + a * d.kappa);
    return g / nu_deg;
  }

  void take_step(const Dir& d, double a) {
    for (int b = 0; b < nb; ++b) {
      X[b] += a * d.X[b];
      Z[b] += a * d.Z[b];
      X[b] = 0.5 * (X[b] + X[b].transpose()).eval();
      Z[b] = 0.5 * (Z[b] + Z[b].transpose()).eval();
    }
    xl += a * d.xl;
    zl += a * d.zl;
    xf += a * d.xf;
    y += a * d.y;
    tau += a * d.tau;
    kappa += a * d.kappa;
  }

  Solution trouble(Solution best, const std::string& msg) {
    best.newton_residual = newton_check;
    // A late-stage breakdown often happens one step short of the target
    // tolerances; a mildly relaxed best iterate is still a usable optimum.
    if (best.pres <= 10 * opt.feastol && best.dres <= 10 * opt.feastol &&
        best.relgap <= 10 * opt.gaptol) {
      best.status = SolveStatus::optimal;
      best.message = "converged (reduced accuracy, " + msg + ")";
      return best;
    }
    best.status = SolveStatus::numerical_trouble;
    best.message = msg;
    return best;
  }

  const ConicProgram& P;
  SolverOptions opt;
  int m = 0, nb = 0, nf = 0, nl = 0, nu = 0, iter = 0;
  double nu_deg = 1;
  std::vector<ScaledRow> rows;
  ScaledRow cost;
  std::vector<double> row_scale;
  double sb = 1, sc = 1;
  std::vector<Eigen::MatrixXd> F, Cb;
  std::vector<std::vector<std::pair<int, double>>> lin_usage;
  Eigen::MatrixXd Af;
  Eigen::VectorXd cf, cl, bvec;

  // iterate
  std::vector<Eigen::MatrixXd> X, Z;
  Eigen::VectorXd xl, zl, xf, y;
  double tau = 1, kappa = 1, mu = 1;
  Eigen::VectorXd rp_cur, rd_cur_l, rd_cur_f;
  std::vector<Eigen::MatrixXd> rd_cur_b;
  double rg_cur = 0, gap_cur = 0, cx_cur = 0, by_cur = 0;

  // scaling
  std::vector<Eigen::MatrixXd> R, Rinv, Theta, ThC;
  std::vector<Eigen::VectorXd> lam;
  std::vector<Eigen::MatrixXd> Sg;
  Eigen::VectorXd theta_l, lam_l, hvec;
  double cthc = 0;
  Eigen::MatrixXd M, MiAf;
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_f;
};

}  // namespace ipm_detail

// ---------------------------------------------------------------------------
// Facial reduction: equality rows of the shape <A, X_b> = 0 with A ⪰ 0 force
// X_b to live on the complementary face; eliminating those directions removes
// the interior-point degeneracy they cause. Returns the per-block bases used,
// identity when nothing was eliminated.
struct FacialReduction {
  ConicProgram reduced;
  std::vector<Eigen::MatrixXd> basis;  // X_orig = Q X' Q^T
  std::vector<int> kept_rows;
  bool infeasible = false;
};

inline FacialReduction facial_reduce(const ConicProgram& P, double tol = 1e-9) {
  FacialReduction out;
  const int nb = P.num_psd();
  out.basis.resize(nb);
  for (int b = 0; b < nb; ++b)
    out.basis[b] = Eigen::MatrixXd::Identity(P.psd_dims[b], P.psd_dims[b]);

  std::vector<std::vector<Eigen::VectorXd>> kernels(nb);
  for (const auto& r : P.rows) {
    if (r.rhs != 0.0 || !r.free_nz.empty() || !r.lin_nz.empty()) continue;
    int touched = 0, psd_ok = 0, sign = 0;
    std::vector<std::pair<int, Eigen::MatrixXd>> mats;
    for (int b = 0; b < nb; ++b) {
      if (r.psd[b].empty()) continue;
      ++touched;
      Eigen::MatrixXd A = P.dense_block(r, b);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
      double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
      double scale = std::max(std::abs(lo), std::abs(hi));
      if (scale == 0) continue;
      int s = lo >= -tol * scale ? 1 : (hi <= tol * scale ? -1 : 0);
      if (s == 0) {
        sign = 0;
        break;
      }
      if (sign == 0) sign = s;
      if (sign != s) {
        sign = 0;
        break;
      }
      ++psd_ok;
      mats.push_back({b, A});
    }
    if (touched == 0 || psd_ok != touched || sign == 0) continue;
    for (auto& [b, A] : mats) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sign > 0 ? A : Eigen::MatrixXd(-A));
      double hi = es.eigenvalues().maxCoeff();
      for (int k = 0; k < es.eigenvalues().size(); ++k)
        if (es.eigenvalues()[k] > tol * hi) kernels[b].push_back(es.eigenvectors().col(k));
    }
  }

  bool any = false;
  std::vector<Eigen::MatrixXd> Q(nb);
  for (int b = 0; b < nb; ++b) {
    const int p = P.psd_dims[b];
    if (kernels[b].empty()) {
      Q[b] = Eigen::MatrixXd::Identity(p, p);
      continue;
    }
    Eigen::MatrixXd Kmat(p, kernels[b].size());
    for (std::size_t k = 0; k < kernels[b].size(); ++k) Kmat.col(k) = kernels[b][k];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Kmat, Eigen::ComputeFullU);
    int rank = 0;
    for (int k = 0; k < svd.singularValues().size(); ++k)
      if (svd.singularValues()[k] > 1e-10 * svd.singularValues()[0]) ++rank;
    Q[b] = svd.matrixU().rightCols(p - rank);
    any = true;
  }
  if (!any) {
    out.reduced = P;
    out.kept_rows.resize(P.rows.size());
    for (std::size_t i = 0; i < P.rows.size(); ++i) out.kept_rows[i] = static_cast<int>(i);
    return out;
  }

  ConicProgram R2;
  R2.num_free = P.num_free;
  R2.num_lin = P.num_lin;
  R2.cost_offset = P.cost_offset;
  for (int b = 0; b < nb; ++b) R2.psd_dims.push_back(static_cast<int>(Q[b].cols()));
  R2.factor_pool.resize(nb);
  std::vector<std::map<SparseVec, int>> ids(nb);
  auto xform_row = [&](const ConicProgram::Row& r) {
    ConicProgram::Row nr;
    nr.free_nz = r.free_nz;
    nr.lin_nz = r.lin_nz;
    nr.rhs = r.rhs;
    nr.psd.resize(nb);
    for (int b = 0; b < nb; ++b) {
      // factor terms can cancel only at the assembled-matrix level, so test
      // the transformed dense block before keeping any of them
      Eigen::MatrixXd B = Q[b].transpose() * P.dense_block(r, b) * Q[b];
      if (B.size() == 0 || B.lpNorm<Eigen::Infinity>() < 1e-12) continue;
      for (const auto& t : r.psd[b]) {
        Eigen::VectorXd u = Q[b].transpose() * P.factor_pool[b][t.fu].dense(P.psd_dims[b]);
        Eigen::VectorXd v = Q[b].transpose() * P.factor_pool[b][t.fv].dense(P.psd_dims[b]);
        if (u.lpNorm<Eigen::Infinity>() < 1e-13 || v.lpNorm<Eigen::Infinity>() < 1e-13) continue;
        auto fid = [&](Eigen::VectorXd w) {
          SparseVec sv = SparseVec::from_dense(w, 1e-14);
          auto it = ids[b].find(sv);
          if (it != ids[b].end()) return it->second;
          int id = static_cast<int>(R2.factor_pool[b].size());
          R2.factor_pool[b].push_back(sv);
          ids[b].emplace(std::move(sv), id);
          return id;
        };
        nr.psd[b].push_back({fid(u), fid(v), t.c});
      }
    }
    return nr;
  };
  for (std::size_t i = 0; i < P.rows.size(); ++i) {
    ConicProgram::Row nr = xform_row(P.rows[i]);
    bool zero = nr.free_nz.empty() && nr.lin_nz.empty();
    if (zero)
      for (int b = 0; b < nb; ++b) zero = zero && nr.psd[b].empty();
    if (zero) {
      if (std::abs(nr.rhs) > 1e-9) out.infeasible = true;
      continue;
    }
    out.kept_rows.push_back(static_cast<int>(i));
    R2.rows.push_back(std::move(nr));
  }
  R2.cost = xform_row(P.cost);
  out.reduced = std::move(R2);
  out.basis = std::move(Q);
  return out;
}

inline Solution solve(const ConicProgram& prog, SolverOptions opts = solver_options_from_env()) {
  if (opts.facial_reduction) {
    FacialReduction fr = facial_reduce(prog);
    if (fr.infeasible) {
      Solution s;
      s.status = SolveStatus::infeasible;
      s.message = "inconsistent forced-face equality";
      return s;
    }
    ipm_detail::Ipm ipm(fr.reduced, opts);
    Solution s = ipm.run();
    // map primal back to the original face
    std::vector<Eigen::MatrixXd> Xo(prog.num_psd());
    std::vector<Eigen::MatrixXd> Zo(prog.num_psd());
    for (int b = 0; b < prog.num_psd(); ++b) {
      if (b < static_cast<int>(s.X.size())) {
        Xo[b] = fr.basis[b] * s.X[b] * fr.basis[b].transpose();
        Zo[b] = fr.basis[b] * s.Z[b] * fr.basis[b].transpose();
      }
    }
    s.X = std::move(Xo);
    s.Z = std::move(Zo);
    Eigen::VectorXd yo = Eigen::VectorXd::Zero(prog.rows.size());
    for (std::size_t k = 0; k < fr.kept_rows.size(); ++k) yo[fr.kept_rows[k]] = s.y[k];
    s.y = std::move(yo);
    return s;
  }
  ipm_detail::Ipm ipm(prog, opts);
  return ipm.run();
}

}  // namespace pepnet

#endif
