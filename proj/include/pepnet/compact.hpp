#ifndef PEPNET_COMPACT_HPP
#define PEPNET_COMPACT_HPP

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pepnet/conic.hpp"
#include "pepnet/ipm.hpp"
#include "pepnet/problem.hpp"

namespace pepnet {

// Solved class-symmetric moment data. Ga: second moments of one agent of the
// class; Gr: moments across two distinct agents of the same class (absent for
// single-agent classes); Gc: moments across classes, with
// Gc[{v,u}] = Gc[{u,v}]^T; fa: class-average function values.
struct CompactBlocks {
  int U = 0, p = 0, q = 0;
  std::vector<Eigen::VectorXd> fa;
  std::vector<Eigen::MatrixXd> Ga;
  std::vector<std::optional<Eigen::MatrixXd>> Gr;
  std::map<std::pair<int, int>, Eigen::MatrixXd> Gc;

  const Eigen::MatrixXd& cross(int u, int v) const { return Gc.at({u, v}); }
};

// Placement of the class-symmetric variables inside the conic program: one
// PSD block holding the Gram matrix of the per-class agent averages (class u
// occupies columns u*p..), one per-class PSD dispersion block (the average
// squared deviation from the class mean, present when the class can hold two
// or more agents), and the class-average function values as free variables,
// class-major. Agent counts only ever enter through `weight` and `dfactor`,
// so the program size is independent of them.
struct CompactLayout {
  int U = 1, p = 0, q = 0;
  int h_block = 0;
  std::vector<int> d_block;      // -1 when the class has no dispersion block
  std::vector<double> weight;    // class share of a plain agent average
  std::vector<double> dfactor;   // Ga - Gr = dfactor * dispersion block
  std::vector<std::string> row_labels;
};

struct LoweredPep {
  ConicProgram program;
  CompactLayout layout;
};

namespace compact_detail {

struct ClassInfo {
  std::vector<double> weight;
  std::vector<bool> has_d;
  std::vector<double> dfactor;
};

inline ClassInfo class_info(const EquivalencePartition& part) {
  const int U = part.num_classes();
  ClassInfo out;
  out.weight.resize(U);
  out.has_d.assign(U, false);
  out.dfactor.assign(U, 0.0);
  for (int u = 0; u < U; ++u) {
    out.weight[u] = part.fraction(u);
    long long nu = 0;  // 0 marks a growing class of the limit
    if (part.is_finite()) nu = part.size(u);
    else if (part.pinned(u)) nu = part.pinned_size(u);
    if (nu == 0) {
      out.has_d[u] = true;
      out.dfactor[u] = 1.0;
    } else if (nu >= 2) {
      out.has_d[u] = true;
      out.dfactor[u] = static_cast<double>(nu) / static_cast<double>(nu - 1);
    }
  }
  return out;
}

class PepLowerer {
 public:
  explicit PepLowerer(const PepProblem& prob) : prob_(prob), info_(class_info(prob.partition)) {
    layout_.U = prob.partition.num_classes();
    layout_.p = prob.trace.num_columns();
    layout_.q = prob.trace.num_values();
    layout_.weight = info_.weight;
    layout_.dfactor = info_.dfactor;
    builder_.add_free(layout_.U * layout_.q);
    layout_.h_block = builder_.add_psd(layout_.U * layout_.p);
    layout_.d_block.assign(layout_.U, -1);
    for (int u = 0; u < layout_.U; ++u)
      if (info_.has_d[u]) layout_.d_block[u] = builder_.add_psd(layout_.p);
  }

  LoweredPep run() {
    ConicProgram::Row cost = lower_expr(prob_.objective, -1.0);
    for (const Constraint& c : prob_.constraints) {
      const double scale = c.sense == Sense::geq ? -1.0 : 1.0;
      ConicProgram::Row r = lower_expr(c.expr, scale);
      r.rhs = scale * (c.rhs - c.expr.constant());
      layout_.row_labels.push_back(c.label);
      if (c.sense == Sense::eq)
        builder_.add_equality(std::move(r));
      else
        builder_.add_inequality(std::move(r));
    }
    for (const LmiConstraint& m : prob_.lmis) {
      const int dim = static_cast<int>(m.entries.size());
      for (const auto& row : m.entries)
        if (static_cast<int>(row.size()) != dim) throw ShapeError(m.label + ": ragged entries");
      std::vector<std::vector<ConicProgram::Row>> entries(dim);
      for (int k = 0; k < dim; ++k)
        for (int l = 0; l < dim; ++l) {
          ConicProgram::Row r = lower_expr(m.entries[k][l], 1.0);
          r.rhs = -m.entries[k][l].constant();
          entries[k].push_back(std::move(r));
        }
      for (int k = 0; k < dim; ++k)
        for (int l = k + 1; l < dim; ++l)
          if (!rows_match(entries[k][l], entries[l][k]))
            throw InternalSymmetryError(m.label + ": entries (" + std::to_string(k) + "," +
                                        std::to_string(l) + ") and transpose disagree");
      builder_.add_lmi_leq_zero(entries);
      for (int k = 0; k < dim; ++k)
        for (int l = k; l < dim; ++l)
          layout_.row_labels.push_back(m.label + " (" + std::to_string(k) + "," +
                                       std::to_string(l) + ")");
    }
    ConicProgram prog = builder_.take();
    prog.cost = std::move(cost);
    prog.cost.psd.resize(prog.num_psd());
    prog.cost_offset = -prob_.objective.constant();
    return {std::move(prog), std::move(layout_)};
  }

 private:
  ConicProgram::Row lower_expr(const ScalarExpr& e, double scale) {
    if (e.has_registry() && e.registry() != prob_.trace.registry)
      throw RegistryMismatch("expression from a foreign registry");
    ConicProgram::Row r = builder_.new_row();
    for (const GramTerm& t : e.gram_terms()) add_gram(r, t, scale);
    for (const ValueTerm& t : e.value_terms()) add_value(r, t, scale);
    return r;
  }

  int hfac(int u, const Eigen::VectorXd& a) {
    SparseVec s;
    for (int i = 0; i < a.size(); ++i)
      if (a[i] != 0.0) s.nz.push_back({u * layout_.p + i, a[i]});
    return builder_.factor(layout_.h_block, std::move(s));
  }

  void check_class(int u) const {
    if (u < 0 || u >= layout_.U) throw InvalidClass("class index " + std::to_string(u));
  }
  void check_width(std::size_t w) const {
    if (w != 1 && w != static_cast<std::size_t>(layout_.U))
      throw ShapeError("per-class variant width " + std::to_string(w));
  }

  void add_pair(ConicProgram::Row& r, int u, int v, const Eigen::VectorXd& a,
                const Eigen::VectorXd& b, double c, bool with_dispersion) {
    if (c == 0.0) return;
    if (a.size() != layout_.p || b.size() != layout_.p)
      throw ShapeError("coefficient vector length");
    if (a.isZero(0.0) || b.isZero(0.0)) return;
    r.psd[layout_.h_block].push_back({hfac(u, a), hfac(v, b), c});
    const int blk = layout_.d_block[u];
    if (with_dispersion && blk >= 0)
      r.psd[blk].push_back({builder_.factor(blk, SparseVec::from_dense(a)),
                            builder_.factor(blk, SparseVec::from_dense(b)), c});
  }

  void add_gram(ConicProgram::Row& r, const GramTerm& t, double scale) {
    const double c = t.coeff * scale;
    if (c == 0.0) return;
    check_width(t.a.size());
    check_width(t.b.size());
    switch (t.pairing) {
      case Pairing::same_agent:
        if (t.u >= 0) {
          check_class(t.u);
          add_pair(r, t.u, t.u, t.a_at(t.u), t.b_at(t.u), c, true);
        } else {
          for (int u = 0; u < layout_.U; ++u)
            add_pair(r, u, u, t.a_at(u), t.b_at(u), c * info_.weight[u], true);
        }
        break;
      case Pairing::cross_agent:
        for (int u = 0; u < layout_.U; ++u)
          for (int v = 0; v < layout_.U; ++v)
            add_pair(r, u, v, t.a_at(u), t.b_at(v), c * info_.weight[u] * info_.weight[v], false);
        break;
      case Pairing::class_pair:
        check_class(t.u);
        check_class(t.v);
        add_pair(r, t.u, t.v, t.a_at(t.u), t.b_at(t.v), c, false);
        break;
    }
  }

  void add_value(ConicProgram::Row& r, const ValueTerm& t, double scale) {
    const double c = t.coeff * scale;
    if (c == 0.0) return;
    if (t.tag < 0 || t.tag >= layout_.q) throw UnknownTag("value tag " + std::to_string(t.tag));
    if (t.u >= 0) {
      check_class(t.u);
      r.free_nz.push_back({t.u * layout_.q + t.tag, c});
    } else {
      for (int u = 0; u < layout_.U; ++u)
        if (info_.weight[u] != 0.0)
          r.free_nz.push_back({u * layout_.q + t.tag, c * info_.weight[u]});
    }
  }

  bool rows_match(const ConicProgram::Row& x, const ConicProgram::Row& y) {
    const ConicProgram& pr = builder_.prog();
    const int nf = pr.num_free;
    Eigen::VectorXd fx = Eigen::VectorXd::Zero(nf), fy = fx;
    for (const auto& [i, c] : x.free_nz) fx[i] += c;
    for (const auto& [i, c] : y.free_nz) fy[i] += c;
    double scale = 1.0;
    if (nf > 0) scale += fx.cwiseAbs().maxCoeff();
    if ((fx - fy).cwiseAbs().maxCoeff() > 1e-9 * scale) return false;
    for (int b = 0; b < static_cast<int>(x.psd.size()); ++b) {
      Eigen::MatrixXd A = pr.dense_block(x, b), B = pr.dense_block(y, b);
      if ((A - B).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + A.cwiseAbs().maxCoeff())) return false;
    }
    return std::abs(x.rhs - y.rhs) <= 1e-9 * (1.0 + std::abs(x.rhs));
  }

  const PepProblem& prob_;
  ClassInfo info_;
  ConicProgramBuilder builder_;
  CompactLayout layout_;
};

}  // namespace compact_detail

inline LoweredPep lower(const PepProblem& prob) {
  return compact_detail::PepLowerer(prob).run();
}

inline CompactBlocks recover_blocks(const Solution& sol, const CompactLayout& lo) {
  CompactBlocks b;
  b.U = lo.U;
  b.p = lo.p;
  b.q = lo.q;
  const Eigen::MatrixXd& H = sol.X.at(lo.h_block);
  for (int u = 0; u < lo.U; ++u) {
    b.fa.push_back(sol.xf.segment(u * lo.q, lo.q));
    Eigen::MatrixXd huu = H.block(u * lo.p, u * lo.p, lo.p, lo.p);
    if (lo.d_block[u] >= 0) {
      const Eigen::MatrixXd& dd = sol.X.at(lo.d_block[u]);
      b.Ga.push_back(huu + dd);
      b.Gr.push_back(b.Ga.back() - lo.dfactor[u] * dd);
    } else {
      b.Ga.push_back(std::move(huu));
      b.Gr.push_back(std::nullopt);
    }
  }
  for (int u = 0; u < lo.U; ++u)
    for (int v = 0; v < lo.U; ++v)
      if (u != v) b.Gc[{u, v}] = H.block(u * lo.p, v * lo.p, lo.p, lo.p);
  return b;
}

struct PepSolution {
  SolveStatus status = SolveStatus::numerical_trouble;
  double value = std::numeric_limits<double>::quiet_NaN();  // worst-case metric
  CompactBlocks blocks;  // populated when the solve reached optimality
  CompactLayout layout;
  Solution raw;
};

inline PepSolution solve_pep(const PepProblem& prob,
                             const SolverOptions& opts = solver_options_from_env()) {
  LoweredPep low = lower(prob);
  Solution s = solve(low.program, opts);
  PepSolution out;
  out.status = s.status;
  out.layout = std::move(low.layout);
  if (s.status == SolveStatus::optimal) {
    out.value = -s.value;
    out.blocks = recover_blocks(s, out.layout);
  }
  out.raw = std::move(s);
  return out;
}

// Collective function values and Gram matrix of the explicit agent family the
// class-symmetric blocks stand for (finite partitions only): agents of one
// class share the value sub-vector, diagonal Gram blocks are Ga of the class,
// off-diagonal blocks Gr within a class and Gc across classes.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> expand_solution(
    const CompactBlocks& b, const EquivalencePartition& part) {
  const long long N = part.total();
  if (b.U != part.num_classes())
    throw InvalidPartition("block count " + std::to_string(b.U) + " for " +
                           std::to_string(part.num_classes()) + " classes");
  const int p = b.p, q = b.q;
  Eigen::VectorXd F(N * q);
  Eigen::MatrixXd G(N * p, N * p);
  for (long long i = 0; i < N; ++i) {
    const int u = part.agent_class(i);
    F.segment(i * q, q) = b.fa.at(u);
    for (long long j = 0; j < N; ++j) {
      const int v = part.agent_class(j);
      if (i == j) {
        G.block(i * p, j * p, p, p) = b.Ga.at(u);
      } else if (u == v) {
        if (!b.Gr.at(u)) throw ShapeError("class " + std::to_string(u) +
                                          " holds several agents but has no cross moment");
        G.block(i * p, j * p, p, p) = *b.Gr.at(u);
      } else {
        G.block(i * p, j * p, p, p) = b.cross(u, v);
      }
    }
  }
  return {std::move(F), std::move(G)};
}

// Positive-semidefiniteness of the expanded collective Gram, restated on the
// compact blocks.
//   class_blocks: one condition per class (Ga for single-agent classes,
//                 Ga - Gr otherwise) plus the coupled block matrix of
//                 class-aggregated moments.
//   summed:      single-class shortcut {Ga + (N-1) Gr, Ga - Gr}.
//   collective:  single-class shortcut on the average and the dispersion,
//                {Gt, Ga - Gt} with Gt = (Ga + (N-1) Gr) / N.
struct PsdRequirement {
  std::string label;
  Eigen::MatrixXd matrix;
};

enum class PsdForm { class_blocks, summed, collective };

inline std::vector<PsdRequirement> psd_reformulation(const EquivalencePartition& part,
                                                     const CompactBlocks& b,
                                                     PsdForm form = PsdForm::class_blocks) {
  if (b.U != part.num_classes())
    throw InvalidPartition("block count " + std::to_string(b.U) + " for " +
                           std::to_string(part.num_classes()) + " classes");
  const int U = b.U, p = b.p;
  std::vector<PsdRequirement> out;

  if (form != PsdForm::class_blocks) {
    if (U != 1 || !part.is_finite())
      throw InvalidPartition("aggregate forms need a single finite class");
    const double N = static_cast<double>(part.size(0));
    const Eigen::MatrixXd& Ga = b.Ga.at(0);
    if (N >= 2 && !b.Gr.at(0)) throw ShapeError("missing within-class cross moment");
    Eigen::MatrixXd Gr = b.Gr.at(0) ? *b.Gr.at(0) : Eigen::MatrixXd::Zero(p, p);
    if (form == PsdForm::summed) {
      out.push_back({"within plus across", Ga + (N - 1.0) * Gr});
      if (N >= 2) out.push_back({"within minus across", Ga - Gr});
    } else {
      Eigen::MatrixXd Gt = (Ga + (N - 1.0) * Gr) / N;
      out.push_back({"collective average", Gt});
      if (N >= 2) out.push_back({"collective dispersion", Ga - Gt});
    }
    return out;
  }

  compact_detail::ClassInfo info = compact_detail::class_info(part);
  for (int u = 0; u < U; ++u) {
    if (!info.has_d[u]) {
      out.push_back({"class " + std::to_string(u) + " within", b.Ga.at(u)});
    } else {
      if (!b.Gr.at(u)) throw ShapeError("missing within-class cross moment");
      out.push_back({"class " + std::to_string(u) + " deviation", b.Ga.at(u) - *b.Gr.at(u)});
    }
  }
  Eigen::MatrixXd Hb(U * p, U * p);
  for (int u = 0; u < U; ++u)
    for (int v = 0; v < U; ++v) {
      Eigen::MatrixXd blk;
      if (part.is_finite()) {
        const double nu = static_cast<double>(part.size(u));
        if (u == v) {
          Eigen::MatrixXd Gr =
              b.Gr.at(u) ? *b.Gr.at(u) : Eigen::MatrixXd::Zero(p, p);
          blk = nu * b.Ga.at(u) + nu * (nu - 1.0) * Gr;
        } else {
          blk = nu * static_cast<double>(part.size(v)) * b.cross(u, v);
        }
      } else {
        // Gram of the class means: the growing-class diagonal block tends to
        // the within-class cross moment.
        if (u == v) {
          if (part.pinned(u)) {
            const double nu = static_cast<double>(part.pinned_size(u));
            Eigen::MatrixXd Gr =
                b.Gr.at(u) ? *b.Gr.at(u) : Eigen::MatrixXd::Zero(p, p);
            blk = b.Ga.at(u) / nu + (1.0 - 1.0 / nu) * Gr;
          } else {
            blk = *b.Gr.at(u);
          }
        } else {
          blk = b.cross(u, v);
        }
      }
      Hb.block(u * p, v * p, p, p) = blk;
    }
  out.push_back({part.is_finite() ? "coupled class moments" : "class-mean moments", Hb});
  return out;
}

// Smallest eigenvalue across the stated conditions; nonnegative (up to
// tolerance) exactly when the expanded Gram is positive semidefinite.
inline double psd_margin(const std::vector<PsdRequirement>& reqs) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& r : reqs) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
        0.5 * (r.matrix + r.matrix.transpose()), Eigen::EigenvaluesOnly);
    m = std::min(m, es.eigenvalues().minCoeff());
  }
  return m;
}

}  // namespace pepnet

#endif
