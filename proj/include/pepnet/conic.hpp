#ifndef PEPNET_CONIC_HPP
#define PEPNET_CONIC_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pepnet/errors.hpp"

namespace pepnet {

// Sparse coefficient vector, indices strictly increasing.
struct SparseVec {
  std::vector<std::pair<int, double>> nz;

  static SparseVec unit(int i) { return SparseVec{{{i, 1.0}}}; }
  static SparseVec from_dense(const Eigen::VectorXd& v, double tol = 0.0) {
    SparseVec s;
    for (int i = 0; i < v.size(); ++i)
      if (std::abs(v[i]) > tol) s.nz.push_back({i, v[i]});
    return s;
  }
  Eigen::VectorXd dense(int n) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    for (auto& [i, c] : nz) v[i] = c;
    return v;
  }
  double dot_dense(const Eigen::VectorXd& v) const {
    double s = 0;
    for (auto& [i, c] : nz) s += c * v[i];
    return s;
  }
  bool operator<(const SparseVec& o) const { return nz < o.nz; }
  bool operator==(const SparseVec& o) const { return nz == o.nz; }
};

// One rank-two contribution c * sym(u v^T) to a coefficient matrix; u and v
// index a per-block factor pool so that repeated vectors are shared.
struct FactorTerm {
  int fu = 0, fv = 0;
  double c = 0;
};

// Linear program data over  K = R^free x R^lin_+ x (PSD blocks).
// All rows are equalities; inequalities get explicit slack columns at build
// time. Objective sense is minimization.
struct ConicProgram {
  int num_free = 0;
  int num_lin = 0;
  std::vector<int> psd_dims;
  std::vector<std::vector<SparseVec>> factor_pool;  // per PSD block

  struct Row {
    std::vector<std::pair<int, double>> free_nz;
    std::vector<std::pair<int, double>> lin_nz;
    std::vector<std::vector<FactorTerm>> psd;  // one list per PSD block
    double rhs = 0;
  };
  std::vector<Row> rows;
  Row cost;               // rhs unused
  double cost_offset = 0; // added to the reported optimal value

  int num_psd() const { return static_cast<int>(psd_dims.size()); }

  Eigen::MatrixXd dense_block(const Row& r, int b) const {
    const int n = psd_dims[b];
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    for (const auto& t : r.psd[b]) {
      const auto& u = factor_pool[b][t.fu].nz;
      const auto& v = factor_pool[b][t.fv].nz;
      for (auto& [i, ci] : u)
        for (auto& [j, cj] : v) {
          A(i, j) += 0.5 * t.c * ci * cj;
          A(j, i) += 0.5 * t.c * ci * cj;
        }
    }
    return A;
  }

  // <row coefficients, point>
  double apply(const Row& r, const Eigen::VectorXd& xf, const Eigen::VectorXd& xl,
               const std::vector<Eigen::MatrixXd>& X) const {
    double s = 0;
    for (auto& [i, c] : r.free_nz) s += c * xf[i];
    for (auto& [i, c] : r.lin_nz) s += c * xl[i];
    for (int b = 0; b < num_psd(); ++b)
      for (const auto& t : r.psd[b]) {
        const auto& u = factor_pool[b][t.fu];
        const auto& v = factor_pool[b][t.fv];
        double uXv = 0;
        for (auto& [i, ci] : u.nz) {
          double rowdot = 0;
          for (auto& [j, cj] : v.nz) rowdot += cj * X[b](i, j);
          uXv += ci * rowdot;
        }
        s += t.c * uXv;
      }
    return s;
  }

  double frob_norm_sq(const Row& r) const {
    double s = 0;
    for (auto& [i, c] : r.free_nz) s += c * c;
    for (auto& [i, c] : r.lin_nz) s += c * c;
    for (int b = 0; b < num_psd(); ++b) {
      for (const auto& t : r.psd[b])
        for (const auto& t2 : r.psd[b]) {
          const auto& u = factor_pool[b][t.fu];
          const auto& v = factor_pool[b][t.fv];
          const auto& u2 = factor_pool[b][t2.fu];
          const auto& v2 = factor_pool[b][t2.fv];
          auto sdot = [](const SparseVec& a, const SparseVec& c2) {
            double d = 0;
            std::size_t i = 0, j = 0;
            while (i < a.nz.size() && j < c2.nz.size()) {
              if (a.nz[i].first < c2.nz[j].first) ++i;
              else if (a.nz[i].first > c2.nz[j].first) ++j;
              else d += a.nz[i++].second * c2.nz[j++].second;
            }
            return d;
          };
          s += 0.5 * t.c * t2.c * (sdot(u, u2) * sdot(v, v2) + sdot(u, v2) * sdot(v, u2));
        }
    }
    return s;
  }
};

// Incremental construction with factor dedup and slack management.
class ConicProgramBuilder {
 public:
  int add_free(int n = 1) {
    int h = prog_.num_free;
    prog_.num_free += n;
    return h;
  }
  int add_lin(int n = 1) {
    int h = prog_.num_lin;
    prog_.num_lin += n;
    return h;
  }
  int add_psd(int dim) {
    prog_.psd_dims.push_back(dim);
    prog_.factor_pool.emplace_back();
    factor_ids_.emplace_back();
    return prog_.num_psd() - 1;
  }

  int factor(int block, SparseVec v) {
    auto& ids = factor_ids_[block];
    auto it = ids.find(v);
    if (it != ids.end()) return it->second;
    int id = static_cast<int>(prog_.factor_pool[block].size());
    prog_.factor_pool[block].push_back(v);
    ids.emplace(std::move(v), id);
    return id;
  }

  ConicProgram::Row new_row() const {
    ConicProgram::Row r;
    r.psd.resize(prog_.num_psd());
    return r;
  }

  void add_equality(ConicProgram::Row r) { prog_.rows.push_back(std::move(r)); }

  // expr <= rhs  becomes  expr + slack = rhs.
  int add_inequality(ConicProgram::Row r) {
    int s = add_lin(1);
    r.lin_nz.push_back({s, 1.0});
    prog_.rows.push_back(std::move(r));
    return s;
  }

  // Entrywise rows of a symmetric matrix expression M(k,l), imposing M ⪯ 0
  // through a fresh slack block:  M(k,l) + S(k,l) = 0,  S ⪰ 0.
  int add_lmi_leq_zero(std::vector<std::vector<ConicProgram::Row>>& entries) {
    const int dim = static_cast<int>(entries.size());
    int blk = add_psd(dim);
    for (auto& row : entries)
      if (static_cast<int>(row.size()) != dim) throw ShapeError("ragged matrix inequality");
    for (int k = 0; k < dim; ++k)
      for (int l = k; l < dim; ++l) {
        ConicProgram::Row r = entries[k][l];
        r.psd.resize(prog_.num_psd());
        r.psd[blk].push_back({factor(blk, SparseVec::unit(k)), factor(blk, SparseVec::unit(l)), 1.0});
        prog_.rows.push_back(std::move(r));
      }
    return blk;
  }

  ConicProgram take() {
    for (auto& r : prog_.rows) r.psd.resize(prog_.num_psd());
    prog_.cost.psd.resize(prog_.num_psd());
    return std::move(prog_);
  }

  ConicProgram& prog() { return prog_; }

 private:
  ConicProgram prog_;
  std::vector<std::map<SparseVec, int>> factor_ids_;
};

// ---------------------------------------------------------------------------
// Text serialization. Layout follows the sparse SDPA convention: a header
// with the row count, block count and block sizes (negative size = diagonal
// block), the right-hand side, then one "row block i j value" line per
// nonzero with row 0 holding the cost. Free variables are emitted as
// difference pairs appended to the diagonal block, so the canonical parse of
// an exported file reproduces the exported program exactly.
namespace detail {
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline ConicProgram split_free_variables(const ConicProgram& in) {
  ConicProgram out = in;
  if (in.num_free == 0) return out;
  out.num_free = 0;
  out.num_lin = in.num_lin + 2 * in.num_free;
  auto convert = [&](ConicProgram::Row& r) {
    for (auto& [i, c] : r.free_nz) {
      r.lin_nz.push_back({in.num_lin + 2 * i, c});
      r.lin_nz.push_back({in.num_lin + 2 * i + 1, -c});
    }
    r.free_nz.clear();
    std::sort(r.lin_nz.begin(), r.lin_nz.end());
  };
  for (auto& r : out.rows) convert(r);
  convert(out.cost);
  return out;
}

inline std::string export_standard_form(const ConicProgram& input) {
  ConicProgram p = split_free_variables(input);
  std::ostringstream os;
  const int m = static_cast<int>(p.rows.size());
  const int nblocks = p.num_psd() + (p.num_lin > 0 ? 1 : 0);
  os << m << "\n" << nblocks << "\n";
  for (int b = 0; b < p.num_psd(); ++b) os << (b ? " " : "") << p.psd_dims[b];
  if (p.num_lin > 0) os << (p.num_psd() ? " " : "") << -p.num_lin;
  os << "\n";
  for (int i = 0; i < m; ++i) os << (i ? " " : "") << detail::fmt_double(p.rows[i].rhs);
  os << "\n";

  auto emit = [&](int rowid, const ConicProgram::Row& r) {
    // PSD entries, upper triangle, merged and sorted.
    for (int b = 0; b < p.num_psd(); ++b) {
      std::map<std::pair<int, int>, double> ent;
      for (const auto& t : r.psd[b]) {
        const auto& u = p.factor_pool[b][t.fu].nz;
        const auto& v = p.factor_pool[b][t.fv].nz;
        for (auto& [i, ci] : u)
          for (auto& [j, cj] : v) {
            auto key = std::minmax(i, j);
            double w = t.c * ci * cj;
            ent[{key.first, key.second}] += (i == j) ? w : 0.5 * w;
          }
      }
      for (auto& [ij, w] : ent) {
        if (w == 0.0) continue;
        os << rowid << " " << b + 1 << " " << ij.first + 1 << " " << ij.second + 1 << " "
           << detail::fmt_double(w) << "\n";
      }
    }
    if (p.num_lin > 0) {
      std::map<int, double> ent;
      for (auto& [i, c] : r.lin_nz) ent[i] += c;
      for (auto& [i, c] : ent) {
        if (c == 0.0) continue;
        os << rowid << " " << p.num_psd() + 1 << " " << i + 1 << " " << i + 1 << " "
           << detail::fmt_double(c) << "\n";
      }
    }
  };
  emit(0, p.cost);
  for (int i = 0; i < m; ++i) emit(i + 1, p.rows[i]);
  return os.str();
}

inline ConicProgram parse_standard_form(const std::string& text) {
  std::istringstream is(text);
  int m = 0, nblocks = 0;
  if (!(is >> m >> nblocks)) throw ShapeError("truncated header");
  std::vector<int> sizes(nblocks);
  for (auto& s : sizes) is >> s;
  ConicProgram p;
  int lin_block = -1;
  for (int b = 0; b < nblocks; ++b) {
    if (sizes[b] < 0) {
      if (lin_block >= 0) throw ShapeError("multiple diagonal blocks");
      lin_block = b;
      p.num_lin = -sizes[b];
    } else {
      p.psd_dims.push_back(sizes[b]);
      p.factor_pool.emplace_back();
    }
  }
  p.rows.resize(m);
  for (auto& r : p.rows) {
    is >> r.rhs;
    r.psd.resize(p.num_psd());
  }
  p.cost.psd.resize(p.num_psd());
  std::vector<std::map<SparseVec, int>> ids(p.num_psd());
  int rowid, blk, i, j;
  double v;
  while (is >> rowid >> blk >> i >> j >> v) {
    ConicProgram::Row& r = rowid == 0 ? p.cost : p.rows[rowid - 1];
    if (blk - 1 == lin_block) {
      if (i != j) throw ShapeError("off-diagonal entry in diagonal block");
      r.lin_nz.push_back({i - 1, v});
    } else {
      int b = blk - 1 - (lin_block >= 0 && blk - 1 > lin_block ? 1 : 0);
      auto fid = [&](int k) {
        SparseVec sv = SparseVec::unit(k);
        auto it = ids[b].find(sv);
        if (it != ids[b].end()) return it->second;
        int id = static_cast<int>(p.factor_pool[b].size());
        p.factor_pool[b].push_back(sv);
        ids[b].emplace(std::move(sv), id);
        return id;
      };
      r.psd[b].push_back({fid(i - 1), fid(j - 1), i == j ? v : 2 * v});
    }
  }
  return p;
}

}  // namespace pepnet

#endif
