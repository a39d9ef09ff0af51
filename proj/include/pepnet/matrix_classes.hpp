#ifndef PEPNET_MATRIX_CLASSES_HPP
#define PEPNET_MATRIX_CLASSES_HPP

#include <Eigen/Dense>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pepnet/rng.hpp"
#include "pepnet/scalar_expr.hpp"

namespace pepnet {

// Symmetric averaging matrices: W 1 = 1, remaining spectrum in
// [lam_minus, lam_plus] strictly inside (-1, 1). Distinct symbols stand for
// distinct (independent) matrices.
struct MatrixClass {
  double lam_minus = -1.0;
  double lam_plus = 1.0;
  std::string symbol = "W";

  void validate() const {
    if (!(lam_minus > -1.0) || !(lam_plus < 1.0) || !(lam_minus <= lam_plus))
      throw InvalidSpectralBound(symbol + ": need -1 < lam_minus <= lam_plus < 1");
  }
};

// Per-class variants of one logical column combination; a single entry means
// every class shares the same coefficients.
using VariantVec = std::vector<VectorExpr>;

// The consensus steps sharing one averaging matrix: ordered (input, output)
// column pairs.
struct ConsensusSet {
  MatrixClass mclass;
  std::vector<std::pair<VariantVec, VariantVec>> pairs;
};

struct ConsensusConstraints {
  ScalarExpr average_preservation;           // == 0
  std::vector<std::vector<ScalarExpr>> lmi;  // symmetric K x K matrix expression, <= 0
  std::vector<ScalarExpr> symmetry;          // == 0 each
};

namespace detail {

inline VariantVec combine(const VariantVec& a, double ca, const VariantVec& b, double cb) {
  std::size_t n = std::max(a.size(), b.size());
  VariantVec out;
  out.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    const VectorExpr& xa = a.size() == 1 ? a[0] : a.at(c);
    const VectorExpr& xb = b.size() == 1 ? b[0] : b.at(c);
    out.push_back(ca * xa + cb * xb);
  }
  return out;
}

inline ScalarExpr vprod(const VariantVec& a, const VariantVec& b, Pairing pairing, double coeff) {
  if (a.size() == 1 && b.size() == 1) return scalar_product(a[0], b[0], pairing, coeff);
  std::size_t n = std::max(a.size(), b.size());
  VariantVec ba = a, bb = b;
  while (ba.size() < n) ba.push_back(a[0]);
  while (bb.size() < n) bb.push_back(b[0]);
  return scalar_product_variant(ba, bb, pairing, coeff);
}

// (1/N) sum_i <a_i - abar, b_i - bbar>
inline ScalarExpr vcentered(const VariantVec& a, const VariantVec& b, double coeff = 1.0) {
  return vprod(a, b, Pairing::same_agent, coeff) - vprod(a, b, Pairing::cross_agent, coeff);
}

}  // namespace detail

// Relaxed interpolation constraints for consensus steps sharing a matrix:
// average preservation, the spectral matrix inequality on the deviation
// parts, and the symmetry couplings. The matrix inequality is emitted on the
// symmetric part; together with the symmetry equalities this matches the
// asymmetric statement.
inline ConsensusConstraints consensus_constraints(const ConsensusSet& set) {
  set.mclass.validate();
  if (set.pairs.empty()) throw EmptyConsensusSet(set.mclass.symbol + ": no consensus pairs");
  for (const auto& [xs, ys] : set.pairs)
    if (xs.empty() || ys.empty())
      throw EmptyConsensusSet(set.mclass.symbol + ": empty column variant");
  const int K = static_cast<int>(set.pairs.size());
  const double lm = set.mclass.lam_minus, lp = set.mclass.lam_plus;

  ConsensusConstraints out;
  // sum_k || mean(x^k) - mean(y^k) ||^2 = 0; with a PSD Gram this pins every
  // cross term of the averaged block as well.
  for (int k = 0; k < K; ++k) {
    VariantVec diff = detail::combine(set.pairs[k].first, 1.0, set.pairs[k].second, -1.0);
    ScalarExpr term = detail::vprod(diff, diff, Pairing::cross_agent, 1.0);
    if (k == 0)
      out.average_preservation = std::move(term);
    else
      out.average_preservation += term;
  }

  out.lmi.assign(K, std::vector<ScalarExpr>(K));
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < K; ++l) {
      VariantVec ak = detail::combine(set.pairs[k].second, 1.0, set.pairs[k].first, -lm);
      VariantVec bl = detail::combine(set.pairs[l].second, 1.0, set.pairs[l].first, -lp);
      VariantVec al = detail::combine(set.pairs[l].second, 1.0, set.pairs[l].first, -lm);
      VariantVec bk = detail::combine(set.pairs[k].second, 1.0, set.pairs[k].first, -lp);
      out.lmi[k][l] = detail::vcentered(ak, bl, 0.5) + detail::vcentered(al, bk, 0.5);
    }

  for (int k = 0; k < K; ++k)
    for (int l = k + 1; l < K; ++l)
      out.symmetry.push_back(detail::vcentered(set.pairs[k].first, set.pairs[l].second) -
                             detail::vcentered(set.pairs[k].second, set.pairs[l].first));
  return out;
}

// Orthonormal basis of the subspace orthogonal to the all-ones vector,
// explicit triangular construction.
inline Eigen::MatrixXd consensus_complement_basis(int n) {
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(n, n - 1);
  for (int k = 1; k < n; ++k) {
    double s = 1.0 / std::sqrt(static_cast<double>(k) * (k + 1));
    for (int i = 0; i < k; ++i) V(i, k - 1) = s;
    V(k, k - 1) = -k * s;
  }
  return V;
}

// Eigen-synthesis of a random member of the class: random orthonormal basis
// of the complement, eigenvalues uniform in [lam_minus, lam_plus].
inline Eigen::MatrixXd random_averaging_matrix(int n, const MatrixClass& cls,
                                               std::mt19937_64& rng) {
  cls.validate();
  if (n < 2) throw ShapeError("averaging matrix needs at least two agents");
  Eigen::MatrixXd A(n, n);
  A.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
  for (int j = 1; j < n; ++j)
    for (int i = 0; i < n; ++i) A(i, j) = gauss(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  Eigen::MatrixXd Q = qr.householderQ();
  Eigen::MatrixXd W = Eigen::MatrixXd::Constant(n, n, 1.0 / n);
  for (int j = 1; j < n; ++j) {
    double ev = uniform(rng, cls.lam_minus, cls.lam_plus);
    W += ev * Q.col(j) * Q.col(j).transpose();
  }
  return 0.5 * (W + W.transpose());
}

struct RecoveryResult {
  std::optional<Eigen::MatrixXd> W;
  double residual = std::numeric_limits<double>::infinity();
  double spectral_violation = 0.0;
  bool feasible() const { return W.has_value(); }
};

// Fit one symmetric averaging matrix mapping every x^k to y^k, spectral
// bounds included. Alternating (Dykstra) projections between the affine set
// of symmetric solutions of the linear system and the spectral box, in the
// coordinates of the consensus complement.
inline RecoveryResult recover_averaging_matrix(const std::vector<Eigen::VectorXd>& xs,
                                               const std::vector<Eigen::VectorXd>& ys, int n,
                                               const MatrixClass& cls, double tol = 1e-6) {
  cls.validate();
  if (n < 2) throw ShapeError("recovery needs at least two agents");
  if (xs.size() != ys.size() || xs.empty()) throw ShapeError("pair list mismatch");
  const int nd = static_cast<int>(xs.front().size());
  if (nd % n != 0) throw ShapeError("stacked dimension not divisible by agent count");
  const int d = nd / n;
  const int K = static_cast<int>(xs.size());
  for (const auto& v : xs)
    if (v.size() != nd) throw ShapeError("inconsistent pair dimensions");
  for (const auto& v : ys)
    if (v.size() != nd) throw ShapeError("inconsistent pair dimensions");

  // rows = agents
  Eigen::MatrixXd X(n, K * d), Y(n, K * d);
  double xscale = 0;
  for (int k = 0; k < K; ++k) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        X(i, k * d + j) = xs[k][i * d + j];
        Y(i, k * d + j) = ys[k][i * d + j];
      }
    xscale = std::max(xscale, xs[k].norm());
  }
  const double scale = std::max(1.0, xscale);

  RecoveryResult out;
  // averages must match exactly up to tolerance
  Eigen::RowVectorXd mx = X.colwise().mean(), my = Y.colwise().mean();
  if ((mx - my).norm() > tol * scale) {
    out.residual = (mx - my).norm() / scale;
    return out;
  }

  Eigen::MatrixXd V = consensus_complement_basis(n);
  Eigen::MatrixXd Xd = V.transpose() * X, Yd = V.transpose() * Y;
  const int r0 = n - 1;

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Xd, Eigen::ComputeFullU | Eigen::ComputeThinV);
  int rank = 0;
  double smax = svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
  for (int i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()[i] > 1e-10 * std::max(smax, 1.0)) ++rank;

  Eigen::MatrixXd T = Eigen::MatrixXd::Identity(r0, r0);
  Eigen::MatrixXd C;
  if (rank > 0) {
    Eigen::MatrixXd Ur = svd.matrixU().leftCols(rank);
    C = Yd * svd.matrixV().leftCols(rank) *
        svd.singularValues().head(rank).cwiseInverse().asDiagonal();
    if (rank < r0) {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(Ur);
      Eigen::MatrixXd full = qr.householderQ();
      T.leftCols(rank) = Ur;
      T.rightCols(r0 - rank) = full.rightCols(r0 - rank);
    } else {
      T = Ur;
    }
  }

  auto project_affine = [&](const Eigen::MatrixXd& S) {
    if (rank == 0) return S;
    Eigen::MatrixXd Sh = T.transpose() * S * T;
    Eigen::MatrixXd Ch = T.transpose() * C;  // rows: r0, cols: rank
    Eigen::MatrixXd C1 = Ch.topRows(rank);
    Sh.topLeftCorner(rank, rank) = 0.5 * (C1 + C1.transpose());
    if (rank < r0) {
      Eigen::MatrixXd C2 = Ch.bottomRows(r0 - rank);
      Sh.bottomLeftCorner(r0 - rank, rank) = C2;
      Sh.topRightCorner(rank, r0 - rank) = C2.transpose();
    }
    return Eigen::MatrixXd(T * Sh * T.transpose());
  };
  auto project_box = [&](const Eigen::MatrixXd& S) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) ev[i] = std::clamp(ev[i], cls.lam_minus, cls.lam_plus);
    return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
  };

  Eigen::MatrixXd S = project_affine(Eigen::MatrixXd::Zero(r0, r0));
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(r0, r0), q = Eigen::MatrixXd::Zero(r0, r0);
  for (int it = 0; it < 600; ++it) {
    Eigen::MatrixXd yb = project_box(S + p);
    p = S + p - yb;
    Eigen::MatrixXd Sn = project_affine(yb + q);
    q = yb + q - Sn;
    double delta = (Sn - S).norm();
    S = Sn;
    if (delta < 1e-13 * std::max(1.0, S.norm())) break;
  }

  {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()),
                                                      Eigen::EigenvaluesOnly);
    double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
    out.spectral_violation = std::max({0.0, cls.lam_minus - lo, hi - cls.lam_plus});
  }
  S = project_box(S);

  Eigen::MatrixXd W =
      Eigen::MatrixXd::Constant(n, n, 1.0 / n) + V * S * V.transpose();
  double res = 0;
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd Xk(n, d), Yk(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        Xk(i, j) = xs[k][i * d + j];
        Yk(i, j) = ys[k][i * d + j];
      }
    res = std::max(res, (Yk - W * Xk).norm() / std::max(1.0, xs[k].norm()));
  }
  out.residual = res;
  if (res <= tol) out.W = W;
  return out;
}

// Two rank-one interpolable Gram matrices whose midpoint is not
// interpolable: the input block keeps rank one while the output block of the
// midpoint has rank two.
struct NonconvexityFixture {
  Eigen::VectorXd x, y1, y2;
  Eigen::MatrixXd W1, W2;
  Eigen::MatrixXd G1, G2, G3;
};

inline NonconvexityFixture nonconvexity_fixture(int n, double lam_minus, double lam_plus) {
  if (!(lam_minus < lam_plus)) throw DegenerateFixture("need lam_minus < lam_plus");
  MatrixClass{lam_minus, lam_plus, "fixture"}.validate();
  if (n < 2) throw ShapeError("fixture needs at least two agents");

  NonconvexityFixture f;
  f.x = Eigen::VectorXd::Zero(n);
  f.x[0] = n;
  auto member = [&](double lam) {
    Eigen::MatrixXd W = Eigen::MatrixXd::Constant(n, n, (1.0 - lam) / n);
    W.diagonal().setConstant((1.0 + (n - 1) * lam) / n);
    return W;
  };
  f.W1 = member(lam_minus);
  f.W2 = member(lam_plus);
  f.y1 = f.W1 * f.x;
  f.y2 = f.W2 * f.x;
  auto gram = [&](const Eigen::VectorXd& y) {
    Eigen::MatrixXd G(2 * n, 2 * n);
    G.topLeftCorner(n, n) = f.x * f.x.transpose();
    G.topRightCorner(n, n) = f.x * y.transpose();
    G.bottomLeftCorner(n, n) = y * f.x.transpose();
    G.bottomRightCorner(n, n) = y * y.transpose();
    return G;
  };
  f.G1 = gram(f.y1);
  f.G2 = gram(f.y2);
  f.G3 = 0.5 * (f.G1 + f.G2);
  return f;
}

// Factor a consensus-step Gram matrix [X'X X'Y; Y'X Y'Y] back into stacked
// point pairs of dimension rank(G), for feeding the recovery check.
inline std::pair<std::vector<Eigen::VectorXd>, std::vector<Eigen::VectorXd>> factor_consensus_gram(
    const Eigen::MatrixXd& G, int n, double rank_tol = 1e-9) {
  const int two_n = static_cast<int>(G.rows());
  if (two_n != 2 * n || G.cols() != two_n) throw ShapeError("gram size mismatch");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (G + G.transpose()));
  double emax = es.eigenvalues().cwiseAbs().maxCoeff();
  std::vector<int> keep;
  for (int i = 0; i < es.eigenvalues().size(); ++i) {
    if (es.eigenvalues()[i] < -rank_tol * std::max(emax, 1.0))
      throw NumericalRankError("gram matrix is not positive semidefinite");
    if (es.eigenvalues()[i] > rank_tol * std::max(emax, 1.0)) keep.push_back(i);
  }
  const int d = std::max<int>(1, static_cast<int>(keep.size()));
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(d, two_n);
  for (std::size_t j = 0; j < keep.size(); ++j)
    P.row(j) = std::sqrt(es.eigenvalues()[keep[j]]) * es.eigenvectors().col(keep[j]).transpose();
  // columns 0..n-1 are x_i, n..2n-1 are y_i; restack agent-major
  Eigen::VectorXd xv(n * d), yv(n * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      xv[i * d + j] = P(j, i);
      yv[i * d + j] = P(j, n + i);
    }
  return {{xv}, {yv}};
}

// Spectral sanity checks plus plain power iteration of the consensus map.
inline Eigen::VectorXd simulate_mcl_consensus(const Eigen::MatrixXd& M, const Eigen::VectorXd& x0,
                                              int steps, int n) {
  const int nd = static_cast<int>(M.rows());
  if (M.cols() != nd || x0.size() != nd || n < 2 || nd % n != 0)
    throw ShapeError("consensus operator shape mismatch");
  const int d = nd / n;
  double mscale = std::max(1.0, M.cwiseAbs().maxCoeff());
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-9 * mscale)
    throw NotInMcl("operator is not symmetric");
  // consensus vectors are fixed points
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(nd);
    for (int i = 0; i < n; ++i) v[i * d + j] = 1.0;
    if ((M * v - v).norm() > 1e-8 * v.norm()) throw NotInMcl("consensus subspace not preserved");
  }
  // restriction to the complement is a strict contraction
  Eigen::MatrixXd V = consensus_complement_basis(n);
  Eigen::MatrixXd Vd = Eigen::MatrixXd::Zero(nd, (n - 1) * d);
  for (int c = 0; c < n - 1; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) Vd(i * d + j, c * d + j) = V(i, c);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      Eigen::MatrixXd(Vd.transpose() * M * Vd), Eigen::EigenvaluesOnly);
  if (es.eigenvalues().cwiseAbs().maxCoeff() > 1.0 - 1e-10)
    throw NotInMcl("complement spectrum not strictly inside (-1,1)");

  Eigen::VectorXd x = x0;
  for (int s = 0; s < steps; ++s) x = M * x;
  return x;
}

}  // namespace pepnet

#endif
