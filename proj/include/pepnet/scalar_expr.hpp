#ifndef PEPNET_SCALAR_EXPR_HPP
#define PEPNET_SCALAR_EXPR_HPP

#include <Eigen/Dense>
#include <map>
#include <tuple>
#include <vector>

#include "pepnet/basis.hpp"
#include "pepnet/partition.hpp"

namespace pepnet {

// How a bilinear product of two per-agent vectors is aggregated over agents.
//   same_agent u == -1 : (1/N)     sum_i     <a_i, b_i>
//   same_agent u >= 0  : (1/N_u)   sum_{i in V_u} <a_i, b_i>
//   cross_agent        : (1/N^2)   sum_{i,j} <a_i, b_j>
//   class_pair (u,v)   : (1/(N_u N_v)) sum_{i in V_u, j in V_v} <a_i, b_j>
enum class Pairing { same_agent, cross_agent, class_pair };

struct GramTerm {
  // One coefficient vector shared by all classes, or one per class.
  std::vector<Eigen::VectorXd> a, b;
  Pairing pairing = Pairing::same_agent;
  int u = -1, v = -1;
  double coeff = 1.0;

  const Eigen::VectorXd& a_at(int cls) const { return a.size() == 1 ? a[0] : a.at(cls); }
  const Eigen::VectorXd& b_at(int cls) const { return b.size() == 1 ? b[0] : b.at(cls); }
  bool uniform() const { return a.size() == 1 && b.size() == 1; }
};

struct ValueTerm {
  int tag = -1;
  int u = -1;  // -1: averaged over all agents, otherwise class average
  double coeff = 1.0;
};

// Affine functional of the collective quadratic data (agent pairings) and of
// the per-agent function values.
class ScalarExpr {
 public:
  ScalarExpr() = default;
  explicit ScalarExpr(RegistryPtr reg, double constant = 0.0)
      : reg_(std::move(reg)), constant_(constant) {}

  const RegistryPtr& registry() const { return reg_; }
  const std::vector<GramTerm>& gram_terms() const { return gram_; }
  const std::vector<ValueTerm>& value_terms() const { return vals_; }
  double constant() const { return constant_; }
  double& constant() { return constant_; }

  void add_gram(GramTerm t) {
    if (t.coeff == 0.0) return;
    gram_.push_back(std::move(t));
  }
  void add_value(int tag, int u, double coeff) {
    if (coeff == 0.0) return;
    vals_.push_back({tag, u, coeff});
  }

  ScalarExpr& operator+=(const ScalarExpr& o) {
    merge_registry(o);
    for (const auto& t : o.gram_) gram_.push_back(t);
    for (const auto& t : o.vals_) vals_.push_back(t);
    constant_ += o.constant_;
    return *this;
  }
  ScalarExpr& operator-=(const ScalarExpr& o) { return *this += -1.0 * o; }
  ScalarExpr& operator*=(double s) {
    for (auto& t : gram_) t.coeff *= s;
    for (auto& t : vals_) t.coeff *= s;
    constant_ *= s;
    return *this;
  }
  friend ScalarExpr operator+(ScalarExpr a, const ScalarExpr& b) { return a += b; }
  friend ScalarExpr operator-(ScalarExpr a, const ScalarExpr& b) { return a -= b; }
  friend ScalarExpr operator*(double s, ScalarExpr a) { return a *= s; }
  friend ScalarExpr operator*(ScalarExpr a, double s) { return a *= s; }

  bool has_registry() const { return reg_ != nullptr; }

 private:
  void merge_registry(const ScalarExpr& o) {
    if (!reg_) reg_ = o.reg_;
    else if (o.reg_ && o.reg_ != reg_)
      throw RegistryMismatch("scalar expressions from different registries");
  }

  RegistryPtr reg_;
  std::vector<GramTerm> gram_;
  std::vector<ValueTerm> vals_;
  double constant_ = 0.0;
};

inline ScalarExpr scalar_product(const VectorExpr& a, const VectorExpr& b, Pairing pairing,
                                 double coeff = 1.0, int u = -1, int v = -1) {
  a.check_same(b);
  if (pairing == Pairing::class_pair) {
    if (u < 0 && a.bound_class()) u = *a.bound_class();
    if (v < 0 && b.bound_class()) v = *b.bound_class();
    if (u < 0 || v < 0) throw InvalidClass("class-pair product without class indices");
  } else if (pairing == Pairing::same_agent) {
    if (u < 0 && a.bound_class()) u = *a.bound_class();
  }
  ScalarExpr e(a.registry());
  GramTerm t;
  t.a = {a.coeffs()};
  t.b = {b.coeffs()};
  t.pairing = pairing;
  t.u = u;
  t.v = v;
  t.coeff = coeff;
  e.add_gram(std::move(t));
  return e;
}

// Per-class variants of the paired vectors (heterogeneous algorithm
// parameters give each class its own coefficient vector).
inline ScalarExpr scalar_product_variant(const std::vector<VectorExpr>& a,
                                         const std::vector<VectorExpr>& b, Pairing pairing,
                                         double coeff = 1.0, int u = -1, int v = -1) {
  if (a.empty() || b.empty()) throw EmptyBasis("variant product of nothing");
  if (a.size() != b.size()) throw ShapeError("variant lists of different lengths");
  ScalarExpr e(a.front().registry());
  GramTerm t;
  for (const auto& x : a) {
    a.front().check_same(x);
    t.a.push_back(x.coeffs());
  }
  for (const auto& x : b) {
    a.front().check_same(x);
    t.b.push_back(x.coeffs());
  }
  t.pairing = pairing;
  t.u = u;
  t.v = v;
  t.coeff = coeff;
  e.add_gram(std::move(t));
  return e;
}

// (1/N) sum_i <a_i - abar, b_i - bbar>: average spread pairing.
inline ScalarExpr centered_product(const VectorExpr& a, const VectorExpr& b, double coeff = 1.0) {
  return scalar_product(a, b, Pairing::same_agent, coeff) -
         scalar_product(a, b, Pairing::cross_agent, coeff);
}

inline ScalarExpr value_of(const RegistryPtr& reg, const std::string& tag, int u = -1,
                           double coeff = 1.0) {
  ScalarExpr e(reg);
  e.add_value(reg->value(tag), u, coeff);
  return e;
}

// ---------------------------------------------------------------------------
// Canonical tag-level expansion (uniform terms only). Key layout:
// (pairing, u, v, tag_a, tag_b) with tag_a <= tag_b for the symmetric
// pairings and (u, tag_a) lexicographically before (v, tag_b) for class
// pairs.
using GramKey = std::tuple<int, int, int, int, int>;

struct TagEntries {
  std::map<GramKey, double> gram;
  std::map<std::pair<int, int>, double> values;  // (tag, u) -> coeff
  double constant = 0.0;
};

inline TagEntries tag_entries(const ScalarExpr& e, double drop_tol = 0.0) {
  TagEntries out;
  out.constant = e.constant();
  for (const auto& t : e.gram_terms()) {
    if (!t.uniform())
      throw ShapeError("tag-level expansion of class-variant term");
    const Eigen::VectorXd& a = t.a[0];
    const Eigen::VectorXd& b = t.b[0];
    for (int ia = 0; ia < a.size(); ++ia) {
      if (a[ia] == 0.0) continue;
      for (int ib = 0; ib < b.size(); ++ib) {
        if (b[ib] == 0.0) continue;
        int u = t.u, v = t.v, ta = ia, tb = ib;
        bool symmetric = t.pairing != Pairing::class_pair || u == v;
        if (symmetric && ta > tb) std::swap(ta, tb);
        if (t.pairing == Pairing::class_pair && !symmetric &&
            std::make_pair(u, ta) > std::make_pair(v, tb)) {
          std::swap(u, v);
          std::swap(ta, tb);
        }
        GramKey key{static_cast<int>(t.pairing), u, v, ta, tb};
        out.gram[key] += t.coeff * a[ia] * b[ib];
      }
    }
  }
  for (const auto& t : e.value_terms()) out.values[{t.tag, t.u}] += t.coeff;
  if (drop_tol > 0) {
    std::erase_if(out.gram, [&](const auto& kv) { return std::abs(kv.second) <= drop_tol; });
    std::erase_if(out.values, [&](const auto& kv) { return std::abs(kv.second) <= drop_tol; });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Direct evaluation against an explicit instance: agent i carries a local
// matrix P[i] (columns = registry columns) and a value vector values[i].
struct ExplicitInstanceData {
  std::vector<Eigen::MatrixXd> P;
  std::vector<Eigen::VectorXd> values;
  std::vector<int> agent_class;
};

inline double evaluate(const ScalarExpr& e, const ExplicitInstanceData& inst) {
  const int n = static_cast<int>(inst.P.size());
  if (n == 0) throw ShapeError("instance without agents");
  std::vector<std::vector<int>> classes;
  for (int i = 0; i < n; ++i) {
    int c = inst.agent_class.empty() ? 0 : inst.agent_class[i];
    if (c >= static_cast<int>(classes.size())) classes.resize(c + 1);
    classes[c].push_back(i);
  }
  auto col = [&](int i, const Eigen::VectorXd& coeffs) -> Eigen::VectorXd {
    return inst.P[i] * coeffs;
  };
  auto cls_of = [&](int i) { return inst.agent_class.empty() ? 0 : inst.agent_class[i]; };

  double acc = e.constant();
  for (const auto& t : e.gram_terms()) {
    double s = 0.0;
    switch (t.pairing) {
      case Pairing::same_agent: {
        if (t.u < 0) {
          for (int i = 0; i < n; ++i) s += col(i, t.a_at(cls_of(i))).dot(col(i, t.b_at(cls_of(i))));
          s /= n;
        } else {
          const auto& members = classes.at(t.u);
          if (members.empty()) throw InvalidClass("empty class in evaluation");
          for (int i : members) s += col(i, t.a_at(t.u)).dot(col(i, t.b_at(t.u)));
          s /= static_cast<double>(members.size());
        }
        break;
      }
      case Pairing::cross_agent: {
        Eigen::VectorXd sa = Eigen::VectorXd::Zero(inst.P[0].rows());
        Eigen::VectorXd sb = sa;
        for (int i = 0; i < n; ++i) {
          sa += col(i, t.a_at(cls_of(i)));
          sb += col(i, t.b_at(cls_of(i)));
        }
        s = sa.dot(sb) / (static_cast<double>(n) * n);
        break;
      }
      case Pairing::class_pair: {
        const auto& mu = classes.at(t.u);
        const auto& mv = classes.at(t.v);
        if (mu.empty() || mv.empty()) throw InvalidClass("empty class in evaluation");
        Eigen::VectorXd sa = Eigen::VectorXd::Zero(inst.P[0].rows());
        Eigen::VectorXd sb = sa;
        for (int i : mu) sa += col(i, t.a_at(t.u));
        for (int j : mv) sb += col(j, t.b_at(t.v));
        s = sa.dot(sb) / (static_cast<double>(mu.size()) * mv.size());
        break;
      }
    }
    acc += t.coeff * s;
  }
  for (const auto& t : e.value_terms()) {
    double s = 0.0;
    if (t.u < 0) {
      for (int i = 0; i < n; ++i) s += inst.values[i][t.tag];
      s /= n;
    } else {
      const auto& members = classes.at(t.u);
      if (members.empty()) throw InvalidClass("empty class in evaluation");
      for (int i : members) s += inst.values[i][t.tag];
      s /= static_cast<double>(members.size());
    }
    acc += t.coeff * s;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Structural audits. An expression is agent-count invariant when every term
// aggregates uniformly over all agents; it is single-agent at class u when it
// only touches the local data of that class.
inline bool is_scale_invariant(const ScalarExpr& e) {
  for (const auto& t : e.gram_terms()) {
    if (t.pairing == Pairing::class_pair) return false;
    if (t.pairing == Pairing::same_agent && t.u >= 0) return false;
  }
  for (const auto& t : e.value_terms())
    if (t.u >= 0) return false;
  return true;
}

inline bool is_single_agent(const ScalarExpr& e, int u) {
  for (const auto& t : e.gram_terms())
    if (t.pairing != Pairing::same_agent || t.u != u) return false;
  for (const auto& t : e.value_terms())
    if (t.u != u) return false;
  return true;
}

}  // namespace pepnet

#endif
