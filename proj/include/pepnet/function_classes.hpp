#ifndef PEPNET_FUNCTION_CLASSES_HPP
#define PEPNET_FUNCTION_CLASSES_HPP

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pepnet/scalar_expr.hpp"

namespace pepnet {

// L-smooth mu-strongly convex local functions. L may be +infinity (no
// smoothness) and mu may be 0 (no strong convexity); mu < L always.
struct FunctionClass {
  double mu = 0.0;
  double L = std::numeric_limits<double>::infinity();
  std::string label = "f";

  bool smooth() const { return std::isfinite(L); }
  double kappa() const { return mu > 0 && smooth() ? L / mu : std::numeric_limits<double>::infinity(); }
  void validate() const {
    if (!(mu >= 0.0) || !(L > mu))
      throw InvalidClass(label + ": need 0 <= mu < L, got mu=" + std::to_string(mu));
  }
};

// One sampled point of a local function: position, (sub)gradient, value tag.
struct Triplet {
  VectorExpr x, g;
  std::string f;
};

// Necessary and sufficient conditions for a point set to extend to a member
// of the class, one expression <= 0 per ordered pair. Branches keep the
// L = infinity and mu = 0 limits exact instead of plugging in sentinels.
inline std::vector<ScalarExpr> interpolation_constraints(const FunctionClass& cls,
                                                         const std::vector<Triplet>& ts) {
  cls.validate();
  if (ts.empty()) throw EmptyInterpolationSet(cls.label + ": no triplets");
  const RegistryPtr& reg = ts.front().x.registry();
  int u = ts.front().x.bound_class() ? *ts.front().x.bound_class() : -1;
  for (const auto& t : ts) {
    ts.front().x.check_same(t.x);
    ts.front().x.check_same(t.g);
    int tu = t.x.bound_class() ? *t.x.bound_class() : -1;
    int gu = t.g.bound_class() ? *t.g.bound_class() : -1;
    if (tu != u || gu != u)
      throw InvalidClass(cls.label + ": triplets bound to different classes");
  }

  std::vector<ScalarExpr> out;
  out.reserve(ts.size() * (ts.size() - 1));
  const double c = cls.smooth() ? 1.0 / (2.0 * (1.0 - cls.mu / cls.L)) : 0.5;
  for (std::size_t k = 0; k < ts.size(); ++k)
    for (std::size_t l = 0; l < ts.size(); ++l) {
      if (k == l) continue;
      VectorExpr dx = ts[k].x - ts[l].x;
      VectorExpr dg = ts[k].g - ts[l].g;
      ScalarExpr e = value_of(reg, ts[l].f, u) - value_of(reg, ts[k].f, u) +
                     scalar_product(ts[l].g, dx, Pairing::same_agent, 1.0, u);
      if (cls.smooth()) {
        e += scalar_product(dg, dg, Pairing::same_agent, c / cls.L, u);
        if (cls.mu > 0) {
          e += scalar_product(dx, dx, Pairing::same_agent, c * cls.mu, u);
          e += scalar_product(dg, dx, Pairing::same_agent, -c * 2.0 * cls.mu / cls.L, u);
        }
      } else if (cls.mu > 0) {
        e += scalar_product(dx, dx, Pairing::same_agent, c * cls.mu, u);
      }
      out.push_back(std::move(e));
    }
  return out;
}

}  // namespace pepnet

#endif
