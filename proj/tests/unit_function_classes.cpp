#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pepnet/function_classes.hpp"

using namespace pepnet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

RegistryPtr point_registry(int m) {
  auto reg = std::make_shared<BasisRegistry>();
  for (int j = 0; j < m; ++j) reg->add_column("x" + std::to_string(j));
  for (int j = 0; j < m; ++j) reg->add_column("g" + std::to_string(j));
  for (int j = 0; j < m; ++j) reg->add_value("f" + std::to_string(j));
  return reg;
}

std::vector<Triplet> make_triplets(const RegistryPtr& reg, int m, int cls = -1) {
  std::vector<Triplet> ts;
  for (int j = 0; j < m; ++j) {
    VectorExpr x = VectorExpr::unit(reg, "x" + std::to_string(j));
    VectorExpr g = VectorExpr::unit(reg, "g" + std::to_string(j));
    if (cls >= 0) {
      x = x.bound_to(cls);
      g = g.bound_to(cls);
    }
    ts.push_back({x, g, "f" + std::to_string(j)});
  }
  return ts;
}

// f(x) = 0.5 (x-c)^T H (x-c) + b with spectrum of H inside [mu, L].
struct Quadratic {
  MatrixXd H;
  VectorXd c;
  double b;
  double value(const VectorXd& x) const { return 0.5 * (x - c).dot(H * (x - c)) + b; }
  VectorXd grad(const VectorXd& x) const { return H * (x - c); }
};

Quadratic random_quadratic(std::mt19937_64& rng, int d, double mu, double L) {
  std::normal_distribution<double> g;
  MatrixXd A(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) A(i, j) = g(rng);
  Eigen::HouseholderQR<MatrixXd> qr(A);
  MatrixXd Q = qr.householderQ();
  double hi = std::isfinite(L) ? L : mu + 1.0 + std::abs(g(rng));
  std::uniform_real_distribution<double> ev(mu, hi);
  VectorXd eigs(d);
  for (int i = 0; i < d; ++i) eigs[i] = ev(rng);
  // pin the extremes sometimes so tight cases are exercised
  if (rng() % 3 == 0) eigs[0] = mu;
  if (std::isfinite(L) && rng() % 3 == 0) eigs[d - 1] = L;
  Quadratic q;
  q.H = Q * eigs.asDiagonal() * Q.transpose();
  q.c = VectorXd::NullaryExpr(d, [&](int) { return g(rng); });
  q.b = g(rng);
  return q;
}

}  // namespace

TEST_CASE("ordered pair count and class validation", "[function_classes]") {
  auto reg = point_registry(3);
  auto ts = make_triplets(reg, 3);
  FunctionClass cls{0.1, 1.0, "f"};
  CHECK(interpolation_constraints(cls, ts).size() == 6);
  CHECK(interpolation_constraints(FunctionClass{0.0, 2.5}, ts).size() == 6);

  CHECK_THROWS_AS(interpolation_constraints(FunctionClass{1.0, 1.0}, ts), InvalidClass);
  CHECK_THROWS_AS(interpolation_constraints(FunctionClass{2.0, 1.0}, ts), InvalidClass);
  CHECK_THROWS_AS(interpolation_constraints(FunctionClass{-0.5, 1.0}, ts), InvalidClass);
  CHECK_THROWS_AS(interpolation_constraints(cls, {}), EmptyInterpolationSet);

  auto mixed = make_triplets(reg, 2, 0);
  mixed[1].x = mixed[1].x.bound_to(1);
  CHECK_THROWS_AS(interpolation_constraints(cls, mixed), InvalidClass);
}

TEST_CASE("two-point tightness for the normalized quadratic", "[function_classes]") {
  // f(x) = x^2/2 with mu=0.1, L=1 sampled at x=0 and x=1: both ordered
  // constraints are tight, value 0.5 on each side of the inequality.
  auto reg = point_registry(2);
  auto ts = make_triplets(reg, 2);
  auto cons = interpolation_constraints(FunctionClass{0.1, 1.0}, ts);
  REQUIRE(cons.size() == 2);

  ExplicitInstanceData inst;
  inst.agent_class = {0};
  MatrixXd P(1, 4);
  P << 0.0, 1.0, 0.0, 1.0;  // x0 x1 g0 g1
  inst.P = {P};
  VectorXd fv(2);
  fv << 0.0, 0.5;
  inst.values = {fv};
  for (const auto& e : cons) CHECK(evaluate(e, inst) == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("convexity-only limit drops curvature terms", "[function_classes]") {
  auto reg = point_registry(2);
  auto ts = make_triplets(reg, 2);
  auto cons = interpolation_constraints(FunctionClass{0.0, std::numeric_limits<double>::infinity()}, ts);
  REQUIRE(cons.size() == 2);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 10; ++trial) {
    ExplicitInstanceData inst;
    inst.agent_class = {0};
    MatrixXd P(3, 4);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) P(i, j) = g(rng);
    inst.P = {P};
    VectorXd fv(2);
    fv << g(rng), g(rng);
    inst.values = {fv};
    // first constraint has (k,l) = (0,1): f1 - f0 + <g1, x0-x1>
    VectorXd x0 = P.col(0), x1 = P.col(1), g1 = P.col(3);
    double hand = fv[1] - fv[0] + g1.dot(x0 - x1);
    CHECK(evaluate(cons[0], inst) == Catch::Approx(hand).margin(1e-12));
  }
}

TEST_CASE("constraints hold on random class members", "[function_classes]") {
  std::mt19937_64 rng(2026);
  std::normal_distribution<double> gs;
  struct Case {
    double mu, L;
  };
  std::vector<Case> cases = {{0.1, 1.0},
                             {0.0, 1.0},
                             {1.0, 10.0},
                             {0.0, std::numeric_limits<double>::infinity()},
                             {0.5, std::numeric_limits<double>::infinity()}};
  int done = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Case& cs = cases[trial % cases.size()];
    int d = 1 + static_cast<int>(rng() % 4);
    int m = 2 + static_cast<int>(rng() % 3);
    Quadratic q = random_quadratic(rng, d, cs.mu, cs.L);

    auto reg = point_registry(m);
    auto ts = make_triplets(reg, m);
    auto cons = interpolation_constraints(FunctionClass{cs.mu, cs.L}, ts);
    REQUIRE(cons.size() == static_cast<std::size_t>(m * (m - 1)));

    ExplicitInstanceData inst;
    inst.agent_class = {0};
    MatrixXd P(d, 2 * m);
    VectorXd fv(m);
    for (int j = 0; j < m; ++j) {
      VectorXd x = VectorXd::NullaryExpr(d, [&](int) { return gs(rng); });
      P.col(j) = x;
      P.col(m + j) = q.grad(x);
      fv[j] = q.value(x);
    }
    inst.P = {P};
    inst.values = {fv};
    for (const auto& e : cons) CHECK(evaluate(e, inst) <= 1e-10);
    ++done;
  }
  CHECK(done == 100);
}

TEST_CASE("class-bound triplets average over the class members", "[function_classes]") {
  // Two agents in class 0 with different quadratics: the compiled constraint
  // is the average of the per-agent inequalities.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gs;
  int d = 2, m = 2;
  Quadratic q1 = random_quadratic(rng, d, 0.2, 2.0);
  Quadratic q2 = random_quadratic(rng, d, 0.2, 2.0);

  auto reg = point_registry(m);
  auto ts = make_triplets(reg, m, 0);
  auto cons = interpolation_constraints(FunctionClass{0.2, 2.0}, ts);

  ExplicitInstanceData inst;
  inst.agent_class = {0, 0};
  inst.P.resize(2);
  inst.values.resize(2);
  std::vector<const Quadratic*> qs = {&q1, &q2};
  std::vector<double> per_agent(cons.size(), 0.0);
  for (int i = 0; i < 2; ++i) {
    MatrixXd P(d, 2 * m);
    VectorXd fv(m);
    for (int j = 0; j < m; ++j) {
      VectorXd x = VectorXd::NullaryExpr(d, [&](int) { return gs(rng); });
      P.col(j) = x;
      P.col(m + j) = qs[i]->grad(x);
      fv[j] = qs[i]->value(x);
    }
    inst.P[i] = P;
    inst.values[i] = fv;
  }
  // hand-average the (k,l) = (0,1) inequality with full curvature terms
  double c = 1.0 / (2.0 * (1.0 - 0.2 / 2.0));
  double avg = 0;
  for (int i = 0; i < 2; ++i) {
    VectorXd x0 = inst.P[i].col(0), x1 = inst.P[i].col(1);
    VectorXd g0 = inst.P[i].col(2), g1 = inst.P[i].col(3);
    VectorXd dx = x0 - x1, dg = g0 - g1;
    avg += inst.values[i][1] - inst.values[i][0] + g1.dot(dx) + (c / 2.0) * dg.squaredNorm() +
           c * 0.2 * dx.squaredNorm() - c * (2.0 * 0.2 / 2.0) * dg.dot(dx);
  }
  avg /= 2.0;
  CHECK(evaluate(cons[0], inst) == Catch::Approx(avg).margin(1e-12));
  CHECK(evaluate(cons[0], inst) <= 1e-10);
}
