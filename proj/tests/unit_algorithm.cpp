#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pepnet/algorithm.hpp"
#include "pepnet/rng.hpp"

using namespace pepnet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// f_i(x) = 0.5 (x - c_i)^T H_i (x - c_i)
struct Quadratic {
  MatrixXd H;
  VectorXd c;
  VectorXd grad(const VectorXd& x) const { return H * (x - c); }
  double value(const VectorXd& x) const { return 0.5 * (x - c).dot(H * (x - c)); }
};

MatrixXd random_orthogonal(int d, std::mt19937_64& rng) {
  MatrixXd A(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) A(i, j) = gauss(rng);
  Eigen::HouseholderQR<MatrixXd> qr(A);
  MatrixXd Q = qr.householderQ();
  return Q;
}

// n quadratics with spectra in [mu, L] whose average is minimized at the
// origin (sum of H_i c_i vanishes through the last center).
std::vector<Quadratic> random_instance(int n, int d, double mu, double L,
                                       std::mt19937_64& rng) {
  std::vector<Quadratic> fs;
  VectorXd accum = VectorXd::Zero(d);
  for (int i = 0; i < n; ++i) {
    MatrixXd Q = random_orthogonal(d, rng);
    VectorXd ev(d);
    for (int j = 0; j < d; ++j) ev[j] = uniform(rng, mu, L);
    Quadratic f;
    f.H = Q * ev.asDiagonal() * Q.transpose();
    if (i + 1 < n) {
      f.c = VectorXd::NullaryExpr(d, [&](Eigen::Index) { return gauss(rng); });
      accum += f.H * f.c;
    } else {
      f.c = -f.H.ldlt().solve(accum);
    }
    fs.push_back(std::move(f));
  }
  return fs;
}

ReplayOracles oracles_for(const std::vector<Quadratic>& fs) {
  return {[&fs](int i, const VectorXd& x) { return fs[i].grad(x); },
          [&fs](int i, const VectorXd& x) { return fs[i].value(x); }};
}

// Direct recursions, written against the update equations rather than the
// trace machinery.
std::vector<MatrixXd> simulate_dgd(const std::vector<Quadratic>& fs, const MatrixXd& W,
                                   const MatrixXd& starts, const StepSchedule& alpha,
                                   const std::vector<int>& cls) {
  std::vector<MatrixXd> xs{starts};  // d x n per iteration
  const int n = static_cast<int>(fs.size());
  for (const auto& a : alpha) {
    const MatrixXd& X = xs.back();
    MatrixXd Y = X * W.transpose();
    MatrixXd next(X.rows(), n);
    for (int i = 0; i < n; ++i) {
      double ai = a.size() == 1 ? a[0] : a[cls[i]];
      next.col(i) = Y.col(i) - ai * fs[i].grad(X.col(i));
    }
    xs.push_back(next);
  }
  return xs;
}

std::vector<MatrixXd> simulate_extra(const std::vector<Quadratic>& fs, const MatrixXd& W,
                                     const MatrixXd& starts, double alpha, int K) {
  const int n = static_cast<int>(fs.size());
  auto grads = [&](const MatrixXd& X) {
    MatrixXd G(X.rows(), n);
    for (int i = 0; i < n; ++i) G.col(i) = fs[i].grad(X.col(i));
    return G;
  };
  std::vector<MatrixXd> xs{starts};
  xs.push_back(starts * W.transpose() - alpha * grads(starts));
  while (static_cast<int>(xs.size()) <= K) {
    const MatrixXd& Xk = xs[xs.size() - 2];
    const MatrixXd& Xk1 = xs.back();
    xs.push_back(Xk1 + Xk1 * W.transpose() - 0.5 * (Xk * W.transpose() + Xk) -
                 alpha * (grads(Xk1) - grads(Xk)));
  }
  return xs;
}

VectorXd combo_coeffs(const AlgorithmTrace& t, const std::string& tag, int cls = 0) {
  return variant_at(t.point(tag), cls).coeffs();
}

}  // namespace

TEST_CASE("built-in unrolls have the expected shape", "[algorithm]") {
  SECTION("one round of averaged gradient descent") {
    auto trace = unroll(build_dgd(1, 0.5));
    CHECK(trace.num_columns() == 4);
    CHECK(trace.num_values() == 2);
    CHECK(trace.consensus_sets.size() == 1);
    CHECK(trace.consensus_sets.at("W").pairs.size() == 1);
    CHECK(trace.gradient_triplets().size() == 2);
    CHECK(trace.registry->has_column("x0"));
    CHECK(trace.registry->has_column("y0"));
    CHECK(trace.registry->has_column("g0"));
    CHECK(trace.registry->has_column("gstar"));
    CHECK(trace.final_point == "x1");
    CHECK(trace.has_point("x1"));
  }

  SECTION("iterations share one averaging matrix") {
    auto trace = unroll(build_dgd(3, 1.0));
    REQUIRE(trace.consensus_sets.size() == 1);
    CHECK(trace.consensus_sets.at("W").pairs.size() == 3);
  }

  SECTION("column and value counts grow linearly") {
    for (int K = 1; K <= 5; ++K) {
      auto dgd = unroll(build_dgd(K, 0.1));
      CHECK(dgd.num_columns() == 2 * K + 2);
      CHECK(dgd.num_values() == K + 1);
      auto extra = unroll(build_extra(K, 0.1));
      CHECK(extra.num_columns() == 2 * K + 2);
      CHECK(extra.num_values() == K + 1);
      CHECK(extra.consensus_sets.at("W").pairs.size() == static_cast<std::size_t>(K));
    }
    CHECK(unroll(build_extra(15, 0.25)).consensus_sets.at("W").pairs.size() == 15);
  }

  SECTION("varying schedules are accepted") {
    StepSchedule sched;
    for (int k = 0; k < 4; ++k) sched.push_back({1.0 / std::sqrt(k + 1.0)});
    auto trace = unroll(build_dgd(4, sched));
    auto reg = trace.registry;
    VectorXd x2 = combo_coeffs(trace, "x2");
    CHECK(x2[reg->column("y1")] == 1.0);
    CHECK(x2[reg->column("g1")] == Catch::Approx(-1.0 / std::sqrt(2.0)));
  }

  SECTION("invalid parameters are rejected") {
    CHECK_THROWS_AS(build_dgd(3, 0.0), InvalidStepSize);
    CHECK_THROWS_AS(build_dgd(2, StepSchedule{{0.5}, {-0.1}}), InvalidStepSize);
    CHECK_THROWS_AS(build_dgd(2, StepSchedule{{0.5}}), InvalidStepSize);
    CHECK_THROWS_AS(build_dgd(2, StepSchedule{{0.5}, {}}), InvalidStepSize);
    CHECK_THROWS_AS(build_dgd(0, 1.0), ShapeError);
    CHECK_THROWS_AS(build_extra(2, -0.25), InvalidStepSize);
    CHECK_THROWS_AS(build_extra(0, 0.25), ShapeError);
  }
}

TEST_CASE("unrolled iterate combinations match the update equations", "[algorithm]") {
  SECTION("first step") {
    auto trace = unroll(build_extra(1, 0.3));
    auto reg = trace.registry;
    VectorXd x1 = combo_coeffs(trace, "x1");
    VectorXd want = VectorXd::Zero(reg->num_columns());
    want[reg->column("wx0")] = 1.0;
    want[reg->column("g0")] = -0.3;
    CHECK((x1 - want).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SECTION("two steps with the folded second matrix") {
    auto trace = unroll(build_extra(2, 0.25));
    auto reg = trace.registry;
    VectorXd x2 = combo_coeffs(trace, "x2");
    VectorXd want = VectorXd::Zero(reg->num_columns());
    // x2 = x1 + wx1 - (wx0 + x0)/2 - 0.25 (g1 - g0) with x1 = wx0 - 0.25 g0
    want[reg->column("x0")] = -0.5;
    want[reg->column("wx0")] = 0.5;
    want[reg->column("wx1")] = 1.0;
    want[reg->column("g1")] = -0.25;
    CHECK((x2 - want).lpNorm<Eigen::Infinity>() < 1e-15);
  }

  SECTION("per-class step sizes produce per-class iterates") {
    StepSchedule sched{{0.1, 0.2}, {0.3, 0.4}};
    auto trace = unroll(build_dgd(2, sched));
    auto reg = trace.registry;
    REQUIRE(trace.point("x1").size() == 2);
    REQUIRE(trace.point("x2").size() == 2);
    CHECK(combo_coeffs(trace, "x1", 0)[reg->column("g0")] == Catch::Approx(-0.1));
    CHECK(combo_coeffs(trace, "x1", 1)[reg->column("g0")] == Catch::Approx(-0.2));
    CHECK(combo_coeffs(trace, "x2", 0)[reg->column("g1")] == Catch::Approx(-0.3));
    CHECK(combo_coeffs(trace, "x2", 1)[reg->column("g1")] == Catch::Approx(-0.4));

    auto bound = trace.gradient_triplets(1);
    REQUIRE(bound.size() == 3);
    CHECK(bound[1].x.bound_class() == 1);
    CHECK(bound[1].g.bound_class() == 1);
    CHECK_THROWS_AS(trace.gradient_triplets(), InvalidClass);
  }

  SECTION("per-class variants bind per class in triplets") {
    auto trace = unroll(build_extra(2, std::vector<double>{0.1, 0.5}));
    auto t0 = trace.gradient_triplets(0);
    auto t1 = trace.gradient_triplets(1);
    REQUIRE(t0.size() == t1.size());
    CHECK(t0[1].x.coeffs()[trace.registry->column("g0")] == Catch::Approx(-0.1));
    CHECK(t1[1].x.coeffs()[trace.registry->column("g0")] == Catch::Approx(-0.5));
    CHECK(t0.back().x.coeffs().norm() == 0.0);
  }
}

TEST_CASE("combinations fold without new columns and bad references throw", "[algorithm]") {
  AlgorithmSpec spec;
  spec.name = "toy";
  spec.steps.push_back(GradientEval{"x0", "g0", "f0"});
  spec.steps.push_back(Combine{"z", {{{2.0}, "x0"}, {{-1.0}, "g0"}}});
  spec.steps.push_back(Combine{"t", {{{0.5}, "z"}}});
  auto trace = unroll(spec);
  CHECK(trace.num_columns() == 3);  // x0, g0, gstar
  auto reg = trace.registry;
  VectorXd z = combo_coeffs(trace, "z");
  CHECK(z[reg->column("x0")] == 2.0);
  CHECK(z[reg->column("g0")] == -1.0);
  VectorXd t = combo_coeffs(trace, "t");
  CHECK(t[reg->column("x0")] == 1.0);
  CHECK(t[reg->column("g0")] == -0.5);

  SECTION("unknown references") {
    AlgorithmSpec bad1;
    bad1.steps.push_back(GradientEval{"nope", "g0", "f0"});
    CHECK_THROWS_AS(unroll(bad1), DanglingReference);

    AlgorithmSpec bad2;
    bad2.steps.push_back(Consensus{"W", "nope", "y0"});
    CHECK_THROWS_AS(unroll(bad2), DanglingReference);

    AlgorithmSpec bad3;
    bad3.steps.push_back(Combine{"z", {{{1.0}, "nope"}}});
    CHECK_THROWS_AS(unroll(bad3), DanglingReference);

    CHECK_THROWS_AS(unroll(build_dgd(1, 0.5), {{CommonPointKind::agent_average, "x7"}}),
                    DanglingReference);
  }

  SECTION("conflicting and malformed definitions") {
    AlgorithmSpec bad;
    bad.steps.push_back(Combine{"x0", {{{1.0}, "x0"}}});
    CHECK_THROWS_AS(unroll(bad), DuplicateTag);

    AlgorithmSpec empty_terms;
    empty_terms.steps.push_back(Combine{"z", {}});
    CHECK_THROWS_AS(unroll(empty_terms), ShapeError);

    AlgorithmSpec empty_coeff;
    empty_coeff.steps.push_back(Combine{"z", {{{}, "x0"}}});
    CHECK_THROWS_AS(unroll(empty_coeff), ShapeError);

    AlgorithmSpec mixed;
    mixed.steps.push_back(Combine{"z", {{{1.0, 2.0}, "x0"}}});
    mixed.steps.push_back(Combine{"w", {{{1.0, 2.0, 3.0}, "x0"}, {{1.0}, "z"}}});
    CHECK_THROWS_AS(unroll(mixed), ShapeError);
  }

  SECTION("declared free points get columns") {
    AlgorithmSpec prox;
    prox.free_points = {"z0"};
    prox.steps.push_back(GradientEval{"z0", "g0", "f0"});
    auto t2 = unroll(prox);
    CHECK(t2.num_columns() == 4);  // x0, z0, g0, gstar
    CHECK(t2.gradient_triplets()[0].x.coeffs()[t2.registry->column("z0")] == 1.0);
  }
}

TEST_CASE("metric-driven augmentation records common points", "[algorithm]") {
  auto trace =
      unroll(build_extra(2, 0.25), {{CommonPointKind::agent_average, "x2"}});
  CHECK(trace.num_columns() == 8);
  CHECK(trace.num_values() == 4);
  REQUIRE(trace.common_points.size() == 1);
  const auto& cp = trace.common_points[0];
  CHECK(cp.of == "x2");
  CHECK(cp.point_tag == "xc");
  CHECK(cp.grad_tag == "gc");
  CHECK(cp.value_tag == "fc");

  auto trips = trace.gradient_triplets();
  REQUIRE(trips.size() == 4);  // g0, g1, common, optimum
  CHECK(trips[2].x.coeffs()[trace.registry->column("xc")] == 1.0);
  CHECK(trips[2].f == "fc");
  CHECK(trips[3].f == "fstar");

  auto two = unroll(build_dgd(1, 0.5), {{CommonPointKind::agent_average, "x1"},
                                        {CommonPointKind::specific_agent, "x1", 0}});
  CHECK(two.num_columns() == 4 + 4);
  CHECK(two.common_points[1].point_tag == "xc_1");
  CHECK(two.common_points[1].anchor_class == 0);
}

TEST_CASE("trace replay reproduces direct simulation", "[algorithm]") {
  std::mt19937_64 rng(2203);
  const int n = 3, d = 4;
  auto fs = random_instance(n, d, 0.1, 1.0, rng);
  MatrixXd W = random_averaging_matrix(n, MatrixClass{-0.5, 0.5, "W"}, rng);
  MatrixXd starts(d, n);
  for (int i = 0; i < n; ++i)
    starts.col(i) = VectorXd::NullaryExpr(d, [&](Eigen::Index) { return gauss(rng); });
  std::vector<int> uniform_cls(n, 0);

  SECTION("averaged gradient descent with a varying schedule") {
    StepSchedule sched{{0.3}, {0.2}, {0.1}};
    auto trace = unroll(build_dgd(3, sched));
    auto inst = replay_trace(trace, oracles_for(fs), {{"W", W}},
                             {starts.col(0), starts.col(1), starts.col(2)});
    auto direct = simulate_dgd(fs, W, starts, sched, uniform_cls);
    for (int k = 0; k <= 3; ++k) {
      VectorXd combo = combo_coeffs(trace, "x" + std::to_string(k));
      for (int i = 0; i < n; ++i)
        CHECK((inst.P[i] * combo - direct[k].col(i)).norm() < 1e-12);
    }
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < n; ++i) {
        CHECK((inst.P[i].col(trace.registry->column("g" + std::to_string(k))) -
               fs[i].grad(direct[k].col(i)))
                  .norm() < 1e-12);
        CHECK(inst.values[i][trace.registry->value("f" + std::to_string(k))] ==
              Catch::Approx(fs[i].value(direct[k].col(i))).margin(1e-12));
      }
  }

  SECTION("per-class step sizes") {
    StepSchedule sched{{0.3, 0.05}, {0.2, 0.15}};
    std::vector<int> cls{0, 1, 1};
    auto trace = unroll(build_dgd(2, sched));
    auto inst = replay_trace(trace, oracles_for(fs), {{"W", W}},
                             {starts.col(0), starts.col(1), starts.col(2)}, cls);
    auto direct = simulate_dgd(fs, W, starts, sched, cls);
    for (int k = 0; k <= 2; ++k)
      for (int i = 0; i < n; ++i) {
        VectorXd combo = combo_coeffs(trace, "x" + std::to_string(k), cls[i]);
        CHECK((inst.P[i] * combo - direct[k].col(i)).norm() < 1e-12);
      }
  }

  SECTION("one-extra-consensus recursion with common-point needs") {
    const double alpha = 0.25;
    const int K = 4;
    auto trace = unroll(build_extra(K, alpha), {{CommonPointKind::agent_average, "x4"},
                                                {CommonPointKind::specific_agent, "x4", 0}});
    auto inst = replay_trace(trace, oracles_for(fs), {{"W", W}},
                             {starts.col(0), starts.col(1), starts.col(2)});
    auto direct = simulate_extra(fs, W, starts, alpha, K);
    for (int k = 0; k <= K; ++k) {
      VectorXd combo = combo_coeffs(trace, "x" + std::to_string(k));
      for (int i = 0; i < n; ++i)
        CHECK((inst.P[i] * combo - direct[k].col(i)).norm() < 1e-12);
    }
    VectorXd xbar = direct[K].rowwise().mean();
    for (int i = 0; i < n; ++i) {
      CHECK((inst.P[i].col(trace.registry->column("xc")) - xbar).norm() < 1e-12);
      CHECK((inst.P[i].col(trace.registry->column("gc")) - fs[i].grad(xbar)).norm() < 1e-12);
      CHECK(inst.values[i][trace.registry->value("fc")] ==
            Catch::Approx(fs[i].value(xbar)).margin(1e-12));
      CHECK((inst.P[i].col(trace.registry->column("xc_1")) - direct[K].col(0)).norm() < 1e-12);
      CHECK((inst.P[i].col(trace.registry->column("gstar")) -
             fs[i].grad(VectorXd::Zero(d)))
                .norm() < 1e-12);
    }
  }

  SECTION("replayed data satisfies the consensus relaxation") {
    auto trace = unroll(build_extra(3, 0.25));
    auto inst = replay_trace(trace, oracles_for(fs), {{"W", W}},
                             {starts.col(0), starts.col(1), starts.col(2)});
    ConsensusSet set = trace.consensus_sets.at("W");
    set.mclass = MatrixClass{-0.5, 0.5, "W"};
    auto cons = consensus_constraints(set);
    CHECK(std::abs(evaluate(cons.average_preservation, inst)) < 1e-12);
    for (const auto& row : cons.lmi)
      for (const auto& e : row) CHECK(std::isfinite(evaluate(e, inst)));
    MatrixXd lmi(cons.lmi.size(), cons.lmi.size());
    for (std::size_t a = 0; a < cons.lmi.size(); ++a)
      for (std::size_t b = 0; b < cons.lmi.size(); ++b)
        lmi(a, b) = evaluate(cons.lmi[a][b], inst);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(lmi);
    CHECK(es.eigenvalues().maxCoeff() < 1e-10);
    for (const auto& e : cons.symmetry) CHECK(std::abs(evaluate(e, inst)) < 1e-12);
  }

  SECTION("forward references cannot be executed") {
    AlgorithmSpec prox;
    prox.free_points = {"z0"};
    prox.steps.push_back(GradientEval{"z0", "g0", "f0"});
    auto t2 = unroll(prox);
    CHECK_THROWS_AS(replay_trace(t2, oracles_for(fs), {}, {starts.col(0), starts.col(1)}),
                    DanglingReference);
  }
}

TEST_CASE("exact averaging with identical functions collapses to centralized descent",
          "[algorithm]") {
  std::mt19937_64 rng(77);
  const int d = 3;
  auto fs = random_instance(1, d, 0.1, 1.0, rng);
  fs[0].c = VectorXd::Zero(d);
  std::vector<Quadratic> both{fs[0], fs[0]};
  MatrixXd W = MatrixXd::Constant(2, 2, 0.5);
  VectorXd x0 = VectorXd::NullaryExpr(d, [&](Eigen::Index) { return gauss(rng); });

  const double alpha = 0.3;
  const int K = 5;
  VectorXd z = x0;
  std::vector<VectorXd> central{z};
  for (int k = 0; k < K; ++k) {
    z = z - alpha * both[0].grad(z);
    central.push_back(z);
  }

  for (const auto& spec : {build_extra(K, alpha), build_dgd(K, alpha)}) {
    auto trace = unroll(spec);
    auto inst = replay_trace(trace, oracles_for(both), {{"W", W}}, {x0, x0});
    for (int k = 0; k <= K; ++k) {
      VectorXd combo = combo_coeffs(trace, "x" + std::to_string(k));
      CHECK((inst.P[0] * combo - central[k]).norm() < 1e-12);
      CHECK((inst.P[1] * combo - central[k]).norm() < 1e-12);
    }
  }
}
