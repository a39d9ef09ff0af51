#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pepnet/metrics.hpp"
#include "pepnet/rng.hpp"

using namespace pepnet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

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
  return qr.householderQ();
}

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

bool has_class_pair(const ScalarExpr& e) {
  for (const auto& t : e.gram_terms())
    if (t.pairing == Pairing::class_pair) return true;
  return false;
}

}  // namespace

TEST_CASE("metric compilation produces the expected aggregate forms", "[metrics]") {
  SECTION("averaged iterate error") {
    auto trace = unroll(build_dgd(2, 0.5));
    auto m = compile_metric({MetricKind::avg_iterate_error}, EquivalencePartition::all_equivalent(4),
                            trace);
    REQUIRE(m.objective.gram_terms().size() == 1);
    CHECK(m.objective.gram_terms()[0].pairing == Pairing::same_agent);
    CHECK(m.objective.gram_terms()[0].u == -1);
    CHECK(m.objective.value_terms().empty());
    CHECK(m.constraints.empty());
    CHECK(m.scale_invariant);
    CHECK(is_scale_invariant(m.objective));
  }

  SECTION("averaged function gap pulls in the mean-point definition") {
    Metric metric{MetricKind::avg_function_gap};
    auto spec = build_extra(2, 0.25);
    auto trace = unroll(spec, metric_trace_needs(metric, spec));
    auto m = compile_metric(metric, EquivalencePartition::all_equivalent(3), trace);
    REQUIRE(m.objective.value_terms().size() == 2);
    CHECK(m.objective.value_terms()[0].u == -1);
    CHECK(m.objective.value_terms()[1].u == -1);
    CHECK(m.objective.value_terms()[0].coeff * m.objective.value_terms()[1].coeff == -1.0);
    REQUIRE(m.constraints.size() == 1);
    CHECK(m.constraints[0].sense == Sense::eq);
    CHECK(m.constraints[0].expr.gram_terms().size() == 3);
    CHECK(is_scale_invariant(m.constraints[0].expr));
    CHECK(m.scale_invariant);

    auto bare = unroll(spec);
    CHECK_THROWS_AS(compile_metric(metric, EquivalencePartition::all_equivalent(3), bare),
                    DanglingReference);
  }

  SECTION("worst-agent kinds require a leading singleton class") {
    auto trace = unroll(build_dgd(2, 0.5));
    Metric metric{MetricKind::worst_iterate_error};
    auto m = compile_metric(metric, EquivalencePartition::finite({1, 3}), trace);
    REQUIRE(m.objective.gram_terms().size() == 1);
    CHECK(m.objective.gram_terms()[0].u == 0);
    CHECK(m.constraints.empty());
    CHECK_FALSE(m.scale_invariant);
    CHECK(is_single_agent(m.objective, 0));
    CHECK_THROWS_AS(compile_metric(metric, EquivalencePartition::all_equivalent(4), trace),
                    PartitionMetricMismatch);
    CHECK_THROWS_AS(compile_metric(metric, EquivalencePartition::finite({2, 2}), trace),
                    PartitionMetricMismatch);
    auto lim = compile_metric(metric, EquivalencePartition::limit({0.0, 1.0}, {1, 1}), trace);
    CHECK(lim.objective.gram_terms()[0].u == 0);
  }

  SECTION("worst-agent function gap pins the shared point in every class") {
    Metric metric{MetricKind::worst_function_gap};
    auto spec = build_extra(1, 0.25);
    auto trace = unroll(spec, metric_trace_needs(metric, spec));
    auto m = compile_metric(metric, EquivalencePartition::finite({1, 2, 2}), trace);
    REQUIRE(m.objective.value_terms().size() == 2);
    REQUIRE(m.constraints.size() == 3);
    CHECK_FALSE(has_class_pair(m.constraints[0].expr));
    CHECK(m.constraints[0].expr.gram_terms().size() == 1);
    for (int u : {1, 2}) {
      CHECK(m.constraints[u].sense == Sense::eq);
      CHECK(has_class_pair(m.constraints[u].expr));
      CHECK(m.constraints[u].expr.gram_terms().size() == 3);
    }
  }

  SECTION("percentile reads the pivot and orders it below the excluded class") {
    auto trace = unroll(build_dgd(1, 0.5));
    auto part = percentile_partition(10, 80.0);
    REQUIRE(part.num_classes() == 3);
    CHECK(part.size(0) == 2);
    CHECK(part.size(1) == 1);
    CHECK(part.size(2) == 7);
    auto m = compile_metric({MetricKind::percentile_iterate_error}, part, trace);
    REQUIRE(m.objective.gram_terms().size() == 1);
    CHECK(m.objective.gram_terms()[0].u == 1);
    REQUIRE(m.constraints.size() == 1);
    CHECK(m.constraints[0].sense == Sense::geq);
    CHECK(m.constraints[0].rhs == 0.0);
    CHECK(m.constraints[0].expr.gram_terms().size() == 2);
    CHECK_THROWS_AS(
        compile_metric({MetricKind::percentile_iterate_error}, EquivalencePartition::finite({2, 8}),
                       trace),
        PartitionMetricMismatch);
    CHECK_THROWS_AS(compile_metric({MetricKind::percentile_iterate_error},
                                   EquivalencePartition::finite({2, 2, 6}), trace),
                    PartitionMetricMismatch);
  }

  SECTION("percentile partitions round the excluded share down") {
    CHECK(percentile_partition(11, 80.0).size(0) == 2);
    CHECK(percentile_partition(11, 80.0).size(2) == 8);
    CHECK(percentile_partition(4, 75.0).size(0) == 1);
    CHECK(percentile_partition(100, 80.0).size(0) == 20);
    CHECK_THROWS_AS(percentile_partition(2, 80.0), InvalidPartition);
    CHECK_THROWS_AS(percentile_partition(10, 0.0), InvalidPartition);
    CHECK_THROWS_AS(percentile_partition(10, 100.0), InvalidPartition);

    auto lim = percentile_limit_partition(80.0);
    CHECK_FALSE(lim.is_finite());
    REQUIRE(lim.num_classes() == 3);
    CHECK(lim.fraction(0) == Catch::Approx(0.2));
    CHECK(lim.pinned(1));
    CHECK(lim.pinned_size(1) == 1);
    auto trace = unroll(build_dgd(1, 0.5));
    auto m = compile_metric({MetricKind::percentile_iterate_error}, lim, trace);
    CHECK(m.objective.gram_terms()[0].u == 1);

    CHECK(worst_agent_partition(5).size(0) == 1);
    CHECK(worst_agent_partition(5).size(1) == 4);
    CHECK_THROWS_AS(worst_agent_partition(1), InvalidPartition);
  }
}

TEST_CASE("initial condition compilation covers every kind", "[metrics]") {
  std::vector<InitialCondition> one;
  auto part = EquivalencePartition::finite({1, 2});
  auto spec = build_extra(1, 0.25);
  auto trace =
      unroll(spec, initial_condition_trace_needs({{InitialConditionKind::avg_function_gap}}));

  SECTION("aggregate kinds produce one row") {
    for (auto kind : {InitialConditionKind::avg_distance, InitialConditionKind::avg_gradient,
                      InitialConditionKind::avg_spread}) {
      auto rows = compile_initial_conditions({{kind, 2.0}}, part, trace);
      REQUIRE(rows.size() == 1);
      CHECK(rows[0].sense == Sense::leq);
      CHECK(rows[0].rhs == 2.0);
      CHECK(is_scale_invariant(rows[0].expr));
    }
  }

  SECTION("per-agent kinds produce one row per class") {
    for (auto kind :
         {InitialConditionKind::per_agent_distance, InitialConditionKind::per_agent_gradient}) {
      auto rows = compile_initial_conditions({{kind, 3.0}}, part, trace);
      REQUIRE(rows.size() == 2);
      for (int u = 0; u < 2; ++u) {
        CHECK(rows[u].sense == Sense::leq);
        CHECK(rows[u].rhs == 3.0);
        CHECK(is_single_agent(rows[u].expr, u));
      }
      auto three = compile_initial_conditions({{kind, 3.0}},
                                              EquivalencePartition::finite({2, 2, 2}), trace);
      CHECK(three.size() == 3);
    }
  }

  SECTION("gradient kinds default to the optimum gradient column") {
    auto rows =
        compile_initial_conditions({{InitialConditionKind::avg_gradient, 1.0}}, part, trace);
    REQUIRE(rows[0].expr.gram_terms().size() == 1);
    const auto& a = rows[0].expr.gram_terms()[0].a[0];
    CHECK(a[trace.registry->column("gstar")] == 1.0);
    CHECK(a.norm() == 1.0);
    auto atg0 = compile_initial_conditions({{InitialConditionKind::avg_gradient, 1.0, "g0"}},
                                           part, trace);
    CHECK(atg0[0].expr.gram_terms()[0].a[0][trace.registry->column("g0")] == 1.0);
  }

  SECTION("spread and equal starts center the iterates") {
    auto spread =
        compile_initial_conditions({{InitialConditionKind::avg_spread, 0.5}}, part, trace);
    REQUIRE(spread.size() == 1);
    CHECK(spread[0].expr.gram_terms().size() == 2);
    auto equal = compile_initial_conditions({{InitialConditionKind::equal_starts}}, part, trace);
    REQUIRE(equal.size() == 1);
    CHECK(equal[0].sense == Sense::eq);
    CHECK(equal[0].rhs == 0.0);
  }

  SECTION("value gap at the mean start needs the shared point") {
    auto rows = compile_initial_conditions({{InitialConditionKind::avg_function_gap, 4.0}}, part,
                                           trace);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].sense == Sense::leq);
    CHECK(rows[0].rhs == 4.0);
    CHECK(rows[0].expr.value_terms().size() == 2);
    CHECK(rows[1].sense == Sense::eq);

    auto bare = unroll(spec);
    CHECK_THROWS_AS(
        compile_initial_conditions({{InitialConditionKind::avg_function_gap}}, part, bare),
        DanglingReference);
  }
}

TEST_CASE("compiled expressions match direct arithmetic on replayed data", "[metrics]") {
  std::mt19937_64 rng(4501);
  const int n = 4, d = 5, K = 3;
  const double alpha = 0.25;
  auto fs = random_instance(n, d, 0.1, 1.0, rng);
  MatrixXd W = random_averaging_matrix(n, MatrixClass{-0.5, 0.5, "W"}, rng);
  MatrixXd starts(d, n);
  for (int i = 0; i < n; ++i)
    starts.col(i) = VectorXd::NullaryExpr(d, [&](Eigen::Index) { return gauss(rng); });
  auto direct = simulate_extra(fs, W, starts, alpha, K);
  const MatrixXd& xK = direct[K];
  VectorXd xbarK = xK.rowwise().mean();
  VectorXd xbar0 = starts.rowwise().mean();
  VectorXd origin = VectorXd::Zero(d);

  auto spec = build_extra(K, alpha);
  std::vector<CommonPointNeed> needs{{CommonPointKind::agent_average, "x3", 0},
                                     {CommonPointKind::specific_agent, "x3", 0},
                                     {CommonPointKind::agent_average, "x0", 0}};
  auto trace = unroll(spec, needs);
  std::vector<int> cls{0, 1, 1, 1};
  auto part = EquivalencePartition::finite({1, 3});
  auto inst = replay_trace(trace, oracles_for(fs), {{"W", W}},
                           {starts.col(0), starts.col(1), starts.col(2), starts.col(3)}, cls);

  SECTION("iterate error metrics") {
    auto ex = compile_metric({MetricKind::avg_iterate_error}, part, trace);
    double want = 0.0;
    for (int i = 0; i < n; ++i) want += xK.col(i).squaredNorm();
    CHECK(evaluate(ex.objective, inst) == Catch::Approx(want / n).margin(1e-10));

    auto at1 = compile_metric({MetricKind::avg_iterate_error, "x1"}, part, trace);
    double want1 = 0.0;
    for (int i = 0; i < n; ++i) want1 += direct[1].col(i).squaredNorm();
    CHECK(evaluate(at1.objective, inst) == Catch::Approx(want1 / n).margin(1e-10));

    auto wx = compile_metric({MetricKind::worst_iterate_error}, part, trace);
    CHECK(evaluate(wx.objective, inst) == Catch::Approx(xK.col(0).squaredNorm()).margin(1e-10));
  }

  SECTION("function gap metrics and their definitions") {
    auto ef = compile_metric({MetricKind::avg_function_gap}, part, trace);
    double want = 0.0;
    for (int i = 0; i < n; ++i) want += fs[i].value(xbarK) - fs[i].value(origin);
    CHECK(evaluate(ef.objective, inst) == Catch::Approx(want / n).margin(1e-10));
    for (const auto& c : ef.constraints)
      CHECK(std::abs(evaluate(c.expr, inst)) < 1e-10);

    auto wf = compile_metric({MetricKind::worst_function_gap}, part, trace);
    double worst = 0.0;
    for (int i = 0; i < n; ++i) worst += fs[i].value(xK.col(0)) - fs[i].value(origin);
    CHECK(evaluate(wf.objective, inst) == Catch::Approx(worst / n).margin(1e-10));
    REQUIRE(wf.constraints.size() == 2);
    for (const auto& c : wf.constraints)
      CHECK(std::abs(evaluate(c.expr, inst)) < 1e-10);
  }

  SECTION("percentile objective and ordering") {
    auto trace2 = unroll(spec);
    std::vector<int> cls2{0, 1, 2, 2};
    auto part2 = percentile_partition(n, 75.0);
    auto inst2 = replay_trace(trace2, oracles_for(fs), {{"W", W}},
                              {starts.col(0), starts.col(1), starts.col(2), starts.col(3)}, cls2);
    auto m = compile_metric({MetricKind::percentile_iterate_error, "", 75.0}, part2, trace2);
    CHECK(evaluate(m.objective, inst2) == Catch::Approx(xK.col(1).squaredNorm()).margin(1e-10));
    double gap = xK.col(0).squaredNorm() - xK.col(1).squaredNorm();
    CHECK(evaluate(m.constraints[0].expr, inst2) == Catch::Approx(gap).margin(1e-10));
  }

  SECTION("optimality of the averaged gradient at the origin") {
    auto opt = optimality_constraint(trace);
    VectorXd mean_g = VectorXd::Zero(d);
    for (int i = 0; i < n; ++i) mean_g += fs[i].grad(origin);
    mean_g /= n;
    CHECK(evaluate(opt.expr, inst) == Catch::Approx(mean_g.squaredNorm()).margin(1e-12));
    CHECK(std::abs(evaluate(opt.expr, inst)) < 1e-12);
  }

  SECTION("initial conditions") {
    auto val = [&](InitialCondition c) {
      auto rows = compile_initial_conditions({c}, part, trace);
      return evaluate(rows[0].expr, inst);
    };
    double distance = 0.0, gradsq = 0.0, spread = 0.0, gap = 0.0;
    for (int i = 0; i < n; ++i) {
      distance += starts.col(i).squaredNorm();
      gradsq += fs[i].grad(origin).squaredNorm();
      spread += (starts.col(i) - xbar0).squaredNorm();
      gap += fs[i].value(xbar0) - fs[i].value(origin);
    }
    CHECK(val({InitialConditionKind::avg_distance}) == Catch::Approx(distance / n).margin(1e-10));
    CHECK(val({InitialConditionKind::avg_gradient}) == Catch::Approx(gradsq / n).margin(1e-10));
    CHECK(val({InitialConditionKind::avg_spread}) == Catch::Approx(spread / n).margin(1e-10));
    CHECK(val({InitialConditionKind::equal_starts}) == Catch::Approx(spread / n).margin(1e-10));
    CHECK(val({InitialConditionKind::avg_function_gap}) == Catch::Approx(gap / n).margin(1e-10));

    auto per = compile_initial_conditions({{InitialConditionKind::per_agent_distance}}, part,
                                          trace);
    CHECK(evaluate(per[0].expr, inst) ==
          Catch::Approx(starts.col(0).squaredNorm()).margin(1e-10));
    double rest = (starts.col(1).squaredNorm() + starts.col(2).squaredNorm() +
                   starts.col(3).squaredNorm()) /
                  3.0;
    CHECK(evaluate(per[1].expr, inst) == Catch::Approx(rest).margin(1e-10));

    auto defs = compile_initial_conditions({{InitialConditionKind::avg_function_gap}}, part,
                                           trace);
    CHECK(std::abs(evaluate(defs[1].expr, inst)) < 1e-10);
  }

  SECTION("equal starts vanish on shared data") {
    auto t2 = unroll(build_dgd(1, 0.5));
    auto inst2 = replay_trace(t2, oracles_for(fs), {{"W", W}},
                              {starts.col(0), starts.col(0), starts.col(0), starts.col(0)});
    auto rows = compile_initial_conditions({{InitialConditionKind::equal_starts}},
                                           EquivalencePartition::all_equivalent(n), t2);
    CHECK(std::abs(evaluate(rows[0].expr, inst2)) < 1e-12);
  }
}

TEST_CASE("aggregate metrics keep agent-count-free form", "[metrics]") {
  Metric ef{MetricKind::avg_function_gap};
  Metric ex{MetricKind::avg_iterate_error};
  auto spec = build_extra(2, 0.25);
  auto trace = unroll(spec, metric_trace_needs(ef, spec));

  for (const auto& part :
       {EquivalencePartition::all_equivalent(3), EquivalencePartition::finite({2, 5})}) {
    for (const auto& metric : {ef, ex}) {
      auto m = compile_metric(metric, part, trace);
      CHECK(is_scale_invariant(m.objective));
      for (const auto& c : m.constraints) CHECK(is_scale_invariant(c.expr));
    }
  }

  auto small = compile_metric(ex, EquivalencePartition::all_equivalent(3), trace);
  auto large = compile_metric(ex, EquivalencePartition::finite({2, 5}), trace);
  CHECK(tag_entries(small.objective).gram == tag_entries(large.objective).gram);

  auto efs = compile_metric(ef, EquivalencePartition::all_equivalent(3), trace);
  auto efl = compile_metric(ef, EquivalencePartition::finite({2, 5}), trace);
  REQUIRE(efs.constraints.size() == efl.constraints.size());
  CHECK(tag_entries(efs.constraints[0].expr).gram == tag_entries(efl.constraints[0].expr).gram);
  CHECK(tag_entries(efs.objective).values == tag_entries(efl.objective).values);
}
