#include <gtest/gtest.h>

#include <cmath>

#include "qbsde/duality.hpp"
#include "qbsde/errors.hpp"

using namespace qbsde;

namespace {

const PathEnsemble& shared_ensemble() {
  static const PathEnsemble ens = simulate(TimeGrid::uniform(1.0, 20), 1, 40000, 101);
  return ens;
}

double g_at(const GeneratorSpec& g, double z, double t = 0.2) {
  const double zz[1] = {z}, bb[1] = {0.1};
  return g.value(t, ConstVec(bb, 1), ConstVec(zz, 1));
}

}  // namespace

TEST(OptimalControl, QuadraticGradient) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto& ens = shared_ensemble();
  const auto sol = solve(gen, terminal_linear({1.0}), ens, Scheme{});
  const auto q = extract_optimal_control(sol, gen, ens);
  for (std::size_t m = 0; m < ens.paths; m += 997)
    for (int k = 0; k < 20; ++k) EXPECT_EQ(q.q_at(m, k)[0], sol.z(k, m)[0]);
  std::vector<double> q0(ens.paths);
  for (std::size_t m = 0; m < ens.paths; ++m) q0[m] = q.q_at(m, 10)[0];
  EXPECT_NEAR(mean_estimate(q0).mean, -1.0, 0.05);
}

TEST(OptimalControl, ZeroGenerator) {
  const auto gen = fixture("zero").generator;
  const auto& ens = shared_ensemble();
  const auto sol = solve(gen, terminal_linear({1.0}), ens, Scheme{});
  const auto q = extract_optimal_control(sol, gen, ens);
  for (double v : q.q) EXPECT_EQ(v, 0.0);
}

TEST(OptimalControl, QuadraticMinusNormRadialDerivative) {
  const auto gen = fixture("example_iv").generator;
  const auto& ens = shared_ensemble();
  const auto sol = solve(gen, terminal_abs({1.0}), ens, Scheme{});
  const auto q = extract_optimal_control(sol, gen, ens);
  std::size_t checked = 0;
  for (std::size_t m = 0; m < ens.paths; m += 101)
    for (int k = 0; k < 20; ++k) {
      const double z = sol.z(k, m)[0];
      if (std::abs(z) < 1e-6) continue;
      EXPECT_NEAR(q.q_at(m, k)[0], (1.0 - 1.0 / std::abs(z)) * z, 1e-9);
      ++checked;
    }
  EXPECT_GT(checked, 100u);
}

TEST(Admissibility, ZeroControl) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto& ens = shared_ensemble();
  const auto ctrl = doleans("zero", constant_control({0.0}), ens);
  const auto a = audit_admissibility(ctrl, make_handle(gen), gen, terminal_linear({1.0}), ens);
  EXPECT_TRUE(a.passed);
  EXPECT_EQ(a.l2_under_q.mean, 0.0);
  EXPECT_EQ(a.martingale_proxy.mean, 1.0);
}

TEST(Admissibility, UnitControl) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto& ens = shared_ensemble();
  const auto ctrl = doleans("one", constant_control({1.0}), ens);
  const auto a = audit_admissibility(ctrl, make_handle(gen), gen, terminal_linear({1.0}), ens);
  EXPECT_TRUE(a.passed);
  EXPECT_NEAR(a.l2_under_q.mean, 1.0, 4.0 * a.l2_under_q.std_error);
  EXPECT_NEAR(a.entropy_budget.mean, 0.5, 0.05);
}

TEST(Admissibility, ExplodingControlFails) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto& ens = shared_ensemble();
  const auto ctrl = doleans("explode", [](int k, double, ConstVec, MutVec q) { q[0] = 10.0 * k; }, ens);
  const auto a = audit_admissibility(ctrl, make_handle(gen), gen, terminal_linear({1.0}), ens);
  EXPECT_FALSE(a.passed);
  EXPECT_FALSE(a.reasons.empty());
}

TEST(Duality, QuadraticCertificate) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto ens = simulate(TimeGrid::uniform(1.0, 20), 1, 50000, 42);
  const auto fam = constant_family(9, -2.0, 2.0, 1);
  ASSERT_EQ(fam.size(), 9u);
  const auto rep = duality_certificate(gen, make_handle(gen), terminal_linear({1.0}), ens, fam, Scheme{});
  EXPECT_TRUE(rep.passed);
  EXPECT_TRUE(rep.domination_violations.empty());
  EXPECT_NEAR(rep.gap, 0.0, 0.02);
  // Y^c_0 = c + c^2 / 2 is smallest at c = -1.
  double best = INFINITY;
  std::string arg;
  for (const auto& e : rep.dual_values)
    if (e.ok && e.id != "qstar" && e.y0.mean < best) {
      best = e.y0.mean;
      arg = e.id;
    }
  EXPECT_NEAR(best, -0.5, 0.02);
}

TEST(Duality, ZeroGeneratorZeroControl) {
  const auto gen = fixture("zero").generator;
  const auto& ens = shared_ensemble();
  const std::vector<ControlSpec> fam = {{"zero", constant_control({0.0})}};
  DualityOptions opt;
  opt.include_qstar = false;
  const auto rep = duality_certificate(gen, make_handle(gen), terminal_linear({1.0}), ens, fam, Scheme{}, opt);
  ASSERT_EQ(rep.dual_values.size(), 1u);
  EXPECT_NEAR(rep.dual_values[0].y0.mean, rep.primal_y0.mean, 1e-3);
}

TEST(Crosscheck, QuadraticSchemesAgree) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto& ens = shared_ensemble();
  const auto schemes = default_crosscheck_schemes(Scheme{});
  ASSERT_GE(schemes.size(), 2u);
  const auto rep = uniqueness_crosscheck(gen, terminal_linear({1.0}), ens, schemes, 0.02);
  EXPECT_TRUE(rep.passed) << rep.max_dy0;
}

TEST(Comparison, IdenticalAndShiftedProblems) {
  const auto& ens = shared_ensemble();
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto xi = terminal_linear({1.0});
  const auto same = comparison_check({gen, xi}, {gen, xi}, ens, Scheme{});
  EXPECT_TRUE(same.passed);
  EXPECT_EQ(same.y0.mean, same.y0_prime.mean);

  const auto up = comparison_check({gen, xi}, {gen, terminal_shifted(xi, 1.0)}, ens, Scheme{});
  EXPECT_TRUE(up.passed);
  EXPECT_NEAR(up.y0_prime.mean - up.y0.mean, 1.0, 1e-9);

  const auto lower = with_offset(gen, -1.0);
  const auto shift = comparison_check({gen, xi}, {lower, xi}, ens, Scheme{});
  EXPECT_TRUE(shift.passed);
  for (std::size_t k = 0; k < shift.mean_diff.size(); ++k)
    EXPECT_NEAR(shift.mean_diff[k], 1.0 - ens.grid.nodes[k], 1e-9);
}

TEST(Comparison, BrokenOrderingRejected) {
  const auto& ens = shared_ensemble();
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto xi = terminal_linear({1.0});
  EXPECT_THROW(comparison_check({gen, terminal_shifted(xi, 1.0)}, {gen, xi}, ens, Scheme{}), PreconditionError);
  EXPECT_THROW(comparison_check({with_offset(gen, -1.0), xi}, {gen, xi}, ens, Scheme{}), PreconditionError);
}

TEST(Reflect, FormulaAndInvolution) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto bar = reflect(gen);
  EXPECT_NEAR(g_at(bar, 2.0), -2.0, 1e-14);
  const auto twice = reflect(bar);
  for (const char* name : {"example_i", "example_iii", "gtilde"}) {
    const auto g = fixture(name).generator;
    const auto gg = reflect(reflect(g));
    for (double z : {-3.0, -0.2, 0.0, 0.6, 2.4})
      for (double t : {0.0, 0.5, 1.0}) EXPECT_NEAR(g_at(gg, z, t), g_at(g, z, t), 1e-14);
  }
  EXPECT_NEAR(g_at(twice, 1.3), g_at(gen, 1.3), 1e-14);
}

TEST(Reflect, SolutionAntiSymmetry) {
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto& ens = shared_ensemble();
  const auto xi = terminal_linear({1.0});
  const auto a = solve(gen, xi, ens, Scheme{});
  const auto b = solve(reflect(gen), reflect(xi), ens, Scheme{});
  EXPECT_NEAR(a.y0.mean, -b.y0.mean, 1e-6);
  for (std::size_t m = 0; m < ens.paths; m += 1009) EXPECT_NEAR(a.z(5, m)[0], -b.z(5, m)[0], 1e-6);
}

TEST(ZMoment, ZeroAndQuadratic) {
  const auto& ens = shared_ensemble();
  const auto flat = solve(fixture("pure_quadratic", 1.0).generator, terminal_constant(0.7), ens, Scheme{});
  const auto r0 = z_moment_check(flat, {0.5}, {1.0});
  EXPECT_NEAR(r0.eta_rows[0].full.estimate, 1.0, 1e-9);
  EXPECT_NEAR(r0.lambda_rows[0].full.estimate, 1.0, 1e-9);

  const auto sol = solve(fixture("pure_quadratic", 1.0).generator, terminal_linear({1.0}), ens, Scheme{});
  const auto r = z_moment_check(sol, {0.1, 0.5}, {1.0, 2.0});
  for (const auto& row : r.eta_rows) EXPECT_NEAR(row.full.estimate, std::exp(row.parameter), 0.1);
  EXPECT_TRUE(r.passed);
}

TEST(Regime, Classification) {
  EXPECT_EQ(classify_regime(fixture("example_i").generator), "a0");
  EXPECT_EQ(classify_regime(fixture("example_ii").generator), "theta_lt_1");
  EXPECT_EQ(classify_regime(fixture("example_iii").generator), "theta_eq_1");
  EXPECT_EQ(regime_suites("theta_eq_1"), std::vector<std::string>{"crosscheck"});
}
