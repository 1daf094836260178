// Acceptance runner: one pass/fail line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <unistd.h>

#include "oracles/oracles.hpp"
#include "qbsde/cli.hpp"
#include "qbsde/conjugate.hpp"
#include "qbsde/duality.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/generators.hpp"
#include "qbsde/solver.hpp"
#include "qbsde/stochastics.hpp"

using namespace qbsde;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome cole_hopf() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ens = simulate(TimeGrid::uniform(1.0, 50), 1, 200000, 20240601, 1);
  const auto fx = fixture("pure_quadratic", 1.0);
  const auto sol = solve(fx.generator, terminal_linear({1.0}), ens, Scheme{});
  const double elapsed = seconds_since(t0);
  const double exact = oracle::cole_hopf_linear(1.0, 1.0, 1.0);
  double worst_z = 0.0;
  for (int k = 1; k < 50; ++k) {
    std::vector<double> z(ens.paths);
    for (std::size_t m = 0; m < ens.paths; ++m) z[m] = sol.z(k, m)[0];
    worst_z = std::max(worst_z, std::abs(pairwise_sum(z) / z.size() + 1.0));
  }
  const bool ok = std::abs(sol.y0.mean - exact) <= 0.03 && worst_z <= 0.05 && elapsed <= 60.0;
  return {ok, "Y0 = " + fmt(sol.y0.mean) + " (exact " + fmt(exact) + "), max |mean Z + 1| = " +
                  fmt(worst_z) + ", " + fmt(elapsed, 3) + " s single-threaded, clips " +
                  std::to_string(sol.clip_count)};
}

Outcome tree_equivalence() {
  struct Case {
    std::string fixture;
    double T;
  };
  const std::vector<Case> cases = {{"example_i", 1.0}, {"example_iii", 1.0}, {"example_iii", 0.5}};
  const int N = 10;
  bool ok = true;
  std::string detail;
  for (const auto& c : cases) {
    const auto gen = fixture(c.fixture).generator;
    const auto ens = simulate_tree(TimeGrid::uniform(c.T, N));
    for (const std::string target : {"pathwise", "fitted"}) {
      Scheme s;
      s.projector = "lattice";
      s.regression_target = target;
      const auto sol = solve(gen, terminal_abs({1.0}), ens, s);
      const oracle::TreeInduction tree(
          [&](double t, double b, double z) {
            const double bb[1] = {b}, zz[1] = {z};
            return gen.value(t, bb, zz);
          },
          [](double b) { return std::abs(b); }, c.T, N, sol.truncation_radius);
      const double ref = tree.y0();
      double worst = 0.0;
      for (std::size_t m = 0; m < ens.paths; ++m) worst = std::max(worst, std::abs(sol.y(0, m) - ref));
      ok = ok && worst <= 1e-12;
      detail += c.fixture + "(T=" + fmt(c.T) + "," + target + ") |dY0| = " + fmt(worst, 3) + "; ";
    }
  }
  return {ok, detail + "N = 10, 1024 paths"};
}

Outcome conjugate_exactness() {
  bool ok = true;
  std::string detail;
  const double b[1] = {0.0};
  for (double gamma : {0.5, 1.0, 4.0}) {
    const auto gen = fixture("pure_quadratic", gamma).generator;
    auto h = make_handle(gen);
    h.force_numeric = true;
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const double q[1] = {-10.0 + 20.0 * i / 99.0};
      worst = std::max(worst, std::abs(transform(h, 0.0, b, q) - q[0] * q[0] / (2.0 * gamma)));
    }
    ok = ok && worst <= 1e-6;
    detail += "gamma " + fmt(gamma) + ": " + fmt(worst, 3) + "; ";
  }
  // |z|^2/2 - |z| is not convex, so the search runs without midpoint probes.
  const auto gen = fixture("example_iv").generator;
  auto h = make_handle(gen);
  h.force_numeric = true;
  h.search.check_convexity = false;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double q[1] = {-10.0 + 20.0 * i / 99.0};
    const double exact = 0.5 * (std::abs(q[0]) + 1.0) * (std::abs(q[0]) + 1.0);
    worst = std::max(worst, std::abs(transform(h, 0.0, b, q) - exact));
  }
  ok = ok && worst <= 1e-5;
  detail += "|z|^2/2 - |z|: " + fmt(worst, 3) + " (numeric search, 100-point grid on [-10, 10])";
  return {ok, detail};
}

Outcome fenchel() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::normal_distribution<double> G(0.0, 1.0);
  std::vector<GeneratorSpec> gens;
  for (const char* n : {"example_i", "example_ii", "example_iii", "gtilde"}) gens.push_back(fixture(n).generator);
  for (double g : {0.5, 1.0, 4.0}) gens.push_back(fixture("pure_quadratic", g).generator);
  std::vector<ConjugateHandle> handles;
  for (const auto& g : gens) handles.push_back(make_handle(g));

  std::size_t fy_viol = 0, fy_eq_bad = 0;
  double fy_eq_worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) % gens.size();
    const double t = 0.5 * (U(rng) + 1.0);
    const double b[1] = {G(rng)}, z[1] = {10.0 * U(rng)}, q[1] = {10.0 * U(rng)};
    const double g1 = gens[j].g1_value(t, b, z);
    const double f1 = transform(handles[j], t, b, q);
    if (q[0] * z[0] > g1 + f1 + 1e-10 * std::max({1.0, std::abs(g1), std::abs(f1)})) ++fy_viol;
    const auto u = subgradient(gens[j], t, b, z);
    const double f1u = transform(handles[j], t, b, u);
    const double gap = std::abs(u[0] * z[0] - g1 - f1u) / std::max({1.0, std::abs(g1), std::abs(f1u)});
    fy_eq_worst = std::max(fy_eq_worst, gap);
    if (gap > 1e-10) ++fy_eq_bad;
  }

  std::size_t fi_viol = 0, fi_eq_bad = 0;
  double fi_eq_worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double x = 5.0 * U(rng), p = std::exp(2.0 * U(rng)), y = std::exp(4.0 * U(rng));
    if (!fenchel_inequality_check(x, y, p).holds) ++fi_viol;
    // Equality locus of the p-scaled inequality: y = p e^{px}; p = 1 gives y = e^x.
    for (double pp : {p, 1.0}) {
      const auto r = fenchel_inequality_check(x, pp * std::exp(pp * x), pp);
      const double gap = std::abs(r.lhs - r.rhs) / std::max(1.0, std::abs(r.lhs));
      fi_eq_worst = std::max(fi_eq_worst, gap);
      if (gap > 1e-10) ++fi_eq_bad;
    }
  }
  const bool ok = fy_viol == 0 && fy_eq_bad == 0 && fi_viol == 0 && fi_eq_bad == 0;
  return {ok, "Fenchel-Young: " + std::to_string(fy_viol) + " violations, equality worst " +
                  fmt(fy_eq_worst, 3) + "; Fenchel: " + std::to_string(fi_viol) +
                  " violations, equality worst " + fmt(fi_eq_worst, 3) + " (1e4 probes each)"};
}

Outcome entropy() {
  const auto ens = simulate(TimeGrid::uniform(1.0, 50), 1, 100000, 5150, 1);
  const auto ctrl = doleans("const(1)", constant_control({1.0}), ens);
  const auto e = relative_entropy(ctrl, ens);
  const double se = std::hypot(e.primal.std_error, e.dual.std_error);
  const bool ok = std::abs(e.primal.mean - 0.5) <= 3.0 * se && std::abs(e.dual.mean - 0.5) <= 3.0 * se;
  return {ok, "primal " + fmt(e.primal.mean) + " +- " + fmt(e.primal.std_error, 3) + ", dual " +
                  fmt(e.dual.mean) + " +- " + fmt(e.dual.std_error, 3) + ", 3 x combined SE = " +
                  fmt(3.0 * se, 3)};
}

Outcome duality() {
  const auto ens = simulate(TimeGrid::uniform(1.0, 50), 1, 200000, 42, 1);
  const auto gen = fixture("pure_quadratic", 1.0).generator;
  const auto rep = duality_certificate(gen, make_handle(gen), terminal_linear({1.0}), ens,
                                       constant_family(9, -2.0, 2.0, 1), Scheme{});
  bool qstar_audit = false;
  for (const auto& e : rep.dual_values)
    if (e.id == "qstar") qstar_audit = e.ok && e.audit.passed;
  const bool ok = std::abs(rep.gap) <= 0.02 && rep.domination_violations.empty() && qstar_audit;
  return {ok, "Y0 = " + fmt(rep.primal_y0.mean) + ", Y^q*_0 = " + fmt(rep.qstar_value.mean) +
                  ", gap = " + fmt(rep.gap, 3) + ", domination violations " +
                  std::to_string(rep.domination_violations.size()) + ", q* admissible " +
                  (qstar_audit ? "yes" : "no") + ", not admissible " +
                  std::to_string(rep.not_admissible.size())};
}

Outcome crosscheck() {
  const auto ens = simulate(TimeGrid::uniform(1.0, 50), 1, 100000, 7, 1);
  bool ok = true;
  std::string detail;
  auto one = [&](const std::string& name, const TerminalSpec& term) {
    const auto gen = fixture(name).generator;
    const auto rep = uniqueness_crosscheck(gen, term, ens, default_crosscheck_schemes(Scheme{}), 0.03);
    ok = ok && rep.passed;
    detail += name + "/" + term.kind + " max|dY0| = " + fmt(rep.max_dy0, 3);
    for (const auto& e : rep.errors)
      if (!e.empty()) detail += " [" + e + "]";
    detail += "; ";
  };
  for (const char* n : {"example_i", "example_ii", "example_iii", "example_iv"}) one(n, terminal_abs({1.0}));
  one("example_iv", terminal_critical(1.0));
  return {ok, detail + "M = 1e5, N = 50, 3 schemes"};
}

Outcome comparison() {
  const auto ens = simulate(TimeGrid::uniform(1.0, 50), 1, 50000, 88, 1);
  const double T = 1.0;
  struct Pair {
    std::string label;
    Problem p, pp;
    std::optional<std::pair<double, double>> shift;  // generator shift, terminal shift
  };
  auto fx = [](const char* n) { return fixture(n).generator; };
  const auto abs1 = terminal_abs({1.0});
  std::vector<Pair> pairs;
  pairs.push_back({"example_iii g-0.25, xi+0.1", {fx("example_iii"), abs1},
                   {with_offset(fx("example_iii"), -0.25), terminal_shifted(abs1, 0.1)},
                   std::make_pair(0.25, 0.1)});
  pairs.push_back({"example_i g-0.5", {fx("example_i"), abs1},
                   {with_offset(fx("example_i"), -0.5), abs1}, std::make_pair(0.5, 0.0)});
  pairs.push_back({"example_ii g-0.3", {fx("example_ii"), abs1},
                   {with_offset(fx("example_ii"), -0.3), abs1}, std::make_pair(0.3, 0.0)});
  pairs.push_back({"pure_quadratic B_T <= |B_T|", {fixture("pure_quadratic", 1.0).generator, terminal_linear({1.0})},
                   {fixture("pure_quadratic", 1.0).generator, abs1}, std::nullopt});
  pairs.push_back({"example_iii vs pure_quadratic, |B_T|", {fx("example_iii"), abs1},
                   {fixture("pure_quadratic", 1.0).generator, abs1}, std::nullopt});
  bool ok = true;
  std::string detail;
  for (const auto& pr : pairs) {
    const auto rep = comparison_check(pr.p, pr.pp, ens, Scheme{});
    std::string line = pr.label + ": node violations " + fmt(rep.violation_fraction, 3);
    bool pass = rep.passed;
    if (pr.shift) {
      double worst = 0.0;
      for (std::size_t k = 0; k < rep.mean_diff.size(); ++k) {
        const double expect = (T - ens.grid.nodes[k]) * pr.shift->first + pr.shift->second;
        worst = std::max(worst, std::abs(rep.mean_diff[k] - expect));
      }
      pass = pass && worst <= 0.02;
      line += ", shift error " + fmt(worst, 3);
    }
    ok = ok && pass;
    detail += line + "; ";
  }
  return {ok, detail};
}

Outcome classification() {
  bool ok = true;
  std::string detail;
  Probe probe;
  for (const char* n : {"example_i", "example_ii", "example_iii", "example_iv"}) {
    const auto fx = fixture(n);
    const auto& g = fx.generator;
    std::string line = std::string(n) + ":";
    auto expect = [&](const std::string& label, const CheckReport& r, bool declared) {
      const bool match = r.passed == declared;
      ok = ok && match;
      line += " " + label + (r.passed ? " pass" : " fail") + (match ? "" : " (declared pass)");
      if (!match && !r.witnesses.empty()) {
        const auto& w = r.witnesses.front();
        line += " witness z=" + fmt(w.z.at(0)) + (w.z2.empty() ? "" : " z'=" + fmt(w.z2.at(0))) +
                " lhs=" + fmt(w.lhs) + " rhs=" + fmt(w.rhs);
      }
    };
    expect("A1", check_quadratic_growth(g, probe), fx.declared.a1);
    if (g.gamma_bar) expect("A2", check_strictly_quadratic(g, probe), fx.declared.a2);
    if (fx.declared.a3 && g.strong_convexity)
      expect("A3(" + fmt(g.strong_convexity->epsilon) + "," + fmt(g.strong_convexity->c) + ")",
             check_strong_convexity(g, *g.strong_convexity, probe), true);
    expect("B", check_uniform_continuity(g, probe), fx.declared.b);
    detail += line + "; ";
  }

  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> U(0.0, 20.0);
  std::size_t sandwich_bad = 0;
  for (int i = 0; i < 10000; ++i) {
    const double r = U(rng), v = gtilde(r);
    if (!(r * r <= v && v <= 1.0 + r * r)) ++sandwich_bad;
  }
  ok = ok && sandwich_bad == 0;
  detail += "gtilde sandwich violations " + std::to_string(sandwich_bad) + "; ";

  const auto gt = fixture("gtilde").generator;
  const auto refute = check_strong_convexity(gt, StrongConvexity{1.0, 0.0}, probe);
  double worst = refute.witnesses.empty() ? INFINITY : 0.0;
  for (const auto& w : refute.witnesses) {
    const auto [lhs, rhs] = reevaluate(gt, refute, w);
    worst = std::max({worst, std::abs(lhs - w.lhs) / std::max(1.0, std::abs(w.lhs)),
                      std::abs(rhs - w.rhs) / std::max(1.0, std::abs(w.rhs))});
  }
  const bool refuted = !refute.passed && worst <= 1e-12;
  ok = ok && refuted;
  detail += "gtilde A3(1,0) " + std::string(refute.passed ? "not refuted" : "refuted") +
            ", witness re-evaluation error " + fmt(worst, 3);
  return {ok, detail};
}

Outcome lambda() {
  const MajorantFamily fam([](double x) { return 1.0 + x; }, 1.0, [](double) { return 1.0; });
  std::vector<double> grid;
  for (int x = 1; x <= 50; ++x) grid.push_back(x);
  const auto rep = lambda_superlinearity_check(fam, grid, 5.0);
  double oracle_err = 0.0;
  for (double x : grid)
    oracle_err = std::max(oracle_err, std::abs(fam.Lambda(x) - oracle::lambda_k_one_plus_x(x)) /
                                          std::max(1.0, std::abs(oracle::lambda_k_one_plus_x(x))));
  const bool ok = rep.ratio_increasing && rep.growth_met && rep.convex && oracle_err <= 1e-6;
  return {ok, "oracle error " + fmt(oracle_err, 3) + ", Lambda(1)/1 = " + fmt(rep.ratio.front()) + ", Lambda(50)/50 = " + fmt(rep.ratio.back()) +
                  ", factor " + fmt(rep.ratio.back() / rep.ratio.front()) + ", strictly increasing " +
                  (rep.ratio_increasing ? "yes" : "no") + ", Lambda'' > 0 " + (rep.convex ? "yes" : "no")};
}

Outcome determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / ("qbsde-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  const cli::json config = {
      {"generator", {{"fixture", "pure_quadratic"}, {"param", 1.0}}},
      {"terminal", {{"kind", "linear"}}},
      {"grid", {{"T", 1.0}, {"N", 20}}},
      {"ensemble", {{"M", 20000}, {"seed", 2718}}},
      {"suites", {"solve", "check", "conjugate", "duality", "crosscheck", "compare", "zmoment"}},
      {"duality", {{"controls", {{"count", 3}, {"lo", -1.0}, {"hi", 1.0}}}}},
      {"tolerances", {{"gap", 0.05}}},
      {"outputs", {{"dir", (root / "runs").string()}}}};
  cli::RunOptions first;
  first.threads = 1;
  const auto r1 = cli::run(config, first);
  const std::string manifest = (fs::path(r1.run_dir) / "manifest.json").string();
  bool ok = true;
  std::string detail = std::to_string(r1.summary.size()) + " summary values;";
  for (int threads : {1, 2, 8}) {
    cli::RunOptions opt;
    opt.threads = threads;
    opt.out_dir = (root / ("reproduce-" + std::to_string(threads))).string();
    const auto rep = cli::reproduce(manifest, opt);
    ok = ok && rep.status == cli::kPassed && rep.rerun.ensemble_digest == r1.ensemble_digest;
    detail += " " + std::to_string(threads) + " worker(s): " +
              (rep.diffs.empty() ? "identical" : std::to_string(rep.diffs.size()) + " diffs (" + rep.diffs.front() + ")");
  }
  fs::remove_all(root);
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--only", only, "run a single criterion (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"Cole-Hopf closed form", cole_hopf},
      {"tree-oracle equivalence", tree_equivalence},
      {"conjugate exactness", conjugate_exactness},
      {"Fenchel-Young and Fenchel inequality", fenchel},
      {"entropy identity", entropy},
      {"duality certificate", duality},
      {"uniqueness crosscheck", crosscheck},
      {"comparison monotonicity", comparison},
      {"assumption classification", classification},
      {"Lambda superlinearity", lambda},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<int>(i) + 1 != only) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << "criterion " << std::setw(2) << i + 1 << " " << (o.passed ? "PASS" : "FAIL") << "  "
              << criteria[i].first << ": " << o.detail << " [" << fmt(seconds_since(t0), 3) << " s]"
              << std::endl;
  }
  return failed ? 1 : 0;
}
