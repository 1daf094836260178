#include "qbsde/duality.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qbsde/errors.hpp"

namespace qbsde {

ControlProcess extract_optimal_control(const BsdeSolution& sol, const GeneratorSpec& gen,
                                       const PathEnsemble& ens, int threads) {
  if (sol.paths != ens.paths || sol.grid.nodes != ens.grid.nodes)
    throw ConfigError("solution was not computed on this ensemble");
  const int N = ens.steps(), d = ens.dim;
  std::vector<double> q(ens.paths * N * d);
  parallel_for(ens.paths, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m)
      for (int k = 0; k < N; ++k) {
        const auto u = subgradient(gen, ens.grid.nodes[k], ens.state(m, k), sol.z(k, m));
        std::copy(u.begin(), u.end(), q.begin() + static_cast<std::ptrdiff_t>((m * N + k) * d));
      }
  });
  auto ctrl = doleans_from_values("qstar", std::move(q), ens, threads);
  auto models = std::make_shared<std::vector<StepModel>>(sol.models);
  auto g1 = gen.g1;
  ctrl.markov = [models, g1](int k, double t, ConstVec b, MutVec out) {
    std::vector<double> z(out.size());
    (*models)[k].z(b, z);
    g1->subgradient(t, b, z, out);
  };
  return ctrl;
}

AdmissibilityReport audit_admissibility(const ControlProcess& ctrl, const ConjugateHandle& handle,
                                        const GeneratorSpec& gen, const TerminalSpec& terminal,
                                        const PathEnsemble& ens, double min_ess_fraction) {
  AdmissibilityReport r;
  r.control_id = ctrl.id;
  r.overflow = ctrl.overflow_count;
  const int N = ctrl.steps;
  const std::size_t M = ctrl.paths;
  const auto xi = evaluate_terminal(terminal, ens);
  std::vector<double> mt(M), l2(M), value(M), ent(M);
  double worst = -INFINITY;
  try {
    for (std::size_t m = 0; m < M; ++m) {
      if (ctrl.overflow[m]) continue;
      const double lw = ctrl.log_weight(m, N);
      const double w = std::exp(lw);
      std::vector<double> qq(N), ff(N);
      for (int k = 0; k < N; ++k) {
        const double t = ens.grid.nodes[k], dt = ens.grid.dt(k);
        const ConstVec b = ens.state(m, k);
        const double f = transform(handle, t, b, ctrl.q_at(m, k));
        worst = std::max(worst, -f - gen.alpha(t, b));
        qq[k] = norm_sq(ctrl.q_at(m, k)) * dt;
        ff[k] = std::abs(f) * dt;
      }
      mt[m] = w;
      l2[m] = w * pairwise_sum(qq);
      value[m] = w * (std::abs(xi[m]) + pairwise_sum(ff));
      ent[m] = w * lw;
    }
  } catch (const Error& e) {
    r.reasons.push_back(std::string("evaluation failed: ") + e.what());
  }
  r.worst_f1_excess = worst;
  r.martingale_proxy = mean_estimate(mt);
  r.l2_under_q = mean_estimate(l2);
  r.value_integrability = mean_estimate(value);
  r.entropy_budget = mean_estimate(ent);
  {
    std::vector<double> sq(M);
    for (std::size_t m = 0; m < M; ++m) sq[m] = mt[m] * mt[m];
    const double s = pairwise_sum(mt), s2 = pairwise_sum(sq);
    r.ess = s2 > 0.0 ? s * s / s2 : 0.0;
  }

  if (r.overflow) r.reasons.push_back(std::to_string(r.overflow) + " paths overflowed the weight cap");
  if (r.ess < min_ess_fraction * static_cast<double>(M))
    r.reasons.push_back("degenerate weights: effective sample size " + std::to_string(r.ess));
  const double dev = std::abs(r.martingale_proxy.mean - 1.0);
  if (!(dev <= 4.0 * r.martingale_proxy.std_error) && dev > 1e-12) {
    std::ostringstream os;
    os << "martingale proxy " << r.martingale_proxy.mean << " is "
       << dev / std::max(r.martingale_proxy.std_error, 1e-300) << " standard errors from 1";
    r.reasons.push_back(os.str());
  }
  for (const Estimate* e : {&r.l2_under_q, &r.value_integrability, &r.entropy_budget,
                            &r.martingale_proxy})
    if (!std::isfinite(e->mean) || !std::isfinite(e->std_error)) {
      r.reasons.push_back("non-finite estimate");
      break;
    }
  if (worst > 1e-9) r.reasons.push_back("f1 falls below -alpha by " + std::to_string(worst));
  r.passed = r.reasons.empty();
  return r;
}

std::vector<ControlSpec> constant_family(int count, double lo, double hi, int dim) {
  std::vector<ControlSpec> out;
  for (int i = 0; i < count; ++i) {
    const double c = count == 1 ? lo : lo + (hi - lo) * i / (count - 1);
    std::vector<double> v(dim, 0.0);
    v[0] = c;
    std::ostringstream id;
    id << "const(" << c << ")";
    out.push_back({id.str(), constant_control(v)});
  }
  return out;
}

double value_lipschitz(const BsdeSolution& sol) {
  const int N = sol.grid.steps();
  const std::size_t M = sol.paths;
  double L = 0.0, prev = 0.0;
  for (int k = 0; k <= N; ++k) {
    const double mean = pairwise_sum(ConstVec(sol.Y.data() + k * M, M)) / static_cast<double>(M);
    if (k) L = std::max(L, std::abs(mean - prev) / sol.grid.dt(k - 1));
    prev = mean;
  }
  return L;
}

DualityReport duality_certificate(const GeneratorSpec& gen, const ConjugateHandle& handle,
                                  const TerminalSpec& terminal, const PathEnsemble& ens,
                                  const std::vector<ControlSpec>& family, const Scheme& scheme,
                                  const DualityOptions& options) {
  if (family.empty() && !options.include_qstar) throw ConfigError("empty control family");
  DualityReport rep;
  const auto primal = solve(gen, terminal, ens, scheme);
  rep.primal_y0 = primal.y0;
  rep.lipschitz = value_lipschitz(primal);
  rep.discretization_slack = 2.0 * ens.grid.max_step() * rep.lipschitz;

  auto run = [&](const std::string& id, const ControlProcess& ctrl) {
    DualEntry e;
    e.id = id;
    try {
      e.audit = audit_admissibility(ctrl, handle, gen, terminal, ens, options.min_ess_fraction);
      const auto dual = solve_dual(gen, handle, terminal, ens, ctrl, scheme);
      e.y0 = dual.y0;
      e.method = dual.method;
      e.ok = true;
    } catch (const Error& err) {
      e.error = err.what();
    }
    return e;
  };

  if (options.include_qstar) {
    const auto qstar = extract_optimal_control(primal, gen, ens, scheme.threads);
    rep.dual_values.push_back(run("qstar", qstar));
  }
  for (const auto& c : family) {
    try {
      const auto ctrl = doleans(c.id, c.q, ens, scheme.threads);
      rep.dual_values.push_back(run(c.id, ctrl));
    } catch (const Error& err) {
      DualEntry e;
      e.id = c.id;
      e.error = err.what();
      rep.dual_values.push_back(e);
    }
  }

  for (const auto& e : rep.dual_values) {
    if (!e.ok || !e.audit.passed) {
      rep.not_admissible.push_back(e.id);
      if (e.id != "qstar") continue;
    }
    const double se = std::hypot(e.y0.std_error, rep.primal_y0.std_error);
    const double slack = options.sigmas * se + rep.discretization_slack;
    if (e.ok && e.audit.passed && e.y0.mean < rep.primal_y0.mean - slack)
      rep.domination_violations.push_back(e.id);
    if (e.id == "qstar") {
      rep.qstar_ok = e.ok && e.audit.passed;
      rep.qstar_value = e.y0;
      rep.gap = e.y0.mean - rep.primal_y0.mean;
      rep.gap_std_error = se;
    }
  }
  const bool gap_ok = !options.include_qstar || (rep.qstar_ok && std::abs(rep.gap) <= options.gap_tolerance);
  rep.passed = gap_ok && rep.domination_violations.empty();
  return rep;
}

std::vector<Scheme> default_crosscheck_schemes(const Scheme& base) {
  Scheme a = base;
  a.mode = "explicit";
  Scheme b = base;
  b.mode = "explicit";
  b.degree = std::max(2, base.degree - 1);
  b.truncation_radius.reset();
  b.truncation_scale = 2.0 * base.truncation_scale;
  Scheme c = base;
  c.mode = "picard";
  c.warm_start = "explicit";
  c.degree = base.degree + 1;
  c.picard_tolerance = std::max(base.picard_tolerance, 1e-6);
  return {a, b, c};
}

CrosscheckReport uniqueness_crosscheck(const GeneratorSpec& gen, const TerminalSpec& terminal,
                                       const PathEnsemble& ens, const std::vector<Scheme>& schemes,
                                       double tolerance) {
  if (schemes.size() < 2) throw ConfigError("uniqueness crosscheck needs at least two schemes");
  CrosscheckReport rep;
  rep.schemes = schemes;
  rep.tolerance = tolerance;
  rep.note =
      "agreement across schemes cannot distinguish a unique solution from schemes converging to "
      "the same branch";
  const std::size_t S = schemes.size(), M = ens.paths;
  const int N = ens.steps();
  const auto xi = evaluate_terminal(terminal, ens, schemes.front().threads);
  std::vector<std::vector<double>> node_means(S);
  rep.y0.resize(S);
  rep.errors.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    try {
      const auto sol = solve(gen, xi, ens, schemes[s]);
      rep.y0[s] = sol.y0;
      for (int k = 0; k <= N; ++k)
        node_means[s].push_back(pairwise_sum(ConstVec(sol.Y.data() + k * M, M)) /
                                static_cast<double>(M));
    } catch (const Error& e) {
      rep.errors[s] = e.what();
    }
  }
  rep.dy0.assign(S, std::vector<double>(S, 0.0));
  rep.dy_nodes.assign(S, std::vector<double>(S, 0.0));
  bool all_ok = true;
  for (std::size_t s = 0; s < S; ++s) all_ok = all_ok && rep.errors[s].empty();
  for (std::size_t a = 0; a < S; ++a)
    for (std::size_t b = 0; b < S; ++b) {
      if (!rep.errors[a].empty() || !rep.errors[b].empty()) {
        rep.dy0[a][b] = rep.dy_nodes[a][b] = INFINITY;
        continue;
      }
      rep.dy0[a][b] = std::abs(rep.y0[a].mean - rep.y0[b].mean);
      double mx = 0.0;
      for (int k = 0; k <= N; ++k) mx = std::max(mx, std::abs(node_means[a][k] - node_means[b][k]));
      rep.dy_nodes[a][b] = mx;
      rep.max_dy0 = std::max(rep.max_dy0, rep.dy0[a][b]);
    }
  if (!all_ok) rep.max_dy0 = INFINITY;
  rep.passed = all_ok && rep.max_dy0 <= tolerance;
  return rep;
}

namespace {

std::string format_input(double t, ConstVec b, ConstVec z) {
  std::ostringstream os;
  os.precision(17);
  os << "t=" << t << " b=[";
  for (std::size_t i = 0; i < b.size(); ++i) os << (i ? "," : "") << b[i];
  os << "] z=[";
  for (std::size_t i = 0; i < z.size(); ++i) os << (i ? "," : "") << z[i];
  os << "]";
  return os.str();
}

}  // namespace

ComparisonReport comparison_check(const Problem& p, const Problem& pp, const PathEnsemble& ens,
                                  const Scheme& scheme, const ComparisonOptions& options) {
  const auto xi = evaluate_terminal(p.terminal, ens, scheme.threads);
  const auto xip = evaluate_terminal(pp.terminal, ens, scheme.threads);
  for (std::size_t m = 0; m < ens.paths; ++m)
    if (xi[m] > xip[m] + 1e-12 * std::max(1.0, std::abs(xi[m]))) {
      std::ostringstream os;
      os.precision(17);
      os << "terminal ordering fails on path " << m << ": xi=" << xi[m] << " > xi'=" << xip[m];
      throw PreconditionError(os.str());
    }

  // g >= g' on the truncation ball, sampled.
  const double radius = scheme.truncation_radius.value_or(
      scheme.truncation_scale *
      std::max(default_truncation_radius(p.generator, xi, ens),
               default_truncation_radius(pp.generator, xip, ens)));
  Probe probe = options.ordering_probe;
  probe.radius = radius;
  probe.dim = ens.dim;
  const double T = ens.grid.horizon();
  probe.times = {0.0, 0.25 * T, 0.5 * T, 0.75 * T, T};
  probe.state_scale = std::sqrt(T);
  probe.shell_spacing = std::max(probe.shell_spacing, radius / 200.0);
  for (double t : probe.times)
    for (const auto& b : probe_states(probe))
      for (const auto& z : probe_points(probe, 0xC7)) {
        const double g = p.generator.value(t, b, z), gp = pp.generator.value(t, b, z);
        if (g < gp - 1e-12 * std::max({1.0, std::abs(g), std::abs(gp)}))
          throw PreconditionError("generator ordering g >= g' fails at " + format_input(t, b, z));
      }

  ComparisonReport out;
  Scheme sc = scheme;
  sc.truncation_radius = radius;
  const auto s1 = solve(p.generator, xi, ens, sc);
  const auto s2 = solve(pp.generator, xip, ens, sc);
  out.y0 = s1.y0;
  out.y0_prime = s2.y0;
  const int N = ens.steps();
  const std::size_t M = ens.paths;
  const double disc = 2.0 * ens.grid.max_step() * std::max(value_lipschitz(s1), value_lipschitz(s2));
  CheckReport& rep = out.report;
  rep.check = "comparison";
  rep.params["discretization_slack"] = disc;
  rep.params["sigmas"] = options.sigmas;
  std::size_t node_viol = 0, path_viol = 0;
  std::vector<double> diff(M);
  for (int k = 0; k <= N; ++k) {
    for (std::size_t m = 0; m < M; ++m) diff[m] = s2.y(k, m) - s1.y(k, m);
    const Estimate e = mean_estimate(diff);
    const double slack = options.sigmas * e.std_error + disc;
    out.mean_diff.push_back(e.mean);
    out.slack.push_back(slack);
    for (double v : diff) path_viol += v < -slack;
    Witness w;
    w.kind = "comparison_node";
    w.t = ens.grid.nodes[k];
    w.lhs = e.mean;
    w.rhs = -slack;
    rep.max_excess = std::max(rep.max_excess, -slack - e.mean);
    ++rep.samples_used;
    if (e.mean < -slack) {
      ++node_viol;
      rep.witnesses.push_back(w);
    }
  }
  out.violation_fraction = static_cast<double>(node_viol) / (N + 1);
  out.pathwise_violation_fraction = static_cast<double>(path_viol) / ((N + 1) * M);
  out.passed = out.violation_fraction <= options.max_violation_fraction;
  rep.passed = out.passed;
  rep.note = "path-averaged nodewise ordering; pathwise fraction reported separately";
  return out;
}

GeneratorSpec reflect(const GeneratorSpec& gen) {
  GeneratorSpec r = gen;
  const bool unwrap = gen.name.rfind("reflect(", 0) == 0 && gen.name.back() == ')';
  r.name = unwrap ? gen.name.substr(8, gen.name.size() - 9) : "reflect(" + gen.name + ")";
  r.g1 = reflected_part(gen.g1);
  if (!gen.g2_zero && gen.g2) {
    auto g2 = gen.g2;
    r.g2 = [g2](double t, ConstVec b, ConstVec z) {
      std::vector<double> neg(z.begin(), z.end());
      for (double& v : neg) v = -v;
      return -g2(t, b, neg);
    };
  }
  return r;
}

TerminalSpec reflect(const TerminalSpec& terminal) { return terminal_negated(terminal); }

namespace {

MomentRow moment_row(double p, const std::vector<double>& x) {
  MomentRow row;
  row.parameter = p;
  row.full = exp_moment(p, x);
  row.half = exp_moment(p, ConstVec(x.data(), x.size() / 2));
  const double se = std::hypot(row.full.std_error, row.half.std_error);
  row.stable = std::isfinite(row.full.estimate) && !row.full.heavy &&
               std::abs(row.full.estimate - row.half.estimate) <= 4.0 * se + 1e-12 * row.full.estimate;
  return row;
}

}  // namespace

ZMomentReport z_moment_check(const BsdeSolution& sol, const std::vector<double>& eta_grid,
                             const std::vector<double>& lambda_grid) {
  const int N = sol.grid.steps();
  const std::size_t M = sol.paths;
  std::vector<double> quad(M), lin(M);
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<double> a(N), b(N);
    for (int k = 0; k < N; ++k) {
      const double dt = sol.grid.dt(k);
      const double r2 = norm_sq(sol.z(k, m));
      a[k] = r2 * dt;
      b[k] = std::sqrt(r2) * dt;
    }
    quad[m] = pairwise_sum(a);
    lin[m] = pairwise_sum(b);
  }
  ZMomentReport rep;
  bool contiguous = true;
  for (double eta : eta_grid) {
    rep.eta_rows.push_back(moment_row(eta, quad));
    contiguous = contiguous && rep.eta_rows.back().stable;
    if (contiguous) rep.largest_stable_eta = eta;
  }
  for (double lam : lambda_grid) rep.lambda_rows.push_back(moment_row(lam, lin));
  rep.passed = (rep.eta_rows.empty() || rep.eta_rows.front().stable) &&
               std::all_of(rep.lambda_rows.begin(), rep.lambda_rows.end(),
                           [](const MomentRow& r) { return r.stable; });
  return rep;
}

std::string classify_regime(const GeneratorSpec& gen) {
  const auto& mb = gen.modulus_bounds;
  if (mb.a == 0.0) return "a0";
  if (mb.theta < 1.0 && gen.gamma_bar) return "theta_lt_1";
  if (mb.theta == 1.0 && gen.strong_convexity) return "theta_eq_1";
  return "unclassified";
}

std::vector<std::string> regime_suites(const std::string& regime) {
  if (regime == "a0") return {"duality"};
  if (regime == "theta_lt_1") return {"duality", "zmoment"};
  if (regime == "theta_eq_1") return {"crosscheck"};
  return {};
}

}  // namespace qbsde
