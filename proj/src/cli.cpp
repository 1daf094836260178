#include "qbsde/cli.hpp"

#include <openssl/opensslv.h>

#include <Eigen/Core>
#include <algorithm>
#include <boost/version.hpp>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "qbsde/conjugate.hpp"
#include "qbsde/duality.hpp"
#include "qbsde/errors.hpp"

#ifndef QBSDE_VERSION
#define QBSDE_VERSION "0.0.0"
#endif

namespace qbsde::cli {

namespace fs = std::filesystem;

namespace {

const json& defaults() {
  static const json d = json::parse(R"({
    "terminal": null,
    "grid": {"T": 1.0, "N": 50},
    "ensemble": {"kind": "gaussian", "M": 10000, "d": 1, "seed": 1},
    "scheme": {
      "mode": "explicit", "projector": "regression", "regression_target": "pathwise",
      "degree": 4, "cross_degree": 2, "basis_clamp": 3.0, "ridge": 1e-10,
      "condition_limit": 1e12, "truncation_radius": null, "truncation_scale": 1.0,
      "picard_iterations": 50, "picard_tolerance": 1e-8, "damping": 1.0,
      "warm_start": "zero", "clip_warning_fraction": 0.1, "check_growth": true, "threads": 1
    },
    "suites": ["solve"],
    "tolerances": {
      "gap": 0.02, "sigmas": 4.0, "crosscheck": 0.03, "max_violation_fraction": 1e-3,
      "shift": 0.02, "clip_fraction": 0.1, "y0_reference": null, "y0_tolerance": 0.03,
      "min_ess_fraction": 1e-3
    },
    "outputs": {"dir": "runs", "solution": true},
    "duality": {"controls": {"count": 9, "lo": -2.0, "hi": 2.0}, "include_qstar": true},
    "compare": {"shift": 0.5, "terminal_shift": 0.0},
    "zmoment": {"eta": [0.05, 0.1, 0.25, 0.5], "lambda": [0.5, 1.0, 2.0]},
    "check": {"probe": {"radius": 10.0, "samples": 2000, "seed": 7}},
    "conjugate": {"q": {"lo": -5.0, "hi": 5.0, "points": 21},
                  "probe": {"radius": 10.0, "samples": 1000, "seed": 7}}
  })");
  return d;
}

// Recursive overlay; unlike a JSON merge patch, null is kept as a value.
void overlay(json& base, const json& top) {
  for (auto it = top.begin(); it != top.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      overlay(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

void reject_unknown(const json& node, const std::string& where, std::set<std::string> allowed) {
  if (!node.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = node.begin(); it != node.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown field " + where + "." + it.key());
}

template <class T>
T field(const json& node, const std::string& where, const std::string& key) {
  if (!node.contains(key)) throw ConfigError("missing field " + where + "." + key);
  try {
    return node.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("field " + where + "." + key + ": " + e.what());
  }
}

template <class T>
T field_or(const json& node, const std::string& where, const std::string& key, T fallback) {
  if (!node.contains(key) || node.at(key).is_null()) return fallback;
  return field<T>(node, where, key);
}

double positive(double v, const std::string& what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(what + " must be positive and finite");
  return v;
}

Probe probe_from(const json& node, const std::string& where, int dim) {
  reject_unknown(node, where, {"radius", "samples", "seed", "states", "state_scale"});
  Probe p;
  p.radius = positive(field_or<double>(node, where, "radius", p.radius), where + ".radius");
  p.samples = field_or<std::size_t>(node, where, "samples", p.samples);
  p.seed = field_or<std::uint64_t>(node, where, "seed", p.seed);
  p.states = field_or<std::size_t>(node, where, "states", p.states);
  p.state_scale = field_or<double>(node, where, "state_scale", p.state_scale);
  p.dim = dim;
  if (p.samples == 0) throw ConfigError(where + ".samples must be >= 1");
  return p;
}

Scheme scheme_from(const json& node) {
  const std::string w = "scheme";
  reject_unknown(node, w,
                 {"mode", "projector", "regression_target", "degree", "cross_degree", "basis_clamp",
                  "ridge", "condition_limit", "truncation_radius", "truncation_scale",
                  "picard_iterations", "picard_tolerance", "damping", "warm_start",
                  "clip_warning_fraction", "check_growth", "threads"});
  Scheme s;
  s.mode = field<std::string>(node, w, "mode");
  s.projector = field<std::string>(node, w, "projector");
  s.regression_target = field<std::string>(node, w, "regression_target");
  s.degree = field<int>(node, w, "degree");
  s.cross_degree = field<int>(node, w, "cross_degree");
  s.basis_clamp = field<double>(node, w, "basis_clamp");
  s.ridge = field<double>(node, w, "ridge");
  s.condition_limit = field<double>(node, w, "condition_limit");
  if (!node.at("truncation_radius").is_null())
    s.truncation_radius = field<double>(node, w, "truncation_radius");
  s.truncation_scale = field<double>(node, w, "truncation_scale");
  s.picard_iterations = field<int>(node, w, "picard_iterations");
  s.picard_tolerance = field<double>(node, w, "picard_tolerance");
  s.damping = field<double>(node, w, "damping");
  s.warm_start = field<std::string>(node, w, "warm_start");
  s.clip_warning_fraction = field<double>(node, w, "clip_warning_fraction");
  s.check_growth = field<bool>(node, w, "check_growth");
  s.threads = field<int>(node, w, "threads");
  if (s.threads < 1) throw ConfigError("scheme.threads must be >= 1");
  validate(s);
  return s;
}

json estimate_json(const Estimate& e) {
  return {{"mean", e.mean}, {"std_error", e.std_error}, {"samples", e.samples}};
}

json scheme_json(const Scheme& s) {
  json j = {{"mode", s.mode},
            {"projector", s.projector},
            {"regression_target", s.regression_target},
            {"degree", s.degree},
            {"cross_degree", s.cross_degree},
            {"basis_clamp", s.basis_clamp},
            {"truncation_scale", s.truncation_scale},
            {"warm_start", s.warm_start},
            {"picard_tolerance", s.picard_tolerance}};
  j["truncation_radius"] = s.truncation_radius ? json(*s.truncation_radius) : json(nullptr);
  return j;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

// Y (node-major) then Z (step-major) as little-endian f64, after a u64
// header [M, N, d].
void write_solution(const BsdeSolution& sol, const fs::path& path, const json& config) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    const std::uint64_t head[3] = {sol.paths, static_cast<std::uint64_t>(sol.grid.steps()),
                                   static_cast<std::uint64_t>(sol.dim)};
    out.write(reinterpret_cast<const char*>(head), sizeof head);
    out.write(reinterpret_cast<const char*>(sol.Y.data()),
              static_cast<std::streamsize>(sol.Y.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(sol.Z.data()),
              static_cast<std::streamsize>(sol.Z.size() * sizeof(double)));
    if (!out) throw Error("write failed: " + path.string());
  }
  json side = {{"format", "u64[M, N, d], f64 Y[(N + 1) * M] node-major, f64 Z[N * M * d]"},
               {"paths", sol.paths},
               {"steps", sol.grid.steps()},
               {"dim", sol.dim},
               {"grid", sol.grid.nodes},
               {"y0", estimate_json(sol.y0)},
               {"truncation_radius", sol.truncation_radius},
               {"sha256", sha256_file(path.string())},
               {"config", config}};
  write_text(path.string() + ".json", side.dump(2));
}

class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw Error("run directory is locked by another run (" + path_.string() +
                  "); remove the lockfile if no run is active");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

json versions() {
  std::ostringstream eigen;
  eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
  return {{"qbsde", QBSDE_VERSION},
          {"compiler", __VERSION__},
          {"eigen", eigen.str()},
          {"boost", BOOST_LIB_VERSION},
          {"openssl", OPENSSL_VERSION_TEXT},
          {"rng", kGaussianScheme}};
}

struct Context {
  const ExperimentConfig& cfg;
  const PathEnsemble& ens;
  std::map<std::string, double>& summary;
  std::optional<BsdeSolution> primal;

  const BsdeSolution& solution() {
    if (!primal) primal = solve(cfg.generator, cfg.terminal, ens, cfg.scheme);
    return *primal;
  }
  void put(const std::string& suite, const std::string& key, double v) {
    summary[suite + "." + key] = v;
  }
};

json suite_solve(Context& c, bool& passed, const fs::path& dir) {
  const auto& sol = c.solution();
  const auto& tol = c.cfg.tolerances;
  json j;
  j["y0"] = estimate_json(sol.y0);
  j["truncation_radius"] = sol.truncation_radius;
  j["clip_fraction"] = sol.clip_fraction();
  j["iterations"] = sol.iterations;
  j["picard_gaps"] = sol.picard_gaps;
  j["residuals"] = sol.residuals;
  j["sup_abs_y"] = sol.sup_abs_y;
  j["z_energy"] = sol.z_energy;
  j["warnings"] = sol.warnings;
  std::vector<double> mean_y, mean_z;
  for (int k = 0; k <= sol.grid.steps(); ++k)
    mean_y.push_back(pairwise_sum(ConstVec(sol.Y.data() + k * sol.paths, sol.paths)) /
                     static_cast<double>(sol.paths));
  for (int k = 0; k < sol.grid.steps(); ++k) {
    std::vector<double> z1(sol.paths);
    for (std::size_t m = 0; m < sol.paths; ++m) z1[m] = sol.z(k, m)[0];
    mean_z.push_back(pairwise_sum(z1) / static_cast<double>(sol.paths));
  }
  j["mean_y"] = mean_y;
  j["mean_z1"] = mean_z;
  passed = sol.clip_fraction() <= tol.clip_fraction;
  if (tol.y0_reference) {
    j["y0_reference"] = *tol.y0_reference;
    passed = passed && std::abs(sol.y0.mean - *tol.y0_reference) <= tol.y0_tolerance;
  }
  c.put("solve", "y0", sol.y0.mean);
  c.put("solve", "y0_std_error", sol.y0.std_error);
  c.put("solve", "clip_fraction", sol.clip_fraction());
  c.put("solve", "iterations", sol.iterations);
  c.put("solve", "sup_abs_y", sol.sup_abs_y);
  c.put("solve", "z_energy", sol.z_energy);
  if (c.cfg.write_solution) {
    write_solution(sol, dir / "solution.bin", c.cfg.raw);
    j["solution"] = "solution.bin";
  }
  return j;
}

json suite_conjugate(Context& c, bool& passed) {
  const auto& node = c.cfg.raw.at("conjugate");
  const Probe probe = probe_from(node.at("probe"), "conjugate.probe", c.cfg.dim);
  const auto handle = make_handle(c.cfg.generator);
  const auto check = conjugate_lower_bound_check(handle, c.cfg.generator, probe);
  const double lo = node.at("q").at("lo"), hi = node.at("q").at("hi");
  const int n = node.at("q").at("points");
  json table = json::array();
  bool finite = true;
  std::vector<double> b(c.cfg.dim, 0.0), q(c.cfg.dim, 0.0);
  for (int i = 0; i < n; ++i) {
    q[0] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
    json row = {{"q", q[0]}};
    try {
      const auto r = transform_detailed(handle, 0.0, b, q);
      row["f1"] = r.value;
      row["analytic"] = r.analytic;
    } catch (const Error& e) {
      row["error"] = e.what();
      finite = false;
    }
    table.push_back(row);
  }
  passed = check.passed && finite;
  c.put("conjugate", "lower_bound_passed", check.passed);
  c.put("conjugate", "lower_bound_max_excess", check.max_excess);
  return {{"lower_bound", to_json(check)}, {"table", table}, {"table_note", "t = 0, b = 0"}};
}

json suite_check(Context& c, bool& passed) {
  const Probe probe = probe_from(c.cfg.raw.at("check").at("probe"), "check.probe", c.cfg.dim);
  const auto& gen = c.cfg.generator;
  json j;
  passed = true;
  auto add = [&](const std::string& name, const CheckReport& r) {
    j[name] = to_json(r);
    passed = passed && r.passed;
    c.put("check", name + "_passed", r.passed);
    c.put("check", name + "_max_excess", r.max_excess);
  };
  add("A1", check_quadratic_growth(gen, probe));
  if (gen.gamma_bar) add("A2", check_strictly_quadratic(gen, probe));
  if (gen.strong_convexity) add("A3_candidate", check_strong_convexity(gen, *gen.strong_convexity, probe));
  add("B", check_uniform_continuity(gen, probe));
  return j;
}

json suite_duality(Context& c, bool& passed) {
  const auto& node = c.cfg.raw.at("duality");
  const auto& ctl = node.at("controls");
  const auto family = constant_family(ctl.at("count"), ctl.at("lo"), ctl.at("hi"), c.cfg.dim);
  DualityOptions opt;
  opt.gap_tolerance = c.cfg.tolerances.gap;
  opt.sigmas = c.cfg.tolerances.sigmas;
  opt.include_qstar = node.at("include_qstar");
  opt.min_ess_fraction = c.cfg.tolerances.min_ess_fraction;
  const auto handle = make_handle(c.cfg.generator);
  const auto rep = duality_certificate(c.cfg.generator, handle, c.cfg.terminal, c.ens, family,
                                       c.cfg.scheme, opt);
  json entries = json::array();
  for (const auto& e : rep.dual_values) {
    json a = {{"passed", e.audit.passed},
              {"reasons", e.audit.reasons},
              {"l2_under_q", estimate_json(e.audit.l2_under_q)},
              {"value_integrability", estimate_json(e.audit.value_integrability)},
              {"martingale_proxy", estimate_json(e.audit.martingale_proxy)},
              {"entropy_budget", estimate_json(e.audit.entropy_budget)},
              {"ess", e.audit.ess},
              {"overflow", e.audit.overflow},
              {"worst_f1_excess", e.audit.worst_f1_excess}};
    entries.push_back({{"id", e.id},
                       {"ok", e.ok},
                       {"error", e.error},
                       {"method", e.method},
                       {"y0", estimate_json(e.y0)},
                       {"admissibility", a}});
    if (e.ok) c.put("duality", "y0[" + e.id + "]", e.y0.mean);
  }
  passed = rep.passed;
  c.put("duality", "primal_y0", rep.primal_y0.mean);
  c.put("duality", "gap", rep.gap);
  c.put("duality", "gap_std_error", rep.gap_std_error);
  c.put("duality", "discretization_slack", rep.discretization_slack);
  c.put("duality", "domination_violations", static_cast<double>(rep.domination_violations.size()));
  return {{"primal_y0", estimate_json(rep.primal_y0)},
          {"qstar", estimate_json(rep.qstar_value)},
          {"qstar_admissible", rep.qstar_ok},
          {"gap", rep.gap},
          {"gap_std_error", rep.gap_std_error},
          {"lipschitz", rep.lipschitz},
          {"discretization_slack", rep.discretization_slack},
          {"domination_violations", rep.domination_violations},
          {"not_admissible", rep.not_admissible},
          {"controls", entries}};
}

json suite_crosscheck(Context& c, bool& passed) {
  const auto schemes = default_crosscheck_schemes(c.cfg.scheme);
  const auto rep = uniqueness_crosscheck(c.cfg.generator, c.cfg.terminal, c.ens, schemes,
                                         c.cfg.tolerances.crosscheck);
  json rows = json::array();
  for (std::size_t i = 0; i < rep.schemes.size(); ++i) {
    rows.push_back({{"scheme", scheme_json(rep.schemes[i])},
                    {"y0", estimate_json(rep.y0[i])},
                    {"error", rep.errors[i]}});
    c.put("crosscheck", "y0[" + std::to_string(i) + "]", rep.y0[i].mean);
  }
  passed = rep.passed;
  c.put("crosscheck", "max_dy0", rep.max_dy0);
  return {{"configurations", rows},
          {"dy0", rep.dy0},
          {"dy_nodes", rep.dy_nodes},
          {"max_dy0", rep.max_dy0},
          {"tolerance", rep.tolerance},
          {"note", rep.note}};
}

json suite_compare(Context& c, bool& passed) {
  const auto& node = c.cfg.raw.at("compare");
  const double shift = node.at("shift"), tshift = node.at("terminal_shift");
  const Problem p{c.cfg.generator, c.cfg.terminal};
  const Problem pp{with_offset(c.cfg.generator, -shift), terminal_shifted(c.cfg.terminal, tshift)};
  ComparisonOptions opt;
  opt.sigmas = c.cfg.tolerances.sigmas;
  opt.max_violation_fraction = c.cfg.tolerances.max_violation_fraction;
  opt.ordering_probe.dim = c.cfg.dim;
  const auto rep = comparison_check(p, pp, c.ens, c.cfg.scheme, opt);
  // g' = g - shift and xi' = xi + terminal_shift give Y' - Y = (T - t) shift + terminal_shift.
  const auto& nodes = c.ens.grid.nodes;
  const double T = c.ens.grid.horizon();
  double worst = 0.0;
  for (std::size_t k = 0; k < rep.mean_diff.size(); ++k)
    worst = std::max(worst, std::abs(rep.mean_diff[k] - ((T - nodes[k]) * shift + tshift)));
  passed = rep.passed && worst <= c.cfg.tolerances.shift;
  c.put("compare", "violation_fraction", rep.violation_fraction);
  c.put("compare", "pathwise_violation_fraction", rep.pathwise_violation_fraction);
  c.put("compare", "shift_error", worst);
  c.put("compare", "y0", rep.y0.mean);
  c.put("compare", "y0_prime", rep.y0_prime.mean);
  return {{"report", to_json(rep.report)},
          {"mean_diff", rep.mean_diff},
          {"slack", rep.slack},
          {"violation_fraction", rep.violation_fraction},
          {"pathwise_violation_fraction", rep.pathwise_violation_fraction},
          {"shift", shift},
          {"terminal_shift", tshift},
          {"shift_error", worst},
          {"y0", estimate_json(rep.y0)},
          {"y0_prime", estimate_json(rep.y0_prime)}};
}

json moment_rows(const std::vector<MomentRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"parameter", r.parameter},
                   {"estimate", r.full.estimate},
                   {"log_estimate", r.full.log_estimate},
                   {"std_error", r.full.std_error},
                   {"top1_mass", r.full.top1_mass},
                   {"heavy", r.full.heavy},
                   {"half_estimate", r.half.estimate},
                   {"stable", r.stable}});
  return out;
}

json suite_zmoment(Context& c, bool& passed) {
  const auto& node = c.cfg.raw.at("zmoment");
  const auto rep = z_moment_check(c.solution(), node.at("eta").get<std::vector<double>>(),
                                  node.at("lambda").get<std::vector<double>>());
  passed = rep.passed;
  c.put("zmoment", "largest_stable_eta", rep.largest_stable_eta);
  for (const auto& r : rep.eta_rows)
    c.put("zmoment", "eta[" + format_double(r.parameter) + "]", r.full.log_estimate);
  for (const auto& r : rep.lambda_rows)
    c.put("zmoment", "lambda[" + format_double(r.parameter) + "]", r.full.log_estimate);
  return {{"eta", moment_rows(rep.eta_rows)},
          {"lambda", moment_rows(rep.lambda_rows)},
          {"largest_stable_eta", rep.largest_stable_eta}};
}

}  // namespace

json to_json(const CheckReport& r) {
  json w = json::array();
  for (const auto& x : r.witnesses)
    w.push_back({{"kind", x.kind}, {"t", x.t}, {"b", x.b}, {"z", x.z}, {"z2", x.z2},
                 {"lhs", x.lhs}, {"rhs", x.rhs}});
  return {{"check", r.check},
          {"passed", r.passed},
          {"witnesses", w},
          {"samples_used", r.samples_used},
          {"sampling_radius", r.sampling_radius},
          {"max_excess", r.max_excess},
          {"max_ratio", r.max_ratio},
          {"params", r.params},
          {"note", r.note}};
}

GeneratorSpec generator_from_config(const json& node) {
  const std::string w = "generator";
  reject_unknown(node, w,
                 {"fixture", "param", "g1", "g2", "gamma", "gamma_bar", "strong_convexity",
                  "alpha", "offset", "name"});
  GeneratorSpec gen;
  if (node.contains("fixture")) {
    for (const char* k : {"g1", "g2", "gamma", "gamma_bar", "strong_convexity", "alpha"})
      if (node.contains(k))
        throw ConfigError(std::string("generator.") + k + " cannot be combined with a fixture");
    const auto param = node.contains("param") && !node.at("param").is_null()
                           ? std::optional<double>(field<double>(node, w, "param"))
                           : std::nullopt;
    gen = fixture(field<std::string>(node, w, "fixture"), param).generator;
  } else {
    if (!node.contains("g1")) throw ConfigError("generator needs a fixture or an inline g1");
    const json& g1 = node.at("g1");
    reject_unknown(g1, "generator.g1", {"family", "gamma", "fixture", "param"});
    const auto family = field<std::string>(g1, "generator.g1", "family");
    if (family == "pure_quadratic")
      gen.g1 = pure_quadratic_part(positive(field<double>(g1, "generator.g1", "gamma"), "g1.gamma"));
    else if (family == "quadratic_minus_norm")
      gen.g1 = quadratic_minus_norm_part();
    else if (family == "gtilde")
      gen.g1 = gtilde_part();
    else if (family == "zero")
      gen.g1 = zero_part();
    else if (family == "fixture")
      gen.g1 = fixture(field<std::string>(g1, "generator.g1", "fixture"),
                       g1.contains("param") ? std::optional<double>(g1.at("param").get<double>())
                                            : std::nullopt)
                   .generator.g1;
    else
      throw ConfigError("unknown g1 family: " + family);

    const json g2 = node.value("g2", json("zero"));
    if (g2.is_string() && g2.get<std::string>() == "zero") {
      gen.g2_zero = true;
      gen.g2 = [](double, ConstVec, ConstVec) { return 0.0; };
      gen.modulus = [](double) { return 0.0; };
    } else if (g2.is_object()) {
      reject_unknown(g2, "generator.g2", {"kind", "c", "fixture", "param"});
      const auto kind = field<std::string>(g2, "generator.g2", "kind");
      if (kind == "scaled_norm") {
        const double c = field<double>(g2, "generator.g2", "c");
        gen.g2 = [c](double, ConstVec, ConstVec z) { return c * norm(z); };
        gen.modulus = [c](double u) { return std::abs(c) * u; };
        gen.modulus_bounds = {std::abs(c), 0.0, 1.0};
        gen.g2_zero = c == 0.0;
      } else if (kind == "fixture") {
        const auto src = fixture(field<std::string>(g2, "generator.g2", "fixture"),
                                 g2.contains("param")
                                     ? std::optional<double>(g2.at("param").get<double>())
                                     : std::nullopt)
                             .generator;
        gen.g2 = src.g2;
        gen.g2_zero = src.g2_zero;
        gen.modulus = src.modulus;
        gen.modulus_bounds = src.modulus_bounds;
      } else {
        throw ConfigError("unknown g2 kind: " + kind);
      }
    } else {
      throw ConfigError("generator.g2 must be \"zero\" or an object");
    }
    gen.gamma = positive(field<double>(node, w, "gamma"), "generator.gamma");
    if (node.contains("gamma_bar")) gen.gamma_bar = field<double>(node, w, "gamma_bar");
    if (node.contains("strong_convexity")) {
      const json& sc = node.at("strong_convexity");
      reject_unknown(sc, "generator.strong_convexity", {"epsilon", "c"});
      gen.strong_convexity = StrongConvexity{field<double>(sc, "generator.strong_convexity", "epsilon"),
                                             field<double>(sc, "generator.strong_convexity", "c")};
    }
    const double a = field_or<double>(node, w, "alpha", 0.0);
    if (!(a >= 0.0)) throw ConfigError("generator.alpha must be >= 0");
    gen.alpha = [a](double, ConstVec) { return a; };
    gen.name = field_or<std::string>(node, w, "name", "inline");
  }
  if (node.contains("name") && node.contains("fixture")) gen.name = node.at("name");
  const double offset = field_or<double>(node, w, "offset", 0.0);
  if (offset != 0.0) gen = with_offset(gen, offset);
  validate(gen);
  return gen;
}

TerminalSpec terminal_from_config(const json& node, int dim, double gamma) {
  const std::string w = "terminal";
  if (node.is_string()) return terminal_from_config(json{{"kind", node}}, dim, gamma);
  reject_unknown(node, w, {"kind", "v", "gamma", "value", "base", "delta"});
  const auto kind = field<std::string>(node, w, "kind");
  auto direction = [&]() {
    std::vector<double> v(dim, 0.0);
    v[0] = 1.0;
    if (node.contains("v")) v = field<std::vector<double>>(node, w, "v");
    if (static_cast<int>(v.size()) != dim)
      throw ConfigError("terminal.v has " + std::to_string(v.size()) + " entries, dimension is " +
                        std::to_string(dim));
    return v;
  };
  if (kind == "linear") return terminal_linear(direction());
  if (kind == "abs") return terminal_abs(direction());
  if (kind == "critical")
    return terminal_critical(positive(field_or<double>(node, w, "gamma", gamma), "terminal.gamma"));
  if (kind == "constant") return terminal_constant(field<double>(node, w, "value"));
  if (kind == "shifted")
    return terminal_shifted(terminal_from_config(node.at("base"), dim, gamma),
                            field<double>(node, w, "delta"));
  if (kind == "negated") return terminal_negated(terminal_from_config(node.at("base"), dim, gamma));
  throw ConfigError("unknown terminal kind: " + kind);
}

ExperimentConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(doc, "config",
                 {"generator", "terminal", "grid", "ensemble", "scheme", "suites", "tolerances",
                  "outputs", "duality", "compare", "zmoment", "check", "conjugate"});
  if (!doc.contains("generator")) throw ConfigError("missing field config.generator");
  json r = defaults();
  overlay(r, doc);

  ExperimentConfig cfg;
  reject_unknown(r.at("grid"), "grid", {"T", "N"});
  const double T = field<double>(r.at("grid"), "grid", "T");
  const int N = field<int>(r.at("grid"), "grid", "N");
  if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("grid.T must be positive");
  if (N < 1) throw ConfigError("grid.N must be >= 1");
  cfg.grid = TimeGrid::uniform(T, N);

  const json& e = r.at("ensemble");
  reject_unknown(e, "ensemble", {"kind", "M", "d", "seed"});
  cfg.ensemble_kind = field<std::string>(e, "ensemble", "kind");
  cfg.dim = field<int>(e, "ensemble", "d");
  cfg.seed = field<std::uint64_t>(e, "ensemble", "seed");
  if (cfg.dim < 1) throw ConfigError("ensemble.d must be >= 1");
  if (cfg.ensemble_kind == "gaussian") {
    const auto M = field<long long>(e, "ensemble", "M");
    if (M < 1) throw ConfigError("ensemble.M must be >= 1");
    cfg.paths = static_cast<std::size_t>(M);
  } else if (cfg.ensemble_kind == "tree") {
    if (cfg.dim != 1) throw ConfigError("tree ensembles are one-dimensional");
    if (N > 24) throw ConfigError("tree ensembles need N <= 24");
    cfg.paths = std::size_t{1} << N;
    r["ensemble"]["M"] = cfg.paths;
  } else {
    throw ConfigError("ensemble.kind must be gaussian or tree, got " + cfg.ensemble_kind);
  }

  cfg.generator = generator_from_config(r.at("generator"));
  if (r.at("terminal").is_null()) {
    const auto& g = r.at("generator");
    r["terminal"] = g.contains("fixture")
                        ? json(fixture(g.at("fixture"), g.contains("param") && !g.at("param").is_null()
                                                            ? std::optional<double>(g.at("param").get<double>())
                                                            : std::nullopt)
                                   .recommended_terminal)
                        : json("linear");
  }
  cfg.terminal = terminal_from_config(r.at("terminal"), cfg.dim, cfg.generator.gamma);

  cfg.scheme = scheme_from(r.at("scheme"));
  if (cfg.ensemble_kind == "tree" && cfg.scheme.projector != "lattice")
    throw ConfigError("tree ensembles use the lattice projector");

  const json& s = r.at("suites");
  if (!s.is_array() || s.empty()) throw ConfigError("suites must be a non-empty array");
  for (const auto& x : s) {
    const auto name = x.get<std::string>();
    if (std::find(kSuites.begin(), kSuites.end(), name) == kSuites.end())
      throw ConfigError("unknown suite: " + name);
    cfg.suites.push_back(name);
  }

  const json& t = r.at("tolerances");
  const std::string tw = "tolerances";
  reject_unknown(t, tw,
                 {"gap", "sigmas", "crosscheck", "max_violation_fraction", "shift", "clip_fraction",
                  "y0_reference", "y0_tolerance", "min_ess_fraction"});
  Tolerances& tol = cfg.tolerances;
  tol.gap = positive(field<double>(t, tw, "gap"), "tolerances.gap");
  tol.sigmas = positive(field<double>(t, tw, "sigmas"), "tolerances.sigmas");
  tol.crosscheck = positive(field<double>(t, tw, "crosscheck"), "tolerances.crosscheck");
  tol.max_violation_fraction =
      positive(field<double>(t, tw, "max_violation_fraction"), "tolerances.max_violation_fraction");
  tol.shift = positive(field<double>(t, tw, "shift"), "tolerances.shift");
  tol.clip_fraction = positive(field<double>(t, tw, "clip_fraction"), "tolerances.clip_fraction");
  if (!t.at("y0_reference").is_null()) tol.y0_reference = field<double>(t, tw, "y0_reference");
  tol.y0_tolerance = positive(field<double>(t, tw, "y0_tolerance"), "tolerances.y0_tolerance");
  tol.min_ess_fraction = positive(field<double>(t, tw, "min_ess_fraction"), "tolerances.min_ess_fraction");

  const json& o = r.at("outputs");
  reject_unknown(o, "outputs", {"dir", "solution"});
  cfg.out_dir = field<std::string>(o, "outputs", "dir");
  cfg.write_solution = field<bool>(o, "outputs", "solution");

  // Suite sections: shape checks so that failures surface before compute.
  reject_unknown(r.at("duality"), "duality", {"controls", "include_qstar"});
  const json& ctl = r.at("duality").at("controls");
  reject_unknown(ctl, "duality.controls", {"count", "lo", "hi"});
  if (field<int>(ctl, "duality.controls", "count") < 0)
    throw ConfigError("duality.controls.count must be >= 0");
  if (!(field<double>(ctl, "duality.controls", "lo") <= field<double>(ctl, "duality.controls", "hi")))
    throw ConfigError("duality.controls needs lo <= hi");
  field<bool>(r.at("duality"), "duality", "include_qstar");
  reject_unknown(r.at("compare"), "compare", {"shift", "terminal_shift"});
  if (!(field<double>(r.at("compare"), "compare", "shift") >= 0.0) ||
      !(field<double>(r.at("compare"), "compare", "terminal_shift") >= 0.0))
    throw ConfigError("compare shifts must be >= 0 so that the pair is ordered");
  reject_unknown(r.at("zmoment"), "zmoment", {"eta", "lambda"});
  for (const char* k : {"eta", "lambda"}) {
    const auto v = field<std::vector<double>>(r.at("zmoment"), "zmoment", k);
    if (v.empty()) throw ConfigError(std::string("zmoment.") + k + " must be non-empty");
    for (double x : v) positive(x, std::string("zmoment.") + k + " entries");
  }
  reject_unknown(r.at("check"), "check", {"probe"});
  probe_from(r.at("check").at("probe"), "check.probe", cfg.dim);
  reject_unknown(r.at("conjugate"), "conjugate", {"q", "probe"});
  probe_from(r.at("conjugate").at("probe"), "conjugate.probe", cfg.dim);
  const json& q = r.at("conjugate").at("q");
  reject_unknown(q, "conjugate.q", {"lo", "hi", "points"});
  if (field<int>(q, "conjugate.q", "points") < 1) throw ConfigError("conjugate.q.points must be >= 1");
  field<double>(q, "conjugate.q", "lo");
  field<double>(q, "conjugate.q", "hi");

  cfg.raw = r;
  return cfg;
}

std::string config_hash(const json& resolved) {
  json c = resolved;
  c["ensemble"].erase("seed");
  c["scheme"].erase("threads");
  c["outputs"].erase("dir");
  const auto text = c.dump();
  return sha256_hex(text.data(), text.size());
}

RunResult run(const json& config, const RunOptions& options) {
  json doc = config;
  if (options.seed) doc["ensemble"]["seed"] = *options.seed;
  if (options.threads) doc["scheme"]["threads"] = *options.threads;
  if (options.out_dir) doc["outputs"]["dir"] = *options.out_dir;
  if (!options.suites.empty()) doc["suites"] = options.suites;
  const ExperimentConfig cfg = parse_config(doc);

  RunResult res;
  const std::string hash = config_hash(cfg.raw);
  const fs::path dir = fs::path(cfg.out_dir) / (hash.substr(0, 16) + "-" + std::to_string(cfg.seed));
  fs::create_directories(dir);
  res.run_dir = dir.string();
  RunLock lock(dir / "run.lock");

  const PathEnsemble ens = cfg.ensemble_kind == "tree"
                               ? simulate_tree(cfg.grid)
                               : simulate(cfg.grid, cfg.dim, cfg.paths, cfg.seed, cfg.scheme.threads);
  res.ensemble_digest = ensemble_digest(ens);

  Context ctx{cfg, ens, res.summary, std::nullopt};
  json suites = json::object();
  bool all = true;
  for (const auto& name : cfg.suites) {
    bool passed = false;
    json j;
    try {
      if (name == "solve") j = suite_solve(ctx, passed, dir);
      else if (name == "conjugate") j = suite_conjugate(ctx, passed);
      else if (name == "check") j = suite_check(ctx, passed);
      else if (name == "duality") j = suite_duality(ctx, passed);
      else if (name == "crosscheck") j = suite_crosscheck(ctx, passed);
      else if (name == "compare") j = suite_compare(ctx, passed);
      else if (name == "zmoment") j = suite_zmoment(ctx, passed);
    } catch (const Error& e) {
      passed = false;
      j["error"] = e.what();
    }
    j["passed"] = passed;
    suites[name] = j;
    all = all && passed;
  }
  res.status = all ? kPassed : kSuiteFailed;

  json summary = json::object();
  for (const auto& [k, v] : res.summary) summary[k] = v;
  res.report = {{"config", cfg.raw},
                {"seed", cfg.seed},
                {"config_hash", hash},
                {"ensemble_digest", res.ensemble_digest},
                {"suites", suites},
                {"passed", all}};
  write_text(dir / "report.json", res.report.dump(2));

  std::ostringstream csv;
  csv << "suite,metric,value\n";
  for (const auto& [k, v] : res.summary) {
    const auto dot = k.find('.');
    csv << k.substr(0, dot) << ',' << k.substr(dot + 1) << ',' << format_double(v) << '\n';
  }
  write_text(dir / "summary.csv", csv.str());

  json artifacts = json::object();
  for (const char* a : {"report.json", "summary.csv", "solution.bin", "solution.bin.json"})
    if (fs::exists(dir / a)) artifacts[a] = sha256_file((dir / a).string());
  const json manifest = {{"config", cfg.raw},
                         {"seed", cfg.seed},
                         {"threads", cfg.scheme.threads},
                         {"config_hash", hash},
                         {"versions", versions()},
                         {"ensemble_digest", res.ensemble_digest},
                         {"summary", summary},
                         {"artifacts", artifacts},
                         {"status", res.status}};
  write_text(dir / "manifest.json", manifest.dump(2));
  return res;
}

ReproduceResult reproduce(const std::string& manifest_path, const RunOptions& options) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open manifest " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ConfigError("manifest is not valid JSON: " + std::string(e.what()));
  }
  for (const char* k : {"config", "seed", "ensemble_digest", "summary", "versions"})
    if (!manifest.contains(k)) throw ConfigError(std::string("manifest lacks ") + k);

  RunOptions opt = options;
  opt.seed = manifest.at("seed").get<std::uint64_t>();
  if (!opt.out_dir) opt.out_dir = (fs::path(manifest_path).parent_path() / "reproduce").string();
  opt.suites.clear();

  ReproduceResult out;
  out.rerun = run(manifest.at("config"), opt);
  const auto recorded_digest = manifest.at("ensemble_digest").get<std::string>();
  if (out.rerun.ensemble_digest != recorded_digest)
    out.diffs.push_back("ensemble digest: recorded " + recorded_digest + ", got " +
                        out.rerun.ensemble_digest);
  const json& recorded = manifest.at("summary");
  for (auto it = recorded.begin(); it != recorded.end(); ++it) {
    const auto found = out.rerun.summary.find(it.key());
    if (found == out.rerun.summary.end()) {
      out.diffs.push_back(it.key() + ": missing from the re-run");
      continue;
    }
    const double now = found->second;
    if (it.value().is_null()) {
      if (std::isfinite(now)) out.diffs.push_back(it.key() + ": recorded null, got " + format_double(now));
      continue;
    }
    const double was = it.value().get<double>();
    if (!(std::abs(now - was) <= 1e-12 * std::max(1.0, std::abs(was))))
      out.diffs.push_back(it.key() + ": recorded " + format_double(was) + ", got " +
                          format_double(now));
  }
  for (const auto& [k, v] : out.rerun.summary)
    if (!recorded.contains(k)) out.diffs.push_back(k + ": absent from the manifest");
  out.status = out.diffs.empty() ? kPassed : kDrift;
  return out;
}

}  // namespace qbsde::cli
