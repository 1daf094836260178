#include "qbsde/conjugate.hpp"

#include <algorithm>
#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <tuple>

#include "qbsde/errors.hpp"
#include "report_builder.hpp"

namespace qbsde {

namespace {

std::string format_vec(ConstVec v) {
  std::ostringstream os;
  os.precision(17);
  os << "[";
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << "]";
  return os.str();
}

constexpr int kLineCells = 64;

}  // namespace

ConjugateHandle make_handle(const GeneratorSpec& gen, SearchConfig search) {
  return ConjugateHandle{gen.g1, search, false};
}

TransformResult numeric_conjugate(const std::function<double(ConstVec)>& f, ConstVec q,
                                  const SearchConfig& search) {
  const std::size_t d = q.size();
  if (d == 0) throw ConfigError("conjugate: empty q");
  const double qn = norm(q);
  std::vector<double> dir(d, 0.0);
  if (qn > 0.0) {
    for (std::size_t i = 0; i < d; ++i) dir[i] = q[i] / qn;
  } else {
    dir[0] = 1.0;
  }

  std::vector<double> z(d);
  auto eval_f = [&](ConstVec x) {
    const double v = f(x);
    if (!std::isfinite(v)) throw EvaluationFault("g1 is not finite at z=" + format_vec(x));
    return v;
  };
  auto along = [&](double s) {
    for (std::size_t i = 0; i < d; ++i) z[i] = s * dir[i];
    return eval_f(z);
  };

  double radius = search.initial_radius;
  TransformResult out;
  for (int e = 0; e <= search.max_expansions; ++e, radius *= search.expansion) {
    const double cell = 2.0 * radius / kLineCells;
    std::vector<double> fs(kLineCells + 1), hs(kLineCells + 1);
    for (int j = 0; j <= kLineCells; ++j) {
      const double s = -radius + j * cell;
      fs[j] = along(s);
      hs[j] = s * qn - fs[j];
    }
    if (search.check_convexity) {
      for (int j = 1; j < kLineCells; ++j) {
        const double mid = 0.5 * (fs[j - 1] + fs[j + 1]);
        const double tol = 1e-9 * std::max({1.0, std::abs(fs[j - 1]), std::abs(fs[j + 1])});
        if (fs[j] > mid + tol) {
          std::vector<double> at(d);
          for (std::size_t i = 0; i < d; ++i) at[i] = (-radius + j * cell) * dir[i];
          throw NonConvexity("midpoint convexity violated at z=" + format_vec(at));
        }
      }
    }
    int best = 0;
    for (int j = 1; j <= kLineCells; ++j) {
      const double sj = std::abs(-radius + j * cell), sb = std::abs(-radius + best * cell);
      if (hs[j] > hs[best] || (hs[j] == hs[best] && sj < sb)) best = j;
    }
    const double lo = -radius + std::max(0, best - 1) * cell;
    const double hi = -radius + std::min(kLineCells, best + 1) * cell;
    boost::uintmax_t iters = static_cast<boost::uintmax_t>(search.max_iterations);
    auto [s_star, neg_h] = boost::math::tools::brent_find_minima(
        [&](double s) { return -(s * qn - along(s)); }, lo, hi,
        std::numeric_limits<double>::digits / 2, iters);
    if (-neg_h < hs[best]) s_star = -radius + best * cell;

    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = s_star * dir[i];
    auto h = [&](ConstVec p) { return dot(q, p) - eval_f(p); };
    double hx = h(x);

    // Coordinate pattern search inside the ball of the current radius.
    double step = cell;
    std::vector<double> trial(d);
    for (int guard = 0; guard < 100000; ++guard) {
      if (step <= search.tolerance * (1.0 + norm(x))) break;
      bool moved = false;
      for (std::size_t i = 0; i < d && !moved; ++i) {
        for (double sign : {1.0, -1.0}) {
          trial = x;
          trial[i] += sign * step;
          if (norm(trial) > radius) continue;
          const double ht = h(trial);
          if (ht > hx) {
            x = trial;
            hx = ht;
            moved = true;
            break;
          }
        }
      }
      if (!moved) step *= 0.5;
    }

    if (norm(x) < radius - 2.0 * cell) {
      out.value = hx;
      out.argmax = std::move(x);
      out.analytic = false;
      out.expansions = e;
      return out;
    }
  }
  throw SearchDivergence("conjugate search radius cap reached at q=" + format_vec(q) +
                         " (transform appears to be +inf)");
}

TransformResult transform_detailed(const ConjugateHandle& handle, double t, ConstVec b,
                                   ConstVec q) {
  if (!handle.source) throw ConfigError("conjugate handle without source");
  if (!handle.source->convex())
    throw NonConvexity("conjugate of a non-convex part: " + handle.source->family());
  if (!handle.force_numeric) {
    if (auto c = handle.source->conjugate(t, b, q)) {
      if (!std::isfinite(*c))
        throw SearchDivergence("conjugate of " + handle.source->family() + " is +inf at q=" +
                               format_vec(q));
      TransformResult r;
      r.value = *c;
      r.analytic = true;
      return r;
    }
  }
  const auto& part = *handle.source;
  return numeric_conjugate([&](ConstVec z) { return part.value(t, b, z); }, q, handle.search);
}

double transform(const ConjugateHandle& handle, double t, ConstVec b, ConstVec q) {
  return transform_detailed(handle, t, b, q).value;
}

std::vector<double> subgradient(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z) {
  if (!gen.g1->convex())
    throw NonConvexity("subgradient of a non-convex part: " + gen.g1->family());
  std::vector<double> u(z.size(), 0.0);
  gen.g1->subgradient(t, b, z, u);
  return u;
}

std::vector<double> verified_subgradient(const GeneratorSpec& gen, double t, ConstVec b,
                                         ConstVec z, std::size_t probes, std::uint64_t seed) {
  auto u = subgradient(gen, t, b, z);
  const double gz = gen.g1_value(t, b, z);
  const double scale = 1.0 + norm(z);
  std::mt19937_64 rng(stream_seed(seed, 0x5B, 0));
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  std::vector<double> zp(z.size()), dz(z.size());
  for (std::size_t k = 0; k < probes; ++k) {
    for (double& v : dz) v = normal(rng);
    const double len = norm(dz);
    if (len == 0.0) continue;
    const double r = 1e-3 * std::exp(unif(rng) * std::log(1e4)) * scale;
    for (std::size_t i = 0; i < z.size(); ++i) {
      dz[i] *= r / len;
      zp[i] = z[i] + dz[i];
    }
    const double lhs = gen.g1_value(t, b, zp) - gz;
    const double rhs = dot(u, dz);
    if (lhs < rhs - 1e-9 * std::max({1.0, std::abs(lhs), std::abs(rhs), std::abs(gz)}))
      throw NonConvexity("subgradient " + format_vec(u) + " at z=" + format_vec(z) +
                         " fails at z'=" + format_vec(zp));
  }
  return u;
}

namespace {

Witness conjugate_witness(const ConjugateHandle& handle, const GeneratorSpec& gen, double t,
                          ConstVec b, ConstVec q) {
  Witness w;
  w.kind = "conjugate_lower";
  w.t = t;
  w.b.assign(b.begin(), b.end());
  w.z.assign(q.begin(), q.end());
  w.lhs = transform(handle, t, b, q);
  w.rhs = -gen.alpha(t, b) + norm_sq(q) / (2.0 * gen.gamma);
  return w;
}

}  // namespace

CheckReport conjugate_lower_bound_check(const ConjugateHandle& handle, const GeneratorSpec& gen,
                                        const Probe& probe) {
  detail::ReportBuilder rb("conjugate_lower_bound");
  const auto pts = probe_points(probe, 0xC0);
  const auto states = probe_states(probe);
  for (double t : probe.times)
    for (const auto& b : states)
      for (const auto& q : pts) rb.record(conjugate_witness(handle, gen, t, b, q));
  rb.report().params["gamma"] = gen.gamma;
  return rb.finish();
}

std::pair<double, double> reevaluate_conjugate(const ConjugateHandle& handle,
                                               const GeneratorSpec& gen, const Witness& w) {
  if (w.kind != "conjugate_lower") throw ConfigError("unknown witness kind: " + w.kind);
  const auto r = conjugate_witness(handle, gen, w.t, w.b, w.z);
  return {r.lhs, r.rhs};
}

FenchelResult fenchel_inequality_check(double x, double y, double p) {
  if (!(y > 0.0)) throw DomainError("Fenchel inequality needs y > 0");
  if (!(p > 0.0)) throw DomainError("Fenchel inequality needs p > 0");
  FenchelResult r;
  r.lhs = x * y;
  r.rhs = std::exp(p * x) + (y / p) * (std::log(y) - std::log(p) - 1.0);
  r.holds = r.lhs <= r.rhs + 1e-10 * std::max({1.0, std::abs(r.lhs), std::abs(r.rhs)});
  return r;
}

// ---------------------------------------------------------------------------
// Quadrature and the majorant family
// ---------------------------------------------------------------------------

namespace {

double simpson_step(const std::function<double(double)>& f, double a, double b, double fa,
                    double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (!std::isfinite(delta)) throw EvaluationFault("quadrature: non-finite integrand");
  if (std::abs(delta) <= 15.0 * tol || std::abs(delta) <= 1e-14 * std::abs(left + right))
    return left + right + delta / 15.0;
  if (depth <= 0) throw EvaluationFault("quadrature did not converge on [" +
                                        std::to_string(a) + ", " + std::to_string(b) + "]");
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        int max_depth) {
  if (a == b) return 0.0;
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

MajorantFamily::MajorantFamily(std::function<double(double)> k, double gamma,
                               std::function<double(double)> dk, MajorantConfig config)
    : k_(std::move(k)), dk_(std::move(dk)), gamma_(gamma), config_(config) {
  if (!(gamma_ > 0.0)) throw PreconditionError("majorant family needs gamma > 0");
  const double k0 = k_(0.0);
  if (std::abs(k0 - gamma_) > 1e-12 * std::max(1.0, gamma_))
    throw PreconditionError("majorant family needs k(0) = gamma");
  const int n = 400;
  double prev = k0;
  for (int i = 1; i <= n; ++i) {
    const double x = config_.table_extent * 4.0 * i / n;
    const double v = k_(x);
    if (!(v > prev))
      throw PreconditionError("k is not strictly increasing near x=" + std::to_string(x));
    prev = v;
  }
  const double h = config_.table_step;
  const auto cells = static_cast<std::size_t>(std::ceil(config_.table_extent / h));
  k_table_.assign(cells + 1, 0.0);
  psi_table_.assign(cells + 1, 0.0);
  const double tol = config_.quadrature_tolerance;
  auto kf = [this](double x) { return k_(x) * std::exp(gamma_ * x); };
  auto pf = [this](double x) { return Psi_prime(x); };
  for (std::size_t j = 1; j <= cells; ++j) {
    const double a = (j - 1) * h, b = j * h;
    k_table_[j] = k_table_[j - 1] + adaptive_simpson(kf, a, b, tol);
    psi_table_[j] = psi_table_[j - 1] + adaptive_simpson(pf, a, b, tol);
  }
}

double MajorantFamily::dk(double x) const {
  if (dk_) return dk_(x);
  const double h = 1e-6 * std::max(1.0, std::abs(x));
  if (x < h) return (k_(x + h) - k_(x)) / h;
  return (k_(x + h) - k_(x - h)) / (2.0 * h);
}

double MajorantFamily::cumulative(const std::vector<double>& table,
                                  const std::function<double(double)>& f, double x) const {
  if (x <= 0.0) return 0.0;
  const auto j = std::min(table.size() - 1, static_cast<std::size_t>(x / config_.table_step));
  return table[j] + adaptive_simpson(f, j * config_.table_step, x, config_.quadrature_tolerance);
}

double MajorantFamily::K(double x) const {
  if (x > config_.table_extent) return std::exp(log_K(x));
  return cumulative(k_table_, [this](double u) { return k_(u) * std::exp(gamma_ * u); }, x);
}

double MajorantFamily::log_K(double x) const {
  if (x <= 0.0) return -std::numeric_limits<double>::infinity();
  if (x <= config_.table_extent) return std::log(K(x));
  // K(x) = e^{gamma x} int_0^x k(u) e^{-gamma (x - u)} du; the scaled integrand
  // is bounded by k(x) and negligible below x - 60 / gamma.
  const double lo = std::max(0.0, x - 60.0 / gamma_);
  const double I = adaptive_simpson([&](double u) { return k_(u) * std::exp(gamma_ * (u - x)); }, lo, x,
                                    config_.quadrature_tolerance * (1.0 + std::abs(k_(x))));
  return gamma_ * x + std::log(I);
}

double MajorantFamily::Psi(double x) const {
  return cumulative(psi_table_, [this](double u) { return Psi_prime(u); }, x);
}

double MajorantFamily::Psi_prime(double x) const {
  if (x <= 0.0) return 0.0;
  return k_(x) * std::expm1(gamma_ * x);
}

double MajorantFamily::Psi_second(double x) const {
  const double xe = std::max(0.0, x);
  return dk(xe) * std::expm1(gamma_ * xe) + gamma_ * k_(xe) * std::exp(gamma_ * xe);
}

double MajorantFamily::Phi_prime(double y) const {
  if (y <= 0.0) return 0.0;
  double hi = 1.0;
  while (Psi_prime(hi) < y) {
    hi *= 2.0;
    if (hi > 1e6) throw EvaluationFault("Phi' inversion: bracket overflow");
  }
  const double guess = std::min(0.5 * hi, y / (gamma_ * gamma_));
  boost::uintmax_t iters = 200;
  return boost::math::tools::newton_raphson_iterate(
      [this, y](double x) { return std::make_tuple(Psi_prime(x) - y, Psi_second(x)); }, guess,
      0.0, hi, std::numeric_limits<double>::digits - 3, iters);
}

double MajorantFamily::Phi(double y) const {
  if (y <= 0.0) return 0.0;
  return adaptive_simpson([this](double u) { return Phi_prime(u); }, 0.0, y,
                          config_.quadrature_tolerance);
}

double MajorantFamily::Phi_legendre(double y) const {
  const double x = Phi_prime(y);
  return y * x - Psi(x);
}

double MajorantFamily::Phi_second(double y) const { return 1.0 / Psi_second(Phi_prime(y)); }

double MajorantFamily::Lambda(double x) const {
  if (x <= 0.0) return 0.0;
  return x * std::log(x) / gamma_ - Phi(x);
}

double MajorantFamily::Lambda_second(double x) const {
  return 1.0 / (gamma_ * x) - Phi_second(x);
}

LambdaReport lambda_superlinearity_check(const MajorantFamily& fam, const std::vector<double>& grid,
                                         double growth_factor) {
  if (grid.size() < 2) throw ConfigError("Lambda check needs at least two grid points");
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (!(grid[i] > 0.0) || (i && !(grid[i] > grid[i - 1])))
      throw ConfigError("Lambda check needs a positive increasing grid");

  LambdaReport r;
  r.grid = grid;
  r.growth_factor = growth_factor;
  CheckReport& rep = r.report;
  rep.check = "Lambda";
  rep.samples_used = grid.size();
  rep.sampling_radius = grid.back();
  rep.params["gamma"] = fam.gamma();
  rep.params["growth_factor"] = growth_factor;
  rep.max_excess = -std::numeric_limits<double>::infinity();
  auto witness = [](std::string kind, double x, double lhs, double rhs) {
    Witness w;
    w.kind = std::move(kind);
    w.z = {x};
    w.lhs = lhs;
    w.rhs = rhs;
    return w;
  };

  r.convex = true;
  r.ratio_increasing = true;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double x = grid[i];
    r.ratio.push_back(fam.Lambda(x) / x);
    r.second.push_back(fam.Lambda_second(x));
    if (!(r.second.back() > 0.0)) {
      r.convex = false;
      rep.witnesses.push_back(witness("lambda_convex", x, r.second.back(), 0.0));
    }
    if (i && !(r.ratio[i] > r.ratio[i - 1])) {
      r.ratio_increasing = false;
      rep.witnesses.push_back(witness("lambda_ratio", x, r.ratio[i], r.ratio[i - 1]));
    }
  }
  const double first = r.ratio.front(), last = r.ratio.back();
  r.growth_met = last >= growth_factor * first;
  rep.max_excess = growth_factor * first - last;
  if (!r.growth_met || rep.witnesses.empty())
    rep.witnesses.push_back(witness("lambda_growth", grid.back(), last, growth_factor * first));
  r.passed = r.convex && r.ratio_increasing && r.growth_met;
  rep.passed = r.passed;
  rep.note = "checked on a finite grid";
  return r;
}

}  // namespace qbsde
