#include "qbsde/generators.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "qbsde/errors.hpp"
#include "report_builder.hpp"

namespace qbsde {

namespace {

std::string format_point(double t, ConstVec b, ConstVec z) {
  std::ostringstream os;
  os.precision(17);
  os << "(t=" << t << ", b=[";
  for (std::size_t i = 0; i < b.size(); ++i) os << (i ? "," : "") << b[i];
  os << "], z=[";
  for (std::size_t i = 0; i < z.size(); ++i) os << (i ? "," : "") << z[i];
  os << "])";
  return os.str();
}

double finite_or_fault(double v, const char* what, double t, ConstVec b, ConstVec z) {
  if (!std::isfinite(v))
    throw EvaluationFault(std::string(what) + " is not finite at " + format_point(t, b, z));
  return v;
}

class QuadraticPart final : public ConvexPart {
 public:
  QuadraticPart(std::function<double(double)> coef, StateFunction offset, std::string label)
      : coef_(std::move(coef)), offset_(std::move(offset)), label_(std::move(label)) {}

  double value(double t, ConstVec b, ConstVec z) const override {
    return coef_(t) * norm_sq(z) + (offset_ ? offset_(t, b) : 0.0);
  }
  void subgradient(double t, ConstVec, ConstVec z, MutVec out) const override {
    const double k = 2.0 * coef_(t);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = k * z[i];
  }
  std::optional<double> conjugate(double t, ConstVec b, ConstVec q) const override {
    const double a = coef_(t);
    if (!(a > 0.0)) return std::nullopt;
    return norm_sq(q) / (4.0 * a) - (offset_ ? offset_(t, b) : 0.0);
  }
  std::string family() const override { return label_; }

 private:
  std::function<double(double)> coef_;
  StateFunction offset_;
  std::string label_;
};

class QuadraticMinusNormPart final : public ConvexPart {
 public:
  double value(double, ConstVec, ConstVec z) const override {
    const double r = norm(z);
    return 0.5 * r * r - r;
  }
  void subgradient(double, ConstVec, ConstVec z, MutVec out) const override {
    const double r = norm(z);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = r > 0.0 ? (1.0 - 1.0 / r) * z[i] : 0.0;
  }
  std::optional<double> conjugate(double, ConstVec, ConstVec q) const override {
    const double s = norm(q) + 1.0;
    return 0.5 * s * s;
  }
  std::string family() const override { return "quadratic_minus_norm"; }
};

class GTildePart final : public ConvexPart {
 public:
  GTildePart(StateFunction offset, std::string label)
      : offset_(std::move(offset)), label_(std::move(label)) {}

  double value(double t, ConstVec b, ConstVec z) const override {
    return gtilde(norm(z)) + (offset_ ? offset_(t, b) : 0.0);
  }
  void subgradient(double, ConstVec, ConstVec z, MutVec out) const override {
    const double r = norm(z);
    const double k = r > 0.0 ? gtilde_slope(r) / r : 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = k * z[i];
  }
  std::optional<double> conjugate(double t, ConstVec b, ConstVec q) const override {
    return gtilde_conjugate(norm(q)) - (offset_ ? offset_(t, b) : 0.0);
  }
  std::string family() const override { return label_; }

 private:
  StateFunction offset_;
  std::string label_;
};

class ZeroPart final : public ConvexPart {
 public:
  double value(double, ConstVec, ConstVec) const override { return 0.0; }
  void subgradient(double, ConstVec, ConstVec z, MutVec out) const override {
    std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(z.size()), 0.0);
  }
  std::optional<double> conjugate(double, ConstVec, ConstVec q) const override {
    return norm_sq(q) == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  std::string family() const override { return "zero"; }
};

class CustomPart final : public ConvexPart {
 public:
  CustomPart(ScalarField f, std::string label) : f_(std::move(f)), label_(std::move(label)) {}
  double value(double t, ConstVec b, ConstVec z) const override { return f_(t, b, z); }
  std::string family() const override { return label_; }

 private:
  ScalarField f_;
  std::string label_;
};

class OffsetPart final : public ConvexPart {
 public:
  OffsetPart(ConvexPartPtr inner, double delta) : inner_(std::move(inner)), delta_(delta) {}
  double value(double t, ConstVec b, ConstVec z) const override {
    return inner_->value(t, b, z) + delta_;
  }
  void subgradient(double t, ConstVec b, ConstVec z, MutVec out) const override {
    inner_->subgradient(t, b, z, out);
  }
  std::optional<double> conjugate(double t, ConstVec b, ConstVec q) const override {
    auto f = inner_->conjugate(t, b, q);
    if (f) return *f - delta_;
    return std::nullopt;
  }
  std::string family() const override { return inner_->family(); }
  bool convex() const override { return inner_->convex(); }

 private:
  ConvexPartPtr inner_;
  double delta_;
};

class ReflectedPart final : public ConvexPart {
 public:
  explicit ReflectedPart(ConvexPartPtr inner) : inner_(std::move(inner)) {}
  double value(double t, ConstVec b, ConstVec z) const override {
    std::vector<double> neg(z.begin(), z.end());
    for (double& v : neg) v = -v;
    return -inner_->value(t, b, neg);
  }
  void subgradient(double, ConstVec, ConstVec, MutVec) const override {
    throw NonConvexity("reflected generator part is concave; no subgradient");
  }
  std::optional<double> conjugate(double, ConstVec, ConstVec) const override {
    throw NonConvexity("reflected generator part is concave; no convex conjugate");
  }
  std::string family() const override { return "reflected(" + inner_->family() + ")"; }
  bool convex() const override { return false; }
  const ConvexPartPtr& inner() const { return inner_; }

 private:
  ConvexPartPtr inner_;
};

}  // namespace

void ConvexPart::subgradient(double t, ConstVec b, ConstVec z, MutVec out) const {
  std::vector<double> zp(z.begin(), z.end());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(z[i]));
    zp[i] = z[i] + h;
    const double up = value(t, b, zp);
    zp[i] = z[i] - h;
    const double dn = value(t, b, zp);
    zp[i] = z[i];
    out[i] = (up - dn) / (2.0 * h);
  }
}

std::optional<double> ConvexPart::conjugate(double, ConstVec, ConstVec) const {
  return std::nullopt;
}

ConvexPartPtr quadratic_part(std::function<double(double)> coef, StateFunction offset,
                             std::string label) {
  return std::make_shared<QuadraticPart>(std::move(coef), std::move(offset), std::move(label));
}

ConvexPartPtr pure_quadratic_part(double gamma) {
  return quadratic_part([gamma](double) { return 0.5 * gamma; }, {}, "pure_quadratic");
}

ConvexPartPtr quadratic_minus_norm_part() { return std::make_shared<QuadraticMinusNormPart>(); }

ConvexPartPtr gtilde_part(StateFunction offset, std::string label) {
  return std::make_shared<GTildePart>(std::move(offset), std::move(label));
}

ConvexPartPtr zero_part() { return std::make_shared<ZeroPart>(); }

ConvexPartPtr custom_part(ScalarField f, std::string label) {
  return std::make_shared<CustomPart>(std::move(f), std::move(label));
}

ConvexPartPtr offset_part(ConvexPartPtr inner, double delta) {
  return std::make_shared<OffsetPart>(std::move(inner), delta);
}

ConvexPartPtr reflected_part(ConvexPartPtr inner) {
  if (auto r = std::dynamic_pointer_cast<const ReflectedPart>(inner)) return r->inner();
  return std::make_shared<ReflectedPart>(std::move(inner));
}

double gtilde(double r) {
  const double k = std::floor(r) + 1.0;
  return (2.0 * k - 1.0) * r - k * (k - 1.0);
}

double gtilde_slope(double r) {
  if (r <= 0.0) return 0.0;
  return 2.0 * std::ceil(r) - 1.0;
}

double gtilde_conjugate(double s) {
  // Vertices of the piecewise-linear gtilde sit at the integers, where it equals k^2.
  const double k0 = std::max(0.0, std::floor(0.5 * s));
  const double k1 = k0 + 1.0;
  return std::max(k0 * s - k0 * k0, k1 * s - k1 * k1);
}

double GeneratorSpec::g2_value(double t, ConstVec b, ConstVec z) const {
  return g2_zero || !g2 ? 0.0 : g2(t, b, z);
}

double GeneratorSpec::value(double t, ConstVec b, ConstVec z) const {
  return g1->value(t, b, z) + g2_value(t, b, z);
}

void validate(const GeneratorSpec& gen) {
  if (!gen.g1) throw ConfigError(gen.name + ": missing convex part g1");
  if (!gen.alpha) throw ConfigError(gen.name + ": missing bounding process alpha");
  if (!(gen.gamma > 0.0)) throw ConfigError(gen.name + ": gamma must be positive");
  if (gen.gamma_bar && !(*gen.gamma_bar > 0.0 && *gen.gamma_bar <= gen.gamma))
    throw ConfigError(gen.name + ": gamma_bar must satisfy 0 < gamma_bar <= gamma");
  if (gen.strong_convexity &&
      !(gen.strong_convexity->epsilon > 0.0 && gen.strong_convexity->c >= 0.0))
    throw ConfigError(gen.name + ": strong convexity needs epsilon > 0, c >= 0");
  const auto& mb = gen.modulus_bounds;
  if (!(mb.a >= 0.0 && mb.b >= 0.0 && mb.theta >= 0.0 && mb.theta <= 1.0))
    throw ConfigError(gen.name + ": modulus bounds need a, b >= 0 and theta in [0, 1]");
  if (gen.modulus) {
    if (gen.modulus(0.0) != 0.0) throw ConfigError(gen.name + ": modulus(0) must be 0");
    double prev = 0.0;
    for (int i = 1; i <= 400; ++i) {
      const double u = 1e-3 * std::pow(1.04, i);
      const double v = gen.modulus(u);
      if (!(v >= prev))
        throw ConfigError(gen.name + ": modulus is not nondecreasing near u=" +
                          std::to_string(u));
      prev = v;
    }
  }
}

GeneratorSpec with_offset(const GeneratorSpec& gen, double delta) {
  GeneratorSpec out = gen;
  out.g1 = offset_part(gen.g1, delta);
  const double pad = std::abs(delta);
  out.alpha = [a = gen.alpha, pad](double t, ConstVec b) { return (a ? a(t, b) : 0.0) + pad; };
  std::ostringstream os;
  os << gen.name << (delta >= 0 ? "+" : "") << delta;
  out.name = os.str();
  return out;
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

namespace {

constexpr double kLogRadiusCap = 6.907755278982137;  // ln(1000): random radii live in [0, 999]

std::vector<std::vector<double>> shell_directions(int dim) {
  std::vector<std::vector<double>> dirs;
  for (int i = 0; i < dim; ++i) {
    std::vector<double> e(dim, 0.0);
    e[i] = 1.0;
    dirs.push_back(e);
    e[i] = -1.0;
    dirs.push_back(e);
  }
  if (dim > 1) {
    std::vector<double> diag(dim, 1.0 / std::sqrt(static_cast<double>(dim)));
    dirs.push_back(diag);
    for (double& v : diag) v = -v;
    dirs.push_back(diag);
  }
  return dirs;
}

std::vector<double> random_direction(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> n01;
  std::vector<double> v(dim);
  double r = 0.0;
  do {
    for (double& x : v) x = n01(rng);
    r = norm(v);
  } while (r == 0.0);
  for (double& x : v) x /= r;
  return v;
}

double log_uniform_radius(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01;
  return std::expm1(u01(rng) * kLogRadiusCap);
}

std::vector<double> scaled(const std::vector<double>& dir, double r) {
  std::vector<double> out(dir);
  for (double& x : out) x *= r;
  return out;
}

}  // namespace

std::vector<std::vector<double>> probe_points(const Probe& probe, std::uint64_t stream) {
  std::vector<std::vector<double>> pts;
  const auto dirs = shell_directions(probe.dim);
  const int shells = static_cast<int>(std::floor(probe.radius / probe.shell_spacing + 1e-9));
  for (int j = 0; j <= shells; ++j)
    for (const auto& d : dirs) pts.push_back(scaled(d, j * probe.shell_spacing));
  // Points exactly at the probe radius (not necessarily on a shell).
  for (const auto& d : dirs) pts.push_back(scaled(d, probe.radius));
  for (std::size_t i = 0; i < probe.samples; ++i) {
    std::mt19937_64 rng(stream_seed(probe.seed, stream, i));
    auto dir = random_direction(rng, probe.dim);
    const double r = log_uniform_radius(rng);
    if (r <= probe.radius) pts.push_back(scaled(dir, r));
  }
  for (const auto& e : probe.extra)
    if (static_cast<int>(e.size()) == probe.dim && norm(e) <= probe.radius) pts.push_back(e);
  return pts;
}

std::vector<std::pair<std::vector<double>, std::vector<double>>> probe_pairs(
    const Probe& probe, std::uint64_t stream) {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs;
  const auto dirs = shell_directions(probe.dim);
  const double coarse = 4.0 * probe.shell_spacing;
  const int shells = static_cast<int>(std::floor(probe.radius / coarse + 1e-9));
  for (const auto& d1 : dirs)
    for (const auto& d2 : dirs) {
      // Same and opposite directions only; other combinations come from random pairs.
      if (dot(d1, d2) > -1.0 + 1e-12 && dot(d1, d2) < 1.0 - 1e-12) continue;
      for (int i = 0; i <= shells; ++i)
        for (int j = 0; j <= shells; ++j)
          pairs.emplace_back(scaled(d1, i * coarse), scaled(d2, j * coarse));
    }
  std::uniform_real_distribution<double> u01;
  for (std::size_t i = 0; i < probe.samples; ++i) {
    std::mt19937_64 rng(stream_seed(probe.seed, stream, i));
    auto dir = random_direction(rng, probe.dim);
    auto zp = scaled(dir, log_uniform_radius(rng));
    std::vector<double> z;
    if (i % 2 == 0) {
      auto ddir = random_direction(rng, probe.dim);
      const double dr = log_uniform_radius(rng);
      z = zp;
      for (int c = 0; c < probe.dim; ++c) z[c] += dr * ddir[c];
    } else {
      // Colinear pair through the origin, catching piecewise-linear radial pieces.
      const double s = -1.0 + 3.0 * u01(rng);
      z = scaled(zp, s);
    }
    if (norm(z) <= probe.radius && norm(zp) <= probe.radius) pairs.emplace_back(z, zp);
  }
  for (const auto& e : probe.extra) {
    if (static_cast<int>(e.size()) != 2 * probe.dim) continue;
    std::vector<double> z(e.begin(), e.begin() + probe.dim);
    std::vector<double> zp(e.begin() + probe.dim, e.end());
    if (norm(z) <= probe.radius && norm(zp) <= probe.radius) pairs.emplace_back(z, zp);
  }
  return pairs;
}

std::vector<std::vector<double>> probe_states(const Probe& probe) {
  std::vector<std::vector<double>> states;
  states.emplace_back(probe.dim, 0.0);
  std::mt19937_64 rng(stream_seed(probe.seed, 0x5747u, 0));
  std::normal_distribution<double> n01;
  for (std::size_t i = 0; i < probe.states; ++i) {
    std::vector<double> b(probe.dim);
    for (double& x : b) x = probe.state_scale * n01(rng);
    states.push_back(b);
  }
  return states;
}

using detail::ReportBuilder;

namespace {

double g1_checked(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z) {
  return finite_or_fault(gen.g1->value(t, b, z), "g1", t, b, z);
}

double alpha_checked(const GeneratorSpec& gen, double t, ConstVec b) {
  const double a = gen.alpha(t, b);
  if (!std::isfinite(a)) throw EvaluationFault("alpha is not finite at " + format_point(t, b, {}));
  return a;
}

Witness growth_witness(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z) {
  Witness w{"growth", t, {b.begin(), b.end()}, {z.begin(), z.end()}, {}, 0.0, 0.0};
  w.lhs = std::abs(g1_checked(gen, t, b, z));
  w.rhs = alpha_checked(gen, t, b) + 0.5 * gen.gamma * norm_sq(z);
  return w;
}

Witness strict_witness(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z) {
  Witness w{"strict", t, {b.begin(), b.end()}, {z.begin(), z.end()}, {}, 0.0, 0.0};
  w.lhs = g1_checked(gen, t, b, z);
  w.rhs = 0.5 * gen.gamma_bar.value() * norm_sq(z) - alpha_checked(gen, t, b);
  return w;
}

Witness bregman_witness(const GeneratorSpec& gen, StrongConvexity cand, double t, ConstVec b,
                        ConstVec z, ConstVec zp) {
  Witness w{"bregman", t, {b.begin(), b.end()}, {z.begin(), z.end()}, {zp.begin(), zp.end()},
            0.0, 0.0};
  std::vector<double> u(z.size()), diff(z.size());
  gen.g1->subgradient(t, b, zp, u);
  for (std::size_t i = 0; i < z.size(); ++i) diff[i] = z[i] - zp[i];
  w.lhs = g1_checked(gen, t, b, z) - g1_checked(gen, t, b, zp) - dot(u, diff);
  w.rhs = 0.5 * cand.epsilon * norm_sq(diff) - cand.c;
  return w;
}

Witness continuity_witness(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z1,
                           ConstVec z2) {
  Witness w{"continuity", t, {b.begin(), b.end()}, {z1.begin(), z1.end()}, {z2.begin(), z2.end()},
            0.0, 0.0};
  std::vector<double> diff(z1.size());
  for (std::size_t i = 0; i < z1.size(); ++i) diff[i] = z1[i] - z2[i];
  const double v1 = finite_or_fault(gen.g2_value(t, b, z1), "g2", t, b, z1);
  const double v2 = finite_or_fault(gen.g2_value(t, b, z2), "g2", t, b, z2);
  w.lhs = std::abs(v1 - v2);
  w.rhs = gen.modulus ? gen.modulus(norm(diff)) : 0.0;
  return w;
}

double modulus_value(const GeneratorSpec& gen, double x) {
  return gen.modulus ? gen.modulus(x) : 0.0;
}

double modulus_bound(const GeneratorSpec& gen, double x) {
  const auto& mb = gen.modulus_bounds;
  return mb.a * std::pow(x, mb.theta) + mb.b;
}

}  // namespace

CheckReport check_quadratic_growth(const GeneratorSpec& gen, const Probe& probe) {
  ReportBuilder rb("A1");
  const auto pts = probe_points(probe, 0xA1);
  const auto states = probe_states(probe);
  for (double t : probe.times)
    for (const auto& b : states)
      for (const auto& z : pts) {
        Witness w = growth_witness(gen, t, b, z);
        rb.ratio(w.lhs, w.rhs);
        rb.record(std::move(w));
      }
  rb.report().params = {{"gamma", gen.gamma}};
  return rb.finish();
}

CheckReport check_strictly_quadratic(const GeneratorSpec& gen, const Probe& probe) {
  if (!gen.gamma_bar) throw ConfigError(gen.name + ": strict quadraticity needs gamma_bar");
  ReportBuilder rb("A2");
  const auto pts = probe_points(probe, 0xA2);
  const auto states = probe_states(probe);
  for (double t : probe.times)
    for (const auto& b : states)
      for (const auto& z : pts) rb.record(strict_witness(gen, t, b, z));
  rb.report().params = {{"gamma_bar", *gen.gamma_bar}};
  return rb.finish();
}

CheckReport check_strong_convexity(const GeneratorSpec& gen, StrongConvexity candidate,
                                   const Probe& probe) {
  if (!(candidate.epsilon > 0.0 && candidate.c >= 0.0))
    throw ConfigError("strong convexity candidate needs epsilon > 0 and c >= 0");
  ReportBuilder rb("A3");
  const auto pairs = probe_pairs(probe, 0xA3);
  const auto states = probe_states(probe);
  for (double t : probe.times)
    for (const auto& b : states)
      for (const auto& [z, zp] : pairs) rb.record(bregman_witness(gen, candidate, t, b, z, zp));
  rb.report().params = {{"epsilon", candidate.epsilon}, {"c", candidate.c}};
  rb.report().note = "refutation-only: pass means no violation at the probed resolution";
  return rb.finish();
}

CheckReport check_uniform_continuity(const GeneratorSpec& gen, const Probe& probe) {
  ReportBuilder rb("B");
  const auto pairs = probe_pairs(probe, 0xB0);
  const auto states = probe_states(probe);
  const std::vector<double> origin(probe.dim, 0.0);
  for (double t : probe.times)
    for (const auto& b : states) {
      for (const auto& [z1, z2] : pairs) rb.record(continuity_witness(gen, t, b, z1, z2));
      Witness w0{"zero", t, b, origin, {}, 0.0, 0.0};
      w0.lhs = std::abs(finite_or_fault(gen.g2_value(t, b, origin), "g2", t, b, origin));
      rb.record(std::move(w0));
    }
  // phi(0) = 0, phi nondecreasing, and phi(x) <= a x^theta + b on a grid up to 2R.
  const int n = 2000;
  const double xmax = 2.0 * probe.radius;
  Witness wz{"modulus_zero", 0.0, {}, {0.0}, {}, std::abs(modulus_value(gen, 0.0)), 0.0};
  rb.record(std::move(wz));
  double prev = modulus_value(gen, 0.0);
  for (int i = 1; i <= n; ++i) {
    const double x_prev = xmax * (i - 1) / n;
    const double x = xmax * i / n;
    const double phi = modulus_value(gen, x);
    rb.record(Witness{"modulus_growth", 0.0, {}, {x}, {}, phi, modulus_bound(gen, x)});
    rb.record(Witness{"modulus_monotone", 0.0, {}, {x_prev}, {x}, prev, phi});
    prev = phi;
  }
  rb.report().params = {{"a", gen.modulus_bounds.a},
                        {"b", gen.modulus_bounds.b},
                        {"theta", gen.modulus_bounds.theta}};
  return rb.finish();
}

std::pair<double, double> reevaluate(const GeneratorSpec& gen, const CheckReport& report,
                                     const Witness& w) {
  Witness r;
  if (w.kind == "growth") {
    r = growth_witness(gen, w.t, w.b, w.z);
  } else if (w.kind == "strict") {
    r = strict_witness(gen, w.t, w.b, w.z);
  } else if (w.kind == "bregman") {
    r = bregman_witness(gen, {report.params.at("epsilon"), report.params.at("c")}, w.t, w.b, w.z,
                        w.z2);
  } else if (w.kind == "continuity") {
    r = continuity_witness(gen, w.t, w.b, w.z, w.z2);
  } else if (w.kind == "zero") {
    r.lhs = std::abs(gen.g2_value(w.t, w.b, w.z));
    r.rhs = 0.0;
  } else if (w.kind == "modulus_zero") {
    r.lhs = std::abs(modulus_value(gen, 0.0));
    r.rhs = 0.0;
  } else if (w.kind == "modulus_growth") {
    r.lhs = modulus_value(gen, w.z.at(0));
    r.rhs = modulus_bound(gen, w.z.at(0));
  } else if (w.kind == "modulus_monotone") {
    r.lhs = modulus_value(gen, w.z.at(0));
    r.rhs = modulus_value(gen, w.z2.at(0));
  } else {
    throw ConfigError("unknown witness kind: " + w.kind);
  }
  return {r.lhs, r.rhs};
}

// ---------------------------------------------------------------------------
// Fixture catalog
// ---------------------------------------------------------------------------

Fixture fixture(const std::string& name, std::optional<double> param) {
  Fixture fx;
  GeneratorSpec& g = fx.generator;
  g.name = name;
  auto zero_alpha = [](double, ConstVec) { return 0.0; };

  if (name == "example_i") {
    g.g1 = quadratic_part([](double t) { return 1.0 + std::sin(t); },
                          [](double, ConstVec b) { return norm(b); }, "example_i_core");
    g.g2 = [](double, ConstVec, ConstVec z) {
      const double r = norm(z);
      return r <= 1.0 ? std::pow(r, 0.25) : 1.0;
    };
    g.alpha = [](double, ConstVec b) { return norm(b); };
    g.gamma = 4.0;
    g.modulus = [](double u) { return u <= 1.0 ? std::pow(u, 0.25) : 1.0; };
    g.modulus_bounds = {0.0, 1.0, 0.0};
    fx.recommended_terminal = "abs";
  } else if (name == "example_ii") {
    g.g1 = gtilde_part([](double, ConstVec b) { return std::sqrt(norm(b)); }, "example_ii_core");
    g.g2 = [](double, ConstVec, ConstVec z) { return -std::sqrt(norm(z)); };
    g.alpha = [](double, ConstVec b) { return std::sqrt(norm(b)) + 1.0; };
    g.gamma = 2.0;
    g.gamma_bar = 2.0;
    g.modulus = [](double u) { return std::sqrt(u); };
    g.modulus_bounds = {1.0, 1.0, 0.5};
    fx.recommended_terminal = "abs";
    fx.declared.a2 = true;
  } else if (name == "example_iii") {
    g.g1 = pure_quadratic_part(1.0);
    g.g2 = [](double, ConstVec, ConstVec z) {
      const double r = norm(z);
      return r <= 1.0 ? std::cbrt(r * r) : r;
    };
    g.alpha = zero_alpha;
    g.gamma = 1.0;
    g.strong_convexity = StrongConvexity{1.0, 0.0};
    g.modulus = [](double u) { return u <= 1.0 ? std::cbrt(u * u) : u; };
    g.modulus_bounds = {1.0, 1.0, 1.0};
    fx.recommended_terminal = "abs";
    fx.declared.a3 = true;
  } else if (name == "example_iv") {
    const double eps = param.value_or(0.1);
    if (!(eps > 0.0 && eps <= std::exp(-1.0)))
      throw ConfigError("example_iv radius must lie in (0, 1/e] so that u|ln u| is nondecreasing");
    const double tail = eps * std::log(eps);
    g.g1 = quadratic_minus_norm_part();
    g.g2 = [eps, tail](double, ConstVec, ConstVec z) {
      const double r = norm(z);
      if (r == 0.0) return 0.0;
      return r <= eps ? r * std::log(r) : tail;
    };
    g.alpha = [](double, ConstVec) { return 1.0; };
    g.gamma = 1.0;
    g.strong_convexity = StrongConvexity{1.0, 1.0};
    g.modulus = [eps, tail](double u) {
      if (u == 0.0) return 0.0;
      return u <= eps ? u * std::abs(std::log(u)) : std::abs(tail);
    };
    g.modulus_bounds = {0.0, 2.0, 0.0};
    fx.recommended_terminal = "critical";
    fx.declared.a3 = true;
  } else if (name == "gtilde") {
    g.g1 = gtilde_part();
    g.g2_zero = true;
    g.alpha = [](double, ConstVec) { return 1.0; };
    g.gamma = 2.0;
    g.gamma_bar = 2.0;
    g.modulus = [](double) { return 0.0; };
    fx.recommended_terminal = "linear";
    fx.declared.a2 = true;
  } else if (name == "pure_quadratic") {
    const double gamma = param.value_or(1.0);
    if (!(gamma > 0.0)) throw ConfigError("pure_quadratic needs gamma > 0");
    g.g1 = pure_quadratic_part(gamma);
    g.g2_zero = true;
    g.alpha = zero_alpha;
    g.gamma = gamma;
    g.gamma_bar = gamma;
    g.strong_convexity = StrongConvexity{gamma, 0.0};
    g.modulus = [](double) { return 0.0; };
    fx.recommended_terminal = "linear";
    fx.declared.a2 = true;
    fx.declared.a3 = true;
  } else if (name == "zero") {
    g.g1 = zero_part();
    g.g2_zero = true;
    g.alpha = zero_alpha;
    g.gamma = 1.0;
    g.modulus = [](double) { return 0.0; };
    fx.recommended_terminal = "linear";
  } else {
    throw ConfigError("unknown fixture: " + name);
  }
  if (g.g2_zero) g.g2 = [](double, ConstVec, ConstVec) { return 0.0; };
  validate(g);
  return fx;
}

std::vector<std::string> fixture_names() {
  return {"example_i", "example_ii", "example_iii", "example_iv",
          "gtilde",    "pure_quadratic", "zero"};
}

}  // namespace qbsde
