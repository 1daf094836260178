#pragma once

// Generators g = g1 + g2 of one-dimensional quadratic BSDEs, sampled
// assumption checkers, and the fixture catalog.
//
// Random coefficients are restricted to functions of (t, B_t): every
// evaluable map receives the current Brownian value `b` as its path-state.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qbsde/common.hpp"

namespace qbsde {

using ScalarField = std::function<double(double t, ConstVec b, ConstVec z)>;
using StateFunction = std::function<double(double t, ConstVec b)>;
using Modulus = std::function<double(double u)>;

/// The convex part g1. Registered analytic families override `conjugate`
/// and `subgradient` with closed forms; anything else falls back to the
/// numeric routines of the conjugate module.
class ConvexPart {
 public:
  virtual ~ConvexPart() = default;

  virtual double value(double t, ConstVec b, ConstVec z) const = 0;

  /// Writes one deterministic element of the subdifferential at z. At kinks
  /// of radial families the radial limit from below is returned. The default
  /// uses central differences.
  virtual void subgradient(double t, ConstVec b, ConstVec z, MutVec out) const;

  /// Closed-form Legendre-Fenchel transform, when the family has one.
  virtual std::optional<double> conjugate(double t, ConstVec b, ConstVec q) const;

  virtual std::string family() const = 0;

  /// False for reflected (concave) parts, which have no subgradient/conjugate.
  virtual bool convex() const { return true; }
};

using ConvexPartPtr = std::shared_ptr<const ConvexPart>;

// Registered families.
ConvexPartPtr quadratic_part(std::function<double(double)> coef, StateFunction offset,
                             std::string label);  // coef(t)|z|^2 + offset(t, b)
ConvexPartPtr pure_quadratic_part(double gamma);     // (gamma/2)|z|^2
ConvexPartPtr quadratic_minus_norm_part();           // |z|^2/2 - |z|
ConvexPartPtr gtilde_part(StateFunction offset = {}, std::string label = "gtilde");
ConvexPartPtr zero_part();
ConvexPartPtr custom_part(ScalarField f, std::string label);
ConvexPartPtr offset_part(ConvexPartPtr inner, double delta);  // inner + delta
/// z -> -inner(-z). Concave; reflecting twice returns the original part.
ConvexPartPtr reflected_part(ConvexPartPtr inner);

/// Piecewise-linear interpolant of r^2 at the integers: (2k-1)r - k(k-1) on [k-1, k).
double gtilde(double r);
/// Slope of gtilde on the piece containing r, radial limit from below at integers.
double gtilde_slope(double r);
/// sup_{r>=0} (s r - gtilde(r)) = max_k (k s - k^2).
double gtilde_conjugate(double s);

struct StrongConvexity {
  double epsilon = 1.0;
  double c = 0.0;
};

struct ModulusBounds {
  double a = 0.0;
  double b = 0.0;
  double theta = 0.0;
};

struct GeneratorSpec {
  std::string name;
  ConvexPartPtr g1;
  ScalarField g2;
  bool g2_zero = false;
  StateFunction alpha;
  double gamma = 1.0;
  std::optional<double> gamma_bar;
  std::optional<StrongConvexity> strong_convexity;
  Modulus modulus;
  ModulusBounds modulus_bounds;

  double value(double t, ConstVec b, ConstVec z) const;
  double g1_value(double t, ConstVec b, ConstVec z) const { return g1->value(t, b, z); }
  double g2_value(double t, ConstVec b, ConstVec z) const;
};

/// Throws ConfigError when a declared constant violates its invariant.
void validate(const GeneratorSpec& gen);

/// g(t, b, z) + delta applied to the convex part (conjugate shifts by -delta).
GeneratorSpec with_offset(const GeneratorSpec& gen, double delta);

// ---------------------------------------------------------------------------
// Sampled assumption checkers
// ---------------------------------------------------------------------------

struct Probe {
  double radius = 10.0;          ///< largest |z| probed
  std::size_t samples = 2000;    ///< random points (or pairs) per (t, state)
  std::vector<double> times = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t states = 4;        ///< random path-states per time, plus b = 0
  double state_scale = 1.0;      ///< std-dev of sampled path-states
  int dim = 1;
  std::uint64_t seed = 7;
  double shell_spacing = 0.125;  ///< absolute radial spacing of the deterministic shells
  /// Explicit extra inputs: single points (A1/A2) or pairs (A3/B) laid out
  /// as {z, z'} with z' appended after z.
  std::vector<std::vector<double>> extra;
};

/// One probed inequality instance. Upper-bound kinds (growth, continuity,
/// modulus) require lhs <= rhs; lower-bound kinds (strict, bregman) require
/// lhs >= rhs.
struct Witness {
  std::string kind;
  double t = 0.0;
  std::vector<double> b;
  std::vector<double> z;
  std::vector<double> z2;
  double lhs = 0.0;
  double rhs = 0.0;
};

struct CheckReport {
  std::string check;
  bool passed = true;
  std::vector<Witness> witnesses;  ///< violations, or the tightest case when passed
  std::size_t samples_used = 0;
  double sampling_radius = 0.0;
  /// Largest signed violation amount over all samples; positive means violated.
  /// For upper-bound kinds this is lhs - rhs, for lower-bound kinds rhs - lhs.
  double max_excess = -std::numeric_limits<double>::infinity();
  double max_ratio = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> params;
  std::string note;
};

/// |g1| <= alpha + (gamma/2)|z|^2.
CheckReport check_quadratic_growth(const GeneratorSpec& gen, const Probe& probe);
/// g1 >= (gamma_bar/2)|z|^2 - alpha. Throws ConfigError without gamma_bar.
CheckReport check_strictly_quadratic(const GeneratorSpec& gen, const Probe& probe);
/// Bregman gap of g1 >= (eps/2)|z - z'|^2 - c, with u from g1's subgradient.
/// Refutation-only: a pass means no violation at the probed resolution.
CheckReport check_strong_convexity(const GeneratorSpec& gen, StrongConvexity candidate,
                                   const Probe& probe);
/// Modulus bound on g2, the growth bound on phi, and g2(., 0) = 0.
CheckReport check_uniform_continuity(const GeneratorSpec& gen, const Probe& probe);

/// Recomputes (lhs, rhs) of a witness from its inputs.
std::pair<double, double> reevaluate(const GeneratorSpec& gen, const CheckReport& report,
                                     const Witness& w);

/// Deterministic probe points: shells at fixed absolute spacing plus
/// log-uniform random radii. The set for (R, n) is contained in the set for
/// any (R' >= R, n' >= n), so enlarging a probe cannot lose a witness.
std::vector<std::vector<double>> probe_points(const Probe& probe, std::uint64_t stream);
std::vector<std::pair<std::vector<double>, std::vector<double>>> probe_pairs(
    const Probe& probe, std::uint64_t stream);
std::vector<std::vector<double>> probe_states(const Probe& probe);

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

struct DeclaredAssumptions {
  bool a1 = true;
  bool a2 = false;
  bool a3 = false;
  bool b = true;
};

struct Fixture {
  GeneratorSpec generator;
  std::string recommended_terminal;  ///< terminal kind, see terminal_from_config
  DeclaredAssumptions declared;
};

/// Names: example_i, example_ii, example_iii, example_iv (param = small
/// radius, default 0.1), gtilde, pure_quadratic (param = gamma, default 1), zero.
Fixture fixture(const std::string& name, std::optional<double> param = std::nullopt);
std::vector<std::string> fixture_names();

}  // namespace qbsde
