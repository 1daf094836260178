#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qbsde/common.hpp"
#include "qbsde/generators.hpp"

namespace qbsde {

struct SearchConfig {
  double initial_radius = 4.0;
  double expansion = 2.0;
  int max_expansions = 40;
  int max_iterations = 200;    ///< per 1-D line search
  double tolerance = 1e-10;    ///< relative step tolerance of the pattern search
  bool check_convexity = true; ///< midpoint convexity probes along the search line
};

/// Legendre-Fenchel transform of a generator's convex part:
/// f1(t, b, q) = sup_z (q.z - g1(t, b, z)).
struct ConjugateHandle {
  ConvexPartPtr source;
  SearchConfig search;
  bool force_numeric = false;  ///< skip the closed form even when registered
};

ConjugateHandle make_handle(const GeneratorSpec& gen, SearchConfig search = {});

struct TransformResult {
  double value = 0.0;
  std::vector<double> argmax;  ///< empty when the closed form was used
  bool analytic = false;
  int expansions = 0;
};

/// Closed form when registered, otherwise numeric search.
double transform(const ConjugateHandle& handle, double t, ConstVec b, ConstVec q);
TransformResult transform_detailed(const ConjugateHandle& handle, double t, ConstVec b, ConstVec q);

/// Numeric sup_z (q.z - f(z)) for a convex f on R^d. A line search along q
/// (concave in the line parameter) followed by a shrinking pattern search;
/// the search radius expands until the maximizer is strictly interior, which
/// for a concave objective certifies a global maximum. Throws
/// SearchDivergence if the radius cap is reached and NonConvexity if a
/// midpoint probe contradicts convexity.
TransformResult numeric_conjugate(const std::function<double(ConstVec)>& f, ConstVec q,
                                  const SearchConfig& search);

/// One element of the subdifferential of g1 at z (see ConvexPart::subgradient).
std::vector<double> subgradient(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z);

/// Subgradient spot-verified against `probes` random points z'; throws
/// NonConvexity with the offending point when g1(z') - g1(z) < u.(z' - z).
std::vector<double> verified_subgradient(const GeneratorSpec& gen, double t, ConstVec b,
                                         ConstVec z, std::size_t probes = 256,
                                         std::uint64_t seed = 11);

/// f1(t, b, q) >= -alpha_t + |q|^2 / (2 gamma) on sampled q.
CheckReport conjugate_lower_bound_check(const ConjugateHandle& handle, const GeneratorSpec& gen,
                                        const Probe& probe);
std::pair<double, double> reevaluate_conjugate(const ConjugateHandle& handle,
                                               const GeneratorSpec& gen, const Witness& w);

struct FenchelResult {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

/// x y <= exp(p x) + (y / p)(ln y - ln p - 1). Throws DomainError unless y, p > 0.
FenchelResult fenchel_inequality_check(double x, double y, double p);

// ---------------------------------------------------------------------------
// Majorant family k, K, Psi, Phi, Lambda
// ---------------------------------------------------------------------------

struct MajorantConfig {
  double quadrature_tolerance = 1e-10;
  double table_step = 0.25;   ///< spacing of the cumulative K / Psi tables
  double table_extent = 16.0; ///< tables cover [0, table_extent]
};

/// The de La Vallee Poussin majorants built from a strictly increasing k with
/// k(0) = gamma:
///   K(x)   = int_0^x k(t) e^{gamma t} dt
///   Psi(x) = int_0^x k(u) (e^{gamma u} - 1) du
///   Phi    = convex dual of Psi, Phi' = (Psi')^{-1}
///   Lambda(x) = x ln(x) / gamma - Phi(x)
class MajorantFamily {
 public:
  /// Throws PreconditionError unless k is strictly increasing on a grid and k(0) = gamma.
  MajorantFamily(std::function<double(double)> k, double gamma,
                 std::function<double(double)> dk = {}, MajorantConfig config = {});

  double gamma() const { return gamma_; }
  double k(double x) const { return k_(x); }
  double dk(double x) const;

  double K(double x) const;
  /// ln K(x), finite even where K overflows.
  double log_K(double x) const;
  double Psi(double x) const;
  double Psi_prime(double x) const;
  double Psi_second(double x) const;
  double Phi_prime(double y) const;   ///< inverse of Psi' by safeguarded Newton
  double Phi(double y) const;         ///< quadrature of Phi'
  double Phi_legendre(double y) const;  ///< y Phi'(y) - Psi(Phi'(y)), for cross-checks
  double Phi_second(double y) const;  ///< 1 / Psi''(Phi'(y))
  double Lambda(double x) const;
  double Lambda_second(double x) const;

 private:
  double cumulative(const std::vector<double>& table, const std::function<double(double)>& f,
                    double x) const;

  std::function<double(double)> k_;
  std::function<double(double)> dk_;
  double gamma_;
  MajorantConfig config_;
  std::vector<double> k_table_;    // K at multiples of table_step
  std::vector<double> psi_table_;  // Psi at multiples of table_step
};

/// Adaptive Simpson quadrature with absolute tolerance.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        int max_depth = 40);

struct LambdaReport {
  CheckReport report;  ///< witnesses: failing grid points (kinds lambda_convex, lambda_ratio, lambda_growth)
  bool passed = false;
  std::vector<double> grid;
  std::vector<double> ratio;        ///< Lambda(x) / x
  std::vector<double> second;       ///< Lambda''(x)
  bool ratio_increasing = false;
  bool convex = false;
  bool growth_met = false;
  double growth_factor = 0.0;
};

/// Lambda'' > 0 on the grid, Lambda(x)/x strictly increasing, and
/// last ratio >= growth_factor * first ratio.
LambdaReport lambda_superlinearity_check(const MajorantFamily& fam, const std::vector<double>& grid,
                                         double growth_factor = 5.0);

}  // namespace qbsde
