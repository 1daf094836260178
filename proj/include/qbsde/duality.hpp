#pragma once

// Optimal controls, admissibility audits, duality certificates, and the
// uniqueness / comparison / reflection / Z-moment suites.

#include <string>
#include <vector>

#include "qbsde/conjugate.hpp"
#include "qbsde/generators.hpp"
#include "qbsde/solver.hpp"
#include "qbsde/stochastics.hpp"

namespace qbsde {

/// q*_k = subgradient of g1 at Z_k on every path and step. The Markov map
/// evaluates the fitted Z models, so q* can drive fresh paths.
ControlProcess extract_optimal_control(const BsdeSolution& sol, const GeneratorSpec& gen,
                                       const PathEnsemble& ens, int threads = 1);

struct AdmissibilityReport {
  std::string control_id;
  Estimate l2_under_q;           ///< E^Q[sum |q|^2 dt]
  Estimate value_integrability;  ///< E^Q[|xi| + sum |f1(q)| dt]
  Estimate martingale_proxy;     ///< mean of M^q_T
  Estimate entropy_budget;       ///< E[M^q_T ln M^q_T]
  double ess = 0.0;
  std::size_t overflow = 0;
  double worst_f1_excess = 0.0;  ///< max over nodes of -f1 - alpha; positive breaks f1 >= -alpha
  bool passed = false;
  std::vector<std::string> reasons;  ///< empty when passed
};

AdmissibilityReport audit_admissibility(const ControlProcess& ctrl, const ConjugateHandle& handle,
                                        const GeneratorSpec& gen, const TerminalSpec& terminal,
                                        const PathEnsemble& ens, double min_ess_fraction = 1e-3);

struct ControlSpec {
  std::string id;
  ControlMap q;
};

/// Constant controls spread evenly over [lo, hi] in the first coordinate.
std::vector<ControlSpec> constant_family(int count, double lo, double hi, int dim);

struct DualEntry {
  std::string id;
  bool ok = false;
  std::string error;
  std::string method;
  Estimate y0;
  AdmissibilityReport audit;
};

struct DualityOptions {
  double gap_tolerance = 0.02;
  double sigmas = 4.0;
  bool include_qstar = true;
  double min_ess_fraction = 1e-3;
};

struct DualityReport {
  Estimate primal_y0;
  std::vector<DualEntry> dual_values;
  Estimate qstar_value;
  bool qstar_ok = false;
  double gap = 0.0;
  double gap_std_error = 0.0;
  double lipschitz = 0.0;          ///< max_k |mean Y_{k+1} - mean Y_k| / dt
  double discretization_slack = 0.0;
  std::vector<std::string> domination_violations;
  std::vector<std::string> not_admissible;
  bool passed = false;
};

/// Slack = sigmas * combined standard error + 2 * max dt * lipschitz.
DualityReport duality_certificate(const GeneratorSpec& gen, const ConjugateHandle& handle,
                                  const TerminalSpec& terminal, const PathEnsemble& ens,
                                  const std::vector<ControlSpec>& family, const Scheme& scheme,
                                  const DualityOptions& options = {});

/// max_k |mean Y_{k+1} - mean Y_k| / dt_k.
double value_lipschitz(const BsdeSolution& sol);

struct CrosscheckReport {
  std::vector<Scheme> schemes;
  std::vector<Estimate> y0;
  std::vector<std::string> errors;       ///< per scheme, empty on success
  std::vector<std::vector<double>> dy0;  ///< pairwise |Y_0^a - Y_0^b|
  std::vector<std::vector<double>> dy_nodes;  ///< pairwise max_k |mean Y_k^a - mean Y_k^b|
  double max_dy0 = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string note;
};

/// Three configurations differing in basis degree, warm start and truncation radius.
std::vector<Scheme> default_crosscheck_schemes(const Scheme& base);

CrosscheckReport uniqueness_crosscheck(const GeneratorSpec& gen, const TerminalSpec& terminal,
                                       const PathEnsemble& ens, const std::vector<Scheme>& schemes,
                                       double tolerance = 0.03);

struct Problem {
  GeneratorSpec generator;
  TerminalSpec terminal;
};

struct ComparisonOptions {
  double sigmas = 4.0;
  double max_violation_fraction = 1e-3;
  Probe ordering_probe;  ///< radius is replaced by the truncation radius
};

struct ComparisonReport {
  CheckReport report;              ///< witnesses: violating nodes
  std::vector<double> mean_diff;   ///< per node, mean of Y' - Y
  std::vector<double> slack;       ///< per node
  double violation_fraction = 0.0; ///< of nodes, path-averaged form
  double pathwise_violation_fraction = 0.0;  ///< of (path, node) pairs
  Estimate y0, y0_prime;
  bool passed = false;
};

/// Y_k <= Y'_k + slack for xi <= xi' and g >= g'. Throws PreconditionError
/// with the offending input when either ordering fails on the ensemble or
/// the sampled truncation ball.
ComparisonReport comparison_check(const Problem& p, const Problem& p_prime, const PathEnsemble& ens,
                                  const Scheme& scheme, const ComparisonOptions& options = {});

/// g_bar(t, b, z) = -g(t, b, -z); reflecting twice restores the original parts.
GeneratorSpec reflect(const GeneratorSpec& gen);
TerminalSpec reflect(const TerminalSpec& terminal);

struct MomentRow {
  double parameter = 0.0;
  ExpMoment full;
  ExpMoment half;  ///< first half of the paths
  bool stable = false;
};

struct ZMomentReport {
  std::vector<MomentRow> eta_rows;     ///< E[exp(eta sum |Z|^2 dt)]
  std::vector<MomentRow> lambda_rows;  ///< E[exp(lambda sum |Z| dt)]
  double largest_stable_eta = 0.0;
  bool passed = false;                 ///< every lambda row and the smallest eta row stable
};

ZMomentReport z_moment_check(const BsdeSolution& sol, const std::vector<double>& eta_grid,
                             const std::vector<double>& lambda_grid);

/// a0 (a = 0), theta_lt_1 (theta < 1 with gamma_bar), theta_eq_1 (theta = 1 with A3), or unclassified.
std::string classify_regime(const GeneratorSpec& gen);
/// Suites that certify the regime: duality; duality + zmoment; crosscheck.
std::vector<std::string> regime_suites(const std::string& regime);

}  // namespace qbsde
