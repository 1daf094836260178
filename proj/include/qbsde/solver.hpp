#pragma once

// Backward solver for Y_t = xi - int_t^T g(s, Z_s) ds + int_t^T Z_s dB_s
// (so dY = g dt - Z dB) and for the controlled dual equation
// Y^q_t = xi + int_t^T (f1(s, q_s) - g2(s, Z^q_s)) ds + int_t^T Z^q_s dB^q_s.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qbsde/common.hpp"
#include "qbsde/conjugate.hpp"
#include "qbsde/generators.hpp"
#include "qbsde/stochastics.hpp"

namespace qbsde {

struct Scheme {
  std::string mode = "explicit";        ///< explicit | picard
  std::string projector = "regression"; ///< regression | lattice
  std::string regression_target = "pathwise";  ///< pathwise (xi - sum g dt) | fitted (Y_{k+1})
  int degree = 4;                       ///< per-coordinate polynomial degree
  int cross_degree = 2;                 ///< cross terms x_i x_j when >= 2
  double basis_clamp = 3.0;             ///< standardized coordinates are clamped to [-c, c]
  double ridge = 1e-10;
  double condition_limit = 1e12;
  std::optional<double> truncation_radius;  ///< heuristic when absent
  double truncation_scale = 1.0;        ///< multiplies the heuristic radius
  int picard_iterations = 50;
  double picard_tolerance = 1e-8;       ///< on max_k RMS |Y_new - Y_old|, relative to 1 + |Y_0|
  double damping = 1.0;
  std::string warm_start = "zero";      ///< zero | explicit
  double clip_warning_fraction = 0.1;
  bool check_growth = true;             ///< sampled A1 check at the truncation radius
  int threads = 1;
};

void validate(const Scheme& scheme);

/// Conditional-expectation fits at one step as functions of B_{t_k}, one per
/// projected target. Z is read off the targets Y_{k+1} dB^i, i < d.
struct StepModel {
  std::string kind;  ///< regression | lattice
  std::vector<double> center, scale;
  int degree = 0;
  int cross_degree = 0;
  double clamp = INFINITY;
  std::vector<std::vector<double>> coef;   ///< regression: per target
  double node_step = 0.0;                  ///< lattice: sqrt(dt)
  long node_offset = 0;                    ///< lattice: index of the lowest node
  std::vector<std::vector<double>> nodes;  ///< lattice: per target, per node
  int z_first = 1;          ///< index of the first dB target
  double z_factor = 0.0;    ///< Z^i = z_factor * fit_{z_first + i}
  double z_radius = 0.0;    ///< clip radius applied to Z

  double fit(std::size_t target, ConstVec b) const;
  void z(ConstVec b, MutVec out) const;
};

struct BsdeSolution {
  TimeGrid grid;
  std::size_t paths = 0;
  int dim = 1;
  std::vector<double> Y;  ///< node-major: Y[k * M + m]
  std::vector<double> Z;  ///< step-major: Z[(k * M + m) * d + i]
  std::vector<StepModel> models;
  Scheme scheme;
  double truncation_radius = 0.0;
  std::vector<double> residuals;     ///< per-step RMS regression residual of Y_{k+1}
  std::vector<double> picard_gaps;   ///< per iteration
  std::vector<double> contraction;   ///< per iteration, gap_i / gap_{i-1}
  std::vector<double> step_gaps;     ///< per step RMS change at the final iteration
  int iterations = 0;
  std::size_t clip_count = 0;
  std::size_t z_evaluations = 0;
  std::vector<std::string> warnings;
  Estimate y0;                       ///< Y_0 with the standard error of its pathwise representation
  double sup_abs_y = 0.0;            ///< E[sup_k |Y_k|]
  double z_energy = 0.0;             ///< E[(sum |Z|^2 dt)^{1/2}]

  double y(int k, std::size_t m) const { return Y[static_cast<std::size_t>(k) * paths + m]; }
  ConstVec z(int k, std::size_t m) const {
    return ConstVec(Z.data() + (static_cast<std::size_t>(k) * paths + m) * dim,
                    static_cast<std::size_t>(dim));
  }
  double clip_fraction() const {
    return z_evaluations ? static_cast<double>(clip_count) / z_evaluations : 0.0;
  }
};

/// Conditional expectation onto sigma(B_{t_k}). Factorizations are computed
/// once per ensemble and reused across targets and iterations.
class Projector {
 public:
  virtual ~Projector() = default;
  /// fitted[j][m] = E[targets[j] | B_{t_k}] on path m. When `model` is given
  /// the fits are stored so they can be evaluated off the ensemble.
  virtual void project(int k, const std::vector<ConstVec>& targets,
                       std::vector<std::vector<double>>& fitted, StepModel* model) const = 0;
  virtual std::string kind() const = 0;
};

std::unique_ptr<Projector> make_projector(const PathEnsemble& ens, const Scheme& scheme);

/// Polynomial basis in standardized coordinates (constant first).
std::size_t basis_size(int dim, int degree, int cross_degree);
void basis_row(ConstVec x, int degree, int cross_degree, MutVec out);

BsdeSolution solve(const GeneratorSpec& gen, const TerminalSpec& terminal, const PathEnsemble& ens,
                   const Scheme& scheme);
BsdeSolution solve(const GeneratorSpec& gen, const std::vector<double>& xi,
                   const PathEnsemble& ens, const Scheme& scheme);

/// Re-runs the global Picard pass seeded with the prior Z. Throws
/// PicardFailure when the gap grows three iterations in a row.
BsdeSolution picard_refine(const BsdeSolution& prior, const GeneratorSpec& gen,
                           const std::vector<double>& xi, const PathEnsemble& ens, int iterations);

struct StepResidual {
  double mean = 0.0;
  double std_error = 0.0;
  bool within = true;  ///< |mean| <= 4 standard errors (or numerically zero)
};

/// Per step, the path mean of Y_{k+1} - Y_k - g(t_k, Z_k) dt + Z_k.dB_k.
std::vector<StepResidual> one_step_residuals(const BsdeSolution& sol, const GeneratorSpec& gen,
                                             const PathEnsemble& ens);

/// The dual solution. With a Markov control the equation is solved on fresh
/// shifted paths B_{k+1} = B_k + q(t_k, B_k) dt + dW_k, where dW are the
/// ensemble increments; otherwise by reweighting with M^q.
struct DualSolution {
  BsdeSolution solution;
  Estimate y0;
  std::string method;  ///< fresh_fast | fresh_backward | reweight_fast | reweight_backward
};

DualSolution solve_dual(const GeneratorSpec& gen, const ConjugateHandle& handle,
                        const TerminalSpec& terminal, const PathEnsemble& ens,
                        const ControlProcess& ctrl, const Scheme& scheme);

/// The paths B = W + int q ds driven by the ensemble increments.
PathEnsemble shifted_ensemble(const PathEnsemble& ens, const ControlMap& q, int threads = 1);

/// Truncation radius heuristic sqrt(2 (max|xi| + max int alpha) / (gamma dt)).
double default_truncation_radius(const GeneratorSpec& gen, const std::vector<double>& xi,
                                 const PathEnsemble& ens);

}  // namespace qbsde
