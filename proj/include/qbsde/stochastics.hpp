#pragma once

// Time grids, Brownian path ensembles, terminal conditions, Doleans-Dade
// weights and the moment / entropy / class (D) estimators built on them.

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "qbsde/common.hpp"
#include "qbsde/conjugate.hpp"
#include "qbsde/generators.hpp"

namespace qbsde {

struct TimeGrid {
  std::vector<double> nodes;

  static TimeGrid uniform(double T, int N);

  int steps() const { return static_cast<int>(nodes.size()) - 1; }
  double horizon() const { return nodes.back(); }
  double dt(int k) const { return nodes[k + 1] - nodes[k]; }
  double max_step() const;
  bool is_uniform() const;
};

/// Throws ConfigError unless nodes start at 0 and strictly increase.
void validate(const TimeGrid& grid);

/// M paths of a d-dimensional Brownian motion on a grid, stored path-major:
/// value(m, k, i) lives at values[(m * (N + 1) + k) * d + i].
struct PathEnsemble {
  TimeGrid grid;
  int dim = 1;
  std::size_t paths = 0;
  std::uint64_t seed = 0;
  std::string rng_scheme;
  std::vector<double> values;

  int steps() const { return grid.steps(); }
  std::size_t node_stride() const { return static_cast<std::size_t>(dim); }
  std::size_t path_stride() const { return static_cast<std::size_t>(grid.steps() + 1) * dim; }

  double value(std::size_t m, int k, int i) const {
    return values[m * path_stride() + static_cast<std::size_t>(k) * dim + i];
  }
  ConstVec state(std::size_t m, int k) const {
    return ConstVec(values.data() + m * path_stride() + static_cast<std::size_t>(k) * dim,
                    static_cast<std::size_t>(dim));
  }
  double increment(std::size_t m, int k, int i) const {
    return value(m, k + 1, i) - value(m, k, i);
  }
};

inline constexpr const char* kGaussianScheme = "mt19937_64+splitmix/normal";
inline constexpr const char* kTreeScheme = "rademacher-tree";

/// Deterministic for fixed (grid, dim, M, seed) whatever the worker count.
PathEnsemble simulate(const TimeGrid& grid, int dim, std::size_t M, std::uint64_t seed,
                      int threads = 1);

/// The full recombining Rademacher tree: 2^N paths on a uniform grid, d = 1,
/// B_{t_k} = (ups - downs) sqrt(dt). Path m moves up at step k iff bit k of m is set.
PathEnsemble simulate_tree(const TimeGrid& grid);

/// Flat binary export: header u64 M, N, d, seed then N+1 grid nodes (f64),
/// then the path-major body. A JSON sidecar `<path>.json` carries metadata
/// and the SHA-256 of the binary file.
void export_ensemble(const PathEnsemble& ens, const std::string& path);
PathEnsemble import_ensemble(const std::string& path);

/// SHA-256 (hex) of the ensemble in its export layout.
std::string ensemble_digest(const PathEnsemble& ens);
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::string& path);

// ---------------------------------------------------------------------------
// Terminal conditions
// ---------------------------------------------------------------------------

/// Read-only, bounds-checked access to one path. An optional recorder logs
/// every node index read, which makes measurability testable.
class PathView {
 public:
  PathView(const PathEnsemble& ens, std::size_t path, std::vector<int>* recorder = nullptr)
      : ens_(&ens), path_(path), recorder_(recorder) {}

  int last() const { return ens_->steps(); }
  double horizon() const { return ens_->grid.horizon(); }
  double time(int k) const;
  ConstVec at(int k) const;
  ConstVec terminal() const { return at(last()); }

 private:
  const PathEnsemble* ens_;
  std::size_t path_;
  std::vector<int>* recorder_;
};

struct TerminalSpec {
  std::string kind;  ///< linear, abs, critical, constant, shifted, negated
  std::function<double(const PathView&)> functional;
  double moment_order = std::numeric_limits<double>::infinity();
  std::string description;
  std::vector<double> v;  ///< direction for linear / abs
  double param = 0.0;     ///< gamma for critical, value for constant, shift for shifted
};

TerminalSpec terminal_linear(std::vector<double> v);
TerminalSpec terminal_abs(std::vector<double> v);
/// xi = S^{-1}(P(N > B_T^1 / sqrt T)) with survival S(x) = e^{-gamma x} / (1 + x)^2 on [0, inf).
TerminalSpec terminal_critical(double gamma);
TerminalSpec terminal_constant(double c);
TerminalSpec terminal_shifted(const TerminalSpec& base, double delta);
TerminalSpec terminal_negated(const TerminalSpec& base);

/// Survival-function inversion used by the critical terminal.
double critical_quantile(double gamma, double z);

std::vector<double> evaluate_terminal(const TerminalSpec& term, const PathEnsemble& ens,
                                      int threads = 1);

// ---------------------------------------------------------------------------
// Controls and Doleans-Dade weights
// ---------------------------------------------------------------------------

/// q evaluated at grid step k, time t and path state B_t.
using ControlMap = std::function<void(int k, double t, ConstVec b, MutVec q)>;

struct ControlProcess {
  std::string id;
  ControlMap markov;  ///< present when q is a function of (t, B_t)
  std::size_t paths = 0;
  int steps = 0;
  int dim = 1;
  std::vector<double> q;            ///< M x N x d, left-endpoint values on the ensemble
  std::vector<double> log_weights;  ///< M x (N + 1)
  std::vector<double> shift;        ///< M x (N + 1) x d, accumulated int_0^t q ds
  std::vector<unsigned char> overflow;  ///< per path
  std::size_t overflow_count = 0;

  ConstVec q_at(std::size_t m, int k) const {
    return ConstVec(q.data() + (m * steps + k) * dim, static_cast<std::size_t>(dim));
  }
  double log_weight(std::size_t m, int k) const { return log_weights[m * (steps + 1) + k]; }
  double weight(std::size_t m, int k) const { return std::exp(log_weight(m, k)); }
  /// Terminal weights; overflowed paths are excluded.
  std::vector<double> terminal_weights() const;
};

/// Weights from a Markov control evaluated on the ensemble.
ControlProcess doleans(const std::string& id, const ControlMap& q, const PathEnsemble& ens,
                       int threads = 1);
/// Weights from per-path values (M x N x d), e.g. a control read off a solution.
ControlProcess doleans_from_values(const std::string& id, std::vector<double> q,
                                   const PathEnsemble& ens, int threads = 1);

ControlMap constant_control(std::vector<double> c);

struct EntropyEstimate {
  Estimate primal;  ///< E[M ln M]
  Estimate dual;    ///< E[M_T * 1/2 sum |q|^2 dt]
  double ess = 0.0; ///< effective sample size of the terminal weights
  std::size_t excluded = 0;
};

/// Throws DegenerateWeights when ess < min_ess_fraction * M.
EntropyEstimate relative_entropy(const ControlProcess& ctrl, const PathEnsemble& ens,
                                 double min_ess_fraction = 1e-3);

/// Weighted mean of per-path values under M^q_T (overflowed paths excluded).
Estimate reweighted_mean(const ControlProcess& ctrl, ConstVec values);

struct ExpMoment {
  double estimate = 0.0;      ///< E[e^{pX}], +inf when it overflows
  double log_estimate = 0.0;  ///< ln of the estimate
  double std_error = 0.0;
  double top1_mass = 0.0;     ///< share of sum e^{pX} carried by the top 1% of samples
  bool heavy = false;         ///< top1_mass above the dominance threshold
  std::size_t samples = 0;
};

ExpMoment exp_moment(double p, ConstVec samples, double dominance_threshold = 0.5);

struct ClassDReport {
  CheckReport report;
  double sup_estimate = 0.0;
  double std_error = 0.0;
  std::string argsup;  ///< stopping time attaining the sup
  double top1_mass = 0.0;
  bool heavy = false;
};

/// Surrogate for class (D) through the K-criterion: sup over grid times and
/// level-hitting times of E[K(X_tau^+)], compared against `budget`.
/// `process` holds X per path and node, laid out M x (N + 1).
ClassDReport class_D_diagnostic(const MajorantFamily& fam, ConstVec process, std::size_t paths,
                                const TimeGrid& grid, const std::vector<double>& levels,
                                double budget);

}  // namespace qbsde
