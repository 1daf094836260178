#include "qbsde/solver.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>

#include "qbsde/errors.hpp"

namespace qbsde {

void validate(const Scheme& s) {
  if (s.mode != "explicit" && s.mode != "picard")
    throw ConfigError("scheme mode must be explicit or picard, got " + s.mode);
  if (s.projector != "regression" && s.projector != "lattice")
    throw ConfigError("scheme projector must be regression or lattice, got " + s.projector);
  if (s.regression_target != "pathwise" && s.regression_target != "fitted")
    throw ConfigError("regression target must be pathwise or fitted, got " + s.regression_target);
  if (s.degree < 0 || s.degree > 10) throw ConfigError("basis degree must lie in [0, 10]");
  if (s.cross_degree < 0) throw ConfigError("cross degree must be >= 0");
  if (!(s.basis_clamp > 0.0)) throw ConfigError("basis clamp must be positive");
  if (!(s.ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
  if (!(s.condition_limit > 1.0)) throw ConfigError("condition limit must exceed 1");
  if (s.truncation_radius && !(*s.truncation_radius > 0.0))
    throw ConfigError("truncation radius must be positive");
  if (!(s.truncation_scale > 0.0)) throw ConfigError("truncation scale must be positive");
  if (s.picard_iterations < 1) throw ConfigError("picard iterations must be >= 1");
  if (!(s.picard_tolerance > 0.0)) throw ConfigError("picard tolerance must be positive");
  if (!(s.damping > 0.0 && s.damping <= 1.0)) throw ConfigError("damping must lie in (0, 1]");
  if (s.warm_start != "zero" && s.warm_start != "explicit")
    throw ConfigError("warm start must be zero or explicit, got " + s.warm_start);
  if (!(s.clip_warning_fraction > 0.0)) throw ConfigError("clip warning fraction must be positive");
  if (s.threads < 1) throw ConfigError("threads must be >= 1");
}

std::size_t basis_size(int dim, int degree, int cross_degree) {
  std::size_t n = 1 + static_cast<std::size_t>(dim) * degree;
  if (cross_degree >= 2 && dim > 1) n += static_cast<std::size_t>(dim) * (dim - 1) / 2;
  return n;
}

void basis_row(ConstVec x, int degree, int cross_degree, MutVec out) {
  std::size_t j = 0;
  out[j++] = 1.0;
  for (double xi : x) {
    double p = 1.0;
    for (int e = 1; e <= degree; ++e) {
      p *= xi;
      out[j++] = p;
    }
  }
  if (cross_degree >= 2)
    for (std::size_t a = 0; a < x.size(); ++a)
      for (std::size_t b = a + 1; b < x.size(); ++b) out[j++] = x[a] * x[b];
}

namespace {

constexpr std::size_t kBlock = 512;

// Sums add(m, acc) over paths in fixed blocks, then combines the block
// partials pairwise, so the result does not depend on the worker count.
template <class Add>
std::vector<double> blocked_sum(std::size_t M, std::size_t width, int threads, const Add& add) {
  const std::size_t blocks = (M + kBlock - 1) / kBlock;
  std::vector<double> partial(blocks * width, 0.0);
  parallel_for(blocks, threads, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      double* acc = partial.data() + b * width;
      const std::size_t end = std::min(M, (b + 1) * kBlock);
      for (std::size_t m = b * kBlock; m < end; ++m) add(m, acc);
    }
  });
  std::vector<double> out(width), column(blocks);
  for (std::size_t w = 0; w < width; ++w) {
    for (std::size_t b = 0; b < blocks; ++b) column[b] = partial[b * width + w];
    out[w] = pairwise_sum(column);
  }
  return out;
}

class RegressionProjector final : public Projector {
 public:
  RegressionProjector(const PathEnsemble& ens, const Scheme& scheme)
      : ens_(ens), threads_(scheme.threads), clamp_(scheme.basis_clamp) {
    const int N = ens.steps(), d = ens.dim;
    const std::size_t M = ens.paths;
    steps_.resize(N);
    for (int k = 0; k < N; ++k) {
      Step& st = steps_[k];
      st.center.assign(d, 0.0);
      st.scale.assign(d, 1.0);
      std::vector<double> col(M);
      double spread = 0.0;
      for (int i = 0; i < d; ++i) {
        for (std::size_t m = 0; m < M; ++m) col[m] = ens.value(m, k, i);
        const Estimate e = mean_estimate(col);
        const double sd = e.std_error * std::sqrt(static_cast<double>(M));
        st.center[i] = e.mean;
        st.scale[i] = sd > 0.0 ? sd : 1.0;
        spread = std::max(spread, sd);
      }
      const bool deterministic = k == 0 || spread <= 1e-14 * (1.0 + std::abs(st.center[0]));
      st.degree = deterministic ? 0 : scheme.degree;
      st.cross = deterministic ? 0 : scheme.cross_degree;
      st.nb = basis_size(d, st.degree, st.cross);
      const std::size_t nb = st.nb;
      auto gram = blocked_sum(M, nb * nb, threads_, [&](std::size_t m, double* acc) {
        thread_local std::vector<double> phi;
        phi.resize(nb);
        row(st, m, k, phi);
        for (std::size_t a = 0; a < nb; ++a)
          for (std::size_t b = a; b < nb; ++b) acc[a * nb + b] += phi[a] * phi[b];
      });
      Eigen::MatrixXd A(nb, nb);
      for (std::size_t a = 0; a < nb; ++a)
        for (std::size_t b = a; b < nb; ++b) A(a, b) = A(b, a) = gram[a * nb + b] / M;
      A += scheme.ridge * Eigen::MatrixXd::Identity(nb, nb);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A, Eigen::EigenvaluesOnly);
      const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
      if (!(lo > 0.0) || hi / lo > scheme.condition_limit) {
        std::ostringstream os;
        os << "regression basis at step " << k << " is rank deficient (condition "
           << (lo > 0.0 ? hi / lo : INFINITY) << ", degree " << st.degree << ", " << M
           << " paths)";
        throw RankDeficient(os.str());
      }
      st.ldlt.compute(A);
    }
  }

  void project(int k, const std::vector<ConstVec>& targets,
               std::vector<std::vector<double>>& fitted, StepModel* model) const override {
    const Step& st = steps_[k];
    const std::size_t M = ens_.paths, nb = st.nb, J = targets.size();
    std::lock_guard<std::mutex> lock(cache_mutex_);
    if (cached_step_ != k) {
      design_.resize(M * nb);
      parallel_for(M, threads_, [&](std::size_t begin, std::size_t end) {
        std::vector<double> phi(nb);
        for (std::size_t m = begin; m < end; ++m) {
          row(st, m, k, phi);
          std::copy(phi.begin(), phi.end(), design_.begin() + static_cast<std::ptrdiff_t>(m * nb));
        }
      });
      cached_step_ = k;
    }
    const double* X = design_.data();
    auto rhs = blocked_sum(M, nb * J, threads_, [&](std::size_t m, double* acc) {
      const double* phi = X + m * nb;
      for (std::size_t j = 0; j < J; ++j) {
        const double y = targets[j][m];
        for (std::size_t a = 0; a < nb; ++a) acc[j * nb + a] += phi[a] * y;
      }
    });
    std::vector<std::vector<double>> coef(J, std::vector<double>(nb));
    for (std::size_t j = 0; j < J; ++j) {
      Eigen::VectorXd r(nb);
      for (std::size_t a = 0; a < nb; ++a) r[a] = rhs[j * nb + a] / M;
      const Eigen::VectorXd c = st.ldlt.solve(r);
      for (std::size_t a = 0; a < nb; ++a) coef[j][a] = c[a];
    }
    fitted.assign(J, std::vector<double>(M));
    parallel_for(M, threads_, [&](std::size_t begin, std::size_t end) {
      for (std::size_t m = begin; m < end; ++m) {
        const double* phi = X + m * nb;
        for (std::size_t j = 0; j < J; ++j) {
          double s = 0.0;
          for (std::size_t a = 0; a < nb; ++a) s += phi[a] * coef[j][a];
          fitted[j][m] = s;
        }
      }
    });
    if (model) {
      model->kind = "regression";
      model->center = st.center;
      model->scale = st.scale;
      model->degree = st.degree;
      model->cross_degree = st.cross;
      model->clamp = clamp_;
      model->coef = std::move(coef);
    }
  }

  std::string kind() const override { return "regression"; }

 private:
  struct Step {
    std::vector<double> center, scale;
    int degree = 0, cross = 0;
    std::size_t nb = 1;
    Eigen::LDLT<Eigen::MatrixXd> ldlt;
  };

  void row(const Step& st, std::size_t m, int k, std::vector<double>& phi) const {
    const int d = ens_.dim;
    double x[16];
    std::vector<double> big;
    double* px = x;
    if (d > 16) {
      big.resize(d);
      px = big.data();
    }
    for (int i = 0; i < d; ++i)
      px[i] = std::clamp((ens_.value(m, k, i) - st.center[i]) / st.scale[i], -clamp_, clamp_);
    basis_row(ConstVec(px, static_cast<std::size_t>(d)), st.degree, st.cross, phi);
  }

  const PathEnsemble& ens_;
  int threads_;
  double clamp_;
  std::vector<Step> steps_;
  mutable std::mutex cache_mutex_;
  mutable int cached_step_ = -1;
  mutable std::vector<double> design_;  // basis rows at cached_step_, path-major
};

class LatticeProjector final : public Projector {
 public:
  explicit LatticeProjector(const PathEnsemble& ens) : ens_(ens) {
    if (ens.dim != 1) throw ConfigError("lattice projector needs d = 1");
    if (!ens.grid.is_uniform()) throw ConfigError("lattice projector needs a uniform grid");
    step_ = std::sqrt(ens.grid.horizon() / ens.steps());
    const int N = ens.steps();
    steps_.resize(N);
    for (int k = 0; k < N; ++k) {
      std::map<long, std::vector<std::size_t>> groups;
      for (std::size_t m = 0; m < ens.paths; ++m) {
        const double b = ens.value(m, k, 0);
        const long j = std::llround(b / step_);
        if (std::abs(b - static_cast<double>(j) * step_) > 1e-9 * step_)
          throw ConfigError("ensemble is not on the Rademacher lattice");
        groups[j].push_back(m);
      }
      Step& st = steps_[k];
      st.group_of.assign(ens.paths, 0);
      for (auto& [j, members] : groups) {
        for (std::size_t m : members) st.group_of[m] = st.members.size();
        st.index.push_back(j);
        std::array<std::vector<std::size_t>, 2> kids;
        for (std::size_t m : members) kids[ens.increment(m, k, 0) > 0.0].push_back(m);
        st.members.push_back(std::move(kids));
      }
    }
  }

  void project(int k, const std::vector<ConstVec>& targets,
               std::vector<std::vector<double>>& fitted, StepModel* model) const override {
    const Step& st = steps_[k];
    const std::size_t G = st.members.size(), J = targets.size();
    std::vector<std::vector<double>> means(J, std::vector<double>(G));
    std::vector<double> buf;
    // Mean over each child separately; a constant child returns its value
    // exactly, so mirror-symmetric nodes give bitwise-symmetric results.
    auto child_mean = [&](ConstVec t, const std::vector<std::size_t>& mem) {
      buf.resize(mem.size());
      bool flat = true;
      for (std::size_t i = 0; i < mem.size(); ++i) {
        buf[i] = t[mem[i]];
        flat = flat && buf[i] == buf[0];
      }
      return flat ? buf[0] : pairwise_sum(buf) / static_cast<double>(mem.size());
    };
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t g = 0; g < G; ++g) {
        const auto& [dn, up] = st.members[g];
        if (dn.empty() || up.empty()) {
          means[j][g] = child_mean(targets[j], dn.empty() ? up : dn);
        } else if (dn.size() == up.size()) {
          means[j][g] = 0.5 * (child_mean(targets[j], up) + child_mean(targets[j], dn));
        } else {
          const double nu = static_cast<double>(up.size()), nd = static_cast<double>(dn.size());
          means[j][g] = (nu * child_mean(targets[j], up) + nd * child_mean(targets[j], dn)) / (nu + nd);
        }
      }
    fitted.assign(J, std::vector<double>(ens_.paths));
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t m = 0; m < ens_.paths; ++m) fitted[j][m] = means[j][st.group_of[m]];
    if (model) {
      model->kind = "lattice";
      model->node_step = step_;
      model->node_offset = st.index.front();
      const long span = st.index.back() - st.index.front() + 1;
      model->nodes.assign(J, std::vector<double>(span, NAN));
      for (std::size_t j = 0; j < J; ++j) {
        for (std::size_t g = 0; g < G; ++g) model->nodes[j][st.index[g] - st.index.front()] = means[j][g];
        auto& tab = model->nodes[j];
        for (long i = 1; i + 1 < span; ++i)
          if (std::isnan(tab[i])) tab[i] = 0.5 * (tab[i - 1] + tab[i + 1]);
      }
    }
  }

  std::string kind() const override { return "lattice"; }

 private:
  struct Step {
    std::vector<long> index;
    std::vector<std::array<std::vector<std::size_t>, 2>> members;  // {down, up} children
    std::vector<std::size_t> group_of;
  };
  const PathEnsemble& ens_;
  double step_ = 0.0;
  std::vector<Step> steps_;
};

void clip(MutVec z, double radius, std::size_t& clips) {
  const double r = norm(z);
  if (r > radius) {
    for (double& v : z) v *= radius / r;
    ++clips;
  }
}

double g_checked(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z) {
  const double v = gen.value(t, b, z);
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os.precision(17);
    os << "generator not finite at t=" << t << ", |z|=" << norm(z);
    throw EvaluationFault(os.str());
  }
  return v;
}

// Counts clipped evaluations per path so the total is order-independent.
struct ClipTally {
  std::vector<std::size_t> per_path;
  explicit ClipTally(std::size_t M) : per_path(M, 0) {}
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : per_path) s += c;
    return s;
  }
};

void growth_precondition(const GeneratorSpec& gen, const PathEnsemble& ens, double radius) {
  Probe p;
  p.radius = radius;
  p.samples = 200;
  p.states = 2;
  p.dim = ens.dim;
  const double T = ens.grid.horizon();
  p.times = {0.0, 0.5 * T, T};
  p.state_scale = std::sqrt(T);
  p.shell_spacing = std::max(0.125, radius / 200.0);
  const CheckReport rep = check_quadratic_growth(gen, p);
  if (!rep.passed) {
    const Witness& w = rep.witnesses.front();
    std::ostringstream os;
    os << "generator " << gen.name << " fails the quadratic growth bound at |z|=" << norm(w.z)
       << " (lhs " << w.lhs << " > rhs " << w.rhs << ") within the truncation radius " << radius;
    throw PreconditionError(os.str());
  }
}

void init_solution(BsdeSolution& sol, const PathEnsemble& ens, const Scheme& scheme,
                   double radius) {
  sol.grid = ens.grid;
  sol.paths = ens.paths;
  sol.dim = ens.dim;
  sol.scheme = scheme;
  sol.truncation_radius = radius;
  const std::size_t N = static_cast<std::size_t>(ens.steps());
  sol.Y.assign((N + 1) * ens.paths, 0.0);
  sol.Z.assign(N * ens.paths * ens.dim, 0.0);
  sol.models.assign(N, StepModel{});
  sol.residuals.assign(N, 0.0);
}

// Two-stage fit at step k. fitted[0] = E_k[r y]; fitted[1 + i] = E_k[r (y - c) dW^i]
// with c = E_k[r y] / E_k[r], which has the conditional mean of E_k[r y dW^i]
// but far less variance; fitted[1 + d] = E_k[r] when ratios are given.
template <class Dw>
void fit_step(const Projector& proj, int k, ConstVec y, const PathEnsemble& ens,
              const std::vector<double>* ratio, const Dw& dw,
              std::vector<std::vector<double>>& fitted, StepModel& model) {
  const int d = ens.dim;
  const std::size_t M = ens.paths;
  std::vector<double> ry;
  std::vector<ConstVec> first;
  if (ratio) {
    ry.resize(M);
    for (std::size_t m = 0; m < M; ++m) ry[m] = (*ratio)[m] * y[m];
    first = {ConstVec(ry), ConstVec(*ratio)};
  } else {
    first = {y};
  }
  std::vector<std::vector<double>> f1, f2;
  StepModel m1, m2;
  proj.project(k, first, f1, &m1);
  std::vector<std::vector<double>> store(d, std::vector<double>(M));
  for (std::size_t m = 0; m < M; ++m) {
    const double r = ratio ? (*ratio)[m] : 1.0;
    const double c = ratio ? f1[0][m] / f1[1][m] : f1[0][m];
    for (int i = 0; i < d; ++i) store[i][m] = r * (y[m] - c) * dw(m, i);
  }
  std::vector<ConstVec> second;
  for (auto& v : store) second.emplace_back(v);
  proj.project(k, second, f2, &m2);

  fitted.clear();
  fitted.push_back(std::move(f1[0]));
  for (auto& v : f2) fitted.push_back(std::move(v));
  if (ratio) fitted.push_back(std::move(f1[1]));

  model = m1;
  model.coef.clear();
  model.nodes.clear();
  auto merge = [&](std::vector<std::vector<double>>& dst, std::vector<std::vector<double>>& a,
                   std::vector<std::vector<double>>& b) {
    if (a.empty()) return;
    dst.push_back(a[0]);
    for (auto& v : b) dst.push_back(v);
    if (ratio) dst.push_back(a[1]);
  };
  merge(model.coef, m1.coef, m2.coef);
  merge(model.nodes, m1.nodes, m2.nodes);
  model.z_first = 1;
}

double rms(ConstVec a, ConstVec b) {
  std::vector<double> sq(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) sq[i] = (a[i] - b[i]) * (a[i] - b[i]);
  return a.empty() ? 0.0 : std::sqrt(pairwise_sum(sq) / static_cast<double>(a.size()));
}

void explicit_pass(BsdeSolution& sol, const GeneratorSpec& gen, const std::vector<double>& xi,
                   const PathEnsemble& ens, const Projector& proj) {
  const int N = ens.steps(), d = ens.dim;
  const std::size_t M = ens.paths;
  std::copy(xi.begin(), xi.end(), sol.Y.begin() + static_cast<std::ptrdiff_t>(N * M));
  ClipTally tally(M);
  std::vector<std::vector<double>> fitted;
  // On the lattice the projection is exact, so the fitted Y_{k+1} is used regardless.
  const bool pathwise = sol.scheme.regression_target == "pathwise" && proj.kind() != "lattice";
  std::vector<double> running(xi);  // xi - sum_{i > k} g dt
  for (int k = N - 1; k >= 0; --k) {
    const double t = ens.grid.nodes[k], dt = ens.grid.dt(k);
    ConstVec y_next = pathwise ? ConstVec(running)
                               : ConstVec(sol.Y.data() + static_cast<std::size_t>(k + 1) * M, M);
    StepModel& model = sol.models[k];
    fit_step(proj, k, y_next, ens, nullptr,
             [&](std::size_t m, int i) { return ens.increment(m, k, i); }, fitted, model);
    model.z_factor = -1.0 / dt;
    model.z_radius = sol.truncation_radius;
    sol.residuals[k] = rms(y_next, fitted[0]);
    parallel_for(M, sol.scheme.threads, [&](std::size_t begin, std::size_t end) {
      for (std::size_t m = begin; m < end; ++m) {
        MutVec z(sol.Z.data() + (static_cast<std::size_t>(k) * M + m) * d,
                 static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) z[i] = -fitted[1 + i][m] / dt;
        clip(z, sol.truncation_radius, tally.per_path[m]);
        const double g = g_checked(gen, t, ens.state(m, k), z);
        sol.Y[static_cast<std::size_t>(k) * M + m] = fitted[0][m] - g * dt;
        running[m] -= g * dt;
      }
    });
  }
  sol.clip_count += tally.total();
  sol.z_evaluations += static_cast<std::size_t>(N) * M;
}

// Global Picard: S_k = xi - sum_{i >= k} g(Z_i^old) dt, Z_k = -E_k[S_{k+1} dB_k] / dt,
// Y_k = E_k[S_{k+1}] - g(Z_k) dt.
void picard_loop(BsdeSolution& sol, const GeneratorSpec& gen, const std::vector<double>& xi,
                 const PathEnsemble& ens, const Projector& proj, int iterations, bool require,
                 bool y_old_valid) {
  const int N = ens.steps(), d = ens.dim;
  const std::size_t M = ens.paths;
  const Scheme& sc = sol.scheme;
  std::vector<std::vector<double>> fitted;
  std::vector<double> S(xi), Znew(sol.Z.size());
  double prev_gap = INFINITY;
  int growth = 0;
  bool converged = false;
  for (int it = 1; it <= iterations; ++it) {
    std::vector<double> Yold = sol.Y;
    if (!y_old_valid) std::fill(Yold.begin(), Yold.end(), 0.0);
    y_old_valid = true;
    S = xi;
    std::copy(xi.begin(), xi.end(), sol.Y.begin() + static_cast<std::ptrdiff_t>(N * M));
    ClipTally tally(M);
    for (int k = N - 1; k >= 0; --k) {
      const double t = ens.grid.nodes[k], dt = ens.grid.dt(k);
      StepModel& model = sol.models[k];
      fit_step(proj, k, S, ens, nullptr,
               [&](std::size_t m, int i) { return ens.increment(m, k, i); }, fitted, model);
      model.z_factor = -1.0 / dt;
      model.z_radius = sol.truncation_radius;
      sol.residuals[k] = rms(S, fitted[0]);
      parallel_for(M, sc.threads, [&](std::size_t begin, std::size_t end) {
        std::vector<double> zn(d);
        for (std::size_t m = begin; m < end; ++m) {
          const std::size_t at = (static_cast<std::size_t>(k) * M + m) * d;
          const ConstVec b = ens.state(m, k);
          MutVec z(sol.Z.data() + at, static_cast<std::size_t>(d));
          // S moves to S_k with the previous iterate before Z_k is replaced.
          S[m] -= g_checked(gen, t, b, z) * dt;
          for (int i = 0; i < d; ++i) zn[i] = -fitted[1 + i][m] / dt;
          clip(zn, sol.truncation_radius, tally.per_path[m]);
          for (int i = 0; i < d; ++i) z[i] = (1.0 - sc.damping) * z[i] + sc.damping * zn[i];
          sol.Y[static_cast<std::size_t>(k) * M + m] = fitted[0][m] - g_checked(gen, t, b, z) * dt;
        }
      });
    }
    sol.clip_count += tally.total();
    sol.z_evaluations += static_cast<std::size_t>(N) * M;
    sol.step_gaps.assign(N + 1, 0.0);
    double gap = 0.0;
    for (int k = 0; k <= N; ++k) {
      sol.step_gaps[k] = rms(ConstVec(sol.Y.data() + static_cast<std::size_t>(k) * M, M),
                             ConstVec(Yold.data() + static_cast<std::size_t>(k) * M, M));
      gap = std::max(gap, sol.step_gaps[k]);
    }
    sol.picard_gaps.push_back(gap);
    sol.contraction.push_back(std::isfinite(prev_gap) ? (prev_gap > 0.0 ? gap / prev_gap : 0.0)
                                                      : gap / (1.0 + std::abs(sol.Y[0])));
    sol.iterations = it;
    growth = (gap > prev_gap) ? growth + 1 : 0;
    if (growth >= 3) throw PicardFailure("Picard iteration diverges (gap grew 3 times in a row)", gap);
    prev_gap = gap;
    if (gap <= sc.picard_tolerance * (1.0 + std::abs(sol.Y[0]))) {
      converged = true;
      break;
    }
  }
  if (require && !converged)
    throw PicardFailure("Picard iteration did not converge within " +
                            std::to_string(iterations) + " iterations",
                        sol.picard_gaps.empty() ? INFINITY : sol.picard_gaps.back());
}

void finalize(BsdeSolution& sol, const GeneratorSpec& gen, const PathEnsemble& ens) {
  const int N = ens.steps(), d = ens.dim;
  const std::size_t M = ens.paths;
  std::vector<double> rep(M), sup(M), energy(M);
  parallel_for(M, sol.scheme.threads, [&](std::size_t begin, std::size_t end) {
    std::vector<double> gs(N), zs(N);
    for (std::size_t m = begin; m < end; ++m) {
      double s = 0.0;
      for (int k = 0; k < N; ++k) {
        const ConstVec z = sol.z(k, m);
        gs[k] = gen.value(ens.grid.nodes[k], ens.state(m, k), z) * ens.grid.dt(k);
        zs[k] = norm_sq(z) * ens.grid.dt(k);
      }
      for (int k = 0; k <= N; ++k) s = std::max(s, std::abs(sol.y(k, m)));
      rep[m] = sol.y(N, m) - pairwise_sum(gs);
      sup[m] = s;
      energy[m] = std::sqrt(pairwise_sum(zs));
    }
  });
  (void)d;
  const Estimate e = mean_estimate(rep);
  sol.y0.mean = pairwise_sum(ConstVec(sol.Y.data(), M)) / static_cast<double>(M);
  sol.y0.std_error = e.std_error;
  sol.y0.samples = M;
  sol.sup_abs_y = pairwise_sum(sup) / static_cast<double>(M);
  sol.z_energy = pairwise_sum(energy) / static_cast<double>(M);
  if (sol.clip_fraction() > sol.scheme.clip_warning_fraction) {
    std::ostringstream os;
    os << "truncation radius " << sol.truncation_radius << " clipped "
       << 100.0 * sol.clip_fraction() << "% of z evaluations";
    sol.warnings.push_back(os.str());
  }
}

}  // namespace

double StepModel::fit(std::size_t target, ConstVec b) const {
  if (kind == "lattice") {
    const auto& tab = nodes.at(target);
    long i = std::llround(b[0] / node_step) - node_offset;
    i = std::clamp<long>(i, 0, static_cast<long>(tab.size()) - 1);
    return tab[i];
  }
  const auto& c = coef.at(target);
  std::vector<double> x(b.size()), phi(c.size());
  for (std::size_t i = 0; i < b.size(); ++i)
    x[i] = std::clamp((b[i] - center[i]) / scale[i], -clamp, clamp);
  basis_row(x, degree, cross_degree, phi);
  double s = 0.0;
  for (std::size_t a = 0; a < c.size(); ++a) s += phi[a] * c[a];
  return s;
}

void StepModel::z(ConstVec b, MutVec out) const {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z_factor * fit(z_first + i, b);
  std::size_t unused = 0;
  clip(out, z_radius, unused);
}

std::unique_ptr<Projector> make_projector(const PathEnsemble& ens, const Scheme& scheme) {
  if (scheme.projector == "lattice") return std::make_unique<LatticeProjector>(ens);
  return std::make_unique<RegressionProjector>(ens, scheme);
}

double default_truncation_radius(const GeneratorSpec& gen, const std::vector<double>& xi,
                                 const PathEnsemble& ens) {
  double ximax = 0.0;
  for (double v : xi) ximax = std::max(ximax, std::abs(v));
  const int N = ens.steps();
  double amax = 0.0, dtmin = INFINITY;
  for (int k = 0; k < N; ++k) dtmin = std::min(dtmin, ens.grid.dt(k));
  if (gen.alpha) {
    for (std::size_t m = 0; m < ens.paths; ++m) {
      double a = 0.0;
      for (int k = 0; k < N; ++k) a += gen.alpha(ens.grid.nodes[k], ens.state(m, k)) * ens.grid.dt(k);
      amax = std::max(amax, a);
    }
  }
  return std::max(1.0, std::sqrt(2.0 * (ximax + amax) / (gen.gamma * dtmin)));
}

BsdeSolution solve(const GeneratorSpec& gen, const TerminalSpec& terminal, const PathEnsemble& ens,
                   const Scheme& scheme) {
  return solve(gen, evaluate_terminal(terminal, ens, scheme.threads), ens, scheme);
}

BsdeSolution solve(const GeneratorSpec& gen, const std::vector<double>& xi,
                   const PathEnsemble& ens, const Scheme& scheme) {
  validate(gen);
  validate(scheme);
  if (xi.size() != ens.paths) throw ConfigError("terminal values do not match the ensemble");
  const double radius = scheme.truncation_radius.value_or(
      scheme.truncation_scale * default_truncation_radius(gen, xi, ens));
  if (scheme.check_growth) growth_precondition(gen, ens, radius);
  const auto proj = make_projector(ens, scheme);
  BsdeSolution sol;
  init_solution(sol, ens, scheme, radius);
  if (scheme.mode == "explicit") {
    explicit_pass(sol, gen, xi, ens, *proj);
  } else {
    bool have_y = false;
    if (scheme.warm_start == "explicit") {
      explicit_pass(sol, gen, xi, ens, *proj);
      have_y = true;
    }
    picard_loop(sol, gen, xi, ens, *proj, scheme.picard_iterations, true, have_y);
  }
  finalize(sol, gen, ens);
  return sol;
}

BsdeSolution picard_refine(const BsdeSolution& prior, const GeneratorSpec& gen,
                           const std::vector<double>& xi, const PathEnsemble& ens,
                           int iterations) {
  if (prior.paths != ens.paths || prior.grid.nodes != ens.grid.nodes)
    throw ConfigError("picard_refine: prior solution was not computed on this ensemble");
  if (iterations < 1) throw ConfigError("picard_refine needs at least one iteration");
  BsdeSolution sol = prior;
  sol.picard_gaps.clear();
  sol.contraction.clear();
  sol.warnings.clear();
  sol.clip_count = 0;
  sol.z_evaluations = 0;
  sol.scheme.mode = "picard";
  const auto proj = make_projector(ens, sol.scheme);
  picard_loop(sol, gen, xi, ens, *proj, iterations, false, true);
  finalize(sol, gen, ens);
  return sol;
}

std::vector<StepResidual> one_step_residuals(const BsdeSolution& sol, const GeneratorSpec& gen,
                                             const PathEnsemble& ens) {
  const int N = ens.steps(), d = ens.dim;
  std::vector<StepResidual> out(N);
  std::vector<double> r(ens.paths), mart(ens.paths);
  for (int k = 0; k < N; ++k) {
    const double t = ens.grid.nodes[k], dt = ens.grid.dt(k);
    double scale = 0.0;
    for (std::size_t m = 0; m < ens.paths; ++m) {
      const ConstVec z = sol.z(k, m);
      double zdb = 0.0;
      for (int i = 0; i < d; ++i) zdb += z[i] * ens.increment(m, k, i);
      r[m] = sol.y(k + 1, m) - sol.y(k, m) - gen.value(t, ens.state(m, k), z) * dt + zdb;
      mart[m] = zdb;
      scale = std::max(scale, std::abs(sol.y(k + 1, m)));
    }
    // In-sample projections have residuals whose sample mean is pinned at
    // zero, so the spread of mean(Z.dB) is counted explicitly.
    const Estimate e = mean_estimate(r), em = mean_estimate(mart);
    out[k].mean = e.mean;
    out[k].std_error = std::hypot(e.std_error, em.std_error);
    out[k].within = std::abs(e.mean) <= 4.0 * out[k].std_error + 1e-12 * (1.0 + scale);
  }
  return out;
}

PathEnsemble shifted_ensemble(const PathEnsemble& ens, const ControlMap& q, int threads) {
  PathEnsemble out = ens;
  out.rng_scheme = ens.rng_scheme + "+drift";
  const int N = ens.steps(), d = ens.dim;
  parallel_for(ens.paths, threads, [&](std::size_t begin, std::size_t end) {
    std::vector<double> qv(d);
    for (std::size_t m = begin; m < end; ++m) {
      double* p = out.values.data() + m * out.path_stride();
      for (int k = 0; k < N; ++k) {
        const double dt = ens.grid.dt(k);
        q(k, ens.grid.nodes[k], ConstVec(p + static_cast<std::size_t>(k) * d, d), qv);
        for (int i = 0; i < d; ++i) {
          p[(k + 1) * d + i] = p[k * d + i] + qv[i] * dt + ens.increment(m, k, i);
          if (!std::isfinite(p[(k + 1) * d + i]))
            throw EvaluationFault("shifted path " + std::to_string(m) + " is not finite");
        }
      }
    }
  });
  return out;
}

namespace {

double g2_value(const GeneratorSpec& gen, double t, ConstVec b, ConstVec z) {
  return gen.g2_zero ? 0.0 : gen.g2_value(t, b, z);
}

}  // namespace

DualSolution solve_dual(const GeneratorSpec& gen, const ConjugateHandle& handle,
                        const TerminalSpec& terminal, const PathEnsemble& ens,
                        const ControlProcess& ctrl, const Scheme& scheme) {
  validate(gen);
  validate(scheme);
  if (ctrl.paths != ens.paths || ctrl.steps != ens.steps() || ctrl.dim != ens.dim)
    throw ConfigError("control " + ctrl.id + " was not built on this ensemble");
  const int N = ens.steps(), d = ens.dim;
  const std::size_t M = ens.paths;
  const bool fresh = static_cast<bool>(ctrl.markov);

  DualSolution out;
  BsdeSolution& sol = out.solution;
  PathEnsemble shifted;
  const PathEnsemble* base = &ens;
  if (fresh) {
    shifted = shifted_ensemble(ens, ctrl.markov, scheme.threads);
    base = &shifted;
  }
  const PathEnsemble& B = *base;
  const auto xi = evaluate_terminal(terminal, B, scheme.threads);
  const double radius = scheme.truncation_radius.value_or(
      scheme.truncation_scale * default_truncation_radius(gen, xi, B));
  init_solution(sol, B, scheme, radius);

  // Control values and f1 along the paths the coefficients are evaluated on.
  std::vector<double> qv(M * N * d), f1(M * N);
  parallel_for(M, scheme.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m)
      for (int k = 0; k < N; ++k) {
        MutVec q(qv.data() + (m * N + k) * d, static_cast<std::size_t>(d));
        if (fresh) {
          ctrl.markov(k, B.grid.nodes[k], B.state(m, k), q);
        } else {
          const ConstVec c = ctrl.q_at(m, k);
          std::copy(c.begin(), c.end(), q.begin());
        }
        f1[m * N + k] = transform(handle, B.grid.nodes[k], B.state(m, k), q);
      }
  });

  std::unique_ptr<Projector> proj;
  if (fresh) {
    try {
      proj = make_projector(B, scheme);
    } catch (const ConfigError& e) {
      Scheme reg = scheme;
      reg.projector = "regression";
      proj = make_projector(B, reg);
      sol.warnings.push_back(std::string("dual paths left the lattice, regression used: ") +
                             e.what());
    }
  } else {
    proj = make_projector(B, scheme);
  }

  std::copy(xi.begin(), xi.end(), sol.Y.begin() + static_cast<std::ptrdiff_t>(N * M));
  ClipTally tally(M);
  std::vector<std::vector<double>> fitted;
  std::vector<double> running(xi);  // xi + sum_{i >= k} (f1 - g2) dt, pathwise
  if (gen.g2_zero) {
    // Y^q_k = E^Q[running_k | F_k]; no Z is needed.
    std::vector<double> target(M);
    for (int k = N - 1; k >= 0; --k) {
      const double dt = B.grid.dt(k);
      for (std::size_t m = 0; m < M; ++m) {
        running[m] += f1[m * N + k] * dt;
        if (fresh)
          target[m] = running[m];
        else if (ctrl.overflow[m])
          target[m] = 0.0;
        else
          target[m] = std::exp(ctrl.log_weight(m, N) - ctrl.log_weight(m, k)) * running[m];
      }
      proj->project(k, {ConstVec(target)}, fitted, &sol.models[k]);
      std::copy(fitted[0].begin(), fitted[0].end(),
                sol.Y.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * M));
    }
  } else {
    for (int k = N - 1; k >= 0; --k) {
      const double t = B.grid.nodes[k], dt = B.grid.dt(k);
      ConstVec y_next(sol.Y.data() + static_cast<std::size_t>(k + 1) * M, M);
      std::vector<double> ratio(fresh ? 0 : M);
      if (!fresh)
        for (std::size_t m = 0; m < M; ++m) {
          const ConstVec q(qv.data() + (m * N + k) * d, static_cast<std::size_t>(d));
          double qdb = 0.0;
          for (int i = 0; i < d; ++i) qdb += q[i] * B.increment(m, k, i);
          ratio[m] = std::exp(qdb - 0.5 * norm_sq(q) * dt);
        }
      StepModel& model = sol.models[k];
      // Under the dual measure the driving increment is dB - q dt.
      fit_step(*proj, k, y_next, B, fresh ? nullptr : &ratio,
               [&](std::size_t m, int i) {
                 return B.increment(m, k, i) - (fresh ? 0.0 : qv[(m * N + k) * d + i] * dt);
               },
               fitted, model);
      model.z_factor = -1.0 / dt;
      model.z_radius = radius;
      sol.residuals[k] = fresh ? rms(y_next, fitted[0]) : 0.0;
      parallel_for(M, scheme.threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t m = begin; m < end; ++m) {
          const double norm_r = fresh ? 1.0 : fitted[1 + d][m];
          MutVec z(sol.Z.data() + (static_cast<std::size_t>(k) * M + m) * d,
                   static_cast<std::size_t>(d));
          for (int i = 0; i < d; ++i) z[i] = -fitted[1 + i][m] / norm_r / dt;
          clip(z, radius, tally.per_path[m]);
          const double drift = f1[m * N + k] - g2_value(gen, t, B.state(m, k), z);
          sol.Y[static_cast<std::size_t>(k) * M + m] = fitted[0][m] / norm_r + drift * dt;
          running[m] += drift * dt;
        }
      });
    }
  }
  sol.clip_count = tally.total();
  sol.z_evaluations = gen.g2_zero ? 0 : static_cast<std::size_t>(N) * M;

  // Pathwise representation of Y^q_0 under the dual measure.
  std::vector<double> rep(M);
  std::size_t excluded = 0;
  for (std::size_t m = 0; m < M; ++m) {
    if (fresh) {
      rep[m] = running[m];
    } else if (ctrl.overflow[m]) {
      rep[m] = 0.0;
      ++excluded;
    } else {
      rep[m] = ctrl.weight(m, N) * running[m];
    }
  }
  const Estimate e = mean_estimate(rep);
  if (gen.g2_zero) {
    out.y0 = e;
    out.method = fresh ? "fresh_fast" : "reweight_fast";
  } else {
    out.y0.mean = pairwise_sum(ConstVec(sol.Y.data(), M)) / static_cast<double>(M);
    out.y0.std_error = e.std_error;
    out.y0.samples = M;
    out.method = fresh ? "fresh_backward" : "reweight_backward";
  }
  if (excluded) sol.warnings.push_back(std::to_string(excluded) + " overflowed weights excluded");
  sol.y0 = out.y0;
  std::vector<double> sup(M);
  for (std::size_t m = 0; m < M; ++m) {
    double s = 0.0;
    for (int k = 0; k <= N; ++k) s = std::max(s, std::abs(sol.y(k, m)));
    sup[m] = s;
  }
  sol.sup_abs_y = pairwise_sum(sup) / static_cast<double>(M);
  if (sol.clip_fraction() > scheme.clip_warning_fraction)
    sol.warnings.push_back("truncation radius clipped " +
                           std::to_string(100.0 * sol.clip_fraction()) + "% of z evaluations");
  return out;
}

}  // namespace qbsde
