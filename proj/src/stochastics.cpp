#include "qbsde/stochastics.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <boost/math/tools/roots.hpp>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <random>
#include <sstream>
#include <tuple>

#include "qbsde/errors.hpp"

namespace qbsde {

TimeGrid TimeGrid::uniform(double T, int N) {
  if (!(T > 0.0)) throw ConfigError("time grid needs T > 0");
  if (N < 1) throw ConfigError("time grid needs N >= 1");
  TimeGrid g;
  g.nodes.resize(N + 1);
  for (int k = 0; k <= N; ++k) g.nodes[k] = T * k / N;
  g.nodes[N] = T;
  return g;
}

double TimeGrid::max_step() const {
  double h = 0.0;
  for (int k = 0; k < steps(); ++k) h = std::max(h, dt(k));
  return h;
}

bool TimeGrid::is_uniform() const {
  const double h = horizon() / steps();
  for (int k = 0; k < steps(); ++k)
    if (std::abs(dt(k) - h) > 1e-12 * h) return false;
  return true;
}

void validate(const TimeGrid& grid) {
  if (grid.nodes.size() < 2) throw ConfigError("time grid needs at least one step");
  if (grid.nodes.front() != 0.0) throw ConfigError("time grid must start at 0");
  for (std::size_t k = 1; k < grid.nodes.size(); ++k)
    if (!(grid.nodes[k] > grid.nodes[k - 1]))
      throw ConfigError("time grid must be strictly increasing");
}

PathEnsemble simulate(const TimeGrid& grid, int dim, std::size_t M, std::uint64_t seed,
                      int threads) {
  validate(grid);
  if (dim < 1) throw ConfigError("ensemble needs d >= 1");
  if (M < 1) throw ConfigError("ensemble needs M >= 1");
  PathEnsemble ens;
  ens.grid = grid;
  ens.dim = dim;
  ens.paths = M;
  ens.seed = seed;
  ens.rng_scheme = kGaussianScheme;
  const int N = grid.steps();
  std::vector<double> sq(N);
  for (int k = 0; k < N; ++k) sq[k] = std::sqrt(grid.dt(k));
  ens.values.assign(M * ens.path_stride(), 0.0);
  parallel_for(M, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m) {
      std::mt19937_64 rng(stream_seed(seed, 0xB0, m));
      std::normal_distribution<double> normal;
      double* p = ens.values.data() + m * ens.path_stride();
      for (int k = 0; k < N; ++k)
        for (int i = 0; i < dim; ++i)
          p[(k + 1) * dim + i] = p[k * dim + i] + sq[k] * normal(rng);
    }
  });
  return ens;
}

PathEnsemble simulate_tree(const TimeGrid& grid) {
  validate(grid);
  if (!grid.is_uniform()) throw ConfigError("tree ensemble needs a uniform grid");
  const int N = grid.steps();
  if (N > 24) throw ConfigError("tree ensemble limited to N <= 24");
  PathEnsemble ens;
  ens.grid = grid;
  ens.dim = 1;
  ens.paths = std::size_t{1} << N;
  ens.rng_scheme = kTreeScheme;
  const double s = std::sqrt(grid.horizon() / N);
  ens.values.assign(ens.paths * ens.path_stride(), 0.0);
  for (std::size_t m = 0; m < ens.paths; ++m) {
    long net = 0;
    for (int k = 0; k < N; ++k) {
      net += ((m >> k) & 1U) ? 1 : -1;
      ens.values[m * ens.path_stride() + k + 1] = static_cast<double>(net) * s;
    }
  }
  return ens;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

std::string serialize(const PathEnsemble& ens) {
  std::string out;
  auto put = [&out](const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
  };
  const std::uint64_t header[4] = {ens.paths, static_cast<std::uint64_t>(ens.steps()),
                                   static_cast<std::uint64_t>(ens.dim), ens.seed};
  put(header, sizeof header);
  put(ens.grid.nodes.data(), ens.grid.nodes.size() * sizeof(double));
  put(ens.values.data(), ens.values.size() * sizeof(double));
  return out;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes.data(), bytes.size());
}

std::string ensemble_digest(const PathEnsemble& ens) {
  const auto bytes = serialize(ens);
  return sha256_hex(bytes.data(), bytes.size());
}

void export_ensemble(const PathEnsemble& ens, const std::string& path) {
  const auto bytes = serialize(ens);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json side = {
      {"format", "qbsde-ensemble-v1"},
      {"layout", "header u64[M,N,d,seed]; f64 nodes[N+1]; f64 body[M][N+1][d]"},
      {"M", ens.paths},
      {"N", ens.steps()},
      {"d", ens.dim},
      {"seed", ens.seed},
      {"T", ens.grid.horizon()},
      {"rng_scheme", ens.rng_scheme},
      {"sha256", sha256_hex(bytes.data(), bytes.size())},
  };
  std::ofstream js(path + ".json", std::ios::trunc);
  if (!js) throw Error("cannot write " + path + ".json");
  js << side.dump(2) << "\n";
}

PathEnsemble import_ensemble(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::uint64_t header[4];
  if (bytes.size() < sizeof header) throw Error("truncated ensemble file " + path);
  std::memcpy(header, bytes.data(), sizeof header);
  PathEnsemble ens;
  ens.paths = header[0];
  ens.dim = static_cast<int>(header[2]);
  ens.seed = header[3];
  const std::size_t nodes = header[1] + 1;
  const std::size_t body = ens.paths * nodes * header[2];
  if (bytes.size() != sizeof header + (nodes + body) * sizeof(double))
    throw Error("ensemble file size does not match its header: " + path);
  ens.grid.nodes.resize(nodes);
  std::memcpy(ens.grid.nodes.data(), bytes.data() + sizeof header, nodes * sizeof(double));
  ens.values.resize(body);
  std::memcpy(ens.values.data(), bytes.data() + sizeof header + nodes * sizeof(double),
              body * sizeof(double));
  std::ifstream js(path + ".json");
  if (js) {
    const auto side = nlohmann::json::parse(js);
    if (side.value("sha256", "") != sha256_hex(bytes.data(), bytes.size()))
      throw Error("ensemble digest mismatch for " + path);
    ens.rng_scheme = side.value("rng_scheme", "");
  }
  validate(ens.grid);
  return ens;
}

// ---------------------------------------------------------------------------
// Terminal conditions
// ---------------------------------------------------------------------------

double PathView::time(int k) const {
  if (k < 0 || k > last()) throw DomainError("path node out of range");
  return ens_->grid.nodes[k];
}

ConstVec PathView::at(int k) const {
  if (k < 0 || k > last()) throw DomainError("path node out of range");
  if (recorder_) recorder_->push_back(k);
  return ens_->state(path_, k);
}

namespace {

double project(const std::vector<double>& v, ConstVec b) {
  if (v.size() > b.size()) throw ConfigError("terminal direction longer than the path dimension");
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * b[i];
  return s;
}

std::string describe_vec(const std::vector<double>& v) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << ")";
  return os.str();
}

}  // namespace

TerminalSpec terminal_linear(std::vector<double> v) {
  if (v.empty()) throw ConfigError("linear terminal needs a direction");
  TerminalSpec t;
  t.kind = "linear";
  t.v = v;
  t.description = "v.B_T with v=" + describe_vec(v);
  t.functional = [v](const PathView& p) { return project(v, p.terminal()); };
  return t;
}

TerminalSpec terminal_abs(std::vector<double> v) {
  if (v.empty()) throw ConfigError("abs terminal needs a direction");
  TerminalSpec t;
  t.kind = "abs";
  t.v = v;
  t.description = "|v.B_T| with v=" + describe_vec(v);
  t.functional = [v](const PathView& p) { return std::abs(project(v, p.terminal())); };
  return t;
}

double critical_quantile(double gamma, double z) {
  // -ln P(N > z), stable in both tails.
  double neg_log_tail;
  const double tail = 0.5 * std::erfc(z / std::sqrt(2.0));
  if (tail > 0.0) {
    neg_log_tail = -std::log(tail);
  } else {
    neg_log_tail = 0.5 * z * z + std::log(z * std::sqrt(2.0 * M_PI));
  }
  if (neg_log_tail <= 0.0) return 0.0;
  // gamma x + 2 ln(1 + x) = L is increasing and concave in x.
  const double L = neg_log_tail;
  boost::uintmax_t iters = 100;
  return boost::math::tools::newton_raphson_iterate(
      [gamma, L](double x) {
        return std::make_tuple(gamma * x + 2.0 * std::log1p(x) - L, gamma + 2.0 / (1.0 + x));
      },
      0.0, 0.0, L / gamma, std::numeric_limits<double>::digits - 2, iters);
}

TerminalSpec terminal_critical(double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("critical terminal needs gamma > 0");
  TerminalSpec t;
  t.kind = "critical";
  t.param = gamma;
  t.moment_order = gamma;
  t.description = "critical(" + std::to_string(gamma) +
                  "): survival e^{-gamma x}/(1+x)^2 by quantile transform of B_T^1";
  t.functional = [gamma](const PathView& p) {
    return critical_quantile(gamma, p.terminal()[0] / std::sqrt(p.horizon()));
  };
  return t;
}

TerminalSpec terminal_constant(double c) {
  TerminalSpec t;
  t.kind = "constant";
  t.param = c;
  t.description = "constant " + std::to_string(c);
  t.functional = [c](const PathView&) { return c; };
  return t;
}

TerminalSpec terminal_shifted(const TerminalSpec& base, double delta) {
  TerminalSpec t = base;
  t.kind = "shifted";
  t.param = delta;
  t.description = base.description + " + " + std::to_string(delta);
  auto f = base.functional;
  t.functional = [f, delta](const PathView& p) { return f(p) + delta; };
  return t;
}

TerminalSpec terminal_negated(const TerminalSpec& base) {
  TerminalSpec t = base;
  t.kind = "negated";
  t.description = "-(" + base.description + ")";
  auto f = base.functional;
  t.functional = [f](const PathView& p) { return -f(p); };
  // Upper tail of -xi is the lower tail of xi; the builders here only have
  // heavy upper tails, and those become bounded above.
  t.moment_order = base.kind == "critical" ? std::numeric_limits<double>::infinity()
                                           : base.moment_order;
  return t;
}

std::vector<double> evaluate_terminal(const TerminalSpec& term, const PathEnsemble& ens,
                                      int threads) {
  if (!term.functional) throw ConfigError("terminal without functional");
  std::vector<double> xi(ens.paths);
  parallel_for(ens.paths, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m) {
      xi[m] = term.functional(PathView(ens, m));
      if (!std::isfinite(xi[m]))
        throw EvaluationFault("terminal value not finite on path " + std::to_string(m));
    }
  });
  return xi;
}

// ---------------------------------------------------------------------------
// Controls
// ---------------------------------------------------------------------------

namespace {

constexpr double kLogWeightCap = 700.0;

void accumulate_weights(ControlProcess& c, const PathEnsemble& ens, int threads) {
  const int N = c.steps, d = c.dim;
  c.log_weights.assign(c.paths * (N + 1), 0.0);
  c.shift.assign(c.paths * (N + 1) * d, 0.0);
  c.overflow.assign(c.paths, 0);
  parallel_for(c.paths, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m) {
      double lw = 0.0;
      for (int k = 0; k < N; ++k) {
        const ConstVec q = c.q_at(m, k);
        const double dt = ens.grid.dt(k);
        double qdb = 0.0;
        for (int i = 0; i < d; ++i) {
          qdb += q[i] * ens.increment(m, k, i);
          c.shift[(m * (N + 1) + k + 1) * d + i] = c.shift[(m * (N + 1) + k) * d + i] + q[i] * dt;
        }
        lw += qdb - 0.5 * norm_sq(q) * dt;
        c.log_weights[m * (N + 1) + k + 1] = lw;
        if (!std::isfinite(lw) || lw > kLogWeightCap) c.overflow[m] = 1;
      }
    }
  });
  c.overflow_count = static_cast<std::size_t>(
      std::count(c.overflow.begin(), c.overflow.end(), static_cast<unsigned char>(1)));
}

}  // namespace

std::vector<double> ControlProcess::terminal_weights() const {
  std::vector<double> w(paths, 0.0);
  for (std::size_t m = 0; m < paths; ++m)
    if (!overflow[m]) w[m] = weight(m, steps);
  return w;
}

ControlProcess doleans(const std::string& id, const ControlMap& q, const PathEnsemble& ens,
                       int threads) {
  const int N = ens.steps(), d = ens.dim;
  std::vector<double> values(ens.paths * N * d);
  parallel_for(ens.paths, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m)
      for (int k = 0; k < N; ++k) {
        MutVec out(values.data() + (m * N + k) * d, static_cast<std::size_t>(d));
        q(k, ens.grid.nodes[k], ens.state(m, k), out);
        for (double v : out)
          if (!std::isfinite(v))
            throw EvaluationFault("control " + id + " not finite on path " + std::to_string(m));
      }
  });
  auto c = doleans_from_values(id, std::move(values), ens, threads);
  c.markov = q;
  return c;
}

ControlProcess doleans_from_values(const std::string& id, std::vector<double> q,
                                   const PathEnsemble& ens, int threads) {
  ControlProcess c;
  c.id = id;
  c.paths = ens.paths;
  c.steps = ens.steps();
  c.dim = ens.dim;
  if (q.size() != c.paths * c.steps * c.dim)
    throw ConfigError("control values do not match the ensemble shape");
  c.q = std::move(q);
  accumulate_weights(c, ens, threads);
  return c;
}

ControlMap constant_control(std::vector<double> c) {
  return [c](int, double, ConstVec, MutVec q) {
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = i < c.size() ? c[i] : 0.0;
  };
}

namespace {

double effective_sample_size(ConstVec w) {
  std::vector<double> sq(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) sq[i] = w[i] * w[i];
  const double s = pairwise_sum(w), s2 = pairwise_sum(sq);
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

}  // namespace

EntropyEstimate relative_entropy(const ControlProcess& ctrl, const PathEnsemble& ens,
                                 double min_ess_fraction) {
  std::vector<double> primal, dual, w;
  primal.reserve(ctrl.paths);
  dual.reserve(ctrl.paths);
  w.reserve(ctrl.paths);
  for (std::size_t m = 0; m < ctrl.paths; ++m) {
    if (ctrl.overflow[m]) continue;
    const double lw = ctrl.log_weight(m, ctrl.steps);
    const double mt = std::exp(lw);
    std::vector<double> energy(ctrl.steps);
    for (int k = 0; k < ctrl.steps; ++k) energy[k] = 0.5 * norm_sq(ctrl.q_at(m, k)) * ens.grid.dt(k);
    w.push_back(mt);
    primal.push_back(mt * lw);
    dual.push_back(mt * pairwise_sum(energy));
  }
  EntropyEstimate e;
  e.excluded = ctrl.overflow_count;
  e.ess = effective_sample_size(w);
  if (e.ess < min_ess_fraction * static_cast<double>(ctrl.paths))
    throw DegenerateWeights("effective sample size " + std::to_string(e.ess) + " of " +
                            std::to_string(ctrl.paths) + " paths");
  e.primal = mean_estimate(primal);
  e.dual = mean_estimate(dual);
  return e;
}

Estimate reweighted_mean(const ControlProcess& ctrl, ConstVec values) {
  std::vector<double> v;
  v.reserve(ctrl.paths);
  for (std::size_t m = 0; m < ctrl.paths; ++m)
    if (!ctrl.overflow[m]) v.push_back(ctrl.weight(m, ctrl.steps) * values[m]);
  return mean_estimate(v);
}

// ---------------------------------------------------------------------------
// Moment and class (D) diagnostics
// ---------------------------------------------------------------------------

namespace {

// Mean of exp(a_i) in log space, its standard error and the top-1% share.
ExpMoment log_mean_exp(ConstVec a, double dominance_threshold) {
  ExpMoment r;
  r.samples = a.size();
  if (a.empty()) return r;
  const double mx = *std::max_element(a.begin(), a.end());
  if (mx == -std::numeric_limits<double>::infinity()) {
    r.estimate = 0.0;
    r.log_estimate = mx;
    return r;
  }
  std::vector<double> e(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) e[i] = std::exp(a[i] - mx);
  const Estimate scaled = mean_estimate(e);
  r.log_estimate = mx + std::log(scaled.mean);
  r.estimate = std::exp(r.log_estimate);
  r.std_error = std::exp(mx + std::log(scaled.std_error));
  std::vector<double> sorted = e;
  const std::size_t top = std::max<std::size_t>(1, (a.size() + 99) / 100);
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top - 1),
                   sorted.end(), std::greater<>());
  std::sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), std::greater<>());
  const double total = pairwise_sum(e);
  r.top1_mass = pairwise_sum(ConstVec(sorted.data(), top)) / total;
  r.heavy = r.top1_mass > dominance_threshold;
  return r;
}

}  // namespace

ExpMoment exp_moment(double p, ConstVec samples, double dominance_threshold) {
  if (!(p > 0.0)) throw DomainError("exp_moment needs p > 0");
  std::vector<double> a(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) a[i] = p * samples[i];
  return log_mean_exp(a, dominance_threshold);
}

ClassDReport class_D_diagnostic(const MajorantFamily& fam, ConstVec process, std::size_t paths,
                                const TimeGrid& grid, const std::vector<double>& levels,
                                double budget) {
  const int N = grid.steps();
  if (process.size() != paths * static_cast<std::size_t>(N + 1))
    throw ConfigError("class (D) diagnostic: process shape mismatch");
  ClassDReport out;
  CheckReport& rep = out.report;
  rep.check = "classD";
  rep.note = "surrogate: finite stopping family (grid times and level-hitting times)";
  rep.params["budget"] = budget;
  out.sup_estimate = -1.0;

  auto evaluate = [&](const std::string& label, const std::function<int(std::size_t)>& tau) {
    std::vector<double> logk(paths);
    for (std::size_t m = 0; m < paths; ++m) {
      const double x = process[m * (N + 1) + tau(m)];
      logk[m] = fam.log_K(std::max(0.0, x));
    }
    const ExpMoment em = log_mean_exp(logk, 0.5);
    ++rep.samples_used;
    if (em.estimate > out.sup_estimate) {
      out.sup_estimate = em.estimate;
      out.std_error = em.std_error;
      out.argsup = label;
      out.top1_mass = em.top1_mass;
      out.heavy = em.heavy;
    }
  };
  for (int k = 0; k <= N; ++k)
    evaluate("t=" + std::to_string(grid.nodes[k]), [k](std::size_t) { return k; });
  for (double c : levels) {
    evaluate("hit(" + std::to_string(c) + ")", [&, c](std::size_t m) {
      for (int k = 0; k <= N; ++k)
        if (process[m * (N + 1) + k] >= c) return k;
      return N;
    });
  }
  Witness w;
  w.kind = "classD_sup";
  w.lhs = out.sup_estimate;
  w.rhs = budget;
  rep.max_excess = out.sup_estimate - budget;
  rep.passed = std::isfinite(out.sup_estimate) && out.sup_estimate <= budget;
  rep.witnesses.push_back(w);
  return out;
}

}  // namespace qbsde
