#pragma once

// Independent reference computations used only by the tests. None of them
// calls into the library's numerics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

using Gen1 = std::function<double(double t, double b, double z)>;

// Exhaustive backward induction over every path of the Rademacher tree with
// B_{t_k} = j sqrt(dt). Z is read off the two children, clipped at `radius`.
class TreeInduction {
 public:
  TreeInduction(Gen1 g, std::function<double(double)> xi, double T, int N, double radius)
      : g_(std::move(g)), xi_(std::move(xi)), N_(N), dt_(T / N), s_(std::sqrt(T / N)),
        radius_(radius) {}

  double y0() const { return value(0, 0); }

  // Y at node (k, j) by recursion through both children, no memoization.
  double value(int k, long j) const {
    if (k == N_) return xi_(static_cast<double>(j) * s_);
    const double up = value(k + 1, j + 1), dn = value(k + 1, j - 1);
    double z = -(up - dn) * s_ / (2.0 * dt_);
    z = std::clamp(z, -radius_, radius_);
    return 0.5 * (up + dn) - g_(k * dt_, static_cast<double>(j) * s_, z) * dt_;
  }

 private:
  Gen1 g_;
  std::function<double(double)> xi_;
  int N_;
  double dt_, s_, radius_;
};

// sup_z (q z - f(z)) on [-L, L]: uniform grid, then golden-section refinement
// around the best grid point.
inline double grid_conjugate(const std::function<double(double)>& f, double q, double L,
                             int n = 200000) {
  double best = -INFINITY;
  int arg = 0;
  const double h = 2.0 * L / n;
  for (int i = 0; i <= n; ++i) {
    const double z = -L + h * i;
    const double v = q * z - f(z);
    if (v > best) {
      best = v;
      arg = i;
    }
  }
  double a = -L + h * std::max(arg - 1, 0), b = -L + h * std::min(arg + 1, n);
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double c = b - r * (b - a), d = a + r * (b - a);
    if (q * c - f(c) > q * d - f(d))
      b = d;
    else
      a = c;
  }
  const double m = 0.5 * (a + b);
  return std::max(best, q * m - f(m));
}

// E[exp(lambda |X|)], X ~ N(0, sigma^2), by composite Simpson on [0, 12 sigma + 2 lambda sigma^2].
inline double folded_normal_mgf(double lambda, double sigma, int n = 200000) {
  const double hi = 12.0 * sigma + 2.0 * lambda * sigma * sigma;
  const double h = hi / n;
  auto f = [&](double x) {
    return 2.0 / (sigma * std::sqrt(2.0 * M_PI)) * std::exp(lambda * x - 0.5 * x * x / (sigma * sigma));
  };
  double s = f(0.0) + f(hi);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(h * i);
  return s * h / 3.0;
}

// Y_0 = -(1/gamma) ln E[exp(-gamma xi)] for g = (gamma/2) z^2 and
// xi = v B_T: a Gaussian moment, so Y_0 = -gamma v^2 T / 2.
inline double cole_hopf_linear(double gamma, double v, double T) { return -0.5 * gamma * v * v * T; }

// Lambda(x) = x ln x - Phi(x) for k(u) = 1 + u, gamma = 1. Here
// Psi(x) = x e^x - x - x^2/2 in closed form and Phi(y) = sup_x (x y - Psi(x)),
// the maximizer found by bisection on Psi'(x) = (1 + x)(e^x - 1) = y.
inline double lambda_k_one_plus_x(double y) {
  auto dpsi = [](double x) { return (1.0 + x) * std::expm1(x); };
  double lo = 0.0, hi = 1.0;
  while (dpsi(hi) < y) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (dpsi(mid) < y ? lo : hi) = mid;
  }
  const double x = 0.5 * (lo + hi);
  const double phi = x * y - (x * std::exp(x) - x - 0.5 * x * x);
  return y * std::log(y) - phi;
}

}  // namespace oracle
