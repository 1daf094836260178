#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace qbsde {

using ConstVec = std::span<const double>;
using MutVec = std::span<double>;

inline double dot(ConstVec a, ConstVec b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm_sq(ConstVec a) { return dot(a, a); }
inline double norm(ConstVec a) { return std::sqrt(norm_sq(a)); }

/// Pairwise (cascade) summation. The result depends only on the input order,
/// never on how the values were produced, which keeps every estimator
/// reproducible across worker counts.
double pairwise_sum(ConstVec values);

struct Estimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// Sample mean with standard error sd / sqrt(n).
Estimate mean_estimate(ConstVec values);

/// Runs fn(begin, end) over [0, n) split into contiguous chunks across
/// `threads` workers. Callers must only write to disjoint per-index slots.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t, std::size_t)>& fn);

/// SplitMix64 finalizer, used to derive independent per-path seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t index) {
  return mix64(mix64(seed ^ mix64(stream)) + index);
}

/// Standard normal cdf.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace qbsde
