#pragma once

// Internal: accumulates probed inequality instances into a CheckReport.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "qbsde/generators.hpp"

namespace qbsde::detail {

inline bool lower_bound_kind(const std::string& kind) {
  return kind == "strict" || kind == "bregman" || kind == "conjugate_lower";
}

inline double violation_amount(const Witness& w) {
  return lower_bound_kind(w.kind) ? w.rhs - w.lhs : w.lhs - w.rhs;
}

inline bool violates(const Witness& w) {
  const double tol = 1e-12 * std::max({1.0, std::abs(w.lhs), std::abs(w.rhs)});
  return violation_amount(w) > tol;
}

class ReportBuilder {
 public:
  explicit ReportBuilder(std::string check) { report_.check = std::move(check); }

  void record(Witness w) {
    ++report_.samples_used;
    if (w.kind.rfind("modulus", 0) != 0)
      report_.sampling_radius = std::max({report_.sampling_radius, norm(w.z), norm(w.z2)});
    const double excess = violation_amount(w);
    if (violates(w)) {
      report_.passed = false;
      if (report_.witnesses.size() < kMaxWitnesses) {
        report_.witnesses.push_back(std::move(w));
      } else {
        auto it = std::min_element(report_.witnesses.begin(), report_.witnesses.end(),
                                   [](const Witness& a, const Witness& b) {
                                     return violation_amount(a) < violation_amount(b);
                                   });
        if (violation_amount(*it) < excess) *it = std::move(w);
      }
    } else if (excess > report_.max_excess || !tightest_) {
      tightest_ = w;
    }
    report_.max_excess = std::max(report_.max_excess, excess);
  }

  void ratio(double lhs, double rhs) {
    if (rhs > 0.0) {
      const double r = lhs / rhs;
      if (std::isnan(report_.max_ratio) || r > report_.max_ratio) report_.max_ratio = r;
    }
  }

  CheckReport finish() {
    if (report_.passed) {
      if (tightest_) report_.witnesses.push_back(*tightest_);
    } else {
      std::sort(report_.witnesses.begin(), report_.witnesses.end(),
                [](const Witness& a, const Witness& b) {
                  return violation_amount(a) > violation_amount(b);
                });
    }
    return std::move(report_);
  }

  CheckReport& report() { return report_; }

 private:
  static constexpr std::size_t kMaxWitnesses = 16;
  CheckReport report_;
  std::optional<Witness> tightest_;
};

}  // namespace qbsde::detail
