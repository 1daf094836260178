#pragma once

// Config-driven experiment runner. One JSON document describes an
// experiment; every artifact of a run embeds the resolved config and seed.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbsde/generators.hpp"
#include "qbsde/solver.hpp"
#include "qbsde/stochastics.hpp"

namespace qbsde::cli {

using json = nlohmann::json;

inline const std::vector<std::string> kSuites = {"solve",      "conjugate", "check",  "duality",
                                                 "crosscheck", "compare",   "zmoment"};

struct Tolerances {
  double gap = 0.02;
  double sigmas = 4.0;
  double crosscheck = 0.03;
  double max_violation_fraction = 1e-3;
  double shift = 0.02;
  double clip_fraction = 0.1;
  std::optional<double> y0_reference;
  double y0_tolerance = 0.03;
  double min_ess_fraction = 1e-3;
};

struct ExperimentConfig {
  json raw;  ///< the resolved document (defaults filled in)
  GeneratorSpec generator;
  TerminalSpec terminal;
  TimeGrid grid;
  std::string ensemble_kind = "gaussian";  ///< gaussian | tree
  std::size_t paths = 0;
  int dim = 1;
  std::uint64_t seed = 0;
  Scheme scheme;
  std::vector<std::string> suites;
  Tolerances tolerances;
  std::string out_dir = "runs";
  bool write_solution = true;
};

/// Validates the whole document and resolves every name. Throws ConfigError
/// before any path is simulated.
ExperimentConfig parse_config(const json& doc);

GeneratorSpec generator_from_config(const json& node);
/// `dim` sizes the default direction of linear and abs terminals.
TerminalSpec terminal_from_config(const json& node, int dim = 1, double gamma = 1.0);

struct RunOptions {
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::vector<std::string> suites;  ///< replaces the config selection when non-empty
};

struct RunResult {
  int status = 0;  ///< 0 iff every selected suite passed
  std::string run_dir;
  json report;
  std::map<std::string, double> summary;
  std::string ensemble_digest;
};

/// Exit statuses.
constexpr int kPassed = 0;
constexpr int kSuiteFailed = 1;
constexpr int kInvalid = 2;
constexpr int kDrift = 3;

RunResult run(const json& config, const RunOptions& options = {});

struct ReproduceResult {
  int status = 0;
  std::vector<std::string> diffs;
  RunResult rerun;
};

/// Re-runs a manifest (optionally with another worker count) and compares
/// the ensemble digest exactly and the summary values to 1e-12.
ReproduceResult reproduce(const std::string& manifest_path, const RunOptions& options = {});

/// Hash of the resolved config without seed and worker count.
std::string config_hash(const json& resolved);

json to_json(const CheckReport& report);

}  // namespace qbsde::cli
