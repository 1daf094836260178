#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "qbsde/cli.hpp"
#include "qbsde/errors.hpp"

namespace {

qbsde::cli::json load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw qbsde::ConfigError("cannot open config " + path);
  try {
    return qbsde::cli::json::parse(in);
  } catch (const qbsde::cli::json::exception& e) {
    throw qbsde::ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace qbsde::cli;
  CLI::App app{"qbsde: experiments on one-dimensional quadratic BSDEs"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir;
  std::uint64_t seed = 0;
  int threads = 1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--out", out_dir, "output root (overrides outputs.dir)");
    sub->add_option("--seed", seed, "ensemble seed override");
    sub->add_option("--threads", threads, "worker count")->check(CLI::PositiveNumber);
  };

  std::vector<std::pair<std::string, CLI::App*>> suites;
  for (const auto& name : kSuites) {
    auto* sub = app.add_subcommand(name, "run the " + name + " suite");
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    common(sub);
    suites.emplace_back(name, sub);
  }
  auto* all = app.add_subcommand("run", "run the suites selected in the config");
  all->add_option("--config", config_path, "experiment config (JSON)")->required();
  common(all);
  auto* rep = app.add_subcommand("reproduce", "re-run a manifest and check for drift");
  rep->add_option("manifest", manifest_path, "manifest.json of a prior run")->required();
  common(rep);

  CLI11_PARSE(app, argc, argv);

  RunOptions opt;
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--out")) opt.out_dir = out_dir;
    if (sub->count("--seed")) opt.seed = seed;
    if (sub->count("--threads")) opt.threads = threads;
  }

  try {
    if (rep->parsed()) {
      if (opt.seed) std::cerr << "note: --seed is ignored by reproduce\n";
      const auto r = reproduce(manifest_path, opt);
      std::cout << "re-run: " << r.rerun.run_dir << "\n";
      for (const auto& d : r.diffs) std::cout << "drift: " << d << "\n";
      std::cout << (r.status == kPassed ? "identical" : "DRIFT") << "\n";
      return r.status;
    }
    for (const auto& [name, sub] : suites)
      if (sub->parsed()) opt.suites = {name};
    const auto r = run(load(config_path), opt);
    std::cout << "run directory: " << r.run_dir << "\n";
    for (auto it = r.report.at("suites").begin(); it != r.report.at("suites").end(); ++it) {
      std::cout << it.key() << ": " << (it.value().at("passed").get<bool>() ? "pass" : "FAIL");
      if (it.value().contains("error")) std::cout << " (" << it.value().at("error").get<std::string>() << ")";
      std::cout << "\n";
    }
    return r.status;
  } catch (const qbsde::ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  }
}
