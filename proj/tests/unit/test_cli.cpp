#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "qbsde/cli.hpp"
#include "qbsde/errors.hpp"

using namespace qbsde;
using namespace qbsde::cli;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("qbsde_cli_" + std::to_string(::getpid()) + "_" +
                                         std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

json small_config(const fs::path& out) {
  return json{{"generator", {{"fixture", "pure_quadratic"}, {"param", 1.0}}},
              {"terminal", {{"kind", "linear"}}},
              {"grid", {{"T", 1.0}, {"N", 10}}},
              {"ensemble", {{"M", 4000}, {"seed", 3}}},
              {"suites", {"solve"}},
              {"outputs", {{"dir", out.string()}}}};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

int run_binary(const std::string& args) {
  const int rc = std::system((std::string(QBSDE_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, ValidationErrorsBeforeCompute) {
  TempDir d;
  auto c = small_config(d.path());
  c["grid"]["N"] = 0;
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c["ensemble"]["M"] = 0;
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c["generator"] = {{"fixture", "nope"}};
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c["tolerances"] = {{"gap", -1.0}};
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c["suites"] = {"solve", "plot"};
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c["grid"]["dt"] = 0.1;
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c.erase("generator");
  EXPECT_THROW(parse_config(c), ConfigError);
  c = small_config(d.path());
  c["ensemble"]["kind"] = "tree";
  EXPECT_THROW(parse_config(c), ConfigError);
  EXPECT_TRUE(fs::is_empty(d.path()));
}

TEST(Config, InlineGeneratorAndDefaults) {
  TempDir d;
  auto c = small_config(d.path());
  c["generator"] = {{"g1", {{"family", "pure_quadratic"}, {"gamma", 2.0}}}, {"g2", "zero"}, {"gamma", 2.0}};
  const auto cfg = parse_config(c);
  EXPECT_DOUBLE_EQ(cfg.generator.gamma, 2.0);
  EXPECT_EQ(cfg.scheme.degree, 4);
  EXPECT_EQ(cfg.raw.at("scheme").at("truncation_radius"), nullptr);
}

TEST(Config, HashIgnoresSeedThreadsAndOutputDir) {
  TempDir d;
  auto a = small_config(d.path());
  auto b = a;
  b["ensemble"]["seed"] = 99;
  b["scheme"] = {{"threads", 4}};
  b["outputs"]["dir"] = "/elsewhere";
  EXPECT_EQ(config_hash(parse_config(a).raw), config_hash(parse_config(b).raw));
  b["grid"]["N"] = 11;
  EXPECT_NE(config_hash(parse_config(a).raw), config_hash(parse_config(b).raw));
}

TEST(Run, SolveWritesArtifacts) {
  TempDir d;
  const auto r = run(small_config(d.path()));
  EXPECT_EQ(r.status, kPassed);
  const fs::path dir = r.run_dir;
  for (const char* f : {"report.json", "summary.csv", "manifest.json", "solution.bin", "solution.bin.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_FALSE(fs::exists(dir / "run.lock"));
  EXPECT_NE(dir.filename().string().find("-3"), std::string::npos);

  const auto manifest = read_json(dir / "manifest.json");
  EXPECT_EQ(manifest.at("seed"), 3);
  EXPECT_EQ(manifest.at("config").at("grid").at("N"), 10);
  EXPECT_TRUE(manifest.at("versions").contains("compiler"));
  const auto report = read_json(dir / "report.json");
  EXPECT_EQ(report.at("config"), manifest.at("config"));

  std::ifstream csv(dir / "summary.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "suite,metric,value");
  EXPECT_NEAR(r.summary.at("solve.y0"), -0.5, 0.06);
}

TEST(Run, CheckSuiteForExampleII) {
  TempDir d;
  auto c = small_config(d.path());
  c["generator"] = {{"fixture", "example_ii"}};
  c["suites"] = {"check"};
  const auto r = run(c);
  const auto& s = r.report.at("suites").at("check");
  EXPECT_TRUE(s.at("A1").at("passed"));
  EXPECT_TRUE(s.at("A2").at("passed"));
  EXPECT_TRUE(s.at("B").at("passed"));
  EXPECT_FALSE(s.contains("A3_candidate"));
  EXPECT_EQ(r.status, kPassed);
}

TEST(Run, LockfileBlocksConcurrentRun) {
  TempDir d;
  const auto c = small_config(d.path());
  const auto first = run(c);
  std::ofstream(fs::path(first.run_dir) / "run.lock") << "busy";
  EXPECT_THROW(run(c), Error);
  fs::remove(fs::path(first.run_dir) / "run.lock");
  EXPECT_NO_THROW(run(c));
}

TEST(Reproduce, IdenticalAcrossWorkersAndDriftOnSeedEdit) {
  TempDir d;
  const auto first = run(small_config(d.path()));
  const auto manifest = fs::path(first.run_dir) / "manifest.json";
  for (int th : {1, 2, 8}) {
    RunOptions opt;
    opt.threads = th;
    opt.out_dir = (d.path() / ("re" + std::to_string(th))).string();
    const auto r = reproduce(manifest.string(), opt);
    EXPECT_EQ(r.status, kPassed) << th << (r.diffs.empty() ? "" : r.diffs.front());
  }
  auto m = read_json(manifest);
  m["seed"] = 4;
  const auto altered = d.path() / "altered.json";
  std::ofstream(altered) << m.dump();
  const auto r = reproduce(altered.string());
  EXPECT_EQ(r.status, kDrift);
  EXPECT_FALSE(r.diffs.empty());
}

TEST(Binary, ExitStatuses) {
  TempDir d;
  const auto cfg = d.path() / "cfg.json";
  std::ofstream(cfg) << small_config(d.path() / "runs").dump();
  EXPECT_EQ(run_binary("solve --config " + cfg.string()), kPassed);

  auto bad = small_config(d.path() / "runs");
  bad["grid"]["N"] = 0;
  const auto bad_path = d.path() / "bad.json";
  std::ofstream(bad_path) << bad.dump();
  EXPECT_EQ(run_binary("solve --config " + bad_path.string()), kInvalid);

  auto strict = small_config(d.path() / "runs");
  strict["tolerances"] = {{"y0_reference", 3.0}};
  const auto strict_path = d.path() / "strict.json";
  std::ofstream(strict_path) << strict.dump();
  EXPECT_EQ(run_binary("solve --config " + strict_path.string()), kSuiteFailed);

  std::string manifest;
  for (const auto& e : fs::recursive_directory_iterator(d.path() / "runs"))
    if (e.path().filename() == "manifest.json" && manifest.empty()) manifest = e.path().string();
  ASSERT_FALSE(manifest.empty());
  EXPECT_EQ(run_binary("reproduce " + manifest + " --threads 2"), kPassed);
}
