#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qbsde/errors.hpp"
#include "qbsde/generators.hpp"

using namespace qbsde;

namespace {

// Linear interpolation of r^2 between consecutive integers, written out directly.
double interp_square(double r) {
  const double hi = std::ceil(r), lo = hi - 1.0;
  if (r == 0.0) return 0.0;
  return lo * lo + (r - lo) * (hi * hi - lo * lo);
}

GeneratorSpec plain(ConvexPartPtr g1, double gamma = 1.0) {
  GeneratorSpec g;
  g.name = "test";
  g.g1 = std::move(g1);
  g.g2_zero = true;
  g.g2 = [](double, ConstVec, ConstVec) { return 0.0; };
  g.modulus = [](double) { return 0.0; };
  g.alpha = [](double, ConstVec) { return 0.0; };
  g.gamma = gamma;
  return g;
}

double eval1(const GeneratorSpec& g, double z, double t = 0.3, double b = 0.0) {
  const double zz[1] = {z}, bb[1] = {b};
  return g.value(t, ConstVec(bb, 1), ConstVec(zz, 1));
}

}  // namespace

TEST(Gtilde, MatchesInterpolationAndSandwich) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 20.0);
  for (int i = 0; i < 10000; ++i) {
    const double r = u(rng);
    const double v = gtilde(r);
    EXPECT_NEAR(v, interp_square(r), 1e-9 * (1.0 + r * r));
    EXPECT_LE(r * r, v);
    EXPECT_LE(v, 1.0 + r * r);
  }
  EXPECT_DOUBLE_EQ(gtilde(0.5), 0.5);
  EXPECT_DOUBLE_EQ(gtilde(2.0), 4.0);
}

TEST(Gtilde, ConjugateIsMaxOverIntegers) {
  for (double s : {-1.0, 0.0, 0.7, 2.5, 6.1}) {
    double best = 0.0;
    for (int k = 1; k < 100; ++k) best = std::max(best, k * s - static_cast<double>(k) * k);
    EXPECT_NEAR(gtilde_conjugate(s), best, 1e-12);
  }
}

TEST(Fixture, GtildeValueAtHalf) {
  const auto f = fixture("gtilde");
  const double v = eval1(f.generator, 0.5);
  EXPECT_NEAR(v, 0.5, 1e-14);
  EXPECT_LE(0.25, v);
  EXPECT_LE(v, 1.25);
}

TEST(Fixture, ExampleIIIConstants) {
  const auto f = fixture("example_iii");
  const auto& g = f.generator;
  EXPECT_DOUBLE_EQ(g.gamma, 1.0);
  ASSERT_TRUE(g.strong_convexity);
  EXPECT_DOUBLE_EQ(g.strong_convexity->epsilon, 1.0);
  EXPECT_DOUBLE_EQ(g.strong_convexity->c, 0.0);
  EXPECT_DOUBLE_EQ(g.modulus_bounds.a, 1.0);
  EXPECT_DOUBLE_EQ(g.modulus_bounds.b, 1.0);
  EXPECT_DOUBLE_EQ(g.modulus_bounds.theta, 1.0);
  for (double z : {-3.0, -0.4, 0.0, 0.2, 0.9, 1.5}) {
    const double r = std::abs(z);
    const double expect = 0.5 * z * z + (r <= 1.0 ? std::cbrt(r * r) : r);
    EXPECT_NEAR(eval1(g, z), expect, 1e-14);
  }
}

TEST(Fixture, PureQuadraticHasNoPerturbation) {
  const auto g = fixture("pure_quadratic", 1.0).generator;
  EXPECT_TRUE(g.g2_zero);
  EXPECT_NEAR(eval1(g, 3.0), 4.5, 1e-14);
}

TEST(Fixture, UnknownNameRejected) { EXPECT_THROW(fixture("example_v"), ConfigError); }

TEST(Validate, RejectsNonPositiveGamma) {
  auto g = plain(pure_quadratic_part(1.0), 0.0);
  EXPECT_THROW(validate(g), ConfigError);
}

TEST(QuadraticGrowth, MisdeclaredGammaRefutedWithReproducibleWitness) {
  const auto g = plain(pure_quadratic_part(1.0), 0.5);
  const auto rep = check_quadratic_growth(g, Probe{});
  ASSERT_FALSE(rep.passed);
  ASSERT_FALSE(rep.witnesses.empty());
  for (const auto& w : rep.witnesses) {
    const auto [lhs, rhs] = reevaluate(g, rep, w);
    EXPECT_NEAR(lhs, w.lhs, 1e-12 * std::max(1.0, std::abs(w.lhs)));
    EXPECT_NEAR(rhs, w.rhs, 1e-12 * std::max(1.0, std::abs(w.rhs)));
    EXPECT_GT(w.lhs, w.rhs);
  }
}

TEST(QuadraticGrowth, EnlargingProbeNeverUnfails) {
  const auto g = plain(pure_quadratic_part(1.0), 0.9);
  Probe small;
  small.radius = 4.0;
  small.samples = 200;
  const auto a = check_quadratic_growth(g, small);
  ASSERT_FALSE(a.passed);
  for (double R : {4.0, 8.0, 40.0})
    for (std::size_t n : {200u, 1000u, 5000u}) {
      Probe p = small;
      p.radius = R;
      p.samples = n;
      EXPECT_FALSE(check_quadratic_growth(g, p).passed) << R << " " << n;
    }
}

TEST(QuadraticGrowth, OffsetRaisesAlpha) {
  const auto base = fixture("example_iii").generator;
  const auto shifted = with_offset(base, -0.25);
  EXPECT_TRUE(check_quadratic_growth(shifted, Probe{}).passed);
  EXPECT_NEAR(eval1(shifted, 0.7), eval1(base, 0.7) - 0.25, 1e-14);
}

TEST(StrictlyQuadratic, GtildeWithGammaBarTwo) {
  auto g = plain(gtilde_part(), 2.0);
  g.gamma_bar = 2.0;
  EXPECT_TRUE(check_strictly_quadratic(g, Probe{}).passed);
}

TEST(StrictlyQuadratic, ZeroGeneratorFails) {
  auto g = plain(zero_part());
  g.gamma_bar = 1.0;
  EXPECT_FALSE(check_strictly_quadratic(g, Probe{}).passed);
}

TEST(StrictlyQuadratic, RequiresGammaBar) {
  EXPECT_THROW(check_strictly_quadratic(plain(zero_part()), Probe{}), ConfigError);
}

TEST(StrictlyQuadratic, ExampleIIPasses) {
  const auto g = fixture("example_ii").generator;
  ASSERT_TRUE(g.gamma_bar);
  EXPECT_TRUE(check_strictly_quadratic(g, Probe{}).passed);
}

TEST(StrongConvexity, QuadraticBregmanIsExact) {
  const auto g = plain(pure_quadratic_part(1.0));
  const auto rep = check_strong_convexity(g, StrongConvexity{1.0, 0.0}, Probe{});
  EXPECT_TRUE(rep.passed);
  EXPECT_LE(rep.max_excess, 1e-9);
}

TEST(StrongConvexity, GtildeRefutedInsideFirstPiece) {
  const auto g = plain(gtilde_part(), 2.0);
  Probe p;
  p.extra = {{0.95, 0.05}};
  const auto rep = check_strong_convexity(g, StrongConvexity{1.0, 0.1}, p);
  ASSERT_FALSE(rep.passed);
  bool found = false;
  for (const auto& w : rep.witnesses)
    if (std::abs(w.z[0] - 0.95) < 1e-15 && std::abs(w.z2[0] - 0.05) < 1e-15) {
      found = true;
      EXPECT_NEAR(w.lhs, 0.0, 1e-14);
      EXPECT_NEAR(w.rhs, 0.305, 1e-14);
    }
  EXPECT_TRUE(found || rep.max_excess >= 0.305 - 1e-12);
}

TEST(UniformContinuity, FixturePerturbations) {
  for (const char* name : {"example_i", "example_ii", "example_iii"})
    EXPECT_TRUE(check_uniform_continuity(fixture(name).generator, Probe{}).passed) << name;
  EXPECT_TRUE(check_uniform_continuity(plain(zero_part()), Probe{}).passed);
}

TEST(ProbePoints, NestedUnderEnlargement) {
  Probe a;
  a.radius = 5.0;
  a.samples = 100;
  Probe b = a;
  b.radius = 10.0;
  b.samples = 400;
  const auto pa = probe_points(a, 1), pb = probe_points(b, 1);
  for (const auto& z : pa) {
    bool in = false;
    for (const auto& w : pb) in = in || w == z;
    EXPECT_TRUE(in);
  }
}
