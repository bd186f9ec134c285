#include <gtest/gtest.h>

#include "svmqch/lattice.hpp"
#include "svmqch/sde.hpp"

using namespace svmqch;
using namespace svmqch::sde;

namespace {

DriftField linearDrift(double k, double diffusion) {
  DriftField d;
  d.dof = 1;
  d.diffusionCoeff = diffusion;
  d.forwardDrift = [k](std::span<const double> x, double, std::span<double> out) { out[0] = -k * x[0]; };
  d.backwardDrift = [k](std::span<const double> x, double, std::span<double> out) { out[0] = k * x[0]; };
  return d;
}

double gaussian(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2 * kPi * var);
}

std::vector<double> normalSamples(std::size_t n, double mean, double sd, std::uint64_t seed) {
  const CounterNormal g(seed);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = mean + sd * g(99, i, 0);
  return v;
}

double variance(const std::vector<double>& v) {
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= v.size();
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

}  // namespace

TEST(Wiener, DeterministicAndUnitVariance) {
  WienerStream a{42, 7, 0.01}, b{42, 7, 0.01};
  std::vector<double> x(3), y(3);
  a.increments(5, x);
  b.increments(5, y);
  EXPECT_EQ(x, y);
  double s = 0, s2 = 0;
  const int n = 200000;
  std::vector<double> one(1);
  for (int i = 0; i < n; ++i) {
    a.increments(i, one);
    s += one[0];
    s2 += one[0] * one[0];
  }
  EXPECT_NEAR(s / n, 0.0, 4 * std::sqrt(0.01 / n));
  EXPECT_NEAR(s2 / n, 0.01, 4 * 0.01 * std::sqrt(2.0 / n));
}

TEST(Integrate, BrownianVarianceScaling) {
  const double sigma2 = 0.7, dt = 0.01;
  const std::size_t steps = 100, paths = 10000;
  DriftField d;
  d.diffusionCoeff = sigma2;
  d.forwardDrift = [](std::span<const double>, double, std::span<double> out) { out[0] = 0; };
  const std::vector<double> init(paths, 0.3);
  const auto e = integrateForward(d, init, steps, {1, 0, dt}, {.recordStride = 100});
  const double expected = sigma2 * steps * dt;
  const double se = expected * std::sqrt(2.0 / (paths - 1));
  EXPECT_NEAR(variance(e.column(1)), expected, 3 * se);
}

TEST(Integrate, StationaryOscillatorStaysStationary) {
  // rho ~ exp(-M w x^2 / hbar); drift (hbar/2M) d ln rho = -w x.
  const double hbar = 1, M = 1, w = 1.0;
  const double D = hbar / M, var0 = hbar / (2 * M * w);
  const std::size_t paths = 100000, steps = 1000;
  const auto init = normalSamples(paths, 0.0, std::sqrt(var0), 3);
  const auto e = integrateForward(linearDrift(w, D), init, steps, {11, 0, 1e-3}, {.recordStride = 1000});
  const double v0 = variance(e.column(0)), v1 = variance(e.column(1));
  EXPECT_LT(std::abs(v1 - v0) / v0, 0.02);
}

TEST(Integrate, ZeroDiffusionMatchesDeterministicSolution) {
  const double k = 1.3, dt = 1e-3;
  const std::size_t steps = 1000;
  DriftField d = linearDrift(k, 0.0);
  const std::vector<double> init{1.0, -0.5};
  const auto e = integrateForward(d, init, steps, {5, 0, dt});
  double maxErr = 0;
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t f = 0; f < e.frameCount; ++f)
      maxErr = std::max(maxErr, std::abs(e.at(p, f) - init[p] * std::exp(-k * e.time(f))));
  // Euler global error bound for a contracting linear ODE: t k^2 |x0| dt e^{0} / 2.
  EXPECT_LT(maxErr, 0.5 * k * k * 1.0 * dt * 1.0 + 1e-12);
  EXPECT_GT(maxErr, 0.0);
}

TEST(Integrate, DeterministicRegardlessOfWorkerCount) {
  const auto init = normalSamples(257, 0.0, 1.0, 8);
  const auto d = linearDrift(0.8, 0.5);
  const auto a = integrateForward(d, init, 50, {77, 0, 0.01}, {.workers = 1});
  const auto b = integrateForward(d, init, 50, {77, 0, 0.01}, {.workers = 3});
  EXPECT_EQ(a.data, b.data);
}

TEST(Integrate, NonFiniteDriftReportsPathAndStep) {
  DriftField d;
  d.forwardDrift = [](std::span<const double> x, double, std::span<double> out) {
    out[0] = x[0] > 1.5 ? std::nan("") : 1.0;
  };
  const std::vector<double> init{-100.0, 1.0};
  try {
    integrateForward(d, init, 100, {1, 0, 0.1});
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& err) {
    const std::string msg = err.what();
    EXPECT_NE(msg.find("path 1, step"), std::string::npos) << msg;
  }
}

TEST(Integrate, ProjectedFieldNoiseStaysTransverse) {
  lattice::LatticeSpec s;
  s.dims = {3, 3, 3};
  s.spacing = 0.5;
  const auto P = lattice::buildProjector(s);
  DriftField d;
  d.dof = s.fieldSize();
  d.diffusionCoeff = 1.0 / s.cellVolume();  // hbar c^2 / dx^d
  d.forwardDrift = [](std::span<const double>, double, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
  IntegrationOptions opt;
  opt.noiseTransform = [&](std::span<double> dw) {
    const auto p = P.apply(dw);
    std::copy(p.begin(), p.end(), dw.begin());
  };
  const std::vector<double> init(s.fieldSize(), 0.0);
  const auto e = integrateForward(d, init, 20, {4, 0, 0.01}, opt);
  for (std::size_t f = 0; f < e.frameCount; ++f) {
    const auto st = e.state(0, f);
    const auto div = lattice::divergence(s, st);
    for (double v : div) ASSERT_LE(std::abs(v), 1e-10 * std::max<std::size_t>(1, f));
  }
}

TEST(MeanDerivative, DeterministicEnsembleGivesFiniteDifferenceVelocity) {
  const auto d = linearDrift(1.0, 0.0);
  const auto init = normalSamples(500, 0.0, 1.0, 2);
  const auto e = integrateForward(d, init, 10, {1, 0, 0.01});
  Binning bins{-3, 3, 60, 1, 0};
  const auto est = meanForwardDerivative(e, 4, bins);
  for (std::size_t i = 0; i < bins.bins; ++i) {
    if (est.counts[i] != 1) continue;
    for (std::size_t p = 0; p < e.pathCount; ++p) {
      if (bins.bin(e.at(p, 4)) != i) continue;
      EXPECT_DOUBLE_EQ(est.values[i], (e.at(p, 5) - e.at(p, 4)) / 0.01);
    }
  }
  EXPECT_THROW(meanForwardDerivative(e, 10, bins), DomainError);
}

TEST(MeanDerivative, BrownianIncrementsAverageToZero) {
  DriftField d;
  d.diffusionCoeff = 1.0;
  d.forwardDrift = [](std::span<const double>, double, std::span<double> out) { out[0] = 0; };
  const auto init = normalSamples(100000, 0.0, 1.0, 5);
  const auto e = integrateForward(d, init, 1, {9, 0, 0.01});
  const Binning bins{-2, 2, 20};
  const auto est = meanForwardDerivative(e, 0, bins);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < bins.bins; ++i) {
    if (!est.valid[i]) continue;
    ++checked;
    EXPECT_LE(std::abs(est.values[i]), 3 * est.standardErrors[i]) << "bin " << i;
  }
  EXPECT_EQ(checked, bins.bins);
}

namespace {

struct StationaryEnsemble {
  TrajectoryEnsemble ensemble;
  double w, D;
};

const StationaryEnsemble& stationaryEnsemble() {
  static const StationaryEnsemble s = [] {
    const double w = 1.0, D = 1.0;
    const auto init = normalSamples(100000, 0.0, std::sqrt(D / (2 * w)), 31);
    return StationaryEnsemble{integrateForward(linearDrift(w, D), init, 1000, {123, 0, 1e-3}, {.recordStride = 10}), w, D};
  }();
  return s;
}

}  // namespace

TEST(MeanDerivative, StationaryOscillatorRecoversDrift) {
  const auto& s = stationaryEnsemble();
  const Binning bins{-1.5, 1.5, 30};
  const auto est = meanDerivative(s.ensemble, DerivativeKind::Forward, 0, s.ensemble.frameCount - 3, bins, true);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < bins.bins; ++i) {
    if (!est.valid[i]) continue;
    const double x = est.centers[i], ref = -s.w * x;
    const double weight = gaussian(x, 0, s.D / (2 * s.w));
    num += weight * std::pow(est.values[i] - ref, 2);
    den += weight * ref * ref;
  }
  EXPECT_LE(std::sqrt(num / den), 0.05);
}

TEST(Density, BrownianHeatKernel) {
  const double D = 0.5, t = 1.0;
  DriftField d;
  d.diffusionCoeff = D;
  d.forwardDrift = [](std::span<const double>, double, std::span<double> out) { out[0] = 0; };
  const std::vector<double> init(100000, 0.0);
  const auto e = integrateForward(d, init, 100, {17, 0, t / 100}, {.recordStride = 100});
  const auto col = e.column(1);
  const auto dens = estimateDensity(e, 1, uniformGrid(-5, 5, 401), silvermanBandwidth(col));
  EXPECT_NEAR(dens.integral(), 1.0, 1e-3);
  EXPECT_LE(l1Distance(dens, [&](double x) { return gaussian(x, 0, D * t); }), 0.03);
}

TEST(Density, StationaryOscillatorGroundState) {
  const auto& s = stationaryEnsemble();
  const std::size_t f = s.ensemble.frameCount - 1;
  const auto col = s.ensemble.column(f);
  const auto dens = estimateDensity(s.ensemble, f, uniformGrid(-4, 4, 401), silvermanBandwidth(col));
  // exp(-M w x^2 / hbar) normalized, with M = hbar = 1.
  EXPECT_LE(l1Distance(dens, [&](double x) { return std::sqrt(s.w / kPi) * std::exp(-s.w * x * x); }), 0.03);
}

TEST(Density, SinglePathIsOneKernel) {
  const std::vector<double> one{0.4};
  const auto dens = estimateDensity(one, uniformGrid(-3, 3, 601), 0.2);
  EXPECT_NEAR(dens.integral(), 1.0, 1e-12);
  const auto peak = std::max_element(dens.values.begin(), dens.values.end()) - dens.values.begin();
  EXPECT_NEAR(dens.grid[peak], 0.4, 1e-12);
  EXPECT_THROW(estimateDensity(one, uniformGrid(-1, 1, 5), 0.0), DomainError);
}

TEST(Consistency, AnalyticGaussianParticle) {
  // Particle: b = v + u, b~ = v - u, u = (hbar/2M) d ln rho, for rho = N(mu, s^2) and arbitrary v.
  const double hbar = 1.0, M = 2.0, mu = 0.3, s2 = 0.4, v = 0.7;
  DriftField d;
  d.diffusionCoeff = hbar / M;
  auto u = [&](double x) { return hbar / (2 * M) * (-(x - mu) / s2); };
  d.forwardDrift = [&](std::span<const double> x, double, std::span<double> o) { o[0] = v + u(x[0]); };
  d.backwardDrift = [&](std::span<const double> x, double, std::span<double> o) { o[0] = v - u(x[0]); };
  DensityEstimate rho;
  rho.grid = uniformGrid(-3, 3, 121);
  for (double x : rho.grid) {
    rho.values.push_back(gaussian(x, mu, s2));
    rho.logGradient.push_back(-(x - mu) / s2);
  }
  const auto r = verifyConsistency(d, rho);
  EXPECT_LE(r.maxAbs, 1e-10);
  EXPECT_GT(r.probes, 50u);
}

TEST(Consistency, AnalyticGaussianFieldMode) {
  // Mode amplitude in its ground state: width hbar c^2 / (2 w), drifts -+ w a, variance rate hbar c^2.
  const double hbar = 1.0, c = 1.5, w = 0.8;
  const double var = hbar * c * c / (2 * w);
  DriftField d;
  d.diffusionCoeff = hbar * c * c;
  d.forwardDrift = [&](std::span<const double> a, double, std::span<double> o) { o[0] = -w * a[0]; };
  d.backwardDrift = [&](std::span<const double> a, double, std::span<double> o) { o[0] = w * a[0]; };
  DensityEstimate rho;
  rho.grid = uniformGrid(-6, 6, 241);
  for (double a : rho.grid) {
    rho.values.push_back(gaussian(a, 0, var));
    rho.logGradient.push_back(-a / var);
  }
  EXPECT_LE(verifyConsistency(d, rho).maxAbs, 1e-10);
}

TEST(Consistency, EstimatedDriftsAgainstKernelDensity) {
  const auto& s = stationaryEnsemble();
  const Binning bins{-1.5, 1.5, 30};
  const std::size_t last = s.ensemble.frameCount - 3;
  const auto fwd = meanDerivative(s.ensemble, DerivativeKind::Forward, 2, last, bins, true);
  const auto bwd = meanDerivative(s.ensemble, DerivativeKind::Backward, 2, last, bins, true);
  // The window is stationary, so the density is pooled over frames like the drifts are.
  std::vector<double> pooled;
  for (std::size_t f = 0; f < s.ensemble.frameCount; f += 5) {
    const auto col = s.ensemble.column(f);
    pooled.insert(pooled.end(), col.begin(), col.end());
  }
  const double h = silvermanBandwidth(s.ensemble.column(0));
  const auto dens = estimateDensity(pooled, uniformGrid(-4, 4, 161), h);
  const auto r = verifyConsistency(fwd, bwd, dens, s.D);
  EXPECT_LE(r.relative, 0.05) << "l2=" << r.l2 << " scale=" << r.scale;
  EXPECT_THROW(consistencyResidual(std::vector<double>{0.0}, std::vector<double>{0.0}, std::vector<double>{0.0},
                                   std::vector<double>{0.0}, 1.0),
               DomainError);
}

TEST(Density, FourthOrderKernelMatchesExpectedEstimate) {
  // K4 = phi - phi''/2, so the expected estimate of N(0, 1) is phi_s - (h^2/2) phi_s'' with s^2 = 1 + h^2.
  const double h = 0.3, s2 = 1 + h * h;
  auto expected = [&](double x) { return gaussian(x, 0, s2) * (1 - 0.5 * h * h * (x * x / (s2 * s2) - 1 / s2)); };
  auto expectedGrad = [&](double x) {
    const double g = gaussian(x, 0, s2);
    return g * (-x / s2 * (1 - 0.5 * h * h * (x * x / (s2 * s2) - 1 / s2)) - h * h * x / (s2 * s2));
  };
  // Mid-quantiles of N(0, 1) stand in for a sample without Monte Carlo noise.
  const std::size_t n = 20000;
  std::vector<double> q;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = (i + 0.5) / n;
    double lo = -9, hi = 9;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
    }
    q.push_back(0.5 * (lo + hi));
  }
  // The estimate is renormalized over its grid, so the grid must hold all of the mass.
  const auto grid = uniformGrid(-7, 7, 281);
  const auto d2 = estimateDensity(q, grid, h, 2);
  const auto d4 = estimateDensity(q, grid, h, 4);
  double e4 = 0, g4 = 0, bias2 = 0, bias4 = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double x = grid[i];
    e4 = std::max(e4, std::abs(d4.values[i] - expected(x)));
    g4 = std::max(g4, std::abs(d4.gradient[i] - expectedGrad(x)));
    bias2 = std::max(bias2, std::abs(d2.values[i] - gaussian(x, 0, 1)));
    bias4 = std::max(bias4, std::abs(d4.values[i] - gaussian(x, 0, 1)));
  }
  EXPECT_LT(e4, 2e-4);
  EXPECT_LT(g4, 2e-4);
  EXPECT_GT(bias2, 5 * bias4);
  EXPECT_EQ(d4.order, 4);
  EXPECT_THROW(estimateDensity(q, grid, h, 3), DomainError);
}

TEST(Consistency, FluxFormAnalyticAndSampled) {
  const double hbar = 1, M = 1, mu = 0.3, s2 = 0.49;
  DriftField d;
  d.dof = 1;
  d.diffusionCoeff = hbar / M;
  auto u = [&](double x) { return hbar / (2 * M) * (-(x - mu) / s2); };
  d.forwardDrift = [&](std::span<const double> x, double, std::span<double> o) { o[0] = 0.4 + u(x[0]); };
  d.backwardDrift = [&](std::span<const double> x, double, std::span<double> o) { o[0] = 0.4 - u(x[0]); };
  DensityEstimate exact;
  exact.grid = uniformGrid(-5, 5, 201);
  for (double x : exact.grid) {
    exact.values.push_back(gaussian(x, mu, s2));
    exact.gradient.push_back(-(x - mu) / s2 * gaussian(x, mu, s2));
  }
  EXPECT_LE(verifyFluxConsistency(d, exact).maxAbs, 1e-12);

  // 1e5 samples: the derivative bandwidth with the fourth-order kernel meets 5%; Silverman's rule does not.
  const auto x = normalSamples(100000, mu, std::sqrt(s2), 7);
  const auto grid = uniformGrid(-5, 5, 401);
  const auto fine = verifyFluxConsistency(d, estimateDensity(x, grid, derivativeBandwidth(x), 4));
  const auto coarse = verifyFluxConsistency(d, estimateDensity(x, grid, silvermanBandwidth(x), 2));
  EXPECT_LE(fine.relative, 0.05);
  EXPECT_GT(coarse.relative, fine.relative);
  EXPECT_NEAR(derivativeBandwidth(x), std::sqrt(s2) * std::pow(1e5, -1.0 / 11), 0.02);
}

TEST(FokkerPlanck, EnsembleMatchesGridIntegration) {
  const double k = 1.0, D = 0.6, t = 1.0;
  const auto init = normalSamples(100000, 1.2, 0.3, 41);
  const auto e = integrateForward(linearDrift(k, D), init, 1000, {55, 0, t / 1000}, {.recordStride = 1000});
  const auto grid = uniformGrid(-4, 4, 321);
  std::vector<double> rho0;
  for (double x : grid) rho0.push_back(gaussian(x, 1.2, 0.09));
  const FokkerPlanck1D fp(grid, D, [k](double x, double) { return -k * x; });
  const auto rho1 = fp.evolve(rho0, 0, t, 1e-3);
  const auto col = e.column(1);
  const auto dens = estimateDensity(col, grid, silvermanBandwidth(col));
  double l1 = 0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    l1 += 0.5 * (std::abs(dens.values[i] - rho1[i]) + std::abs(dens.values[i - 1] - rho1[i - 1])) * (grid[i] - grid[i - 1]);
  EXPECT_LE(l1, 0.05);
}

TEST(Duality, BackwardEnsembleReproducesForwardMarginal) {
  // Ornstein-Uhlenbeck marginals are Gaussian with known mean/variance; the backward drift
  // b~ = b - D d ln rho(t) run from the final marginal must return to the initial one.
  const double k = 1.0, D = 0.8, T = 0.8, m0 = 1.0, v0 = 0.1;
  auto mean = [&](double t) { return m0 * std::exp(-k * t); };
  auto var = [&](double t) { return v0 * std::exp(-2 * k * t) + D / (2 * k) * (1 - std::exp(-2 * k * t)); };
  DriftField d;
  d.diffusionCoeff = D;
  d.forwardDrift = [&](std::span<const double> x, double, std::span<double> o) { o[0] = -k * x[0]; };
  d.backwardDrift = [&](std::span<const double> x, double t, std::span<double> o) {
    o[0] = -k * x[0] + D * (x[0] - mean(t)) / var(t);
  };
  const auto final = normalSamples(100000, mean(T), std::sqrt(var(T)), 61);
  const auto e = integrateBackward(d, final, 800, {71, 0, T / 800}, {.recordStride = 400, .t0 = T});
  EXPECT_NEAR(e.time(0), 0.0, 1e-12);
  const auto col = e.column(0);
  const auto dens = estimateDensity(col, uniformGrid(-1, 3, 401), silvermanBandwidth(col));
  EXPECT_LE(l1Distance(dens, [&](double x) { return gaussian(x, m0, v0); }), 0.05);
}

TEST(Sampling, InverseCdfReproducesGaussianMoments) {
  const auto grid = uniformGrid(-6, 6, 1201);
  std::vector<double> rho;
  for (double x : grid) rho.push_back(gaussian(x, 0.5, 0.64));
  const auto s = sampleInverseCdf(grid, rho, 200000, 3);
  double m = 0;
  for (double x : s) m += x / s.size();
  EXPECT_NEAR(m, 0.5, 4 * 0.8 / std::sqrt(200000.0));
  EXPECT_NEAR(variance(s), 0.64, 0.01);
}

TEST(Export, BinaryRoundTrip) {
  const auto e = integrateForward(linearDrift(1, 1), normalSamples(5, 0, 1, 1), 6, {3, 0, 0.1}, {.recordStride = 2});
  const auto back = deserializeEnsemble(serializeEnsemble(e));
  EXPECT_EQ(back.data, e.data);
  EXPECT_EQ(back.frameCount, 4u);
  EXPECT_EQ(back.dt, 0.1);
  auto bytes = serializeEnsemble(e);
  EXPECT_EQ(bytes.substr(0, 8), "SVMQENS1");
  // pathCount written little-endian right after the magic.
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 5);
  bytes.pop_back();
  EXPECT_THROW(deserializeEnsemble(bytes), DomainError);
}
