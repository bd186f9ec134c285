#include <gtest/gtest.h>

#include <random>

#include "svmqch/quantum.hpp"

using namespace svmqch;
using namespace svmqch::quantum;

namespace {

lattice::LatticeSpec cube(int n, double dx = 1.0) {
  lattice::LatticeSpec s;
  s.dims = {n, n, n};
  s.spacing = dx;
  return s;
}

ModeSystem singleMode(int points = 40, double halfWidth = 10) {
  ModeSystemSpec spec;
  spec.basis = lattice::decomposeModes(cube(4), 1);
  spec.pointsPerMode = points;
  spec.halfWidth = halfWidth;
  return ModeSystem(spec);
}

}  // namespace

TEST(Grid, DerivativeIsExactOnTrigonometricPolynomials) {
  const Axis ax{16, 0.3, 2.0};
  const ProductGrid g({ax});
  const GridHamiltonian H(g, 1.0);
  const auto w = WaveFunction::fromFunction(g, [&](std::span<const double> x) {
    return Complex(std::sin(2 * kPi * 3 * x[0] / 2.0), std::cos(2 * kPi * x[0] / 2.0));
  });
  const ComplexVector d = H.derivative(0, w.psi);
  const double scale = w.psi[0].real() / std::sin(2 * kPi * 3 * ax.x(0) / 2.0);
  for (int j = 0; j < ax.points; ++j) {
    const double x = ax.x(j);
    const Complex ref = scale * Complex(3 * kPi * std::cos(3 * kPi * x), -kPi * std::sin(kPi * x));
    EXPECT_NEAR(std::abs(d[j] - ref), 0.0, 1e-11);
  }
}

TEST(Grid, CanonicalCommutatorOnSmoothStates) {
  const auto sys = singleMode(64, 14);
  const auto& H = sys.hamiltonian();
  auto w = sys.coherentState(std::vector<double>{0.3}, std::vector<double>{0.2});
  const auto a = sys.coordinate(0);
  ComplexVector aw = w.psi;
  for (Eigen::Index i = 0; i < aw.size(); ++i) aw[i] *= a[static_cast<std::size_t>(i)];
  ComplexVector pw = H.momentum(0, w.psi);
  ComplexVector apw = pw;
  for (Eigen::Index i = 0; i < apw.size(); ++i) apw[i] *= a[static_cast<std::size_t>(i)];
  const ComplexVector comm = apw - H.momentum(0, aw);
  // [a, pi] psi = i hbar psi
  EXPECT_LE((comm - Complex(0, 1) * w.psi).norm() * std::sqrt(w.grid.weight()), 1e-9);
}

TEST(Hamiltonian, HermitianOnRandomStates) {
  ModeSystemSpec spec;
  spec.basis = lattice::decomposeModes(cube(4), 2);
  spec.pointsPerMode = 8;
  spec.particle = ParticleSpec{1.0, 0.7, 1.2, {0.3, 0.6, 0.2}, 0, 8, 5};
  const ModeSystem sys(spec);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  ComplexVector x(sys.grid().size()), y(sys.grid().size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x[i] = {nd(rng), nd(rng)};
    y[i] = {nd(rng), nd(rng)};
  }
  const auto& H = sys.hamiltonian();
  const Complex lhs = x.dot(H.apply(y)), rhs = H.apply(x).dot(y);
  EXPECT_LE(std::abs(lhs - rhs), 1e-10 * std::abs(lhs));
  const auto D = H.dense();
  EXPECT_LE((D - D.adjoint()).cwiseAbs().maxCoeff(), 1e-10 * D.cwiseAbs().maxCoeff());
}

TEST(Evolution, GroundStateIsStationary) {
  const auto sys = singleMode();
  const double w = sys.spec().basis.modes[0].omega;
  const auto psi0 = sys.groundState();
  const double dt = 0.05;
  const std::size_t steps = 100;
  const auto psi = evolveSchrodinger(psi0, sys.hamiltonian(), dt, steps);
  const auto r0 = psi0.density(), r1 = psi.density();
  double maxd = 0;
  for (std::size_t i = 0; i < r0.size(); ++i) maxd = std::max(maxd, std::abs(r0[i] - r1[i]));
  EXPECT_LE(maxd, 1e-10);
  // Global phase e^{-i w t / 2} (hbar = 1).
  const Complex ov = psi0.inner(psi);
  EXPECT_NEAR(std::abs(ov), 1.0, 1e-10);
  EXPECT_NEAR(std::remainder(std::arg(ov) + 0.5 * w * dt * steps, 2 * kPi), 0.0, 1e-9);
}

TEST(Evolution, CoherentStateFollowsClassicalEllipse) {
  const auto sys = singleMode(48, 12);
  const double w = sys.spec().basis.modes[0].omega, c = sys.spec().pc.c;
  const double a0 = 2.0 * sys.groundWidth(0), pi0 = 0.5;
  const double period = 2 * kPi / w, dt = period / 1000;
  const auto psi0 = sys.coherentState(std::vector<double>{a0}, std::vector<double>{pi0});
  const double e0 = sys.hamiltonian().energy(psi0);
  double maxDev = 0, maxNorm = 0, maxEnergy = 0;
  evolveSchrodinger(psi0, sys.hamiltonian(), dt, 1000, [&](std::size_t n, const WaveFunction& psi) {
    if (n % 10 != 0) return;
    const double t = n * dt;
    const auto o = sys.observe(psi, t);
    const double aRef = a0 * std::cos(w * t) + c * c * pi0 / w * std::sin(w * t);
    const double pRef = pi0 * std::cos(w * t) - w * a0 / (c * c) * std::sin(w * t);
    maxDev = std::max({maxDev, std::abs(o.a[0] - aRef), std::abs(o.pi[0] - pRef)});
    maxNorm = std::max(maxNorm, std::abs(o.norm - 1));
    maxEnergy = std::max(maxEnergy, std::abs(o.energy - e0));
  });
  EXPECT_LE(maxDev, 1e-6);
  EXPECT_LE(maxNorm, 1e-10);
  EXPECT_LE(maxEnergy, 1e-8);
}

TEST(Evolution, NormDriftAbortsAndRequiresNormalizedInput) {
  const auto sys = singleMode(16, 10);
  auto psi = sys.groundState();
  psi.psi *= 1.1;
  EXPECT_THROW(evolveSchrodinger(psi, sys.hamiltonian(), 0.1, 1), DomainError);
}

TEST(Evolution, DipoleSystemUnitaryOverTenThousandSteps) {
  ModeSystemSpec spec;
  spec.basis = lattice::decomposeModes(cube(4), 2);
  spec.pointsPerMode = 8;
  spec.halfWidth = 6;
  spec.particle = ParticleSpec{1.0, 0.5, 1.0, {0.5, 0.5, 0.5}, 0, 8, 6};
  const ModeSystem sys(spec);
  auto psi = sys.coherentState(std::vector<double>{0.2, 0.0}, std::vector<double>{0.0, 0.1}, 0.3, 0.0);
  double maxNorm = 0;
  evolveSchrodinger(psi, sys.hamiltonian(), 0.01, 10000, [&](std::size_t, const WaveFunction& w) {
    maxNorm = std::max(maxNorm, std::abs(w.norm() - 1.0));
  });
  EXPECT_LE(maxNorm, 1e-10);
}

TEST(Commutator, FullBasisMatchesTransverseDelta) {
  const auto basis = lattice::decomposeModes(cube(4, 0.8));
  const PhysicalConstants pc{0.7, 1.9};
  EXPECT_LE(commutatorResidualAllSites(basis, pc), 1e-10);
  const auto r = commutatorCheck(basis, 5, 5, pc);
  EXPECT_LE(r.residual, 1e-10);
  // Transversality forbids a pure Kronecker delta: off-diagonal entries at x = y are the projector's.
  const auto P = lattice::buildProjector(basis.spec).matrix();
  const std::size_t n = basis.spec.siteCount();
  const double off = P(0 * n + 5, 1 * n + 5);
  EXPECT_GT(std::abs(off), 1e-6);
  EXPECT_NEAR(r.assembled(0, 1).imag(), -pc.hbar * pc.c * off / basis.spec.cellVolume(), 1e-12);
  EXPECT_NEAR(r.assembled(0, 1).real(), 0.0, 1e-15);
}

TEST(Commutator, ScalarAnalogIsPlainDelta) {
  lattice::LatticeSpec s;
  s.dimension = 1;
  s.dims = {6, 1, 1};
  s.spacing = 0.4;
  s.scalarAnalog = true;
  const auto basis = lattice::decomposeModes(s, 0, lattice::ZeroModePolicy::Keep);
  for (std::size_t x = 0; x < 6; ++x)
    for (std::size_t y = 0; y < 6; ++y) {
      const auto r = commutatorCheck(basis, x, y);
      const double ref = x == y ? -1.0 / s.spacing : 0.0;
      EXPECT_NEAR(r.assembled(0, 0).imag(), ref, 1e-12);
      EXPECT_LE(r.residual, 1e-12);
    }
}

TEST(Commutator, RefusesTruncatedBasis) {
  EXPECT_THROW(commutatorCheck(lattice::decomposeModes(cube(3), 4), 0, 0), DomainError);
}

TEST(Ehrenfest, FreeFieldResidualsVanish) {
  ModeSystemSpec spec;
  spec.basis = lattice::decomposeModes(cube(4), 2);
  spec.pointsPerMode = 32;
  spec.halfWidth = 10;
  const ModeSystem sys(spec);
  auto psi = sys.coherentState(std::vector<double>{1.0, -0.5}, std::vector<double>{0.2, 0.4});
  const double dt = 2 * kPi / sys.spec().basis.modes[0].omega / 1000;
  std::vector<Observables> hist;
  evolveSchrodinger(psi, sys.hamiltonian(), dt, 40,
                    [&](std::size_t n, const WaveFunction& w) { hist.push_back(sys.observe(w, n * dt)); });
  const auto r = ehrenfestResiduals(sys, hist);
  EXPECT_LE(r.maxFaraday, 1e-8);
  EXPECT_LE(r.maxAmpere, 1e-8);
  EXPECT_LE(r.maxDivB, 1e-12);
  EXPECT_LE(r.maxGauss, 1e-12);
  EXPECT_THROW(ehrenfestResiduals(sys, std::vector<Observables>(hist.begin(), hist.begin() + 2), 2), DomainError);
}

TEST(Ehrenfest, DipoleCoupledAmpereResidualAndConvergence) {
  ModeSystemSpec spec;
  spec.basis = lattice::decomposeModes(cube(4), 2);
  spec.basis.concentrateCoupling({0.5, 0.5, 0.5}, 0);
  spec.pointsPerMode = 20;
  spec.halfWidth = 8;
  spec.particle = ParticleSpec{1.0, 0.6, 1.3, {0.5, 0.5, 0.5}, 0, 20, 8};
  const ModeSystem sys(spec);
  const double w = sys.spec().basis.modes[0].omega;
  auto psi0 = sys.coherentState(std::vector<double>{0.4, 0.1}, std::vector<double>{0.0, 0.2}, 0.5, 0.1);
  auto run = [&](double dt, std::size_t n, int order) {
    std::vector<Observables> hist;
    evolveSchrodinger(psi0, sys.hamiltonian(), dt, n,
                      [&](std::size_t k, const WaveFunction& x) { hist.push_back(sys.observe(x, k * dt)); });
    return ehrenfestResiduals(sys, hist, order);
  };
  const double dt = 1e-3 * 2 * kPi / w;
  const auto r = run(dt, 30, 4);
  EXPECT_LE(r.maxAmpere, 1e-6);
  EXPECT_LE(r.maxFaraday, 1e-8);
  EXPECT_LE(r.maxParticle, 1e-6);
  // Second-order differences: halving dt reduces the residual ~4x (same physical window).
  const double coarse = run(8 * dt, 4, 2).ampere[1];
  const double fine = run(4 * dt, 8, 2).ampere[3];
  EXPECT_GT(coarse / fine, 3.0);
  EXPECT_LT(coarse / fine, 5.0);
}

TEST(Coulomb, PairSumAndErrors) {
  const std::vector<Vec3> one{{0, 0, 0}};
  const std::vector<double> q1{1.0};
  EXPECT_EQ(coulombPotential(one, q1)[0], 0.0);
  const double d = 0.3;
  const std::vector<Vec3> two{{1, 1, 1}, {1 + d, 1, 1}};
  const auto same = coulombPotential(two, std::vector<double>{1, 1}, {8, 8, 8});
  EXPECT_NEAR(same[0], 1 / (4 * kPi * d), 1e-14);
  EXPECT_NEAR(same[1], 1 / (4 * kPi * d), 1e-14);
  const auto pair = coulombPotential(two, std::vector<double>{1, -1});
  EXPECT_NEAR(pair[0], -pair[1], 1e-15);
  // Minimum image.
  const std::vector<Vec3> wrap{{0.1, 0, 0}, {3.9, 0, 0}};
  EXPECT_NEAR(coulombPotential(wrap, std::vector<double>{1, 1}, {4, 0, 0})[0], 1 / (4 * kPi * 0.2), 1e-12);
  const std::vector<Vec3> same2{{0.5, 0, 0}, {0.5, 0, 0}};
  EXPECT_THROW(coulombPotential(same2, std::vector<double>{1, 1}), DomainError);
}

TEST(PhaseDrift, RealGaussianHasNoCurrent) {
  const ProductGrid g({Axis::centered(64, 8)});
  const GridHamiltonian H(g, 1.0);
  const auto w = WaveFunction::fromFunction(g, [](std::span<const double> x) { return Complex(std::exp(-x[0] * x[0] / 2)); });
  const auto d = driftFromPsi(H, w, 1.0);
  for (std::size_t i = 0; i < d.x.size(); ++i)
    if (d.supported[i]) EXPECT_NEAR(d.current[i], 0.0, 1e-12);
}

TEST(PhaseDrift, PlaneWaveMomentum) {
  const double hbar = 0.8, k = 2 * kPi * 3 / 10.0;
  const ProductGrid g({Axis{40, -5, 10}});
  const GridHamiltonian H(g, hbar);
  const auto w = WaveFunction::fromFunction(g, [&](std::span<const double> x) { return std::polar(1.0, k * x[0]); });
  const auto pd = phaseDerivatives(H, w, 0);
  for (double gt : pd.gradTheta) EXPECT_NEAR(hbar * gt, hbar * k, 1e-11);
}

TEST(PhaseDrift, ChirpedModeGaussianGivesLinearFieldDrift) {
  // theta = beta (a - ab)^2 / (4 s^2) + pb a / hbar  =>  u_m = hbar c^2 dtheta/da
  //   = hbar c^2 beta (a - ab) / (2 s^2) + c^2 pb.
  const double hbar = 1.0, c = 1.4, s2 = 0.3, ab = 0.2, pb = 0.5;
  const ProductGrid g({Axis::centered(64, 6)});
  const GridHamiltonian H(g, hbar);
  for (double beta : {0.0, 0.6}) {
    const auto w = WaveFunction::fromFunction(g, [&](std::span<const double> x) {
      const double y = x[0] - ab;
      return std::exp(Complex(-y * y / (4 * s2), beta * y * y / (4 * s2) + pb * x[0] / hbar));
    });
    const auto pd = phaseDerivatives(H, w, 0, 1e-8);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!pd.valid[i]) continue;
      const double a = g.coord(i, 0);
      EXPECT_NEAR(hbar * c * c * pd.gradTheta[i], hbar * c * c * beta * (a - ab) / (2 * s2) + c * c * pb, 1e-8);
    }
  }
}

TEST(PhaseDrift, ConsistencyHoldsByConstruction) {
  const ProductGrid g({Axis::centered(96, 8)});
  const GridHamiltonian H(g, 1.0);
  const auto w = WaveFunction::fromFunction(g, [](std::span<const double> x) {
    return std::exp(Complex(-(x[0] - 0.5) * (x[0] - 0.5) / 1.5, 0.3 * x[0] * x[0] + 0.4 * x[0]));
  });
  const auto d = driftFromPsi(H, w, 1.3);
  sde::DensityEstimate rho;
  rho.grid = d.x;
  rho.values = w.density();
  rho.logGradient = d.osmotic;
  DriftTable table(0, 1, 1.0 / 1.3);
  table.push(d);
  const auto r = sde::verifyConsistency(table.field(), rho);
  EXPECT_LE(r.maxAbs, 1e-10);
}

TEST(Phase, UnwrapCountsBranches) {
  std::vector<Complex> line;
  for (int i = 0; i < 50; ++i) line.push_back(std::polar(1.0, 0.9 * i));
  const auto u = unwrapPhase(line);
  for (int i = 0; i < 50; ++i) EXPECT_NEAR(u.theta[i], 0.9 * i, 1e-12);
  EXPECT_GT(u.branch.back(), 5);
}

TEST(Phase, VortexDetectedOnSlice) {
  const ProductGrid g({Axis::centered(20, 3), Axis::centered(20, 3)});
  const auto vortex = WaveFunction::fromFunction(g, [](std::span<const double> x) {
    return Complex(x[0] - 0.05, x[1] - 0.05) * std::exp(-(x[0] * x[0] + x[1] * x[1]) / 2);
  });
  const auto found = detectVortices(vortex, 0, 1);
  ASSERT_EQ(found.size(), 1u);
  EXPECT_EQ(found[0].winding, 1);
  EXPECT_EQ(found[0].i, 10u);
  EXPECT_EQ(found[0].j, 10u);
  const auto smooth = WaveFunction::fromFunction(g, [](std::span<const double> x) {
    return std::exp(Complex(-(x[0] * x[0] + x[1] * x[1]) / 2, 0.3 * x[0]));
  });
  EXPECT_TRUE(detectVortices(smooth, 0, 1).empty());
}

TEST(Madelung, MatchesSchrodingerForSqueezedOscillatorState) {
  const double hbar = 1.0, m = 1.0, w = 1.0;
  const ProductGrid g({Axis::centered(96, 9)});
  GridHamiltonian H(g, hbar);
  H.addKinetic(0, m);
  const auto x = g.axis(0).coords();
  std::vector<double> V;
  for (double xi : x) V.push_back(0.5 * m * w * w * xi * xi);
  H.addPotential(V);
  // psi = exp(S + i theta), S = -(x - x0)^2/(4 s2) + log-norm, theta = k x + beta x^2.
  const double x0 = 0.7, s2 = 0.35, k = 0.4, beta = 0.1;
  const double lognorm = -0.25 * std::log(2 * kPi * s2);
  std::vector<double> S, th;
  for (double xi : x) {
    S.push_back(-(xi - x0) * (xi - x0) / (4 * s2) + lognorm);
    th.push_back(k * xi + beta * xi * xi);
  }
  WaveFunction psi(g);
  for (std::size_t i = 0; i < x.size(); ++i) psi.psi[static_cast<Eigen::Index>(i)] = std::exp(Complex(S[i], th[i]));
  const double dt = 2e-5;
  const std::size_t steps = 50000;
  const MadelungSolver1D mad(x, m, hbar, V, 0.1);
  mad.evolve(S, th, dt, steps);
  for (std::size_t n = 0; n < 20; ++n) propagate(H, psi, dt * steps / 20);
  double err = 0;
  for (std::size_t i = 0; i < x.size(); ++i) err += std::norm(std::exp(Complex(S[i], th[i])) - psi.psi[static_cast<Eigen::Index>(i)]);
  EXPECT_LE(std::sqrt(err * g.weight()), 1e-4);
}

TEST(Snapshot, BinaryRoundTrip) {
  const ProductGrid g({Axis{5, -1, 2}, Axis{3, 0, 1}});
  const auto w = WaveFunction::fromFunction(g, [](std::span<const double> x) { return Complex(1 + x[0], x[1]); });
  const auto back = deserializeSnapshot(serializeSnapshot(w));
  EXPECT_EQ(back.grid.size(), w.grid.size());
  EXPECT_LE((back.psi - w.psi).cwiseAbs().maxCoeff(), 1e-15);
}
