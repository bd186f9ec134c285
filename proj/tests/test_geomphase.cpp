#include <gtest/gtest.h>

#include <random>

#include "svmqch/geomphase.hpp"

using namespace svmqch;
using namespace svmqch::geomphase;

namespace {

lattice::LatticeSpec cube(int n = 4) {
  lattice::LatticeSpec s;
  s.dims = {n, n, n};
  return s;
}

hybrid::HybridSpec charged(lattice::ModeBasis basis, double e, Vec3 f, Vec3 p = {0, 0, 0}, int points = 40) {
  hybrid::HybridSpec spec;
  spec.basis = std::move(basis);
  spec.pointsPerMode = points;
  spec.particles.push_back({1.0, e, f, p});
  return spec;
}

// Displaced-oscillator benchmark with a skewed quadrature map.
DisplacedOscillator skewed() {
  DisplacedOscillator m;
  m.origin = {0.5, -0.2, 0.0};
  m.gX = {1.1, 0.2, 0.0};
  m.gP = {-0.3, 0.9, 0.0};
  return m;
}

LoopProtocol circle(const DisplacedOscillator& m, double T, double r = 0.7) {
  LoopProtocol L;
  L.center = m.origin + Vec3{0.1, 0.05, 0.0};
  L.r1 = L.r2 = r;
  L.T = T;
  return L;
}

// Signed (X, P) area enclosed by an ellipse with semi-axes r1 u, r2 w, worked out by hand:
// A = pi r1 r2 det[[gX.u, gX.w], [gP.u, gP.w]].
double oracleGamma(const DisplacedOscillator& m, const LoopProtocol& L) {
  const double det = dot(m.gX, L.u) * dot(m.gP, L.w) - dot(m.gX, L.w) * dot(m.gP, L.u);
  const double area = kPi * L.r1 * (L.curve == Curve::Circle ? L.r1 : L.r2) * det * (L.reversed ? -1 : 1) * L.turns;
  return -area / m.pc.hbar;
}

}  // namespace

TEST(LoopProtocol, ClosesAndValidates) {
  LoopProtocol L;
  L.center = {1, 2, 3};
  for (Curve c : {Curve::Circle, Curve::Ellipse, Curve::Segment}) {
    L.curve = c;
    L.r2 = 0.4;
    EXPECT_LE(L.closureDefect(), 1e-12);
    EXPECT_NO_THROW(L.validate());
    EXPECT_LE(norm(L.velocity(0)), 1e-15);
    // Velocity is the time derivative of the position.
    const double t = 0.37 * L.T, h = 1e-4;
    const Vec3 fd = (1 / (2 * h)) * (L.position(t + h) - L.position(t - h));
    EXPECT_LE(norm(fd - L.velocity(t)), 1e-8);
  }
  L.samples = 8;
  EXPECT_THROW(L.validate(), ConfigError);
}

TEST(Eigensystem, UncoupledModeIsHarmonicLadder) {
  const hybrid::HybridSystem sys(charged(lattice::standingWave(cube(), 0, 1), 0.0, {1.3, 0.2, 0.4}));
  const auto fam = hybridFamily(sys, 0);
  const auto es = instantaneousEigensystem(fam.hamiltonian({1.3, 0.2, 0.4}, {0.2, 0.1, 0.0}), 4);
  const double w = sys.spec().basis.modes[0].omega;
  for (int n = 0; n < 4; ++n) EXPECT_NEAR(es.energies[n + 1] - es.energies[n], w, 1e-10);
  EXPECT_NEAR(es.gap, w, 1e-10);
  for (int n = 0; n < 4; ++n) {
    Eigen::Index big = 0;
    es.vectors.col(n).cwiseAbs().maxCoeff(&big);
    EXPECT_EQ(es.vectors(big, n).imag(), 0.0);
    EXPECT_GT(es.vectors(big, n).real(), 0.0);
    EXPECT_NEAR(es.state(n).norm(), 1.0, 1e-12);
  }
}

TEST(Eigensystem, LinearSourceShiftsCentre) {
  const DisplacedOscillator m;
  auto H = displacedOscillatorFamily(m).hamiltonian(m.origin, {});
  const double lambda = 0.35;
  std::vector<double> src;
  for (std::size_t i = 0; i < H.grid().size(); ++i) src.push_back(-lambda * H.grid().coord(i, 0));
  H.addPotential(src);
  const auto es = instantaneousEigensystem(H, 3);
  for (int n = 0; n < 3; ++n) EXPECT_NEAR(es.energies[n + 1] - es.energies[n], m.gap(), 1e-10);
  // Completing the square: centre lambda c^2 / w^2.
  const auto a = H.grid().tabulate([](std::span<const double> x) { return x[0]; });
  EXPECT_NEAR(es.state(0).expect(a), lambda * m.pc.c * m.pc.c / (m.omega * m.omega), 1e-10);
}

TEST(Eigensystem, TwoCoupledModesMatchDenseSolver) {
  auto spec = charged(lattice::decomposeModes(cube(), 2), 0.9, {0.4, 0.3, 0.6}, {0.3, -0.2, 0.5}, 16);
  spec.halfWidth = 8;
  const hybrid::HybridSystem sys(spec);
  const auto H = sys.fieldHamiltonian({spec.particles[0].f}, {spec.particles[0].p});
  const auto es = instantaneousEigensystem(H, 4);
  Eigen::ComplexEigenSolver<ComplexMatrix> ref(H.dense());
  std::vector<double> ev;
  for (Eigen::Index i = 0; i < ref.eigenvalues().size(); ++i) ev.push_back(ref.eigenvalues()[i].real());
  std::sort(ev.begin(), ev.end());
  for (int n = 0; n < 6; ++n) EXPECT_NEAR(es.energies[n], ev[n], 1e-10);
  EXPECT_LE((es.vectors.adjoint() * es.vectors - ComplexMatrix::Identity(es.vectors.cols(), es.vectors.cols())).cwiseAbs().maxCoeff(),
            1e-10);
}

TEST(Eigensystem, DegenerateLevelsAreRejected) {
  // Free periodic motion: +k and -k share an energy.
  quantum::GridHamiltonian H(quantum::ProductGrid({quantum::Axis::centered(15, 3.0)}), 1.0);
  H.addKinetic(0, 1.0);
  EXPECT_NO_THROW(instantaneousEigensystem(H, 1));
  EXPECT_THROW(instantaneousEigensystem(H, 2), DomainError);
}

TEST(Berry, CircularLoopMatchesDisplacedOscillatorOracle) {
  const auto m = skewed();
  const auto L = circle(m, 100 / m.gap());
  const auto r = adiabaticTransport(displacedOscillatorFamily(m), L, 0);
  const double oracle = oracleGamma(m, L);
  EXPECT_NEAR(r.gamma, oracle, 0.01 * std::abs(oracle));
  EXPECT_LE(r.leakage, 1e-2);
  EXPECT_LE(r.closureDefect, 1e-12);
  EXPECT_NEAR(r.minGap, m.gap(), 1e-10);
  // Sampling error of the overlap product falls with each doubling.
  ASSERT_EQ(r.convergence.size(), 3u);
  EXPECT_LT(std::abs(r.convergence[1] - oracle), std::abs(r.convergence[0] - oracle));
  EXPECT_LT(std::abs(r.convergence[2] - oracle), std::abs(r.convergence[1] - oracle));
  // Every well-resolved level of a displaced oscillator picks up the same phase.
  for (int l = 0; l < 4; ++l) EXPECT_NEAR(r.levelGamma[l], r.gamma, 1e-6);
  EXPECT_LE(r.completenessDefect, 1e-10);
  EXPECT_LE(r.reconstructionError, 1e-8);
}

TEST(Berry, ExcitedLevelAndEllipse) {
  const auto m = skewed();
  auto L = circle(m, 100 / m.gap());
  L.curve = Curve::Ellipse;
  L.r1 = 0.9;
  L.r2 = 0.4;
  L.u = {std::cos(0.4), std::sin(0.4), 0};
  L.w = {-std::sin(0.4), std::cos(0.4), 0};
  const auto r = adiabaticTransport(displacedOscillatorFamily(m), L, 2);
  EXPECT_NEAR(r.gamma, oracleGamma(m, L), 0.01 * std::abs(oracleGamma(m, L)));
  EXPECT_LE(r.leakage, 1e-2);
}

TEST(Berry, OrientationReversalFlipsSign) {
  const auto m = skewed();
  const auto fam = displacedOscillatorFamily(m);
  // Long enough for both senses: the co-rotating one nearly resonates below about 30 / gap.
  auto L = circle(m, 50 / m.gap());
  TransportOptions o;
  o.substeps = 2;
  const double g = adiabaticTransport(fam, L, 0, o).gamma;
  L.reversed = true;
  EXPECT_NEAR(adiabaticTransport(fam, L, 0, o).gamma, -g, 1e-8);
}

TEST(Berry, LoopTraversedTwiceDoublesPhase) {
  const auto m = skewed();
  const auto fam = displacedOscillatorFamily(m);
  auto L = circle(m, 50 / m.gap());
  TransportOptions o;
  o.substeps = 2;
  const double g1 = adiabaticTransport(fam, L, 0, o).gamma;
  L.turns = 2;
  L.samples *= 2;
  L.T *= 2;
  EXPECT_NEAR(adiabaticTransport(fam, L, 0, o).gamma, wrapAngle(2 * g1), 1e-6);
}

TEST(Berry, ZeroAreaLoopHasNoPhase) {
  const auto m = skewed();
  auto L = circle(m, 50 / m.gap());
  L.curve = Curve::Segment;
  L.u = {0.6, 0.8, 0};
  TransportOptions o;
  o.substeps = 2;
  EXPECT_LE(std::abs(adiabaticTransport(displacedOscillatorFamily(m), L, 0, o).gamma), 1e-8);
}

TEST(Berry, OverlapProductIsGaugeInvariant) {
  const auto m = skewed();
  const auto fam = displacedOscillatorFamily(m);
  const auto L = circle(m, 1.0);
  std::vector<ComplexVector> states;
  for (int j = 0; j < L.samples; ++j) {
    const double t = L.time(j);
    states.push_back(instantaneousEigensystem(fam.hamiltonian(L.position(t), L.velocity(t))).vectors.col(0));
  }
  const double g = overlapPhase(states);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> chi(-kPi, kPi);
  for (auto& s : states) s *= std::polar(1.0, chi(rng));
  EXPECT_NEAR(overlapPhase(states), g, 1e-12);
}

TEST(Berry, DiabaticLoopIsReported) {
  const auto m = skewed();
  const auto L = circle(m, 0.5 / m.gap());
  try {
    adiabaticTransport(displacedOscillatorFamily(m), L, 0);
    FAIL() << "expected NotAdiabatic";
  } catch (const NotAdiabatic& e) {
    EXPECT_GT(e.result.leakage, 1e-2);
    EXPECT_NE(std::string(e.what()).find("|c_1|^2="), std::string::npos);
  }
}

TEST(Berry, AdiabaticityScan) {
  const auto m = skewed();
  const auto L = circle(m, 1.0);
  const auto rep = adiabaticityScan(displacedOscillatorFamily(m), L, 0, {100 / m.gap(), 25 / m.gap(), 50 / m.gap()});
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rep.rows[0].T, 25 / m.gap());
  EXPECT_TRUE(rep.leakageDecreasing);
  const double oracle = oracleGamma(m, L);
  EXPECT_NEAR(rep.rows.back().gamma, oracle, 0.01 * std::abs(oracle));
  // The phase route converges on the overlap route once non-adiabatic terms are extrapolated away.
  EXPECT_NEAR(rep.extrapolatedGamma, rep.rows.back().gamma, 0.01 * std::abs(oracle));
  EXPECT_GT(rep.rows[0].phaseError, rep.rows[1].phaseError);
  EXPECT_GT(rep.rows[1].phaseError, rep.rows[2].phaseError);
  EXPECT_THROW(adiabaticityScan(displacedOscillatorFamily(m), L, 0, {25, 50}), ConfigError);
  const auto csv = scanCsv(rep, L.closureDefect()).str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "T,a_star,gamma,gamma_from_phase,leakage,closure_defect");
}

namespace {

// Loop centred on the node x = 2 of the y-polarized standing wave, where its mode function is
// odd in x - 2 so every deformed loop closes.
struct ResolvedSetup {
  hybrid::HybridSystem sys;
  DisplacedOscillator model;
  LoopProtocol loop;

  explicit ResolvedSetup(double e, Vec3 centre = {2.0, 1.5, 0.5})
      : sys(charged(lattice::standingWave(cube(), 0, 1), e, centre)) {
    model.origin = centre;
    loop.center = centre;
    loop.r1 = loop.r2 = 0.7;
    loop.T = 20;
    loop.samples = 128;
  }
  ResolvedPhaseTable table(double width, std::vector<double> offsets = {-2, -1, 0, 1, 2}) const {
    ResolvedOptions o;
    o.width = width;
    o.offsets = std::move(offsets);
    o.workers = 2;
    return configurationResolvedPhase(displacedOscillatorFamily(model), loop, 0, sys, 0, 0, o);
  }
};

}  // namespace

TEST(ResolvedPhase, ConstantWithoutCharge) {
  const ResolvedSetup s(0.0);
  const auto t = s.table(0.5);
  ASSERT_EQ(t.gamma.size(), 5u);
  for (double g : t.gamma) EXPECT_EQ(g, t.meanFieldGamma);
  EXPECT_EQ(t.spread, 0.0);
}

TEST(ResolvedPhase, ConvergesToMeanFieldAsWidthVanishes) {
  const ResolvedSetup s(1.0);
  const double transport = adiabaticTransport(displacedOscillatorFamily(s.model), s.loop, 0).gamma;
  double previous = 1e300;
  for (double width : {1e-3, 1e-5, 1e-7}) {
    const auto t = s.table(width);
    EXPECT_EQ(t.meanFieldGamma, transport);
    double dev = 0;
    for (double g : t.gamma) dev = std::max(dev, std::abs(g - transport));
    EXPECT_GT(dev, 0.0);
    EXPECT_LT(dev, previous / 50);
    previous = dev;
    if (width == 1e-7) {
      EXPECT_LE(dev, 1e-6);
      EXPECT_LE(std::abs(t.averagedGamma - transport), 1e-6);
    }
    for (double d : t.closureDefect) EXPECT_LE(d, 1e-8);
  }
}

TEST(ResolvedPhase, SpreadIsLinearInWidth) {
  const ResolvedSetup s(1.0);
  const double sigma = 2e-4;
  const auto t1 = s.table(sigma, {-1, 1});
  const auto t2 = s.table(2 * sigma, {-1, 1});
  EXPECT_NEAR(t2.spread / t1.spread, 2.0, 1e-3);
  // Finite-difference derivative at a much smaller step as its own oracle.
  const double h = 1e-6;
  const auto d = s.table(h, {-1, 1});
  const double slope = (d.gamma[1] - d.gamma[0]) / (2 * h);
  EXPECT_NEAR(t1.spread / (2 * sigma), std::abs(slope), 1e-3 * std::abs(slope));
  const auto csv = resolvedCsv(t1, s.loop.T).str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(ResolvedPhase, OpenDeformedLoopIsProtocolError) {
  const ResolvedSetup s(1.0, {1.5, 1.5, 0.5});
  try {
    s.table(0.1);
    FAIL() << "expected a closure error";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("does not close"), std::string::npos);
  }
}
