#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "svmqch/config.hpp"
#include "svmqch/geomphase.hpp"
#include "svmqch/hybrid.hpp"
#include "svmqch/lattice.hpp"
#include "svmqch/quantum.hpp"
#include "svmqch/sde.hpp"

// The five experiment families. Each runner returns its outputs in memory; the CLI writes them.
namespace svmqch::experiments {

using nlohmann::json;

struct Criterion {
  std::string name;
  double value = 0;
  std::string relation;  // "<=" or ">="
  double threshold = 0;
  bool pass = false;
};

struct ExperimentResult {
  std::vector<Criterion> criteria;
  std::vector<std::pair<std::string, std::string>> files;  // name, content
  json summary = json::object();

  bool passed() const {
    return std::all_of(criteria.begin(), criteria.end(), [](const Criterion& c) { return c.pass; });
  }
  void atMost(const std::string& name, double value, double threshold) {
    criteria.push_back({name, value, "<=", threshold, value <= threshold});
  }
  void atLeast(const std::string& name, double value, double threshold) {
    criteria.push_back({name, value, ">=", threshold, value >= threshold});
  }
  void add(const std::string& name, const io::CsvTable& table) { files.emplace_back(name, table.str()); }
};

inline PhysicalConstants constants(const config::ExperimentConfig& c) { return {c.physical.hbar, c.physical.c}; }

inline lattice::LatticeSpec latticeSpec(const config::ExperimentConfig& c) {
  lattice::LatticeSpec s;
  s.dimension = c.lattice.dimension;
  s.dims = {1, 1, 1};
  for (int a = 0; a < s.dimension; ++a) s.dims[a] = c.lattice.n;
  s.spacing = c.lattice.spacing;
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// svm-closure: stochastic paths driven by the drifts of an evolving oscillator wavefunction.

inline ExperimentResult svmClosure(const config::ExperimentConfig& c) {
  ExperimentResult out;
  const double hbar = c.physical.hbar, m = c.physical.mass, w = c.physical.omega;
  const double sigmaGround = std::sqrt(hbar / (2 * m * w));
  const double sigma0 = sigmaGround * c.state.squeeze;
  const double L = c.modes.halfWidth * std::sqrt(hbar / (m * w)) + std::abs(c.state.x0);
  const quantum::ProductGrid grid({quantum::Axis::centered(256, L)});
  quantum::GridHamiltonian H(grid, hbar);
  H.addKinetic(0, m);
  H.addPotential(grid.tabulate([&](std::span<const double> x) { return 0.5 * m * w * w * x[0] * x[0]; }));
  auto psi = quantum::WaveFunction::fromFunction(grid, [&](std::span<const double> x) {
    const double d = x[0] - c.state.x0;
    return std::exp(Complex(-d * d / (4 * sigma0 * sigma0), c.state.p0 * x[0] / hbar));
  });
  psi.normalize();

  // Drift snapshots every `every` SDE steps, linearly interpolated in between.
  const long steps = c.integrator.steps;
  const long every = std::max(1L, std::min(10L, steps / 3));
  const double dt = c.integrator.dt, dT = dt * every;
  quantum::DriftTable table(0.0, dT, hbar / m);
  std::vector<std::vector<double>> reference;
  std::vector<double> sampleTimes;
  {
    auto w0 = psi;
    for (long n = 0; n <= steps; n += every) {
      table.push(quantum::driftFromPsi(H, w0, m));
      quantum::propagate(H, w0, dT);
    }
    for (int k = 1; k <= 3; ++k) {
      auto wk = psi;
      const double t = dt * static_cast<double>(steps / 3 * k);
      quantum::propagate(H, wk, t);
      reference.push_back(wk.density());
      sampleTimes.push_back(t);
    }
  }
  const auto x = grid.axis(0).coords();
  const auto init = sde::sampleInverseCdf(x, psi.density(), static_cast<std::size_t>(c.ensemble.paths), c.ensemble.seed);
  const auto drift = table.field();
  sde::IntegrationOptions opt;
  opt.recordStride = static_cast<std::size_t>(steps / 3);
  opt.workers = static_cast<unsigned>(c.ensemble.workers);
  const auto ens = sde::integrateForward(drift, init, static_cast<std::size_t>(steps),
                                         {c.ensemble.seed, 1u << 20, dt}, opt);

  const auto evalGrid = sde::uniformGrid(x.front(), x.back(), 401);
  io::CsvTable dens({"x", "ensemble_t1", "reference_t1", "ensemble_t2", "reference_t2", "ensemble_t3", "reference_t3"});
  std::vector<sde::DensityEstimate> kde;
  for (int k = 1; k <= 3; ++k) {
    const auto col = ens.column(static_cast<std::size_t>(k));
    kde.push_back(sde::estimateDensity(col, evalGrid, sde::silvermanBandwidth(col)));
    const auto& ref = reference[static_cast<std::size_t>(k - 1)];
    auto refAt = [&](double xx) { return hybrid::detail::interpolateLinear(x, ref, xx); };
    const double l1 = sde::l1Distance(kde.back(), refAt);
    // The consistency check needs d rho/dx, so it uses a fourth-order kernel with a derivative bandwidth.
    const auto grad = sde::estimateDensity(col, evalGrid, sde::derivativeBandwidth(col), 4);
    const auto cons = sde::verifyFluxConsistency(drift, grad, sampleTimes[static_cast<std::size_t>(k - 1)]);
    out.atMost("density_l1_t" + std::to_string(k), l1, 0.05);
    out.atMost("consistency_t" + std::to_string(k), cons.relative, 0.05);
    out.summary["times"].push_back(sampleTimes[static_cast<std::size_t>(k - 1)]);
  }
  for (std::size_t i = 0; i < evalGrid.size(); ++i) {
    std::vector<double> row{evalGrid[i]};
    for (int k = 0; k < 3; ++k)
      row.insert(row.end(), {kde[static_cast<std::size_t>(k)].values[i],
                             hybrid::detail::interpolateLinear(x, reference[static_cast<std::size_t>(k)], evalGrid[i])});
    dens.row(row);
  }
  out.add("density.csv", dens);
  out.summary["paths"] = c.ensemble.paths;
  return out;
}

// ---------------------------------------------------------------------------
// field-quantization: projector algebra and the canonical commutator on the lattice.

inline ExperimentResult fieldQuantization(const config::ExperimentConfig& c) {
  ExperimentResult out;
  const auto spec = latticeSpec(c);
  const auto P = lattice::buildProjector(spec);
  const double tol = c.integrator.tolerance;
  const RealMatrix& M = P.matrix();
  const RealMatrix D = lattice::divergenceOperator(spec).matrix;
  std::mt19937_64 rng(c.ensemble.seed);
  std::normal_distribution<double> normal;
  double routes = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(spec.fieldSize());
    for (auto& x : v) x = normal(rng);
    const auto a = P.apply(v), b = P.applyFourier(v);
    for (std::size_t i = 0; i < v.size(); ++i) routes = std::max(routes, std::abs(a[i] - b[i]));
  }
  io::CsvTable res({"check", "value"});
  const std::vector<std::pair<std::string, double>> checks{
      {"idempotent", (M * M - M).cwiseAbs().maxCoeff()},
      {"symmetric", (M - M.transpose()).cwiseAbs().maxCoeff()},
      {"divergence_free", (D * M).cwiseAbs().maxCoeff()},
      {"fourier_route", routes},
      {"commutator", quantum::commutatorResidualAllSites(lattice::decomposeModes(spec), constants(c))},
  };
  for (std::size_t i = 0; i < checks.size(); ++i) {
    out.atMost(checks[i].first, checks[i].second, tol);
    res.row({static_cast<double>(i), checks[i].second});
  }
  out.add("residuals.csv", res);
  const auto basis = lattice::decomposeModes(spec);
  io::CsvTable modes({"index", "omega", "kappa_x", "kappa_y", "kappa_z"});
  for (std::size_t k = 0; k < basis.size(); ++k) {
    const auto& md = basis.modes[k];
    modes.row({static_cast<double>(k), md.omega, md.kappa[0], md.kappa[1], md.kappa[2]});
  }
  out.add("modes.csv", modes);
  for (const auto& [name, v] : checks) out.summary["residuals"][name] = v;
  return out;
}

// ---------------------------------------------------------------------------
// Hybrid families share one particle and a mode set on a cubic lattice.

inline hybrid::HybridSpec hybridSpec(const config::ExperimentConfig& c) {
  const auto lat = latticeSpec(c);
  hybrid::HybridSpec spec;
  spec.basis = c.modes.keep == 0 ? lattice::standingWave(lat, 0, 1, 0.0, c.physical.c)
                                 : lattice::decomposeModes(lat, static_cast<std::size_t>(c.modes.keep));
  spec.pc = constants(c);
  spec.pointsPerMode = c.modes.pointsPerMode;
  spec.halfWidth = c.modes.halfWidth;
  spec.particles.push_back({c.physical.mass, c.physical.charge, c.state.position, c.state.momentum});
  if (norm(c.state.trap) > 0) spec.traps.push_back({c.state.trapCenter, c.state.trap});
  return spec;
}

inline quantum::WaveFunction initialField(const hybrid::HybridSystem& sys, const config::ExperimentConfig& c) {
  const std::vector<double> a(sys.modeCount(), c.state.fieldA), pi(sys.modeCount(), c.state.fieldPi);
  return sys.coherentField(a, pi);
}

inline ExperimentResult hybridDynamics(const config::ExperimentConfig& c) {
  ExperimentResult out;
  const hybrid::HybridSystem sys(hybridSpec(c));
  const double dt = c.integrator.dt;
  const long steps = c.integrator.steps, stride = c.integrator.recordStride;
  auto run = [&](double h, long n, long every) {
    auto s = sys.initialState(initialField(sys, c));
    std::vector<hybrid::HybridState> hist{s};
    for (long k = 1; k <= n; ++k) {
      s = hybrid::stepHybrid(sys, s, h);
      if (k % every == 0 || k == n) hist.push_back(s);
    }
    return hist;
  };
  const auto hist = run(dt, steps, stride);
  const auto ledger = hybrid::energyLedger(sys, hist);
  out.atMost("energy_drift", ledger.relativeDrift, c.integrator.tolerance);
  if (c.integrator.halving) {
    const auto half = hybrid::energyLedger(sys, run(dt / 2, 2 * steps, 2 * stride));
    const double ratio = half.relativeDrift > 0 ? ledger.relativeDrift / half.relativeDrift : 1e300;
    out.atLeast("drift_halving_ratio", ratio, 4.0);
    out.summary["drift_half_dt"] = half.relativeDrift;
  }
  if (c.physical.charge == 0) {
    // Without charge the field evolves freely.
    auto free = initialField(sys, c);
    const double T = hist.back().t;
    quantum::propagate(sys.freeFieldHamiltonian(), free, T);
    const double fidelity = std::norm(free.psi.dot(hist.back().psi.psi) * free.grid.weight());
    out.atLeast("field_fidelity", fidelity, 1 - 1e-8);
  }
  out.add("trajectory.csv", hybrid::hybridCsv(sys, hist));
  io::CsvTable e({"t", "total", "classical", "field"});
  for (std::size_t i = 0; i < ledger.times.size(); ++i)
    e.row({ledger.times[i], ledger.total[i], ledger.classical[i], ledger.field[i]});
  out.add("energy.csv", e);
  out.summary["relative_drift"] = ledger.relativeDrift;
  out.summary["order_parameter"] = hybrid::orderParameter(hist.back());
  return out;
}

// ---------------------------------------------------------------------------
// ehrenfest: configuration-resolved slices along x give the displacement current.

inline ExperimentResult ehrenfest(const config::ExperimentConfig& c) {
  ExperimentResult out;
  const hybrid::HybridSystem sys(hybridSpec(c));
  const hybrid::SliceField field(sys, 0, 0, hybrid::chebyshevNodes(c.state.nodesLo, c.state.nodesHi, c.state.nodes),
                                 initialField(sys, c));
  const auto run = hybrid::runSliceBenchmark(sys, field, {c.state.position}, {c.state.momentum}, c.integrator.dt,
                                             static_cast<std::size_t>(c.integrator.steps));
  const auto r = hybrid::extendedEhrenfest(sys, run.samples);
  const auto route2 = hybrid::displacementFromHistory(field, run);
  double routeGap = 0;
  for (std::size_t n = 0; n < route2.size(); ++n)
    for (std::size_t k = 0; k < route2[n].size(); ++k)
      routeGap = std::max(routeGap, std::abs(route2[n][k] - run.samples[n + 2].displacement[k]));

  out.atMost("ampere_with_displacement", r.maxAmpereWith, c.integrator.tolerance);
  out.atMost("faraday", r.maxFaraday, 1e-8);
  out.atMost("continuity", r.maxContinuity, c.integrator.tolerance);
  if (c.physical.charge == 0) {
    out.atMost("displacement_norm", r.maxDisplacement, 0.0);
  } else {
    out.atLeast("ampere_without_displacement", r.maxAmpereWithout, r.maxDisplacement - r.maxAmpereWith);
    out.atMost("displacement_routes", routeGap, 1e-3 * r.maxDisplacement + 1e-12);
  }
  io::CsvTable t({"t", "ampere_with", "ampere_without", "displacement_norm", "faraday", "faraday_along_path", "div_b"});
  for (std::size_t i = 0; i < r.times.size(); ++i)
    t.row({r.times[i], r.ampereWith[i], r.ampereWithout[i], r.displacementNorm[i], r.faraday[i], r.faradayAlongPath[i],
           r.divB[i]});
  out.add("ehrenfest.csv", t);
  out.summary["charge"] = c.physical.charge;
  out.summary["max_displacement"] = r.maxDisplacement;
  out.summary["max_ampere_with"] = r.maxAmpereWith;
  out.summary["max_ampere_without"] = r.maxAmpereWithout;
  out.summary["max_faraday_along_path"] = r.maxFaradayAlongPath;
  return out;
}

// ---------------------------------------------------------------------------
// berry-loop: displaced-oscillator loop benchmark.

inline geomphase::DisplacedOscillator loopModel(const config::ExperimentConfig& c) {
  geomphase::DisplacedOscillator m;
  m.omega = c.physical.omega;
  m.pc = constants(c);
  m.origin = c.state.position;
  return m;
}

inline geomphase::LoopProtocol loopProtocol(const config::ExperimentConfig& c, const geomphase::DisplacedOscillator& m) {
  geomphase::LoopProtocol L;
  L.curve = c.protocol.curve;
  L.center = m.origin;
  L.r1 = c.protocol.radius;
  L.r2 = c.protocol.radius2;
  L.T = c.protocol.tGap / m.gap();
  L.samples = c.protocol.samples;
  L.turns = c.protocol.turns;
  L.reversed = c.protocol.reversed;
  return L;
}

/// -(signed (X, P) area)/hbar for the unit quadrature map X = f_x, P = f_y.
inline double displacedOscillatorReference(const geomphase::LoopProtocol& L, double hbar) {
  if (L.curve == geomphase::Curve::Segment) return 0;
  const double b = L.curve == geomphase::Curve::Circle ? L.r1 : L.r2;
  const double area = kPi * L.r1 * b * L.turns * (L.reversed ? -1 : 1);
  return geomphase::wrapAngle(-area / hbar);
}

inline ExperimentResult berryLoop(const config::ExperimentConfig& c) {
  ExperimentResult out;
  const auto m = loopModel(c);
  const auto L = loopProtocol(c, m);
  const auto fam = geomphase::displacedOscillatorFamily(m);
  geomphase::TransportOptions opt;
  opt.substeps = c.integrator.substeps;
  opt.leakageTarget = c.protocol.leakageTarget;
  opt.enforce = false;
  const auto r = geomphase::adiabaticTransport(fam, L, 0, opt);
  const double ref = displacedOscillatorReference(L, m.pc.hbar);
  const double err = std::abs(geomphase::wrapAngle(r.gamma - ref));
  if (ref == 0)
    out.atMost("gamma_abs", err, 1e-8);
  else
    out.atMost("gamma_relative_error", err / std::abs(ref), 0.01);
  out.atMost("leakage", r.leakage, c.protocol.leakageTarget);
  out.atMost("completeness", r.completenessDefect, 1e-10);

  io::CsvTable t({"T", "a_star", "gamma", "gamma_from_phase", "leakage", "closure_defect"});
  t.row({L.T, 0.0, r.gamma, r.gammaFromPhase, r.leakage, r.closureDefect});
  if (c.protocol.width > 0) {
    hybrid::HybridSpec hs;
    lattice::LatticeSpec lat = latticeSpec(c);
    hs.basis = lattice::standingWave(lat, 0, 1, 0.0, c.physical.c);
    hs.pc = constants(c);
    hs.pointsPerMode = c.modes.pointsPerMode;
    hs.particles.push_back({c.physical.mass, c.physical.charge, m.origin, {}});
    const hybrid::HybridSystem sys(hs);
    geomphase::ResolvedOptions ro;
    ro.width = c.protocol.width;
    ro.offsets = c.protocol.offsets;
    ro.workers = static_cast<unsigned>(c.ensemble.workers);
    auto resolvedLoop = L;
    const auto tab = geomphase::configurationResolvedPhase(fam, resolvedLoop, 0, sys, 0, 0, ro);
    for (std::size_t i = 0; i < tab.aStar.size(); ++i)
      t.row({L.T, tab.aStar[i], tab.gamma[i], std::nan(""), std::nan(""), tab.closureDefect[i]});
    double dev = 0;
    for (double g : tab.gamma) dev = std::max(dev, std::abs(geomphase::wrapAngle(g - tab.meanFieldGamma)));
    out.summary["resolved_max_deviation"] = dev;
    out.summary["resolved_spread"] = tab.spread;
    out.summary["resolved_warnings"] = tab.warnings;
  }
  out.add("berry.csv", t);
  out.summary["gamma"] = r.gamma;
  out.summary["gamma_reference"] = ref;
  out.summary["gamma_from_phase"] = r.gammaFromPhase;
  out.summary["leakage"] = r.leakage;
  out.summary["min_gap"] = r.minGap;
  out.summary["convergence"] = r.convergence;
  return out;
}

inline ExperimentResult runFamily(const config::ExperimentConfig& c) {
  switch (c.family) {
    case config::Family::SvmClosure: return svmClosure(c);
    case config::Family::FieldQuantization: return fieldQuantization(c);
    case config::Family::HybridDynamics: return hybridDynamics(c);
    case config::Family::Ehrenfest: return ehrenfest(c);
    case config::Family::BerryLoop: return berryLoop(c);
  }
  throw ConfigError("unknown family");
}

}  // namespace svmqch::experiments
