#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "svmqch/core.hpp"
#include "svmqch/grid.hpp"
#include "svmqch/hybrid.hpp"
#include "svmqch/io.hpp"

// Adiabatic transport of field eigenstates around closed loops of the classical position and the
// geometric phase picked up on the way. gamma = i oint <n|d n> is evaluated as
// -arg prod <phi_j|phi_{j+1}>, which is independent of the eigenvector phase convention.
namespace svmqch::geomphase {

enum class Curve { Circle, Ellipse, Segment };

/// Closed path t -> f(t), t in [0, T]. The angle follows phi = 2 pi [n s - sin(2 pi n s)/2pi],
/// s = t/T, n = turns, so the drive starts and stops smoothly on every turn. Circles and ellipses run counter-clockwise in
/// the (u, w) plane unless reversed; a segment goes out along u and back.
struct LoopProtocol {
  Curve curve = Curve::Circle;
  Vec3 center{0, 0, 0};
  Vec3 u{1, 0, 0}, w{0, 1, 0};
  double r1 = 1, r2 = 1;
  double T = 100;
  int samples = 256;
  int turns = 1;
  bool reversed = false;

  double angle(double t) const {
    const double s = t / T;
    const double phi = 2 * kPi * (turns * s - std::sin(2 * kPi * turns * s) / (2 * kPi));
    return reversed ? -phi : phi;
  }
  double angleRate(double t) const {
    const double phiDot = 2 * kPi * turns * (1 - std::cos(2 * kPi * turns * t / T)) / T;
    return reversed ? -phiDot : phiDot;
  }
  Vec3 position(double t) const {
    const double phi = angle(t);
    if (curve == Curve::Segment) return center + (r1 * std::sin(phi)) * u;
    const double b = curve == Curve::Circle ? r1 : r2;
    return center + (r1 * std::sin(phi)) * u + (-b * std::cos(phi)) * w;
  }
  Vec3 velocity(double t) const {
    const double phi = angle(t), d = angleRate(t);
    if (curve == Curve::Segment) return (r1 * std::cos(phi) * d) * u;
    const double b = curve == Curve::Circle ? r1 : r2;
    return (r1 * std::cos(phi) * d) * u + (b * std::sin(phi) * d) * w;
  }
  double time(int j) const { return T * j / samples; }
  double closureDefect() const { return norm(position(T) - position(0)); }

  void validate() const {
    if (!(T > 0)) throw ConfigError("loop duration must be > 0");
    if (samples < 16) throw ConfigError("loop needs at least 16 samples");
    if (turns < 1) throw ConfigError("loop turns must be >= 1");
    if (closureDefect() > 1e-12) throw ConfigError("loop does not close: defect " + io::formatDouble(closureDefect()));
  }
};

/// Field Hamiltonian as a function of the classical position and velocity. `delta`, when set,
/// returns the diagonal of the generator difference at (f, v); it is added to the evolution and
/// to the dynamical phase.
struct ParametricFamily {
  std::function<quantum::GridHamiltonian(const Vec3& f, const Vec3& v)> hamiltonian;
  std::function<std::vector<double>(const Vec3& f, const Vec3& v)> delta;
};

/// One mode driven in both quadratures: H = w^2 (a - X)^2 / 2c^2 + c^2 (pi - P)^2 / 2 with
/// X = gX.(f - origin), P = gP.(f - origin).
struct DisplacedOscillator {
  double omega = 1;
  PhysicalConstants pc;
  int points = 48;
  double halfWidth = 12;  // in ground-state widths
  Vec3 origin{0, 0, 0};
  Vec3 gX{1, 0, 0}, gP{0, 1, 0};

  double groundWidth() const { return std::sqrt(pc.hbar * pc.c * pc.c / omega); }
  double gap() const { return pc.hbar * omega; }
};

inline ParametricFamily displacedOscillatorFamily(const DisplacedOscillator& m) {
  const quantum::ProductGrid grid({quantum::Axis::centered(m.points, m.halfWidth * m.groundWidth())});
  const quantum::GridHamiltonian base(grid, m.pc.hbar);
  const auto a = grid.tabulate([](std::span<const double> x) { return x[0]; });
  ParametricFamily fam;
  fam.hamiltonian = [m, base, a](const Vec3& f, const Vec3&) {
    const double X = dot(m.gX, f - m.origin), P = dot(m.gP, f - m.origin);
    quantum::GridHamiltonian H = base;
    H.addKinetic(0, 1 / (m.pc.c * m.pc.c), std::vector<double>(a.size(), P));
    auto& W = H.potential();
    for (std::size_t i = 0; i < a.size(); ++i) W[i] = m.omega * m.omega * (a[i] - X) * (a[i] - X) / (2 * m.pc.c * m.pc.c);
    return H;
  };
  return fam;
}

/// Field sector of a hybrid system with one particle driven along the loop (canonical momentum
/// M v); the generator difference is included.
inline ParametricFamily hybridFamily(const hybrid::HybridSystem& sys, std::size_t particle) {
  ParametricFamily fam;
  auto classical = [&sys, particle](const Vec3& f, const Vec3& v) {
    hybrid::HybridState s;
    for (const auto& P : sys.spec().particles) {
      s.f.push_back(P.f);
      s.p.push_back(P.p);
    }
    s.f.at(particle) = f;
    s.p.at(particle) = sys.spec().particles[particle].mass * v;
    return s;
  };
  fam.hamiltonian = [&sys, classical](const Vec3& f, const Vec3& v) {
    const auto s = classical(f, v);
    return sys.fieldHamiltonian(s.f, s.p);
  };
  fam.delta = [&sys, classical](const Vec3& f, const Vec3& v) { return sys.generatorDifference(classical(f, v)); };
  return fam;
}

/// Full eigen-decomposition of a grid Hamiltonian. Columns of `vectors` have unit Euclidean norm
/// (the continuum normalization divides by sqrt of the grid weight); the largest-magnitude
/// component of each is real and positive.
struct EigenSystem {
  quantum::ProductGrid grid;
  std::vector<double> energies;
  ComplexMatrix vectors;
  double gap = 0;  // smallest spacing touching the tracked levels

  quantum::WaveFunction state(std::size_t n) const {
    quantum::WaveFunction w(grid);
    w.psi = vectors.col(static_cast<Eigen::Index>(n)) / std::sqrt(grid.weight());
    return w;
  }
};

inline constexpr std::size_t kMaxDenseDimension = 4096;

inline EigenSystem instantaneousEigensystem(const quantum::GridHamiltonian& H, std::size_t tracked = 1) {
  const std::size_t n = H.grid().size();
  if (n > kMaxDenseDimension) throw DomainError("field grid of " + std::to_string(n) + " points exceeds the diagonalization cap");
  if (tracked == 0 || tracked >= n) throw DomainError("tracked level count out of range");
  ComplexMatrix M = H.dense();
  M = (0.5 * (M + M.adjoint())).eval();
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> eig(M);
  if (eig.info() != Eigen::Success) throw NumericalError("eigen-decomposition failed");
  EigenSystem es;
  es.grid = H.grid();
  es.energies.assign(eig.eigenvalues().data(), eig.eigenvalues().data() + n);
  es.vectors = eig.eigenvectors();
  for (Eigen::Index c = 0; c < es.vectors.cols(); ++c) {
    Eigen::Index big = 0;
    es.vectors.col(c).cwiseAbs().maxCoeff(&big);
    const Complex z = es.vectors(big, c);
    es.vectors.col(c) *= std::conj(z) / std::abs(z);
  }
  es.gap = es.energies[1] - es.energies[0];
  for (std::size_t l = 1; l < tracked; ++l) es.gap = std::min(es.gap, es.energies[l + 1] - es.energies[l]);
  if (es.gap < 1e-10) throw DomainError("degenerate levels: gap " + io::formatDouble(es.gap));
  const double defect = (es.vectors.adjoint() * es.vectors - ComplexMatrix::Identity(es.vectors.cols(), es.vectors.cols()))
                            .cwiseAbs()
                            .maxCoeff();
  if (defect > 1e-10) throw NumericalError("eigenvectors not orthonormal: " + io::formatDouble(defect));
  return es;
}

/// Wraps an angle into (-pi, pi].
inline double wrapAngle(double x) {
  x = std::remainder(x, 2 * kPi);
  return x <= -kPi ? x + 2 * kPi : x;
}

/// -arg of the closed overlap product of a sequence of unit states (the last state connects back
/// to the first).
inline double overlapPhase(const std::vector<ComplexVector>& states) {
  if (states.size() < 2) throw DomainError("overlap product needs at least 2 states");
  double arg = 0;
  for (std::size_t j = 0; j < states.size(); ++j) {
    const Complex o = states[j].dot(states[(j + 1) % states.size()]);
    if (std::abs(o) < 0.5) throw NumericalError("neighbouring loop states overlap by " + io::formatDouble(std::abs(o)) + "; refine the loop");
    arg += std::arg(o);
  }
  return wrapAngle(-arg);
}

/// Level n along a sampled path, one unit vector per sample.
inline std::vector<ComplexVector> levelStates(const std::vector<EigenSystem>& path, std::size_t n) {
  std::vector<ComplexVector> out;
  for (const auto& es : path) out.push_back(es.vectors.col(static_cast<Eigen::Index>(n)));
  return out;
}

/// Geometric phase of level n along an open-ended sample list of a closed path (the first sample
/// stands in for the last).
inline double loopPhase(const ParametricFamily& fam, const std::vector<Vec3>& f, const std::vector<Vec3>& v,
                        std::size_t n) {
  std::vector<ComplexVector> states;
  for (std::size_t j = 0; j < f.size(); ++j)
    states.push_back(instantaneousEigensystem(fam.hamiltonian(f[j], v[j]), n + 1).vectors.col(static_cast<Eigen::Index>(n)));
  return overlapPhase(states);
}

struct TransportOptions {
  std::size_t levels = 8;      // levels tracked for c_nl and the reconstruction
  int substeps = 8;            // propagation steps per loop sample
  double leakageTarget = 1e-2;
  bool enforce = true;         // throw NotAdiabatic when leakage exceeds the target
};

struct BerryPhaseResult {
  std::size_t level = 0;
  double T = 0;
  double gamma = 0;           // -arg of the overlap product, in (-pi, pi]
  double gammaFromPhase = 0;  // total phase + dynamical phase, wrapped
  double totalPhase = 0;      // arg <phi_n(0)|Psi(T)>
  double dynamicalPhase = 0;  // int (E_n + <H_delta>) dt / hbar
  double leakage = 0;         // 1 - |c_nn(T)|^2
  double minGap = 0;            // smallest spacing next to level n along the loop
  double closureDefect = 0;
  double completenessDefect = 0;     // max_t |sum_l |c_nl|^2 - 1| over the full basis
  double reconstructionError = 0;    // |sum_l c_nl e^{-iF_l/hbar} phi_l - Psi(T)|
  std::vector<double> convergence;   // gamma from N/4, N/2, N samples
  std::vector<double> levelWeights;  // |c_nl(T)|^2 for the tracked levels
  std::vector<double> levelGamma;    // geometric phase of each tracked level
  std::vector<double> times, energy; // E_n at the loop samples
};

class NotAdiabatic : public NumericalError {
 public:
  NotAdiabatic(const std::string& what, BerryPhaseResult r) : NumericalError(what), result(std::move(r)) {}
  BerryPhaseResult result;
};

namespace detail {

inline double trapezoid(const std::vector<double>& y, double h) {
  double s = 0;
  for (std::size_t j = 0; j + 1 < y.size(); ++j) s += 0.5 * h * (y[j] + y[j + 1]);
  return s;
}

inline quantum::GridHamiltonian drivenHamiltonian(const ParametricFamily& fam, const Vec3& f, const Vec3& v) {
  auto H = fam.hamiltonian(f, v);
  if (fam.delta) H.addPotential(fam.delta(f, v));
  return H;
}

}  // namespace detail

/// Evolves phi_n(0) under the driven Hamiltonian around the loop and extracts the geometric phase.
inline BerryPhaseResult adiabaticTransport(const ParametricFamily& fam, const LoopProtocol& loop, std::size_t n,
                                           const TransportOptions& opt = {}) {
  loop.validate();
  if (n >= opt.levels) throw DomainError("level index must be below the tracked level count");
  if (opt.substeps < 1) throw ConfigError("substeps must be >= 1");
  const int N = loop.samples;
  const double hbar = fam.hamiltonian(loop.position(0), loop.velocity(0)).hbar();
  const double h = loop.T / N;

  BerryPhaseResult r;
  r.level = n;
  r.T = loop.T;
  r.closureDefect = loop.closureDefect();
  std::vector<EigenSystem> path;
  std::vector<std::vector<double>> levelEnergy(opt.levels);
  std::vector<double> deltaMean;
  r.minGap = 1e300;
  for (int j = 0; j < N; ++j) {
    const double t = loop.time(j);
    const Vec3 f = loop.position(t), v = loop.velocity(t);
    path.push_back(instantaneousEigensystem(fam.hamiltonian(f, v), opt.levels));
    const auto& E = path.back().energies;
    r.minGap = std::min(r.minGap, E[n + 1] - E[n]);
    if (n > 0) r.minGap = std::min(r.minGap, E[n] - E[n - 1]);
    for (std::size_t l = 0; l < opt.levels; ++l) levelEnergy[l].push_back(path.back().energies[l]);
    double d = 0;
    if (fam.delta) {
      const auto D = fam.delta(f, v);
      const auto col = path.back().vectors.col(static_cast<Eigen::Index>(n));
      for (std::size_t i = 0; i < D.size(); ++i) d += D[i] * std::norm(col[static_cast<Eigen::Index>(i)]);
    }
    deltaMean.push_back(d);
    r.times.push_back(t);
    r.energy.push_back(path.back().energies[n]);
  }
  // Periodic closure: the sample at T is the sample at 0.
  for (auto& e : levelEnergy) e.push_back(e.front());
  deltaMean.push_back(deltaMean.front());
  r.times.push_back(loop.T);
  r.energy.push_back(r.energy.front());

  for (std::size_t l = 0; l < opt.levels; ++l) r.levelGamma.push_back(overlapPhase(levelStates(path, l)));
  r.gamma = r.levelGamma[n];
  for (int stride : {4, 2}) {
    if (N % stride != 0) continue;
    std::vector<ComplexVector> sub;
    for (int j = 0; j < N; j += stride) sub.push_back(path[static_cast<std::size_t>(j)].vectors.col(static_cast<Eigen::Index>(n)));
    r.convergence.push_back(overlapPhase(sub));
  }
  r.convergence.push_back(r.gamma);

  ComplexVector psi = path.front().vectors.col(static_cast<Eigen::Index>(n));
  auto completeness = [&](const EigenSystem& es) {
    return std::abs((es.vectors.adjoint() * psi).squaredNorm() - 1.0);
  };
  r.completenessDefect = completeness(path.front());
  const double dt = h / opt.substeps;
  for (int j = 0; j < N; ++j) {
    for (int s = 0; s < opt.substeps; ++s) {
      const double tm = loop.time(j) + (s + 0.5) * dt;
      const auto H = detail::drivenHamiltonian(fam, loop.position(tm), loop.velocity(tm));
      quantum::propagate([&](const ComplexVector& x) { return H.apply(x); }, psi, dt, hbar);
    }
    r.completenessDefect = std::max(r.completenessDefect, completeness(path[static_cast<std::size_t>((j + 1) % N)]));
  }

  const EigenSystem& end = path.front();
  const ComplexVector c = end.vectors.adjoint() * psi;
  for (std::size_t l = 0; l < opt.levels; ++l) r.levelWeights.push_back(std::norm(c[static_cast<Eigen::Index>(l)]));
  r.leakage = std::max(0.0, 1.0 - r.levelWeights[n]);
  r.totalPhase = std::arg(c[static_cast<Eigen::Index>(n)]);
  std::vector<double> En = levelEnergy[n];
  for (std::size_t j = 0; j < En.size(); ++j) En[j] += deltaMean[j];
  r.dynamicalPhase = detail::trapezoid(En, h) / hbar;
  r.gammaFromPhase = wrapAngle(r.totalPhase + r.dynamicalPhase);

  // Psi(T) = sum_l c_nl e^{-i F_l / hbar} phi_l with F_l = int E_l dt - hbar gamma_l.
  ComplexVector recon = ComplexVector::Zero(psi.size());
  for (std::size_t l = 0; l < opt.levels; ++l) {
    const double F = detail::trapezoid(levelEnergy[l], h) - hbar * r.levelGamma[l];
    const Complex cnl = c[static_cast<Eigen::Index>(l)] * std::exp(Complex(0, F / hbar));
    recon += cnl * std::exp(Complex(0, -F / hbar)) * end.vectors.col(static_cast<Eigen::Index>(l));
  }
  r.reconstructionError = (recon - psi).norm();

  if (opt.enforce && r.leakage > opt.leakageTarget) {
    std::string spectrum;
    for (std::size_t l = 0; l < r.levelWeights.size(); ++l)
      spectrum += (l ? ", " : "") + std::string("|c_") + std::to_string(l) + "|^2=" + io::formatDouble(r.levelWeights[l]);
    throw NotAdiabatic("not adiabatic: leakage " + io::formatDouble(r.leakage) + " above " +
                           io::formatDouble(opt.leakageTarget) + " (" + spectrum + ")",
                       r);
  }
  return r;
}

/// Geometric phase resolved by the frozen amplitude a* of one mode. The loop is taken as the
/// mean-field path; for each offset s = a* - centroid the path is deformed by the quasi-trajectory
/// equation of the hybrid system and gamma is recomputed. The marginal of a* is a Gaussian of the
/// given width about the centroid; offsets are in units of that width.
struct ResolvedOptions {
  double centroid = 0;
  double width = 1;
  std::vector<double> offsets{-2, -1, 0, 1, 2};
  double floor = 1e-6;
  unsigned workers = 1;
};

struct ResolvedPhaseTable {
  std::vector<double> aStar, gamma, closureDefect;
  double meanFieldGamma = 0;  // gamma on the undeformed loop
  double averagedGamma = 0;   // marginal-weighted mean of gamma(a*)
  double spread = 0;          // max - min of gamma(a*)
  std::vector<std::string> warnings;
};

inline ResolvedPhaseTable configurationResolvedPhase(const ParametricFamily& fam, const LoopProtocol& loop, std::size_t n,
                                                     const hybrid::HybridSystem& sys, std::size_t particle,
                                                     std::size_t mode, const ResolvedOptions& opt = {}) {
  loop.validate();
  if (!(opt.width > 0)) throw ConfigError("fluctuation width must be > 0");
  const int N = loop.samples;
  hybrid::MeanFieldPath path;
  std::vector<Vec3> v0;
  for (int j = 0; j <= N; ++j) {
    path.t.push_back(loop.time(j));
    path.f.push_back(loop.position(loop.time(j)));
    v0.push_back(loop.velocity(loop.time(j)));
    path.aStar.push_back(opt.centroid);
  }
  const int G = 801;
  std::vector<double> rho(G);
  for (int i = 0; i < G; ++i) {
    const double x = -10 + 20.0 * i / (G - 1);
    path.marginalGrid.push_back(opt.centroid + x * opt.width);
    rho[static_cast<std::size_t>(i)] = std::exp(-x * x / 2) / (std::sqrt(2 * kPi) * opt.width);
  }
  path.marginal.assign(path.t.size(), rho);

  std::vector<double> s;
  for (double u : opt.offsets) s.push_back(u * opt.width);
  const auto table = hybrid::quasiTrajectoryTable(sys, path, particle, mode, s, opt.floor, opt.workers);

  ResolvedPhaseTable out;
  out.warnings = table.warnings;
  const auto& P = sys.spec().particles.at(particle);
  const double coef = P.charge / (sys.spec().pc.c * P.mass);
  const Vec3 L = sys.cell();
  auto image = [&](Vec3 d) {
    for (int i = 0; i < 3; ++i)
      if (L[i] > 0) d[i] -= L[i] * std::round(d[i] / L[i]);
    return d;
  };
  const std::size_t R = table.offsets.size();
  out.aStar.resize(R);
  out.gamma.resize(R);
  out.closureDefect.resize(R);
  for (std::size_t r = 0; r < R; ++r) {
    out.aStar[r] = opt.centroid + table.offsets[r];
    const auto& f = table.f[r];
    out.closureDefect[r] = norm(image(f.back() - f.front()));
    if (out.closureDefect[r] > 1e-8)
      throw DomainError("protocol error: loop at a* = " + io::formatDouble(out.aStar[r]) +
                        " does not close, defect " + io::formatDouble(out.closureDefect[r]));
  }
  auto job = [&](std::size_t r) {
    // Keep the deformed path continuous (unwrapped) so the family sees the same loop.
    std::vector<Vec3> f{table.f[r].front()}, v;
    for (std::size_t j = 1; j + 1 < table.f[r].size(); ++j) f.push_back(f.back() + image(table.f[r][j] - table.f[r][j - 1]));
    for (std::size_t j = 0; j < f.size(); ++j)
      v.push_back(v0[j] - (coef * table.offsets[r]) * sys.sampleModes(f[j]).value[mode]);
    out.gamma[r] = loopPhase(fam, f, v, n);
  };
  const unsigned nw = std::max(1u, std::min<unsigned>(opt.workers, static_cast<unsigned>(std::max<std::size_t>(R, 1))));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < nw; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t r = w; r < R; r += nw) job(r);
    });
  for (auto& th : pool) th.join();

  out.meanFieldGamma = loopPhase(fam, std::vector<Vec3>(path.f.begin(), path.f.end() - 1),
                                 std::vector<Vec3>(v0.begin(), v0.end() - 1), n);
  if (R > 0) {
    double ws = 0, g = 0;
    for (std::size_t r = 0; r < R; ++r) {
      const double x = table.offsets[r] / opt.width, w = std::exp(-x * x / 2);
      ws += w;
      // Unwrap relative to the mean-field value before averaging.
      g += w * (out.meanFieldGamma + wrapAngle(out.gamma[r] - out.meanFieldGamma));
    }
    out.averagedGamma = wrapAngle(g / ws);
    const auto [lo, hi] = std::minmax_element(out.gamma.begin(), out.gamma.end());
    out.spread = *hi - *lo;
  }
  return out;
}

struct ScanRow {
  double T = 0;
  double leakage = 0;
  double gamma = 0;
  double gammaFromPhase = 0;
  double phaseError = 0;  // |gammaFromPhase - extrapolated limit|
};

struct AdiabaticityReport {
  std::vector<ScanRow> rows;  // sorted by T
  double extrapolatedGamma = 0;
  bool leakageDecreasing = false;
};

/// Repeats the transport for each duration (independent jobs). The T -> infinity limit of the
/// phase-derived gamma is extrapolated from the three longest runs.
inline AdiabaticityReport adiabaticityScan(const ParametricFamily& fam, const LoopProtocol& loop, std::size_t n,
                                           std::vector<double> durations, TransportOptions opt = {},
                                           unsigned workers = 1) {
  if (durations.size() < 3) throw ConfigError("adiabaticity scan needs at least 3 durations");
  std::sort(durations.begin(), durations.end());
  opt.enforce = false;
  AdiabaticityReport rep;
  rep.rows.resize(durations.size());
  auto job = [&](std::size_t i) {
    LoopProtocol p = loop;
    p.T = durations[i];
    const auto r = adiabaticTransport(fam, p, n, opt);
    rep.rows[i] = {p.T, r.leakage, r.gamma, r.gammaFromPhase, 0};
  };
  const unsigned nw = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(durations.size())));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < nw; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < durations.size(); i += nw) job(i);
    });
  for (auto& th : pool) th.join();

  // Quadratic in x = 1/T through the three longest runs, evaluated at x = 0.
  const std::size_t m = rep.rows.size();
  const double ref = rep.rows.back().gammaFromPhase;
  double limit = 0;
  for (std::size_t i = m - 3; i < m; ++i) {
    double w = 1;
    for (std::size_t j = m - 3; j < m; ++j)
      if (j != i) w *= (1 / rep.rows[j].T) / (1 / rep.rows[j].T - 1 / rep.rows[i].T);
    limit += w * (ref + wrapAngle(rep.rows[i].gammaFromPhase - ref));
  }
  rep.extrapolatedGamma = wrapAngle(limit);
  rep.leakageDecreasing = true;
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    rep.rows[i].phaseError = std::abs(wrapAngle(rep.rows[i].gammaFromPhase - rep.extrapolatedGamma));
    if (i > 0 && !(rep.rows[i].leakage < rep.rows[i - 1].leakage)) rep.leakageDecreasing = false;
  }
  return rep;
}

inline io::CsvTable scanCsv(const AdiabaticityReport& rep, double closureDefect) {
  io::CsvTable t({"T", "a_star", "gamma", "gamma_from_phase", "leakage", "closure_defect"});
  for (const auto& r : rep.rows) t.row({r.T, 0.0, r.gamma, r.gammaFromPhase, r.leakage, closureDefect});
  return t;
}

inline io::CsvTable resolvedCsv(const ResolvedPhaseTable& tab, double T) {
  io::CsvTable t({"T", "a_star", "gamma", "gamma_from_phase", "leakage", "closure_defect"});
  for (std::size_t r = 0; r < tab.aStar.size(); ++r)
    t.row({T, tab.aStar[r], tab.gamma[r], std::nan(""), std::nan(""), tab.closureDefect[r]});
  return t;
}

}  // namespace svmqch::geomphase
