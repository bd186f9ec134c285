#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svmqch/core.hpp"
#include "svmqch/grid.hpp"
#include "svmqch/io.hpp"
#include "svmqch/lattice.hpp"
#include "svmqch/sde.hpp"

namespace svmqch::quantum {

/// Optional charged particle moving along one lattice axis near a fixed anchor point.
struct ParticleSpec {
  double mass = 1;
  double charge = 0;
  double trapOmega = 1;  // harmonic binding, V = M w^2 q^2 / 2
  Vec3 anchor{0, 0, 0};  // lattice position where the mode functions are sampled (dipole coupling)
  int component = 0;     // displacement direction
  int points = 16;
  double halfWidth = 4;  // grid half-width in units of the ground-state width
};

struct ModeSystemSpec {
  lattice::ModeBasis basis;  // kept modes (K <= 4)
  PhysicalConstants pc;
  int pointsPerMode = 40;
  double halfWidth = 10;  // per-mode grid half-width in units of the ground-state width
  std::optional<ParticleSpec> particle;
};

struct Observables {
  double t = 0;
  double q = 0, p = 0, v = 0;
  std::vector<double> a, pi;  // per mode
  double energy = 0;
  double norm = 1;
};

/// Truncated field modes, optionally dipole-coupled to one particle:
/// H = (p - (e/c) sum_k g_k a_k)^2 / 2M + M w^2 q^2 / 2 + sum_k [c^2 pi_k^2 / 2 + w_k^2 a_k^2 / (2 c^2)].
class ModeSystem {
 public:
  explicit ModeSystem(ModeSystemSpec spec) : spec_(std::move(spec)) {
    const std::size_t K = spec_.basis.size();
    if (K == 0 || K > 4) throw ConfigError("mode truncation K must be between 1 and 4");
    if (spec_.pointsPerMode < 4 || spec_.pointsPerMode > 64) throw ConfigError("points per mode must be in [4, 64]");
    std::vector<Axis> axes;
    if (spec_.particle) {
      const auto& P = *spec_.particle;
      if (!(P.mass > 0)) throw ConfigError("particle mass must be > 0");
      const double sq = std::sqrt(spec_.pc.hbar / (2 * P.mass * P.trapOmega));
      axes.push_back(Axis::centered(P.points, P.halfWidth * sq));
      const auto stencil = lattice::interpolationStencil(spec_.basis.spec, P.anchor);
      const std::size_t n = spec_.basis.spec.siteCount();
      for (std::size_t k = 0; k < K; ++k) {
        double g = 0;
        for (const auto& sp : stencil) g += sp.weight * spec_.basis.vectors(static_cast<Eigen::Index>(P.component * n + sp.site), static_cast<Eigen::Index>(k));
        couplings_.push_back(g);
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double w = spec_.basis.modes[k].omega;
      if (!(w > 0)) throw ConfigError("kept modes must have nonzero frequency");
      axes.push_back(Axis::centered(spec_.pointsPerMode, spec_.halfWidth * groundWidth(k)));
    }
    grid_ = ProductGrid(axes);
    if (grid_.size() > 64ull * 64 * 64 * 64) throw ConfigError("product space too large");
    buildHamiltonian();
  }

  const ModeSystemSpec& spec() const { return spec_; }
  const ProductGrid& grid() const { return grid_; }
  const GridHamiltonian& hamiltonian() const { return *H_; }
  std::size_t modeCount() const { return spec_.basis.size(); }
  bool hasParticle() const { return spec_.particle.has_value(); }
  std::size_t modeAxis(std::size_t k) const { return k + (hasParticle() ? 1 : 0); }
  const std::vector<double>& couplings() const { return couplings_; }
  /// Ground-state width of mode k: sigma_a^2 = hbar c^2 / (2 w).
  double groundWidth(std::size_t k) const {
    return std::sqrt(spec_.pc.hbar * spec_.pc.c * spec_.pc.c / (2 * spec_.basis.modes[k].omega));
  }

  /// Product of Gaussians: mode k centred at (a_k, pi_k), particle at (q, p).
  WaveFunction coherentState(std::span<const double> a, std::span<const double> pi, double q = 0, double p = 0) const {
    const double hbar = spec_.pc.hbar;
    return WaveFunction::fromFunction(grid_, [&](std::span<const double> x) {
      Complex logv = 0;
      std::size_t ax = 0;
      if (hasParticle()) {
        const auto& P = *spec_.particle;
        const double s2 = hbar / (2 * P.mass * P.trapOmega);
        logv += -(x[0] - q) * (x[0] - q) / (4 * s2) + Complex(0, p * x[0] / hbar);
        ax = 1;
      }
      for (std::size_t k = 0; k < modeCount(); ++k) {
        const double s2 = groundWidth(k) * groundWidth(k);
        const double y = x[ax + k];
        logv += -(y - a[k]) * (y - a[k]) / (4 * s2) + Complex(0, pi[k] * y / hbar);
      }
      return std::exp(logv);
    });
  }

  WaveFunction groundState() const {
    const std::vector<double> z(modeCount(), 0.0);
    return coherentState(z, z);
  }

  Observables observe(const WaveFunction& w, double t = 0) const {
    Observables o;
    o.t = t;
    o.norm = w.norm();
    const double wt = grid_.weight();
    for (std::size_t k = 0; k < modeCount(); ++k) {
      const std::size_t ax = modeAxis(k);
      o.a.push_back(w.expect(coordinate(ax)));
      o.pi.push_back(w.psi.dot(H_->momentum(ax, w.psi)).real() * wt);
    }
    if (hasParticle()) {
      o.q = w.expect(coordinate(0));
      o.p = w.psi.dot(H_->momentum(0, w.psi)).real() * wt;
      o.v = w.psi.dot(H_->kineticMomentum(H_->kinetic().front(), w.psi)).real() * wt / spec_.particle->mass;
    }
    o.energy = H_->energy(w);
    return o;
  }

  std::vector<double> coordinate(std::size_t axis) const {
    return grid_.tabulate([axis](std::span<const double> x) { return x[axis]; });
  }

  // Lattice fields reconstructed from mode expectations.
  std::vector<double> vectorPotential(const Observables& o) const { return spec_.basis.resum(toVector(o.a)); }
  /// <eps(x)> = -c sum_k m_k(x) <pi_k>
  std::vector<double> electricField(const Observables& o) const {
    RealVector v = -spec_.pc.c * toVector(o.pi);
    return spec_.basis.resum(v);
  }
  std::vector<double> magneticField(const Observables& o) const {
    return lattice::curl(spec_.basis.spec, vectorPotential(o));
  }
  /// Particle current projected onto the kept modes: sum_k m_k g_k e <v>.
  std::vector<double> projectedCurrent(const Observables& o) const {
    RealVector j = RealVector::Zero(static_cast<Eigen::Index>(modeCount()));
    if (hasParticle())
      for (std::size_t k = 0; k < modeCount(); ++k) j[static_cast<Eigen::Index>(k)] = couplings_[k] * spec_.particle->charge * o.v;
    return spec_.basis.resum(j);
  }
  /// Charge density of the particle at its mean position (plus nothing else).
  std::vector<double> chargeDensity(const Observables& o) const {
    const auto& s = spec_.basis.spec;
    if (!hasParticle()) return std::vector<double>(s.siteCount(), 0.0);
    Vec3 r = spec_.particle->anchor;
    r[spec_.particle->component] += o.q;
    return lattice::depositCharge(s, spec_.particle->charge, r);
  }

 private:
  static RealVector toVector(const std::vector<double>& v) {
    return Eigen::Map<const RealVector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  void buildHamiltonian() {
    const double c = spec_.pc.c;
    H_.emplace(grid_, spec_.pc.hbar);
    std::vector<double> V(grid_.size(), 0.0);
    std::vector<double> A;
    if (hasParticle()) {
      const auto& P = *spec_.particle;
      A.assign(grid_.size(), 0.0);
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        const double q = grid_.coord(i, 0);
        V[i] += 0.5 * P.mass * P.trapOmega * P.trapOmega * q * q;
        for (std::size_t k = 0; k < modeCount(); ++k) A[i] += P.charge / c * couplings_[k] * grid_.coord(i, modeAxis(k));
      }
    }
    for (std::size_t k = 0; k < modeCount(); ++k) {
      const double w = spec_.basis.modes[k].omega;
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        const double a = grid_.coord(i, modeAxis(k));
        V[i] += w * w * a * a / (2 * c * c);
      }
    }
    H_->addPotential(V);
    if (hasParticle()) H_->addKinetic(0, spec_.particle->mass, std::move(A));
    for (std::size_t k = 0; k < modeCount(); ++k) H_->addKinetic(modeAxis(k), 1.0 / (c * c));
  }

  ModeSystemSpec spec_;
  ProductGrid grid_;
  std::vector<double> couplings_;
  std::optional<GridHamiltonian> H_;
};

// ---------------------------------------------------------------------------

struct CommutatorReport {
  ComplexMatrix assembled;  // [a_i(x), eps_j(y)]
  ComplexMatrix oracle;     // -i hbar c P_ij(x, y) / dx^d
  double residual = 0;
};

/// Commutator from canonical mode operators [a_k, pi_l] = i hbar delta_kl and
/// eps(x) = -c sum_k m_k(x) pi_k; compared to the projector-based transverse delta.
inline CommutatorReport commutatorCheck(const lattice::ModeBasis& basis, std::size_t x, std::size_t y,
                                        const PhysicalConstants& pc = {}) {
  if (!basis.complete()) throw DomainError("commutator check needs the full (untruncated) mode basis");
  const auto& s = basis.spec;
  const int nc = s.components();
  const std::size_t n = s.siteCount();
  const auto P = lattice::buildProjector(s, basis.policy);
  CommutatorReport r;
  r.assembled = ComplexMatrix::Zero(nc, nc);
  r.oracle = ComplexMatrix::Zero(nc, nc);
  const Complex ihc(0, pc.hbar * pc.c);
  for (int i = 0; i < nc; ++i)
    for (int j = 0; j < nc; ++j) {
      const auto rx = static_cast<Eigen::Index>(i * n + x), ry = static_cast<Eigen::Index>(j * n + y);
      double sum = 0;
      for (Eigen::Index k = 0; k < basis.vectors.cols(); ++k) sum += basis.vectors(rx, k) * basis.vectors(ry, k);
      r.assembled(i, j) = -ihc * sum;
      r.oracle(i, j) = -ihc * P.matrix()(rx, ry) / s.cellVolume();
    }
  r.residual = (r.assembled - r.oracle).cwiseAbs().maxCoeff();
  return r;
}

/// Maximum residual over all site pairs.
inline double commutatorResidualAllSites(const lattice::ModeBasis& basis, const PhysicalConstants& pc = {}) {
  if (!basis.complete()) throw DomainError("commutator check needs the full (untruncated) mode basis");
  const auto P = lattice::buildProjector(basis.spec, basis.policy);
  const RealMatrix assembled = pc.hbar * pc.c * basis.vectors * basis.vectors.transpose();
  const RealMatrix oracle = pc.hbar * pc.c * P.matrix() / basis.spec.cellVolume();
  return (assembled - oracle).cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------

/// Centered first derivative of a uniformly sampled series at interior index i (order 2 or 4).
inline double centeredDerivative(std::span<const double> f, std::size_t i, double h, int order) {
  if (order == 4) return (-f[i + 2] + 8 * f[i + 1] - 8 * f[i - 1] + f[i - 2]) / (12 * h);
  return (f[i + 1] - f[i - 1]) / (2 * h);
}

struct ExpectationReport {
  std::vector<double> times;
  std::vector<double> faraday, ampere, divB, gauss, particle;
  double maxFaraday = 0, maxAmpere = 0, maxDivB = 0, maxGauss = 0, maxParticle = 0;
};

/// Ehrenfest/Maxwell residuals from a uniformly sampled history of observables:
/// d<b>/dt + c C<eps>, d<eps>/dt - c C^T<b> + J, div<b>, Gauss defect, d<q>/dt - <v>.
inline ExpectationReport ehrenfestResiduals(const ModeSystem& sys, const std::vector<Observables>& history,
                                            int order = 4) {
  const std::size_t half = order == 4 ? 2 : 1;
  if (history.size() < 2 * half + 1) throw DomainError("ehrenfest residuals need at least 3 (order 2) or 5 (order 4) samples");
  const auto& s = sys.spec().basis.spec;
  const double c = sys.spec().pc.c;
  const double h = history[1].t - history[0].t;
  std::vector<std::vector<double>> eps, b;
  for (const auto& o : history) {
    eps.push_back(sys.electricField(o));
    b.push_back(sys.magneticField(o));
  }
  std::vector<double> qs;
  for (const auto& o : history) qs.push_back(o.q);
  ExpectationReport r;
  std::vector<double> series(history.size());
  for (std::size_t i = half; i + half < history.size(); ++i) {
    r.times.push_back(history[i].t);
    // Faraday
    const auto cEps = lattice::curl(s, eps[i]);
    double far = 0;
    for (std::size_t e = 0; e < b[i].size(); ++e) {
      for (std::size_t n = 0; n < history.size(); ++n) series[n] = b[n][e];
      far = std::max(far, std::abs(centeredDerivative(series, i, h, order) + c * cEps[e]));
    }
    // Ampere with the mode-projected current
    const auto ctb = lattice::curlTranspose(s, b[i]);
    const auto J = sys.projectedCurrent(history[i]);
    double amp = 0;
    for (std::size_t e = 0; e < eps[i].size(); ++e) {
      for (std::size_t n = 0; n < history.size(); ++n) series[n] = eps[n][e];
      amp = std::max(amp, std::abs(centeredDerivative(series, i, h, order) - c * ctb[e] + J[e]));
    }
    double divb = 0;
    for (double v : lattice::magneticDivergence(s, b[i])) divb = std::max(divb, std::abs(v));
    // Gauss: eps_total = eps_perp - grad phi, lap phi = -(rho - mean rho)
    const auto rho = sys.chargeDensity(history[i]);
    const auto phi = lattice::solvePoisson(s, rho);
    auto total = eps[i];
    const auto gphi = lattice::gradient(s, phi);
    if (s.scalarAnalog) {
      // no longitudinal sector in the scalar analog
    } else {
      for (std::size_t e = 0; e < total.size(); ++e) total[e] -= gphi[e];
    }
    double mean = 0;
    for (double v : rho) mean += v / rho.size();
    double gauss = 0;
    if (!s.scalarAnalog) {
      const auto div = lattice::divergence(s, total);
      for (std::size_t x = 0; x < div.size(); ++x) gauss = std::max(gauss, std::abs(div[x] - (rho[x] - mean)));
    }
    const double part = sys.hasParticle() ? std::abs(centeredDerivative(qs, i, h, order) - history[i].v) : 0.0;
    r.faraday.push_back(far);
    r.ampere.push_back(amp);
    r.divB.push_back(divb);
    r.gauss.push_back(gauss);
    r.particle.push_back(part);
    r.maxFaraday = std::max(r.maxFaraday, far);
    r.maxAmpere = std::max(r.maxAmpere, amp);
    r.maxDivB = std::max(r.maxDivB, divb);
    r.maxGauss = std::max(r.maxGauss, gauss);
    r.maxParticle = std::max(r.maxParticle, part);
  }
  return r;
}

inline io::CsvTable expectationCsv(const std::vector<Observables>& history) {
  std::vector<std::string> header{"t", "q", "p", "v", "energy", "norm"};
  const std::size_t K = history.empty() ? 0 : history.front().a.size();
  for (std::size_t k = 0; k < K; ++k) {
    header.push_back("a" + std::to_string(k));
    header.push_back("pi" + std::to_string(k));
  }
  io::CsvTable t(header);
  for (const auto& o : history) {
    std::vector<double> row{o.t, o.q, o.p, o.v, o.energy, o.norm};
    for (std::size_t k = 0; k < K; ++k) {
      row.push_back(o.a[k]);
      row.push_back(o.pi[k]);
    }
    t.row(row);
  }
  return t;
}

// ---------------------------------------------------------------------------

/// A0 at each particle: (1/4pi) sum_{b != a} e_b / |q_a - q_b| with minimum-image separations.
/// `cell` gives the periodic lengths (0 = open direction).
inline std::vector<double> coulombPotential(std::span<const Vec3> positions, std::span<const double> charges,
                                            const Vec3& cell = {0, 0, 0}) {
  if (positions.size() != charges.size()) throw DomainError("one charge per particle required");
  std::vector<double> out(positions.size(), 0.0);
  for (std::size_t a = 0; a < positions.size(); ++a)
    for (std::size_t b = 0; b < positions.size(); ++b) {
      if (a == b) continue;
      Vec3 d = positions[a] - positions[b];
      for (int i = 0; i < 3; ++i)
        if (cell[i] > 0) d[i] -= cell[i] * std::round(d[i] / cell[i]);
      const double r = norm(d);
      if (r < 1e-12) throw DomainError("singular configuration: coincident particles " + std::to_string(a) + " and " + std::to_string(b));
      out[a] += charges[b] / (4 * kPi * r);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Phase-derived drifts.

struct PhaseDerivatives {
  std::vector<double> gradTheta;  // d theta / dx
  std::vector<double> gradLnRho;  // d ln rho / dx
  std::vector<bool> valid;        // rho above floor * max rho
};

/// Im(psi* D psi)/|psi|^2 and 2 Re(psi* D psi)/|psi|^2 along one axis; masked below the floor.
inline PhaseDerivatives phaseDerivatives(const GridHamiltonian& H, const WaveFunction& w, std::size_t axis,
                                         double floor = sde::kDensityFloor) {
  const ComplexVector d = H.derivative(axis, w.psi);
  PhaseDerivatives out;
  const auto rho = w.density();
  const double rmax = *std::max_element(rho.begin(), rho.end());
  for (std::size_t i = 0; i < rho.size(); ++i) {
    const bool ok = rho[i] > floor * rmax;
    out.valid.push_back(ok);
    if (!ok) {
      out.gradTheta.push_back(0);
      out.gradLnRho.push_back(0);
      continue;
    }
    const Complex z = std::conj(w.psi[static_cast<Eigen::Index>(i)]) * d[static_cast<Eigen::Index>(i)];
    out.gradTheta.push_back(z.imag() / rho[i]);
    out.gradLnRho.push_back(2 * z.real() / rho[i]);
  }
  return out;
}

/// Drift table of a 1D wavefunction: forward b = D (d theta + d ln rho / 2), backward
/// b~ = D (d theta - d ln rho / 2), D = hbar / m. Masked entries are filled by linear
/// extrapolation from the nearest supported pair.
struct DriftSnapshot {
  std::vector<double> x, forward, backward, osmotic, current;
  std::vector<bool> supported;
};

namespace detail {
inline void extrapolateMasked(const std::vector<double>& x, std::vector<double>& v, const std::vector<bool>& ok) {
  std::size_t first = 0, last = v.size();
  while (first < v.size() && !ok[first]) ++first;
  if (first == v.size()) throw DomainError("insufficient support: density below floor everywhere");
  last = v.size() - 1;
  while (!ok[last]) --last;
  // Interior holes: linear interpolation.
  for (std::size_t i = first; i <= last; ++i) {
    if (ok[i]) continue;
    std::size_t j = i;
    while (!ok[j]) ++j;
    const std::size_t a = i - 1;
    for (std::size_t m = i; m < j; ++m) v[m] = v[a] + (v[j] - v[a]) * (x[m] - x[a]) / (x[j] - x[a]);
    i = j;
  }
  auto slopeAt = [&](std::size_t a, std::size_t b) { return (v[b] - v[a]) / (x[b] - x[a]); };
  if (first + 1 <= last) {
    const double sl = slopeAt(first, first + 1);
    for (std::size_t i = 0; i < first; ++i) v[i] = v[first] + sl * (x[i] - x[first]);
    const double sr = slopeAt(last - 1, last);
    for (std::size_t i = last + 1; i < v.size(); ++i) v[i] = v[last] + sr * (x[i] - x[last]);
  } else {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!ok[i]) v[i] = v[first];
  }
}
}  // namespace detail

inline DriftSnapshot driftFromPsi(const GridHamiltonian& H, const WaveFunction& w, double mass,
                                  double floor = sde::kDensityFloor) {
  if (w.grid.rank() != 1) throw DomainError("drift tables are built on 1D wavefunctions");
  const auto pd = phaseDerivatives(H, w, 0, floor);
  const double D = H.hbar() / mass;
  DriftSnapshot s;
  s.x = w.grid.axis(0).coords();
  s.supported = pd.valid;
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    s.current.push_back(D * pd.gradTheta[i]);
    s.osmotic.push_back(pd.gradLnRho[i]);
    s.forward.push_back(D * (pd.gradTheta[i] + 0.5 * pd.gradLnRho[i]));
    s.backward.push_back(D * (pd.gradTheta[i] - 0.5 * pd.gradLnRho[i]));
  }
  for (auto* v : {&s.forward, &s.backward, &s.osmotic, &s.current}) detail::extrapolateMasked(s.x, *v, s.supported);
  return s;
}

/// Time series of drift snapshots on a common 1D grid, linearly interpolated in x and t.
class DriftTable {
 public:
  DriftTable(double t0, double dt, double diffusion) : t0_(t0), dt_(dt), D_(diffusion) {}
  void push(DriftSnapshot s) {
    if (!frames_.empty() && s.x != frames_.front().x) throw DomainError("drift snapshots must share a grid");
    frames_.push_back(std::move(s));
  }
  std::size_t size() const { return frames_.size(); }

  double eval(double x, double t, bool backward) const {
    if (frames_.empty()) throw DomainError("empty drift table");
    double u = (t - t0_) / dt_;
    u = std::clamp(u, 0.0, static_cast<double>(frames_.size() - 1));
    const std::size_t i = std::min<std::size_t>(frames_.size() - 1, static_cast<std::size_t>(u));
    const std::size_t j = std::min(i + 1, frames_.size() - 1);
    const double wt = u - i;
    return (1 - wt) * sample(frames_[i], x, backward) + wt * sample(frames_[j], x, backward);
  }

  sde::DriftField field() const {
    sde::DriftField d;
    d.dof = 1;
    d.diffusionCoeff = D_;
    d.forwardDrift = [this](std::span<const double> x, double t, std::span<double> o) { o[0] = eval(x[0], t, false); };
    d.backwardDrift = [this](std::span<const double> x, double t, std::span<double> o) { o[0] = eval(x[0], t, true); };
    return d;
  }

 private:
  static double sample(const DriftSnapshot& s, double x, bool backward) {
    const auto& v = backward ? s.backward : s.forward;
    const double h = s.x[1] - s.x[0];
    double u = (x - s.x.front()) / h;
    const double last = static_cast<double>(s.x.size() - 1);
    if (u <= 0) return v.front() + (v[1] - v[0]) * u;
    if (u >= last) return v.back() + (v.back() - v[v.size() - 2]) * (u - last);
    const std::size_t i = static_cast<std::size_t>(u);
    const double w = u - i;
    return (1 - w) * v[i] + w * v[i + 1];
  }

  double t0_, dt_, D_;
  std::vector<DriftSnapshot> frames_;
};

// ---------------------------------------------------------------------------
// Phase bookkeeping.

struct UnwrappedLine {
  std::vector<double> theta;
  std::vector<int> branch;  // multiples of 2 pi added at each point
};

/// Unwraps the phase along a line of samples, skipping points below the floor.
inline UnwrappedLine unwrapPhase(std::span<const Complex> line, double floor = sde::kDensityFloor) {
  UnwrappedLine out;
  double rmax = 0;
  for (const auto& z : line) rmax = std::max(rmax, std::norm(z));
  int k = 0;
  std::optional<double> prev;
  for (const auto& z : line) {
    const double raw = std::arg(z);
    if (std::norm(z) > floor * rmax) {
      if (prev) {
        double cand = raw + 2 * kPi * k;
        while (cand - *prev > kPi) {
          --k;
          cand -= 2 * kPi;
        }
        while (cand - *prev < -kPi) {
          ++k;
          cand += 2 * kPi;
        }
      }
      prev = raw + 2 * kPi * k;
    }
    out.theta.push_back(raw + 2 * kPi * k);
    out.branch.push_back(k);
  }
  return out;
}

struct Vortex {
  std::size_t i, j;  // lower-left corner of the plaquette on the (axisA, axisB) slice
  std::size_t slice;  // flat index of the remaining coordinates (0 for rank-2 grids)
  int winding;
};

/// Plaquette winding numbers of the phase on 2D slices spanned by two axes.
inline std::vector<Vortex> detectVortices(const WaveFunction& w, std::size_t axisA, std::size_t axisB) {
  const auto& g = w.grid;
  if (axisA == axisB || std::max(axisA, axisB) >= g.rank()) throw DomainError("invalid vortex slice axes");
  const int na = g.axis(axisA).points, nb = g.axis(axisB).points;
  std::vector<Vortex> out;
  auto wrapDiff = [](double d) { return d - 2 * kPi * std::round(d / (2 * kPi)); };
  for (std::size_t flat = 0; flat < g.size(); ++flat) {
    if (g.index(flat, axisA) != 0 || g.index(flat, axisB) != 0) continue;
    for (int i = 0; i + 1 < na; ++i)
      for (int j = 0; j + 1 < nb; ++j) {
        auto at = [&](int di, int dj) {
          return std::arg(w.psi[static_cast<Eigen::Index>(flat + (i + di) * g.stride(axisA) + (j + dj) * g.stride(axisB))]);
        };
        const double p00 = at(0, 0), p10 = at(1, 0), p11 = at(1, 1), p01 = at(0, 1);
        const double total = wrapDiff(p10 - p00) + wrapDiff(p11 - p10) + wrapDiff(p01 - p11) + wrapDiff(p00 - p01);
        const int wnd = static_cast<int>(std::lround(total / (2 * kPi)));
        if (wnd != 0) out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), flat, wnd});
      }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Direct grid integration of the Madelung pair for psi = exp(S + i theta) in 1D:
///   dS/dt = -(hbar/2m)(2 S' theta' + theta''),
///   dtheta/dt = (hbar/2m)(S'' + S'^2 - theta'^2) - V/hbar.
/// Fourth-order finite differences (one-sided at the edges), RK4 in time.
class MadelungSolver1D {
 public:
  // hyperviscosity adds -nu d^4 to both rates. It annihilates quadratic S and theta, and it damps the
  // short-wavelength growth that the log-amplitude equations have in the tails, where |dS/dx| is large.
  MadelungSolver1D(std::vector<double> x, double mass, double hbar, std::vector<double> potential,
                   double hyperviscosity = 0.0)
      : x_(std::move(x)), m_(mass), hbar_(hbar), nu_(hyperviscosity), V_(std::move(potential)) {
    if (x_.size() < 7) throw DomainError("Madelung grid needs >= 7 points");
    h_ = x_[1] - x_[0];
  }

  void evolve(std::vector<double>& S, std::vector<double>& theta, double dt, std::size_t steps) const {
    const std::size_t n = S.size();
    std::vector<double> s1(n), t1(n), s2(n), t2(n), s3(n), t3(n), s4(n), t4(n), ts(n), tt(n);
    for (std::size_t step = 0; step < steps; ++step) {
      rhs(S, theta, s1, t1);
      for (std::size_t i = 0; i < n; ++i) ts[i] = S[i] + 0.5 * dt * s1[i], tt[i] = theta[i] + 0.5 * dt * t1[i];
      rhs(ts, tt, s2, t2);
      for (std::size_t i = 0; i < n; ++i) ts[i] = S[i] + 0.5 * dt * s2[i], tt[i] = theta[i] + 0.5 * dt * t2[i];
      rhs(ts, tt, s3, t3);
      for (std::size_t i = 0; i < n; ++i) ts[i] = S[i] + dt * s3[i], tt[i] = theta[i] + dt * t3[i];
      rhs(ts, tt, s4, t4);
      for (std::size_t i = 0; i < n; ++i) {
        S[i] += dt / 6 * (s1[i] + 2 * s2[i] + 2 * s3[i] + s4[i]);
        theta[i] += dt / 6 * (t1[i] + 2 * t2[i] + 2 * t3[i] + t4[i]);
      }
    }
  }

  std::vector<double> d1(const std::vector<double>& f) const {
    const std::size_t n = f.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= 2 && i + 2 < n)
        d[i] = (f[i - 2] - 8 * f[i - 1] + 8 * f[i + 1] - f[i + 2]) / (12 * h_);
      else if (i < 2)
        d[i] = (-25 * f[i] + 48 * f[i + 1] - 36 * f[i + 2] + 16 * f[i + 3] - 3 * f[i + 4]) / (12 * h_);
      else
        d[i] = (25 * f[i] - 48 * f[i - 1] + 36 * f[i - 2] - 16 * f[i - 3] + 3 * f[i - 4]) / (12 * h_);
    }
    return d;
  }

  std::vector<double> d2(const std::vector<double>& f) const {
    const std::size_t n = f.size();
    std::vector<double> d(n);
    const double h2 = h_ * h_;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= 2 && i + 2 < n)
        d[i] = (-f[i - 2] + 16 * f[i - 1] - 30 * f[i] + 16 * f[i + 1] - f[i + 2]) / (12 * h2);
      else if (i < 2)
        d[i] = (45 * f[i] - 154 * f[i + 1] + 214 * f[i + 2] - 156 * f[i + 3] + 61 * f[i + 4] - 10 * f[i + 5]) / (12 * h2);
      else
        d[i] = (45 * f[i] - 154 * f[i - 1] + 214 * f[i - 2] - 156 * f[i - 3] + 61 * f[i - 4] - 10 * f[i - 5]) / (12 * h2);
    }
    return d;
  }

 private:
  void rhs(const std::vector<double>& S, const std::vector<double>& th, std::vector<double>& dS,
           std::vector<double>& dth) const {
    const auto Sx = d1(S), Sxx = d2(S), tx = d1(th), txx = d2(th);
    const double k = hbar_ / (2 * m_);
    for (std::size_t i = 0; i < S.size(); ++i) {
      dS[i] = -k * (2 * Sx[i] * tx[i] + txx[i]);
      dth[i] = k * (Sxx[i] + Sx[i] * Sx[i] - tx[i] * tx[i]) - V_[i] / hbar_;
    }
    if (nu_ > 0) {
      const double c = nu_ / std::pow(h_, 4);
      for (std::size_t i = 2; i + 2 < S.size(); ++i) {
        dS[i] -= c * (S[i - 2] - 4 * S[i - 1] + 6 * S[i] - 4 * S[i + 1] + S[i + 2]);
        dth[i] -= c * (th[i - 2] - 4 * th[i - 1] + 6 * th[i] - 4 * th[i + 1] + th[i + 2]);
      }
    }
    // The edges carry no boundary data; one-sided stencils there go unstable once the flow turns
    // inward. Quadratic extrapolation of the rates is exact for Gaussian-class states.
    const std::size_t n = S.size();
    auto extrapolate = [](std::vector<double>& f, std::size_t at, std::size_t a, std::size_t b, std::size_t c) {
      // Equally spaced a, b, c, stepping away from `at`.
      const double steps = std::abs(static_cast<double>(a) - static_cast<double>(at));
      f[at] = f[a] + steps * (f[a] - f[b]) + 0.5 * steps * (steps + 1) * (f[a] - 2 * f[b] + f[c]);
    };
    for (auto* f : {&dS, &dth}) {
      extrapolate(*f, 1, 2, 3, 4);
      extrapolate(*f, 0, 2, 3, 4);
      extrapolate(*f, n - 2, n - 3, n - 4, n - 5);
      extrapolate(*f, n - 1, n - 3, n - 4, n - 5);
    }
  }

  std::vector<double> x_;
  double m_, hbar_, nu_, h_ = 0;
  std::vector<double> V_;
};

}  // namespace svmqch::quantum
