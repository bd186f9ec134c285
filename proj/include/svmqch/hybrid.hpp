#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "svmqch/core.hpp"
#include "svmqch/grid.hpp"
#include "svmqch/io.hpp"
#include "svmqch/lattice.hpp"
#include "svmqch/quantum.hpp"

// Quantum-classical hybrid: classical charged particles (f, p) coupled to a quantized,
// mode-truncated transverse field. The field sector sees
//   H(f, p) = sum_alpha |p_alpha - (e_alpha/c) a(f_alpha)|^2 / 2M_alpha + V(f) + (1/2) sum e A0
//           + sum_k [c^2 pi_k^2 / 2 + w_k^2 a_k^2 / (2 c^2)],
// with a(f) = sum_k a_k m_k(f) from multilinear interpolation of the mode functions. The
// operator-valued velocity is v = (p - (e/c) a(f)) / M, so p plays the role of hbar grad_f theta.
namespace svmqch::hybrid {

struct ClassicalParticle {
  double mass = 1;
  double charge = 0;
  Vec3 f{0, 0, 0};  // quasi-trajectory position
  Vec3 p{0, 0, 0};  // canonical momentum
};

/// Per-particle harmonic binding V = M w_i^2 d_i^2 / 2 about a centre (minimum image).
struct Trap {
  Vec3 center{0, 0, 0};
  Vec3 omega{0, 0, 0};
};

struct HybridSpec {
  lattice::ModeBasis basis;
  PhysicalConstants pc;
  int pointsPerMode = 40;
  double halfWidth = 10;  // in units of the bare ground-state width
  std::vector<ClassicalParticle> particles;
  std::vector<Trap> traps;  // empty or one per particle
  bool coulomb = true;      // pairwise instantaneous Coulomb energy between particles
};

struct HybridState {
  std::vector<Vec3> f, p;
  std::vector<Vec3> meanPosition;  // E[r], advanced by <v> each step
  quantum::WaveFunction psi;
  double t = 0;
};

struct FieldMoments {
  std::vector<double> mean;  // <a_k>
  RealMatrix second;         // <a_k a_l>
};

struct ModeSample {
  std::vector<Vec3> value;                  // m_k(f)
  std::vector<std::array<Vec3, 3>> grad;    // grad[k][j] = d m_k / d f_j
};

struct ClassicalRates {
  std::vector<Vec3> df, dp;
};

struct EnergyParts {
  double total = 0, classical = 0, field = 0;
};

struct StepOptions {
  bool frozenParticles = false;
  int maxHalvings = 10;
};

class HybridSystem {
 public:
  explicit HybridSystem(HybridSpec spec) : spec_(std::move(spec)) {
    const std::size_t K = spec_.basis.size();
    if (K == 0 || K > 3) throw ConfigError("hybrid runs keep between 1 and 3 modes");
    if (spec_.pointsPerMode < 4 || spec_.pointsPerMode > 64) throw ConfigError("points per mode must be in [4, 64]");
    if (spec_.particles.empty()) throw ConfigError("hybrid run needs at least one particle");
    if (!spec_.traps.empty() && spec_.traps.size() != spec_.particles.size())
      throw ConfigError("traps must be empty or one per particle");
    for (const auto& P : spec_.particles)
      if (!(P.mass > 0)) throw ConfigError("particle mass must be > 0");
    std::vector<quantum::Axis> axes;
    for (std::size_t k = 0; k < K; ++k) {
      if (!(spec_.basis.modes[k].omega > 0)) throw ConfigError("kept modes must have nonzero frequency");
      axes.push_back(quantum::Axis::centered(spec_.pointsPerMode, spec_.halfWidth * groundWidth(k)));
    }
    grid_ = quantum::ProductGrid(axes);
    const double c = spec_.pc.c;
    H_.emplace(grid_, spec_.pc.hbar);
    Hfree_.emplace(grid_, spec_.pc.hbar);
    std::vector<double> W(grid_.size(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      coords_.push_back(grid_.tabulate([k](std::span<const double> x) { return x[k]; }));
      const double w = spec_.basis.modes[k].omega;
      for (std::size_t i = 0; i < grid_.size(); ++i) W[i] += w * w * coords_[k][i] * coords_[k][i] / (2 * c * c);
      H_->addKinetic(k, 1.0 / (c * c));
      Hfree_->addKinetic(k, 1.0 / (c * c));
    }
    Hfree_->addPotential(W);
    modePotential_ = std::move(W);
    H_->potential() = modePotential_;
  }

  const HybridSpec& spec() const { return spec_; }
  const quantum::ProductGrid& grid() const { return grid_; }
  std::size_t modeCount() const { return spec_.basis.size(); }
  std::size_t particleCount() const { return spec_.particles.size(); }
  const std::vector<double>& modeCoordinate(std::size_t k) const { return coords_[k]; }
  double groundWidth(std::size_t k) const {
    return std::sqrt(spec_.pc.hbar * spec_.pc.c * spec_.pc.c / (2 * spec_.basis.modes[k].omega));
  }
  const quantum::GridHamiltonian& freeFieldHamiltonian() const { return *Hfree_; }

  HybridState initialState(const quantum::WaveFunction& psi) const {
    HybridState s;
    for (const auto& P : spec_.particles) {
      s.f.push_back(P.f);
      s.p.push_back(P.p);
    }
    s.meanPosition = s.f;
    s.psi = psi;
    return s;
  }

  /// Product of coherent Gaussians of the bare modes centred at (a_k, pi_k).
  quantum::WaveFunction coherentField(std::span<const double> a, std::span<const double> pi) const {
    const double hbar = spec_.pc.hbar;
    auto w = quantum::WaveFunction::fromFunction(grid_, [&](std::span<const double> x) {
      Complex logv = 0;
      for (std::size_t k = 0; k < modeCount(); ++k) {
        const double s2 = groundWidth(k) * groundWidth(k);
        logv += -(x[k] - a[k]) * (x[k] - a[k]) / (4 * s2) + Complex(0, pi[k] * x[k] / hbar);
      }
      return std::exp(logv);
    });
    w.normalize();
    return w;
  }
  quantum::WaveFunction vacuum() const {
    const std::vector<double> z(modeCount(), 0.0);
    return coherentField(z, z);
  }

  /// Mode functions and their gradients at a point.
  ModeSample sampleModes(const Vec3& r) const {
    const auto& s = spec_.basis.spec;
    const std::size_t n = s.siteCount();
    const auto stencil = lattice::interpolationStencil(s, r);
    ModeSample out;
    out.value.assign(modeCount(), Vec3{0, 0, 0});
    out.grad.assign(modeCount(), {Vec3{0, 0, 0}, Vec3{0, 0, 0}, Vec3{0, 0, 0}});
    for (std::size_t k = 0; k < modeCount(); ++k)
      for (int i = 0; i < s.components(); ++i)
        for (const auto& sp : stencil) {
          const double m = spec_.basis.vectors(static_cast<Eigen::Index>(i * n + sp.site), static_cast<Eigen::Index>(k));
          out.value[k][i] += sp.weight * m;
          for (int j = 0; j < 3; ++j) out.grad[k][j][i] += sp.dweight[j] * m;
        }
    return out;
  }

  Vec3 cell() const {
    const auto& s = spec_.basis.spec;
    Vec3 L{0, 0, 0};
    for (int a = 0; a < s.dimension; ++a) L[a] = s.length(a);
    return L;
  }

  /// Classical scalar energy V(f) + sum_alpha (e_alpha / 2) A0(f_alpha).
  double classicalPotential(const std::vector<Vec3>& f) const {
    double V = 0;
    const Vec3 L = cell();
    if (!spec_.traps.empty())
      for (std::size_t a = 0; a < f.size(); ++a) {
        const Vec3 d = minimumImage(f[a] - spec_.traps[a].center, L);
        for (int i = 0; i < 3; ++i) V += 0.5 * spec_.particles[a].mass * sq(spec_.traps[a].omega[i] * d[i]);
      }
    if (spec_.coulomb && f.size() > 1) {
      const auto A0 = quantum::coulombPotential(f, charges(), L);
      for (std::size_t a = 0; a < f.size(); ++a) V += 0.5 * spec_.particles[a].charge * A0[a];
    }
    return V;
  }

  std::vector<Vec3> classicalPotentialGradient(const std::vector<Vec3>& f) const {
    std::vector<Vec3> g(f.size(), Vec3{0, 0, 0});
    const Vec3 L = cell();
    if (!spec_.traps.empty())
      for (std::size_t a = 0; a < f.size(); ++a) {
        const Vec3 d = minimumImage(f[a] - spec_.traps[a].center, L);
        for (int i = 0; i < 3; ++i) g[a][i] += spec_.particles[a].mass * sq(spec_.traps[a].omega[i]) * d[i];
      }
    if (spec_.coulomb && f.size() > 1)
      for (std::size_t a = 0; a < f.size(); ++a)
        for (std::size_t b = 0; b < f.size(); ++b) {
          if (a == b) continue;
          const Vec3 d = minimumImage(f[a] - f[b], L);
          const double r = norm(d);
          if (r < 1e-12) throw DomainError("singular configuration: coincident particles");
          const double pre = -spec_.particles[a].charge * spec_.particles[b].charge / (4 * kPi * r * r * r);
          for (int i = 0; i < 3; ++i) g[a][i] += pre * d[i];
        }
    return g;
  }

  /// Field-sector Hamiltonian at fixed classical variables. Without the classical scalars the
  /// c-number V + Coulomb part (a pure phase) is left out.
  quantum::GridHamiltonian fieldHamiltonian(const std::vector<Vec3>& f, const std::vector<Vec3>& p,
                                            bool withClassicalScalars = true) const {
    quantum::GridHamiltonian H = *H_;
    auto& W = H.potential();
    W = modePotential_;
    const double c = spec_.pc.c;
    for (std::size_t a = 0; a < particleCount(); ++a) {
      const auto& P = spec_.particles[a];
      const auto ms = sampleModes(f[a]);
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        Vec3 v = p[a];
        for (std::size_t k = 0; k < modeCount(); ++k)
          for (int j = 0; j < 3; ++j) v[j] -= P.charge / c * coords_[k][i] * ms.value[k][j];
        W[i] += dot(v, v) / (2 * P.mass);
      }
    }
    if (withClassicalScalars) {
      const double V = classicalPotential(f);
      for (double& w : W) w += V;
    }
    return H;
  }

  FieldMoments moments(const quantum::WaveFunction& psi) const {
    FieldMoments m;
    const std::size_t K = modeCount();
    const auto rho = psi.density();
    const double wt = grid_.weight();
    m.mean.assign(K, 0.0);
    m.second = RealMatrix::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      const double r = rho[i] * wt;
      for (std::size_t k = 0; k < K; ++k) {
        m.mean[k] += r * coords_[k][i];
        for (std::size_t l = 0; l < K; ++l)
          m.second(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) += r * coords_[k][i] * coords_[l][i];
      }
    }
    return m;
  }

  /// Hamilton's equations for (f, p) with the field frozen: h = <H(f, p)>.
  ClassicalRates rates(const std::vector<Vec3>& f, const std::vector<Vec3>& p, const FieldMoments& m) const {
    const double c = spec_.pc.c;
    const std::size_t K = modeCount();
    ClassicalRates r;
    r.dp = classicalPotentialGradient(f);
    for (auto& g : r.dp) g = -1.0 * g;
    r.df.assign(f.size(), Vec3{0, 0, 0});
    for (std::size_t a = 0; a < f.size(); ++a) {
      const auto& P = spec_.particles[a];
      const auto ms = sampleModes(f[a]);
      const double eoc = P.charge / c;
      Vec3 abar{0, 0, 0};
      for (std::size_t k = 0; k < K; ++k) abar = abar + m.mean[k] * ms.value[k];
      r.df[a] = (1.0 / P.mass) * (p[a] - eoc * abar);
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < K; ++k) {
          s += eoc * m.mean[k] * dot(p[a], ms.grad[k][j]);
          for (std::size_t l = 0; l < K; ++l)
            s -= eoc * eoc * m.second(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) * dot(ms.grad[k][j], ms.value[l]);
        }
        r.dp[a][j] += s / P.mass;
      }
    }
    return r;
  }

  /// <v_alpha> = (p - (e/c) <a(f)>) / M.
  std::vector<Vec3> meanVelocity(const HybridState& s) const {
    return rates(s.f, s.p, moments(s.psi)).df;
  }

  EnergyParts energy(const HybridState& s) const {
    EnergyParts e;
    e.total = fieldHamiltonian(s.f, s.p).energy(s.psi);
    e.field = Hfree_->energy(s.psi);
    e.classical = e.total - e.field;
    return e;
  }

  /// <a_k> and <pi_k> of a (not necessarily normalized) state.
  std::pair<std::vector<double>, std::vector<double>> fieldExpectations(const quantum::WaveFunction& psi) const {
    const double n2 = psi.psi.squaredNorm() * grid_.weight();
    std::vector<double> a, pi;
    for (std::size_t k = 0; k < modeCount(); ++k) {
      a.push_back(psi.expect(coords_[k]) / n2);
      pi.push_back(psi.psi.dot(H_->momentum(k, psi.psi)).real() * grid_.weight() / n2);
    }
    return {a, pi};
  }

  /// Mode-space conduction current J_k = sum_alpha e_alpha <v_alpha> . m_k(f_alpha).
  std::vector<double> conductionCurrent(const std::vector<Vec3>& f, const std::vector<Vec3>& p,
                                        const quantum::WaveFunction& psi) const {
    const double n2 = psi.psi.squaredNorm() * grid_.weight();
    FieldMoments m = moments(psi);
    for (double& x : m.mean) x /= n2;
    const auto v = rates(f, p, m).df;
    std::vector<double> J(modeCount(), 0.0);
    for (std::size_t a = 0; a < f.size(); ++a) {
      const auto ms = sampleModes(f[a]);
      for (std::size_t k = 0; k < modeCount(); ++k) J[k] += spec_.particles[a].charge * dot(v[a], ms.value[k]);
    }
    return J;
  }

  /// Generator difference H_delta = -sum_alpha [M v^2 + (e/c) v . a(f)] on the field grid,
  /// the extra term picked up when the state is followed along the quasi-trajectory.
  std::vector<double> generatorDifference(const HybridState& s) const {
    const double c = spec_.pc.c;
    std::vector<double> out(grid_.size(), 0.0);
    for (std::size_t a = 0; a < particleCount(); ++a) {
      const auto& P = spec_.particles[a];
      const auto ms = sampleModes(s.f[a]);
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        Vec3 A{0, 0, 0};
        for (std::size_t k = 0; k < modeCount(); ++k) A = A + coords_[k][i] * ms.value[k];
        const Vec3 v = (1.0 / P.mass) * (s.p[a] - (P.charge / c) * A);
        out[i] -= P.mass * dot(v, v) + P.charge / c * dot(v, A);
      }
    }
    return out;
  }

  std::vector<double> charges() const {
    std::vector<double> q;
    for (const auto& P : spec_.particles) q.push_back(P.charge);
    return q;
  }

  Vec3 wrap(const Vec3& r) const {
    const auto& s = spec_.basis.spec;
    Vec3 out = r;
    for (int a = 0; a < s.dimension; ++a) out[a] = wrapPeriodic(r[a], s.length(a));
    return out;
  }

 private:
  static double sq(double x) { return x * x; }
  static Vec3 minimumImage(Vec3 d, const Vec3& L) {
    for (int i = 0; i < 3; ++i)
      if (L[i] > 0) d[i] -= L[i] * std::round(d[i] / L[i]);
    return d;
  }

  HybridSpec spec_;
  quantum::ProductGrid grid_;
  std::vector<std::vector<double>> coords_;
  std::vector<double> modePotential_;
  std::optional<quantum::GridHamiltonian> H_, Hfree_;
};

namespace detail {

inline std::vector<Vec3> axpy(const std::vector<Vec3>& x, double h, const std::vector<Vec3>& d) {
  std::vector<Vec3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + h * d[i];
  return out;
}

inline bool finite(const std::vector<Vec3>& v) {
  for (const auto& x : v)
    for (double c : x)
      if (!std::isfinite(c)) return false;
  return true;
}

// Classical sub-flow with the field frozen (classical RK4); returns false on a non-finite rate.
inline bool classicalFlow(const HybridSystem& sys, HybridState& s, double dt) {
  const FieldMoments m = sys.moments(s.psi);
  const auto k1 = sys.rates(s.f, s.p, m);
  const auto k2 = sys.rates(axpy(s.f, dt / 2, k1.df), axpy(s.p, dt / 2, k1.dp), m);
  const auto k3 = sys.rates(axpy(s.f, dt / 2, k2.df), axpy(s.p, dt / 2, k2.dp), m);
  const auto k4 = sys.rates(axpy(s.f, dt, k3.df), axpy(s.p, dt, k3.dp), m);
  std::vector<Vec3> df(s.f.size()), dp(s.f.size());
  for (std::size_t a = 0; a < s.f.size(); ++a) {
    df[a] = (dt / 6) * (k1.df[a] + 2.0 * k2.df[a] + 2.0 * k3.df[a] + k4.df[a]);
    dp[a] = (dt / 6) * (k1.dp[a] + 2.0 * k2.dp[a] + 2.0 * k3.dp[a] + k4.dp[a]);
  }
  if (!finite(df) || !finite(dp)) return false;
  for (std::size_t a = 0; a < s.f.size(); ++a) {
    s.f[a] = sys.wrap(s.f[a] + df[a]);
    s.meanPosition[a] = sys.wrap(s.meanPosition[a] + df[a]);
    s.p[a] = s.p[a] + dp[a];
  }
  return true;
}

inline void fieldFlow(const HybridSystem& sys, HybridState& s, double dt) {
  quantum::propagate(sys.fieldHamiltonian(s.f, s.p), s.psi, dt);
}

inline bool strang(const HybridSystem& sys, HybridState& s, double dt, const StepOptions& opt) {
  fieldFlow(sys, s, dt / 2);
  if (!opt.frozenParticles && !classicalFlow(sys, s, dt)) return false;
  fieldFlow(sys, s, dt / 2);
  s.t += dt;
  return true;
}

}  // namespace detail

/// One Strang step: field half-step at fixed (f, p), classical step with the field frozen, field
/// half-step. Each sub-flow conserves <H(f, p)> on its own. A step producing non-finite classical
/// rates is rejected and retried as two half steps.
inline HybridState stepHybrid(const HybridSystem& sys, const HybridState& state, double dt, const StepOptions& opt = {}) {
  if (!(dt > 0)) throw DomainError("dt must be > 0");
  std::function<bool(HybridState&, double, int)> attempt = [&](HybridState& s, double h, int depth) {
    HybridState trial = s;
    if (detail::strang(sys, trial, h, opt)) {
      s = std::move(trial);
      return true;
    }
    if (depth >= opt.maxHalvings) return false;
    return attempt(s, h / 2, depth + 1) && attempt(s, h / 2, depth + 1);
  };
  HybridState out = state;
  if (!attempt(out, dt, 0)) throw NumericalError("hybrid step rejected after repeated halving at t=" + std::to_string(state.t));
  const double n = out.psi.norm();
  if (std::abs(n - 1) > 1e-6) throw NumericalError("norm drift " + std::to_string(n - 1) + " in hybrid step");
  return out;
}

struct HybridEnergyLedger {
  std::vector<double> times, total, classical, field;
  double relativeDrift = 0;  // max |E(t) - E(0)| / |E(0)|
};

inline HybridEnergyLedger energyLedger(const HybridSystem& sys, const std::vector<HybridState>& history) {
  if (history.size() < 2) throw DomainError("energy ledger needs at least 2 samples");
  HybridEnergyLedger L;
  for (const auto& s : history) {
    const auto e = sys.energy(s);
    L.times.push_back(s.t);
    L.total.push_back(e.total);
    L.classical.push_back(e.classical);
    L.field.push_back(e.field);
  }
  const double e0 = L.total.front();
  const double scale = std::abs(e0) > 0 ? std::abs(e0) : 1.0;
  for (double e : L.total) L.relativeDrift = std::max(L.relativeDrift, std::abs(e - e0) / scale);
  return L;
}

/// Gap |E[r] - <f>|; the two coincide identically in the mean-field regime.
inline double orderParameter(const HybridState& s) {
  double g = 0;
  for (std::size_t a = 0; a < s.f.size(); ++a) g = std::max(g, norm(s.meanPosition[a] - s.f[a]));
  return g;
}

// ---------------------------------------------------------------------------
// Extended Ehrenfest bookkeeping.

struct FieldSample {
  double t = 0;
  std::vector<Vec3> f, v;           // particle positions and <v>
  std::vector<double> a, pi;        // <a_k>, <pi_k>
  std::vector<double> conduction;   // J_k = sum e <v> . m_k(f)
  std::vector<double> displacement; // mode-space displacement current -(v . grad_f) <eps_k>
  std::vector<double> transport;    // (v . grad_f) <a_k>; zero when the density ignores f
};

inline FieldSample sampleMeanField(const HybridSystem& sys, const HybridState& s) {
  FieldSample out;
  out.t = s.t;
  out.f = s.f;
  out.v = sys.meanVelocity(s);
  std::tie(out.a, out.pi) = sys.fieldExpectations(s.psi);
  out.conduction = sys.conductionCurrent(s.f, s.p, s.psi);
  out.displacement.assign(sys.modeCount(), 0.0);
  out.transport.assign(sys.modeCount(), 0.0);
  return out;
}

struct CurrentDecomposition {
  std::vector<double> conduction, displacement, total;  // lattice fields
};

struct ExtendedEhrenfestReport {
  // faraday: d<b>/dt + c curl<eps> with the f-transport of <b> removed (fixed-f form);
  // faradayAlongPath keeps it.
  std::vector<double> times, faraday, faradayAlongPath, ampereWith, ampereWithout, displacementNorm, divB;
  double maxFaraday = 0, maxFaradayAlongPath = 0, maxAmpereWith = 0, maxAmpereWithout = 0, maxDisplacement = 0, maxDivB = 0;
  double maxContinuity = 0;
  std::vector<CurrentDecomposition> currents;
};

inline double maxAbs(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// Residuals of d<eps>/dt = c curl<b> - J_cond - J_disp and d<b>/dt = -c curl<eps> along a
/// sampled history (uniform spacing), plus the discrete continuity equation for the particle
/// charge and its charge-conserving current between consecutive samples.
inline ExtendedEhrenfestReport extendedEhrenfest(const HybridSystem& sys, const std::vector<FieldSample>& hist, int order = 4) {
  const std::size_t half = order == 4 ? 2 : 1;
  if (hist.size() < 2 * half + 1) throw DomainError("extended Ehrenfest needs at least 3 (order 2) or 5 (order 4) samples");
  const auto& basis = sys.spec().basis;
  const auto& L = basis.spec;
  const double c = sys.spec().pc.c;
  const std::size_t K = sys.modeCount();
  const double h = hist[1].t - hist[0].t;
  auto field = [&](const std::vector<double>& coeffs) {
    return basis.resum(Eigen::Map<const RealVector>(coeffs.data(), static_cast<Eigen::Index>(coeffs.size())));
  };
  std::vector<std::vector<double>> eps, b;
  for (const auto& s : hist) {
    std::vector<double> e(K);
    for (std::size_t k = 0; k < K; ++k) e[k] = -c * s.pi[k];
    eps.push_back(field(e));
    b.push_back(lattice::curl(L, field(s.a)));
  }
  ExtendedEhrenfestReport r;
  std::vector<double> series(hist.size());
  for (std::size_t n = half; n + half < hist.size(); ++n) {
    const std::size_t ne = eps[n].size(), nb = b[n].size();
    std::vector<double> dEps(ne), dB(nb);
    for (std::size_t i = 0; i < ne; ++i) {
      for (std::size_t m = 0; m < hist.size(); ++m) series[m] = eps[m][i];
      dEps[i] = quantum::centeredDerivative(series, n, h, order);
    }
    for (std::size_t i = 0; i < nb; ++i) {
      for (std::size_t m = 0; m < hist.size(); ++m) series[m] = b[m][i];
      dB[i] = quantum::centeredDerivative(series, n, h, order);
    }
    const auto curlE = lattice::curl(L, eps[n]);
    const auto curlTB = lattice::curlTranspose(L, b[n]);
    CurrentDecomposition cd;
    cd.conduction = field(hist[n].conduction);
    cd.displacement = field(hist[n].displacement);
    cd.total.resize(ne);
    const auto bTransport = lattice::curl(L, field(hist[n].transport));
    std::vector<double> with(ne), without(ne), far(nb), farPath(nb);
    for (std::size_t i = 0; i < ne; ++i) {
      cd.total[i] = cd.conduction[i] + cd.displacement[i];
      without[i] = dEps[i] - c * curlTB[i] + cd.conduction[i];
      with[i] = without[i] + cd.displacement[i];
    }
    for (std::size_t i = 0; i < nb; ++i) {
      farPath[i] = dB[i] + c * curlE[i];
      far[i] = farPath[i] - bTransport[i];
    }
    r.times.push_back(hist[n].t);
    r.faraday.push_back(maxAbs(far));
    r.faradayAlongPath.push_back(maxAbs(farPath));
    r.ampereWith.push_back(maxAbs(with));
    r.ampereWithout.push_back(maxAbs(without));
    r.displacementNorm.push_back(maxAbs(cd.displacement));
    r.divB.push_back(maxAbs(lattice::magneticDivergence(L, b[n])));
    r.currents.push_back(std::move(cd));
  }
  r.maxFaraday = maxAbs(r.faraday);
  r.maxFaradayAlongPath = maxAbs(r.faradayAlongPath);
  r.maxAmpereWith = maxAbs(r.ampereWith);
  r.maxAmpereWithout = maxAbs(r.ampereWithout);
  r.maxDisplacement = maxAbs(r.displacementNorm);
  r.maxDivB = maxAbs(r.divB);
  for (std::size_t n = 0; n + 1 < hist.size(); ++n) {
    std::vector<double> rho0(L.siteCount(), 0.0), rho1 = rho0, J(L.siteCount() * L.components(), 0.0);
    for (std::size_t a = 0; a < hist[n].f.size(); ++a) {
      const double q = sys.spec().particles[a].charge;
      const auto r0 = lattice::depositCharge(L, q, hist[n].f[a]);
      const auto r1 = lattice::depositCharge(L, q, hist[n + 1].f[a]);
      const auto j = lattice::chargeConservingCurrent(L, q, hist[n].f[a], hist[n + 1].f[a], h);
      for (std::size_t i = 0; i < rho0.size(); ++i) rho0[i] += r0[i], rho1[i] += r1[i];
      for (std::size_t i = 0; i < J.size(); ++i) J[i] += j[i];
    }
    const auto div = lattice::divergence(L, J);
    for (std::size_t i = 0; i < rho0.size(); ++i)
      r.maxContinuity = std::max(r.maxContinuity, std::abs((rho1[i] - rho0[i]) / h + div[i]));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Field sector resolved over the position of one particle along one axis.

/// Psi(f, a, t) tabulated at nodes f_j along `axis` for particle `particle`; each node evolves
/// by the field-sector equation at fixed f_j (partial time derivative). The physical state at
/// f is the Lagrange interpolant over the nodes.
class SliceField {
 public:
  SliceField(const HybridSystem& sys, std::size_t particle, int axis, std::vector<double> nodes,
             const quantum::WaveFunction& psi0)
      : sys_(&sys), particle_(particle), axis_(axis), nodes_(std::move(nodes)) {
    if (nodes_.size() < 2) throw DomainError("slice field needs at least 2 nodes");
    if (particle >= sys.particleCount() || axis < 0 || axis > 2) throw DomainError("slice particle/axis out of range");
    slices_.assign(nodes_.size(), psi0);
    bary_.assign(nodes_.size(), 1.0);
    for (std::size_t j = 0; j < nodes_.size(); ++j)
      for (std::size_t m = 0; m < nodes_.size(); ++m)
        if (m != j) bary_[j] /= nodes_[j] - nodes_[m];
  }

  const std::vector<double>& nodes() const { return nodes_; }
  const std::vector<quantum::WaveFunction>& slices() const { return slices_; }
  void setSlices(std::vector<quantum::WaveFunction> s) { slices_ = std::move(s); }

  /// Advance every slice by dt with the classical variables (other than the resolved
  /// coordinate) held at (f, p). The generator omits the c-number classical scalars.
  void advance(const std::vector<Vec3>& f, const std::vector<Vec3>& p, double dt) {
    for (std::size_t j = 0; j < nodes_.size(); ++j) {
      auto fj = f;
      fj[particle_][axis_] = nodes_[j];
      quantum::propagate(sys_->fieldHamiltonian(fj, p, false), slices_[j], dt);
    }
  }

  /// Lagrange weights (and their derivatives) at x.
  std::pair<std::vector<double>, std::vector<double>> weights(double x) const {
    const std::size_t n = nodes_.size();
    std::vector<double> l(n), dl(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double prod = bary_[j];
      for (std::size_t m = 0; m < n; ++m)
        if (m != j) prod *= x - nodes_[m];
      l[j] = prod;
      double s = 0;
      for (std::size_t m = 0; m < n; ++m) {
        if (m == j) continue;
        double t = bary_[j];
        for (std::size_t q = 0; q < n; ++q)
          if (q != j && q != m) t *= x - nodes_[q];
        s += t;
      }
      dl[j] = s;
    }
    return {l, dl};
  }

  static quantum::WaveFunction combine(const std::vector<quantum::WaveFunction>& s, const std::vector<double>& w) {
    quantum::WaveFunction out(s.front().grid);
    for (std::size_t j = 0; j < s.size(); ++j) out.psi += w[j] * s[j].psi;
    return out;
  }

  quantum::WaveFunction at(double x) const { return combine(slices_, weights(x).first); }

  struct ModeExpectations {
    std::vector<double> a, da, eps, deps;  // values and derivatives along the resolved axis
  };

  /// <a_k>, <eps_k> of the interpolated state and their derivatives along the resolved axis.
  ModeExpectations expectations(double x) const { return expectations(slices_, x); }
  ModeExpectations expectations(const std::vector<quantum::WaveFunction>& s, double x) const {
    const auto [l, dl] = weights(x);
    const auto psi = combine(s, l);
    // The derivative weights sum to zero, so differences against one slice give the same
    // derivative and vanish exactly when all slices coincide.
    std::vector<quantum::WaveFunction> diff = s;
    for (auto& d : diff) d.psi -= s.front().psi;
    const auto dpsi = combine(diff, dl);
    const auto& g = sys_->grid();
    const auto& H = sys_->freeFieldHamiltonian();
    const double c = sys_->spec().pc.c, wt = g.weight();
    const double n2 = psi.psi.squaredNorm() * wt;
    const double dn2 = 2 * psi.psi.dot(dpsi.psi).real() * wt;
    // For Hermitian O: d<psi|O|psi> = 2 Re <dpsi|O|psi>.
    auto ratio = [&](const ComplexVector& Opsi, double& val, double& der) {
      const double num = psi.psi.dot(Opsi).real() * wt;
      const double dnum = 2 * dpsi.psi.dot(Opsi).real() * wt;
      val = num / n2;
      der = (dnum * n2 - num * dn2) / (n2 * n2);
    };
    ModeExpectations out;
    for (std::size_t k = 0; k < sys_->modeCount(); ++k) {
      double v, d;
      ComplexVector Apsi = psi.psi;
      const auto& a = sys_->modeCoordinate(k);
      for (Eigen::Index i = 0; i < Apsi.size(); ++i) Apsi[i] *= a[static_cast<std::size_t>(i)];
      ratio(Apsi, v, d);
      out.a.push_back(v);
      out.da.push_back(d);
      ratio(H.momentum(k, psi.psi), v, d);
      out.eps.push_back(-c * v);
      out.deps.push_back(-c * d);
    }
    return out;
  }

  std::size_t particle() const { return particle_; }
  int axis() const { return axis_; }

 private:
  const HybridSystem* sys_;
  std::size_t particle_;
  int axis_;
  std::vector<double> nodes_, bary_;
  std::vector<quantum::WaveFunction> slices_;
};

/// Chebyshev nodes on [lo, hi].
inline std::vector<double> chebyshevNodes(double lo, double hi, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t j = 0; j < n; ++j)
    x[j] = 0.5 * (lo + hi) - 0.5 * (hi - lo) * std::cos(kPi * (2.0 * j + 1) / (2.0 * n));
  return x;
}

struct SliceRun {
  std::vector<FieldSample> samples;
  std::vector<std::vector<quantum::WaveFunction>> snapshots;  // slices at each sample
  std::vector<Vec3> momenta;                                  // canonical momenta (held fixed)
};

inline FieldMoments normalizedMoments(const HybridSystem& sys, const quantum::WaveFunction& psi) {
  FieldMoments m = sys.moments(psi);
  const double n2 = psi.psi.squaredNorm() * psi.grid.weight();
  for (double& x : m.mean) x /= n2;
  m.second /= n2;
  return m;
}

/// Couples a SliceField to its particle with the canonical momenta held fixed, so each slice
/// evolves under a time-independent generator (exact Krylov steps) while f follows
/// df/dt = <v> of the interpolated state by RK4. Coordinates other than the resolved one enter
/// the slice generators at their start-of-step values.
inline SliceRun runSliceBenchmark(const HybridSystem& sys, SliceField field, std::vector<Vec3> f,
                                  const std::vector<Vec3>& p, double dt, std::size_t steps) {
  const std::size_t alpha = field.particle();
  const int ax = field.axis();
  const double lo = *std::min_element(field.nodes().begin(), field.nodes().end());
  const double hi = *std::max_element(field.nodes().begin(), field.nodes().end());
  auto velocity = [&](const std::vector<Vec3>& fs, const SliceField& sf) {
    return sys.rates(fs, p, normalizedMoments(sys, sf.at(fs[alpha][ax]))).df;
  };
  SliceRun run;
  run.momenta = p;
  double t = 0;
  auto record = [&]() {
    const double x = f[alpha][ax];
    if (x < lo || x > hi) throw DomainError("particle left the resolved interval");
    const auto psi = field.at(x);
    FieldSample s;
    s.t = t;
    s.f = f;
    s.v = velocity(f, field);
    std::tie(s.a, s.pi) = sys.fieldExpectations(psi);
    s.conduction = sys.conductionCurrent(f, p, psi);
    const auto ex = field.expectations(x);
    for (std::size_t k = 0; k < ex.deps.size(); ++k) {
      s.displacement.push_back(-s.v[alpha][ax] * ex.deps[k]);
      s.transport.push_back(s.v[alpha][ax] * ex.da[k]);
    }
    run.samples.push_back(std::move(s));
    run.snapshots.push_back(field.slices());
  };
  record();
  for (std::size_t n = 0; n < steps; ++n) {
    const auto k1 = velocity(f, field);
    SliceField mid = field;
    mid.advance(f, p, dt / 2);
    const auto k2 = velocity(detail::axpy(f, dt / 2, k1), mid);
    const auto k3 = velocity(detail::axpy(f, dt / 2, k2), mid);
    SliceField end = mid;
    end.advance(f, p, dt / 2);
    const auto k4 = velocity(detail::axpy(f, dt, k3), end);
    for (std::size_t a = 0; a < f.size(); ++a) f[a] = f[a] + (dt / 6) * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
    field = std::move(end);
    t += dt;
    record();
  }
  return run;
}

/// Displacement current from time differences alone: the change of <eps> along the path minus
/// its change at fixed position, J_disp = d<eps>/dt|_f - d<eps>/dt|_path. Entries exist for the
/// interior samples (index n - half of the input).
inline std::vector<std::vector<double>> displacementFromHistory(const SliceField& layout, const SliceRun& run, int order = 4) {
  const std::size_t half = order == 4 ? 2 : 1;
  const auto& S = run.samples;
  if (S.size() < 2 * half + 1) throw DomainError("displacement estimate needs more samples");
  const double h = S[1].t - S[0].t;
  const std::size_t alpha = layout.particle();
  const int ax = layout.axis();
  std::vector<std::vector<double>> out;
  for (std::size_t n = half; n + half < S.size(); ++n) {
    const std::size_t K = S[n].pi.size();
    std::vector<std::vector<double>> along(K, std::vector<double>(S.size(), 0.0)), fixed = along;
    for (std::size_t m = n - half; m <= n + half; ++m) {
      const auto ep = layout.expectations(run.snapshots[m], S[m].f[alpha][ax]).eps;
      const auto ef = layout.expectations(run.snapshots[m], S[n].f[alpha][ax]).eps;
      for (std::size_t k = 0; k < K; ++k) along[k][m] = ep[k], fixed[k][m] = ef[k];
    }
    std::vector<double> j(K);
    for (std::size_t k = 0; k < K; ++k)
      j[k] = quantum::centeredDerivative(fixed[k], n, h, order) - quantum::centeredDerivative(along[k], n, h, order);
    out.push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration-resolved quasi-trajectories.

/// Mean-field history seen by one particle and one designated mode.
struct MeanFieldPath {
  std::vector<double> t;
  std::vector<Vec3> f;                         // mean-field quasi-trajectory
  std::vector<double> aStar;                   // <a_*>(t)
  std::vector<double> marginalGrid;            // mode-axis coordinates
  std::vector<std::vector<double>> marginal;   // rho(a_*) at each sample, unit integral
};

inline std::vector<double> marginalDensity(const quantum::WaveFunction& psi, std::size_t axis) {
  const auto& g = psi.grid;
  const auto& ax = g.axis(axis);
  std::vector<double> m(static_cast<std::size_t>(ax.points), 0.0);
  const auto rho = psi.density();
  for (std::size_t i = 0; i < g.size(); ++i) m[static_cast<std::size_t>(g.index(i, axis))] += rho[i] * g.weight() / ax.step();
  return m;
}

inline MeanFieldPath recordPath(const HybridSystem& sys, const std::vector<HybridState>& history, std::size_t particle,
                                std::size_t mode) {
  if (particle >= sys.particleCount() || mode >= sys.modeCount()) throw DomainError("path particle/mode out of range");
  MeanFieldPath P;
  P.marginalGrid = sys.grid().axis(mode).coords();
  for (const auto& s : history) {
    P.t.push_back(s.t);
    P.f.push_back(s.f[particle]);
    P.aStar.push_back(sys.fieldExpectations(s.psi).first[mode]);
    P.marginal.push_back(marginalDensity(s.psi, mode));
  }
  return P;
}

struct QuasiTrajectoryTable {
  std::vector<double> times;
  std::vector<double> offsets;               // a_* - <a_*>, kept entries only
  std::vector<std::vector<Vec3>> f;          // f[offset][sample]
  std::vector<std::string> warnings;
};

namespace detail {

inline double interpolateLinear(const std::vector<double>& x, const std::vector<double>& y, double at) {
  if (at <= x.front()) return y.front();
  if (at >= x.back()) return y.back();
  const auto it = std::upper_bound(x.begin(), x.end(), at);
  const std::size_t j = static_cast<std::size_t>(it - x.begin()) - 1;
  const double u = (at - x[j]) / (x[j + 1] - x[j]);
  return (1 - u) * y[j] + u * y[j + 1];
}

}  // namespace detail

/// For each offset s the designated mode amplitude is held at a_* = <a_*>(t) + s while the others
/// sit at their expectations, so the quasi-trajectory obeys
///   df/dt = v_mf(t) - (e / (c M)) s m_*(f).
/// Integrated as the deviation from the mean-field path (RK4 per sample interval, path linear in
/// between), so s = 0 reproduces the mean-field trajectory exactly. Offsets whose configuration
/// falls below `floor` times the peak marginal density at any sample are dropped with a warning.
inline QuasiTrajectoryTable quasiTrajectoryTable(const HybridSystem& sys, const MeanFieldPath& path, std::size_t particle,
                                                 std::size_t mode, const std::vector<double>& offsets,
                                                 double floor = 1e-6, unsigned workers = 1) {
  if (path.t.size() < 2) throw DomainError("quasi-trajectory table needs at least 2 path samples");
  const auto& P = sys.spec().particles.at(particle);
  const double coef = P.charge / (sys.spec().pc.c * P.mass);
  const Vec3 L = sys.cell();
  auto unwrap = [&](Vec3 d) {
    for (int i = 0; i < 3; ++i)
      if (L[i] > 0) d[i] -= L[i] * std::round(d[i] / L[i]);
    return d;
  };
  QuasiTrajectoryTable T;
  T.times = path.t;
  for (double s : offsets) {
    bool ok = true;
    for (std::size_t n = 0; n < path.t.size() && ok; ++n) {
      const auto& m = path.marginal[n];
      const double peak = *std::max_element(m.begin(), m.end());
      if (detail::interpolateLinear(path.marginalGrid, m, path.aStar[n] + s) < floor * peak) ok = false;
    }
    if (ok)
      T.offsets.push_back(s);
    else
      T.warnings.push_back("offset " + io::formatDouble(s) + " leaves the supported region; truncated");
  }
  T.f.assign(T.offsets.size(), {});
  auto integrate = [&](std::size_t row) {
    const double s = T.offsets[row];
    std::vector<Vec3> out{path.f.front()};
    Vec3 delta{0, 0, 0};
    for (std::size_t n = 0; n + 1 < path.t.size(); ++n) {
      const double h = path.t[n + 1] - path.t[n];
      const Vec3 step = unwrap(path.f[n + 1] - path.f[n]);
      auto rate = [&](double u, const Vec3& d) {
        const Vec3 base = path.f[n] + u * step;
        return (-coef * s) * sys.sampleModes(base + d).value[mode];
      };
      const Vec3 k1 = rate(0, delta);
      const Vec3 k2 = rate(0.5, delta + (h / 2) * k1);
      const Vec3 k3 = rate(0.5, delta + (h / 2) * k2);
      const Vec3 k4 = rate(1, delta + h * k3);
      delta = delta + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      out.push_back(sys.wrap(path.f[n + 1] + delta));
    }
    T.f[row] = std::move(out);
  };
  const unsigned nw = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(T.offsets.size())));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < nw; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t row = w; row < T.offsets.size(); row += nw) integrate(row);
    });
  for (auto& th : pool) th.join();
  return T;
}

/// Gap |<f>_a - f_mf| per sample, averaging the table over the marginal density of the
/// designated mode (trapezoid weights over the kept offsets).
inline std::vector<double> resolvedOrderParameter(const QuasiTrajectoryTable& T, const MeanFieldPath& path) {
  std::vector<double> gap;
  const std::size_t R = T.offsets.size();
  if (R == 0) throw DomainError("empty quasi-trajectory table");
  for (std::size_t n = 0; n < T.times.size(); ++n) {
    Vec3 mean{0, 0, 0};
    double wsum = 0;
    for (std::size_t r = 0; r < R; ++r) {
      double dw = 0;
      if (r > 0) dw += 0.5 * (T.offsets[r] - T.offsets[r - 1]);
      if (r + 1 < R) dw += 0.5 * (T.offsets[r + 1] - T.offsets[r]);
      if (R == 1) dw = 1;
      const double w = dw * detail::interpolateLinear(path.marginalGrid, path.marginal[n], path.aStar[n] + T.offsets[r]);
      const Vec3 d = T.f[r][n] - path.f[n];
      mean = mean + w * d;
      wsum += w;
    }
    gap.push_back(norm((1.0 / wsum) * mean));
  }
  return gap;
}

inline io::CsvTable hybridCsv(const HybridSystem& sys, const std::vector<HybridState>& history) {
  std::vector<std::string> header{"t"};
  for (std::size_t a = 0; a < sys.particleCount(); ++a)
    for (const char* c : {"x", "y", "z"}) header.push_back(std::string("f") + std::to_string(a) + "_" + c);
  for (std::size_t a = 0; a < sys.particleCount(); ++a)
    for (const char* c : {"x", "y", "z"}) header.push_back(std::string("v") + std::to_string(a) + "_" + c);
  for (std::size_t k = 0; k < sys.modeCount(); ++k) {
    header.push_back("a" + std::to_string(k));
    header.push_back("pi" + std::to_string(k));
  }
  for (const char* c : {"E_total", "E_classical", "E_field", "order_parameter"}) header.push_back(c);
  io::CsvTable t(header);
  for (const auto& s : history) {
    std::vector<double> row{s.t};
    for (const auto& f : s.f) row.insert(row.end(), f.begin(), f.end());
    for (const auto& v : sys.meanVelocity(s)) row.insert(row.end(), v.begin(), v.end());
    const auto [a, pi] = sys.fieldExpectations(s.psi);
    for (std::size_t k = 0; k < a.size(); ++k) {
      row.push_back(a[k]);
      row.push_back(pi[k]);
    }
    const auto e = sys.energy(s);
    row.insert(row.end(), {e.total, e.classical, e.field, orderParameter(s)});
    t.row(row);
  }
  return t;
}

/// Frequencies present in a uniformly sampled real signal, by Prony's method: fit a linear
/// recurrence of order 2 * count and read the angles of the characteristic roots.
inline std::vector<double> pronyFrequencies(const std::vector<double>& y, double dt, std::size_t count) {
  const std::size_t p = 2 * count;
  if (y.size() < 3 * p) throw DomainError("signal too short for Prony analysis");
  const std::size_t rows = y.size() - p;
  RealMatrix A(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(p));
  RealVector b(static_cast<Eigen::Index>(rows));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < p; ++j) A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = y[r + j];
    b[static_cast<Eigen::Index>(r)] = y[r + p];
  }
  const RealVector coef = A.colPivHouseholderQr().solve(b);
  RealMatrix C = RealMatrix::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  for (std::size_t j = 0; j + 1 < p; ++j) C(static_cast<Eigen::Index>(j + 1), static_cast<Eigen::Index>(j)) = 1.0;
  for (std::size_t j = 0; j < p; ++j) C(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(p - 1)) = coef[static_cast<Eigen::Index>(j)];
  Eigen::EigenSolver<RealMatrix> es(C);
  std::vector<double> f;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double w = std::arg(es.eigenvalues()[i]) / dt;
    if (w > 0) f.push_back(w);
  }
  std::sort(f.begin(), f.end());
  return f;
}

}  // namespace svmqch::hybrid
