#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "svmqch/core.hpp"
#include "svmqch/io.hpp"
#include "svmqch/rng.hpp"

namespace svmqch::sde {

/// out = drift(state, t). `state` and `out` have the ensemble's dof.
using DriftFunction = std::function<void(std::span<const double> state, double t, std::span<double> out)>;

struct DriftField {
  std::size_t dof = 1;
  double diffusionCoeff = 0;  // noise variance rate: hbar/M, or hbar c^2 / dx^d for field sites
  DriftFunction forwardDrift;
  DriftFunction backwardDrift;  // optional
  DriftFunction osmoticSource;  // optional: grad ln rho
};

enum class Direction { Forward, Backward };

/// Recorded frames of every path, stored [path][frame][dof]. Frames are in increasing time
/// for both directions, so forward and backward ensembles over one window share the grid.
struct TrajectoryEnsemble {
  std::size_t pathCount = 0;
  std::size_t frameCount = 0;
  std::size_t dof = 1;
  double dt = 0;
  std::size_t recordStride = 1;
  double t0 = 0;
  Direction direction = Direction::Forward;
  double diffusionCoeff = 0;
  std::vector<double> data;

  double frameSpacing() const { return dt * static_cast<double>(recordStride); }
  double time(std::size_t frame) const { return t0 + frameSpacing() * static_cast<double>(frame); }
  double at(std::size_t path, std::size_t frame, std::size_t comp = 0) const {
    return data[(path * frameCount + frame) * dof + comp];
  }
  std::span<const double> state(std::size_t path, std::size_t frame) const {
    return {data.data() + (path * frameCount + frame) * dof, dof};
  }
  std::vector<double> column(std::size_t frame, std::size_t comp = 0) const {
    std::vector<double> out(pathCount);
    for (std::size_t p = 0; p < pathCount; ++p) out[p] = at(p, frame, comp);
    return out;
  }
};

struct IntegrationOptions {
  std::size_t recordStride = 1;
  unsigned workers = 1;
  double t0 = 0;  // start time (forward) or end time (backward)
  // Applied in place to each step's noise vector, e.g. the transverse projector.
  std::function<void(std::span<double>)> noiseTransform;
};

namespace detail {

template <class Body>
void parallelPaths(std::size_t pathCount, unsigned workers, Body&& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, pathCount))));
  if (workers == 1) {
    body(std::size_t{0}, pathCount);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (pathCount + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t lo = std::min(pathCount, w * chunk), hi = std::min(pathCount, lo + chunk);
    pool.emplace_back([&, w, lo, hi] {
      try {
        body(lo, hi);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline TrajectoryEnsemble integrate(const DriftFunction& drift, std::size_t dof, double diffusion,
                                    std::span<const double> init, std::size_t steps, const WienerStream& stream,
                                    const IntegrationOptions& opt, Direction dir) {
  if (!(stream.dt > 0)) throw DomainError("dt must be > 0");
  if (!drift) throw DomainError("drift function missing");
  if (dof == 0 || init.size() % dof != 0 || init.empty()) throw DomainError("initial sample set does not match dof");
  if (opt.recordStride == 0) throw DomainError("recordStride must be >= 1");
  TrajectoryEnsemble ens;
  ens.pathCount = init.size() / dof;
  ens.dof = dof;
  ens.dt = stream.dt;
  ens.recordStride = opt.recordStride;
  ens.frameCount = steps / opt.recordStride + 1;
  ens.direction = dir;
  ens.diffusionCoeff = diffusion;
  const double span = stream.dt * static_cast<double>((ens.frameCount - 1) * opt.recordStride);
  ens.t0 = dir == Direction::Forward ? opt.t0 : opt.t0 - span;
  ens.data.assign(ens.pathCount * ens.frameCount * dof, 0.0);
  const double amp = std::sqrt(diffusion);
  const double sgn = dir == Direction::Forward ? 1.0 : -1.0;

  parallelPaths(ens.pathCount, opt.workers, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> x(dof), b(dof), dw(dof);
    for (std::size_t p = lo; p < hi; ++p) {
      std::copy_n(init.begin() + p * dof, dof, x.begin());
      WienerStream ws{stream.seed, stream.streamId + p, stream.dt};
      auto record = [&](std::size_t step) {
        const std::size_t frame = step / opt.recordStride;
        const std::size_t slot = dir == Direction::Forward ? frame : ens.frameCount - 1 - frame;
        std::copy(x.begin(), x.end(), ens.data.begin() + (p * ens.frameCount + slot) * dof);
      };
      record(0);
      const std::size_t total = (ens.frameCount - 1) * opt.recordStride;
      for (std::size_t n = 0; n < total; ++n) {
        const double t = opt.t0 + sgn * stream.dt * static_cast<double>(n);
        drift(x, t, b);
        for (std::size_t c = 0; c < dof; ++c)
          if (!std::isfinite(b[c]))
            throw NumericalError("non-finite drift at path " + std::to_string(p) + ", step " + std::to_string(n));
        if (amp > 0) {
          ws.increments(n, dw);
          if (opt.noiseTransform) opt.noiseTransform(dw);
        }
        for (std::size_t c = 0; c < dof; ++c) x[c] += sgn * b[c] * stream.dt + (amp > 0 ? amp * dw[c] : 0.0);
        if ((n + 1) % opt.recordStride == 0) record(n + 1);
      }
    }
  });
  return ens;
}

}  // namespace detail

/// Euler–Maruyama for dx = b dt + sqrt(D) dW. `init` holds pathCount * dof values.
inline TrajectoryEnsemble integrateForward(const DriftField& drift, std::span<const double> init, std::size_t steps,
                                           const WienerStream& stream, const IntegrationOptions& opt = {}) {
  return detail::integrate(drift.forwardDrift, drift.dof, drift.diffusionCoeff, init, steps, stream, opt,
                           Direction::Forward);
}

/// Time-reversed Euler–Maruyama for dx = b~ dt + sqrt(D) dW (dt < 0), started at time opt.t0.
inline TrajectoryEnsemble integrateBackward(const DriftField& drift, std::span<const double> init, std::size_t steps,
                                            const WienerStream& stream, const IntegrationOptions& opt = {}) {
  if (!drift.backwardDrift) throw DomainError("backward drift not provided");
  return detail::integrate(drift.backwardDrift, drift.dof, drift.diffusionCoeff, init, steps, stream, opt,
                           Direction::Backward);
}

/// Draws `count` samples from a tabulated 1D density on a uniform grid by inverse CDF
/// (piecewise-linear density, so the CDF is piecewise quadratic).
inline std::vector<double> sampleInverseCdf(std::span<const double> grid, std::span<const double> density,
                                            std::size_t count, std::uint64_t seed, std::uint64_t stream = 0) {
  const std::size_t n = grid.size();
  if (n < 2 || density.size() != n) throw DomainError("inverse-CDF sampling needs a grid of >= 2 points");
  std::vector<double> cdf(n, 0.0);
  for (std::size_t i = 1; i < n; ++i)
    cdf[i] = cdf[i - 1] + 0.5 * (std::max(0.0, density[i]) + std::max(0.0, density[i - 1])) * (grid[i] - grid[i - 1]);
  const double total = cdf.back();
  if (!(total > 0)) throw DomainError("density has no mass");
  const CounterNormal rng(seed);
  std::vector<double> out(count);
  for (std::size_t s = 0; s < count; ++s) {
    const double target = rng.uniform(stream, s, 0) * total;
    const std::size_t i = std::min<std::size_t>(
        n - 2, static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), target) - cdf.begin()) - 1);
    const double h = grid[i + 1] - grid[i];
    const double r0 = std::max(0.0, density[i]), r1 = std::max(0.0, density[i + 1]);
    const double need = target - cdf[i];
    // Solve r0 u + (r1 - r0) u^2 / (2h) = need for u in [0, h].
    const double a = 0.5 * (r1 - r0) / h;
    double u;
    if (std::abs(a) < 1e-14 * std::max(r0, 1e-300)) {
      u = r0 > 0 ? need / r0 : 0.5 * h;
    } else {
      const double disc = std::max(0.0, r0 * r0 + 4 * a * need);
      u = 2 * need / (r0 + std::sqrt(disc));
    }
    out[s] = grid[i] + std::clamp(u, 0.0, h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conditional averages defining the mean forward / backward derivatives.

struct Binning {
  double lo = -1, hi = 1;
  std::size_t bins = 40;
  std::size_t minSamples = 30;
  std::size_t component = 0;  // state component to condition on and to differentiate

  double width() const { return (hi - lo) / static_cast<double>(bins); }
  double center(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * width(); }
  std::optional<std::size_t> bin(double x) const {
    if (!(x >= lo && x < hi)) return std::nullopt;
    return std::min(bins - 1, static_cast<std::size_t>((x - lo) / width()));
  }
};

struct ConditionalEstimate {
  std::vector<double> centers;
  std::vector<double> values;
  std::vector<double> standardErrors;
  std::vector<std::size_t> counts;
  std::vector<bool> valid;  // false for bins below minSamples (excluded from residual norms)

  std::size_t validCount() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true)); }
};

enum class DerivativeKind { Forward, Backward };

namespace detail {

struct BinAccumulator {
  std::vector<double> sum, sum2;
  std::vector<std::size_t> n;
  explicit BinAccumulator(std::size_t bins) : sum(bins, 0), sum2(bins, 0), n(bins, 0) {}
  void add(std::size_t b, double v) {
    sum[b] += v;
    sum2[b] += v * v;
    ++n[b];
  }
};

// Adds increments (x(t+lag) - x(t))/(lag h) conditioned on x(t) (forward) or
// (x(t) - x(t-lag))/(lag h) conditioned on x(t) (backward), for one frame.
inline void accumulateFrame(const TrajectoryEnsemble& e, std::size_t frame, std::size_t lag, DerivativeKind kind,
                            const Binning& bins, BinAccumulator& acc) {
  const double h = e.frameSpacing() * static_cast<double>(lag);
  for (std::size_t p = 0; p < e.pathCount; ++p) {
    const double x = e.at(p, frame, bins.component);
    const auto b = bins.bin(x);
    if (!b) continue;
    const double other = kind == DerivativeKind::Forward ? e.at(p, frame + lag, bins.component)
                                                          : e.at(p, frame - lag, bins.component);
    acc.add(*b, kind == DerivativeKind::Forward ? (other - x) / h : (x - other) / h);
  }
}

inline void checkFrames(const TrajectoryEnsemble& e, std::size_t first, std::size_t last, std::size_t lag,
                        DerivativeKind kind) {
  if (first > last || last >= e.frameCount) throw DomainError("frame range outside the ensemble window");
  if (kind == DerivativeKind::Forward && last + lag >= e.frameCount)
    throw DomainError("t + dt lies outside the ensemble window");
  if (kind == DerivativeKind::Backward && first < lag) throw DomainError("t - dt lies outside the ensemble window");
}

inline ConditionalEstimate finish(const Binning& bins, const BinAccumulator& acc) {
  ConditionalEstimate out;
  for (std::size_t i = 0; i < bins.bins; ++i) {
    out.centers.push_back(bins.center(i));
    out.counts.push_back(acc.n[i]);
    const bool ok = acc.n[i] >= bins.minSamples && acc.n[i] > 1;
    out.valid.push_back(ok);
    if (acc.n[i] == 0) {
      out.values.push_back(0);
      out.standardErrors.push_back(0);
      continue;
    }
    const double m = acc.sum[i] / acc.n[i];
    const double var = acc.n[i] > 1 ? std::max(0.0, (acc.sum2[i] - acc.n[i] * m * m) / (acc.n[i] - 1)) : 0.0;
    out.values.push_back(m);
    out.standardErrors.push_back(std::sqrt(var / acc.n[i]));
  }
  return out;
}

}  // namespace detail

/// Binned estimate of D x(t) = E[(x(t+dt) - x(t))/dt | x(t)] pooled over frames [first, last].
/// With richardson = true, returns 2 D(h) - D(2h), cancelling the O(h) bias.
inline ConditionalEstimate meanDerivative(const TrajectoryEnsemble& e, DerivativeKind kind, std::size_t first,
                                          std::size_t last, const Binning& bins, bool richardson = false) {
  if (bins.bins == 0 || !(bins.hi > bins.lo)) throw DomainError("invalid binning");
  detail::checkFrames(e, first, last, richardson ? 2 : 1, kind);
  detail::BinAccumulator one(bins.bins);
  for (std::size_t f = first; f <= last; ++f) detail::accumulateFrame(e, f, 1, kind, bins, one);
  ConditionalEstimate est = detail::finish(bins, one);
  if (!richardson) return est;
  detail::BinAccumulator two(bins.bins);
  for (std::size_t f = first; f <= last; ++f) detail::accumulateFrame(e, f, 2, kind, bins, two);
  const ConditionalEstimate est2 = detail::finish(bins, two);
  for (std::size_t i = 0; i < bins.bins; ++i) {
    est.values[i] = 2 * est.values[i] - est2.values[i];
    est.standardErrors[i] = std::hypot(2 * est.standardErrors[i], est2.standardErrors[i]);
    est.valid[i] = est.valid[i] && est2.valid[i];
  }
  return est;
}

inline ConditionalEstimate meanForwardDerivative(const TrajectoryEnsemble& e, std::size_t frame, const Binning& bins) {
  return meanDerivative(e, DerivativeKind::Forward, frame, frame, bins);
}

inline ConditionalEstimate meanBackwardDerivative(const TrajectoryEnsemble& e, std::size_t frame, const Binning& bins) {
  return meanDerivative(e, DerivativeKind::Backward, frame, frame, bins);
}

// ---------------------------------------------------------------------------
// Kernel density estimation on a 1D evaluation grid.

struct DensityEstimate {
  std::vector<double> grid;
  std::vector<double> values;
  std::vector<double> logGradient;  // d ln rho / dx at the grid points
  std::vector<double> gradient;     // d rho / dx at the grid points
  double bandwidth = 0;
  int order = 2;                    // kernel order

  double integral() const {
    double s = 0;
    for (std::size_t i = 1; i < grid.size(); ++i) s += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    return s;
  }
  /// Linear interpolation of (rho, d ln rho) at x; zero outside the grid.
  std::pair<double, double> sample(double x) const {
    if (grid.empty() || x < grid.front() || x > grid.back()) return {0.0, 0.0};
    const auto it = std::upper_bound(grid.begin(), grid.end(), x);
    const std::size_t i = std::min<std::size_t>(grid.size() - 2, static_cast<std::size_t>(it - grid.begin()) - 1);
    const double w = (x - grid[i]) / (grid[i + 1] - grid[i]);
    return {(1 - w) * values[i] + w * values[i + 1], (1 - w) * logGradient[i] + w * logGradient[i + 1]};
  }
};

inline std::vector<double> uniformGrid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

/// Silverman's rule-of-thumb bandwidth 0.9 min(sd, IQR/1.34) n^{-1/5}.
inline double silvermanBandwidth(std::vector<double> samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw DomainError("bandwidth rule needs >= 2 samples");
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double var = 0;
  for (double x : samples) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / (n - 1));
  std::sort(samples.begin(), samples.end());
  const double iqr = samples[(3 * n) / 4] - samples[n / 4];
  const double spread = iqr > 0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

/// Normal-reference bandwidth rate for the derivative of a fourth-order kernel estimate: spread n^{-1/11}.
inline double derivativeBandwidth(std::vector<double> samples) {
  const std::size_t n = samples.size();
  return silvermanBandwidth(std::move(samples)) / 0.9 * std::pow(static_cast<double>(n), 0.2 - 1.0 / 11.0);
}

/// Gaussian-kernel density of `samples` on `grid`, renormalized by trapezoid quadrature.
/// Order 4 uses the kernel (3 - z^2)/2 phi(z), whose O(h^2) bias cancels; its values may dip below zero in the tails.
inline DensityEstimate estimateDensity(std::span<const double> samples, std::vector<double> grid, double bandwidth,
                                       int order = 2) {
  if (!(bandwidth > 0)) throw DomainError("bandwidth must be > 0");
  if (order != 2 && order != 4) throw DomainError("kernel order must be 2 or 4");
  if (samples.empty()) throw DomainError("no samples");
  if (grid.size() < 2) throw DomainError("density grid needs >= 2 points");
  DensityEstimate d;
  d.bandwidth = bandwidth;
  d.order = order;
  d.grid = std::move(grid);
  d.values.assign(d.grid.size(), 0.0);
  d.logGradient.assign(d.grid.size(), 0.0);
  std::vector<double> deriv(d.grid.size(), 0.0);
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double cut = 9.0 * bandwidth;
  const double inv = 1.0 / bandwidth;
  for (std::size_t g = 0; g < d.grid.size(); ++g) {
    const double x = d.grid[g];
    auto lo = std::lower_bound(sorted.begin(), sorted.end(), x - cut);
    auto hi = std::upper_bound(sorted.begin(), sorted.end(), x + cut);
    double s = 0, ds = 0;
    for (auto it = lo; it != hi; ++it) {
      const double z = (x - *it) * inv;
      const double k = std::exp(-0.5 * z * z);
      if (order == 2) {
        s += k;
        ds -= z * inv * k;
      } else {
        s += 0.5 * (3 - z * z) * k;
        ds += 0.5 * (z * z * z - 5 * z) * inv * k;
      }
    }
    d.values[g] = s;
    deriv[g] = ds;
  }
  const double mass = d.integral();
  if (!(mass > 0)) throw DomainError("density grid does not cover the samples");
  d.gradient.resize(d.grid.size());
  for (std::size_t g = 0; g < d.grid.size(); ++g) {
    d.logGradient[g] = d.values[g] > 0 ? deriv[g] / d.values[g] : 0.0;
    d.values[g] /= mass;
    d.gradient[g] = deriv[g] / mass;
  }
  return d;
}

inline DensityEstimate estimateDensity(const TrajectoryEnsemble& e, std::size_t frame, std::vector<double> grid,
                                       double bandwidth, std::size_t component = 0) {
  if (e.pathCount < 100 && e.pathCount != 1) throw DomainError("density estimation needs >= 100 paths");
  const auto col = e.column(frame, component);
  return estimateDensity(col, std::move(grid), bandwidth);
}

/// L1 distance between a density estimate and a reference density evaluated on its grid.
inline double l1Distance(const DensityEstimate& d, const std::function<double(double)>& reference) {
  double s = 0;
  for (std::size_t i = 1; i < d.grid.size(); ++i) {
    const double a = std::abs(d.values[i] - reference(d.grid[i]));
    const double b = std::abs(d.values[i - 1] - reference(d.grid[i - 1]));
    s += 0.5 * (a + b) * (d.grid[i] - d.grid[i - 1]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Consistency condition b~ = b - D grad ln rho.

struct ConsistencyReport {
  double maxAbs = 0;
  double l2 = 0;          // rho-weighted L2 norm of the residual
  double scale = 0;       // rho-weighted L2 norm of D grad ln rho
  double relative = 0;    // l2 / scale (0 when scale vanishes)
  std::size_t probes = 0;  // points above the density floor
};

inline constexpr double kDensityFloor = 1e-6;

/// Residual b~ - b + D dlnrho at probe points; weights are rho at the probe.
inline ConsistencyReport consistencyResidual(std::span<const double> rho, std::span<const double> forward,
                                             std::span<const double> backward, std::span<const double> dlnrho,
                                             double diffusion, double floor = kDensityFloor) {
  ConsistencyReport r;
  const double rmax = rho.empty() ? 0.0 : *std::max_element(rho.begin(), rho.end());
  double num = 0, den = 0, w = 0;
  for (std::size_t i = 0; i < rho.size(); ++i) {
    if (!(rho[i] > floor * rmax) || !(rmax > 0)) continue;
    const double res = backward[i] - forward[i] + diffusion * dlnrho[i];
    r.maxAbs = std::max(r.maxAbs, std::abs(res));
    num += rho[i] * res * res;
    den += rho[i] * std::pow(diffusion * dlnrho[i], 2);
    w += rho[i];
    ++r.probes;
  }
  if (r.probes == 0) throw DomainError("insufficient support: density below floor at every probe");
  r.l2 = std::sqrt(num / w);
  r.scale = std::sqrt(den / w);
  r.relative = r.scale > 0 ? r.l2 / r.scale : 0.0;
  return r;
}

/// Evaluates the drift pair of a 1D DriftField against a density estimate on its grid.
inline ConsistencyReport verifyConsistency(const DriftField& drift, const DensityEstimate& density, double t = 0,
                                           double floor = kDensityFloor) {
  if (drift.dof != 1) throw DomainError("verifyConsistency on a density grid needs a 1-dof drift");
  if (!drift.forwardDrift || !drift.backwardDrift) throw DomainError("both drifts are required");
  const std::size_t n = density.grid.size();
  std::vector<double> f(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = density.grid[i];
    drift.forwardDrift(std::span<const double>(&x, 1), t, std::span<double>(&f[i], 1));
    drift.backwardDrift(std::span<const double>(&x, 1), t, std::span<double>(&b[i], 1));
  }
  return consistencyResidual(density.values, f, b, density.logGradient, drift.diffusionCoeff, floor);
}

/// Current form rho (b~ - b) + D drho = 0 of the same condition; it avoids dividing by a noisy density.
/// Norms are unweighted over the probes above the floor, relative to D drho.
inline ConsistencyReport fluxConsistencyResidual(std::span<const double> rho, std::span<const double> forward,
                                                 std::span<const double> backward, std::span<const double> drho,
                                                 double diffusion, double floor = kDensityFloor) {
  ConsistencyReport r;
  const double rmax = rho.empty() ? 0.0 : *std::max_element(rho.begin(), rho.end());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < rho.size(); ++i) {
    if (!(rho[i] > floor * rmax) || !(rmax > 0)) continue;
    const double res = rho[i] * (backward[i] - forward[i]) + diffusion * drho[i];
    r.maxAbs = std::max(r.maxAbs, std::abs(res));
    num += res * res;
    den += std::pow(diffusion * drho[i], 2);
    ++r.probes;
  }
  if (r.probes == 0) throw DomainError("insufficient support: density below floor at every probe");
  r.l2 = std::sqrt(num / r.probes);
  r.scale = std::sqrt(den / r.probes);
  r.relative = r.scale > 0 ? r.l2 / r.scale : 0.0;
  return r;
}

inline ConsistencyReport verifyFluxConsistency(const DriftField& drift, const DensityEstimate& density, double t = 0,
                                               double floor = kDensityFloor) {
  if (drift.dof != 1) throw DomainError("verifyFluxConsistency on a density grid needs a 1-dof drift");
  if (!drift.forwardDrift || !drift.backwardDrift) throw DomainError("both drifts are required");
  const std::size_t n = density.grid.size();
  std::vector<double> f(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = density.grid[i];
    drift.forwardDrift(std::span<const double>(&x, 1), t, std::span<double>(&f[i], 1));
    drift.backwardDrift(std::span<const double>(&x, 1), t, std::span<double>(&b[i], 1));
  }
  return fluxConsistencyResidual(density.values, f, b, density.gradient, drift.diffusionCoeff, floor);
}

/// Same check with ensemble-estimated forward/backward derivatives (bin centres as probes).
inline ConsistencyReport verifyConsistency(const ConditionalEstimate& forward, const ConditionalEstimate& backward,
                                           const DensityEstimate& density, double diffusion,
                                           double floor = kDensityFloor) {
  std::vector<double> rho, f, b, g;
  for (std::size_t i = 0; i < forward.centers.size(); ++i) {
    if (!forward.valid[i] || !backward.valid[i]) continue;
    const auto [r, lg] = density.sample(forward.centers[i]);
    rho.push_back(r);
    g.push_back(lg);
    f.push_back(forward.values[i]);
    b.push_back(backward.values[i]);
  }
  return consistencyResidual(rho, f, b, g, diffusion, floor);
}

// ---------------------------------------------------------------------------

/// Direct grid integration of d rho/dt = -d(b rho)/dx + (D/2) d^2 rho/dx^2 on a uniform grid with
/// zero-flux walls (conservative finite volumes, RK4 in time).
class FokkerPlanck1D {
 public:
  FokkerPlanck1D(std::vector<double> grid, double diffusion, std::function<double(double, double)> drift)
      : x_(std::move(grid)), D_(diffusion), drift_(std::move(drift)) {
    if (x_.size() < 3) throw DomainError("Fokker-Planck grid too small");
    h_ = x_[1] - x_[0];
  }

  const std::vector<double>& grid() const { return x_; }

  std::vector<double> evolve(std::vector<double> rho, double t0, double duration, double maxDt) const {
    const double stable = 0.2 * h_ * h_ / std::max(D_, 1e-300);
    const double dt0 = std::min(maxDt, stable);
    const std::size_t steps = static_cast<std::size_t>(std::ceil(duration / dt0));
    const double dt = duration / static_cast<double>(steps);
    double t = t0;
    const std::size_t n = rho.size();
    std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
    for (std::size_t s = 0; s < steps; ++s) {
      rhs(rho, t, k1);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = rho[i] + 0.5 * dt * k1[i];
      rhs(tmp, t + 0.5 * dt, k2);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = rho[i] + 0.5 * dt * k2[i];
      rhs(tmp, t + 0.5 * dt, k3);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = rho[i] + dt * k3[i];
      rhs(tmp, t + dt, k4);
      for (std::size_t i = 0; i < n; ++i) rho[i] += dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
      t += dt;
    }
    return rho;
  }

 private:
  void rhs(const std::vector<double>& rho, double t, std::vector<double>& out) const {
    const std::size_t n = rho.size();
    // Flux through the face between i and i+1.
    std::vector<double> flux(n + 1, 0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const double xf = 0.5 * (x_[i] + x_[i + 1]);
      flux[i + 1] = drift_(xf, t) * 0.5 * (rho[i] + rho[i + 1]) - 0.5 * D_ * (rho[i + 1] - rho[i]) / h_;
    }
    for (std::size_t i = 0; i < n; ++i) out[i] = -(flux[i + 1] - flux[i]) / h_;
  }

  std::vector<double> x_;
  double D_;
  double h_;
  std::function<double(double, double)> drift_;
};

// ---------------------------------------------------------------------------
// Export.

/// Binary layout: "SVMQENS1", u64 pathCount, u64 frameCount, u64 dof, f64 dt, f64 t0, u64 recordStride,
/// u64 direction (0 forward, 1 backward), f64 diffusionCoeff, then pathCount*frameCount*dof f64.
inline std::string serializeEnsemble(const TrajectoryEnsemble& e) {
  io::BinaryWriter w;
  w.bytes("SVMQENS1");
  w.u64(e.pathCount);
  w.u64(e.frameCount);
  w.u64(e.dof);
  w.f64(e.dt);
  w.f64(e.t0);
  w.u64(e.recordStride);
  w.u64(e.direction == Direction::Forward ? 0 : 1);
  w.f64(e.diffusionCoeff);
  for (double v : e.data) w.f64(v);
  return w.str();
}

inline TrajectoryEnsemble deserializeEnsemble(std::string bytes) {
  io::BinaryReader r(std::move(bytes));
  if (r.bytes(8) != "SVMQENS1") throw DomainError("not an ensemble dump");
  TrajectoryEnsemble e;
  e.pathCount = r.u64();
  e.frameCount = r.u64();
  e.dof = r.u64();
  e.dt = r.f64();
  e.t0 = r.f64();
  e.recordStride = r.u64();
  e.direction = r.u64() == 0 ? Direction::Forward : Direction::Backward;
  e.diffusionCoeff = r.f64();
  e.data.resize(e.pathCount * e.frameCount * e.dof);
  for (double& v : e.data) v = r.f64();
  if (!r.done()) throw DomainError("trailing bytes in ensemble dump");
  return e;
}

inline void writeEnsembleBinary(const std::filesystem::path& p, const TrajectoryEnsemble& e) {
  io::writeFileAtomic(p, serializeEnsemble(e));
}

/// One row per (path, frame): path, frame, t, x0..x{dof-1}.
inline void writeEnsembleCsv(const std::filesystem::path& p, const TrajectoryEnsemble& e) {
  std::vector<std::string> header{"path", "frame", "t"};
  for (std::size_t c = 0; c < e.dof; ++c) header.push_back("x" + std::to_string(c));
  io::CsvTable t(header);
  for (std::size_t path = 0; path < e.pathCount; ++path)
    for (std::size_t f = 0; f < e.frameCount; ++f) {
      std::vector<double> row{double(path), double(f), e.time(f)};
      for (std::size_t c = 0; c < e.dof; ++c) row.push_back(e.at(path, f, c));
      t.row(row);
    }
  t.write(p);
}

}  // namespace svmqch::sde
