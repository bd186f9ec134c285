#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "svmqch/core.hpp"

namespace svmqch::lattice {

// Periodic lattice. Sites are x = n * spacing, n_i in [0, dims[i]).
struct LatticeSpec {
  int dimension = 3;
  std::array<int, 3> dims{4, 4, 4};
  double spacing = 1.0;
  // 1D runs only: treat the single component as a scalar field (projector = identity).
  bool scalarAnalog = false;

  void validate() const {
    if (dimension < 1 || dimension > 3) throw ConfigError("lattice.dimension must be 1, 2 or 3");
    if (!(std::isfinite(spacing) && spacing > 0)) throw ConfigError("lattice.spacing must be finite and > 0");
    for (int a = 0; a < dimension; ++a)
      if (dims[a] < 1) throw ConfigError("lattice.dims entries must be >= 1");
    if (scalarAnalog && dimension != 1) throw ConfigError("lattice.scalar_analog requires dimension 1");
  }

  std::size_t siteCount() const {
    std::size_t n = 1;
    for (int a = 0; a < dimension; ++a) n *= static_cast<std::size_t>(dims[a]);
    return n;
  }
  int components() const { return scalarAnalog ? 1 : dimension; }
  // Number of components of b = curl a.
  int magneticComponents() const { return dimension == 3 ? 3 : 1; }
  std::size_t fieldSize() const { return siteCount() * static_cast<std::size_t>(components()); }
  double cellVolume() const { return std::pow(spacing, dimension); }
  double length(int axis) const { return dims[axis] * spacing; }
  int extent(int axis) const { return axis < dimension ? dims[axis] : 1; }

  std::size_t index(std::array<int, 3> n) const {
    std::size_t idx = 0;
    for (int a = dimension - 1; a >= 0; --a) idx = idx * dims[a] + wrapIndex(n[a], dims[a]);
    return idx;
  }
  std::array<int, 3> coords(std::size_t site) const {
    std::array<int, 3> n{0, 0, 0};
    for (int a = 0; a < dimension; ++a) {
      n[a] = static_cast<int>(site % dims[a]);
      site /= dims[a];
    }
    return n;
  }
  std::size_t neighbor(std::size_t site, int axis, int shift) const {
    auto n = coords(site);
    n[axis] += shift;
    return index(n);
  }
};

enum class ZeroModePolicy { Drop, Keep, Reject };

inline std::string toString(ZeroModePolicy p) {
  switch (p) {
    case ZeroModePolicy::Drop: return "drop";
    case ZeroModePolicy::Keep: return "keep";
    case ZeroModePolicy::Reject: return "reject";
  }
  return "?";
}

inline ZeroModePolicy zeroModePolicyFromString(const std::string& s) {
  if (s == "drop") return ZeroModePolicy::Drop;
  if (s == "keep") return ZeroModePolicy::Keep;
  if (s == "reject") return ZeroModePolicy::Reject;
  throw ConfigError("zero_mode_policy must be drop|keep|reject, got '" + s + "'");
}

// Vector fields are stored component-major: value(c, site) = values[c * N + site].
struct VectorFieldConfig {
  LatticeSpec spec;
  std::vector<double> values;
  bool transverse = false;

  explicit VectorFieldConfig(LatticeSpec s) : spec(s), values(s.fieldSize(), 0.0) {}
  VectorFieldConfig(LatticeSpec s, std::vector<double> v) : spec(s), values(std::move(v)) {
    if (values.size() != spec.fieldSize()) throw DomainError("field size does not match lattice");
  }
  double& at(int comp, std::size_t site) { return values[comp * spec.siteCount() + site]; }
  double at(int comp, std::size_t site) const { return values[comp * spec.siteCount() + site]; }
};

// ---------------------------------------------------------------------------
// Matrix-free difference operators. Forward difference F_i, backward B_i = -F_i^T.

inline void forwardDiff(const LatticeSpec& s, int axis, std::span<const double> in, std::span<double> out) {
  const std::size_t n = s.siteCount();
  for (std::size_t x = 0; x < n; ++x) out[x] = (in[s.neighbor(x, axis, +1)] - in[x]) / s.spacing;
}

inline void backwardDiff(const LatticeSpec& s, int axis, std::span<const double> in, std::span<double> out) {
  const std::size_t n = s.siteCount();
  for (std::size_t x = 0; x < n; ++x) out[x] = (in[x] - in[s.neighbor(x, axis, -1)]) / s.spacing;
}

/// Gradient of a scalar: N -> d*N (forward differences).
inline std::vector<double> gradient(const LatticeSpec& s, std::span<const double> phi) {
  const std::size_t n = s.siteCount();
  std::vector<double> out(n * s.dimension);
  for (int a = 0; a < s.dimension; ++a) forwardDiff(s, a, phi, std::span(out).subspan(a * n, n));
  return out;
}

/// Divergence of a d-component field: d*N -> N (backward differences, = -gradient^T).
inline std::vector<double> divergence(const LatticeSpec& s, std::span<const double> v) {
  const std::size_t n = s.siteCount();
  std::vector<double> out(n, 0.0), tmp(n);
  const int nc = static_cast<int>(v.size() / n);
  for (int a = 0; a < nc; ++a) {
    backwardDiff(s, a, v.subspan(a * n, n), tmp);
    for (std::size_t x = 0; x < n; ++x) out[x] += tmp[x];
  }
  return out;
}

inline std::vector<double> laplacian(const LatticeSpec& s, std::span<const double> phi) {
  return divergence(s, gradient(s, phi));
}

/// Magnetic operator b = C a with C^T C = -Laplacian on transverse fields.
/// d=3: forward curl; d=2: scalar b_z; 1D scalar analog: forward difference.
inline std::vector<double> curl(const LatticeSpec& s, std::span<const double> a) {
  const std::size_t n = s.siteCount();
  std::vector<double> t1(n), t2(n);
  if (s.dimension == 3) {
    std::vector<double> b(3 * n);
    for (int i = 0; i < 3; ++i) {
      const int j = (i + 1) % 3, k = (i + 2) % 3;
      forwardDiff(s, j, a.subspan(k * n, n), t1);
      forwardDiff(s, k, a.subspan(j * n, n), t2);
      for (std::size_t x = 0; x < n; ++x) b[i * n + x] = t1[x] - t2[x];
    }
    return b;
  }
  std::vector<double> b(n);
  if (s.dimension == 2) {
    forwardDiff(s, 0, a.subspan(n, n), t1);
    forwardDiff(s, 1, a.subspan(0, n), t2);
    for (std::size_t x = 0; x < n; ++x) b[x] = t1[x] - t2[x];
  } else {
    forwardDiff(s, 0, a.subspan(0, n), b);
  }
  return b;
}

/// C^T applied to a magnetic-type field.
inline std::vector<double> curlTranspose(const LatticeSpec& s, std::span<const double> b) {
  const std::size_t n = s.siteCount();
  std::vector<double> t1(n), t2(n);
  std::vector<double> a(s.fieldSize(), 0.0);
  if (s.dimension == 3) {
    // (C^T b)_k = sum_i eps_ijk F_j^T b_i = -sum eps_ijk B_j b_i
    for (int i = 0; i < 3; ++i) {
      const int j = (i + 1) % 3, k = (i + 2) % 3;
      backwardDiff(s, j, b.subspan(i * n, n), t1);
      backwardDiff(s, k, b.subspan(i * n, n), t2);
      for (std::size_t x = 0; x < n; ++x) {
        a[k * n + x] -= t1[x];
        a[j * n + x] += t2[x];
      }
    }
  } else if (s.dimension == 2) {
    backwardDiff(s, 0, b, t1);
    backwardDiff(s, 1, b, t2);
    for (std::size_t x = 0; x < n; ++x) {
      a[n + x] = -t1[x];
      a[x] = t2[x];
    }
  } else {
    backwardDiff(s, 0, b, t1);
    for (std::size_t x = 0; x < n; ++x) a[x] = -t1[x];
  }
  return a;
}

/// Divergence of a face-centred magnetic field (forward differences); identically zero on curls.
inline std::vector<double> magneticDivergence(const LatticeSpec& s, std::span<const double> b) {
  const std::size_t n = s.siteCount();
  std::vector<double> out(n, 0.0), tmp(n);
  if (s.dimension != 3) return out;
  for (int a = 0; a < 3; ++a) {
    forwardDiff(s, a, b.subspan(a * n, n), tmp);
    for (std::size_t x = 0; x < n; ++x) out[x] += tmp[x];
  }
  return out;
}

enum class OperatorKind { GradientComponent, Laplacian, CurlComponent, Divergence };

struct DiscreteOperator {
  RealMatrix matrix;
  OperatorKind kind;
};

namespace detail {
template <class F>
RealMatrix denseFromAction(std::size_t inSize, std::size_t outSize, F&& apply) {
  RealMatrix m(outSize, inSize);
  std::vector<double> e(inSize, 0.0);
  for (std::size_t j = 0; j < inSize; ++j) {
    e[j] = 1.0;
    const std::vector<double> col = apply(std::span<const double>(e));
    for (std::size_t i = 0; i < outSize; ++i) m(i, j) = col[i];
    e[j] = 0.0;
  }
  return m;
}
}  // namespace detail

inline constexpr std::size_t kDenseSiteLimit = 216;  // 6^3

inline DiscreteOperator gradientOperator(const LatticeSpec& s, int axis) {
  const std::size_t n = s.siteCount();
  return {detail::denseFromAction(n, n,
                                  [&](std::span<const double> v) {
                                    std::vector<double> o(n);
                                    forwardDiff(s, axis, v, o);
                                    return o;
                                  }),
          OperatorKind::GradientComponent};
}

inline DiscreteOperator laplacianOperator(const LatticeSpec& s) {
  const std::size_t n = s.siteCount();
  return {detail::denseFromAction(n, n, [&](std::span<const double> v) { return laplacian(s, v); }),
          OperatorKind::Laplacian};
}

inline DiscreteOperator divergenceOperator(const LatticeSpec& s) {
  return {detail::denseFromAction(s.fieldSize(), s.siteCount(),
                                  [&](std::span<const double> v) { return divergence(s, v); }),
          OperatorKind::Divergence};
}

inline DiscreteOperator curlOperator(const LatticeSpec& s) {
  return {detail::denseFromAction(s.fieldSize(), s.siteCount() * s.magneticComponents(),
                                  [&](std::span<const double> v) { return curl(s, v); }),
          OperatorKind::CurlComponent};
}

// ---------------------------------------------------------------------------
// Discrete Fourier transform along lattice axes (separable, exact sums).

inline std::vector<Complex> dft(const LatticeSpec& s, std::vector<Complex> data, int sign) {
  const std::size_t n = s.siteCount();
  std::vector<Complex> tmp(n);
  for (int axis = 0; axis < s.dimension; ++axis) {
    const int L = s.dims[axis];
    std::vector<Complex> tw(L);
    for (int m = 0; m < L; ++m) tw[m] = std::polar(1.0, sign * 2.0 * kPi * m / L);
    for (std::size_t x = 0; x < n; ++x) {
      auto c = s.coords(x);
      const int kx = c[axis];
      Complex acc = 0.0;
      for (int j = 0; j < L; ++j) {
        c[axis] = j;
        acc += data[s.index(c)] * tw[(static_cast<long>(kx) * j) % L];
      }
      tmp[x] = acc;
    }
    data.swap(tmp);
  }
  return data;
}

/// Wavevector of Fourier index (site-ordered) and the forward-difference symbol s_i = (e^{ik_i dx} - 1)/dx.
inline std::array<double, 3> wavevector(const LatticeSpec& s, std::size_t kIndex) {
  const auto n = s.coords(kIndex);
  std::array<double, 3> k{0, 0, 0};
  for (int a = 0; a < s.dimension; ++a) {
    int m = n[a];
    if (2 * m > s.dims[a]) m -= s.dims[a];
    k[a] = 2.0 * kPi * m / s.length(a);
  }
  return k;
}

inline std::array<Complex, 3> differenceSymbol(const LatticeSpec& s, const std::array<double, 3>& k) {
  std::array<Complex, 3> sym{0.0, 0.0, 0.0};
  for (int a = 0; a < s.dimension; ++a)
    sym[a] = (std::polar(1.0, k[a] * s.spacing) - 1.0) / s.spacing;
  return sym;
}

/// Real lattice momentum kappa_i = 2 sin(k_i dx / 2) / dx; omega = c |kappa|.
inline std::array<double, 3> latticeMomentum(const LatticeSpec& s, const std::array<double, 3>& k) {
  std::array<double, 3> kap{0, 0, 0};
  for (int a = 0; a < s.dimension; ++a) kap[a] = 2.0 * std::sin(0.5 * k[a] * s.spacing) / s.spacing;
  return kap;
}

/// Per-wavevector projector matrix (components x components) in the site frame.
inline ComplexMatrix projectorSymbol(const LatticeSpec& s, std::size_t kIndex, ZeroModePolicy policy) {
  const int nc = s.components();
  ComplexMatrix P = ComplexMatrix::Identity(nc, nc);
  if (kIndex == 0) {
    if (policy == ZeroModePolicy::Drop) P.setZero();
    return P;
  }
  if (s.scalarAnalog) return P;
  const auto sym = differenceSymbol(s, wavevector(s, kIndex));
  double s2 = 0;
  for (int a = 0; a < nc; ++a) s2 += std::norm(sym[a]);
  if (s2 == 0.0) return P;
  for (int i = 0; i < nc; ++i)
    for (int j = 0; j < nc; ++j) P(i, j) -= sym[i] * std::conj(sym[j]) / s2;
  return P;
}

// ---------------------------------------------------------------------------

/// Coulomb-gauge projector P = I - G L^+ D with a zero-mode policy.
/// Dense for lattices up to 6^3 sites; beyond that only the Fourier-space action is available.
class TransverseProjector {
 public:
  TransverseProjector(const LatticeSpec& spec, ZeroModePolicy policy) : spec_(spec), policy_(policy) {
    spec_.validate();
    if (policy_ == ZeroModePolicy::Reject)
      throw NumericalError("singular lattice laplacian: the k=0 mode has no inverse (zero_mode_policy=reject)");
    if (spec_.siteCount() <= kDenseSiteLimit) buildDense();
  }

  const LatticeSpec& spec() const { return spec_; }
  ZeroModePolicy zeroModePolicy() const { return policy_; }
  bool hasMatrix() const { return matrix_.size() > 0; }
  const RealMatrix& matrix() const {
    if (!hasMatrix()) throw DomainError("projector matrix is only materialized up to 6^3 sites");
    return matrix_;
  }

  std::vector<double> apply(std::span<const double> v) const {
    if (v.size() != spec_.fieldSize()) throw DomainError("projector input has wrong size");
    if (hasMatrix()) {
      Eigen::Map<const RealVector> in(v.data(), static_cast<Eigen::Index>(v.size()));
      RealVector out = matrix_ * in;
      return {out.data(), out.data() + out.size()};
    }
    return applyFourier(v);
  }

  std::vector<double> applyFourier(std::span<const double> v) const {
    const std::size_t n = spec_.siteCount();
    const int nc = spec_.components();
    std::vector<std::vector<Complex>> hat(nc);
    for (int c = 0; c < nc; ++c) hat[c] = dft(spec_, std::vector<Complex>(v.begin() + c * n, v.begin() + (c + 1) * n), -1);
    std::vector<std::vector<Complex>> outHat(nc, std::vector<Complex>(n));
    ComplexVector comp(nc);
    for (std::size_t k = 0; k < n; ++k) {
      for (int c = 0; c < nc; ++c) comp[c] = hat[c][k];
      const ComplexVector r = projectorSymbol(spec_, k, policy_) * comp;
      for (int c = 0; c < nc; ++c) outHat[c][k] = r[c];
    }
    std::vector<double> out(v.size());
    for (int c = 0; c < nc; ++c) {
      const auto back = dft(spec_, std::move(outHat[c]), +1);
      for (std::size_t x = 0; x < n; ++x) out[c * n + x] = back[x].real() / static_cast<double>(n);
    }
    return out;
  }

 private:
  void buildDense() {
    const std::size_t n = spec_.siteCount();
    const int nc = spec_.components();
    const Eigen::Index dim = static_cast<Eigen::Index>(n * nc);
    if (spec_.scalarAnalog) {
      matrix_ = RealMatrix::Identity(dim, dim);
    } else {
      const RealMatrix G = detail::denseFromAction(n, n * nc, [&](std::span<const double> v) { return gradient(spec_, v); });
      const RealMatrix D = -G.transpose();
      const RealMatrix L = D * G;
      Eigen::SelfAdjointEigenSolver<RealMatrix> eig(L);
      RealVector inv = eig.eigenvalues();
      const double tol = 1e-10 * std::max(1.0, inv.cwiseAbs().maxCoeff());
      for (Eigen::Index i = 0; i < inv.size(); ++i) inv[i] = std::abs(inv[i]) > tol ? 1.0 / inv[i] : 0.0;
      const RealMatrix Lpinv = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
      matrix_ = RealMatrix::Identity(dim, dim) - G * Lpinv * D;
      matrix_ = 0.5 * (matrix_ + matrix_.transpose()).eval();
    }
    if (policy_ == ZeroModePolicy::Drop) {
      // Remove the spatially constant sector of every component.
      for (int c = 0; c < nc; ++c)
        matrix_.block(c * n, c * n, n, n).array() -= 1.0 / static_cast<double>(n);
    }
  }

  LatticeSpec spec_;
  ZeroModePolicy policy_;
  RealMatrix matrix_;
};

inline TransverseProjector buildProjector(const LatticeSpec& spec, ZeroModePolicy policy = ZeroModePolicy::Drop) {
  return TransverseProjector(spec, policy);
}

// ---------------------------------------------------------------------------

struct Mode {
  std::array<double, 3> k{};          // wavevector
  std::array<double, 3> kappa{};      // lattice momentum, omega = c |kappa|
  std::array<Complex, 3> polarization{};  // staggered-frame polarization, kappa . pol = 0
  double omega = 0;
};

/// Real orthonormal transverse modes: sum_x dx^d m_k(x) . m_l(x) = delta_kl.
struct ModeBasis {
  LatticeSpec spec;
  ZeroModePolicy policy = ZeroModePolicy::Drop;
  std::vector<Mode> modes;
  RealMatrix vectors;  // fieldSize x K
  std::size_t totalTransverse = 0;
  bool zeroModeExcluded = true;

  std::size_t size() const { return modes.size(); }
  bool complete() const { return modes.size() == totalTransverse; }

  RealVector expand(std::span<const double> field) const {
    Eigen::Map<const RealVector> v(field.data(), static_cast<Eigen::Index>(field.size()));
    return spec.cellVolume() * (vectors.transpose() * v);
  }
  std::vector<double> resum(const RealVector& amplitudes) const {
    RealVector v = vectors * amplitudes;
    return {v.data(), v.data() + v.size()};
  }
  /// Mode function k evaluated as a field.
  std::vector<double> modeField(std::size_t k) const {
    return {vectors.col(k).data(), vectors.col(k).data() + vectors.rows()};
  }

  /// Rotates each degenerate wavevector sector so that at most one mode per sector couples
  /// to component `comp` at `point` (multilinear interpolation), then reorders modes by
  /// (omega, coupling strength desc). Keeps completeness.
  void concentrateCoupling(const Vec3& point, int comp);
};

namespace detail {
inline bool isCanonicalRepresentative(const LatticeSpec& s, std::size_t kIndex) {
  const auto n = s.coords(kIndex);
  std::array<int, 3> m{0, 0, 0};
  for (int a = 0; a < s.dimension; ++a) m[a] = static_cast<int>(wrapIndex(-n[a], s.dims[a]));
  return s.index(n) <= s.index(m);
}
}  // namespace detail

inline ModeBasis decomposeModes(const LatticeSpec& spec, std::size_t keep = 0,
                                ZeroModePolicy policy = ZeroModePolicy::Drop, double c = 1.0) {
  spec.validate();
  if (policy == ZeroModePolicy::Reject) throw NumericalError("singular lattice laplacian (zero_mode_policy=reject)");
  const std::size_t n = spec.siteCount();
  const int nc = spec.components();
  const double norm = 1.0 / std::sqrt(spec.cellVolume());

  struct Candidate {
    Mode mode;
    std::vector<double> field;
    std::size_t order;
  };
  std::vector<Candidate> all;
  for (std::size_t kIdx = 0; kIdx < n; ++kIdx) {
    if (!detail::isCanonicalRepresentative(spec, kIdx)) continue;
    const auto k = wavevector(spec, kIdx);
    const ComplexMatrix P = projectorSymbol(spec, kIdx, policy);
    // Real and imaginary parts of e^{ik.x} P e_c span the real transverse sector of {k, -k}.
    std::vector<RealVector> sector;
    for (int c = 0; c < nc; ++c) {
      RealVector re(static_cast<Eigen::Index>(n * nc)), im(static_cast<Eigen::Index>(n * nc));
      for (std::size_t x = 0; x < n; ++x) {
        const auto xc = spec.coords(x);
        double phase = 0;
        for (int a = 0; a < spec.dimension; ++a) phase += k[a] * xc[a] * spec.spacing;
        const Complex e = std::polar(1.0, phase);
        for (int i = 0; i < nc; ++i) {
          const Complex v = e * P(i, c);
          re[i * n + x] = v.real();
          im[i * n + x] = v.imag();
        }
      }
      for (RealVector* cand : {&re, &im}) {
        RealVector v = *cand;
        for (int pass = 0; pass < 2; ++pass)
          for (const auto& q : sector) v -= q.dot(v) * q;
        const double nv = v.norm();
        if (nv > 1e-8) sector.push_back(v / nv);
      }
    }
    const auto kap = latticeMomentum(spec, k);
    double kap2 = 0;
    for (double q : kap) kap2 += q * q;
    for (const auto& q : sector) {
      Candidate cand;
      cand.mode.k = k;
      cand.mode.kappa = kap;
      cand.mode.omega = c * std::sqrt(kap2);
      // Staggered-frame polarization from the e^{ik.x} Fourier component.
      std::array<Complex, 3> pol{0.0, 0.0, 0.0};
      double pn = 0;
      for (int i = 0; i < nc; ++i) {
        Complex acc = 0;
        for (std::size_t x = 0; x < n; ++x) {
          const auto xc = spec.coords(x);
          double phase = 0;
          for (int a = 0; a < spec.dimension; ++a) phase += k[a] * xc[a] * spec.spacing;
          acc += q[i * n + x] * std::polar(1.0, -phase);
        }
        pol[i] = acc * std::polar(1.0, -0.5 * k[i] * spec.spacing);
        pn += std::norm(pol[i]);
      }
      if (pn > 0)
        for (auto& p : pol) p /= std::sqrt(pn);
      cand.mode.polarization = pol;
      cand.field.assign(q.data(), q.data() + q.size());
      for (double& v : cand.field) v *= norm;
      cand.order = all.size();
      all.push_back(std::move(cand));
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
    return a.mode.omega < b.mode.omega - 1e-12;
  });
  const std::size_t total = all.size();
  if (keep == 0) keep = total;
  if (keep > total)
    throw DomainError("mode truncation K=" + std::to_string(keep) + " exceeds the " + std::to_string(total) +
                      " transverse modes of this lattice");
  ModeBasis basis;
  basis.spec = spec;
  basis.policy = policy;
  basis.totalTransverse = total;
  basis.zeroModeExcluded = policy == ZeroModePolicy::Drop;
  basis.vectors.resize(static_cast<Eigen::Index>(spec.fieldSize()), static_cast<Eigen::Index>(keep));
  for (std::size_t i = 0; i < keep; ++i) {
    basis.modes.push_back(all[i].mode);
    for (std::size_t r = 0; r < all[i].field.size(); ++r) basis.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = all[i].field[r];
  }
  return basis;
}

/// Sub-basis made of the listed modes (in the given order).
inline ModeBasis selectModes(const ModeBasis& basis, const std::vector<std::size_t>& which) {
  ModeBasis out;
  out.spec = basis.spec;
  out.policy = basis.policy;
  out.totalTransverse = basis.totalTransverse;
  out.zeroModeExcluded = basis.zeroModeExcluded;
  out.vectors.resize(basis.vectors.rows(), static_cast<Eigen::Index>(which.size()));
  for (std::size_t i = 0; i < which.size(); ++i) {
    if (which[i] >= basis.size()) throw DomainError("mode index out of range");
    out.modes.push_back(basis.modes[which[i]]);
    out.vectors.col(static_cast<Eigen::Index>(i)) = basis.vectors.col(static_cast<Eigen::Index>(which[i]));
  }
  return out;
}

/// Single real standing wave pol * sqrt(2 / (N dx^d)) * sin(2 pi x_axis / L + phase), the
/// lowest harmonic along `axis`. Transverse whenever pol != axis, and an eigenmode of the
/// lattice curl-curl operator with omega = c |kappa|.
inline ModeBasis standingWave(const LatticeSpec& s, int axis, int polarization, double phase = 0.0, double c = 1.0) {
  s.validate();
  if (axis < 0 || axis >= s.dimension || polarization < 0 || polarization >= s.components())
    throw DomainError("standing wave axis/polarization out of range");
  if (polarization == axis && !s.scalarAnalog) throw DomainError("standing wave must be transverse");
  if (s.dims[axis] < 3) throw DomainError("standing wave needs at least 3 sites along its axis");
  const std::size_t n = s.siteCount();
  ModeBasis b;
  b.spec = s;
  b.totalTransverse = n * static_cast<std::size_t>(s.components());
  b.vectors = RealMatrix::Zero(static_cast<Eigen::Index>(s.fieldSize()), 1);
  const double norm = std::sqrt(2.0 / (static_cast<double>(n) * s.cellVolume()));
  const double k = 2 * kPi / s.length(axis);
  for (std::size_t site = 0; site < n; ++site) {
    const double x = s.coords(site)[axis] * s.spacing;
    b.vectors(static_cast<Eigen::Index>(polarization * n + site), 0) = norm * std::sin(k * x + phase);
  }
  Mode m;
  m.k[axis] = k;
  m.kappa = latticeMomentum(s, m.k);
  m.polarization[polarization] = 1.0;
  m.omega = c * std::abs(m.kappa[axis]);
  b.modes.push_back(m);
  return b;
}

// ---------------------------------------------------------------------------
// Multilinear interpolation on the periodic lattice.

struct StencilPoint {
  std::size_t site;
  double weight;
  std::array<double, 3> dweight;  // d weight / d point
};

inline std::vector<StencilPoint> interpolationStencil(const LatticeSpec& s, const Vec3& point) {
  std::array<int, 3> base{0, 0, 0};
  std::array<double, 3> frac{0, 0, 0};
  for (int a = 0; a < s.dimension; ++a) {
    const double u = wrapPeriodic(point[a], s.length(a)) / s.spacing;
    const double fl = std::floor(u);
    base[a] = static_cast<int>(fl);
    frac[a] = u - fl;
  }
  std::vector<StencilPoint> out;
  const int corners = 1 << s.dimension;
  for (int m = 0; m < corners; ++m) {
    std::array<int, 3> n = base;
    double w = 1.0;
    std::array<double, 3> dw{0, 0, 0};
    std::array<double, 3> f1{1, 1, 1}, d1{0, 0, 0};
    for (int a = 0; a < s.dimension; ++a) {
      const bool up = (m >> a) & 1;
      n[a] += up ? 1 : 0;
      f1[a] = up ? frac[a] : 1.0 - frac[a];
      d1[a] = (up ? 1.0 : -1.0) / s.spacing;
      w *= f1[a];
    }
    for (int a = 0; a < s.dimension; ++a) {
      double g = d1[a];
      for (int b = 0; b < s.dimension; ++b)
        if (b != a) g *= f1[b];
      dw[a] = g;
    }
    out.push_back({s.index(n), w, dw});
  }
  return out;
}

/// Field value at an off-lattice point (periodic wrap). Components beyond the field's are zero.
inline Vec3 interpolateField(const VectorFieldConfig& cfg, const Vec3& point) {
  Vec3 out{0, 0, 0};
  const int nc = cfg.spec.components();
  for (const auto& sp : interpolationStencil(cfg.spec, point))
    for (int c = 0; c < nc; ++c) out[c] += sp.weight * cfg.at(c, sp.site);
  return out;
}

inline void ModeBasis::concentrateCoupling(const Vec3& point, int comp) {
  const auto stencil = interpolationStencil(spec, point);
  const std::size_t n = spec.siteCount();
  auto coupling = [&](Eigen::Index col) {
    double g = 0;
    for (const auto& sp : stencil) g += sp.weight * vectors(static_cast<Eigen::Index>(comp * n + sp.site), col);
    return g;
  };
  std::size_t start = 0;
  while (start < modes.size()) {
    std::size_t end = start + 1;
    while (end < modes.size() && std::abs(modes[end].omega - modes[start].omega) < 1e-10 * std::max(1.0, modes[start].omega)) ++end;
    const Eigen::Index m = static_cast<Eigen::Index>(end - start);
    if (m > 1) {
      RealVector g(m);
      for (Eigen::Index i = 0; i < m; ++i) g[i] = coupling(static_cast<Eigen::Index>(start) + i);
      if (g.norm() > 1e-14) {
        const RealMatrix gm = g;
        Eigen::HouseholderQR<RealMatrix> qr(gm);
        RealMatrix Q = qr.householderQ();
        if (Q.col(0).dot(g) < 0) Q.col(0) *= -1.0;
        vectors.middleCols(static_cast<Eigen::Index>(start), m) = vectors.middleCols(static_cast<Eigen::Index>(start), m) * Q;
        // Rotated modes inherit the metadata of the most strongly coupled original.
        Eigen::Index best = 0;
        g.cwiseAbs().maxCoeff(&best);
        const Mode lead = modes[start + best];
        for (Eigen::Index i = 0; i < m; ++i) modes[start + i] = lead;
      }
    }
    start = end;
  }
}

/// Charge density of a point charge (adjoint of interpolation): rho = q W / dx^d.
inline std::vector<double> depositCharge(const LatticeSpec& s, double charge, const Vec3& point) {
  std::vector<double> rho(s.siteCount(), 0.0);
  for (const auto& sp : interpolationStencil(s, point)) rho[sp.site] += charge * sp.weight / s.cellVolume();
  return rho;
}

/// Charge-conserving current of a point charge moving on a straight line from `from` to `to`
/// over `dt` (first-order shapes). Face-centred: component a at site x is the flux through
/// the face between x and x + e_a. Satisfies (rho1 - rho0)/dt + div J = 0 exactly.
inline std::vector<double> chargeConservingCurrent(const LatticeSpec& s, double charge, const Vec3& from,
                                                   const Vec3& to, double dt) {
  const std::size_t n = s.siteCount();
  std::vector<double> J(n * s.components(), 0.0);
  constexpr int W = 4;
  std::array<int, 3> origin{0, 0, 0};
  std::array<std::array<double, W>, 3> S0{}, S1{};
  for (int a = 0; a < 3; ++a) {
    S0[a].fill(0);
    S1[a].fill(0);
  }
  for (int a = 0; a < s.dimension; ++a) {
    const double L = s.length(a);
    const double u0 = wrapPeriodic(from[a], L) / s.spacing;
    double d = to[a] - from[a];
    d -= L * std::round(d / L);
    if (std::abs(d) >= s.spacing) throw DomainError("charge moved more than one cell in one step");
    const double u1 = u0 + d / s.spacing;
    origin[a] = static_cast<int>(std::floor(std::min(u0, u1))) - 1;
    auto fill = [&](double u, std::array<double, W>& S) {
      const int i0 = static_cast<int>(std::floor(u));
      const double f = u - i0;
      S[i0 - origin[a]] += 1.0 - f;
      S[i0 + 1 - origin[a]] += f;
    };
    fill(u0, S0[a]);
    fill(u1, S1[a]);
  }
  for (int a = s.dimension; a < 3; ++a) {
    S0[a][0] = 1.0;
    S1[a][0] = 1.0;
  }
  const int ex = W, ey = s.dimension > 1 ? W : 1, ez = s.dimension > 2 ? W : 1;
  const double fluxToCurrent = 1.0 / (dt * std::pow(s.spacing, s.dimension - 1));
  for (int comp = 0; comp < s.dimension; ++comp) {
    const int b = (comp + 1) % 3, c = (comp + 2) % 3;
    const std::array<int, 3> ext{ex, ey, ez};
    // Iterate transverse window positions, cumulative sum along comp.
    for (int ib = 0; ib < ext[b]; ++ib) {
      for (int ic = 0; ic < ext[c]; ++ic) {
        double flux = 0;
        for (int ia = 0; ia < ext[comp]; ++ia) {
          const double ds = S1[comp][ia] - S0[comp][ia];
          double w;
          if (s.dimension == 1) {
            w = ds;
          } else if (s.dimension == 2) {
            const int o = comp == 0 ? 1 : 0;
            const int io = comp == 0 ? (b == 1 ? ib : ic) : (b == 0 ? ib : ic);
            w = 0.5 * ds * (S0[o][io] + S1[o][io]);
          } else {
            const double s0b = S0[b][ib], s1b = S1[b][ib], s0c = S0[c][ic], s1c = S1[c][ic];
            w = ds * (s1b * s1c / 3.0 + s0b * s1c / 6.0 + s1b * s0c / 6.0 + s0b * s0c / 3.0);
          }
          flux -= charge * w;
          std::array<int, 3> site{0, 0, 0};
          site[comp] = origin[comp] + ia;
          site[b] = origin[b] + ib;
          site[c] = origin[c] + ic;
          if (s.dimension == 2 && (b == 2 || c == 2)) {
            if (b == 2 && ib > 0) continue;
            if (c == 2 && ic > 0) continue;
          }
          J[comp * n + s.index(site)] += flux * fluxToCurrent;
        }
      }
    }
  }
  return J;
}

/// Solves Laplacian(phi) = -(rho - mean(rho)) in Fourier space; returns phi with zero mean.
inline std::vector<double> solvePoisson(const LatticeSpec& s, std::span<const double> rho) {
  const std::size_t n = s.siteCount();
  std::vector<Complex> r(rho.begin(), rho.end());
  auto hat = dft(s, std::move(r), -1);
  for (std::size_t k = 0; k < n; ++k) {
    const auto kap = latticeMomentum(s, wavevector(s, k));
    double k2 = 0;
    for (double q : kap) k2 += q * q;
    hat[k] = k2 > 0 ? hat[k] / k2 : 0.0;
  }
  const auto back = dft(s, std::move(hat), +1);
  std::vector<double> phi(n);
  for (std::size_t x = 0; x < n; ++x) phi[x] = back[x].real() / static_cast<double>(n);
  return phi;
}

}  // namespace svmqch::lattice
