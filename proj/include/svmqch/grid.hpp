#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "svmqch/core.hpp"
#include "svmqch/io.hpp"

namespace svmqch::quantum {

/// Periodic uniform axis: x_j = lo + j * length / points.
struct Axis {
  int points = 32;
  double lo = -1;
  double length = 2;

  double step() const { return length / points; }
  double x(int j) const { return lo + j * step(); }
  std::vector<double> coords() const {
    std::vector<double> c(points);
    for (int j = 0; j < points; ++j) c[j] = x(j);
    return c;
  }
  static Axis centered(int points, double halfWidth) { return {points, -halfWidth, 2 * halfWidth}; }
};

/// Row-major product grid; the last axis varies fastest.
class ProductGrid {
 public:
  ProductGrid() = default;
  explicit ProductGrid(std::vector<Axis> axes) : axes_(std::move(axes)) {
    if (axes_.empty()) throw DomainError("product grid needs at least one axis");
    strides_.assign(axes_.size(), 1);
    for (int a = static_cast<int>(axes_.size()) - 2; a >= 0; --a) strides_[a] = strides_[a + 1] * axes_[a + 1].points;
    size_ = strides_[0] * axes_[0].points;
    weight_ = 1;
    for (const auto& ax : axes_) {
      if (ax.points < 2 || !(ax.length > 0)) throw DomainError("invalid grid axis");
      weight_ *= ax.step();
    }
  }

  std::size_t rank() const { return axes_.size(); }
  std::size_t size() const { return size_; }
  const Axis& axis(std::size_t a) const { return axes_[a]; }
  const std::vector<Axis>& axes() const { return axes_; }
  std::size_t stride(std::size_t a) const { return strides_[a]; }
  double weight() const { return weight_; }
  int index(std::size_t flat, std::size_t a) const { return static_cast<int>((flat / strides_[a]) % axes_[a].points); }
  double coord(std::size_t flat, std::size_t a) const { return axes_[a].x(index(flat, a)); }

  /// Samples f(coords) over the grid.
  std::vector<double> tabulate(const std::function<double(std::span<const double>)>& f) const {
    std::vector<double> out(size_), c(rank());
    for (std::size_t i = 0; i < size_; ++i) {
      for (std::size_t a = 0; a < rank(); ++a) c[a] = coord(i, a);
      out[i] = f(c);
    }
    return out;
  }

 private:
  std::vector<Axis> axes_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 0;
  double weight_ = 0;
};

/// Fourier-grid first derivative on a periodic axis (Nyquist component dropped so the matrix is real).
inline RealMatrix derivativeMatrix(const Axis& ax) {
  const int n = ax.points;
  RealMatrix D = RealMatrix::Zero(n, n);
  for (int j = 0; j < n; ++j)
    for (int l = 0; l < n; ++l) {
      double s = 0;
      for (int m = -(n - 1) / 2; m <= (n - 1) / 2; ++m) {
        const double k = 2 * kPi * m / ax.length;
        s -= k * std::sin(k * (j - l) * ax.step());
      }
      D(j, l) = s / n;
    }
  return D;
}

struct WaveFunction {
  ProductGrid grid;
  ComplexVector psi;

  WaveFunction() = default;
  explicit WaveFunction(ProductGrid g) : grid(std::move(g)), psi(ComplexVector::Zero(static_cast<Eigen::Index>(grid.size()))) {}

  double norm() const { return std::sqrt(psi.squaredNorm() * grid.weight()); }
  void normalize() {
    const double n = norm();
    if (!(n > 0)) throw NumericalError("cannot normalize a zero wavefunction");
    psi /= n;
  }
  Complex inner(const WaveFunction& other) const { return psi.dot(other.psi) * grid.weight(); }
  std::vector<double> density() const {
    std::vector<double> r(grid.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::norm(psi[static_cast<Eigen::Index>(i)]);
    return r;
  }
  std::vector<double> amplitude() const {
    std::vector<double> r(grid.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::abs(psi[static_cast<Eigen::Index>(i)]);
    return r;
  }
  std::vector<double> phase() const {
    std::vector<double> r(grid.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::arg(psi[static_cast<Eigen::Index>(i)]);
    return r;
  }
  /// Expectation of a diagonal observable.
  double expect(std::span<const double> diag) const {
    double s = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) s += diag[i] * std::norm(psi[static_cast<Eigen::Index>(i)]);
    return s * grid.weight();
  }

  static WaveFunction fromFunction(ProductGrid g, const std::function<Complex(std::span<const double>)>& f) {
    WaveFunction w(std::move(g));
    std::vector<double> c(w.grid.rank());
    for (std::size_t i = 0; i < w.grid.size(); ++i) {
      for (std::size_t a = 0; a < c.size(); ++a) c[a] = w.grid.coord(i, a);
      w.psi[static_cast<Eigen::Index>(i)] = f(c);
    }
    w.normalize();
    return w;
  }
};

/// Applies a dense (n x n) matrix along one axis of a product-grid vector.
inline ComplexVector applyAlongAxis(const ProductGrid& g, std::size_t axis, const RealMatrix& M, const ComplexVector& v) {
  const std::size_t n = static_cast<std::size_t>(g.axis(axis).points), st = g.stride(axis);
  const std::size_t outer = g.size() / (n * st);
  ComplexVector out(v.size());
  std::vector<Complex> line(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < st; ++in) {
      const std::size_t base = o * n * st + in;
      for (std::size_t j = 0; j < n; ++j) line[j] = v[static_cast<Eigen::Index>(base + j * st)];
      for (std::size_t j = 0; j < n; ++j) {
        Complex acc = 0;
        for (std::size_t l = 0; l < n; ++l) acc += M(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(l)) * line[l];
        out[static_cast<Eigen::Index>(base + j * st)] = acc;
      }
    }
  return out;
}

/// H = V(x) + sum_terms (P_axis - A(x))^2 / (2 m), P = -i hbar d/dx (Fourier grid).
class GridHamiltonian {
 public:
  struct KineticTerm {
    std::size_t axis;
    double mass;
    std::vector<double> vector;  // A(x) on the grid, empty for zero
  };

  GridHamiltonian(ProductGrid grid, double hbar) : grid_(std::move(grid)), hbar_(hbar) {
    potential_.assign(grid_.size(), 0.0);
    for (std::size_t a = 0; a < grid_.rank(); ++a) deriv_.push_back(derivativeMatrix(grid_.axis(a)));
  }

  const ProductGrid& grid() const { return grid_; }
  double hbar() const { return hbar_; }
  std::vector<double>& potential() { return potential_; }
  const std::vector<double>& potential() const { return potential_; }
  const std::vector<KineticTerm>& kinetic() const { return terms_; }
  void addKinetic(std::size_t axis, double mass, std::vector<double> vectorPotential = {}) {
    if (axis >= grid_.rank()) throw DomainError("kinetic term on a missing axis");
    if (!(mass > 0)) throw DomainError("kinetic mass must be > 0");
    if (!vectorPotential.empty() && vectorPotential.size() != grid_.size()) throw DomainError("vector potential size");
    terms_.push_back({axis, mass, std::move(vectorPotential)});
  }
  void addPotential(std::span<const double> v) {
    for (std::size_t i = 0; i < potential_.size(); ++i) potential_[i] += v[i];
  }

  /// -i hbar d/dx along an axis.
  ComplexVector momentum(std::size_t axis, const ComplexVector& v) const {
    return Complex(0, -hbar_) * applyAlongAxis(grid_, axis, deriv_[axis], v);
  }
  /// d/dx along an axis.
  ComplexVector derivative(std::size_t axis, const ComplexVector& v) const {
    return applyAlongAxis(grid_, axis, deriv_[axis], v);
  }
  /// (P - A) v for a kinetic term.
  ComplexVector kineticMomentum(const KineticTerm& t, const ComplexVector& v) const {
    ComplexVector r = momentum(t.axis, v);
    if (!t.vector.empty())
      for (Eigen::Index i = 0; i < r.size(); ++i) r[i] -= t.vector[static_cast<std::size_t>(i)] * v[i];
    return r;
  }

  ComplexVector apply(const ComplexVector& v) const {
    ComplexVector out(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = potential_[static_cast<std::size_t>(i)] * v[i];
    for (const auto& t : terms_) out += kineticMomentum(t, kineticMomentum(t, v)) / (2 * t.mass);
    return out;
  }

  double energy(const WaveFunction& w) const { return (w.psi.dot(apply(w.psi))).real() * grid_.weight(); }

  /// Dense matrix (small grids only).
  ComplexMatrix dense() const {
    const Eigen::Index n = static_cast<Eigen::Index>(grid_.size());
    if (n > 6000) throw DomainError("grid too large for a dense Hamiltonian");
    ComplexMatrix H(n, n);
    ComplexVector e = ComplexVector::Zero(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      e[j] = 1;
      H.col(j) = apply(e);
      e[j] = 0;
    }
    return H;
  }

 private:
  ProductGrid grid_;
  double hbar_;
  std::vector<double> potential_;
  std::vector<KineticTerm> terms_;
  std::vector<RealMatrix> deriv_;
};

/// Short-iterative Lanczos propagation exp(-i H dt / hbar) with an a-posteriori error bound.
struct LanczosOptions {
  int maxKrylov = 40;
  double tolerance = 1e-13;
};

struct LanczosStats {
  int krylovUsed = 0;
  int substeps = 0;
  double errorEstimate = 0;
};

namespace detail {

// One Krylov step of length dt; returns false if the error estimate is above tolerance.
inline bool lanczosStep(const std::function<ComplexVector(const ComplexVector&)>& H, ComplexVector& v, double dt,
                        double hbar, const LanczosOptions& opt, LanczosStats& stats) {
  const double beta0 = v.norm();
  if (beta0 == 0) return true;
  std::vector<ComplexVector> Q;
  std::vector<double> alpha, beta;
  Q.push_back(v / beta0);
  ComplexVector w;
  for (int j = 0; j < opt.maxKrylov; ++j) {
    w = H(Q[j]);
    const double a = Q[j].dot(w).real();
    alpha.push_back(a);
    w -= a * Q[j];
    if (j > 0) w -= beta[j - 1] * Q[j - 1];
    // Full reorthogonalization keeps the small basis numerically orthonormal.
    for (const auto& q : Q) w -= q.dot(w) * q;
    const double b = w.norm();
    const int m = j + 1;
    RealMatrix T = RealMatrix::Zero(m, m);
    for (int i = 0; i < m; ++i) {
      T(i, i) = alpha[i];
      if (i + 1 < m) T(i, i + 1) = T(i + 1, i) = beta[i];
    }
    Eigen::SelfAdjointEigenSolver<RealMatrix> eig(T);
    ComplexVector c(m);
    for (int i = 0; i < m; ++i) {
      Complex s = 0;
      for (int l = 0; l < m; ++l)
        s += eig.eigenvectors()(i, l) * std::exp(Complex(0, -eig.eigenvalues()[l] * dt / hbar)) * eig.eigenvectors()(0, l);
      c[i] = s;
    }
    const double err = b * std::abs(c[m - 1]);
    if (err < opt.tolerance || b < 1e-300) {
      ComplexVector out = ComplexVector::Zero(v.size());
      for (int i = 0; i < m; ++i) out += c[i] * Q[i];
      v = beta0 * out;
      stats.krylovUsed = std::max(stats.krylovUsed, m);
      stats.errorEstimate = std::max(stats.errorEstimate, err);
      return true;
    }
    beta.push_back(b);
    Q.push_back(w / b);
  }
  return false;
}

}  // namespace detail

inline LanczosStats propagate(const std::function<ComplexVector(const ComplexVector&)>& H, ComplexVector& v,
                              double dt, double hbar, const LanczosOptions& opt = {}) {
  int pieces = 1;
  for (int attempt = 0; attempt < 12; ++attempt) {
    ComplexVector trial = v;
    bool ok = true;
    LanczosStats s;
    for (int p = 0; p < pieces && ok; ++p) ok = detail::lanczosStep(H, trial, dt / pieces, hbar, opt, s);
    if (ok) {
      v = trial;
      s.substeps = pieces;
      return s;
    }
    pieces *= 2;
  }
  throw NumericalError("Lanczos propagation did not converge; reduce dt");
}

inline LanczosStats propagate(const GridHamiltonian& H, WaveFunction& w, double dt, const LanczosOptions& opt = {}) {
  return propagate([&](const ComplexVector& x) { return H.apply(x); }, w.psi, dt, H.hbar(), opt);
}

/// Unitary evolution for `steps` steps of dt; aborts if the norm drifts by more than 1e-6.
inline WaveFunction evolveSchrodinger(WaveFunction psi, const GridHamiltonian& H, double dt, std::size_t steps,
                                      const std::function<void(std::size_t, const WaveFunction&)>& observer = {}) {
  if (std::abs(psi.norm() - 1.0) > 1e-10) throw DomainError("wavefunction must be normalized before evolution");
  if (observer) observer(0, psi);
  for (std::size_t n = 0; n < steps; ++n) {
    propagate(H, psi, dt);
    if (std::abs(psi.norm() - 1.0) > 1e-6)
      throw NumericalError("norm drift beyond 1e-6 at step " + std::to_string(n + 1) + ": integrator misconfigured");
    if (observer) observer(n + 1, psi);
  }
  return psi;
}

/// Binary snapshot: "SVMQPSI1", u64 rank, per axis (u64 points, f64 lo, f64 length),
/// then per grid point f64 amplitude, f64 phase.
inline std::string serializeSnapshot(const WaveFunction& w) {
  io::BinaryWriter out;
  out.bytes("SVMQPSI1");
  out.u64(w.grid.rank());
  for (const auto& ax : w.grid.axes()) {
    out.u64(static_cast<std::uint64_t>(ax.points));
    out.f64(ax.lo);
    out.f64(ax.length);
  }
  for (Eigen::Index i = 0; i < w.psi.size(); ++i) {
    out.f64(std::abs(w.psi[i]));
    out.f64(std::arg(w.psi[i]));
  }
  return out.str();
}

inline WaveFunction deserializeSnapshot(std::string bytes) {
  io::BinaryReader in(std::move(bytes));
  if (in.bytes(8) != "SVMQPSI1") throw DomainError("not a wavefunction snapshot");
  const std::size_t rank = in.u64();
  std::vector<Axis> axes(rank);
  for (auto& ax : axes) {
    ax.points = static_cast<int>(in.u64());
    ax.lo = in.f64();
    ax.length = in.f64();
  }
  WaveFunction w{ProductGrid(axes)};
  for (Eigen::Index i = 0; i < w.psi.size(); ++i) {
    const double amp = in.f64(), ph = in.f64();
    w.psi[i] = std::polar(amp, ph);
  }
  return w;
}

}  // namespace svmqch::quantum
