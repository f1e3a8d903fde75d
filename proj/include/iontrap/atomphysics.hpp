#pragma once

// Eight-level Bloch equations for S1/2 - P1/2 - D3/2 with Zeeman sublevels,
// the velocity-dependent scattering force of the cooling beam and the damping
// coefficients derived from it.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <gsl/gsl_sf_coupling.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "iontrap/errors.hpp"
#include "iontrap/timedomain.hpp"
#include "iontrap/units.hpp"

namespace iontrap {

using cplx = std::complex<double>;

inline constexpr int kLevels = 8;
inline constexpr int kFirstS = 0;
inline constexpr int kFirstP = 2;
inline constexpr int kFirstD = 4;

using Matrix8c = Eigen::Matrix<cplx, kLevels, kLevels>;
using Generator = Eigen::Matrix<cplx, kLevels * kLevels, kLevels * kLevels>;
using Vector64c = Eigen::Matrix<cplx, kLevels * kLevels, 1>;

struct AtomConfig {
  double linewidth = paper::kLinewidth;  // Gamma, rad/s, total P1/2 decay
  double branching = 0.055;              // P1/2 -> D3/2 fraction
  double b_field = 4e-4;                 // T
  double mass = paper::kMass;            // kg
  double g_s = 2.0;
  double g_p = 2.0 / 3.0;
  double g_d = 4.0 / 5.0;

  void validate() const {
    const auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigError, "atomphysics", m); };
    for (double v : {linewidth, branching, b_field, mass, g_s, g_p, g_d}) {
      if (!std::isfinite(v)) fail("atom parameters must be finite");
    }
    if (!(linewidth > 0.0)) fail("linewidth must be > 0");
    if (!(branching > 0.0 && branching < 1.0)) fail("branching must lie in (0, 1)");
    if (!(mass > 0.0)) fail("mass must be > 0");
  }
};

/// Spherical components of the field polarization in the quantization frame.
struct Polarization {
  cplx minus{0.5, 0.0};
  cplx pi{1.0 / std::numbers::sqrt2, 0.0};
  cplx plus{-0.5, 0.0};

  cplx component(int q) const { return q < 0 ? minus : (q == 0 ? pi : plus); }
  double norm2() const { return std::norm(minus) + std::norm(pi) + std::norm(plus); }

  /// Linear polarization at angle theta to the quantization axis.
  static Polarization linear(double theta) {
    const double s = std::sin(theta) / std::numbers::sqrt2;
    return {cplx(s, 0.0), cplx(std::cos(theta), 0.0), cplx(-s, 0.0)};
  }
};

struct BeamConfig {
  double detuning = 0.0;    // rad/s
  double saturation = 1.0;  // on-resonance s; Rabi frequency Gamma sqrt(s/2)
  Polarization polarization{};
  double wavevector = 0.0;  // rad/m, signed projection on the oscillation axis
  double wavelength = 0.0;  // m

  double rabi(double linewidth) const { return linewidth * std::sqrt(0.5 * saturation); }
};

struct LaserConfig {
  BeamConfig cooling;
  BeamConfig repump;

  static LaserConfig defaults() {
    LaserConfig l;
    l.cooling.detuning = -kTwoPi * 160e6;
    l.cooling.saturation = 1.0;
    l.cooling.wavelength = paper::kCoolingWavelength;
    l.cooling.wavevector = kTwoPi / paper::kCoolingWavelength;
    l.repump.detuning = kTwoPi * 100e6;
    l.repump.saturation = 5.0;
    l.repump.wavelength = paper::kRepumpWavelength;
    l.repump.wavevector = kTwoPi / paper::kRepumpWavelength;
    return l;
  }

  void validate() const {
    for (const BeamConfig* b : {&cooling, &repump}) {
      const auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigError, "atomphysics", m); };
      if (!std::isfinite(b->detuning) || !std::isfinite(b->saturation) || !std::isfinite(b->wavevector)) {
        fail("laser parameters must be finite");
      }
      if (b->saturation < 0.0) fail("saturation must be >= 0");
      if (std::abs(b->polarization.norm2() - 1.0) > 1e-9) fail("polarization amplitudes must be normalized");
      if (!(b->wavelength > 0.0)) fail("wavelength must be > 0");
      if (std::abs(b->wavevector) > kTwoPi / b->wavelength * (1.0 + 1e-12)) {
        fail("wave-vector projection exceeds 2 pi / lambda");
      }
    }
  }
};

struct Sublevel {
  int manifold;  // 0 S, 1 P, 2 D
  int two_j;
  int two_m;
};

inline const std::array<Sublevel, kLevels>& sublevels() {
  static const std::array<Sublevel, kLevels> levels{{{0, 1, -1},
                                                     {0, 1, 1},
                                                     {1, 1, -1},
                                                     {1, 1, 1},
                                                     {2, 3, -3},
                                                     {2, 3, -1},
                                                     {2, 3, 1},
                                                     {2, 3, 3}}};
  return levels;
}

/// Normalized dipole amplitude between excited e and ground g for photon
/// polarization q = m_e - m_g; |c|^2 summed over g and q is 1 for each e.
inline double dipole_amplitude(const Sublevel& e, const Sublevel& g, int q) {
  if (e.two_m - g.two_m != 2 * q) return 0.0;
  const double w3j = gsl_sf_coupling_3j(e.two_j, 2, g.two_j, -e.two_m, 2 * q, g.two_m);
  const int phase = (e.two_j - e.two_m) / 2;
  return ((phase % 2) != 0 ? -1.0 : 1.0) * std::sqrt(e.two_j + 1.0) * w3j;
}

inline int vec_index(int i, int j) { return i + kLevels * j; }

inline Vector64c vectorize(const Matrix8c& rho) { return Eigen::Map<const Vector64c>(rho.data()); }
inline Matrix8c unvectorize(const Vector64c& v) { return Eigen::Map<const Matrix8c>(v.data()); }

/// Lindblad generator in units of Gamma (time measured in 1/Gamma), so that
/// d vec(rho) / d(Gamma t) = L vec(rho).
struct Liouvillian {
  Generator L;
  double linewidth = 1.0;  // rad/s
  Matrix8c hamiltonian;    // in units of Gamma

  Matrix8c apply(const Matrix8c& rho) const { return unvectorize(L * vectorize(rho)); }
};

namespace detail {

// Superoperator of rho -> A rho B in column-major vectorization.
inline void add_sandwich(Generator& L, const Matrix8c& A, const Matrix8c& B, cplx scale) {
  for (int a = 0; a < kLevels; ++a)
    for (int b = 0; b < kLevels; ++b) {
      const cplx bab = B(a, b);
      if (bab == 0.0) continue;
      for (int i = 0; i < kLevels; ++i)
        for (int j = 0; j < kLevels; ++j) {
          const cplx aij = A(i, j);
          if (aij == 0.0) continue;
          // (A rho B)_{i b} += A_{i j} rho_{j a} B_{a b}
          L(vec_index(i, b), vec_index(j, a)) += scale * aij * bab;
        }
    }
}

inline Liouvillian build_from_detunings(const AtomConfig& atom, const LaserConfig& lasers, double delta_c,
                                        double delta_r) {
  const double gam = atom.linewidth;
  const auto& lv = sublevels();
  const double zeeman = kBohrMagneton * atom.b_field / kHbar / gam;  // per unit g*m, in Gamma
  const std::array<double, 3> g_factor{atom.g_s, atom.g_p, atom.g_d};
  const std::array<double, 3> frame{delta_c / gam, 0.0, delta_r / gam};

  Matrix8c H = Matrix8c::Zero();
  for (int i = 0; i < kLevels; ++i) {
    H(i, i) = frame[lv[i].manifold] + g_factor[lv[i].manifold] * 0.5 * lv[i].two_m * zeeman;
  }
  const std::array<const BeamConfig*, 3> beam{&lasers.cooling, nullptr, &lasers.repump};
  for (int e = kFirstP; e < kFirstD; ++e) {
    for (int g = 0; g < kLevels; ++g) {
      if (lv[g].manifold == 1) continue;
      const BeamConfig& b = *beam[lv[g].manifold];
      const double half_rabi = 0.5 * b.rabi(gam) / gam;
      for (int q = -1; q <= 1; ++q) {
        const double c = dipole_amplitude(lv[e], lv[g], q);
        if (c == 0.0) continue;
        H(e, g) += half_rabi * b.polarization.component(q) * c;
        H(g, e) = std::conj(H(e, g));
      }
    }
  }

  Liouvillian out;
  out.linewidth = gam;
  out.hamiltonian = H;
  out.L.setZero();
  const Matrix8c id = Matrix8c::Identity();
  const cplx mi(0.0, -1.0);
  add_sandwich(out.L, H, id, mi);
  add_sandwich(out.L, id, H, -mi);

  const std::array<double, 2> manifold_rate{1.0 - atom.branching, atom.branching};
  for (int m = 0; m < 2; ++m) {
    const int lower = m == 0 ? 0 : 2;
    for (int q = -1; q <= 1; ++q) {
      Matrix8c C = Matrix8c::Zero();
      for (int e = kFirstP; e < kFirstD; ++e)
        for (int g = 0; g < kLevels; ++g) {
          if (lv[g].manifold != lower) continue;
          C(g, e) = std::sqrt(manifold_rate[m]) * dipole_amplitude(lv[e], lv[g], q);
        }
      const Matrix8c cdc = C.adjoint() * C;
      add_sandwich(out.L, C, C.adjoint(), 1.0);
      add_sandwich(out.L, cdc, id, -0.5);
      add_sandwich(out.L, id, cdc, -0.5);
    }
  }
  return out;
}

}  // namespace detail

/// Generator at atom velocity v (m/s); detunings enter as delta + k v.
inline Liouvillian build_liouvillian(const AtomConfig& atom, const LaserConfig& lasers, double velocity = 0.0) {
  atom.validate();
  lasers.validate();
  if (!std::isfinite(velocity)) throw Error(ErrorKind::ConfigError, "atomphysics", "velocity must be finite");
  return detail::build_from_detunings(atom, lasers, lasers.cooling.detuning + lasers.cooling.wavevector * velocity,
                                      lasers.repump.detuning + lasers.repump.wavevector * velocity);
}

struct DensityMatrix {
  Matrix8c rho = Matrix8c::Zero();
  bool degenerate = false;
  double residual = 0.0;  // max |L rho| in units of Gamma

  double population(int first, int count) const {
    double p = 0.0;
    for (int i = first; i < first + count; ++i) p += rho(i, i).real();
    return p;
  }
  double s_population() const { return population(kFirstS, 2); }
  double p_population() const { return population(kFirstP, 2); }
  double d_population() const { return population(kFirstD, 4); }
};

inline double max_abs(const Vector64c& v) { return v.cwiseAbs().maxCoeff(); }

/// rho(t) = exp(L t) rho0 with t in seconds.
inline Matrix8c evolve(const Liouvillian& gen, const Matrix8c& rho0, double t) {
  const Generator prop = (gen.L * (gen.linewidth * t)).exp();
  return unvectorize(prop * vectorize(rho0));
}

namespace detail {

inline DensityMatrix long_time_limit(const Liouvillian& gen) {
  const Vector64c mixed = vectorize(Matrix8c::Identity() / static_cast<double>(kLevels));
  Generator prop = gen.L.exp();
  Vector64c prev = prop * mixed;
  // Up to t = 2^40 / Gamma; further squaring amplifies rounding in the
  // unit eigenvalues.
  for (int i = 0; i < 40; ++i) {
    prop = prop * prop;
    Vector64c next = prop * mixed;
    const double change = max_abs(next - prev);
    prev = next;
    if (change < 1e-13) break;
  }
  DensityMatrix out;
  out.rho = unvectorize(prev);
  out.rho = 0.5 * (out.rho + out.rho.adjoint()).eval();
  out.rho /= out.rho.trace().real();
  out.degenerate = true;
  out.residual = max_abs(gen.L * vectorize(out.rho));
  return out;
}

}  // namespace detail

/// Unit-trace null vector of the generator. A degenerate null space (dark
/// manifold) falls back to long-time evolution from the fully mixed state.
inline DensityMatrix steady_state(const Liouvillian& gen) {
  Generator A = gen.L;
  Vector64c rhs = Vector64c::Zero();
  const int r0 = vec_index(0, 0);
  A.row(r0).setZero();
  for (int i = 0; i < kLevels; ++i) A(r0, vec_index(i, i)) = 1.0;
  rhs(r0) = 1.0;

  Eigen::FullPivLU<Generator> lu(A);
  lu.setThreshold(1e-14);
  DensityMatrix out;
  if (!lu.isInvertible()) {
    out = detail::long_time_limit(gen);
  } else {
    Vector64c x = lu.solve(rhs);
    for (int it = 0; it < 2; ++it) x += lu.solve(rhs - A * x);
    out.rho = unvectorize(x);
    out.rho = 0.5 * (out.rho + out.rho.adjoint()).eval();
    out.residual = max_abs(gen.L * vectorize(out.rho));
  }
  if (!(out.residual <= 1e-10)) {
    throw Error(ErrorKind::NoConvergence, "atomphysics",
                "steady-state residual " + std::to_string(out.residual) + " exceeds 1e-10");
  }
  return out;
}

/// F_s = hbar k_c Gamma rho_P at the Doppler-shifted detunings (N).
inline double scattering_force(const AtomConfig& atom, const LaserConfig& lasers, double velocity) {
  const auto ss = steady_state(build_liouvillian(atom, lasers, velocity));
  return kHbar * lasers.cooling.wavevector * atom.linewidth * ss.p_population();
}

struct DampingCoefficients {
  double mu = 0.0;         // rad/s
  double gamma = 0.0;      // s/m^2
  double mu_err = 0.0;
  double gamma_err = 0.0;
  double step = 0.0;       // m/s, finest step used
  int levels = 0;
};

/// mu = F'(0) / 2m and gamma = F'''(0) / 6m from central differences with
/// Richardson extrapolation, halving h from 0.1 Gamma / k_c until both
/// estimates settle to 1e-4. A positive mu damps the oscillator (the force
/// enters the equation of motion as -(F_s(v) - F_s(0)) / m).
inline DampingCoefficients damping_coefficients(const AtomConfig& atom, const LaserConfig& lasers,
                                                double rel_tol = 1e-4, int max_levels = 12) {
  atom.validate();
  lasers.validate();
  const double kc = std::abs(lasers.cooling.wavevector);
  if (!(kc > 0.0)) throw Error(ErrorKind::ConfigError, "atomphysics", "cooling wave-vector projection is zero");
  const double v_scale = atom.linewidth / kc;
  const double h0 = 0.1 * v_scale;
  const auto force = [&](double v) { return scattering_force(atom, lasers, v); };

  std::vector<std::vector<double>> t1, t3;
  double f_prev_p = 0.0, f_prev_m = 0.0;  // F(+-h) of the previous level = F(+-2h) of this one
  double best1 = 0.0, best3 = 0.0, err1 = 0.0, err3 = 0.0;
  for (int n = 0; n < max_levels; ++n) {
    const double h = h0 / std::ldexp(1.0, n);
    const double fp = force(h), fm = force(-h);
    const double f2p = n == 0 ? force(2.0 * h) : f_prev_p;
    const double f2m = n == 0 ? force(-2.0 * h) : f_prev_m;
    f_prev_p = fp;
    f_prev_m = fm;
    t1.push_back({(fp - fm) / (2.0 * h)});
    t3.push_back({(f2p - 2.0 * fp + 2.0 * fm - f2m) / (2.0 * h * h * h)});
    for (int j = 1; j <= n; ++j) {
      const double f = std::ldexp(1.0, 2 * j) - 1.0;
      t1[n].push_back(t1[n][j - 1] + (t1[n][j - 1] - t1[n - 1][j - 1]) / f);
      t3[n].push_back(t3[n][j - 1] + (t3[n][j - 1] - t3[n - 1][j - 1]) / f);
    }
    if (n == 0) continue;
    best1 = t1[n][n];
    best3 = t3[n][n];
    err1 = std::abs(best1 - t1[n - 1][n - 1]);
    err3 = std::abs(best3 - t3[n - 1][n - 1]);
    // gamma may cross zero: its tolerance is floored at 1e-2 of the scale |F'| / v_scale^2.
    const double floor3 = 1e-2 * std::abs(best1) / (v_scale * v_scale);
    if (err1 <= rel_tol * std::abs(best1) && err3 <= rel_tol * std::max(std::abs(best3), floor3)) {
      DampingCoefficients out;
      const double m = atom.mass;
      out.mu = best1 / (2.0 * m);
      out.gamma = best3 / (6.0 * m);
      out.mu_err = err1 / (2.0 * m);
      out.gamma_err = err3 / (6.0 * m);
      out.step = h;
      out.levels = n + 1;
      return out;
    }
  }
  throw Error(ErrorKind::DifferentiationUnstable, "atomphysics",
              "Richardson sequence did not settle down to h = " + std::to_string(h0 / std::ldexp(1.0, max_levels - 1)) +
                  " m/s; force features narrower than that velocity scale");
}

struct ScanPoint {
  double delta_c = 0.0;  // rad/s
  DampingCoefficients coeff;
  bool ok = false;
  std::string error;
};

/// Damping coefficients over a grid of cooling detunings; failed points are
/// flagged and the scan continues. Points are split across `threads` workers.
inline std::vector<ScanPoint> detuning_scan(const AtomConfig& atom, const LaserConfig& lasers,
                                            const std::vector<double>& delta_grid, unsigned threads = 1) {
  for (double d : delta_grid) {
    if (!std::isfinite(d) || std::abs(d) > kTwoPi * 500e6 * (1.0 + 1e-12)) {
      throw Error(ErrorKind::ConfigError, "atomphysics", "scan detunings must lie within +-2pi x 500 MHz");
    }
  }
  std::vector<ScanPoint> out(delta_grid.size());
  const auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < delta_grid.size(); i += stride) {
      LaserConfig l = lasers;
      l.cooling.detuning = delta_grid[i];
      out[i].delta_c = delta_grid[i];
      try {
        out[i].coeff = damping_coefficients(atom, l);
        out[i].ok = true;
      } catch (const Error& e) {
        out[i].error = e.what();
      }
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, delta_grid.size()))));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  }
  return out;
}

/// Tabulated F_s(v) on a uniform grid over [-v_max, v_max].
inline ForceCurve force_curve(const AtomConfig& atom, const LaserConfig& lasers, double v_max, int points) {
  if (!(v_max > 0.0) || points < 3) throw Error(ErrorKind::ConfigError, "atomphysics", "force curve needs v_max > 0, >= 3 points");
  ForceCurve fc;
  fc.mass = atom.mass;
  for (int i = 0; i < points; ++i) {
    const double v = -v_max + 2.0 * v_max * i / (points - 1);
    fc.velocity.push_back(v);
    fc.force.push_back(scattering_force(atom, lasers, v));
  }
  return fc;
}

}  // namespace iontrap
