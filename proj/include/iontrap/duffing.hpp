#pragma once

// Steady-state theory of the driven Duffing oscillator with linear, cubic
// velocity and position-quadratic damping, from the first-order slow flow
//
//   da/dt   = -mu a - (3/8) gamma w0^2 a^3 + (k / 2 w0) sin(phi)
//   a dphi/dt = sigma a - (3 alpha / 8 w0) a^3 + (k / 2 w0) cos(phi)
//
// for x(t) = a cos(w t - phi), sigma = w - w0. Setting both rates to zero and
// eliminating phi gives a cubic in u = a^2, solved here by companion-matrix
// eigenvalues with Newton polishing.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/Polynomials>
#include <boost/math/tools/roots.hpp>

#include "iontrap/errors.hpp"
#include "iontrap/units.hpp"

namespace iontrap {

/// Mechanical model coefficients; every rate is in rad/s.
struct OscillatorParams {
  double omega0 = paper::kOmega0;  // rad/s
  double mu = paper::kMu;          // rad/s
  double gamma = 0.0;              // s/m^2, coefficient of xdot^3
  double alpha = paper::kAlpha;    // 1/(m^2 s^2)
  double eta = 0.0;                // 1/(m^2 s), coefficient of x^2 xdot
  double mass = paper::kMass;      // kg

  double quality_factor() const { return omega0 / (2.0 * mu); }

  void validate() const {
    const auto fail = [](const std::string& msg) {
      throw Error(ErrorKind::NonPhysical, "duffing-analytic", msg);
    };
    for (double v : {omega0, mu, gamma, alpha, eta, mass}) {
      if (!std::isfinite(v)) fail("oscillator parameters must be finite");
    }
    if (omega0 <= 0.0) fail("omega0 must be positive");
    if (mass <= 0.0) fail("mass must be positive");
    if (mu < 0.0) fail("mu must be non-negative");
  }
};

struct DriveSpec {
  double k = 0.0;      // m/s^2
  double sigma = 0.0;  // rad/s, drive detuning w - w0

  void validate() const {
    if (!std::isfinite(k) || !std::isfinite(sigma)) {
      throw Error(ErrorKind::NonPhysical, "duffing-analytic", "drive must be finite");
    }
    if (k < 0.0) throw Error(ErrorKind::NonPhysical, "duffing-analytic", "drive amplitude k must be >= 0");
  }
};

enum class Stability { Stable, Unstable };

struct SteadyState {
  double amplitude = 0.0;  // m
  double phase = 0.0;      // rad, in (-pi, pi]
  Stability stability = Stability::Stable;
};

struct ResponseBranch {
  std::vector<double> sigma;                     // rad/s
  std::vector<std::vector<SteadyState>> states;  // 1 or 3 per grid point
};

struct SlowFlowRate {
  double da_dt = 0.0;    // m/s
  double dphi_dt = 0.0;  // rad/s
};

/// Cubic-damping coefficient that reproduces the steady state of a combined
/// gamma xdot^3 + eta x^2 xdot damping (secular averaging of both terms).
inline double effective_gamma(double gamma, double eta, double omega0) {
  return gamma + eta / (3.0 * omega0 * omega0);
}

inline double effective_gamma(const OscillatorParams& p) {
  return effective_gamma(p.gamma, p.eta, p.omega0);
}

/// Level-spacing anharmonicity 3 hbar alpha / (4 m w0^2), rad/s.
inline double nonlinear_dispersion(const OscillatorParams& p) {
  return 3.0 * kHbar * p.alpha / (4.0 * p.mass * p.omega0 * p.omega0);
}

/// Coefficients of c3 u^3 + c2 u^2 + c1 u + c0 = 0 in u = a^2.
struct AmplitudeCubic {
  double c3 = 0.0, c2 = 0.0, c1 = 0.0, c0 = 0.0;

  double operator()(double u) const { return ((c3 * u + c2) * u + c1) * u + c0; }
  double derivative(double u) const { return (3.0 * c3 * u + 2.0 * c2) * u + c1; }
  /// Magnitude of the largest individual term at u, for relative residuals.
  double term_scale(double u) const {
    return std::max({std::abs(c3 * u * u * u), std::abs(c2 * u * u), std::abs(c1 * u), std::abs(c0)});
  }
};

inline AmplitudeCubic amplitude_cubic(const OscillatorParams& p, const DriveSpec& d) {
  const double w0 = p.omega0;
  const double g = effective_gamma(p);
  const double w03 = w0 * w0 * w0;
  AmplitudeCubic c;
  c.c3 = 9.0 / 16.0 * (p.alpha * p.alpha + g * g * w03 * w03);
  c.c2 = 3.0 * w0 * (p.mu * g * w03 - d.sigma * p.alpha);
  c.c1 = 4.0 * w0 * w0 * (d.sigma * d.sigma + p.mu * p.mu);
  c.c0 = -d.k * d.k;
  return c;
}

inline SlowFlowRate slow_flow(const OscillatorParams& p, const DriveSpec& d, double a, double phi) {
  if (!(a > 0.0) || !std::isfinite(a) || !std::isfinite(phi)) {
    throw Error(ErrorKind::NonPhysical, "duffing-analytic", "slow flow needs finite a > 0");
  }
  const double w0 = p.omega0;
  const double g = effective_gamma(p);
  const double f = d.k / (2.0 * w0);
  SlowFlowRate r;
  r.da_dt = -p.mu * a - 0.375 * g * w0 * w0 * a * a * a + f * std::sin(phi);
  r.dphi_dt = d.sigma - 0.375 * p.alpha / w0 * a * a + f * std::cos(phi) / a;
  return r;
}

/// Jacobian d(da/dt, dphi/dt)/d(a, phi) of the slow flow.
inline std::array<std::array<double, 2>, 2> slow_flow_jacobian(const OscillatorParams& p, const DriveSpec& d,
                                                               double a, double phi) {
  const double w0 = p.omega0;
  const double g = effective_gamma(p);
  const double f = d.k / (2.0 * w0);
  std::array<std::array<double, 2>, 2> j{};
  j[0][0] = -p.mu - 1.125 * g * w0 * w0 * a * a;
  j[0][1] = f * std::cos(phi);
  j[1][0] = -0.75 * p.alpha / w0 * a - f * std::cos(phi) / (a * a);
  j[1][1] = -f * std::sin(phi) / a;
  return j;
}

/// Phase of x = a cos(w t - phi) at a steady state; phi in (0, pi) for positive damping.
inline double steady_state_phase(const OscillatorParams& p, const DriveSpec& d, double amplitude) {
  if (amplitude == 0.0) return 0.0;
  if (d.k == 0.0) {
    throw Error(ErrorKind::InconsistentAmplitude, "duffing-analytic", "nonzero amplitude without drive");
  }
  const double w0 = p.omega0;
  const double g = effective_gamma(p);
  const double a = amplitude;
  const double scale = 2.0 * w0 * a / d.k;
  const double s = scale * (p.mu + 0.375 * g * w0 * w0 * a * a);
  const double c = scale * (0.375 * p.alpha * a * a / w0 - d.sigma);
  if (std::abs(s * s + c * c - 1.0) > 1e-6) {
    throw Error(ErrorKind::InconsistentAmplitude, "duffing-analytic",
                "amplitude is not a steady state (sin^2+cos^2 = " + std::to_string(s * s + c * c) + ")");
  }
  return std::atan2(s, c);
}

namespace detail {

inline Stability classify(const OscillatorParams& p, const DriveSpec& d, double a, double phi) {
  const auto j = slow_flow_jacobian(p, d, a, phi);
  const double tr = j[0][0] + j[1][1];
  const double det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
  return (tr < 0.0 && det > 0.0) ? Stability::Stable : Stability::Unstable;
}

inline double polish_root(const AmplitudeCubic& c, double u) {
  for (int it = 0; it < 50; ++it) {
    const double f = c(u);
    const double df = c.derivative(u);
    if (df == 0.0) break;
    const double step = f / df;
    const double next = u - step;
    if (!std::isfinite(next)) break;
    if (std::abs(c(next)) >= std::abs(f)) break;
    u = next;
    if (std::abs(step) <= 1e-16 * std::abs(u)) break;
  }
  return u;
}

/// Nonnegative real roots of the cubic, ascending, with double roots merged.
struct CubicRoot {
  double u;
  bool degenerate;
};

inline std::vector<CubicRoot> nonnegative_roots(const AmplitudeCubic& c) {
  std::vector<double> raw;
  if (c.c3 == 0.0) {
    if (c.c2 != 0.0 || c.c1 <= 0.0) {
      throw Error(ErrorKind::NonPhysical, "duffing-analytic", "response is unbounded (no damping and no detuning)");
    }
    raw.push_back(-c.c0 / c.c1);
  } else {
    // Rescale u = B v so the monic polynomial in v has O(1) coefficients.
    const double b2 = std::abs(c.c2 / c.c3);
    const double b1 = std::sqrt(std::abs(c.c1 / c.c3));
    const double b0 = std::cbrt(std::abs(c.c0 / c.c3));
    double scale = 2.0 * std::max({b2, b1, b0});
    if (!(scale > 0.0)) scale = 1.0;
    Eigen::Vector4d coeffs;
    coeffs << c.c0 / (c.c3 * scale * scale * scale), c.c1 / (c.c3 * scale * scale), c.c2 / (c.c3 * scale), 1.0;
    Eigen::PolynomialSolver<double, 3> solver(coeffs);
    for (const std::complex<double>& z : solver.roots()) {
      if (std::abs(z.imag()) > 1e-9 * std::abs(z.real())) continue;
      raw.push_back(z.real() * scale);
    }
  }
  std::vector<double> polished;
  for (double u : raw) {
    if (u <= 0.0) continue;
    u = polish_root(c, u);
    if (u > 0.0) polished.push_back(u);
  }
  std::sort(polished.begin(), polished.end());
  std::vector<CubicRoot> out;
  for (double u : polished) {
    if (!out.empty() && std::abs(u - out.back().u) <= 1e-9 * std::max(std::abs(u), std::abs(out.back().u))) {
      out.back().u = 0.5 * (out.back().u + u);
      out.back().degenerate = true;
      continue;
    }
    out.push_back({u, false});
  }
  return out;
}

}  // namespace detail

/// All steady states at (params, drive), ascending in amplitude.
inline std::vector<SteadyState> steady_state_amplitudes(const OscillatorParams& p, const DriveSpec& d) {
  p.validate();
  d.validate();
  if (d.k == 0.0) {
    return {SteadyState{0.0, 0.0, p.mu > 0.0 ? Stability::Stable : Stability::Unstable}};
  }
  const AmplitudeCubic cubic = amplitude_cubic(p, d);
  std::vector<SteadyState> out;
  for (const auto& root : detail::nonnegative_roots(cubic)) {
    const double a = std::sqrt(root.u);
    SteadyState s;
    s.amplitude = a;
    s.phase = steady_state_phase(p, d, a);
    s.stability = root.degenerate ? Stability::Unstable : detail::classify(p, d, a, s.phase);
    out.push_back(s);
  }
  if (out.empty()) {
    throw Error(ErrorKind::NonPhysical, "duffing-analytic", "no real steady state found");
  }
  return out;
}

inline ResponseBranch response_curve(const OscillatorParams& p, double k, const std::vector<double>& sigma_grid) {
  ResponseBranch rb;
  rb.sigma = sigma_grid;
  rb.states.reserve(sigma_grid.size());
  for (double s : sigma_grid) rb.states.push_back(steady_state_amplitudes(p, DriveSpec{k, s}));
  return rb;
}

/// Stable amplitude reached by a quasi-static sweep in the given direction.
/// Inside the bistable window a sweep toward the tilt of the backbone stays on
/// the large-amplitude branch; a sweep against it stays on the small one.
inline SteadyState swept_branch_state(const OscillatorParams& p, const DriveSpec& d, bool positive_sweep) {
  const auto states = steady_state_amplitudes(p, d);
  std::vector<SteadyState> stable;
  for (const auto& s : states) {
    if (s.stability == Stability::Stable) stable.push_back(s);
  }
  if (stable.empty()) return states.front();
  const bool want_large = (p.alpha >= 0.0) == positive_sweep;
  return want_large ? stable.back() : stable.front();
}

/// Dimensionless gain 2 mu w0 a / k for each steady state.
inline std::vector<double> responsivity(const OscillatorParams& p, const DriveSpec& d) {
  if (d.k == 0.0) throw Error(ErrorKind::ZeroDrive, "duffing-analytic", "responsivity undefined for k = 0");
  std::vector<double> chi;
  for (const auto& s : steady_state_amplitudes(p, d)) chi.push_back(2.0 * p.mu * p.omega0 * s.amplitude / d.k);
  return chi;
}

/// Detunings on the two halves of the response curve for a given amplitude,
/// sigma = 3 alpha a^2 / (8 w0) +/- sqrt(k^2 / (4 w0^2 a^2) - mu_eff^2).
/// Empty when the amplitude is above the curve's maximum.
inline std::optional<std::pair<double, double>> detunings_at_amplitude(const OscillatorParams& p, double k,
                                                                        double a) {
  const double w0 = p.omega0;
  const double mu_eff = p.mu + 0.375 * effective_gamma(p) * w0 * w0 * a * a;
  const double rad = k * k / (4.0 * w0 * w0 * a * a) - mu_eff * mu_eff;
  if (rad < 0.0) return std::nullopt;
  const double backbone = 0.375 * p.alpha * a * a / w0;
  return std::make_pair(backbone + std::sqrt(rad), backbone - std::sqrt(rad));
}

/// Fold structure of the response curve at a fixed drive amplitude.
struct JumpPoints {
  /// Maximum of the large-amplitude branch: sigma_m = 3 alpha a_m^2 / (8 w0)
  /// with a_m solving 2 w0 a (mu + (3/8) gamma w0^2 a^2) = k.
  double sigma_up = 0.0;
  double a_up = 0.0;
  /// Saddle-node where the large-amplitude branch disappears (jump on a
  /// positive sweep for alpha > 0). Lies just beyond the maximum.
  double sigma_fold_up = 0.0;
  double a_fold_up = 0.0;
  /// Saddle-node terminating the small-amplitude branch (jump on a negative sweep).
  double sigma_down = 0.0;
  double a_down = 0.0;
};

namespace detail {

/// Amplitude at the maximum of the response curve.
inline double peak_amplitude(const OscillatorParams& p, double k) {
  const double w0 = p.omega0;
  const double g = effective_gamma(p);
  const auto f = [&](double a) { return 2.0 * w0 * a * (p.mu + 0.375 * g * w0 * w0 * a * a) - k; };
  // Bracket the smallest positive root.
  double lo = 0.0;
  double hi = p.mu > 0.0 ? k / (2.0 * w0 * p.mu) : std::cbrt(k / (0.75 * std::abs(g) * w0 * w0 * w0));
  if (!std::isfinite(hi) || hi <= 0.0) {
    throw Error(ErrorKind::NonPhysical, "duffing-analytic", "response curve has no finite maximum");
  }
  while (f(hi) < 0.0) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e6) throw Error(ErrorKind::NonPhysical, "duffing-analytic", "response curve has no finite maximum");
  }
  boost::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(f, lo, hi, boost::math::tools::eps_tolerance<double>(52), iters);
  double a = 0.5 * (r.first + r.second);
  // One Newton step to machine precision.
  const double df = 2.0 * w0 * (p.mu + 1.125 * g * w0 * w0 * a * a);
  if (df != 0.0) a -= f(a) / df;
  return a;
}

/// Newton polish of a double root (u, sigma) of the amplitude cubic at fixed k.
inline void polish_fold(const OscillatorParams& p, double k, double& u, double& sigma) {
  const double w0 = p.omega0;
  for (int it = 0; it < 30; ++it) {
    const AmplitudeCubic c = amplitude_cubic(p, DriveSpec{k, sigma});
    const double f1 = c(u);
    const double f2 = c.derivative(u);
    // d/dsigma of the coefficients
    const double dc2 = -3.0 * w0 * p.alpha;
    const double dc1 = 8.0 * w0 * w0 * sigma;
    const double j11 = c.derivative(u);
    const double j12 = dc2 * u * u + dc1 * u;
    const double j21 = 6.0 * c.c3 * u + 2.0 * c.c2;
    const double j22 = 2.0 * dc2 * u + dc1;
    const double det = j11 * j22 - j12 * j21;
    if (det == 0.0 || !std::isfinite(det)) return;
    const double du = (f1 * j22 - f2 * j12) / det;
    const double ds = (j11 * f2 - j21 * f1) / det;
    const double u_new = u - du;
    const double s_new = sigma - ds;
    if (!std::isfinite(u_new) || !std::isfinite(s_new) || u_new <= 0.0) return;
    const bool done = std::abs(du) <= 1e-15 * u && std::abs(ds) <= 1e-15 * std::max(std::abs(sigma), p.mu);
    u = u_new;
    sigma = s_new;
    if (done) return;
  }
}

}  // namespace detail

/// Locates the maximum and both saddle-node folds of the response curve.
inline JumpPoints jump_points(const OscillatorParams& p, double k) {
  p.validate();
  if (!(k > 0.0)) throw Error(ErrorKind::NoBistability, "duffing-analytic", "no drive");
  if (p.alpha == 0.0) throw Error(ErrorKind::NoBistability, "duffing-analytic", "linear stiffness has no folds");
  const double w0 = p.omega0;
  const double g = effective_gamma(p);
  const double beta = 0.375 * p.alpha / w0;
  const double a_pk = detail::peak_amplitude(p, k);
  if (!std::isfinite(beta)) throw Error(ErrorKind::NonPhysical, "duffing-analytic", "non-finite backbone");
  // Folds are the extrema of sigma(a) along the half of the curve that leans
  // with the backbone: sigma = beta a^2 + s sqrt(R(a)), s = sign(alpha).
  const double s = p.alpha > 0.0 ? 1.0 : -1.0;
  const double kk = k * k / (4.0 * w0 * w0);
  const auto slope = [&](double a) {
    const double mu_eff = p.mu + 0.375 * g * w0 * w0 * a * a;
    const double rad = kk / (a * a) - mu_eff * mu_eff;
    const double drad = -2.0 * kk / (a * a * a) - 2.0 * mu_eff * 0.75 * g * w0 * w0 * a;
    return 2.0 * beta * a + s * drad / (2.0 * std::sqrt(std::max(rad, 1e-300)));
  };
  // Log grid in a plus a log grid in (a_pk - a): the upper fold approaches the
  // maximum as mu^2 / (8 sigma_m^2) in relative terms.
  const int n = 3000;
  std::vector<double> grid;
  grid.reserve(2 * n + 2);
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    grid.push_back(a_pk * std::pow(1e-6, 1.0 - t));
    grid.push_back(a_pk * (1.0 - std::pow(1e-14, t)));
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::remove_if(grid.begin(), grid.end(),
                            [&](double a) { return !(a >= a_pk * 1e-6) || !(a < a_pk * (1.0 - 1e-15)); }),
             grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::vector<double> roots;
  double prev_a = grid.front();
  double prev_v = slope(prev_a);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double a = grid[i];
    const double v = slope(a);
    if ((prev_v < 0.0) != (v < 0.0)) {
      boost::uintmax_t iters = 200;
      const auto r = boost::math::tools::toms748_solve(slope, prev_a, a, prev_v, v,
                                                       boost::math::tools::eps_tolerance<double>(50), iters);
      roots.push_back(0.5 * (r.first + r.second));
    }
    prev_a = a;
    prev_v = v;
  }
  if (roots.size() < 2) {
    throw Error(ErrorKind::NoBistability, "duffing-analytic", "drive below the bistability threshold");
  }
  const auto sigma_of = [&](double a) {
    const auto ds = detunings_at_amplitude(p, k, a);
    return s > 0.0 ? ds->first : ds->second;
  };
  JumpPoints jp;
  jp.a_up = a_pk;
  jp.sigma_up = beta * a_pk * a_pk;
  double u_hi = roots.back() * roots.back();
  double s_hi = sigma_of(roots.back());
  double u_lo = roots.front() * roots.front();
  double s_lo = sigma_of(roots.front());
  detail::polish_fold(p, k, u_hi, s_hi);
  detail::polish_fold(p, k, u_lo, s_lo);
  jp.a_fold_up = std::sqrt(u_hi);
  jp.sigma_fold_up = s_hi;
  jp.a_down = std::sqrt(u_lo);
  jp.sigma_down = s_lo;
  return jp;
}

/// Maximum of the response curve at drive k: (sigma_m, a_m). Exists with or
/// without bistability.
inline std::pair<double, double> response_peak(const OscillatorParams& p, double k) {
  p.validate();
  if (!(k > 0.0)) throw Error(ErrorKind::ZeroDrive, "duffing-analytic", "no drive");
  const double a = detail::peak_amplitude(p, k);
  return {0.375 * p.alpha * a * a / p.omega0, a};
}

/// Phase change when the large-amplitude branch is lost at its saddle-node:
/// phase of the surviving small-amplitude state minus the phase at the fold.
inline double fold_phase_jump(const OscillatorParams& p, double k) {
  const JumpPoints jp = jump_points(p, k);
  const DriveSpec d{k, jp.sigma_fold_up};
  const auto states = steady_state_amplitudes(p, d);
  const double phi_fold = steady_state_phase(p, d, jp.a_fold_up);
  const SteadyState& other = p.alpha > 0.0 ? states.front() : states.back();
  return other.phase - phi_fold;
}

/// Cusp where the two folds merge.
struct CuspPoint {
  double k_c = 0.0;      // m/s^2
  double sigma_c = 0.0;  // rad/s
  double a_c = 0.0;      // m
};

/// A triple root of the cubic needs c2^2 = 3 c1 c3 (a quadratic in sigma,
/// independent of k) at u = -c2 / (3 c3); k follows from the constant term.
inline CuspPoint bistability_threshold(const OscillatorParams& p) {
  p.validate();
  if (p.alpha == 0.0) throw Error(ErrorKind::NoCusp, "duffing-analytic", "alpha = 0 has no cusp");
  const double w0 = p.omega0;
  const double big_g = effective_gamma(p) * w0 * w0 * w0;
  const double al = p.alpha;
  const double qa = 0.25 * al * al - 0.75 * big_g * big_g;
  const double qb = -2.0 * al * p.mu * big_g;
  const double qc = p.mu * p.mu * (0.25 * big_g * big_g - 0.75 * al * al);
  std::vector<double> candidates;
  if (qa == 0.0) {
    if (qb != 0.0) candidates.push_back(-qc / qb);
  } else {
    const double disc = qb * qb - 4.0 * qa * qc;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      const double q = -0.5 * (qb + std::copysign(sq, qb));
      if (q != 0.0) candidates.push_back(qc / q);
      candidates.push_back(q / qa);
    }
  }
  std::optional<CuspPoint> best;
  for (double sigma : candidates) {
    const AmplitudeCubic c = amplitude_cubic(p, DriveSpec{0.0, sigma});
    const double u = -c.c2 / (3.0 * c.c3);
    if (!(u > 0.0)) continue;
    const double k2 = ((c.c3 * u + c.c2) * u + c.c1) * u;
    if (!(k2 > 0.0)) continue;
    CuspPoint cp{std::sqrt(k2), sigma, std::sqrt(u)};
    if (!best || cp.k_c < best->k_c) best = cp;
  }
  if (!best) throw Error(ErrorKind::NoCusp, "duffing-analytic", "nonlinear damping suppresses bistability");
  return *best;
}

}  // namespace iontrap
