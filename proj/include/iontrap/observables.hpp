#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/tools/toms748_solve.hpp>
#include <unsupported/Eigen/LevenbergMarquardt>

#include "iontrap/atomphysics.hpp"
#include "iontrap/errors.hpp"
#include "iontrap/spline.hpp"
#include "iontrap/timedomain.hpp"
#include "iontrap/units.hpp"

namespace iontrap {

inline constexpr double kDefaultPsf = 1.0e-6;  // m

/// Time-averaged image integrated perpendicular to the motion.
struct ImageProfile {
  std::vector<double> x;          // m
  std::vector<double> intensity;  // unit sum
  double psf = kDefaultPsf;       // m
};

/// Uniform grid covering the orbit plus `margin` PSF widths on each side.
inline std::vector<double> profile_grid(double amplitude, double psf, double points_per_psf = 10.0,
                                        double margin = 6.0, double center = 0.0) {
  if (!(psf > 0.0) || !(amplitude >= 0.0) || !(points_per_psf > 0.0)) {
    throw Error(ErrorKind::ConfigError, "observables", "profile grid needs psf > 0, amplitude >= 0");
  }
  const double half = amplitude + margin * psf;
  const int n = 2 * static_cast<int>(std::ceil(half / psf * points_per_psf)) + 1;
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = center - half + 2.0 * half * i / (n - 1);
  return x;
}

namespace detail {

inline void check_profile_grid(std::span<const double> grid, double psf) {
  if (grid.size() < 3) throw Error(ErrorKind::GridTooCoarse, "observables", "profile grid needs >= 3 points");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double h = grid[i] - grid[i - 1];
    if (!(h > 0.0)) throw Error(ErrorKind::ConfigError, "observables", "profile grid must increase strictly");
    if (h > psf / 8.0) {
      throw Error(ErrorKind::GridTooCoarse, "observables", "profile grid has fewer than 8 points per psf");
    }
  }
}

/// Orbit nodes for the periodic trapezoid rule; the error bound
/// exp(-N^2 psf^2 / 2a^2) stays below exp(-32).
inline int orbit_nodes(double amplitude, double psf) {
  return 32 + 8 * static_cast<int>(std::ceil(amplitude / psf));
}

/// Unnormalized density (1/2pi) int G(x - c - a cos th) dth on the grid.
inline void orbit_density(double a, double psf, double center, std::span<const double> grid,
                          std::vector<double>& out) {
  const int n = orbit_nodes(std::abs(a), psf);
  std::vector<double> xs(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) xs[static_cast<std::size_t>(j)] = center + a * std::cos(kTwoPi * j / n);
  const double inv = 1.0 / (2.0 * psf * psf);
  const double norm = 1.0 / (std::sqrt(kTwoPi) * psf * n);
  out.assign(grid.size(), 0.0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double acc = 0.0;
    for (double c : xs) {
      const double u = grid[i] - c;
      acc += std::exp(-u * u * inv);
    }
    out[i] = acc * norm;
  }
}

}  // namespace detail

/// Arcsine orbit density convolved with a Gaussian PSF, normalized to unit
/// sum on the grid.
inline ImageProfile position_distribution(double amplitude, double psf, std::span<const double> grid,
                                          double center = 0.0) {
  if (!(amplitude >= 0.0) || !std::isfinite(amplitude)) {
    throw Error(ErrorKind::ConfigError, "observables", "amplitude must be >= 0");
  }
  if (!(psf > 0.0) || !std::isfinite(psf)) throw Error(ErrorKind::ConfigError, "observables", "psf must be > 0");
  detail::check_profile_grid(grid, psf);
  ImageProfile out;
  out.x.assign(grid.begin(), grid.end());
  out.psf = psf;
  detail::orbit_density(amplitude, psf, center, grid, out.intensity);
  double sum = 0.0;
  for (double v : out.intensity) sum += v;
  if (!(sum > 0.0)) throw Error(ErrorKind::GridTooCoarse, "observables", "grid misses the orbit");
  for (double& v : out.intensity) v /= sum;
  return out;
}

/// Camera image of sampled positions: mean of Gaussians centred on each
/// sample, normalized to unit sum on the grid.
inline ImageProfile image_from_samples(std::span<const double> positions, double psf, std::span<const double> grid) {
  if (!(psf > 0.0)) throw Error(ErrorKind::ConfigError, "observables", "psf must be > 0");
  if (positions.empty()) throw Error(ErrorKind::ConfigError, "observables", "no position samples");
  detail::check_profile_grid(grid, psf);
  ImageProfile out;
  out.x.assign(grid.begin(), grid.end());
  out.psf = psf;
  out.intensity.assign(grid.size(), 0.0);
  const double inv = 1.0 / (2.0 * psf * psf);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double acc = 0.0;
    for (double x : positions) acc += std::exp(-sqr(grid[i] - x) * inv);
    out.intensity[i] = acc;
  }
  double sum = 0.0;
  for (double v : out.intensity) sum += v;
  if (!(sum > 0.0)) throw Error(ErrorKind::GridTooCoarse, "observables", "grid misses the samples");
  for (double& v : out.intensity) v /= sum;
  return out;
}

struct ProfileMoments {
  double mean = 0.0;
  double variance = 0.0;
  double fourth = 0.0;  // central
};

inline ProfileMoments profile_moments(const ImageProfile& p) {
  ProfileMoments m;
  double w = 0.0;
  for (std::size_t i = 0; i < p.x.size(); ++i) {
    w += p.intensity[i];
    m.mean += p.intensity[i] * p.x[i];
  }
  m.mean /= w;
  for (std::size_t i = 0; i < p.x.size(); ++i) {
    const double d2 = sqr(p.x[i] - m.mean);
    m.variance += p.intensity[i] * d2;
    m.fourth += p.intensity[i] * d2 * d2;
  }
  m.variance /= w;
  m.fourth /= w;
  return m;
}

struct AmplitudeFit {
  double amplitude = 0.0;  // m
  double psf = 0.0;        // m
  double center = 0.0;     // m
  double amplitude_err = 0.0;
  double psf_err = 0.0;
  double center_err = 0.0;
  double rms = 0.0;  // residual rms, intensity units
  bool resolved = true;
  int evaluations = 0;
};

namespace detail {

struct ProfileFunctor : Eigen::DenseFunctor<double> {
  // Parameters (a, psf, center) in units of `scale`.
  ProfileFunctor(const ImageProfile& p, double scale)
      : Eigen::DenseFunctor<double>(3, static_cast<int>(p.x.size())), profile(p), scale(scale) {}

  void model(const Eigen::VectorXd& q, std::vector<double>& out) const {
    const double psf = std::max(std::abs(q(1)) * scale, 1e-3 * scale);
    orbit_density(q(0) * scale, psf, q(2) * scale, profile.x, out);
    double sum = 0.0;
    for (double v : out) sum += v;
    for (double& v : out) v /= sum;
  }

  int operator()(const Eigen::VectorXd& q, Eigen::VectorXd& f) const {
    model(q, buf);
    for (std::size_t i = 0; i < buf.size(); ++i) f(static_cast<Eigen::Index>(i)) = buf[i] - profile.intensity[i];
    ++evals;
    return 0;
  }

  int df(const Eigen::VectorXd& q, Eigen::MatrixXd& jac) const {
    Eigen::VectorXd fp(values()), fm(values());
    for (int j = 0; j < 3; ++j) {
      const double h = 1e-5;
      Eigen::VectorXd qp = q, qm = q;
      qp(j) += h;
      qm(j) -= h;
      (*this)(qp, fp);
      (*this)(qm, fm);
      jac.col(j) = (fp - fm) / (2.0 * h);
    }
    return 0;
  }

  const ImageProfile& profile;
  double scale;
  mutable std::vector<double> buf;
  mutable int evals = 0;
};

}  // namespace detail

/// Least-squares fit of (a, psf, center), started from the moment identity
/// var = a^2/2 + psf^2 and mu4 = 3a^4/8 + 3a^2 psf^2 + 3 psf^4. Standard errors
/// use the sandwich covariance, which stays honest for multiplicative noise.
inline AmplitudeFit fit_amplitude(const ImageProfile& profile) {
  if (profile.x.size() != profile.intensity.size() || profile.x.size() < 8) {
    throw Error(ErrorKind::ConfigError, "observables", "profile needs >= 8 matching samples");
  }
  for (double v : profile.intensity) {
    if (!std::isfinite(v)) throw Error(ErrorKind::ConfigError, "observables", "profile intensity not finite");
  }
  const ProfileMoments m = profile_moments(profile);
  const double a4 = std::max(8.0 * (3.0 * m.variance * m.variance - m.fourth) / 3.0, 0.0);
  double a0 = std::pow(a4, 0.25);
  double s2 = m.variance - 0.5 * a0 * a0;
  const double h = profile.x[1] - profile.x[0];
  if (s2 < 4.0 * h * h) {
    s2 = std::max(0.25 * m.variance, 4.0 * h * h);
    a0 = std::sqrt(std::max(2.0 * (m.variance - s2), 0.0));
  }
  const double scale = std::sqrt(s2);
  // A start at a = 0 sits on a stationary point in a; nudge off it.
  a0 = std::max(a0, 0.3 * scale);

  detail::ProfileFunctor fn(profile, scale);
  Eigen::LevenbergMarquardt<detail::ProfileFunctor> lm(fn);
  lm.setXtol(1e-12);
  lm.setFtol(1e-14);
  lm.setMaxfev(400);
  Eigen::VectorXd q(3);
  q << a0 / scale, 1.0, m.mean / scale;
  const auto status = lm.minimize(q);
  if (status == Eigen::LevenbergMarquardtSpace::ImproperInputParameters || !q.allFinite()) {
    throw Error(ErrorKind::FitDiverged, "observables", "amplitude fit diverged");
  }

  const Eigen::Index n = fn.values();
  Eigen::VectorXd r(n);
  Eigen::MatrixXd jac(n, 3);
  fn(q, r);
  fn.df(q, jac);
  AmplitudeFit out;
  out.amplitude = std::abs(q(0)) * scale;
  out.psf = std::abs(q(1)) * scale;
  out.center = q(2) * scale;
  out.rms = std::sqrt(r.squaredNorm() / static_cast<double>(n));
  out.evaluations = fn.evals;
  const double span = profile.x.back() - profile.x.front();
  if (!(out.psf < span) || !(out.amplitude < span)) {
    throw Error(ErrorKind::FitDiverged, "observables", "amplitude fit ran away");
  }
  const Eigen::Matrix3d jtj = jac.transpose() * jac;
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(jtj);
  const double inf = std::numeric_limits<double>::infinity();
  if (!lu.isInvertible()) {
    out.amplitude_err = out.psf_err = out.center_err = inf;
    out.resolved = false;
    return out;
  }
  const Eigen::Matrix3d bread = lu.inverse();
  // HC3 sandwich: squared residuals inflated by leverage, since the few
  // points on the peaks dominate an unweighted fit.
  Eigen::Matrix3d meat = Eigen::Matrix3d::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVector3d ji = jac.row(i);
    const double lev = std::min((ji * bread * ji.transpose())(0, 0), 0.99);
    meat += ji.transpose() * ji * (r(i) * r(i) / sqr(1.0 - lev));
  }
  const Eigen::Matrix3d cov = bread * meat * bread;
  const auto err = [&](int i) { return cov(i, i) >= 0.0 && std::isfinite(cov(i, i)) ? std::sqrt(cov(i, i)) * scale : inf; };
  out.amplitude_err = err(0);
  out.psf_err = err(1);
  out.center_err = err(2);
  // Below the PSF the image shape fixes a^4 (the variance absorbs a^2 into
  // psf), so the linearized error in a is optimistic. When a^4 is within three
  // standard errors of zero the amplitude is unresolved and its error is
  // widened to cover zero.
  const double w_err = 4.0 * out.amplitude * out.amplitude * out.amplitude * out.amplitude_err;
  out.resolved = sqr(sqr(out.amplitude)) > 3.0 * w_err;
  if (!out.resolved) out.amplitude_err = std::max(out.amplitude_err, out.amplitude);
  return out;
}

/// Photon counts binned by drive phase over [0, 2pi).
struct PhaseHistogram {
  std::vector<double> edges;          // n_bins + 1, rad
  std::vector<std::uint64_t> counts;  // n_bins
  double duration = 0.0;              // s

  std::size_t bins() const { return counts.size(); }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

inline PhaseHistogram empty_histogram(int n_bins, double duration) {
  if (n_bins < 3) throw Error(ErrorKind::ConfigError, "observables", "histogram needs >= 3 bins");
  PhaseHistogram h;
  h.duration = duration;
  h.counts.assign(static_cast<std::size_t>(n_bins), 0);
  for (int i = 0; i <= n_bins; ++i) h.edges.push_back(kTwoPi * i / n_bins);
  return h;
}

/// Steady oscillation x = a cos(w t - phi); the drive phase is w t.
struct Motion {
  double amplitude = 0.0;  // m
  double phase = 0.0;      // rad
  double omega = 0.0;      // rad/s
};

using RateModel = std::function<double(double)>;  // velocity (m/s) -> photons/s

namespace detail {

/// Uniform on [0, 1) from the top 53 bits; fixed so histograms do not depend
/// on the standard library's distribution implementation.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

/// Inhomogeneous Poisson arrivals at R(v(t)) sampled by thinning, binned by
/// drive phase. Deterministic for a given seed.
inline PhaseHistogram photon_phase_histogram(const RateModel& rate, const Motion& motion, double duration, int n_bins,
                                             std::uint64_t seed) {
  if (!(motion.omega > 0.0) || !(motion.amplitude >= 0.0)) {
    throw Error(ErrorKind::ConfigError, "observables", "motion needs omega > 0 and amplitude >= 0");
  }
  if (!(duration > 0.0) || !std::isfinite(duration)) {
    throw Error(ErrorKind::ConfigError, "observables", "duration must be > 0");
  }
  PhaseHistogram h = empty_histogram(n_bins, duration);
  const double aw = motion.amplitude * motion.omega;
  const auto rate_at = [&](double theta) {
    const double r = rate(-aw * std::sin(theta - motion.phase));
    if (!std::isfinite(r) || r < 0.0) {
      throw Error(ErrorKind::RateUnbounded, "observables", "rate model returned a negative or non-finite value");
    }
    return r;
  };
  double peak = 0.0;
  for (int i = 0; i < 256; ++i) peak = std::max(peak, rate_at(kTwoPi * i / 256.0));
  const double bound = 1.1 * peak;
  if (bound == 0.0) return h;
  if (!std::isfinite(bound)) throw Error(ErrorKind::RateUnbounded, "observables", "rate bound is not finite");

  std::mt19937_64 rng(seed);
  double t = 0.0;
  for (;;) {
    t += -std::log1p(-detail::unit_uniform(rng)) / bound;
    if (t >= duration) break;
    const double theta = std::fmod(motion.omega * t, kTwoPi);
    const double r = rate_at(theta);
    if (r > bound) throw Error(ErrorKind::RateUnbounded, "observables", "rate exceeds the thinning bound");
    if (detail::unit_uniform(rng) * bound < r) {
      auto bin = static_cast<std::size_t>(theta / kTwoPi * n_bins);
      h.counts[std::min(bin, h.counts.size() - 1)] += 1;
    }
  }
  return h;
}

/// Mean of R(v(t)) over one period.
inline double mean_rate(const RateModel& rate, const Motion& motion, int nodes = 1024) {
  double acc = 0.0;
  for (int i = 0; i < nodes; ++i) {
    acc += rate(-motion.amplitude * motion.omega * std::sin(kTwoPi * i / nodes - motion.phase));
  }
  return acc / nodes;
}

struct PhaseFit {
  double phase = 0.0;     // rad, (-pi, pi]
  double contrast = 0.0;  // fundamental amplitude over mean, bin-averaging corrected
  double err = 0.0;       // 1 sigma phase error, rad
};

/// Least squares c0 + c1 cos(theta - phi) over uniform bins. Only differences
/// of phi across conditions are meaningful; the detection offset is unknown.
inline PhaseFit fit_phase(const PhaseHistogram& hist) {
  const std::size_t n = hist.bins();
  if (n < 3 || hist.edges.size() != n + 1) throw Error(ErrorKind::ConfigError, "observables", "malformed histogram");
  const double total = static_cast<double>(hist.total());
  if (total < 100.0) throw Error(ErrorKind::InsufficientCounts, "observables", "fewer than 100 counts");
  // Orthogonal basis on uniform bins: projections are the LS solution.
  double c0 = 0.0, ca = 0.0, cb = 0.0, vaa = 0.0, vbb = 0.0, vab = 0.0;
  const double nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = static_cast<double>(hist.counts[i]);
    const double th = hist.center(i);
    const double co = std::cos(th), si = std::sin(th);
    c0 += c;
    ca += c * co;
    cb += c * si;
    // Poisson variance of each bin equals its count.
    vaa += c * co * co;
    vbb += c * si * si;
    vab += c * co * si;
  }
  c0 /= nn;
  ca *= 2.0 / nn;
  cb *= 2.0 / nn;
  const double f = 4.0 / (nn * nn);
  vaa *= f;
  vbb *= f;
  vab *= f;
  const double r2 = ca * ca + cb * cb;
  const double sinc = std::sin(kPi / nn) / (kPi / nn);
  PhaseFit out;
  out.phase = std::atan2(cb, ca);
  out.contrast = std::sqrt(r2) / c0 / sinc;
  out.err = r2 > 0.0 ? std::sqrt(std::max(cb * cb * vaa + ca * ca * vbb - 2.0 * ca * cb * vab, 0.0)) / r2
                     : std::numeric_limits<double>::infinity();
  return out;
}

/// Scattering rate Gamma rho_P(v) from the Bloch model, tabulated on
/// [-v_max, v_max] and spline interpolated. Outside the table the rate is
/// treated as unbounded.
inline RateModel doppler_rate_model(const AtomConfig& atom, const LaserConfig& lasers, double v_max,
                                    int points = 201, double detection_efficiency = 1.0) {
  if (!(v_max > 0.0) || points < 5) throw Error(ErrorKind::ConfigError, "observables", "rate table needs v_max > 0");
  std::vector<double> v(static_cast<std::size_t>(points)), r(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) {
    v[static_cast<std::size_t>(i)] = -v_max + 2.0 * v_max * i / (points - 1);
    const auto ss = steady_state(build_liouvillian(atom, lasers, v[static_cast<std::size_t>(i)]));
    r[static_cast<std::size_t>(i)] = detection_efficiency * atom.linewidth * ss.p_population();
  }
  CubicSpline spline(v, r);
  return [spline, v_max](double vel) {
    if (!(std::abs(vel) <= v_max)) return std::numeric_limits<double>::infinity();
    return std::max(spline(vel), 0.0);
  };
}

struct PhasePoint {
  double drive_frequency = 0.0;  // rad/s
  double amplitude = 0.0;        // m
  double mechanical_phase = 0.0;  // rad, from demodulation
  PhaseFit fit;
  std::uint64_t counts = 0;
};

/// Photon-phase measurement for each demodulated record, one seed per record.
inline std::vector<PhasePoint> photon_phase_track(const std::vector<DemodRecord>& records, const RateModel& rate,
                                                  double duration, int n_bins, std::uint64_t seed) {
  std::vector<PhasePoint> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const Motion m{rec.amplitude, rec.phase, rec.drive_frequency};
    const auto hist = photon_phase_histogram(rate, m, duration, n_bins, seed + i);
    PhasePoint p;
    p.drive_frequency = rec.drive_frequency;
    p.amplitude = rec.amplitude;
    p.mechanical_phase = rec.phase;
    p.fit = fit_phase(hist);
    p.counts = hist.total();
    out.push_back(p);
  }
  return out;
}

struct PhaseJumpMeasurement {
  double analytic = 0.0;    // rad, steady-state phase change at the saddle-node
  double mechanical = 0.0;  // rad, from the demodulated records
  double photon = 0.0;      // rad, from the photon-phase fits
  double photon_err = 0.0;  // rad
  double jump_frequency = 0.0;  // rad/s
};

/// Slow positive sweep through the upper fold. The phase step is taken
/// between the last record before the collapse starts (amplitude within 1% of
/// the pre-jump maximum) and the first record after which amplitude and phase
/// have settled (changes over three windows below 2% and 0.05 rad).
inline PhaseJumpMeasurement measure_fold_phase_jump(const OscillatorParams& p, double k, const RateModel& rate,
                                                    double duration, int n_bins, std::uint64_t seed,
                                                    double sweep_rate, double span) {
  const JumpPoints jp = jump_points(p, k);
  SweepPlan plan;
  plan.k = k;
  plan.sweep_rate = sweep_rate;
  plan.freq_start = p.omega0 + jp.sigma_fold_up - span;
  plan.freq_end = p.omega0 + jp.sigma_fold_up + span;
  const SteadyState s0 = swept_branch_state(p, {k, plan.freq_start - p.omega0}, true);
  plan.initial = {s0.amplitude * std::cos(s0.phase), s0.amplitude * p.omega0 * std::sin(s0.phase)};
  const SweepResult res = run_sweep(p, plan);
  if (res.jumps.empty()) throw Error(ErrorKind::NoBistability, "observables", "sweep shows no jump");
  const auto& rec = res.records;
  const std::size_t jr = res.jumps.front().record;
  double a_max = 0.0;
  for (std::size_t i = 0; i <= jr; ++i) a_max = std::max(a_max, rec[i].amplitude);
  std::size_t j0 = jr;
  while (j0 > 0 && rec[j0].amplitude < 0.99 * a_max) --j0;
  std::size_t j1 = jr + 1;
  const auto settled = [&](std::size_t i) {
    return std::abs(rec[i + 3].amplitude - rec[i].amplitude) < 0.02 * rec[i].amplitude &&
           std::abs(wrap_phase(rec[i + 3].phase - rec[i].phase)) < 0.05;
  };
  while (j1 + 3 < rec.size() && !settled(j1)) ++j1;
  if (j1 + 3 >= rec.size()) throw Error(ErrorKind::ConfigError, "observables", "sweep ends before settling");
  const std::vector<DemodRecord> pair{rec[j0], rec[j1]};
  const auto track = photon_phase_track(pair, rate, duration, n_bins, seed);
  PhaseJumpMeasurement m;
  m.analytic = fold_phase_jump(p, k);
  m.mechanical = wrap_phase(pair[1].phase - pair[0].phase);
  m.photon = wrap_phase(track[1].fit.phase - track[0].fit.phase);
  m.photon_err = std::hypot(track[0].fit.err, track[1].fit.err);
  m.jump_frequency = res.jumps.front().frequency;
  return m;
}

/// Drive amplitude at which the analytic fold phase jump equals `target`.
inline double drive_for_phase_jump(const OscillatorParams& p, double target, double k_lo, double k_hi) {
  const auto f = [&](double k) { return fold_phase_jump(p, k) - target; };
  const double f_lo = f(k_lo), f_hi = f(k_hi);
  if ((f_lo < 0.0) == (f_hi < 0.0)) {
    throw Error(ErrorKind::ConfigError, "observables", "phase jump target not bracketed by the drive range");
  }
  boost::uintmax_t iters = 100;
  const auto r = boost::math::tools::toms748_solve(f, k_lo, k_hi, f_lo, f_hi,
                                                   boost::math::tools::eps_tolerance<double>(40), iters);
  return 0.5 * (r.first + r.second);
}

}  // namespace iontrap
