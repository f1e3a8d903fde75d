#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>
#include <cmath>
#include <random>
#include <vector>

#include "iontrap/observables.hpp"

using namespace iontrap;

namespace {

OscillatorParams paper_params() {
  OscillatorParams p;
  p.omega0 = paper::kOmega0;
  p.mu = paper::kMu;
  p.alpha = paper::kAlpha;
  return p;
}

// Linear rate R0 (1 + beta v).
RateModel linear_rate(double r0, double beta) {
  return [=](double v) { return r0 * (1.0 + beta * v); };
}

// Independent oracle: arcsine density on (-a, a) against a Gaussian, by
// double-exponential quadrature in position.
double arcsine_gauss(double x, double a, double s) {
  boost::math::quadrature::tanh_sinh<double> q;
  // yc is the signed distance to the nearer endpoint, which keeps a^2 - y^2
  // accurate at the singularities.
  const auto f = [&](double y, double yc) {
    const double d = std::abs(yc);
    return std::exp(-sqr(x - y) / (2.0 * s * s)) / (std::sqrt(kTwoPi) * s) / (kPi * std::sqrt(d * (2.0 * a - d)));
  };
  return q.integrate(f, -a, a, 1e-14);
}

ImageProfile noisy(const ImageProfile& p, double rel, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, rel);
  ImageProfile out = p;
  double sum = 0.0;
  for (double& v : out.intensity) {
    v *= 1.0 + n(rng);
    sum += v;
  }
  for (double& v : out.intensity) v /= sum;
  return out;
}

}  // namespace

TEST(PositionDistribution, ZeroAmplitudeIsGaussian) {
  const double s = 1e-6;
  const auto grid = profile_grid(0.0, s);
  const auto prof = position_distribution(0.0, s, grid);
  double sum = 0.0;
  std::vector<double> g;
  for (double x : grid) {
    g.push_back(std::exp(-x * x / (2.0 * s * s)));
    sum += g.back();
  }
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(prof.intensity[i], g[i] / sum, 1e-14);
}

TEST(PositionDistribution, MatchesQuadratureOracle) {
  const double a = 3e-6, s = 1e-6;
  const auto grid = profile_grid(a, s);
  const auto prof = position_distribution(a, s, grid);
  std::vector<double> ref;
  double sum = 0.0;
  for (double x : grid) {
    ref.push_back(arcsine_gauss(x, a, s));
    sum += ref.back();
  }
  double peak = 0.0;
  for (double v : prof.intensity) peak = std::max(peak, v);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(prof.intensity[i], ref[i] / sum, 1e-9 * peak);
}

TEST(PositionDistribution, VarianceMoment) {
  const double s = 1e-6;
  for (double a : {0.5e-6, 2e-6, 20e-6}) {
    const auto prof = position_distribution(a, s, profile_grid(a, s, 10.0, 10.0));
    const auto m = profile_moments(prof);
    EXPECT_NEAR(m.mean, 0.0, 1e-15);
    EXPECT_NEAR(m.variance / (0.5 * a * a + s * s), 1.0, 1e-6) << a;
    EXPECT_NEAR(m.fourth / (0.375 * a * a * a * a + 3.0 * a * a * s * s + 3.0 * s * s * s * s), 1.0, 1e-6) << a;
  }
}

TEST(PositionDistribution, NarrowPsfShowsTurningPointPeaks) {
  const double a = 10e-6, s = 0.1e-6;
  const auto grid = profile_grid(a, s);
  const auto prof = position_distribution(a, s, grid);
  const auto it = std::max_element(prof.intensity.begin(), prof.intensity.end());
  const double x_peak = grid[static_cast<std::size_t>(it - prof.intensity.begin())];
  EXPECT_NEAR(std::abs(x_peak), a, 2.0 * s);
  const double mid = prof.intensity[grid.size() / 2];
  EXPECT_LT(mid, 0.2 * *it);
}

TEST(PositionDistribution, RejectsCoarseGrid) {
  std::vector<double> grid;
  for (int i = -20; i <= 20; ++i) grid.push_back(i * 0.2e-6);
  try {
    position_distribution(1e-6, 1e-6, grid);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::GridTooCoarse);
  }
  EXPECT_NO_THROW(position_distribution(1e-6, 1.7e-6, grid));
}

TEST(FitAmplitude, NoiselessRoundTrip) {
  const double s = 1e-6;
  for (double a : {0.5e-6, 2e-6, 20e-6}) {
    const auto prof = position_distribution(a, s, profile_grid(a, s), 0.3e-6);
    const auto fit = fit_amplitude(prof);
    EXPECT_NEAR(fit.amplitude / a, 1.0, 1e-3) << a;
    EXPECT_NEAR(fit.psf / s, 1.0, 1e-3) << a;
    EXPECT_NEAR(fit.center, 0.3e-6, 1e-9) << a;
  }
}

// Below the PSF the estimate is flagged unresolved and consistent with zero.
TEST(FitAmplitude, ResolutionFloor) {
  const double s = 1e-6;
  const double a = 0.05e-6;
  const auto clean = position_distribution(a, s, profile_grid(a, s));
  std::mt19937_64 rng(11);
  int consistent = 0;
  for (int t = 0; t < 100; ++t) {
    const auto fit = fit_amplitude(noisy(clean, 0.01, rng));
    if (fit.amplitude <= fit.amplitude_err) ++consistent;
  }
  EXPECT_GE(consistent, 95);
}

// Sandwich errors cover the truth at 3 sigma in at least 95% of trials.
TEST(FitAmplitude, NoiseCalibration) {
  const double s = 1e-6, a = 2e-6;
  const auto clean = position_distribution(a, s, profile_grid(a, s));
  std::mt19937_64 rng(2024);
  int covered = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const auto fit = fit_amplitude(noisy(clean, 0.01, rng));
    EXPECT_TRUE(fit.resolved);
    if (std::abs(fit.amplitude - a) <= 3.0 * fit.amplitude_err) ++covered;
  }
  EXPECT_GE(covered, 190);
}

// Camera images built from integrated trajectory samples recover the
// demodulated amplitude.
TEST(FitAmplitude, EndToEndFromTrajectory) {
  const OscillatorParams p = paper_params();
  const double k = 2.0 * p.mu * p.omega0 * 1e-5;
  const double s = kDefaultPsf;
  const double sigma0 = 300.0;
  const auto st = swept_branch_state(p, {k, sigma0}, true);
  const auto drive = DriveSchedule::chirp(p.omega0 + sigma0, p.omega0 + sigma0 + 60.0, 0.01 * p.mu * p.mu);
  const double window = 1.0 / p.mu;
  const auto traj = integrate(p, drive, k, 0.0, 4.0 * window,
                              {st.amplitude * std::cos(st.phase), st.amplitude * p.omega0 * std::sin(st.phase)});
  const auto rec = demodulate(traj, drive, window);
  ASSERT_GE(rec.size(), 3u);
  for (const auto& r : rec) {
    ASSERT_GT(r.amplitude, 2.0 * s);
    std::vector<double> xs;
    for (std::size_t i = 0; i < traj.t.size(); ++i) {
      if (std::abs(traj.t[i] - r.t_mid) < 0.5 * r.window) xs.push_back(traj.x[i]);
    }
    const auto img = image_from_samples(xs, s, profile_grid(r.amplitude, s));
    const auto fit = fit_amplitude(img);
    EXPECT_NEAR(fit.amplitude / r.amplitude, 1.0, 0.01);
  }
}

TEST(PhaseHistogram, ZeroAmplitudeIsFlat) {
  const int bins = 32;
  const auto h = photon_phase_histogram(linear_rate(1e5, 0.01), {0.0, 0.0, kTwoPi * 1e5}, 1.0, bins, 3);
  const double expect = static_cast<double>(h.total()) / bins;
  double chi2 = 0.0;
  for (auto c : h.counts) chi2 += sqr(static_cast<double>(c) - expect) / expect;
  const boost::math::chi_squared dist(bins - 1);
  EXPECT_LT(chi2, boost::math::quantile(dist, 0.95));
}

TEST(PhaseHistogram, TotalMatchesMeanRate) {
  const Motion m{2e-6, 0.4, kTwoPi * 1e5};
  const auto rate = linear_rate(2e5, 0.5);
  const auto h = photon_phase_histogram(rate, m, 0.5, 24, 5);
  const double expect = mean_rate(rate, m) * 0.5;
  EXPECT_NEAR(static_cast<double>(h.total()), expect, 4.0 * std::sqrt(expect));
}

TEST(PhaseHistogram, DeterministicUnderSeed) {
  const Motion m{1e-6, 1.0, kTwoPi * 2e5};
  const auto rate = linear_rate(1e5, 0.3);
  const auto h1 = photon_phase_histogram(rate, m, 0.2, 16, 99);
  const auto h2 = photon_phase_histogram(rate, m, 0.2, 16, 99);
  const auto h3 = photon_phase_histogram(rate, m, 0.2, 16, 100);
  EXPECT_EQ(h1.counts, h2.counts);
  EXPECT_NE(h1.counts, h3.counts);
}

TEST(PhaseHistogram, RejectsUnboundedRate) {
  const Motion m{1e-6, 0.0, kTwoPi * 1e5};
  try {
    photon_phase_histogram(linear_rate(1e5, 10.0), m, 0.1, 16, 1);  // negative for v < -0.1
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::RateUnbounded);
  }
  const auto inf = [](double) { return std::numeric_limits<double>::infinity(); };
  EXPECT_THROW(photon_phase_histogram(inf, m, 0.1, 16, 1), Error);
}

// First-order expansion: contrast = a w |dR/dv| / R, phase = phi -/+ pi/2.
TEST(PhaseHistogram, LinearizedBlochContrast) {
  const AtomConfig atom;
  const auto lasers = LaserConfig::defaults();
  const auto rate = doppler_rate_model(atom, lasers, 5.0);
  const double h = 0.05;
  const double r0 = rate(0.0);
  const double slope = (rate(h) - rate(-h)) / (2.0 * h);
  ASSERT_GT(slope, 0.0);
  const double w = kTwoPi * 438e3;
  const double a = 0.05 * r0 / (slope * w);  // contrast 0.05
  const Motion m{a, 0.7, w};
  const auto hist = photon_phase_histogram(rate, m, 4e6 / r0, 32, 17);
  const auto fit = fit_phase(hist);
  EXPECT_NEAR(fit.contrast, a * w * slope / r0, 3e-3);
  EXPECT_NEAR(wrap_phase(fit.phase - (m.phase - 0.5 * kPi)), 0.0, 5.0 * fit.err);
  EXPECT_LT(fit.err, 0.05);
}

TEST(FitPhase, ExactSinusoid) {
  const int bins = 36;
  const double phi0 = 2.1, c = 0.4, n = 1e6;
  PhaseHistogram h = empty_histogram(bins, 1.0);
  const double bw = kTwoPi / bins;
  for (int i = 0; i < bins; ++i) {
    const double lo = h.edges[static_cast<std::size_t>(i)];
    // Integral of 1 + c cos(theta - phi0) over the bin.
    const double mass = bw + c * (std::sin(lo + bw - phi0) - std::sin(lo - phi0));
    h.counts[static_cast<std::size_t>(i)] = static_cast<std::uint64_t>(std::llround(n * mass / kTwoPi));
  }
  const auto fit = fit_phase(h);
  EXPECT_NEAR(wrap_phase(fit.phase - phi0), 0.0, 1e-3);
  EXPECT_NEAR(fit.contrast, c, 1e-3);
}

TEST(FitPhase, OffsetShiftsPhaseExactly) {
  const auto h = photon_phase_histogram(linear_rate(1e5, 0.4), {1.0 / (kTwoPi * 1e3), 0.3, kTwoPi * 1e3}, 1.0, 40, 8);
  const auto base = fit_phase(h);
  for (int shift : {1, 7, 23}) {
    PhaseHistogram r = h;
    std::rotate(r.counts.rbegin(), r.counts.rbegin() + shift, r.counts.rend());
    const auto f = fit_phase(r);
    EXPECT_NEAR(wrap_phase(f.phase - base.phase - kTwoPi * shift / 40.0), 0.0, 1e-12);
    EXPECT_NEAR(f.contrast, base.contrast, 1e-12);
  }
  // Shifting the motion phase moves the fit by the same amount.
  const auto moved = fit_phase(photon_phase_histogram(linear_rate(1e5, 0.4), {1.0 / (kTwoPi * 1e3), 1.3, kTwoPi * 1e3}, 1.0, 40, 8));
  EXPECT_NEAR(wrap_phase(moved.phase - base.phase - 1.0), 0.0, 5.0 * std::hypot(moved.err, base.err));
}

TEST(FitPhase, InsufficientCounts) {
  PhaseHistogram h = empty_histogram(10, 1.0);
  h.counts.assign(10, 9);
  try {
    fit_phase(h);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientCounts);
  }
}

// Phase scatter follows sqrt(2) / (contrast sqrt(N)) over a 10x count range,
// and the reported error agrees with it.
TEST(FitPhase, PoissonErrorScaling) {
  const double c = 0.3;
  const int trials = 200;
  double sd[2];
  for (int j = 0; j < 2; ++j) {
    const double n = j == 0 ? 1e4 : 1e5;
    double s2 = 0.0, reported = 0.0;
    for (int t = 0; t < trials; ++t) {
      const auto h = photon_phase_histogram(linear_rate(n / kTwoPi, c), {1.0, 0.0, 1.0}, kTwoPi, 32,
                                            1000 * static_cast<std::uint64_t>(j) + static_cast<std::uint64_t>(t));
      const auto f = fit_phase(h);
      s2 += sqr(wrap_phase(f.phase + 0.5 * kPi));
      reported += f.err;
    }
    sd[j] = std::sqrt(s2 / trials);
    const double expect = std::sqrt(2.0) / (c * std::sqrt(n));
    EXPECT_NEAR(sd[j] / expect, 1.0, 0.15) << n;
    EXPECT_NEAR(reported / trials / expect, 1.0, 0.05) << n;
  }
  EXPECT_NEAR(sd[0] / sd[1], std::sqrt(10.0), 0.2 * std::sqrt(10.0));
}

// Photon-phase differences along a simulated sweep track the analytic phase.
TEST(PhasePipeline, TracksAnalyticPhase) {
  const OscillatorParams p = paper_params();
  const double k = 2.0 * p.mu * p.omega0 * 1e-5;
  SweepPlan plan;
  plan.k = k;
  plan.sweep_rate = 0.01 * p.mu * p.mu;
  plan.freq_start = p.omega0 - 150.0;
  plan.freq_end = p.omega0 + 450.0;
  const auto s0 = swept_branch_state(p, {k, -150.0}, true);
  plan.initial = {s0.amplitude * std::cos(s0.phase), s0.amplitude * p.omega0 * std::sin(s0.phase)};
  const auto res = run_sweep(p, plan);
  std::vector<DemodRecord> picks;
  for (std::size_t i = 5; i < res.records.size(); i += 6) picks.push_back(res.records[i]);
  ASSERT_GE(picks.size(), 8u);
  const AtomConfig atom;
  const auto rate = doppler_rate_model(atom, LaserConfig::defaults(), 40.0);
  const auto track = photon_phase_track(picks, rate, 5.0, 32, 41);
  const auto analytic = [&](double w) { return swept_branch_state(p, {k, w - p.omega0}, true).phase; };
  const double ref_fit = track.front().fit.phase;
  const double ref_an = analytic(track.front().drive_frequency);
  for (const auto& pt : track) {
    const double d_fit = wrap_phase(pt.fit.phase - ref_fit);
    const double d_an = wrap_phase(analytic(pt.drive_frequency) - ref_an);
    EXPECT_NEAR(d_fit, d_an, 0.05) << pt.drive_frequency - p.omega0;
  }
}

TEST(PhasePipeline, JumpAtUpperFold) {
  const OscillatorParams p = paper_params();
  const double kl = 2.0 * p.mu * p.omega0;
  const double k = drive_for_phase_jump(p, paper::kPhaseJump, kl * 8e-6, kl * 30e-6);
  EXPECT_NEAR(fold_phase_jump(p, k), paper::kPhaseJump, 1e-9);
  const AtomConfig atom;
  const auto rate = doppler_rate_model(atom, LaserConfig::defaults(), 60.0);
  const auto m = measure_fold_phase_jump(p, k, rate, 2.0, 32, 7, 5e-4 * p.mu * p.mu, 15.0);
  EXPECT_NEAR(m.mechanical, paper::kPhaseJump, 0.2 * paper::kPhaseJump);
  EXPECT_NEAR(m.photon, paper::kPhaseJump, 0.2 * paper::kPhaseJump);
  EXPECT_NEAR(m.photon, m.mechanical, 5.0 * m.photon_err);
}
