#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "iontrap/timedomain.hpp"

using namespace iontrap;

namespace {

OscillatorParams paper_params() {
  OscillatorParams p;
  p.omega0 = paper::kOmega0;
  p.mu = paper::kMu;
  p.alpha = paper::kAlpha;
  return p;
}

// Drive giving a 10 um peak under linear damping.
double paper_drive(const OscillatorParams& p) { return 2.0 * p.mu * p.omega0 * 1e-5; }

OscillatorState on_state(const OscillatorParams& p, const SteadyState& s) {
  // x = a cos(theta - phi) at theta = 0, v = a w0 sin(theta - phi) derivative sign
  return {s.amplitude * std::cos(s.phase), s.amplitude * p.omega0 * std::sin(s.phase)};
}

DemodRecord settle_and_demod(const OscillatorParams& p, double k, double sigma, OscillatorState init,
                             double settle_rings) {
  const double w = p.omega0 + sigma;
  const double window = 1.0 / p.mu;
  const double t_end = (settle_rings + 1.0) / p.mu;
  const auto drive = DriveSchedule::constant(w, t_end);
  // Start the lock-in at a whole period so the last window closes at t_end.
  const double periods = std::round(window * w / kTwoPi);
  const double t_demod = drive.time_at_phase(std::floor(drive.total_phase() / kTwoPi - periods) * kTwoPi);
  const auto mid = integrate_observed(p, drive, k, 0.0, t_demod, init, {}, 16, nullptr,
                                      [](double, double, double, double) {});
  const auto tail = integrate(p, drive, k, t_demod, t_end, mid);
  const auto rec = demodulate(tail, drive, window);
  EXPECT_GE(rec.size(), 1u);
  return rec.front();
}

}  // namespace

TEST(DriveSchedule, ChirpPhaseInverse) {
  const auto d = DriveSchedule::chirp(1000.0, 2000.0, 50.0);
  EXPECT_NEAR(d.duration(), 20.0, 1e-12);
  EXPECT_NEAR(d.frequency(10.0), 1500.0, 1e-9);
  for (double t : {0.0, 0.3, 7.7, 19.9}) {
    EXPECT_NEAR(d.time_at_phase(d.phase(t)), t, 1e-11);
  }
  const auto down = DriveSchedule::chirp(2000.0, 1000.0, 50.0);
  EXPECT_NEAR(down.frequency(20.0), 1000.0, 1e-9);
  EXPECT_NEAR(down.total_phase(), 1500.0 * 20.0, 1e-6);
}

TEST(DriveSchedule, SteppedIsPhaseContinuousWholePeriods) {
  const auto d = DriveSchedule::stepped(1000.0, 1100.0, 25.0, 0.5);
  ASSERT_EQ(d.segments().size(), 5u);
  for (const auto& s : d.segments()) {
    const double cycles = s.theta0 / kTwoPi;
    EXPECT_NEAR(cycles, std::round(cycles), 1e-9);
  }
  EXPECT_NEAR(d.frequency(d.segments()[2].t0 + 1e-6), 1050.0, 1e-12);
  for (double t : {0.1, 0.6, 1.7}) EXPECT_NEAR(d.time_at_phase(d.phase(t)), t, 1e-12);
}

TEST(DriveSchedule, RejectsZeroRate) {
  EXPECT_THROW(DriveSchedule::chirp(1.0, 2.0, 0.0), Error);
  EXPECT_THROW(DriveSchedule::constant(-1.0, 1.0), Error);
}

TEST(Integrate, RingDownEnergyEnvelope) {
  OscillatorParams p = paper_params();
  p.alpha = 0.0;
  const double tmax = 5.0 / (2.0 * p.mu);
  const auto drive = DriveSchedule::constant(p.omega0, tmax);
  const auto traj = integrate(p, drive, 0.0, 0.0, tmax, {1e-5, 0.0}, {}, 8);
  const double e0 = 0.5 * sqr(p.omega0 * 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < traj.t.size(); i += 97) {
    const double e = 0.5 * sqr(traj.v[i]) + 0.5 * sqr(p.omega0 * traj.x[i]);
    worst = std::max(worst, std::abs(e / (e0 * std::exp(-2.0 * p.mu * traj.t[i])) - 1.0));
  }
  EXPECT_LT(worst, 0.01);
}

TEST(Integrate, ConservativeEnergy) {
  OscillatorParams p = paper_params();
  p.mu = 0.0;
  const double tmax = 2000 * kTwoPi / p.omega0;
  const auto drive = DriveSchedule::constant(p.omega0, tmax);
  const auto traj = integrate(p, drive, 0.0, 0.0, tmax, {2e-5, 0.0}, {1e-11, 1e-11}, 8);
  const auto energy = [&](std::size_t i) {
    const double x = traj.x[i];
    return 0.5 * sqr(traj.v[i]) + 0.5 * sqr(p.omega0 * x) + 0.25 * p.alpha * x * x * x * x;
  };
  const double e0 = energy(0);
  double worst = 0.0;
  for (std::size_t i = 0; i < traj.t.size(); ++i) worst = std::max(worst, std::abs(energy(i) / e0 - 1.0));
  EXPECT_LT(worst, 1e-7);
}

TEST(Integrate, TrajectoryIsMonotoneAndPhaseUniform) {
  const OscillatorParams p = paper_params();
  const auto drive = DriveSchedule::chirp(p.omega0, p.omega0 + 100.0, 1e5);
  const auto traj = integrate(p, drive, paper_drive(p), 0.0, drive.duration(), {});
  ASSERT_GT(traj.t.size(), 100u);
  for (std::size_t i = 1; i < traj.t.size(); ++i) {
    ASSERT_GT(traj.t[i], traj.t[i - 1]);
    ASSERT_NEAR(traj.theta[i] - traj.theta[i - 1], kTwoPi / 16, 1e-9);
    ASSERT_NEAR(drive.phase(traj.t[i]), traj.theta[i], 1e-6);
  }
}

TEST(Integrate, ConvergesToBothAttractors) {
  const OscillatorParams p = paper_params();
  const double k = paper_drive(p);
  const double sigma = 620.0;
  const auto states = steady_state_amplitudes(p, {k, sigma});
  ASSERT_EQ(states.size(), 3u);
  for (const auto& s : {states.front(), states.back()}) {
    ASSERT_EQ(s.stability, Stability::Stable);
    const OscillatorState near{1.02 * s.amplitude * std::cos(s.phase), 1.02 * s.amplitude * p.omega0 * std::sin(s.phase)};
    const auto rec = settle_and_demod(p, k, sigma, near, 14.0);
    EXPECT_NEAR(rec.amplitude / s.amplitude, 1.0, 1e-3) << s.amplitude;
    EXPECT_NEAR(wrap_phase(rec.phase - s.phase), 0.0, 5e-3);
  }
}

TEST(Integrate, ForceCurveMatchesLinearDamping) {
  OscillatorParams p = paper_params();
  ForceCurve fc;
  fc.mass = p.mass;
  for (int i = -20; i <= 20; ++i) {
    const double v = 2.0 * i;  // m/s
    fc.velocity.push_back(v);
    fc.force.push_back(0.3e-20 + 2.0 * p.mass * p.mu * v + p.mass * 1e-3 * v * v);
  }
  const VelocityDamping damping(fc);
  EXPECT_NEAR(damping.acceleration(1.0), -2.0 * p.mu - 1e-3, 1e-9);
  // Even part of the table only rectifies; the fundamental response matches.
  const double k = 0.5 * paper_drive(p);
  const double tmax = 6.0 / p.mu;
  const auto drive = DriveSchedule::constant(p.omega0 + 400.0, tmax);
  const auto a = integrate(p, drive, k, 0.0, tmax, {}, {}, 16, &damping);
  const auto b = integrate(p, drive, k, 0.0, tmax, {});
  const auto ra = demodulate(a, drive, 1.0 / p.mu);
  const auto rb = demodulate(b, drive, 1.0 / p.mu);
  ASSERT_EQ(ra.size(), rb.size());
  EXPECT_NEAR(ra.back().amplitude / rb.back().amplitude, 1.0, 1e-3);

  fc.velocity = {-1.0, 0.0, 1.0};
  fc.force = {-1e-24, 0.0, 1e-24};
  const VelocityDamping narrow(fc);
  EXPECT_THROW(
      {
        try {
          integrate(p, drive, k, 0.0, tmax, {}, {}, 16, &narrow);
        } catch (const Error& e) {
          EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
          throw;
        }
      },
      Error);
}

TEST(Integrate, DivergenceIsReported) {
  OscillatorParams p = paper_params();
  p.alpha = -1e22;
  p.mu = 0.0;
  const double tmax = 200 * kTwoPi / p.omega0;
  const auto drive = DriveSchedule::constant(p.omega0, tmax);
  try {
    integrate(p, drive, 0.0, 0.0, tmax, {1e-4, 0.0});
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_TRUE(e.kind() == ErrorKind::NonFinite || e.kind() == ErrorKind::StepFailure) << e.what();
  }
}

TEST(Demodulate, SyntheticSinusoidExact) {
  const double w = 2.0e6;
  const auto drive = DriveSchedule::chirp(w, w * 1.01, w * 50.0);
  const double amp = 3.7e-6;
  const double phi0 = -2.1;
  Trajectory traj;
  traj.samples_per_period = 16;
  const long long n = static_cast<long long>(drive.total_phase() / (kTwoPi / 16));
  for (long long j = 0; j < n; ++j) {
    const double th = j * kTwoPi / 16;
    traj.theta.push_back(th);
    traj.t.push_back(drive.time_at_phase(th));
    traj.x.push_back(amp * std::cos(th - phi0));
    traj.v.push_back(0.0);
  }
  const auto rec = demodulate(traj, drive, 10 * kTwoPi / w);
  ASSERT_GE(rec.size(), 6u);
  for (const auto& r : rec) {
    EXPECT_NEAR(r.amplitude / amp, 1.0, 1e-10);
    EXPECT_NEAR(wrap_phase(r.phase - phi0), 0.0, 1e-10);
    EXPECT_GT(r.phase, -kPi);
    EXPECT_LE(r.phase, kPi);
  }
}

TEST(Demodulate, WindowTooShort) {
  const double w = 1e6;
  const auto drive = DriveSchedule::constant(w, 1e-3);
  const auto traj = integrate(paper_params(), drive, 0.0, 0.0, 1e-3, {1e-6, 0.0});
  try {
    demodulate(traj, drive, 4.0 * kTwoPi / w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::WindowTooShort);
  }
  EXPECT_NO_THROW(demodulate(traj, drive, 5.0 * kTwoPi / w));
}

TEST(Demodulate, ConstantDriveGivesConstantRecords) {
  const OscillatorParams p = paper_params();
  const double k = paper_drive(p);
  const double sigma = 300.0;
  const auto s = swept_branch_state(p, {k, sigma}, true);
  const double tmax = 12.0 / p.mu;
  const auto drive = DriveSchedule::constant(p.omega0 + sigma, tmax);
  const auto traj = integrate(p, drive, k, 0.0, tmax, on_state(p, s));
  const auto rec = demodulate(traj, drive, 1.0 / p.mu);
  ASSERT_GE(rec.size(), 10u);
  for (std::size_t i = 6; i < rec.size(); ++i) {
    EXPECT_NEAR(rec[i].amplitude / rec.back().amplitude, 1.0, 1e-5);
  }
  EXPECT_NEAR(rec.back().amplitude / s.amplitude, 1.0, 5e-3);
}

TEST(JumpDetector, StepAndSmooth) {
  std::vector<DemodRecord> rec(60);
  for (std::size_t i = 0; i < rec.size(); ++i) {
    rec[i].drive_frequency = 100.0 + i;
    rec[i].amplitude = 1.0 + 0.001 * i + (i >= 40 ? -0.6 : 0.0);
  }
  auto jumps = detect_jumps(rec, 5.0, 0.1);
  ASSERT_EQ(jumps.size(), 1u);
  EXPECT_NEAR(jumps[0].frequency, 139.5, 1e-12);
  EXPECT_GT(jumps[0].amplitude_before, jumps[0].amplitude_after);
  for (std::size_t i = 0; i < rec.size(); ++i) rec[i].amplitude = 1.0 + 0.3 * std::sin(0.05 * i);
  EXPECT_TRUE(detect_jumps(rec, 5.0, 0.1).empty());
}

TEST(Sweep, RejectsBadPlan) {
  const OscillatorParams p = paper_params();
  SweepPlan plan;
  plan.freq_start = p.omega0;
  plan.freq_end = p.omega0;
  EXPECT_THROW(run_sweep(p, plan), Error);
  plan.freq_end = p.omega0 + 10.0;
  plan.tol.rel = 0.0;
  EXPECT_THROW(run_sweep(p, plan), Error);
}

TEST(Sweep, FastRateWarns) {
  const OscillatorParams p = paper_params();
  SweepPlan plan;
  plan.freq_start = p.omega0;
  plan.freq_end = p.omega0 + 100.0;
  plan.k = paper_drive(p);
  plan.sweep_rate = 0.5 * p.mu * p.mu;
  const auto res = run_sweep(p, plan);
  EXPECT_FALSE(res.warnings.empty());
}

// Upper and lower jumps bracket the analytic folds within the sweep resolution.
TEST(Sweep, HysteresisAtAnalyticFolds) {
  const OscillatorParams p = paper_params();
  const double k = paper_drive(p);
  const auto jp = jump_points(p, k);
  const double rate = 5e-4 * p.mu * p.mu;
  const double window = 1.0 / p.mu;
  const double band = rate * window + kTwoPi * 1.0;

  SweepPlan up;
  up.k = k;
  up.sweep_rate = rate;
  up.freq_start = p.omega0 + jp.sigma_fold_up - 15.0;
  up.freq_end = p.omega0 + jp.sigma_fold_up + 15.0;
  up.initial = on_state(p, swept_branch_state(p, {k, up.freq_start - p.omega0}, true));
  const auto ru = run_sweep(p, up);
  ASSERT_EQ(ru.jumps.size(), 1u);
  const double su = ru.jumps[0].frequency - p.omega0;
  EXPECT_NEAR(su, jp.sigma_fold_up, band);
  EXPECT_GT(ru.jumps[0].amplitude_before, ru.jumps[0].amplitude_after);

  SweepPlan down = up;
  down.freq_start = p.omega0 + jp.sigma_down + 12.0;
  down.freq_end = p.omega0 + jp.sigma_down - 12.0;
  down.initial = on_state(p, swept_branch_state(p, {k, down.freq_start - p.omega0}, false));
  const auto rd = run_sweep(p, down);
  ASSERT_EQ(rd.jumps.size(), 1u);
  const double sd = rd.jumps[0].frequency - p.omega0;
  EXPECT_NEAR(sd, jp.sigma_down, band);
  EXPECT_LT(rd.jumps[0].amplitude_before, rd.jumps[0].amplitude_after);
  EXPECT_GT(su, sd);
}

TEST(Sweep, BelowThresholdNoJump) {
  const OscillatorParams p = paper_params();
  const auto cusp = bistability_threshold(p);
  SweepPlan plan;
  plan.k = 0.4 * cusp.k_c;
  plan.sweep_rate = 0.01 * p.mu * p.mu;
  plan.freq_start = p.omega0 - p.mu;
  plan.freq_end = p.omega0 + 3.0 * p.mu;
  const auto res = run_sweep(p, plan);
  EXPECT_TRUE(res.jumps.empty());
  // Single-valued response: records follow the unique root after ring-up, up to
  // the lag set by the sweep rate.
  for (std::size_t i = 12; i < res.records.size(); ++i) {
    const auto s = steady_state_amplitudes(p, {plan.k, res.records[i].drive_frequency - p.omega0});
    ASSERT_EQ(s.size(), 1u);
    EXPECT_NEAR(res.records[i].amplitude / s[0].amplitude, 1.0, 0.01);
  }
}

// (gamma = 0, eta) and (gamma = eta / 3 w0^2, 0) give the same demodulated curve.
TEST(Sweep, EtaGammaEquivalence) {
  OscillatorParams pe = paper_params();
  OscillatorParams pg = paper_params();
  pe.eta = 3.0 * paper::kOmega0 * paper::kOmega0 * paper::kGamma;
  pg.gamma = paper::kGamma;
  const double k = paper_drive(pe);
  SweepPlan plan;
  plan.k = k;
  plan.sweep_rate = 0.01 * pe.mu * pe.mu;
  plan.freq_start = pe.omega0 + 200.0;
  plan.freq_end = pe.omega0 + 700.0;
  const auto re = run_sweep(pe, plan);
  const auto rg = run_sweep(pg, plan);
  ASSERT_EQ(re.records.size(), rg.records.size());
  const auto jp = jump_points(pg, k);
  int compared = 0;
  for (std::size_t i = 10; i < re.records.size(); ++i) {
    const double s = re.records[i].drive_frequency - pe.omega0;
    if (std::abs(s - jp.sigma_fold_up) < pe.mu || std::abs(s - jp.sigma_down) < pe.mu) continue;
    EXPECT_NEAR(re.records[i].amplitude / rg.records[i].amplitude, 1.0, 0.01) << s;
    ++compared;
  }
  EXPECT_GT(compared, 25);
}

TEST(Sweep, ToleranceHalvingIsStable) {
  const OscillatorParams p = paper_params();
  SweepPlan plan;
  plan.k = paper_drive(p);
  plan.sweep_rate = 0.02 * p.mu * p.mu;
  plan.freq_start = p.omega0 + 300.0;
  plan.freq_end = p.omega0 + 600.0;
  const auto a = run_sweep(p, plan);
  plan.tol.rel *= 0.5;
  plan.tol.abs *= 0.5;
  const auto b = run_sweep(p, plan);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_NEAR(a.records[i].amplitude / b.records[i].amplitude, 1.0, 1e-4);
  }
}

TEST(Sweep, SteppedModeSettlesOnBranch) {
  const OscillatorParams p = paper_params();
  SweepPlan plan;
  plan.mode = SweepMode::Stepped;
  plan.k = paper_drive(p);
  plan.freq_start = p.omega0 + 200.0;
  plan.freq_end = p.omega0 + 500.0;
  plan.step = 100.0;
  plan.dwell = 12.0 / p.mu;
  const auto res = run_sweep(p, plan);
  ASSERT_EQ(res.records.size(), 4u);
  for (const auto& r : res.records) {
    const auto s = swept_branch_state(p, {plan.k, r.drive_frequency - p.omega0}, true);
    EXPECT_NEAR(r.amplitude / s.amplitude, 1.0, 2e-3);
  }
}
