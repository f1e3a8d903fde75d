#pragma once

// Direct integration of
//   x'' = -2 mu x' - gamma x'^3 - eta x^2 x' - w0^2 x - alpha x^3 + k cos(theta(t))
// with theta' the instantaneous drive frequency, plus a software lock-in and a
// slow frequency-sweep protocol with jump detection.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "iontrap/duffing.hpp"
#include "iontrap/errors.hpp"
#include "iontrap/spline.hpp"
#include "iontrap/units.hpp"

namespace iontrap {

/// Phase-continuous drive made of linear-frequency segments, theta(0) = 0.
class DriveSchedule {
 public:
  struct Segment {
    double t0;      // s
    double theta0;  // rad
    double omega0;  // rad/s at t0
    double rate;    // rad/s^2
    double duration;
  };

  static DriveSchedule constant(double omega, double duration) {
    DriveSchedule d;
    d.push(omega, 0.0, duration);
    return d;
  }

  /// Continuous ramp from w_start to w_end at |rate|.
  static DriveSchedule chirp(double w_start, double w_end, double rate) {
    if (!(std::abs(rate) > 0.0)) {
      throw Error(ErrorKind::ConfigError, "timedomain", "chirp needs a nonzero sweep rate");
    }
    const double r = std::copysign(std::abs(rate), w_end - w_start);
    DriveSchedule d;
    d.push(w_start, r, (w_end - w_start) / r);
    return d;
  }

  /// Constant-frequency steps of `step` rad/s, each held for a whole number of
  /// drive periods closest to `dwell` seconds.
  static DriveSchedule stepped(double w_start, double w_end, double step, double dwell) {
    if (!(std::abs(step) > 0.0) || !(dwell > 0.0)) {
      throw Error(ErrorKind::ConfigError, "timedomain", "stepped sweep needs step > 0 and dwell > 0");
    }
    const double s = std::copysign(std::abs(step), w_end - w_start);
    const int n = static_cast<int>(std::floor((w_end - w_start) / s + 1e-9)) + 1;
    DriveSchedule d;
    for (int i = 0; i < n; ++i) {
      const double w = w_start + i * s;
      const double periods = std::max(1.0, std::round(dwell * w / kTwoPi));
      d.push(w, 0.0, periods * kTwoPi / w);
    }
    return d;
  }

  const std::vector<Segment>& segments() const { return seg_; }
  double duration() const { return seg_.empty() ? 0.0 : seg_.back().t0 + seg_.back().duration; }
  double total_phase() const {
    if (seg_.empty()) return 0.0;
    const auto& s = seg_.back();
    return s.theta0 + s.omega0 * s.duration + 0.5 * s.rate * s.duration * s.duration;
  }

  double frequency(double t) const {
    const Segment& s = find_time(t);
    return s.omega0 + s.rate * (t - s.t0);
  }

  double phase(double t) const {
    const Segment& s = find_time(t);
    const double tau = t - s.t0;
    return s.theta0 + tau * (s.omega0 + 0.5 * s.rate * tau);
  }

  double time_at_phase(double theta) const {
    auto it = std::upper_bound(seg_.begin(), seg_.end(), theta,
                               [](double th, const Segment& s) { return th < s.theta0; });
    const Segment& s = it == seg_.begin() ? seg_.front() : *(it - 1);
    const double dth = theta - s.theta0;
    // Positive root of theta0 + w tau + r tau^2 / 2 = theta, cancellation-free.
    const double disc = std::max(0.0, s.omega0 * s.omega0 + 2.0 * s.rate * dth);
    return s.t0 + 2.0 * dth / (s.omega0 + std::sqrt(disc));
  }

  /// Index of the segment containing t.
  std::size_t segment_index(double t) const { return static_cast<std::size_t>(&find_time(t) - seg_.data()); }

 private:
  void push(double omega, double rate, double duration) {
    if (!(omega > 0.0) || !(duration > 0.0) || !std::isfinite(duration)) {
      throw Error(ErrorKind::ConfigError, "timedomain", "drive frequency and duration must be positive");
    }
    Segment s{duration_or_zero(), total_phase(), omega, rate, duration};
    seg_.push_back(s);
  }
  double duration_or_zero() const { return duration(); }

  const Segment& find_time(double t) const {
    auto it = std::upper_bound(seg_.begin(), seg_.end(), t, [](double tt, const Segment& s) { return tt < s.t0; });
    return it == seg_.begin() ? seg_.front() : *(it - 1);
  }

  std::vector<Segment> seg_;
};

/// Tabulated scattering force F_s(v) used in place of the polynomial damping.
struct ForceCurve {
  std::vector<double> velocity;  // m/s, increasing
  std::vector<double> force;     // N
  double mass = paper::kMass;    // kg
};

/// Acceleration -(F_s(v) - F_s(0)) / m from a spline through a ForceCurve.
/// The constant part only displaces the equilibrium and is dropped; the sign
/// makes dF_s/dv > 0 act as positive damping 2 mu = F_s'(0) / m.
class VelocityDamping {
 public:
  explicit VelocityDamping(const ForceCurve& curve)
      : spline_(curve.velocity, curve.force), mass_(curve.mass), f0_(spline_(0.0)) {
    if (!(curve.mass > 0.0)) throw Error(ErrorKind::ConfigError, "timedomain", "force curve mass must be > 0");
    if (spline_.min_x() > 0.0 || spline_.max_x() < 0.0) {
      throw Error(ErrorKind::ConfigError, "timedomain", "force curve must contain v = 0");
    }
  }

  double acceleration(double v) const {
    if (v < spline_.min_x() || v > spline_.max_x()) {
      throw Error(ErrorKind::ConfigError, "timedomain",
                  "velocity " + std::to_string(v) + " m/s outside the tabulated force curve");
    }
    return -(spline_(v) - f0_) / mass_;
  }

  double max_speed() const { return std::min(-spline_.min_x(), spline_.max_x()); }

 private:
  CubicSpline spline_;
  double mass_;
  double f0_;
};

struct IntegratorTolerance {
  // Applied to the state scaled by (1 um, 1 um * w0).
  double rel = 1e-8;
  double abs = 1e-8;
};

struct Trajectory {
  std::vector<double> t;      // s
  std::vector<double> x;      // m
  std::vector<double> v;      // m/s
  std::vector<double> theta;  // rad, drive phase
  int samples_per_period = 0; // samples are uniform in theta when > 0
};

struct OscillatorState {
  double x = 0.0;
  double v = 0.0;
};

namespace detail {

inline double equation_of_motion(const OscillatorParams& p, const VelocityDamping* damping, double k, double x,
                                 double v, double theta) {
  const double w0 = p.omega0;
  double acc = -w0 * w0 * x - p.alpha * x * x * x - p.eta * x * x * v + k * std::cos(theta);
  if (damping != nullptr) {
    acc += damping->acceleration(v);
  } else {
    acc += -2.0 * p.mu * v - p.gamma * v * v * v;
  }
  return acc;
}

}  // namespace detail

/// Integrates from t0 to t1 and calls observer(t, x, v, theta) on a grid of
/// drive phases spaced 2 pi / samples_per_period (phase origin at theta = 0).
/// Returns the state at t1.
template <typename Observer>
OscillatorState integrate_observed(const OscillatorParams& p, const DriveSchedule& drive, double k, double t0,
                                   double t1, OscillatorState init, const IntegratorTolerance& tol,
                                   int samples_per_period, const VelocityDamping* damping, Observer&& observer) {
  namespace ode = boost::numeric::odeint;
  if (!(tol.rel > 0.0) || !(tol.abs > 0.0)) {
    throw Error(ErrorKind::ConfigError, "timedomain", "integrator tolerances must be > 0");
  }
  if (samples_per_period < 4) throw Error(ErrorKind::ConfigError, "timedomain", "need >= 4 samples per period");
  if (!(t1 > t0)) return init;
  using State = std::array<double, 2>;
  const double len = 1e-6;
  const double w0 = p.omega0;
  const auto rhs = [&](const State& y, State& dy, double t) {
    const double x = y[0] * len;
    const double v = y[1] * len * w0;
    dy[0] = w0 * y[1];
    dy[1] = detail::equation_of_motion(p, damping, k, x, v, drive.phase(t)) / (len * w0);
  };

  const double period = kTwoPi / drive.frequency(t0);
  const double dphase = kTwoPi / samples_per_period;
  auto next_index = static_cast<long long>(std::ceil(drive.phase(t0) / dphase - 1e-12));
  double next_time = drive.time_at_phase(next_index * dphase);

  State y{init.x / len, init.v / (len * w0)};
  auto stepper = ode::make_dense_output(tol.abs, tol.rel, ode::runge_kutta_dopri5<State>());
  stepper.initialize(y, t0, period / 32.0);
  State ys{};
  try {
    while (stepper.current_time() < t1) {
      stepper.do_step(rhs);
      const double tc = std::min(stepper.current_time(), t1);
      while (next_time <= tc) {
        stepper.calc_state(next_time, ys);
        observer(next_time, ys[0] * len, ys[1] * len * w0, next_index * dphase);
        ++next_index;
        next_time = drive.time_at_phase(next_index * dphase);
      }
      const State& yc = stepper.current_state();
      if (!std::isfinite(yc[0]) || !std::isfinite(yc[1]) || std::abs(yc[0]) > 1e12) {
        throw Error(ErrorKind::NonFinite, "timedomain", "state diverged at t = " + std::to_string(tc));
      }
      if (stepper.current_time_step() < 1e-9 * period) {
        throw Error(ErrorKind::StepFailure, "timedomain", "step size underflow at t = " + std::to_string(tc));
      }
    }
  } catch (const ode::step_adjustment_error& e) {
    throw Error(ErrorKind::StepFailure, "timedomain", e.what());
  }
  stepper.calc_state(t1, ys);
  return {ys[0] * len, ys[1] * len * w0};
}

inline Trajectory integrate(const OscillatorParams& p, const DriveSchedule& drive, double k, double t0, double t1,
                            OscillatorState init, const IntegratorTolerance& tol = {}, int samples_per_period = 16,
                            const VelocityDamping* damping = nullptr) {
  p.validate();
  Trajectory traj;
  traj.samples_per_period = samples_per_period;
  integrate_observed(p, drive, k, t0, t1, init, tol, samples_per_period, damping,
                     [&](double t, double x, double v, double th) {
                       traj.t.push_back(t);
                       traj.x.push_back(x);
                       traj.v.push_back(v);
                       traj.theta.push_back(th);
                     });
  return traj;
}

struct DemodRecord {
  double drive_frequency = 0.0;  // rad/s, at the window midpoint
  double amplitude = 0.0;        // m
  double phase = 0.0;            // rad, x = a cos(theta - phase)
  double window = 0.0;           // s
  double t_mid = 0.0;            // s
};

/// Streaming lock-in: accumulates phase-uniform samples and emits one record
/// per block of whole drive periods.
class Demodulator {
 public:
  Demodulator(const DriveSchedule& drive, double window, int samples_per_period)
      : drive_(drive), window_(window), spp_(samples_per_period) {}

  template <typename Sink>
  void push(double t, double x, double theta, Sink&& sink) {
    if (count_ == 0) {
      t_start_ = t;
      const double periods = window_ * drive_.frequency(t) / kTwoPi;
      if (periods < 5.0 - 1e-9) {
        throw Error(ErrorKind::WindowTooShort, "timedomain",
                    "demodulation window spans " + std::to_string(periods) + " periods (< 5)");
      }
      target_ = static_cast<long long>(std::round(periods)) * spp_;
      sum_c_ = sum_s_ = 0.0;
    }
    sum_c_ += x * std::cos(theta);
    sum_s_ += x * std::sin(theta);
    t_last_ = t;
    if (++count_ == target_) {
      const double i_comp = 2.0 * sum_c_ / static_cast<double>(count_);
      const double q_comp = 2.0 * sum_s_ / static_cast<double>(count_);
      DemodRecord r;
      const double dt_sample = (t_last_ - t_start_) / static_cast<double>(count_ - 1);
      r.window = t_last_ - t_start_ + dt_sample;
      r.t_mid = t_start_ + 0.5 * r.window;
      r.drive_frequency = drive_.frequency(r.t_mid);
      r.amplitude = std::hypot(i_comp, q_comp);
      r.phase = std::atan2(q_comp, i_comp);
      count_ = 0;
      sink(r);
    }
  }

  void reset() { count_ = 0; }

 private:
  const DriveSchedule& drive_;
  double window_;
  int spp_;
  long long count_ = 0;
  long long target_ = 0;
  double t_start_ = 0.0, t_last_ = 0.0;
  double sum_c_ = 0.0, sum_s_ = 0.0;
};

/// Consecutive lock-in records over a phase-uniform trajectory.
inline std::vector<DemodRecord> demodulate(const Trajectory& traj, const DriveSchedule& drive, double window) {
  if (traj.samples_per_period <= 0) {
    throw Error(ErrorKind::ConfigError, "timedomain", "trajectory is not sampled uniformly in drive phase");
  }
  std::vector<DemodRecord> out;
  Demodulator dm(drive, window, traj.samples_per_period);
  for (std::size_t i = 0; i < traj.t.size(); ++i) {
    dm.push(traj.t[i], traj.x[i], traj.theta[i], [&](const DemodRecord& r) { out.push_back(r); });
  }
  return out;
}

enum class SweepMode { Chirp, Stepped };

struct SweepPlan {
  double freq_start = 0.0;  // rad/s
  double freq_end = 0.0;    // rad/s
  double sweep_rate = 0.0;  // rad/s^2, chirp mode; 0 selects 0.05 mu^2
  double k = 0.0;           // m/s^2
  SweepMode mode = SweepMode::Chirp;
  double step = 0.0;   // rad/s, stepped mode
  double dwell = 0.0;  // s, stepped mode
  OscillatorState initial{};
  IntegratorTolerance tol{};
  double window = 0.0;  // s; 0 selects 1/mu
  int samples_per_period = 16;
  double jump_threshold = 5.0;     // x local record-to-record variation
  double min_jump_fraction = 0.1;  // net change, of the largest amplitude in the sweep
  std::optional<ForceCurve> force_curve;

  bool positive() const { return freq_end > freq_start; }

  double effective_rate(const OscillatorParams& p) const { return sweep_rate > 0.0 ? sweep_rate : 0.05 * p.mu * p.mu; }
  double effective_window(const OscillatorParams& p) const { return window > 0.0 ? window : 1.0 / p.mu; }

  void validate(const OscillatorParams& p) const {
    const auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigError, "timedomain", m); };
    if (!(freq_start > 0.0) || !(freq_end > 0.0) || freq_start == freq_end) fail("sweep needs distinct positive frequencies");
    if (!(k >= 0.0) || !std::isfinite(k)) fail("drive amplitude must be finite and >= 0");
    if (!(tol.rel > 0.0) || !(tol.abs > 0.0)) fail("tolerances must be > 0");
    if (mode == SweepMode::Stepped && (!(step > 0.0) || !(dwell > 0.0))) fail("stepped sweep needs step and dwell");
    if (window == 0.0 && !(p.mu > 0.0)) fail("default window needs mu > 0");
    if (mode == SweepMode::Chirp && sweep_rate == 0.0 && !(p.mu > 0.0)) fail("default rate needs mu > 0");
  }
};

struct JumpEvent {
  std::size_t record = 0;      // index of the last record before the jump
  double frequency = 0.0;      // rad/s, midpoint between the bracketing records
  double amplitude_before = 0.0;
  double amplitude_after = 0.0;
};

struct SweepResult {
  std::vector<DemodRecord> records;
  std::vector<JumpEvent> jumps;
  bool positive = true;
  std::vector<std::string> warnings;
};

/// Flags record-to-record differences exceeding `threshold` times the median
/// of ten earlier differences (skipping the three most recent, so a transition
/// spread over a few records still stands out). Consecutive flags form one
/// event, kept when its net change exceeds min_fraction of the largest amplitude.
inline std::vector<JumpEvent> detect_jumps(const std::vector<DemodRecord>& rec, double threshold,
                                           double min_fraction) {
  std::vector<JumpEvent> out;
  if (rec.size() < 3) return out;
  double a_max = 0.0;
  for (const auto& r : rec) a_max = std::max(a_max, r.amplitude);
  std::vector<double> diff(rec.size() - 1);
  for (std::size_t i = 0; i + 1 < rec.size(); ++i) diff[i] = rec[i + 1].amplitude - rec[i].amplitude;
  const std::size_t lookback = 10;
  const std::size_t lag = 3;
  const double floor = 1e-9 * a_max;
  std::vector<bool> flag(diff.size(), false);
  for (std::size_t i = 2; i < diff.size(); ++i) {
    const std::size_t hi = i > lag ? i - lag : 1;
    const std::size_t lo = hi > lookback ? hi - lookback : 0;
    std::vector<double> local;
    for (std::size_t j = lo; j < hi; ++j) local.push_back(std::abs(diff[j]));
    std::nth_element(local.begin(), local.begin() + static_cast<long>(local.size() / 2), local.end());
    const double med = std::max(local[local.size() / 2], floor);
    flag[i] = std::abs(diff[i]) > threshold * med;
  }
  for (std::size_t i = 0; i < flag.size();) {
    if (!flag[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < flag.size() && flag[j + 1] && (diff[j + 1] > 0) == (diff[i] > 0)) ++j;
    if (std::abs(rec[j + 1].amplitude - rec[i].amplitude) > min_fraction * a_max) {
      JumpEvent ev;
      ev.record = i;
      ev.frequency = 0.5 * (rec[i].drive_frequency + rec[i + 1].drive_frequency);
      ev.amplitude_before = rec[i].amplitude;
      ev.amplitude_after = rec[j + 1].amplitude;
      out.push_back(ev);
    }
    i = j + 1;
  }
  return out;
}

/// Integrates through the whole sweep with the state carried continuously and
/// demodulates on the fly. Stepped sweeps keep only the last window of each step.
inline SweepResult run_sweep(const OscillatorParams& p, const SweepPlan& plan) {
  p.validate();
  plan.validate(p);
  SweepResult res;
  res.positive = plan.positive();
  const double window = plan.effective_window(p);
  std::optional<VelocityDamping> damping;
  if (plan.force_curve) damping.emplace(*plan.force_curve);
  const VelocityDamping* dptr = damping ? &*damping : nullptr;

  if (plan.mode == SweepMode::Chirp) {
    const double rate = plan.effective_rate(p);
    if (rate > 0.1 * p.mu * p.mu) {
      res.warnings.push_back("sweep rate exceeds 0.1 mu^2; response will lag the quasi-static branch");
    }
    const DriveSchedule drive = DriveSchedule::chirp(plan.freq_start, plan.freq_end, rate);
    Demodulator dm(drive, window, plan.samples_per_period);
    integrate_observed(p, drive, plan.k, 0.0, drive.duration(), plan.initial, plan.tol, plan.samples_per_period,
                       dptr, [&](double t, double x, double, double th) {
                         dm.push(t, x, th, [&](const DemodRecord& r) { res.records.push_back(r); });
                       });
  } else {
    const DriveSchedule drive = DriveSchedule::stepped(plan.freq_start, plan.freq_end, plan.step, plan.dwell);
    OscillatorState state = plan.initial;
    for (std::size_t i = 0; i < drive.segments().size(); ++i) {
      const auto& seg = drive.segments()[i];
      const double periods = std::round(window * seg.omega0 / kTwoPi);
      const double settle_end = seg.t0 + seg.duration - periods * kTwoPi / seg.omega0;
      if (settle_end < seg.t0 - 1e-12) {
        throw Error(ErrorKind::WindowTooShort, "timedomain", "dwell shorter than the demodulation window");
      }
      state = integrate_observed(p, drive, plan.k, seg.t0, std::max(seg.t0, settle_end), state, plan.tol,
                                 plan.samples_per_period, dptr, [](double, double, double, double) {});
      Demodulator dm(drive, periods * kTwoPi / seg.omega0, plan.samples_per_period);
      state = integrate_observed(p, drive, plan.k, std::max(seg.t0, settle_end), seg.t0 + seg.duration, state,
                                 plan.tol, plan.samples_per_period, dptr, [&](double t, double x, double, double th) {
                                   dm.push(t, x, th, [&](const DemodRecord& r) { res.records.push_back(r); });
                                 });
    }
  }
  res.jumps = detect_jumps(res.records, plan.jump_threshold, plan.min_jump_fraction);
  return res;
}

}  // namespace iontrap
