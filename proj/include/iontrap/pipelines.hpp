#pragma once

// Subcommand bodies: configuration in, rendered CSV files and a text summary
// out. Nothing here touches the filesystem except reading declared inputs, so
// runs can be compared byte for byte.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iontrap/atomphysics.hpp"
#include "iontrap/duffing.hpp"
#include "iontrap/estimation.hpp"
#include "iontrap/io.hpp"
#include "iontrap/observables.hpp"
#include "iontrap/timedomain.hpp"

namespace iontrap::cli {

struct RunContext {
  io::Config config;
  std::filesystem::path out_dir = ".";
};

struct RunOutput {
  std::vector<std::pair<std::string, std::string>> files;  // name, content
  std::string summary;

  const std::string& file(std::string_view name) const {
    for (const auto& [n, c] : files) {
      if (n == name) return c;
    }
    throw Error(ErrorKind::IoError, "cli-io", "no output named " + std::string(name));
  }
};

inline OscillatorParams oscillator_from(const io::Config& c) {
  OscillatorParams p;
  p.omega0 = c.real("omega0");
  p.mu = c.real("mu");
  p.alpha = c.real("alpha");
  p.gamma = c.real("gamma");
  p.eta = c.real("eta");
  p.mass = c.real("mass");
  p.validate();
  return p;
}

/// k as configured, or the drive whose response peak is drive_am.
inline double drive_from(const io::Config& c, const OscillatorParams& p) {
  const double k = c.real("k");
  if (k > 0.0) return k;
  if (k < 0.0) throw Error(ErrorKind::ConfigError, "cli-io", "k must be >= 0");
  const double a = c.real("drive_am");
  if (!(a > 0.0)) throw Error(ErrorKind::ConfigError, "cli-io", "drive_am must be > 0 when k = 0");
  return 2.0 * p.omega0 * a * (p.mu + 0.375 * effective_gamma(p) * p.omega0 * p.omega0 * a * a);
}

inline AtomConfig atom_from(const io::Config& c) {
  AtomConfig a;
  a.linewidth = c.real("linewidth");
  a.branching = c.real("branching");
  a.b_field = c.real("b_field");
  a.mass = c.real("mass");
  a.g_s = c.real("g_s");
  a.g_p = c.real("g_p");
  a.g_d = c.real("g_d");
  a.validate();
  return a;
}

inline LaserConfig lasers_from(const io::Config& c) {
  LaserConfig l;
  const auto beam = [&](const std::string& n, BeamConfig& b) {
    b.detuning = c.real(n + "_detuning");
    b.saturation = c.real(n + "_saturation");
    b.wavelength = c.real(n + "_wavelength");
    b.wavevector = c.real(n + "_projection") * kTwoPi / b.wavelength;
    b.polarization = Polarization::linear(c.real(n + "_polarization_angle"));
  };
  beam("cooling", l.cooling);
  beam("repump", l.repump);
  l.validate();
  return l;
}

inline std::uint64_t require_seed(const io::Config& c, std::string_view what) {
  if (!c.has("seed")) {
    throw Error(ErrorKind::ConfigError, "cli-io", std::string(what) + " is stochastic; pass --seed or set seed");
  }
  return static_cast<std::uint64_t>(c.integer("seed"));
}

inline unsigned threads_from(const io::Config& c) {
  const long long t = c.integer("threads");
  if (t < 1) throw Error(ErrorKind::ConfigError, "cli-io", "threads must be >= 1");
  return static_cast<unsigned>(t);
}

inline std::string fmt(double v) { return io::format_double(v); }

/// Steady-state branches on a detuning grid that includes the folds.
inline RunOutput run_steady(const RunContext& ctx) {
  const auto& c = ctx.config;
  const OscillatorParams p = oscillator_from(c);
  const double k = drive_from(c, p);
  const double s0 = c.real("sigma_start"), s1 = c.real("sigma_end");
  const long long n = c.integer("steady_points");
  if (n < 2 || !(s1 > s0)) throw Error(ErrorKind::ConfigError, "cli-io", "steady needs sigma_end > sigma_start, >= 2 points");
  std::vector<double> grid;
  for (long long i = 0; i < n; ++i) grid.push_back(s0 + (s1 - s0) * static_cast<double>(i) / static_cast<double>(n - 1));
  io::Table t;
  t.schema = "iontrap-steady/1";
  t.add_meta("k_m_per_s2", k);
  t.add_meta("omega0_hz", rad_to_hz(p.omega0));
  std::optional<JumpPoints> jp;
  if (p.alpha != 0.0) {
    try {
      jp = jump_points(p, k);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoBistability) throw;
    }
  }
  if (jp) {
    for (double s : {jp->sigma_fold_up, jp->sigma_down, jp->sigma_up}) {
      if (s > s0 && s < s1) grid.push_back(s);
    }
    std::sort(grid.begin(), grid.end());
    t.add_meta("sigma_peak_hz", rad_to_hz(jp->sigma_up));
    t.add_meta("a_peak_m", jp->a_up);
    t.add_meta("sigma_fold_up_hz", rad_to_hz(jp->sigma_fold_up));
    t.add_meta("a_fold_up_m", jp->a_fold_up);
    t.add_meta("sigma_fold_down_hz", rad_to_hz(jp->sigma_down));
    t.add_meta("a_fold_down_m", jp->a_down);
  } else {
    t.add_meta("bistable", "false");
  }
  t.columns = {{"drive_freq_hz", "Hz", "drive frequency"},
               {"sigma_hz", "Hz", "detuning from omega0"},
               {"amplitude_m", "m", "steady-state amplitude"},
               {"phase_rad", "rad", "phase lag, x = a cos(wt - phase)"},
               {"stable", "", "1 stable, 0 unstable; fold states are marginal and flagged 1"},
               {"root_index", "", "0 = smallest amplitude"},
               {"n_roots", "", "steady states at this detuning"},
               {"responsivity", "", "2 mu omega0 a / k"}};
  for (double s : grid) {
    auto states = steady_state_amplitudes(p, {k, s});
    // At a fold the double root is numerically fragile; use the fold state itself.
    if (jp && (s == jp->sigma_fold_up || s == jp->sigma_down)) {
      const double af = s == jp->sigma_fold_up ? jp->a_fold_up : jp->a_down;
      std::erase_if(states, [&](const SteadyState& st) { return std::abs(st.amplitude / af - 1.0) < 1e-3; });
      states.push_back({af, steady_state_phase(p, {k, s}, af), Stability::Stable});
      std::sort(states.begin(), states.end(), [](const auto& x, const auto& y) { return x.amplitude < y.amplitude; });
    }
    for (std::size_t i = 0; i < states.size(); ++i) {
      const auto& st = states[i];
      t.add_row({rad_to_hz(p.omega0 + s), rad_to_hz(s), st.amplitude, st.phase,
                 st.stability == Stability::Stable ? 1.0 : 0.0, static_cast<double>(i),
                 static_cast<double>(states.size()), 2.0 * p.mu * p.omega0 * st.amplitude / k});
    }
  }
  RunOutput out;
  out.files.emplace_back("steady.csv", t.render());
  std::ostringstream s;
  s << "steady: " << t.rows.size() << " states over " << grid.size() << " detunings, k = " << fmt(k) << " m/s^2\n";
  if (jp) {
    s << "  peak a_m = " << fmt(jp->a_up) << " m at sigma_m/2pi = " << fmt(rad_to_hz(jp->sigma_up)) << " Hz\n";
    s << "  upper fold sigma/2pi = " << fmt(rad_to_hz(jp->sigma_fold_up)) << " Hz, lower fold sigma/2pi = "
      << fmt(rad_to_hz(jp->sigma_down)) << " Hz\n";
  }
  out.summary = s.str();
  return out;
}

inline ForceCurve read_force_curve(const std::filesystem::path& path, double mass) {
  const auto t = io::parse_table(io::read_file(path), "iontrap-force-curve/1");
  ForceCurve fc;
  fc.mass = mass;
  const auto cv = t.column("v_m_per_s"), cf = t.column("force_n");
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    fc.velocity.push_back(t.number(i, cv));
    fc.force.push_back(t.number(i, cf));
  }
  return fc;
}

inline std::filesystem::path resolve_input(const RunContext& ctx, const std::string& name) {
  const std::filesystem::path p(name);
  return p.is_absolute() ? p : ctx.out_dir / p;
}

/// Hysteretic sweeps; branch_flag is +1 for records of a positive sweep and
/// -1 for a negative one, jump_flag marks the last record before a jump.
inline RunOutput run_sweep_cmd(const RunContext& ctx) {
  const auto& c = ctx.config;
  const OscillatorParams p = oscillator_from(c);
  const double k = drive_from(c, p);
  const std::string dir = c.text("sweep_direction");
  if (dir != "up" && dir != "down" && dir != "both") {
    throw Error(ErrorKind::ConfigError, "cli-io", "sweep_direction must be up, down or both");
  }
  const std::string mode = c.text("sweep_mode");
  if (mode != "chirp" && mode != "stepped") throw Error(ErrorKind::ConfigError, "cli-io", "sweep_mode must be chirp or stepped");
  const double noise = c.real("amplitude_noise");
  if (noise < 0.0) throw Error(ErrorKind::ConfigError, "cli-io", "amplitude_noise must be >= 0");
  std::optional<std::mt19937_64> rng;
  if (noise > 0.0) rng.emplace(require_seed(c, "sweep with amplitude_noise"));

  SweepPlan base;
  base.k = k;
  base.sweep_rate = c.real("sweep_rate");
  base.mode = mode == "chirp" ? SweepMode::Chirp : SweepMode::Stepped;
  base.step = c.real("sweep_step");
  base.dwell = c.real("sweep_dwell");
  base.window = c.real("demod_window");
  base.samples_per_period = static_cast<int>(c.integer("samples_per_period"));
  base.tol.rel = c.real("tol_rel");
  base.tol.abs = c.real("tol_abs");
  base.jump_threshold = c.real("jump_threshold");
  base.min_jump_fraction = c.real("jump_min_fraction");
  if (const std::string f = c.text("force_curve_file"); !f.empty()) {
    base.force_curve = read_force_curve(resolve_input(ctx, f), p.mass);
  }
  const double lo = p.omega0 + c.real("sigma_start"), hi = p.omega0 + c.real("sigma_end");

  io::Table t;
  t.schema = "iontrap-sweep/1";
  t.add_meta("k_m_per_s2", k);
  t.add_meta("omega0_hz", rad_to_hz(p.omega0));
  t.add_meta("sweep_rate_hz_per_s", rad_to_hz(base.effective_rate(p)));
  t.add_meta("demod_window_s", base.effective_window(p));
  t.columns = {{"drive_freq_hz", "Hz", "drive frequency at the window midpoint"},
               {"amplitude_m", "m", "demodulated amplitude"},
               {"phase_rad", "rad", "demodulated phase, x = a cos(theta - phase)"},
               {"branch_flag", "", "+1 positive sweep, -1 negative sweep"},
               {"jump_flag", "", "1 on the last record before a detected jump"}};
  std::ostringstream s;
  std::vector<bool> dirs;
  if (dir != "down") dirs.push_back(true);
  if (dir != "up") dirs.push_back(false);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (bool up : dirs) {
    SweepPlan plan = base;
    plan.freq_start = up ? lo : hi;
    plan.freq_end = up ? hi : lo;
    if (c.boolean("start_on_branch")) {
      const auto st = swept_branch_state(p, {k, plan.freq_start - p.omega0}, up);
      plan.initial = {st.amplitude * std::cos(st.phase), st.amplitude * p.omega0 * std::sin(st.phase)};
    }
    const auto res = run_sweep(p, plan);
    std::vector<bool> jump(res.records.size(), false);
    for (const auto& j : res.jumps) jump[j.record] = true;
    for (std::size_t i = 0; i < res.records.size(); ++i) {
      const auto& r = res.records[i];
      const double a = rng ? r.amplitude * (1.0 + noise * n01(*rng)) : r.amplitude;
      t.add_row({rad_to_hz(r.drive_frequency), a, r.phase, up ? 1.0 : -1.0, jump[i] ? 1.0 : 0.0});
    }
    s << "sweep " << (up ? "up" : "down") << ": " << res.records.size() << " records";
    for (const auto& j : res.jumps) {
      s << ", jump at " << fmt(rad_to_hz(j.frequency - p.omega0)) << " Hz detuning (" << fmt(j.amplitude_before)
        << " -> " << fmt(j.amplitude_after) << " m)";
    }
    s << '\n';
    for (const auto& w : res.warnings) s << "  warning: " << w << '\n';
  }
  RunOutput out;
  out.files.emplace_back("sweep.csv", t.render());
  out.summary = s.str();
  return out;
}

inline io::Table damping_table() {
  io::Table t;
  t.schema = "iontrap-damping/1";
  t.columns = {{"delta_c_hz", "Hz", "cooling detuning"},
               {"mu_hz", "Hz", "mu / 2pi"},
               {"gamma_si", "s/m^2", "cubic damping coefficient"},
               {"mu_err", "Hz", "Richardson error of mu / 2pi"},
               {"gamma_err", "s/m^2", "Richardson error of gamma"}};
  return t;
}

inline RunOutput run_bloch_scan(const RunContext& ctx) {
  const auto& c = ctx.config;
  const AtomConfig atom = atom_from(c);
  const LaserConfig lasers = lasers_from(c);
  const long long n = c.integer("scan_points");
  const double d0 = c.real("scan_start"), d1 = c.real("scan_end");
  if (n < 1) throw Error(ErrorKind::ConfigError, "cli-io", "scan_points must be >= 1");
  std::vector<double> grid;
  for (long long i = 0; i < n; ++i) grid.push_back(n == 1 ? d0 : d0 + (d1 - d0) * static_cast<double>(i) / static_cast<double>(n - 1));
  const auto scan = detuning_scan(atom, lasers, grid, threads_from(c));
  io::Table t = damping_table();
  t.add_meta("repump_detuning_hz", rad_to_hz(lasers.repump.detuning));
  int failed = 0;
  for (const auto& pt : scan) {
    if (pt.ok) {
      t.add_row({rad_to_hz(pt.delta_c), rad_to_hz(pt.coeff.mu), pt.coeff.gamma, rad_to_hz(pt.coeff.mu_err),
                 pt.coeff.gamma_err});
    } else {
      ++failed;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      t.add_row({rad_to_hz(pt.delta_c), nan, nan, nan, nan});
      t.add_meta("failed_" + fmt(rad_to_hz(pt.delta_c)), pt.error);
    }
  }
  RunOutput out;
  out.files.emplace_back("bloch_scan.csv", t.render());
  out.summary = "bloch-scan: " + std::to_string(scan.size()) + " detunings, " + std::to_string(failed) + " failed\n";
  return out;
}

inline RunOutput run_damping(const RunContext& ctx) {
  const auto& c = ctx.config;
  const AtomConfig atom = atom_from(c);
  const LaserConfig lasers = lasers_from(c);
  const auto d = damping_coefficients(atom, lasers);
  io::Table t = damping_table();
  t.add_row({rad_to_hz(lasers.cooling.detuning), rad_to_hz(d.mu), d.gamma, rad_to_hz(d.mu_err), d.gamma_err});
  std::ostringstream s;
  s << "damping at delta_c/2pi = " << fmt(rad_to_hz(lasers.cooling.detuning)) << " Hz\n"
    << "  mu/2pi = " << fmt(rad_to_hz(d.mu)) << " +- " << fmt(rad_to_hz(d.mu_err)) << " Hz\n"
    << "  gamma = " << fmt(d.gamma) << " +- " << fmt(d.gamma_err) << " s/m^2 (omega0^2 gamma/2pi = "
    << fmt(c.real("omega0") * c.real("omega0") * d.gamma / kTwoPi * 1e-12) << " um^-2 Hz)\n";
  RunOutput out;
  out.files.emplace_back("damping.csv", t.render());
  out.summary = s.str();
  return out;
}

inline RunOutput run_force_curve(const RunContext& ctx) {
  const auto& c = ctx.config;
  const AtomConfig atom = atom_from(c);
  const LaserConfig lasers = lasers_from(c);
  const auto fc = force_curve(atom, lasers, c.real("force_v_max"), static_cast<int>(c.integer("force_points")));
  io::Table t;
  t.schema = "iontrap-force-curve/1";
  t.add_meta("mass_kg", fc.mass);
  t.columns = {{"v_m_per_s", "m/s", "ion velocity"}, {"force_n", "N", "scattering force along the motion axis"}};
  for (std::size_t i = 0; i < fc.velocity.size(); ++i) t.add_row({fc.velocity[i], fc.force[i]});
  RunOutput out;
  out.files.emplace_back("force_curve.csv", t.render());
  out.summary = "force-curve: " + std::to_string(fc.velocity.size()) + " points over +-" + fmt(c.real("force_v_max")) + " m/s\n";
  return out;
}

/// Camera profile with noise plus its amplitude fit, and a photon-phase
/// histogram plus its phase fit.
inline RunOutput run_observe(const RunContext& ctx) {
  const auto& c = ctx.config;
  const std::uint64_t seed = require_seed(c, "observe");
  const OscillatorParams p = oscillator_from(c);
  const double a = c.real("observe_amplitude"), psf = c.real("psf"), center = c.real("observe_center");
  const double noise = c.real("image_noise");
  if (a < 0.0 || noise < 0.0) throw Error(ErrorKind::ConfigError, "cli-io", "observe_amplitude and image_noise must be >= 0");
  const auto grid = profile_grid(a, psf, c.real("points_per_psf"), c.real("profile_margin"), center);
  const auto clean = position_distribution(a, psf, grid, center);
  ImageProfile img = clean;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double peak = *std::max_element(clean.intensity.begin(), clean.intensity.end());
  double sum = 0.0;
  for (double& v : img.intensity) {
    v += noise * peak * n01(rng);
    sum += v;
  }
  for (double& v : img.intensity) v /= sum;
  const auto af = fit_amplitude(img);
  std::vector<double> model;
  detail::orbit_density(af.amplitude, af.psf, af.center, img.x, model);
  double msum = 0.0;
  for (double v : model) msum += v;

  io::Table prof;
  prof.schema = "iontrap-profile/1";
  prof.add_meta("psf_m", psf);
  prof.columns = {{"x_m", "m", "pixel position"},
                  {"intensity", "", "image, unit sum"},
                  {"model", "", "fitted profile, unit sum"}};
  for (std::size_t i = 0; i < img.x.size(); ++i) prof.add_row({img.x[i], img.intensity[i], model[i] / msum});

  const AtomConfig atom = atom_from(c);
  const LaserConfig lasers = lasers_from(c);
  double vmax = c.real("rate_v_max");
  if (vmax == 0.0) vmax = 1.25 * a * p.omega0 + 1.0;
  const auto rate = doppler_rate_model(atom, lasers, vmax, 201, c.real("detection_efficiency"));
  const Motion motion{a, c.real("observe_phase"), p.omega0};
  const auto hist = photon_phase_histogram(rate, motion, c.real("photon_duration"),
                                           static_cast<int>(c.integer("phase_bins")), seed + 1);
  io::Table h;
  h.schema = "iontrap-phase-histogram/1";
  h.add_meta("duration_s", hist.duration);
  h.columns = {{"phase_bin_center_rad", "rad", "drive phase at bin center"}, {"counts", "", "photons"}};
  for (std::size_t i = 0; i < hist.bins(); ++i) h.add_row({hist.center(i), static_cast<double>(hist.counts[i])});

  io::Table r;
  r.schema = "iontrap-observe-fit/1";
  r.columns = {{"quantity", "", ""}, {"value", "", "SI units"}, {"error", "", "standard error"}};
  r.add_row({"amplitude_m", fmt(af.amplitude), fmt(af.amplitude_err)});
  r.add_row({"psf_m", fmt(af.psf), fmt(af.psf_err)});
  r.add_row({"center_m", fmt(af.center), fmt(af.center_err)});
  r.add_row({"amplitude_resolved", af.resolved ? "1" : "0", "0"});
  std::ostringstream s;
  s << "observe: fitted amplitude " << fmt(af.amplitude) << " +- " << fmt(af.amplitude_err) << " m (true " << fmt(a)
    << ")" << (af.resolved ? "" : ", below the resolution floor") << '\n';
  s << "  photons: " << hist.total();
  try {
    const auto pf = fit_phase(hist);
    r.add_row({"photon_phase_rad", fmt(pf.phase), fmt(pf.err)});
    r.add_row({"photon_contrast", fmt(pf.contrast), "nan"});
    s << ", phase " << fmt(pf.phase) << " +- " << fmt(pf.err) << " rad, contrast " << fmt(pf.contrast);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::InsufficientCounts) throw;
    s << ", too few for a phase fit";
  }
  s << '\n';
  RunOutput out;
  out.files.emplace_back("profile.csv", prof.render());
  out.files.emplace_back("histogram.csv", h.render());
  out.files.emplace_back("observe_fit.csv", r.render());
  out.summary = s.str();
  return out;
}

/// Sweep CSV to a fit dataset, dropping records around each detected jump
/// where the demodulated amplitude lags the steady state.
inline SweepDataset dataset_from_sweep(const io::Table& t, double rel_err, long long before, long long after) {
  if (!(rel_err > 0.0)) throw Error(ErrorKind::ConfigError, "cli-io", "fit_rel_err must be > 0");
  const auto cf = t.column("drive_freq_hz"), ca = t.column("amplitude_m"), cb = t.column("branch_flag"),
             cj = t.column("jump_flag");
  const std::size_t n = t.rows.size();
  std::vector<bool> keep(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    if (t.number(i, cj) == 0.0) continue;
    const double flag = t.number(i, cb);
    for (long long d = -before; d <= after; ++d) {
      const long long j = static_cast<long long>(i) + d;
      if (j >= 0 && j < static_cast<long long>(n) && t.number(static_cast<std::size_t>(j), cb) == flag) {
        keep[static_cast<std::size_t>(j)] = false;
      }
    }
  }
  SweepDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    const double a = t.number(i, ca);
    const double b = t.number(i, cb);
    d.samples.push_back({hz_to_rad(t.number(i, cf)), a, rel_err * a,
                         b > 0 ? SweepDirection::Positive : (b < 0 ? SweepDirection::Negative : SweepDirection::Unknown)});
  }
  return d;
}

inline FreeParameters parse_free(const std::string& list) {
  FreeParameters f;
  f.mu = f.alpha = false;
  std::istringstream in(list);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    tok = io::trim(tok);
    if (tok == "omega0") f.omega0 = true;
    else if (tok == "mu") f.mu = true;
    else if (tok == "alpha") f.alpha = true;
    else if (tok == "gamma") f.gamma = true;
    else if (tok == "k") f.k = true;
    else if (tok == "offset") f.offset = true;
    else if (!tok.empty()) throw Error(ErrorKind::ConfigError, "cli-io", "unknown fit parameter '" + tok + "'");
  }
  return f;
}

inline RunOutput run_fit(const RunContext& ctx) {
  const auto& c = ctx.config;
  const OscillatorParams p = oscillator_from(c);
  const auto table = io::parse_table(io::read_file(resolve_input(ctx, c.text("fit_input"))), "iontrap-sweep/1");
  // The sweep records its drive; an explicit k overrides it.
  double k = c.real("k");
  if (k == 0.0) {
    const auto meta = table.meta("k_m_per_s2");
    const auto parsed = meta ? io::parse_double(*meta) : std::nullopt;
    k = parsed ? *parsed : drive_from(c, p);
  }
  if (!(k > 0.0)) throw Error(ErrorKind::ConfigError, "cli-io", "fit needs k > 0");
  // Slow passage carries the response past each fold by ~2.3 (mu^2/rate)^(1/3) records.
  long long before = c.integer("fit_exclude_before");
  if (before < 0) {
    const auto meta = table.meta("sweep_rate_hz_per_s");
    const auto rate = meta ? io::parse_double(*meta) : std::nullopt;
    if (!rate || !(*rate > 0.0)) throw Error(ErrorKind::IoError, "cli-io", "sweep CSV lacks sweep_rate_hz_per_s");
    before = static_cast<long long>(std::ceil(3.0 * std::cbrt(p.mu * p.mu / hz_to_rad(*rate)))) + 2;
  }
  const auto data = dataset_from_sweep(table, c.real("fit_rel_err"), before, c.integer("fit_exclude_after"));
  ResponseGuess guess;
  guess.params = p;
  guess.k = k;
  ResponseFitOptions opt;
  opt.free = parse_free(c.text("fit_free"));
  opt.starts = static_cast<int>(c.integer("fit_starts"));
  opt.threads = threads_from(c);
  const auto fit = fit_response_curve(data, guess, opt);

  io::Table r;
  r.schema = "iontrap-fit-report/1";
  r.add_meta("samples", static_cast<double>(data.samples.size()));
  r.add_meta("chi2", fit.chi2);
  r.add_meta("dof", static_cast<double>(fit.dof));
  r.add_meta("converged", fit.converged ? "true" : "false");
  r.columns = {{"parameter", "", ""}, {"value", "", "SI units, angular frequencies in rad/s"}, {"error", "", "standard error"}, {"unit", "", ""}};
  const auto unit = [](const std::string& n) -> std::string {
    if (n == "omega0" || n == "mu" || n == "offset") return "rad/s";
    if (n == "alpha") return "1/(m^2 s^2)";
    if (n == "gamma") return "s/m^2";
    return "m/s^2";
  };
  std::ostringstream s;
  s << "fit: " << data.samples.size() << " samples, chi2/dof = " << fmt(fit.reduced_chi2()) << '\n';
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    const auto& n = fit.names[i];
    r.add_row({n, fmt(fit.values[i]), fmt(fit.errors[i]), unit(n)});
    s << "  " << n << " = " << fmt(fit.values[i]) << " +- " << fmt(fit.errors[i]) << ' ' << unit(n);
    if (unit(n) == "rad/s") s << "  (" << fmt(rad_to_hz(fit.values[i])) << " +- " << fmt(rad_to_hz(fit.errors[i])) << " Hz)";
    if (n == "alpha") s << "  (" << fmt(fit.values[i] / (kTwoPi * kTwoPi)) << " Hz^2/m^2)";
    s << '\n';
  }
  RunOutput out;
  out.files.emplace_back("fit_report.csv", r.render());
  out.summary = s.str();
  return out;
}

inline bool is_pipeline(std::string_view name) {
  return name == "steady" || name == "sweep" || name == "bloch-scan" || name == "damping" || name == "force-curve" ||
         name == "observe" || name == "fit";
}

/// Runs one pipeline subcommand; the resolved configuration is always the
/// first output so every run can be repeated from its echo.
inline RunOutput run_pipeline(std::string_view name, const RunContext& ctx) {
  RunOutput out;
  if (name == "steady") out = run_steady(ctx);
  else if (name == "sweep") out = run_sweep_cmd(ctx);
  else if (name == "bloch-scan") out = run_bloch_scan(ctx);
  else if (name == "damping") out = run_damping(ctx);
  else if (name == "force-curve") out = run_force_curve(ctx);
  else if (name == "observe") out = run_observe(ctx);
  else if (name == "fit") out = run_fit(ctx);
  else throw Error(ErrorKind::ConfigError, "cli-io", "unknown subcommand '" + std::string(name) + "'");
  out.files.insert(out.files.begin(), {std::string(name) + ".config", ctx.config.echo()});
  return out;
}

}  // namespace iontrap::cli
