#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "iontrap/estimation.hpp"
#include "iontrap/timedomain.hpp"

using namespace iontrap;

namespace {

OscillatorParams paper_params(double gamma = 0.0) {
  OscillatorParams p;
  p.omega0 = paper::kOmega0;
  p.mu = paper::kMu;
  p.alpha = paper::kAlpha;
  p.gamma = gamma;
  return p;
}

// Truth inside three standard errors, with a finite error.
bool covers(const FitResult& f, const std::string& name, double truth) {
  return std::isfinite(f.error(name)) && std::abs(f.value(name) - truth) <= 3.0 * f.error(name);
}

double linear_drive(const OscillatorParams& p) { return 2.0 * p.mu * p.omega0; }

// Jump geometry straight from the closed forms, independent of the fold finder.
std::vector<JumpPair> formula_pairs(const OscillatorParams& p, const std::vector<double>& a_m) {
  std::vector<JumpPair> out;
  for (double a : a_m) out.push_back({3.0 * p.alpha * a * a / (8.0 * p.omega0), a, 0.0});
  return out;
}

std::vector<double> k_ladder(const OscillatorParams& p, int n, double lo, double hi) {
  std::vector<double> k;
  for (int i = 0; i < n; ++i) k.push_back(linear_drive(p) * lo * std::pow(hi / lo, i / double(n - 1)));
  return k;
}

// Forward model for a_m(k) by bisection on the fold law.
double fold_amplitude(const OscillatorParams& p, double k) {
  const double w0 = p.omega0;
  const auto f = [&](double a) { return 2.0 * w0 * p.mu * a + 0.75 * p.gamma * w0 * w0 * w0 * a * a * a - k; };
  double lo = 0.0, hi = k / (2.0 * w0 * p.mu);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) > 0.0 ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

// Two-direction sweep data on a uniform grid around the resonance.
SweepDataset analytic_dataset(const OscillatorParams& p, double k, double lo, double hi, int n, double rel_err) {
  SweepDataset d;
  d.k = k;
  for (int dir = 0; dir < 2; ++dir) {
    for (int i = 0; i < n; ++i) {
      const double s = lo + (hi - lo) * i / (n - 1);
      const bool up = dir == 0;
      const double a = swept_branch_state(p, {k, s}, up).amplitude;
      d.samples.push_back({p.omega0 + s, a, rel_err * a, up ? SweepDirection::Positive : SweepDirection::Negative});
    }
  }
  return d;
}

SweepDataset with_noise(SweepDataset d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& s : d.samples) s.amplitude += s.amplitude_err * n01(rng);
  return d;
}

ResponseGuess guess_from(const OscillatorParams& p, double k) {
  ResponseGuess g;
  g.params = p;
  g.k = k;
  return g;
}

}  // namespace

TEST(FitAlpha, NoiselessRecovery) {
  const OscillatorParams p = paper_params();
  const auto pairs = formula_pairs(p, {2e-6, 4e-6, 7e-6, 11e-6, 16e-6});
  const auto fit = fit_alpha(pairs, p.omega0);
  EXPECT_NEAR(fit.value("alpha") / p.alpha, 1.0, 1e-10);
  EXPECT_TRUE(fit.converged);
}

TEST(FitAlpha, SinglePairExactWithInfiniteError) {
  const OscillatorParams p = paper_params();
  const auto fit = fit_alpha(formula_pairs(p, {5e-6}), p.omega0);
  EXPECT_NEAR(fit.value("alpha") / p.alpha, 1.0, 1e-12);
  EXPECT_TRUE(std::isinf(fit.error("alpha")));
}

TEST(FitAlpha, EqualSigmaIsDegenerate) {
  const OscillatorParams p = paper_params();
  auto pairs = formula_pairs(p, {5e-6, 5e-6, 5e-6});
  try {
    fit_alpha(pairs, p.omega0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateData);
  }
  pairs[0].sigma = -1.0;
  EXPECT_THROW(fit_alpha(pairs, p.omega0), Error);
}

// 2% amplitude noise on 8 pairs gives the +-0.03e18 precision scale.
TEST(FitAlpha, MonteCarloPrecision) {
  const OscillatorParams p = paper_params();
  const auto clean = formula_pairs(p, {3e-6, 5e-6, 7e-6, 9e-6, 11e-6, 13e-6, 15e-6, 17e-6});
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double band = 0.03 * 4.0 * kPi * kPi * 1e18;
  int within = 0, covered = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    auto pairs = clean;
    for (auto& q : pairs) {
      q.amplitude *= 1.0 + 0.02 * n01(rng);
      q.amplitude_err = 0.02 * q.amplitude;
    }
    const auto fit = fit_alpha(pairs, p.omega0);
    within += std::abs(fit.value("alpha") - p.alpha) <= band;
    covered += covers(fit, "alpha", p.alpha);
  }
  EXPECT_GE(within, 2 * trials / 3);
  EXPECT_GE(covered, 190);
}

TEST(FitAlpha, ClosedLoopOnJumpPoints) {
  for (double g : {0.0, paper::kGamma}) {
    const OscillatorParams p = paper_params(g);
    std::vector<JumpPair> pairs;
    for (double k : k_ladder(p, 6, 12e-6, 40e-6)) {
      const auto jp = jump_points(p, k);
      pairs.push_back({jp.sigma_up, jp.a_up, 0.0});
    }
    EXPECT_NEAR(fit_alpha(pairs, p.omega0).value("alpha") / p.alpha, 1.0, 1e-6);
  }
}

TEST(FitAlpha, HzInputsMapByTwoPi) {
  const OscillatorParams p = paper_params();
  auto pairs = formula_pairs(p, {3e-6, 6e-6, 9e-6, 14e-6});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& q : pairs) q.amplitude *= 1.0 + 0.01 * n01(rng);
  auto hz = pairs;
  for (auto& q : hz) q.sigma = rad_to_hz(q.sigma);
  const auto fr = fit_alpha(pairs, p.omega0);
  const auto fh = fit_alpha(hz, rad_to_hz(p.omega0));
  EXPECT_NEAR(fh.value("alpha") * kTwoPi * kTwoPi / fr.value("alpha"), 1.0, 1e-12);
  EXPECT_NEAR(fh.error("alpha") * kTwoPi * kTwoPi / fr.error("alpha"), 1.0, 1e-9);
}

TEST(FitAlpha, ErrorsShrinkAsRootN) {
  const OscillatorParams p = paper_params();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> ua(3e-6, 15e-6);
  const auto spread = [&](int n) {
    std::vector<double> est;
    double mean_err = 0.0;
    for (int t = 0; t < 100; ++t) {
      std::vector<double> a(static_cast<std::size_t>(n));
      for (auto& x : a) x = ua(rng);
      auto pairs = formula_pairs(p, a);
      for (auto& q : pairs) {
        q.amplitude *= 1.0 + 0.02 * n01(rng);
        q.amplitude_err = 0.02 * q.amplitude;
      }
      const auto f = fit_alpha(pairs, p.omega0);
      est.push_back(f.value("alpha"));
      mean_err += f.error("alpha") / 100.0;
    }
    double m = 0.0, v = 0.0;
    for (double e : est) m += e / est.size();
    for (double e : est) v += sqr(e - m) / (est.size() - 1);
    return std::pair{std::sqrt(v), mean_err};
  };
  const auto [sd10, err10] = spread(10);
  const auto [sd1000, err1000] = spread(1000);
  EXPECT_NEAR(err10 / err1000, 10.0, 1.5);
  EXPECT_NEAR(sd10 / sd1000, 10.0, 2.5);
}

TEST(FitAlpha, BootstrapMatchesCovariance) {
  const OscillatorParams p = paper_params();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> ua(3e-6, 15e-6);
  std::vector<double> a(40);
  for (auto& x : a) x = ua(rng);
  auto pairs = formula_pairs(p, a);
  for (auto& q : pairs) {
    q.amplitude *= 1.0 + 0.02 * n01(rng);
    q.amplitude_err = 0.02 * q.amplitude;
  }
  const auto fit = fit_alpha(pairs, p.omega0);
  const auto boot = bootstrap_errors(pairs, [&](const auto& s) { return fit_alpha(s, p.omega0); }, 400, 17);
  EXPECT_NEAR(boot[0] / fit.error("alpha"), 1.0, 0.35);
}

TEST(FitMuGamma, LinearDampingNoiseless) {
  const OscillatorParams p = paper_params();
  std::vector<DrivePoint> pts;
  for (double k : k_ladder(p, 6, 4e-6, 40e-6)) pts.push_back({k, fold_amplitude(p, k), 0.0});
  const auto fit = fit_mu_gamma(pts, p.omega0);
  EXPECT_NEAR(fit.value("mu") / p.mu, 1.0, 1e-6);
  // gamma scale at which the cubic term matters over this range
  const double g_scale = paper::kGamma;
  EXPECT_LT(std::abs(fit.value("gamma")), 1e-6 * g_scale);
}

TEST(FitMuGamma, NonlinearDampingNoiseless) {
  const OscillatorParams p = paper_params(paper::kGamma);
  std::vector<DrivePoint> pts;
  for (double k : k_ladder(p, 8, 4e-6, 60e-6)) pts.push_back({k, fold_amplitude(p, k), 0.0});
  const auto fit = fit_mu_gamma(pts, p.omega0);
  EXPECT_NEAR(fit.value("mu") / p.mu, 1.0, 1e-3);
  EXPECT_NEAR(fit.value("gamma") / p.gamma, 1.0, 1e-3);
}

TEST(FitMuGamma, ClosedLoopOnJumpPoints) {
  const OscillatorParams p = paper_params(paper::kGamma);
  std::vector<DrivePoint> pts;
  for (double k : k_ladder(p, 8, 20e-6, 60e-6)) pts.push_back({k, jump_points(p, k).a_up, 0.0});
  const auto fit = fit_mu_gamma(pts, p.omega0);
  EXPECT_NEAR(fit.value("mu") / p.mu, 1.0, 1e-6);
  EXPECT_NEAR(fit.value("gamma") / p.gamma, 1.0, 1e-6);
}

TEST(FitMuGamma, PureLinearDataHasNoSpuriousGamma) {
  const OscillatorParams p = paper_params();
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto ks = k_ladder(p, 10, 4e-6, 40e-6);
  int covered = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<DrivePoint> pts;
    for (double k : ks) {
      const double a = fold_amplitude(p, k);
      pts.push_back({k, a * (1.0 + 0.01 * n01(rng)), 0.01 * a});
    }
    const auto fit = fit_mu_gamma(pts, p.omega0);
    covered += covers(fit, "gamma", 0.0);
  }
  EXPECT_GE(covered, 190);
}

TEST(FitMuGamma, MonteCarloCoverage) {
  const OscillatorParams p = paper_params(paper::kGamma);
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto ks = k_ladder(p, 10, 4e-6, 60e-6);
  int covered = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<DrivePoint> pts;
    for (double k : ks) {
      const double a = fold_amplitude(p, k);
      pts.push_back({k, a * (1.0 + 0.01 * n01(rng)), 0.01 * a});
    }
    const auto fit = fit_mu_gamma(pts, p.omega0);
    covered += covers(fit, "mu", p.mu) && covers(fit, "gamma", p.gamma);
  }
  EXPECT_GE(covered, 190);
}

TEST(FitMuGamma, ModelComparisonDetectsCubicDamping) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto run = [&](double g) {
    const OscillatorParams p = paper_params(g);
    std::vector<DrivePoint> pts;
    for (double k : k_ladder(p, 10, 4e-6, 60e-6)) {
      const double a = fold_amplitude(p, k);
      pts.push_back({k, a * (1.0 + 0.01 * n01(rng)), 0.01 * a});
    }
    return compare_damping_models(pts, p.omega0);
  };
  EXPECT_LT(run(paper::kGamma).p_value, 1e-3);
  EXPECT_GT(run(0.0).p_value, 1e-3);
}

TEST(FitMuGamma, Preconditions) {
  const OscillatorParams p = paper_params();
  std::vector<DrivePoint> narrow;
  for (double k : k_ladder(p, 5, 10e-6, 15e-6)) narrow.push_back({k, fold_amplitude(p, k), 0.0});
  EXPECT_THROW(fit_mu_gamma(narrow, p.omega0), Error);
  std::vector<DrivePoint> flat;
  for (double k : k_ladder(p, 5, 10e-6, 40e-6)) flat.push_back({k, 5e-6, 0.0});
  try {
    fit_mu_gamma(flat, p.omega0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::IllConditioned);
  }
  flat.resize(2);
  EXPECT_THROW(fit_mu_gamma(flat, p.omega0), Error);
}

TEST(FitMuGamma, HzInputsMapByTwoPi) {
  const OscillatorParams p = paper_params(paper::kGamma);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<DrivePoint> pts, hz;
  for (double k : k_ladder(p, 8, 4e-6, 60e-6)) {
    const double a = fold_amplitude(p, k) * (1.0 + 0.01 * n01(rng));
    pts.push_back({k, a, 0.01 * a});
    hz.push_back({k / (kTwoPi * kTwoPi), a, 0.01 * a});
  }
  const auto fr = fit_mu_gamma(pts, p.omega0);
  const auto fh = fit_mu_gamma(hz, rad_to_hz(p.omega0));
  EXPECT_NEAR(fh.value("mu") * kTwoPi / fr.value("mu"), 1.0, 1e-9);
  EXPECT_NEAR(fh.value("gamma") / kTwoPi / fr.value("gamma"), 1.0, 1e-9);
  EXPECT_NEAR(fh.error("mu") * kTwoPi / fr.error("mu"), 1.0, 1e-6);
}

TEST(FitResponse, NoiselessRoundTrip) {
  const OscillatorParams p = paper_params(paper::kGamma);
  const double k = linear_drive(p) * 20e-6;
  const auto jp = jump_points(p, k);
  const auto data = analytic_dataset(p, k, -200.0, jp.sigma_fold_up + 200.0, 40, 0.01);
  OscillatorParams start = p;
  start.mu *= 1.3;
  start.alpha *= 0.8;
  start.gamma *= 0.5;
  ResponseFitOptions opt;
  opt.free.gamma = true;
  const auto fit = fit_response_curve(data, guess_from(start, k), opt);
  EXPECT_NEAR(fit.value("mu") / p.mu, 1.0, 1e-3);
  EXPECT_NEAR(fit.value("alpha") / p.alpha, 1.0, 1e-3);
  EXPECT_NEAR(fit.value("gamma") / p.gamma, 1.0, 1e-3);
  EXPECT_LT(fit.chi2, 1e-6);
}

TEST(FitResponse, OffsetNuisance) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 15e-6;
  const auto jp = jump_points(p, k);
  auto data = analytic_dataset(p, k, -200.0, jp.sigma_fold_up + 200.0, 40, 0.01);
  const double drift = kTwoPi * 40.0;
  for (auto& s : data.samples) s.frequency -= drift;
  ResponseFitOptions opt;
  opt.free.offset = true;
  const auto fit = fit_response_curve(data, guess_from(p, k), opt);
  EXPECT_NEAR(fit.value("offset") / drift, 1.0, 1e-4);
  EXPECT_NEAR(fit.value("alpha") / p.alpha, 1.0, 1e-4);
}

TEST(FitResponse, MonteCarloCoverage) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 20e-6;
  const auto jp = jump_points(p, k);
  const auto clean = analytic_dataset(p, k, -150.0, jp.sigma_fold_up + 150.0, 25, 0.01);
  std::mt19937_64 rng(31);
  int covered = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const auto fit = fit_response_curve(with_noise(clean, rng), guess_from(p, k));
    covered += covers(fit, "mu", p.mu) && covers(fit, "alpha", p.alpha);
  }
  EXPECT_GE(covered, 190);
}

TEST(FitResponse, ThreadsDoNotChangeResult) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 20e-6;
  std::mt19937_64 rng(8);
  const auto data = with_noise(analytic_dataset(p, k, -150.0, jump_points(p, k).sigma_fold_up + 150.0, 20, 0.01), rng);
  ResponseFitOptions one, four;
  four.threads = 4;
  const auto a = fit_response_curve(data, guess_from(p, k), one);
  const auto b = fit_response_curve(data, guess_from(p, k), four);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.chi2, b.chi2);
}

TEST(FitResponse, FrozenGammaLeavesResidualTrend) {
  const OscillatorParams p = paper_params(paper::kGamma);
  const double k = linear_drive(p) * 40e-6;
  const auto jp = jump_points(p, k);
  std::mt19937_64 rng(12);
  const auto data = with_noise(analytic_dataset(p, k, -200.0, jp.sigma_fold_up + 200.0, 40, 0.005), rng);
  OscillatorParams lin = p;
  lin.gamma = 0.0;
  const ResponseGuess g = guess_from(lin, k);
  const auto fit = fit_response_curve(data, g);
  const auto [q, kk] = apply_fit(fit, g);
  const auto rt = runs_test(response_residuals(data, q, kk));
  EXPECT_LT(rt.p_value, 0.05);

  ResponseFitOptions opt;
  opt.free.gamma = true;
  const auto full = fit_response_curve(data, g, opt);
  const auto [q2, k2] = apply_fit(full, g);
  EXPECT_GT(runs_test(response_residuals(data, q2, k2)).p_value, 0.05);
}

TEST(FitResponse, ResponsivityOrderingOfFittedFamily) {
  const OscillatorParams p = paper_params(paper::kGamma);
  std::mt19937_64 rng(14);
  std::vector<double> chi_peak;
  for (double k : k_ladder(p, 5, 10e-6, 50e-6)) {
    const auto jp = jump_points(p, k);
    const auto data = with_noise(analytic_dataset(p, k, -200.0, jp.sigma_fold_up + 200.0, 30, 0.005), rng);
    ResponseFitOptions opt;
    opt.free.gamma = true;
    OscillatorParams start = p;
    start.gamma *= 0.5;
    const auto g = guess_from(start, k);
    const auto [q, kk] = apply_fit(fit_response_curve(data, g, opt), g);
    chi_peak.push_back(2.0 * q.mu * q.omega0 * jump_points(q, kk).a_up / kk);
  }
  for (std::size_t i = 1; i < chi_peak.size(); ++i) EXPECT_LT(chi_peak[i], chi_peak[i - 1]);
}

TEST(FitResponse, BranchNeedsDirection) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 20e-6;
  const auto jp = jump_points(p, k);
  auto data = analytic_dataset(p, k, -100.0, jp.sigma_fold_up + 100.0, 20, 0.01);
  for (auto& s : data.samples) s.direction = SweepDirection::Unknown;
  try {
    fit_response_curve(data, guess_from(p, k));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::BranchMismatch);
  }
}

TEST(FitResponse, ConfigChecks) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 20e-6;
  const auto data = analytic_dataset(p, k, -100.0, 300.0, 10, 0.01);
  ResponseFitOptions opt;
  opt.free.omega0 = true;
  opt.free.k = true;
  EXPECT_THROW(fit_response_curve(data, guess_from(p, k), opt), Error);
  opt.free.k = false;
  opt.free.offset = true;
  EXPECT_THROW(fit_response_curve(data, guess_from(p, k), opt), Error);
  auto bad = data;
  bad.samples[0].amplitude_err = 0.0;
  EXPECT_THROW(fit_response_curve(bad, guess_from(p, k)), Error);
}

TEST(FitResponse, HzInputsMapByTwoPi) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 20e-6;
  std::mt19937_64 rng(6);
  const auto data = with_noise(analytic_dataset(p, k, -150.0, jump_points(p, k).sigma_fold_up + 150.0, 20, 0.01), rng);
  auto hz = data;
  for (auto& s : hz.samples) s.frequency = rad_to_hz(s.frequency);
  OscillatorParams ph = p;
  ph.omega0 = rad_to_hz(p.omega0);
  ph.mu = rad_to_hz(p.mu);
  ph.alpha = p.alpha / (kTwoPi * kTwoPi);
  const double kh = k / (kTwoPi * kTwoPi);
  hz.k = kh;
  const auto fr = fit_response_curve(data, guess_from(p, k));
  const auto fh = fit_response_curve(hz, guess_from(ph, kh));
  EXPECT_NEAR(fh.value("mu") * kTwoPi / fr.value("mu"), 1.0, 1e-6);
  EXPECT_NEAR(fh.value("alpha") * kTwoPi * kTwoPi / fr.value("alpha"), 1.0, 1e-6);
}

// Demodulated sweeps carry lag near the folds; records away from the jumps
// recover the generating parameters within a few percent.
TEST(FitResponse, ClosedLoopOnSimulatedSweeps) {
  const OscillatorParams p = paper_params();
  const double k = linear_drive(p) * 15e-6;
  const auto jp = jump_points(p, k);
  SweepDataset data;
  data.k = k;
  for (bool up : {true, false}) {
    SweepPlan plan;
    plan.k = k;
    plan.sweep_rate = 1e-2 * p.mu * p.mu;
    const double lo = p.omega0 - 120.0, hi = p.omega0 + jp.sigma_fold_up + 120.0;
    plan.freq_start = up ? lo : hi;
    plan.freq_end = up ? hi : lo;
    const auto s0 = swept_branch_state(p, {k, plan.freq_start - p.omega0}, up);
    plan.initial = {s0.amplitude * std::cos(s0.phase), s0.amplitude * p.omega0 * std::sin(s0.phase)};
    const auto res = run_sweep(p, plan);
    ASSERT_EQ(res.jumps.size(), 1u);
    const std::size_t j = res.jumps[0].record;
    for (std::size_t i = 0; i < res.records.size(); ++i) {
      if (i + 3 >= j && i <= j + 12) continue;
      const auto& r = res.records[i];
      data.samples.push_back({r.drive_frequency, r.amplitude, 0.005 * r.amplitude,
                              up ? SweepDirection::Positive : SweepDirection::Negative});
    }
  }
  ResponseFitOptions opt;
  opt.free.offset = true;
  const auto fit = fit_response_curve(data, guess_from(p, k), opt);
  EXPECT_NEAR(fit.value("mu") / p.mu, 1.0, 0.03);
  EXPECT_NEAR(fit.value("alpha") / p.alpha, 1.0, 0.03);
  EXPECT_LT(std::abs(fit.value("offset")), kTwoPi * 2.0);
}

TEST(RunsTest, KnownSequences) {
  const auto alt = runs_test({1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1});
  EXPECT_EQ(alt.runs, 20);
  EXPECT_LT(alt.p_value, 0.01);
  std::vector<double> blocks(40, 1.0);
  for (std::size_t i = 20; i < 40; ++i) blocks[i] = -1.0;
  EXPECT_EQ(runs_test(blocks).runs, 2);
  EXPECT_LT(runs_test(blocks).p_value, 1e-6);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01(0.0, 1.0);
  int rejects = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> r(60);
    for (auto& x : r) x = n01(rng);
    rejects += runs_test(r).p_value < 0.05;
  }
  EXPECT_LT(rejects, 25);
}
