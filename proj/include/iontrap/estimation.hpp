#pragma once

// Parameter recovery from sweep data: alpha from the jump geometry, (mu, gamma)
// from jump amplitude against drive, and full response-curve fits with the
// branch chosen by sweep direction. Least squares stand in for the Gaussian
// likelihood; covariances are (J^T W J)^-1 scaled by the reduced chi^2.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <unsupported/Eigen/LevenbergMarquardt>

#include "iontrap/duffing.hpp"
#include "iontrap/errors.hpp"
#include "iontrap/units.hpp"

namespace iontrap {

struct FitResult {
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<double> errors;
  Eigen::MatrixXd covariance;
  double chi2 = 0.0;
  int dof = 0;
  bool converged = false;
  int evaluations = 0;

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw Error(ErrorKind::ConfigError, "estimation", "no fitted parameter named " + std::string(name));
  }
  double value(std::string_view name) const { return values[index(name)]; }
  double error(std::string_view name) const { return errors[index(name)]; }
  double reduced_chi2() const { return dof > 0 ? chi2 / dof : std::numeric_limits<double>::quiet_NaN(); }
};

namespace detail {

/// Covariance s^2 (J^T J)^-1 for whitened residuals; infinite with no dof.
inline void fill_covariance(FitResult& out, const Eigen::MatrixXd& jac, double chi2, int dof) {
  const auto n = jac.cols();
  out.chi2 = chi2;
  out.dof = dof;
  const double inf = std::numeric_limits<double>::infinity();
  out.errors.assign(static_cast<std::size_t>(n), inf);
  out.covariance = Eigen::MatrixXd::Constant(n, n, inf);
  if (dof <= 0) return;
  // Equilibrate columns first: parameters differ by ~20 orders of magnitude.
  Eigen::VectorXd d(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double c = jac.col(j).norm();
    if (!(c > 0.0) || !std::isfinite(c)) return;
    d(j) = 1.0 / c;
  }
  const Eigen::MatrixXd js = jac * d.asDiagonal();
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(js.transpose() * js);
  if (!lu.isInvertible()) return;
  out.covariance = d.asDiagonal() * lu.inverse() * d.asDiagonal() * (chi2 / dof);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = out.covariance(i, i);
    out.errors[static_cast<std::size_t>(i)] = v >= 0.0 ? std::sqrt(v) : inf;
  }
}

}  // namespace detail

/// Jump geometry (sigma_m, a_m); amplitude_err <= 0 means unknown, in which
/// case equal relative errors are assumed.
struct JumpPair {
  double sigma = 0.0;          // rad/s
  double amplitude = 0.0;      // m
  double amplitude_err = 0.0;  // m
};

/// Weighted least squares of a_m^2 = c sigma_m through the origin, then
/// alpha = 8 w0 / (3 c).
inline FitResult fit_alpha(const std::vector<JumpPair>& pairs, double omega0) {
  if (pairs.empty()) throw Error(ErrorKind::DegenerateData, "estimation", "fit_alpha needs at least one pair");
  if (!(omega0 > 0.0)) throw Error(ErrorKind::ConfigError, "estimation", "omega0 must be > 0");
  bool all_equal = true;
  for (const auto& p : pairs) {
    if (!(p.sigma > 0.0) || !(p.amplitude > 0.0) || !std::isfinite(p.sigma) || !std::isfinite(p.amplitude)) {
      throw Error(ErrorKind::ConfigError, "estimation", "fit_alpha needs sigma_m > 0 and a_m > 0");
    }
    if (p.sigma != pairs.front().sigma) all_equal = false;
  }
  if (pairs.size() > 1 && all_equal) {
    throw Error(ErrorKind::DegenerateData, "estimation", "all sigma_m equal; slope not determined");
  }
  // var(a^2) = (2 a da)^2.
  double sxx = 0.0, sxy = 0.0;
  std::vector<double> w(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const double da = p.amplitude_err > 0.0 ? p.amplitude_err : p.amplitude;
    w[i] = 1.0 / sqr(2.0 * p.amplitude * da);
    sxx += w[i] * p.sigma * p.sigma;
    sxy += w[i] * p.sigma * p.amplitude * p.amplitude;
  }
  const double c = sxy / sxx;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) chi2 += w[i] * sqr(sqr(pairs[i].amplitude) - c * pairs[i].sigma);
  const int dof = static_cast<int>(pairs.size()) - 1;
  FitResult out;
  out.names = {"alpha"};
  out.values = {8.0 * omega0 / (3.0 * c)};
  out.converged = true;
  out.evaluations = 1;
  // d alpha / d c = -alpha / c.
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(pairs.size()), 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    jac(static_cast<Eigen::Index>(i), 0) = std::sqrt(w[i]) * pairs[i].sigma * (-c / out.values[0]);
  }
  detail::fill_covariance(out, jac, chi2, dof);
  return out;
}

/// Peak amplitude against drive; amplitude_err <= 0 means unknown.
struct DrivePoint {
  double k = 0.0;              // m/s^2
  double amplitude = 0.0;      // m
  double amplitude_err = 0.0;  // m
};

struct MuGammaOptions {
  bool fix_gamma_zero = false;
  double condition_limit = 1e8;
};

namespace detail {

/// a solving 2 w0 a (mu + (3/8) gamma w0^2 a^2) = k on the branch through 0.
inline double peak_from_drive(double k, double omega0, double mu, double gamma) {
  OscillatorParams p;
  p.omega0 = omega0;
  p.mu = std::max(mu, 0.0);
  p.gamma = gamma;
  p.alpha = 0.0;
  return peak_amplitude(p, k);
}

}  // namespace detail

/// Fold law k = 2 w0 mu a_m + (3/4) gamma w0^3 a_m^3, fitted as a Gaussian
/// likelihood on a_m: the linear solve in (mu, gamma) seeds Gauss-Newton on
/// the implicit a_m(k).
inline FitResult fit_mu_gamma(const std::vector<DrivePoint>& data, double omega0, const MuGammaOptions& opt = {}) {
  const std::size_t n = data.size();
  const int npar = opt.fix_gamma_zero ? 1 : 2;
  if (n < static_cast<std::size_t>(npar) + 1 || n < 3) {
    throw Error(ErrorKind::DegenerateData, "estimation", "fit_mu_gamma needs at least 3 points");
  }
  if (!(omega0 > 0.0)) throw Error(ErrorKind::ConfigError, "estimation", "omega0 must be > 0");
  double kmin = std::numeric_limits<double>::infinity(), kmax = 0.0;
  for (const auto& d : data) {
    if (!(d.k > 0.0) || !(d.amplitude > 0.0) || !std::isfinite(d.k) || !std::isfinite(d.amplitude)) {
      throw Error(ErrorKind::ConfigError, "estimation", "fit_mu_gamma needs k > 0 and a_m > 0");
    }
    kmin = std::min(kmin, d.k);
    kmax = std::max(kmax, d.k);
  }
  if (kmax < 2.0 * kmin) throw Error(ErrorKind::DegenerateData, "estimation", "k must span at least a factor of 2");
  std::vector<double> sa(n);
  for (std::size_t i = 0; i < n; ++i) sa[i] = data[i].amplitude_err > 0.0 ? data[i].amplitude_err : data[i].amplitude;

  // Columns scaled to unit norm so the condition number measures separability.
  const auto design = [&](const std::vector<double>& a, Eigen::MatrixXd& m, Eigen::VectorXd& y) {
    m.resize(static_cast<Eigen::Index>(n), npar);
    y.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      // Weight by the k error implied by the amplitude error.
      const double dk = std::abs(2.0 * omega0 * (data[i].k / (2.0 * omega0 * a[i]))) * sa[i];
      m(r, 0) = 2.0 * omega0 * a[i] / dk;
      if (npar == 2) m(r, 1) = 0.75 * omega0 * omega0 * omega0 * a[i] * a[i] * a[i] / dk;
      y(r) = data[i].k / dk;
    }
  };
  std::vector<double> a_obs(n);
  for (std::size_t i = 0; i < n; ++i) a_obs[i] = data[i].amplitude;
  Eigen::MatrixXd m;
  Eigen::VectorXd y;
  design(a_obs, m, y);
  const Eigen::VectorXd col = m.colwise().norm();
  const Eigen::MatrixXd ms = m * col.cwiseInverse().asDiagonal();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(ms);
  const auto sv = svd.singularValues();
  const double cond = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
  if (!(cond < opt.condition_limit)) {
    throw Error(ErrorKind::IllConditioned, "estimation",
                "a_m range cannot separate linear and cubic damping (condition " + std::to_string(cond) + ")");
  }
  Eigen::VectorXd theta = ms.colPivHouseholderQr().solve(y).cwiseQuotient(col);

  // Gauss-Newton on residuals (a_model(k) - a_obs) / sigma_a.
  const auto residuals = [&](const Eigen::VectorXd& th, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    const double mu = th(0);
    const double g = npar == 2 ? th(1) : 0.0;
    r.resize(static_cast<Eigen::Index>(n));
    if (jac) jac->resize(static_cast<Eigen::Index>(n), npar);
    for (std::size_t i = 0; i < n; ++i) {
      const auto ri = static_cast<Eigen::Index>(i);
      const double a = detail::peak_from_drive(data[i].k, omega0, mu, g);
      r(ri) = (a - data[i].amplitude) / sa[i];
      if (jac) {
        const double fa = 2.0 * omega0 * mu + 2.25 * g * omega0 * omega0 * omega0 * a * a;
        (*jac)(ri, 0) = -2.0 * omega0 * a / fa / sa[i];
        if (npar == 2) (*jac)(ri, 1) = -0.75 * omega0 * omega0 * omega0 * a * a * a / fa / sa[i];
      }
    }
  };
  FitResult out;
  out.names = npar == 2 ? std::vector<std::string>{"mu", "gamma"} : std::vector<std::string>{"mu"};
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  double chi2 = std::numeric_limits<double>::infinity();
  bool converged = false;
  int evals = 0;
  try {
    residuals(theta, r, &jac);
    ++evals;
    chi2 = r.squaredNorm();
    for (int it = 0; it < 50; ++it) {
      const Eigen::VectorXd step = jac.colPivHouseholderQr().solve(-r);
      double lambda = 1.0;
      bool improved = false;
      for (int h = 0; h < 30; ++h) {
        const Eigen::VectorXd trial = theta + lambda * step;
        Eigen::VectorXd rt;
        try {
          residuals(trial, rt, nullptr);
          ++evals;
          if (rt.squaredNorm() <= chi2) {
            theta = trial;
            improved = true;
            break;
          }
        } catch (const Error&) {
        }
        lambda *= 0.5;
      }
      residuals(theta, r, &jac);
      const double chi2_new = r.squaredNorm();
      const bool small_step = (lambda * step).cwiseAbs().cwiseQuotient(theta.cwiseAbs().cwiseMax(1e-300)).maxCoeff() < 1e-12;
      const bool flat = std::abs(chi2 - chi2_new) <= 1e-14 * std::max(chi2, 1e-300);
      chi2 = chi2_new;
      if (!improved || small_step || flat) {
        converged = true;
        break;
      }
    }
  } catch (const Error& e) {
    throw Error(ErrorKind::FitDiverged, "estimation", std::string("fit_mu_gamma: ") + e.what());
  }
  out.values.assign(theta.data(), theta.data() + theta.size());
  out.converged = converged && theta.allFinite();
  out.evaluations = evals;
  detail::fill_covariance(out, jac, chi2, static_cast<int>(n) - npar);
  return out;
}

/// Nested comparison of the free-gamma fit against gamma = 0.
struct DampingModelComparison {
  FitResult free_gamma;
  FitResult linear;
  double f_statistic = 0.0;
  double p_value = 1.0;  // small: linear damping rejected
};

inline DampingModelComparison compare_damping_models(const std::vector<DrivePoint>& data, double omega0) {
  DampingModelComparison c;
  c.free_gamma = fit_mu_gamma(data, omega0);
  MuGammaOptions lin;
  lin.fix_gamma_zero = true;
  c.linear = fit_mu_gamma(data, omega0, lin);
  const int dof = c.free_gamma.dof;
  if (dof > 0 && c.free_gamma.chi2 > 0.0) {
    c.f_statistic = (c.linear.chi2 - c.free_gamma.chi2) / (c.free_gamma.chi2 / dof);
    const boost::math::fisher_f dist(1.0, dof);
    c.p_value = c.f_statistic > 0.0 ? boost::math::cdf(boost::math::complement(dist, c.f_statistic)) : 1.0;
  }
  return c;
}

enum class SweepDirection { Positive, Negative, Unknown };

struct SweepSample {
  double frequency = 0.0;      // rad/s, drive frequency
  double amplitude = 0.0;      // m
  double amplitude_err = 0.0;  // m, > 0
  SweepDirection direction = SweepDirection::Unknown;
};

struct SweepDataset {
  std::vector<SweepSample> samples;
  std::optional<double> k;  // m/s^2

  void validate() const {
    if (samples.empty()) throw Error(ErrorKind::DegenerateData, "estimation", "empty sweep dataset");
    for (const auto& s : samples) {
      if (!std::isfinite(s.frequency) || !std::isfinite(s.amplitude)) {
        throw Error(ErrorKind::ConfigError, "estimation", "dataset frequencies and amplitudes must be finite");
      }
      if (!(s.amplitude_err > 0.0)) throw Error(ErrorKind::ConfigError, "estimation", "amplitude errors must be > 0");
    }
  }
};

/// Which response-curve parameters float; the rest keep their guess values.
struct FreeParameters {
  bool omega0 = false;
  bool mu = true;
  bool alpha = true;
  bool gamma = false;
  bool k = false;
  bool offset = false;  // frequency-axis shift of the whole curve
};

/// Known values and starting guesses for the response fit.
struct ResponseGuess {
  OscillatorParams params;
  double k = 0.0;       // m/s^2
  double offset = 0.0;  // rad/s, added to data frequencies
};

struct ResponseFitOptions {
  FreeParameters free;
  int starts = 8;
  unsigned threads = 1;
  int max_evaluations = 4000;
  // Samples on a hysteretic branch closer than fold_guard * mu to the fitted
  // fold are left out of the covariance: the branch is a square root there and
  // a linear error would rest on an unresolved fold position.
  double fold_guard = 0.25;
};

namespace detail {

inline constexpr std::array<const char*, 6> kResponseNames{"omega0", "mu", "alpha", "gamma", "k", "offset"};

struct ResponseState {
  std::array<double, 6> value{};
  std::array<bool, 6> free{};
  std::array<double, 6> scale{};

  std::vector<int> free_index() const {
    std::vector<int> idx;
    for (int i = 0; i < 6; ++i) {
      if (free[static_cast<std::size_t>(i)]) idx.push_back(i);
    }
    return idx;
  }
};

/// Model amplitude for one sample, branch chosen by sweep direction.
inline double response_amplitude(const std::array<double, 6>& v, const OscillatorParams& base, const SweepSample& s) {
  OscillatorParams p = base;
  p.omega0 = v[0];
  p.mu = v[1];
  p.alpha = v[2];
  p.gamma = v[3];
  p.eta = 0.0;
  const DriveSpec d{v[4], s.frequency + v[5] - v[0]};
  const auto states = steady_state_amplitudes(p, d);
  int stable = 0;
  for (const auto& st : states) stable += st.stability == Stability::Stable ? 1 : 0;
  if (stable > 1) {
    if (s.direction == SweepDirection::Unknown) {
      throw Error(ErrorKind::BranchMismatch, "estimation", "bistable point without sweep direction");
    }
    return swept_branch_state(p, d, s.direction == SweepDirection::Positive).amplitude;
  }
  for (const auto& st : states) {
    if (st.stability == Stability::Stable) return st.amplitude;
  }
  return states.front().amplitude;
}

struct ResponseFunctor : Eigen::DenseFunctor<double> {
  ResponseFunctor(const SweepDataset& d, const OscillatorParams& b, const ResponseState& s)
      : Eigen::DenseFunctor<double>(static_cast<int>(s.free_index().size()), static_cast<int>(d.samples.size())),
        data(d), base(b), state(s), idx(s.free_index()) {}

  std::array<double, 6> unpack(const Eigen::VectorXd& q) const {
    auto v = state.value;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto i = static_cast<std::size_t>(idx[j]);
      v[i] = q(static_cast<Eigen::Index>(j)) * state.scale[i];
    }
    return v;
  }

  int operator()(const Eigen::VectorXd& q, Eigen::VectorXd& f) const {
    const auto v = unpack(q);
    ++evals;
    // Outside the physical region the residuals are made large and smooth.
    const bool bad = !(v[0] > 0.0) || !(v[1] > 0.0) || !(v[4] > 0.0);
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const auto& s = data.samples[i];
      double a = 0.0;
      if (bad) {
        a = s.amplitude + 1e3 * s.amplitude_err;
      } else {
        try {
          a = response_amplitude(v, base, s);
        } catch (const Error& e) {
          if (e.kind() == ErrorKind::BranchMismatch) throw;
          a = s.amplitude + 1e3 * s.amplitude_err;
        }
      }
      f(static_cast<Eigen::Index>(i)) = (a - s.amplitude) / s.amplitude_err;
    }
    return 0;
  }

  /// d r / d value in natural units by implicit differentiation of the
  /// amplitude cubic on each sample's branch. Finite differences of the model
  /// itself are unusable here: a sample sitting at the fitted fold changes
  /// branch under an arbitrarily small step.
  Eigen::MatrixXd branch_jacobian(const std::array<double, 6>& v, double fold_guard) const {
    const auto cubic = [&](const std::array<double, 6>& w, const SweepSample& s) {
      OscillatorParams p = base;
      p.omega0 = w[0];
      p.mu = w[1];
      p.alpha = w[2];
      p.gamma = w[3];
      p.eta = 0.0;
      return amplitude_cubic(p, DriveSpec{w[4], s.frequency + w[5] - w[0]});
    };
    OscillatorParams pf = base;
    pf.omega0 = v[0];
    pf.mu = v[1];
    pf.alpha = v[2];
    pf.gamma = v[3];
    pf.eta = 0.0;
    std::optional<JumpPoints> jp;
    try {
      jp = jump_points(pf, v[4]);
    } catch (const Error&) {
    }
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(values(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const auto& s = data.samples[i];
      if (jp) {
        const double sigma = s.frequency + v[5] - v[0];
        const double fold = s.direction == SweepDirection::Negative ? jp->sigma_down : jp->sigma_fold_up;
        const double gap = s.direction == SweepDirection::Negative ? sigma - fold : fold - sigma;
        if (gap >= 0.0 && gap < fold_guard * pf.mu) continue;
      }
      const double a = response_amplitude(v, base, s);
      const double u = a * a;
      const double pu = cubic(v, s).derivative(u);
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const auto k = static_cast<std::size_t>(idx[j]);
        const double h = 1e-6 * state.scale[k];
        auto vp = v, vm = v;
        vp[k] += h;
        vm[k] -= h;
        const double dp = (cubic(vp, s)(u) - cubic(vm, s)(u)) / (2.0 * h);
        jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = -dp / pu / (2.0 * a) / s.amplitude_err;
      }
    }
    return jac;
  }

  int df(const Eigen::VectorXd& q, Eigen::MatrixXd& jac) const {
    Eigen::VectorXd fp(values()), fm(values());
    for (Eigen::Index j = 0; j < q.size(); ++j) {
      const double h = 1e-7 * std::max(std::abs(q(j)), 1.0);
      Eigen::VectorXd qp = q, qm = q;
      qp(j) += h;
      qm(j) -= h;
      (*this)(qp, fp);
      (*this)(qm, fm);
      jac.col(j) = (fp - fm) / (2.0 * h);
    }
    return 0;
  }

  const SweepDataset& data;
  const OscillatorParams& base;
  const ResponseState& state;
  std::vector<int> idx;
  mutable int evals = 0;
};

inline double state_chi2(const SweepDataset& data, const OscillatorParams& base, const ResponseState& st) {
  ResponseFunctor fn(data, base, st);
  Eigen::VectorXd q(static_cast<Eigen::Index>(fn.idx.size()));
  for (std::size_t j = 0; j < fn.idx.size(); ++j) {
    const auto i = static_cast<std::size_t>(fn.idx[j]);
    q(static_cast<Eigen::Index>(j)) = st.value[i] / st.scale[i];
  }
  Eigen::VectorXd f(fn.values());
  fn(q, f);
  return f.squaredNorm();
}

/// Coarse scan of the frequency offset before descent: a wrong offset puts
/// the data jump on the other side of the model fold, a local minimum that
/// LM does not leave. alpha follows the scan so the backbone stays on the peak.
inline void scan_offset(const SweepDataset& data, const OscillatorParams& base, ResponseState& st, double sig_pk,
                        bool alpha_free) {
  const double o0 = st.value[5];
  const double a0 = st.value[2];
  ResponseState best = st;
  double best_chi2 = std::numeric_limits<double>::infinity();
  for (int j = -16; j <= 16; ++j) {
    ResponseState trial = st;
    const double d = 0.25 * j * st.scale[5];
    trial.value[5] = o0 + d;
    if (alpha_free && sig_pk + d > 0.0 && sig_pk > 0.0) trial.value[2] = a0 * (sig_pk + d) / sig_pk;
    const double c = state_chi2(data, base, trial);
    if (c < best_chi2) {
      best_chi2 = c;
      best = trial;
    }
  }
  st = best;
}

struct StartOutcome {
  Eigen::VectorXd q;
  double chi2 = std::numeric_limits<double>::infinity();
  int evals = 0;
  bool ok = false;
};

inline StartOutcome run_start(const SweepDataset& data, const OscillatorParams& base, const ResponseState& st,
                              int max_evals) {
  ResponseFunctor fn(data, base, st);
  Eigen::VectorXd q(static_cast<Eigen::Index>(fn.idx.size()));
  for (std::size_t j = 0; j < fn.idx.size(); ++j) {
    const auto i = static_cast<std::size_t>(fn.idx[j]);
    q(static_cast<Eigen::Index>(j)) = st.value[i] / st.scale[i];
  }
  Eigen::LevenbergMarquardt<ResponseFunctor> lm(fn);
  lm.setXtol(1e-12);
  lm.setFtol(1e-14);
  lm.setMaxfev(max_evals);
  StartOutcome out;
  try {
    lm.minimize(q);
    Eigen::VectorXd f(fn.values());
    fn(q, f);
    out.q = q;
    out.chi2 = f.squaredNorm();
    out.ok = q.allFinite() && std::isfinite(out.chi2);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::BranchMismatch) throw;
  }
  out.evals = fn.evals;
  return out;
}

}  // namespace detail

/// Nonlinear least squares of stable-branch amplitudes against the data,
/// with multi-start Levenberg-Marquardt. The guess supplies known values and
/// the scale of every parameter; the data peak seeds mu and alpha.
inline FitResult fit_response_curve(const SweepDataset& data, const ResponseGuess& guess,
                                    const ResponseFitOptions& opt = {}) {
  data.validate();
  guess.params.validate();
  const FreeParameters& fr = opt.free;
  const double k0 = data.k.value_or(guess.k);
  if (fr.omega0 && fr.k) throw Error(ErrorKind::ConfigError, "estimation", "at least one of omega0 and k must be known");
  if (fr.omega0 && fr.offset) throw Error(ErrorKind::ConfigError, "estimation", "omega0 and offset are degenerate");
  if (!(k0 > 0.0)) throw Error(ErrorKind::ConfigError, "estimation", "drive amplitude k must be given");
  if (opt.starts < 1) throw Error(ErrorKind::ConfigError, "estimation", "need at least one start");

  detail::ResponseState base;
  base.value = {guess.params.omega0, guess.params.mu, guess.params.alpha, effective_gamma(guess.params), k0,
                guess.offset};
  base.free = {fr.omega0, fr.mu, fr.alpha, fr.gamma, fr.k, fr.offset};
  const auto idx = base.free_index();
  if (idx.empty()) throw Error(ErrorKind::ConfigError, "estimation", "no free parameters");
  if (data.samples.size() <= idx.size()) {
    throw Error(ErrorKind::DegenerateData, "estimation", "fewer samples than free parameters");
  }

  // Moment heuristics from the data peak: backbone for alpha, linear-damping
  // peak height for mu.
  const auto peak = std::max_element(data.samples.begin(), data.samples.end(),
                                     [](const SweepSample& a, const SweepSample& b) { return a.amplitude < b.amplitude; });
  const double w0 = base.value[0];
  const double sig_pk = peak->frequency + base.value[5] - w0;
  const double a_pk = peak->amplitude;
  double mu_h = base.value[1];
  double alpha_h = base.value[2];
  if (fr.mu) mu_h = k0 / (2.0 * w0 * a_pk);
  if (fr.alpha && std::abs(sig_pk) > 0.0) alpha_h = 8.0 * w0 * sig_pk / (3.0 * a_pk * a_pk);

  base.scale = {std::abs(w0), std::abs(mu_h), std::abs(alpha_h), 0.0, std::abs(k0), 0.0};
  base.scale[3] = std::abs(base.value[3]) > 0.0 ? std::abs(base.value[3])
                                                 : std::abs(mu_h / (w0 * w0 * a_pk * a_pk));
  base.scale[5] = std::max(std::abs(base.value[5]), mu_h);
  for (auto& s : base.scale) {
    if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
  }

  // Eight starts: heuristic and guess values crossed with factor spreads.
  static constexpr std::array<std::array<double, 3>, 8> kSpread{{
      {1.0, 1.0, 0.0}, {0.5, 1.0, 0.0}, {2.0, 1.0, 0.0}, {1.0, 0.8, 0.0},
      {1.0, 1.25, 0.0}, {0.7, 0.9, 0.5}, {1.4, 1.1, 1.0}, {1.0, 1.0, 1.0},
  }};
  std::vector<detail::ResponseState> starts;
  for (int s = 0; s < opt.starts; ++s) {
    const auto& f = kSpread[static_cast<std::size_t>(s % 8)];
    detail::ResponseState st = base;
    const bool use_guess = s >= 8 || s == 7;
    if (fr.mu) st.value[1] = (use_guess ? guess.params.mu : mu_h) * f[0];
    if (fr.alpha) st.value[2] = (use_guess ? guess.params.alpha : alpha_h) * f[1];
    if (fr.gamma) st.value[3] = f[2] * base.scale[3];
    if (fr.offset) detail::scan_offset(data, guess.params, st, sig_pk, fr.alpha);
    starts.push_back(st);
  }

  std::vector<detail::StartOutcome> outcomes(starts.size());
  const unsigned threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(starts.size())));
  std::vector<std::exception_ptr> errors(threads);
  const auto work = [&](unsigned t) {
    try {
      for (std::size_t s = t; s < starts.size(); s += threads) {
        outcomes[s] = detail::run_start(data, guess.params, starts[s], opt.max_evaluations);
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  // Lowest chi^2, ties to the earliest start so results do not depend on threads.
  std::size_t best = outcomes.size();
  int evals = 0;
  for (std::size_t s = 0; s < outcomes.size(); ++s) {
    evals += outcomes[s].evals;
    if (outcomes[s].ok && (best == outcomes.size() || outcomes[s].chi2 < outcomes[best].chi2)) best = s;
  }
  if (best == outcomes.size()) throw Error(ErrorKind::FitDiverged, "estimation", "no start converged");

  const auto& win = outcomes[best];
  detail::ResponseFunctor fn(data, guess.params, base);
  const auto v = fn.unpack(win.q);
  const Eigen::MatrixXd jac = fn.branch_jacobian(v, opt.fold_guard);
  FitResult out;
  for (int i : idx) {
    out.names.emplace_back(detail::kResponseNames[static_cast<std::size_t>(i)]);
    out.values.push_back(v[static_cast<std::size_t>(i)]);
  }
  out.converged = std::isfinite(win.chi2);
  out.evaluations = evals + fn.evals;
  detail::fill_covariance(out, jac, win.chi2, static_cast<int>(data.samples.size() - idx.size()));
  return out;
}

/// Oscillator parameters and drive with the fitted values substituted.
inline std::pair<OscillatorParams, double> apply_fit(const FitResult& fit, const ResponseGuess& guess,
                                                     const std::optional<double>& k = std::nullopt) {
  OscillatorParams p = guess.params;
  p.gamma = effective_gamma(guess.params);
  p.eta = 0.0;
  double kk = k.value_or(guess.k);
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    const auto& n = fit.names[i];
    const double v = fit.values[i];
    if (n == "omega0") p.omega0 = v;
    else if (n == "mu") p.mu = v;
    else if (n == "alpha") p.alpha = v;
    else if (n == "gamma") p.gamma = v;
    else if (n == "k") kk = v;
  }
  return {p, kk};
}

/// Whitened residuals of a response model against the data, in sample order.
inline std::vector<double> response_residuals(const SweepDataset& data, const OscillatorParams& p, double k,
                                              double offset = 0.0) {
  const std::array<double, 6> v{p.omega0, p.mu, p.alpha, effective_gamma(p), k, offset};
  std::vector<double> r;
  r.reserve(data.samples.size());
  for (const auto& s : data.samples) r.push_back((detail::response_amplitude(v, p, s) - s.amplitude) / s.amplitude_err);
  return r;
}

struct RunsTest {
  int runs = 0;
  int positive = 0;
  int negative = 0;
  double expected = 0.0;
  double z = 0.0;
  double p_value = 1.0;  // two-sided, normal approximation
};

/// Wald-Wolfowitz runs test on residual signs (zeros skipped).
inline RunsTest runs_test(const std::vector<double>& residuals) {
  RunsTest t;
  int prev = 0;
  for (double r : residuals) {
    if (r == 0.0) continue;
    const int s = r > 0.0 ? 1 : -1;
    if (s > 0) ++t.positive;
    else ++t.negative;
    if (s != prev) ++t.runs;
    prev = s;
  }
  const double n1 = t.positive, n2 = t.negative, n = n1 + n2;
  if (n1 == 0.0 || n2 == 0.0) {
    t.expected = 1.0;
    t.p_value = n > 1.0 ? 0.0 : 1.0;
    return t;
  }
  t.expected = 2.0 * n1 * n2 / n + 1.0;
  const double var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0));
  t.z = var > 0.0 ? (t.runs - t.expected) / std::sqrt(var) : 0.0;
  const boost::math::normal norm;
  t.p_value = 2.0 * boost::math::cdf(boost::math::complement(norm, std::abs(t.z)));
  return t;
}

/// Nonparametric bootstrap of any scalar-list fit: resample with replacement,
/// refit, return the per-parameter standard deviation.
template <typename Point, typename Fit>
std::vector<double> bootstrap_errors(const std::vector<Point>& data, Fit&& fit, int resamples, std::uint64_t seed) {
  if (resamples < 2) throw Error(ErrorKind::ConfigError, "estimation", "bootstrap needs >= 2 resamples");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> draws;
  std::vector<Point> sample(data.size());
  for (int b = 0; b < resamples; ++b) {
    for (auto& s : sample) s = data[static_cast<std::size_t>(rng() % data.size())];
    try {
      draws.push_back(fit(sample).values);
    } catch (const Error&) {
      // Degenerate resamples (e.g. all sigma equal) carry no information.
    }
  }
  if (draws.size() < 2) throw Error(ErrorKind::DegenerateData, "estimation", "bootstrap produced < 2 valid fits");
  const std::size_t np = draws.front().size();
  std::vector<double> sd(np, 0.0);
  for (std::size_t j = 0; j < np; ++j) {
    double mean = 0.0;
    for (const auto& d : draws) mean += d[j];
    mean /= static_cast<double>(draws.size());
    double v = 0.0;
    for (const auto& d : draws) v += sqr(d[j] - mean);
    sd[j] = std::sqrt(v / static_cast<double>(draws.size() - 1));
  }
  return sd;
}

}  // namespace iontrap
