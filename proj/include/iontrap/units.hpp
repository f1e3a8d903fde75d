#pragma once

#include <cmath>
#include <numbers>

namespace iontrap {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kHbar = 1.054571817e-34;       // J s
inline constexpr double kBohrMagneton = 9.2740100783e-24;  // J/T
inline constexpr double kAtomicMassUnit = 1.66053906660e-27;  // kg

// Angular quantities are rad/s everywhere inside the library; Hz only at I/O.
constexpr double hz_to_rad(double f_hz) { return kTwoPi * f_hz; }
constexpr double rad_to_hz(double w) { return w / kTwoPi; }

template <typename T>
constexpr T sqr(T v) { return v * v; }

/// Wraps an angle into (-pi, pi].
inline double wrap_phase(double phi) {
  double w = std::remainder(phi, kTwoPi);
  if (w <= -std::numbers::pi) w += kTwoPi;
  return w;
}

namespace paper {
// Reference operating point of the single-ion Sr+ experiment.
inline constexpr double kOmega0 = kTwoPi * 438.0e3;
inline constexpr double kMu = kTwoPi * 39.2;
inline constexpr double kAlpha = 4.0 * std::numbers::pi * std::numbers::pi * 1.24e18;
/// omega0^2 gamma / 2pi = 0.09 um^-2 Hz
inline constexpr double kGamma = kTwoPi * 0.09e12 / (kOmega0 * kOmega0);
inline constexpr double kMass = 88.0 * kAtomicMassUnit;
inline constexpr double kLinewidth = kTwoPi * 21.0e6;
inline constexpr double kQualityFactor = 5590.0;
inline constexpr double kNonlinearDispersionHz = 0.8e-3;
inline constexpr double kPhaseJump = 1.2;
inline constexpr double kCoolingWavelength = 422.0e-9;
inline constexpr double kRepumpWavelength = 1092.0e-9;
}  // namespace paper

}  // namespace iontrap
