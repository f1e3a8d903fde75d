#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace iontrap {

enum class ErrorKind {
  NonPhysical,
  InconsistentAmplitude,
  NoBistability,
  NoCusp,
  ZeroDrive,
  StepFailure,
  NonFinite,
  WindowTooShort,
  ConfigError,
  NoConvergence,
  DifferentiationUnstable,
  GridTooCoarse,
  FitDiverged,
  RateUnbounded,
  InsufficientCounts,
  DegenerateData,
  IllConditioned,
  BranchMismatch,
  IoError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NonPhysical: return "NonPhysical";
    case ErrorKind::InconsistentAmplitude: return "InconsistentAmplitude";
    case ErrorKind::NoBistability: return "NoBistability";
    case ErrorKind::NoCusp: return "NoCusp";
    case ErrorKind::ZeroDrive: return "ZeroDrive";
    case ErrorKind::StepFailure: return "StepFailure";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::WindowTooShort: return "WindowTooShort";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::DifferentiationUnstable: return "DifferentiationUnstable";
    case ErrorKind::GridTooCoarse: return "GridTooCoarse";
    case ErrorKind::FitDiverged: return "FitDiverged";
    case ErrorKind::RateUnbounded: return "RateUnbounded";
    case ErrorKind::InsufficientCounts: return "InsufficientCounts";
    case ErrorKind::DegenerateData: return "DegenerateData";
    case ErrorKind::IllConditioned: return "IllConditioned";
    case ErrorKind::BranchMismatch: return "BranchMismatch";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable kind and the module that raised it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& what)
      : std::runtime_error(what), kind_(kind), module_(std::move(module)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

}  // namespace iontrap
