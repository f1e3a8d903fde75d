#pragma once

// Flat key = value configuration and #-commented CSV tables. Frequency-like
// keys are stored in rad/s; `<key>_hz` inputs are converted on entry.

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unistd.h>
#include <vector>

#include "iontrap/errors.hpp"
#include "iontrap/units.hpp"

namespace iontrap::io {

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::optional<double> parse_double(std::string_view text) {
  const std::string s = trim(text);
  if (s.empty()) return std::nullopt;
  if (s == "nan") return std::nan("");
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) return std::nullopt;
  return v;
}

enum class KeyType { Real, Int, Bool, Text };

struct KeySpec {
  std::string name;
  KeyType type = KeyType::Real;
  std::string default_value;
  std::string unit;
  int hz_power = 0;  // `name_hz` accepted, scaled by (2 pi)^hz_power
  std::string doc;
};

/// Every configurable key, in echo order.
inline const std::vector<KeySpec>& key_registry() {
  static const std::vector<KeySpec> keys = [] {
    const auto d = format_double;
    std::vector<KeySpec> k{
        // oscillator
        {"omega0", KeyType::Real, d(paper::kOmega0), "rad/s", 1, "trap frequency"},
        {"mu", KeyType::Real, d(paper::kMu), "rad/s", 1, "linear damping"},
        {"alpha", KeyType::Real, d(paper::kAlpha), "1/(m^2 s^2)", 2, "cubic stiffness (alpha_hz in Hz^2/m^2)"},
        {"gamma", KeyType::Real, "0", "s/m^2", 0, "cubic velocity damping"},
        {"eta", KeyType::Real, "0", "1/(m^2 s)", 0, "x^2 xdot damping"},
        {"mass", KeyType::Real, d(paper::kMass), "kg", 0, "ion mass"},
        // drive
        {"k", KeyType::Real, "0", "m/s^2", 0, "drive amplitude; 0 derives it from drive_am"},
        {"drive_am", KeyType::Real, "1e-05", "m", 0, "peak amplitude the drive produces when k = 0"},
        {"sigma_start", KeyType::Real, d(-kTwoPi * 50.0), "rad/s", 1, "detuning range start"},
        {"sigma_end", KeyType::Real, d(kTwoPi * 150.0), "rad/s", 1, "detuning range end"},
        {"steady_points", KeyType::Int, "401", "", 0, "steady-state grid points"},
        // sweep
        {"sweep_direction", KeyType::Text, "both", "", 0, "up, down or both"},
        {"sweep_mode", KeyType::Text, "chirp", "", 0, "chirp or stepped"},
        {"sweep_rate", KeyType::Real, "0", "rad/s^2", 1, "chirp rate; 0 selects 0.05 mu^2"},
        {"sweep_step", KeyType::Real, "0", "rad/s", 1, "stepped-mode frequency step"},
        {"sweep_dwell", KeyType::Real, "0", "s", 0, "stepped-mode dwell"},
        {"start_on_branch", KeyType::Bool, "true", "", 0, "start each sweep on the analytic branch instead of at rest"},
        {"demod_window", KeyType::Real, "0", "s", 0, "lock-in window; 0 selects 1/mu"},
        {"samples_per_period", KeyType::Int, "16", "", 0, "trajectory samples per drive period"},
        {"tol_rel", KeyType::Real, "1e-08", "", 0, "integrator relative tolerance"},
        {"tol_abs", KeyType::Real, "1e-08", "", 0, "integrator absolute tolerance (scaled state)"},
        {"jump_threshold", KeyType::Real, "5", "", 0, "jump detector threshold"},
        {"jump_min_fraction", KeyType::Real, "0.1", "", 0, "minimum net jump, fraction of the largest amplitude"},
        {"amplitude_noise", KeyType::Real, "0", "", 0, "relative Gaussian noise on sweep amplitudes; needs a seed"},
        {"force_curve_file", KeyType::Text, "", "", 0, "force-curve CSV replacing linear and cubic damping"},
        // atom and lasers
        {"linewidth", KeyType::Real, d(paper::kLinewidth), "rad/s", 1, "P1/2 linewidth"},
        {"branching", KeyType::Real, "0.055", "", 0, "P1/2 -> D3/2 branching fraction"},
        {"b_field", KeyType::Real, "0.0004", "T", 0, "magnetic field"},
        {"g_s", KeyType::Real, "2", "", 0, "S1/2 g-factor"},
        {"g_p", KeyType::Real, d(2.0 / 3.0), "", 0, "P1/2 g-factor"},
        {"g_d", KeyType::Real, d(0.8), "", 0, "D3/2 g-factor"},
    };
    for (const std::string beam : {"cooling", "repump"}) {
      const bool c = beam == "cooling";
      k.push_back({beam + "_detuning", KeyType::Real, d(c ? -kTwoPi * 160e6 : kTwoPi * 100e6), "rad/s", 1, beam + " detuning"});
      k.push_back({beam + "_saturation", KeyType::Real, c ? "1" : "5", "", 0, beam + " saturation parameter"});
      k.push_back({beam + "_wavelength", KeyType::Real, d(c ? paper::kCoolingWavelength : paper::kRepumpWavelength), "m", 0,
                   beam + " wavelength"});
      k.push_back({beam + "_projection", KeyType::Real, "1", "", 0, beam + " wave-vector projection on the motion axis"});
      k.push_back({beam + "_polarization_angle", KeyType::Real, d(kPi / 4.0), "rad", 0,
                   beam + " linear polarization angle to the field"});
    }
    std::vector<KeySpec> rest{
        {"scan_start", KeyType::Real, d(-kTwoPi * 500e6), "rad/s", 1, "Bloch scan first cooling detuning"},
        {"scan_end", KeyType::Real, d(-kTwoPi * 10e6), "rad/s", 1, "Bloch scan last cooling detuning"},
        {"scan_points", KeyType::Int, "50", "", 0, "Bloch scan points"},
        {"force_v_max", KeyType::Real, "20", "m/s", 0, "force-curve velocity range"},
        {"force_points", KeyType::Int, "201", "", 0, "force-curve points"},
        // observables
        {"psf", KeyType::Real, d(1e-6), "m", 0, "imaging point-spread width"},
        {"observe_amplitude", KeyType::Real, d(5e-6), "m", 0, "motion amplitude"},
        {"observe_phase", KeyType::Real, "0", "rad", 0, "motion phase"},
        {"observe_center", KeyType::Real, "0", "m", 0, "orbit center"},
        {"image_noise", KeyType::Real, "0.01", "", 0, "Gaussian image noise, fraction of the peak"},
        {"points_per_psf", KeyType::Real, "10", "", 0, "image pixels per psf"},
        {"profile_margin", KeyType::Real, "6", "", 0, "image margin in psf units"},
        {"photon_duration", KeyType::Real, "1", "s", 0, "photon collection time"},
        {"phase_bins", KeyType::Int, "32", "", 0, "photon phase histogram bins"},
        {"rate_v_max", KeyType::Real, "0", "m/s", 0, "rate table range; 0 selects 1.25 a omega0"},
        {"detection_efficiency", KeyType::Real, "1", "", 0, "photon detection efficiency"},
        // fit
        {"fit_input", KeyType::Text, "sweep.csv", "", 0, "sweep CSV to fit; relative to the output directory"},
        {"fit_free", KeyType::Text, "mu,alpha", "", 0, "free parameters: omega0 mu alpha gamma k offset"},
        {"fit_rel_err", KeyType::Real, "0.01", "", 0, "relative amplitude error assigned to sweep records"},
        {"fit_starts", KeyType::Int, "8", "", 0, "multi-start count"},
        {"fit_exclude_before", KeyType::Int, "-1", "", 0, "records dropped before each detected jump; -1 selects 3 (mu^2/rate)^(1/3) + 2"},
        {"fit_exclude_after", KeyType::Int, "12", "", 0, "records dropped after each detected jump"},
        // run
        {"seed", KeyType::Int, "", "", 0, "RNG seed; required by stochastic subcommands"},
        {"threads", KeyType::Int, "1", "", 0, "worker threads"},
    };
    k.insert(k.end(), rest.begin(), rest.end());
    // Defaults in the same text form set() produces, so echoes are fixed points.
    for (auto& spec : k) {
      if (spec.type == KeyType::Real) spec.default_value = format_double(*parse_double(spec.default_value));
    }
    return k;
  }();
  return keys;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : key_registry()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

class Config {
 public:
  /// Sets one key; `name_hz` is converted. Later sets override earlier ones.
  void set(std::string_view raw_name, std::string_view raw_value) {
    std::string name = trim(raw_name);
    const std::string value = trim(raw_value);
    double scale = 1.0;
    const KeySpec* spec = find_key(name);
    if (!spec && name.size() > 3 && name.ends_with("_hz")) {
      spec = find_key(std::string_view(name).substr(0, name.size() - 3));
      if (!spec || spec->hz_power == 0) throw Error(ErrorKind::ConfigError, "cli-io", "unknown key '" + name + "'");
      scale = std::pow(kTwoPi, spec->hz_power);
    }
    if (!spec) throw Error(ErrorKind::ConfigError, "cli-io", "unknown key '" + name + "'");
    const auto bad = [&](const char* what) {
      throw Error(ErrorKind::ConfigError, "cli-io", "key '" + name + "' needs " + what + ", got '" + value + "'");
    };
    switch (spec->type) {
      case KeyType::Real: {
        const auto v = parse_double(value);
        if (!v || !std::isfinite(*v)) bad("a finite number");
        values_[spec->name] = format_double(*v * scale);
        break;
      }
      case KeyType::Int: {
        if (value.empty() && spec->default_value.empty()) {
          values_.erase(spec->name);
          break;
        }
        char* end = nullptr;
        errno = 0;
        const long long v = std::strtoll(value.c_str(), &end, 10);
        if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) bad("an integer");
        values_[spec->name] = std::to_string(v);
        break;
      }
      case KeyType::Bool:
        if (value == "true" || value == "1") values_[spec->name] = "true";
        else if (value == "false" || value == "0") values_[spec->name] = "false";
        else bad("true or false");
        break;
      case KeyType::Text:
        values_[spec->name] = value;
        break;
    }
  }

  /// `key=value` as given on the command line.
  void set_assignment(std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw Error(ErrorKind::ConfigError, "cli-io", "expected key=value, got '" + std::string(text) + "'");
    set(text.substr(0, eq), text.substr(eq + 1));
  }

  void parse(std::string_view text, const std::string& origin) {
    std::istringstream in{std::string(text)};
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorKind::ConfigError, "cli-io", origin + ":" + std::to_string(n) + ": expected key = value");
      }
      try {
        set(std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1));
      } catch (const Error& e) {
        throw Error(e.kind(), e.module(), origin + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }

  static Config from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cli-io", "cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    Config c;
    c.parse(ss.str(), path.string());
    return c;
  }

  bool has(std::string_view name) const {
    const auto it = values_.find(std::string(name));
    return it != values_.end() && !it->second.empty();
  }

  std::string text(std::string_view name) const {
    const KeySpec* spec = find_key(name);
    if (!spec) throw Error(ErrorKind::ConfigError, "cli-io", "unknown key '" + std::string(name) + "'");
    const auto it = values_.find(spec->name);
    return it != values_.end() ? it->second : spec->default_value;
  }

  double real(std::string_view name) const { return *parse_double(text(name)); }

  long long integer(std::string_view name) const {
    const std::string t = text(name);
    if (t.empty()) throw Error(ErrorKind::ConfigError, "cli-io", "key '" + std::string(name) + "' is not set");
    return std::stoll(t);
  }

  bool boolean(std::string_view name) const { return text(name) == "true"; }

  /// Every key with its resolved value; parses back to the same configuration.
  std::string echo() const {
    std::string out = "# resolved configuration; angular frequencies in rad/s\n";
    for (const auto& k : key_registry()) {
      out += k.name + " = " + text(k.name);
      if (!k.unit.empty()) out += "  # " + k.unit;
      out += '\n';
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

struct Column {
  std::string name;
  std::string unit;
  std::string doc;
};

/// A CSV table with a #-commented header: schema line, metadata, one line
/// per column with its unit, then the column-name row.
struct Table {
  std::string schema;  // e.g. "iontrap-sweep/1"
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<Column> columns;
  std::vector<std::vector<std::string>> rows;

  void add_meta(std::string key, double v) { metadata.emplace_back(std::move(key), format_double(v)); }
  void add_meta(std::string key, std::string v) { metadata.emplace_back(std::move(key), std::move(v)); }

  void add_row(const std::vector<double>& values) {
    std::vector<std::string> r;
    r.reserve(values.size());
    for (double v : values) r.push_back(format_double(v));
    add_row(std::move(r));
  }
  void add_row(std::vector<std::string> r) {
    if (r.size() != columns.size()) throw Error(ErrorKind::IoError, "cli-io", "row width does not match columns");
    rows.push_back(std::move(r));
  }

  std::string render() const {
    std::string out = "# schema: " + schema + "\n";
    for (const auto& [k, v] : metadata) out += "# " + k + ": " + v + "\n";
    for (const auto& c : columns) {
      out += "# column " + c.name + " [" + (c.unit.empty() ? "1" : c.unit) + "]";
      if (!c.doc.empty()) out += ": " + c.doc;
      out += '\n';
    }
    for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i].name;
    out += '\n';
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
      out += '\n';
    }
    return out;
  }

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i].name == name) return i;
    }
    throw Error(ErrorKind::IoError, "cli-io", "table " + schema + " has no column '" + std::string(name) + "'");
  }

  double number(std::size_t row, std::size_t col) const {
    const auto v = parse_double(rows.at(row).at(col));
    if (!v) throw Error(ErrorKind::IoError, "cli-io", "non-numeric cell '" + rows[row][col] + "'");
    return *v;
  }

  std::optional<std::string> meta(std::string_view key) const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return v;
    }
    return std::nullopt;
  }
};

/// Reads a table written by Table::render; `schema` must match when given.
inline Table parse_table(std::string_view text, std::string_view expected_schema = {}) {
  Table t;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = false;
  const auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) out.push_back(trim(cell));
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.starts_with("#")) {
      const std::string body = trim(std::string_view(line).substr(1));
      if (body.starts_with("schema:")) {
        t.schema = trim(std::string_view(body).substr(7));
      } else if (body.starts_with("column ")) {
        continue;
      } else if (const auto c = body.find(": "); c != std::string::npos) {
        t.metadata.emplace_back(body.substr(0, c), body.substr(c + 2));
      }
      continue;
    }
    if (trim(line).empty()) continue;
    if (!header) {
      for (auto& n : split(line)) t.columns.push_back({n, "", ""});
      header = true;
      continue;
    }
    auto r = split(line);
    if (r.size() != t.columns.size()) throw Error(ErrorKind::IoError, "cli-io", "ragged row in " + t.schema);
    t.rows.push_back(std::move(r));
  }
  if (!header) throw Error(ErrorKind::IoError, "cli-io", "table has no header row");
  if (!expected_schema.empty() && t.schema != expected_schema) {
    throw Error(ErrorKind::IoError, "cli-io", "expected schema " + std::string(expected_schema) + ", found '" + t.schema + "'");
  }
  return t;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cli-io", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary in the same directory and renames into place,
/// so readers never see a partial file.
inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw Error(ErrorKind::IoError, "cli-io", "cannot create " + path.parent_path().string() + ": " + ec.message());
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cli-io", "cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp, ec);
      throw Error(ErrorKind::IoError, "cli-io", "short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorKind::IoError, "cli-io", "cannot rename into " + path.string());
  }
}

}  // namespace iontrap::io
