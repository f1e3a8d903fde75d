// Command-line front end: one subcommand per pipeline plus the acceptance suite.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iontrap/pipelines.hpp"
#include "iontrap/selftest.hpp"

namespace {

using namespace iontrap;

void report_error(std::string_view kind, std::string_view module, std::string message) {
  for (char& ch : message) {
    if (ch == '\n') ch = ' ';
  }
  std::cerr << "error: kind=" << kind << " module=" << module << " message=\"" << message << "\"\n";
}

struct Common {
  std::string config_file;
  std::string out_dir;
  std::string seed;
  std::vector<std::string> sets;
  unsigned threads = 0;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_file, "key = value configuration file");
  app->add_option("-o,--out", c.out_dir, "output directory (default $IONTRAP_OUT_DIR, then ./out)");
  app->add_option("--seed", c.seed, "RNG seed for stochastic steps");
  app->add_option("-s,--set", c.sets, "override one key, key=value; repeatable")->allow_extra_args(false);
  app->add_option("-j,--threads", c.threads, "worker threads");
}

// Precedence: defaults, config file, --set, dedicated flags.
cli::RunContext make_context(const Common& c) {
  cli::RunContext ctx;
  if (!c.config_file.empty()) ctx.config = io::Config::from_file(c.config_file);
  for (const auto& s : c.sets) ctx.config.set_assignment(s);
  if (!c.seed.empty()) ctx.config.set("seed", c.seed);
  if (c.threads > 0) ctx.config.set("threads", std::to_string(c.threads));
  if (!c.out_dir.empty()) ctx.out_dir = c.out_dir;
  else if (const char* env = std::getenv("IONTRAP_OUT_DIR"); env && *env) ctx.out_dir = env;
  else ctx.out_dir = "out";
  return ctx;
}

int run_command(const std::string& name, const Common& c) {
  const cli::RunContext ctx = make_context(c);
  const cli::RunOutput out = cli::run_pipeline(name, ctx);
  for (const auto& [file, content] : out.files) {
    const auto path = ctx.out_dir / file;
    io::write_atomic(path, content);
    std::cout << "wrote " << path.string() << '\n';
  }
  if (!out.summary.empty()) std::cout << out.summary;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Driven nonlinear oscillator of a laser-cooled trapped ion: analytic response, simulation, "
               "atomic damping, observables and fits"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands{
      {"steady", "analytic steady-state response curve and fold points"},
      {"sweep", "time-domain frequency sweep with demodulated amplitude and phase"},
      {"bloch-scan", "laser damping coefficients over a cooling-detuning grid"},
      {"damping", "laser damping coefficients at the configured detuning"},
      {"force-curve", "velocity-dependent scattering force table"},
      {"observe", "synthetic image profile and photon-phase histogram with fits"},
      {"fit", "response-curve fit of a sweep CSV"},
  };
  Common common;
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    subs.push_back(sub);
  }

  auto* self = app.add_subcommand("selftest", "run the acceptance criteria and print one verdict per line");
  selftest::Options st;
  self->add_option("-j,--threads", st.threads, "worker threads")->check(CLI::PositiveNumber);
  self->add_option("--only", st.only, "criterion numbers to run")->check(CLI::Range(1, 12));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error("ConfigError", "cli-io", e.what());
    return 2;
  }

  try {
    if (self->parsed()) {
      int failed = 0;
      selftest::run(st, [&](const selftest::Verdict& v) {
        std::cout << selftest::format_line(v) << std::endl;
        failed += !v.pass;
      });
      return failed == 0 ? 0 : 1;
    }
    for (auto* sub : subs) {
      if (sub->parsed()) return run_command(sub->get_name(), common);
    }
  } catch (const Error& e) {
    report_error(to_string(e.kind()), e.module(), e.what());
    return 2;
  } catch (const std::exception& e) {
    report_error("Internal", "cli-io", e.what());
    return 2;
  }
  return 2;
}
