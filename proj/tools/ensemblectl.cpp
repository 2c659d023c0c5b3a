// ensemblectl: run Bloch ensemble studies, validate and convert pulses.

#include "ensemble/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace ensemble;

  CLI::App app{"Pseudospectral ensemble pulse design"};
  app.require_subcommand(1);

  std::string config_path;
  auto* solve = app.add_subcommand("solve", "Run the study described by a config file");
  solve->add_option("config", config_path, "Flat JSON config")->required();

  auto* convergence = app.add_subcommand("convergence", "Run a convergence sweep config");
  convergence->add_option("config", config_path, "Flat JSON config")->required();

  std::string pulse_path;
  cli::ValidateOptions vopt;
  auto* validate = app.add_subcommand("validate", "Re-simulate a pulse CSV over a parameter lattice");
  validate->add_option("pulse", pulse_path, "CSV with header t,u,v")->required();
  validate->add_option("--B", vopt.B, "Frequency half-band")->capture_default_str();
  validate->add_option("--delta", vopt.delta, "rf inhomogeneity half-width")->capture_default_str();
  validate->add_option("--grid", vopt.grid, "Lattice size NxM (omega x epsilon)")->capture_default_str();
  validate->add_option("--initial", vopt.initial, "Initial magnetization axis")->capture_default_str();
  validate->add_option("--target", vopt.target, "Target axis: x, -x, y, -y, z, -z")->capture_default_str();
  validate->add_option("--frequency-profile", vopt.frequency_profile, "Frequency offset: none or sin")
      ->capture_default_str();
  validate->add_option("--steps", vopt.steps, "RK4 steps")->capture_default_str();

  double amp_hz = 0.0;
  std::string output;
  auto* exportp = app.add_subcommand("export-physical", "Convert a pulse CSV to physical units");
  exportp->add_option("pulse", pulse_path, "CSV with header t,u,v")->required();
  exportp->add_option("--amp-hz", amp_hz, "Nominal amplitude in Hz")->required();
  exportp->add_option("-o,--output", output, "Output CSV (default <stem>_physical.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::exit_ok : cli::exit_error;
  }

  if (*solve) return cli::cmd_solve(config_path, std::cout, std::cerr);
  if (*convergence) return cli::cmd_solve(config_path, std::cout, std::cerr, studies::StudyName::convergence);
  if (*validate) return cli::cmd_validate(pulse_path, vopt, std::cout, std::cerr);
  if (*exportp) return cli::cmd_export_physical(pulse_path, amp_hz, output, std::cout, std::cerr);
  return cli::exit_error;
}
