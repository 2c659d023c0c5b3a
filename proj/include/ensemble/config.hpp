// Run configuration: a flat JSON object whose keys are dotted paths, e.g.
//
//   { "study.name": "robust_pi", "bloch.B": 1, "orders.N": 32,
//     "solver.max_inner": 300, "output_dir": "out",
//     "formats": ["pulse_csv", "manifest_json"] }
//
// Keys not given take the defaults of the named study. Every key is checked
// before anything runs; errors name the offending key.

#ifndef ENSEMBLE_CONFIG_HPP
#define ENSEMBLE_CONFIG_HPP

#include "ensemble/solver.hpp"
#include "ensemble/studies.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

namespace ensemble::config {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class Format { pulse_csv, robustness_csv, convergence_csv, manifest_json, physical_pulse_csv };

std::string to_string(Format f);
Format parse_format(const std::string& s);

/// three_stage runs one mode or both; time_varying runs one cost or all three.
enum class ModeSelection { concatenated, simultaneous, both };
enum class CostSelection { terminal_only, energy, time, all };

struct RunConfig {
  studies::StudySpec study;
  ModeSelection mode = ModeSelection::simultaneous;
  CostSelection cost = CostSelection::all;
  /// "none" or "sin"; only these profiles can be written down in a config.
  std::string frequency_profile = "none";
  SolverConfig solver;
  std::filesystem::path output_dir = ".";
  std::set<Format> formats;
  std::optional<double> nominal_amplitude_hz;
};

/// Solver defaults per study. The inner budget is lowered from the library
/// default; three_stage accepts a 1e-4 feasibility floor (linked stages do not
/// reach 1e-6 with all-node collocation at N = 32).
SolverConfig study_solver_defaults(studies::StudyName name);

RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);

/// Fully resolved flat document; parse_config(to_json(c)) reproduces c.
nlohmann::json to_json(const RunConfig& c);

/// Cross-field checks on top of StudySpec and SolverConfig validation.
void validate(const RunConfig& c);

}  // namespace ensemble::config

#endif  // ENSEMBLE_CONFIG_HPP
