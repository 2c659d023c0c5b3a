// Command implementations behind ensemblectl. Each returns the process exit
// code: 0 success, 1 error, 2 solver or threshold failure.

#ifndef ENSEMBLE_CLI_HPP
#define ENSEMBLE_CLI_HPP

#include "ensemble/bloch.hpp"
#include "ensemble/studies.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

namespace ensemble::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_error = 1;
inline constexpr int exit_threshold = 2;

/// Runs the configured study. With `required` set, a config naming another
/// study is rejected and a config without study.name gets that study.
int cmd_solve(const std::filesystem::path& config, std::ostream& out, std::ostream& err,
              std::optional<studies::StudyName> required = std::nullopt);

struct ValidateOptions {
  double B = 1.0;
  double delta = 0.0;
  /// "NxM": omega points by epsilon points.
  std::string grid = "41x9";
  std::string initial = "z";
  std::string target = "-z";
  /// "none" or "sin".
  std::string frequency_profile = "none";
  int steps = 4000;
};

int cmd_validate(const std::filesystem::path& pulse_csv, const ValidateOptions& options, std::ostream& out,
                 std::ostream& err);

/// Writes `output`, or <stem>_physical.csv next to the input when empty.
int cmd_export_physical(const std::filesystem::path& pulse_csv, double amplitude_hz,
                        const std::filesystem::path& output, std::ostream& out, std::ostream& err);

/// Interpolant through tabulated controls: barycentric when the times are
/// LGL nodes of the covered interval, piecewise linear otherwise.
bloch::ControlFn pulse_interpolant(const bloch::PulseSamples& pulse);

/// Parses x, -x, y, -y, z or -z.
Eigen::Vector3d parse_axis(const std::string& s);

}  // namespace ensemble::cli

#endif  // ENSEMBLE_CLI_HPP
