// CSV readers and writers for pulses, robustness grids and sweep tables.
//
// Numbers are written with 12 significant digits. Readers report malformed
// rows with their 1-based line number.

#ifndef ENSEMBLE_IO_HPP
#define ENSEMBLE_IO_HPP

#include "ensemble/bloch.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ensemble::io {

class CsvError : public std::runtime_error {
 public:
  CsvError(const std::string& file, int line, const std::string& what);
  int line() const { return line_; }

 private:
  int line_;
};

std::string format_number(double v);

/// Header `t,u,v`.
void write_pulse_csv(const std::filesystem::path& path, const bloch::PulseSamples& pulse);
/// Requires the `t,u,v` header, at least two rows and strictly increasing t.
bloch::PulseSamples read_pulse_csv(const std::filesystem::path& path);

/// Header `t_seconds,amplitude_hz,phase_rad`.
void write_physical_csv(const std::filesystem::path& path, const bloch::PhysicalPulse& pulse);
bloch::PhysicalPulse read_physical_csv(const std::filesystem::path& path, double nominal_amplitude_hz);

struct ScoredPoint {
  double omega = 0.0;
  double epsilon = 1.0;
  double score = 0.0;
};

/// Header `omega,epsilon,score`.
void write_robustness_csv(const std::filesystem::path& path, const std::vector<ScoredPoint>& rows);

struct ConvergenceRow {
  int N = 0;
  int N_omega = 0;
  double avg_Mx = 0.0;
};

/// Header `N,N_omega,avg_Mx`.
void write_convergence_csv(const std::filesystem::path& path, const std::vector<ConvergenceRow>& rows);

}  // namespace ensemble::io

#endif  // ENSEMBLE_IO_HPP
