#include "ensemble/io.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ensemble::io {

namespace fs = std::filesystem;

CsvError::CsvError(const std::string& file, int line, const std::string& what)
    : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

namespace {

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void close_output(std::ofstream& out, const fs::path& path) {
  out.close();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) fields.push_back(trim(item));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_number(const std::string& field, const std::string& file, int line) {
  if (field.empty()) throw CsvError(file, line, "empty field");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(field.c_str(), &end);
  if (end != field.c_str() + field.size() || errno == ERANGE || !std::isfinite(v))
    throw CsvError(file, line, "not a finite number: '" + field + "'");
  return v;
}

// Reads a numeric table with an exact header; blank lines are skipped.
std::vector<std::vector<double>> read_table(const fs::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::string file = path.string();
  const auto expected = split(header);
  std::vector<std::vector<double>> rows;
  std::string line;
  int number = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (!seen_header) {
      if (fields != expected) throw CsvError(file, number, "expected header '" + header + "'");
      seen_header = true;
      continue;
    }
    if (fields.size() != expected.size())
      throw CsvError(file, number,
                     "expected " + std::to_string(expected.size()) + " fields, got " +
                         std::to_string(fields.size()));
    std::vector<double> row;
    for (const auto& f : fields) row.push_back(parse_number(f, file, number));
    rows.push_back(std::move(row));
  }
  if (!seen_header) throw CsvError(file, std::max(number, 1), "missing header '" + header + "'");
  return rows;
}

// Line numbers of data rows, for monotonicity errors.
std::vector<int> data_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<int> lines;
  std::string line;
  int number = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    lines.push_back(number);
  }
  return lines;
}

void check_times(const fs::path& path, const std::vector<std::vector<double>>& rows) {
  const auto lines = data_lines(path);
  if (rows.size() < 2)
    throw CsvError(path.string(), lines.empty() ? 1 : lines.back(), "need at least two samples");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (!(rows[i][0] > rows[i - 1][0]))
      throw CsvError(path.string(), lines[i], "time is not strictly increasing");
  }
}

}  // namespace

void write_pulse_csv(const fs::path& path, const bloch::PulseSamples& pulse) {
  if (pulse.controls.rows() != pulse.t.size() || pulse.controls.cols() != 2)
    throw std::invalid_argument("write_pulse_csv: expected one (u, v) row per time sample");
  auto out = open_output(path);
  out << "t,u,v\n";
  for (Eigen::Index i = 0; i < pulse.t.size(); ++i) {
    out << format_number(pulse.t[i]) << ',' << format_number(pulse.controls(i, 0)) << ','
        << format_number(pulse.controls(i, 1)) << '\n';
  }
  close_output(out, path);
}

bloch::PulseSamples read_pulse_csv(const fs::path& path) {
  const auto rows = read_table(path, "t,u,v");
  check_times(path, rows);
  bloch::PulseSamples pulse;
  const auto n = static_cast<Eigen::Index>(rows.size());
  pulse.t.resize(n);
  pulse.controls.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    pulse.t[i] = rows[i][0];
    pulse.controls(i, 0) = rows[i][1];
    pulse.controls(i, 1) = rows[i][2];
  }
  return pulse;
}

void write_physical_csv(const fs::path& path, const bloch::PhysicalPulse& pulse) {
  auto out = open_output(path);
  out << "t_seconds,amplitude_hz,phase_rad\n";
  for (const auto& s : pulse.samples) {
    out << format_number(s.t_seconds) << ',' << format_number(s.amplitude_hz) << ','
        << format_number(s.phase_rad) << '\n';
  }
  close_output(out, path);
}

bloch::PhysicalPulse read_physical_csv(const fs::path& path, double nominal_amplitude_hz) {
  const auto rows = read_table(path, "t_seconds,amplitude_hz,phase_rad");
  check_times(path, rows);
  bloch::PhysicalPulse pulse;
  pulse.nominal_amplitude_hz = nominal_amplitude_hz;
  const auto lines = data_lines(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i][1] < 0.0) throw CsvError(path.string(), lines[i], "negative amplitude");
    pulse.samples.push_back({rows[i][0], rows[i][1], rows[i][2]});
  }
  return pulse;
}

void write_robustness_csv(const fs::path& path, const std::vector<ScoredPoint>& rows) {
  auto out = open_output(path);
  out << "omega,epsilon,score\n";
  for (const auto& r : rows)
    out << format_number(r.omega) << ',' << format_number(r.epsilon) << ',' << format_number(r.score) << '\n';
  close_output(out, path);
}

void write_convergence_csv(const fs::path& path, const std::vector<ConvergenceRow>& rows) {
  auto out = open_output(path);
  out << "N,N_omega,avg_Mx\n";
  for (const auto& r : rows) out << r.N << ',' << r.N_omega << ',' << format_number(r.avg_Mx) << '\n';
  close_output(out, path);
}

}  // namespace ensemble::io
