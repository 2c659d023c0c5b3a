#include "ensemble/cli.hpp"

#include "ensemble/config.hpp"
#include "ensemble/io.hpp"
#include "ensemble/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>

namespace ensemble::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using config::Format;
using config::RunConfig;
using namespace studies;

// Largest tolerated |collocation - RK4| terminal gap at collocation samples.
constexpr double oracle_tolerance = 1e-3;

Eigen::Vector3d parse_axis(const std::string& s) {
  if (s == "x") return Eigen::Vector3d::UnitX();
  if (s == "-x") return -Eigen::Vector3d::UnitX();
  if (s == "y") return Eigen::Vector3d::UnitY();
  if (s == "-y") return -Eigen::Vector3d::UnitY();
  if (s == "z") return Eigen::Vector3d::UnitZ();
  if (s == "-z") return -Eigen::Vector3d::UnitZ();
  throw std::invalid_argument("expected one of x, -x, y, -y, z, -z, got '" + s + "'");
}

bloch::ControlFn pulse_interpolant(const bloch::PulseSamples& pulse) {
  const Eigen::Index n = pulse.t.size();
  if (n < 2 || pulse.controls.rows() != n || pulse.controls.cols() != 2)
    throw std::invalid_argument("pulse_interpolant: need at least two (t, u, v) rows");
  const double t0 = pulse.t[0];
  const double t1 = pulse.t[n - 1];
  const LglGrid<double> grid = lgl_grid<double>(static_cast<int>(n - 1));
  const AffineMap<double> map(t0, t1);
  bool lgl = true;
  for (Eigen::Index k = 0; k < n && lgl; ++k) lgl = std::abs(map.to_reference(pulse.t[k]) - grid.nodes[k]) <= 1e-9;

  const Eigen::MatrixXd u = pulse.controls;
  if (lgl) return [grid, map, u](double t, VecOut out) { out = interpolate_rows<double>(u, grid, map, t); };

  const Eigen::VectorXd times = pulse.t;
  return [times, u](double t, VecOut out) {
    const Eigen::Index n = times.size();
    if (t <= times[0]) {
      out = u.row(0).transpose();
      return;
    }
    if (t >= times[n - 1]) {
      out = u.row(n - 1).transpose();
      return;
    }
    const auto hi = std::upper_bound(times.data(), times.data() + n, t) - times.data();
    const double a = (t - times[hi - 1]) / (times[hi] - times[hi - 1]);
    out = ((1.0 - a) * u.row(hi - 1) + a * u.row(hi)).transpose();
  };
}

namespace {

// Files written by one command; removed again unless the command commits.
class OutputSet {
 public:
  explicit OutputSet(const fs::path& dir) : dir_(dir) {
    if (!fs::exists(dir_)) {
      fs::create_directories(dir_);
      created_dir_ = true;
    } else if (!fs::is_directory(dir_)) {
      throw std::runtime_error("output_dir " + dir_.string() + " is not a directory");
    }
  }
  OutputSet(const OutputSet&) = delete;
  OutputSet& operator=(const OutputSet&) = delete;

  ~OutputSet() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) fs::remove(p, ec);
    if (created_dir_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
  }

  fs::path add(const std::string& name) {
    written_.push_back(dir_ / name);
    return written_.back();
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : written_) out.push_back(p.filename().string());
    return out;
  }
  void commit() { committed_ = true; }

 private:
  fs::path dir_;
  std::vector<fs::path> written_;
  bool created_dir_ = false;
  bool committed_ = false;
};

json report_json(const SolveReport& r) {
  return {{"status", to_string(r.status)},
          {"kkt_residual", r.kkt_residual},
          {"constraint_violation", r.constraint_violation},
          {"outer_iters", r.outer_iters},
          {"inner_iters", r.inner_iters},
          {"function_evals", r.function_evals},
          {"final_penalty", r.final_penalty}};
}

bool solver_ok(SolveStatus s) { return s == SolveStatus::optimal || s == SolveStatus::feasible_stalled; }

bool checks_ok(const PulseChecks& c) { return c.amplitude_ok && c.oracle_gap <= oracle_tolerance; }

json checks_json(const PulseChecks& c) {
  return {{"oracle_gap", c.oracle_gap},
          {"oracle_ok", c.oracle_gap <= oracle_tolerance},
          {"max_amplitude", c.max_amplitude},
          {"amplitude_ok", c.amplitude_ok},
          {"energy", c.energy}};
}

json scores_json(const RobustnessReport& r) {
  return {{"average", r.average},
          {"worst", r.worst},
          {"lattice", std::to_string(r.grid.omega.size()) + "x" + std::to_string(r.grid.epsilon.size())},
          {"passed", r.passed}};
}

struct Outcome {
  json results = json::array();
  bool solver_ok = true;
  bool passed = true;
};

// Pulse, robustness and physical files for one solved pulse.
void write_pulse_files(const RunConfig& c, OutputSet& files, const std::string& suffix, const PulseSolution& pulse,
                       const RobustnessReport& report) {
  if (c.formats.count(Format::pulse_csv)) io::write_pulse_csv(files.add("pulse" + suffix + ".csv"), bloch::samples_of(pulse));
  if (c.formats.count(Format::robustness_csv))
    io::write_robustness_csv(files.add("robustness" + suffix + ".csv"), report.rows());
  if (c.formats.count(Format::physical_pulse_csv))
    io::write_physical_csv(files.add("physical_pulse" + suffix + ".csv"),
                           bloch::to_physical(pulse, *c.nominal_amplitude_hz));
}

Outcome run_robust_pi_cmd(const RunConfig& c, OutputSet& files, std::ostream& out) {
  const auto r = run_robust_pi(c.study, c.solver);
  write_pulse_files(c, files, "", r.pulse, r.report);
  Outcome o;
  o.solver_ok = solver_ok(r.pulse.solver_stats.status);
  o.passed = r.report.passed && checks_ok(r.checks);
  json entry = scores_json(r.report);
  entry["checks"] = checks_json(r.checks);
  entry["solver"] = report_json(r.pulse.solver_stats);
  o.results.push_back(entry);
  out << "robust_pi average=" << io::format_number(r.report.average) << " worst=" << io::format_number(r.report.worst)
      << " status=" << to_string(r.pulse.solver_stats.status) << "\n";
  return o;
}

Outcome run_three_stage_cmd(const RunConfig& c, OutputSet& files, std::ostream& out) {
  Outcome o;
  std::vector<ThreeStageResult> runs;
  if (c.mode == config::ModeSelection::concatenated)
    runs = run_three_stage_modes(c.study, c.solver, false);
  else
    runs = run_three_stage_modes(c.study, c.solver, true);
  if (c.mode == config::ModeSelection::simultaneous) runs.erase(runs.begin());
  for (const auto& run : runs) {
    const std::string mode = to_string(run.mode);
    json stages = json::array();
    for (std::size_t k = 0; k < run.stages.size(); ++k) {
      const auto& st = run.stages[k];
      write_pulse_files(c, files, "_" + mode + "_stage" + std::to_string(k + 1), st.pulse, st.report);
      json entry = scores_json(st.report);
      entry["checks"] = checks_json(st.checks);
      stages.push_back(entry);
      o.passed = o.passed && st.report.passed && checks_ok(st.checks);
      out << "three_stage " << mode << " stage " << k + 1 << " average=" << io::format_number(st.report.average)
          << " worst=" << io::format_number(st.report.worst) << "\n";
    }
    o.solver_ok = o.solver_ok && solver_ok(run.solver.status);
    o.results.push_back({{"mode", mode}, {"worst", run.worst()}, {"solver", report_json(run.solver)}, {"stages", stages}});
  }
  return o;
}

Outcome run_time_varying_cmd(const RunConfig& c, OutputSet& files, std::ostream& out) {
  std::vector<CostChoice> choices;
  switch (c.cost) {
    case config::CostSelection::terminal_only: choices = {CostChoice::terminal_only}; break;
    case config::CostSelection::energy: choices = {CostChoice::energy}; break;
    case config::CostSelection::time: choices = {CostChoice::time}; break;
    case config::CostSelection::all: choices = {CostChoice::terminal_only, CostChoice::energy, CostChoice::time}; break;
  }
  Outcome o;
  for (CostChoice choice : choices) {
    const auto r = run_time_varying(c.study, choice, c.solver);
    write_pulse_files(c, files, "_" + to_string(choice), r.pulse, r.report);
    json entry = scores_json(r.report);
    entry["cost_choice"] = to_string(choice);
    entry["horizon"] = r.horizon;
    entry["checks"] = checks_json(r.checks);
    entry["solver"] = report_json(r.pulse.solver_stats);
    o.results.push_back(entry);
    o.solver_ok = o.solver_ok && solver_ok(r.pulse.solver_stats.status);
    o.passed = o.passed && r.report.passed && checks_ok(r.checks);
    out << "time_varying " << to_string(choice) << " score=" << io::format_number(r.score)
        << " T=" << io::format_number(r.horizon) << " energy=" << io::format_number(r.checks.energy) << "\n";
  }
  return o;
}

Outcome run_convergence_cmd(const RunConfig& c, OutputSet& files, std::ostream& out) {
  const auto table = run_convergence(c.study, c.solver);
  if (c.formats.count(Format::convergence_csv)) io::write_convergence_csv(files.add("convergence.csv"), table.rows());
  Outcome o;
  json cells = json::array();
  for (const auto& cell : table.cells) {
    json j = {{"N", cell.N},
              {"N_omega", cell.N_omega},
              {"average", cell.average},
              {"worst", cell.worst},
              {"status", to_string(cell.status)},
              {"oracle_gap", cell.oracle_gap},
              {"max_amplitude", cell.max_amplitude}};
    if (!cell.error.empty()) j["error"] = cell.error;
    cells.push_back(j);
    out << "convergence N=" << cell.N << " N_omega=" << cell.N_omega << " avg_Mx=" << io::format_number(cell.average)
        << (cell.error.empty() ? "" : " error=" + cell.error) << "\n";
  }
  const auto& big = table.largest();
  const auto& small = table.smallest();
  const auto& th = c.study.thresholds;
  const bool finite = std::isfinite(big.average);
  o.solver_ok = big.error.empty() && solver_ok(big.status);
  o.passed = finite && (!th.average || big.average >= *th.average) && (!th.worst || big.worst >= *th.worst) &&
             big.oracle_gap <= oracle_tolerance;
  o.results.push_back({{"cells", cells},
                       {"largest", {{"N", big.N}, {"N_omega", big.N_omega}, {"average", big.average}}},
                       {"smallest", {{"N", small.N}, {"N_omega", small.N_omega}, {"average", small.average}}}});
  return o;
}

json thresholds_json(const Thresholds& t) {
  return {{"average", t.average ? json(*t.average) : json(nullptr)},
          {"worst", t.worst ? json(*t.worst) : json(nullptr)}};
}

}  // namespace

int cmd_solve(const fs::path& config_path, std::ostream& out, std::ostream& err,
              std::optional<StudyName> required) {
  RunConfig c;
  try {
    std::ifstream in(config_path);
    if (!in) throw config::ConfigError("config", "cannot read " + config_path.string());
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw config::ConfigError("config", config_path.string() + ": " + e.what());
    }
    if (required && doc.is_object()) {
      const std::string want = to_string(*required);
      if (!doc.contains("study.name")) doc["study.name"] = want;
      if (doc["study.name"] != want) throw config::ConfigError("study.name", "this command needs " + want);
    }
    c = config::parse_config(doc);
  } catch (const config::ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return exit_error;
  }

  apply_thread_env();
  try {
    OutputSet files(c.output_dir);
    Outcome o;
    switch (c.study.name) {
      case StudyName::robust_pi: o = run_robust_pi_cmd(c, files, out); break;
      case StudyName::three_stage: o = run_three_stage_cmd(c, files, out); break;
      case StudyName::time_varying: o = run_time_varying_cmd(c, files, out); break;
      case StudyName::convergence: o = run_convergence_cmd(c, files, out); break;
    }
    if (c.formats.count(Format::manifest_json)) {
      const fs::path path = files.add("manifest.json");
      json manifest = {{"config", config::to_json(c)},
                       {"study", to_string(c.study.name)},
                       {"thresholds", thresholds_json(c.study.thresholds)},
                       {"results", o.results},
                       {"solver_ok", o.solver_ok},
                       {"passed", o.passed},
                       {"outputs", files.names()}};
      std::ofstream mf(path);
      if (!mf) throw std::runtime_error("cannot write " + path.string());
      mf << manifest.dump(2) << "\n";
      mf.close();
      if (!mf) throw std::runtime_error("failed writing " + path.string());
    }
    files.commit();
    out << (o.solver_ok && o.passed ? "PASS" : "FAIL") << " solver_ok=" << (o.solver_ok ? "true" : "false")
        << " thresholds=" << (o.passed ? "met" : "missed") << "\n";
    return o.solver_ok && o.passed ? exit_ok : exit_threshold;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_error;
  }
}

int cmd_validate(const fs::path& pulse_csv, const ValidateOptions& options, std::ostream& out, std::ostream& err) {
  try {
    static const std::regex grid_re(R"((\d+)x(\d+))");
    std::smatch m;
    if (!std::regex_match(options.grid, m, grid_re)) throw std::invalid_argument("--grid: expected NxM, e.g. 41x9");
    const int nw = std::stoi(m[1]);
    const int ne = std::stoi(m[2]);
    const Eigen::Vector3d initial = parse_axis(options.initial);
    const Eigen::Vector3d target = parse_axis(options.target);

    const bloch::PulseSamples pulse = io::read_pulse_csv(pulse_csv);
    bloch::BlochParams params;
    params.B = options.B;
    params.delta = options.delta;
    params.duration = pulse.t[pulse.t.size() - 1] - pulse.t[0];
    params.amplitude_bound = std::max(1.0, pulse.controls.rowwise().norm().maxCoeff());
    if (options.frequency_profile == "sin")
      params.frequency_profile = [](double t) { return std::sin(t); };
    else if (options.frequency_profile != "none")
      throw std::invalid_argument("--frequency-profile: expected none or sin");
    params.validate();

    apply_thread_env();
    const ValidationGrid grid = validation_grid(params, nw, ne);
    const auto terminal = bloch::simulate(params, pulse_interpolant(pulse), initial, grid.points(), options.steps,
                                          pulse.t[0]);
    const RobustnessReport report = make_report(grid, terminal, target, {});

    // Mean of the signed component along the target axis.
    Eigen::Index axis = 0;
    target.cwiseAbs().maxCoeff(&axis);
    double component = 0.0;
    for (const auto& M : terminal) component += M[axis];
    component /= static_cast<double>(terminal.size());

    out << "lattice " << grid.omega.size() << "x" << grid.epsilon.size() << "\n"
        << "target " << options.target << "\n"
        << "average_score " << io::format_number(report.average) << "\n"
        << "worst_score " << io::format_number(report.worst) << "\n"
        << "average_M" << "xyz"[axis] << " " << io::format_number(component) << "\n";
    return exit_ok;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_error;
  }
}

int cmd_export_physical(const fs::path& pulse_csv, double amplitude_hz, const fs::path& output, std::ostream& out,
                        std::ostream& err) {
  try {
    if (!(amplitude_hz > 0.0) || !std::isfinite(amplitude_hz)) throw std::invalid_argument("--amp-hz must be > 0");
    const bloch::PulseSamples pulse = io::read_pulse_csv(pulse_csv);
    fs::path target = output;
    if (target.empty()) target = pulse_csv.parent_path() / (pulse_csv.stem().string() + "_physical.csv");
    const bloch::PhysicalPulse physical = bloch::to_physical(pulse, amplitude_hz);
    try {
      io::write_physical_csv(target, physical);
    } catch (...) {
      std::error_code ec;
      fs::remove(target, ec);
      throw;
    }
    out << "wrote " << target.string() << "\n"
        << "duration_seconds " << io::format_number(physical.duration_seconds()) << "\n";
    return exit_ok;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_error;
  }
}

}  // namespace ensemble::cli
