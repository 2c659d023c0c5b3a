#include "ensemble/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>

namespace ensemble::config {

using nlohmann::json;
using studies::StudyName;
using Vector3d = Eigen::Vector3d;

std::string to_string(Format f) {
  switch (f) {
    case Format::pulse_csv: return "pulse_csv";
    case Format::robustness_csv: return "robustness_csv";
    case Format::convergence_csv: return "convergence_csv";
    case Format::manifest_json: return "manifest_json";
    case Format::physical_pulse_csv: return "physical_pulse_csv";
  }
  return "?";
}

Format parse_format(const std::string& s) {
  for (Format f : {Format::pulse_csv, Format::robustness_csv, Format::convergence_csv, Format::manifest_json,
                   Format::physical_pulse_csv})
    if (to_string(f) == s) return f;
  throw std::invalid_argument("unknown format '" + s + "'");
}

SolverConfig study_solver_defaults(StudyName name) {
  SolverConfig c;
  c.max_inner = 300;
  if (name == StudyName::three_stage) c.feasibility_tol = 1e-4;
  return c;
}

namespace {

const char* mode_name(ModeSelection m) {
  switch (m) {
    case ModeSelection::concatenated: return "concatenated";
    case ModeSelection::simultaneous: return "simultaneous";
    case ModeSelection::both: return "both";
  }
  return "?";
}

const char* cost_name(CostSelection c) {
  switch (c) {
    case CostSelection::terminal_only: return "terminal_only";
    case CostSelection::energy: return "energy";
    case CostSelection::time: return "time";
    case CostSelection::all: return "all";
  }
  return "?";
}

double get_number(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(key, "expected a finite number");
  return d;
}

int get_int(const json& v, const std::string& key) {
  if (v.is_number_integer()) {
    const auto i = v.get<long long>();
    if (i < -1000000000LL || i > 1000000000LL) throw ConfigError(key, "integer out of range");
    return static_cast<int>(i);
  }
  throw ConfigError(key, "expected an integer");
}

std::string get_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key, "expected a string");
  return v.get<std::string>();
}

bool get_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
  return v.get<bool>();
}

std::vector<int> get_int_list(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError(key, "expected an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(get_int(v[i], key + "[" + std::to_string(i) + "]"));
  return out;
}

const std::map<std::string, Vector3d>& axes() {
  static const std::map<std::string, Vector3d> a = {
      {"x", Vector3d::UnitX()},  {"-x", -Vector3d::UnitX()}, {"y", Vector3d::UnitY()},
      {"-y", -Vector3d::UnitY()}, {"z", Vector3d::UnitZ()},  {"-z", -Vector3d::UnitZ()}};
  return a;
}

Vector3d get_vector(const json& v, const std::string& key) {
  if (v.is_string()) {
    const auto it = axes().find(v.get<std::string>());
    if (it == axes().end()) throw ConfigError(key, "expected one of x, -x, y, -y, z, -z or a 3-vector");
    return it->second;
  }
  if (!v.is_array() || v.size() != 3) throw ConfigError(key, "expected an axis name or a 3-vector");
  Vector3d out;
  for (int i = 0; i < 3; ++i) out[i] = get_number(v[i], key + "[" + std::to_string(i) + "]");
  return out;
}

json vector_json(const Vector3d& v) {
  for (const auto& [name, axis] : axes())
    if (v == axis) return name;
  return json::array({v[0], v[1], v[2]});
}

template <class E, class F>
E pick(const std::string& s, const std::string& key, std::initializer_list<E> values, F name) {
  for (E e : values)
    if (s == name(e)) return e;
  std::string allowed;
  for (E e : values) allowed += (allowed.empty() ? "" : ", ") + std::string(name(e));
  throw ConfigError(key, "expected one of " + allowed);
}

using Setter = std::function<void(RunConfig&, const json&, const std::string&)>;

template <class T>
Setter number_field(T SolverConfig::* member) {
  return [member](RunConfig& c, const json& v, const std::string& key) {
    if constexpr (std::is_same_v<T, double>)
      c.solver.*member = get_number(v, key);
    else if constexpr (std::is_same_v<T, bool>)
      c.solver.*member = get_bool(v, key);
    else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(key, "expected a non-negative integer");
      c.solver.*member = v.get<std::uint64_t>();
    } else
      c.solver.*member = get_int(v, key);
  };
}

// Stage targets and fractions are collected first and assembled afterwards.
struct StageInput {
  std::optional<std::vector<Vector3d>> targets;
  std::optional<std::vector<double>> fractions;
};

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"study.mode",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.mode = pick(get_string(v, k), k,
                       {ModeSelection::concatenated, ModeSelection::simultaneous, ModeSelection::both}, mode_name);
       }},
      {"study.cost_choice",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.cost = pick(get_string(v, k), k,
                       {CostSelection::terminal_only, CostSelection::energy, CostSelection::time, CostSelection::all},
                       cost_name);
       }},
      {"study.initial_pulse",
       [](RunConfig& c, const json& v, const std::string& k) {
         try {
           c.study.initial_pulse = studies::parse_initial_pulse(get_string(v, k));
         } catch (const std::invalid_argument&) {
           throw ConfigError(k, "expected one of auto, hard, chirp");
         }
       }},
      {"study.initial_state",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.initial_state = get_vector(v, k); }},
      {"study.target", [](RunConfig& c, const json& v, const std::string& k) { c.study.target = get_vector(v, k); }},
      {"study.min_duration",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.min_duration = get_number(v, k); }},
      {"bloch.B", [](RunConfig& c, const json& v, const std::string& k) { c.study.bloch.B = get_number(v, k); }},
      {"bloch.delta",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.bloch.delta = get_number(v, k); }},
      {"bloch.amplitude_bound",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.bloch.amplitude_bound = get_number(v, k); }},
      {"bloch.duration",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.bloch.duration = get_number(v, k); }},
      {"bloch.frequency_profile",
       [](RunConfig& c, const json& v, const std::string& k) {
         const auto s = get_string(v, k);
         if (s != "none" && s != "sin") throw ConfigError(k, "expected none or sin");
         c.frequency_profile = s;
       }},
      {"orders.N", [](RunConfig& c, const json& v, const std::string& k) { c.study.N = get_int(v, k); }},
      {"orders.N_omega", [](RunConfig& c, const json& v, const std::string& k) { c.study.N_omega = get_int(v, k); }},
      {"orders.N_epsilon",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.N_epsilon = get_int(v, k); }},
      {"weights.terminal",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.weights.terminal = get_number(v, k); }},
      {"weights.energy",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.weights.energy = get_number(v, k); }},
      {"weights.time",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.weights.time = get_number(v, k); }},
      {"sweep.N", [](RunConfig& c, const json& v, const std::string& k) { c.study.sweep.N = get_int_list(v, k); }},
      {"sweep.N_omega",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.sweep.N_omega = get_int_list(v, k); }},
      {"validation.omega_points",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.validation.omega_points = get_int(v, k); }},
      {"validation.epsilon_points",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.validation.epsilon_points = get_int(v, k); }},
      {"validation.rk4_steps",
       [](RunConfig& c, const json& v, const std::string& k) { c.study.validation.rk4_steps = get_int(v, k); }},
      {"thresholds.average",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.study.thresholds.average = v.is_null() ? std::nullopt : std::optional(get_number(v, k));
       }},
      {"thresholds.worst",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.study.thresholds.worst = v.is_null() ? std::nullopt : std::optional(get_number(v, k));
       }},
      {"solver.feasibility_tol", number_field(&SolverConfig::feasibility_tol)},
      {"solver.optimality_tol", number_field(&SolverConfig::optimality_tol)},
      {"solver.max_outer", number_field(&SolverConfig::max_outer)},
      {"solver.max_inner", number_field(&SolverConfig::max_inner)},
      {"solver.penalty_init", number_field(&SolverConfig::penalty_init)},
      {"solver.penalty_growth", number_field(&SolverConfig::penalty_growth)},
      {"solver.fd_step", number_field(&SolverConfig::fd_step)},
      {"solver.seed", number_field(&SolverConfig::seed)},
      {"solver.stall_tol", number_field(&SolverConfig::stall_tol)},
      {"solver.lbfgs_memory", number_field(&SolverConfig::lbfgs_memory)},
      {"solver.penalty_max", number_field(&SolverConfig::penalty_max)},
      {"solver.multiplier_clip", number_field(&SolverConfig::multiplier_clip)},
      {"solver.precondition", number_field(&SolverConfig::precondition)},
      {"output_dir",
       [](RunConfig& c, const json& v, const std::string& k) {
         const auto s = get_string(v, k);
         if (s.empty()) throw ConfigError(k, "must not be empty");
         c.output_dir = s;
       }},
      {"formats",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError(k, "expected an array of format names");
         c.formats.clear();
         for (std::size_t i = 0; i < v.size(); ++i) {
           const std::string key = k + "[" + std::to_string(i) + "]";
           try {
             c.formats.insert(parse_format(get_string(v[i], key)));
           } catch (const std::invalid_argument& e) {
             throw ConfigError(key, e.what());
           }
         }
       }},
      {"nominal_amplitude_hz",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.nominal_amplitude_hz = v.is_null() ? std::nullopt : std::optional(get_number(v, k));
       }},
  };
  return table;
}

std::set<Format> default_formats(StudyName name) {
  if (name == StudyName::convergence) return {Format::convergence_csv, Format::manifest_json};
  return {Format::pulse_csv, Format::robustness_csv, Format::manifest_json};
}

// Rewrites library validation errors into ConfigError with the key in front.
[[noreturn]] void rethrow_with_key(const std::invalid_argument& e) {
  const std::string msg = e.what();
  const auto colon = msg.find(": ");
  const auto space = msg.find(' ');
  if (colon != std::string::npos && (space == std::string::npos || colon < space))
    throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
  if (space != std::string::npos) throw ConfigError(msg.substr(0, space), msg.substr(space + 1));
  throw ConfigError("config", msg);
}

}  // namespace

void validate(const RunConfig& c) {
  try {
    c.study.validate();
    c.solver.validate();
  } catch (const std::invalid_argument& e) {
    rethrow_with_key(e);
  }
  const bool convergence = c.study.name == StudyName::convergence;
  for (Format f : c.formats) {
    if (convergence && (f == Format::pulse_csv || f == Format::robustness_csv || f == Format::physical_pulse_csv))
      throw ConfigError("formats", to_string(f) + " is not produced by the convergence study");
    if (!convergence && f == Format::convergence_csv)
      throw ConfigError("formats", "convergence_csv is only produced by the convergence study");
  }
  if (c.formats.count(Format::physical_pulse_csv) && !c.nominal_amplitude_hz)
    throw ConfigError("nominal_amplitude_hz", "required when formats include physical_pulse_csv");
  if (c.nominal_amplitude_hz && !(*c.nominal_amplitude_hz > 0.0))
    throw ConfigError("nominal_amplitude_hz", "must be > 0");
}

RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config", "expected a JSON object with dotted keys");
  RunConfig c;
  StudyName name = StudyName::robust_pi;
  if (doc.contains("study.name")) {
    try {
      name = studies::parse_study_name(get_string(doc["study.name"], "study.name"));
    } catch (const std::invalid_argument&) {
      throw ConfigError("study.name", "expected one of robust_pi, three_stage, time_varying, convergence");
    }
  }
  c.study = studies::default_spec(name);
  c.frequency_profile = name == StudyName::time_varying ? "sin" : "none";
  c.solver = study_solver_defaults(name);
  c.formats = default_formats(name);

  StageInput stage_input;
  const auto& table = setters();
  for (const auto& [key, value] : doc.items()) {
    if (key == "study.name") continue;
    if (key == "stages.targets") {
      if (!value.is_array()) throw ConfigError(key, "expected an array of axes");
      std::vector<Vector3d> t;
      for (std::size_t i = 0; i < value.size(); ++i)
        t.push_back(get_vector(value[i], key + "[" + std::to_string(i) + "]"));
      stage_input.targets = t;
      continue;
    }
    if (key == "stages.fractions") {
      if (!value.is_array()) throw ConfigError(key, "expected an array of numbers");
      std::vector<double> f;
      for (std::size_t i = 0; i < value.size(); ++i)
        f.push_back(get_number(value[i], key + "[" + std::to_string(i) + "]"));
      stage_input.fractions = f;
      continue;
    }
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError(key, "unknown key");
    it->second(c, value, key);
  }

  c.study.bloch.frequency_profile = nullptr;
  if (c.frequency_profile == "sin") c.study.bloch.frequency_profile = [](double t) { return std::sin(t); };

  if (name == StudyName::three_stage) {
    std::vector<Vector3d> targets;
    for (const auto& s : c.study.stages) targets.push_back(s.target);
    if (stage_input.targets) targets = *stage_input.targets;
    std::vector<double> fractions(targets.size(), targets.empty() ? 0.0 : 1.0 / targets.size());
    if (stage_input.fractions) {
      if (stage_input.fractions->size() != targets.size())
        throw ConfigError("stages.fractions", "needs one entry per stage target");
      fractions = *stage_input.fractions;
    } else if (!stage_input.targets) {
      for (std::size_t i = 0; i < targets.size(); ++i) fractions[i] = c.study.stages[i].duration_fraction;
    }
    c.study.stages.clear();
    Vector3d from = c.study.initial_state;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      c.study.stages.push_back({from, targets[i], fractions[i]});
      from = targets[i];
    }
    if (!targets.empty()) c.study.target = targets.back();
  } else if (stage_input.targets || stage_input.fractions) {
    throw ConfigError(stage_input.targets ? "stages.targets" : "stages.fractions",
                      "only used by the three_stage study");
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

json to_json(const RunConfig& c) {
  const auto& s = c.study;
  json d;
  d["study.name"] = studies::to_string(s.name);
  d["study.initial_pulse"] = studies::to_string(s.initial_pulse);
  d["study.initial_state"] = vector_json(s.initial_state);
  d["bloch.B"] = s.bloch.B;
  d["bloch.delta"] = s.bloch.delta;
  d["bloch.amplitude_bound"] = s.bloch.amplitude_bound;
  d["bloch.duration"] = s.bloch.duration;
  d["bloch.frequency_profile"] = c.frequency_profile;
  d["orders.N"] = s.N;
  d["orders.N_omega"] = s.N_omega;
  d["orders.N_epsilon"] = s.N_epsilon;
  d["weights.terminal"] = s.weights.terminal;
  d["weights.energy"] = s.weights.energy;
  d["weights.time"] = s.weights.time;
  switch (s.name) {
    case StudyName::three_stage: {
      json targets = json::array(), fractions = json::array();
      for (const auto& st : s.stages) {
        targets.push_back(vector_json(st.target));
        fractions.push_back(st.duration_fraction);
      }
      d["stages.targets"] = targets;
      d["stages.fractions"] = fractions;
      d["study.mode"] = mode_name(c.mode);
      break;
    }
    case StudyName::time_varying:
      d["study.target"] = vector_json(s.target);
      d["study.cost_choice"] = cost_name(c.cost);
      d["study.min_duration"] = s.min_duration;
      break;
    case StudyName::convergence:
      d["study.target"] = vector_json(s.target);
      d["sweep.N"] = s.sweep.N;
      d["sweep.N_omega"] = s.sweep.N_omega;
      break;
    case StudyName::robust_pi:
      d["study.target"] = vector_json(s.target);
      break;
  }
  d["validation.omega_points"] = s.validation.omega_points;
  d["validation.epsilon_points"] = s.validation.epsilon_points;
  d["validation.rk4_steps"] = s.validation.rk4_steps;
  d["thresholds.average"] = s.thresholds.average ? json(*s.thresholds.average) : json(nullptr);
  d["thresholds.worst"] = s.thresholds.worst ? json(*s.thresholds.worst) : json(nullptr);
  const auto& v = c.solver;
  d["solver.feasibility_tol"] = v.feasibility_tol;
  d["solver.optimality_tol"] = v.optimality_tol;
  d["solver.max_outer"] = v.max_outer;
  d["solver.max_inner"] = v.max_inner;
  d["solver.penalty_init"] = v.penalty_init;
  d["solver.penalty_growth"] = v.penalty_growth;
  d["solver.fd_step"] = v.fd_step;
  d["solver.seed"] = v.seed;
  d["solver.stall_tol"] = v.stall_tol;
  d["solver.lbfgs_memory"] = v.lbfgs_memory;
  d["solver.penalty_max"] = v.penalty_max;
  d["solver.multiplier_clip"] = v.multiplier_clip;
  d["solver.precondition"] = v.precondition;
  d["output_dir"] = c.output_dir.string();
  json formats = json::array();
  for (Format f : c.formats) formats.push_back(to_string(f));
  d["formats"] = formats;
  d["nominal_amplitude_hz"] = c.nominal_amplitude_hz ? json(*c.nominal_amplitude_hz) : json(nullptr);
  return d;
}

}  // namespace ensemble::config
