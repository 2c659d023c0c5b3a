#include "ensemble/config.hpp"

#include <doctest.h>

using namespace ensemble;
using namespace ensemble::config;
using nlohmann::json;

namespace {

std::string error_key(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults come from the named study") {
  const auto pi = parse_config(json::object());
  CHECK(pi.study.name == studies::StudyName::robust_pi);
  CHECK(pi.study.bloch.B == 1.0);
  CHECK(pi.study.bloch.delta == 0.1);
  CHECK(pi.study.bloch.duration == doctest::Approx(7.5398));
  CHECK(pi.study.N == 32);
  CHECK(pi.study.N_omega == 10);
  CHECK(pi.study.N_epsilon == 4);
  CHECK(pi.formats == std::set<Format>{Format::pulse_csv, Format::robustness_csv, Format::manifest_json});

  const auto cv = parse_config(json{{"study.name", "convergence"}});
  CHECK(cv.study.sweep.N == std::vector<int>{8, 16, 24, 32, 40});
  CHECK(cv.study.sweep.N_omega == std::vector<int>{2, 4, 8, 12});
  CHECK(cv.formats == std::set<Format>{Format::convergence_csv, Format::manifest_json});

  const auto ts = parse_config(json{{"study.name", "three_stage"}});
  REQUIRE(ts.study.stages.size() == 3);
  CHECK(ts.study.stages[1].initial.isApprox(Eigen::Vector3d::UnitY()));
  CHECK(ts.study.stages[1].target.isApprox(-Eigen::Vector3d::UnitY()));
  CHECK(ts.solver.feasibility_tol == 1e-4);
  CHECK(ts.mode == ModeSelection::simultaneous);
}

TEST_CASE("explicit keys override defaults") {
  const json doc = {{"study.name", "robust_pi"},
                    {"bloch.B", 0.5},
                    {"orders.N", 12},
                    {"study.target", "x"},
                    {"study.initial_state", {0.0, 0.0, -1.0}},
                    {"solver.max_inner", 50},
                    {"solver.precondition", false},
                    {"thresholds.worst", 0.5},
                    {"output_dir", "results"},
                    {"formats", {"pulse_csv", "physical_pulse_csv"}},
                    {"nominal_amplitude_hz", 2500}};
  const auto c = parse_config(doc);
  CHECK(c.study.bloch.B == 0.5);
  CHECK(c.study.N == 12);
  CHECK(c.study.target.isApprox(Eigen::Vector3d::UnitX()));
  CHECK(c.study.initial_state.isApprox(-Eigen::Vector3d::UnitZ()));
  CHECK(c.solver.max_inner == 50);
  CHECK_FALSE(c.solver.precondition);
  CHECK(c.study.thresholds.worst == 0.5);
  CHECK(c.output_dir == "results");
  CHECK(c.nominal_amplitude_hz == 2500.0);
}

TEST_CASE("stage targets are chained from the initial state") {
  const json doc = {{"study.name", "three_stage"},
                    {"study.initial_state", "x"},
                    {"stages.targets", {"y", "-x"}},
                    {"stages.fractions", {0.25, 0.75}},
                    {"study.mode", "both"}};
  const auto c = parse_config(doc);
  REQUIRE(c.study.stages.size() == 2);
  CHECK(c.study.stages[0].initial.isApprox(Eigen::Vector3d::UnitX()));
  CHECK(c.study.stages[1].initial.isApprox(Eigen::Vector3d::UnitY()));
  CHECK(c.study.stages[1].target.isApprox(-Eigen::Vector3d::UnitX()));
  CHECK(c.study.stages[1].duration_fraction == 0.75);
  CHECK(c.mode == ModeSelection::both);
}

TEST_CASE("errors name the offending key") {
  CHECK(error_key({{"bloch.delta", 1.2}}) == "bloch.delta");
  CHECK(error_key({{"bloch.B", "wide"}}) == "bloch.B");
  CHECK(error_key({{"orders.N", 2.5}}) == "orders.N");
  CHECK(error_key({{"orders.N", 1}}) == "orders.N");
  CHECK(error_key({{"no.such_key", 1}}) == "no.such_key");
  CHECK(error_key({{"study.name", "inversion"}}) == "study.name");
  CHECK(error_key({{"study.target", "w"}}) == "study.target");
  CHECK(error_key({{"solver.max_inner", 0}}) == "solver.max_inner");
  CHECK(error_key({{"solver.penalty_growth", 1.0}}) == "solver.penalty_growth");
  CHECK(error_key({{"formats", {"pulse_csv", "gif"}}}) == "formats[1]");
  CHECK(error_key({{"solver.seed", -3}}) == "solver.seed");
  CHECK(error_key({{"formats", {"convergence_csv"}}}) == "formats");
  CHECK(error_key({{"formats", {"physical_pulse_csv"}}}) == "nominal_amplitude_hz");
  CHECK(error_key({{"nominal_amplitude_hz", -5}}) == "nominal_amplitude_hz");
  CHECK(error_key({{"stages.targets", {"y"}}}) == "stages.targets");
  CHECK(error_key({{"study.name", "three_stage"}, {"stages.fractions", {0.5, 0.5}}}) == "stages.fractions");
  CHECK(error_key({{"study.name", "three_stage"}, {"stages.fractions", {0.5, 0.2, 0.2}}}) == "stages.fractions");
  CHECK(error_key({{"study.name", "convergence"}, {"sweep.N", {8, 1}}}) == "sweep.N");
  CHECK(error_key({{"bloch.frequency_profile", "cos"}}) == "bloch.frequency_profile");
  CHECK(error_key({{"thresholds.average", 1.5}}) == "thresholds.average");
  CHECK(error_key(json::array()) == "config");
}

TEST_CASE("resolved document round-trips") {
  for (const char* name : {"robust_pi", "three_stage", "time_varying", "convergence"}) {
    CAPTURE(name);
    const auto c = parse_config(json{{"study.name", name}, {"solver.seed", 7}});
    const json once = to_json(c);
    const json twice = to_json(parse_config(once));
    CHECK(once == twice);
    CHECK(once["solver.seed"] == 7);
  }
}

TEST_CASE("format names") {
  for (Format f : {Format::pulse_csv, Format::robustness_csv, Format::convergence_csv, Format::manifest_json,
                   Format::physical_pulse_csv})
    CHECK(parse_format(to_string(f)) == f);
  CHECK_THROWS(parse_format("png"));
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}
