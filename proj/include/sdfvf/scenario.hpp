#pragma once

// Scenario documents: parsing with line-precise validation errors, building
// a Simulation from them, and the scripted run.
//
// Schema (all keys optional unless noted):
// {
//   "volume": {"nrrd": "path"} | {"phantom": {...phantom spec...}},       (required)
//   "matrix_label": 1,
//   "constraints": [{"label": 2, "tau0_mm": 1.0, "tauf_mm": 4.0, "lambda_per_mm": 1.0}],
//   "robot": {"preset": "gantry"|"arm6"|"custom", "linear_gain": 1.0, "gains": [6 values],
//             "damping": 1e-6, "base_mm": [x,y,z], "q0": [...], "limits": [[lo,hi], ...],
//             "joints": [{"kind": "revolute"|"prismatic", "axis": [..], "origin_mm": [..],
//                         "origin_quat_wxyz": [..], "limits": [lo,hi]}], "flange_mm": [..]},
//   "tool": {"tip_offset_mm": [0,0,0], "burr_radius_mm": 1.0, "clearance_mode": "burr-surface"|"tip-point"},
//   "registration": {"q": [w,x,y,z], "t": [x,y,z]},
//   "gravity": {"degree": 3, "coefficients": [[...], [...], [...]]},
//   "dt_s": 0.001, "duration_s": 10, "vf_enabled": true, "drill_on": true,
//   "eq3_literal": false, "seed": 0,
//   "force_script": {"kind": "zero"}
//                 | {"kind": "keyframes", "frames": [{"t": 0, "f": [x,y,z]}, ...]}
//                 | {"kind": "operator", "target_mm": [..], "push_N": 5, "jitter_N": 0.5, "jitter_period_s": 0.1}
// }

#include "sdfvf/distance_field.hpp"
#include "sdfvf/json_locator.hpp"
#include "sdfvf/simulation.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace sdfvf {

struct ConstraintSpec {
  Label label = 0;
  ForceLawParams params;
};

struct ForceScriptSpec {
  ForceScript::Kind kind = ForceScript::Kind::zero;
  std::vector<Keyframe> frames;
  OperatorPolicy policy;
};

struct Scenario {
  std::filesystem::path base_dir;
  std::optional<std::filesystem::path> volume_path;
  std::optional<PhantomSpec> phantom;
  Label matrix_label = 0;
  std::vector<ConstraintSpec> constraints;
  RobotModel robot;
  JointVector q0;
  DrillTool tool;
  RigidTransform registration;
  std::optional<GravityModel> gravity;
  double dt = 1e-3;
  double duration = 10.0;
  bool vf_enabled = true;
  bool drill_on = true;
  ClampRule clamp = ClampRule::no_reversal;
  std::uint64_t seed = 0;
  ForceScriptSpec force_script;

  std::size_t tick_count() const { return static_cast<std::size_t>(std::llround(duration / dt)); }
};

// ---------------------------------------------------------------------------
// JSON helpers shared with the calibration commands

inline nlohmann::ordered_json pose_to_json(const RigidTransform& t) {
  const Eigen::Quaterniond q = t.quaternion();
  return {{"q", {q.w(), q.x(), q.y(), q.z()}}, {"t", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

inline RigidTransform pose_from_json(const nlohmann::json& j) {
  const auto q = j.at("q").get<std::vector<double>>();
  const auto t = j.at("t").get<std::vector<double>>();
  if (q.size() != 4 || t.size() != 3) throw ValidationError("pose needs q[4] (w,x,y,z) and t[3]");
  const Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
  if (quat.norm() < 1e-12) throw ValidationError("pose quaternion must be nonzero");
  return RigidTransform::from_quaternion(quat, Vec3(t[0], t[1], t[2]));
}

inline nlohmann::ordered_json gravity_to_json(const GravityModel& m) {
  nlohmann::ordered_json j;
  j["degree"] = m.degree;
  j["coefficients"] = {m.coefficients[0], m.coefficients[1], m.coefficients[2]};
  j["fit_rmse_N"] = m.fit_rmse;
  return j;
}

inline GravityModel gravity_from_json(const nlohmann::json& j) {
  GravityModel m;
  m.degree = j.at("degree").get<int>();
  const auto& c = j.at("coefficients");
  if (!c.is_array() || c.size() != 3) throw ValidationError("gravity coefficients need 3 axes");
  for (int a = 0; a < 3; ++a) m.coefficients[a] = c[a].get<std::vector<double>>();
  m.fit_rmse = j.value("fit_rmse_N", 0.0);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

class ScenarioReader {
 public:
  ScenarioReader(std::string_view text, std::string source) : source_(std::move(source)) {
    try {
      doc_ = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      // Byte offset -> line:column.
      std::size_t line = 1, col = 1;
      for (std::size_t i = 0; i < std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size()); ++i) {
        if (text[i] == '\n') {
          ++line;
          col = 1;
        } else {
          ++col;
        }
      }
      throw ValidationError(source_ + ":" + std::to_string(line) + ":" + std::to_string(col) +
                            ": JSON syntax error: " + e.what());
    }
    index_ = std::make_unique<JsonLineIndex>(text);
  }

  [[noreturn]] void fail(const std::string& pointer, const std::string& msg) const {
    throw ValidationError(source_ + ":" + std::to_string(index_->line_of(pointer)) + ": " +
                          (pointer.empty() ? "/" : pointer) + ": " + msg);
  }

  const nlohmann::json& doc() const { return doc_; }

  const nlohmann::json* find(const nlohmann::json& obj, const std::string& key) const {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }

  double number(const nlohmann::json& j, const std::string& ptr) const {
    if (!j.is_number()) fail(ptr, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(ptr, "expected a finite number");
    return v;
  }

  bool boolean(const nlohmann::json& j, const std::string& ptr) const {
    if (!j.is_boolean()) fail(ptr, "expected true or false");
    return j.get<bool>();
  }

  Label label(const nlohmann::json& j, const std::string& ptr) const {
    if (!j.is_number_unsigned() || j.get<unsigned long>() == 0 || j.get<unsigned long>() > 65535)
      fail(ptr, "expected a label in 1..65535");
    return static_cast<Label>(j.get<unsigned long>());
  }

  Vec3 vec3(const nlohmann::json& j, const std::string& ptr) const {
    if (!j.is_array() || j.size() != 3) fail(ptr, "expected an array of 3 numbers");
    return {number(j[0], ptr + "/0"), number(j[1], ptr + "/1"), number(j[2], ptr + "/2")};
  }

  std::vector<double> numbers(const nlohmann::json& j, const std::string& ptr) const {
    if (!j.is_array()) fail(ptr, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number(j[i], ptr + "/" + std::to_string(i)));
    return out;
  }

 private:
  std::string source_;
  nlohmann::json doc_;
  std::unique_ptr<JsonLineIndex> index_;
};

inline void read_robot(const ScenarioReader& rd, const nlohmann::json& j, Scenario& sc) {
  const std::string base = "/robot";
  const std::string preset = j.value("preset", std::string(j.contains("joints") ? "custom" : "gantry"));
  if (preset == "gantry") {
    const Vec3 b = rd.find(j, "base_mm") ? rd.vec3(j["base_mm"], base + "/base_mm") : Vec3::Zero();
    const double g = rd.find(j, "linear_gain") ? rd.number(j["linear_gain"], base + "/linear_gain") : 1.0;
    if (!(g > 0)) rd.fail(base + "/linear_gain", "must be positive");
    sc.robot = make_gantry(b, g, 1e-6);
  } else if (preset == "arm6") {
    sc.robot = make_arm6();
  } else if (preset == "custom") {
    if (!rd.find(j, "joints") || !j["joints"].is_array() || j["joints"].empty())
      rd.fail(base + "/joints", "custom robot needs a non-empty joints array");
    sc.robot = RobotModel{};
    sc.robot.damping = 1e-3;
    for (std::size_t n = 0; n < j["joints"].size(); ++n) {
      const auto& jj = j["joints"][n];
      const std::string p = base + "/joints/" + std::to_string(n);
      Joint joint;
      const std::string kind = jj.value("kind", std::string("revolute"));
      if (kind == "revolute") joint.kind = JointKind::revolute;
      else if (kind == "prismatic") joint.kind = JointKind::prismatic;
      else rd.fail(p + "/kind", "expected 'revolute' or 'prismatic'");
      if (rd.find(jj, "axis")) {
        const Vec3 a = rd.vec3(jj["axis"], p + "/axis");
        if (a.norm() < 1e-12) rd.fail(p + "/axis", "axis must be nonzero");
        joint.axis = a.normalized();
      }
      if (rd.find(jj, "origin_mm")) joint.origin.translation = rd.vec3(jj["origin_mm"], p + "/origin_mm");
      if (rd.find(jj, "origin_quat_wxyz")) {
        const auto q = rd.numbers(jj["origin_quat_wxyz"], p + "/origin_quat_wxyz");
        if (q.size() != 4) rd.fail(p + "/origin_quat_wxyz", "expected 4 numbers");
        joint.origin.rotation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized().toRotationMatrix();
      }
      if (rd.find(jj, "limits")) {
        const auto l = rd.numbers(jj["limits"], p + "/limits");
        if (l.size() != 2 || !(l[0] <= l[1])) rd.fail(p + "/limits", "expected ordered [lo, hi]");
        joint.lower = l[0];
        joint.upper = l[1];
      }
      sc.robot.joints.push_back(joint);
    }
    if (rd.find(j, "flange_mm")) sc.robot.flange.translation = rd.vec3(j["flange_mm"], base + "/flange_mm");
  } else {
    rd.fail(base + "/preset", "unknown robot preset '" + preset + "'");
  }

  if (rd.find(j, "gains")) {
    const auto g = rd.numbers(j["gains"], base + "/gains");
    if (g.size() != 6) rd.fail(base + "/gains", "expected 6 gains");
    for (int i = 0; i < 6; ++i) {
      if (!(g[i] > 0)) rd.fail(base + "/gains/" + std::to_string(i), "gains must be positive");
      sc.robot.gains[i] = g[i];
    }
  }
  if (rd.find(j, "damping")) {
    sc.robot.damping = rd.number(j["damping"], base + "/damping");
    if (sc.robot.damping < 0) rd.fail(base + "/damping", "must be non-negative");
  }
  if (rd.find(j, "limits")) {
    const auto& lim = j["limits"];
    if (!lim.is_array() || lim.size() != sc.robot.joints.size())
      rd.fail(base + "/limits", "expected one [lo, hi] pair per joint");
    for (std::size_t i = 0; i < lim.size(); ++i) {
      const auto l = rd.numbers(lim[i], base + "/limits/" + std::to_string(i));
      if (l.size() != 2 || !(l[0] <= l[1])) rd.fail(base + "/limits/" + std::to_string(i), "expected ordered [lo, hi]");
      sc.robot.joints[i].lower = l[0];
      sc.robot.joints[i].upper = l[1];
    }
  }
  sc.q0 = JointVector::Zero(sc.robot.dof());
  if (rd.find(j, "q0")) {
    const auto q = rd.numbers(j["q0"], base + "/q0");
    if (q.size() != sc.robot.joints.size()) rd.fail(base + "/q0", "length must equal the joint count");
    for (std::size_t i = 0; i < q.size(); ++i) sc.q0[static_cast<Eigen::Index>(i)] = q[i];
  }
}

}  // namespace detail

/// `source` names the document in error messages; relative paths resolve
/// against `base_dir`.
inline Scenario parse_scenario(std::string_view text, const std::string& source = "scenario",
                               const std::filesystem::path& base_dir = {}) {
  detail::ScenarioReader rd(text, source);
  const auto& doc = rd.doc();
  if (!doc.is_object()) rd.fail("", "scenario must be a JSON object");

  Scenario sc;
  sc.base_dir = base_dir;

  const auto* vol = rd.find(doc, "volume");
  if (!vol || !vol->is_object()) rd.fail("/volume", "required object with 'nrrd' or 'phantom'");
  if (const auto* p = rd.find(*vol, "nrrd")) {
    if (!p->is_string()) rd.fail("/volume/nrrd", "expected a path string");
    sc.volume_path = base_dir / p->get<std::string>();
  } else if (const auto* ph = rd.find(*vol, "phantom")) {
    try {
      sc.phantom = phantom_spec_from_json(*ph);
    } catch (const ValidationError& e) {
      rd.fail("/volume/phantom", e.what());
    }
  } else {
    rd.fail("/volume", "expected 'nrrd' or 'phantom'");
  }

  if (const auto* m = rd.find(doc, "matrix_label")) sc.matrix_label = rd.label(*m, "/matrix_label");

  if (const auto* cs = rd.find(doc, "constraints")) {
    if (!cs->is_array()) rd.fail("/constraints", "expected an array");
    for (std::size_t n = 0; n < cs->size(); ++n) {
      const auto& c = (*cs)[n];
      const std::string p = "/constraints/" + std::to_string(n);
      if (!c.is_object() || !c.contains("label")) rd.fail(p, "constraint needs a label");
      ConstraintSpec spec;
      spec.label = rd.label(c["label"], p + "/label");
      spec.params = ForceLawParams::dental_stone();
      if (const auto* v = rd.find(c, "tau0_mm")) spec.params.tau0 = rd.number(*v, p + "/tau0_mm");
      if (const auto* v = rd.find(c, "tauf_mm")) spec.params.tauf = rd.number(*v, p + "/tauf_mm");
      if (const auto* v = rd.find(c, "lambda_per_mm")) spec.params.lambda = rd.number(*v, p + "/lambda_per_mm");
      if (spec.params.tau0 < 0) rd.fail(p + "/tau0_mm", "must be >= 0");
      if (!(spec.params.tau0 < spec.params.tauf)) rd.fail(p + "/tauf_mm", "must exceed tau0_mm");
      if (!(spec.params.lambda > 0)) rd.fail(p + "/lambda_per_mm", "must be positive");
      for (const auto& prev : sc.constraints)
        if (prev.label == spec.label) rd.fail(p + "/label", "duplicate constraint label");
      sc.constraints.push_back(spec);
    }
  }

  if (const auto* r = rd.find(doc, "robot")) {
    if (!r->is_object()) rd.fail("/robot", "expected an object");
    detail::read_robot(rd, *r, sc);
  } else {
    sc.robot = make_gantry();
    sc.q0 = JointVector::Zero(3);
  }

  if (const auto* t = rd.find(doc, "tool")) {
    if (const auto* v = rd.find(*t, "tip_offset_mm")) sc.tool.tip_offset = rd.vec3(*v, "/tool/tip_offset_mm");
    if (const auto* v = rd.find(*t, "burr_radius_mm")) {
      sc.tool.burr_radius = rd.number(*v, "/tool/burr_radius_mm");
      if (sc.tool.burr_radius < 0) rd.fail("/tool/burr_radius_mm", "must be >= 0");
    }
    if (const auto* v = rd.find(*t, "clearance_mode")) {
      const std::string m = v->is_string() ? v->get<std::string>() : "";
      if (m == "burr-surface") sc.tool.mode = ClearanceMode::burr_surface;
      else if (m == "tip-point") sc.tool.mode = ClearanceMode::tip_point;
      else rd.fail("/tool/clearance_mode", "expected 'burr-surface' or 'tip-point'");
    }
  }

  if (const auto* r = rd.find(doc, "registration")) {
    try {
      sc.registration = pose_from_json(*r);
    } catch (const std::exception& e) {
      rd.fail("/registration", e.what());
    }
  }

  if (const auto* g = rd.find(doc, "gravity")) {
    try {
      sc.gravity = gravity_from_json(*g);
    } catch (const std::exception& e) {
      rd.fail("/gravity", e.what());
    }
  }

  if (const auto* v = rd.find(doc, "dt_s")) {
    sc.dt = rd.number(*v, "/dt_s");
    if (!(sc.dt > 0)) rd.fail("/dt_s", "must be positive");
  }
  if (const auto* v = rd.find(doc, "duration_s")) {
    sc.duration = rd.number(*v, "/duration_s");
    if (sc.duration < 0) rd.fail("/duration_s", "must be >= 0");
  }
  if (const auto* v = rd.find(doc, "vf_enabled")) sc.vf_enabled = rd.boolean(*v, "/vf_enabled");
  if (const auto* v = rd.find(doc, "drill_on")) sc.drill_on = rd.boolean(*v, "/drill_on");
  if (const auto* v = rd.find(doc, "eq3_literal"))
    sc.clamp = rd.boolean(*v, "/eq3_literal") ? ClampRule::literal : ClampRule::no_reversal;
  if (const auto* v = rd.find(doc, "seed")) {
    if (!v->is_number_unsigned()) rd.fail("/seed", "expected a non-negative integer");
    sc.seed = v->get<std::uint64_t>();
  }

  if (const auto* fs = rd.find(doc, "force_script")) {
    if (!fs->is_object()) rd.fail("/force_script", "expected an object");
    const std::string kind = fs->value("kind", std::string("zero"));
    if (kind == "zero") {
      sc.force_script.kind = ForceScript::Kind::zero;
    } else if (kind == "keyframes") {
      sc.force_script.kind = ForceScript::Kind::keyframes;
      const auto* frames = rd.find(*fs, "frames");
      if (!frames || !frames->is_array()) rd.fail("/force_script/frames", "expected an array of {t, f}");
      for (std::size_t n = 0; n < frames->size(); ++n) {
        const std::string p = "/force_script/frames/" + std::to_string(n);
        const auto& f = (*frames)[n];
        if (!f.is_object() || !f.contains("t") || !f.contains("f")) rd.fail(p, "keyframe needs t and f");
        sc.force_script.frames.push_back({rd.number(f["t"], p + "/t"), rd.vec3(f["f"], p + "/f")});
      }
    } else if (kind == "operator") {
      sc.force_script.kind = ForceScript::Kind::synthetic_operator;
      auto& pol = sc.force_script.policy;
      const auto* target = rd.find(*fs, "target_mm");
      if (!target) rd.fail("/force_script/target_mm", "operator script needs target_mm");
      pol.target = rd.vec3(*target, "/force_script/target_mm");
      if (const auto* v = rd.find(*fs, "push_N")) pol.push = rd.number(*v, "/force_script/push_N");
      if (const auto* v = rd.find(*fs, "jitter_N")) pol.jitter_sigma = rd.number(*v, "/force_script/jitter_N");
      if (const auto* v = rd.find(*fs, "jitter_period_s"))
        pol.jitter_period = rd.number(*v, "/force_script/jitter_period_s");
      if (pol.push < 0) rd.fail("/force_script/push_N", "must be >= 0");
      if (pol.jitter_sigma < 0) rd.fail("/force_script/jitter_N", "must be >= 0");
      if (!(pol.jitter_period > 0)) rd.fail("/force_script/jitter_period_s", "must be positive");
    } else {
      rd.fail("/force_script/kind", "expected 'zero', 'keyframes' or 'operator'");
    }
  }
  return sc;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  return parse_scenario(text, path.string(), path.parent_path());
}

// ---------------------------------------------------------------------------
// Building and running

struct BuildOptions {
  unsigned workers = 1;
  std::optional<std::filesystem::path> sdf_cache_dir;
};

inline std::filesystem::path sdf_cache_path(const std::filesystem::path& dir, Label label) {
  return dir / ("sdf_label" + std::to_string(label) + ".sdf");
}

struct BuiltScenario {
  SimulationSetup setup;
  SegmentTable segments;
};

inline LabeledVolume load_scenario_volume(const Scenario& sc) {
  if (sc.volume_path) return load_label_volume(*sc.volume_path);
  if (!sc.phantom) throw ValidationError("scenario has no volume source");
  Phantom ph = make_phantom(*sc.phantom);
  return {std::move(ph.volume), std::move(ph.segments)};
}

/// Loads or builds the signed field of `label`. With a cache directory the
/// field always goes through the f32 cache encoding, so cold and warm runs
/// see identical values.
inline std::shared_ptr<const SdfVolume> obtain_sdf(const LabelVolume& volume, Label label, const BuildOptions& opt) {
  if (!opt.sdf_cache_dir) return std::make_shared<const SdfVolume>(signed_distance(volume, label, opt.workers));
  const auto path = sdf_cache_path(*opt.sdf_cache_dir, label);
  if (std::filesystem::exists(path)) {
    SdfVolume cached = read_sdf_cache(path);
    if (cached.geometry == volume.geometry && cached.label == label)
      return std::make_shared<const SdfVolume>(std::move(cached));
  }
  const std::string bytes = format_sdf_cache(signed_distance(volume, label, opt.workers));
  write_file_bytes(path, bytes);
  return std::make_shared<const SdfVolume>(parse_sdf_cache(bytes));
}

inline BuiltScenario build_scenario(const Scenario& sc, const BuildOptions& opt = {}) {
  LabeledVolume lv = load_scenario_volume(sc);
  BuiltScenario out;
  out.segments = lv.segments;
  auto& s = out.setup;
  if (sc.matrix_label != 0 && lv.volume.count(sc.matrix_label) == 0)
    throw ValidationError("matrix_label " + std::to_string(sc.matrix_label) + " is absent from the volume");
  for (const auto& c : sc.constraints) {
    if (lv.volume.count(c.label) == 0)
      throw ValidationError("constraint label " + std::to_string(c.label) + " is absent from the volume");
    s.constraints.push_back({c.label, obtain_sdf(lv.volume, c.label, opt), c.params});
  }
  s.robot = sc.robot;
  s.q0 = sc.q0;
  s.tool = sc.tool;
  s.registration = sc.registration;
  s.gravity = sc.gravity;
  s.volume = std::move(lv.volume);
  s.matrix_label = sc.matrix_label;
  s.dt = sc.dt;
  s.vf_enabled = sc.vf_enabled;
  s.drill_on = sc.drill_on;
  s.clamp = sc.clamp;
  return out;
}

inline ForceScript make_force_script(const Scenario& sc) {
  switch (sc.force_script.kind) {
    case ForceScript::Kind::zero: return ForceScript::zero();
    case ForceScript::Kind::keyframes: return ForceScript::from_keyframes(sc.force_script.frames);
    case ForceScript::Kind::synthetic_operator: return ForceScript::synthetic_operator(sc.force_script.policy, sc.seed);
  }
  return ForceScript::zero();
}

struct RunResult {
  SessionTrace trace;
  Metrics metrics;
  double force_bound = 0.0;  // bound on |F_H| over the script
};

/// Runs the scenario for its full duration. `vf_override` replaces the
/// scenario's vf_enabled flag.
inline RunResult run_trajectory(const Scenario& sc, const BuildOptions& opt = {},
                                std::optional<bool> vf_override = std::nullopt) {
  BuiltScenario built = build_scenario(sc, opt);
  if (vf_override) built.setup.vf_enabled = *vf_override;
  Simulation sim(std::move(built.setup));
  ForceScript script = make_force_script(sc);
  run_script(sim, script, sc.tick_count());
  RunResult r;
  r.trace = sim.trace();
  r.metrics = sim.metrics();
  r.force_bound = script.force_bound();
  return r;
}

}  // namespace sdfvf
