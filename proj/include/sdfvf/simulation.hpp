#pragma once

// Closed-loop virtual drill: admittance-controlled robot, guidance forces,
// volumetric removal, tick trace and safety/efficiency metrics.

#include "sdfvf/calibration.hpp"
#include "sdfvf/guidance_force.hpp"
#include "sdfvf/kinematics.hpp"
#include "sdfvf/volume_io.hpp"

#include <json.hpp>

#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace sdfvf {

enum class ClearanceMode { tip_point, burr_surface };

struct DrillTool {
  Vec3 tip_offset = Vec3::Zero();  // mm, end-effector frame
  double burr_radius = 1.0;        // mm
  ClearanceMode mode = ClearanceMode::burr_surface;

  double clearance_offset() const { return mode == ClearanceMode::burr_surface ? burr_radius : 0.0; }
};

using RemovalCounts = std::map<Label, std::size_t>;

/// Clears every voxel whose center lies in the closed ball (tip, burr_radius).
/// Returns removed counts per non-background label.
inline RemovalCounts drill_removal(LabelVolume& volume, const Vec3& tip, double burr_radius) {
  if (burr_radius < 0) throw ValidationError("burr radius must be non-negative");
  RemovalCounts removed;
  const auto& g = volume.geometry;
  std::array<int, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    const double f0 = std::ceil((tip[a] - burr_radius - g.origin[a]) / g.spacing[a]);
    const double f1 = std::floor((tip[a] + burr_radius - g.origin[a]) / g.spacing[a]);
    if (!(f1 >= 0) || !(f0 <= g.dims[a] - 1) || f0 > f1) return removed;
    lo[a] = static_cast<int>(std::max(0.0, f0));
    hi[a] = static_cast<int>(std::min<double>(g.dims[a] - 1, f1));
  }
  const double r2 = burr_radius * burr_radius;
  for (int k = lo[2]; k <= hi[2]; ++k)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int i = lo[0]; i <= hi[0]; ++i) {
        Label& l = volume.at(i, j, k);
        if (l == 0) continue;
        if ((g.center(i, j, k) - tip).squaredNorm() <= r2) {
          ++removed[l];
          l = 0;
        }
      }
  return removed;
}

struct TickRecord {
  double time = 0.0;  // s, end of the tick
  JointVector q;
  Vec3 tip = Vec3::Zero();         // mm, volume frame, after the update
  std::vector<double> clearance;   // mm per anatomy, at `tip`
  Vec3 hand_force = Vec3::Zero();  // N, after gravity compensation
  Vec3 sdf_force = Vec3::Zero();
  Vec3 compliance_force = Vec3::Zero();
  bool vf_enabled = false;
  bool drill_on = false;
  RemovalCounts removed;
};

struct SessionTrace {
  double dt = 1e-3;
  std::vector<Label> labels;
  std::vector<double> tau0;
  Label matrix_label = 0;
  double voxel_volume = 1.0;
  std::vector<TickRecord> records;
};

struct Metrics {
  double drilled_volume = 0.0;              // mm^3 of matrix removed
  std::map<Label, double> damage_volume;    // mm^3 removed per anatomy
  std::map<Label, double> min_clearance;    // mm, empty when no ticks ran
  double duration = 0.0;                    // s
  std::size_t ticks = 0;
  std::size_t breach_ticks = 0;             // ticks with any clearance < tau0
  double mean_compliance_force = 0.0;       // N
};

inline Metrics compute_metrics(const SessionTrace& trace) {
  Metrics m;
  m.ticks = trace.records.size();
  m.duration = static_cast<double>(m.ticks) * trace.dt;
  std::map<Label, std::size_t> removed;
  double fc_sum = 0.0;
  for (const auto l : trace.labels) m.damage_volume[l] = 0.0;
  for (const auto& r : trace.records) {
    for (const auto& [l, n] : r.removed) removed[l] += n;
    bool breach = false;
    for (std::size_t a = 0; a < trace.labels.size(); ++a) {
      const Label l = trace.labels[a];
      const double d = r.clearance[a];
      auto it = m.min_clearance.find(l);
      if (it == m.min_clearance.end()) m.min_clearance[l] = d;
      else it->second = std::min(it->second, d);
      if (d < trace.tau0[a]) breach = true;
    }
    if (breach) ++m.breach_ticks;
    fc_sum += r.compliance_force.norm();
  }
  if (m.ticks > 0) m.mean_compliance_force = fc_sum / static_cast<double>(m.ticks);
  if (auto it = removed.find(trace.matrix_label); trace.matrix_label != 0 && it != removed.end())
    m.drilled_volume = static_cast<double>(it->second) * trace.voxel_volume;
  for (const auto l : trace.labels)
    if (auto it = removed.find(l); it != removed.end())
      m.damage_volume[l] = static_cast<double>(it->second) * trace.voxel_volume;
  return m;
}

// ---------------------------------------------------------------------------
// Force scripts

struct Keyframe {
  double t = 0.0;
  Vec3 force = Vec3::Zero();
};

/// Open-loop synthetic operator: constant push toward `target` (direction
/// fixed from the start tip) plus piecewise-constant tangential jitter,
/// truncated at 3 sigma per component.
struct OperatorPolicy {
  Vec3 target = Vec3::Zero();
  double push = 5.0;             // N
  double jitter_sigma = 0.0;     // N
  double jitter_period = 0.1;    // s
};

class ForceScript {
 public:
  enum class Kind { zero, keyframes, synthetic_operator };

  static ForceScript zero() { return ForceScript(); }

  static ForceScript from_keyframes(std::vector<Keyframe> frames) {
    ForceScript s;
    s.kind_ = Kind::keyframes;
    std::stable_sort(frames.begin(), frames.end(), [](const Keyframe& a, const Keyframe& b) { return a.t < b.t; });
    s.frames_ = std::move(frames);
    return s;
  }

  static ForceScript synthetic_operator(const OperatorPolicy& policy, std::uint64_t seed) {
    ForceScript s;
    s.kind_ = Kind::synthetic_operator;
    s.policy_ = policy;
    s.rng_.seed(seed);
    return s;
  }

  Kind kind() const { return kind_; }
  const OperatorPolicy& policy() const { return policy_; }

  /// Fixes the push direction for an operator script.
  void bind(const Vec3& start_tip) {
    const Vec3 d = policy_.target - start_tip;
    direction_ = d.norm() > 0 ? Vec3(d.normalized()) : Vec3::Zero();
    const Vec3 helper = std::abs(direction_.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    e1_ = direction_.cross(helper).normalized();
    e2_ = direction_.cross(e1_);
    bound_ = true;
  }

  /// Force applied during tick `tick` (which starts at time tick*dt).
  Vec3 force_at(std::size_t tick, double dt) {
    const double t = static_cast<double>(tick) * dt;
    switch (kind_) {
      case Kind::zero: return Vec3::Zero();
      case Kind::keyframes: return interpolate(t);
      case Kind::synthetic_operator: {
        if (!bound_) throw ValidationError("operator force script used before bind()");
        if (direction_.isZero(0.0)) return Vec3::Zero();
        Vec3 f = policy_.push * direction_;
        if (policy_.jitter_sigma > 0) {
          const auto period = static_cast<std::size_t>(std::floor(t / policy_.jitter_period + 1e-9));
          const auto& j = jitter(period);
          f += j[0] * e1_ + j[1] * e2_;
        }
        return f;
      }
    }
    return Vec3::Zero();
  }

  /// Upper bound on |F| over the whole script.
  double force_bound() const {
    switch (kind_) {
      case Kind::zero: return 0.0;
      case Kind::keyframes: {
        double m = 0.0;
        for (const auto& f : frames_) m = std::max(m, f.force.norm());
        return m;
      }
      case Kind::synthetic_operator: {
        const double j = 3.0 * policy_.jitter_sigma;
        return std::sqrt(policy_.push * policy_.push + 2.0 * j * j);
      }
    }
    return 0.0;
  }

 private:
  Vec3 interpolate(double t) const {
    if (frames_.empty()) return Vec3::Zero();
    if (t <= frames_.front().t) return frames_.front().force;
    if (t >= frames_.back().t) return frames_.back().force;
    auto hi = std::upper_bound(frames_.begin(), frames_.end(), t, [](double v, const Keyframe& k) { return v < k.t; });
    auto lo = hi - 1;
    const double span = hi->t - lo->t;
    const double w = span > 0 ? (t - lo->t) / span : 1.0;
    return (1.0 - w) * lo->force + w * hi->force;
  }

  const std::array<double, 2>& jitter(std::size_t period) {
    while (jitter_.size() <= period) {
      const double limit = 3.0 * policy_.jitter_sigma;
      std::array<double, 2> v{};
      for (auto& c : v) c = std::clamp(normal_(rng_) * policy_.jitter_sigma, -limit, limit);
      jitter_.push_back(v);
    }
    return jitter_[period];
  }

  Kind kind_ = Kind::zero;
  std::vector<Keyframe> frames_;
  OperatorPolicy policy_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::vector<std::array<double, 2>> jitter_;
  Vec3 direction_ = Vec3::Zero(), e1_ = Vec3::Zero(), e2_ = Vec3::Zero();
  bool bound_ = false;
};

// ---------------------------------------------------------------------------
// Simulation

struct SimulationSetup {
  RobotModel robot;
  JointVector q0;
  DrillTool tool;
  RigidTransform registration;  // robot base -> volume frame
  std::optional<GravityModel> gravity;
  std::vector<AnatomyConstraint> constraints;
  LabelVolume volume;
  Label matrix_label = 0;
  double dt = 1e-3;
  bool vf_enabled = true;
  bool drill_on = true;
  ClampRule clamp = ClampRule::no_reversal;
};

class Simulation {
 public:
  explicit Simulation(SimulationSetup setup) : setup_(std::move(setup)) {
    setup_.robot.validate();
    if (setup_.q0.size() != setup_.robot.dof()) throw ValidationError("q0 length does not match robot joint count");
    if (!(setup_.dt > 0)) throw ValidationError("dt must be positive");
    if (setup_.tool.burr_radius < 0) throw ValidationError("burr radius must be non-negative");
    for (const auto& c : setup_.constraints) {
      c.params.validate();
      if (!c.sdf || c.sdf->label != c.label) throw ValidationError("constraint SDF does not match its label");
    }
    if (setup_.gravity) setup_.gravity->validate();
    reset();
  }

  /// Restores the initial joint state, volume, toggles and an empty trace.
  void reset() {
    q_ = setup_.robot.clamp(setup_.q0);
    volume_ = setup_.volume;
    vf_enabled_ = setup_.vf_enabled;
    drill_on_ = setup_.drill_on;
    trace_ = SessionTrace{};
    trace_.dt = setup_.dt;
    trace_.matrix_label = setup_.matrix_label;
    trace_.voxel_volume = setup_.volume.geometry.voxel_volume();
    for (const auto& c : setup_.constraints) {
      trace_.labels.push_back(c.label);
      trace_.tau0.push_back(c.params.tau0);
    }
    removed_total_.clear();
  }

  const TickRecord& step(const Vec3& raw_force) {
    const RigidTransform ee = forward_kinematics(setup_.robot, q_);
    const Vec3 tip = setup_.registration * (ee * setup_.tool.tip_offset);

    Vec3 hand = raw_force;
    if (setup_.gravity) {
      const auto uv = orientation_params(ee.rotation);
      hand = compensate(*setup_.gravity, uv[0], uv[1], raw_force);
    }

    TickRecord rec;
    rec.hand_force = hand;
    rec.vf_enabled = vf_enabled_;
    rec.drill_on = drill_on_;
    Vec3 compliance = Vec3::Zero();
    if (vf_enabled_ && !setup_.constraints.empty()) {
      const Mat3& R = setup_.registration.rotation;
      const ForceState fs = evaluate_guidance(setup_.constraints, tip, R * hand, setup_.tool.clearance_offset(),
                                              setup_.clamp);
      rec.sdf_force = R.transpose() * fs.sdf_force;
      compliance = R.transpose() * fs.compliance_force;
      rec.compliance_force = compliance;
    }

    const JointVector dq = vf_enabled_ ? solve_admittance(setup_.robot, q_, hand, compliance, setup_.dt)
                                       : solve_admittance(setup_.robot, q_, hand, setup_.dt);
    q_ = setup_.robot.clamp(q_ + dq * setup_.dt);

    rec.q = q_;
    rec.tip = current_tip();
    rec.clearance = clearances(rec.tip);
    if (drill_on_) {
      rec.removed = drill_removal(volume_, rec.tip, setup_.tool.burr_radius);
      for (const auto& [l, n] : rec.removed) removed_total_[l] += n;
    }
    rec.time = static_cast<double>(trace_.records.size() + 1) * setup_.dt;
    trace_.records.push_back(std::move(rec));
    return trace_.records.back();
  }

  Vec3 current_tip() const {
    return setup_.registration * (forward_kinematics(setup_.robot, q_) * setup_.tool.tip_offset);
  }

  std::vector<double> clearances(const Vec3& tip) const {
    std::vector<double> out;
    out.reserve(setup_.constraints.size());
    for (const auto& c : setup_.constraints)
      out.push_back(sample_trilinear(*c.sdf, tip) - setup_.tool.clearance_offset());
    return out;
  }

  void set_vf_enabled(bool on) { vf_enabled_ = on; }
  void set_drill_on(bool on) { drill_on_ = on; }
  bool vf_enabled() const { return vf_enabled_; }
  bool drill_on() const { return drill_on_; }

  const JointVector& q() const { return q_; }
  const LabelVolume& volume() const { return volume_; }
  const SessionTrace& trace() const { return trace_; }
  const SimulationSetup& setup() const { return setup_; }
  double time() const { return static_cast<double>(trace_.records.size()) * setup_.dt; }
  std::size_t tick_count() const { return trace_.records.size(); }
  const std::map<Label, std::size_t>& removed_total() const { return removed_total_; }

  Metrics metrics() const { return compute_metrics(trace_); }

 private:
  SimulationSetup setup_;
  JointVector q_;
  LabelVolume volume_;
  bool vf_enabled_ = true;
  bool drill_on_ = true;
  SessionTrace trace_;
  std::map<Label, std::size_t> removed_total_;
};

/// Runs `ticks` steps with forces from `script` (bound to the current tip).
inline void run_script(Simulation& sim, ForceScript& script, std::size_t ticks) {
  if (script.kind() == ForceScript::Kind::synthetic_operator) script.bind(sim.current_tip());
  const double dt = sim.setup().dt;
  for (std::size_t k = 0; k < ticks; ++k) sim.step(script.force_at(k, dt));
}

// ---------------------------------------------------------------------------
// Serialization (JSON lines: one header record then one record per tick)

namespace detail {

inline nlohmann::ordered_json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Vec3 json_to_vec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ValidationError("expected a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace detail

inline std::string trace_header_line(const SessionTrace& trace) {
  nlohmann::ordered_json h;
  h["type"] = "header";
  h["dt"] = trace.dt;
  h["labels"] = trace.labels;
  h["tau0"] = trace.tau0;
  h["matrix_label"] = trace.matrix_label;
  h["voxel_volume_mm3"] = trace.voxel_volume;
  return h.dump();
}

inline std::string trace_record_line(const TickRecord& r) {
  nlohmann::ordered_json j;
  j["t"] = r.time;
  j["q"] = std::vector<double>(r.q.data(), r.q.data() + r.q.size());
  j["tip"] = detail::vec_json(r.tip);
  j["d"] = r.clearance;
  j["f_h"] = detail::vec_json(r.hand_force);
  j["f_sdf"] = detail::vec_json(r.sdf_force);
  j["f_c"] = detail::vec_json(r.compliance_force);
  j["vf"] = r.vf_enabled;
  j["drill"] = r.drill_on;
  if (!r.removed.empty()) {
    nlohmann::ordered_json rem = nlohmann::ordered_json::object();
    for (const auto& [l, n] : r.removed) rem[std::to_string(l)] = n;
    j["removed"] = rem;
  }
  return j.dump();
}

inline void write_trace_jsonl(const SessionTrace& trace, std::ostream& out) {
  out << trace_header_line(trace) << '\n';
  for (const auto& r : trace.records) out << trace_record_line(r) << '\n';
}

inline std::string trace_to_jsonl(const SessionTrace& trace) {
  std::ostringstream os;
  write_trace_jsonl(trace, os);
  return os.str();
}

/// Parses a trace written by write_trace_jsonl. An empty input yields an empty trace.
inline SessionTrace read_trace_jsonl(std::istream& in) {
  SessionTrace t;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.value("type", std::string()) == "header") {
        t.dt = j.at("dt").get<double>();
        t.labels = j.at("labels").get<std::vector<Label>>();
        t.tau0 = j.at("tau0").get<std::vector<double>>();
        t.matrix_label = j.at("matrix_label").get<Label>();
        t.voxel_volume = j.at("voxel_volume_mm3").get<double>();
        if (t.labels.size() != t.tau0.size()) throw ValidationError("labels/tau0 length mismatch");
        have_header = true;
        continue;
      }
      if (!have_header) throw ValidationError("tick record before header");
      TickRecord r;
      r.time = j.at("t").get<double>();
      const auto q = j.at("q").get<std::vector<double>>();
      r.q = Eigen::Map<const Eigen::VectorXd>(q.data(), static_cast<Eigen::Index>(q.size()));
      r.tip = detail::json_to_vec(j.at("tip"));
      r.clearance = j.at("d").get<std::vector<double>>();
      if (r.clearance.size() != t.labels.size()) throw ValidationError("clearance count does not match labels");
      r.hand_force = detail::json_to_vec(j.at("f_h"));
      r.sdf_force = detail::json_to_vec(j.at("f_sdf"));
      r.compliance_force = detail::json_to_vec(j.at("f_c"));
      r.vf_enabled = j.at("vf").get<bool>();
      r.drill_on = j.at("drill").get<bool>();
      if (j.contains("removed"))
        for (const auto& [k, v] : j["removed"].items())
          r.removed[static_cast<Label>(std::stoul(k))] = v.get<std::size_t>();
      if (!t.records.empty() && !(r.time > t.records.back().time))
        throw ValidationError("trace times must be strictly increasing");
      t.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("corrupt trace at line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("corrupt trace at line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::logic_error& e) {
      throw ValidationError("corrupt trace at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return t;
}

inline nlohmann::ordered_json metrics_to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["duration_s"] = m.duration;
  j["ticks"] = m.ticks;
  j["drilled_volume_mm3"] = m.drilled_volume;
  nlohmann::ordered_json dmg = nlohmann::ordered_json::object(), clr = nlohmann::ordered_json::object();
  for (const auto& [l, v] : m.damage_volume) dmg[std::to_string(l)] = v;
  for (const auto& [l, v] : m.min_clearance) clr[std::to_string(l)] = v;
  j["damage_volume_mm3"] = dmg;
  j["min_clearance_mm"] = clr;
  j["breach_ticks"] = m.breach_ticks;
  j["mean_compliance_force_N"] = m.mean_compliance_force;
  return j;
}

/// CSV columns: t, tip_x, tip_y, tip_z, f_h_x, f_h_y, f_h_z, f_sdf_x, f_sdf_y,
/// f_sdf_z, f_c_x, f_c_y, f_c_z, vf, drill, then d_<label> per anatomy.
inline void write_trace_csv(const SessionTrace& trace, std::ostream& out) {
  out << "t,tip_x,tip_y,tip_z,f_h_x,f_h_y,f_h_z,f_sdf_x,f_sdf_y,f_sdf_z,f_c_x,f_c_y,f_c_z,vf,drill";
  for (const auto l : trace.labels) out << ",d_" << l;
  out << '\n';
  auto v3 = [&out](const Vec3& v) {
    out << ',' << format_number(v.x()) << ',' << format_number(v.y()) << ',' << format_number(v.z());
  };
  for (const auto& r : trace.records) {
    out << format_number(r.time);
    v3(r.tip);
    v3(r.hand_force);
    v3(r.sdf_force);
    v3(r.compliance_force);
    out << ',' << (r.vf_enabled ? 1 : 0) << ',' << (r.drill_on ? 1 : 0);
    for (double d : r.clearance) out << ',' << format_number(d);
    out << '\n';
  }
}

}  // namespace sdfvf
