#pragma once

// Distance-based virtual-fixture force, multi-anatomy aggregation and the
// compliance clamp that keeps the commanded motion from reversing the
// operator's push.

#include "sdfvf/distance_field.hpp"
#include "sdfvf/geometry.hpp"

#include <cmath>
#include <memory>
#include <vector>

namespace sdfvf {

struct ForceLawParams {
  double tau0 = 1.0;    // mm; below this the unpreferred direction is fully constrained
  double tauf = 4.0;    // mm; feedback starts inside this distance
  double lambda = 1.0;  // 1/mm; exponential decay rate between tau0 and tauf

  void validate() const {
    if (!(tau0 >= 0.0) || !(tau0 < tauf) || !std::isfinite(tauf))
      throw ValidationError("force law requires 0 <= tau0 < tauf");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ValidationError("force law requires lambda > 0");
  }

  static ForceLawParams dental_stone() { return {1.0, 4.0, 1.0}; }
  static ForceLawParams temporal_bone() { return {0.5, 4.0, 2.0}; }
};

struct AnatomyConstraint {
  Label label = 0;
  std::shared_ptr<const SdfVolume> sdf;
  ForceLawParams params;
};

struct AnatomyForce {
  Label label = 0;
  double distance = 0.0;  // clearance used by the force law, mm
  Vec3 force = Vec3::Zero();
};

struct ForceState {
  Vec3 hand_force = Vec3::Zero();
  Vec3 sdf_force = Vec3::Zero();
  Vec3 compliance_force = Vec3::Zero();
  std::vector<AnatomyForce> per_anatomy;
  double f_max = 0.0;
};

/// Piecewise law: full strength below tau0, exponential decay up to tauf,
/// zero at and beyond tauf. d == tau0 takes the exponential branch (same value).
inline Vec3 per_anatomy_force(double distance, const Vec3& away_dir, bool direction_valid, double f_max,
                              const ForceLawParams& params) {
  if (!direction_valid) return Vec3::Zero();
  if (distance < params.tau0) return f_max * away_dir;
  if (distance < params.tauf) return f_max * std::exp(params.lambda * (params.tau0 - distance)) * away_dir;
  return Vec3::Zero();
}

inline Vec3 per_anatomy_force(double distance, const Vec3& away_dir, double f_max, const ForceLawParams& params) {
  return per_anatomy_force(distance, away_dir, true, f_max, params);
}

/// Sums the per-anatomy terms with f_max = |hand_force|. `clearance_offset` is
/// subtracted from every sampled distance (burr radius in burr-surface mode).
/// The compliance force is left zero; see compliance_force().
inline ForceState total_sdf_force(const std::vector<AnatomyConstraint>& constraints, const Vec3& tip,
                                  const Vec3& hand_force, double clearance_offset = 0.0) {
  ForceState s;
  s.hand_force = hand_force;
  s.f_max = hand_force.norm();
  s.per_anatomy.reserve(constraints.size());
  for (const auto& c : constraints) {
    const DistanceQuery q = gradient(*c.sdf, tip);
    AnatomyForce term;
    term.label = c.label;
    term.distance = q.distance - clearance_offset;
    term.force = per_anatomy_force(term.distance, q.direction, q.valid, s.f_max, c.params);
    s.sdf_force += term.force;
    s.per_anatomy.push_back(term);
  }
  return s;
}

enum class ClampRule {
  // F_C = F_SDF unless that would reverse the hand's component along F_SDF,
  // in which case F_C cancels that component exactly.
  no_reversal,
  // Literal case order: F_C = F_SDF only when (F_H + F_SDF) . F_H,par < 0.
  literal,
};

/// Component of `hand_force` along `sdf_force` (zero when sdf_force is zero).
inline Vec3 parallel_component(const Vec3& hand_force, const Vec3& sdf_force) {
  const double n = sdf_force.norm();
  if (n == 0.0) return Vec3::Zero();
  const Vec3 u = sdf_force / n;
  return hand_force.dot(u) * u;
}

inline Vec3 compliance_force(const Vec3& hand_force, const Vec3& sdf_force, ClampRule rule = ClampRule::no_reversal) {
  if (sdf_force.isZero(0.0)) return Vec3::Zero();
  const Vec3 h_par = parallel_component(hand_force, sdf_force);
  const double test = (hand_force + sdf_force).dot(h_par);
  if (rule == ClampRule::literal) return test < 0.0 ? sdf_force : Vec3(-h_par);
  return test >= 0.0 ? sdf_force : Vec3(-h_par);
}

/// total_sdf_force followed by the clamp.
inline ForceState evaluate_guidance(const std::vector<AnatomyConstraint>& constraints, const Vec3& tip,
                                    const Vec3& hand_force, double clearance_offset = 0.0,
                                    ClampRule rule = ClampRule::no_reversal) {
  ForceState s = total_sdf_force(constraints, tip, hand_force, clearance_offset);
  s.compliance_force = compliance_force(s.hand_force, s.sdf_force, rule);
  return s;
}

}  // namespace sdfvf
