#pragma once

// Serial-chain kinematics and the admittance solve used to turn applied
// forces into joint rates.

#include "sdfvf/geometry.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace sdfvf {

enum class JointKind { prismatic, revolute };

struct Joint {
  JointKind kind = JointKind::revolute;
  Vec3 axis = Vec3::UnitZ();  // in the joint frame
  RigidTransform origin;      // previous frame -> joint frame (at q = 0)
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
};

using JointVector = Eigen::VectorXd;
using Jacobian = Eigen::Matrix<double, 6, Eigen::Dynamic>;

struct RobotModel {
  std::vector<Joint> joints;
  RigidTransform flange;  // last joint frame -> end-effector frame
  // Diagonal admittance gains: (mm/s)/N for rows 0-2, (rad/s)/(N mm) for rows 3-5.
  Vec6 gains = Vec6::Ones();
  double damping = 1e-6;

  int dof() const { return static_cast<int>(joints.size()); }

  void validate() const {
    if (joints.empty()) throw ValidationError("robot needs at least one joint");
    for (const auto& j : joints) {
      if (std::abs(j.axis.norm() - 1.0) > 1e-9) throw ValidationError("joint axes must be unit vectors");
      if (!(j.lower <= j.upper)) throw ValidationError("joint limits must be ordered");
    }
    if ((gains.array() <= 0).any()) throw ValidationError("admittance gains must be positive");
    if (!(damping >= 0)) throw ValidationError("damping must be non-negative");
  }

  double max_linear_gain() const { return gains.head<3>().maxCoeff(); }

  JointVector clamp(const JointVector& q) const {
    JointVector out = q;
    for (int i = 0; i < dof(); ++i) out[i] = std::clamp(q[i], joints[i].lower, joints[i].upper);
    return out;
  }
};

namespace detail {

inline RigidTransform joint_motion(const Joint& j, double q) {
  RigidTransform m;
  if (j.kind == JointKind::prismatic) {
    m.translation = j.axis * q;
  } else {
    m.rotation = Eigen::AngleAxisd(q, j.axis).toRotationMatrix();
  }
  return m;
}

}  // namespace detail

inline RigidTransform forward_kinematics(const RobotModel& model, const JointVector& q) {
  RigidTransform t;
  for (int i = 0; i < model.dof(); ++i) t = t * model.joints[i].origin * detail::joint_motion(model.joints[i], q[i]);
  return t * model.flange;
}

/// Geometric Jacobian at the end-effector origin: rows 0-2 linear (mm per unit
/// joint motion), rows 3-5 angular (rad per unit joint motion), base frame.
inline Jacobian jacobian(const RobotModel& model, const JointVector& q) {
  const int m = model.dof();
  std::vector<Vec3> axes(m), points(m);
  RigidTransform t;
  for (int i = 0; i < m; ++i) {
    const RigidTransform frame = t * model.joints[i].origin;
    axes[i] = frame.rotation * model.joints[i].axis;
    points[i] = frame.translation;
    t = frame * detail::joint_motion(model.joints[i], q[i]);
  }
  const Vec3 ee = (t * model.flange).translation;
  Jacobian J(6, m);
  for (int i = 0; i < m; ++i) {
    if (model.joints[i].kind == JointKind::prismatic) {
      J.col(i) << axes[i], Vec3::Zero();
    } else {
      J.col(i) << axes[i].cross(ee - points[i]), axes[i];
    }
  }
  return J;
}

/// Damped least-squares minimizer of |G w - J dq|:
/// dq = J^T (J J^T + damping^2 I)^-1 G w.
/// With dt > 0 the rates are scaled back per joint so q + dq dt stays in limits.
inline JointVector solve_admittance_wrench(const RobotModel& model, const JointVector& q, const Vec6& wrench,
                                           double dt = 0.0) {
  const Jacobian J = jacobian(model, q);
  const Vec6 target = model.gains.asDiagonal() * wrench;
  Eigen::Matrix<double, 6, 6> A = J * J.transpose();
  A.diagonal().array() += model.damping * model.damping;
  const Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(A);
  if (ldlt.info() != Eigen::Success) throw NumericalError("admittance system factorization failed");
  JointVector dq = J.transpose() * ldlt.solve(target);
  if (dt > 0.0) {
    for (int i = 0; i < model.dof(); ++i) {
      const double next = q[i] + dq[i] * dt;
      if (next > model.joints[i].upper) dq[i] = (model.joints[i].upper - q[i]) / dt;
      if (next < model.joints[i].lower) dq[i] = (model.joints[i].lower - q[i]) / dt;
    }
  }
  return dq;
}

inline Vec6 force_wrench(const Vec3& force) {
  Vec6 w = Vec6::Zero();
  w.head<3>() = force;
  return w;
}

/// Hand-force-only admittance (no compliance term).
inline JointVector solve_admittance(const RobotModel& model, const JointVector& q, const Vec3& hand_force,
                                    double dt = 0.0) {
  return solve_admittance_wrench(model, q, force_wrench(hand_force), dt);
}

/// Admittance with the compliance force added to the hand force.
inline JointVector solve_admittance(const RobotModel& model, const JointVector& q, const Vec3& hand_force,
                                    const Vec3& compliance, double dt = 0.0) {
  return solve_admittance_wrench(model, q, force_wrench(hand_force + compliance), dt);
}

// ---------------------------------------------------------------------------
// Stock robots

/// Three orthogonal prismatic axes (x, y, z); q is the EE position relative
/// to `base` in mm.
inline RobotModel make_gantry(const Vec3& base = Vec3::Zero(), double linear_gain = 1.0, double damping = 1e-6) {
  RobotModel r;
  for (int a = 0; a < 3; ++a) {
    Joint j;
    j.kind = JointKind::prismatic;
    j.axis = Vec3::Unit(a);
    if (a == 0) j.origin.translation = base;
    r.joints.push_back(j);
  }
  r.gains << linear_gain, linear_gain, linear_gain, 0.01, 0.01, 0.01;
  r.damping = damping;
  return r;
}

/// Two revolute z joints in the xy-plane with link lengths l1, l2 (mm).
inline RobotModel make_planar_2link(double l1, double l2, double damping = 1e-3) {
  RobotModel r;
  Joint j1;
  j1.axis = Vec3::UnitZ();
  Joint j2 = j1;
  j2.origin.translation = Vec3(l1, 0, 0);
  r.joints = {j1, j2};
  r.flange.translation = Vec3(l2, 0, 0);
  r.gains << 1, 1, 1, 0.01, 0.01, 0.01;
  r.damping = damping;
  return r;
}

/// Six-revolute anthropomorphic arm (PUMA-like proportions, mm) for
/// Jacobian stress tests.
inline RobotModel make_arm6(double damping = 1e-3) {
  RobotModel r;
  auto rev = [](const Vec3& axis, const Vec3& offset) {
    Joint j;
    j.kind = JointKind::revolute;
    j.axis = axis;
    j.origin.translation = offset;
    j.lower = -std::numbers::pi;
    j.upper = std::numbers::pi;
    return j;
  };
  r.joints = {rev(Vec3::UnitZ(), Vec3(0, 0, 300)),  rev(Vec3::UnitY(), Vec3(0, 0, 100)),
              rev(Vec3::UnitY(), Vec3(0, 0, 400)),  rev(Vec3::UnitZ(), Vec3(0, 0, 150)),
              rev(Vec3::UnitY(), Vec3(0, 0, 250)),  rev(Vec3::UnitZ(), Vec3(0, 0, 80))};
  r.flange.translation = Vec3(0, 0, 120);
  r.gains << 1, 1, 1, 0.01, 0.01, 0.01;
  r.damping = damping;
  return r;
}

}  // namespace sdfvf
