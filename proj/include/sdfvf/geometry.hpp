#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sdfvf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Label = std::uint16_t;

// Error taxonomy. The CLI maps these onto its exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};

/// Axis-aligned voxel lattice. Voxel (0,0,0) has its center at `origin`;
/// storage is x-fastest.
struct GridGeometry {
  std::array<int, 3> dims{1, 1, 1};
  Vec3 spacing = Vec3::Ones();
  Vec3 origin = Vec3::Zero();

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }
  Vec3 center(int i, int j, int k) const {
    return origin + Vec3(i * spacing.x(), j * spacing.y(), k * spacing.z());
  }
  double voxel_volume() const { return spacing.x() * spacing.y() * spacing.z(); }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw ValidationError("grid dims must be >= 1 on every axis");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw ValidationError("grid spacing must be positive and finite on every axis");
      if (!std::isfinite(origin[a])) throw ValidationError("grid origin must be finite");
    }
  }

  friend bool operator==(const GridGeometry& a, const GridGeometry& b) {
    return a.dims == b.dims && a.spacing == b.spacing && a.origin == b.origin;
  }
};

/// Proper rigid motion x -> R x + t (translation in mm).
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_quaternion(const Eigen::Quaterniond& q, const Vec3& t) {
    return {q.normalized().toRotationMatrix(), t};
  }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }

  RigidTransform inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(rotation).normalized(); }

  bool is_proper(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).norm() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

/// Angle in radians of the relative rotation between two rotation matrices.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  Eigen::AngleAxisd aa(a.transpose() * b);
  return std::abs(aa.angle());
}

}  // namespace sdfvf
