#pragma once

// Pivot calibration, AX = XB hand-eye calibration, correspondence-based rigid
// registration and a tensor-product Bernstein model of orientation-dependent
// force bias (drill weight + cable drag).

#include "sdfvf/geometry.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace sdfvf {

struct PivotResult {
  Vec3 tip_offset = Vec3::Zero();   // in the tracked (marker) frame
  Vec3 pivot_point = Vec3::Zero();  // in the tracker frame
  double rmse = 0.0;                // mm, RMS of per-pose residual norms
  std::size_t sample_count = 0;
};

/// Least squares over R_i t_tip + p_i = p_pivot (column-pivoting QR).
inline PivotResult pivot_calibrate(const std::vector<RigidTransform>& poses) {
  const auto n = poses.size();
  if (n < 3) throw NumericalError("pivot calibration needs at least 3 poses");
  Eigen::MatrixXd A(3 * n, 6);
  Eigen::VectorXd b(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    A.block<3, 3>(3 * i, 0) = poses[i].rotation;
    A.block<3, 3>(3 * i, 3) = -Mat3::Identity();
    b.segment<3>(3 * i) = -poses[i].translation;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < 6)
    throw NumericalError("pivot poses are rank-deficient (rotations must span more than one axis)");
  const Eigen::VectorXd x = qr.solve(b);
  PivotResult r;
  r.tip_offset = x.head<3>();
  r.pivot_point = x.tail<3>();
  r.sample_count = n;
  double sum = 0.0;
  for (const auto& p : poses) sum += (p * r.tip_offset - r.pivot_point).squaredNorm();
  r.rmse = std::sqrt(sum / static_cast<double>(n));
  return r;
}

struct RegistrationResult {
  RigidTransform transform;  // maps P onto Q
  double rmse = 0.0;
};

/// Least-squares rotation R (proper) maximizing sum q_i^T R p_i for
/// already-centered inputs. Reflection guard flips the weakest direction.
inline Mat3 fit_rotation(const Eigen::Matrix3Xd& p, const Eigen::Matrix3Xd& q) {
  const Mat3 H = p * q.transpose();
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  D(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixV() * D * svd.matrixU().transpose();
}

inline RegistrationResult register_points(const std::vector<Vec3>& P, const std::vector<Vec3>& Q) {
  if (P.size() != Q.size()) throw ValidationError("point sets differ in size");
  if (P.size() < 3) throw ValidationError("registration needs at least 3 correspondences");
  const auto n = static_cast<Eigen::Index>(P.size());
  Eigen::Matrix3Xd p(3, n), q(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.col(i) = P[static_cast<std::size_t>(i)];
    q.col(i) = Q[static_cast<std::size_t>(i)];
  }
  const Vec3 pc = p.rowwise().mean();
  const Vec3 qc = q.rowwise().mean();
  p.colwise() -= pc;
  q.colwise() -= qc;

  Eigen::JacobiSVD<Eigen::Matrix3Xd> shape(p);
  const auto sv = shape.singularValues();
  if (sv[0] == 0.0 || sv[1] <= 1e-9 * sv[0]) throw NumericalError("source points are collinear or coincident");

  RegistrationResult r;
  r.transform.rotation = fit_rotation(p, q);
  r.transform.translation = qc - r.transform.rotation * pc;
  double sum = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) sum += (r.transform * P[i] - Q[i]).squaredNorm();
  r.rmse = std::sqrt(sum / static_cast<double>(P.size()));
  return r;
}

struct MotionPair {
  RigidTransform a;  // e.g. end-effector motion between two stations
  RigidTransform b;  // the matching tracked-marker motion
};

struct HandEyeResult {
  RigidTransform x;
  double rot_rmse_deg = 0.0;
  double trans_rmse_mm = 0.0;
  std::size_t sample_count = 0;
};

/// Residual statistics of A X = X B over the pairs.
inline void hand_eye_residuals(const std::vector<MotionPair>& pairs, const RigidTransform& x, double& rot_rmse_deg,
                               double& trans_rmse_mm) {
  double rot = 0.0, trans = 0.0;
  for (const auto& p : pairs) {
    const RigidTransform lhs = p.a * x;
    const RigidTransform rhs = x * p.b;
    const double ang = rotation_angle_between(lhs.rotation, rhs.rotation) * 180.0 / std::numbers::pi;
    rot += ang * ang;
    trans += (lhs.translation - rhs.translation).squaredNorm();
  }
  const double n = static_cast<double>(pairs.size());
  rot_rmse_deg = std::sqrt(rot / n);
  trans_rmse_mm = std::sqrt(trans / n);
}

/// Two-stage closed form: rotation from the log-map axes (alpha_i = R_X beta_i),
/// then translation from the stacked (R_A - I) t_X = R_X t_B - t_A.
inline HandEyeResult hand_eye_calibrate(const std::vector<MotionPair>& pairs) {
  if (pairs.size() < 2) throw NumericalError("hand-eye calibration needs at least 2 motion pairs");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::Matrix3Xd alpha(3, n), beta(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& pr = pairs[static_cast<std::size_t>(i)];
    const Eigen::AngleAxisd aa(pr.a.rotation), ab(pr.b.rotation);
    alpha.col(i) = aa.angle() * aa.axis();
    beta.col(i) = ab.angle() * ab.axis();
  }
  // Non-parallel motion axes are required for a unique rotation.
  Eigen::JacobiSVD<Eigen::Matrix3Xd> spread(alpha);
  const auto sv = spread.singularValues();
  if (sv[0] < 1e-12 || sv[1] <= 1e-6 * sv[0])
    throw NumericalError("hand-eye motions are degenerate (rotation axes are parallel)");

  HandEyeResult r;
  r.x.rotation = fit_rotation(beta, alpha);

  Eigen::MatrixXd C(3 * n, 3);
  Eigen::VectorXd d(3 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& pr = pairs[static_cast<std::size_t>(i)];
    C.block<3, 3>(3 * i, 0) = pr.a.rotation - Mat3::Identity();
    d.segment<3>(3 * i) = r.x.rotation * pr.b.translation - pr.a.translation;
  }
  r.x.translation = C.colPivHouseholderQr().solve(d);
  r.sample_count = pairs.size();
  hand_eye_residuals(pairs, r.x, r.rot_rmse_deg, r.trans_rmse_mm);
  return r;
}

// ---------------------------------------------------------------------------
// Bernstein force-bias model

inline double binomial(int n, int k) {
  double c = 1.0;
  for (int i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return c;
}

inline double bernstein(int degree, int i, double t) {
  return binomial(degree, i) * std::pow(t, i) * std::pow(1.0 - t, degree - i);
}

struct GravityModel {
  int degree = 3;
  // coefficients[axis] is (degree+1)^2 long, index i*(degree+1)+j for B_i(u) B_j(v).
  std::array<std::vector<double>, 3> coefficients;
  double fit_rmse = 0.0;

  static GravityModel zero(int degree = 3) {
    GravityModel m;
    m.degree = degree;
    for (auto& c : m.coefficients) c.assign(static_cast<std::size_t>((degree + 1) * (degree + 1)), 0.0);
    return m;
  }

  void validate() const {
    if (degree < 0) throw ValidationError("gravity model degree must be >= 0");
    for (const auto& c : coefficients)
      if (c.size() != static_cast<std::size_t>((degree + 1) * (degree + 1)))
        throw ValidationError("gravity model coefficient grid must be (degree+1)^2 per axis");
  }

  Vec3 evaluate(double u, double v) const {
    Vec3 out = Vec3::Zero();
    const int n = degree + 1;
    for (int i = 0; i < n; ++i) {
      const double bu = bernstein(degree, i, u);
      for (int j = 0; j < n; ++j) {
        const double w = bu * bernstein(degree, j, v);
        for (int a = 0; a < 3; ++a) out[a] += w * coefficients[a][static_cast<std::size_t>(i * n + j)];
      }
    }
    return out;
  }
};

struct GravitySample {
  double u = 0.0;
  double v = 0.0;
  Vec3 force = Vec3::Zero();  // measured bias, N
};

inline GravityModel fit_gravity_model(const std::vector<GravitySample>& samples, int degree = 3) {
  if (degree < 0) throw ValidationError("degree must be non-negative");
  const int n = degree + 1;
  const auto cols = static_cast<Eigen::Index>(n * n);
  if (static_cast<Eigen::Index>(samples.size()) < cols)
    throw NumericalError("gravity fit is underdetermined: need at least " + std::to_string(cols) + " samples");
  Eigen::MatrixXd B(static_cast<Eigen::Index>(samples.size()), cols);
  Eigen::MatrixXd F(static_cast<Eigen::Index>(samples.size()), 3);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        B(r, i * n + j) = bernstein(degree, i, samples[s].u) * bernstein(degree, j, samples[s].v);
    F.row(r) = samples[s].force.transpose();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(B);
  qr.setThreshold(1e-10);
  if (qr.rank() < cols) throw NumericalError("gravity fit is underdetermined: samples do not cover the domain");
  const Eigen::MatrixXd C = qr.solve(F);
  GravityModel m;
  m.degree = degree;
  for (int a = 0; a < 3; ++a) m.coefficients[a].assign(C.col(a).data(), C.col(a).data() + cols);
  m.fit_rmse = std::sqrt((B * C - F).rowwise().squaredNorm().mean());
  return m;
}

/// Maps the gravity direction expressed in the tool frame onto (u, v) in
/// [0,1]^2: u from azimuth, v from elevation.
inline std::array<double, 2> orientation_params(const Mat3& tool_rotation, const Vec3& gravity_base = -Vec3::UnitZ()) {
  const Vec3 g = (tool_rotation.transpose() * gravity_base).normalized();
  const double azimuth = std::atan2(g.y(), g.x());
  const double elevation = std::asin(std::clamp(g.z(), -1.0, 1.0));
  return {(azimuth + std::numbers::pi) / (2.0 * std::numbers::pi), (elevation + std::numbers::pi / 2) / std::numbers::pi};
}

inline Vec3 compensate(const GravityModel& model, double u, double v, const Vec3& raw_force) {
  return raw_force - model.evaluate(u, v);
}

// ---------------------------------------------------------------------------
// Synthetic data

inline Mat3 random_rotation(std::mt19937_64& rng, double max_angle = std::numbers::pi) {
  std::normal_distribution<double> n01;
  Vec3 axis(n01(rng), n01(rng), n01(rng));
  axis.normalize();
  std::uniform_real_distribution<double> ang(-max_angle, max_angle);
  return Eigen::AngleAxisd(ang(rng), axis).toRotationMatrix();
}

inline RigidTransform random_transform(std::mt19937_64& rng, double max_translation = 100.0,
                                       double max_angle = std::numbers::pi) {
  std::uniform_real_distribution<double> ut(-max_translation, max_translation);
  return {random_rotation(rng, max_angle), Vec3(ut(rng), ut(rng), ut(rng))};
}

/// Poses of a tool rotated about a fixed pivot: p_i = pivot - R_i tip.
inline std::vector<RigidTransform> synthetic_pivot_poses(const Vec3& tip_offset, const Vec3& pivot, std::size_t count,
                                                         double noise_sigma, std::mt19937_64& rng,
                                                         double max_tilt = 0.6) {
  std::normal_distribution<double> noise(0.0, noise_sigma);
  std::vector<RigidTransform> poses;
  for (std::size_t i = 0; i < count; ++i) {
    RigidTransform t;
    t.rotation = random_rotation(rng, max_tilt);
    t.translation = pivot - t.rotation * tip_offset;
    if (noise_sigma > 0) t.translation += Vec3(noise(rng), noise(rng), noise(rng));
    poses.push_back(t);
  }
  return poses;
}

/// Marker pose as a tracker would report it: fiducials perturbed by
/// `sigma` (mm) and the pose re-estimated by point registration.
inline RigidTransform tracked_pose(const RigidTransform& truth, const std::vector<Vec3>& fiducials, double sigma,
                                   std::mt19937_64& rng) {
  if (sigma <= 0) return truth;
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<Vec3> observed;
  observed.reserve(fiducials.size());
  for (const auto& f : fiducials) observed.push_back(truth * f + Vec3(noise(rng), noise(rng), noise(rng)));
  return register_points(fiducials, observed).transform;
}

/// Default 4-fiducial marker geometry (mm).
inline std::vector<Vec3> default_marker_fiducials() {
  return {Vec3(0, 0, 0), Vec3(45, 0, 0), Vec3(0, 60, 0), Vec3(-30, 25, 15)};
}

/// Robot-station motion pairs for a hand-eye rig: A from (exact) robot
/// kinematics, B from a noisy tracker observing the marker at X relative to
/// the end-effector. A_i = EE_0^-1 EE_i, B_i = M_0^-1 M_i.
inline std::vector<MotionPair> synthetic_hand_eye_pairs(const RigidTransform& x, std::size_t count,
                                                        double tracker_sigma, std::mt19937_64& rng) {
  const auto fiducials = default_marker_fiducials();
  const RigidTransform tracker_from_base{random_rotation(rng), Vec3(800, -200, 1200)};
  auto station = [&](RigidTransform ee) {
    const RigidTransform marker_true = tracker_from_base * ee * x;
    return std::pair{ee, tracked_pose(marker_true, fiducials, tracker_sigma, rng)};
  };
  const auto [ee0, m0] = station({random_rotation(rng, 0.3), Vec3(400, 0, 300)});
  std::vector<MotionPair> pairs;
  std::uniform_real_distribution<double> ut(-120.0, 120.0);
  for (std::size_t i = 0; i < count; ++i) {
    const RigidTransform ee{random_rotation(rng, 0.3) * ee0.rotation,
                            ee0.translation + Vec3(ut(rng), ut(rng), ut(rng))};
    const auto [ee_i, m_i] = station(ee);
    pairs.push_back({ee0.inverse() * ee_i, m0.inverse() * m_i});
  }
  return pairs;
}

/// Smooth cable-drag/weight bias field used for synthetic gravity tests: a
/// random degree-`degree` Bernstein surface with coefficients in +-amplitude.
inline GravityModel synthetic_bias_model(int degree, double amplitude, std::mt19937_64& rng) {
  GravityModel m = GravityModel::zero(degree);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  for (auto& axis : m.coefficients)
    for (auto& c : axis) c = u(rng);
  return m;
}

inline std::vector<GravitySample> synthetic_gravity_samples(const GravityModel& truth, std::size_t count,
                                                            double noise_sigma, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, noise_sigma > 0 ? noise_sigma : 1.0);
  std::vector<GravitySample> out;
  for (std::size_t s = 0; s < count; ++s) {
    GravitySample g;
    g.u = u01(rng);
    g.v = u01(rng);
    g.force = truth.evaluate(g.u, g.v);
    if (noise_sigma > 0) g.force += Vec3(noise(rng), noise(rng), noise(rng));
    out.push_back(g);
  }
  return out;
}

}  // namespace sdfvf
