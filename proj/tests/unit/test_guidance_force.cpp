#include "sdfvf/guidance_force.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sdfvf;

namespace {

const ForceLawParams kDental = ForceLawParams::dental_stone();

// Field whose value is z - plane_z, i.e. an anatomy occupying z < plane_z.
std::shared_ptr<const SdfVolume> planar_field(double plane_z, Label label = 1) {
  auto s = std::make_shared<SdfVolume>();
  s->geometry.dims = {6, 6, 12};
  s->label = label;
  s->values.resize(s->geometry.voxel_count());
  for (int k = 0; k < 12; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i < 6; ++i) s->values[s->geometry.index(i, j, k)] = k - plane_z;
  return s;
}

}  // namespace

TEST(ForceLaw, DentalParameterValues) {
  const Vec3 up = Vec3::UnitZ();
  EXPECT_DOUBLE_EQ(per_anatomy_force(0.5, up, 1.0, kDental).norm(), 1.0);
  EXPECT_DOUBLE_EQ(per_anatomy_force(1.0, up, 1.0, kDental).norm(), 1.0);
  EXPECT_NEAR(per_anatomy_force(2.0, up, 1.0, kDental).norm(), std::exp(-1.0), 1e-12);
  EXPECT_NEAR(per_anatomy_force(2.0, up, 1.0, kDental).norm(), 0.367879, 1e-6);
  EXPECT_EQ(per_anatomy_force(4.5, up, 1.0, kDental), Vec3::Zero());
  EXPECT_EQ(per_anatomy_force(4.0, up, 1.0, kDental), Vec3::Zero());
}

TEST(ForceLaw, ContinuityAndTauFJump) {
  const Vec3 dir = Vec3(1, 2, 2).normalized();
  const double fmax = 3.7;
  const double eps = 1e-6;
  const double below = per_anatomy_force(kDental.tau0 - eps, dir, fmax, kDental).norm();
  const double above = per_anatomy_force(kDental.tau0 + eps, dir, fmax, kDental).norm();
  EXPECT_LE(std::abs(below - above), 1e-6 * fmax);
  const double just_below_f = per_anatomy_force(std::nextafter(kDental.tauf, 0.0), dir, fmax, kDental).norm();
  EXPECT_NEAR(just_below_f, fmax * std::exp(-3.0), 1e-12);
  EXPECT_NEAR(just_below_f / fmax, 0.0498, 1e-4);
}

TEST(ForceLaw, MonotoneAndBounded) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(kDental.tau0, kDental.tauf);
  for (int t = 0; t < 1000; ++t) {
    double a = d(rng), b = d(rng);
    if (a > b) std::swap(a, b);
    const double fa = per_anatomy_force(a, Vec3::UnitX(), 2.0, kDental).norm();
    const double fb = per_anatomy_force(b, Vec3::UnitX(), 2.0, kDental).norm();
    EXPECT_GE(fa, fb);
    EXPECT_LE(fa, 2.0 + 1e-9);
  }
}

TEST(ForceLaw, InvalidDirectionGivesZero) {
  EXPECT_EQ(per_anatomy_force(0.1, Vec3::Zero(), false, 5.0, kDental), Vec3::Zero());
}

TEST(ForceLaw, ParamsValidation) {
  EXPECT_NO_THROW(kDental.validate());
  EXPECT_NO_THROW(ForceLawParams::temporal_bone().validate());
  EXPECT_THROW((ForceLawParams{2.0, 1.0, 1.0}).validate(), ValidationError);
  EXPECT_THROW((ForceLawParams{-0.1, 1.0, 1.0}).validate(), ValidationError);
  EXPECT_THROW((ForceLawParams{0.0, 1.0, 0.0}).validate(), ValidationError);
  EXPECT_DOUBLE_EQ(ForceLawParams::temporal_bone().tau0, 0.5);
  EXPECT_DOUBLE_EQ(ForceLawParams::temporal_bone().lambda, 2.0);
}

TEST(TotalForce, ZeroHandForce) {
  const std::vector<AnatomyConstraint> cs{{1, planar_field(3.0), kDental}};
  const ForceState s = total_sdf_force(cs, Vec3(2, 2, 3.5), Vec3::Zero());
  EXPECT_EQ(s.f_max, 0.0);
  EXPECT_EQ(s.sdf_force, Vec3::Zero());
}

TEST(TotalForce, HardConstraintBelowTip) {
  const std::vector<AnatomyConstraint> cs{{1, planar_field(3.0), kDental}};
  const ForceState s = total_sdf_force(cs, Vec3(2.5, 2.5, 3.5), Vec3(0, 0, -2));
  EXPECT_DOUBLE_EQ(s.f_max, 2.0);
  ASSERT_EQ(s.per_anatomy.size(), 1u);
  EXPECT_NEAR(s.per_anatomy[0].distance, 0.5, 1e-12);
  EXPECT_NEAR((s.sdf_force - Vec3(0, 0, 2)).norm(), 0.0, 1e-9);
}

TEST(TotalForce, ClearanceOffsetShiftsDistance) {
  const std::vector<AnatomyConstraint> cs{{1, planar_field(3.0), kDental}};
  const ForceState s = total_sdf_force(cs, Vec3(2.5, 2.5, 6.0), Vec3(0, 0, -1), 1.0);
  EXPECT_NEAR(s.per_anatomy[0].distance, 2.0, 1e-12);
  EXPECT_NEAR(s.sdf_force.z(), std::exp(-1.0), 1e-9);
}

TEST(TotalForce, TwoFarAnatomiesGiveZero) {
  const std::vector<AnatomyConstraint> cs{{1, planar_field(0.0, 1), kDental}, {2, planar_field(1.0, 2), kDental}};
  const ForceState s = total_sdf_force(cs, Vec3(2, 2, 8), Vec3(1, 0, -1));
  EXPECT_EQ(s.sdf_force, Vec3::Zero());
  EXPECT_EQ(s.per_anatomy.size(), 2u);
}

TEST(TotalForce, SumMayExceedFmax) {
  const std::vector<AnatomyConstraint> cs{{1, planar_field(3.0, 1), kDental}, {2, planar_field(3.0, 2), kDental}};
  const ForceState s = total_sdf_force(cs, Vec3(2.5, 2.5, 3.5), Vec3(0, 0, -1));
  EXPECT_NEAR(s.sdf_force.z(), 2.0, 1e-9);
  for (const auto& t : s.per_anatomy) EXPECT_LE(t.force.norm(), s.f_max + 1e-9);
}

TEST(Clamp, HandEvaluatedExamples) {
  EXPECT_EQ(compliance_force(Vec3(0, 0, -2), Vec3(0, 0, 2)), Vec3(0, 0, 2));
  EXPECT_EQ(compliance_force(Vec3(1, 2, 3), Vec3::Zero()), Vec3::Zero());
  const Vec3 fc = compliance_force(Vec3(3, 0, -1), Vec3(0, 0, 2));
  EXPECT_NEAR((fc - Vec3(0, 0, 1)).norm(), 0.0, 1e-15);
  EXPECT_NEAR(((Vec3(3, 0, -1) + fc) - Vec3(3, 0, 0)).norm(), 0.0, 1e-15);
}

TEST(Clamp, TangentialHandGetsFullSdfForce) {
  const Vec3 fc = compliance_force(Vec3(2, 0, 0), Vec3(0, 0, 1));
  EXPECT_EQ(fc, Vec3(0, 0, 1));
}

TEST(Clamp, NoReversalRandomized) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int t = 0; t < 100000; ++t) {
    const Vec3 h(n(rng), n(rng), n(rng)), s(n(rng), n(rng), n(rng));
    const Vec3 fc = compliance_force(h, s);
    const Vec3 hp = parallel_component(h, s);
    ASSERT_GE((h + fc).dot(hp), -1e-9);
    // F_C is parallel or antiparallel to F_SDF.
    ASSERT_LE(fc.cross(s).norm(), 1e-9 * std::max(1.0, fc.norm() * s.norm()));
  }
}

TEST(Clamp, LiteralFormBlocksInwardMotion) {
  // Hand pushes 45 deg into the surface; F_SDF from the exponential branch is weak.
  const Vec3 h(1, 0, -1), s(0, 0, 0.3);
  const Vec3 lit = compliance_force(h, s, ClampRule::literal);
  const Vec3 nr = compliance_force(h, s, ClampRule::no_reversal);
  // (F_H + F_SDF) . F_H,par = (-0.7)(-1) > 0: the literal rule cancels the inward part...
  EXPECT_NEAR((h + lit).z(), 0.0, 1e-15);
  // ...while the guarantee form lets the weak field only slow it.
  EXPECT_NEAR((h + nr).z(), -0.7, 1e-15);
}

TEST(Clamp, HardStopInsideTau0) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  const Vec3 away = Vec3::UnitZ();
  for (int t = 0; t < 10000; ++t) {
    Vec3 h(n(rng), n(rng), n(rng));
    if (h.dot(-away) <= 0) h.z() = -h.z();
    const Vec3 s = per_anatomy_force(0.3, away, h.norm(), kDental);
    const Vec3 net = h + compliance_force(h, s);
    EXPECT_LE(net.dot(-away), 1e-9);
  }
}
