#include "sdfvf/distance_field.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sdfvf;

namespace {

LabelVolume grid(std::array<int, 3> dims, Vec3 spacing = Vec3::Ones()) {
  GridGeometry g;
  g.dims = dims;
  g.spacing = spacing;
  return LabelVolume(g);
}

// O(N*M) nearest-labeled-voxel scan.
std::vector<double> brute_edt(const LabelVolume& v, Label label) {
  const auto& g = v.geometry;
  std::vector<Vec3> sites;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        if (v.at(i, j, k) == label) sites.push_back(g.center(i, j, k));
  std::vector<double> out(g.voxel_count());
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 p = g.center(i, j, k);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& s : sites) {
          const Vec3 d = p - s;
          best = std::min(best, d.x() * d.x() + d.y() * d.y() + d.z() * d.z());
        }
        out[g.index(i, j, k)] = best;
      }
  return out;
}

}  // namespace

TEST(Edt, SingleVoxelCorner) {
  LabelVolume v = grid({5, 5, 5});
  v.at(2, 2, 2) = 1;
  const auto d2 = edt_squared(v, 1);
  EXPECT_EQ(d2[v.geometry.index(0, 0, 0)], 12.0);
  EXPECT_EQ(d2[v.geometry.index(2, 2, 2)], 0.0);
}

TEST(Edt, AnisotropicSpacing) {
  LabelVolume v = grid({3, 3, 3}, Vec3(1, 1, 2));
  v.at(0, 0, 0) = 1;
  const auto d2 = edt_squared(v, 1);
  EXPECT_EQ(d2[v.geometry.index(0, 0, 1)], 4.0);
}

TEST(Edt, LabelAbsent) {
  LabelVolume v = grid({3, 3, 3});
  EXPECT_THROW(edt_squared(v, 1), ValidationError);
  EXPECT_THROW(signed_distance(v, 1), ValidationError);
}

TEST(Edt, MatchesBruteForceOnRandomGrids) {
  std::mt19937_64 rng(7);
  const double spacings[] = {0.25, 0.5, 1.0, 2.0};
  for (int trial = 0; trial < 40; ++trial) {
    std::array<int, 3> dims;
    for (auto& d : dims) d = std::uniform_int_distribution<int>(1, 12)(rng);
    const Vec3 sp(spacings[rng() % 4], spacings[rng() % 4], spacings[rng() % 4]);
    LabelVolume v = grid(dims, sp);
    const double density = std::uniform_real_distribution<double>(0.001, 0.3)(rng);
    std::bernoulli_distribution coin(density);
    for (auto& l : v.labels) l = coin(rng) ? 1 : 0;
    v.labels[rng() % v.labels.size()] = 1;
    const auto fast = edt_squared(v, 1, 2);
    const auto slow = brute_edt(v, 1);
    for (std::size_t n = 0; n < fast.size(); ++n)
      ASSERT_NEAR(fast[n], slow[n], 1e-9 * std::max(1.0, slow[n])) << "trial " << trial << " voxel " << n;
  }
}

TEST(SignedDistance, SingleVoxelInside) {
  LabelVolume v = grid({5, 5, 5});
  v.at(2, 2, 2) = 3;
  const SdfVolume s = signed_distance(v, 3);
  EXPECT_DOUBLE_EQ(s.at(2, 2, 2), -1.0);
  EXPECT_DOUBLE_EQ(s.at(2, 2, 3), 1.0);
  EXPECT_DOUBLE_EQ(s.at(0, 0, 0), std::sqrt(12.0));
  EXPECT_EQ(s.label, 3);
}

TEST(SignedDistance, FullGridUsesOutOfGridBackground) {
  LabelVolume v = grid({5, 5, 5});
  std::fill(v.labels.begin(), v.labels.end(), 1);
  const SdfVolume s = signed_distance(v, 1);
  EXPECT_DOUBLE_EQ(s.at(2, 2, 2), -3.0);  // three voxel steps to the virtual layer
  EXPECT_DOUBLE_EQ(s.at(0, 2, 2), -1.0);
  for (double x : s.values) EXPECT_LT(x, 0.0);
}

TEST(SignedDistance, SignPartitionAndLipschitz) {
  std::mt19937_64 rng(11);
  LabelVolume v = grid({14, 11, 9}, Vec3(0.5, 1.0, 0.25));
  std::bernoulli_distribution coin(0.35);
  for (auto& l : v.labels) l = coin(rng) ? 2 : (coin(rng) ? 1 : 0);
  const SdfVolume s = signed_distance(v, 2);
  const auto& g = v.geometry;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const double val = s.at(i, j, k);
        if (v.at(i, j, k) == 2) EXPECT_LT(val, 0.0);
        else EXPECT_GT(val, 0.0);
        const int nb[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        for (int a = 0; a < 3; ++a) {
          const int ii = i + nb[a][0], jj = j + nb[a][1], kk = k + nb[a][2];
          if (ii >= g.dims[0] || jj >= g.dims[1] || kk >= g.dims[2]) continue;
          const double step = g.spacing[a];
          const double other = s.at(ii, jj, kk);
          // Across an occupancy boundary the signed jump is the two half-distances.
          if ((val < 0) == (other < 0)) {
            EXPECT_LE(std::abs(val - other), step + 1e-6);
          }
        }
      }
}

TEST(SignedDistance, WorkerCountInvariance) {
  std::mt19937_64 rng(5);
  LabelVolume v = grid({23, 17, 19}, Vec3(0.5, 0.5, 1.0));
  std::bernoulli_distribution coin(0.1);
  for (auto& l : v.labels) l = coin(rng) ? 1 : 0;
  const SdfVolume one = signed_distance(v, 1, 1);
  for (unsigned w : {2u, 3u, 8u, 64u}) EXPECT_EQ(signed_distance(v, 1, w).values, one.values) << w << " workers";
}

TEST(Sampling, VoxelCenterAndMidpoint) {
  LabelVolume v = grid({4, 4, 4});
  v.at(0, 0, 0) = 1;
  SdfVolume s = signed_distance(v, 1);
  EXPECT_DOUBLE_EQ(sample_trilinear(s, s.geometry.center(2, 1, 3)), s.at(2, 1, 3));

  // Hand-made linear field along x.
  SdfVolume f;
  f.geometry = v.geometry;
  f.values.resize(f.geometry.voxel_count());
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) f.values[f.geometry.index(i, j, k)] = 1.0 + i;
  EXPECT_DOUBLE_EQ(sample_trilinear(f, Vec3(0.5, 1, 1)), 1.5);
}

TEST(Sampling, ClampPlusOffsetOutsideGrid) {
  SdfVolume f;
  f.geometry.dims = {3, 3, 3};
  f.values.assign(27, 3.0);
  // 10 mm beyond the +x face.
  EXPECT_DOUBLE_EQ(sample_trilinear(f, Vec3(12, 1, 1)), 13.0);
  EXPECT_NEAR(sample_trilinear(f, Vec3(-3, -4, 1)), 3.0 + 5.0, 1e-12);
}

TEST(Gradient, FlatSlabPointsUp) {
  LabelVolume v = grid({12, 12, 16});
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 12; ++j)
      for (int i = 0; i < 12; ++i) v.at(i, j, k) = 1;
  const SdfVolume s = signed_distance(v, 1);
  const DistanceQuery q = gradient(s, Vec3(5.3, 6.1, 8.4));
  ASSERT_TRUE(q.valid);
  EXPECT_NEAR(q.direction.z(), 1.0, 1e-6);
  EXPECT_NEAR(q.distance, 8.4 - 3.0, 1e-9);
}

TEST(Gradient, DegenerateAtMidpoint) {
  LabelVolume v = grid({9, 5, 5});
  v.at(2, 2, 2) = 1;
  v.at(6, 2, 2) = 1;
  const SdfVolume s = signed_distance(v, 1);
  const DistanceQuery q = gradient(s, Vec3(4, 2, 2));
  EXPECT_FALSE(q.valid);
  EXPECT_EQ(q.direction, Vec3::Zero());
}

TEST(Gradient, PointSphereRadialWithinOneDegree) {
  // A sphere smaller than a voxel labels one voxel: the field is exactly radial.
  LabelVolume v = grid({40, 40, 40}, Vec3::Constant(0.5));
  const Vec3 c = v.geometry.center(20, 20, 20);
  v.at(20, 20, 20) = 1;
  const SdfVolume s = signed_distance(v, 1);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> r(3.0, 8.0);
  for (int t = 0; t < 200; ++t) {
    const Vec3 dir = Vec3(n01(rng), n01(rng), n01(rng)).normalized();
    const DistanceQuery q = gradient(s, c + dir * r(rng));
    ASSERT_TRUE(q.valid);
    const double angle = std::acos(std::clamp(q.direction.dot(dir), -1.0, 1.0)) * 180.0 / std::numbers::pi;
    EXPECT_LT(angle, 1.0);
  }
}

TEST(Gradient, VoxelizedSphereWithinFacetBound) {
  // A digitized sphere of radius R has flat facets about sqrt(R*h) wide; over a
  // facet the nearest site lies along the facet normal, so the direction can
  // lag the true radial by up to asin((sqrt(R*h) + h) / |p - c|).
  const double h = 0.5, R = 4.0;
  LabelVolume v = grid({48, 48, 48}, Vec3::Constant(h));
  const Vec3 c(12, 12, 12);
  const auto& g = v.geometry;
  for (int k = 0; k < 48; ++k)
    for (int j = 0; j < 48; ++j)
      for (int i = 0; i < 48; ++i)
        if ((g.center(i, j, k) - c).norm() <= R) v.at(i, j, k) = 1;
  const SdfVolume s = signed_distance(v, 1);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> r(5.5, 10.0);
  double sum = 0;
  for (int t = 0; t < 200; ++t) {
    const Vec3 dir = Vec3(n01(rng), n01(rng), n01(rng)).normalized();
    const double rho = r(rng);
    const DistanceQuery q = gradient(s, c + dir * rho);
    ASSERT_TRUE(q.valid);
    const double angle = std::acos(std::clamp(q.direction.dot(dir), -1.0, 1.0));
    EXPECT_LE(angle, std::asin(std::min(1.0, (std::sqrt(R * h) + h) / rho))) << "radius " << rho;
    sum += angle;
  }
  EXPECT_LT(sum / 200 * 180.0 / std::numbers::pi, 6.0);
}

TEST(Gradient, FiniteDifferenceConsistency) {
  LabelVolume v = grid({30, 30, 30}, Vec3::Constant(0.5));
  const Vec3 c(7.5, 7.5, 7.5);
  for (int k = 0; k < 30; ++k)
    for (int j = 0; j < 30; ++j)
      for (int i = 0; i < 30; ++i)
        if ((v.geometry.center(i, j, k) - c).norm() <= 3.0) v.at(i, j, k) = 1;
  const SdfVolume s = signed_distance(v, 1);
  const Vec3 p(12.1, 8.3, 9.2);
  const DistanceQuery q = gradient(s, p);
  Vec3 g2;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = 0.25;
    g2[a] = (sample_trilinear(s, p + e) - sample_trilinear(s, p - e)) / 0.5;
  }
  EXPECT_LT((q.direction - g2.normalized()).norm(), 0.5 * 0.5);  // O(h)
}

TEST(SdfCache, RoundTripAndDeterminism) {
  LabelVolume v = grid({6, 5, 4}, Vec3(0.5, 0.25, 1.0));
  v.geometry.origin = Vec3(1, -2, 3);
  v.at(1, 1, 1) = 2;
  const SdfVolume s = signed_distance(v, 2);
  const std::string a = format_sdf_cache(s);
  EXPECT_EQ(a, format_sdf_cache(signed_distance(v, 2, 4)));
  const SdfVolume back = parse_sdf_cache(a);
  EXPECT_EQ(back.geometry, s.geometry);
  EXPECT_EQ(back.label, 2);
  for (std::size_t n = 0; n < s.values.size(); ++n)
    EXPECT_EQ(back.values[n], static_cast<double>(static_cast<float>(s.values[n])));
  EXPECT_EQ(format_sdf_cache(back), a);
  EXPECT_THROW(parse_sdf_cache(a.substr(0, a.size() - 1)), ValidationError);
  EXPECT_THROW(parse_sdf_cache("garbage"), ValidationError);
}
