#pragma once

// Exact anisotropic Euclidean distance transforms (Saito-Toriwaki style
// separable passes) and continuous queries on the resulting signed fields.

#include "sdfvf/geometry.hpp"
#include "sdfvf/io.hpp"
#include "sdfvf/parallel.hpp"
#include "sdfvf/volume_io.hpp"

#include <cstring>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace sdfvf {

inline constexpr double kInfiniteDistance = std::numeric_limits<double>::infinity();

struct SdfVolume {
  GridGeometry geometry;
  std::vector<double> values;  // mm, > 0 outside the label set, < 0 inside
  Label label = 0;

  double at(int i, int j, int k) const { return values[geometry.index(i, j, k)]; }

  friend bool operator==(const SdfVolume&, const SdfVolume&) = default;
};

/// Result of a distance/direction query. `direction` is the SDF gradient,
/// pointing away from the anatomy.
struct DistanceQuery {
  double distance = 0.0;
  Vec3 direction = Vec3::Zero();
  bool valid = false;
};

namespace detail {

// Lower envelope of parabolas f(p) + w (q - p)^2 along one line, in place.
// `f` holds squared distances (kInfiniteDistance = no feature). Scratch
// buffers are caller-owned so each worker allocates once.
inline void envelope_1d(std::span<double> f, double w, std::vector<int>& v, std::vector<double>& z,
                        std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  out.resize(static_cast<std::size_t>(n));

  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInfiniteDistance) continue;
    const double fq = f[q] + w * static_cast<double>(q) * q;
    double s = 0.0;
    while (k >= 0) {
      const int p = v[k];
      const double fp = f[p] + w * static_cast<double>(p) * p;
      s = (fq - fp) / (2.0 * w * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInfiniteDistance : s;
    z[k + 1] = kInfiniteDistance;
  }
  if (k < 0) return;  // no feature on this line: stays infinite

  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = static_cast<double>(q - v[j]);
    out[q] = f[v[j]] + w * d * d;
  }
  std::copy(out.begin(), out.end(), f.begin());
}

}  // namespace detail

/// Squared distance (mm^2) from every voxel center to the nearest voxel whose
/// mask entry is nonzero. Three separable passes: an x-row scan followed by
/// lower-envelope minimization along y and then z. Work is split across
/// independent lines, so the result does not depend on `workers`.
inline std::vector<double> edt_squared_mask(const GridGeometry& g, std::span<const std::uint8_t> mask,
                                            unsigned workers = 1) {
  if (mask.size() != g.voxel_count()) throw ValidationError("mask size does not match grid");
  workers = resolve_workers(workers);
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  const double sx = g.spacing.x(), wy = g.spacing.y() * g.spacing.y(), wz = g.spacing.z() * g.spacing.z();
  std::vector<double> d(g.voxel_count(), kInfiniteDistance);

  // Pass 1: along x, nearest feature in the row (voxel count), then scaled.
  parallel_for(static_cast<std::size_t>(ny) * nz, workers, [&](std::size_t b, std::size_t e) {
    std::vector<int> gap(static_cast<std::size_t>(nx));
    for (std::size_t row = b; row < e; ++row) {
      const std::size_t base = row * static_cast<std::size_t>(nx);
      constexpr int kNone = std::numeric_limits<int>::max();
      int last = kNone;
      for (int i = 0; i < nx; ++i) {
        if (mask[base + i]) last = i;
        gap[i] = last == kNone ? kNone : i - last;
      }
      last = kNone;
      for (int i = nx - 1; i >= 0; --i) {
        if (mask[base + i]) last = i;
        if (last != kNone) gap[i] = std::min(gap[i], last - i);
      }
      for (int i = 0; i < nx; ++i) {
        if (gap[i] != kNone) {
          const double dist = gap[i] * sx;
          d[base + i] = dist * dist;
        }
      }
    }
  });

  // Pass 2: along y, one line per (x, z).
  if (ny > 1) {
    parallel_for(static_cast<std::size_t>(nx) * nz, workers, [&](std::size_t b, std::size_t e) {
      std::vector<double> line(static_cast<std::size_t>(ny)), out, z;
      std::vector<int> v;
      for (std::size_t c = b; c < e; ++c) {
        const int i = static_cast<int>(c % nx);
        const int k = static_cast<int>(c / nx);
        for (int j = 0; j < ny; ++j) line[j] = d[g.index(i, j, k)];
        detail::envelope_1d(line, wy, v, z, out);
        for (int j = 0; j < ny; ++j) d[g.index(i, j, k)] = line[j];
      }
    });
  }

  // Pass 3: along z, one line per (x, y).
  if (nz > 1) {
    parallel_for(static_cast<std::size_t>(nx) * ny, workers, [&](std::size_t b, std::size_t e) {
      std::vector<double> line(static_cast<std::size_t>(nz)), out, z;
      std::vector<int> v;
      for (std::size_t c = b; c < e; ++c) {
        const int i = static_cast<int>(c % nx);
        const int j = static_cast<int>(c / nx);
        for (int k = 0; k < nz; ++k) line[k] = d[g.index(i, j, k)];
        detail::envelope_1d(line, wz, v, z, out);
        for (int k = 0; k < nz; ++k) d[g.index(i, j, k)] = line[k];
      }
    });
  }
  return d;
}

/// Squared distance to the nearest voxel carrying `label`.
inline std::vector<double> edt_squared(const LabelVolume& volume, Label label, unsigned workers = 1) {
  volume.validate();
  std::vector<std::uint8_t> mask(volume.labels.size());
  bool any = false;
  for (std::size_t n = 0; n < mask.size(); ++n) {
    mask[n] = volume.labels[n] == label;
    any = any || mask[n];
  }
  if (!any) throw ValidationError("label " + std::to_string(label) + " is absent from the volume");
  return edt_squared_mask(volume.geometry, mask, workers);
}

/// Signed field: +distance to the label set outside it, -distance to the
/// complement inside it. Everything beyond the grid counts as background, so
/// the complement is never empty.
inline SdfVolume signed_distance(const LabelVolume& volume, Label label, unsigned workers = 1) {
  const auto outside = edt_squared(volume, label, workers);

  const auto& g = volume.geometry;
  GridGeometry padded = g;
  for (int a = 0; a < 3; ++a) padded.dims[a] = g.dims[a] + 2;
  std::vector<std::uint8_t> background(padded.voxel_count(), 1);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        background[padded.index(i + 1, j + 1, k + 1)] = volume.at(i, j, k) != label;
  const auto inside = edt_squared_mask(padded, background, workers);

  SdfVolume sdf;
  sdf.geometry = g;
  sdf.label = label;
  sdf.values.resize(g.voxel_count());
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t n = g.index(i, j, k);
        sdf.values[n] = volume.labels[n] == label ? -std::sqrt(inside[padded.index(i + 1, j + 1, k + 1)])
                                                  : std::sqrt(outside[n]);
      }
  return sdf;
}

/// Trilinear interpolation of voxel-center values. Points outside the
/// voxel-center box are clamped onto it and the clamp distance is added.
inline double sample_trilinear(const SdfVolume& sdf, const Vec3& p) {
  const auto& g = sdf.geometry;
  Vec3 clamped;
  std::array<int, 3> i0{};
  std::array<double, 3> t{};
  for (int a = 0; a < 3; ++a) {
    const double hi = g.origin[a] + (g.dims[a] - 1) * g.spacing[a];
    clamped[a] = std::clamp(p[a], g.origin[a], hi);
    const double u = (clamped[a] - g.origin[a]) / g.spacing[a];
    int base = static_cast<int>(std::floor(u));
    base = std::clamp(base, 0, std::max(0, g.dims[a] - 2));
    i0[a] = base;
    t[a] = g.dims[a] == 1 ? 0.0 : std::clamp(u - base, 0.0, 1.0);
  }
  auto value = [&](int di, int dj, int dk) {
    const int i = std::min(i0[0] + di, g.dims[0] - 1);
    const int j = std::min(i0[1] + dj, g.dims[1] - 1);
    const int k = std::min(i0[2] + dk, g.dims[2] - 1);
    return sdf.at(i, j, k);
  };
  const double c00 = value(0, 0, 0) * (1 - t[0]) + value(1, 0, 0) * t[0];
  const double c10 = value(0, 1, 0) * (1 - t[0]) + value(1, 1, 0) * t[0];
  const double c01 = value(0, 0, 1) * (1 - t[0]) + value(1, 0, 1) * t[0];
  const double c11 = value(0, 1, 1) * (1 - t[0]) + value(1, 1, 1) * t[0];
  const double c0 = c00 * (1 - t[1]) + c10 * t[1];
  const double c1 = c01 * (1 - t[1]) + c11 * t[1];
  const double inside = c0 * (1 - t[2]) + c1 * t[2];
  const double offset = (p - clamped).norm();
  return offset > 0 ? inside + offset : inside;
}

inline constexpr double kDegenerateGradient = 1e-9;

/// Distance at `p` plus the normalized central-difference gradient (one voxel
/// spacing per axis).
inline DistanceQuery gradient(const SdfVolume& sdf, const Vec3& p) {
  DistanceQuery q;
  q.distance = sample_trilinear(sdf, p);
  Vec3 grad;
  for (int a = 0; a < 3; ++a) {
    Vec3 step = Vec3::Zero();
    step[a] = sdf.geometry.spacing[a];
    grad[a] = (sample_trilinear(sdf, p + step) - sample_trilinear(sdf, p - step)) / (2.0 * step[a]);
  }
  const double n = grad.norm();
  if (n < kDegenerateGradient || !std::isfinite(n)) return q;
  q.direction = grad / n;
  q.valid = true;
  return q;
}

// ---------------------------------------------------------------------------
// Binary cache: "SDFV0001", u32 dims[3], f64 spacing[3], f64 origin[3],
// u32 label, f32 values (all little-endian).

inline constexpr char kSdfCacheMagic[8] = {'S', 'D', 'F', 'V', '0', '0', '0', '1'};

inline std::string format_sdf_cache(const SdfVolume& sdf) {
  static_assert(std::endian::native == std::endian::little, "cache writer assumes a little-endian host");
  std::string out(kSdfCacheMagic, 8);
  auto put = [&out](const auto& v) {
    char buf[sizeof v];
    std::memcpy(buf, &v, sizeof v);
    out.append(buf, sizeof v);
  };
  for (int a = 0; a < 3; ++a) put(static_cast<std::uint32_t>(sdf.geometry.dims[a]));
  for (int a = 0; a < 3; ++a) put(sdf.geometry.spacing[a]);
  for (int a = 0; a < 3; ++a) put(sdf.geometry.origin[a]);
  put(static_cast<std::uint32_t>(sdf.label));
  for (double v : sdf.values) put(static_cast<float>(v));
  return out;
}

inline SdfVolume parse_sdf_cache(std::string_view bytes) {
  constexpr std::size_t header = 8 + 3 * 4 + 6 * 8 + 4;
  if (bytes.size() < header || std::memcmp(bytes.data(), kSdfCacheMagic, 8) != 0)
    throw ValidationError("not an SDF cache file");
  std::size_t pos = 8;
  auto get = [&](auto& v) {
    std::memcpy(&v, bytes.data() + pos, sizeof v);
    pos += sizeof v;
  };
  SdfVolume sdf;
  for (int a = 0; a < 3; ++a) {
    std::uint32_t d;
    get(d);
    sdf.geometry.dims[a] = static_cast<int>(d);
  }
  for (int a = 0; a < 3; ++a) get(sdf.geometry.spacing[a]);
  for (int a = 0; a < 3; ++a) get(sdf.geometry.origin[a]);
  std::uint32_t label;
  get(label);
  sdf.label = static_cast<Label>(label);
  sdf.geometry.validate();
  const std::size_t n = sdf.geometry.voxel_count();
  if (bytes.size() != header + n * 4) throw ValidationError("SDF cache payload length mismatch");
  sdf.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    get(f);
    sdf.values[i] = f;
  }
  return sdf;
}

inline void write_sdf_cache(const SdfVolume& sdf, const std::filesystem::path& path) {
  write_file_bytes(path, format_sdf_cache(sdf));
}

inline SdfVolume read_sdf_cache(const std::filesystem::path& path) { return parse_sdf_cache(read_file_bytes(path)); }

}  // namespace sdfvf
