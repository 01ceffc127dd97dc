#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "p2p/common.hpp"
#include "p2p/geometry.hpp"

namespace p2p {

// Point set with optional per-point scalars. intensity comes from sensor dumps,
// extra carries the temporal flag channel when present. Either is empty or has
// one entry per point.
struct PointCloud {
  std::vector<Vec3> pts;
  std::vector<double> intensity;
  std::vector<double> extra;

  size_t size() const { return pts.size(); }
  bool empty() const { return pts.empty(); }

  void check() const {
    if (!intensity.empty() && intensity.size() != pts.size())
      throw ShapeMismatch("intensity size mismatch");
    if (!extra.empty() && extra.size() != pts.size())
      throw ShapeMismatch("extra channel size mismatch");
  }
};

// Axis half-extents of the crop volume around a reference box, in its frame.
struct SearchRegion {
  double rx = 0.0, ry = 0.0, rz = 0.0;

  static SearchRegion car() { return {4.8, 4.8, 1.5}; }
  static SearchRegion human() { return {1.92, 1.92, 1.5}; }

  static SearchRegion for_category(const std::string& category) {
    std::string c;
    for (char ch : category) c += char(std::tolower(static_cast<unsigned char>(ch)));
    if (c == "pedestrian" || c == "human" || c == "person") return human();
    return car();
  }
};

// Points within region of ref, expressed in ref's box frame. Boundary inclusive.
// Intensity and extra channels are dropped; downstream consumers use xyz only.
inline PointCloud crop_search_region(const PointCloud& cloud, const Box3D& ref,
                                     const SearchRegion& region) {
  cloud.check();
  PointCloud out;
  for (const Vec3& p : cloud.pts) {
    Vec3 q = to_canonical(p, ref);
    if (std::abs(q.x) <= region.rx && std::abs(q.y) <= region.ry && std::abs(q.z) <= region.rz)
      out.pts.push_back(q);
  }
  return out;
}

// Farthest point sampling. The first pick is seeded; afterwards the point with the
// largest distance to the selected set wins, lowest index on ties. If k > N the
// selected sequence repeats cyclically.
inline std::vector<size_t> fps_indices(const PointCloud& cloud, size_t k, uint64_t seed) {
  const size_t n = cloud.size();
  if (n == 0) throw EmptyCloud("fps on empty cloud");
  std::vector<size_t> out;
  if (k == 0) return out;
  out.reserve(k);

  Rng rng(seed);
  size_t first = size_t(rng.uniform_index(n));
  out.push_back(first);

  const size_t base = std::min(k, n);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  size_t last = first;
  while (out.size() < base) {
    const Vec3& lp = cloud.pts[last];
    size_t best = 0;
    double best_d2 = -1.0;
    for (size_t i = 0; i < n; ++i) {
      Vec3 d = cloud.pts[i] - lp;
      double d2 = d.x * d.x + d.y * d.y + d.z * d.z;
      if (d2 < min_d2[i]) min_d2[i] = d2;
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    out.push_back(best);
    last = best;
  }
  for (size_t i = base; i < k; ++i) out.push_back(out[i % base]);
  return out;
}

inline PointCloud gather(const PointCloud& cloud, const std::vector<size_t>& idx) {
  cloud.check();
  PointCloud out;
  out.pts.reserve(idx.size());
  for (size_t i : idx) {
    if (i >= cloud.size()) throw LengthMismatch("gather index out of range");
    out.pts.push_back(cloud.pts[i]);
    if (!cloud.intensity.empty()) out.intensity.push_back(cloud.intensity[i]);
    if (!cloud.extra.empty()) out.extra.push_back(cloud.extra[i]);
  }
  return out;
}

inline PointCloud fps_sample(const PointCloud& cloud, size_t k, uint64_t seed) {
  return gather(cloud, fps_indices(cloud, k, seed));
}

inline PointCloud merge_clouds(const PointCloud& a, const PointCloud& b) {
  a.check();
  b.check();
  if (a.extra.empty() != b.extra.empty() || a.intensity.empty() != b.intensity.empty())
    throw ShapeMismatch("merge of clouds with mismatched channels");
  PointCloud out = a;
  out.pts.insert(out.pts.end(), b.pts.begin(), b.pts.end());
  out.intensity.insert(out.intensity.end(), b.intensity.begin(), b.intensity.end());
  out.extra.insert(out.extra.end(), b.extra.begin(), b.extra.end());
  return out;
}

// Merged cloud with a 0/1 flag column: 0 marks points of prev, 1 points of curr.
inline PointCloud add_temporal_channel(const PointCloud& prev, const PointCloud& curr) {
  prev.check();
  curr.check();
  if (!prev.extra.empty() || !curr.extra.empty())
    throw AlreadyAugmented("temporal channel already present");
  PointCloud out;
  out.pts = prev.pts;
  out.pts.insert(out.pts.end(), curr.pts.begin(), curr.pts.end());
  out.extra.assign(prev.size(), 0.0);
  out.extra.insert(out.extra.end(), curr.size(), 1.0);
  return out;
}

inline size_t count_points_in_box(const PointCloud& cloud, const Box3D& box) {
  size_t n = 0;
  for (const Vec3& p : cloud.pts) n += point_in_box(p, box);
  return n;
}

// Dense occupancy + normalized count grid over a crop volume. Storage is
// channel-major [c][iy][ix] with c = iz * feature_count + f so it maps straight
// onto a conv input; feature 0 is occupancy, feature 1 count / max_count.
struct VoxelGrid {
  std::array<size_t, 3> dims = {0, 0, 0};  // nx, ny, nz
  Vec3 origin;
  Vec3 cell;
  size_t feature_count = 2;
  std::vector<double> data;

  size_t index(size_t ix, size_t iy, size_t iz, size_t f) const {
    return ((iz * feature_count + f) * dims[1] + iy) * dims[0] + ix;
  }
  double at(size_t ix, size_t iy, size_t iz, size_t f) const { return data[index(ix, iy, iz, f)]; }
  size_t channels() const { return dims[2] * feature_count; }
};

// Bins a canonical-frame cloud into dims cells covering the region. Cells are
// half-open [lo, hi) except the top boundary, which folds into the last cell so
// the closed crop maps onto the grid without loss. Points outside are skipped.
inline VoxelGrid voxelize(const PointCloud& cloud, const SearchRegion& region,
                          const std::array<size_t, 3>& dims) {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0)
    throw ShapeMismatch("voxel grid with zero dimension");
  VoxelGrid g;
  g.dims = dims;
  g.origin = {-region.rx, -region.ry, -region.rz};
  g.cell = {2.0 * region.rx / double(dims[0]), 2.0 * region.ry / double(dims[1]),
            2.0 * region.rz / double(dims[2])};
  g.data.assign(dims[0] * dims[1] * dims[2] * g.feature_count, 0.0);

  auto bin = [](double v, double lo, double cell, size_t n) -> long {
    long i = long(std::floor((v - lo) / cell));
    if (i == long(n) && v <= lo + cell * double(n) + 1e-12) i = long(n) - 1;
    return i;
  };

  std::vector<double> counts(dims[0] * dims[1] * dims[2], 0.0);
  for (const Vec3& p : cloud.pts) {
    long ix = bin(p.x, g.origin.x, g.cell.x, dims[0]);
    long iy = bin(p.y, g.origin.y, g.cell.y, dims[1]);
    long iz = bin(p.z, g.origin.z, g.cell.z, dims[2]);
    if (ix < 0 || iy < 0 || iz < 0 || ix >= long(dims[0]) || iy >= long(dims[1]) ||
        iz >= long(dims[2]))
      continue;
    counts[(size_t(iz) * dims[1] + size_t(iy)) * dims[0] + size_t(ix)] += 1.0;
  }
  double max_count = 0.0;
  for (double c : counts) max_count = std::max(max_count, c);
  for (size_t iz = 0; iz < dims[2]; ++iz)
    for (size_t iy = 0; iy < dims[1]; ++iy)
      for (size_t ix = 0; ix < dims[0]; ++ix) {
        double c = counts[(iz * dims[1] + iy) * dims[0] + ix];
        if (c > 0.0) {
          g.data[g.index(ix, iy, iz, 0)] = 1.0;
          g.data[g.index(ix, iy, iz, 1)] = c / max_count;
        }
      }
  return g;
}

inline PointCloud translate_cloud(const PointCloud& cloud, const Vec3& t) {
  PointCloud out = cloud;
  for (Vec3& p : out.pts) p = p + t;
  return out;
}

inline PointCloud rotate_cloud_z(const PointCloud& cloud, const Vec3& center, double angle) {
  PointCloud out = cloud;
  for (Vec3& p : out.pts) p = rotate_z(p - center, angle) + center;
  return out;
}

// Mirror across the x-z plane.
inline PointCloud mirror_y(const PointCloud& cloud) {
  PointCloud out = cloud;
  for (Vec3& p : out.pts) p.y = -p.y;
  return out;
}

}  // namespace p2p
