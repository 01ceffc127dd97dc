#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "p2p/data.hpp"
#include "p2p/geometry.hpp"
#include "p2p/pointcloud.hpp"

namespace p2p::synth {

struct CategorySpec {
  std::string name = "Car";
  Vec3 size_lo = {1.6, 3.9, 1.4};  // w, l, h
  Vec3 size_hi = {2.0, 4.8, 1.8};
};

inline CategorySpec car_spec() { return {}; }

inline CategorySpec pedestrian_spec() {
  return {"Pedestrian", {0.5, 0.6, 1.6}, {0.8, 1.0, 1.9}};
}

struct GenConfig {
  uint64_t seed = 1;
  size_t n_sequences = 4;
  size_t frames_lo = 8, frames_hi = 10;
  CategorySpec category = car_spec();
  size_t points_on_object = 256;
  size_t clutter_points = 64;
  size_t n_distractors = 0;
  double distractor_min_gap = 2.0;  // BEV clearance between distractor and target
  Vec3 motion_sigma = {0.35, 0.15, 0.05};  // per-sequence velocity scale, box frame
  double yaw_sigma = 0.05;
  double jitter_frac = 0.3;  // per-step noise relative to motion_sigma
  double sparsity_level = 1.0;
};

struct GeneratedSequence {
  std::string id;
  std::string category;
  std::vector<PointCloud> clouds;
  std::vector<Box3D> gt;
  std::vector<Box3D> distractors;  // static over the sequence
};

// Uniform points on the box shell, faces weighted by area, pulled inward by a
// hair so the closed membership test keeps every sample despite round trips.
inline PointCloud sample_box_surface(const Box3D& box, size_t n, Rng& rng) {
  const double hx = box.l / 2.0 * (1.0 - 1e-9);
  const double hy = box.w / 2.0 * (1.0 - 1e-9);
  const double hz = box.h / 2.0 * (1.0 - 1e-9);
  const double ax = box.w * box.h;  // +-x faces
  const double ay = box.l * box.h;  // +-y faces
  const double az = box.l * box.w;  // +-z faces
  const double total = 2.0 * (ax + ay + az);
  PointCloud cloud;
  for (size_t i = 0; i < n; ++i) {
    double pick = rng.uniform(0.0, total);
    double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    Vec3 local;
    if (pick < 2.0 * ax) {
      local = {sign * hx, u * hy, v * hz};
    } else if (pick < 2.0 * (ax + ay)) {
      local = {u * hx, sign * hy, v * hz};
    } else {
      local = {u * hx, v * hy, sign * hz};
    }
    cloud.pts.push_back(from_canonical(local, box));
    cloud.intensity.push_back(rng.uniform());
  }
  return cloud;
}

namespace detail {

inline size_t scaled_count(size_t base, double sparsity, Rng& rng) {
  double f = double(base) * sparsity * rng.uniform(0.7, 1.3);
  long n = std::lround(f);
  return n < 0 ? 0 : size_t(n);
}

inline void append(PointCloud& dst, const PointCloud& src) {
  dst.pts.insert(dst.pts.end(), src.pts.begin(), src.pts.end());
  dst.intensity.insert(dst.intensity.end(), src.intensity.begin(), src.intensity.end());
}

}  // namespace detail

inline GeneratedSequence generate_sequence(const GenConfig& cfg, size_t seq_index) {
  Rng rng(derive_seed(cfg.seed, "synth-seq", seq_index));
  GeneratedSequence seq;
  {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%04zu", seq_index);
    seq.id = buf;
  }
  seq.category = cfg.category.name;

  Box3D box;
  box.w = rng.uniform(cfg.category.size_lo.x, cfg.category.size_hi.x);
  box.l = rng.uniform(cfg.category.size_lo.y, cfg.category.size_hi.y);
  box.h = rng.uniform(cfg.category.size_lo.z, cfg.category.size_hi.z);
  box.cx = rng.uniform(3.0, 8.0);
  box.cy = rng.uniform(-3.0, 3.0);
  box.cz = rng.uniform(-1.0, 0.0);
  box.yaw = rng.uniform(-kPi, kPi);

  const Vec3 v_seq = {rng.gauss(0.0, cfg.motion_sigma.x),
                      rng.gauss(0.0, cfg.motion_sigma.y),
                      rng.gauss(0.0, cfg.motion_sigma.z)};
  const double w_seq = rng.gauss(0.0, cfg.yaw_sigma);

  for (size_t d = 0; d < cfg.n_distractors; ++d) {
    Box3D dis;
    dis.w = rng.uniform(cfg.category.size_lo.x, cfg.category.size_hi.x);
    dis.l = rng.uniform(cfg.category.size_lo.y, cfg.category.size_hi.y);
    dis.h = rng.uniform(cfg.category.size_lo.z, cfg.category.size_hi.z);
    double half_diag = 0.5 * std::hypot(box.l + dis.l, box.w + dis.w);
    double radius = rng.uniform(cfg.distractor_min_gap + half_diag,
                                cfg.distractor_min_gap + half_diag + 3.0);
    double ang = rng.uniform(-kPi, kPi);
    dis.cx = box.cx + radius * std::cos(ang);
    dis.cy = box.cy + radius * std::sin(ang);
    dis.cz = box.cz + rng.uniform(-0.2, 0.2);
    dis.yaw = rng.uniform(-kPi, kPi);
    seq.distractors.push_back(dis);
  }

  const size_t n_frames = cfg.frames_lo + rng.uniform_index(cfg.frames_hi - cfg.frames_lo + 1);
  const SearchRegion region = SearchRegion::for_category(cfg.category.name);
  for (size_t f = 0; f < n_frames; ++f) {
    seq.gt.push_back(box);

    PointCloud cloud = sample_box_surface(
        box, std::max<size_t>(1, detail::scaled_count(cfg.points_on_object,
                                                      cfg.sparsity_level, rng)),
        rng);
    for (const Box3D& dis : seq.distractors)
      detail::append(cloud, sample_box_surface(
                                dis, detail::scaled_count(cfg.points_on_object / 2,
                                                          cfg.sparsity_level, rng),
                                rng));
    size_t n_clutter = detail::scaled_count(cfg.clutter_points, cfg.sparsity_level, rng);
    for (size_t i = 0; i < n_clutter; ++i) {
      for (int tries = 0; tries < 20; ++tries) {
        Vec3 p = {box.cx + rng.uniform(-region.rx, region.rx),
                  box.cy + rng.uniform(-region.ry, region.ry),
                  box.cz + rng.uniform(-region.rz, region.rz)};
        if (point_in_box(p, box)) continue;
        cloud.pts.push_back(p);
        cloud.intensity.push_back(rng.uniform());
        break;
      }
    }
    seq.clouds.push_back(std::move(cloud));

    MotionDelta delta = {v_seq.x + rng.gauss(0.0, cfg.jitter_frac * cfg.motion_sigma.x),
                         v_seq.y + rng.gauss(0.0, cfg.jitter_frac * cfg.motion_sigma.y),
                         v_seq.z + rng.gauss(0.0, cfg.jitter_frac * cfg.motion_sigma.z),
                         w_seq + rng.gauss(0.0, cfg.jitter_frac * cfg.yaw_sigma)};
    box = apply_motion(box, delta, MotionFrame::canonical);
  }
  return seq;
}

// Camera sits with x = -sensor y, y = -sensor z, z = sensor x, plus a small
// offset, matching the heading convention the label conversion assumes.
inline data::CalibData default_calib() {
  data::CalibData calib;
  calib.entries["Tr_velo_cam"] = {0, -1, 0, 0.05, 0, 0, -1, -0.08, 1, 0, 0, 0.27};
  return calib;
}

inline void write_sequence(const GeneratedSequence& seq, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "velodyne" / seq.id);
  fs::create_directories(root / "label_02");
  fs::create_directories(root / "calib");

  data::CalibData calib = default_calib();
  data::save_calib(data::calib_path(root, seq.id), calib);
  data::RigidTransform velo_to_cam = calib.velo_to_cam();

  std::vector<data::ObjectLabel> labels;
  for (size_t f = 0; f < seq.clouds.size(); ++f) {
    data::save_velodyne(data::scan_path(root, seq.id, int(f)), seq.clouds[f]);
    labels.push_back(data::box_to_label(seq.gt[f], velo_to_cam, int(f), 0, seq.category));
    for (size_t d = 0; d < seq.distractors.size(); ++d)
      labels.push_back(data::box_to_label(seq.distractors[d], velo_to_cam, int(f),
                                          int(d) + 1, seq.category));
  }
  data::save_labels(data::label_path(root, seq.id), labels);
}

inline std::vector<std::string> write_dataset(const GenConfig& cfg,
                                              const std::filesystem::path& root) {
  std::vector<std::string> ids;
  for (size_t s = 0; s < cfg.n_sequences; ++s) {
    GeneratedSequence seq = generate_sequence(cfg, s);
    write_sequence(seq, root);
    ids.push_back(seq.id);
  }
  return ids;
}

}  // namespace p2p::synth
