#pragma once

#include "p2p/geometry.hpp"
#include "p2p/pointcloud.hpp"

namespace p2p::augment {

struct AugmentConfig {
  double flip_prob = 0.5;
  double rot_max_deg = 5.0;          // per-frame rotation about the frame's box center
  Vec3 translate_sigma = {0.3, 0.1, 0.1};  // jitter of the current box and its points

  static AugmentConfig off() { return {0.0, 0.0, {0.0, 0.0, 0.0}}; }
};

// Randomizes one canonical training pair in place: an optional mirror across
// the x-z plane, an independent small rotation of each frame's crop about its
// box center, and a Gaussian shift of the current box together with the points
// inside it. The caller recomputes the regression target afterwards. Every
// random draw happens on every call so the consumed stream length is fixed.
inline void augment_pair(PointCloud& prev_cloud, Box3D& prev_box, PointCloud& curr_cloud,
                         Box3D& curr_box, const AugmentConfig& cfg, Rng& rng) {
  const double u_flip = rng.uniform();
  const double rot_max = cfg.rot_max_deg * kPi / 180.0;
  const double a_prev = rng.uniform(-rot_max, rot_max);
  const double a_curr = rng.uniform(-rot_max, rot_max);
  const Vec3 shift = {rng.gauss(0.0, cfg.translate_sigma.x),
                      rng.gauss(0.0, cfg.translate_sigma.y),
                      rng.gauss(0.0, cfg.translate_sigma.z)};

  if (u_flip < cfg.flip_prob) {
    prev_cloud = mirror_y(prev_cloud);
    curr_cloud = mirror_y(curr_cloud);
    prev_box.cy = -prev_box.cy;
    prev_box.yaw = wrap_angle(-prev_box.yaw);
    curr_box.cy = -curr_box.cy;
    curr_box.yaw = wrap_angle(-curr_box.yaw);
  }

  if (a_prev != 0.0) {
    prev_cloud = rotate_cloud_z(prev_cloud, prev_box.center(), a_prev);
    prev_box.yaw = wrap_angle(prev_box.yaw + a_prev);
  }
  if (a_curr != 0.0) {
    curr_cloud = rotate_cloud_z(curr_cloud, curr_box.center(), a_curr);
    curr_box.yaw = wrap_angle(curr_box.yaw + a_curr);
  }

  if (shift.x != 0.0 || shift.y != 0.0 || shift.z != 0.0) {
    for (size_t i = 0; i < curr_cloud.size(); ++i)
      if (point_in_box(curr_cloud.pts[i], curr_box))
        curr_cloud.pts[i] = curr_cloud.pts[i] + shift;
    curr_box.cx += shift.x;
    curr_box.cy += shift.y;
    curr_box.cz += shift.z;
  }
}

}  // namespace p2p::augment
