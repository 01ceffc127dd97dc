#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

#include "p2p/common.hpp"

namespace p2p {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

// Upright 3D box. Extents: l along the box x axis (heading), w along y, h along z.
// yaw rotates the box frame about the world z axis, kept in (-pi, pi].
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double w = 0.0, l = 0.0, h = 0.0;
  double yaw = 0.0;

  Vec3 center() const { return {cx, cy, cz}; }
  double volume() const { return w * l * h; }
};

// Relative motion between consecutive boxes: translation plus yaw change.
struct MotionDelta {
  double dx = 0.0, dy = 0.0, dz = 0.0, dyaw = 0.0;
};

// Frame the translation part of a MotionDelta is expressed in: the previous box's
// own frame (canonical) or the sensor frame (world).
enum class MotionFrame { canonical, world };

inline Vec3 rotate_z(const Vec3& p, double a) {
  double c = std::cos(a), s = std::sin(a);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

// World point expressed in the box frame of ref.
inline Vec3 to_canonical(const Vec3& p, const Box3D& ref) {
  return rotate_z(p - ref.center(), -ref.yaw);
}

inline Vec3 from_canonical(const Vec3& p, const Box3D& ref) {
  return rotate_z(p, ref.yaw) + ref.center();
}

inline Box3D to_canonical_box(const Box3D& b, const Box3D& ref) {
  Vec3 c = to_canonical(b.center(), ref);
  return {c.x, c.y, c.z, b.w, b.l, b.h, wrap_angle(b.yaw - ref.yaw)};
}

inline Box3D from_canonical_box(const Box3D& b, const Box3D& ref) {
  Vec3 c = from_canonical(b.center(), ref);
  return {c.x, c.y, c.z, b.w, b.l, b.h, wrap_angle(b.yaw + ref.yaw)};
}

// Corner order: indices 0-3 bottom face (z = cz - h/2), 4-7 top face, each face
// CCW in the box frame starting at (+l/2, +w/2).
inline std::array<Vec3, 8> box_corners(const Box3D& b) {
  const double hx = 0.5 * b.l, hy = 0.5 * b.w, hz = 0.5 * b.h;
  const std::array<std::array<double, 2>, 4> f = {{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
  std::array<Vec3, 8> out;
  for (int i = 0; i < 4; ++i) {
    Vec3 c = rotate_z({f[i][0], f[i][1], 0.0}, b.yaw);
    out[i] = {b.cx + c.x, b.cy + c.y, b.cz - hz};
    out[i + 4] = {b.cx + c.x, b.cy + c.y, b.cz + hz};
  }
  return out;
}

// Closed-box membership (boundary counts as inside).
inline bool point_in_box(const Vec3& p, const Box3D& b) {
  Vec3 q = to_canonical(p, b);
  return std::abs(q.x) <= 0.5 * b.l && std::abs(q.y) <= 0.5 * b.w && std::abs(q.z) <= 0.5 * b.h;
}

namespace detail {

struct P2 {
  double x, y;
};

inline double cross2(const P2& o, const P2& a, const P2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline std::array<P2, 4> bev_corners(const Box3D& b) {
  auto c = box_corners(b);
  return {{{c[0].x, c[0].y}, {c[1].x, c[1].y}, {c[2].x, c[2].y}, {c[3].x, c[3].y}}};
}

// Sutherland-Hodgman: clip a convex CCW polygon against another convex CCW polygon.
template <size_t M>
inline size_t clip_convex(const P2* subject, size_t n, const std::array<P2, M>& clip,
                          P2* out_buf) {
  P2 buf_a[16], buf_b[16];
  const P2* cur = subject;
  size_t cur_n = n;
  P2* next = buf_a;
  for (size_t e = 0; e < M; ++e) {
    const P2& a = clip[e];
    const P2& b = clip[(e + 1) % M];
    size_t next_n = 0;
    for (size_t i = 0; i < cur_n; ++i) {
      const P2& p = cur[(i + cur_n - 1) % cur_n];
      const P2& q = cur[i];
      double sp = cross2(a, b, p);
      double sq = cross2(a, b, q);
      if (sq >= 0.0) {
        if (sp < 0.0) {
          double t = sp / (sp - sq);
          next[next_n++] = {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
        }
        next[next_n++] = q;
      } else if (sp >= 0.0) {
        double t = sp / (sp - sq);
        next[next_n++] = {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
      }
    }
    cur = next;
    cur_n = next_n;
    next = (next == buf_a) ? buf_b : buf_a;
    if (cur_n == 0) break;
  }
  for (size_t i = 0; i < cur_n; ++i) out_buf[i] = cur[i];
  return cur_n;
}

inline double polygon_area(const P2* p, size_t n) {
  if (n < 3) return 0.0;
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const P2& a = p[i];
    const P2& b = p[(i + 1) % n];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

}  // namespace detail

// Area of the intersection of the two boxes' footprints in the x-y plane.
inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  auto pa = detail::bev_corners(a);
  auto pb = detail::bev_corners(b);
  detail::P2 out[16];
  size_t n = detail::clip_convex(pa.data(), 4, pb, out);
  return detail::polygon_area(out, n);
}

// Rotated 3D IoU: BEV polygon clipping times vertical interval overlap.
inline double iou3d(const Box3D& a, const Box3D& b) {
  double inter_area = bev_intersection_area(a, b);
  double z_lo = std::max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h);
  double z_hi = std::min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h);
  double inter = inter_area * std::max(0.0, z_hi - z_lo);
  double uni = a.volume() + b.volume() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Advances a box by one motion step. Canonical deltas are expressed in the previous
// box frame; world deltas in the sensor frame. Size is carried over unchanged.
inline Box3D apply_motion(const Box3D& prev, const MotionDelta& d, MotionFrame frame) {
  Vec3 t = {d.dx, d.dy, d.dz};
  if (frame == MotionFrame::canonical) t = rotate_z(t, prev.yaw);
  return {prev.cx + t.x, prev.cy + t.y, prev.cz + t.z,
          prev.w, prev.l, prev.h, wrap_angle(prev.yaw + d.dyaw)};
}

// Inverse of apply_motion for the given frame: the delta taking prev onto curr.
inline MotionDelta relative_motion(const Box3D& prev, const Box3D& curr,
                                   MotionFrame frame = MotionFrame::canonical) {
  Vec3 t = curr.center() - prev.center();
  if (frame == MotionFrame::canonical) t = rotate_z(t, -prev.yaw);
  return {t.x, t.y, t.z, wrap_angle(curr.yaw - prev.yaw)};
}

}  // namespace p2p
