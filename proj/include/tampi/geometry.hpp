#pragma once

// Planar geometry primitives shared by the kinematic world, the collision
// checker and the renderer: SE(2) poses, axis-aligned and oriented boxes,
// and exact segment/shape distance functions (no sampling).

#include <algorithm>
#include <cmath>

namespace tampi {

inline constexpr double kPi = 3.14159265358979323846264338327950288;

/// Maps an angle to [-pi, pi).
inline double wrap_angle(double a) {
  double w = a - 2.0 * kPi * std::floor((a + kPi) / (2.0 * kPi));
  if (w >= kPi) w -= 2.0 * kPi;  // guards the floating rounding edge at +pi
  return w;
}

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm_sq() const { return x * x + y * y; }
  double norm() const { return std::sqrt(norm_sq()); }
};

inline double dist(Vec2 a, Vec2 b) { return (a - b).norm(); }

/// Rigid planar transform: rotation by theta then translation by (x, y).
struct PlanarPose {
  double x = 0.0, y = 0.0, theta = 0.0;

  Vec2 position() const { return {x, y}; }

  Vec2 apply(Vec2 p) const {
    double c = std::cos(theta), s = std::sin(theta);
    return {x + c * p.x - s * p.y, y + s * p.x + c * p.y};
  }

  /// this * other (apply `other` in this frame).
  PlanarPose compose(const PlanarPose& o) const {
    Vec2 p = apply({o.x, o.y});
    return {p.x, p.y, wrap_angle(theta + o.theta)};
  }

  PlanarPose inverse() const {
    double c = std::cos(theta), s = std::sin(theta);
    return {-(c * x + s * y), -(-s * x + c * y), wrap_angle(-theta)};
  }
};

struct Segment {
  Vec2 a, b;
};

struct AABB {
  Vec2 lo, hi;

  bool contains(Vec2 p) const { return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y; }
  Vec2 center() const { return {(lo.x + hi.x) * 0.5, (lo.y + hi.y) * 0.5}; }
  Vec2 half() const { return {(hi.x - lo.x) * 0.5, (hi.y - lo.y) * 0.5}; }
  AABB inflated(double m) const { return {{lo.x - m, lo.y - m}, {hi.x + m, hi.y + m}}; }
  bool intersects(const AABB& o) const {
    return lo.x <= o.hi.x && hi.x >= o.lo.x && lo.y <= o.hi.y && hi.y >= o.lo.y;
  }
};

/// Box with half extents (hx, hy) at an SE(2) pose.
struct OBox {
  PlanarPose pose;
  double hx = 0.0, hy = 0.0;
};

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

inline double dist_seg_point(const Segment& s, Vec2 p) {
  Vec2 d = s.b - s.a;
  double len_sq = d.norm_sq();
  if (len_sq <= 0.0) return dist(s.a, p);
  double t = std::clamp((p - s.a).dot(d) / len_sq, 0.0, 1.0);
  return dist(s.a + d * t, p);
}

inline double dist_seg_seg(const Segment& s1, const Segment& s2) {
  Vec2 d1 = s1.b - s1.a, d2 = s2.b - s2.a, r = s1.a - s2.a;
  double denom = d1.cross(d2);
  if (denom != 0.0) {
    double t = d2.cross(r) / denom;
    double u = d1.cross(r) / denom;
    if (t >= 0.0 && t <= 1.0 && u >= 0.0 && u <= 1.0) return 0.0;  // proper crossing
  }
  double d = dist_seg_point(s2, s1.a);
  d = std::min(d, dist_seg_point(s2, s1.b));
  d = std::min(d, dist_seg_point(s1, s2.a));
  return std::min(d, dist_seg_point(s1, s2.b));
}

inline double dist_point_aabb(Vec2 p, const AABB& b) {
  double dx = std::max({b.lo.x - p.x, 0.0, p.x - b.hi.x});
  double dy = std::max({b.lo.y - p.y, 0.0, p.y - b.hi.y});
  return std::sqrt(dx * dx + dy * dy);
}

/// Liang-Barsky: true iff the segment has a nonempty intersection with the box.
inline bool seg_intersects_aabb(const Segment& s, const AABB& b) {
  Vec2 d = s.b - s.a;
  double t0 = 0.0, t1 = 1.0;
  const double p[4] = {-d.x, d.x, -d.y, d.y};
  const double q[4] = {s.a.x - b.lo.x, b.hi.x - s.a.x, s.a.y - b.lo.y, b.hi.y - s.a.y};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;  // parallel and outside the slab
    } else {
      double t = q[i] / p[i];
      if (p[i] < 0.0) {
        if (t > t1) return false;
        t0 = std::max(t0, t);
      } else {
        if (t < t0) return false;
        t1 = std::min(t1, t);
      }
    }
  }
  return t0 <= t1;
}

inline double dist_seg_aabb(const Segment& s, const AABB& b) {
  if (seg_intersects_aabb(s, b)) return 0.0;
  Vec2 c[4] = {{b.lo.x, b.lo.y}, {b.hi.x, b.lo.y}, {b.hi.x, b.hi.y}, {b.lo.x, b.hi.y}};
  double d = dist_seg_seg(s, {c[0], c[1]});
  d = std::min(d, dist_seg_seg(s, {c[1], c[2]}));
  d = std::min(d, dist_seg_seg(s, {c[2], c[3]}));
  return std::min(d, dist_seg_seg(s, {c[3], c[0]}));
}

inline double dist_point_obox(Vec2 p, const OBox& box) {
  PlanarPose inv = box.pose.inverse();
  Vec2 q = inv.apply(p);
  return dist_point_aabb(q, {{-box.hx, -box.hy}, {box.hx, box.hy}});
}

inline double dist_seg_obox(const Segment& s, const OBox& box) {
  PlanarPose inv = box.pose.inverse();
  Segment local{inv.apply(s.a), inv.apply(s.b)};
  return dist_seg_aabb(local, {{-box.hx, -box.hy}, {box.hx, box.hy}});
}

inline bool point_in_obox(Vec2 p, const OBox& box) {
  PlanarPose inv = box.pose.inverse();
  Vec2 q = inv.apply(p);
  return std::abs(q.x) <= box.hx && std::abs(q.y) <= box.hy;
}

// ---------------------------------------------------------------------------
// Overlap tests (margin inflates both shapes; margin 0 is exact for boxes)
// ---------------------------------------------------------------------------

inline bool disks_overlap(Vec2 c1, double r1, Vec2 c2, double r2, double margin = 0.0) {
  double rr = r1 + r2 + margin;
  return (c1 - c2).norm_sq() < rr * rr;
}

inline bool disk_obox_overlap(Vec2 c, double r, const OBox& box, double margin = 0.0) {
  return dist_point_obox(c, box) < r + margin;
}

/// Separating-axis test over both boxes' axes. Exact at margin 0; a positive
/// margin inflates the extents, which is conservative near corners.
inline bool oboxes_overlap(const OBox& a, const OBox& b, double margin = 0.0) {
  auto corners = [](const OBox& o, Vec2 out[4]) {
    out[0] = o.pose.apply({+o.hx, +o.hy});
    out[1] = o.pose.apply({-o.hx, +o.hy});
    out[2] = o.pose.apply({-o.hx, -o.hy});
    out[3] = o.pose.apply({+o.hx, -o.hy});
  };
  Vec2 ca[4], cb[4];
  corners(a, ca);
  corners(b, cb);
  const OBox* boxes[2] = {&a, &b};
  for (int bi = 0; bi < 2; ++bi) {
    double th = boxes[bi]->pose.theta;
    Vec2 axes[2] = {{std::cos(th), std::sin(th)}, {-std::sin(th), std::cos(th)}};
    for (const Vec2& ax : axes) {
      auto project = [&](Vec2* cs) {
        double lo = cs[0].dot(ax), hi = lo;
        for (int i = 1; i < 4; ++i) {
          double v = cs[i].dot(ax);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        return std::pair<double, double>{lo, hi};
      };
      auto [alo, ahi] = project(ca);
      auto [blo, bhi] = project(cb);
      if (ahi + margin * 0.5 < blo - margin * 0.5 || bhi + margin * 0.5 < alo - margin * 0.5)
        return false;
    }
  }
  return true;
}

}  // namespace tampi
