#pragma once

// Joint-space motion planning and time parameterization.
//
// Trajectories are chains of rest-to-rest cubic segments: every knot has zero
// velocity, each segment follows the smoothstep cubic q(s) = q0 + d*(3s^2 -
// 2s^3). That makes the profile C1 by construction, puts the velocity peak
// (1.5|d|/T) at mid-segment and the acceleration peak (6|d|/T^2) at the
// boundaries, so the minimal duration satisfying per-joint limits has a
// closed form. Shortcutting replaces knot spans with single limit-respecting
// segments and only ever accepts strict duration decreases.

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "tampi/kinematics.hpp"
#include "tampi/rng.hpp"

namespace tampi {

/// Predicate deciding whether a configuration is collision-free.
using CollisionFn = std::function<bool(const JointConfig&)>;

struct Limits {
  std::vector<double> v_max;  // rad/s per joint
  std::vector<double> a_max;  // rad/s^2 per joint

  static Limits default_for(int dof) {
    Limits l;
    l.v_max.assign(static_cast<size_t>(dof), 1.0);
    l.a_max.assign(static_cast<size_t>(dof), 2.0);
    return l;
  }

  void validate(int dof) const {
    if (static_cast<int>(v_max.size()) != dof || static_cast<int>(a_max.size()) != dof)
      throw ContractError("limits must match chain dof");
    for (double v : v_max)
      if (!(v > 0.0)) throw ContractError("velocity limits must be positive");
    for (double a : a_max)
      if (!(a > 0.0)) throw ContractError("acceleration limits must be positive");
  }
};

using JointPath = std::vector<JointConfig>;

/// Minimal duration of one rest-to-rest cubic covering displacement d.
inline double segment_duration(const JointConfig& from, const JointConfig& to, const Limits& lim) {
  double T = 0.0;
  for (size_t j = 0; j < from.size(); ++j) {
    double d = std::abs(to[j] - from[j]);
    if (d == 0.0) continue;
    T = std::max(T, 1.5 * d / lim.v_max[j]);
    T = std::max(T, std::sqrt(6.0 * d / lim.a_max[j]));
  }
  return T;
}

class TimedTrajectory {
public:
  struct Knot {
    double t;
    JointConfig q;
  };

  TimedTrajectory() = default;
  TimedTrajectory(std::vector<Knot> knots) : knots_(std::move(knots)) {}

  const std::vector<Knot>& knots() const { return knots_; }
  double duration() const { return knots_.empty() ? 0.0 : knots_.back().t; }
  const JointConfig& start() const { return knots_.front().q; }
  const JointConfig& goal() const { return knots_.back().q; }

  JointConfig sample(double t) const {
    auto [i, s] = locate(t);
    if (i < 0) return knots_.front().q;
    const JointConfig& a = knots_[static_cast<size_t>(i)].q;
    const JointConfig& b = knots_[static_cast<size_t>(i) + 1].q;
    if (s <= 0.0) return a;  // knot times reproduce knot configurations exactly
    if (s >= 1.0) return b;
    double w = s * s * (3.0 - 2.0 * s);
    JointConfig q(a.size());
    for (size_t j = 0; j < a.size(); ++j) q[j] = a[j] + (b[j] - a[j]) * w;
    return q;
  }

  JointConfig velocity(double t) const {
    auto [i, s] = locate(t);
    if (i < 0) return JointConfig(knots_.front().q.size(), 0.0);
    const Knot& ka = knots_[static_cast<size_t>(i)];
    const Knot& kb = knots_[static_cast<size_t>(i) + 1];
    double T = kb.t - ka.t;
    double dw = 6.0 * s * (1.0 - s) / T;
    JointConfig v(ka.q.size());
    for (size_t j = 0; j < v.size(); ++j) v[j] = (kb.q[j] - ka.q[j]) * dw;
    return v;
  }

  JointConfig acceleration(double t) const {
    auto [i, s] = locate(t);
    if (i < 0) return JointConfig(knots_.front().q.size(), 0.0);
    const Knot& ka = knots_[static_cast<size_t>(i)];
    const Knot& kb = knots_[static_cast<size_t>(i) + 1];
    double T = kb.t - ka.t;
    double ddw = (6.0 - 12.0 * s) / (T * T);
    JointConfig a(ka.q.size());
    for (size_t j = 0; j < a.size(); ++j) a[j] = (kb.q[j] - ka.q[j]) * ddw;
    return a;
  }

private:
  // segment index and normalized position; -1 for empty/degenerate cases
  std::pair<int, double> locate(double t) const {
    if (knots_.size() < 2) return {-1, 0.0};
    if (t <= knots_.front().t) return {0, 0.0};
    if (t >= knots_.back().t) return {static_cast<int>(knots_.size()) - 2, 1.0};
    size_t lo = 0, hi = knots_.size() - 1;
    while (hi - lo > 1) {
      size_t mid = (lo + hi) / 2;
      if (knots_[mid].t <= t)
        lo = mid;
      else
        hi = mid;
    }
    double T = knots_[hi].t - knots_[lo].t;
    return {static_cast<int>(lo), T > 0.0 ? (t - knots_[lo].t) / T : 0.0};
  }

  std::vector<Knot> knots_;
};

/// Times a waypoint path with one rest-to-rest segment per hop. Consecutive
/// duplicate waypoints are merged.
inline TimedTrajectory time_path(const JointPath& path, const Limits& lim) {
  if (path.empty()) throw ContractError("time_path: empty path");
  lim.validate(static_cast<int>(path[0].size()));
  std::vector<TimedTrajectory::Knot> knots;
  knots.push_back({0.0, path[0]});
  for (size_t i = 1; i < path.size(); ++i) {
    double T = segment_duration(knots.back().q, path[i], lim);
    if (T == 0.0) continue;
    knots.push_back({knots.back().t + T, path[i]});
  }
  return TimedTrajectory(std::move(knots));
}

// ---------------------------------------------------------------------------
// BiRRT
// ---------------------------------------------------------------------------

struct BirrtParams {
  int max_iters = 5000;
  double step = 0.1;         // L-infinity extension step, radians
  double resolution = 0.02;  // L-infinity collision-check spacing, radians
};

namespace detail {

/// Interior + far-endpoint validity of the straight segment a -> b.
inline bool segment_valid(const JointConfig& a, const JointConfig& b, const CollisionFn& free,
                          double resolution) {
  double d = cheby_distance(a, b);
  int n = std::max(1, static_cast<int>(std::ceil(d / resolution)));
  for (int k = 1; k <= n; ++k) {
    double s = static_cast<double>(k) / n;
    JointConfig q(a.size());
    for (size_t j = 0; j < a.size(); ++j) q[j] = a[j] + (b[j] - a[j]) * s;
    if (!free(q)) return false;
  }
  return true;
}

struct Tree {
  std::vector<JointConfig> q;
  std::vector<int> parent;

  int nearest(const JointConfig& target) const {
    int best = 0;
    double best_d = cheby_distance(q[0], target);
    for (size_t i = 1; i < q.size(); ++i) {
      double d = cheby_distance(q[i], target);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    return best;
  }

  void add(const JointConfig& cfg, int par) {
    q.push_back(cfg);
    parent.push_back(par);
  }

  JointPath trace(int idx) const {
    JointPath p;
    for (int i = idx; i >= 0; i = parent[static_cast<size_t>(i)]) p.push_back(q[static_cast<size_t>(i)]);
    return p;  // node -> root order
  }
};

enum class Extend { Trapped, Advanced, Reached };

inline Extend extend_tree(Tree& tree, const JointConfig& target, const CollisionFn& free,
                          const BirrtParams& p, int& new_idx) {
  int near = tree.nearest(target);
  const JointConfig& qn = tree.q[static_cast<size_t>(near)];
  double d = cheby_distance(qn, target);
  if (d == 0.0) {
    new_idx = near;
    return Extend::Reached;
  }
  double s = std::min(1.0, p.step / d);
  JointConfig q_new(qn.size());
  for (size_t j = 0; j < qn.size(); ++j) q_new[j] = qn[j] + (target[j] - qn[j]) * s;
  if (!segment_valid(qn, q_new, free, p.resolution)) return Extend::Trapped;
  tree.add(q_new, near);
  new_idx = static_cast<int>(tree.q.size()) - 1;
  return s >= 1.0 ? Extend::Reached : Extend::Advanced;
}

}  // namespace detail

/// Bidirectional RRT with greedy connection, alternating trees each
/// iteration. `free` must return true for collision-free configurations.
/// Returns a waypoint path from start to goal, or nullopt if none was found
/// within max_iters (or an endpoint is itself in collision).
inline std::optional<JointPath> birrt(const ChainSpec& spec, const JointConfig& start,
                                      const JointConfig& goal, const CollisionFn& free, Rng& rng,
                                      const BirrtParams& params = {}, int* iters_used = nullptr) {
  check_config(spec, start);
  check_config(spec, goal);
  if (iters_used) *iters_used = 0;
  if (!free(start) || !free(goal)) return std::nullopt;
  if (detail::segment_valid(start, goal, free, params.resolution)) return JointPath{start, goal};

  detail::Tree ta, tb;
  ta.add(start, -1);
  tb.add(goal, -1);
  bool a_is_start = true;

  for (int iter = 0; iter < params.max_iters; ++iter) {
    if (iters_used) *iters_used = iter + 1;
    JointConfig q_rand(static_cast<size_t>(spec.dof()));
    for (int j = 0; j < spec.dof(); ++j) {
      auto& lim = spec.joint_limits[static_cast<size_t>(j)];
      q_rand[static_cast<size_t>(j)] = rng.uniform(lim[0], lim[1]);
    }
    int a_idx = -1;
    if (detail::extend_tree(ta, q_rand, free, params, a_idx) != detail::Extend::Trapped) {
      const JointConfig target = ta.q[static_cast<size_t>(a_idx)];
      int b_idx = -1;
      detail::Extend st;
      do {
        st = detail::extend_tree(tb, target, free, params, b_idx);
      } while (st == detail::Extend::Advanced);
      if (st == detail::Extend::Reached) {
        JointPath pa = ta.trace(a_idx);   // meet -> start/goal root
        JointPath pb = tb.trace(b_idx);
        std::reverse(pa.begin(), pa.end());
        if (pa.size() > 1 && pb.size() > 0 && pa.back() == pb.front()) pb.erase(pb.begin());
        pa.insert(pa.end(), pb.begin(), pb.end());
        if (!a_is_start) std::reverse(pa.begin(), pa.end());
        return pa;
      }
    }
    std::swap(ta, tb);
    a_is_start = !a_is_start;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Shortcutting
// ---------------------------------------------------------------------------

struct SmoothParams {
  int iters = 150;
  double resolution = 0.02;
};

/// Times the path, then repeatedly proposes replacing a random knot span with
/// a single straight rest-to-rest segment; accepted only when collision-free
/// and strictly duration-decreasing, so the result never regresses.
inline TimedTrajectory shortcut_smooth(const JointPath& path, const CollisionFn& free,
                                       const Limits& lim, Rng& rng, const SmoothParams& params = {}) {
  TimedTrajectory traj = time_path(path, lim);
  std::vector<JointConfig> cfg;
  cfg.reserve(traj.knots().size());
  for (auto& k : traj.knots()) cfg.push_back(k.q);

  auto rebuild = [&]() {
    std::vector<TimedTrajectory::Knot> knots;
    knots.push_back({0.0, cfg[0]});
    for (size_t i = 1; i < cfg.size(); ++i)
      knots.push_back({knots.back().t + segment_duration(cfg[i - 1], cfg[i], lim), cfg[i]});
    traj = TimedTrajectory(std::move(knots));
  };

  for (int it = 0; it < params.iters; ++it) {
    size_t n = cfg.size();
    if (n < 3) break;
    size_t i = rng.below(static_cast<uint32_t>(n - 2));
    size_t j = i + 2 + rng.below(static_cast<uint32_t>(n - i - 2));
    double old_dur = 0.0;
    for (size_t k = i; k < j; ++k) old_dur += segment_duration(cfg[k], cfg[k + 1], lim);
    double new_dur = segment_duration(cfg[i], cfg[j], lim);
    if (new_dur >= old_dur - 1e-12) continue;
    if (!detail::segment_valid(cfg[i], cfg[j], free, params.resolution)) continue;
    cfg.erase(cfg.begin() + static_cast<long>(i) + 1, cfg.begin() + static_cast<long>(j));
  }
  rebuild();
  return traj;
}

/// Samples the trajectory at t = 0, dt, 2dt, ...; the final time T is always
/// included even when it is not a multiple of dt.
inline JointPath resample(const TimedTrajectory& traj, double dt) {
  if (!(dt > 0.0)) throw ContractError("resample: dt must be positive");
  JointPath out;
  double T = traj.duration();
  for (long k = 0; static_cast<double>(k) * dt < T - 1e-12; ++k)
    out.push_back(traj.sample(static_cast<double>(k) * dt));
  out.push_back(traj.sample(T));
  return out;
}

}  // namespace tampi
