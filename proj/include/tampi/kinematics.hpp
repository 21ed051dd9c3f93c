#pragma once

// Planar revolute-chain kinematics: forward kinematics, the analytic 3xN
// Jacobian, configuration-space distance, and a seeded damped-least-squares
// inverse kinematics solver. The solver's budget is deterministic (iteration
// counts derived from the nominal millisecond budget) so that everything
// built on top of it is bit-reproducible; wall time is never consulted.

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "tampi/common.hpp"
#include "tampi/geometry.hpp"
#include "tampi/rng.hpp"

namespace tampi {

using JointConfig = std::vector<double>;

struct ChainSpec {
  std::vector<double> link_lengths;
  std::vector<std::array<double, 2>> joint_limits;  // [lo, hi] per joint

  int dof() const { return static_cast<int>(link_lengths.size()); }

  double reach() const {
    double r = 0.0;
    for (double l : link_lengths) r += l;
    return r;
  }

  void validate() const {
    if (link_lengths.size() < 2) throw ContractError("chain needs at least 2 links");
    if (joint_limits.size() != link_lengths.size())
      throw ContractError("joint_limits size must match link_lengths");
    for (double l : link_lengths)
      if (!(l > 0.0)) throw ContractError("link lengths must be positive");
    for (auto& lim : joint_limits)
      if (!(lim[0] < lim[1])) throw ContractError("joint limit lo must be below hi");
  }

  /// Three unit links with symmetric [-pi, pi] limits.
  static ChainSpec default_chain() {
    ChainSpec s;
    s.link_lengths = {1.0, 1.0, 1.0};
    s.joint_limits = {{-kPi, kPi}, {-kPi, kPi}, {-kPi, kPi}};
    return s;
  }
};

inline void check_config(const ChainSpec& spec, const JointConfig& q) {
  if (static_cast<int>(q.size()) != spec.dof())
    throw ContractError(str_printf("config has %zu joints, chain has %d", q.size(), spec.dof()));
}

/// EE pose: positions accumulate link vectors at cumulative joint angles,
/// orientation is the wrapped angle sum.
inline PlanarPose forward_kinematics(const ChainSpec& spec, const JointConfig& q) {
  check_config(spec, q);
  double c = 0.0, x = 0.0, y = 0.0;
  for (int i = 0; i < spec.dof(); ++i) {
    c += q[i];
    x += spec.link_lengths[i] * std::cos(c);
    y += spec.link_lengths[i] * std::sin(c);
  }
  return {x, y, wrap_angle(c)};
}

/// Joint positions including the base at index 0 and the EE at index N.
inline std::vector<Vec2> joint_positions(const ChainSpec& spec, const JointConfig& q) {
  check_config(spec, q);
  std::vector<Vec2> pts(static_cast<size_t>(spec.dof()) + 1);
  double c = 0.0, x = 0.0, y = 0.0;
  pts[0] = {0.0, 0.0};
  for (int i = 0; i < spec.dof(); ++i) {
    c += q[i];
    x += spec.link_lengths[i] * std::cos(c);
    y += spec.link_lengths[i] * std::sin(c);
    pts[static_cast<size_t>(i) + 1] = {x, y};
  }
  return pts;
}

/// 3xN Jacobian of (x, y, theta) w.r.t. joint angles, row-major rows
/// [dx/dq; dy/dq; dtheta/dq]; the theta row is all ones.
inline std::vector<double> jacobian(const ChainSpec& spec, const JointConfig& q) {
  check_config(spec, q);
  int n = spec.dof();
  std::vector<double> cum(static_cast<size_t>(n));
  double c = 0.0;
  for (int i = 0; i < n; ++i) {
    c += q[i];
    cum[static_cast<size_t>(i)] = c;
  }
  std::vector<double> J(3 * static_cast<size_t>(n), 0.0);
  for (int j = 0; j < n; ++j) {
    double sx = 0.0, sy = 0.0;
    for (int i = j; i < n; ++i) {
      sx -= spec.link_lengths[static_cast<size_t>(i)] * std::sin(cum[static_cast<size_t>(i)]);
      sy += spec.link_lengths[static_cast<size_t>(i)] * std::cos(cum[static_cast<size_t>(i)]);
    }
    J[static_cast<size_t>(j)] = sx;
    J[static_cast<size_t>(n + j)] = sy;
    J[static_cast<size_t>(2 * n + j)] = 1.0;
  }
  return J;
}

/// L-infinity distance between configurations (raw angles, no wrapping: the
/// configuration space is the limit box, not a torus).
inline double cheby_distance(const JointConfig& a, const JointConfig& b) {
  if (a.size() != b.size()) throw ContractError("cheby_distance: size mismatch");
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline JointConfig clamp_to_limits(const ChainSpec& spec, JointConfig q) {
  check_config(spec, q);
  for (int i = 0; i < spec.dof(); ++i) {
    auto& lim = spec.joint_limits[static_cast<size_t>(i)];
    q[static_cast<size_t>(i)] = std::clamp(q[static_cast<size_t>(i)], lim[0], lim[1]);
  }
  return q;
}

// ---------------------------------------------------------------------------
// Inverse kinematics
// ---------------------------------------------------------------------------

enum class IkStatus { Success, Unreachable, Timeout };

struct IkOptions {
  double budget_ms = 10.0;  // deterministic: converted to iterations below
  double tol_pos = 1e-4;    // meters
  double tol_ang = 1e-3;    // radians
  double lambda = 0.1;      // damping
  int max_restarts = 8;
};

/// Iterations charged per nominal millisecond of budget (a DLS iteration on
/// the chains used here runs in well under a microsecond, so this stays
/// far inside the nominal wall budget).
inline constexpr int kIkItersPerMs = 400;

struct IkResult {
  IkStatus status = IkStatus::Timeout;
  JointConfig q;                        // chosen solution (closest to the seed)
  std::vector<JointConfig> solutions;   // every distinct converged solution
  int iterations = 0;

  bool ok() const { return status == IkStatus::Success; }
};

namespace detail {

/// Solves (J J^T + lambda^2 I) y = e for the 3x3 normal system, then returns
/// dq = J^T y. Plain Gaussian elimination with partial pivoting.
inline bool dls_step(const std::vector<double>& J, int n, const double e[3], double lambda,
                     std::vector<double>& dq) {
  double A[3][4];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += J[static_cast<size_t>(r * n + k)] * J[static_cast<size_t>(c * n + k)];
      A[r][c] = s;
    }
    A[r][r] += lambda * lambda;
    A[r][3] = e[r];
  }
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
    if (A[piv][col] == 0.0) return false;
    if (piv != col)
      for (int c = col; c < 4; ++c) std::swap(A[piv][c], A[col][c]);
    for (int r = col + 1; r < 3; ++r) {
      double f = A[r][col] / A[col][col];
      for (int c = col; c < 4; ++c) A[r][c] -= f * A[col][c];
    }
  }
  double y[3];
  for (int r = 2; r >= 0; --r) {
    double s = A[r][3];
    for (int c = r + 1; c < 3; ++c) s -= A[r][c] * y[c];
    y[r] = s / A[r][r];
  }
  dq.assign(static_cast<size_t>(n), 0.0);
  for (int k = 0; k < n; ++k)
    for (int r = 0; r < 3; ++r) dq[static_cast<size_t>(k)] += J[static_cast<size_t>(r * n + k)] * y[r];
  return true;
}

/// Closed-form elbow-up/elbow-down candidates for 3-link chains (position of
/// the wrist via the proximal two links, orientation absorbed by the last
/// joint). Used as warm restarts; the DLS loop polishes and verifies them.
inline std::vector<JointConfig> analytic_3r(const ChainSpec& spec, const PlanarPose& target) {
  std::vector<JointConfig> out;
  if (spec.dof() != 3) return out;
  double l1 = spec.link_lengths[0], l2 = spec.link_lengths[1], l3 = spec.link_lengths[2];
  Vec2 w{target.x - l3 * std::cos(target.theta), target.y - l3 * std::sin(target.theta)};
  double d_sq = w.norm_sq();
  double c2 = (d_sq - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  if (c2 < -1.0 - 1e-9 || c2 > 1.0 + 1e-9) return out;
  c2 = std::clamp(c2, -1.0, 1.0);
  for (double sgn : {1.0, -1.0}) {
    double q2 = sgn * std::acos(c2);
    double q1 = std::atan2(w.y, w.x) - std::atan2(l2 * std::sin(q2), l1 + l2 * std::cos(q2));
    double q3 = target.theta - q1 - q2;
    out.push_back({wrap_angle(q1), wrap_angle(q2), wrap_angle(q3)});
  }
  return out;
}

}  // namespace detail

/// Damped-least-squares IK seeded at `seed_q`; extra restarts draw uniform
/// configurations from `rng`. Among all solutions found within the budget the
/// one minimizing the L-infinity distance to the seed is returned, which
/// biases the caller's plans toward staying near its reference configuration.
inline IkResult ik_seeded(const ChainSpec& spec, const PlanarPose& target, const JointConfig& seed_q,
                          Rng& rng, const IkOptions& opts = {}) {
  check_config(spec, seed_q);
  IkResult res;
  int total_iters = std::max(1, static_cast<int>(opts.budget_ms * kIkItersPerMs));
  int restarts = std::max(1, opts.max_restarts);
  int per_restart = std::max(8, total_iters / restarts);

  // Reachability screen: wrist position for the given orientation must lie
  // within the sub-chain annulus (outer bound only; inner bound is 0 for the
  // chains used here, whose distal sub-chain can fold onto itself).
  double ln = spec.link_lengths.back();
  Vec2 wrist{target.x - ln * std::cos(target.theta), target.y - ln * std::sin(target.theta)};
  if (wrist.norm() > spec.reach() - ln + 1e-9) {
    res.status = IkStatus::Unreachable;
    return res;
  }

  std::vector<JointConfig> warm = detail::analytic_3r(spec, target);

  int used = 0;
  for (int r = 0; r < restarts && used < total_iters; ++r) {
    JointConfig q(static_cast<size_t>(spec.dof()));
    if (r == 0) {
      q = seed_q;
    } else if (static_cast<size_t>(r) <= warm.size()) {
      q = clamp_to_limits(spec, warm[static_cast<size_t>(r) - 1]);
    } else {
      for (int i = 0; i < spec.dof(); ++i) {
        auto& lim = spec.joint_limits[static_cast<size_t>(i)];
        q[static_cast<size_t>(i)] = rng.uniform(lim[0], lim[1]);
      }
    }
    std::vector<double> dq;
    double best_err = 1e300;
    int since_improve = 0;
    for (int it = 0; it < per_restart && used < total_iters; ++it, ++used) {
      PlanarPose cur = forward_kinematics(spec, q);
      double e[3] = {target.x - cur.x, target.y - cur.y, wrap_angle(target.theta - cur.theta)};
      double epos = std::sqrt(e[0] * e[0] + e[1] * e[1]);
      if (epos <= opts.tol_pos && std::abs(e[2]) <= opts.tol_ang) {
        res.solutions.push_back(q);
        break;
      }
      // hand the remaining budget to the next restart once this descent stalls
      // (typically pinned against a joint limit)
      double err = epos + std::abs(e[2]);
      if (err < best_err * (1.0 - 1e-3)) {
        best_err = err;
        since_improve = 0;
      } else if (++since_improve >= 25) {
        break;
      }
      // clip the error fed to the local step: the linearization is only
      // trustworthy nearby, and full-magnitude errors make DLS oscillate
      if (epos > 0.5) {
        double f = 0.5 / epos;
        e[0] *= f;
        e[1] *= f;
      }
      e[2] = std::clamp(e[2], -0.5, 0.5);
      if (!detail::dls_step(jacobian(spec, q), spec.dof(), e, opts.lambda, dq)) break;
      for (int i = 0; i < spec.dof(); ++i) q[static_cast<size_t>(i)] += dq[static_cast<size_t>(i)];
      q = clamp_to_limits(spec, q);
    }
  }
  res.iterations = used;
  if (res.solutions.empty()) {
    res.status = IkStatus::Timeout;
    return res;
  }
  size_t best = 0;
  double best_d = cheby_distance(res.solutions[0], seed_q);
  for (size_t i = 1; i < res.solutions.size(); ++i) {
    double d = cheby_distance(res.solutions[i], seed_q);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  res.q = res.solutions[best];
  res.status = IkStatus::Success;
  return res;
}

}  // namespace tampi
