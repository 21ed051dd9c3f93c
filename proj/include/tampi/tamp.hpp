#pragma once

// Task and motion planning over the planar world. A plan skeleton fixes the
// order in which objects move; grounding a skeleton samples a grasp and a
// placement per stage and solves them with IK; trajectory planning connects
// the grounded configurations with collision-free smoothed joint paths.
//
// The search is anytime under a deterministic virtual-time budget: solver
// work is charged in virtual milliseconds (IK iterations, tree extensions,
// shortcut proposals at fixed rates), wall clocks are never consulted, and
// the candidate sequence for a given seed is budget-independent, so a larger
// budget explores a strict superset of candidates.
//
// A candidate's cost is the sum of Chebyshev configuration distances between
// consecutive key configurations (home, pick 1, place 1, pick 2, ...). The
// bound computed right after grounding equals the final cost exactly, so
// bound gating never discards a would-be improvement.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tampi/motion.hpp"
#include "tampi/world.hpp"

namespace tampi {

// ---------------------------------------------------------------------------
// Skeletons
// ---------------------------------------------------------------------------

struct SkeletonStage {
  int obj_id = -1;
  bool onto = false;  // true: stack onto base_id; false: place into region
  int base_id = -1;
  AABB region;
};

struct PlanSkeleton {
  std::string name;
  std::vector<SkeletonStage> stages;
};

/// Four primitive actions per stage: transit, pick, transfer, place.
inline int symbolic_action_count(const PlanSkeleton& skel) {
  return static_cast<int>(skel.stages.size()) * 4;
}

/// Stacking admits exactly one bottom-up order; region tasks admit every
/// permutation of the moved objects.
inline std::vector<PlanSkeleton> enumerate_skeletons(const TaskSpec& task) {
  std::vector<PlanSkeleton> out;
  if (!task.stack_order.empty()) {
    PlanSkeleton s;
    s.name = "stack_bottom_up";
    for (size_t i = 1; i < task.stack_order.size(); ++i)
      s.stages.push_back({task.stack_order[i], true, task.stack_order[i - 1], {}});
    out.push_back(std::move(s));
    return out;
  }
  std::vector<int> ids;
  for (auto& [id, region] : task.target_regions) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  do {
    PlanSkeleton s;
    s.name = "order";
    for (int id : ids) {
      s.name += "_" + std::to_string(id);
      s.stages.push_back({id, false, -1, task.target_regions.at(id)});
    }
    out.push_back(std::move(s));
  } while (std::next_permutation(ids.begin(), ids.end()));
  return out;
}

// ---------------------------------------------------------------------------
// Ground plans
// ---------------------------------------------------------------------------

struct GroundStage {
  int obj_id = -1;
  PlanarPose grasp_ee;   // EE pose commanded at attach
  PlanarPose grasp_tf;   // object pose in the EE frame while carried
  PlanarPose place_obj;  // intended object pose at release
  PlanarPose place_ee;
  JointConfig q_pick;
  JointConfig q_place;
  TimedTrajectory transit;
  TimedTrajectory transfer;
};

struct GroundPlan {
  JointConfig q_start;
  std::vector<GroundStage> stages;
  double cost = 0.0;

  std::vector<JointConfig> key_configs() const {
    std::vector<JointConfig> out{q_start};
    for (auto& s : stages) {
      out.push_back(s.q_pick);
      out.push_back(s.q_place);
    }
    return out;
  }
};

inline double plan_cost(const GroundPlan& plan) {
  auto keys = plan.key_configs();
  double c = 0.0;
  for (size_t i = 1; i < keys.size(); ++i) c += cheby_distance(keys[i - 1], keys[i]);
  return c;
}

/// Complete JSON record of a ground plan (poses, configurations, trajectory
/// knots); stored with recorded episodes as provenance.
inline nlohmann::json ground_plan_record(const GroundPlan& plan) {
  auto pose = [](const PlanarPose& p) { return nlohmann::json{p.x, p.y, p.theta}; };
  auto knots = [](const TimedTrajectory& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (auto& k : t.knots()) {
      nlohmann::json row{k.t};
      for (double q : k.q) row.push_back(q);
      arr.push_back(std::move(row));
    }
    return arr;
  };
  nlohmann::json j;
  j["q_start"] = plan.q_start;
  j["cost"] = plan.cost;
  j["stages"] = nlohmann::json::array();
  for (auto& s : plan.stages) {
    nlohmann::json st;
    st["obj_id"] = s.obj_id;
    st["grasp_ee"] = pose(s.grasp_ee);
    st["grasp_tf"] = pose(s.grasp_tf);
    st["place_obj"] = pose(s.place_obj);
    st["place_ee"] = pose(s.place_ee);
    st["q_pick"] = s.q_pick;
    st["q_place"] = s.q_place;
    st["transit"] = knots(s.transit);
    st["transfer"] = knots(s.transfer);
    j["stages"].push_back(std::move(st));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Planner parameters and accounting
// ---------------------------------------------------------------------------

inline constexpr double kBirrtItersPerMs = 20.0;
inline constexpr double kShortcutItersPerMs = 50.0;
inline constexpr double kCertChecksPerMs = 100.0;

struct PlanParams {
  double budget_vms = 250.0;  // virtual milliseconds of solver work
  double margin = 0.01;       // clearance inflation during planning
  int grasp_tries = 10;
  int place_tries = 10;
  double place_shrink = 0.02;  // pulls region placements off the boundary
  double stack_frac = 0.5;     // placement jitter as a fraction of support
  // Final-trajectory walk spacing. At reach 2.0 and 3 joints, a half-step
  // L-inf deviation of 0.001 rad moves any link point at most 0.006 m, so a
  // pass at the 0.01 margin certifies >= 0.004 m clearance everywhere.
  double cert_resolution = 0.002;
  IkOptions ik;
  BirrtParams birrt;
  SmoothParams smooth;
};

struct PlanResult {
  bool success = false;
  GroundPlan plan;
  double virtual_ms = 0.0;
  int candidates = 0;
  int grounded = 0;
  int gated = 0;
  int failures = 0;
  int improvements = 0;
  std::string trace_json;
};

namespace detail {

struct StageGround {
  GroundStage stage;            // trajectories filled in later
  WorldState before;            // object resting, arm anywhere
  WorldState carrying;          // object attached
};

inline PlanarPose sample_grasp_pose(const ObjectState& o, Rng& rng) {
  if (o.shape.kind == ShapeKind::Disk) {
    double phi = rng.uniform(-kPi, kPi);
    Vec2 gp{o.pose.x + o.shape.r * std::cos(phi), o.pose.y + o.shape.r * std::sin(phi)};
    return {gp.x, gp.y, wrap_angle(phi + kPi + rng.uniform(-0.3, 0.3))};
  }
  int face = static_cast<int>(rng.below(4));
  double jit = rng.uniform(-0.01, 0.01);
  Vec2 local;
  double normal_local = 0.0;
  switch (face) {
    case 0: local = {+o.shape.hx, jit}; normal_local = 0.0; break;
    case 1: local = {-o.shape.hx, jit}; normal_local = kPi; break;
    case 2: local = {jit, +o.shape.hy}; normal_local = kPi / 2; break;
    default: local = {jit, -o.shape.hy}; normal_local = -kPi / 2; break;
  }
  Vec2 gp = o.pose.apply(local);
  double theta = wrap_angle(o.pose.theta + normal_local + kPi + rng.uniform(-0.2, 0.2));
  return {gp.x, gp.y, theta};
}

inline PlanarPose sample_place_pose(const SkeletonStage& sk, const WorldState& w,
                                    const ObjectState& obj, const PlanParams& params, Rng& rng) {
  if (!sk.onto) {
    double sx = std::min(params.place_shrink, (sk.region.hi.x - sk.region.lo.x) * 0.25);
    double sy = std::min(params.place_shrink, (sk.region.hi.y - sk.region.lo.y) * 0.25);
    return {rng.uniform(sk.region.lo.x + sx, sk.region.hi.x - sx),
            rng.uniform(sk.region.lo.y + sy, sk.region.hi.y - sy), obj.pose.theta};
  }
  const ObjectState& base = w.object(sk.base_id);
  double r = rng.uniform(0.0, params.stack_frac * base.shape.support_half());
  double ang = rng.uniform(-kPi, kPi);
  return {base.pose.x + r * std::cos(ang), base.pose.y + r * std::sin(ang), obj.pose.theta};
}

/// Verifies a virtual release at `pose`: obstacle clearance, and the level
/// rule producing a flat placement (regions) or a clean one-above stack.
inline bool placement_valid(const WorldState& w, const SkeletonStage& sk, const ObjectState& obj,
                            const PlanarPose& pose, double margin) {
  for (auto& ob : w.obstacles)
    if (shape_overlaps_aabb(obj.shape, pose, ob, margin)) return false;
  int level = 0;
  for (auto& other : w.objects) {
    if (other.id == obj.id || other.attached) continue;
    if (shapes_overlap(obj.shape, pose, other.shape, other.pose)) level = std::max(level, other.level + 1);
  }
  if (!sk.onto) return level == 0;
  const ObjectState& base = w.object(sk.base_id);
  if (level != base.level + 1) return false;
  return dist(pose.position(), base.pose.position()) <= base.shape.support_half();
}

struct Grounding {
  std::vector<StageGround> stages;
  double bound = 0.0;
};

inline std::optional<Grounding> ground_candidate(const WorldConfig& cfg, const PlanSkeleton& skel,
                                                 const WorldState& w0, const PlanParams& params,
                                                 Rng& rng, double& charge) {
  Grounding g;
  WorldState w = w0;
  JointConfig q_cur = w0.q;
  for (const SkeletonStage& sk : skel.stages) {
    StageGround sg;
    sg.before = w;
    sg.stage.obj_id = sk.obj_id;

    bool picked = false;
    for (int t = 0; t < params.grasp_tries && !picked; ++t) {
      PlanarPose ee = sample_grasp_pose(w.object(sk.obj_id), rng);
      IkResult ik = ik_seeded(cfg.chain, ee, q_cur, rng, params.ik);
      charge += static_cast<double>(ik.iterations) / kIkItersPerMs;
      if (!ik.ok()) continue;
      if (!collision_free(cfg, w, ik.q, params.margin)) continue;
      sg.stage.grasp_ee = ee;
      sg.stage.q_pick = ik.q;
      picked = true;
    }
    if (!picked) return std::nullopt;

    w.q = sg.stage.q_pick;
    attach_object(cfg, w, sk.obj_id);
    sg.stage.grasp_tf = w.object(sk.obj_id).grasp_tf;
    sg.carrying = w;

    bool placed = false;
    for (int t = 0; t < params.place_tries && !placed; ++t) {
      PlanarPose obj_pose = sample_place_pose(sk, w, w.object(sk.obj_id), params, rng);
      if (!placement_valid(w, sk, w.object(sk.obj_id), obj_pose, params.margin)) continue;
      PlanarPose ee = obj_pose.compose(sg.stage.grasp_tf.inverse());
      IkResult ik = ik_seeded(cfg.chain, ee, sg.stage.q_pick, rng, params.ik);
      charge += static_cast<double>(ik.iterations) / kIkItersPerMs;
      if (!ik.ok()) continue;
      if (!collision_free(cfg, w, ik.q, params.margin)) continue;
      sg.stage.place_obj = obj_pose;
      sg.stage.place_ee = ee;
      sg.stage.q_place = ik.q;
      placed = true;
    }
    if (!placed) return std::nullopt;

    w.q = sg.stage.q_place;
    sync_attached(cfg, w);
    detach_object(cfg, w);
    if (sk.onto && w.object(sk.obj_id).level != w.object(sk.base_id).level + 1) return std::nullopt;

    g.bound += cheby_distance(q_cur, sg.stage.q_pick);
    g.bound += cheby_distance(sg.stage.q_pick, sg.stage.q_place);
    q_cur = sg.stage.q_place;
    g.stages.push_back(std::move(sg));
  }
  return g;
}

// Exploration validates segments at a coarse grid, where a half-step config
// deviation can move a link point farther than the safety margin. Before a
// trajectory is accepted its knot segments are re-walked at a resolution fine
// enough that the margin certifies the whole continuum collision-free, so any
// later re-sampling of the trajectory (at any time grid) stays clear.
inline bool certify_trajectory(const WorldConfig& cfg, const WorldState& snapshot,
                               const TimedTrajectory& traj, double margin, double resolution,
                               double& charge) {
  const auto& knots = traj.knots();
  long checks = 0;
  bool ok = true;
  for (size_t i = 0; ok && i + 1 < knots.size(); ++i) {
    const JointConfig& a = knots[i].q;
    const JointConfig& b = knots[i + 1].q;
    int n = std::max(1, static_cast<int>(std::ceil(cheby_distance(a, b) / resolution)));
    JointConfig q(a.size());
    for (int k = 0; k <= n; ++k) {
      double s = static_cast<double>(k) / n;
      for (size_t j = 0; j < q.size(); ++j) q[j] = a[j] + s * (b[j] - a[j]);
      ++checks;
      if (!collision_free(cfg, snapshot, q, margin)) {
        ok = false;
        break;
      }
    }
  }
  charge += static_cast<double>(checks) / kCertChecksPerMs;
  return ok;
}

inline std::optional<TimedTrajectory> plan_segment(const WorldConfig& cfg, const WorldState& snapshot,
                                                   const JointConfig& from, const JointConfig& to,
                                                   const PlanParams& params, Rng& rng, double& charge) {
  CollisionFn free = [&](const JointConfig& q) {
    return collision_free(cfg, snapshot, q, params.margin);
  };
  int iters = 0;
  auto path = birrt(cfg.chain, from, to, free, rng, params.birrt, &iters);
  charge += static_cast<double>(iters) / kBirrtItersPerMs;
  if (!path) return std::nullopt;
  charge += static_cast<double>(params.smooth.iters) / kShortcutItersPerMs;
  TimedTrajectory traj =
      shortcut_smooth(*path, free, Limits::default_for(cfg.chain.dof()), rng, params.smooth);
  if (!certify_trajectory(cfg, snapshot, traj, params.margin, params.cert_resolution, charge))
    return std::nullopt;
  return traj;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Anytime search
// ---------------------------------------------------------------------------

/// Plans from `w0` for `task`. Deterministic in (seed, params). The first
/// complete plan is always pursued to the end regardless of budget; once one
/// exists, the budget is enforced at candidate boundaries.
inline PlanResult plan_task(const WorldConfig& cfg, const TaskSpec& task, const WorldState& w0,
                            uint64_t seed, const PlanParams& params = {}) {
  std::vector<PlanSkeleton> skeletons = enumerate_skeletons(task);
  if (skeletons.empty()) throw ContractError("plan_task: task has no skeletons");

  PlanResult res;
  nlohmann::json trace;
  trace["task"] = task_name(task.id);
  trace["seed"] = seed;
  trace["budget_vms"] = params.budget_vms;
  trace["skeletons"] = nlohmann::json::array();
  for (auto& s : skeletons) trace["skeletons"].push_back(s.name);
  nlohmann::json cands = nlohmann::json::array();

  std::optional<GroundPlan> best;
  double charge = 0.0;
  const int hard_cap = 100000;

  for (int candidate = 0; candidate < hard_cap; ++candidate) {
    if (best && charge >= params.budget_vms) break;
    if (!best && charge >= params.budget_vms * 50.0) break;  // infeasible guard

    const PlanSkeleton& skel = skeletons[static_cast<size_t>(candidate) % skeletons.size()];
    Rng crng(seed, 3000 + static_cast<uint64_t>(candidate));
    res.candidates++;
    nlohmann::json cj;
    cj["skeleton"] = skel.name;

    auto ground = detail::ground_candidate(cfg, skel, w0, params, crng, charge);
    if (!ground) {
      res.failures++;
      cj["status"] = "ground_failed";
      cands.push_back(cj);
      continue;
    }
    res.grounded++;
    cj["bound"] = ground->bound;
    if (best && ground->bound >= best->cost) {
      res.gated++;
      cj["status"] = "gated";
      cands.push_back(cj);
      continue;
    }

    GroundPlan plan;
    plan.q_start = w0.q;
    JointConfig q_cur = w0.q;
    bool ok = true;
    for (auto& sg : ground->stages) {
      auto transit = detail::plan_segment(cfg, sg.before, q_cur, sg.stage.q_pick, params, crng, charge);
      if (!transit) {
        ok = false;
        break;
      }
      auto transfer =
          detail::plan_segment(cfg, sg.carrying, sg.stage.q_pick, sg.stage.q_place, params, crng, charge);
      if (!transfer) {
        ok = false;
        break;
      }
      sg.stage.transit = std::move(*transit);
      sg.stage.transfer = std::move(*transfer);
      q_cur = sg.stage.q_place;
      plan.stages.push_back(std::move(sg.stage));
    }
    if (!ok) {
      res.failures++;
      cj["status"] = "motion_failed";
      cands.push_back(cj);
      continue;
    }

    plan.cost = ground->bound;
    if (!best || plan.cost < best->cost) {
      res.improvements++;
      cj["status"] = "improved";
      cj["cost"] = plan.cost;
      best = std::move(plan);
    } else {
      cj["status"] = "not_better";
    }
    cands.push_back(cj);
  }

  trace["candidates"] = std::move(cands);
  trace["virtual_ms"] = charge;
  res.virtual_ms = charge;
  if (best) {
    res.success = true;
    res.plan = std::move(*best);
    trace["final_cost"] = res.plan.cost;
  }
  trace["success"] = res.success;
  res.trace_json = trace.dump();
  return res;
}

}  // namespace tampi
