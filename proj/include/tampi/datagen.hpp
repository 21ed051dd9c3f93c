#pragma once

// Turns ground plans into recorded demonstrations. Each planned move is
// slowed until no controller tick demands more than the per-step action
// limits, then resampled at the controller dt into a reference schedule.
//
// Two consumers of that schedule:
//  - waypoints_to_actions emits the open-loop action tape against an exact
//    delta integrator (per-tick differences of consecutive reference
//    samples, clipped with carry-over, telescoping to each move's endpoint).
//  - execute_and_record runs the world with feedback: every tick it aims at
//    the next reference configuration from the configuration the arm
//    actually reached, emitting in task mode the end-effector delta that
//    makes the world's one-step resolved-rate controller reproduce that
//    joint motion. Raw open-loop task deltas are unusable here: resolved
//    rate integration drifts, and near fold singularities (wrist radius
//    close to 0 or 2) it flips inverse-kinematics branches entirely, so the
//    arm leaves the certified-clear corridor. Joint-referenced feedback
//    keeps the executed path within ~1e-6 rad of the plan.
//
// Gripper toggles sit inside stall regions of zero-motion actions.
// Successful episodes stream into a dataset container in seed order.

#include <algorithm>
#include <functional>
#include <optional>
#include <ostream>
#include <thread>

#include "tampi/dataset_io.hpp"
#include "tampi/tamp.hpp"
#include "tampi/world.hpp"

namespace tampi {

enum class GripperMode : uint8_t { binary = 0, continuous = 1 };

struct DatagenConfig {
  ActionMode action_mode = ActionMode::task_space;
  GripperMode gripper_mode = GripperMode::binary;
  int stall_steps = 5;   // gripper-only actions around each pick and place
  double dt = 0.1;       // controller period, seconds
  int max_steps = 2000;  // episodes running longer are recorded as failures

  void validate() const {
    if (stall_steps < 1) throw ContractError("stall_steps must be >= 1");
    if (!(dt > 0.0)) throw ContractError("controller dt must be positive");
    if (max_steps < 1) throw ContractError("max_steps must be >= 1");
  }
};

struct Demonstration {
  std::vector<Observation> observations;
  std::vector<ControlAction> actions;
  std::vector<PlanarPose> ee_poses;  // at observation time, double precision

  TaskId task = TaskId::pickplace1;
  uint64_t seed = 0;
  bool success = false;
  double plan_cost = 0.0;
  double plan_wall_ms = 0.0;
  ActionMode action_mode = ActionMode::task_space;
  int stall_steps = 0;
  std::string init_state;
  std::string plan_trace;

  size_t steps() const { return actions.size(); }
};

namespace detail {

/// Same path, duration multiplied by `s`.
inline TimedTrajectory scale_time(const TimedTrajectory& traj, double s) {
  std::vector<TimedTrajectory::Knot> knots = traj.knots();
  for (auto& k : knots) k.t *= s;
  return TimedTrajectory(std::move(knots));
}

/// Largest per-controller-tick motion the trajectory would demand, as a
/// multiple of the action limits: max over a fine time grid of
/// |component velocity| * dt / limit for the mode's components.
inline double action_rate(const WorldConfig& cfg, const TimedTrajectory& traj, ActionMode mode,
                          double dt) {
  double T = traj.duration();
  if (T <= 0.0) return 0.0;
  int n = std::max(8, static_cast<int>(std::ceil(T / (dt * 0.25))));
  double rate = 0.0;
  for (int k = 0; k <= n; ++k) {
    double t = T * static_cast<double>(k) / n;
    JointConfig v = traj.velocity(t);
    if (mode == ActionMode::joint_space) {
      for (double vj : v) rate = std::max(rate, std::abs(vj) * dt / cfg.limits.dq);
    } else {
      JointConfig q = traj.sample(t);
      std::vector<double> J = jacobian(cfg.chain, q);
      int dof = cfg.chain.dof();
      double ee[3] = {0.0, 0.0, 0.0};
      for (int r = 0; r < 3; ++r)
        for (int j = 0; j < dof; ++j)
          ee[r] += J[static_cast<size_t>(r * dof + j)] * v[static_cast<size_t>(j)];
      rate = std::max({rate, std::abs(ee[0]) * dt / cfg.limits.dpos,
                       std::abs(ee[1]) * dt / cfg.limits.dpos,
                       std::abs(ee[2]) * dt / cfg.limits.dtheta});
    }
  }
  return rate;
}

/// Controller-tick configurations for one move: the rate-limited trajectory
/// resampled at dt. Front element is the move's start.
inline JointPath move_ticks(const WorldConfig& cfg, const TimedTrajectory& traj, ActionMode mode,
                            double dt) {
  double rate = action_rate(cfg, traj, mode, dt);
  TimedTrajectory timed = rate > 1.0 ? scale_time(traj, rate) : traj;
  return resample(timed, dt);
}

inline std::vector<double> task_coords(const WorldConfig& cfg, const JointConfig& q) {
  PlanarPose p = forward_kinematics(cfg.chain, q);
  return {p.x, p.y, p.theta};
}

inline double grip_schedule(const DatagenConfig& dcfg, bool closing, int i) {
  if (dcfg.gripper_mode == GripperMode::binary) return closing ? 0.0 : 1.0;
  double frac = static_cast<double>(i + 1) / dcfg.stall_steps;
  return closing ? 1.0 - frac : frac;  // linear ramp ending fully closed/open
}

inline ControlAction zero_motion(ActionMode mode, size_t dims, double grip) {
  ControlAction a;
  a.mode = mode;
  a.motion.assign(dims, 0.0);
  a.gripper_cmd = grip;
  return a;
}

}  // namespace detail

/// Open-loop controller action tape for a ground plan, computed against an
/// exact delta integrator: per-tick deltas between consecutive reference
/// samples (end-effector poses in task mode, configurations in joint mode),
/// clipped to the action limits with carry-over, so the emitted deltas
/// telescope exactly to each move's endpoint. Stall regions of zero-motion
/// gripper actions follow each transit (closing) and transfer (opening).
inline std::vector<ControlAction> waypoints_to_actions(const WorldConfig& cfg,
                                                       const GroundPlan& plan,
                                                       const DatagenConfig& dcfg) {
  dcfg.validate();
  bool joint = dcfg.action_mode == ActionMode::joint_space;
  size_t dims = joint ? static_cast<size_t>(cfg.chain.dof()) : 3;
  std::vector<double> limit(dims, cfg.limits.dq);
  if (!joint) limit = {cfg.limits.dpos, cfg.limits.dpos, cfg.limits.dtheta};

  std::vector<ControlAction> out;
  std::vector<double> pose =
      joint ? plan.q_start : detail::task_coords(cfg, plan.q_start);

  auto raw_delta = [&](const std::vector<double>& target, size_t c) {
    double raw = target[c] - pose[c];
    if (!joint && c == 2) raw = wrap_angle(raw);
    return raw;
  };
  auto toward = [&](const std::vector<double>& target, double grip) {
    ControlAction a;
    a.mode = dcfg.action_mode;
    a.gripper_cmd = grip;
    a.motion.resize(dims);
    for (size_t c = 0; c < dims; ++c)
      a.motion[c] = std::clamp(raw_delta(target, c), -limit[c], limit[c]);
    for (size_t c = 0; c < dims; ++c) {
      pose[c] += a.motion[c];
      if (!joint && c == 2) pose[c] = wrap_angle(pose[c]);
    }
    out.push_back(a);
  };
  auto error_to = [&](const std::vector<double>& target) {
    double e = 0.0;
    for (size_t c = 0; c < dims; ++c) e = std::max(e, std::abs(raw_delta(target, c)));
    return e;
  };

  auto track_move = [&](const TimedTrajectory& traj, double grip) {
    JointPath wps = detail::move_ticks(cfg, traj, dcfg.action_mode, dcfg.dt);
    std::vector<std::vector<double>> refs;
    for (size_t i = 1; i < wps.size(); ++i)
      refs.push_back(joint ? wps[i] : detail::task_coords(cfg, wps[i]));
    if (refs.empty()) refs.push_back(joint ? wps.back() : detail::task_coords(cfg, wps.back()));
    for (auto& r : refs) toward(r, grip);
    // Clipping can leave a residual at the move's end; drain it. A residual
    // that persists means the controller dt cannot express this move within
    // the action limits.
    size_t cap = 2 * refs.size() + 8;
    for (size_t k = 0; error_to(refs.back()) > 1e-9; ++k) {
      if (k == cap)
        throw ContractError(str_printf("controller dt %g too large: %zu-tick move cannot drain",
                                       dcfg.dt, refs.size()));
      toward(refs.back(), grip);
    }
  };

  for (auto& s : plan.stages) {
    track_move(s.transit, 1.0);
    for (int i = 0; i < dcfg.stall_steps; ++i)
      out.push_back(detail::zero_motion(dcfg.action_mode, dims, detail::grip_schedule(dcfg, true, i)));
    track_move(s.transfer, 0.0);
    for (int i = 0; i < dcfg.stall_steps; ++i)
      out.push_back(detail::zero_motion(dcfg.action_mode, dims, detail::grip_schedule(dcfg, false, i)));
  }
  return out;
}

/// Executes the plan in the world with feedback and records a demonstration,
/// rendering an observation before every action. Each tick targets the next
/// reference configuration from the configuration actually reached; in task
/// mode the emitted action is the end-effector delta J(q)·(q_ref − q), which
/// the world's one-step resolved-rate controller maps back onto the planned
/// joint motion, so tracking error stays at the controller's damping floor
/// instead of accumulating. Success requires the task goal within max_steps.
inline Demonstration execute_and_record(const WorldConfig& cfg, const WorldState& w0,
                                        const GroundPlan& plan, const TaskSpec& task,
                                        const DatagenConfig& dcfg) {
  dcfg.validate();
  Demonstration demo;
  demo.task = task.id;
  demo.action_mode = dcfg.action_mode;
  demo.stall_steps = dcfg.stall_steps;
  demo.plan_cost = plan.cost;
  demo.init_state = serialize_world(w0);

  bool joint = dcfg.action_mode == ActionMode::joint_space;
  size_t dims = joint ? static_cast<size_t>(cfg.chain.dof()) : 3;
  std::vector<double> limit(dims, cfg.limits.dq);
  if (!joint) limit = {cfg.limits.dpos, cfg.limits.dpos, cfg.limits.dtheta};

  WorldState w = w0;
  bool truncated = false;

  auto emit = [&](const ControlAction& a) {
    if (truncated) return;
    if (demo.actions.size() >= static_cast<size_t>(dcfg.max_steps)) {
      truncated = true;
      return;
    }
    demo.observations.push_back(observe(cfg, w, task));
    demo.ee_poses.push_back(ee_pose(cfg, w.q));
    demo.actions.push_back(a);
    step(cfg, w, a);
  };
  auto error_to = [&](const JointConfig& q_ref) {
    double e = 0.0;
    for (size_t j = 0; j < q_ref.size(); ++j) e = std::max(e, std::abs(q_ref[j] - w.q[j]));
    return e;
  };
  auto tick = [&](const JointConfig& q_ref, double grip) {
    ControlAction a;
    a.mode = dcfg.action_mode;
    a.gripper_cmd = grip;
    a.motion.resize(dims);
    if (joint) {
      for (size_t j = 0; j < dims; ++j)
        a.motion[j] = std::clamp(q_ref[j] - w.q[j], -limit[j], limit[j]);
    } else {
      std::vector<double> J = jacobian(cfg.chain, w.q);
      int dof = cfg.chain.dof();
      for (size_t r = 0; r < 3; ++r) {
        double e = 0.0;
        for (int j = 0; j < dof; ++j)
          e += J[r * static_cast<size_t>(dof) + static_cast<size_t>(j)] * (q_ref[static_cast<size_t>(j)] - w.q[static_cast<size_t>(j)]);
        a.motion[r] = std::clamp(e, -limit[r], limit[r]);
      }
    }
    emit(a);
  };
  auto track_move = [&](const TimedTrajectory& traj, double grip) {
    JointPath wps = detail::move_ticks(cfg, traj, dcfg.action_mode, dcfg.dt);
    for (size_t i = 1; i < wps.size(); ++i) tick(wps[i], grip);
    // Catch up on clipping and damping lag before the gripper acts.
    // Progress-or-quit: a blocked arm must not spin forever.
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 16 && !truncated; ++k) {
      double e = error_to(wps.back());
      if (e <= 1e-9 || e >= prev) break;
      prev = e;
      tick(wps.back(), grip);
    }
  };

  for (auto& s : plan.stages) {
    track_move(s.transit, 1.0);
    for (int i = 0; i < dcfg.stall_steps; ++i)
      emit(detail::zero_motion(dcfg.action_mode, dims, detail::grip_schedule(dcfg, true, i)));
    track_move(s.transfer, 0.0);
    for (int i = 0; i < dcfg.stall_steps; ++i)
      emit(detail::zero_motion(dcfg.action_mode, dims, detail::grip_schedule(dcfg, false, i)));
  }
  demo.success = !truncated && goal_satisfied(w, task);
  return demo;
}

/// Container encoding: two u8 image stacks, f32 proprio/actions/EE poses.
inline Episode demonstration_to_episode(const Demonstration& demo) {
  Episode e;
  e.meta.task = task_name(demo.task);
  e.meta.seed = demo.seed;
  e.meta.success = demo.success;
  e.meta.cost = demo.plan_cost;
  e.meta.plan_wall_ms = demo.plan_wall_ms;
  e.meta.action_mode = static_cast<uint8_t>(demo.action_mode);
  e.meta.stall_steps = static_cast<uint32_t>(demo.stall_steps);
  e.meta.steps = static_cast<uint32_t>(demo.steps());
  e.meta.init_state = demo.init_state;
  e.meta.plan_trace = demo.plan_trace;

  uint32_t T = e.meta.steps;
  uint32_t side = kImageSide;
  std::vector<uint8_t> fixed, wrist;
  fixed.reserve(static_cast<size_t>(T) * side * side * 3);
  wrist.reserve(static_cast<size_t>(T) * side * side * 3);
  std::vector<float> proprio, ee, act;
  for (uint32_t t = 0; t < T; ++t) {
    const Observation& o = demo.observations[t];
    fixed.insert(fixed.end(), o.views[0].rgb.begin(), o.views[0].rgb.end());
    wrist.insert(wrist.end(), o.views[1].rgb.begin(), o.views[1].rgb.end());
    proprio.insert(proprio.end(), o.proprio, o.proprio + 4);
    const PlanarPose& p = demo.ee_poses[t];
    ee.push_back(static_cast<float>(p.x));
    ee.push_back(static_cast<float>(p.y));
    ee.push_back(static_cast<float>(p.theta));
    for (double m : demo.actions[t].motion) act.push_back(static_cast<float>(m));
    act.push_back(static_cast<float>(demo.actions[t].gripper_cmd));
  }
  uint32_t adim = T > 0 ? static_cast<uint32_t>(demo.actions[0].motion.size()) + 1 : 0;
  e.blocks.push_back(TensorBlock::u8("fixed_view", {T, side, side, 3}, std::move(fixed)));
  e.blocks.push_back(TensorBlock::u8("wrist_view", {T, side, side, 3}, std::move(wrist)));
  e.blocks.push_back(TensorBlock::f32("proprio", {T, 4}, proprio));
  e.blocks.push_back(TensorBlock::f32("actions", {T, adim}, act));
  e.blocks.push_back(TensorBlock::f32("ee_poses", {T, 3}, ee));
  return e;
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

struct CollectReport {
  int attempted = 0;
  int sample_failed = 0;
  int plan_failed = 0;
  int exec_failed = 0;
  int retained = 0;

  double retention() const {
    return attempted > 0 ? static_cast<double>(retained) / attempted : 0.0;
  }
};

/// Generates episodes for seeds base_seed .. base_seed+n-1 and writes the
/// successful ones to `out_path` in seed order. Worker count only sets the
/// number of threads; every byte of the output is seed-determined.
inline CollectReport collect(const WorldConfig& cfg, const TaskSpec& task, int n_episodes,
                             const DatagenConfig& dcfg, const PlanParams& pparams,
                             uint64_t base_seed, int workers, const std::string& out_path,
                             std::ostream* log = nullptr) {
  if (n_episodes < 1) throw ContractError("collect needs n_episodes >= 1");
  dcfg.validate();
  workers = std::max(1, workers);

  struct Outcome {
    int stage = 0;  // 0 sample_failed, 1 plan_failed, 2 exec_failed, 3 retained
    double cost = 0.0;
    double wall_ms = 0.0;
    uint32_t steps = 0;
    std::string bytes;  // encoded episode when retained
  };

  auto run_seed = [&](uint64_t seed) {
    Outcome r;
    WorldState w0;
    try {
      w0 = sample_problem(cfg, task, seed);
    } catch (const SamplingError&) {
      return r;
    }
    // planning time is the planner's deterministic virtual-time charge, so
    // dataset bytes and logs are reproducible across runs and worker counts
    PlanResult plan = plan_task(cfg, task, w0, seed, pparams);
    if (!plan.success) {
      r.stage = 1;
      return r;
    }
    Demonstration demo = execute_and_record(cfg, w0, plan.plan, task, dcfg);
    demo.seed = seed;
    demo.plan_wall_ms = plan.virtual_ms;
    demo.plan_trace = ground_plan_record(plan.plan).dump();
    r.cost = plan.plan.cost;
    r.wall_ms = plan.virtual_ms;
    r.steps = static_cast<uint32_t>(demo.steps());
    if (!demo.success) {
      r.stage = 2;
      return r;
    }
    r.stage = 3;
    r.bytes = encode_episode(demonstration_to_episode(demo));
    return r;
  };

  DatasetWriter writer(out_path);
  CollectReport rep;
  rep.attempted = n_episodes;
  // Seeds are processed in fixed-size batches; each batch is joined before
  // the next starts and committed in seed order, so the file bytes and the
  // log are identical for any worker count.
  for (int lo = 0; lo < n_episodes; lo += workers) {
    int batch = std::min(workers, n_episodes - lo);
    std::vector<Outcome> outs(static_cast<size_t>(batch));
    if (workers == 1) {
      outs[0] = run_seed(base_seed + static_cast<uint64_t>(lo));
    } else {
      std::vector<std::thread> pool;
      for (int k = 0; k < batch; ++k)
        pool.emplace_back([&, k] {
          outs[static_cast<size_t>(k)] = run_seed(base_seed + static_cast<uint64_t>(lo + k));
        });
      for (auto& t : pool) t.join();
    }
    for (int k = 0; k < batch; ++k) {
      Outcome& r = outs[static_cast<size_t>(k)];
      switch (r.stage) {
        case 0: ++rep.sample_failed; break;
        case 1: ++rep.plan_failed; break;
        case 2: ++rep.exec_failed; break;
        default:
          ++rep.retained;
          writer.add_raw(r.bytes);
      }
      if (log)
        *log << str_printf(
            "seed=%llu success=%d cost=%s wall_ms=%.1f steps=%u\n",
            static_cast<unsigned long long>(base_seed + static_cast<uint64_t>(lo + k)),
            r.stage == 3 ? 1 : 0, fmt_double(r.cost).c_str(), r.wall_ms, r.steps);
    }
  }
  writer.finalize();
  return rep;
}

}  // namespace tampi
