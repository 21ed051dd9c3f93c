#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "tampi/datagen.hpp"

using namespace tampi;
using Catch::Matchers::WithinAbs;

namespace {

const WorldConfig kCfg;

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tampi_datagen_" + name);
}

PlanResult plan_for(const TaskSpec& task, uint64_t seed) {
  WorldState w0 = sample_problem(kCfg, task, seed);
  PlanResult res = plan_task(kCfg, task, w0, seed, PlanParams{});
  REQUIRE(res.success);
  return res;
}

/// One-stage plan whose moves are hand-built trajectories (for the pure
/// action-tape contracts that need exact control over the path).
GroundPlan synthetic_plan(const TimedTrajectory& transit, const TimedTrajectory& transfer) {
  GroundPlan plan;
  plan.q_start = transit.start();
  GroundStage s;
  s.q_pick = transit.goal();
  s.q_place = transfer.goal();
  s.transit = transit;
  s.transfer = transfer;
  plan.stages.push_back(s);
  return plan;
}

TimedTrajectory hold_at(const JointConfig& q, double T) {
  return TimedTrajectory({{0.0, q}, {T, q}});
}

/// Constant-velocity straight line: knots at every tick so resampling at dt
/// reproduces them exactly.
TimedTrajectory straight_line(const JointConfig& a, const JointConfig& b, int ticks, double dt) {
  std::vector<TimedTrajectory::Knot> knots;
  for (int i = 0; i <= ticks; ++i) {
    double s = static_cast<double>(i) / ticks;
    JointConfig q(a.size());
    for (size_t j = 0; j < a.size(); ++j) q[j] = a[j] + (b[j] - a[j]) * s;
    knots.push_back({i * dt, q});
  }
  return TimedTrajectory(std::move(knots));
}

bool motion_is_zero(const ControlAction& a) {
  for (double m : a.motion)
    if (m != 0.0) return false;
  return true;
}

bool observations_equal(const Observation& a, const Observation& b) {
  if (a.views.size() != b.views.size()) return false;
  for (size_t v = 0; v < a.views.size(); ++v)
    if (a.views[v].rgb != b.views[v].rgb) return false;
  return std::memcmp(a.proprio, b.proprio, sizeof a.proprio) == 0;
}

}  // namespace

TEST_CASE("action tape contracts") {
  DatagenConfig dcfg;

  SECTION("stationary moves emit zero-delta actions") {
    JointConfig q = {0.3, -0.4, 0.2};
    GroundPlan plan = synthetic_plan(hold_at(q, 1.0), hold_at(q, 1.0));
    for (ActionMode mode : {ActionMode::task_space, ActionMode::joint_space}) {
      dcfg.action_mode = mode;
      auto tape = waypoints_to_actions(kCfg, plan, dcfg);
      REQUIRE(!tape.empty());
      for (auto& a : tape) {
        REQUIRE(motion_is_zero(a));
        REQUIRE(a.mode == mode);
      }
    }
  }

  SECTION("straight joint segment in joint mode gives constant dq telescoping to the endpoint") {
    JointConfig a = {0.1, 0.2, -0.3}, b = {0.9, -0.6, 0.5};
    dcfg.action_mode = ActionMode::joint_space;
    TimedTrajectory line = straight_line(a, b, 20, dcfg.dt);
    GroundPlan plan = synthetic_plan(line, hold_at(b, 0.5));
    auto tape = waypoints_to_actions(kCfg, plan, dcfg);

    // every action is either a hold (at most a one-ulp residual absorption)
    // or a constant-dq transit tick
    std::vector<double> total(a.size(), 0.0);
    JointConfig expected_dq(a.size());
    for (size_t j = 0; j < a.size(); ++j) expected_dq[j] = (b[j] - a[j]) / 20.0;
    int move_ticks = 0;
    for (auto& act : tape) {
      double mag = 0.0;
      for (double m : act.motion) mag = std::max(mag, std::abs(m));
      for (size_t j = 0; j < a.size(); ++j) total[j] += act.motion[j];
      if (mag < 1e-12) continue;
      ++move_ticks;
      for (size_t j = 0; j < a.size(); ++j)
        REQUIRE_THAT(act.motion[j], WithinAbs(expected_dq[j], 1e-12));
    }
    REQUIRE(move_ticks == 20);
    for (size_t j = 0; j < a.size(); ++j) REQUIRE_THAT(total[j], WithinAbs(b[j] - a[j], 1e-9));
  }

  SECTION("task deltas telescope to the FK difference on real plans") {
    dcfg.action_mode = ActionMode::task_space;
    TaskSpec task = task_spec(TaskId::pickplace1);
    for (uint64_t seed : {0, 5, 11}) {
      PlanResult res = plan_for(task, seed);
      auto tape = waypoints_to_actions(kCfg, res.plan, dcfg);
      double sx = 0.0, sy = 0.0, sth = 0.0;
      for (auto& a : tape) {
        sx += a.motion[0];
        sy += a.motion[1];
        sth += a.motion[2];
        REQUIRE(std::abs(a.motion[0]) <= kCfg.limits.dpos + 1e-15);
        REQUIRE(std::abs(a.motion[1]) <= kCfg.limits.dpos + 1e-15);
        REQUIRE(std::abs(a.motion[2]) <= kCfg.limits.dtheta + 1e-15);
      }
      PlanarPose start = forward_kinematics(kCfg.chain, res.plan.q_start);
      PlanarPose end = forward_kinematics(kCfg.chain, res.plan.stages.back().q_place);
      REQUIRE_THAT(sx, WithinAbs(end.x - start.x, 1e-9));
      REQUIRE_THAT(sy, WithinAbs(end.y - start.y, 1e-9));
      REQUIRE_THAT(wrap_angle(sth - (end.theta - start.theta)), WithinAbs(0.0, 1e-9));
    }
  }

  SECTION("joint deltas telescope on real plans too") {
    dcfg.action_mode = ActionMode::joint_space;
    TaskSpec task = task_spec(TaskId::stack2);
    PlanResult res = plan_for(task, 3);
    auto tape = waypoints_to_actions(kCfg, res.plan, dcfg);
    std::vector<double> total(3, 0.0);
    for (auto& a : tape)
      for (size_t j = 0; j < 3; ++j) {
        REQUIRE(std::abs(a.motion[j]) <= kCfg.limits.dq + 1e-15);
        total[j] += a.motion[j];
      }
    const JointConfig& q_end = res.plan.stages.back().q_place;
    for (size_t j = 0; j < 3; ++j)
      REQUIRE_THAT(total[j], WithinAbs(q_end[j] - res.plan.q_start[j], 1e-9));
  }

  SECTION("stall regions are exactly stall_steps zero-motion actions, twice per stage") {
    TaskSpec task = task_spec(TaskId::stack2);
    PlanResult res = plan_for(task, 1);
    for (int stall : {1, 5, 25}) {
      dcfg.action_mode = ActionMode::task_space;
      dcfg.stall_steps = stall;
      auto tape = waypoints_to_actions(kCfg, res.plan, dcfg);
      std::vector<size_t> runs;
      size_t run = 0;
      for (auto& a : tape) {
        if (motion_is_zero(a)) {
          ++run;
        } else if (run > 0) {
          runs.push_back(run);
          run = 0;
        }
      }
      if (run > 0) runs.push_back(run);
      REQUIRE(runs.size() == 2 * res.plan.stages.size());
      for (size_t r : runs) REQUIRE(r == static_cast<size_t>(stall));
    }
  }

  SECTION("binary gripper commands are exactly open or close") {
    TaskSpec task = task_spec(TaskId::pickplace1);
    PlanResult res = plan_for(task, 2);
    dcfg.gripper_mode = GripperMode::binary;
    auto tape = waypoints_to_actions(kCfg, res.plan, dcfg);
    for (auto& a : tape) REQUIRE((a.gripper_cmd == 0.0 || a.gripper_cmd == 1.0));
  }

  SECTION("continuous gripper ramps linearly and ends exactly closed or open") {
    // moving transit and transfer, so the zero-motion actions are exactly the
    // stall regions
    JointConfig qa = {0.1, 0.2, -0.3}, qb = {0.9, -0.6, 0.5};
    GroundPlan plan =
        synthetic_plan(straight_line(qa, qb, 20, dcfg.dt), straight_line(qb, qa, 20, dcfg.dt));
    dcfg.gripper_mode = GripperMode::continuous;
    dcfg.stall_steps = 4;
    auto tape = waypoints_to_actions(kCfg, plan, dcfg);
    std::vector<double> grips;
    for (auto& a : tape)
      if (motion_is_zero(a)) grips.push_back(a.gripper_cmd);
    // closing ramp 0.75, 0.5, 0.25, 0 then opening ramp 0.25, 0.5, 0.75, 1.0
    REQUIRE(grips ==
            std::vector<double>{0.75, 0.5, 0.25, 0.0, 0.25, 0.5, 0.75, 1.0});
    REQUIRE(grips[3] == 0.0);
    REQUIRE(grips.back() == 1.0);
    REQUIRE(tape.back().gripper_cmd == 1.0);
  }

  SECTION("configuration validation") {
    DatagenConfig bad;
    bad.stall_steps = 0;
    REQUIRE_THROWS_AS(bad.validate(), ContractError);
    bad = DatagenConfig{};
    bad.dt = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), ContractError);
    bad = DatagenConfig{};
    bad.max_steps = 0;
    REQUIRE_THROWS_AS(bad.validate(), ContractError);
  }
}

TEST_CASE("plan execution records faithful demonstrations") {
  TaskSpec task = task_spec(TaskId::pickplace1);
  DatagenConfig dcfg;

  SECTION("valid plans execute to the goal in both action modes") {
    for (ActionMode mode : {ActionMode::task_space, ActionMode::joint_space}) {
      dcfg.action_mode = mode;
      for (uint64_t seed : {0, 1, 2, 3}) {
        WorldState w0 = sample_problem(kCfg, task, seed);
        PlanResult res = plan_task(kCfg, task, w0, seed, PlanParams{});
        REQUIRE(res.success);
        Demonstration d = execute_and_record(kCfg, w0, res.plan, task, dcfg);
        REQUIRE(d.success);
        REQUIRE(d.observations.size() == d.steps());
        REQUIRE(d.ee_poses.size() == d.steps());
        for (auto& a : d.actions) REQUIRE_NOTHROW(validate_action(kCfg, a));
      }
    }
  }

  SECTION("joint-space action tape reaches the goal open loop") {
    for (uint64_t seed : {0, 4, 9}) {
      WorldState w0 = sample_problem(kCfg, task, seed);
      PlanResult res = plan_task(kCfg, task, w0, seed, PlanParams{});
      REQUIRE(res.success);
      dcfg.action_mode = ActionMode::joint_space;
      auto tape = waypoints_to_actions(kCfg, res.plan, dcfg);
      WorldState w = w0;
      for (auto& a : tape) step(kCfg, w, a);
      REQUIRE(goal_satisfied(w, task));
    }
  }

  SECTION("same seed produces bit-identical demonstrations") {
    WorldState w0 = sample_problem(kCfg, task, 5);
    PlanResult res = plan_task(kCfg, task, w0, 5, PlanParams{});
    Demonstration a = execute_and_record(kCfg, w0, res.plan, task, dcfg);
    Demonstration b = execute_and_record(kCfg, w0, res.plan, task, dcfg);
    REQUIRE((encode_episode(demonstration_to_episode(a)) ==
             encode_episode(demonstration_to_episode(b))));
  }

  SECTION("replaying recorded actions from the recorded initial state reproduces observations") {
    WorldState w0 = sample_problem(kCfg, task, 7);
    PlanResult res = plan_task(kCfg, task, w0, 7, PlanParams{});
    Demonstration d = execute_and_record(kCfg, w0, res.plan, task, dcfg);
    REQUIRE(d.success);

    WorldState w = parse_world(d.init_state);
    for (size_t t = 0; t < d.steps(); ++t) {
      Observation o = observe(kCfg, w, task);
      REQUIRE(observations_equal(o, d.observations[t]));
      PlanarPose ee = ee_pose(kCfg, w.q);
      REQUIRE(ee.x == d.ee_poses[t].x);
      REQUIRE(ee.y == d.ee_poses[t].y);
      step(kCfg, w, d.actions[t]);
    }
    REQUIRE(goal_satisfied(w, task));
  }

  SECTION("episodes over max_steps are recorded as failures") {
    WorldState w0 = sample_problem(kCfg, task, 0);
    PlanResult res = plan_task(kCfg, task, w0, 0, PlanParams{});
    dcfg.max_steps = 10;
    Demonstration d = execute_and_record(kCfg, w0, res.plan, task, dcfg);
    REQUIRE(d.steps() == 10);
    REQUIRE_FALSE(d.success);
  }

  SECTION("container encoding carries every signal with consistent shapes") {
    WorldState w0 = sample_problem(kCfg, task, 3);
    PlanResult res = plan_task(kCfg, task, w0, 3, PlanParams{});
    Demonstration d = execute_and_record(kCfg, w0, res.plan, task, dcfg);
    d.seed = 3;
    d.plan_trace = ground_plan_record(res.plan).dump();
    Episode e = demonstration_to_episode(d);
    REQUIRE_NOTHROW(validate_episode(e, 0));

    uint32_t T = static_cast<uint32_t>(d.steps());
    REQUIRE(e.meta.steps == T);
    REQUIRE(e.meta.task == "pickplace1");
    REQUIRE(e.meta.success);
    REQUIRE(e.block("fixed_view").shape == std::vector<uint32_t>{T, 84, 84, 3});
    REQUIRE(e.block("wrist_view").shape == std::vector<uint32_t>{T, 84, 84, 3});
    REQUIRE(e.block("proprio").shape == std::vector<uint32_t>{T, 4});
    REQUIRE(e.block("actions").shape == std::vector<uint32_t>{T, 4});
    REQUIRE(e.block("ee_poses").shape == std::vector<uint32_t>{T, 3});

    // stored pixels equal the rendered observations
    const auto& img = e.block("fixed_view").bytes;
    size_t frame = 84 * 84 * 3;
    REQUIRE(std::equal(img.begin(), img.begin() + frame, d.observations[0].views[0].rgb.begin()));

    // stored actions are the f32-rounded recorded actions
    std::vector<float> act = e.block("actions").as_f32();
    REQUIRE_THAT(act[0], WithinAbs(static_cast<float>(d.actions[0].motion[0]), 0.0));
    REQUIRE(act[3] == static_cast<float>(d.actions[0].gripper_cmd));

    // plan trace parses back as JSON with the plan's stage count
    auto trace = nlohmann::json::parse(e.meta.plan_trace);
    REQUIRE(trace["stages"].size() == res.plan.stages.size());
  }
}

TEST_CASE("collection is seed-deterministic and worker-independent") {
  TaskSpec task = task_spec(TaskId::pickplace1);
  DatagenConfig dcfg;
  PlanParams pp;

  auto p1 = temp_file("collect_w1.optd");
  auto p3 = temp_file("collect_w3.optd");
  std::ostringstream log1, log3;
  CollectReport r1 = collect(kCfg, task, 6, dcfg, pp, 100, 1, p1.string(), &log1);
  CollectReport r3 = collect(kCfg, task, 6, dcfg, pp, 100, 3, p3.string(), &log3);

  SECTION("identical dataset bytes for any worker count") {
    std::ifstream a(p1, std::ios::binary), b(p3, std::ios::binary);
    std::ostringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    REQUIRE((sa.str() == sb.str()));
    REQUIRE((log1.str() == log3.str()));
  }

  SECTION("report counts are consistent and all retained episodes succeeded") {
    REQUIRE(r1.attempted == 6);
    REQUIRE(r1.sample_failed + r1.plan_failed + r1.exec_failed + r1.retained == r1.attempted);
    REQUIRE(r1.retained == r3.retained);
    DatasetReader rd(p1.string());
    REQUIRE(rd.count() == static_cast<uint32_t>(r1.retained));
    uint64_t expect_seed = 100;
    for (uint32_t i = 0; i < rd.count(); ++i) {
      EpisodeMeta m = rd.meta(i);
      REQUIRE(m.success);
      REQUIRE(m.task == "pickplace1");
      REQUIRE(m.seed >= expect_seed);  // seed order
      expect_seed = m.seed + 1;
    }
  }

  SECTION("the produced container passes a full validation scan") {
    REQUIRE_NOTHROW(validate_container(p1.string()));
  }

  SECTION("progress log carries one line per seed") {
    std::string log = log1.str();
    size_t lines = std::count(log.begin(), log.end(), '\n');
    REQUIRE(lines == 6);
    REQUIRE_THAT(log, Catch::Matchers::ContainsSubstring("seed=100 success="));
    REQUIRE_THAT(log, Catch::Matchers::ContainsSubstring("seed=105 success="));
  }
}
