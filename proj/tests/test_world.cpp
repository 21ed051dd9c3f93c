#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "tampi/world.hpp"

using namespace tampi;
using Catch::Matchers::WithinAbs;

namespace {

const WorldConfig kCfg;

// Independent clearance oracle for the arm: dense point sampling along each
// link segment against every obstacle and resting object, with all
// point-to-set distances computed from first principles. Obstacles see the
// whole arm; objects do not see the gripper tip (the last `gripper_len` of
// the wrist link). Returns the minimum clearance minus the capsule radius
// (negative means collision).
double oracle_arm_clearance(const WorldConfig& cfg, const WorldState& w, const JointConfig& q) {
  auto pts = joint_positions(cfg.chain, q);

  auto point_aabb = [](Vec2 p, const AABB& b) {
    double dx = std::max({b.lo.x - p.x, 0.0, p.x - b.hi.x});
    double dy = std::max({b.lo.y - p.y, 0.0, p.y - b.hi.y});
    return std::hypot(dx, dy);
  };
  auto point_obj = [&](Vec2 p, const ObjectState& o) {
    if (o.shape.kind == ShapeKind::Disk) return dist(p, o.pose.position()) - o.shape.r;
    double c = std::cos(o.pose.theta), s = std::sin(o.pose.theta);
    double rx = p.x - o.pose.x, ry = p.y - o.pose.y;
    double lx = c * rx + s * ry, ly = -s * rx + c * ry;
    double dx = std::max({-o.shape.hx - lx, 0.0, lx - o.shape.hx});
    double dy = std::max({-o.shape.hy - ly, 0.0, ly - o.shape.hy});
    return std::hypot(dx, dy);
  };

  double min_clear = 1e300;
  const int samples = 400;
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    double link_len = dist(pts[i], pts[i + 1]);
    double body_frac = 1.0;
    if (i + 2 == pts.size()) body_frac = std::max(0.0, link_len - cfg.gripper_len) / link_len;
    for (int k = 0; k <= samples; ++k) {
      double t = static_cast<double>(k) / samples;
      Vec2 p{pts[i].x + (pts[i + 1].x - pts[i].x) * t, pts[i].y + (pts[i + 1].y - pts[i].y) * t};
      for (auto& ob : w.obstacles) min_clear = std::min(min_clear, point_aabb(p, ob));
      if (t > body_frac) continue;
      for (auto& o : w.objects) {
        if (o.attached) continue;
        min_clear = std::min(min_clear, point_obj(p, o));
      }
    }
  }
  return min_clear - cfg.capsule_r;
}

WorldState empty_world(const JointConfig& q) {
  WorldState w;
  w.q = q;
  return w;
}

ControlAction task_act(double dx, double dy, double dth, double grip) {
  ControlAction a;
  a.mode = ActionMode::task_space;
  a.motion = {dx, dy, dth};
  a.gripper_cmd = grip;
  return a;
}

ControlAction joint_act(const std::vector<double>& dq, double grip) {
  ControlAction a;
  a.mode = ActionMode::joint_space;
  a.motion = dq;
  a.gripper_cmd = grip;
  return a;
}

int count_color(const Image& img, const uint8_t c[3]) {
  int n = 0;
  for (size_t i = 0; i < img.rgb.size(); i += 3)
    if (img.rgb[i] == c[0] && img.rgb[i + 1] == c[1] && img.rgb[i + 2] == c[2]) ++n;
  return n;
}

Vec2 color_centroid(const Image& img, const ViewWindow& view, const uint8_t c[3]) {
  double px = 2.0 * view.half / img.w;
  double sx = 0.0, sy = 0.0;
  int n = 0;
  for (int r = 0; r < img.h; ++r)
    for (int col = 0; col < img.w; ++col) {
      size_t i = (static_cast<size_t>(r) * img.w + col) * 3;
      if (img.rgb[i] == c[0] && img.rgb[i + 1] == c[1] && img.rgb[i + 2] == c[2]) {
        sx += view.center.x - view.half + (col + 0.5) * px;
        sy += view.center.y + view.half - (r + 0.5) * px;
        ++n;
      }
    }
  REQUIRE(n > 0);
  return {sx / n, sy / n};
}

}  // namespace

TEST_CASE("shape queries match hand-computed values") {
  ObjectShape d = ObjectShape::disk(0.07);
  PlanarPose at{1.0, 0.5, 0.0};
  CHECK(point_in_shape({1.05, 0.5}, d, at));
  CHECK_FALSE(point_in_shape({1.08, 0.5}, d, at));
  CHECK_THAT(dist_point_shape({1.2, 0.5}, d, at), WithinAbs(0.13, 1e-12));
  CHECK(dist_point_shape({1.01, 0.5}, d, at) == 0.0);
  CHECK_THAT(dist_to_grasp_points({1.2, 0.5}, d, at), WithinAbs(0.13, 1e-12));
  CHECK_THAT(dist_to_grasp_points({1.02, 0.5}, d, at), WithinAbs(0.05, 1e-12));

  ObjectShape b = ObjectShape::box(0.1, 0.05);
  PlanarPose bp{0.0, 0.0, 0.0};
  CHECK_THAT(dist_to_grasp_points({0.15, 0.0}, b, bp), WithinAbs(0.05, 1e-12));
  CHECK_THAT(dist_to_grasp_points({0.0, 0.2}, b, bp), WithinAbs(0.15, 1e-12));
  PlanarPose rot{0.0, 0.0, kPi / 2};
  CHECK_THAT(dist_to_grasp_points({0.0, 0.15}, b, rot), WithinAbs(0.05, 1e-12));
  CHECK(b.support_half() == 0.05);
  CHECK_THAT(d.support_half(), WithinAbs(0.07, 1e-15));
}

TEST_CASE("collision_free frozen cases") {
  JointConfig straight = {0.0, 0.0, 0.0};  // arm along +x, EE at (3, 0)

  SECTION("obstacle across the arm") {
    WorldState w = empty_world(straight);
    w.obstacles.push_back({{2.0, -0.1}, {2.2, 0.1}});
    CHECK_FALSE(collision_free(kCfg, w, straight));
  }
  SECTION("obstacle far away") {
    WorldState w = empty_world(straight);
    w.obstacles.push_back({{2.0, 1.0}, {2.2, 1.2}});
    CHECK(collision_free(kCfg, w, straight));
    CHECK_FALSE(collision_free(kCfg, w, straight, 1.0));  // gap is 1.0 - capsule_r
  }
  SECTION("object under an arm link collides") {
    WorldState w = empty_world(straight);
    ObjectState o;
    o.id = 0;
    o.shape = ObjectShape::disk(0.07);
    o.pose = {1.5, 0.02, 0.0};
    w.objects.push_back(o);
    CHECK_FALSE(collision_free(kCfg, w, straight));
  }
  SECTION("object under the gripper tip is ignored") {
    // The wrist collision body ends 0.2 before the EE, at (2.8, 0); the disk
    // clears it by 0.088.
    WorldState w = empty_world(straight);
    ObjectState o;
    o.id = 0;
    o.shape = ObjectShape::disk(0.07);
    o.pose = {2.95, 0.05, 0.0};
    w.objects.push_back(o);
    CHECK(collision_free(kCfg, w, straight));
  }
  SECTION("object under the wrist body collides even when another sits at the tip") {
    WorldState w = empty_world(straight);
    ObjectState at_tip;
    at_tip.id = 0;
    at_tip.shape = ObjectShape::disk(0.05);
    at_tip.pose = {3.05, 0.0, 0.0};
    ObjectState under_wrist;
    under_wrist.id = 1;
    under_wrist.shape = ObjectShape::disk(0.07);
    under_wrist.pose = {2.7, 0.02, 0.0};  // 0.3 in from the EE: on the body
    w.objects.push_back(at_tip);
    w.objects.push_back(under_wrist);
    CHECK_FALSE(collision_free(kCfg, w, straight));
  }
  SECTION("the tip hovers over a stack; the wrist body does not") {
    JointConfig q0 = task_spec(TaskId::pickplace1).q0;  // EE at (2, 0)
    WorldState w = empty_world(q0);
    auto add_box = [&](int id, double half, double x, double y, int level) {
      ObjectState o;
      o.id = id;
      o.shape = ObjectShape::box(half, half);
      o.pose = {x, y, 0.0};
      o.level = level;
      w.objects.push_back(o);
    };
    add_box(0, 0.09, 2.0, 0.0, 0);    // base of a stack, EE inside
    add_box(1, 0.075, 2.0, 0.0, 1);   // mid block, EE inside
    CHECK(collision_free(kCfg, w, q0));
    add_box(2, 0.04, 1.7, 0.45, 0);   // far from the EE, under the wrist body
    CHECK_FALSE(collision_free(kCfg, w, q0));
  }
  SECTION("attached object collides with obstacles only") {
    WorldState w = empty_world(straight);
    w.obstacles.push_back({{2.9, 0.05}, {3.3, 0.4}});
    ObjectState o;
    o.id = 0;
    o.shape = ObjectShape::disk(0.07);
    o.attached = true;
    o.grasp_tf = {0.0, 0.0, 0.0};  // centered on the EE
    o.pose = attached_pose(kCfg, straight, o);
    w.objects.push_back(o);
    // EE at (3, 0): the disk reaches y = 0.07 > 0.05, so the carried object
    // overlaps the obstacle even though the links clear it.
    CHECK_FALSE(collision_free(kCfg, w, straight));
    w.obstacles[0].lo.y = 0.08;
    CHECK(collision_free(kCfg, w, straight));
  }
}

TEST_CASE("collision_free agrees with a dense sampling oracle") {
  Rng rng(2024, 7);
  int checked = 0, collisions = 0;
  for (int trial = 0; trial < 300; ++trial) {
    WorldState w;
    w.q.resize(3);
    for (auto& v : w.q) v = rng.uniform(-kPi, kPi);
    int n_obs = static_cast<int>(rng.below(3));
    for (int i = 0; i < n_obs; ++i) {
      Vec2 lo{rng.uniform(-2.5, 2.0), rng.uniform(-2.5, 2.0)};
      w.obstacles.push_back({lo, {lo.x + rng.uniform(0.1, 0.8), lo.y + rng.uniform(0.1, 0.8)}});
    }
    int n_obj = 2 + static_cast<int>(rng.below(3));
    for (int i = 0; i < n_obj; ++i) {
      ObjectState o;
      o.id = i;
      o.shape = rng.below(2) == 0 ? ObjectShape::disk(rng.uniform(0.04, 0.1))
                                  : ObjectShape::box(rng.uniform(0.04, 0.12), rng.uniform(0.04, 0.12));
      o.pose = {rng.uniform(-2.2, 2.2), rng.uniform(-2.2, 2.2), rng.uniform(-kPi, kPi)};
      w.objects.push_back(o);
    }
    double clear = oracle_arm_clearance(kCfg, w, w.q);
    bool free = collision_free(kCfg, w, w.q);
    if (std::abs(clear) < 5e-3) continue;  // inside the sampling resolution band
    ++checked;
    if (!free) ++collisions;
    CHECK(free == (clear > 0.0));
  }
  CHECK(checked > 200);
  CHECK(collisions > 30);
  CHECK(collisions < checked - 30);
}

TEST_CASE("task-space stepping tracks commanded EE deltas") {
  TaskSpec task = task_spec(TaskId::pickplace1);
  WorldState w = empty_world(task.q0);
  PlanarPose before = ee_pose(kCfg, w.q);
  ControlAction a = task_act(0.02, -0.01, 0.03, 1.0);
  step(kCfg, w, a);
  CHECK_FALSE(w.last_rejected);
  CHECK(w.step_count == 1);
  PlanarPose after = ee_pose(kCfg, w.q);
  double ex = after.x - before.x - 0.02;
  double ey = after.y - before.y - 0.01 * -1.0;
  double et = wrap_angle(after.theta - before.theta) - 0.03;
  CHECK(std::hypot(ex, ey) < 0.15 * std::hypot(0.02, 0.01) + 2e-4);
  CHECK(std::abs(et) < 0.15 * 0.03 + 2e-4);

  SECTION("joint-space stepping applies deltas directly") {
    WorldState wj = empty_world(task.q0);
    step(kCfg, wj, joint_act({0.05, -0.02, 0.01}, 1.0));
    CHECK_THAT(wj.q[0], WithinAbs(task.q0[0] + 0.05, 1e-15));
    CHECK_THAT(wj.q[1], WithinAbs(task.q0[1] - 0.02, 1e-15));
    CHECK_THAT(wj.q[2], WithinAbs(task.q0[2] + 0.01, 1e-15));
  }
}

TEST_CASE("action validation rejects malformed and over-limit actions") {
  WorldState w = empty_world({0.0, 0.0, 0.0});
  CHECK_THROWS_AS(step(kCfg, w, task_act(0.051, 0.0, 0.0, 1.0)), ContractError);
  CHECK_THROWS_AS(step(kCfg, w, task_act(0.0, 0.0, 0.11, 1.0)), ContractError);
  CHECK_THROWS_AS(step(kCfg, w, joint_act({0.2, 0.0, 0.0}, 1.0)), ContractError);
  CHECK_THROWS_AS(step(kCfg, w, joint_act({0.0, 0.0}, 1.0)), ContractError);
  CHECK_THROWS_AS(step(kCfg, w, task_act(0.0, 0.0, 0.0, -0.5)), ContractError);
  CHECK_THROWS_AS(step(kCfg, w, task_act(0.0, 0.0, 0.0, 1.5)), ContractError);
  ControlAction bad;
  bad.mode = ActionMode::task_space;
  bad.motion = {0.0, 0.0};
  CHECK_THROWS_AS(step(kCfg, w, bad), ContractError);
  // A stored f32 action can round a hair past the limit; slack absorbs it.
  CHECK_NOTHROW(step(kCfg, w, task_act(kCfg.limits.dpos * (1.0 + 1e-6), 0.0, 0.0, 1.0)));
  CHECK(w.step_count == 1);
}

TEST_CASE("colliding motion is rejected and leaves the configuration intact") {
  JointConfig q0 = task_spec(TaskId::pickplace1).q0;  // EE at (2, 0)
  WorldState w = empty_world(q0);
  w.obstacles.push_back({{2.05, -0.5}, {2.3, 0.5}});
  REQUIRE(collision_free(kCfg, w, w.q));
  step(kCfg, w, task_act(0.05, 0.0, 0.0, 1.0));
  CHECK(w.last_rejected);
  CHECK(w.q == q0);
  CHECK(w.step_count == 1);
  step(kCfg, w, task_act(-0.05, 0.0, 0.0, 1.0));
  CHECK_FALSE(w.last_rejected);
  CHECK(w.q != q0);
}

TEST_CASE("gripper edges attach and release objects") {
  JointConfig q0 = task_spec(TaskId::pickplace1).q0;  // EE at (2, 0)
  WorldState w = empty_world(q0);
  ObjectState o;
  o.id = 0;
  o.shape = ObjectShape::disk(0.07);
  o.pose = {2.07, 0.0, 0.0};  // boundary ring passes through the EE
  w.objects.push_back(o);

  SECTION("close on the boundary attaches; the object then follows the EE") {
    step(kCfg, w, task_act(0.0, 0.0, 0.0, 0.2));
    REQUIRE(w.attached_id() == 0);
    PlanarPose tf = w.object(0).grasp_tf;
    for (int i = 0; i < 5; ++i) {
      step(kCfg, w, task_act(-0.03, 0.02, 0.01, 0.2));
      REQUIRE_FALSE(w.last_rejected);
      PlanarPose expect = ee_pose(kCfg, w.q).compose(tf);
      CHECK_THAT(w.object(0).pose.x, WithinAbs(expect.x, 1e-12));
      CHECK_THAT(w.object(0).pose.y, WithinAbs(expect.y, 1e-12));
      CHECK_THAT(wrap_angle(w.object(0).pose.theta - expect.theta), WithinAbs(0.0, 1e-12));
      CHECK(w.object(0).grasp_tf.x == tf.x);
      CHECK(w.object(0).grasp_tf.y == tf.y);
      CHECK(w.object(0).grasp_tf.theta == tf.theta);
    }
    SECTION("opening releases at the current pose") {
      PlanarPose held = w.object(0).pose;
      step(kCfg, w, task_act(0.0, 0.0, 0.0, 1.0));
      CHECK(w.attached_id() == -1);
      CHECK(w.object(0).pose.x == held.x);
      CHECK(w.object(0).level == 0);
    }
  }
  SECTION("close with nothing in tolerance attaches nothing") {
    w.objects[0].pose = {2.2, 0.0, 0.0};  // boundary 0.13 from the EE
    step(kCfg, w, task_act(0.0, 0.0, 0.0, 0.0));
    CHECK(w.attached_id() == -1);
  }
  SECTION("staying closed produces no second edge") {
    step(kCfg, w, task_act(0.0, 0.0, 0.0, 0.2));
    REQUIRE(w.attached_id() == 0);
    step(kCfg, w, task_act(0.0, 0.0, 0.0, 0.4));  // still closed
    CHECK(w.attached_id() == 0);
    step(kCfg, w, task_act(0.0, 0.0, 0.0, 0.45));
    CHECK(w.attached_id() == 0);
  }
  SECTION("open edge with empty hand is a no-op") {
    w.gripper = 0.2;
    step(kCfg, w, task_act(0.0, 0.0, 0.0, 1.0));
    CHECK(w.attached_id() == -1);
  }
}

TEST_CASE("release levels stack objects without interpenetration") {
  WorldState w = empty_world({0.0, 0.0, 0.0});
  auto add = [&](int id, double half, double x, double y) {
    ObjectState o;
    o.id = id;
    o.shape = ObjectShape::box(half, half);
    o.pose = {x, y, 0.0};
    w.objects.push_back(o);
  };
  add(0, 0.09, 1.2, 0.0);
  add(1, 0.075, 1.9, 0.9);
  add(2, 0.06, 1.2, -0.9);

  // Pretend-carry object 1 over object 0 and release.
  w.objects[1].attached = true;
  w.objects[1].grasp_tf = ee_pose(kCfg, w.q).inverse().compose(PlanarPose{1.22, 0.01, 0.0});
  detach_object(kCfg, w);
  CHECK(w.object(1).level == 1);
  CHECK_THAT(w.object(1).pose.x, WithinAbs(1.22, 1e-9));

  // Same for object 2 over the two-high stack: it overlaps both.
  w.objects[2].attached = true;
  w.objects[2].grasp_tf = ee_pose(kCfg, w.q).inverse().compose(PlanarPose{1.21, 0.0, 0.1});
  detach_object(kCfg, w);
  CHECK(w.object(2).level == 2);

  // Release away from everything lands on the table.
  w.objects[2].attached = true;
  w.objects[2].grasp_tf = ee_pose(kCfg, w.q).inverse().compose(PlanarPose{0.5, -1.0, 0.0});
  detach_object(kCfg, w);
  CHECK(w.object(2).level == 0);

  // Overlapping only the mid block still goes one above it.
  w.objects[2].attached = true;
  w.objects[2].grasp_tf = ee_pose(kCfg, w.q).inverse().compose(PlanarPose{1.29, 0.07, 0.0});
  detach_object(kCfg, w);
  CHECK(w.object(2).level == 2);
}

TEST_CASE("random stepping preserves world invariants") {
  TaskSpec task = task_spec(TaskId::stack2);
  WorldState w = sample_problem(kCfg, task, 99);
  Rng rng(99, 5);
  int applied = 0, rejected = 0;
  for (int i = 0; i < 300; ++i) {
    ControlAction a;
    a.mode = rng.below(2) == 0 ? ActionMode::task_space : ActionMode::joint_space;
    if (a.mode == ActionMode::task_space)
      a.motion = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.1, 0.1)};
    else
      a.motion = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
    a.gripper_cmd = rng.uniform();
    step(kCfg, w, a);
    (w.last_rejected ? rejected : applied)++;

    // Arm clearance holds whenever the motion was applied.
    if (!w.last_rejected) REQUIRE(collision_free(kCfg, w, w.q));
    // Joint limits always hold.
    for (size_t j = 0; j < w.q.size(); ++j) {
      REQUIRE(w.q[j] >= kCfg.chain.joint_limits[j][0]);
      REQUIRE(w.q[j] <= kCfg.chain.joint_limits[j][1]);
    }
    // A carried object sits exactly at the rigid transform from the EE.
    int att = w.attached_id();
    if (att >= 0) {
      PlanarPose expect = attached_pose(kCfg, w.q, w.object(att));
      REQUIRE_THAT(w.object(att).pose.x, WithinAbs(expect.x, 1e-12));
      REQUIRE_THAT(w.object(att).pose.y, WithinAbs(expect.y, 1e-12));
    }
    // Resting objects on the same level never interpenetrate.
    for (size_t aIdx = 0; aIdx < w.objects.size(); ++aIdx)
      for (size_t b = aIdx + 1; b < w.objects.size(); ++b) {
        const ObjectState &oa = w.objects[aIdx], &ob = w.objects[b];
        if (oa.attached || ob.attached || oa.level != ob.level) continue;
        REQUIRE_FALSE(shapes_overlap(oa.shape, oa.pose, ob.shape, ob.pose, -1e-9));
      }
  }
  CHECK(applied > 50);
  CHECK(w.step_count == 300);
}

TEST_CASE("goal_satisfied checks regions, stacks, and gripper state") {
  SECTION("pick-and-place") {
    TaskSpec task = task_spec(TaskId::pickplace1);
    WorldState w = sample_problem(kCfg, task, 3);
    CHECK_FALSE(goal_satisfied(w, task));
    w.object(0).pose = {1.2, -0.8, 0.0};  // inside the target region
    CHECK(goal_satisfied(w, task));
    w.gripper = 0.2;
    CHECK_FALSE(goal_satisfied(w, task));
    w.gripper = 1.0;
    w.object(0).pose = {1.2, -0.4, 0.0};  // outside
    CHECK_FALSE(goal_satisfied(w, task));
  }
  SECTION("stacking") {
    TaskSpec task = task_spec(TaskId::stack2);
    WorldState w = sample_problem(kCfg, task, 3);
    CHECK_FALSE(goal_satisfied(w, task));
    Vec2 base = w.object(0).pose.position();
    w.object(1).pose = {base.x + 0.02, base.y, 0.0};
    w.object(1).level = 1;
    w.object(2).pose = {base.x, base.y + 0.01, 0.0};
    w.object(2).level = 2;
    CHECK(goal_satisfied(w, task));
    w.object(2).level = 1;
    CHECK_FALSE(goal_satisfied(w, task));
    w.object(2).level = 2;
    w.object(2).pose.x = base.x + 0.1;  // past the mid block's support half-extent
    CHECK_FALSE(goal_satisfied(w, task));
    w.object(2).pose.x = base.x;
    w.object(2).attached = true;
    CHECK_FALSE(goal_satisfied(w, task));
  }
}

TEST_CASE("sample_problem is deterministic and respects constraints") {
  for (TaskId id : all_tasks()) {
    TaskSpec task = task_spec(id);
    INFO("task " << task_name(id));
    std::string first = serialize_world(sample_problem(kCfg, task, 42));
    CHECK(first == serialize_world(sample_problem(kCfg, task, 42)));
    CHECK(first != serialize_world(sample_problem(kCfg, task, 43)));
    for (uint64_t seed = 0; seed < 100; ++seed) {
      WorldState w = sample_problem(kCfg, task, seed);
      REQUIRE(collision_free(kCfg, w, w.q));
      for (int i = 0; i < task.n_objects(); ++i) {
        const ObjectState& o = w.objects[static_cast<size_t>(i)];
        REQUIRE(task.source_regions[static_cast<size_t>(i)].contains(o.pose.position()));
        REQUIRE(o.level == 0);
        REQUIRE_FALSE(o.attached);
        for (int j = 0; j < i; ++j) {
          const ObjectState& p = w.objects[static_cast<size_t>(j)];
          REQUIRE_FALSE(shapes_overlap(o.shape, o.pose, p.shape, p.pose, 0.0099));
        }
        for (auto& ob : w.obstacles) REQUIRE_FALSE(shape_overlaps_aabb(o.shape, o.pose, ob, 0.0099));
      }
    }
  }
}

TEST_CASE("task registry is well-formed") {
  for (TaskId id : all_tasks()) {
    TaskSpec task = task_spec(id);
    INFO("task " << task_name(id));
    REQUIRE(task.n_objects() >= 1);
    REQUIRE(task.shapes.size() == task.colors.size());
    REQUIRE(task.shapes.size() == task.source_regions.size());
    REQUIRE(task.q0.size() == static_cast<size_t>(kCfg.chain.dof()));
    REQUIRE_FALSE(task.moved_objects().empty());
    double reach = 0.0;
    for (double l : kCfg.chain.link_lengths) reach += l;
    auto inside = [&](const AABB& b) {
      return task.world_bounds.contains(b.lo) && task.world_bounds.contains(b.hi);
    };
    for (auto& r : task.source_regions) {
      REQUIRE(inside(r));
      for (Vec2 c : {r.lo, r.hi, Vec2{r.lo.x, r.hi.y}, Vec2{r.hi.x, r.lo.y}})
        REQUIRE(c.norm() < reach - 0.2);
    }
    for (auto& [oid, r] : task.target_regions) {
      REQUIRE(oid >= 0);
      REQUIRE(oid < task.n_objects());
      REQUIRE(inside(r));
      for (Vec2 c : {r.lo, r.hi}) REQUIRE(c.norm() < reach - 0.2);
    }
    for (int oid : task.stack_order) {
      REQUIRE(oid >= 0);
      REQUIRE(oid < task.n_objects());
    }
    REQUIRE(inside(task.workspace));
  }
}

TEST_CASE("rendering places entities where they are") {
  TaskSpec task = task_spec(TaskId::pickplace1);
  WorldState w = initial_world(task);
  w.q = task.q0;
  w.objects[0].pose = {1.2, 0.6, 0.0};

  SECTION("fixed-view blob centroid matches the object position") {
    Image img = render(kCfg, w, task.fixed_view);
    const uint8_t* red = palette::object_color(0);
    REQUIRE(count_color(img, red) >= 6);
    Vec2 c = color_centroid(img, task.fixed_view, red);
    double px = 2.0 * task.fixed_view.half / img.w;
    CHECK(dist(c, {1.2, 0.6}) < 2.0 * px);
  }
  SECTION("wrist view is centered on the EE") {
    PlanarPose ee = ee_pose(kCfg, w.q);
    ViewWindow wrist{ee.position(), task.wrist_half};
    Image img = render(kCfg, w, wrist);
    double px = 2.0 * wrist.half / img.w;
    double best = 1e300;
    for (int r = 0; r < img.h; ++r)
      for (int col = 0; col < img.w; ++col) {
        size_t i = (static_cast<size_t>(r) * img.w + col) * 3;
        if (img.rgb[i] == palette::kLink[0] && img.rgb[i + 1] == palette::kLink[1] &&
            img.rgb[i + 2] == palette::kLink[2])
          best = std::min(best, std::hypot((col + 0.5) - 42.0, (r + 0.5) - 42.0));
      }
    CHECK(best <= 2.0);
    (void)px;
  }
  SECTION("rendering is deterministic") {
    Image a = render(kCfg, w, task.fixed_view);
    Image b = render(kCfg, w, task.fixed_view);
    CHECK(a.rgb == b.rgb);
  }
  SECTION("higher stack levels draw over lower ones") {
    WorldState ws = empty_world({0.0, kPi / 2, kPi / 2});  // arm folded away
    auto add = [&](int id, double half, int color, int level) {
      ObjectState o;
      o.id = id;
      o.shape = ObjectShape::box(half, half);
      o.pose = {1.2, 0.0, 0.0};
      o.color_id = color;
      o.level = level;
      ws.objects.push_back(o);
    };
    add(0, 0.09, 3, 0);
    add(1, 0.05, 2, 1);
    ViewWindow close_up{{1.2, 0.0}, 0.25};
    Image img = render(kCfg, ws, close_up);
    CHECK(count_color(img, palette::object_color(2)) > 50);   // top block visible
    CHECK(count_color(img, palette::object_color(3)) > 100);  // base ring visible
    int cx = 42, cy = 42;
    size_t i = (static_cast<size_t>(cy) * img.w + cx) * 3;
    CHECK(img.rgb[i] == palette::object_color(2)[0]);
  }
  SECTION("a carried object draws over the links") {
    WorldState ws = empty_world(task.q0);
    ObjectState o;
    o.id = 0;
    o.shape = ObjectShape::disk(0.07);
    o.attached = true;
    o.grasp_tf = {0.0, 0.0, 0.0};
    o.pose = attached_pose(kCfg, ws.q, o);
    ws.objects.push_back(o);
    PlanarPose ee = ee_pose(kCfg, ws.q);
    Image img = render(kCfg, ws, {ee.position(), task.wrist_half});
    size_t i = (static_cast<size_t>(42) * img.w + 42) * 3;
    CHECK(img.rgb[i] == palette::object_color(0)[0]);
    CHECK(img.rgb[i + 1] == palette::object_color(0)[1]);
  }
  SECTION("gate obstacles render as gray pixels") {
    TaskSpec gate = task_spec(TaskId::gate_pickplace);
    WorldState wg = sample_problem(kCfg, gate, 0);
    Image img = render(kCfg, wg, gate.fixed_view);
    CHECK(count_color(img, palette::kObstacle) > 50);
  }
}

TEST_CASE("observe returns both views and float proprio") {
  TaskSpec task = task_spec(TaskId::pickplace2);
  WorldState w = sample_problem(kCfg, task, 11);
  Observation obs = observe(kCfg, w, task);
  REQUIRE(obs.views.size() == 2);
  CHECK(obs.views[0].rgb == render(kCfg, w, task.fixed_view).rgb);
  PlanarPose ee = ee_pose(kCfg, w.q);
  CHECK(obs.proprio[0] == static_cast<float>(ee.x));
  CHECK(obs.proprio[1] == static_cast<float>(ee.y));
  CHECK(obs.proprio[2] == static_cast<float>(ee.theta));
  CHECK(obs.proprio[3] == static_cast<float>(w.gripper));
  CHECK(obs.views[1].rgb == render(kCfg, w, {ee.position(), task.wrist_half}).rgb);
}

TEST_CASE("world serialization round-trips exactly") {
  TaskSpec task = task_spec(TaskId::stack2);
  WorldState w = sample_problem(kCfg, task, 21);
  // Exercise the attached fields too.
  w.objects[1].attached = true;
  w.objects[1].grasp_tf = {0.01, -0.02, 0.3};
  w.step_count = 17;
  w.last_rejected = true;
  w.gripper = 0.25;
  std::string text = serialize_world(w);
  WorldState back = parse_world(text);
  CHECK(serialize_world(back) == text);
  CHECK(back.q == w.q);
  CHECK(back.attached_id() == 1);
  CHECK(back.step_count == 17);
  CHECK(back.last_rejected);
  CHECK(back.obstacles.size() == w.obstacles.size());
  CHECK_THROWS_AS(parse_world("nope"), ContractError);
  CHECK_THROWS_AS(parse_world("world v1\nq 3 0 0"), ContractError);
}

TEST_CASE("task serialization round-trips exactly") {
  for (TaskId id : all_tasks()) {
    TaskSpec task = task_spec(id);
    std::string text = serialize_task(task);
    TaskSpec back = parse_task(text);
    CHECK(serialize_task(back) == text);
    CHECK(back.id == task.id);
    CHECK(back.n_objects() == task.n_objects());
    CHECK(back.stack_order == task.stack_order);
    CHECK(back.target_regions.size() == task.target_regions.size());
  }
  CHECK_THROWS_AS(parse_task("task v2\nend\n"), ContractError);
  std::string cut = serialize_task(task_spec(TaskId::stack2));
  cut = cut.substr(0, cut.size() - 4);
  CHECK_THROWS_AS(parse_task(cut), ContractError);
}
