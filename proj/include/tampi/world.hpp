#pragma once

// Deterministic planar manipulation world: an N-revolute-joint arm over a
// tabletop seen from above, rigid disk/box objects, axis-aligned static
// obstacles, proximity grasping, and an 84x84 RGB point-sample renderer.
//
// Conventions that keep the planar top view coherent:
//  * Objects rest at integer stack levels (table = 0). A released object's
//    level becomes 1 + the highest level among resting objects its footprint
//    overlaps, so a release can never interpenetrate anything. Object-object
//    collision applies within a level.
//  * Links are capsules and collide with obstacles and resting objects, but
//    the last `gripper_len` of the wrist link is the gripper itself: it
//    clears resting objects (fingers straddle what they grasp and pass above
//    a stack being built or left), while obstacles block the full arm. The
//    arm's collision body is a fixed function of the configuration, so free
//    space has no state-dependent holes.
//  * A carried object is lifted: it sweeps against static obstacles only.

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tampi/geometry.hpp"
#include "tampi/kinematics.hpp"
#include "tampi/rng.hpp"

namespace tampi {

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

enum class ShapeKind : uint8_t { Disk = 0, Box = 1 };

struct ObjectShape {
  ShapeKind kind = ShapeKind::Disk;
  double r = 0.0;        // disk radius
  double hx = 0.0, hy = 0.0;  // box half extents

  static ObjectShape disk(double radius) { return {ShapeKind::Disk, radius, 0.0, 0.0}; }
  static ObjectShape box(double hx, double hy) { return {ShapeKind::Box, 0.0, hx, hy}; }

  double max_extent() const { return kind == ShapeKind::Disk ? r : std::hypot(hx, hy); }
  /// Alignment tolerance when something is stacked onto this shape.
  double support_half() const { return kind == ShapeKind::Disk ? r : std::min(hx, hy); }
};

struct ObjectState {
  int id = 0;
  ObjectShape shape;
  PlanarPose pose;
  bool attached = false;
  int color_id = 0;
  int level = 0;            // stack level while resting; ignored while attached
  PlanarPose grasp_tf;      // EE-frame pose of the object while attached
};

enum class TaskId : uint8_t { stack2, stack3, pickplace1, pickplace2, gate_pickplace };

inline const char* task_name(TaskId id) {
  switch (id) {
    case TaskId::stack2: return "stack2";
    case TaskId::stack3: return "stack3";
    case TaskId::pickplace1: return "pickplace1";
    case TaskId::pickplace2: return "pickplace2";
    case TaskId::gate_pickplace: return "gate_pickplace";
  }
  throw ContractError("unknown task id");
}

inline TaskId task_from_name(const std::string& name) {
  for (TaskId id : {TaskId::stack2, TaskId::stack3, TaskId::pickplace1, TaskId::pickplace2,
                    TaskId::gate_pickplace})
    if (name == task_name(id)) return id;
  throw ContractError("unknown task name: " + name);
}

struct ViewWindow {
  Vec2 center;
  double half = 1.0;
};

struct TaskSpec {
  TaskId id = TaskId::pickplace1;
  JointConfig q0;
  std::vector<ObjectShape> shapes;
  std::vector<int> colors;
  std::vector<AABB> source_regions;            // per object
  std::map<int, AABB> target_regions;          // moved object id -> goal region
  std::vector<int> stack_order;                // bottom..top for stacking goals
  std::vector<AABB> obstacles;
  AABB workspace;                              // EE curation box
  ViewWindow fixed_view;
  double wrist_half = 0.5;
  AABB world_bounds;

  int n_objects() const { return static_cast<int>(shapes.size()); }

  /// Objects the task requires to move (region targets or stacked-on blocks).
  std::vector<int> moved_objects() const {
    std::vector<int> out;
    for (auto& [id, box] : target_regions) out.push_back(id);
    for (size_t i = 1; i < stack_order.size(); ++i) out.push_back(stack_order[i]);
    return out;
  }
};

struct ActionLimits {
  double dpos = 0.05;    // m per step, each of dx/dy (task space)
  double dtheta = 0.1;   // rad per step (task space)
  double dq = 0.1;       // rad per step per joint (joint space)
};

enum class ActionMode : uint8_t { task_space = 0, joint_space = 1 };

inline const char* action_mode_name(ActionMode m) {
  return m == ActionMode::task_space ? "task_space" : "joint_space";
}

struct ControlAction {
  ActionMode mode = ActionMode::task_space;
  std::vector<double> motion;  // (dx, dy, dtheta) or per-joint dq
  double gripper_cmd = 1.0;    // commanded open fraction in [0, 1]
};

struct WorldConfig {
  ChainSpec chain = ChainSpec::default_chain();
  ActionLimits limits;
  double grasp_tol = 0.03;
  double capsule_r = 0.03;
  double gripper_len = 0.2;  // wrist tip that overhangs resting objects
  double controller_lambda = 1e-3;  // resolved-rate damping; small to avoid lag
  double collision_resolution = 0.02;
  double home_margin = 0.02;  // arm clearance required of generated problems
};

struct WorldState {
  JointConfig q;
  double gripper = 1.0;  // open fraction; >= 0.5 counts as open
  std::vector<ObjectState> objects;
  std::vector<AABB> obstacles;
  long step_count = 0;
  bool last_rejected = false;

  int attached_id() const {
    for (auto& o : objects)
      if (o.attached) return o.id;
    return -1;
  }

  const ObjectState& object(int id) const {
    for (auto& o : objects)
      if (o.id == id) return o;
    throw ContractError(str_printf("no object with id %d", id));
  }

  ObjectState& object(int id) {
    for (auto& o : objects)
      if (o.id == id) return o;
    throw ContractError(str_printf("no object with id %d", id));
  }
};

/// Thrown when problem generation cannot satisfy the task constraints.
class SamplingError : public std::runtime_error {
public:
  explicit SamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Shape queries
// ---------------------------------------------------------------------------

inline bool point_in_shape(Vec2 p, const ObjectShape& s, const PlanarPose& pose) {
  if (s.kind == ShapeKind::Disk) return dist(p, pose.position()) <= s.r;
  return point_in_obox(p, {pose, s.hx, s.hy});
}

/// Distance from a point to the shape boundary/interior (0 inside).
inline double dist_point_shape(Vec2 p, const ObjectShape& s, const PlanarPose& pose) {
  if (s.kind == ShapeKind::Disk) return std::max(0.0, dist(p, pose.position()) - s.r);
  return dist_point_obox(p, {pose, s.hx, s.hy});
}

inline double dist_seg_shape(const Segment& seg, const ObjectShape& s, const PlanarPose& pose) {
  if (s.kind == ShapeKind::Disk) return std::max(0.0, dist_seg_point(seg, pose.position()) - s.r);
  return dist_seg_obox(seg, {pose, s.hx, s.hy});
}

inline bool shapes_overlap(const ObjectShape& a, const PlanarPose& pa, const ObjectShape& b,
                           const PlanarPose& pb, double margin = 0.0) {
  if (a.kind == ShapeKind::Disk && b.kind == ShapeKind::Disk)
    return disks_overlap(pa.position(), a.r, pb.position(), b.r, margin);
  if (a.kind == ShapeKind::Disk) return disk_obox_overlap(pa.position(), a.r, {pb, b.hx, b.hy}, margin);
  if (b.kind == ShapeKind::Disk) return disk_obox_overlap(pb.position(), b.r, {pa, a.hx, a.hy}, margin);
  return oboxes_overlap({pa, a.hx, a.hy}, {pb, b.hx, b.hy}, margin);
}

inline bool shape_overlaps_aabb(const ObjectShape& s, const PlanarPose& pose, const AABB& box,
                                double margin = 0.0) {
  if (s.kind == ShapeKind::Disk) return dist_point_aabb(pose.position(), box) < s.r + margin;
  OBox b{{box.center().x, box.center().y, 0.0}, box.half().x, box.half().y};
  return oboxes_overlap({pose, s.hx, s.hy}, b, margin);
}

/// World-frame grasp points: the boundary ring for disks (distance to it),
/// the four face midpoints for boxes.
inline double dist_to_grasp_points(Vec2 p, const ObjectShape& s, const PlanarPose& pose) {
  if (s.kind == ShapeKind::Disk) return std::abs(dist(p, pose.position()) - s.r);
  double best = 1e300;
  const Vec2 local[4] = {{+s.hx, 0.0}, {-s.hx, 0.0}, {0.0, +s.hy}, {0.0, -s.hy}};
  for (const Vec2& lp : local) best = std::min(best, dist(p, pose.apply(lp)));
  return best;
}

// ---------------------------------------------------------------------------
// Collision
// ---------------------------------------------------------------------------

inline PlanarPose ee_pose(const WorldConfig& cfg, const JointConfig& q) {
  return forward_kinematics(cfg.chain, q);
}

inline PlanarPose attached_pose(const WorldConfig& cfg, const JointConfig& q, const ObjectState& o) {
  return ee_pose(cfg, q).compose(o.grasp_tf);
}

/// True iff the arm's collision body clears every obstacle and resting
/// object and a carried object clears all static obstacles. The body is all
/// link capsules, except that the last `gripper_len` of the wrist link is
/// checked against obstacles only: that tip is the gripper, which closes
/// over objects and passes above stacks. `margin` inflates every clearance;
/// planners pass a positive margin so execution-time tracking error stays
/// safe.
inline bool collision_free(const WorldConfig& cfg, const WorldState& w, const JointConfig& q,
                           double margin = 0.0) {
  std::vector<Vec2> pts = joint_positions(cfg.chain, q);

  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    Segment link{pts[i], pts[i + 1]};
    for (auto& ob : w.obstacles)
      if (dist_seg_aabb(link, ob) < cfg.capsule_r + margin) return false;

    Segment body = link;
    if (i + 2 == pts.size()) {
      double len = dist(link.a, link.b);
      double keep = len - cfg.gripper_len;
      if (keep <= 0.0) continue;  // wrist shorter than the gripper: tip only
      double s = keep / len;
      body.b = {link.a.x + (link.b.x - link.a.x) * s, link.a.y + (link.b.y - link.a.y) * s};
    }
    for (auto& o : w.objects) {
      if (o.attached) continue;
      if (dist_seg_shape(body, o.shape, o.pose) < cfg.capsule_r + margin) return false;
    }
  }

  int att = w.attached_id();
  if (att >= 0) {
    const ObjectState& o = w.object(att);
    PlanarPose pose = ee_pose(cfg, q).compose(o.grasp_tf);
    for (auto& ob : w.obstacles)
      if (shape_overlaps_aabb(o.shape, pose, ob, margin)) return false;
  }
  return true;
}

/// Linear configuration sweep at the collision resolution (interior points
/// and the far endpoint).
inline bool motion_free(const WorldConfig& cfg, const WorldState& w, const JointConfig& from,
                        const JointConfig& to, double margin = 0.0) {
  double d = cheby_distance(from, to);
  int n = std::max(1, static_cast<int>(std::ceil(d / cfg.collision_resolution)));
  for (int k = 1; k <= n; ++k) {
    double s = static_cast<double>(k) / n;
    JointConfig q(from.size());
    for (size_t j = 0; j < from.size(); ++j) q[j] = from[j] + (to[j] - from[j]) * s;
    if (!collision_free(cfg, w, q, margin)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Attachment primitives (shared by step() and the planner's virtual worlds)
// ---------------------------------------------------------------------------

inline void attach_object(const WorldConfig& cfg, WorldState& w, int id) {
  if (w.attached_id() >= 0) throw ContractError("attach: gripper already holds an object");
  ObjectState& o = w.object(id);
  o.grasp_tf = ee_pose(cfg, w.q).inverse().compose(o.pose);
  o.attached = true;
}

/// Releases the carried object at its current pose; its level becomes one
/// above the highest resting object its footprint overlaps.
inline void detach_object(const WorldConfig& cfg, WorldState& w) {
  int att = w.attached_id();
  if (att < 0) return;
  ObjectState& o = w.object(att);
  o.pose = attached_pose(cfg, w.q, o);
  int level = 0;
  for (auto& other : w.objects) {
    if (other.id == att || other.attached) continue;
    if (shapes_overlap(o.shape, o.pose, other.shape, other.pose)) level = std::max(level, other.level + 1);
  }
  o.level = level;
  o.attached = false;
}

/// Keeps carried-object poses in sync after the arm moves.
inline void sync_attached(const WorldConfig& cfg, WorldState& w) {
  for (auto& o : w.objects)
    if (o.attached) o.pose = attached_pose(cfg, w.q, o);
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

inline void validate_action(const WorldConfig& cfg, const ControlAction& a) {
  const double slack = 1.0 + 1e-5;  // stored f32 actions round up by ~1 ulp
  if (a.mode == ActionMode::task_space) {
    if (a.motion.size() != 3) throw ContractError("task-space action needs 3 motion components");
    if (std::abs(a.motion[0]) > cfg.limits.dpos * slack || std::abs(a.motion[1]) > cfg.limits.dpos * slack)
      throw ContractError("task-space position delta exceeds limit");
    if (std::abs(a.motion[2]) > cfg.limits.dtheta * slack)
      throw ContractError("task-space angle delta exceeds limit");
  } else {
    if (a.motion.size() != static_cast<size_t>(cfg.chain.dof()))
      throw ContractError("joint-space action must match chain dof");
    for (double v : a.motion)
      if (std::abs(v) > cfg.limits.dq * slack) throw ContractError("joint delta exceeds limit");
  }
  if (a.gripper_cmd < -1e-9 || a.gripper_cmd > 1.0 + 1e-9)
    throw ContractError("gripper command outside [0, 1]");
}

/// Applies one control action in place. Motion that would collide is
/// rejected (configuration unchanged, `last_rejected` set); the gripper
/// command is processed either way. Closing within the grasp tolerance of an
/// object's grasp points attaches the nearest such object; opening releases.
inline void step(const WorldConfig& cfg, WorldState& w, const ControlAction& action) {
  validate_action(cfg, action);

  JointConfig dq(static_cast<size_t>(cfg.chain.dof()), 0.0);
  if (action.mode == ActionMode::joint_space) {
    dq = action.motion;
  } else {
    double e[3] = {action.motion[0], action.motion[1], action.motion[2]};
    detail::dls_step(jacobian(cfg.chain, w.q), cfg.chain.dof(), e, cfg.controller_lambda, dq);
  }
  JointConfig q_new(w.q.size());
  for (size_t j = 0; j < w.q.size(); ++j) q_new[j] = w.q[j] + dq[j];
  q_new = clamp_to_limits(cfg.chain, q_new);

  if (motion_free(cfg, w, w.q, q_new)) {
    w.q = q_new;
    sync_attached(cfg, w);
    w.last_rejected = false;
  } else {
    w.last_rejected = true;
  }

  double g_new = std::clamp(action.gripper_cmd, 0.0, 1.0);
  bool was_open = w.gripper >= 0.5;
  bool now_open = g_new >= 0.5;
  if (was_open && !now_open && w.attached_id() < 0) {
    Vec2 ee = ee_pose(cfg, w.q).position();
    int best = -1;
    double best_d = cfg.grasp_tol;
    for (auto& o : w.objects) {
      double d = dist_to_grasp_points(ee, o.shape, o.pose);
      if (d <= best_d) {
        best_d = d;
        best = o.id;
      }
    }
    if (best >= 0) attach_object(cfg, w, best);
  } else if (!was_open && now_open) {
    detach_object(cfg, w);
  }
  w.gripper = g_new;
  w.step_count++;
}

// ---------------------------------------------------------------------------
// Goals
// ---------------------------------------------------------------------------

inline bool goal_satisfied(const WorldState& w, const TaskSpec& task) {
  if (w.gripper < 0.5 || w.attached_id() >= 0) return false;
  for (auto& [id, region] : task.target_regions) {
    const ObjectState& o = w.object(id);
    if (!region.contains(o.pose.position())) return false;
  }
  for (size_t i = 1; i < task.stack_order.size(); ++i) {
    const ObjectState& lower = w.object(task.stack_order[i - 1]);
    const ObjectState& upper = w.object(task.stack_order[i]);
    if (upper.level != lower.level + 1) return false;
    if (dist(upper.pose.position(), lower.pose.position()) > lower.shape.support_half()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Problem generation
// ---------------------------------------------------------------------------

inline WorldState initial_world(const TaskSpec& task) {
  WorldState w;
  w.q = task.q0;
  w.gripper = 1.0;
  w.obstacles = task.obstacles;
  for (int i = 0; i < task.n_objects(); ++i) {
    ObjectState o;
    o.id = i;
    o.shape = task.shapes[static_cast<size_t>(i)];
    o.color_id = task.colors[static_cast<size_t>(i)];
    w.objects.push_back(o);
  }
  return w;
}

/// Rejection-samples object poses in their source regions until the state is
/// valid: pairwise clearance, obstacle clearance, and a collision-free arm at
/// the home configuration. Deterministic per seed.
inline WorldState sample_problem(const WorldConfig& cfg, const TaskSpec& task, uint64_t seed) {
  Rng rng(seed, 1000);
  const int max_tries = 1000;
  const double clearance = 0.01;
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    WorldState w = initial_world(task);
    bool ok = true;
    for (int i = 0; i < task.n_objects() && ok; ++i) {
      ObjectState& o = w.objects[static_cast<size_t>(i)];
      const AABB& region = task.source_regions[static_cast<size_t>(i)];
      o.pose.x = rng.uniform(region.lo.x, region.hi.x);
      o.pose.y = rng.uniform(region.lo.y, region.hi.y);
      o.pose.theta = o.shape.kind == ShapeKind::Box ? rng.uniform(-kPi, kPi) : 0.0;
      for (int j = 0; j < i && ok; ++j) {
        const ObjectState& p = w.objects[static_cast<size_t>(j)];
        if (shapes_overlap(o.shape, o.pose, p.shape, p.pose, clearance)) ok = false;
      }
      for (auto& ob : w.obstacles)
        if (shape_overlaps_aabb(o.shape, o.pose, ob, clearance)) ok = false;
    }
    if (!ok) continue;
    // Planners inflate clearances; a margin-tight home pose would make every
    // plan fail at its first trajectory, so demand comfortable clearance.
    if (!collision_free(cfg, w, w.q, cfg.home_margin)) continue;
    return w;
  }
  throw SamplingError(str_printf("sample_problem: no valid state for task %s seed %llu after %d tries",
                                 task_name(task.id), static_cast<unsigned long long>(seed), max_tries));
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline constexpr int kImageSide = 84;

struct Image {
  int w = kImageSide, h = kImageSide;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() : rgb(static_cast<size_t>(kImageSide) * kImageSide * 3, 0) {}

  void set(int row, int col, const uint8_t c[3]) {
    size_t i = (static_cast<size_t>(row) * static_cast<size_t>(w) + static_cast<size_t>(col)) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }
};

namespace palette {
inline constexpr uint8_t kBackground[3] = {0, 0, 0};
inline constexpr uint8_t kObstacle[3] = {128, 128, 128};
inline constexpr uint8_t kLink[3] = {180, 180, 190};
inline constexpr uint8_t kObjects[8][3] = {
    {220, 50, 50}, {50, 200, 80}, {70, 110, 240}, {230, 210, 50},
    {210, 70, 210}, {60, 210, 210}, {240, 150, 40}, {150, 150, 70}};
inline const uint8_t* object_color(int color_id) {
  return kObjects[static_cast<size_t>(color_id) % 8];
}
}  // namespace palette

namespace detail {

/// Paints pixels whose centers fall inside `hit` within a world-space AABB,
/// overwriting previous content (callers paint back-to-front).
template <typename HitFn>
void paint(Image& img, const ViewWindow& view, const AABB& bounds, const uint8_t color[3],
           HitFn&& hit) {
  double px = 2.0 * view.half / img.w;  // world meters per pixel
  double x0 = view.center.x - view.half;
  double y1 = view.center.y + view.half;
  int c0 = std::max(0, static_cast<int>(std::floor((bounds.lo.x - x0) / px - 0.5)));
  int c1 = std::min(img.w - 1, static_cast<int>(std::ceil((bounds.hi.x - x0) / px - 0.5)) + 1);
  int r0 = std::max(0, static_cast<int>(std::floor((y1 - bounds.hi.y) / px - 0.5)));
  int r1 = std::min(img.h - 1, static_cast<int>(std::ceil((y1 - bounds.lo.y) / px - 0.5)) + 1);
  for (int r = r0; r <= r1; ++r) {
    double y = y1 - (r + 0.5) * px;
    for (int c = c0; c <= c1; ++c) {
      Vec2 p{x0 + (c + 0.5) * px, y};
      if (hit(p)) img.set(r, c, color);
    }
  }
}

inline AABB shape_bounds(const ObjectShape& s, const PlanarPose& pose) {
  double e = s.max_extent();
  return {{pose.x - e, pose.y - e}, {pose.x + e, pose.y + e}};
}

}  // namespace detail

/// Renders one view. Paint order (back to front): obstacles, resting objects
/// by ascending level, arm links, the carried object.
inline Image render(const WorldConfig& cfg, const WorldState& w, const ViewWindow& view) {
  Image img;
  for (auto& ob : w.obstacles)
    detail::paint(img, view, ob, palette::kObstacle, [&](Vec2 p) { return ob.contains(p); });

  int max_level = 0;
  for (auto& o : w.objects) max_level = std::max(max_level, o.level);
  for (int lvl = 0; lvl <= max_level; ++lvl) {
    for (auto& o : w.objects) {
      if (o.attached || o.level != lvl) continue;
      detail::paint(img, view, detail::shape_bounds(o.shape, o.pose), palette::object_color(o.color_id),
                    [&](Vec2 p) { return point_in_shape(p, o.shape, o.pose); });
    }
  }

  std::vector<Vec2> pts = joint_positions(cfg.chain, w.q);
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    Segment link{pts[i], pts[i + 1]};
    AABB b{{std::min(link.a.x, link.b.x) - cfg.capsule_r, std::min(link.a.y, link.b.y) - cfg.capsule_r},
           {std::max(link.a.x, link.b.x) + cfg.capsule_r, std::max(link.a.y, link.b.y) + cfg.capsule_r}};
    detail::paint(img, view, b, palette::kLink,
                  [&](Vec2 p) { return dist_seg_point(link, p) <= cfg.capsule_r; });
  }

  int att = w.attached_id();
  if (att >= 0) {
    const ObjectState& o = w.object(att);
    detail::paint(img, view, detail::shape_bounds(o.shape, o.pose), palette::object_color(o.color_id),
                  [&](Vec2 p) { return point_in_shape(p, o.shape, o.pose); });
  }
  return img;
}

struct Observation {
  std::vector<Image> views;
  float proprio[4] = {0, 0, 0, 0};  // EE x, y, theta, gripper fraction
};

/// Fixed task view plus a wrist-centered view of side 2*wrist_half.
inline Observation observe(const WorldConfig& cfg, const WorldState& w, const TaskSpec& task) {
  Observation obs;
  obs.views.push_back(render(cfg, w, task.fixed_view));
  PlanarPose ee = ee_pose(cfg, w.q);
  obs.views.push_back(render(cfg, w, {ee.position(), task.wrist_half}));
  obs.proprio[0] = static_cast<float>(ee.x);
  obs.proprio[1] = static_cast<float>(ee.y);
  obs.proprio[2] = static_cast<float>(ee.theta);
  obs.proprio[3] = static_cast<float>(w.gripper);
  return obs;
}

// ---------------------------------------------------------------------------
// Serialization (plain text, exact doubles)
// ---------------------------------------------------------------------------

inline std::string serialize_world(const WorldState& w) {
  std::ostringstream os;
  os << "world v1\n";
  os << "q " << w.q.size();
  for (double v : w.q) os << " " << fmt_double(v);
  os << "\ngripper " << fmt_double(w.gripper) << "\n";
  os << "step_count " << w.step_count << "\n";
  os << "last_rejected " << (w.last_rejected ? 1 : 0) << "\n";
  os << "objects " << w.objects.size() << "\n";
  for (auto& o : w.objects) {
    os << "obj " << o.id << " " << static_cast<int>(o.shape.kind) << " " << fmt_double(o.shape.r) << " "
       << fmt_double(o.shape.hx) << " " << fmt_double(o.shape.hy) << " " << fmt_double(o.pose.x) << " "
       << fmt_double(o.pose.y) << " " << fmt_double(o.pose.theta) << " " << (o.attached ? 1 : 0) << " "
       << o.color_id << " " << o.level << " " << fmt_double(o.grasp_tf.x) << " "
       << fmt_double(o.grasp_tf.y) << " " << fmt_double(o.grasp_tf.theta) << "\n";
  }
  os << "obstacles " << w.obstacles.size() << "\n";
  for (auto& b : w.obstacles)
    os << "box " << fmt_double(b.lo.x) << " " << fmt_double(b.lo.y) << " " << fmt_double(b.hi.x) << " "
       << fmt_double(b.hi.y) << "\n";
  return os.str();
}

inline WorldState parse_world(const std::string& text) {
  std::istringstream is(text);
  std::string tok;
  auto expect = [&](const char* want) {
    is >> tok;
    if (tok != want) throw ContractError(str_printf("world parse: expected '%s', got '%s'", want, tok.c_str()));
  };
  expect("world");
  expect("v1");
  WorldState w;
  size_t n = 0;
  expect("q");
  is >> n;
  w.q.resize(n);
  for (auto& v : w.q) is >> v;
  expect("gripper");
  is >> w.gripper;
  expect("step_count");
  is >> w.step_count;
  expect("last_rejected");
  int flag = 0;
  is >> flag;
  w.last_rejected = flag != 0;
  expect("objects");
  is >> n;
  for (size_t i = 0; i < n; ++i) {
    expect("obj");
    ObjectState o;
    int kind = 0, attached = 0;
    is >> o.id >> kind >> o.shape.r >> o.shape.hx >> o.shape.hy >> o.pose.x >> o.pose.y >> o.pose.theta >>
        attached >> o.color_id >> o.level >> o.grasp_tf.x >> o.grasp_tf.y >> o.grasp_tf.theta;
    o.shape.kind = static_cast<ShapeKind>(kind);
    o.attached = attached != 0;
    w.objects.push_back(o);
  }
  expect("obstacles");
  is >> n;
  for (size_t i = 0; i < n; ++i) {
    expect("box");
    AABB b;
    is >> b.lo.x >> b.lo.y >> b.hi.x >> b.hi.y;
    w.obstacles.push_back(b);
  }
  if (!is) throw ContractError("world parse: truncated input");
  return w;
}

// ---------------------------------------------------------------------------
// Built-in tasks
// ---------------------------------------------------------------------------

namespace detail {

inline TaskSpec task_base() {
  TaskSpec t;
  t.q0 = {kPi / 3, -kPi / 3, -kPi / 3};  // EE at (2.0, 0.0)
  t.fixed_view = {{1.1, 0.0}, 1.5};
  t.wrist_half = 0.5;
  t.world_bounds = {{-3.2, -3.2}, {3.2, 3.2}};
  t.workspace = {{-0.4, -1.7}, {2.7, 1.7}};
  return t;
}

}  // namespace detail

inline TaskSpec task_spec(TaskId id) {
  TaskSpec t = detail::task_base();
  t.id = id;
  switch (id) {
    // Region placement rule: every corner keeps all of a resting shape (plus
    // the capsule radius and planning margin) outside the first link's sweep
    // circle of radius 1.0, so a placed object can never trap the arm's
    // retreat, and inside ~2.2 so inward grasps stay well reachable.
    case TaskId::pickplace1:
      t.shapes = {ObjectShape::disk(0.07)};
      t.colors = {0};
      t.source_regions = {{{0.95, 0.65}, {1.55, 1.15}}};
      t.target_regions[0] = {{0.95, -1.15}, {1.45, -0.65}};
      break;
    case TaskId::pickplace2:
      t.shapes = {ObjectShape::disk(0.07), ObjectShape::disk(0.06)};
      t.colors = {0, 2};
      t.source_regions = {{{0.9, 0.7}, {1.5, 1.2}}, {{1.5, 0.4}, {1.95, 0.8}}};
      t.target_regions[0] = {{0.9, -1.2}, {1.4, -0.7}};
      t.target_regions[1] = {{1.55, -0.85}, {2.0, -0.45}};
      break;
    case TaskId::stack2:
      t.shapes = {ObjectShape::box(0.09, 0.09), ObjectShape::box(0.075, 0.075),
                  ObjectShape::box(0.06, 0.06)};
      t.colors = {3, 0, 2};
      t.source_regions = {{{1.25, -0.2}, {1.6, 0.2}}, {{0.95, 0.7}, {1.4, 1.15}},
                          {{1.35, 0.55}, {1.85, 1.0}}};
      t.stack_order = {0, 1, 2};
      break;
    case TaskId::stack3:
      t.shapes = {ObjectShape::box(0.1, 0.1), ObjectShape::box(0.085, 0.085),
                  ObjectShape::box(0.07, 0.07), ObjectShape::box(0.055, 0.055)};
      t.colors = {3, 0, 2, 1};
      t.source_regions = {{{1.3, -0.15}, {1.65, 0.15}},
                          {{0.95, 0.75}, {1.35, 1.2}},
                          {{1.45, 0.55}, {1.9, 1.0}},
                          {{0.95, -1.2}, {1.6, -0.7}}};
      t.stack_order = {0, 1, 2, 3};
      break;
    case TaskId::gate_pickplace:
      // The wall panels start just past the first link's reach, so the arm
      // can fold and swing past them near its base, but any straight drag of
      // the EE across y = 0 sweeps a link into a panel.
      t.q0 = {kPi / 2, -kPi / 3, -kPi / 3};  // start above the wall
      t.shapes = {ObjectShape::disk(0.07)};
      t.colors = {0};
      t.source_regions = {{{1.3, 0.5}, {2.1, 1.1}}};
      t.target_regions[0] = {{1.3, -1.1}, {2.0, -0.55}};
      t.obstacles = {{{1.0, -0.045}, {1.6, 0.045}}, {{2.1, -0.045}, {2.9, 0.045}}};
      break;
  }
  return t;
}

inline std::vector<TaskId> all_tasks() {
  return {TaskId::stack2, TaskId::stack3, TaskId::pickplace1, TaskId::pickplace2,
          TaskId::gate_pickplace};
}

inline std::string serialize_task(const TaskSpec& t) {
  std::ostringstream os;
  auto box = [&](const AABB& b) {
    return fmt_double(b.lo.x) + " " + fmt_double(b.lo.y) + " " + fmt_double(b.hi.x) + " " +
           fmt_double(b.hi.y);
  };
  os << "task v1\n";
  os << "id " << task_name(t.id) << "\n";
  os << "q0 " << t.q0.size();
  for (double v : t.q0) os << " " << fmt_double(v);
  os << "\nobjects " << t.n_objects() << "\n";
  for (int i = 0; i < t.n_objects(); ++i) {
    const ObjectShape& s = t.shapes[static_cast<size_t>(i)];
    os << "object " << i << " " << (s.kind == ShapeKind::Disk ? "disk" : "box") << " ";
    if (s.kind == ShapeKind::Disk)
      os << fmt_double(s.r);
    else
      os << fmt_double(s.hx) << " " << fmt_double(s.hy);
    os << " color " << t.colors[static_cast<size_t>(i)] << " source "
       << box(t.source_regions[static_cast<size_t>(i)]) << "\n";
  }
  for (auto& [id, region] : t.target_regions) os << "target " << id << " " << box(region) << "\n";
  if (!t.stack_order.empty()) {
    os << "stack_order " << t.stack_order.size();
    for (int v : t.stack_order) os << " " << v;
    os << "\n";
  }
  for (auto& ob : t.obstacles) os << "obstacle " << box(ob) << "\n";
  os << "workspace " << box(t.workspace) << "\n";
  os << "fixed_view " << fmt_double(t.fixed_view.center.x) << " " << fmt_double(t.fixed_view.center.y)
     << " " << fmt_double(t.fixed_view.half) << "\n";
  os << "wrist_half " << fmt_double(t.wrist_half) << "\n";
  os << "world_bounds " << box(t.world_bounds) << "\n";
  os << "end\n";
  return os.str();
}

inline TaskSpec parse_task(const std::string& text) {
  std::istringstream is(text);
  std::string tok;
  is >> tok;
  if (tok != "task") throw ContractError("task parse: missing header");
  is >> tok;
  if (tok != "v1") throw ContractError("task parse: unsupported version");
  TaskSpec t;
  auto read_box = [&]() {
    AABB b;
    is >> b.lo.x >> b.lo.y >> b.hi.x >> b.hi.y;
    return b;
  };
  while (is >> tok && tok != "end") {
    if (tok == "id") {
      std::string name;
      is >> name;
      t.id = task_from_name(name);
    } else if (tok == "q0") {
      size_t n;
      is >> n;
      t.q0.resize(n);
      for (auto& v : t.q0) is >> v;
    } else if (tok == "objects") {
      size_t n;
      is >> n;
      t.shapes.reserve(n);
    } else if (tok == "object") {
      int idx;
      std::string kind;
      is >> idx >> kind;
      ObjectShape s;
      if (kind == "disk") {
        is >> s.r;
        s.kind = ShapeKind::Disk;
      } else if (kind == "box") {
        is >> s.hx >> s.hy;
        s.kind = ShapeKind::Box;
      } else {
        throw ContractError("task parse: unknown shape kind " + kind);
      }
      std::string key;
      int color;
      is >> key >> color;
      if (key != "color") throw ContractError("task parse: expected color");
      is >> key;
      if (key != "source") throw ContractError("task parse: expected source");
      t.shapes.push_back(s);
      t.colors.push_back(color);
      t.source_regions.push_back(read_box());
    } else if (tok == "target") {
      int id;
      is >> id;
      t.target_regions[id] = read_box();
    } else if (tok == "stack_order") {
      size_t n;
      is >> n;
      t.stack_order.resize(n);
      for (auto& v : t.stack_order) is >> v;
    } else if (tok == "obstacle") {
      t.obstacles.push_back(read_box());
    } else if (tok == "workspace") {
      t.workspace = read_box();
    } else if (tok == "fixed_view") {
      is >> t.fixed_view.center.x >> t.fixed_view.center.y >> t.fixed_view.half;
    } else if (tok == "wrist_half") {
      is >> t.wrist_half;
    } else if (tok == "world_bounds") {
      t.world_bounds = read_box();
    } else {
      throw ContractError("task parse: unknown key " + tok);
    }
  }
  if (tok != "end" || !is) throw ContractError("task parse: truncated input");
  return t;
}

}  // namespace tampi
