#include <catch2/catch_amalgamated.hpp>

#include "tampi/motion.hpp"

using namespace tampi;
using Catch::Matchers::WithinAbs;

namespace {

const ChainSpec kChain = ChainSpec::default_chain();

JointConfig rand_cfg(Rng& rng) {
  JointConfig q(3);
  for (auto& v : q) v = rng.uniform(-kPi, kPi);
  return q;
}

void check_limits(const TimedTrajectory& traj, const Limits& lim, int samples = 1000) {
  double T = traj.duration();
  for (int k = 0; k <= samples; ++k) {
    double t = T * k / samples;
    JointConfig v = traj.velocity(t);
    JointConfig a = traj.acceleration(t);
    for (size_t j = 0; j < v.size(); ++j) {
      REQUIRE(std::abs(v[j]) <= lim.v_max[j] * (1.0 + 1e-6));
      REQUIRE(std::abs(a[j]) <= lim.a_max[j] * (1.0 + 1e-6));
    }
  }
}

}  // namespace

TEST_CASE("segment duration closed form") {
  Limits lim = Limits::default_for(3);
  // unit displacement: velocity bound gives 1.5, acceleration bound sqrt(3)
  double T = segment_duration({0, 0, 0}, {1, 0, 0}, lim);
  REQUIRE_THAT(T, WithinAbs(std::sqrt(3.0), 1e-12));
  // small displacement: velocity bound dominates sqrt term only when larger
  double T2 = segment_duration({0, 0, 0}, {0.0, 3.0, 0.0}, lim);
  REQUIRE_THAT(T2, WithinAbs(4.5, 1e-12));  // 1.5*3/1 > sqrt(9)
  REQUIRE(segment_duration({1, 1, 1}, {1, 1, 1}, lim) == 0.0);
}

TEST_CASE("timed trajectory hits knots, stays within limits, zero knot velocity") {
  Limits lim = Limits::default_for(3);
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    JointPath path;
    int n = 2 + static_cast<int>(rng.below(5));
    for (int i = 0; i < n; ++i) path.push_back(rand_cfg(rng));
    TimedTrajectory traj = time_path(path, lim);
    REQUIRE(traj.sample(0.0) == path.front());
    REQUIRE(traj.sample(traj.duration()) == path.back());
    check_limits(traj, lim, 300);
    // C1: velocity vanishes at every knot
    for (auto& k : traj.knots()) {
      for (double v : traj.velocity(k.t)) REQUIRE_THAT(v, WithinAbs(0.0, 1e-9));
    }
    // duration is the sum of per-segment closed forms
    double sum = 0.0;
    for (size_t i = 1; i < traj.knots().size(); ++i)
      sum += segment_duration(traj.knots()[i - 1].q, traj.knots()[i].q, lim);
    REQUIRE_THAT(traj.duration(), WithinAbs(sum, 1e-9));
  }
}

TEST_CASE("trajectory peak velocity and acceleration match the analytic profile") {
  Limits lim = Limits::default_for(3);
  TimedTrajectory traj = time_path({{0, 0, 0}, {1, 0, 0}}, lim);
  double T = traj.duration();
  // mid-segment speed = 1.5*d/T, boundary acceleration = 6*d/T^2
  REQUIRE_THAT(traj.velocity(T / 2)[0], WithinAbs(1.5 / T, 1e-12));
  REQUIRE_THAT(traj.acceleration(0.0)[0], WithinAbs(6.0 / (T * T), 1e-12));
  REQUIRE_THAT(traj.acceleration(T)[0], WithinAbs(-6.0 / (T * T), 1e-12));
}

TEST_CASE("birrt connects directly in free space") {
  Rng rng(32);
  CollisionFn all_free = [](const JointConfig&) { return true; };
  JointConfig start = {0, 0, 0}, goal = {1.0, -0.5, 0.7};
  auto path = birrt(kChain, start, goal, all_free, rng);
  REQUIRE(path.has_value());
  REQUIRE(path->front() == start);
  REQUIRE(path->back() == goal);
}

TEST_CASE("birrt detours around a configuration-space wall") {
  // configurations with q0 in (0.4, 0.6) are blocked unless q1 > 1.0
  CollisionFn free = [](const JointConfig& q) {
    return !(q[0] > 0.4 && q[0] < 0.6 && q[1] <= 1.0);
  };
  Rng rng(33);
  JointConfig start = {0, 0, 0}, goal = {1.0, 0.0, 0.0};
  auto path = birrt(kChain, start, goal, free, rng);
  REQUIRE(path.has_value());
  REQUIRE(path->front() == start);
  REQUIRE(path->back() == goal);
  // every waypoint valid and every hop within the extension step
  for (auto& q : *path) REQUIRE(free(q));
  for (size_t i = 1; i < path->size(); ++i) {
    REQUIRE(cheby_distance((*path)[i - 1], (*path)[i]) <= 0.1 + 1e-9);
    REQUIRE(tampi::detail::segment_valid((*path)[i - 1], (*path)[i], free, 0.002));
  }
  // it must actually pass through the gap
  bool gap_visited = false;
  for (auto& q : *path) gap_visited |= (q[0] > 0.4 && q[0] < 0.6 && q[1] > 1.0);
  REQUIRE(gap_visited);
}

TEST_CASE("birrt returns nothing for disconnected components") {
  CollisionFn free = [](const JointConfig& q) { return !(q[0] > 0.4 && q[0] < 0.6); };
  Rng rng(34);
  BirrtParams p;
  p.max_iters = 400;
  auto path = birrt(kChain, {0, 0, 0}, {1.0, 0.0, 0.0}, free, rng, p);
  REQUIRE_FALSE(path.has_value());
  // colliding endpoints fail immediately
  Rng rng2(34);
  REQUIRE_FALSE(birrt(kChain, {0.5, 0, 0}, {1.0, 0, 0}, free, rng2, p).has_value());
}

TEST_CASE("birrt is deterministic per seed") {
  CollisionFn free = [](const JointConfig& q) {
    return !(q[0] > 0.4 && q[0] < 0.6 && q[1] <= 1.0);
  };
  Rng r1(35), r2(35);
  auto p1 = birrt(kChain, {0, 0, 0}, {1, 0, 0}, free, r1);
  auto p2 = birrt(kChain, {0, 0, 0}, {1, 0, 0}, free, r2);
  REQUIRE(p1.has_value());
  REQUIRE(*p1 == *p2);
}

TEST_CASE("shortcutting never increases duration and keeps endpoints and limits") {
  Limits lim = Limits::default_for(3);
  CollisionFn all_free = [](const JointConfig&) { return true; };
  Rng rng(36);
  double total_gain = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    JointPath path;
    int n = 4 + static_cast<int>(rng.below(6));
    for (int i = 0; i < n; ++i) path.push_back(rand_cfg(rng));
    double before = time_path(path, lim).duration();
    Rng srng(static_cast<uint64_t>(trial), 3);
    TimedTrajectory smoothed = shortcut_smooth(path, all_free, lim, srng);
    REQUIRE(smoothed.duration() <= before + 1e-12);
    REQUIRE(smoothed.sample(0.0) == path.front());
    REQUIRE(smoothed.sample(smoothed.duration()) == path.back());
    check_limits(smoothed, lim, 500);
    total_gain += before - smoothed.duration();
  }
  REQUIRE(total_gain > 0.0);  // the optimizer genuinely shortcuts zigzags
}

TEST_CASE("shortcutting respects collision constraints") {
  Limits lim = Limits::default_for(3);
  CollisionFn free = [](const JointConfig& q) {
    return !(q[0] > 0.4 && q[0] < 0.6 && q[1] <= 1.0);
  };
  Rng rng(37);
  auto raw = birrt(kChain, {0, 0, 0}, {1, 0, 0}, free, rng);
  REQUIRE(raw.has_value());
  TimedTrajectory smoothed = shortcut_smooth(*raw, free, lim, rng);
  // verify at 10x finer resolution than planning used
  double T = smoothed.duration();
  for (int k = 0; k <= 2000; ++k) REQUIRE(free(smoothed.sample(T * k / 2000)));
}

TEST_CASE("resample covers 0..T inclusive on a fixed grid") {
  Limits lim = Limits::default_for(3);
  TimedTrajectory traj = time_path({{0, 0, 0}, {1, 0, 0}, {1, 1, 0}}, lim);
  double dt = 0.1;
  JointPath samples = resample(traj, dt);
  REQUIRE(samples.front() == traj.sample(0.0));
  REQUIRE(samples.back() == traj.sample(traj.duration()));
  for (size_t i = 0; i + 1 < samples.size(); ++i) {
    JointConfig expect = traj.sample(std::min(static_cast<double>(i) * dt, traj.duration()));
    REQUIRE(samples[i] == expect);
  }
  REQUIRE(static_cast<double>(samples.size() - 1) * dt >= traj.duration() - dt);
  REQUIRE_THROWS_AS(resample(traj, 0.0), ContractError);
}
