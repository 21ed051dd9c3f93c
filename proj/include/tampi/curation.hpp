#pragma once

// Post-hoc demonstration filtering. Two rules, applied in order:
//  - duration: drop episodes whose task-space path length (sum of planar EE
//    position steps) exceeds mean + k * population-std of the input set;
//  - workspace: drop episodes whose EE ever leaves an axis-aligned box
//    (boundary counts as inside).
// Duration statistics are computed once over the pre-filter population, so
// both rules are plain predicates and the survivor set does not depend on
// rule order. Re-curating an already-curated container is made a no-op by
// carrying the computed threshold forward via the report sidecar instead of
// recomputing it over the shrunken population. Survivors are copied
// byte-identically; the report is written next to the output container as
// text and as a machine-readable record.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>

#include <json.hpp>

#include "tampi/dataset_io.hpp"
#include "tampi/geometry.hpp"

namespace tampi {

struct FilterConfig {
  double sigma_multiplier = 2.0;
  AABB workspace{{0.0, 0.0}, {0.0, 0.0}};
  bool duration_enabled = true;
  bool workspace_enabled = true;
  // Reuse a previously computed duration threshold instead of deriving one
  // from this container's population (what makes curation idempotent).
  std::optional<double> fixed_threshold;

  void validate() const {
    if (!(sigma_multiplier > 0.0)) throw ContractError("sigma_multiplier must be > 0");
    if (workspace_enabled && (workspace.hi.x < workspace.lo.x || workspace.hi.y < workspace.lo.y))
      throw ContractError("workspace box is inverted");
  }
};

struct CurationReport {
  uint32_t input_episodes = 0;
  uint32_t output_episodes = 0;

  bool duration_enabled = false;
  bool duration_skipped = false;  // < 2 episodes: rule is a no-op
  bool threshold_fixed = false;
  double length_mean = 0.0;
  double length_std = 0.0;
  double threshold = std::numeric_limits<double>::infinity();
  std::vector<uint32_t> removed_duration;

  bool workspace_enabled = false;
  AABB workspace{{0.0, 0.0}, {0.0, 0.0}};
  std::vector<uint32_t> removed_workspace;

  std::vector<double> lengths;  // per input episode, container order

  std::string text() const {
    std::string s;
    s += str_printf("episodes in:  %u\n", input_episodes);
    s += str_printf("episodes out: %u\n", output_episodes);
    if (duration_enabled) {
      if (duration_skipped) {
        s += "duration rule: skipped (needs at least 2 episodes)\n";
      } else {
        s += str_printf("duration rule: mean=%s std=%s threshold=%s (%s), removed %zu\n",
                        fmt_double(length_mean).c_str(), fmt_double(length_std).c_str(),
                        fmt_double(threshold).c_str(), threshold_fixed ? "carried" : "computed",
                        removed_duration.size());
        for (uint32_t id : removed_duration)
          s += str_printf("  removed episode %u: length %s\n", id, fmt_double(lengths[id]).c_str());
      }
    }
    if (workspace_enabled) {
      s += str_printf("workspace rule: box [%s, %s] x [%s, %s], removed %zu\n",
                      fmt_double(workspace.lo.x).c_str(), fmt_double(workspace.hi.x).c_str(),
                      fmt_double(workspace.lo.y).c_str(), fmt_double(workspace.hi.y).c_str(),
                      removed_workspace.size());
      for (uint32_t id : removed_workspace) s += str_printf("  removed episode %u\n", id);
    }
    return s;
  }

  nlohmann::json record() const {
    nlohmann::json j;
    j["input_episodes"] = input_episodes;
    j["output_episodes"] = output_episodes;
    j["duration"] = {{"enabled", duration_enabled},
                     {"skipped", duration_skipped},
                     {"threshold_source",
                      !duration_enabled ? "disabled"
                      : duration_skipped ? "skipped"
                      : threshold_fixed  ? "carried"
                                         : "computed"},
                     {"mean", length_mean},
                     {"std", length_std},
                     {"threshold", threshold},
                     {"removed", removed_duration}};
    j["workspace"] = {{"enabled", workspace_enabled},
                      {"box", {workspace.lo.x, workspace.lo.y, workspace.hi.x, workspace.hi.y}},
                      {"removed", removed_workspace}};
    j["lengths"] = lengths;
    return j;
  }
};

/// Planar task-space arc length of one episode: sum of consecutive EE
/// position distances from the stored pose track, accumulated in double.
inline double episode_path_length(const Episode& e) {
  const TensorBlock* poses = nullptr;
  for (auto& b : e.blocks)
    if (b.name == "ee_poses") poses = &b;
  if (!poses) throw DatasetError("episode has no ee_poses block");
  if (poses->shape.size() != 2 || poses->shape[1] != 3)
    throw ShapeMismatch("ee_poses must be [T,3]");
  std::vector<float> p = poses->as_f32();
  double len = 0.0;
  for (size_t t = 1; t < poses->shape[0]; ++t) {
    double dx = static_cast<double>(p[t * 3]) - static_cast<double>(p[(t - 1) * 3]);
    double dy = static_cast<double>(p[t * 3 + 1]) - static_cast<double>(p[(t - 1) * 3 + 1]);
    len += std::hypot(dx, dy);
  }
  return len;
}

/// True when every EE position stays inside the box, boundary inclusive.
inline bool episode_in_workspace(const Episode& e, const AABB& box) {
  const TensorBlock* poses = nullptr;
  for (auto& b : e.blocks)
    if (b.name == "ee_poses") poses = &b;
  if (!poses) throw DatasetError("episode has no ee_poses block");
  std::vector<float> p = poses->as_f32();
  for (size_t t = 0; t < poses->shape[0]; ++t) {
    double x = p[t * 3], y = p[t * 3 + 1];
    if (x < box.lo.x || x > box.hi.x || y < box.lo.y || y > box.hi.y) return false;
  }
  return true;
}

/// Mean, population standard deviation, and removal threshold for a set of
/// path lengths.
struct DurationStats {
  double mean = 0.0;
  double std = 0.0;
  double threshold = std::numeric_limits<double>::infinity();
};

inline DurationStats duration_stats(const std::vector<double>& lengths, double k) {
  DurationStats s;
  if (lengths.empty()) return s;
  double sum = 0.0;
  for (double l : lengths) sum += l;
  s.mean = sum / static_cast<double>(lengths.size());
  double ss = 0.0;
  for (double l : lengths) ss += (l - s.mean) * (l - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(lengths.size()));
  s.threshold = s.mean + k * s.std;
  return s;
}

/// Filters `in_path` into `out_path` (duration rule, then workspace rule)
/// and writes `<out>.curation.txt` / `<out>.curation.json` beside it.
/// Surviving episodes are byte-identical copies.
inline CurationReport curate(const std::string& in_path, const std::string& out_path,
                             const FilterConfig& cfg) {
  cfg.validate();
  DatasetReader rd(in_path);
  CurationReport rep;
  rep.input_episodes = rd.count();
  rep.duration_enabled = cfg.duration_enabled;
  rep.workspace_enabled = cfg.workspace_enabled;
  rep.workspace = cfg.workspace;

  rep.lengths.reserve(rd.count());
  std::vector<bool> in_box(rd.count(), true);
  for (uint32_t i = 0; i < rd.count(); ++i) {
    Episode e = rd.episode(i);
    rep.lengths.push_back(episode_path_length(e));
    if (cfg.workspace_enabled) in_box[i] = episode_in_workspace(e, cfg.workspace);
  }

  if (cfg.duration_enabled) {
    if (cfg.fixed_threshold) {
      rep.threshold = *cfg.fixed_threshold;
      rep.threshold_fixed = true;
      DurationStats s = duration_stats(rep.lengths, cfg.sigma_multiplier);
      rep.length_mean = s.mean;
      rep.length_std = s.std;
    } else if (rd.count() < 2) {
      rep.duration_skipped = true;  // no population to take statistics over
    } else {
      DurationStats s = duration_stats(rep.lengths, cfg.sigma_multiplier);
      rep.length_mean = s.mean;
      rep.length_std = s.std;
      rep.threshold = s.threshold;
    }
  }

  DatasetWriter writer(out_path);
  for (uint32_t i = 0; i < rd.count(); ++i) {
    bool over_long = cfg.duration_enabled && !rep.duration_skipped &&
                     rep.lengths[i] > rep.threshold;
    if (over_long) {
      rep.removed_duration.push_back(i);
      continue;
    }
    if (cfg.workspace_enabled && !in_box[i]) {
      rep.removed_workspace.push_back(i);
      continue;
    }
    writer.add_raw(rd.raw(i));
    ++rep.output_episodes;
  }
  writer.finalize();

  std::ofstream txt(out_path + ".curation.txt", std::ios::binary);
  txt << rep.text();
  std::ofstream js(out_path + ".curation.json", std::ios::binary);
  js << rep.record().dump(2) << "\n";
  if (!txt || !js) throw DatasetError("cannot write curation report next to " + out_path);
  return rep;
}

/// Duration threshold recorded by a previous curate() of `container_path`,
/// if its sidecar exists and carries one.
inline std::optional<double> stored_curation_threshold(const std::string& container_path) {
  std::ifstream in(container_path + ".curation.json", std::ios::binary);
  if (!in) return std::nullopt;
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("duration")) return std::nullopt;
  const auto& d = j["duration"];
  std::string src = d.value("threshold_source", "");
  if (src != "computed" && src != "carried") return std::nullopt;
  double t = d.value("threshold", std::numeric_limits<double>::infinity());
  if (!std::isfinite(t)) return std::nullopt;
  return t;
}

}  // namespace tampi
