#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/io.hpp"
#include "seenfuse/model.hpp"
#include "seenfuse/pose.hpp"
#include "seenfuse/raster.hpp"

namespace seenfuse {

struct PoolEntry {
  int frame_id = 0;
  PosedFrame frame;  // test observation with its estimated pose
  double seen_iou = 0;
};

/// Bounded keyframe store. Entries are only ever appended; a full pool
/// rejects further admissions.
struct MemoryPool {
  std::size_t capacity = 30;
  std::vector<PoolEntry> entries;
  int version = 0;  // bumped on every admission

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  bool full() const { return entries.size() >= capacity; }
};

enum class AdmitOutcome { kAdmitted, kFirstFrame, kTooClose, kLowConfidence, kPoolFull, kInvalidPose };

inline const char* to_string(AdmitOutcome o) {
  switch (o) {
    case AdmitOutcome::kAdmitted: return "admitted";
    case AdmitOutcome::kFirstFrame: return "first-frame";
    case AdmitOutcome::kTooClose: return "too-close";
    case AdmitOutcome::kLowConfidence: return "low-confidence";
    case AdmitOutcome::kPoolFull: return "pool-full";
    case AdmitOutcome::kInvalidPose: return "invalid-pose";
  }
  return "unknown";
}

struct AdmitDecision {
  AdmitOutcome outcome = AdmitOutcome::kAdmitted;
  bool admitted() const { return outcome == AdmitOutcome::kAdmitted || outcome == AdmitOutcome::kFirstFrame; }
};

/// Admits `frame` at its scored pose when it is the first frame, or when it
/// is rotated more than t_geo from the last admitted entry, confident enough
/// (skipped with `check_confidence = false`) and the pool has room.
inline AdmitDecision try_admit(MemoryPool& pool, int frame_id, const RgbdFrame& frame, const Intrinsics& k,
                               const ScoredPose& scored, const Thresholds& th, bool check_confidence = true) {
  if (!scored.pose.rotation.allFinite() || !scored.pose.translation.allFinite() ||
      !is_rotation(scored.pose.rotation)) {
    return {AdmitOutcome::kInvalidPose};
  }
  AdmitDecision d;
  if (pool.empty()) {
    if (pool.capacity == 0) return {AdmitOutcome::kPoolFull};
    d.outcome = AdmitOutcome::kFirstFrame;
  } else {
    if (geodesic_distance(scored.pose.rotation, pool.entries.back().frame.pose.rotation) <= th.t_geo) {
      return {AdmitOutcome::kTooClose};
    }
    if (check_confidence && scored.seen_iou < th.t_conf) return {AdmitOutcome::kLowConfidence};
    if (pool.full()) return {AdmitOutcome::kPoolFull};
  }
  pool.entries.push_back({frame_id, {frame, scored.pose, k}, scored.seen_iou});
  ++pool.version;
  return d;
}

inline bool needs_completion(const ScoredPose& scored, const Thresholds& th) { return scored.seen_iou < th.t_complete; }

// ---------------------------------------------------------------------------
// Frame sampling

/// How much unseen surface a pool entry reveals.
enum class RevealMeasure { kDualArea, kVertexCount, kPixels };

struct SamplingResult {
  std::vector<std::size_t> selected;      // pool indices in pick order
  std::vector<double> newly_revealed;     // gain of each pick under the chosen measure
};

namespace detail {

/// Uncertain model vertices visible from each pool entry.
inline std::vector<std::vector<std::uint8_t>> entry_visibility(const MemoryPool& pool, const HybridModel& model) {
  std::vector<std::vector<std::uint8_t>> vis;
  vis.reserve(pool.size());
  for (const auto& e : pool.entries) {
    auto v = vertex_visibility(model.mesh, e.frame.pose, e.frame.k, &e.frame.frame.mask, model.visibility_eps);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] && model.uncertain[i];
    vis.push_back(std::move(v));
  }
  return vis;
}

/// Pixels of the entry's mask where the model renders a face with at least
/// two still-unrevealed uncertain vertices.
inline double pixel_gain(const RenderOutput& r, const MaskImage& mask, const TriangleMesh& mesh,
                         const std::vector<std::uint8_t>& unseen) {
  double n = 0;
  for (std::size_t p = 0; p < r.mask.size(); ++p) {
    if (!r.mask.pixels[p] || !mask.pixels[p]) continue;
    const Face& f = mesh.faces[std::size_t(r.face.pixels[p])];
    n += (int(unseen[f[0]]) + int(unseen[f[1]]) + int(unseen[f[2]])) >= 2;
  }
  return n;
}

}  // namespace detail

/// Greedy sampling of at most `k` pool entries: seeds with the first and the
/// latest entry, then repeatedly adds the entry revealing the most still-unseen
/// uncertain surface. Ties go to the lower pool index.
inline SamplingResult sample_frames(const MemoryPool& pool, const HybridModel& model, std::size_t k,
                                    RevealMeasure measure = RevealMeasure::kDualArea) {
  if (pool.empty()) throw Error(ErrorCode::kEmptySet, "sampling from an empty pool");
  SamplingResult res;
  const std::size_t n = pool.size();
  if (n > k && k < 2) {
    throw Error(ErrorCode::kInvalidK, "K must be >= 2 when the pool holds more than K entries");
  }
  const auto vis = detail::entry_visibility(pool, model);
  const std::vector<double> weight = measure == RevealMeasure::kDualArea ? vertex_dual_areas(model.mesh)
                                                                         : std::vector<double>(model.mesh.vertices.size(), 1.0);
  std::vector<std::uint8_t> unseen = model.uncertain;
  std::vector<RenderOutput> renders;
  if (measure == RevealMeasure::kPixels) {
    for (const auto& e : pool.entries) renders.push_back(rasterize(model.mesh, model.uncertain, e.frame.pose, e.frame.k));
  }
  auto gain = [&](std::size_t e) {
    if (measure == RevealMeasure::kPixels) return detail::pixel_gain(renders[e], pool.entries[e].frame.frame.mask, model.mesh, unseen);
    double g = 0;
    for (std::size_t v = 0; v < unseen.size(); ++v)
      if (unseen[v] && vis[e][v]) g += weight[v];
    return g;
  };
  auto take = [&](std::size_t e) {
    res.selected.push_back(e);
    res.newly_revealed.push_back(gain(e));
    for (std::size_t v = 0; v < unseen.size(); ++v)
      if (vis[e][v]) unseen[v] = 0;
  };
  if (n <= k) {
    for (std::size_t i = 0; i < n; ++i) take(i);
    return res;
  }
  std::vector<std::uint8_t> used(n, 0);
  take(0);
  take(n - 1);
  used[0] = used[n - 1] = 1;
  while (res.selected.size() < k) {
    std::size_t best = n;
    double best_gain = -1;
    for (std::size_t e = 0; e < n; ++e) {
      if (used[e]) continue;
      const double g = gain(e);
      if (g > best_gain) {
        best_gain = g;
        best = e;
      }
    }
    used[best] = 1;
    take(best);
  }
  return res;
}

/// Farthest-rotation sampling: same seeds, then repeatedly the entry whose
/// closest selected rotation is farthest away. Ignores the model's labels.
inline SamplingResult sample_frames_geodesic(const MemoryPool& pool, std::size_t k) {
  if (pool.empty()) throw Error(ErrorCode::kEmptySet, "sampling from an empty pool");
  const std::size_t n = pool.size();
  SamplingResult res;
  if (n <= k) {
    for (std::size_t i = 0; i < n; ++i) res.selected.push_back(i);
    res.newly_revealed.assign(n, 0.0);
    return res;
  }
  if (k < 2) throw Error(ErrorCode::kInvalidK, "K must be >= 2 when the pool holds more than K entries");
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> used(n, 0);
  auto take = [&](std::size_t e) {
    used[e] = 1;
    res.selected.push_back(e);
    res.newly_revealed.push_back(std::isfinite(closest[e]) ? closest[e] : 0.0);
    for (std::size_t j = 0; j < n; ++j)
      closest[j] = std::min(closest[j], geodesic_distance(pool.entries[j].frame.pose.rotation,
                                                          pool.entries[e].frame.pose.rotation));
  };
  take(0);
  take(n - 1);
  while (res.selected.size() < k) {
    std::size_t best = n;
    for (std::size_t e = 0; e < n; ++e)
      if (!used[e] && (best == n || closest[e] > closest[best])) best = e;
    take(best);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Rebuild

/// Renderings of a generated mesh that may stand in for unseen geometry.
/// Frames are never reactivated once filtered out.
struct AugmentationSet {
  std::vector<PosedFrame> frames;
  std::vector<std::uint8_t> active;

  std::size_t active_count() const { return std::size_t(std::count(active.begin(), active.end(), 1)); }
};

struct RebuildResult {
  HybridModel model;  // the new model, or a copy of the old one on failure
  bool ok = false;
  std::string message;
  std::vector<int> selected_ids;  // frame ids of the pool entries used
  double certain_before = 0;
  double certain_after = 0;
  double seconds = 0;
};

/// Refuses the references plus the sampled pool entries (and active
/// augmentation frames); labels come from real frames only. A failed fusion
/// keeps `old`.
inline RebuildResult rebuild(const MemoryPool& pool, const SamplingResult& sampling, const HybridModel& old,
                             const ReferenceSet& refs, const VolumeConfig& cfg, const AugmentationSet* aug = nullptr) {
  if (sampling.selected.empty()) throw Error(ErrorCode::kEmptySet, "rebuild with no sampled frames");
  const auto t0 = std::chrono::steady_clock::now();
  RebuildResult r;
  r.certain_before = old.certain_area_fraction();
  std::vector<PosedFrame> real(refs.begin(), refs.end());
  for (std::size_t i : sampling.selected) {
    real.push_back(pool.entries.at(i).frame);
    r.selected_ids.push_back(pool.entries[i].frame_id);
  }
  std::vector<PosedFrame> fuse = real;
  if (aug) {
    for (std::size_t i = 0; i < aug->frames.size(); ++i)
      if (aug->active[i]) fuse.push_back(aug->frames[i]);
  }
  try {
    r.model = fuse_and_label(fuse, real, cfg, Provenance::kRebuilt, old.build_stamp + 1);
    if (r.model.certain_count() == 0) throw Error(ErrorCode::kReconstructionFailure, "rebuilt model has no certain vertex");
    r.ok = true;
  } catch (const Error& e) {
    r.model = old;
    r.message = e.what();
  }
  r.certain_after = r.model.certain_area_fraction();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// One posed frame as a folder: color.png, depth.png, mask.png, pose.json.
inline void write_posed_frame_dir(const std::string& sub, const PosedFrame& f, int frame_id, double seen_iou,
                                  bool augmented) {
  namespace fs = std::filesystem;
  fs::create_directories(sub);
  write_color_png((fs::path(sub) / "color.png").string(), f.frame.color);
  write_depth_png((fs::path(sub) / "depth.png").string(), f.frame.depth);
  write_mask_png((fs::path(sub) / "mask.png").string(), f.frame.mask);
  write_json_file((fs::path(sub) / "pose.json").string(), {{"frame_id", frame_id},
                                                           {"pose", pose_to_json(f.pose)},
                                                           {"intrinsics", intrinsics_to_json(f.k)},
                                                           {"seen_iou", seen_iou},
                                                           {"augmented", augmented}});
}

/// Writes one subfolder per entry.
inline void save_pool(const std::string& dir, const MemoryPool& pool) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& e = pool.entries[i];
    write_posed_frame_dir((std::filesystem::path(dir) / frame_stem(i)).string(), e.frame, e.frame_id, e.seen_iou, false);
  }
}

/// Same layout as the pool; inactive (filtered) frames are kept but flagged.
inline void save_augmentation(const std::string& dir, const AugmentationSet& aug) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < aug.frames.size(); ++i) {
    const auto sub = (std::filesystem::path(dir) / frame_stem(i)).string();
    write_posed_frame_dir(sub, aug.frames[i], int(i), 1.0, true);
    auto j = read_json_file(sub + "/pose.json");
    j["active"] = bool(aug.active[i]);
    write_json_file(sub + "/pose.json", j);
  }
}

inline MemoryPool load_pool(const std::string& dir, std::size_t capacity = 30) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kIngest, "pool directory " + dir + " does not exist");
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subs.push_back(e.path());
  std::sort(subs.begin(), subs.end());
  MemoryPool pool;
  pool.capacity = capacity;
  for (const auto& sub : subs) {
    const auto j = read_json_file((sub / "pose.json").string());
    PoolEntry e;
    e.frame_id = j.value("frame_id", 0);
    e.seen_iou = j.value("seen_iou", 0.0);
    e.frame.pose = pose_from_json(j.at("pose"));
    e.frame.k = intrinsics_from_json(j.at("intrinsics"));
    e.frame.frame.color = read_color_png((sub / "color.png").string());
    e.frame.frame.depth = read_depth_png((sub / "depth.png").string());
    e.frame.frame.mask = read_mask_png((sub / "mask.png").string());
    pool.entries.push_back(std::move(e));
  }
  pool.version = int(pool.entries.size());
  return pool;
}

}  // namespace seenfuse
