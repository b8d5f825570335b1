#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"
#include "seenfuse/mesh.hpp"
#include "seenfuse/raster.hpp"

namespace seenfuse {

/// A ground-truth mesh moving along a trajectory in front of a fixed camera.
/// The optional occluder is posed in the camera frame and static.
struct SyntheticScene {
  TriangleMesh gt_mesh;
  std::vector<Pose> trajectory;
  Intrinsics k;
  double noise_sigma = 0.0;
  std::optional<TriangleMesh> occluder;
  Pose occluder_pose;
  std::uint64_t seed = 0;

  void check() const {
    if (gt_mesh.empty()) throw Error(ErrorCode::kEmptyMesh, "scene has no mesh");
    if (trajectory.empty()) throw Error(ErrorCode::kEmptySet, "scene trajectory is empty");
    if (!(noise_sigma >= 0)) throw Error(ErrorCode::kConfig, "noise sigma must be >= 0");
    k.check();
  }
};

struct SyntheticFrame {
  RgbdFrame frame;
  Pose gt;
};

/// Renders frame `i`: object silhouette minus occluder coverage, depth with
/// Gaussian noise seeded per frame so frames can be rendered independently.
inline SyntheticFrame render_scene_frame(const SyntheticScene& scene, std::size_t i) {
  const Pose& pose = scene.trajectory.at(i);
  const auto obj = rasterize(scene.gt_mesh, pose, scene.k, RenderFlags{true, false});
  SyntheticFrame out;
  out.gt = pose;
  out.frame.color = obj.color;
  out.frame.depth = obj.depth;
  out.frame.mask = obj.mask;
  if (scene.occluder) {
    const auto occ = rasterize(*scene.occluder, scene.occluder_pose, scene.k, RenderFlags{true, false});
    for (std::size_t p = 0; p < occ.mask.size(); ++p) {
      if (!occ.mask.pixels[p]) continue;
      if (!obj.mask.pixels[p] || occ.depth.pixels[p] < obj.depth.pixels[p]) {
        out.frame.mask.pixels[p] = 0;
        out.frame.depth.pixels[p] = occ.depth.pixels[p];
        out.frame.color.pixels[p] = occ.color.pixels[p];
      }
    }
  }
  if (scene.noise_sigma > 0) {
    std::mt19937_64 rng(scene.seed * 1000003ULL + i);
    std::normal_distribution<double> n(0.0, scene.noise_sigma);
    for (auto& d : out.frame.depth.pixels)
      if (d > 0) d = float(std::max(1e-3, d + n(rng)));
  }
  return out;
}

inline std::vector<SyntheticFrame> render_sequence(const SyntheticScene& scene) {
  scene.check();
  std::vector<SyntheticFrame> out;
  out.reserve(scene.trajectory.size());
  for (std::size_t i = 0; i < scene.trajectory.size(); ++i) out.push_back(render_scene_frame(scene, i));
  return out;
}

/// Camera pose looking at the origin from `distance`, raised by `elevation`
/// above the object's x-z plane (object +y is up).
inline Pose orbit_camera(double distance, double elevation, double azimuth = 0.0) {
  const Vec3 eye = distance * Vec3(std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
                                   std::cos(elevation) * std::cos(azimuth));
  return look_at_pose(eye, Vec3::Zero());
}

/// Object spinning about its own y axis by `step` radians per frame.
inline std::vector<Pose> turntable_trajectory(std::size_t frames, double step, double distance, double elevation) {
  const Pose cam = orbit_camera(distance, elevation);
  std::vector<Pose> out;
  for (std::size_t i = 0; i < frames; ++i) out.push_back(cam * Pose(rot_y(step * double(i)), Vec3::Zero()));
  return out;
}

/// Object rotating about a tilted axis while drifting slightly.
inline std::vector<Pose> tumble_trajectory(std::size_t frames, double step, double distance, double elevation) {
  const Pose cam = orbit_camera(distance, elevation);
  const Vec3 axis = Vec3(0.3, 1.0, 0.2).normalized();
  std::vector<Pose> out;
  for (std::size_t i = 0; i < frames; ++i) {
    const double a = step * double(i);
    const Vec3 drift(0.01 * std::sin(0.05 * double(i)), 0.005 * std::sin(0.08 * double(i)), 0.0);
    out.push_back(cam * Pose(exp_so3(a * axis), drift));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Uniform-grid nearest-neighbour index over a fixed point set.
class PointGrid {
 public:
  explicit PointGrid(const std::vector<Vec3>& points) : points_(points) {
    if (points_.empty()) throw Error(ErrorCode::kEmptySet, "nearest-neighbour index over no points");
    Aabb box;
    for (const auto& p : points_) box.extend(p);
    lo_ = box.min;
    const double span = std::max(box.extent().maxCoeff(), 1e-9);
    cell_ = span / std::max(1.0, std::cbrt(double(points_.size()) / 2.0));
    for (std::size_t i = 0; i < points_.size(); ++i) cells_[key(cell_of(points_[i]))].push_back(std::uint32_t(i));
  }

  /// Distance from `q` to the closest indexed point.
  double nearest(const Vec3& q) const {
    const auto c = cell_of(q);
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r <= kMaxRings; ++r) {
      // Anything in ring r or beyond is at least (r - 1) cells away.
      if (std::isfinite(best) && (r - 1) * cell_ > std::sqrt(best)) return std::sqrt(best);
      for (int dz = -r; dz <= r; ++dz)
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
            if (it == cells_.end()) continue;
            for (auto idx : it->second) best = std::min(best, (points_[idx] - q).squaredNorm());
          }
    }
    // Far from the indexed set: a linear scan is cheaper than more rings.
    for (const auto& p : points_) best = std::min(best, (p - q).squaredNorm());
    return std::sqrt(best);
  }

 private:
  static constexpr int kMaxRings = 6;

  std::array<int, 3> cell_of(const Vec3& p) const {
    const Vec3 f = (p - lo_) / cell_;
    return {int(std::floor(f.x())), int(std::floor(f.y())), int(std::floor(f.z()))};
  }
  static std::uint64_t key(const std::array<int, 3>& c) {
    auto u = [](int v) { return std::uint64_t(std::uint32_t(v + (1 << 20))) & 0x1FFFFF; };
    return (u(c[0]) << 42) | (u(c[1]) << 21) | u(c[2]);
  }

  std::vector<Vec3> points_;
  Vec3 lo_;
  double cell_ = 1;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

/// Mean distance between corresponding model points under the two poses.
inline double add_metric(const Pose& gt, const Pose& est, const std::vector<Vec3>& pts) {
  if (pts.empty()) throw Error(ErrorCode::kEmptySet, "ADD over no points");
  double sum = 0;
  for (const auto& p : pts) sum += (gt * p - est * p).norm();
  return sum / double(pts.size());
}

/// Mean closest-point distance from gt-transformed to est-transformed points.
inline double adds_metric(const Pose& gt, const Pose& est, const std::vector<Vec3>& pts) {
  if (pts.empty()) throw Error(ErrorCode::kEmptySet, "ADD-S over no points");
  std::vector<Vec3> moved;
  moved.reserve(pts.size());
  for (const auto& p : pts) moved.push_back(est * p);
  const PointGrid grid(moved);
  double sum = 0;
  for (const auto& p : pts) sum += grid.nearest(gt * p);
  return sum / double(pts.size());
}

/// Exact area under the accuracy-vs-threshold step curve on [0, max], in percent.
inline double auc(const std::vector<double>& errors, double max_threshold = 0.1) {
  if (errors.empty()) throw Error(ErrorCode::kEmptySet, "AUC of no errors");
  if (!(max_threshold > 0)) throw Error(ErrorCode::kConfig, "AUC threshold must be positive");
  double sum = 0;
  for (double e : errors) sum += std::max(0.0, max_threshold - std::max(0.0, e));
  return 100.0 * sum / (max_threshold * double(errors.size()));
}

/// Mean nearest-neighbour distance between surface samples, in centimeters.
/// Both directions are averaged unless `one_directional` (reconstructed → gt only).
inline double chamfer(const TriangleMesh& reconstructed, const TriangleMesh& gt, std::size_t samples = 10000,
                      bool one_directional = false, std::uint64_t seed = 17) {
  if (reconstructed.empty() || gt.empty()) throw Error(ErrorCode::kEmptyMesh, "chamfer of an empty mesh");
  const auto a = sample_surface(reconstructed, samples, seed);
  const auto b = sample_surface(gt, samples, seed + 1);
  auto one_way = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    const PointGrid grid(to);
    double s = 0;
    for (const auto& p : from) s += grid.nearest(p);
    return s / double(from.size());
  };
  const double ab = one_way(a, b);
  if (one_directional) return 100.0 * ab;
  return 100.0 * 0.5 * (ab + one_way(b, a));
}

struct FrameMetric {
  int frame_id = 0;
  double add = 0;
  double adds = 0;
};

struct MetricReport {
  double add_auc = 0;
  double adds_auc = 0;
  std::optional<double> chamfer_cm;
  std::vector<FrameMetric> per_frame;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["add_auc"] = add_auc;
    j["adds_auc"] = adds_auc;
    j["chamfer_cm"] = chamfer_cm ? nlohmann::json(*chamfer_cm) : nlohmann::json(nullptr);
    auto rows = nlohmann::json::array();
    for (const auto& f : per_frame) rows.push_back({{"frame_id", f.frame_id}, {"add", f.add}, {"adds", f.adds}});
    j["per_frame"] = rows;
    return j;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "frame_id,add,adds\n";
    for (const auto& f : per_frame) out << f.frame_id << "," << f.add << "," << f.adds << "\n";
    return out.str();
  }
};

/// Frame-aligned pose evaluation; `model_points` are object-frame samples of
/// the ground-truth surface.
inline MetricReport evaluate_poses(const std::vector<Pose>& estimated, const std::vector<Pose>& gt,
                                   const std::vector<Vec3>& model_points, double max_threshold = 0.1) {
  if (estimated.size() != gt.size()) {
    throw Error(ErrorCode::kAlignment, "trajectory has " + std::to_string(estimated.size()) + " frames, ground truth " +
                                           std::to_string(gt.size()));
  }
  MetricReport r;
  std::vector<double> add, adds;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double a = add_metric(gt[i], estimated[i], model_points);
    const double s = adds_metric(gt[i], estimated[i], model_points);
    add.push_back(a);
    adds.push_back(s);
    r.per_frame.push_back({int(i), a, s});
  }
  r.add_auc = auc(add, max_threshold);
  r.adds_auc = auc(adds, max_threshold);
  return r;
}

}  // namespace seenfuse
