#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "seenfuse/completion.hpp"
#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/mesh.hpp"
#include "seenfuse/model.hpp"
#include "seenfuse/pose.hpp"
#include "seenfuse/raster.hpp"

namespace seenfuse {

/// An externally generated mesh plus the single image it was generated from.
/// `assumed_reference_pose` is the object-to-camera pose of that image.
struct GeneratedModelInput {
  TriangleMesh mesh;
  ColorImage reference_image;
  MaskImage reference_mask;
  Pose assumed_reference_pose;
  Intrinsics k;

  void check() const {
    if (mesh.empty()) throw Error(ErrorCode::kIngest, "generated mesh is empty");
    mesh.check();
    if (boundary_edge_fraction(mesh) > 0.02) throw Error(ErrorCode::kIngest, "generated mesh has > 2% boundary edges");
    k.check();
    if (!reference_mask.same_shape(k.width, k.height)) {
      throw Error(ErrorCode::kIngest, "reference mask does not match the intrinsics resolution");
    }
  }
};

struct GeneratedInit {
  HybridModel model;
  bool degenerate = false;  // nothing labeled certain
};

inline double generated_visibility_eps(const TriangleMesh& mesh) { return std::max(1e-4, 0.5 * median_edge_length(mesh)); }

/// Labels the part of the mesh seen from the reference pose inside the
/// reference mask as certain; everything else is uncertain.
inline GeneratedInit init_generated_model(const GeneratedModelInput& in) {
  in.check();
  GeneratedInit out;
  HybridModel& m = out.model;
  m.mesh = in.mesh;
  m.provenance = Provenance::kFromGenerated;
  m.visibility_eps = generated_visibility_eps(in.mesh);
  const auto vis = vertex_visibility(m.mesh, in.assumed_reference_pose, in.k, &in.reference_mask, m.visibility_eps);
  m.uncertain.resize(vis.size());
  for (std::size_t i = 0; i < vis.size(); ++i) m.uncertain[i] = !vis[i];
  m.label_poses = {in.assumed_reference_pose};
  m.finalize();
  out.degenerate = m.certain_count() == 0;
  return out;
}

/// Same model scaled uniformly about the object origin.
inline HybridModel scaled_model(const HybridModel& m, double factor) {
  HybridModel out = m;
  out.mesh = scaled(m.mesh, factor);
  out.visibility_eps = std::max(1e-4, m.visibility_eps * factor);
  out.finalize();
  return out;
}

struct CoarseScale {
  HybridModel model;
  double length = 0;  // L: farthest pair of the masked back-projection
  double factor = 1;
};

/// Scales the model so its diameter equals the extent of the observed object.
inline CoarseScale coarse_scale(const HybridModel& model, const RgbdFrame& frame, const Intrinsics& k) {
  if (model.mesh.empty()) throw Error(ErrorCode::kEmptyModel, "coarse scaling an empty model");
  std::vector<Vec3> pts;
  for (int y = 0; y < frame.depth.height; ++y)
    for (int x = 0; x < frame.depth.width; ++x)
      if (frame.mask(x, y) && frame.depth(x, y) > 0) pts.push_back(back_project(x, y, frame.depth(x, y), k));
  if (pts.size() < 2) throw Error(ErrorCode::kDegenerateObservation, "coarse scale needs >= 2 masked depth pixels");
  CoarseScale out;
  out.length = point_set_diameter(pts);
  const double diameter = point_set_diameter(model.mesh.vertices);
  if (!(out.length > 0) || !(diameter > 0)) throw Error(ErrorCode::kDegenerateObservation, "zero object extent");
  out.factor = out.length / diameter;
  out.model = scaled_model(model, out.factor);
  return out;
}

struct RescaleConfig {
  int n_scales = 11;          // |S|
  double span = 0.2;          // S = center * [1 - span, 1 + span]
  double shrink = 0.5;        // span multiplier per iteration
  int n_view = 5;             // reference direction plus tilted views
  int n_inplane = 24;
  int iterations = 3;
  double tilt = deg2rad(25.0);

  void check() const {
    if (n_scales < 1 || n_view < 1 || n_view > 5 || n_inplane < 1 || iterations < 1) {
      throw Error(ErrorCode::kConfig, "rescale counts out of range");
    }
    if (!(span >= 0 && span < 1) || !(shrink > 0 && shrink <= 1)) throw Error(ErrorCode::kConfig, "rescale span out of range");
  }

  /// Sorted, strictly positive factors centered on `center`.
  std::vector<double> factors(double center, double s) const {
    std::vector<double> out;
    for (int i = 0; i < n_scales; ++i) {
      const double u = n_scales == 1 ? 0.0 : -1.0 + 2.0 * i / (n_scales - 1);
      out.push_back(center * (1.0 + s * u));
    }
    return out;
  }
};

/// Rotations around the reference orientation: the reference itself and up to
/// four tilts about the camera x/y axes, each combined with in-plane rolls.
inline std::vector<Mat3> rescale_rotations(const Mat3& reference, const RescaleConfig& cfg) {
  const Mat3 tilts[5] = {Mat3::Identity(), rot_x(cfg.tilt), rot_x(-cfg.tilt), rot_y(cfg.tilt), rot_y(-cfg.tilt)};
  std::vector<Mat3> out;
  for (int v = 0; v < cfg.n_view; ++v)
    for (int j = 0; j < cfg.n_inplane; ++j) out.push_back(rot_z(2.0 * kPi * j / cfg.n_inplane) * tilts[v] * reference);
  return out;
}

struct FineScale {
  HybridModel model;  // rescaled model
  ScoredPose pose;    // best pose for the frame under that model
  double factor = 1;  // applied on top of the input model
  bool valid = false;
  std::vector<double> winners;  // winning factor after each iteration
};

/// Joint scale and pose search: per iteration, every factor on the grid is
/// tried with all rotation hypotheses (refined and scored), the grid is then
/// re-centered on the winner and its span shrunk.
inline FineScale fine_scale(const HybridModel& model, const RgbdFrame& frame, const Intrinsics& k,
                            const Mat3& reference_rotation, const RescaleConfig& cfg, const PoseConfig& pose_cfg) {
  cfg.check();
  const Vec3 t = init_translation(frame.depth, frame.mask, k);
  const auto rotations = rescale_rotations(reference_rotation, cfg);
  FineScale out;
  double center = 1.0, span = cfg.span;
  ScoredPose best_overall;
  bool any = false;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto factors = cfg.factors(center, span);
    std::vector<ScoredPose> scored;
    for (std::size_t si = 0; si < factors.size(); ++si) {
      const HybridModel m = scaled_model(model, factors[si]);
      for (std::size_t ri = 0; ri < rotations.size(); ++ri) {
        const auto refined = refine_pose(m, frame, k, Pose(rotations[ri], t), pose_cfg.hypothesis.refine_iters_first, pose_cfg.icp);
        ScoredPose s = score_pose(m, frame, k, refined.pose, pose_cfg);
        s.index = int(si * rotations.size() + ri);
        scored.push_back(s);
      }
    }
    const ScoredPose win = select_scored(scored);
    const double factor = factors[std::size_t(win.index) / rotations.size()];
    out.winners.push_back(factor);
    // Keep the best result seen so far; the grid always contains the old center.
    if (!any || (win.valid && (!best_overall.valid || win.score > best_overall.score)) ||
        (!win.valid && !best_overall.valid && win.seen_iou > best_overall.seen_iou)) {
      best_overall = win;
      out.factor = factor;
      any = true;
    }
    center = out.factor;
    span *= cfg.shrink;
  }
  out.pose = best_overall;
  out.valid = best_overall.valid;
  // Without a single valid hypothesis the input scale is kept.
  if (!out.valid) out.factor = 1.0;
  out.model = scaled_model(model, out.factor);
  return out;
}

/// Renders `n` views spread over the sphere (farthest-point subset of a
/// level-2 icosphere) at 2.5 mesh diameters from the mesh center.
inline AugmentationSet render_augmentation(const HybridModel& model, const Intrinsics& k, std::size_t n = 24) {
  if (model.mesh.empty()) throw Error(ErrorCode::kEmptyModel, "augmenting an empty model");
  k.check();
  const auto sphere = icosphere_viewpoints(2);
  const std::size_t total = sphere.size();
  n = std::min(n, total);
  std::vector<Vec3> dirs(sphere.positions.begin(), sphere.positions.end());
  for (auto& d : dirs) d.normalize();
  std::vector<std::size_t> picked{0};
  std::vector<double> closest(total);
  for (std::size_t i = 0; i < total; ++i) closest[i] = (dirs[i] - dirs[0]).norm();
  while (picked.size() < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < total; ++i)
      if (closest[i] > closest[best]) best = i;
    picked.push_back(best);
    for (std::size_t i = 0; i < total; ++i) closest[i] = std::min(closest[i], (dirs[i] - dirs[best]).norm());
  }
  const Aabb box = bounds(model.mesh.vertices);
  const Vec3 center = 0.5 * (box.min + box.max);
  const double distance = 2.5 * point_set_diameter(model.mesh.vertices);
  AugmentationSet aug;
  for (std::size_t i : picked) {
    const Pose pose = look_at_pose(center + distance * dirs[i], center);
    const auto r = rasterize(model.mesh, pose, k, RenderFlags{true, false});
    aug.frames.push_back({{r.color, r.depth, r.mask}, pose, k});
    aug.active.push_back(1);
  }
  return aug;
}

/// Deactivates active frames whose mask overlaps the current model's certain
/// rendering by more than `max_overlap`. Returns how many were deactivated.
inline std::size_t filter_augmentation(AugmentationSet& aug, const HybridModel& current, double max_overlap = 0.3) {
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < aug.frames.size(); ++i) {
    if (!aug.active[i]) continue;
    const auto& f = aug.frames[i];
    const auto r = rasterize(current.mesh, current.uncertain, f.pose, f.k, RenderFlags{false, false});
    std::size_t mask = 0, certain = 0;
    for (std::size_t p = 0; p < r.mask.size(); ++p) {
      if (!f.frame.mask.pixels[p]) continue;
      ++mask;
      certain += r.mask.pixels[p] && !r.uncertainty.pixels[p];
    }
    if (mask > 0 && double(certain) / double(mask) > max_overlap) {
      aug.active[i] = 0;
      ++dropped;
    }
  }
  return dropped;
}

inline bool should_switch(const Pose& initial, const Pose& current, const Thresholds& th) {
  return geodesic_distance(initial.rotation, current.rotation) > th.t_gen;
}

}  // namespace seenfuse
