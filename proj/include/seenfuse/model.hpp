#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"
#include "seenfuse/mesh.hpp"
#include "seenfuse/raster.hpp"
#include "seenfuse/volume.hpp"

namespace seenfuse {

enum class Provenance { kFromReferences, kFromGenerated, kRebuilt };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::kFromReferences: return "from_references";
    case Provenance::kFromGenerated: return "from_generated";
    case Provenance::kRebuilt: return "rebuilt";
  }
  return "unknown";
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "from_references") return Provenance::kFromReferences;
  if (s == "from_generated") return Provenance::kFromGenerated;
  if (s == "rebuilt") return Provenance::kRebuilt;
  throw Error(ErrorCode::kIngest, "unknown provenance '" + s + "'");
}

/// An RGBD frame with its object→camera pose and camera.
struct PosedFrame {
  RgbdFrame frame;
  Pose pose;
  Intrinsics k;
};

using ReferenceSet = std::vector<PosedFrame>;

/// Mesh plus per-vertex binary uncertainty (1 = never seen by a real view).
/// Built once and never mutated; rebuilds produce a new instance.
struct HybridModel {
  TriangleMesh mesh;
  std::vector<std::uint8_t> uncertain;
  Provenance provenance = Provenance::kFromReferences;
  int build_stamp = 0;
  /// Occlusion tolerance used when labeling vertices of this mesh.
  double visibility_eps = 1e-4;
  /// Object-frame unit face normals, filled by `finalize`.
  std::vector<Vec3> face_normals;
  /// Poses of the real views that labeled the model.
  std::vector<Pose> label_poses;

  void finalize() {
    mesh.check();
    if (uncertain.size() != mesh.vertices.size()) {
      throw Error(ErrorCode::kShapeMismatch, "uncertainty labels do not match vertex count");
    }
    face_normals.resize(mesh.faces.size());
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
      const Face& f = mesh.faces[i];
      const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
      const double len = n.norm();
      face_normals[i] = len > 0 ? Vec3(n / len) : Vec3::Zero();
    }
  }

  std::size_t certain_count() const {
    return std::size_t(std::count(uncertain.begin(), uncertain.end(), std::uint8_t(0)));
  }
  double certain_fraction() const {
    return uncertain.empty() ? 0.0 : double(certain_count()) / double(uncertain.size());
  }
  /// Certain share of the surface, weighting each vertex by its dual area.
  double certain_area_fraction() const {
    const auto area = vertex_dual_areas(mesh);
    double total = 0, certain = 0;
    for (std::size_t i = 0; i < area.size(); ++i) {
      total += area[i];
      if (!uncertain[i]) certain += area[i];
    }
    return total > 0 ? certain / total : 0.0;
  }
};

struct VolumeConfig {
  int resolution = 128;
  double truncation = kDefaultTruncation;
  double padding = 0.02;
};

/// Object-frame points of every masked pixel with valid depth.
inline std::vector<Vec3> object_points(const PosedFrame& f) {
  std::vector<Vec3> pts;
  const Pose inv = f.pose.inverse();
  const auto& d = f.frame.depth;
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      if (f.frame.mask(x, y) && d(x, y) > 0) pts.push_back(inv * back_project(x, y, d(x, y), f.k));
  return pts;
}

/// Per-vertex OR of visibility over the labeling views (1 = uncertain).
inline std::vector<std::uint8_t> label_uncertainty(const TriangleMesh& mesh, std::span<const PosedFrame> views,
                                                   double eps) {
  std::vector<std::uint8_t> uncertain(mesh.vertices.size(), 1);
  for (const auto& v : views) {
    const auto vis = vertex_visibility(mesh, v.pose, v.k, &v.frame.mask, eps);
    for (std::size_t i = 0; i < vis.size(); ++i)
      if (vis[i]) uncertain[i] = 0;
  }
  return uncertain;
}

/// Fuses `fuse` into a fresh volume, extracts the surface and labels it with
/// the visibility from `label`. Both lists are in the object frame.
inline HybridModel fuse_and_label(std::span<const PosedFrame> fuse, std::span<const PosedFrame> label,
                                  const VolumeConfig& cfg, Provenance provenance, int build_stamp) {
  if (fuse.empty()) throw Error(ErrorCode::kNoReference, "no frames to fuse");
  std::vector<Vec3> pts;
  for (const auto& f : fuse) {
    f.frame.check_shapes();
    const auto p = object_points(f);
    pts.insert(pts.end(), p.begin(), p.end());
  }
  if (pts.empty()) throw Error(ErrorCode::kReconstructionFailure, "no valid masked depth in any fused frame");
  TsdfVolume vol = init_volume(pts, cfg.padding, cfg.resolution, cfg.truncation);
  for (const auto& f : fuse) integrate_frame(vol, f.frame, f.pose, f.k);
  HybridModel m;
  try {
    m.mesh = extract_mesh(vol);
  } catch (const Error& e) {
    throw Error(ErrorCode::kReconstructionFailure, std::string("fusion produced no surface: ") + e.what());
  }
  m.visibility_eps = std::max(1e-4, 0.5 * vol.voxel_size);
  m.uncertain = label_uncertainty(m.mesh, label, m.visibility_eps);
  m.provenance = provenance;
  m.build_stamp = build_stamp;
  for (const auto& l : label) m.label_poses.push_back(l.pose);
  m.finalize();
  return m;
}

/// Builds the initial model from posed reference views.
inline HybridModel build_model(const ReferenceSet& refs, const VolumeConfig& cfg = {}) {
  if (refs.empty()) throw Error(ErrorCode::kNoReference, "reference set is empty");
  for (const auto& r : refs) {
    if (count_nonzero(r.frame.mask) == 0) throw Error(ErrorCode::kNoReference, "reference mask is empty");
    if (!r.k.valid() || r.k.width != refs.front().k.width || r.k.height != refs.front().k.height) {
      throw Error(ErrorCode::kShapeMismatch, "references must share one resolution");
    }
  }
  return fuse_and_label(refs, refs, cfg, Provenance::kFromReferences, 0);
}

/// Share of the rendered mask that is uncertain.
inline double uncertainty_rate(const RenderOutput& r) {
  std::size_t mask = 0, unc = 0;
  for (std::size_t i = 0; i < r.mask.size(); ++i) {
    if (!r.mask.pixels[i]) continue;
    ++mask;
    unc += r.uncertainty.pixels[i] != 0;
  }
  if (mask == 0) throw Error(ErrorCode::kUndefinedRate, "uncertainty rate of an empty rendering");
  return double(unc) / double(mask);
}

/// IoU between the certain part of the rendered mask and the observed mask.
inline double seen_iou(const RenderOutput& r, const MaskImage& test_mask) {
  if (!r.mask.same_shape(test_mask)) throw Error(ErrorCode::kShapeMismatch, "rendered and test masks differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < r.mask.size(); ++i) {
    const bool seen = r.mask.pixels[i] && !r.uncertainty.pixels[i];
    const bool test = test_mask.pixels[i] != 0;
    inter += seen && test;
    uni += seen || test;
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

/// Writes `<stem>.ply` (with the uncertain vertex property) and `<stem>.json`.
inline void save_model(const std::string& ply_path, const HybridModel& m) {
  write_ply(ply_path, m.mesh, m.uncertain);
  nlohmann::json j;
  j["provenance"] = to_string(m.provenance);
  j["build_stamp"] = m.build_stamp;
  j["visibility_eps"] = m.visibility_eps;
  auto poses = nlohmann::json::array();
  for (const auto& p : m.label_poses) {
    const Mat4 mat = p.matrix();
    std::vector<double> row(16);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) row[std::size_t(r * 4 + c)] = mat(r, c);
    poses.push_back(row);
  }
  j["reference_pose_list"] = poses;
  const std::string sidecar = ply_path.substr(0, ply_path.find_last_of('.')) + ".json";
  std::ofstream out(sidecar);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + sidecar);
  out << j.dump(2) << "\n";
}

inline HybridModel load_model(const std::string& ply_path) {
  PlyContents ply = read_ply(ply_path);
  HybridModel m;
  m.mesh = std::move(ply.mesh);
  m.uncertain = ply.uncertain.empty() ? std::vector<std::uint8_t>(m.mesh.vertices.size(), 0) : ply.uncertain;
  const std::string sidecar = ply_path.substr(0, ply_path.find_last_of('.')) + ".json";
  std::ifstream in(sidecar);
  if (in) {
    try {
      const auto j = nlohmann::json::parse(in);
      m.provenance = provenance_from_string(j.value("provenance", std::string("from_references")));
      m.build_stamp = j.value("build_stamp", 0);
      m.visibility_eps = j.value("visibility_eps", 1e-4);
      for (const auto& row : j.value("reference_pose_list", nlohmann::json::array())) {
        Mat4 mat;
        for (int r = 0; r < 4; ++r)
          for (int c = 0; c < 4; ++c) mat(r, c) = row.at(std::size_t(r * 4 + c)).get<double>();
        m.label_poses.push_back(Pose::from_matrix(mat));
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kIngest, "bad model sidecar " + sidecar + ": " + e.what());
    }
  }
  m.finalize();
  return m;
}

}  // namespace seenfuse
