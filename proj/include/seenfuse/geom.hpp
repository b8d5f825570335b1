#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <utility>
#include <vector>

#include "seenfuse/error.hpp"

namespace seenfuse {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

/// Rotation by |w| radians about w.
inline Mat3 exp_so3(const Vec3& w) {
  const double angle = w.norm();
  if (angle < 1e-15) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

/// Nearest rotation in the Frobenius sense (polar decomposition via SVD).
inline Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return r;
}

inline bool is_rotation(const Mat3& r, double tol = 1e-4) {
  if (!r.allFinite()) return false;
  if (std::abs(r.determinant() - 1.0) > tol) return false;
  return ((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol;
}

inline void check_rotation(const Mat3& r, const char* what = "rotation") {
  if (!is_rotation(r)) throw Error(ErrorCode::kInvalidRotation, std::string(what) + " is not orthonormal with det +1");
}

/// Angle of the relative rotation a^T b, in [0, pi].
inline double geodesic_distance(const Mat3& a, const Mat3& b) {
  check_rotation(a, "first argument");
  check_rotation(b, "second argument");
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

/// Rigid object-to-camera transform: x_cam = rotation * x_obj + translation.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Mat3& r, const Vec3& t) : rotation(r), translation(t) {}

  static Pose identity() { return {}; }

  static Pose from_matrix(const Mat4& m) {
    const Mat3 r = m.topLeftCorner<3, 3>();
    check_rotation(r);
    return {r, m.topRightCorner<3, 1>()};
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  /// (a * b)(x) = a(b(x)).
  Pose operator*(const Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  Pose inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  Pose normalized() const { return {orthonormalize(rotation), translation}; }

  bool operator==(const Pose& other) const {
    return rotation == other.rotation && translation == other.translation;
  }
};

/// Pinhole camera. Pixel centers sit at integer coordinates.
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
  }

  void check() const {
    if (!valid()) throw Error(ErrorCode::kConfig, "intrinsics violate fx,fy > 0 and 0 <= c < size");
  }

  bool operator==(const Intrinsics&) const = default;
};

struct PixelDepth {
  double u = 0, v = 0, depth = 0;
};

inline PixelDepth project(const Vec3& p, const Intrinsics& k) {
  if (!(p.z() > 0)) throw Error(ErrorCode::kBehindCamera, "point has z <= 0");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy, p.z()};
}

inline Vec3 back_project(double u, double v, double depth, const Intrinsics& k) {
  return {(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth};
}

/// Camera-to-world rotation whose z axis looks from eye toward target.
/// Up hint is world +y, falling back to +x when looking along y.
inline Mat3 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  Vec3 up = Vec3::UnitY();
  if (std::abs(std::abs(z.dot(up)) - 1.0) < 1e-6) up = Vec3::UnitX();
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

/// Object-to-camera pose for a camera at `eye` looking at `target` (object frame).
inline Pose look_at_pose(const Vec3& eye, const Vec3& target) {
  const Mat3 cam_to_obj = look_at(eye, target);
  const Mat3 r = cam_to_obj.transpose();
  return {r, -(r * eye)};
}

namespace detail {

inline std::vector<std::array<int, 3>> icosahedron_faces() {
  return {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
          {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
          {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
}

}  // namespace detail

/// Unit-sphere icosphere. The 12 icosahedron vertices come first; each
/// subdivision appends one midpoint per edge in sorted (i, j) order.
struct Icosphere {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

inline Icosphere make_icosphere(int level) {
  if (level < 0 || level > 5) throw Error(ErrorCode::kConfig, "icosphere level must be in [0, 5]");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Icosphere s;
  for (const auto& p : {Vec3(-1, t, 0), Vec3(1, t, 0), Vec3(-1, -t, 0), Vec3(1, -t, 0), Vec3(0, -1, t), Vec3(0, 1, t),
                        Vec3(0, -1, -t), Vec3(0, 1, -t), Vec3(t, 0, -1), Vec3(t, 0, 1), Vec3(-t, 0, -1),
                        Vec3(-t, 0, 1)}) {
    s.vertices.push_back(p.normalized());
  }
  s.faces = detail::icosahedron_faces();
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    for (const auto& f : s.faces) {
      for (int e = 0; e < 3; ++e) {
        int a = f[e], b = f[(e + 1) % 3];
        midpoint.emplace(std::minmax(a, b), -1);
      }
    }
    for (auto& [edge, idx] : midpoint) {
      idx = int(s.vertices.size());
      s.vertices.push_back((s.vertices[edge.first] + s.vertices[edge.second]).normalized());
    }
    std::vector<std::array<int, 3>> next;
    next.reserve(s.faces.size() * 4);
    for (const auto& f : s.faces) {
      const int ab = midpoint.at(std::minmax(f[0], f[1]));
      const int bc = midpoint.at(std::minmax(f[1], f[2]));
      const int ca = midpoint.at(std::minmax(f[2], f[0]));
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    s.faces = std::move(next);
  }
  return s;
}

enum class ViewpointSource { kIcosphereSubdivision, kExplicit };

/// Camera orientations around an object. `rotations[i]` is camera-to-object,
/// with the optical axis (third column) pointing from `positions[i]` to the target.
struct ViewpointSet {
  std::vector<Mat3> rotations;
  std::vector<Vec3> positions;
  ViewpointSource source = ViewpointSource::kExplicit;

  std::size_t size() const { return rotations.size(); }
};

inline ViewpointSet viewpoints_from_directions(const std::vector<Vec3>& unit_dirs, const Vec3& target_center,
                                               ViewpointSource source = ViewpointSource::kExplicit) {
  ViewpointSet set;
  set.source = source;
  for (const auto& d : unit_dirs) {
    const Vec3 eye = target_center + d;
    set.positions.push_back(eye);
    set.rotations.push_back(look_at(eye, target_center));
  }
  return set;
}

inline ViewpointSet icosphere_viewpoints(int subdivision_level, const Vec3& target_center = Vec3::Zero()) {
  if (subdivision_level < 0 || subdivision_level > 3) {
    throw Error(ErrorCode::kConfig, "icosphere viewpoint level must be in [0, 3]");
  }
  return viewpoints_from_directions(make_icosphere(subdivision_level).vertices, target_center,
                                    ViewpointSource::kIcosphereSubdivision);
}

/// n rotations about the optical axis, uniformly spaced in [0, 2pi), first = identity.
inline std::vector<Mat3> inplane_rotations(int n) {
  if (n < 1) throw Error(ErrorCode::kEmptySet, "in-plane rotation count must be >= 1");
  std::vector<Mat3> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) out.push_back(i == 0 ? Mat3::Identity() : rot_z(2.0 * kPi * i / n));
  return out;
}

}  // namespace seenfuse
