#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"
#include "seenfuse/mesh.hpp"

namespace seenfuse {

/// Rendered maps of a mesh at one pose. `normal` holds camera-frame face
/// normals and `face` the index of the visible face (-1 = background).
struct RenderOutput {
  ColorImage color;
  DepthImage depth;
  MaskImage mask;
  MaskImage uncertainty;
  Image<Eigen::Vector3f> normal;
  Image<std::int32_t> face;

  bool operator==(const RenderOutput& o) const {
    return color == o.color && depth == o.depth && mask == o.mask && uncertainty == o.uncertainty &&
           normal == o.normal && face == o.face;
  }
};

namespace detail {

inline constexpr double kNearPlane = 1e-4;

inline double edge_fn(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

struct ProjectedMesh {
  std::vector<Vec3> cam;
  std::vector<double> sx, sy, inv_z;
  std::vector<std::uint8_t> in_front;
};

inline ProjectedMesh project_mesh(const TriangleMesh& mesh, const Pose& pose, const Intrinsics& k) {
  ProjectedMesh p;
  const std::size_t n = mesh.vertices.size();
  p.cam.resize(n);
  p.sx.resize(n);
  p.sy.resize(n);
  p.inv_z.resize(n);
  p.in_front.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 c = pose * mesh.vertices[i];
    p.cam[i] = c;
    p.in_front[i] = c.z() > kNearPlane;
    if (p.in_front[i]) {
      p.inv_z[i] = 1.0 / c.z();
      p.sx[i] = k.fx * c.x() * p.inv_z[i] + k.cx;
      p.sy[i] = k.fy * c.y() * p.inv_z[i] + k.cy;
    }
  }
  return p;
}

/// Z-buffer pass: writes depth and visible face index. Faces with any
/// vertex behind the near plane are dropped (no clipping).
inline void zbuffer_pass(const TriangleMesh& mesh, const ProjectedMesh& p, const Intrinsics& k, DepthImage& depth,
                         Image<std::int32_t>& face_id) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> zbuf(std::size_t(k.width) * std::size_t(k.height), inf);
  face_id = Image<std::int32_t>(k.width, k.height, -1);
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const Face& f = mesh.faces[fi];
    if (!p.in_front[f[0]] || !p.in_front[f[1]] || !p.in_front[f[2]]) continue;
    const double x0 = p.sx[f[0]], y0 = p.sy[f[0]], x1 = p.sx[f[1]], y1 = p.sy[f[1]], x2 = p.sx[f[2]], y2 = p.sy[f[2]];
    const double area = edge_fn(x0, y0, x1, y1, x2, y2);
    if (std::abs(area) < 1e-12) continue;
    const int xmin = std::max(0, int(std::ceil(std::min({x0, x1, x2}))));
    const int xmax = std::min(k.width - 1, int(std::floor(std::max({x0, x1, x2}))));
    const int ymin = std::max(0, int(std::ceil(std::min({y0, y1, y2}))));
    const int ymax = std::min(k.height - 1, int(std::floor(std::max({y0, y1, y2}))));
    if (xmin > xmax || ymin > ymax) continue;
    const double inv_area = 1.0 / area;
    const double iz0 = p.inv_z[f[0]], iz1 = p.inv_z[f[1]], iz2 = p.inv_z[f[2]];
    for (int y = ymin; y <= ymax; ++y) {
      for (int x = xmin; x <= xmax; ++x) {
        const double b0 = edge_fn(x1, y1, x2, y2, x, y) * inv_area;
        const double b1 = edge_fn(x2, y2, x0, y0, x, y) * inv_area;
        const double b2 = 1.0 - b0 - b1;
        if (b0 < 0 || b1 < 0 || b2 < 0) continue;
        const double z = 1.0 / (b0 * iz0 + b1 * iz1 + b2 * iz2);
        double& zb = zbuf[std::size_t(y) * k.width + x];
        if (z < zb) {
          zb = z;
          face_id(x, y) = std::int32_t(fi);
        }
      }
    }
  }
  depth = DepthImage(k.width, k.height, 0.0f);
  for (std::size_t i = 0; i < zbuf.size(); ++i) {
    if (face_id.pixels[i] >= 0) depth.pixels[i] = float(zbuf[i]);
  }
}

}  // namespace detail

/// What to fill beyond depth/mask/face. Skipping color and normals saves work
/// in inner loops that only need silhouettes.
struct RenderFlags {
  bool color = true;
  bool normals = true;
};

/// Z-buffered perspective rasterization. A pixel is uncertain iff at least two
/// of the covering face's vertices are uncertain.
inline RenderOutput rasterize(const TriangleMesh& mesh, std::span<const std::uint8_t> uncertain, const Pose& pose,
                              const Intrinsics& k, RenderFlags flags = {}) {
  if (mesh.empty()) throw Error(ErrorCode::kEmptyModel, "cannot rasterize an empty mesh");
  k.check();
  const auto p = detail::project_mesh(mesh, pose, k);
  RenderOutput out;
  detail::zbuffer_pass(mesh, p, k, out.depth, out.face);
  out.mask = MaskImage(k.width, k.height, 0);
  out.uncertainty = MaskImage(k.width, k.height, 0);
  if (flags.color) out.color = ColorImage(k.width, k.height, Rgb::Zero());
  if (flags.normals) out.normal = Image<Eigen::Vector3f>(k.width, k.height, Eigen::Vector3f::Zero());
  std::vector<std::int8_t> face_uncertain;
  if (!uncertain.empty()) {
    face_uncertain.resize(mesh.faces.size());
    for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
      const Face& f = mesh.faces[fi];
      face_uncertain[fi] = (int(uncertain[f[0]] != 0) + int(uncertain[f[1]] != 0) + int(uncertain[f[2]] != 0)) >= 2;
    }
  }
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const std::int32_t fi = out.face(x, y);
      if (fi < 0) continue;
      out.mask(x, y) = 1;
      if (!face_uncertain.empty()) out.uncertainty(x, y) = std::uint8_t(face_uncertain[std::size_t(fi)]);
      const Face& f = mesh.faces[std::size_t(fi)];
      if (flags.normals) {
        const Vec3 n = (p.cam[f[1]] - p.cam[f[0]]).cross(p.cam[f[2]] - p.cam[f[0]]);
        const double len = n.norm();
        out.normal(x, y) = len > 0 ? Eigen::Vector3f((n / len).cast<float>()) : Eigen::Vector3f::Zero();
      }
      if (flags.color) {
        const double x0 = p.sx[f[0]], y0 = p.sy[f[0]], x1 = p.sx[f[1]], y1 = p.sy[f[1]], x2 = p.sx[f[2]],
                     y2 = p.sy[f[2]];
        const double inv_area = 1.0 / detail::edge_fn(x0, y0, x1, y1, x2, y2);
        const double b0 = detail::edge_fn(x1, y1, x2, y2, x, y) * inv_area;
        const double b1 = detail::edge_fn(x2, y2, x0, y0, x, y) * inv_area;
        const double b2 = 1.0 - b0 - b1;
        const double w0 = b0 * p.inv_z[f[0]], w1 = b1 * p.inv_z[f[1]], w2 = b2 * p.inv_z[f[2]];
        const double ws = w0 + w1 + w2;
        const Eigen::Vector3d c = (w0 * mesh.color(f[0]).cast<double>() + w1 * mesh.color(f[1]).cast<double>() +
                                   w2 * mesh.color(f[2]).cast<double>()) /
                                  ws;
        out.color(x, y) = c.cast<float>();
      }
    }
  }
  return out;
}

inline RenderOutput rasterize(const TriangleMesh& mesh, const Pose& pose, const Intrinsics& k, RenderFlags flags = {}) {
  return rasterize(mesh, std::span<const std::uint8_t>{}, pose, k, flags);
}

/// Ray from the camera center through `target` (camera frame); returns the
/// ray parameter of the hit (target sits at t = 1), or a negative value on miss.
inline double ray_triangle_param(const Vec3& target, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 pv = target.cross(e2);
  const double det = e1.dot(pv);
  if (std::abs(det) < 1e-18) return -1;
  const double inv = 1.0 / det;
  const Vec3 tv = -a;
  // A small barycentric slack so rays through shared edges hit at least one face.
  constexpr double slack = 1e-9;
  const double u = tv.dot(pv) * inv;
  if (u < -slack || u > 1 + slack) return -1;
  const Vec3 qv = tv.cross(e1);
  const double v = target.dot(qv) * inv;
  if (v < -slack || u + v > 1 + slack) return -1;
  return e2.dot(qv) * inv;
}

/// Per-vertex visibility from one camera. A vertex is visible iff it projects
/// into the image (and into `reference_mask` when given) and no face whose
/// projection covers it hits the camera ray more than `eps` in front of it.
/// Faces are binned by their screen bounding boxes, so slivers that cover no
/// pixel center still occlude.
inline std::vector<std::uint8_t> vertex_visibility(const TriangleMesh& mesh, const Pose& pose, const Intrinsics& k,
                                                   const MaskImage* reference_mask = nullptr, double eps = 1e-4) {
  if (mesh.empty()) throw Error(ErrorCode::kEmptyMesh, "visibility of an empty mesh");
  k.check();
  if (reference_mask && !reference_mask->same_shape(k.width, k.height)) {
    throw Error(ErrorCode::kShapeMismatch, "reference mask does not match intrinsics");
  }
  const auto p = detail::project_mesh(mesh, pose, k);
  const std::size_t cells = std::size_t(k.width) * std::size_t(k.height);
  // Screen-space bins (CSR layout): cell (x, y) holds faces whose bounding box
  // overlaps pixel x +- 0.5, y +- 0.5.
  struct Range {
    int x0, x1, y0, y1;
  };
  std::vector<Range> ranges(mesh.faces.size(), Range{1, 0, 1, 0});
  std::vector<std::uint32_t> start(cells + 1, 0);
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const Face& f = mesh.faces[fi];
    if (!p.in_front[f[0]] || !p.in_front[f[1]] || !p.in_front[f[2]]) continue;
    const double xmin = std::min({p.sx[f[0]], p.sx[f[1]], p.sx[f[2]]});
    const double xmax = std::max({p.sx[f[0]], p.sx[f[1]], p.sx[f[2]]});
    const double ymin = std::min({p.sy[f[0]], p.sy[f[1]], p.sy[f[2]]});
    const double ymax = std::max({p.sy[f[0]], p.sy[f[1]], p.sy[f[2]]});
    if (xmax < -0.5 || ymax < -0.5 || xmin > k.width - 0.5 || ymin > k.height - 0.5) continue;
    Range r{std::max(0, int(std::lround(xmin))), std::min(k.width - 1, int(std::lround(xmax))),
            std::max(0, int(std::lround(ymin))), std::min(k.height - 1, int(std::lround(ymax)))};
    ranges[fi] = r;
    for (int y = r.y0; y <= r.y1; ++y)
      for (int x = r.x0; x <= r.x1; ++x) ++start[std::size_t(y) * std::size_t(k.width) + std::size_t(x) + 1];
  }
  for (std::size_t c = 0; c < cells; ++c) start[c + 1] += start[c];
  std::vector<std::uint32_t> fill(start.begin(), start.end() - 1);
  std::vector<std::uint32_t> bins(start[cells]);
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const Range& r = ranges[fi];
    for (int y = r.y0; y <= r.y1; ++y)
      for (int x = r.x0; x <= r.x1; ++x) bins[fill[std::size_t(y) * std::size_t(k.width) + std::size_t(x)]++] = std::uint32_t(fi);
  }
  std::vector<std::uint8_t> visible(mesh.vertices.size(), 0);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    if (!p.in_front[i]) continue;
    const int px = int(std::lround(p.sx[i])), py = int(std::lround(p.sy[i]));
    if (px < 0 || py < 0 || px >= k.width || py >= k.height) continue;
    if (reference_mask && !(*reference_mask)(px, py)) continue;
    const Vec3& v = p.cam[i];
    const double t_limit = 1.0 - eps / v.z();
    const std::size_t cell = std::size_t(py) * std::size_t(k.width) + std::size_t(px);
    bool occluded = false;
    for (std::uint32_t b = start[cell]; b < start[cell + 1] && !occluded; ++b) {
      const Face& f = mesh.faces[bins[b]];
      if (f[0] == int(i) || f[1] == int(i) || f[2] == int(i)) continue;
      const double t = ray_triangle_param(v, p.cam[f[0]], p.cam[f[1]], p.cam[f[2]]);
      occluded = t > 0 && t < t_limit;
    }
    visible[i] = !occluded;
  }
  return visible;
}

}  // namespace seenfuse
