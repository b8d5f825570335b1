#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"
#include "seenfuse/mesh.hpp"

namespace seenfuse {

/// Truncated signed-distance + color grid. Voxel (i, j, k) is centered at
/// origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size. `tsdf` is in units of
/// the truncation distance, so it always lies in [-1, 1].
struct TsdfVolume {
  Vec3 origin = Vec3::Zero();
  double voxel_size = 0;
  std::array<int, 3> dims{0, 0, 0};
  double truncation = 0.01;
  std::vector<float> tsdf;
  std::vector<float> weight;
  std::vector<Rgb> color;

  std::size_t voxel_count() const { return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]); }
  std::size_t index(int i, int j, int k) const {
    return (std::size_t(k) * std::size_t(dims[1]) + std::size_t(j)) * std::size_t(dims[0]) + std::size_t(i);
  }
  Vec3 voxel_center(int i, int j, int k) const { return origin + voxel_size * Vec3(i + 0.5, j + 0.5, k + 0.5); }
  Vec3 upper() const { return origin + voxel_size * Vec3(dims[0], dims[1], dims[2]); }
  bool observed(std::size_t idx) const { return weight[idx] > 0; }
};

/// Default truncation distance (1 cm).
inline constexpr double kDefaultTruncation = 0.01;

/// Cubic voxels; every axis gets `resolution` voxels spanning the largest
/// padded extent, centered on the point bounds.
inline TsdfVolume init_volume(std::span<const Vec3> points, double padding, int resolution,
                              double truncation = kDefaultTruncation) {
  if (points.empty()) throw Error(ErrorCode::kNoObservation, "cannot bound an empty point set");
  if (resolution < 2) throw Error(ErrorCode::kConfig, "volume resolution must be >= 2");
  if (!(padding >= 0)) throw Error(ErrorCode::kConfig, "padding must be non-negative");
  Aabb box;
  for (const auto& p : points) box.extend(p);
  const double span = box.extent().maxCoeff() + 2.0 * padding;
  if (!(span > 0)) throw Error(ErrorCode::kNoObservation, "degenerate bounds with zero padding");
  TsdfVolume vol;
  vol.voxel_size = span / resolution;
  vol.dims = {resolution, resolution, resolution};
  vol.origin = box.center() - Vec3::Constant(0.5 * span);
  vol.truncation = truncation;
  if (truncation < 2.0 * vol.voxel_size - 1e-12) {
    throw Error(ErrorCode::kConfig, "truncation must span at least two voxels");
  }
  vol.tsdf.assign(vol.voxel_count(), 1.0f);
  vol.weight.assign(vol.voxel_count(), 0.0f);
  vol.color.assign(vol.voxel_count(), Rgb::Zero());
  return vol;
}

struct IntegrationStats {
  std::size_t updated = 0;
  std::size_t occluded = 0;
  std::size_t in_view = 0;
  bool no_op() const { return updated == 0; }
};

/// Fuses one posed RGBD frame. Only voxels projecting into the object mask
/// with valid depth are touched; voxels more than one truncation behind the
/// observed surface are skipped as occluded.
inline IntegrationStats integrate_frame(TsdfVolume& vol, const RgbdFrame& frame, const Pose& pose,
                                        const Intrinsics& k) {
  frame.check_shapes();
  if (!frame.depth.same_shape(k.width, k.height)) {
    throw Error(ErrorCode::kShapeMismatch, "frame resolution does not match intrinsics");
  }
  IntegrationStats stats;
  const double lambda = vol.truncation;
  const Vec3 dx = pose.rotation.col(0) * vol.voxel_size;
  const Vec3 dy = pose.rotation.col(1) * vol.voxel_size;
  const Vec3 dz = pose.rotation.col(2) * vol.voxel_size;
  const Vec3 base = pose * vol.voxel_center(0, 0, 0);
  const bool has_color = !frame.color.empty();
  for (int kz = 0; kz < vol.dims[2]; ++kz) {
    for (int jy = 0; jy < vol.dims[1]; ++jy) {
      Vec3 c = base + double(kz) * dz + double(jy) * dy;
      for (int ix = 0; ix < vol.dims[0]; ++ix, c += dx) {
        const double z = c.z();
        if (z <= 1e-6) continue;
        const int px = int(std::lround(k.fx * c.x() / z + k.cx));
        const int py = int(std::lround(k.fy * c.y() / z + k.cy));
        if (px < 0 || py < 0 || px >= k.width || py >= k.height) continue;
        ++stats.in_view;
        if (!frame.mask(px, py)) continue;
        const double d = frame.depth(px, py);
        if (!(d > 0)) continue;
        const double diff = d - z;
        if (diff < -lambda) {
          ++stats.occluded;
          continue;
        }
        const float sdf = float(std::min(1.0, diff / lambda));
        const std::size_t idx = vol.index(ix, jy, kz);
        const float w = vol.weight[idx];
        vol.tsdf[idx] = (vol.tsdf[idx] * w + sdf) / (w + 1.0f);
        if (has_color) vol.color[idx] = (vol.color[idx] * w + frame.color(px, py)) / (w + 1.0f);
        vol.weight[idx] = w + 1.0f;
        ++stats.updated;
      }
    }
  }
  return stats;
}

/// Grid padded by one voxel on every side (border = +1) with unobserved voxels
/// resolved: +1 when connected to the border through non-negative space, -1
/// when enclosed by observed surface.
struct ClosedField {
  std::array<int, 3> dims{0, 0, 0};  // padded
  std::vector<float> value;

  std::size_t index(int i, int j, int k) const {
    return (std::size_t(k) * std::size_t(dims[1]) + std::size_t(j)) * std::size_t(dims[0]) + std::size_t(i);
  }
  float at(int i, int j, int k) const { return value[index(i, j, k)]; }
};

inline ClosedField close_field(const TsdfVolume& vol) {
  ClosedField f;
  f.dims = {vol.dims[0] + 2, vol.dims[1] + 2, vol.dims[2] + 2};
  const std::size_t n = std::size_t(f.dims[0]) * std::size_t(f.dims[1]) * std::size_t(f.dims[2]);
  f.value.assign(n, 1.0f);
  std::vector<std::uint8_t> open(n, 1), reached(n, 0);
  for (int k = 0; k < vol.dims[2]; ++k) {
    for (int j = 0; j < vol.dims[1]; ++j) {
      for (int i = 0; i < vol.dims[0]; ++i) {
        const std::size_t src = vol.index(i, j, k), dst = f.index(i + 1, j + 1, k + 1);
        if (vol.observed(src)) {
          f.value[dst] = vol.tsdf[src];
          open[dst] = vol.tsdf[src] >= 0;
        }
      }
    }
  }
  std::deque<std::size_t> queue;
  for (int k = 0; k < f.dims[2]; ++k) {
    for (int j = 0; j < f.dims[1]; ++j) {
      for (int i = 0; i < f.dims[0]; ++i) {
        if (i == 0 || j == 0 || k == 0 || i == f.dims[0] - 1 || j == f.dims[1] - 1 || k == f.dims[2] - 1) {
          const std::size_t idx = f.index(i, j, k);
          reached[idx] = 1;
          queue.push_back(idx);
        }
      }
    }
  }
  const std::ptrdiff_t sx = 1, sy = f.dims[0], sz = std::ptrdiff_t(f.dims[0]) * f.dims[1];
  while (!queue.empty()) {
    const std::size_t idx = queue.front();
    queue.pop_front();
    const int i = int(idx % std::size_t(f.dims[0]));
    const int j = int((idx / std::size_t(f.dims[0])) % std::size_t(f.dims[1]));
    const int k = int(idx / std::size_t(sz));
    const std::ptrdiff_t steps[6] = {-sx, sx, -sy, sy, -sz, sz};
    const bool ok[6] = {i > 0, i < f.dims[0] - 1, j > 0, j < f.dims[1] - 1, k > 0, k < f.dims[2] - 1};
    for (int s = 0; s < 6; ++s) {
      if (!ok[s]) continue;
      const std::size_t nb = std::size_t(std::ptrdiff_t(idx) + steps[s]);
      if (reached[nb] || !open[nb]) continue;
      reached[nb] = 1;
      queue.push_back(nb);
    }
  }
  for (int k = 0; k < vol.dims[2]; ++k) {
    for (int j = 0; j < vol.dims[1]; ++j) {
      for (int i = 0; i < vol.dims[0]; ++i) {
        const std::size_t dst = f.index(i + 1, j + 1, k + 1);
        if (!vol.observed(vol.index(i, j, k)) && !reached[dst]) f.value[dst] = -1.0f;
      }
    }
  }
  return f;
}

namespace detail {

/// Marching-cubes case tables, generated by tracing the iso-contour around the
/// six cube faces. Ambiguous faces always separate the inside corners, so two
/// cells sharing a face agree and the output is watertight.
struct McTables {
  // corner bit layout: x + 2y + 4z
  std::array<std::array<int, 2>, 12> edge_corners{};
  std::array<int, 12> edge_axis{};
  std::array<std::vector<std::array<int, 3>>, 256> triangles;

  McTables() {
    int e = 0;
    for (int axis = 0; axis < 3; ++axis) {
      for (int c = 0; c < 8; ++c) {
        if (c & (1 << axis)) continue;
        edge_corners[std::size_t(e)] = {c, c | (1 << axis)};
        edge_axis[std::size_t(e)] = axis;
        ++e;
      }
    }
    auto edge_between = [&](int a, int b) {
      for (int i = 0; i < 12; ++i) {
        const auto& ec = edge_corners[std::size_t(i)];
        if ((ec[0] == a && ec[1] == b) || (ec[0] == b && ec[1] == a)) return i;
      }
      return -1;
    };
    // Each face's corners, counter-clockwise seen from outside the cube.
    std::array<std::array<int, 4>, 6> faces{};
    for (int axis = 0, fi = 0; axis < 3; ++axis) {
      for (int side = 0; side < 2; ++side, ++fi) {
        const int u = (axis + 1) % 3, v = (axis + 2) % 3;
        const int bu[4] = {0, 1, 1, 0}, bv[4] = {0, 0, 1, 1};
        std::array<int, 4> q{};
        for (int c = 0; c < 4; ++c) q[std::size_t(c)] = (side << axis) | (bu[c] << u) | (bv[c] << v);
        if (!side) std::swap(q[1], q[3]);
        faces[std::size_t(fi)] = q;
      }
    }
    for (int cube = 0; cube < 256; ++cube) {
      auto inside = [&](int corner) { return (cube >> corner) & 1; };
      std::array<int, 12> next;
      next.fill(-1);
      for (const auto& q : faces) {
        for (int kk = 0; kk < 4; ++kk) {
          const int a = q[std::size_t(kk)], b = q[std::size_t((kk + 1) % 4)];
          if (!(inside(a) && !inside(b))) continue;
          int m = (kk + 3) % 4;
          while (inside(q[std::size_t(m)])) m = (m + 3) % 4;
          const int exit_edge = edge_between(a, b);
          const int entry_edge = edge_between(q[std::size_t(m)], q[std::size_t((m + 1) % 4)]);
          next[std::size_t(exit_edge)] = entry_edge;
        }
      }
      std::array<bool, 12> used{};
      for (int start = 0; start < 12; ++start) {
        if (next[std::size_t(start)] < 0 || used[std::size_t(start)]) continue;
        std::vector<int> loop;
        for (int cur = start; !used[std::size_t(cur)]; cur = next[std::size_t(cur)]) {
          used[std::size_t(cur)] = true;
          loop.push_back(cur);
        }
        // Traced with the inside on the left; reverse so normals face outward.
        std::reverse(loop.begin(), loop.end());
        for (std::size_t t = 1; t + 1 < loop.size(); ++t) {
          triangles[std::size_t(cube)].push_back({loop[0], loop[t], loop[t + 1]});
        }
      }
    }
  }
};

inline const McTables& mc_tables() {
  static const McTables tables;
  return tables;
}

inline Rgb sample_color(const TsdfVolume& vol, const Vec3& p) {
  const Vec3 g = (p - vol.origin) / vol.voxel_size - Vec3::Constant(0.5);
  const int i0 = int(std::floor(g.x())), j0 = int(std::floor(g.y())), k0 = int(std::floor(g.z()));
  const double fx = g.x() - i0, fy = g.y() - j0, fz = g.z() - k0;
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double wsum = 0;
  for (int c = 0; c < 8; ++c) {
    const int i = i0 + (c & 1), j = j0 + ((c >> 1) & 1), k = k0 + ((c >> 2) & 1);
    if (i < 0 || j < 0 || k < 0 || i >= vol.dims[0] || j >= vol.dims[1] || k >= vol.dims[2]) continue;
    const std::size_t idx = vol.index(i, j, k);
    if (!vol.observed(idx)) continue;
    const double w = ((c & 1) ? fx : 1 - fx) * (((c >> 1) & 1) ? fy : 1 - fy) * (((c >> 2) & 1) ? fz : 1 - fz);
    acc += w * vol.color[idx].cast<double>();
    wsum += w;
  }
  if (wsum <= 1e-12) return Rgb(0.5f, 0.5f, 0.5f);
  return (acc / wsum).cast<float>();
}

}  // namespace detail

/// Marching cubes over the closed field at the zero level. Vertices are keyed
/// by (cell, edge) so repeated extraction is bit-identical; colors come from
/// trilinear sampling of the observed color grid.
inline TriangleMesh extract_mesh(const TsdfVolume& vol) {
  const ClosedField field = close_field(vol);
  const auto& tables = detail::mc_tables();
  const int nx = field.dims[0], ny = field.dims[1], nz = field.dims[2];
  const std::size_t n = std::size_t(nx) * std::size_t(ny) * std::size_t(nz);
  std::array<std::vector<std::int32_t>, 3> edge_vertex;
  for (auto& ev : edge_vertex) ev.assign(n, -1);
  TriangleMesh mesh;
  auto lattice = [&](int i, int j, int k) {
    return Vec3(vol.origin + vol.voxel_size * Vec3(i - 0.5, j - 0.5, k - 0.5));
  };
  for (int k = 0; k + 1 < nz; ++k) {
    for (int j = 0; j + 1 < ny; ++j) {
      for (int i = 0; i + 1 < nx; ++i) {
        int cube = 0;
        float val[8];
        for (int c = 0; c < 8; ++c) {
          val[c] = field.at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
          if (val[c] < 0) cube |= 1 << c;
        }
        if (cube == 0 || cube == 255) continue;
        for (const auto& tri : tables.triangles[std::size_t(cube)]) {
          std::array<int, 3> ids{};
          for (int t = 0; t < 3; ++t) {
            const int e = tri[std::size_t(t)];
            const auto& ec = tables.edge_corners[std::size_t(e)];
            const int axis = tables.edge_axis[std::size_t(e)];
            const int a = ec[0], b = ec[1];
            const int ai = i + (a & 1), aj = j + ((a >> 1) & 1), ak = k + ((a >> 2) & 1);
            std::int32_t& slot = edge_vertex[std::size_t(axis)][field.index(ai, aj, ak)];
            if (slot < 0) {
              const double va = val[a], vb = val[b];
              const double s = va / (va - vb);
              Vec3 pa = lattice(ai, aj, ak);
              Vec3 pb = pa;
              pb[axis] += vol.voxel_size;
              const Vec3 p = pa + s * (pb - pa);
              slot = std::int32_t(mesh.vertices.size());
              mesh.vertices.push_back(p);
              mesh.colors.push_back(detail::sample_color(vol, p));
            }
            ids[std::size_t(t)] = slot;
          }
          if (ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2]) continue;
          mesh.faces.push_back(ids);
        }
      }
    }
  }
  if (mesh.faces.empty()) throw Error(ErrorCode::kEmptyMesh, "volume has no zero crossing");
  return mesh;
}

// ---------------------------------------------------------------------------
// Volumetric rendering

struct RaycastConfig {
  double alpha = 300.0;      // density sharpness, 1/m
  double step = 0.0;         // ray step in meters; 0 = half a voxel
  double near_band = 0.0;    // window scale; 0 = volume truncation
};

/// Bell-shaped surface density: sigmoid(a s) * sigmoid(-a s). Peaks at 1/4 on the surface.
inline double surface_density(double signed_distance, double alpha) {
  const double x = alpha * signed_distance;
  const double e = std::exp(-std::abs(x));
  return e / ((1.0 + e) * (1.0 + e));
}

struct RaycastOutput {
  ColorImage color;
  DepthImage depth;
  MaskImage mask;
};

namespace detail {

inline double sample_field(const TsdfVolume& vol, const ClosedField& f, const Vec3& p) {
  // padded lattice index: voxel (i,j,k) sits at padded (i+1, j+1, k+1)
  const Vec3 g = (p - vol.origin) / vol.voxel_size + Vec3::Constant(0.5);
  const int i0 = int(std::floor(g.x())), j0 = int(std::floor(g.y())), k0 = int(std::floor(g.z()));
  if (i0 < 0 || j0 < 0 || k0 < 0 || i0 + 1 >= f.dims[0] || j0 + 1 >= f.dims[1] || k0 + 1 >= f.dims[2]) return 1.0;
  const double fx = g.x() - i0, fy = g.y() - j0, fz = g.z() - k0;
  double v = 0;
  for (int c = 0; c < 8; ++c) {
    const double w = ((c & 1) ? fx : 1 - fx) * (((c >> 1) & 1) ? fy : 1 - fy) * (((c >> 2) & 1) ? fz : 1 - fz);
    v += w * f.at(i0 + (c & 1), j0 + ((c >> 1) & 1), k0 + ((c >> 2) & 1));
  }
  return v;
}

}  // namespace detail

/// Volumetric render of the closed TSDF. Per pixel, color and depth are the
/// density-weighted means over the window [z - band, z + band / 2] around
/// the guide depth z (or around the first surface crossing when no guide is given).
inline RaycastOutput raycast_render(const TsdfVolume& vol, const Pose& pose, const Intrinsics& k,
                                   const RaycastConfig& cfg = {}, const DepthImage* guide_depth = nullptr) {
  k.check();
  const double step = cfg.step > 0 ? cfg.step : 0.5 * vol.voxel_size;
  if (step > 0.5 * vol.voxel_size + 1e-12) throw Error(ErrorCode::kConfig, "raycast step must be <= voxel_size / 2");
  if (!(cfg.alpha > 0)) throw Error(ErrorCode::kConfig, "raycast alpha must be positive");
  if (guide_depth && !guide_depth->same_shape(k.width, k.height)) {
    throw Error(ErrorCode::kShapeMismatch, "guide depth does not match intrinsics");
  }
  const double band = cfg.near_band > 0 ? cfg.near_band : vol.truncation;
  const ClosedField field = close_field(vol);
  const Pose inv = pose.inverse();
  const Vec3 o = inv.translation;
  const Vec3 lo = vol.origin, hi = vol.upper();
  RaycastOutput out{ColorImage(k.width, k.height, Rgb::Zero()), DepthImage(k.width, k.height, 0.0f),
                    MaskImage(k.width, k.height, 0)};
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      // points along the ray are o + z * d, with z the camera depth
      const Vec3 d = inv.rotation * Vec3((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      double z0 = 0, z1 = std::numeric_limits<double>::infinity();
      bool miss = false;
      for (int a = 0; a < 3 && !miss; ++a) {
        if (std::abs(d[a]) < 1e-12) {
          miss = o[a] < lo[a] || o[a] > hi[a];
          continue;
        }
        double ta = (lo[a] - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        z0 = std::max(z0, ta);
        z1 = std::min(z1, tb);
      }
      if (miss || z0 >= z1) continue;
      const double ray_scale = d.norm();
      const double dz = step / ray_scale;
      double zc = -1;
      if (guide_depth) {
        zc = (*guide_depth)(x, y);
        if (!(zc > 0)) continue;
      } else {
        double prev_z = z0, prev = detail::sample_field(vol, field, o + z0 * d);
        for (double z = z0 + dz; z <= z1; z += dz) {
          const double s = detail::sample_field(vol, field, o + z * d);
          if (prev > 0 && s <= 0) {
            zc = prev_z + (z - prev_z) * prev / (prev - s);
            break;
          }
          prev = s;
          prev_z = z;
        }
        if (zc < 0) continue;
      }
      double wsum = 0, dsum = 0;
      Eigen::Vector3d csum = Eigen::Vector3d::Zero();
      const double dt = dz * ray_scale;
      for (double z = zc - band; z <= zc + 0.5 * band + 1e-12; z += dz) {
        const Vec3 p = o + z * d;
        const double w = surface_density(detail::sample_field(vol, field, p) * vol.truncation, cfg.alpha) * dt;
        wsum += w;
        dsum += w * z;
        csum += w * detail::sample_color(vol, p).cast<double>();
      }
      if (cfg.alpha * wsum <= 1e-3) continue;
      out.mask(x, y) = 1;
      out.depth(x, y) = float(dsum / wsum);
      out.color(x, y) = (csum / wsum).cast<float>();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "SFTSDF01" magic, u32 version, origin, voxel_size, dims, truncation, then grids.

inline constexpr std::uint32_t kVolumeCheckpointVersion = 1;

inline void save_volume(const std::string& path, const TsdfVolume& vol) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out.write("SFTSDF01", 8);
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put(kVolumeCheckpointVersion);
  for (int a = 0; a < 3; ++a) put(vol.origin[a]);
  put(vol.voxel_size);
  for (int a = 0; a < 3; ++a) put(std::int32_t(vol.dims[std::size_t(a)]));
  put(vol.truncation);
  out.write(reinterpret_cast<const char*>(vol.tsdf.data()), std::streamsize(vol.tsdf.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(vol.weight.data()), std::streamsize(vol.weight.size() * sizeof(float)));
  for (const auto& c : vol.color) out.write(reinterpret_cast<const char*>(c.data()), 3 * sizeof(float));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path);
}

inline TsdfVolume load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIngest, "cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "SFTSDF01", 8) != 0) throw Error(ErrorCode::kIngest, path + " is not a volume checkpoint");
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof(v)); };
  std::uint32_t version = 0;
  get(version);
  if (version != kVolumeCheckpointVersion) throw Error(ErrorCode::kIngest, "unsupported checkpoint version");
  TsdfVolume vol;
  for (int a = 0; a < 3; ++a) get(vol.origin[a]);
  get(vol.voxel_size);
  for (int a = 0; a < 3; ++a) {
    std::int32_t d = 0;
    get(d);
    if (d <= 0 || d > 4096) throw Error(ErrorCode::kIngest, "corrupt checkpoint dims");
    vol.dims[std::size_t(a)] = d;
  }
  get(vol.truncation);
  const std::size_t n = vol.voxel_count();
  vol.tsdf.resize(n);
  vol.weight.resize(n);
  vol.color.resize(n);
  in.read(reinterpret_cast<char*>(vol.tsdf.data()), std::streamsize(n * sizeof(float)));
  in.read(reinterpret_cast<char*>(vol.weight.data()), std::streamsize(n * sizeof(float)));
  for (auto& c : vol.color) in.read(reinterpret_cast<char*>(c.data()), 3 * sizeof(float));
  if (!in) throw Error(ErrorCode::kIngest, "truncated checkpoint " + path);
  return vol;
}

}  // namespace seenfuse
