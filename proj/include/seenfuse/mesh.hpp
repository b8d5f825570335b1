#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"

namespace seenfuse {

using Face = std::array<int, 3>;

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Rgb> colors;  // per vertex, [0,1]; may be empty
  std::vector<Face> faces;

  bool empty() const { return vertices.empty() || faces.empty(); }

  void check() const {
    if (empty()) throw Error(ErrorCode::kEmptyMesh, "mesh has no faces");
    const int n = int(vertices.size());
    for (const auto& f : faces) {
      for (int i : f) {
        if (i < 0 || i >= n) throw Error(ErrorCode::kEmptyMesh, "face references a missing vertex");
      }
    }
  }

  Rgb color(int i) const { return colors.empty() ? Rgb(0.5f, 0.5f, 0.5f) : colors[std::size_t(i)]; }

  bool operator==(const TriangleMesh& o) const {
    return vertices == o.vertices && colors == o.colors && faces == o.faces;
  }
};

struct Aabb {
  Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Vec3& p) {
    min = min.cwiseMin(p);
    max = max.cwiseMax(p);
  }
  bool valid() const { return (max.array() >= min.array()).all(); }
  Vec3 center() const { return 0.5 * (min + max); }
  Vec3 extent() const { return max - min; }
};

inline Aabb bounds(const std::vector<Vec3>& pts) {
  Aabb b;
  for (const auto& p : pts) b.extend(p);
  return b;
}

inline double face_area(const TriangleMesh& m, const Face& f) {
  return 0.5 * (m.vertices[f[1]] - m.vertices[f[0]]).cross(m.vertices[f[2]] - m.vertices[f[0]]).norm();
}

inline double surface_area(const TriangleMesh& m) {
  double a = 0;
  for (const auto& f : m.faces) a += face_area(m, f);
  return a;
}

/// One third of the area of every incident face.
inline std::vector<double> vertex_dual_areas(const TriangleMesh& m) {
  std::vector<double> area(m.vertices.size(), 0.0);
  for (const auto& f : m.faces) {
    const double a = face_area(m, f) / 3.0;
    for (int i : f) area[std::size_t(i)] += a;
  }
  return area;
}

inline double median_edge_length(const TriangleMesh& m) {
  std::vector<double> len;
  len.reserve(m.faces.size() * 3);
  for (const auto& f : m.faces) {
    for (int e = 0; e < 3; ++e) len.push_back((m.vertices[f[e]] - m.vertices[f[(e + 1) % 3]]).norm());
  }
  if (len.empty()) return 0;
  std::nth_element(len.begin(), len.begin() + long(len.size() / 2), len.end());
  return len[len.size() / 2];
}

/// Fraction of undirected edges used by exactly one face.
inline double boundary_edge_fraction(const TriangleMesh& m) {
  std::map<std::pair<int, int>, int> uses;
  for (const auto& f : m.faces) {
    for (int e = 0; e < 3; ++e) ++uses[std::minmax(f[e], f[(e + 1) % 3])];
  }
  if (uses.empty()) return 0;
  std::size_t boundary = 0;
  for (const auto& [edge, n] : uses) boundary += n == 1;
  return double(boundary) / double(uses.size());
}

/// Farthest-pair distance. Inputs larger than `max_points` are strided down
/// to that many points first, which bounds the quadratic cost.
inline double point_set_diameter(const std::vector<Vec3>& pts, std::size_t max_points = 2000) {
  if (pts.size() < 2) return 0;
  std::vector<const Vec3*> sub;
  const std::size_t stride = std::max<std::size_t>(1, (pts.size() + max_points - 1) / max_points);
  for (std::size_t i = 0; i < pts.size(); i += stride) sub.push_back(&pts[i]);
  double best = 0;
  for (std::size_t i = 0; i < sub.size(); ++i) {
    for (std::size_t j = i + 1; j < sub.size(); ++j) best = std::max(best, (*sub[i] - *sub[j]).squaredNorm());
  }
  return std::sqrt(best);
}

inline TriangleMesh transformed(const TriangleMesh& m, const Pose& pose) {
  TriangleMesh out = m;
  for (auto& v : out.vertices) v = pose * v;
  return out;
}

inline TriangleMesh scaled(const TriangleMesh& m, double factor, const Vec3& about = Vec3::Zero()) {
  TriangleMesh out = m;
  for (auto& v : out.vertices) v = about + factor * (v - about);
  return out;
}

/// Area-weighted uniform surface samples with a fixed seed.
inline std::vector<Vec3> sample_surface(const TriangleMesh& m, std::size_t n, std::uint64_t seed = 7) {
  m.check();
  std::vector<double> cdf(m.faces.size());
  double total = 0;
  for (std::size_t i = 0; i < m.faces.size(); ++i) {
    total += face_area(m, m.faces[i]);
    cdf[i] = total;
  }
  if (!(total > 0)) throw Error(ErrorCode::kEmptyMesh, "mesh has zero surface area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double r = uni(rng) * total;
    std::size_t fi = std::size_t(std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    fi = std::min(fi, m.faces.size() - 1);
    double a = uni(rng), b = uni(rng);
    if (a + b > 1) {
      a = 1 - a;
      b = 1 - b;
    }
    const auto& f = m.faces[fi];
    out.push_back(m.vertices[f[0]] + a * (m.vertices[f[1]] - m.vertices[f[0]]) +
                  b * (m.vertices[f[2]] - m.vertices[f[0]]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural meshes

using ColorField = std::function<Rgb(const Vec3&)>;

/// Smooth multi-frequency pattern; distinct per axis so poses are photometrically distinguishable.
inline Rgb texture_pattern(const Vec3& p) {
  const double r = 0.5 + 0.35 * std::sin(31.0 * p.x() + 7.0 * p.y()) + 0.1 * (p.z() > 0 ? 1 : -1);
  const double g = 0.5 + 0.35 * std::sin(23.0 * p.y() - 11.0 * p.z()) + 0.1 * (p.x() > 0 ? 1 : -1);
  const double b = 0.5 + 0.35 * std::sin(19.0 * p.z() + 13.0 * p.x()) + 0.1 * (p.y() > 0 ? 1 : -1);
  return Rgb(float(std::clamp(r, 0.0, 1.0)), float(std::clamp(g, 0.0, 1.0)), float(std::clamp(b, 0.0, 1.0)));
}

/// Closed axis-aligned box centered at the origin, each face split into n x n quads.
/// Vertices are shared along edges so the mesh is watertight.
inline TriangleMesh make_box(const Vec3& size, int subdivisions = 8, const ColorField& color = texture_pattern) {
  TriangleMesh m;
  const Vec3 h = 0.5 * size;
  std::map<std::array<long, 3>, int> index;
  const int n = std::max(1, subdivisions);
  auto vertex = [&](const Vec3& p) {
    const std::array<long, 3> key{std::lround(p.x() * 1e7), std::lround(p.y() * 1e7), std::lround(p.z() * 1e7)};
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    const int id = int(m.vertices.size());
    m.vertices.push_back(p);
    m.colors.push_back(color(p));
    index.emplace(key, id);
    return id;
  };
  for (int axis = 0; axis < 3; ++axis) {
    for (int side = 0; side < 2; ++side) {
      const int u = (axis + 1) % 3, v = (axis + 2) % 3;
      const double s = side ? 1.0 : -1.0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          std::array<int, 4> q{};
          const int du[4] = {0, 1, 1, 0}, dv[4] = {0, 0, 1, 1};
          for (int c = 0; c < 4; ++c) {
            Vec3 p;
            p[axis] = s * h[axis];
            p[u] = -h[u] + size[u] * double(i + du[c]) / n;
            p[v] = -h[v] + size[v] * double(j + dv[c]) / n;
            q[c] = vertex(p);
          }
          // (u, v) ordering is counter-clockwise about +axis.
          if (side) {
            m.faces.push_back({q[0], q[1], q[2]});
            m.faces.push_back({q[0], q[2], q[3]});
          } else {
            m.faces.push_back({q[0], q[2], q[1]});
            m.faces.push_back({q[0], q[3], q[2]});
          }
        }
      }
    }
  }
  return m;
}

/// Closed union of unit grid cells (each `cell` meters wide), centered on its
/// bounding box. Only faces between a filled and an empty cell are emitted,
/// each split into n x n quads, so the surface is watertight.
inline TriangleMesh make_block_solid(const std::vector<std::array<int, 3>>& cells, double cell, int subdivisions = 4,
                                     const ColorField& color = texture_pattern) {
  if (cells.empty() || !(cell > 0)) throw Error(ErrorCode::kEmptySet, "block solid needs cells and a positive size");
  std::map<std::array<int, 3>, bool> filled;
  std::array<int, 3> lo = cells[0], hi = cells[0];
  for (const auto& c : cells) {
    filled[c] = true;
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], c[a]);
      hi[a] = std::max(hi[a], c[a] + 1);
    }
  }
  Vec3 center;
  for (int a = 0; a < 3; ++a) center[a] = 0.5 * (lo[a] + hi[a]) * cell;
  TriangleMesh m;
  std::map<std::array<long, 3>, int> index;
  const int n = std::max(1, subdivisions);
  auto vertex = [&](const Vec3& p) {
    const std::array<long, 3> key{std::lround(p.x() * 1e7), std::lround(p.y() * 1e7), std::lround(p.z() * 1e7)};
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    const int id = int(m.vertices.size());
    m.vertices.push_back(p);
    m.colors.push_back(color(p));
    index.emplace(key, id);
    return id;
  };
  for (const auto& [c, unused] : filled) {
    for (int axis = 0; axis < 3; ++axis) {
      for (int side = 0; side < 2; ++side) {
        auto nb = c;
        nb[axis] += side ? 1 : -1;
        if (filled.count(nb)) continue;
        const int u = (axis + 1) % 3, v = (axis + 2) % 3;
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            std::array<int, 4> q{};
            const int du[4] = {0, 1, 1, 0}, dv[4] = {0, 0, 1, 1};
            for (int k = 0; k < 4; ++k) {
              Vec3 p;
              p[axis] = (c[axis] + side) * cell;
              p[u] = (c[u] + double(i + du[k]) / n) * cell;
              p[v] = (c[v] + double(j + dv[k]) / n) * cell;
              q[k] = vertex(p - center);
            }
            if (side) {
              m.faces.push_back({q[0], q[1], q[2]});
              m.faces.push_back({q[0], q[2], q[3]});
            } else {
              m.faces.push_back({q[0], q[2], q[1]});
              m.faces.push_back({q[0], q[3], q[2]});
            }
          }
        }
      }
    }
  }
  return m;
}

/// An asymmetric test object about 0.2 x 0.15 x 0.15 m: a 4 x 2 x 2 block
/// of 5 cm cells with a tower on one end and a bump on the other, so no
/// rotation maps it onto itself.
inline TriangleMesh make_asymmetric_object(int subdivisions = 4, const ColorField& color = texture_pattern) {
  std::vector<std::array<int, 3>> cells;
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 2; ++z) cells.push_back({x, y, z});
  cells.push_back({0, 2, 0});
  cells.push_back({3, 0, 2});
  return make_block_solid(cells, 0.05, subdivisions, color);
}

inline TriangleMesh make_sphere(double radius, int level = 3, const ColorField& color = texture_pattern) {
  const Icosphere s = make_icosphere(level);
  TriangleMesh m;
  for (const auto& v : s.vertices) {
    m.vertices.push_back(radius * v);
    m.colors.push_back(color(radius * v));
  }
  m.faces = s.faces;
  return m;
}

/// Closed cylinder along +z centered at the origin.
inline TriangleMesh make_cylinder(double radius, double height, int segments = 48, int rings = 8,
                                  const ColorField& color = texture_pattern) {
  TriangleMesh m;
  auto add = [&](const Vec3& p) {
    m.vertices.push_back(p);
    m.colors.push_back(color(p));
    return int(m.vertices.size()) - 1;
  };
  std::vector<std::vector<int>> ring(std::size_t(rings + 1));
  for (int r = 0; r <= rings; ++r) {
    const double z = -0.5 * height + height * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double a = 2 * kPi * s / segments;
      ring[std::size_t(r)].push_back(add({radius * std::cos(a), radius * std::sin(a), z}));
    }
  }
  for (int r = 0; r < rings; ++r) {
    for (int s = 0; s < segments; ++s) {
      const int a = ring[r][s], b = ring[r][(s + 1) % segments];
      const int c = ring[r + 1][(s + 1) % segments], d = ring[r + 1][s];
      m.faces.push_back({a, b, c});
      m.faces.push_back({a, c, d});
    }
  }
  const int bottom = add({0, 0, -0.5 * height});
  const int top = add({0, 0, 0.5 * height});
  for (int s = 0; s < segments; ++s) {
    m.faces.push_back({bottom, ring[0][(s + 1) % segments], ring[0][s]});
    m.faces.push_back({top, ring[rings][s], ring[rings][(s + 1) % segments]});
  }
  return m;
}

// ---------------------------------------------------------------------------
// PLY / OBJ

/// Writes binary little-endian PLY: float x,y,z; uchar red,green,blue; and,
/// when `uncertain` is non-empty, uchar uncertain.
inline void write_ply(const std::string& path, const TriangleMesh& m, const std::vector<std::uint8_t>& uncertain = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << m.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (!uncertain.empty()) out << "property uchar uncertain\n";
  out << "element face " << m.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    const float xyz[3] = {float(m.vertices[i].x()), float(m.vertices[i].y()), float(m.vertices[i].z())};
    out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    const Rgb c = m.color(int(i));
    const std::uint8_t rgb[3] = {std::uint8_t(std::lround(std::clamp(c.x(), 0.f, 1.f) * 255)),
                                 std::uint8_t(std::lround(std::clamp(c.y(), 0.f, 1.f) * 255)),
                                 std::uint8_t(std::lround(std::clamp(c.z(), 0.f, 1.f) * 255))};
    out.write(reinterpret_cast<const char*>(rgb), 3);
    if (!uncertain.empty()) out.put(char(uncertain[i] ? 1 : 0));
  }
  for (const auto& f : m.faces) {
    out.put(char(3));
    const std::int32_t idx[3] = {f[0], f[1], f[2]};
    out.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path);
}

struct PlyContents {
  TriangleMesh mesh;
  std::vector<std::uint8_t> uncertain;  // empty when the file has no such property
};

namespace detail {

struct PlyProperty {
  std::string name, type, list_count_type;
  bool is_list = false;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

inline std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw Error(ErrorCode::kIngest, "unsupported PLY type " + t);
}

inline double ply_read_binary(std::istream& in, const std::string& t) {
  char buf[8];
  const std::size_t n = ply_type_size(t);
  in.read(buf, std::streamsize(n));
  if (!in) throw Error(ErrorCode::kIngest, "truncated PLY body");
  if (t == "char" || t == "int8") return double(*reinterpret_cast<std::int8_t*>(buf));
  if (t == "uchar" || t == "uint8") return double(*reinterpret_cast<std::uint8_t*>(buf));
  if (t == "short" || t == "int16") { std::int16_t v; std::memcpy(&v, buf, 2); return v; }
  if (t == "ushort" || t == "uint16") { std::uint16_t v; std::memcpy(&v, buf, 2); return v; }
  if (t == "int" || t == "int32") { std::int32_t v; std::memcpy(&v, buf, 4); return v; }
  if (t == "uint" || t == "uint32") { std::uint32_t v; std::memcpy(&v, buf, 4); return v; }
  if (t == "float" || t == "float32") { float v; std::memcpy(&v, buf, 4); return v; }
  double v;
  std::memcpy(&v, buf, 8);
  return v;
}

}  // namespace detail

/// Reads ASCII or binary little-endian PLY with optional vertex colors and
/// the "uncertain" vertex property.
inline PlyContents read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIngest, "cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw Error(ErrorCode::kIngest, path + " is not a PLY file");
  bool binary = false;
  std::vector<detail::PlyElement> elements;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") throw Error(ErrorCode::kIngest, "unsupported PLY format " + fmt);
    } else if (word == "element") {
      detail::PlyElement e;
      ss >> e.name >> e.count;
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw Error(ErrorCode::kIngest, "PLY property before element");
      detail::PlyProperty p;
      std::string t;
      ss >> t;
      if (t == "list") {
        p.is_list = true;
        ss >> p.list_count_type >> p.type >> p.name;
      } else {
        p.type = t;
        ss >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (word == "end_header") {
      break;
    }
  }
  PlyContents out;
  for (const auto& e : elements) {
    const bool is_vertex = e.name == "vertex";
    const bool is_face = e.name == "face";
    bool has_color = false, has_uncertain = false;
    for (const auto& p : e.props) {
      has_color |= p.name == "red";
      has_uncertain |= p.name == "uncertain";
    }
    for (std::size_t i = 0; i < e.count; ++i) {
      Vec3 pos = Vec3::Zero();
      Rgb col(0.5f, 0.5f, 0.5f);
      std::uint8_t unc = 0;
      std::vector<int> idx;
      std::istringstream row;
      if (!binary) {
        if (!std::getline(in, line)) throw Error(ErrorCode::kIngest, "truncated PLY body");
        row.str(line);
      }
      auto scalar = [&](const std::string& type) {
        if (binary) return detail::ply_read_binary(in, type);
        double v;
        if (!(row >> v)) throw Error(ErrorCode::kIngest, "malformed PLY row");
        return v;
      };
      for (const auto& p : e.props) {
        if (p.is_list) {
          const int n = int(scalar(p.list_count_type));
          for (int k = 0; k < n; ++k) idx.push_back(int(scalar(p.type)));
          continue;
        }
        const double v = scalar(p.type);
        const bool byte_color = p.type == "uchar" || p.type == "uint8";
        if (p.name == "x") pos.x() = v;
        else if (p.name == "y") pos.y() = v;
        else if (p.name == "z") pos.z() = v;
        else if (p.name == "red") col.x() = float(byte_color ? v / 255.0 : v);
        else if (p.name == "green") col.y() = float(byte_color ? v / 255.0 : v);
        else if (p.name == "blue") col.z() = float(byte_color ? v / 255.0 : v);
        else if (p.name == "uncertain") unc = v != 0;
      }
      if (is_vertex) {
        out.mesh.vertices.push_back(pos);
        if (has_color) out.mesh.colors.push_back(col);
        if (has_uncertain) out.uncertain.push_back(unc);
      } else if (is_face) {
        for (std::size_t k = 2; k < idx.size(); ++k) out.mesh.faces.push_back({idx[0], idx[k - 1], idx[k]});
      }
    }
  }
  return out;
}

/// Wavefront OBJ with optional per-vertex colors ("v x y z r g b"); polygons are fan-triangulated.
inline TriangleMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIngest, "cannot open " + path);
  TriangleMesh m;
  bool any_color = false;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 p;
      ss >> p.x() >> p.y() >> p.z();
      Rgb c(0.5f, 0.5f, 0.5f);
      float r, g, b;
      if (ss >> r >> g >> b) {
        c = Rgb(r, g, b);
        any_color = true;
      }
      m.vertices.push_back(p);
      m.colors.push_back(c);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        int i = std::stoi(tok.substr(0, tok.find('/')));
        idx.push_back(i > 0 ? i - 1 : int(m.vertices.size()) + i);
      }
      for (std::size_t k = 2; k < idx.size(); ++k) m.faces.push_back({idx[0], idx[k - 1], idx[k]});
    }
  }
  if (!any_color) m.colors.clear();
  return m;
}

inline TriangleMesh read_mesh(const std::string& path) {
  const auto dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  TriangleMesh m;
  if (ext == "obj") m = read_obj(path);
  else if (ext == "ply") m = read_ply(path).mesh;
  else throw Error(ErrorCode::kIngest, "unsupported mesh extension: " + path);
  if (m.empty()) throw Error(ErrorCode::kEmptyMesh, path + " has no faces");
  m.check();
  return m;
}

}  // namespace seenfuse
