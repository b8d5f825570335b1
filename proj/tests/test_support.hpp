#pragma once

// Helpers and independent oracles shared by the test binaries. Nothing in
// here calls into the code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"
#include "seenfuse/mesh.hpp"

namespace seenfuse::test {

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline Vec3 random_vec(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline Intrinsics small_camera() { return {300.0, 300.0, 160.0, 120.0, 320, 240}; }

/// Brute-force occlusion: a vertex is hidden iff any face crosses the segment
/// from the camera center to it more than `eps` (in camera depth) in front.
inline std::vector<std::uint8_t> brute_force_visibility(const TriangleMesh& mesh, const Pose& pose,
                                                        const Intrinsics& k, double eps) {
  std::vector<Vec3> cam;
  for (const auto& v : mesh.vertices) cam.push_back(pose * v);
  std::vector<std::uint8_t> out(cam.size(), 0);
  for (std::size_t i = 0; i < cam.size(); ++i) {
    const Vec3& v = cam[i];
    if (v.z() <= 1e-4) continue;
    const double u = k.fx * v.x() / v.z() + k.cx, w = k.fy * v.y() / v.z() + k.cy;
    const long px = std::lround(u), py = std::lround(w);
    if (px < 0 || py < 0 || px >= k.width || py >= k.height) continue;
    bool hidden = false;
    for (const auto& f : mesh.faces) {
      if (f[0] == int(i) || f[1] == int(i) || f[2] == int(i)) continue;
      const Vec3 &a = cam[f[0]], &b = cam[f[1]], &c = cam[f[2]];
      // Solve a + s(b-a) + t(c-a) = h v by Cramer's rule.
      Mat3 m;
      m.col(0) = b - a;
      m.col(1) = c - a;
      m.col(2) = -v;
      const double det = m.determinant();
      if (std::abs(det) < 1e-18) continue;
      const Vec3 x = m.inverse() * (-a);
      const double s = x[0], t = x[1], h = x[2];
      if (s < -1e-9 || t < -1e-9 || s + t > 1 + 1e-9) continue;
      if (h > 0 && h * v.z() < v.z() - eps) {
        hidden = true;
        break;
      }
    }
    out[i] = !hidden;
  }
  return out;
}

inline double brute_add(const Pose& gt, const Pose& est, const std::vector<Vec3>& pts) {
  double s = 0;
  for (const auto& p : pts) {
    const Vec3 a = gt.rotation * p + gt.translation, b = est.rotation * p + est.translation;
    s += (a - b).norm();
  }
  return s / double(pts.size());
}

inline double brute_adds(const Pose& gt, const Pose& est, const std::vector<Vec3>& pts) {
  double s = 0;
  for (const auto& p : pts) {
    const Vec3 a = gt.rotation * p + gt.translation;
    double best = 1e300;
    for (const auto& q : pts) best = std::min(best, (a - (est.rotation * q + est.translation)).squaredNorm());
    s += std::sqrt(best);
  }
  return s / double(pts.size());
}

/// Integrates accuracy(t) = fraction of errors < t piecewise between sorted breakpoints.
inline double brute_auc(std::vector<double> e, double m) {
  std::sort(e.begin(), e.end());
  double area = 0, prev = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double t = std::min(std::max(e[i], 0.0), m);
    area += double(i) / double(e.size()) * (t - prev);
    prev = t;
  }
  area += (m - prev);  // all errors below t beyond the last breakpoint
  return 100.0 * area / m;
}

/// Mean nearest-neighbour distance by exhaustive search.
inline double brute_one_way(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  double s = 0;
  for (const auto& p : from) {
    double best = 1e300;
    for (const auto& q : to) best = std::min(best, (p - q).squaredNorm());
    s += std::sqrt(best);
  }
  return s / double(from.size());
}

inline MaskImage random_mask(std::mt19937_64& rng, int w, int h, double p) {
  std::bernoulli_distribution b(p);
  MaskImage m(w, h, 0);
  for (auto& v : m.pixels) v = b(rng);
  return m;
}

}  // namespace seenfuse::test
