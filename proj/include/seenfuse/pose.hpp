#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"
#include "seenfuse/model.hpp"
#include "seenfuse/raster.hpp"

namespace seenfuse {

struct HypothesisConfig {
  int n_viewpoints = 42;
  int n_inplane = 12;
  int refine_iters_first = 5;
  int refine_iters_track = 2;

  void check() const {
    if (n_viewpoints < 1 || n_inplane < 1) throw Error(ErrorCode::kConfig, "hypothesis counts must be >= 1");
    if (n_viewpoints > 642) throw Error(ErrorCode::kConfig, "at most 642 viewpoints are supported");
    if (refine_iters_first < 0 || refine_iters_track < 0) throw Error(ErrorCode::kConfig, "negative refine iterations");
  }
};

struct Thresholds {
  double t_u = 0.5;        // max uncertainty rate
  double t_s = 0.5;        // min seen IoU for a valid pose
  double t_conf = 0.5;     // min seen IoU for pool admission
  double t_complete = 0.7; // completion trigger
  double t_geo = deg2rad(10.0);
  double t_gen = deg2rad(45.0);

  void check() const {
    for (double v : {t_u, t_s, t_conf, t_complete})
      if (!(v >= 0 && v <= 1)) throw Error(ErrorCode::kConfig, "IoU-type thresholds must lie in [0, 1]");
    for (double v : {t_geo, t_gen})
      if (!(v > 0 && v <= kPi)) throw Error(ErrorCode::kConfig, "angular thresholds must lie in (0, pi]");
  }
};

struct ScoreWeights {
  double w_g = 1.0;  // geometric residual, in units of the truncation distance
  double w_p = 0.5;  // photometric residual
};

struct IcpConfig {
  double huber_delta = 0.015;          // meters
  double max_correspondence = 0.1;     // meters
  int pixel_stride = 2;
  double damping = 1e-4;               // Levenberg-Marquardt factor on the diagonal
  int min_correspondences = 10;
  double min_normal_spread = 1e-3;     // middle/largest normal-covariance eigenvalue
};

struct PoseConfig {
  HypothesisConfig hypothesis;
  Thresholds thresholds;
  ScoreWeights weights;
  IcpConfig icp;
  double truncation = kDefaultTruncation;
};

struct ScoredPose {
  Pose pose;
  double seen_iou = 0;
  double uncertainty_rate = 1;
  double geometric_residual = 0;
  double photometric_residual = 0;
  double score = -std::numeric_limits<double>::infinity();
  bool valid = false;
  int index = -1;  // construction index of the winning hypothesis
};

/// Back-projects the mask centroid at the median masked depth.
inline Vec3 init_translation(const DepthImage& depth, const MaskImage& mask, const Intrinsics& k) {
  if (!depth.same_shape(mask)) throw Error(ErrorCode::kShapeMismatch, "depth and mask differ in size");
  double sx = 0, sy = 0;
  std::size_t n = 0;
  std::vector<float> z;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask(x, y)) continue;
      sx += x;
      sy += y;
      ++n;
      if (depth(x, y) > 0) z.push_back(depth(x, y));
    }
  if (n == 0 || z.empty()) throw Error(ErrorCode::kDegenerateObservation, "mask has no valid depth");
  const auto mid = z.begin() + std::ptrdiff_t(z.size() / 2);
  std::nth_element(z.begin(), mid, z.end());
  double median = *mid;
  if (z.size() % 2 == 0) median = 0.5 * (median + *std::max_element(z.begin(), mid));
  return back_project(sx / double(n), sy / double(n), median, k);
}

/// Object→camera rotations: viewpoint rotations (camera looks at the object
/// from each icosphere vertex) times in-plane rolls about the optical axis.
inline std::vector<Mat3> hypothesis_rotations(const HypothesisConfig& cfg) {
  cfg.check();
  std::vector<Mat3> views;
  if (cfg.n_viewpoints == 1) {
    views.push_back(Mat3::Identity());
  } else {
    int level = 0;
    while (make_icosphere(level).vertices.size() < std::size_t(cfg.n_viewpoints)) ++level;
    const auto set = icosphere_viewpoints(level);
    for (int i = 0; i < cfg.n_viewpoints; ++i) views.push_back(set.rotations[std::size_t(i)].transpose());
  }
  const auto rolls = inplane_rotations(cfg.n_inplane);
  std::vector<Mat3> out;
  out.reserve(views.size() * rolls.size());
  for (const auto& v : views)
    for (const auto& r : rolls) out.push_back(r * v);
  return out;
}

inline std::vector<Pose> generate_hypotheses(const RgbdFrame& frame, const Intrinsics& k, const HypothesisConfig& cfg) {
  const Vec3 t = init_translation(frame.depth, frame.mask, k);
  std::vector<Pose> out;
  for (const auto& r : hypothesis_rotations(cfg)) out.emplace_back(r, t);
  return out;
}

// ---------------------------------------------------------------------------
// Refinement

struct RefineResult {
  Pose pose;
  bool degenerate = false;
  std::size_t correspondences = 0;
  /// Huber objective on each iteration's own correspondences, before and after its update.
  std::vector<double> objective_before, objective_after;
};

namespace detail {

inline double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

struct ModelSample {
  Vec3 point;   // object frame
  Vec3 normal;  // object frame
};

/// Certain surface samples of the model visible from `pose`.
inline std::vector<ModelSample> visible_certain_samples(const HybridModel& model, const Pose& pose,
                                                        const Intrinsics& k, int stride) {
  const auto r = rasterize(model.mesh, model.uncertain, pose, k, RenderFlags{false, false});
  const Pose inv = pose.inverse();
  std::vector<ModelSample> out;
  for (int y = 0; y < k.height; y += stride)
    for (int x = 0; x < k.width; x += stride) {
      if (!r.mask(x, y) || r.uncertainty(x, y)) continue;
      const Vec3 n = model.face_normals[std::size_t(r.face(x, y))];
      if (n.isZero()) continue;
      out.push_back({inv * back_project(x, y, r.depth(x, y), k), n});
    }
  return out;
}

struct Correspondence {
  Vec3 q, n, o;  // model point, model normal (object frame), observed point (camera frame)
};

inline double icp_objective(const std::vector<Correspondence>& cs, const Pose& p, double delta) {
  double e = 0;
  for (const auto& c : cs) e += huber((p.rotation * c.n).dot(p.rotation * c.q + p.translation - c.o), delta);
  return e;
}

}  // namespace detail

/// Damped point-to-plane ICP of the model's certain surface against the
/// masked frame. Updates compose as R+ = dR R, t+ = t + dt.
inline RefineResult refine_pose(const HybridModel& model, const RgbdFrame& frame, const Intrinsics& k,
                                const Pose& hypothesis, int iters, const IcpConfig& cfg = {}) {
  RefineResult res;
  res.pose = hypothesis;
  if (iters <= 0 || model.mesh.empty()) return res;
  const auto samples = detail::visible_certain_samples(model, hypothesis, k, std::max(1, cfg.pixel_stride));
  Pose cur = hypothesis;
  std::vector<detail::Correspondence> cs;
  for (int it = 0; it < iters; ++it) {
    cs.clear();
    Mat3 cov = Mat3::Zero();
    for (const auto& s : samples) {
      const Vec3 c = cur * s.point;
      if (c.z() <= detail::kNearPlane) continue;
      const int u = int(std::lround(k.fx * c.x() / c.z() + k.cx)), v = int(std::lround(k.fy * c.y() / c.z() + k.cy));
      if (!frame.depth.contains(u, v) || !frame.mask(u, v)) continue;
      const float d = frame.depth(u, v);
      if (!(d > 0)) continue;
      const Vec3 o = back_project(u, v, d, k);
      if ((c - o).norm() > cfg.max_correspondence) continue;
      cs.push_back({s.point, s.normal, o});
      const Vec3 nc = cur.rotation * s.normal;
      cov += nc * nc.transpose();
    }
    if (int(cs.size()) < cfg.min_correspondences) {
      if (it == 0) res.degenerate = true;
      break;
    }
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    // Two distinct plane orientations already pin the rotation; the damping
    // keeps the remaining free translation direction still. A single plane
    // (rank 1) is treated as degenerate.
    if (eig.eigenvalues()(1) < cfg.min_normal_spread * eig.eigenvalues()(2)) {
      res.pose = hypothesis;
      res.degenerate = true;
      res.correspondences = cs.size();
      return res;
    }
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& c : cs) {
      const Vec3 p = cur.rotation * c.q;
      const Vec3 n = cur.rotation * c.n;
      const double r = n.dot(p + cur.translation - c.o);
      const double w = std::abs(r) <= cfg.huber_delta ? 1.0 : cfg.huber_delta / std::abs(r);
      Eigen::Matrix<double, 6, 1> j;
      j << p.cross(n), n;
      h.noalias() += w * j * j.transpose();
      g.noalias() += w * r * j;
    }
    Eigen::Matrix<double, 6, 6> a = h;
    for (int d = 0; d < 6; ++d) a(d, d) += cfg.damping * h(d, d) + 1e-12;
    Eigen::Matrix<double, 6, 1> step = a.ldlt().solve(-g);
    const double before = detail::icp_objective(cs, cur, cfg.huber_delta);
    double after = before;
    Pose next = cur;
    for (int halving = 0; halving < 10; ++halving) {
      const Pose cand = Pose(exp_so3(step.head<3>()) * cur.rotation, cur.translation + step.tail<3>()).normalized();
      const double e = detail::icp_objective(cs, cand, cfg.huber_delta);
      if (e <= before) {
        next = cand;
        after = e;
        break;
      }
      step *= 0.5;
    }
    res.objective_before.push_back(before);
    res.objective_after.push_back(after);
    res.correspondences = cs.size();
    const bool stalled = next == cur;
    cur = next;
    if (stalled) break;
  }
  res.pose = cur;
  return res;
}

// ---------------------------------------------------------------------------
// Scoring and selection

/// Renders the model at `pose` and computes gating metrics and residuals.
inline ScoredPose score_pose(const HybridModel& model, const RgbdFrame& frame, const Intrinsics& k, const Pose& pose,
                             const PoseConfig& cfg) {
  ScoredPose s;
  s.pose = pose;
  const auto r = rasterize(model.mesh, model.uncertain, pose, k, RenderFlags{!frame.color.empty(), false});
  s.seen_iou = seen_iou(r, frame.mask);
  try {
    s.uncertainty_rate = uncertainty_rate(r);
  } catch (const Error&) {
    // Nothing rendered: an off-screen hypothesis can never be valid.
    s.uncertainty_rate = 1.0;
    s.geometric_residual = cfg.truncation;
    s.photometric_residual = 1.0;
    s.score = -std::numeric_limits<double>::infinity();
    s.valid = false;
    return s;
  }
  const double lambda = cfg.truncation;
  double geo = 0, photo = 0;
  std::size_t n = 0;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      if (!r.mask(x, y) || r.uncertainty(x, y) || !frame.mask(x, y)) continue;
      const float d = frame.depth(x, y);
      if (!(d > 0)) continue;
      const Vec3 m = back_project(x, y, r.depth(x, y), k), o = back_project(x, y, d, k);
      const Vec3 nrm = pose.rotation * model.face_normals[std::size_t(r.face(x, y))];
      const double res = std::min(std::abs(nrm.dot(o - m)), lambda);
      geo += res * res;
      if (!frame.color.empty()) photo += double((r.color(x, y) - frame.color(x, y)).cwiseAbs().sum()) / 3.0;
      ++n;
    }
  s.geometric_residual = n ? std::sqrt(geo / double(n)) : lambda;
  s.photometric_residual = n ? photo / double(n) : (frame.color.empty() ? 0.0 : 1.0);
  s.score = s.seen_iou - cfg.weights.w_g * s.geometric_residual / lambda - cfg.weights.w_p * s.photometric_residual;
  s.valid = s.seen_iou >= cfg.thresholds.t_s && s.uncertainty_rate <= cfg.thresholds.t_u;
  return s;
}

/// Picks the best gated hypothesis; falls back to the best seen IoU flagged
/// invalid. Ties go to the lowest construction index (`ids`, default 0..n-1).
inline ScoredPose select_scored(const std::vector<ScoredPose>& scored) {
  if (scored.empty()) throw Error(ErrorCode::kEmptySet, "no hypotheses to select from");
  const ScoredPose* best = nullptr;
  for (const auto& s : scored) {
    if (!s.valid) continue;
    if (!best || s.score > best->score || (s.score == best->score && s.index < best->index)) best = &s;
  }
  if (best) return *best;
  for (const auto& s : scored) {
    if (!best || s.seen_iou > best->seen_iou || (s.seen_iou == best->seen_iou && s.index < best->index)) best = &s;
  }
  ScoredPose out = *best;
  out.valid = false;
  return out;
}

inline ScoredPose select_pose(const HybridModel& model, const RgbdFrame& frame, const Intrinsics& k,
                              const std::vector<Pose>& hypotheses, const PoseConfig& cfg,
                              const std::vector<int>& ids = {}) {
  if (hypotheses.empty()) throw Error(ErrorCode::kEmptySet, "no hypotheses to select from");
  if (!ids.empty() && ids.size() != hypotheses.size()) throw Error(ErrorCode::kShapeMismatch, "id list size mismatch");
  std::vector<ScoredPose> scored;
  scored.reserve(hypotheses.size());
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    scored.push_back(score_pose(model, frame, k, hypotheses[i], cfg));
    scored.back().index = ids.empty() ? int(i) : ids[i];
  }
  return select_scored(scored);
}

/// Full estimate: generate, refine every hypothesis, select. `extra`
/// candidates are refined and ranked after the generated ones.
inline ScoredPose estimate_pose(const HybridModel& model, const RgbdFrame& frame, const Intrinsics& k,
                                const PoseConfig& cfg, const std::vector<Pose>& extra = {}) {
  auto hyps = generate_hypotheses(frame, k, cfg.hypothesis);
  hyps.insert(hyps.end(), extra.begin(), extra.end());
  std::vector<Pose> refined;
  refined.reserve(hyps.size());
  for (const auto& h : hyps) refined.push_back(refine_pose(model, frame, k, h, cfg.hypothesis.refine_iters_first, cfg.icp).pose);
  return select_pose(model, frame, k, refined, cfg);
}

/// Refines the previous pose against a new frame and recomputes its metrics.
/// With a motion `prediction`, refinement also starts from it and the better
/// scored result wins (ties keep the previous pose).
inline ScoredPose track_frame(const HybridModel& model, const ScoredPose& prev, const RgbdFrame& frame,
                              const Intrinsics& k, const PoseConfig& cfg, const std::optional<Pose>& prediction = {}) {
  if (!prev.valid) throw Error(ErrorCode::kInvalidPrevious, "tracking requires a valid previous pose");
  std::vector<ScoredPose> scored;
  const Pose starts[2] = {prev.pose, prediction.value_or(prev.pose)};
  for (int i = 0; i < (prediction ? 2 : 1); ++i) {
    const auto refined = refine_pose(model, frame, k, starts[i], cfg.hypothesis.refine_iters_track, cfg.icp);
    scored.push_back(score_pose(model, frame, k, refined.pose, cfg));
    scored.back().index = i;
  }
  ScoredPose s = select_scored(scored);
  s.index = 0;
  return s;
}

/// Constant-velocity extrapolation from the two latest poses.
inline Pose predict_pose(const Pose& before_last, const Pose& last) {
  const Pose delta = last * before_last.inverse();
  Pose p = delta * last;
  p.rotation = orthonormalize(p.rotation);
  return p;
}

}  // namespace seenfuse
