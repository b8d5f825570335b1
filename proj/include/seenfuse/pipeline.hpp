#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "seenfuse/completion.hpp"
#include "seenfuse/error.hpp"
#include "seenfuse/genmodel.hpp"
#include "seenfuse/io.hpp"
#include "seenfuse/model.hpp"
#include "seenfuse/pose.hpp"
#include "seenfuse/volume.hpp"

namespace seenfuse {

struct AblationFlags {
  bool no_completion = false;      // never rebuild
  bool always_complete = false;    // rebuild on every pool admission
  bool no_filter = false;          // admit without the confidence check
  bool geodesic_sampling = false;  // farthest-rotation instead of greedy sampling
  bool first_frame_init = false;   // initial model from test frame 0
};

/// Every tunable of a run. Serializes to JSON with these exact key names.
struct PipelineConfig {
  HypothesisConfig hypothesis;
  Thresholds thresholds;
  VolumeConfig volume;
  std::size_t sampling_k = 10;
  ScoreWeights score_weights;
  RaycastConfig raycast;
  IcpConfig icp;
  std::uint64_t seed = 0;
  std::size_t pool_capacity = 30;
  RevealMeasure reveal_measure = RevealMeasure::kDualArea;
  RescaleConfig rescale;
  bool rescale_generated = true;
  std::size_t augmentation_views = 24;
  double augmentation_overlap = 0.3;
  AblationFlags ablation;

  PoseConfig pose_config() const {
    PoseConfig p;
    p.hypothesis = hypothesis;
    p.thresholds = thresholds;
    p.weights = score_weights;
    p.icp = icp;
    p.truncation = volume.truncation;
    return p;
  }

  /// Human-readable list of violated constraints (empty when valid).
  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    auto need = [&](bool ok, const char* what) {
      if (!ok) v.emplace_back(what);
    };
    need(hypothesis.n_viewpoints >= 1 && hypothesis.n_viewpoints <= 642, "hypothesis.n_viewpoints must be in [1, 642]");
    need(hypothesis.n_inplane >= 1, "hypothesis.n_inplane must be >= 1");
    need(hypothesis.refine_iters_first >= 0, "hypothesis.refine_iters_first must be >= 0");
    need(hypothesis.refine_iters_track >= 0, "hypothesis.refine_iters_track must be >= 0");
    for (auto [val, name] : {std::pair{thresholds.t_u, "thresholds.t_u"}, std::pair{thresholds.t_s, "thresholds.t_s"},
                             std::pair{thresholds.t_conf, "thresholds.t_conf"},
                             std::pair{thresholds.t_complete, "thresholds.t_complete"}}) {
      if (!(val >= 0 && val <= 1)) v.push_back(std::string(name) + " must lie in [0, 1]");
    }
    need(thresholds.t_geo > 0 && thresholds.t_geo <= kPi, "thresholds.t_geo must lie in (0, pi]");
    need(thresholds.t_gen > 0 && thresholds.t_gen <= kPi, "thresholds.t_gen must lie in (0, pi]");
    need(volume.resolution >= 8 && volume.resolution <= 512, "volume.resolution must be in [8, 512]");
    need(volume.truncation > 0, "volume.truncation must be > 0");
    need(volume.padding >= 0, "volume.padding must be >= 0");
    need(sampling_k >= 2, "sampling_k must be >= 2");
    need(score_weights.w_g >= 0 && score_weights.w_p >= 0, "score_weights must be >= 0");
    need(raycast.alpha > 0, "raycast.alpha must be > 0");
    need(raycast.step >= 0 && raycast.near_band >= 0, "raycast.step and raycast.near_band must be >= 0");
    need(icp.huber_delta > 0 && icp.max_correspondence > 0, "icp distances must be > 0");
    need(icp.pixel_stride >= 1, "icp.pixel_stride must be >= 1");
    need(icp.damping >= 0, "icp.damping must be >= 0");
    need(icp.min_correspondences >= 1, "icp.min_correspondences must be >= 1");
    need(pool_capacity >= 1, "pool_capacity must be >= 1");
    need(rescale.n_scales >= 1 && rescale.n_view >= 1 && rescale.n_view <= 5 && rescale.n_inplane >= 1 &&
             rescale.iterations >= 1,
         "rescale counts out of range (n_view in [1, 5], others >= 1)");
    need(rescale.span >= 0 && rescale.span < 1, "rescale.span must lie in [0, 1)");
    need(rescale.shrink > 0 && rescale.shrink <= 1, "rescale.shrink must lie in (0, 1]");
    need(augmentation_overlap >= 0 && augmentation_overlap <= 1, "augmentation_overlap must lie in [0, 1]");
    need(!(ablation.no_completion && ablation.always_complete), "no_completion and always_complete are exclusive");
    return v;
  }

  void check() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw Error(ErrorCode::kConfig, msg);
  }
};

inline const char* to_string(RevealMeasure m) {
  switch (m) {
    case RevealMeasure::kDualArea: return "dual_area";
    case RevealMeasure::kVertexCount: return "vertex_count";
    case RevealMeasure::kPixels: return "pixels";
  }
  return "unknown";
}

inline RevealMeasure reveal_measure_from_string(const std::string& s) {
  if (s == "dual_area") return RevealMeasure::kDualArea;
  if (s == "vertex_count") return RevealMeasure::kVertexCount;
  if (s == "pixels") return RevealMeasure::kPixels;
  throw Error(ErrorCode::kConfig, "unknown reveal_measure '" + s + "'");
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {
      {"hypothesis",
       {{"n_viewpoints", c.hypothesis.n_viewpoints},
        {"n_inplane", c.hypothesis.n_inplane},
        {"refine_iters_first", c.hypothesis.refine_iters_first},
        {"refine_iters_track", c.hypothesis.refine_iters_track}}},
      {"thresholds",
       {{"t_u", c.thresholds.t_u},
        {"t_s", c.thresholds.t_s},
        {"t_conf", c.thresholds.t_conf},
        {"t_complete", c.thresholds.t_complete},
        {"t_geo", c.thresholds.t_geo},
        {"t_gen", c.thresholds.t_gen}}},
      {"volume", {{"resolution", c.volume.resolution}, {"truncation", c.volume.truncation}, {"padding", c.volume.padding}}},
      {"sampling_k", c.sampling_k},
      {"score_weights", {{"w_g", c.score_weights.w_g}, {"w_p", c.score_weights.w_p}}},
      {"raycast", {{"alpha", c.raycast.alpha}, {"step", c.raycast.step}, {"near_band", c.raycast.near_band}}},
      {"icp",
       {{"huber_delta", c.icp.huber_delta},
        {"max_correspondence", c.icp.max_correspondence},
        {"pixel_stride", c.icp.pixel_stride},
        {"damping", c.icp.damping},
        {"min_correspondences", c.icp.min_correspondences},
        {"min_normal_spread", c.icp.min_normal_spread}}},
      {"seed", c.seed},
      {"pool_capacity", c.pool_capacity},
      {"reveal_measure", to_string(c.reveal_measure)},
      {"rescale",
       {{"n_scales", c.rescale.n_scales},
        {"span", c.rescale.span},
        {"shrink", c.rescale.shrink},
        {"n_view", c.rescale.n_view},
        {"n_inplane", c.rescale.n_inplane},
        {"iterations", c.rescale.iterations},
        {"tilt", c.rescale.tilt}}},
      {"rescale_generated", c.rescale_generated},
      {"augmentation_views", c.augmentation_views},
      {"augmentation_overlap", c.augmentation_overlap},
      {"ablation",
       {{"no_completion", c.ablation.no_completion},
        {"always_complete", c.ablation.always_complete},
        {"no_filter", c.ablation.no_filter},
        {"geodesic_sampling", c.ablation.geodesic_sampling},
        {"first_frame_init", c.ablation.first_frame_init}}},
  };
}

/// Missing keys keep their defaults; unknown keys and wrong types are errors.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  const nlohmann::json known = to_json(c);
  std::vector<std::string> unknown;
  std::function<void(const nlohmann::json&, const nlohmann::json&, const std::string&)> check_keys =
      [&](const nlohmann::json& in, const nlohmann::json& ref, const std::string& prefix) {
        for (auto it = in.begin(); it != in.end(); ++it) {
          if (!ref.contains(it.key())) {
            unknown.push_back(prefix + it.key());
          } else if (it.value().is_object() && ref.at(it.key()).is_object()) {
            check_keys(it.value(), ref.at(it.key()), prefix + it.key() + ".");
          }
        }
      };
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "configuration must be a JSON object");
  check_keys(j, known, "");
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw Error(ErrorCode::kConfig, msg);
  }
  try {
    auto get = [&](const char* section, const char* key, auto& out) {
      if (section) {
        if (j.contains(section) && j.at(section).contains(key)) j.at(section).at(key).get_to(out);
      } else if (j.contains(key)) {
        j.at(key).get_to(out);
      }
    };
    get("hypothesis", "n_viewpoints", c.hypothesis.n_viewpoints);
    get("hypothesis", "n_inplane", c.hypothesis.n_inplane);
    get("hypothesis", "refine_iters_first", c.hypothesis.refine_iters_first);
    get("hypothesis", "refine_iters_track", c.hypothesis.refine_iters_track);
    get("thresholds", "t_u", c.thresholds.t_u);
    get("thresholds", "t_s", c.thresholds.t_s);
    get("thresholds", "t_conf", c.thresholds.t_conf);
    get("thresholds", "t_complete", c.thresholds.t_complete);
    get("thresholds", "t_geo", c.thresholds.t_geo);
    get("thresholds", "t_gen", c.thresholds.t_gen);
    get("volume", "resolution", c.volume.resolution);
    get("volume", "truncation", c.volume.truncation);
    get("volume", "padding", c.volume.padding);
    get(nullptr, "sampling_k", c.sampling_k);
    get("score_weights", "w_g", c.score_weights.w_g);
    get("score_weights", "w_p", c.score_weights.w_p);
    get("raycast", "alpha", c.raycast.alpha);
    get("raycast", "step", c.raycast.step);
    get("raycast", "near_band", c.raycast.near_band);
    get("icp", "huber_delta", c.icp.huber_delta);
    get("icp", "max_correspondence", c.icp.max_correspondence);
    get("icp", "pixel_stride", c.icp.pixel_stride);
    get("icp", "damping", c.icp.damping);
    get("icp", "min_correspondences", c.icp.min_correspondences);
    get("icp", "min_normal_spread", c.icp.min_normal_spread);
    get(nullptr, "seed", c.seed);
    get(nullptr, "pool_capacity", c.pool_capacity);
    if (j.contains("reveal_measure")) c.reveal_measure = reveal_measure_from_string(j.at("reveal_measure").get<std::string>());
    get("rescale", "n_scales", c.rescale.n_scales);
    get("rescale", "span", c.rescale.span);
    get("rescale", "shrink", c.rescale.shrink);
    get("rescale", "n_view", c.rescale.n_view);
    get("rescale", "n_inplane", c.rescale.n_inplane);
    get("rescale", "iterations", c.rescale.iterations);
    get("rescale", "tilt", c.rescale.tilt);
    get(nullptr, "rescale_generated", c.rescale_generated);
    get(nullptr, "augmentation_views", c.augmentation_views);
    get(nullptr, "augmentation_overlap", c.augmentation_overlap);
    get("ablation", "no_completion", c.ablation.no_completion);
    get("ablation", "always_complete", c.ablation.always_complete);
    get("ablation", "no_filter", c.ablation.no_filter);
    get("ablation", "geodesic_sampling", c.ablation.geodesic_sampling);
    get("ablation", "first_frame_init", c.ablation.first_frame_init);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad configuration value: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Run loop

/// Frames are produced on demand so long sequences need not sit in memory.
struct FrameSequence {
  Intrinsics k;
  std::size_t count = 0;
  std::function<RgbdFrame(std::size_t)> load;
};

inline FrameSequence in_memory_sequence(const std::vector<RgbdFrame>& frames, const Intrinsics& k) {
  return {k, frames.size(), [&frames](std::size_t i) { return frames.at(i); }};
}

inline FrameSequence directory_sequence(const std::string& root) {
  auto seq = std::make_shared<SequenceDir>(open_sequence(root));
  return {seq->k, seq->stems.size(), [seq](std::size_t i) { return load_sequence_frame(*seq, i); }};
}

struct FrameRecord {
  int frame_id = 0;
  Pose pose;
  double seen_iou = 0;
  double uncertainty_rate = 1;
  bool valid = false;
  bool tracked = false;  // false: full hypothesis search on this frame
  int build_stamp = 0;
  std::string admission;
  bool rebuilt = false;

  nlohmann::json to_json() const {
    return {{"frame_id", frame_id},
            {"pose", pose_to_json(pose)},
            {"seen_iou", seen_iou},
            {"uncertainty_rate", uncertainty_rate},
            {"valid", valid},
            {"tracked_or_reinit", tracked ? "tracked" : "reinit"},
            {"build_stamp", build_stamp},
            {"admission", admission},
            {"rebuilt", rebuilt}};
  }
};

struct RebuildLogEntry {
  int trigger_frame = 0;
  std::vector<int> selected_ids;
  double duration = 0;
  double certain_fraction_before = 0;
  double certain_fraction_after = 0;
  bool ok = false;
  std::string message;
  std::size_t active_augmentation = 0;

  nlohmann::json to_json() const {
    return {{"trigger_frame", trigger_frame},
            {"selected_ids", selected_ids},
            {"duration", duration},
            {"certain_fraction_before", certain_fraction_before},
            {"certain_fraction_after", certain_fraction_after},
            {"ok", ok},
            {"message", message},
            {"active_augmentation", active_augmentation}};
  }
};

struct PipelineInputs {
  ReferenceSet references;
  std::optional<GeneratedModelInput> generated;
};

struct PipelineResult {
  std::vector<FrameRecord> frames;
  HybridModel initial_model;
  HybridModel final_model;
  std::vector<RebuildLogEntry> rebuilds;
  int n_rebuild = 0;  // successful rebuilds
  MemoryPool pool;
  std::optional<double> generated_scale;  // total factor applied to a generated mesh
  std::optional<AugmentationSet> augmentation;  // final state, generated path only

  std::vector<Pose> trajectory() const {
    std::vector<Pose> t;
    for (const auto& f : frames) t.push_back(f.pose);
    return t;
  }

  std::string trajectory_jsonl() const {
    std::ostringstream out;
    for (const auto& f : frames) out << f.to_json().dump() << "\n";
    return out.str();
  }

  std::string rebuild_log_jsonl() const {
    std::ostringstream out;
    for (const auto& r : rebuilds) out << r.to_json().dump() << "\n";
    return out.str();
  }
};

/// Optional per-frame progress hook.
using ProgressFn = std::function<void(const FrameRecord&)>;

/// Estimates a pose for every frame: full search on the first frame and
/// whenever tracking loses validity, tracking otherwise. Confident, diverse
/// frames enter the memory pool; the model is rebuilt when the seen IoU drops
/// below the completion threshold and the pool changed since the last rebuild.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineInputs& inputs, const FrameSequence& seq,
                                   const ProgressFn& progress = {}) {
  cfg.check();
  if (seq.count == 0) throw Error(ErrorCode::kIngest, "test sequence has no frames");
  seq.k.check();
  const int sources = int(!inputs.references.empty()) + int(inputs.generated.has_value()) + int(cfg.ablation.first_frame_init);
  if (sources != 1) {
    throw Error(ErrorCode::kConfig, "provide exactly one of: references, a generated mesh, or first-frame initialization");
  }
  const PoseConfig pcfg = cfg.pose_config();
  const Thresholds& th = cfg.thresholds;
  PipelineResult res;
  res.pool.capacity = cfg.pool_capacity;
  ReferenceSet refs = inputs.references;
  std::optional<AugmentationSet> aug;
  HybridModel model;
  std::optional<ScoredPose> first_pose;  // preset pose for frame 0

  const RgbdFrame frame0 = seq.load(0);
  if (count_nonzero(frame0.mask) == 0) throw Error(ErrorCode::kIngest, "first test frame has an empty mask");
  if (cfg.ablation.first_frame_init) {
    const Pose p0(Mat3::Identity(), init_translation(frame0.depth, frame0.mask, seq.k));
    refs = {{frame0, p0, seq.k}};
    model = build_model(refs, cfg.volume);
    first_pose = score_pose(model, frame0, seq.k, p0, pcfg);
  } else if (inputs.generated) {
    auto init = init_generated_model(*inputs.generated);
    model = init.model;
    if (cfg.rescale_generated) {
      const auto coarse = coarse_scale(model, frame0, seq.k);
      const auto fine = fine_scale(coarse.model, frame0, seq.k, inputs.generated->assumed_reference_pose.rotation,
                                   cfg.rescale, pcfg);
      model = fine.model;
      model.provenance = Provenance::kFromGenerated;
      res.generated_scale = coarse.factor * fine.factor;
      first_pose = fine.pose;
    }
    aug = render_augmentation(model, seq.k, cfg.augmentation_views);
  } else {
    model = build_model(refs, cfg.volume);
  }
  res.initial_model = model;

  const bool generated = inputs.generated.has_value();
  bool switched = !generated;  // generated models wait for enough rotation
  std::optional<Pose> initial_pose;
  int pool_version_at_rebuild = -1;
  ScoredPose prev, before_prev;
  bool have_prev = false, have_before_prev = false;

  for (std::size_t i = 0; i < seq.count; ++i) {
    const RgbdFrame frame = i == 0 ? frame0 : seq.load(i);
    frame.check_shapes();
    if (!frame.depth.same_shape(seq.k.width, seq.k.height)) {
      throw Error(ErrorCode::kIngest, "frame " + std::to_string(i) + " does not match the intrinsics resolution");
    }
    FrameRecord rec;
    rec.frame_id = int(i);
    ScoredPose s;
    if (i == 0 && first_pose) {
      s = *first_pose;
    } else if (have_prev && prev.valid) {
      std::optional<Pose> prediction;
      if (have_before_prev) prediction = predict_pose(before_prev.pose, prev.pose);
      s = track_frame(model, prev, frame, seq.k, pcfg, prediction);
      rec.tracked = true;
      if (!s.valid) {
        // Tracking lost: full search, keeping the tracked pose as a candidate.
        s = estimate_pose(model, frame, seq.k, pcfg, {s.pose});
        rec.tracked = false;
      }
    } else {
      s = estimate_pose(model, frame, seq.k, pcfg, have_prev ? std::vector<Pose>{prev.pose} : std::vector<Pose>{});
    }
    if (!initial_pose) initial_pose = s.pose;

    const auto admit = try_admit(res.pool, int(i), frame, seq.k, s, th, !cfg.ablation.no_filter);
    rec.admission = to_string(admit.outcome);
    if (!switched && should_switch(*initial_pose, s.pose, th)) switched = true;

    bool trigger = false;
    if (!cfg.ablation.no_completion && switched) {
      if (cfg.ablation.always_complete) {
        trigger = admit.admitted();
      } else {
        trigger = needs_completion(s, th) && res.pool.version != pool_version_at_rebuild;
      }
    }
    if (trigger) {
      pool_version_at_rebuild = res.pool.version;
      const auto sampling = cfg.ablation.geodesic_sampling
                                ? sample_frames_geodesic(res.pool, cfg.sampling_k)
                                : sample_frames(res.pool, model, cfg.sampling_k, cfg.reveal_measure);
      if (aug) filter_augmentation(*aug, model, cfg.augmentation_overlap);
      const ReferenceSet no_refs;
      auto rb = rebuild(res.pool, sampling, model, generated ? no_refs : refs, cfg.volume, aug ? &*aug : nullptr);
      RebuildLogEntry log;
      log.trigger_frame = int(i);
      log.selected_ids = rb.selected_ids;
      log.duration = rb.seconds;
      log.certain_fraction_before = rb.certain_before;
      log.certain_fraction_after = rb.certain_after;
      log.ok = rb.ok;
      log.message = rb.message;
      log.active_augmentation = aug ? aug->active_count() : 0;
      res.rebuilds.push_back(log);
      if (rb.ok) {
        model = std::move(rb.model);
        ++res.n_rebuild;
        rec.rebuilt = true;
        // Labels changed, so the gating metrics must be recomputed.
        const int index = s.index;
        s = score_pose(model, frame, seq.k, s.pose, pcfg);
        s.index = index;
      }
    }
    rec.pose = s.pose;
    rec.seen_iou = s.seen_iou;
    rec.uncertainty_rate = s.uncertainty_rate;
    rec.valid = s.valid;
    rec.build_stamp = model.build_stamp;
    res.frames.push_back(rec);
    if (progress) progress(rec);
    // Velocity is only trusted across two consecutive valid poses.
    have_before_prev = have_prev && prev.valid && s.valid;
    before_prev = prev;
    prev = s;
    have_prev = true;
  }
  res.final_model = model;
  res.augmentation = std::move(aug);
  return res;
}

}  // namespace seenfuse
