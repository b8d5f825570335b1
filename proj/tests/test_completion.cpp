#include <gtest/gtest.h>

#include <filesystem>

#include "seenfuse/bench.hpp"
#include "seenfuse/completion.hpp"
#include "test_support.hpp"

using namespace seenfuse;

namespace {

ScoredPose scored_at(const Mat3& r, double seen) {
  ScoredPose s;
  s.pose = Pose(r, Vec3(0, 0, 0.6));
  s.seen_iou = seen;
  s.valid = true;
  return s;
}

RgbdFrame blank_frame() {
  const Intrinsics k = test::small_camera();
  return {ColorImage(k.width, k.height), DepthImage(k.width, k.height, 0.6f), MaskImage(k.width, k.height, 1)};
}

PoolEntry entry_from(const TriangleMesh& mesh, const Pose& pose, int id) {
  const Intrinsics k = test::small_camera();
  const auto r = rasterize(mesh, pose, k, RenderFlags{true, false});
  return {id, {{r.color, r.depth, r.mask}, pose, k}, 1.0};
}

HybridModel all_uncertain(const TriangleMesh& mesh) {
  HybridModel m;
  m.mesh = mesh;
  m.uncertain.assign(mesh.vertices.size(), 1);
  m.visibility_eps = 0.5 * median_edge_length(mesh);
  m.finalize();
  return m;
}

Pose view_from(const Vec3& dir, double distance = 0.6) { return look_at_pose(distance * dir.normalized(), Vec3::Zero()); }

}  // namespace

TEST(TryAdmit, Examples) {
  const Thresholds th;
  MemoryPool pool;
  const auto frame = blank_frame();
  const Intrinsics k = test::small_camera();
  // First frame is admitted regardless of confidence.
  EXPECT_EQ(try_admit(pool, 0, frame, k, scored_at(Mat3::Identity(), 0.1), th).outcome, AdmitOutcome::kFirstFrame);
  EXPECT_EQ(try_admit(pool, 1, frame, k, scored_at(rot_y(deg2rad(5.0)), 0.9), th).outcome, AdmitOutcome::kTooClose);
  EXPECT_EQ(try_admit(pool, 2, frame, k, scored_at(rot_y(deg2rad(15.0)), 0.4), th).outcome,
            AdmitOutcome::kLowConfidence);
  // Confidence gating can be switched off.
  EXPECT_EQ(try_admit(pool, 3, frame, k, scored_at(rot_y(deg2rad(15.0)), 0.4), th, false).outcome,
            AdmitOutcome::kAdmitted);
  EXPECT_EQ(pool.size(), 2u);
  EXPECT_EQ(pool.version, 2);
  // Exactly t_geo away is not enough.
  EXPECT_EQ(try_admit(pool, 4, frame, k, scored_at(rot_y(deg2rad(15.0) + th.t_geo), 0.9), th).outcome,
            AdmitOutcome::kTooClose);
  pool.capacity = 2;
  EXPECT_EQ(try_admit(pool, 5, frame, k, scored_at(rot_y(deg2rad(40.0)), 0.9), th).outcome, AdmitOutcome::kPoolFull);
  EXPECT_EQ(pool.size(), 2u);
}

TEST(TryAdmit, InvariantsHoldOverRandomSequences) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  const auto frame = blank_frame();
  const Intrinsics k = test::small_camera();
  for (int trial = 0; trial < 20; ++trial) {
    Thresholds th;
    th.t_geo = deg2rad(5.0 + 20.0 * u(rng));
    th.t_conf = u(rng);
    MemoryPool pool;
    pool.capacity = 1 + std::size_t(u(rng) * 12);
    Mat3 r = Mat3::Identity();
    for (int i = 0; i < 80; ++i) {
      r = exp_so3(deg2rad(15.0) * test::random_vec(rng, -1, 1)) * r;
      try_admit(pool, i, frame, k, scored_at(orthonormalize(r), u(rng)), th);
    }
    ASSERT_LE(pool.size(), pool.capacity);
    for (std::size_t i = 1; i < pool.size(); ++i) {
      EXPECT_GT(geodesic_distance(pool.entries[i - 1].frame.pose.rotation, pool.entries[i].frame.pose.rotation), th.t_geo);
      EXPECT_GE(pool.entries[i].seen_iou, th.t_conf);
      EXPECT_GT(pool.entries[i].frame_id, pool.entries[i - 1].frame_id);
    }
  }
}

TEST(NeedsCompletion, StrictThreshold) {
  const Thresholds th;
  EXPECT_TRUE(needs_completion(scored_at(Mat3::Identity(), 0.65), th));
  EXPECT_FALSE(needs_completion(scored_at(Mat3::Identity(), 0.7), th));
  EXPECT_FALSE(needs_completion(scored_at(Mat3::Identity(), 1.0), th));
}

TEST(SampleFrames, SmallPoolAndErrors) {
  const auto sphere = make_sphere(0.1, 2);
  const auto model = all_uncertain(sphere);
  MemoryPool pool;
  for (int i = 0; i < 5; ++i) pool.entries.push_back(entry_from(sphere, view_from(Vec3(std::sin(i), 0.2, std::cos(i))), i));
  const auto all = sample_frames(pool, model, 8);
  EXPECT_EQ(all.selected, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  try {
    sample_frames(pool, model, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidK);
  }
  EXPECT_THROW(sample_frames(MemoryPool{}, model, 4), Error);
}

TEST(SampleFrames, SharedViewpointFillsLowestIndices) {
  const auto sphere = make_sphere(0.1, 2);
  const auto model = all_uncertain(sphere);
  MemoryPool pool;
  for (int i = 0; i < 7; ++i) pool.entries.push_back(entry_from(sphere, view_from(Vec3(0.3, 0.2, 1)), i));
  const auto s = sample_frames(pool, model, 4);
  EXPECT_EQ(s.selected, (std::vector<std::size_t>{0, 6, 1, 2}));
}

TEST(SampleFrames, AlternatesHemispheres) {
  const auto sphere = make_sphere(0.1, 2);
  const auto model = all_uncertain(sphere);
  MemoryPool pool;
  // Entries 0..3 look from +z, 4..7 from -z, with small jitter.
  for (int i = 0; i < 8; ++i) {
    const double side = i < 4 ? 1.0 : -1.0;
    pool.entries.push_back(entry_from(sphere, view_from(Vec3(0.1 * (i % 4), 0.05 * (i % 3), side)), i));
  }
  // Seed with a +z and a -z view; the greedy picks must keep covering new ground.
  const auto s = sample_frames(pool, model, 4, RevealMeasure::kVertexCount);
  ASSERT_EQ(s.selected.size(), 4u);
  EXPECT_EQ(s.selected[0], 0u);
  EXPECT_EQ(s.selected[1], 7u);
  // Greedy marginal gains of a coverage objective never increase.
  for (std::size_t i = 3; i < s.newly_revealed.size(); ++i) EXPECT_LE(s.newly_revealed[i], s.newly_revealed[i - 1]);
  EXPECT_GT(s.newly_revealed[1], 0.0);
}

TEST(SampleFrames, GreedyStepIsOptimal) {
  std::mt19937_64 rng(17);
  const auto sphere = make_sphere(0.1, 2);
  for (int trial = 0; trial < 10; ++trial) {
    auto model = all_uncertain(sphere);
    // Random partial certainty so the measure is not uniform.
    std::bernoulli_distribution coin(0.3);
    for (auto& u : model.uncertain) u = coin(rng) ? 0 : 1;
    MemoryPool pool;
    const int n = 5 + int(rng() % 4);
    for (int i = 0; i < n; ++i) pool.entries.push_back(entry_from(sphere, view_from(test::random_vec(rng, -1, 1)), i));
    for (auto measure : {RevealMeasure::kVertexCount, RevealMeasure::kDualArea}) {
      const auto s = sample_frames(pool, model, 4, measure);
      // Oracle: recount revealed uncertain weight from scratch for every
      // remaining candidate at every step.
      std::vector<std::vector<std::uint8_t>> vis;
      for (const auto& e : pool.entries)
        vis.push_back(vertex_visibility(sphere, e.frame.pose, e.frame.k, &e.frame.frame.mask, model.visibility_eps));
      const auto area = vertex_dual_areas(sphere);
      auto weight = [&](std::size_t v) { return measure == RevealMeasure::kVertexCount ? 1.0 : area[v]; };
      for (std::size_t step = 2; step < s.selected.size(); ++step) {
        auto gain = [&](std::size_t cand) {
          double g = 0;
          for (std::size_t v = 0; v < sphere.vertices.size(); ++v) {
            if (!model.uncertain[v] || !vis[cand][v]) continue;
            bool seen = false;
            for (std::size_t j = 0; j < step; ++j) seen = seen || vis[s.selected[j]][v];
            if (!seen) g += weight(v);
          }
          return g;
        };
        const double picked = gain(s.selected[step]);
        for (std::size_t c = 0; c < pool.size(); ++c) {
          if (std::find(s.selected.begin(), s.selected.begin() + long(step), c) != s.selected.begin() + long(step)) continue;
          EXPECT_GE(picked + 1e-12, gain(c)) << "trial " << trial << " step " << step;
        }
      }
    }
  }
}

TEST(SampleFrames, GeodesicSamplingSpreadsRotations) {
  MemoryPool pool;
  for (int i = 0; i < 10; ++i) {
    PoolEntry e;
    e.frame_id = i;
    e.frame.pose = Pose(rot_y(deg2rad(12.0 * i)), Vec3(0, 0, 0.6));
    pool.entries.push_back(e);
  }
  const auto s = sample_frames_geodesic(pool, 3);
  // Seeds 0 (0 deg) and 9 (108 deg); the middle (index 4 or 5) is farthest; ties go low.
  EXPECT_EQ(s.selected, (std::vector<std::size_t>{0, 9, 4}));
}

TEST(Rebuild, FullCoverageDeterminismAndFallback) {
  const Intrinsics k = test::small_camera();
  const auto box = make_box(Vec3(0.2, 0.15, 0.1));
  ReferenceSet refs{entry_from(box, orbit_camera(0.6, deg2rad(30.0), 0.0), 0).frame};
  const auto initial = build_model(refs, {64, 0.01, 0.02});
  MemoryPool pool;
  for (int i = 0; i < 12; ++i) pool.entries.push_back(entry_from(box, orbit_camera(0.6, deg2rad(i % 2 ? 35.0 : -35.0), deg2rad(30.0 * i)), i));
  SamplingResult all;
  for (std::size_t i = 0; i < pool.size(); ++i) all.selected.push_back(i);
  const auto a = rebuild(pool, all, initial, refs, {64, 0.01, 0.02});
  ASSERT_TRUE(a.ok) << a.message;
  EXPECT_EQ(a.model.provenance, Provenance::kRebuilt);
  EXPECT_EQ(a.model.build_stamp, initial.build_stamp + 1);
  EXPECT_GE(a.model.certain_area_fraction(), 0.95);
  EXPECT_GT(a.certain_after, a.certain_before);
  const auto b = rebuild(pool, all, initial, refs, {64, 0.01, 0.02});
  EXPECT_EQ(a.model.mesh.vertices, b.model.mesh.vertices);
  EXPECT_EQ(a.model.mesh.faces, b.model.mesh.faces);
  EXPECT_EQ(a.model.uncertain, b.model.uncertain);
  // A pool without depth cannot be fused: the old model survives.
  MemoryPool empty_depth = pool;
  for (auto& e : empty_depth.entries) e.frame.frame.depth = DepthImage(k.width, k.height, 0.f);
  const auto c = rebuild(empty_depth, all, initial, {}, {64, 0.01, 0.02});
  EXPECT_FALSE(c.ok);
  EXPECT_EQ(c.model.mesh.vertices, initial.mesh.vertices);
  EXPECT_EQ(c.model.build_stamp, initial.build_stamp);
  EXPECT_THROW(rebuild(pool, SamplingResult{}, initial, refs, {}), Error);
}

TEST(Rebuild, AugmentationNeverMarksCertain) {
  const Intrinsics k = test::small_camera();
  const auto box = make_box(Vec3(0.2, 0.15, 0.1));
  const auto old = all_uncertain(box);
  // One real frame plus renderings from all around.
  MemoryPool pool;
  const Pose real_pose = orbit_camera(0.6, deg2rad(30.0), deg2rad(20.0));
  pool.entries.push_back(entry_from(box, real_pose, 0));
  AugmentationSet aug;
  for (int i = 0; i < 8; ++i) {
    aug.frames.push_back(entry_from(box, orbit_camera(0.6, deg2rad(i % 2 ? 40.0 : -40.0), deg2rad(45.0 * i)), 0).frame);
    aug.active.push_back(1);
  }
  const auto r = rebuild(pool, SamplingResult{{0}, {0}}, old, {}, {64, 0.01, 0.02}, &aug);
  ASSERT_TRUE(r.ok) << r.message;
  const auto vis = vertex_visibility(r.model.mesh, real_pose, k, &pool.entries[0].frame.frame.mask, r.model.visibility_eps);
  for (std::size_t i = 0; i < vis.size(); ++i) ASSERT_EQ(r.model.uncertain[i], vis[i] ? 0 : 1);
  // The augmentation closed the surface far better than one view could.
  EXPECT_LT(chamfer(r.model.mesh, box, 4000), 0.5);
}

TEST(Pool, CheckpointRoundTrip) {
  const auto box = make_box(Vec3(0.2, 0.15, 0.1));
  MemoryPool pool;
  for (int i = 0; i < 3; ++i) pool.entries.push_back(entry_from(box, orbit_camera(0.6, 0.3, 0.4 * i), 10 * i));
  const auto dir = (std::filesystem::temp_directory_path() / "seenfuse_pool").string();
  std::filesystem::remove_all(dir);
  save_pool(dir, pool);
  const auto back = load_pool(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.entries[i].frame_id, pool.entries[i].frame_id);
    EXPECT_EQ(back.entries[i].frame.pose.matrix(), pool.entries[i].frame.pose.matrix());
    EXPECT_EQ(back.entries[i].frame.frame.mask, pool.entries[i].frame.frame.mask);
    EXPECT_EQ(back.entries[i].frame.frame.depth, quantize_depth_mm(pool.entries[i].frame.frame.depth));
  }
}
