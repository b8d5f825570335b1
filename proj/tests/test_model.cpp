#include <gtest/gtest.h>

#include <filesystem>

#include "seenfuse/bench.hpp"
#include "seenfuse/model.hpp"
#include "test_support.hpp"

using namespace seenfuse;

namespace {

PosedFrame posed(const TriangleMesh& mesh, const Pose& pose, const Intrinsics& k) {
  const auto r = rasterize(mesh, pose, k, RenderFlags{true, false});
  return {{r.color, r.depth, r.mask}, pose, k};
}

RenderOutput random_render(std::mt19937_64& rng, int w, int h) {
  RenderOutput r;
  r.mask = test::random_mask(rng, w, h, 0.5);
  r.uncertainty = test::random_mask(rng, w, h, 0.3);
  return r;
}

}  // namespace

TEST(Metrics, UncertaintyRateExamples) {
  RenderOutput r;
  r.mask = MaskImage(20, 20, 0);
  r.uncertainty = MaskImage(20, 20, 0);
  for (int i = 0; i < 200; ++i) r.mask.pixels[std::size_t(i)] = 1;
  for (int i = 0; i < 40; ++i) r.uncertainty.pixels[std::size_t(i)] = 1;
  EXPECT_DOUBLE_EQ(uncertainty_rate(r), 0.2);
  r.uncertainty = MaskImage(20, 20, 0);
  EXPECT_DOUBLE_EQ(uncertainty_rate(r), 0.0);
  r.uncertainty = r.mask;
  EXPECT_DOUBLE_EQ(uncertainty_rate(r), 1.0);
  r.mask = MaskImage(20, 20, 0);
  try {
    uncertainty_rate(r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUndefinedRate);
  }
}

TEST(Metrics, SeenIouExamples) {
  RenderOutput r;
  r.mask = MaskImage(10, 10, 1);
  r.uncertainty = MaskImage(10, 10, 0);
  const MaskImage test(10, 10, 1);
  EXPECT_DOUBLE_EQ(seen_iou(r, test), 1.0);
  for (int i = 0; i < 50; ++i) r.uncertainty.pixels[std::size_t(i)] = 1;
  EXPECT_DOUBLE_EQ(seen_iou(r, test), 0.5);
  MaskImage disjoint(10, 10, 0);
  r.uncertainty = MaskImage(10, 10, 0);
  r.mask = MaskImage(10, 10, 0);
  for (int i = 0; i < 50; ++i) r.mask.pixels[std::size_t(i)] = 1;
  for (int i = 50; i < 100; ++i) disjoint.pixels[std::size_t(i)] = 1;
  EXPECT_DOUBLE_EQ(seen_iou(r, disjoint), 0.0);
  RenderOutput empty;
  empty.mask = MaskImage(10, 10, 0);
  empty.uncertainty = MaskImage(10, 10, 0);
  EXPECT_DOUBLE_EQ(seen_iou(empty, MaskImage(10, 10, 0)), 0.0);
  EXPECT_THROW(seen_iou(empty, MaskImage(5, 5, 0)), Error);
}

TEST(Metrics, MatchCountingOracle) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = random_render(rng, 37, 23);
    const auto test_mask = test::random_mask(rng, 37, 23, 0.4);
    int m = 0, u = 0, inter = 0, uni = 0;
    for (int y = 0; y < 23; ++y)
      for (int x = 0; x < 37; ++x) {
        const bool in = r.mask(x, y) == 1, unc = r.uncertainty(x, y) == 1, t = test_mask(x, y) == 1;
        m += in;
        u += in && unc;
        inter += (in && !unc) && t;
        uni += (in && !unc) || t;
      }
    ASSERT_GT(m, 0);
    EXPECT_EQ(uncertainty_rate(r), double(u) / double(m));
    EXPECT_EQ(seen_iou(r, test_mask), double(inter) / double(uni));
    // A fully certain rendering reduces to plain mask IoU.
    RenderOutput certain = r;
    certain.uncertainty = MaskImage(37, 23, 0);
    int i2 = 0, u2 = 0;
    for (std::size_t p = 0; p < r.mask.size(); ++p) {
      i2 += r.mask.pixels[p] && test_mask.pixels[p];
      u2 += r.mask.pixels[p] || test_mask.pixels[p];
    }
    EXPECT_EQ(seen_iou(certain, test_mask), double(i2) / double(u2));
  }
}

TEST(BuildModel, ErrorsOnEmptyInput) {
  try {
    build_model({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoReference);
  }
  const Intrinsics k = test::small_camera();
  PosedFrame blank{{ColorImage(k.width, k.height), DepthImage(k.width, k.height, 0.f), MaskImage(k.width, k.height, 0)},
                   Pose(Mat3::Identity(), Vec3(0, 0, 0.5)), k};
  EXPECT_THROW(build_model({blank}), Error);
}

TEST(BuildModel, FullCoverageIsAllCertain) {
  const Intrinsics k = test::small_camera();
  const auto box = make_box(Vec3(0.2, 0.15, 0.1));
  ReferenceSet refs;
  const auto views = icosphere_viewpoints(0);
  for (std::size_t i = 0; i < views.size(); ++i) {
    refs.push_back(posed(box, look_at_pose(0.6 * views.positions[i], Vec3::Zero()), k));
  }
  // Four more oblique views make 16 in total.
  for (int i = 0; i < 4; ++i) refs.push_back(posed(box, orbit_camera(0.6, deg2rad(-50.0), deg2rad(45.0 + 90.0 * i)), k));
  const auto model = build_model(refs, {64, 0.01, 0.02});
  EXPECT_EQ(model.provenance, Provenance::kFromReferences);
  EXPECT_GE(model.certain_area_fraction(), 0.99);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    const Pose p = look_at_pose(0.6 * test::random_vec(rng, -1, 1).normalized(), Vec3::Zero());
    EXPECT_LE(uncertainty_rate(rasterize(model.mesh, model.uncertain, p, k)), 0.01);
  }
}

TEST(BuildModel, SingleFrontalViewMatchesVisibleArea) {
  const Intrinsics k = test::small_camera();
  const Vec3 size(0.2, 0.15, 0.1);
  const auto box = make_box(size);
  const Pose ref = orbit_camera(0.6, deg2rad(30.0), deg2rad(30.0));
  const auto model = build_model({posed(box, ref, k)}, {96, 0.01, 0.02});
  // Rendering from the labeling view shows almost only certain geometry.
  EXPECT_LE(uncertainty_rate(rasterize(model.mesh, model.uncertain, ref, k)), 0.05);
  // Back faces are uncertain: view from the opposite side.
  const Pose back = orbit_camera(0.6, deg2rad(-30.0), deg2rad(210.0));
  EXPECT_GE(uncertainty_rate(rasterize(model.mesh, model.uncertain, back, k)), 0.9);
  // The certain area equals the area of the three box faces the camera sees.
  const Vec3 eye = ref.inverse().translation;
  double visible = 0;
  for (int a = 0; a < 3; ++a) {
    const double face = size[(a + 1) % 3] * size[(a + 2) % 3];
    if (std::abs(eye[a]) > 0.5 * size[a]) visible += face;
  }
  double certain_area = 0;
  const auto dual = vertex_dual_areas(model.mesh);
  for (std::size_t i = 0; i < dual.size(); ++i)
    if (!model.uncertain[i]) certain_area += dual[i];
  EXPECT_NEAR(certain_area / visible, 1.0, 0.1);
}

TEST(BuildModel, CompletionIsMonotone) {
  const Intrinsics k = test::small_camera();
  const auto box = make_box(Vec3(0.2, 0.15, 0.1));
  ReferenceSet refs;
  double prev = 0;
  for (int i = 0; i < 4; ++i) {
    refs.push_back(posed(box, orbit_camera(0.6, deg2rad(30.0), deg2rad(90.0 * i)), k));
    const auto m = build_model(refs, {64, 0.01, 0.02});
    double certain = 0;
    const auto dual = vertex_dual_areas(m.mesh);
    for (std::size_t v = 0; v < dual.size(); ++v)
      if (!m.uncertain[v]) certain += dual[v];
    EXPECT_GE(certain, prev) << i;
    prev = certain;
  }
  // Four raised views around the box see the top and all sides, not the bottom.
  const double seen = 0.2 * 0.1 + 2 * (0.2 * 0.15 + 0.15 * 0.1);
  EXPECT_GT(prev, 0.9 * seen);
  EXPECT_LT(prev, 1.25 * seen);
}

TEST(BuildModel, SaveLoadRoundTrip) {
  const Intrinsics k = test::small_camera();
  const auto box = make_box(Vec3(0.1, 0.1, 0.1));
  const auto model = build_model({posed(box, orbit_camera(0.5, 0.4, 0.3), k)}, {48, 0.01, 0.02});
  const auto path = (std::filesystem::temp_directory_path() / "seenfuse_model.ply").string();
  save_model(path, model);
  const auto back = load_model(path);
  EXPECT_EQ(back.uncertain, model.uncertain);
  EXPECT_EQ(back.mesh.faces, model.mesh.faces);
  EXPECT_EQ(back.provenance, model.provenance);
  ASSERT_EQ(back.label_poses.size(), 1u);
  EXPECT_LT((back.label_poses[0].matrix() - model.label_poses[0].matrix()).norm(), 1e-12);
  for (std::size_t i = 0; i < model.mesh.vertices.size(); ++i)
    ASSERT_LT((back.mesh.vertices[i] - model.mesh.vertices[i]).norm(), 1e-6);
}
