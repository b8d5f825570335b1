#include <gtest/gtest.h>

#include <filesystem>

#include "seenfuse/bench.hpp"
#include "seenfuse/pipeline.hpp"
#include "test_support.hpp"

using namespace seenfuse;
namespace fs = std::filesystem;

namespace {

struct Scene {
  Intrinsics k = test::small_camera();
  TriangleMesh object = make_asymmetric_object();
  std::vector<Pose> gt;
  std::vector<RgbdFrame> frames;

  Scene() {
    gt = turntable_trajectory(30, deg2rad(4.0), 0.65, deg2rad(30.0));
    SyntheticScene s{object, gt, k, 0.0};
    for (auto& f : render_sequence(s)) frames.push_back(f.frame);
  }

  ReferenceSet references(const std::vector<double>& azimuths_deg) const {
    ReferenceSet refs;
    for (double az : azimuths_deg) {
      const Pose p = orbit_camera(0.65, deg2rad(30.0), deg2rad(az));
      const auto r = rasterize(object, p, k, RenderFlags{true, false});
      refs.push_back({{r.color, r.depth, r.mask}, p, k});
    }
    return refs;
  }
};

const Scene& scene() {
  static const Scene s;
  return s;
}

PipelineConfig fast_config() {
  PipelineConfig c;
  c.volume.resolution = 64;
  return c;
}

PipelineResult run(const PipelineConfig& cfg, const ReferenceSet& refs) {
  return run_pipeline(cfg, {refs, {}}, in_memory_sequence(scene().frames, scene().k));
}

std::size_t admissions(const PipelineResult& r) {
  std::size_t n = 0;
  for (const auto& f : r.frames) n += f.admission == "admitted" || f.admission == "first-frame";
  return n;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Config, JsonRoundTripAndValidation) {
  PipelineConfig c;
  c.sampling_k = 7;
  c.thresholds.t_complete = 0.65;
  c.reveal_measure = RevealMeasure::kPixels;
  c.ablation.geodesic_sampling = true;
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.sampling_k, 7u);
  EXPECT_EQ(back.reveal_measure, RevealMeasure::kPixels);
  EXPECT_TRUE(back.violations().empty());

  PipelineConfig bad;
  bad.sampling_k = 1;
  bad.thresholds.t_conf = 1.5;
  EXPECT_EQ(bad.violations().size(), 2u);
  try {
    bad.check();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }

  auto unknown = j;
  unknown["thresholds"]["t_bogus"] = 1;
  EXPECT_THROW(config_from_json(unknown), Error);
  // Partial documents keep defaults for everything else.
  const auto partial = config_from_json(nlohmann::json{{"sampling_k", 4}});
  EXPECT_EQ(partial.sampling_k, 4u);
  EXPECT_EQ(partial.volume.resolution, PipelineConfig{}.volume.resolution);
}

TEST(Pipeline, RequiresExactlyOneModelSource) {
  auto cfg = fast_config();
  try {
    run(cfg, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
  cfg.ablation.first_frame_init = true;
  EXPECT_THROW(run(cfg, scene().references({0.0})), Error);
}

TEST(Pipeline, FullCoverageNeedsNoRebuild) {
  std::vector<double> az;
  for (int i = 0; i < 12; ++i) az.push_back(30.0 * i);
  const auto res = run(fast_config(), scene().references(az));
  ASSERT_EQ(res.frames.size(), scene().frames.size());
  EXPECT_EQ(res.n_rebuild, 0);
  EXPECT_TRUE(res.rebuilds.empty());
  const auto pts = sample_surface(scene().object, 500, 1);
  for (std::size_t i = 0; i < res.frames.size(); ++i) {
    EXPECT_TRUE(res.frames[i].valid) << i;
    EXPECT_LT(add_metric(scene().gt[i], res.frames[i].pose, pts), 0.005) << i;
  }
}

TEST(Pipeline, AblationSwitches) {
  const auto refs = scene().references({0.0, 50.0});
  auto off = fast_config();
  off.ablation.no_completion = true;
  const auto a = run(off, refs);
  EXPECT_EQ(a.n_rebuild, 0);
  for (const auto& f : a.frames) EXPECT_EQ(f.build_stamp, a.initial_model.build_stamp);

  auto always = fast_config();
  always.ablation.always_complete = true;
  const auto b = run(always, refs);
  EXPECT_GT(admissions(b), 1u);
  EXPECT_EQ(b.rebuilds.size(), admissions(b));
  for (const auto& log : b.rebuilds) {
    const auto& adm = b.frames[std::size_t(log.trigger_frame)].admission;
    EXPECT_TRUE(adm == "admitted" || adm == "first-frame") << log.trigger_frame;
  }
}

TEST(Pipeline, LowerCompletionThresholdNeverRebuildsMore) {
  const auto refs = scene().references({0.0, 50.0});
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double t : {0.95, 0.7, 0.4, 0.0}) {
    auto cfg = fast_config();
    cfg.thresholds.t_complete = t;
    const auto r = run(cfg, refs);
    EXPECT_LE(r.rebuilds.size(), prev) << "t_complete " << t;
    prev = r.rebuilds.size();
    if (t == 0.0) EXPECT_EQ(r.rebuilds.size(), 0u);
  }
}

TEST(Pipeline, DeterministicAndRecordsSerialize) {
  const auto refs = scene().references({0.0, 50.0});
  const auto a = run(fast_config(), refs);
  const auto b = run(fast_config(), refs);
  EXPECT_EQ(a.trajectory_jsonl(), b.trajectory_jsonl());
  EXPECT_EQ(a.final_model.mesh.vertices, b.final_model.mesh.vertices);
  const auto j = nlohmann::json::parse(a.trajectory_jsonl().substr(0, a.trajectory_jsonl().find('\n')));
  for (const char* key : {"frame_id", "pose", "seen_iou", "uncertainty_rate", "valid", "tracked_or_reinit", "build_stamp"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["tracked_or_reinit"], "reinit");
}

TEST(Io, PngRoundTrips) {
  const auto dir = fresh_dir("seenfuse_png");
  std::mt19937_64 rng(2);
  ColorImage c(17, 9);
  // Colors are stored as 8-bit channels.
  for (auto& p : c.pixels) p = Rgb(float(rng() % 256), float(rng() % 256), float(rng() % 256)) / 255.f;
  write_color_png((dir / "c.png").string(), c);
  const auto cback = read_color_png((dir / "c.png").string());
  ASSERT_TRUE(cback.same_shape(17, 9));
  for (std::size_t i = 0; i < c.pixels.size(); ++i) EXPECT_LT((cback.pixels[i] - c.pixels[i]).norm(), 1e-6f);

  const auto m = test::random_mask(rng, 17, 9, 0.5);
  write_mask_png((dir / "m.png").string(), m);
  EXPECT_EQ(read_mask_png((dir / "m.png").string()), m);

  DepthImage d(17, 9);
  std::uniform_real_distribution<float> u(0.2f, 3.0f);
  for (auto& p : d.pixels) p = u(rng);
  d.pixels[0] = 0.f;
  write_depth_png((dir / "d.png").string(), d);
  const auto back = read_depth_png((dir / "d.png").string());
  EXPECT_EQ(back, quantize_depth_mm(d));
  for (std::size_t i = 0; i < d.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], d.pixels[i], 0.0005 + 1e-6);

  EXPECT_THROW(read_color_png((dir / "missing.png").string()), Error);

  const Pose p(exp_so3(Vec3(0.3, -0.2, 0.9)), Vec3(0.1, 0.2, 0.7));
  EXPECT_EQ(pose_from_json(pose_to_json(p)).matrix(), p.matrix());
  auto skew = pose_to_json(p);
  skew[0][1] = 2.0;
  EXPECT_THROW(pose_from_json(skew), Error);
}

TEST(Io, SequenceDirectoryIngest) {
  const auto dir = fresh_dir("seenfuse_seq");
  const auto& s = scene();
  for (std::size_t i = 0; i < 3; ++i) write_frame_files((dir / frame_stem(i)).string(), s.frames[i]);
  try {
    directory_sequence(dir.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIngest);
  }
  write_json_file((dir / "intrinsics.json").string(), intrinsics_to_json(s.k));
  const auto seq = directory_sequence(dir.string());
  ASSERT_EQ(seq.count, 3u);
  const auto f1 = seq.load(1);
  EXPECT_EQ(f1.mask, s.frames[1].mask);
  EXPECT_EQ(f1.depth, quantize_depth_mm(s.frames[1].depth));

  fs::remove(dir / (frame_stem(2) + ".mask.png"));
  try {
    seq.load(2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIngest);
    EXPECT_NE(std::string(e.what()).find(frame_stem(2) + ".mask.png"), std::string::npos) << e.what();
  }
  EXPECT_THROW(directory_sequence(fresh_dir("seenfuse_empty").string()), Error);
}
