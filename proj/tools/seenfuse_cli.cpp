#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "seenfuse/bench.hpp"
#include "seenfuse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace seenfuse;

namespace {

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIngest:
    case ErrorCode::kIo:
    case ErrorCode::kAlignment:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kEmptyMesh:
      return 2;
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidK:
      return 3;
    case ErrorCode::kReconstructionFailure:
    case ErrorCode::kEmptyModel:
    case ErrorCode::kNoReference:
    case ErrorCode::kDegenerateObservation:
      return 4;
    default:
      return 1;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

/// A reference directory is a sequence directory whose frames also carry a
/// `NNNNNN.pose.json` object-to-camera pose.
ReferenceSet load_references(const std::string& dir) {
  const auto seq = open_sequence(dir);
  ReferenceSet refs;
  for (std::size_t i = 0; i < seq.stems.size(); ++i) {
    const auto pose_path = (fs::path(dir) / (seq.stems[i] + ".pose.json")).string();
    if (!fs::exists(pose_path)) throw Error(ErrorCode::kIngest, "missing reference pose " + pose_path);
    refs.push_back({load_sequence_frame(seq, i), pose_from_json(read_json_file(pose_path)), seq.k});
  }
  return refs;
}

std::vector<Pose> read_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIngest, "cannot read " + path);
  std::vector<Pose> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      poses.push_back(pose_from_json(j.contains("pose") ? j.at("pose") : j));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kIngest, path + ": " + e.what());
    }
  }
  return poses;
}

struct RunArgs {
  std::string sequence, references, generated_mesh, reference_image, reference_mask, reference_pose, config, out;
  AblationFlags ablation;
  bool verbose = false;
};

int cmd_run(const RunArgs& a) {
  PipelineConfig cfg;
  if (!a.config.empty()) cfg = config_from_json(read_json_file(a.config));
  cfg.ablation.no_completion |= a.ablation.no_completion;
  cfg.ablation.always_complete |= a.ablation.always_complete;
  cfg.ablation.no_filter |= a.ablation.no_filter;
  cfg.ablation.geodesic_sampling |= a.ablation.geodesic_sampling;
  cfg.ablation.first_frame_init |= a.ablation.first_frame_init;
  cfg.check();

  const auto seq = directory_sequence(a.sequence);
  PipelineInputs inputs;
  if (!a.references.empty()) inputs.references = load_references(a.references);
  if (!a.generated_mesh.empty()) {
    if (a.reference_mask.empty()) throw Error(ErrorCode::kIngest, "--generated-mesh needs --reference-mask");
    GeneratedModelInput g;
    g.mesh = read_mesh(a.generated_mesh);
    g.k = seq.k;
    g.reference_mask = read_mask_png(a.reference_mask);
    g.reference_image = a.reference_image.empty() ? ColorImage(seq.k.width, seq.k.height, Rgb(0.5f, 0.5f, 0.5f))
                                                  : read_color_png(a.reference_image);
    if (!a.reference_pose.empty()) {
      g.assumed_reference_pose = pose_from_json(read_json_file(a.reference_pose));
    } else {
      // Canonical front view: identity rotation, object centered in front of the camera.
      g.assumed_reference_pose = Pose(Mat3::Identity(), Vec3(0, 0, 2.5 * point_set_diameter(g.mesh.vertices)));
    }
    inputs.generated = std::move(g);
  }

  fs::create_directories(a.out);
  write_json_file((fs::path(a.out) / "config.json").string(), to_json(cfg));
  const auto res = run_pipeline(cfg, inputs, seq, [&](const FrameRecord& r) {
    if (a.verbose) std::cerr << r.to_json().dump() << "\n";
  });
  write_text(fs::path(a.out) / "trajectory.jsonl", res.trajectory_jsonl());
  write_text(fs::path(a.out) / "rebuild_log.jsonl", res.rebuild_log_jsonl());
  save_model((fs::path(a.out) / "initial_model.ply").string(), res.initial_model);
  save_model((fs::path(a.out) / "final_model.ply").string(), res.final_model);
  save_pool((fs::path(a.out) / "pool").string(), res.pool);
  if (res.augmentation) save_augmentation((fs::path(a.out) / "augmentation").string(), *res.augmentation);
  std::size_t valid = 0;
  for (const auto& f : res.frames) valid += f.valid;
  nlohmann::json summary{{"frames", res.frames.size()},
                         {"valid_frames", valid},
                         {"n_rebuild", res.n_rebuild},
                         {"rebuild_attempts", res.rebuilds.size()},
                         {"pool_size", res.pool.size()},
                         {"initial_certain_fraction", res.initial_model.certain_fraction()},
                         {"final_certain_fraction", res.final_model.certain_fraction()}};
  if (res.generated_scale) summary["generated_scale"] = *res.generated_scale;
  write_json_file((fs::path(a.out) / "summary.json").string(), summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

struct EvalArgs {
  std::string trajectory, gt, gt_mesh, mesh, csv;
  std::size_t points = 1000;
};

int cmd_evaluate(const EvalArgs& a) {
  const auto est = read_trajectory(a.trajectory);
  const auto gt = read_trajectory(a.gt);
  const auto gt_mesh = read_mesh(a.gt_mesh);
  auto report = evaluate_poses(est, gt, sample_surface(gt_mesh, a.points, 0));
  if (!a.mesh.empty()) report.chamfer_cm = chamfer(read_mesh(a.mesh), gt_mesh);
  if (!a.csv.empty()) write_text(a.csv, report.to_csv());
  auto j = report.to_json();
  j.erase("per_frame");
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct SynthArgs {
  std::string out, object = "asymmetric", scene, trajectory = "turntable", occluder;
  std::size_t frames = 180;
  double step_deg = 2.0, distance = 0.65, elevation_deg = 30.0, noise = 0.002;
  std::vector<double> reference_azimuths{0.0, 50.0};
  std::uint64_t seed = 7;
};

TriangleMesh synth_object(const std::string& name) {
  if (fs::exists(name)) return read_mesh(name);
  if (name == "asymmetric") return make_asymmetric_object();
  if (name == "box") return make_box(Vec3(0.2, 0.2, 0.2));
  if (name == "sphere") return make_sphere(0.1, 3);
  if (name == "cylinder") return make_cylinder(0.06, 0.2, 48);
  throw Error(ErrorCode::kConfig, "unknown object '" + name + "' (mesh path, asymmetric, box, sphere, cylinder)");
}

/// Overrides synth arguments from a scene file:
/// {"mesh", "trajectory": "turntable"|"tumble", "frames", "step_deg", "sigma",
///  "distance", "elevation_deg", "seed", "reference_azimuths",
///  "occluder": {"mesh", "pose"}}.
void apply_scene_file(SynthArgs& a, Pose& occluder_pose) {
  const auto j = read_json_file(a.scene);
  static const std::set<std::string> known{"mesh",     "trajectory",    "frames", "step_deg",           "sigma",
                                           "distance", "elevation_deg", "seed",   "reference_azimuths", "occluder"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw Error(ErrorCode::kConfig, "unknown scene key '" + key + "'");
  try {
    a.object = j.value("mesh", a.object);
    a.trajectory = j.value("trajectory", a.trajectory);
    a.frames = j.value("frames", a.frames);
    a.step_deg = j.value("step_deg", a.step_deg);
    a.noise = j.value("sigma", a.noise);
    a.distance = j.value("distance", a.distance);
    a.elevation_deg = j.value("elevation_deg", a.elevation_deg);
    a.seed = j.value("seed", a.seed);
    a.reference_azimuths = j.value("reference_azimuths", a.reference_azimuths);
    if (j.contains("occluder")) {
      a.occluder = j.at("occluder").at("mesh").get<std::string>();
      occluder_pose = pose_from_json(j.at("occluder").at("pose"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, a.scene + ": " + e.what());
  }
}

/// Writes a test sequence, ground truth, reference views and the object mesh.
int cmd_synth(SynthArgs a) {
  Pose occluder_pose;
  if (!a.scene.empty()) apply_scene_file(a, occluder_pose);
  const Intrinsics k{600.0, 600.0, 320.0, 240.0, 640, 480};
  const auto object = synth_object(a.object);
  std::vector<Pose> trajectory;
  if (a.trajectory == "turntable") {
    trajectory = turntable_trajectory(a.frames, deg2rad(a.step_deg), a.distance, deg2rad(a.elevation_deg));
  } else if (a.trajectory == "tumble") {
    trajectory = tumble_trajectory(a.frames, deg2rad(a.step_deg), a.distance, deg2rad(a.elevation_deg));
  } else {
    throw Error(ErrorCode::kConfig, "unknown trajectory '" + a.trajectory + "' (turntable, tumble)");
  }
  SyntheticScene scene{object, trajectory, k, a.noise};
  scene.seed = a.seed;
  if (!a.occluder.empty()) {
    scene.occluder = synth_object(a.occluder);
    scene.occluder_pose = occluder_pose;
  }
  scene.check();
  const fs::path root(a.out), seq = root / "sequence", refs = root / "references";
  fs::create_directories(seq);
  fs::create_directories(refs);
  write_json_file((seq / "intrinsics.json").string(), intrinsics_to_json(k));
  write_json_file((refs / "intrinsics.json").string(), intrinsics_to_json(k));
  std::string gt;
  for (std::size_t i = 0; i < scene.trajectory.size(); ++i) {
    write_frame_files((seq / frame_stem(i)).string(), render_scene_frame(scene, i).frame);
    gt += nlohmann::json{{"frame_id", i}, {"pose", pose_to_json(scene.trajectory[i])}}.dump() + "\n";
  }
  write_text(root / "gt_poses.jsonl", gt);
  for (std::size_t i = 0; i < a.reference_azimuths.size(); ++i) {
    const Pose p = orbit_camera(a.distance, deg2rad(a.elevation_deg), deg2rad(a.reference_azimuths[i]));
    const auto r = rasterize(object, p, k, RenderFlags{true, false});
    write_frame_files((refs / frame_stem(i)).string(), {r.color, r.depth, r.mask});
    write_json_file((refs / (frame_stem(i) + ".pose.json")).string(), pose_to_json(p));
  }
  write_ply((root / "object.ply").string(), object);
  std::cout << "wrote " << scene.trajectory.size() << " frames and " << a.reference_azimuths.size()
            << " reference views to " << root.string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& model_path, const std::string& export_path) {
  const auto m = load_model(model_path);
  const nlohmann::json j{{"vertices", m.mesh.vertices.size()},
                         {"faces", m.mesh.faces.size()},
                         {"certain_vertices", m.certain_count()},
                         {"certain_fraction", m.certain_fraction()},
                         {"certain_area_fraction", m.certain_area_fraction()},
                         {"provenance", to_string(m.provenance)},
                         {"build_stamp", m.build_stamp}};
  std::cout << j.dump(2) << "\n";
  if (!export_path.empty()) write_ply(export_path, m.mesh, m.uncertain);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-aware object pose tracking with online completion"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Track a test sequence and complete the object model online");
  run_cmd->add_option("--sequence", run.sequence, "Test sequence directory")->required()->check(CLI::ExistingDirectory);
  run_cmd->add_option("--out", run.out, "Output directory")->required();
  run_cmd->add_option("--references", run.references, "Posed reference view directory");
  run_cmd->add_option("--generated-mesh", run.generated_mesh, "Generated mesh (OBJ or PLY)");
  run_cmd->add_option("--reference-image", run.reference_image, "Image the generated mesh was made from");
  run_cmd->add_option("--reference-mask", run.reference_mask, "Object mask of that image");
  run_cmd->add_option("--reference-pose", run.reference_pose, "Assumed object-to-camera pose of that image (JSON)");
  run_cmd->add_option("--config", run.config, "Pipeline configuration (JSON)");
  run_cmd->add_flag("--no-completion", run.ablation.no_completion, "Never rebuild the model");
  run_cmd->add_flag("--always-complete", run.ablation.always_complete, "Rebuild on every pool admission");
  run_cmd->add_flag("--no-filter", run.ablation.no_filter, "Admit frames without the confidence check");
  run_cmd->add_flag("--geodesic-sampling", run.ablation.geodesic_sampling, "Farthest-rotation frame sampling");
  run_cmd->add_flag("--first-frame-init", run.ablation.first_frame_init, "Build the initial model from frame 0");
  run_cmd->add_flag("-v,--verbose", run.verbose, "Print one JSON record per frame to stderr");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a trajectory against ground truth");
  eval_cmd->add_option("--trajectory", ev.trajectory, "Estimated poses (JSON lines)")->required();
  eval_cmd->add_option("--gt", ev.gt, "Ground-truth poses (JSON lines)")->required();
  eval_cmd->add_option("--gt-mesh", ev.gt_mesh, "Ground-truth object mesh")->required();
  eval_cmd->add_option("--mesh", ev.mesh, "Reconstructed mesh for the chamfer distance");
  eval_cmd->add_option("--csv", ev.csv, "Write per-frame ADD / ADD-S here");
  eval_cmd->add_option("--points", ev.points, "Surface samples for ADD");

  SynthArgs sy;
  auto* synth_cmd = app.add_subcommand("synth", "Render a synthetic turntable scene");
  synth_cmd->add_option("--out", sy.out, "Output directory")->required();
  synth_cmd->add_option("--scene", sy.scene, "Scene file (JSON); its keys override the flags below");
  synth_cmd->add_option("--object", sy.object, "Mesh path, or one of asymmetric, box, sphere, cylinder");
  synth_cmd->add_option("--trajectory", sy.trajectory, "turntable or tumble");
  synth_cmd->add_option("--frames", sy.frames, "Number of test frames");
  synth_cmd->add_option("--step", sy.step_deg, "Rotation per frame in degrees");
  synth_cmd->add_option("--distance", sy.distance, "Camera distance in meters");
  synth_cmd->add_option("--elevation", sy.elevation_deg, "Camera elevation in degrees");
  synth_cmd->add_option("--noise", sy.noise, "Depth noise sigma in meters");
  synth_cmd->add_option("--reference-azimuths", sy.reference_azimuths, "Azimuths (degrees) of the reference views");
  synth_cmd->add_option("--seed", sy.seed, "Noise seed");

  std::string model_path, export_path;
  auto* inspect_cmd = app.add_subcommand("inspect-model", "Print model statistics");
  inspect_cmd->add_option("model", model_path, "Model PLY")->required();
  inspect_cmd->add_option("--export", export_path, "Write the mesh with its uncertainty flags here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 3;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*eval_cmd) return cmd_evaluate(ev);
    if (*synth_cmd) return cmd_synth(sy);
    if (*inspect_cmd) return cmd_inspect(model_path, export_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
