// racal: desk-scale radar-guided metric depth pipeline.
//
// Subcommands: synth | labels | train | align | eval
// Exit codes: 0 success, 2 bad config, 3 empty radar, 4 training divergence,
//             5 no feasible alignment threshold, 6 empty evaluation.

#include "racal/io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

constexpr int kExitBadConfig = 2;
constexpr int kExitEmptyRadar = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitNoThreshold = 5;
constexpr int kExitEmptyEval = 6;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

json load_config(const std::string& path) {
  if (!fs::exists(path))
    throw racal::IoError("config file not found: " + path);
  return json::parse(racal::read_file(path));
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::string& config_path,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, std::uint64_t seed,
                    double wall_time) {
  json m = {{"command", command}, {"config", config_path},
            {"inputs", inputs},   {"outputs", outputs},
            {"seed", seed},       {"wall_time_s", wall_time},
            {"version", kVersion}};
  racal::atomic_write(dir / "run_manifest.json", m.dump(2) + "\n");
}

int cmd_synth(const std::string& config_path, const std::string& out_dir,
              std::int64_t seed_override) {
  Timer timer;
  racal::SceneConfig scene;
  try {
    const json cfg = load_config(config_path);
    scene = racal::scene_from_json(cfg.contains("scene") ? cfg.at("scene") : cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "synth: bad config %s: %s\n", config_path.c_str(), e.what());
    return kExitBadConfig;
  }
  if (seed_override >= 0) scene.seed = static_cast<std::uint64_t>(seed_override);
  const racal::SyntheticFrame frame = racal::generate(scene);
  racal::write_frame_bundle(out_dir, frame);
  write_manifest(out_dir, "synth", config_path, {},
                 {"gt.pfm", "mono_inv.pfm", "lidar.pfm", "radar.csv", "image.pgm",
                  "meta.json"},
                 scene.seed, timer.seconds());
  return 0;
}

int cmd_labels(const std::string& frame_dir, const std::string& out_csv,
               const std::string& config_path) {
  Timer timer;
  racal::LabelParams params;
  try {
    if (!config_path.empty()) {
      const json cfg = load_config(config_path);
      params = racal::label_params_from_json(
          cfg.contains("labels") ? cfg.at("labels") : cfg);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "labels: bad config: %s\n", e.what());
    return kExitBadConfig;
  }
  const racal::FrameBundle bundle = racal::read_frame_bundle(frame_dir);
  if (bundle.radar.empty()) {
    std::fprintf(stderr, "labels: no radar point projects into the image\n");
    return kExitEmptyRadar;
  }
  const auto labels = racal::build_labels(bundle.radar, bundle.lidar, params);
  racal::write_labels_csv(out_csv, bundle.radar, labels);
  write_manifest(fs::path(out_csv).parent_path(), "labels", config_path,
                 {frame_dir}, {fs::path(out_csv).filename().string()},
                 bundle.meta.value("seed", 0ULL), timer.seconds());
  return 0;
}

racal::RefinerBatch batch_from_frame_dir(const fs::path& dir,
                                         const racal::RefinerConfig& cfg) {
  const racal::FrameBundle bundle = racal::read_frame_bundle(dir);
  const fs::path labels_path = dir / "labels.csv";
  if (!fs::exists(labels_path))
    throw racal::IoError("missing labels.csv in " + dir.string());
  const racal::LabeledPoints lp = racal::read_labels_csv(labels_path);
  return racal::build_batch(lp.points, bundle.image, lp.labels, bundle.camera, cfg);
}

int cmd_train(const std::vector<std::string>& frame_dirs,
              const std::string& config_path, const std::string& out_dir,
              std::int64_t seed_override) {
  Timer timer;
  racal::RefinerConfig cfg;
  try {
    if (!config_path.empty()) {
      const json j = load_config(config_path);
      cfg = racal::refiner_config_from_json(
          j.contains("refiner") ? j.at("refiner") : j);
    }
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.validate();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "train: bad config: %s\n", e.what());
    return kExitBadConfig;
  }
  std::vector<racal::RefinerBatch> dataset;
  for (const auto& dir : frame_dirs) dataset.push_back(batch_from_frame_dir(dir, cfg));

  racal::TrainResult result{racal::RefinerParams(cfg), {}};
  try {
    result = racal::train(dataset, cfg);
  } catch (const racal::TrainingDiverged& e) {
    std::fprintf(stderr, "train: %s\n", e.what());
    return kExitDiverged;
  }
  fs::create_directories(out_dir);
  racal::save_params(fs::path(out_dir) / "params.bin",
                     fs::path(out_dir) / "params.json", result.params);
  racal::write_history_csv(fs::path(out_dir) / "history.csv", result.history);
  write_manifest(out_dir, "train", config_path, frame_dirs,
                 {"params.bin", "params.json", "history.csv"}, cfg.seed,
                 timer.seconds());
  return 0;
}

int cmd_align(const std::string& frame_dir, const std::string& params_path,
              bool oracle_screen, const std::string& out_dir,
              const std::string& config_path) {
  Timer timer;
  double tau = 0.5;
  racal::LabelParams label_params;
  bool bilinear = false;
  try {
    if (!config_path.empty()) {
      const json j = load_config(config_path);
      tau = j.value("conf_threshold", tau);
      bilinear = j.value("bilinear_sampling", bilinear);
      if (j.contains("labels"))
        label_params = racal::label_params_from_json(j.at("labels"));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "align: bad config: %s\n", e.what());
    return kExitBadConfig;
  }
  const racal::FrameBundle bundle = racal::read_frame_bundle(frame_dir);

  racal::RefinerOutputs outputs;
  if (oracle_screen) {
    const auto labels = racal::build_labels(bundle.radar, bundle.lidar, label_params);
    for (const auto& l : labels) {
      outputs.confidence.push_back(static_cast<double>(l.conf_label));
      outputs.disp_u.push_back(static_cast<double>(l.disp_u));
      outputs.disp_v.push_back(static_cast<double>(l.disp_v));
    }
  } else {
    const racal::RefinerParams params = racal::load_params(
        params_path, fs::path(params_path).replace_extension(".json"));
    tau = params.config().conf_threshold;
    std::vector<racal::PointLabels> dummy(bundle.radar.size());
    const racal::RefinerBatch batch = racal::build_batch(
        bundle.radar, bundle.image, dummy, bundle.camera, params.config());
    outputs = racal::forward(params, batch);
  }

  try {
    const auto anchors =
        racal::screen_and_refine(bundle.radar, outputs, tau, bundle.camera);
    if (anchors.empty())
      throw racal::NoFeasibleThreshold("no anchor survives screening");
    const auto candidates =
        racal::default_candidates(bundle.mono, anchors, bilinear);
    const auto alignment =
        racal::select_threshold(anchors, bundle.mono, candidates, bilinear);
    const auto aligned = racal::apply_alignment(bundle.mono, alignment);

    fs::create_directories(out_dir);
    racal::write_pfm(fs::path(out_dir) / "aligned.pfm", aligned.width,
                     aligned.height, aligned.depth);
    racal::write_anchors_csv(fs::path(out_dir) / "anchors.csv", anchors);
    racal::atomic_write(fs::path(out_dir) / "alignment.json",
                        racal::alignment_to_json(alignment, aligned).dump(2) + "\n");
    write_manifest(out_dir, "align", config_path, {frame_dir, params_path},
                   {"aligned.pfm", "anchors.csv", "alignment.json"},
                   bundle.meta.value("seed", 0ULL), timer.seconds());
  } catch (const racal::NoFeasibleThreshold& e) {
    std::fprintf(stderr, "align: %s\n", e.what());
    return kExitNoThreshold;
  } catch (const std::runtime_error& e) {
    // No nonzero inverse depth under any anchor behaves like an infeasible sweep.
    std::fprintf(stderr, "align: %s\n", e.what());
    return kExitNoThreshold;
  }
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path,
             const std::vector<double>& caps, const std::string& out_dir) {
  Timer timer;
  if (caps.empty()) {
    std::fprintf(stderr, "eval: at least one range cap required\n");
    return kExitBadConfig;
  }
  for (size_t i = 1; i < caps.size(); ++i)
    if (caps[i] <= caps[i - 1]) {
      std::fprintf(stderr, "eval: caps must be ascending\n");
      return kExitBadConfig;
    }
  const racal::PfmImage pred_img = racal::read_pfm(pred_path);
  const racal::SparseDepthImage gt =
      racal::sparse_depth_from_pfm(racal::read_pfm(gt_path));

  racal::AlignedDepthMap pred(pred_img.width, pred_img.height);
  for (size_t i = 0; i < pred_img.values.size(); ++i)
    if (pred_img.values[i] > 0.0) {
      pred.depth[i] = pred_img.values[i];
      pred.defined[i] = 1;
    }

  std::vector<racal::EvalReport> reports;
  try {
    reports = racal::evaluate_sweep(pred, gt, caps);
  } catch (const racal::EmptyEvaluation& e) {
    std::fprintf(stderr, "eval: %s\n", e.what());
    return kExitEmptyEval;
  }

  fs::create_directories(out_dir);
  racal::atomic_write(fs::path(out_dir) / "eval.json",
                      racal::eval_to_json(reports).dump(2) + "\n");
  racal::write_eval_csv(fs::path(out_dir) / "eval.csv", reports);

  std::vector<double> err(pred.depth.size(), 0.0);
  for (size_t i = 0; i < err.size(); ++i)
    if (pred.defined[i] && gt.valid[i])
      err[i] = std::abs(pred.depth[i] - gt.depth[i]);
  racal::write_pfm(fs::path(out_dir) / "error_map.pfm", pred.width, pred.height, err);

  write_manifest(out_dir, "eval", "", {pred_path, gt_path},
                 {"eval.json", "eval.csv", "error_map.pfm"}, 0, timer.seconds());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radar-guided metric depth pipeline (desk scale)"};
  app.require_subcommand(1);

  std::string config_path, out_path, frame_dir, params_path;
  std::string pred_path, gt_path, out_csv;
  std::vector<std::string> frame_dirs;
  std::vector<double> caps{50.0, 70.0, 80.0};
  std::int64_t seed = -1;
  bool oracle_screen = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic frame bundle");
  synth->add_option("--config", config_path, "Scene config JSON")->required();
  synth->add_option("--out", out_path, "Output directory")->required();
  synth->add_option("--seed", seed, "Override the config seed");

  auto* labels = app.add_subcommand("labels", "Build confidence/displacement labels");
  labels->add_option("--frame", frame_dir, "Frame bundle directory")->required();
  labels->add_option("--out", out_csv, "Output label CSV")->required();
  labels->add_option("--config", config_path, "Label params JSON");

  auto* train = app.add_subcommand("train", "Train the toy refiner");
  train->add_option("--frame", frame_dirs, "Labeled frame directory (repeatable)")
      ->required();
  train->add_option("--config", config_path, "Refiner config JSON");
  train->add_option("--out", out_path, "Output directory")->required();
  train->add_option("--seed", seed, "Override the config seed");

  auto* align = app.add_subcommand("align", "Screen, refine, and align depth");
  align->add_option("--frame", frame_dir, "Frame bundle directory")->required();
  align->add_option("--params", params_path, "Trained parameter file (.bin)");
  align->add_flag("--oracle-screen", oracle_screen,
                  "Use ground-truth labels instead of the network");
  align->add_option("--config", config_path, "Align config JSON");
  align->add_option("--out", out_path, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a depth map against ground truth");
  eval->add_option("--pred", pred_path, "Predicted depth PFM")->required();
  eval->add_option("--gt", gt_path, "Ground-truth depth PFM")->required();
  eval->add_option("--caps", caps, "Range caps in meters, ascending");
  eval->add_option("--out", out_path, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(config_path, out_path, seed);
    if (labels->parsed()) return cmd_labels(frame_dir, out_csv, config_path);
    if (train->parsed()) return cmd_train(frame_dirs, config_path, out_path, seed);
    if (align->parsed()) {
      if (!oracle_screen && params_path.empty()) {
        std::fprintf(stderr, "align: either --params or --oracle-screen required\n");
        return kExitBadConfig;
      }
      return cmd_align(frame_dir, params_path, oracle_screen, out_path, config_path);
    }
    if (eval->parsed()) return cmd_eval(pred_path, gt_path, caps, out_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "racal: %s\n", e.what());
    return 1;
  }
  return 1;
}
