#pragma once

#include "racal/align.hpp"
#include "racal/geometry.hpp"
#include "racal/labelgen.hpp"
#include "racal/metrics.hpp"
#include "racal/refiner.hpp"
#include "racal/synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace racal {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Atomic writes (temp file + rename)

inline void atomic_write(const std::filesystem::path& path, const std::string& data) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// PFM (grayscale "Pf", scale -1.0 = little-endian, rows bottom to top)

inline void write_pfm(const std::filesystem::path& path, int width, int height,
                      const std::vector<double>& values) {
  if (static_cast<long>(values.size()) != static_cast<long>(width) * height)
    throw std::invalid_argument("write_pfm: size mismatch");
  std::string data;
  {
    char header[64];
    std::snprintf(header, sizeof(header), "Pf\n%d %d\n-1.0\n", width, height);
    data = header;
  }
  data.reserve(data.size() + values.size() * sizeof(float));
  for (int y = height - 1; y >= 0; --y) {
    for (int x = 0; x < width; ++x) {
      const float f = static_cast<float>(values[static_cast<size_t>(y) * width + x]);
      char buf[sizeof(float)];
      std::memcpy(buf, &f, sizeof(float));
      data.append(buf, sizeof(float));
    }
  }
  atomic_write(path, data);
}

struct PfmImage {
  int width = 0, height = 0;
  std::vector<double> values;
};

inline PfmImage read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open PFM: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "Pf") throw IoError("not a grayscale PFM: " + path.string());
  int width = 0, height = 0;
  double scale = 0.0;
  in >> width >> height >> scale;
  if (!in || width <= 0 || height <= 0 || scale == 0.0)
    throw IoError("bad PFM header: " + path.string());
  in.get();  // single whitespace after the scale
  PfmImage img;
  img.width = width;
  img.height = height;
  img.values.resize(static_cast<size_t>(width) * height);
  std::vector<char> row(static_cast<size_t>(width) * sizeof(float));
  const bool big_endian = scale > 0.0;
  for (int y = height - 1; y >= 0; --y) {
    in.read(row.data(), static_cast<std::streamsize>(row.size()));
    if (!in) throw IoError("truncated PFM: " + path.string());
    for (int x = 0; x < width; ++x) {
      char bytes[sizeof(float)];
      std::memcpy(bytes, row.data() + static_cast<size_t>(x) * sizeof(float),
                  sizeof(float));
      if (big_endian) std::swap(bytes[0], bytes[3]), std::swap(bytes[1], bytes[2]);
      float f;
      std::memcpy(&f, bytes, sizeof(float));
      img.values[static_cast<size_t>(y) * width + x] = f;
    }
  }
  return img;
}

inline SparseDepthImage sparse_depth_from_pfm(const PfmImage& img) {
  SparseDepthImage out(img.width, img.height);
  for (size_t i = 0; i < img.values.size(); ++i)
    if (img.values[i] > 0.0) {
      out.depth[i] = img.values[i];
      out.valid[i] = 1;
    }
  return out;
}

inline InverseDepthMap inverse_depth_from_pfm(const PfmImage& img) {
  InverseDepthMap out(img.width, img.height);
  for (size_t i = 0; i < img.values.size(); ++i)
    out.values[i] = img.values[i] > 0.0 ? img.values[i] : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// PGM (8-bit binary grayscale)

inline void write_pgm(const std::filesystem::path& path, const PlanarImage& image) {
  if (image.channels != 1) throw std::invalid_argument("write_pgm: expects 1 channel");
  char header[64];
  std::snprintf(header, sizeof(header), "P5\n%d %d\n255\n", image.width, image.height);
  std::string data = header;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double v = std::clamp(image.at(0, y, x), 0.0, 1.0);
      data.push_back(static_cast<char>(static_cast<unsigned char>(
          std::lround(v * 255.0))));
    }
  atomic_write(path, data);
}

inline PlanarImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open PGM: " + path.string());
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || width <= 0 || height <= 0 || maxval != 255)
    throw IoError("bad PGM header: " + path.string());
  in.get();
  PlanarImage img(1, height, width);
  std::vector<char> row(static_cast<size_t>(width));
  for (int y = 0; y < height; ++y) {
    in.read(row.data(), width);
    if (!in) throw IoError("truncated PGM: " + path.string());
    for (int x = 0; x < width; ++x)
      img.at(0, y, x) = static_cast<unsigned char>(row[x]) / 255.0;
  }
  return img;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  return fields;
}

}  // namespace detail

inline void write_point_cloud_csv(const std::filesystem::path& path,
                                  const std::vector<Eigen::Vector3d>& points) {
  std::string data = "x,y,z\n";
  for (const auto& p : points)
    data += detail::fmt_double(p.x()) + "," + detail::fmt_double(p.y()) + "," +
            detail::fmt_double(p.z()) + "\n";
  atomic_write(path, data);
}

inline std::vector<Eigen::Vector3d> read_point_cloud_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "x,y,z")
    throw IoError("bad point cloud header in " + path.string());
  std::vector<Eigen::Vector3d> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw IoError("bad point cloud row in " + path.string());
    points.emplace_back(std::stod(f[0]), std::stod(f[1]), std::stod(f[2]));
  }
  return points;
}

inline void write_labels_csv(const std::filesystem::path& path,
                             const std::vector<RadarPoint>& points,
                             const std::vector<PointLabels>& labels) {
  if (points.size() != labels.size())
    throw std::invalid_argument("write_labels_csv: size mismatch");
  std::string data = "u,v,depth,conf_label,du,dv,is_valid\n";
  for (size_t i = 0; i < points.size(); ++i) {
    data += detail::fmt_double(points[i].u) + "," + detail::fmt_double(points[i].v) +
            "," + detail::fmt_double(points[i].range) + "," +
            std::to_string(labels[i].conf_label) + "," +
            std::to_string(labels[i].disp_u) + "," + std::to_string(labels[i].disp_v) +
            "," + std::to_string(labels[i].is_valid ? 1 : 0) + "\n";
  }
  atomic_write(path, data);
}

struct LabeledPoints {
  std::vector<RadarPoint> points;  // position left at zero; u, v, range filled
  std::vector<PointLabels> labels;
};

inline LabeledPoints read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "u,v,depth,conf_label,du,dv,is_valid")
    throw IoError("bad labels header in " + path.string());
  LabeledPoints out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 7) throw IoError("bad labels row in " + path.string());
    RadarPoint p;
    p.u = std::stod(f[0]);
    p.v = std::stod(f[1]);
    p.range = std::stod(f[2]);
    PointLabels l;
    l.conf_label = std::stoi(f[3]);
    l.disp_u = std::stoi(f[4]);
    l.disp_v = std::stoi(f[5]);
    l.is_valid = std::stoi(f[6]) != 0;
    out.points.push_back(p);
    out.labels.push_back(l);
  }
  return out;
}

inline void write_anchors_csv(const std::filesystem::path& path,
                              const std::vector<RefinedAnchor>& anchors) {
  std::string data = "u,v,depth,confidence\n";
  for (const auto& a : anchors)
    data += detail::fmt_double(a.u) + "," + detail::fmt_double(a.v) + "," +
            detail::fmt_double(a.depth) + "," + detail::fmt_double(a.confidence) + "\n";
  atomic_write(path, data);
}

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<EpochRecord>& history) {
  std::string data = "epoch,conf_loss,disp_loss,total\n";
  for (const auto& r : history)
    data += std::to_string(r.epoch) + "," + detail::fmt_double(r.conf_loss) + "," +
            detail::fmt_double(r.disp_loss) + "," + detail::fmt_double(r.total) + "\n";
  atomic_write(path, data);
}

inline void write_eval_csv(const std::filesystem::path& path,
                           const std::vector<EvalReport>& reports) {
  std::string data = "cap_m,mae_mm,rmse_mm,absrel,sqrel,delta1,count\n";
  for (const auto& r : reports)
    data += detail::fmt_double(r.cap) + "," + detail::fmt_double(r.mae) + "," +
            detail::fmt_double(r.rmse) + "," + detail::fmt_double(r.absrel) + "," +
            detail::fmt_double(r.sqrel) + "," + detail::fmt_double(r.delta1) + "," +
            std::to_string(r.count) + "\n";
  atomic_write(path, data);
}

// ---------------------------------------------------------------------------
// JSON configs and reports

inline nlohmann::json camera_to_json(const CameraModel& cam) {
  return {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx},
          {"cy", cam.cy}, {"width", cam.width}, {"height", cam.height}};
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel cam;
  cam.fx = j.at("fx");
  cam.fy = j.at("fy");
  cam.cx = j.at("cx");
  cam.cy = j.at("cy");
  cam.width = j.at("width");
  cam.height = j.at("height");
  cam.validate();
  return cam;
}

inline RigidTransform extrinsic_from_json(const nlohmann::json& j) {
  RigidTransform t;
  const auto rot = j.at("rotation");  // row-major, 9 entries
  if (rot.size() != 9) throw IoError("extrinsic rotation must have 9 entries");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = rot[r * 3 + c];
  const auto tr = j.at("translation");
  if (tr.size() != 3) throw IoError("extrinsic translation must have 3 entries");
  for (int i = 0; i < 3; ++i) t.translation(i) = tr[i];
  t.validate();
  return t;
}

inline SceneConfig scene_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.seed = j.value("seed", c.seed);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.focal = j.value("focal", c.focal);
  c.camera_height = j.value("camera_height", c.camera_height);
  c.min_depth = j.value("min_depth", c.min_depth);
  c.max_depth = j.value("max_depth", c.max_depth);
  c.num_boxes = j.value("num_boxes", c.num_boxes);
  c.affine_a = j.value("affine_a", c.affine_a);
  c.affine_b = j.value("affine_b", c.affine_b);
  c.sigma_mono = j.value("sigma_mono", c.sigma_mono);
  c.radar_count = j.value("radar_count", c.radar_count);
  c.sigma_radar = j.value("sigma_radar", c.sigma_radar);
  c.outlier_fraction = j.value("outlier_fraction", c.outlier_fraction);
  c.outlier_offset_min = j.value("outlier_offset_min", c.outlier_offset_min);
  c.outlier_offset_max = j.value("outlier_offset_max", c.outlier_offset_max);
  c.lidar_fraction = j.value("lidar_fraction", c.lidar_fraction);
  c.validate();
  return c;
}

inline nlohmann::json scene_to_json(const SceneConfig& c) {
  return {{"seed", c.seed},
          {"width", c.width},
          {"height", c.height},
          {"focal", c.focal},
          {"camera_height", c.camera_height},
          {"min_depth", c.min_depth},
          {"max_depth", c.max_depth},
          {"num_boxes", c.num_boxes},
          {"affine_a", c.affine_a},
          {"affine_b", c.affine_b},
          {"sigma_mono", c.sigma_mono},
          {"radar_count", c.radar_count},
          {"sigma_radar", c.sigma_radar},
          {"outlier_fraction", c.outlier_fraction},
          {"outlier_offset_min", c.outlier_offset_min},
          {"outlier_offset_max", c.outlier_offset_max},
          {"lidar_fraction", c.lidar_fraction}};
}

inline LabelParams label_params_from_json(const nlohmann::json& j) {
  LabelParams p;
  p.conf_neighborhood = j.value("conf_neighborhood", p.conf_neighborhood);
  p.min_count = j.value("min_count", p.min_count);
  p.search_height = j.value("search_height", p.search_height);
  p.search_width = j.value("search_width", p.search_width);
  p.inner_height = j.value("inner_height", p.inner_height);
  p.inner_width = j.value("inner_width", p.inner_width);
  p.validate();
  return p;
}

inline RefinerConfig refiner_config_from_json(const nlohmann::json& j) {
  RefinerConfig c;
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.num_attention_layers = j.value("num_attention_layers", c.num_attention_layers);
  if (j.contains("radar_mlp_widths"))
    c.radar_mlp_widths = j.at("radar_mlp_widths").get<std::vector<int>>();
  if (j.contains("patch_encoder_widths"))
    c.patch_encoder_widths = j.at("patch_encoder_widths").get<std::vector<int>>();
  c.patch_size = j.value("patch_size", c.patch_size);
  c.patch_grid = j.value("patch_grid", c.patch_grid);
  c.patch_channels = j.value("patch_channels", c.patch_channels);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.lambda_conf = j.value("lambda_conf", c.lambda_conf);
  c.lambda_disp = j.value("lambda_disp", c.lambda_disp);
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline nlohmann::json refiner_config_to_json(const RefinerConfig& c) {
  return {{"feature_dim", c.feature_dim},
          {"attention_dim", c.attention_dim},
          {"num_attention_layers", c.num_attention_layers},
          {"radar_mlp_widths", c.radar_mlp_widths},
          {"patch_encoder_widths", c.patch_encoder_widths},
          {"patch_size", c.patch_size},
          {"patch_grid", c.patch_grid},
          {"patch_channels", c.patch_channels},
          {"head_hidden", c.head_hidden},
          {"lambda_conf", c.lambda_conf},
          {"lambda_disp", c.lambda_disp},
          {"conf_threshold", c.conf_threshold},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"seed", c.seed}};
}

inline nlohmann::json alignment_to_json(const AffineAlignment& a,
                                        const AlignedDepthMap& depth) {
  return {{"alpha", a.alpha},
          {"beta", a.beta},
          {"t_star", a.threshold},
          {"residual", a.residual},
          {"mean_residual", a.mean_residual},
          {"inliers", a.inliers},
          {"undefined_pixels", depth.undefined_zero + depth.undefined_nonpos},
          {"undefined_nonpositive", depth.undefined_nonpos}};
}

inline nlohmann::json eval_to_json(const std::vector<EvalReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports)
    arr.push_back({{"cap_m", r.cap},
                   {"mae_mm", r.mae},
                   {"rmse_mm", r.rmse},
                   {"absrel", r.absrel},
                   {"sqrel", r.sqrel},
                   {"delta1", r.delta1},
                   {"count", r.count},
                   {"undefined", r.undefined}});
  return arr;
}

// ---------------------------------------------------------------------------
// Parameter serialization: raw little-endian float64 + JSON shape manifest

inline void save_params(const std::filesystem::path& bin_path,
                        const std::filesystem::path& manifest_path,
                        const RefinerParams& params) {
  std::string data(reinterpret_cast<const char*>(params.flat().data()),
                   params.flat().size() * sizeof(double));
  atomic_write(bin_path, data);
  nlohmann::json manifest;
  manifest["total"] = params.layout().total;
  manifest["config"] = refiner_config_to_json(params.config());
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : params.layout().entries)
    entries.push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols},
                       {"offset", e.offset}});
  manifest["entries"] = entries;
  atomic_write(manifest_path, manifest.dump(2) + "\n");
}

inline RefinerParams load_params(const std::filesystem::path& bin_path,
                                 const std::filesystem::path& manifest_path) {
  const nlohmann::json manifest = nlohmann::json::parse(read_file(manifest_path));
  RefinerParams params(refiner_config_from_json(manifest.at("config")));
  if (manifest.at("total").get<long>() != params.layout().total)
    throw IoError("parameter manifest does not match its config");
  const std::string data = read_file(bin_path);
  if (data.size() != static_cast<size_t>(params.layout().total) * sizeof(double))
    throw IoError("parameter file size mismatch: " + bin_path.string());
  std::memcpy(params.flat().data(), data.data(), data.size());
  return params;
}

// ---------------------------------------------------------------------------
// Frame bundles

inline void write_frame_bundle(const std::filesystem::path& dir,
                               const SyntheticFrame& frame) {
  std::filesystem::create_directories(dir);
  write_pfm(dir / "gt.pfm", frame.gt.width, frame.gt.height, frame.gt.depth);
  write_pfm(dir / "mono_inv.pfm", frame.mono.width, frame.mono.height,
            frame.mono.values);
  write_pfm(dir / "lidar.pfm", frame.lidar.width, frame.lidar.height,
            frame.lidar.depth);
  std::vector<Eigen::Vector3d> cloud;
  cloud.reserve(frame.radar.size());
  for (const auto& p : frame.radar) cloud.push_back(p.position);
  write_point_cloud_csv(dir / "radar.csv", cloud);
  write_pgm(dir / "image.pgm", frame.image);
  nlohmann::json meta = {{"a", frame.config.affine_a},
                         {"b", frame.config.affine_b},
                         {"rho", frame.config.outlier_fraction},
                         {"seed", frame.config.seed},
                         {"scene", scene_to_json(frame.config)},
                         {"camera", camera_to_json(frame.camera)}};
  atomic_write(dir / "meta.json", meta.dump(2) + "\n");
}

struct FrameBundle {
  CameraModel camera;
  SparseDepthImage gt;
  InverseDepthMap mono;
  SparseDepthImage lidar;
  std::vector<RadarPoint> radar;
  PlanarImage image;
  nlohmann::json meta;
};

inline FrameBundle read_frame_bundle(const std::filesystem::path& dir) {
  FrameBundle b;
  b.meta = nlohmann::json::parse(read_file(dir / "meta.json"));
  b.camera = camera_from_json(b.meta.at("camera"));
  b.gt = sparse_depth_from_pfm(read_pfm(dir / "gt.pfm"));
  b.mono = inverse_depth_from_pfm(read_pfm(dir / "mono_inv.pfm"));
  b.lidar = sparse_depth_from_pfm(read_pfm(dir / "lidar.pfm"));
  b.image = read_pgm(dir / "image.pgm");
  const auto cloud = read_point_cloud_csv(dir / "radar.csv");
  b.radar = project_points(cloud, RigidTransform{}, b.camera);
  return b;
}

}  // namespace racal
