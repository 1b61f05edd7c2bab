#pragma once

#include "racal/align.hpp"
#include "racal/geometry.hpp"
#include "racal/labelgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace racal {

/// Procedural scene: ground plane plus fronto-parallel box faces, with a
/// known affine corruption of the true inverse depth and planted radar
/// outliers whose depth error is large enough to pin their labels at zero.
struct SceneConfig {
  std::uint64_t seed = 1;
  int width = 320, height = 240;
  double focal = 260.0;          // fx = fy
  double camera_height = 1.5;    // meters above ground, y points down
  double min_depth = 2.0, max_depth = 80.0;
  int num_boxes = 6;

  double affine_a = 0.8;         // planted: inv_mono = a * (1/d) + b
  double affine_b = 0.02;
  double sigma_mono = 0.0;       // additive noise on inverse depth
  int radar_count = 120;
  double sigma_radar = 0.0;      // meters, truncated at 3 sigma
  double outlier_fraction = 0.0;
  int outlier_offset_min = 4;    // projection offset range, pixels
  int outlier_offset_max = 12;
  double lidar_fraction = 0.5;

  void validate() const {
    if (width <= 140 || height <= 100)
      throw std::invalid_argument("SceneConfig: image too small");
    if (focal <= 0.0 || camera_height <= 0.0)
      throw std::invalid_argument("SceneConfig: bad camera");
    if (affine_a <= 0.0) throw std::invalid_argument("SceneConfig: affine_a must be > 0");
    if (sigma_mono < 0.0 || sigma_radar < 0.0)
      throw std::invalid_argument("SceneConfig: negative noise");
    if (outlier_fraction < 0.0 || outlier_fraction > 1.0)
      throw std::invalid_argument("SceneConfig: outlier_fraction outside [0,1]");
    if (min_depth <= 0.0 || max_depth <= min_depth)
      throw std::invalid_argument("SceneConfig: bad depth range");
    if (lidar_fraction <= 0.0 || lidar_fraction > 1.0)
      throw std::invalid_argument("SceneConfig: lidar_fraction outside (0,1]");
    if (outlier_offset_min < 1 || outlier_offset_max < outlier_offset_min)
      throw std::invalid_argument("SceneConfig: bad outlier offset range");
    if (radar_count < 1) throw std::invalid_argument("SceneConfig: radar_count < 1");
  }

  CameraModel camera() const {
    return CameraModel{focal, focal, width / 2.0, height / 2.0, width, height};
  }
};

struct SyntheticFrame {
  CameraModel camera;
  SparseDepthImage gt;             // dense, valid where a surface is visible
  InverseDepthMap mono;            // corrupted inverse depth, 0 on sky
  SparseDepthImage lidar;          // subsampled gt
  std::vector<RadarPoint> radar;
  std::vector<uint8_t> radar_outlier;
  PlanarImage image;               // grayscale render
  SceneConfig config;
};

namespace detail {

inline double truncated_gaussian(std::mt19937_64& rng, double sigma) {
  if (sigma <= 0.0) return 0.0;
  std::normal_distribution<double> dist(0.0, sigma);
  double x = dist(rng);
  while (std::abs(x) > 3.0 * sigma) x = dist(rng);
  return x;
}

struct BoxFace {
  double z = 0.0;
  int u0 = 0, u1 = 0, v0 = 0, v1 = 0;
};

}  // namespace detail

/// Uniform Bernoulli subsampling of the valid ground-truth pixels.
inline SparseDepthImage sample_lidar(const SparseDepthImage& gt, double fraction,
                                     std::uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("sample_lidar: fraction outside (0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  SparseDepthImage out(gt.width, gt.height);
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x)
      if (gt.is_valid(x, y) && uni(rng) < fraction) out.set(x, y, gt.at(x, y));
  return out;
}

inline SyntheticFrame generate(const SceneConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const CameraModel cam = cfg.camera();

  // Box faces: fronto-parallel rectangles, fully inside the image.
  std::vector<detail::BoxFace> boxes;
  for (int i = 0; i < cfg.num_boxes; ++i) {
    detail::BoxFace b;
    b.z = 4.0 + uni(rng) * 66.0;
    const int su = 25 + static_cast<int>(uni(rng) * 30.0);
    const int sv = 20 + static_cast<int>(uni(rng) * 25.0);
    std::uniform_int_distribution<int> cud(su + 12, cfg.width - su - 13);
    std::uniform_int_distribution<int> cvd(sv + 12, cfg.height - sv - 13);
    const int cu = cud(rng), cv = cvd(rng);
    b.u0 = cu - su;
    b.u1 = cu + su;
    b.v0 = cv - sv;
    b.v1 = cv + sv;
    boxes.push_back(b);
  }

  SyntheticFrame frame;
  frame.camera = cam;
  frame.config = cfg;
  frame.gt = SparseDepthImage(cfg.width, cfg.height);
  frame.mono = InverseDepthMap(cfg.width, cfg.height);
  frame.image = PlanarImage(1, cfg.height, cfg.width);

  long visible = 0;
  double scene_max_depth = cfg.min_depth;
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      double depth = std::numeric_limits<double>::infinity();
      const double dy = (y - cam.cy) / cam.fy;
      if (dy > 1e-6) {
        const double zg = cfg.camera_height / dy;
        if (zg >= cfg.min_depth && zg <= cfg.max_depth) depth = zg;
      }
      for (const auto& b : boxes)
        if (x >= b.u0 && x <= b.u1 && y >= b.v0 && y <= b.v1)
          depth = std::min(depth, b.z);
      if (std::isfinite(depth)) {
        frame.gt.set(x, y, depth);
        ++visible;
        scene_max_depth = std::max(scene_max_depth, depth);
        const double checker = ((x / 8 + y / 8) % 2) ? 1.0 : 0.0;
        const double g = 0.55 * (1.0 - depth / 100.0) + 0.15 * checker +
                         0.15 * (static_cast<double>(x) / cfg.width) + 0.1;
        frame.image.at(0, y, x) = std::clamp(g, 0.0, 1.0);
      } else {
        frame.image.at(0, y, x) = 0.02;
      }
    }
  }
  if (visible == 0)
    throw std::invalid_argument("generate: configuration produces no visible surface");

  // Corrupted monocular inverse depth.
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      if (!frame.gt.is_valid(x, y)) continue;
      const double inv = cfg.affine_a / frame.gt.at(x, y) + cfg.affine_b +
                         detail::truncated_gaussian(rng, cfg.sigma_mono);
      frame.mono.at(x, y) = std::max(inv, 0.0);
    }
  }

  frame.lidar = sample_lidar(frame.gt, cfg.lidar_fraction, cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  // Radar returns, planted at integer pixel centers.
  auto ray_position = [&](int u, int v, double depth) {
    return Eigen::Vector3d((u - cam.cx) / cam.fx * depth,
                           (v - cam.cy) / cam.fy * depth, depth);
  };
  // Accept inlier sites whose whole 5x5 label window sits on a nearly
  // constant-depth surface (box faces exactly, ground away from the horizon):
  // every window pixel then conforms under the tightest tau band, and the
  // anchor depths span the full visible range so alignment stays
  // well-conditioned.
  auto window_flat_depth = [&](int u, int v, double z) {
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const int xx = u + dx, yy = v + dy;
        if (!frame.gt.in_bounds(xx, yy) || !frame.gt.is_valid(xx, yy) ||
            std::abs(frame.gt.at(xx, yy) - z) > 0.2)
          return false;
      }
    return true;
  };

  std::uniform_int_distribution<int> px(0, cfg.width - 1);
  std::uniform_int_distribution<int> py(0, cfg.height - 1);
  std::uniform_int_distribution<int> off_mag(cfg.outlier_offset_min,
                                             cfg.outlier_offset_max);

  for (int i = 0; i < cfg.radar_count; ++i) {
    const bool outlier = uni(rng) < cfg.outlier_fraction;
    if (!outlier) {
      int u = 0, v = 0;
      double z = 0.0;
      bool found = false;
      for (int attempt = 0; attempt < 64 && !found; ++attempt) {
        u = px(rng);
        v = py(rng);
        if (!frame.gt.is_valid(u, v)) continue;
        z = frame.gt.at(u, v);
        found = window_flat_depth(u, v, z);
      }
      if (!found) {
        // Nothing flat after 64 draws; fall back to any visible pixel.
        do {
          u = px(rng);
          v = py(rng);
        } while (!frame.gt.is_valid(u, v));
        z = frame.gt.at(u, v);
      }
      const double d = z + detail::truncated_gaussian(rng, cfg.sigma_radar);
      frame.radar.push_back(RadarPoint{ray_position(u, v, d), double(u), double(v), d});
      frame.radar_outlier.push_back(0);
    } else {
      int u0 = 0, v0 = 0;
      do {
        u0 = px(rng);
        v0 = py(rng);
      } while (!frame.gt.is_valid(u0, v0));
      const int du = (uni(rng) < 0.5 ? -1 : 1) * off_mag(rng);
      const int dv = (uni(rng) < 0.5 ? -1 : 1) * off_mag(rng);
      const int u = std::clamp(u0 + du, 0, cfg.width - 1);
      const int v = std::clamp(v0 + dv, 0, cfg.height - 1);
      // Depth at least 6 m beyond everything visible in the scene: exceeds
      // 5 * tau(p) against every 5x5 label window, and keeps outliers
      // linearly separable from inliers in the depth feature.
      const double d = scene_max_depth + 6.0 + uni(rng) * 20.0;
      frame.radar.push_back(RadarPoint{ray_position(u, v, d), double(u), double(v), d});
      frame.radar_outlier.push_back(1);
    }
  }
  return frame;
}

}  // namespace racal
