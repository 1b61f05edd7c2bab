#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace racal {

struct CameraModel {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0)
      throw std::invalid_argument("CameraModel: focal lengths must be positive");
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("CameraModel: image size must be positive");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
      throw std::invalid_argument("CameraModel: principal point outside image");
  }
};

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const {
    const Eigen::Matrix3d err =
        rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
    if (err.cwiseAbs().maxCoeff() > 1e-9)
      throw std::invalid_argument("RigidTransform: rotation not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > 1e-9)
      throw std::invalid_argument("RigidTransform: rotation determinant != 1");
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }
};

/// One radar return with its image projection and camera-frame depth.
struct RadarPoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();  // sensor frame, meters
  double u = 0.0, v = 0.0;                             // pixels
  double range = 0.0;                                  // camera-frame Z, meters
};

/// Per-pixel metric depth with validity mask. depth == 0 wherever invalid.
struct SparseDepthImage {
  int width = 0, height = 0;
  std::vector<double> depth;
  std::vector<uint8_t> valid;

  SparseDepthImage() = default;
  SparseDepthImage(int w, int h)
      : width(w), height(h), depth(static_cast<size_t>(w) * h, 0.0),
        valid(static_cast<size_t>(w) * h, 0) {}

  double& at(int x, int y) { return depth[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return depth[static_cast<size_t>(y) * width + x]; }
  bool is_valid(int x, int y) const {
    return valid[static_cast<size_t>(y) * width + x] != 0;
  }
  void set(int x, int y, double d) {
    depth[static_cast<size_t>(y) * width + x] = d;
    valid[static_cast<size_t>(y) * width + x] = 1;
  }
  bool in_bounds(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }
};

/// Channel-planar image, values in [0,1].
struct PlanarImage {
  int channels = 0, height = 0, width = 0;
  std::vector<double> pixels;

  PlanarImage() = default;
  PlanarImage(int c, int h, int w)
      : channels(c), height(h), width(w),
        pixels(static_cast<size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

/// Fixed-size crop around a pixel; out-of-bounds area is zero.
struct Patch {
  int channels = 0, height = 0, width = 0;
  std::vector<double> pixels;
  int center_u = 0, center_v = 0;

  double at(int c, int y, int x) const {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double& at(int c, int y, int x) {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

inline bool projection_in_bounds(const CameraModel& cam, double u, double v) {
  const long ru = std::lround(u), rv = std::lround(v);
  return ru >= 0 && ru < cam.width && rv >= 0 && rv < cam.height;
}

/// Pinhole projection after the extrinsic transform. Points behind the camera
/// or landing outside the image are dropped; input order is preserved.
inline std::vector<RadarPoint> project_points(
    const std::vector<Eigen::Vector3d>& points, const RigidTransform& extrinsic,
    const CameraModel& camera) {
  camera.validate();
  extrinsic.validate();
  std::vector<RadarPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (!p.allFinite())
      throw std::invalid_argument("project_points: non-finite input point");
    const Eigen::Vector3d q = extrinsic.apply(p);
    if (q.z() <= 0.0) continue;
    const double u = camera.fx * q.x() / q.z() + camera.cx;
    const double v = camera.fy * q.y() / q.z() + camera.cy;
    if (!projection_in_bounds(camera, u, v)) continue;
    out.push_back(RadarPoint{p, u, v, q.z()});
  }
  return out;
}

/// Splat projected points onto the pixel grid; collisions keep the nearest depth.
inline SparseDepthImage rasterize_sparse_depth(
    const std::vector<RadarPoint>& points, const CameraModel& camera) {
  camera.validate();
  SparseDepthImage img(camera.width, camera.height);
  for (const auto& p : points) {
    const int x = static_cast<int>(std::lround(p.u));
    const int y = static_cast<int>(std::lround(p.v));
    if (!img.in_bounds(x, y)) continue;
    if (!img.is_valid(x, y) || p.range < img.at(x, y)) img.set(x, y, p.range);
  }
  return img;
}

/// Crop a (height x width) window centered on an integer pixel, zero-padded
/// at the borders. Window sizes must be odd.
inline Patch extract_patch(const PlanarImage& image, int center_u, int center_v,
                           int height, int width) {
  if (height <= 0 || width <= 0 || height % 2 == 0 || width % 2 == 0)
    throw std::invalid_argument("extract_patch: window sizes must be odd");
  Patch patch;
  patch.channels = image.channels;
  patch.height = height;
  patch.width = width;
  patch.center_u = center_u;
  patch.center_v = center_v;
  patch.pixels.assign(static_cast<size_t>(image.channels) * height * width, 0.0);
  const int hh = height / 2, hw = width / 2;
  for (int c = 0; c < image.channels; ++c) {
    for (int dy = -hh; dy <= hh; ++dy) {
      const int sy = center_v + dy;
      if (sy < 0 || sy >= image.height) continue;
      for (int dx = -hw; dx <= hw; ++dx) {
        const int sx = center_u + dx;
        if (sx < 0 || sx >= image.width) continue;
        patch.at(c, dy + hh, dx + hw) = image.at(c, sy, sx);
      }
    }
  }
  return patch;
}

}  // namespace racal
