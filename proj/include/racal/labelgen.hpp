#pragma once

#include "racal/geometry.hpp"

#include <array>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <vector>

namespace racal {

struct LabelParams {
  int conf_neighborhood = 5;   // R(p), odd
  int min_count = 3;           // eta
  int search_height = 35;      // N(p)
  int search_width = 35;
  int inner_height = 5;        // sliding window
  int inner_width = 5;

  void validate() const {
    auto odd = [](int s) { return s > 0 && s % 2 == 1; };
    if (!odd(conf_neighborhood) || !odd(search_height) || !odd(search_width) ||
        !odd(inner_height) || !odd(inner_width))
      throw std::invalid_argument("LabelParams: window sizes must be odd");
    if (inner_height > search_height || inner_width > search_width)
      throw std::invalid_argument("LabelParams: inner window exceeds search window");
    if (min_count < 1)
      throw std::invalid_argument("LabelParams: min_count must be >= 1");
  }
};

struct PointLabels {
  int conf_label = 0;          // {0,1}
  int disp_u = 0, disp_v = 0;  // pixels, label offset from the projection
  bool is_valid = false;       // p in P_valid
  bool disp_degenerate = false;
};

/// Range-dependent depth agreement tolerance.
inline double adaptive_threshold(double d) {
  if (d <= 0.0 || !std::isfinite(d))
    throw std::invalid_argument("adaptive_threshold: depth must be positive");
  if (d < 30.0) return 0.5;
  if (d <= 50.0) return 0.75;
  return 1.0;
}

namespace detail {

/// Count ground-truth pixels in a window that agree with depth d within tau.
inline int count_conforming(const SparseDepthImage& gt, int cu, int cv,
                            int win_h, int win_w, double d, double tau) {
  const int hh = win_h / 2, hw = win_w / 2;
  int n = 0;
  for (int dy = -hh; dy <= hh; ++dy) {
    const int y = cv + dy;
    if (y < 0 || y >= gt.height) continue;
    for (int dx = -hw; dx <= hw; ++dx) {
      const int x = cu + dx;
      if (x < 0 || x >= gt.width) continue;
      if (gt.is_valid(x, y) && std::abs(gt.at(x, y) - d) < tau) ++n;
    }
  }
  return n;
}

inline bool any_valid(const SparseDepthImage& gt, int cu, int cv, int win) {
  const int h = win / 2;
  for (int dy = -h; dy <= h; ++dy) {
    const int y = cv + dy;
    if (y < 0 || y >= gt.height) continue;
    for (int dx = -h; dx <= h; ++dx) {
      const int x = cu + dx;
      if (x < 0 || x >= gt.width) continue;
      if (gt.is_valid(x, y)) return true;
    }
  }
  return false;
}

}  // namespace detail

struct ConfidenceLabel {
  int label = 0;
  bool is_valid = false;  // any LiDAR pixel inside R(p)
};

/// Binary confidence label from LiDAR agreement inside R(p).
inline ConfidenceLabel confidence_label(const RadarPoint& p,
                                        const SparseDepthImage& gt,
                                        const LabelParams& params) {
  params.validate();
  const int cu = static_cast<int>(std::lround(p.u));
  const int cv = static_cast<int>(std::lround(p.v));
  const double tau = adaptive_threshold(p.range);
  ConfidenceLabel out;
  out.is_valid = detail::any_valid(gt, cu, cv, params.conf_neighborhood);
  const int count = detail::count_conforming(gt, cu, cv, params.conf_neighborhood,
                                             params.conf_neighborhood, p.range, tau);
  out.label = count >= params.min_count ? 1 : 0;
  return out;
}

struct DisplacementLabel {
  int du = 0, dv = 0;
  bool degenerate = false;  // no window contained any conforming pixel
};

/// Offset to the inner-window center inside N(p) holding the most conforming
/// LiDAR pixels. Ties prefer the smallest squared displacement, then row-major
/// scan order.
inline DisplacementLabel displacement_label(const RadarPoint& p,
                                            const SparseDepthImage& gt,
                                            const LabelParams& params) {
  params.validate();
  const int cu = static_cast<int>(std::lround(p.u));
  const int cv = static_cast<int>(std::lround(p.v));
  const double tau = adaptive_threshold(p.range);
  const int hh = params.search_height / 2, hw = params.search_width / 2;

  int best_count = 0, best_sq = 0, best_du = 0, best_dv = 0;
  for (int dv = -hh; dv <= hh; ++dv) {
    for (int du = -hw; du <= hw; ++du) {
      const int count = detail::count_conforming(gt, cu + du, cv + dv,
                                                 params.inner_height,
                                                 params.inner_width, p.range, tau);
      if (count == 0) continue;
      const int sq = du * du + dv * dv;
      if (count > best_count || (count == best_count && sq < best_sq)) {
        best_count = count;
        best_sq = sq;
        best_du = du;
        best_dv = dv;
      }
    }
  }
  DisplacementLabel out;
  if (best_count == 0) {
    out.degenerate = true;
    return out;
  }
  out.du = best_du;
  out.dv = best_dv;
  return out;
}

/// Confidence + displacement labels for a whole point list. Output order
/// matches input order.
inline std::vector<PointLabels> build_labels(const std::vector<RadarPoint>& points,
                                             const SparseDepthImage& gt,
                                             const LabelParams& params) {
  params.validate();
  std::vector<PointLabels> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    PointLabels l;
    const ConfidenceLabel c = confidence_label(p, gt, params);
    l.conf_label = c.label;
    l.is_valid = c.is_valid;
    if (l.is_valid) {
      const DisplacementLabel d = displacement_label(p, gt, params);
      l.disp_u = d.du;
      l.disp_v = d.dv;
      l.disp_degenerate = d.degenerate;
    }
    out.push_back(l);
  }
  return out;
}

}  // namespace racal
