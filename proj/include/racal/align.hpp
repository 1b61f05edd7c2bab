#pragma once

#include "racal/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace racal {

struct DegenerateFit : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoFeasibleThreshold : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Screened radar point with refined pixel coordinates.
struct RefinedAnchor {
  double u = 0.0, v = 0.0;  // refined pixel coordinates
  double depth = 0.0;       // metric radar depth, meters
  double confidence = 0.0;
};

/// Dense, scale-ambiguous inverse depth. Zeros mark invalid/sky pixels.
struct InverseDepthMap {
  int width = 0, height = 0;
  std::vector<double> values;

  InverseDepthMap() = default;
  InverseDepthMap(int w, int h)
      : width(w), height(h), values(static_cast<size_t>(w) * h, 0.0) {}

  double at(int x, int y) const {
    return values[static_cast<size_t>(y) * width + x];
  }
  double& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
};

struct AffineAlignment {
  double alpha = 0.0, beta = 0.0;
  double threshold = 0.0;      // selected T*
  double residual = 0.0;       // minimized sum of squared errors
  double mean_residual = 0.0;  // residual / inlier count
  int inliers = 0;             // |S_T*|
};

/// Metric depth with an explicit defined-pixel mask.
struct AlignedDepthMap {
  int width = 0, height = 0;
  std::vector<double> depth;
  std::vector<uint8_t> defined;
  int undefined_zero = 0;      // pixels with zero inverse depth
  int undefined_nonpos = 0;    // pixels where alpha*inv + beta <= 0

  AlignedDepthMap() = default;
  AlignedDepthMap(int w, int h)
      : width(w), height(h), depth(static_cast<size_t>(w) * h, 0.0),
        defined(static_cast<size_t>(w) * h, 0) {}
};

struct RefinerOutputs {
  std::vector<double> confidence;  // one per point, in (0,1)
  std::vector<double> disp_u;      // predicted pixel displacement
  std::vector<double> disp_v;
};

/// Keep points whose confidence clears tau and shift their projections by the
/// predicted displacement. Refined coordinates outside the image are dropped.
inline std::vector<RefinedAnchor> screen_and_refine(
    const std::vector<RadarPoint>& points, const RefinerOutputs& outputs,
    double tau, const CameraModel& camera) {
  if (outputs.confidence.size() != points.size() ||
      outputs.disp_u.size() != points.size() ||
      outputs.disp_v.size() != points.size())
    throw std::invalid_argument("screen_and_refine: output/point count mismatch");
  std::vector<RefinedAnchor> anchors;
  for (size_t i = 0; i < points.size(); ++i) {
    if (outputs.confidence[i] < tau) continue;
    const double u = points[i].u + outputs.disp_u[i];
    const double v = points[i].v + outputs.disp_v[i];
    if (!projection_in_bounds(camera, u, v)) continue;
    anchors.push_back(RefinedAnchor{u, v, points[i].range, outputs.confidence[i]});
  }
  return anchors;
}

struct AffineFit {
  double alpha = 0.0, beta = 0.0, residual = 0.0;
};

/// Closed-form least squares of 1/d_radar against inverse depth values.
/// Accumulation in long double keeps the normal equations well behaved.
inline AffineFit fit_affine(const std::vector<std::pair<double, double>>& pairs) {
  const size_t n = pairs.size();
  if (n < 2) throw DegenerateFit("fit_affine: need at least 2 pairs");
  long double sx = 0, sxx = 0, sy = 0, sxy = 0;
  for (const auto& [inv, d] : pairs) {
    if (d <= 0.0) throw std::invalid_argument("fit_affine: nonpositive radar depth");
    const long double x = inv, y = 1.0L / d;
    sx += x;
    sxx += x * x;
    sy += y;
    sxy += x * y;
  }
  const long double det = static_cast<long double>(n) * sxx - sx * sx;
  const long double scale = static_cast<long double>(n) * sxx + sx * sx;
  if (det <= scale * 1e-15L)
    throw DegenerateFit("fit_affine: zero variance in inverse depth values");
  const long double alpha = (static_cast<long double>(n) * sxy - sx * sy) / det;
  const long double beta = (sy - alpha * sx) / static_cast<long double>(n);
  long double res = 0;
  for (const auto& [inv, d] : pairs) {
    const long double r = 1.0L / static_cast<long double>(d) - alpha * inv - beta;
    res += r * r;
  }
  return AffineFit{static_cast<double>(alpha), static_cast<double>(beta),
                   static_cast<double>(res)};
}

/// Sample the inverse depth map at an anchor's (possibly fractional)
/// coordinates. Nearest-pixel by default; bilinear behind a flag.
inline double sample_inverse_depth(const InverseDepthMap& inv, double u, double v,
                                   bool bilinear = false) {
  if (!bilinear) {
    const int x = std::clamp(static_cast<int>(std::lround(u)), 0, inv.width - 1);
    const int y = std::clamp(static_cast<int>(std::lround(v)), 0, inv.height - 1);
    return inv.at(x, y);
  }
  const double fu = std::clamp(u, 0.0, static_cast<double>(inv.width - 1));
  const double fv = std::clamp(v, 0.0, static_cast<double>(inv.height - 1));
  const int x0 = static_cast<int>(std::floor(fu));
  const int y0 = static_cast<int>(std::floor(fv));
  const int x1 = std::min(x0 + 1, inv.width - 1);
  const int y1 = std::min(y0 + 1, inv.height - 1);
  const double ax = fu - x0, ay = fv - y0;
  return (1 - ay) * ((1 - ax) * inv.at(x0, y0) + ax * inv.at(x1, y0)) +
         ay * ((1 - ax) * inv.at(x0, y1) + ax * inv.at(x1, y1));
}

/// S_t = { i : 0 < inv(u_i, v_i) < t }.
inline std::vector<size_t> valid_set(const std::vector<RefinedAnchor>& anchors,
                                     const InverseDepthMap& inv, double t,
                                     bool bilinear = false) {
  std::vector<size_t> set;
  for (size_t i = 0; i < anchors.size(); ++i) {
    const double val = sample_inverse_depth(inv, anchors[i].u, anchors[i].v, bilinear);
    if (val > 0.0 && val < t) set.push_back(i);
  }
  return set;
}

/// Decile candidates of the anchor-sampled nonzero inverse depth values,
/// deduplicated and ascending. The top candidate is nudged up so the strict
/// inequality of the valid set still admits the maximum value.
inline std::vector<double> default_candidates(const InverseDepthMap& inv,
                                              const std::vector<RefinedAnchor>& anchors,
                                              bool bilinear = false) {
  std::vector<double> samples;
  for (const auto& a : anchors) {
    const double val = sample_inverse_depth(inv, a.u, a.v, bilinear);
    if (val > 0.0) samples.push_back(val);
  }
  if (samples.empty())
    throw std::runtime_error("default_candidates: no anchor with nonzero inverse depth");
  std::sort(samples.begin(), samples.end());
  std::vector<double> cand;
  const size_t n = samples.size();
  for (int q = 1; q <= 10; ++q) {
    size_t idx = static_cast<size_t>(
        std::ceil(static_cast<double>(q) / 10.0 * static_cast<double>(n)));
    if (idx > 0) --idx;
    cand.push_back(samples[idx]);
  }
  cand.back() *= 1.0 + 1e-9;
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  return cand;
}

/// Sweep the candidate thresholds, fit each valid set, keep the lowest
/// residual. Residual ties prefer the larger threshold.
inline AffineAlignment select_threshold(const std::vector<RefinedAnchor>& anchors,
                                        const InverseDepthMap& inv,
                                        const std::vector<double>& candidates,
                                        bool bilinear = false) {
  if (candidates.empty())
    throw std::invalid_argument("select_threshold: empty candidate set");
  bool found = false;
  AffineAlignment best;
  for (const double t : candidates) {
    const std::vector<size_t> set = valid_set(anchors, inv, t, bilinear);
    if (set.size() < 2) continue;
    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(set.size());
    for (const size_t i : set)
      pairs.emplace_back(sample_inverse_depth(inv, anchors[i].u, anchors[i].v, bilinear),
                         anchors[i].depth);
    AffineFit fit;
    try {
      fit = fit_affine(pairs);
    } catch (const DegenerateFit&) {
      continue;
    }
    const bool better =
        !found || fit.residual < best.residual ||
        (fit.residual == best.residual && t > best.threshold);
    if (better) {
      best.alpha = fit.alpha;
      best.beta = fit.beta;
      best.threshold = t;
      best.residual = fit.residual;
      best.inliers = static_cast<int>(set.size());
      best.mean_residual = fit.residual / static_cast<double>(set.size());
      found = true;
    }
  }
  if (!found)
    throw NoFeasibleThreshold("select_threshold: every candidate yields a degenerate fit");
  return best;
}

/// Invert the affine-aligned inverse depth. Zero inverse depth stays
/// undefined; nonpositive aligned values are flagged rather than clamped.
inline AlignedDepthMap apply_alignment(const InverseDepthMap& inv,
                                       const AffineAlignment& alignment) {
  if (!std::isfinite(alignment.alpha) || !std::isfinite(alignment.beta))
    throw std::invalid_argument("apply_alignment: non-finite alignment");
  AlignedDepthMap out(inv.width, inv.height);
  for (size_t i = 0; i < inv.values.size(); ++i) {
    const double m = inv.values[i];
    if (m == 0.0) {
      ++out.undefined_zero;
      continue;
    }
    const double denom = alignment.alpha * m + alignment.beta;
    if (denom <= 0.0) {
      ++out.undefined_nonpos;
      continue;
    }
    out.depth[i] = 1.0 / denom;
    out.defined[i] = 1;
  }
  return out;
}

}  // namespace racal
