#pragma once

#include "racal/align.hpp"
#include "racal/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace racal {

struct EmptyEvaluation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalReport {
  double cap = 0.0;       // meters
  double mae = 0.0;       // mm
  double rmse = 0.0;      // mm
  double absrel = 0.0;    // unitless
  double sqrel = 0.0;     // mm
  double delta1 = 0.0;    // fraction in [0,1]
  long count = 0;         // eligible pixels
  long undefined = 0;     // gt-valid pixels skipped because pred is undefined
};

/// Depth metrics over pixels where gt is valid, within the range cap, and the
/// prediction is defined. MAE/RMSE/SqRel reported in millimeters.
inline EvalReport evaluate(const AlignedDepthMap& pred, const SparseDepthImage& gt,
                           double cap) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw std::invalid_argument("evaluate: shape mismatch");
  EvalReport r;
  r.cap = cap;
  long double abs_sum = 0, sq_sum = 0, absrel_sum = 0, sqrel_sum = 0;
  long delta_ok = 0;
  const size_t n = gt.depth.size();
  for (size_t i = 0; i < n; ++i) {
    if (!gt.valid[i]) continue;
    const double d_gt = gt.depth[i];
    if (d_gt <= 0.0 || d_gt > cap) continue;
    if (!pred.defined[i]) {
      ++r.undefined;
      continue;
    }
    const double d = pred.depth[i];
    const double diff_mm = (d - d_gt) * 1000.0;
    const double gt_mm = d_gt * 1000.0;
    abs_sum += std::abs(diff_mm);
    sq_sum += diff_mm * diff_mm;
    absrel_sum += std::abs(diff_mm) / gt_mm;
    sqrel_sum += diff_mm * diff_mm / gt_mm;
    if (std::max(d / d_gt, d_gt / d) < 1.25) ++delta_ok;
    ++r.count;
  }
  if (r.count == 0) throw EmptyEvaluation("evaluate: no eligible pixel");
  const long double c = r.count;
  r.mae = static_cast<double>(abs_sum / c);
  r.rmse = std::sqrt(static_cast<double>(sq_sum / c));
  r.absrel = static_cast<double>(absrel_sum / c);
  r.sqrel = static_cast<double>(sqrel_sum / c);
  r.delta1 = static_cast<double>(delta_ok) / static_cast<double>(r.count);
  return r;
}

/// One report per range cap; caps must be ascending.
inline std::vector<EvalReport> evaluate_sweep(const AlignedDepthMap& pred,
                                              const SparseDepthImage& gt,
                                              const std::vector<double>& caps) {
  for (size_t i = 1; i < caps.size(); ++i)
    if (caps[i] <= caps[i - 1])
      throw std::invalid_argument("evaluate_sweep: caps must be ascending");
  std::vector<EvalReport> reports;
  reports.reserve(caps.size());
  for (const double cap : caps) reports.push_back(evaluate(pred, gt, cap));
  return reports;
}

}  // namespace racal
