#include "racal/align.hpp"

#include <doctest.h>

#include <random>

using namespace racal;

namespace {

CameraModel test_camera() { return CameraModel{200.0, 200.0, 100.0, 75.0, 200, 150}; }

RadarPoint point_at(double u, double v, double depth) {
  RadarPoint p;
  p.u = u;
  p.v = v;
  p.range = depth;
  return p;
}

}  // namespace

TEST_CASE("screen_and_refine applies the confidence gate and displacement") {
  std::vector<RadarPoint> pts = {point_at(100, 50, 12.0), point_at(40, 40, 9.0)};
  RefinerOutputs out;
  out.confidence = {0.9, 0.3};
  out.disp_u = {1.0, 2.0};
  out.disp_v = {-2.0, 2.0};
  const auto anchors = screen_and_refine(pts, out, 0.5, test_camera());
  REQUIRE(anchors.size() == 1);
  CHECK(anchors[0].u == 101.0);
  CHECK(anchors[0].v == 48.0);
  CHECK(anchors[0].depth == 12.0);
}

TEST_CASE("refined coordinates outside the image are dropped") {
  std::vector<RadarPoint> pts = {point_at(199, 100, 5.0)};
  RefinerOutputs out;
  out.confidence = {0.99};
  out.disp_u = {4.0};
  out.disp_v = {0.0};
  CHECK(screen_and_refine(pts, out, 0.5, test_camera()).empty());
}

TEST_CASE("screening matches the per-point rule on a mixed batch") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<RadarPoint> pts;
  RefinerOutputs out;
  for (int i = 0; i < 100; ++i) {
    pts.push_back(point_at(20 + uni(rng) * 160, 20 + uni(rng) * 110, 5 + uni(rng) * 40));
    out.confidence.push_back(uni(rng));
    out.disp_u.push_back(uni(rng) * 6 - 3);
    out.disp_v.push_back(uni(rng) * 6 - 3);
  }
  const auto anchors = screen_and_refine(pts, out, 0.5, test_camera());
  size_t j = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    if (out.confidence[i] < 0.5) continue;
    const double u = pts[i].u + out.disp_u[i], v = pts[i].v + out.disp_v[i];
    if (!projection_in_bounds(test_camera(), u, v)) continue;
    REQUIRE(j < anchors.size());
    CHECK(anchors[j].u == u);
    CHECK(anchors[j].depth == pts[i].range);
    ++j;
  }
  CHECK(j == anchors.size());
}

TEST_CASE("raising the screening threshold never adds anchors") {
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<RadarPoint> pts;
  RefinerOutputs out;
  for (int i = 0; i < 60; ++i) {
    pts.push_back(point_at(30 + uni(rng) * 140, 30 + uni(rng) * 90, 10.0));
    out.confidence.push_back(uni(rng));
    out.disp_u.push_back(0.0);
    out.disp_v.push_back(0.0);
  }
  size_t prev = pts.size() + 1;
  for (double tau : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const size_t n = screen_and_refine(pts, out, tau, test_camera()).size();
    CHECK(n <= prev);
    prev = n;
  }
}

TEST_CASE("fit_affine recovers exact affine data") {
  std::vector<std::pair<double, double>> pairs;
  for (double m : {0.02, 0.05, 0.09, 0.13}) {
    const double inv_d = 2.0 * m + 0.1;
    pairs.emplace_back(m, 1.0 / inv_d);
  }
  const auto fit = fit_affine(pairs);
  CHECK(fit.alpha == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fit.beta == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(fit.residual == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("fit_affine on identity-aligned data gives alpha=1, beta=0") {
  std::vector<std::pair<double, double>> pairs;
  for (double d : {5.0, 10.0, 22.0, 40.0}) pairs.emplace_back(1.0 / d, d);
  const auto fit = fit_affine(pairs);
  CHECK(fit.alpha == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.beta == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("fit_affine matches an extended-precision regression oracle") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> um(0.01, 0.3);
  std::normal_distribution<double> noise(0.0, 0.002);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 50; ++i) {
      const double m = um(rng);
      const double inv_d = 1.7 * m + 0.03 + noise(rng);
      pairs.emplace_back(m, 1.0 / inv_d);
    }
    const auto fit = fit_affine(pairs);
    // Independent normal equations in long double.
    long double sx = 0, sxx = 0, sy = 0, sxy = 0;
    for (auto& [x, d] : pairs) {
      const long double y = 1.0L / d;
      sx += x;
      sxx += (long double)x * x;
      sy += y;
      sxy += x * y;
    }
    const long double n = pairs.size();
    const long double a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const long double b = (sy - a * sx) / n;
    CHECK(fit.alpha == doctest::Approx((double)a).epsilon(1e-9));
    CHECK(fit.beta == doctest::Approx((double)b).epsilon(1e-9));
  }
}

TEST_CASE("fit_affine rejects degenerate inputs") {
  CHECK_THROWS_AS(fit_affine({{0.1, 10.0}}), DegenerateFit);
  CHECK_THROWS_AS(fit_affine({{0.1, 10.0}, {0.1, 12.0}, {0.1, 9.0}}), DegenerateFit);
}

TEST_CASE("fit_affine residual beats every nearby parameter pair") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> um(0.02, 0.25);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::vector<std::pair<double, double>> pairs;
  for (int i = 0; i < 30; ++i) {
    const double m = um(rng);
    pairs.emplace_back(m, 1.0 / (1.2 * m + 0.05 + noise(rng)));
  }
  const auto fit = fit_affine(pairs);
  auto sse = [&](double a, double b) {
    double s = 0;
    for (auto& [x, d] : pairs) {
      const double r = 1.0 / d - a * x - b;
      s += r * r;
    }
    return s;
  };
  for (int i = -50; i <= 50; ++i)
    for (int j = -50; j <= 50; ++j) {
      const double a = fit.alpha + i * 1e-4;
      const double b = fit.beta + j * 1e-5;
      CHECK(sse(a, b) >= fit.residual - 1e-12);
    }
}

TEST_CASE("valid_set implements the strict double inequality") {
  InverseDepthMap inv(20, 20);
  inv.at(5, 5) = 0.1;
  inv.at(10, 10) = 0.2;
  std::vector<RefinedAnchor> anchors = {{5, 5, 10.0, 1.0}, {10, 10, 5.0, 1.0},
                                        {15, 15, 7.0, 1.0}};  // third samples zero
  CHECK(valid_set(anchors, inv, 1e9).size() == 2);
  CHECK(valid_set(anchors, inv, 0.05).empty());
  CHECK(valid_set(anchors, inv, 0.15) == std::vector<size_t>{0});
  CHECK(valid_set(anchors, inv, 0.2) == std::vector<size_t>{0});  // strict <
}

TEST_CASE("valid_set matches a brute-force membership scan") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  InverseDepthMap inv(40, 40);
  for (auto& v : inv.values) v = uni(rng) < 0.3 ? 0.0 : uni(rng) * 0.4;
  std::vector<RefinedAnchor> anchors;
  for (int i = 0; i < 60; ++i)
    anchors.push_back({uni(rng) * 39, uni(rng) * 39, 5 + uni(rng) * 30, 1.0});
  for (double t : {0.05, 0.1, 0.2, 0.5}) {
    const auto set = valid_set(anchors, inv, t);
    std::vector<size_t> expect;
    for (size_t i = 0; i < anchors.size(); ++i) {
      const int x = (int)std::lround(anchors[i].u), y = (int)std::lround(anchors[i].v);
      const double val = inv.at(x, y);
      if (val > 0.0 && val < t) expect.push_back(i);
    }
    CHECK(set == expect);
  }
}

TEST_CASE("select_threshold picks the exhaustive-sweep winner") {
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    InverseDepthMap inv(30, 30);
    for (auto& v : inv.values) v = uni(rng) < 0.2 ? 0.0 : 0.02 + uni(rng) * 0.3;
    std::vector<RefinedAnchor> anchors;
    for (int i = 0; i < 40; ++i)
      anchors.push_back({uni(rng) * 29, uni(rng) * 29, 3 + uni(rng) * 40, 1.0});
    std::vector<double> cands;
    for (int i = 1; i <= 8; ++i) cands.push_back(0.05 * i);

    AffineAlignment got;
    bool feasible = true;
    try {
      got = select_threshold(anchors, inv, cands);
    } catch (const NoFeasibleThreshold&) {
      feasible = false;
    }

    // Exhaustive oracle.
    bool found = false;
    double best_res = 0, best_t = 0, best_a = 0, best_b = 0;
    for (double t : cands) {
      const auto set = valid_set(anchors, inv, t);
      if (set.size() < 2) continue;
      std::vector<std::pair<double, double>> pairs;
      for (size_t i : set)
        pairs.emplace_back(sample_inverse_depth(inv, anchors[i].u, anchors[i].v),
                           anchors[i].depth);
      AffineFit fit;
      try {
        fit = fit_affine(pairs);
      } catch (const DegenerateFit&) {
        continue;
      }
      if (!found || fit.residual < best_res ||
          (fit.residual == best_res && t > best_t)) {
        found = true;
        best_res = fit.residual;
        best_t = t;
        best_a = fit.alpha;
        best_b = fit.beta;
      }
    }
    REQUIRE(feasible == found);
    if (found) {
      CHECK(got.threshold == best_t);
      CHECK(got.residual == best_res);
      CHECK(got.alpha == best_a);
      CHECK(got.beta == best_b);
    }
  }
}

TEST_CASE("exact-affine data selects a zero-residual candidate") {
  InverseDepthMap inv(20, 20);
  std::vector<RefinedAnchor> anchors;
  const double a = 0.9, b = 0.04;
  for (int i = 0; i < 10; ++i) {
    const double d = 5.0 + i * 4.0;
    inv.at(i, i) = a / d + b;
    anchors.push_back({double(i), double(i), d, 1.0});
  }
  const auto cands = default_candidates(inv, anchors);
  const auto al = select_threshold(anchors, inv, cands);
  CHECK(al.residual < 1e-20);
  CHECK(al.alpha == doctest::Approx(1.0 / a).epsilon(1e-9));
  CHECK(al.beta == doctest::Approx(-b / a).epsilon(1e-9));
}

TEST_CASE("residual ties resolve to the larger threshold") {
  InverseDepthMap inv(4, 1);
  inv.at(0, 0) = 0.05;
  inv.at(1, 0) = 0.1;
  inv.at(2, 0) = 0.3;  // excluded by every candidate below
  std::vector<RefinedAnchor> anchors = {
      {0, 0, 12.0, 1.0}, {1, 0, 7.0, 1.0}, {2, 0, 3.0, 1.0}};
  // Candidates 0.15 and 0.25 admit the same valid set, so their fits are
  // bit-identical and the tie must go to 0.25.
  const auto al = select_threshold(anchors, inv, {0.15, 0.25});
  CHECK(al.threshold == 0.25);
  CHECK(al.inliers == 2);
}

TEST_CASE("apply_alignment inverts the affine-aligned inverse depth") {
  InverseDepthMap inv(4, 1);
  inv.at(0, 0) = 0.05;
  inv.at(1, 0) = 0.0;
  inv.at(2, 0) = 0.1;
  inv.at(3, 0) = 0.2;
  AffineAlignment al;
  al.alpha = 1.0;
  al.beta = 0.0;
  const auto out = apply_alignment(inv, al);
  CHECK(out.depth[0] == doctest::Approx(20.0));
  CHECK_FALSE(out.defined[1]);
  CHECK(out.undefined_zero == 1);
  CHECK(out.undefined_nonpos == 0);
}

TEST_CASE("nonpositive aligned inverse depth is flagged, not clamped") {
  InverseDepthMap inv(2, 1);
  inv.at(0, 0) = 0.01;
  inv.at(1, 0) = 0.5;
  AffineAlignment al;
  al.alpha = 1.0;
  al.beta = -0.1;  // 0.01 - 0.1 < 0
  const auto out = apply_alignment(inv, al);
  CHECK_FALSE(out.defined[0]);
  CHECK(out.undefined_nonpos == 1);
  CHECK(out.defined[1]);
}

TEST_CASE("default_candidates produces decile thresholds") {
  InverseDepthMap inv(10, 1);
  std::vector<RefinedAnchor> anchors;
  for (int i = 0; i < 10; ++i) {
    inv.at(i, 0) = 0.01 * (i + 1);
    anchors.push_back({double(i), 0.0, 10.0, 1.0});
  }
  const auto cands = default_candidates(inv, anchors);
  REQUIRE(cands.size() == 10);
  for (int i = 0; i < 9; ++i)
    CHECK(cands[i] == doctest::Approx(0.01 * (i + 1)).epsilon(1e-12));
  CHECK(cands[9] > 0.1);  // top candidate admits the maximum under strict <
  // All anchors are admitted by the top candidate.
  CHECK(valid_set(anchors, inv, cands.back()).size() == 10);
}

TEST_CASE("default_candidates handles a degenerate distribution") {
  InverseDepthMap inv(5, 1);
  std::vector<RefinedAnchor> anchors;
  for (int i = 0; i < 5; ++i) {
    inv.at(i, 0) = 0.07;
    anchors.push_back({double(i), 0.0, 10.0, 1.0});
  }
  // Identical samples collapse to the raw value plus the nudged top candidate;
  // only the latter admits anything under the strict inequality.
  const auto cands = default_candidates(inv, anchors);
  REQUIRE(cands.size() == 2);
  CHECK(cands.back() > 0.07);
  CHECK(valid_set(anchors, inv, cands.front()).empty());
  CHECK(valid_set(anchors, inv, cands.back()).size() == 5);
}

TEST_CASE("default_candidates with no nonzero samples is an error") {
  InverseDepthMap inv(5, 1);
  std::vector<RefinedAnchor> anchors = {{1, 0, 10.0, 1.0}};
  CHECK_THROWS(default_candidates(inv, anchors));
  CHECK_THROWS(default_candidates(inv, {}));
}

TEST_CASE("affine equivariance of the fitted parameters") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  InverseDepthMap inv(30, 30);
  for (auto& v : inv.values) v = 0.02 + uni(rng) * 0.2;
  std::vector<RefinedAnchor> anchors;
  for (int i = 0; i < 50; ++i) {
    const double u = uni(rng) * 29, v = uni(rng) * 29;
    const double m = sample_inverse_depth(inv, u, v);
    anchors.push_back({u, v, 1.0 / (1.5 * m + 0.02 + 0.01 * (uni(rng) - 0.5)), 1.0});
  }
  const double a = 2.5, b = 0.03;
  InverseDepthMap inv2 = inv;
  for (auto& v : inv2.values) v = a * v + b;

  const auto cand1 = default_candidates(inv, anchors);
  const auto al1 = select_threshold(anchors, inv, cand1);
  const auto cand2 = default_candidates(inv2, anchors);
  const auto al2 = select_threshold(anchors, inv2, cand2);

  CHECK(al2.inliers == al1.inliers);
  CHECK(al2.alpha == doctest::Approx(al1.alpha / a).epsilon(1e-9));
  CHECK(al2.beta == doctest::Approx(al1.beta - al1.alpha * b / a).epsilon(1e-9));

  const auto d1 = apply_alignment(inv, al1);
  const auto d2 = apply_alignment(inv2, al2);
  for (size_t i = 0; i < d1.depth.size(); ++i) {
    REQUIRE(d1.defined[i] == d2.defined[i]);
    if (d1.defined[i])
      CHECK(d2.depth[i] == doctest::Approx(d1.depth[i]).epsilon(1e-6));
  }
}
