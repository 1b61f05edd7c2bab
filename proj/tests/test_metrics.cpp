#include "racal/metrics.hpp"

#include <doctest.h>

#include <random>

using namespace racal;

namespace {

AlignedDepthMap from_values(int w, int h, const std::vector<double>& vals) {
  AlignedDepthMap m(w, h);
  for (size_t i = 0; i < vals.size(); ++i) {
    m.depth[i] = vals[i];
    m.defined[i] = vals[i] > 0.0;
  }
  return m;
}

}  // namespace

TEST_CASE("a perfect prediction zeroes every error metric") {
  SparseDepthImage gt(4, 1);
  for (int x = 0; x < 4; ++x) gt.set(x, 0, 5.0 + x);
  const auto pred = from_values(4, 1, {5.0, 6.0, 7.0, 8.0});
  const auto r = evaluate(pred, gt, 100.0);
  CHECK(r.mae == 0.0);
  CHECK(r.rmse == 0.0);
  CHECK(r.absrel == 0.0);
  CHECK(r.sqrel == 0.0);
  CHECK(r.delta1 == 1.0);
  CHECK(r.count == 4);
  CHECK(r.undefined == 0);
}

TEST_CASE("uniform 1.3x overestimate hits the closed forms") {
  SparseDepthImage gt(3, 1);
  gt.set(0, 0, 10.0);
  gt.set(1, 0, 20.0);
  gt.set(2, 0, 40.0);
  const auto pred = from_values(3, 1, {13.0, 26.0, 52.0});
  const auto r = evaluate(pred, gt, 100.0);
  // errors in mm: 3000, 6000, 12000
  CHECK(r.mae == doctest::Approx(7000.0).epsilon(1e-12));
  CHECK(r.rmse == doctest::Approx(std::sqrt((9e6 + 36e6 + 144e6) / 3.0)).epsilon(1e-12));
  CHECK(r.absrel == doctest::Approx(0.3).epsilon(1e-12));
  // SqRel in mm: mean of err_mm^2 / gt_mm
  CHECK(r.sqrel ==
        doctest::Approx((9e6 / 1e4 + 36e6 / 2e4 + 144e6 / 4e4) / 3.0).epsilon(1e-12));
  CHECK(r.delta1 == 0.0);  // ratio 1.3 >= 1.25 everywhere
}

TEST_CASE("metrics match a scalar oracle on random data") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_real_distribution<double> ud(1.0, 90.0);
  SparseDepthImage gt(50, 40);
  AlignedDepthMap pred(50, 40);
  for (size_t i = 0; i < gt.depth.size(); ++i) {
    if (uni(rng) < 0.4) {
      gt.depth[i] = ud(rng);
      gt.valid[i] = 1;
    }
    if (uni(rng) < 0.8) {
      pred.depth[i] = ud(rng);
      pred.defined[i] = 1;
    }
  }
  const double cap = 60.0;
  const auto r = evaluate(pred, gt, cap);

  double abs_sum = 0, sq_sum = 0, ar_sum = 0, sr_sum = 0;
  long n = 0, undef = 0, dok = 0;
  for (size_t i = 0; i < gt.depth.size(); ++i) {
    if (!gt.valid[i] || gt.depth[i] <= 0.0 || gt.depth[i] > cap) continue;
    if (!pred.defined[i]) {
      ++undef;
      continue;
    }
    const double e = (pred.depth[i] - gt.depth[i]) * 1000.0;
    abs_sum += std::abs(e);
    sq_sum += e * e;
    ar_sum += std::abs(e) / (gt.depth[i] * 1000.0);
    sr_sum += e * e / (gt.depth[i] * 1000.0);
    if (std::max(pred.depth[i] / gt.depth[i], gt.depth[i] / pred.depth[i]) < 1.25)
      ++dok;
    ++n;
  }
  CHECK(r.count == n);
  CHECK(r.undefined == undef);
  CHECK(r.mae == doctest::Approx(abs_sum / n).epsilon(1e-9));
  CHECK(r.rmse == doctest::Approx(std::sqrt(sq_sum / n)).epsilon(1e-9));
  CHECK(r.absrel == doctest::Approx(ar_sum / n).epsilon(1e-9));
  CHECK(r.sqrel == doctest::Approx(sr_sum / n).epsilon(1e-9));
  CHECK(r.delta1 == doctest::Approx(double(dok) / n).epsilon(1e-12));
}

TEST_CASE("RMSE dominates MAE") {
  std::mt19937_64 rng(62);
  std::uniform_real_distribution<double> ud(1.0, 80.0);
  for (int trial = 0; trial < 10; ++trial) {
    SparseDepthImage gt(20, 20);
    AlignedDepthMap pred(20, 20);
    for (size_t i = 0; i < gt.depth.size(); ++i) {
      gt.depth[i] = ud(rng);
      gt.valid[i] = 1;
      pred.depth[i] = ud(rng);
      pred.defined[i] = 1;
    }
    const auto r = evaluate(pred, gt, 100.0);
    CHECK(r.rmse >= r.mae - 1e-9);
  }
}

TEST_CASE("delta1 is symmetric in prediction and ground truth") {
  std::mt19937_64 rng(63);
  std::uniform_real_distribution<double> ud(1.0, 50.0);
  SparseDepthImage gt(10, 10);
  AlignedDepthMap pred(10, 10);
  for (size_t i = 0; i < gt.depth.size(); ++i) {
    gt.depth[i] = ud(rng);
    gt.valid[i] = 1;
    pred.depth[i] = ud(rng);
    pred.defined[i] = 1;
  }
  SparseDepthImage gt2(10, 10);
  AlignedDepthMap pred2(10, 10);
  for (size_t i = 0; i < gt.depth.size(); ++i) {
    gt2.depth[i] = pred.depth[i];
    gt2.valid[i] = 1;
    pred2.depth[i] = gt.depth[i];
    pred2.defined[i] = 1;
  }
  CHECK(evaluate(pred, gt, 100.0).delta1 == evaluate(pred2, gt2, 100.0).delta1);
}

TEST_CASE("range caps restrict the eligible set monotonically") {
  std::mt19937_64 rng(64);
  std::uniform_real_distribution<double> ud(1.0, 90.0);
  SparseDepthImage gt(30, 30);
  AlignedDepthMap pred(30, 30);
  for (size_t i = 0; i < gt.depth.size(); ++i) {
    gt.depth[i] = ud(rng);
    gt.valid[i] = 1;
    pred.depth[i] = ud(rng);
    pred.defined[i] = 1;
  }
  long prev = 0;
  for (double cap : {20.0, 40.0, 60.0, 90.0}) {
    const auto r = evaluate(pred, gt, cap);
    CHECK(r.count >= prev);
    prev = r.count;
  }
}

TEST_CASE("evaluate_sweep composes per-cap evaluation") {
  std::mt19937_64 rng(65);
  std::uniform_real_distribution<double> ud(1.0, 90.0);
  SparseDepthImage gt(15, 15);
  AlignedDepthMap pred(15, 15);
  for (size_t i = 0; i < gt.depth.size(); ++i) {
    gt.depth[i] = ud(rng);
    gt.valid[i] = 1;
    pred.depth[i] = ud(rng);
    pred.defined[i] = 1;
  }
  const std::vector<double> caps = {30.0, 50.0, 90.0};
  const auto sweep = evaluate_sweep(pred, gt, caps);
  REQUIRE(sweep.size() == caps.size());
  for (size_t i = 0; i < caps.size(); ++i) {
    const auto single = evaluate(pred, gt, caps[i]);
    CHECK(sweep[i].mae == single.mae);
    CHECK(sweep[i].rmse == single.rmse);
    CHECK(sweep[i].count == single.count);
  }
  CHECK_THROWS_AS(evaluate_sweep(pred, gt, {50.0, 30.0}), std::invalid_argument);
}

TEST_CASE("no eligible pixel raises EmptyEvaluation") {
  SparseDepthImage gt(5, 5);
  AlignedDepthMap pred(5, 5);
  CHECK_THROWS_AS(evaluate(pred, gt, 100.0), EmptyEvaluation);
  gt.set(2, 2, 10.0);  // gt valid but pred undefined
  CHECK_THROWS_AS(evaluate(pred, gt, 100.0), EmptyEvaluation);
  gt.set(3, 3, 10.0);
  pred.depth[3 * 5 + 3] = 9.0;
  pred.defined[3 * 5 + 3] = 1;
  CHECK_THROWS_AS(evaluate(pred, gt, 5.0), EmptyEvaluation);  // cap excludes it
  CHECK(evaluate(pred, gt, 100.0).count == 1);
}

TEST_CASE("shape mismatch is rejected") {
  SparseDepthImage gt(5, 5);
  AlignedDepthMap pred(5, 4);
  CHECK_THROWS_AS(evaluate(pred, gt, 100.0), std::invalid_argument);
}
