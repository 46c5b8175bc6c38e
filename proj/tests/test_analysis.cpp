#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "stagin/analysis.hpp"
#include "stagin/special.hpp"

using namespace stagin;

namespace {

Mat random_row_stochastic(int t, Rng& rng) {
  Mat z(t, t);
  for (int i = 0; i < t; ++i) {
    double row = 0.0;
    for (int j = 0; j < t; ++j) {
      z(i, j) = rng.u01() + 1e-3;
      row += z(i, j);
    }
    for (int j = 0; j < t; ++j) z(i, j) /= row;
  }
  return z;
}

}  // namespace

TEST_CASE("temporal_attention_vector: uniform, permutation, column-mean oracle") {
  int t = 5;
  Mat uniform(t, t, 1.0 / t);
  auto zu = analysis::temporal_attention_vector(uniform);
  for (double v : zu) CHECK(v == doctest::Approx(1.0 / t).epsilon(1e-12));

  Mat eye(t, t, 0.0);
  for (int i = 0; i < t; ++i) eye(i, i) = 1.0;
  auto ze = analysis::temporal_attention_vector(eye);
  for (double v : ze) CHECK(v == doctest::Approx(1.0 / t).epsilon(1e-12));

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Mat z = random_row_stochastic(4 + static_cast<int>(rng.below(10)), rng);
    auto v = analysis::temporal_attention_vector(z);
    double sum = 0.0;
    for (int j = 0; j < z.cols; ++j) {
      double col = 0.0;
      for (int i = 0; i < z.rows; ++i) col += z(i, j);
      CHECK(v[static_cast<size_t>(j)] == doctest::Approx(col / z.rows).epsilon(1e-12));
      sum += v[static_cast<size_t>(j)];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }

  Mat bad(3, 3, 0.9);
  CHECK_THROWS_AS(analysis::temporal_attention_vector(bad), analysis::NotStochastic);
}

TEST_CASE("attended_timepoints: degenerate sigma, hand-computed sigma, vacuous threshold") {
  auto flat = analysis::attended_timepoints({0.2, 0.2, 0.2, 0.2}, 1.0);
  CHECK(flat.degenerate);
  CHECK(flat.indices.size() == 4);

  // z = [0.9, 0.05, 0.05]: sample std = sqrt(((0.9-1/3)^2 + 2(0.05-1/3)^2)/2)
  std::vector<double> z = {0.9, 0.05, 0.05};
  double mean = (0.9 + 0.05 + 0.05) / 3.0;
  double sigma = std::sqrt(((0.9 - mean) * (0.9 - mean) + 2.0 * (0.05 - mean) * (0.05 - mean)) / 2.0);
  REQUIRE(0.9 > sigma);
  REQUIRE(0.05 < sigma);
  auto att = analysis::attended_timepoints(z, 1.0);
  CHECK_FALSE(att.degenerate);
  CHECK(att.indices == std::vector<int>{0});

  auto none = analysis::attended_timepoints(z, 1e9);
  CHECK(none.indices.empty());

  // mean-centered variant shifts the threshold
  auto centered = analysis::attended_timepoints(z, 1.0, true);
  CHECK(centered.indices == std::vector<int>{0});
}

TEST_CASE("kmeans: separable recovery, zero inertia, inertia oracle, monotonicity") {
  Rng rng(5);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 20; ++i) {
    std::vector<double> p = {rng.u01() * 0.1, rng.u01() * 0.1};
    if (i >= 10) {
      p[0] += 10.0;
      p[1] += 10.0;
    }
    pts.push_back(p);
  }
  analysis::ClusterResult res = analysis::kmeans(pts, 2, 17);
  for (int i = 1; i < 10; ++i) CHECK(res.assignments[static_cast<size_t>(i)] == res.assignments[0]);
  for (int i = 11; i < 20; ++i) CHECK(res.assignments[static_cast<size_t>(i)] == res.assignments[10]);
  CHECK(res.assignments[0] != res.assignments[10]);

  // k = #samples: zero inertia
  std::vector<std::vector<double>> few(pts.begin(), pts.begin() + 5);
  analysis::ClusterResult zero = analysis::kmeans(few, 5, 3);
  CHECK(zero.inertia == doctest::Approx(0.0).epsilon(1e-18));

  // random data, k=7: final inertia matches a single-pass recomputation
  std::vector<std::vector<double>> rnd;
  for (int i = 0; i < 60; ++i) {
    std::vector<double> p(6);
    for (auto& v : p) v = rng.u01();
    rnd.push_back(p);
  }
  analysis::ClusterResult r7 = analysis::kmeans(rnd, 7, 23);
  double recomputed = 0.0;
  for (size_t i = 0; i < rnd.size(); ++i) {
    const auto& c = r7.centroids[static_cast<size_t>(r7.assignments[i])];
    double d = 0.0;
    for (size_t j = 0; j < c.size(); ++j) d += (rnd[i][j] - c[j]) * (rnd[i][j] - c[j]);
    recomputed += d;
  }
  CHECK(r7.inertia == doctest::Approx(recomputed).epsilon(1e-8));

  // non-increasing inertia and assignment fixed point
  for (size_t i = 1; i < r7.inertia_per_iter.size(); ++i)
    CHECK(r7.inertia_per_iter[i] <= r7.inertia_per_iter[i - 1] + 1e-12);
  for (size_t i = 0; i < rnd.size(); ++i) {
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < 7; ++c) {
      double d = 0.0;
      for (size_t j = 0; j < rnd[i].size(); ++j)
        d += (rnd[i][j] - r7.centroids[static_cast<size_t>(c)][j]) *
             (rnd[i][j] - r7.centroids[static_cast<size_t>(c)][j]);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    CHECK(best == r7.assignments[i]);
  }

  // determinism
  analysis::ClusterResult again = analysis::kmeans(rnd, 7, 23);
  CHECK(again.assignments == r7.assignments);
  CHECK(again.inertia == r7.inertia);

  CHECK_THROWS_AS(analysis::kmeans(few, 6, 2), analysis::TooFewSamples);
}

TEST_CASE("cluster_group_ratio: saturated cluster, ordering, errors") {
  std::vector<int> assign = {0, 0, 0, 0};
  std::vector<int> groups = {0, 0, 1, 1};
  analysis::GroupRatioTable t = analysis::cluster_group_ratio(assign, groups, 3);
  CHECK(t.ratios[0][0] == doctest::Approx(1.0));
  CHECK(t.ratios[0][1] == doctest::Approx(1.0));
  CHECK(t.counts[0][0] == 2);
  CHECK(t.counts[0][1] == 2);

  // ratio columns sum to 1 per group; order is descending group0/group1 ratio
  std::vector<int> a2 = {0, 0, 0, 1, 1, 2, 2, 2, 2, 1};
  std::vector<int> g2 = {0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  analysis::GroupRatioTable t2 = analysis::cluster_group_ratio(a2, g2, 3);
  double s0 = 0, s1 = 0;
  for (int c = 0; c < 3; ++c) {
    s0 += t2.ratios[static_cast<size_t>(c)][0];
    s1 += t2.ratios[static_cast<size_t>(c)][1];
  }
  CHECK(s0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s1 == doctest::Approx(1.0).epsilon(1e-12));
  auto ratio = [&t2](int c) {
    double den = t2.ratios[static_cast<size_t>(c)][1];
    return den == 0.0 ? 1e18 : t2.ratios[static_cast<size_t>(c)][0] / den;
  };
  for (size_t i = 1; i < t2.cluster_order.size(); ++i)
    CHECK(ratio(t2.cluster_order[i - 1]) >= ratio(t2.cluster_order[i]));

  CHECK_THROWS_AS(analysis::cluster_group_ratio({}, {}, 2), analysis::EmptyAttendedSet);
}

TEST_CASE("chi_square_independence: exact values, invariance, survival oracle") {
  // proportional table: statistic 0, p = 1
  analysis::ChiSquare ind = analysis::chi_square_independence({{10, 20}, {5, 10}, {15, 30}});
  CHECK(ind.statistic == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ind.p == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ind.dof == 2);

  analysis::ChiSquare diag = analysis::chi_square_independence({{10, 0}, {0, 10}});
  CHECK(diag.statistic == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(diag.dof == 1);

  // swapping the two group columns leaves the statistic unchanged
  analysis::ChiSquare a = analysis::chi_square_independence({{12, 5}, {3, 9}, {7, 7}});
  analysis::ChiSquare b = analysis::chi_square_independence({{5, 12}, {9, 3}, {7, 7}});
  CHECK(a.statistic == doctest::Approx(b.statistic).epsilon(1e-12));

  CHECK_THROWS_AS(analysis::chi_square_independence({{1, 0}, {2, 0}}), analysis::ZeroExpected);

  // survival function against frozen quantiles and the series oracle
  CHECK(special::chi2_sf(3.841, 1) == doctest::Approx(0.050013683763956804).epsilon(1e-10));
  struct Ref {
    double stat;
    int dof;
    double p;
  };
  const Ref refs[] = {
      {0.5, 1, 0.47950012218695337},   {1.0, 1, 0.31731050786291115},
      {3.841, 1, 0.050013683763956804}, {5.0, 2, 0.0820849986238988},
      {7.81, 3, 0.05010605635000589},  {9.49, 4, 0.049953131223294894},
      {11.07, 5, 0.050009618622405425}, {12.59, 6, 0.05002901173891519},
      {14.07, 7, 0.049950250317479475}, {20.0, 10, 0.029252688076961124},
      {3.0, 2, 0.22313016014842982},   {1.5, 4, 0.8266414672967757},
      {25.0, 15, 0.0499434336264283},  {18.31, 10, 0.04995416634369678},
      {30.14, 20, 0.06761669605846818}, {0.1, 1, 0.7518296340458492},
      {2.7, 1, 0.10034824646229054},   {40.0, 12, 7.190884052842894e-05},
      {6.0, 6, 0.42319008112684364},   {100.0, 70, 0.010781459164334513},
  };
  for (const auto& r : refs) {
    CHECK(special::chi2_sf(r.stat, r.dof) == doctest::Approx(r.p).epsilon(1e-9));
    CHECK(std::abs(special::chi2_sf(r.stat, r.dof) - oracles::chi2_sf_series_oracle(r.stat, r.dof)) <
          1e-6);
  }
}

TEST_CASE("student_t_sf against frozen references") {
  struct Ref {
    double t;
    double df;
    double p;
  };
  const Ref refs[] = {
      {2.0, 10, 0.036694017385370196}, {1.5, 29, 0.07221184802019287},
      {0.0, 5, 0.5},                   {-1.0, 8, 0.8267032464563329},
      {2.228, 10, 0.025005885908555663}, {1.645, 1000, 0.0501420422077872},
      {3.0, 3, 0.028834442811218657},
  };
  for (const auto& r : refs)
    CHECK(special::student_t_sf(r.t, r.df) == doctest::Approx(r.p).epsilon(1e-9));
}

TEST_CASE("glm_fit: exact recovery, rank deficiency, normal-equations oracle") {
  int t = 24;
  Mat design(t, 2, 0.0);
  for (int i = 0; i < t; ++i) {
    design(i, 0) = (i / 4) % 2;       // task indicator blocks
    design(i, 1) = 1.0 - design(i, 0);  // rest indicator
  }

  // noiseless construction: exact recovery
  Rng rng(7);
  Mat beta_true(2, 3);
  beta_true.d = {0.8, 0.1, -0.4, 0.2, 0.5, 0.9};
  Mat z(t, 3);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < 3; ++j)
      z(i, j) = design(i, 0) * beta_true(0, j) + design(i, 1) * beta_true(1, j);
  analysis::GlmFit fit = analysis::glm_fit(z, design);
  for (size_t i = 0; i < beta_true.d.size(); ++i)
    CHECK(fit.beta.d[i] == doctest::Approx(beta_true.d[i]).epsilon(1e-10));

  // duplicate columns
  Mat dup(t, 2, 1.0);
  CHECK_THROWS_AS(analysis::glm_fit(z, dup), analysis::RankDeficientDesign);

  // random noisy instance vs normal equations (M^T M)^{-1} M^T z
  Mat zn(t, 4);
  for (auto& v : zn.d) v = rng.u01();
  analysis::GlmFit nf = analysis::glm_fit(zn, design);
  double mtm[2][2] = {{0, 0}, {0, 0}};
  for (int i = 0; i < t; ++i) {
    mtm[0][0] += design(i, 0) * design(i, 0);
    mtm[0][1] += design(i, 0) * design(i, 1);
    mtm[1][0] += design(i, 1) * design(i, 0);
    mtm[1][1] += design(i, 1) * design(i, 1);
  }
  double det = mtm[0][0] * mtm[1][1] - mtm[0][1] * mtm[1][0];
  for (int col = 0; col < 4; ++col) {
    double mtz0 = 0, mtz1 = 0;
    for (int i = 0; i < t; ++i) {
      mtz0 += design(i, 0) * zn(i, col);
      mtz1 += design(i, 1) * zn(i, col);
    }
    double b0 = (mtm[1][1] * mtz0 - mtm[0][1] * mtz1) / det;
    double b1 = (-mtm[1][0] * mtz0 + mtm[0][0] * mtz1) / det;
    CHECK(nf.beta(0, col) == doctest::Approx(b0).epsilon(1e-8));
    CHECK(nf.beta(1, col) == doctest::Approx(b1).epsilon(1e-8));
  }

  // residual orthogonal to the design: ||M^T r||_inf < 1e-8 ||z||_inf
  double zmax = 0.0;
  for (double v : zn.d) zmax = std::max(zmax, std::abs(v));
  for (int col = 0; col < 4; ++col) {
    double r0 = 0, r1 = 0;
    for (int i = 0; i < t; ++i) {
      r0 += design(i, 0) * nf.residuals(i, col);
      r1 += design(i, 1) * nf.residuals(i, col);
    }
    CHECK(std::abs(r0) < 1e-8 * zmax);
    CHECK(std::abs(r1) < 1e-8 * zmax);
  }
}

TEST_CASE("contrast_test: null case, planted effect, Bonferroni arithmetic") {
  int n_rois = 12, subjects = 50;
  // all-zero contrasts: nothing significant
  std::vector<Mat> null_betas(static_cast<size_t>(subjects), Mat(2, n_rois, 0.0));
  analysis::GlmResult r0 = analysis::contrast_test(null_betas, n_rois);
  CHECK(r0.significant.empty());

  // planted responsive ROIs 2 and 7 with effect >> noise
  Rng rng(13);
  std::vector<Mat> betas;
  for (int s = 0; s < subjects; ++s) {
    Mat b(2, n_rois, 0.0);
    for (int roi = 0; roi < n_rois; ++roi) {
      double noise = 0.01 * (2.0 * rng.u01() - 1.0);
      b(0, roi) = noise + ((roi == 2 || roi == 7) ? 0.5 : 0.0);
      b(1, roi) = 0.0;
    }
    betas.push_back(b);
  }
  analysis::GlmResult r1 = analysis::contrast_test(betas, n_rois);
  CHECK(r1.significant == std::set<int>{2, 7});

  // Bonferroni dominance: corrected significant set within uncorrected
  for (int roi = 0; roi < n_rois; ++roi) {
    CHECK(r1.p_fwe[static_cast<size_t>(roi)] >= r1.p_raw[static_cast<size_t>(roi)]);
    if (r1.p_fwe[static_cast<size_t>(roi)] < 0.05) CHECK(r1.p_raw[static_cast<size_t>(roi)] < 0.05);
  }
  // raw p = 0.0001 with N = 400 corrects to 0.04
  CHECK(std::min(1.0, 400 * 0.0001) == doctest::Approx(0.04));

  CHECK_THROWS_AS(analysis::contrast_test({Mat(2, 3, 0.0)}, 3), analysis::TooFewSubjects);
}

TEST_CASE("icn_proportion: concentrated, empty, planted split") {
  std::vector<std::string> labels = {"DMN", "DMN", "SMN", "SMN", "VN", "unknown"};
  analysis::IcnProportion one = analysis::icn_proportion({0, 1}, labels);
  CHECK(one.proportions[6] == doctest::Approx(1.0));  // DMN bin
  double total = 0.0;
  for (double p : one.proportions) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  analysis::IcnProportion empty = analysis::icn_proportion({}, labels);
  CHECK(empty.empty_set);
  for (double p : empty.proportions) CHECK(p == 0.0);

  // planted two-ICN split 1:3
  analysis::IcnProportion split = analysis::icn_proportion({0, 2, 3, 5}, labels);
  CHECK(split.proportions[6] == doctest::Approx(0.25));   // DMN
  CHECK(split.proportions[1] == doctest::Approx(0.5));    // SMN
  CHECK(split.proportions[7] == doctest::Approx(0.25));   // unknown
}

TEST_CASE("mean_spatial_attention and top-percentile selection") {
  // constant over time: identity on one slice
  Mat layer(4, 6);
  Rng rng(19);
  for (int v = 0; v < 6; ++v) {
    double x = rng.u01();
    for (int t = 0; t < 4; ++t) layer(t, v) = x;
  }
  Mat mean = analysis::mean_spatial_attention({layer});
  for (int v = 0; v < 6; ++v) CHECK(mean(0, v) == doctest::Approx(layer(0, v)).epsilon(1e-12));

  // direct mean oracle
  Mat noisy(5, 7);
  for (auto& v : noisy.d) v = rng.u01();
  Mat m2 = analysis::mean_spatial_attention({noisy});
  for (int v = 0; v < 7; ++v) {
    double s = 0.0;
    for (int t = 0; t < 5; ++t) s += noisy(t, v);
    CHECK(m2(0, v) == doctest::Approx(s / 5.0).epsilon(1e-12));
  }

  // N=100, p=5 selects exactly 5
  std::vector<double> att(100);
  for (auto& v : att) v = rng.u01();
  auto top = analysis::top_percentile_rois(att, 5.0);
  CHECK(top.size() == 5);
  // selected entries dominate the rest
  double worst_selected = 1e300;
  for (int idx : top) worst_selected = std::min(worst_selected, att[static_cast<size_t>(idx)]);
  int better = 0;
  for (double v : att)
    if (v > worst_selected) ++better;
  CHECK(better <= 5);
}
