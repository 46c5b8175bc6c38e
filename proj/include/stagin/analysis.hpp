#pragma once

// Attention interpretation: temporal attention vectors, attended-timepoint
// thresholding, k-means FC state clustering with group ratios and a
// chi-square independence test, and spatial-attention GLM with contrast
// t-tests under Bonferroni FWE correction.

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "stagin/common.hpp"

namespace stagin::analysis {

struct NotStochastic : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooFewSamples : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyAttendedSet : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ZeroExpected : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RankDeficientDesign : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooFewSubjects : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Column mean of a row-stochastic T x T attention matrix; sums to 1.
std::vector<double> temporal_attention_vector(const Mat& z_time);

struct AttendedSet {
  std::vector<int> indices;
  bool degenerate = false;  // sigma was zero: every timepoint attended
};
// Indices with z[t] > alpha * sample std of z. When mean_centered is set the
// rule becomes z[t] > mean(z) + alpha * std (variant behind a flag).
AttendedSet attended_timepoints(const std::vector<double>& z_time, double alpha,
                                bool mean_centered = false);

struct ClusterResult {
  int k = 0;
  std::vector<std::vector<double>> centroids;
  std::vector<int> assignments;
  std::vector<double> inertia_per_iter;
  double inertia = 0.0;
};
// k-means++ seeding, Lloyd iterations; empty clusters reseeded to the
// farthest point. Deterministic given seed.
ClusterResult kmeans(const std::vector<std::vector<double>>& samples, int k, uint64_t seed,
                     int max_iter = 100);

struct GroupRatioTable {
  std::vector<std::vector<int>> counts;      // k x 2
  std::vector<std::vector<double>> ratios;   // k x 2, columns sum to 1
  std::vector<int> cluster_order;            // sorted by ratio(group0)/ratio(group1) desc
};
GroupRatioTable cluster_group_ratio(const std::vector<int>& assignments,
                                    const std::vector<int>& group_labels, int k);

struct ChiSquare {
  double statistic = 0.0;
  int dof = 0;
  double p = 1.0;
};
ChiSquare chi_square_independence(const std::vector<std::vector<int>>& table);

struct GlmFit {
  Mat beta;       // 2 x N
  Mat residuals;  // T x N
};
// Ordinary least squares per column of attn_seq against the T x 2 design.
GlmFit glm_fit(const Mat& attn_seq, const Mat& design);

struct GlmResult {
  std::vector<double> contrast_mean;  // per ROI mean of c^T beta across subjects
  std::vector<double> t_values;
  std::vector<double> p_raw;
  std::vector<double> p_fwe;          // Bonferroni
  std::set<int> significant;          // p_fwe < alpha
  double alpha = 0.05;
};
// One-sample one-sided t-test across subjects on c = [1,-1] per ROI.
GlmResult contrast_test(const std::vector<Mat>& subject_betas, int n_rois, double alpha = 0.05);

struct IcnProportion {
  std::vector<std::string> names;    // 7 ICN names then "unknown"
  std::vector<double> proportions;   // same length; sums to 1 for nonempty sets
  bool empty_set = false;
};
IcnProportion icn_proportion(const std::set<int>& significant,
                             const std::vector<std::string>& icn_labels);

// Time-average of z_space per layer (K x N) plus top-percentile ROI pick.
Mat mean_spatial_attention(const std::vector<Mat>& z_space_per_layer);
std::vector<int> top_percentile_rois(const std::vector<double>& attention, double percentile);

// Upper-triangle vectorisation used as the k-means feature space.
std::vector<double> upper_triangle(const std::vector<uint8_t>& adjacency, int n);
std::vector<double> upper_triangle(const Mat& m);

}  // namespace stagin::analysis
