#include "stagin/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stagin/special.hpp"

namespace stagin::analysis {

std::vector<double> temporal_attention_vector(const Mat& z_time) {
  if (z_time.rows != z_time.cols || z_time.rows < 1)
    throw std::invalid_argument("temporal_attention_vector: matrix must be square");
  int t = z_time.rows;
  for (int i = 0; i < t; ++i) {
    double row = 0.0;
    for (int j = 0; j < t; ++j) row += z_time(i, j);
    if (std::abs(row - 1.0) > 1e-4)
      throw NotStochastic("temporal_attention_vector: row " + std::to_string(i) + " sums to " +
                          std::to_string(row));
  }
  std::vector<double> z(static_cast<size_t>(t), 0.0);
  for (int j = 0; j < t; ++j) {
    double s = 0.0;
    for (int i = 0; i < t; ++i) s += z_time(i, j);
    z[static_cast<size_t>(j)] = s / t;
  }
  return z;
}

AttendedSet attended_timepoints(const std::vector<double>& z_time, double alpha,
                                bool mean_centered) {
  if (z_time.size() < 2) throw std::invalid_argument("attended_timepoints: need T >= 2");
  double mean = std::accumulate(z_time.begin(), z_time.end(), 0.0) /
                static_cast<double>(z_time.size());
  double ss = 0.0;
  for (double v : z_time) ss += (v - mean) * (v - mean);
  double sigma = std::sqrt(ss / static_cast<double>(z_time.size() - 1));
  AttendedSet out;
  if (sigma == 0.0) {
    out.degenerate = true;
    for (size_t t = 0; t < z_time.size(); ++t) out.indices.push_back(static_cast<int>(t));
    return out;
  }
  double threshold = (mean_centered ? mean : 0.0) + alpha * sigma;
  for (size_t t = 0; t < z_time.size(); ++t)
    if (z_time[t] > threshold) out.indices.push_back(static_cast<int>(t));
  return out;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

ClusterResult kmeans(const std::vector<std::vector<double>>& samples, int k, uint64_t seed,
                     int max_iter) {
  if (static_cast<int>(samples.size()) < k)
    throw TooFewSamples("kmeans: " + std::to_string(samples.size()) + " samples for k=" +
                        std::to_string(k));
  size_t n = samples.size();
  size_t dim = samples.front().size();
  Rng rng(seed);
  ClusterResult res;
  res.k = k;

  // k-means++ seeding
  res.centroids.push_back(samples[rng.below(n)]);
  std::vector<double> d2(n, std::numeric_limits<double>::max());
  while (static_cast<int>(res.centroids.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(samples[i], res.centroids.back()));
      total += d2[i];
    }
    size_t pick = 0;
    if (total > 0.0) {
      double r = rng.u01() * total;
      double acc = 0.0;
      for (size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    res.centroids.push_back(samples[pick]);
  }

  res.assignments.assign(n, 0);
  for (int iter = 0; iter < max_iter; ++iter) {
    // assignment step
    bool changed = iter == 0;
    double inertia = 0.0;
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(samples[i], res.centroids[0]);
      for (int c = 1; c < k; ++c) {
        double d = sq_dist(samples[i], res.centroids[static_cast<size_t>(c)]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (res.assignments[i] != best) changed = true;
      res.assignments[i] = best;
      inertia += bd;
    }
    res.inertia_per_iter.push_back(inertia);
    res.inertia = inertia;
    if (!changed && iter > 0) break;

    // update step
    std::vector<std::vector<double>> sums(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      auto& sc = sums[static_cast<size_t>(res.assignments[i])];
      for (size_t j = 0; j < dim; ++j) sc[j] += samples[i][j];
      counts[static_cast<size_t>(res.assignments[i])] += 1;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) {
        // reseed empty cluster at the point farthest from its centroid
        size_t far = 0;
        double fd = -1.0;
        for (size_t i = 0; i < n; ++i) {
          double d = sq_dist(samples[i], res.centroids[static_cast<size_t>(res.assignments[i])]);
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        res.centroids[static_cast<size_t>(c)] = samples[far];
      } else {
        for (size_t j = 0; j < dim; ++j)
          res.centroids[static_cast<size_t>(c)][j] =
              sums[static_cast<size_t>(c)][j] / counts[static_cast<size_t>(c)];
      }
    }
  }
  return res;
}

GroupRatioTable cluster_group_ratio(const std::vector<int>& assignments,
                                    const std::vector<int>& group_labels, int k) {
  if (assignments.empty()) throw EmptyAttendedSet("cluster_group_ratio: no attended matrices");
  if (assignments.size() != group_labels.size())
    throw std::invalid_argument("cluster_group_ratio: assignments and labels differ in length");
  GroupRatioTable out;
  out.counts.assign(static_cast<size_t>(k), std::vector<int>(2, 0));
  for (size_t i = 0; i < assignments.size(); ++i) {
    int g = group_labels[i];
    if (g != 0 && g != 1)
      throw std::invalid_argument("cluster_group_ratio: group labels must be binary");
    out.counts[static_cast<size_t>(assignments[i])][static_cast<size_t>(g)] += 1;
  }
  double tot0 = 0, tot1 = 0;
  for (const auto& row : out.counts) {
    tot0 += row[0];
    tot1 += row[1];
  }
  out.ratios.assign(static_cast<size_t>(k), std::vector<double>(2, 0.0));
  for (int c = 0; c < k; ++c) {
    out.ratios[static_cast<size_t>(c)][0] = tot0 > 0 ? out.counts[static_cast<size_t>(c)][0] / tot0 : 0.0;
    out.ratios[static_cast<size_t>(c)][1] = tot1 > 0 ? out.counts[static_cast<size_t>(c)][1] / tot1 : 0.0;
  }
  out.cluster_order.resize(static_cast<size_t>(k));
  std::iota(out.cluster_order.begin(), out.cluster_order.end(), 0);
  auto ratio_of = [&out](int c) {
    double num = out.ratios[static_cast<size_t>(c)][0];
    double den = out.ratios[static_cast<size_t>(c)][1];
    if (den == 0.0) return num == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return num / den;
  };
  std::stable_sort(out.cluster_order.begin(), out.cluster_order.end(),
                   [&ratio_of](int a, int b) { return ratio_of(a) > ratio_of(b); });
  return out;
}

ChiSquare chi_square_independence(const std::vector<std::vector<int>>& table) {
  int rows = static_cast<int>(table.size());
  if (rows < 2) throw std::invalid_argument("chi_square_independence: need at least 2 rows");
  int cols = static_cast<int>(table.front().size());
  std::vector<double> row_sum(static_cast<size_t>(rows), 0.0);
  std::vector<double> col_sum(static_cast<size_t>(cols), 0.0);
  double total = 0.0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      row_sum[static_cast<size_t>(i)] += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
      col_sum[static_cast<size_t>(j)] += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
      total += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  ChiSquare out;
  out.dof = (rows - 1) * (cols - 1);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double expected = row_sum[static_cast<size_t>(i)] * col_sum[static_cast<size_t>(j)] / total;
      if (expected <= 0.0)
        throw ZeroExpected("chi_square_independence: zero expected count at (" +
                           std::to_string(i) + "," + std::to_string(j) + ")");
      double d = table[static_cast<size_t>(i)][static_cast<size_t>(j)] - expected;
      out.statistic += d * d / expected;
    }
  out.p = special::chi2_sf(out.statistic, out.dof);
  return out;
}

GlmFit glm_fit(const Mat& attn_seq, const Mat& design) {
  if (design.cols != 2 || design.rows != attn_seq.rows)
    throw std::invalid_argument("glm_fit: design must be T x 2 matching the sequence");
  int t = design.rows, n = attn_seq.cols;
  // thin QR via Gram-Schmidt on the two design columns
  std::vector<double> q1(static_cast<size_t>(t)), q2(static_cast<size_t>(t));
  double n1 = 0.0;
  for (int i = 0; i < t; ++i) n1 += design(i, 0) * design(i, 0);
  n1 = std::sqrt(n1);
  if (n1 <= 0.0) throw RankDeficientDesign("glm_fit: first design column is zero");
  for (int i = 0; i < t; ++i) q1[static_cast<size_t>(i)] = design(i, 0) / n1;
  double proj = 0.0, m2norm = 0.0;
  for (int i = 0; i < t; ++i) {
    proj += q1[static_cast<size_t>(i)] * design(i, 1);
    m2norm += design(i, 1) * design(i, 1);
  }
  m2norm = std::sqrt(m2norm);
  double n2 = 0.0;
  for (int i = 0; i < t; ++i) {
    q2[static_cast<size_t>(i)] = design(i, 1) - proj * q1[static_cast<size_t>(i)];
    n2 += q2[static_cast<size_t>(i)] * q2[static_cast<size_t>(i)];
  }
  n2 = std::sqrt(n2);
  if (m2norm <= 0.0 || n2 <= 1e-10 * m2norm)
    throw RankDeficientDesign("glm_fit: design columns are linearly dependent");
  for (int i = 0; i < t; ++i) q2[static_cast<size_t>(i)] /= n2;
  // R = [[n1, proj], [0, n2]]; beta = R^{-1} Q^T z per column
  GlmFit out;
  out.beta = Mat(2, n);
  out.residuals = Mat(t, n);
  for (int col = 0; col < n; ++col) {
    double c1 = 0.0, c2 = 0.0;
    for (int i = 0; i < t; ++i) {
      c1 += q1[static_cast<size_t>(i)] * attn_seq(i, col);
      c2 += q2[static_cast<size_t>(i)] * attn_seq(i, col);
    }
    double b2 = c2 / n2;
    double b1 = (c1 - proj * b2) / n1;
    out.beta(0, col) = b1;
    out.beta(1, col) = b2;
    for (int i = 0; i < t; ++i)
      out.residuals(i, col) = attn_seq(i, col) - design(i, 0) * b1 - design(i, 1) * b2;
  }
  return out;
}

GlmResult contrast_test(const std::vector<Mat>& subject_betas, int n_rois, double alpha) {
  int s = static_cast<int>(subject_betas.size());
  if (s < 2) throw TooFewSubjects("contrast_test: need at least 2 subjects");
  GlmResult out;
  out.alpha = alpha;
  out.contrast_mean.resize(static_cast<size_t>(n_rois));
  out.t_values.resize(static_cast<size_t>(n_rois));
  out.p_raw.resize(static_cast<size_t>(n_rois));
  out.p_fwe.resize(static_cast<size_t>(n_rois));
  for (int roi = 0; roi < n_rois; ++roi) {
    // contrast c = [1, -1]: task beta minus rest beta per subject
    std::vector<double> d(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i)
      d[static_cast<size_t>(i)] =
          subject_betas[static_cast<size_t>(i)](0, roi) - subject_betas[static_cast<size_t>(i)](1, roi);
    double mean = std::accumulate(d.begin(), d.end(), 0.0) / s;
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / (s - 1));
    double t;
    double p;
    if (sd == 0.0) {
      if (mean == 0.0) {
        t = 0.0;
        p = 1.0;  // no effect, no spread
      } else {
        t = mean > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
        p = mean > 0 ? 0.0 : 1.0;
      }
    } else {
      t = mean / (sd / std::sqrt(static_cast<double>(s)));
      p = special::student_t_sf(t, static_cast<double>(s - 1));
    }
    out.contrast_mean[static_cast<size_t>(roi)] = mean;
    out.t_values[static_cast<size_t>(roi)] = t;
    out.p_raw[static_cast<size_t>(roi)] = p;
    out.p_fwe[static_cast<size_t>(roi)] = std::min(1.0, static_cast<double>(n_rois) * p);
    if (out.p_fwe[static_cast<size_t>(roi)] < alpha) out.significant.insert(roi);
  }
  return out;
}

IcnProportion icn_proportion(const std::set<int>& significant,
                             const std::vector<std::string>& icn_labels) {
  static const char* kIcnNames[7] = {"VN", "SMN", "DAN", "SVN", "LIM", "CCN", "DMN"};
  IcnProportion out;
  for (const char* n : kIcnNames) out.names.emplace_back(n);
  out.names.emplace_back("unknown");
  out.proportions.assign(8, 0.0);
  if (significant.empty()) {
    out.empty_set = true;
    return out;
  }
  for (int roi : significant) {
    if (roi < 0 || roi >= static_cast<int>(icn_labels.size()))
      throw std::invalid_argument("icn_proportion: significant ROI outside label range");
    const std::string& lbl = icn_labels[static_cast<size_t>(roi)];
    int bin = 7;
    for (int i = 0; i < 7; ++i)
      if (lbl == kIcnNames[i]) {
        bin = i;
        break;
      }
    out.proportions[static_cast<size_t>(bin)] += 1.0;
  }
  for (auto& p : out.proportions) p /= static_cast<double>(significant.size());
  return out;
}

Mat mean_spatial_attention(const std::vector<Mat>& z_space_per_layer) {
  int k = static_cast<int>(z_space_per_layer.size());
  if (k == 0) return Mat();
  int n = z_space_per_layer.front().cols;
  Mat out(k, n, 0.0);
  for (int layer = 0; layer < k; ++layer) {
    const Mat& z = z_space_per_layer[static_cast<size_t>(layer)];
    for (int t = 0; t < z.rows; ++t)
      for (int v = 0; v < n; ++v) out(layer, v) += z(t, v);
    for (int v = 0; v < n; ++v) out(layer, v) /= z.rows;
  }
  return out;
}

std::vector<int> top_percentile_rois(const std::vector<double>& attention, double percentile) {
  int n = static_cast<int>(attention.size());
  int count = std::max(1, static_cast<int>(std::floor(n * percentile / 100.0)));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&attention](int a, int b) {
    return attention[static_cast<size_t>(a)] > attention[static_cast<size_t>(b)];
  });
  order.resize(static_cast<size_t>(count));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<double> upper_triangle(const std::vector<uint8_t>& adjacency, int n) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      v.push_back(static_cast<double>(adjacency[static_cast<size_t>(i) * n + j]));
  return v;
}

std::vector<double> upper_triangle(const Mat& m) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(m.rows) * (m.rows - 1) / 2);
  for (int i = 0; i < m.rows; ++i)
    for (int j = i + 1; j < m.rows; ++j) v.push_back(m(i, j));
  return v;
}

}  // namespace stagin::analysis
