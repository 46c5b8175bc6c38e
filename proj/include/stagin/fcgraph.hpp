#pragma once

// Sliding-window dynamic functional-connectivity graphs: per-ROI
// standardisation, windowed Pearson correlation, percentile edge
// thresholding, plus the CSV/DFCG file formats.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "stagin/common.hpp"

namespace stagin::fc {

struct AllDegenerate : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct WindowTooLong : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct WindowTooShort : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RoiTimeseries {
  Mat values;  // N x Tmax, rows are ROIs
  std::vector<std::string> roi_labels;
  std::vector<std::string> icn_labels;
  double repetition_time_s = 0.72;
  std::vector<uint8_t> degenerate;      // per-ROI zero-variance flag set by standardize()
  std::vector<std::string> warnings;

  int n_rois() const { return values.rows; }
  int n_timepoints() const { return values.cols; }
  void validate() const;
};

struct WindowConfig {
  int gamma = 50;
  int stride = 3;
  double edge_percentile = 30.0;
};

struct FcMatrix {
  Mat r;  // N x N correlation coefficients
  int window_start = 0;
  int window_end = 0;
  std::vector<int> degenerate_rois;  // zero variance inside the window
};

struct DynamicGraph {
  int n_nodes = 0;
  std::vector<std::vector<uint8_t>> adjacency;  // T matrices, each N*N row-major {0,1}
  std::vector<int> window_ends;                 // exclusive end column of each window
  std::string source;                           // id of the series it was built from
  bool degenerate_threshold = false;            // some window had an all-equal pool

  int n_windows() const { return static_cast<int>(adjacency.size()); }
  uint8_t at(int t, int i, int j) const {
    return adjacency[static_cast<size_t>(t)][static_cast<size_t>(i) * n_nodes + j];
  }
};

// Per-ROI mean 0, sample std 1 across time; constant rows become zero and are
// flagged. Throws AllDegenerate when no ROI carries signal.
RoiTimeseries standardize(const RoiTimeseries& ts);

// Half-open [start, end) column windows, window t covering [t*S, t*S + gamma).
// T = floor((Tmax - gamma) / S); T == 0 is rejected.
std::vector<std::pair<int, int>> sliding_windows(const RoiTimeseries& ts, const WindowConfig& cfg);

// Pearson correlation of all ROI pairs over columns [start, end).
FcMatrix correlation_matrix(const RoiTimeseries& ts, int start, int end);

// Binary adjacency keeping the top edge_percentile% upper-triangle values
// (ties at the cutoff included), symmetric, zero diagonal.
struct ThresholdResult {
  std::vector<uint8_t> adjacency;  // N*N
  bool degenerate = false;         // all off-diagonal values equal
};
ThresholdResult threshold_adjacency(const FcMatrix& fc, double edge_percentile);

DynamicGraph build_dynamic_graph(const RoiTimeseries& ts, const WindowConfig& cfg);

// Contiguous column slice [start, start+len).
RoiTimeseries slice_columns(const RoiTimeseries& ts, int start, int len);

// ---- file formats ----------------------------------------------------------

// CSV layout: row 1 ROI labels, row 2 ICN labels, then Tmax rows of N values.
// The sidecar JSON ("<stem>.json") holds {"tr_s": ...}.
RoiTimeseries load_timeseries_csv(const std::string& csv_path);
void save_timeseries_csv(const RoiTimeseries& ts, const std::string& csv_path);

// DFCG container: magic "DFCG", u32 version, u32 N, u32 T, u32 window_end per
// window, then T bit-packed upper triangles (LSB-first within each byte).
void save_dfcg(const DynamicGraph& g, const std::string& path);
DynamicGraph load_dfcg(const std::string& path);

}  // namespace stagin::fc
