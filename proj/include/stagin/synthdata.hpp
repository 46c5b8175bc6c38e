#pragma once

// Planted-signal dataset generator: block-structured FC state templates,
// per-timepoint Gaussian draws under the active state's covariance, with
// either a task block schedule or a rest-style Markov dwell process.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "stagin/common.hpp"
#include "stagin/fcgraph.hpp"

namespace stagin::synth {

struct NotSPD : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TaskBlock {
  int label = 1;  // state index activated during the block (0 is baseline)
  int onset = 0;
  int duration = 0;
};

struct SynthConfig {
  int n_subjects = 40;
  int n_nodes = 32;
  int t_max = 400;
  double tr_s = 0.72;
  int n_states = 2;
  double group_effect = 0.0;     // block-strength delta added for group B
  std::vector<TaskBlock> task_schedule;  // empty => rest-style Markov switching
  double noise_std = 0.5;
  double rho_in = 0.45;          // baseline within-block correlation (all blocks)
  double rho_out = 0.05;         // background correlation
  double state_contrast = 0.1;   // raise of state s's own block over the baseline
  double occupancy_bias = 0.0;   // in [0,1): group-tilted state preference (rest mode)
  int mean_dwell = 20;           // rest-mode expected timepoints per state visit
  uint64_t seed = 7;

  bool rest_mode() const { return task_schedule.empty(); }
  void validate() const;
};

struct GroundTruth {
  int group = 0;                       // class label of the subject
  std::vector<int> state_timeline;     // active state per timepoint
  std::vector<int> responsive_nodes;   // hot block of the group-sensitive state
  std::vector<std::vector<int>> blocks;  // node partition used by the templates
};

// Correlation/covariance templates per state, one set per group. Every block
// sits at rho_in; state s raises its own block by state_contrast, and group B
// additionally raises the responsive block of the sensitive (last) state by
// group_effect (clipped below 0.95). With group_effect > state_contrast the
// block ranking differs between groups, which survives percentile
// binarization of the correlation matrices.
struct TemplateSet {
  std::vector<Mat> group_a;
  std::vector<Mat> group_b;
  std::vector<std::vector<int>> blocks;
  std::vector<int> responsive_nodes;
};

TemplateSet make_templates(const SynthConfig& cfg);

struct Subject {
  fc::RoiTimeseries ts;
  GroundTruth truth;
  std::string id;
};

// Draws one subject's series. Deterministic in (cfg.seed, subject_index).
Subject simulate_subject(const TemplateSet& templates, const SynthConfig& cfg, int subject_index,
                         int group);

struct DatasetManifest {
  SynthConfig cfg;
  std::vector<std::string> csv_paths;   // relative to the manifest directory
  std::vector<GroundTruth> truths;
  std::vector<std::string> ids;
};

// Writes n_subjects CSV series plus manifest.json into out_dir.
DatasetManifest generate_dataset(const SynthConfig& cfg, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& manifest_path);
void save_manifest(const DatasetManifest& m, const std::string& path);

// Cholesky factor of an SPD matrix (lower triangular). Throws NotSPD.
Mat cholesky(const Mat& a);

// Window-level task indicator: 1 when the majority of the window's
// timepoints are in a non-baseline state.
std::vector<int> window_task_indicator(const GroundTruth& truth, const std::vector<int>& window_ends,
                                       int gamma);

}  // namespace stagin::synth
