#pragma once

// Supervised training: composite loss, one-cycle learning rate, random
// temporal slicing, stratified k-fold cross validation, accuracy/AUROC.

#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stagin/fcgraph.hpp"
#include "stagin/model.hpp"

namespace stagin::train {

struct OutOfRange : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ClassTooSmall : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SliceTooLong : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SingleClass : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 30;
  int minibatch_size = 3;
  double lr_base = 0.0005;
  double lr_peak = 0.001;
  double lr_final = 5e-7;
  double warmup_frac = 0.2;
  double lambda = 1e-5;
  int slice_len = 600;
  int folds = 5;
  uint64_t seed = 0;

  void validate() const;
};

// Linear ramp lr_base -> lr_peak over the first warmup_frac of steps, then
// cosine decay lr_peak -> lr_final, hitting lr_final at the last step.
double one_cycle_lr(int step, int total_steps, const TrainConfig& cfg);

fc::RoiTimeseries random_time_slice(const fc::RoiTimeseries& ts, int slice_len, Rng& rng);

struct FoldSplit {
  std::vector<std::vector<int>> train_indices;
  std::vector<std::vector<int>> test_indices;
  int n_classes = 0;
};
FoldSplit stratified_kfold(const std::vector<int>& labels, int k, uint64_t seed);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(const model::ModelState& st);
};
// In-place adaptive-moment update with bias correction.
void adam_step(model::ModelState& params, const std::vector<std::vector<double>>& grads, double lr,
               AdamState& state);

// Mann-Whitney rank statistic with tie correction; labels are 0/1.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct Sample {
  fc::RoiTimeseries ts;  // standardized
  int label = 0;
  std::string id;
};

struct EpochRecord {
  int fold = 0;
  int epoch = 0;
  double lr = 0;
  double loss_xent = 0;
  double loss_ortho = 0;
  double loss_total = 0;
  double acc = 0;
  std::optional<double> auroc;  // binary problems only
};
std::string epoch_record_jsonl(const EpochRecord& r);

struct FoldOutcome {
  int fold = 0;
  model::ModelState state;
  double test_acc = 0;
  std::optional<double> test_auroc;
  std::vector<int> test_indices;
};

struct TrainResult {
  std::vector<EpochRecord> records;
  std::vector<FoldOutcome> folds;
  double mean_acc = 0, std_acc = 0;
  double mean_auroc = 0, std_auroc = 0;
};

// 5-fold style training loop. Training slices each series per step and
// rebuilds its dynamic graph; evaluation always uses the unsliced series.
// `progress`, when given, receives one line per epoch.
TrainResult train_model(const std::vector<Sample>& dataset, const fc::WindowConfig& wcfg,
                        const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                        std::ostream* progress = nullptr);

// Evaluation helper shared by train/eval/analysis paths.
struct EvalOutput {
  std::vector<int> predicted;
  std::vector<double> score_class1;
  std::vector<model::AttentionRecord> attention;
  double acc = 0;
};
EvalOutput evaluate(model::ModelState& state, const std::vector<Sample>& dataset,
                    const std::vector<int>& indices, const fc::WindowConfig& wcfg,
                    bool keep_attention = false);

}  // namespace stagin::train
