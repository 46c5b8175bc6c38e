#pragma once

// Spatio-temporal attention GIN over dynamic FC graphs: GRU timestamp
// encoding into node features, K GIN layers, GARO/SERO/mean readouts,
// per-layer single-head temporal Transformer, representation assembly,
// cross-entropy + orthogonality losses.

#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "stagin/autodiff.hpp"
#include "stagin/common.hpp"
#include "stagin/fcgraph.hpp"

namespace stagin::model {

struct DegenerateInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexOutOfRange : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Readout { Garo, Sero, Mean };
enum class Mode { Train, Eval };

std::string readout_name(Readout r);
Readout readout_from_name(const std::string& name);

struct ModelConfig {
  int n_layers = 4;
  int hidden_dim = 128;
  int n_nodes = 0;
  int n_classes = 2;
  Readout readout = Readout::Sero;
  double lambda_ortho = 1e-5;
  double dropout_rep = 0.5;
  double dropout_attn = 0.1;
  bool timestamp_encoding = true;
  bool linear_gin = false;  // diagnostic: single linear map, no norm/activation

  void validate() const;
};

struct Param {
  std::string name;
  ad::Shape shape;
  std::shared_ptr<std::vector<double>> data;
};

// Parameters plus batchnorm running statistics. Parameter order fixes the
// checkpoint manifest. Copies are deep: each copy owns its parameter data.
struct ModelState {
  ModelConfig cfg;
  std::vector<Param> params;
  std::map<std::string, ad::BnState> bn;

  ModelState() = default;
  ModelState(const ModelState& other);
  ModelState& operator=(const ModelState& other);
  ModelState(ModelState&&) = default;
  ModelState& operator=(ModelState&&) = default;

  static ModelState init(const ModelConfig& cfg, uint64_t seed);

  Param& find(const std::string& name);
  const Param& find(const std::string& name) const;
  int64_t n_parameters() const;
};

// Per-forward view: parameters bound as leaves of one tape.
class BoundModel {
 public:
  BoundModel(ModelState& state, ad::Tape& tape);
  const ad::Tensor& t(const std::string& name) const;
  ad::BnState& bn(const std::string& name) { return state_->bn.at(name); }
  ModelState& state() { return *state_; }
  const std::vector<ad::Tensor>& bound() const { return bound_; }

 private:
  ModelState* state_;
  std::vector<ad::Tensor> bound_;
  std::unordered_map<std::string, size_t> index_;
};

struct AttentionRecord {
  int n_layers = 0, n_windows = 0, n_nodes = 0, hidden_dim = 0;
  std::vector<double> z_space;     // K*T*N, entries in [0,1]
  std::vector<double> z_time_mat;  // K*T*T, rows sum to 1
  std::vector<double> h_dyn;       // K*D
  std::string subject_id;
  int label = -1;

  double zs(int k, int t, int v) const {
    return z_space[(static_cast<size_t>(k) * n_windows + t) * n_nodes + v];
  }
  double zt(int k, int i, int j) const {
    return z_time_mat[(static_cast<size_t>(k) * n_windows + i) * n_windows + j];
  }
  // layer-k attention matrix as a Mat copy
  Mat z_time_layer(int k) const;
  Mat z_space_layer(int k) const;  // T x N
};

struct ForwardResult {
  ad::Tensor logits;      // {C}
  ad::Tensor loss_ortho;  // {1}, mean over layers and windows
  AttentionRecord attn;
  std::vector<ad::Tensor> bound;  // parameter leaves on this tape, in manifest order
};

// ---- building blocks (exposed for tests and analysis) -----------------------

// GRU over the series columns; returns the hidden state at each window end.
std::vector<ad::Tensor> encode_timestamps(const fc::RoiTimeseries& ts,
                                          const std::vector<int>& window_ends, BoundModel& bm);

// H0 column v = W [one_hot(v) || eta]; equals W_left + (W_right eta) 1^T.
ad::Tensor node_features(const ad::Tensor& eta, BoundModel& bm);

// (1+eps) I + A propagation followed by the layer MLP.
ad::Tensor gin_propagate(const ad::Tensor& h, const std::vector<uint8_t>& adjacency, int n_nodes,
                         const ad::Tensor& eps);
ad::Tensor gin_mlp(const ad::Tensor& x, int layer, BoundModel& bm, bool train);
ad::Tensor gin_layer(const ad::Tensor& h, const std::vector<uint8_t>& adjacency, int layer,
                     BoundModel& bm, bool train);

ad::Tensor readout_mean(const ad::Tensor& h);
ad::Tensor readout_sum(const ad::Tensor& h);

struct ReadoutOut {
  ad::Tensor z;  // {N} attention in [0,1]
  ad::Tensor h;  // {D} attended representation
};
ReadoutOut garo(const ad::Tensor& h, int layer, BoundModel& bm);
// Per-window SERO over a whole sequence (batchnorm statistics across windows).
std::vector<ReadoutOut> sero_sequence(const std::vector<ad::Tensor>& hs, int layer, BoundModel& bm,
                                      bool train);
ReadoutOut sero(const ad::Tensor& h, int layer, BoundModel& bm, bool train);

// || HᵀH / max(HᵀH) - I ||_F
ad::Tensor ortho_loss(const ad::Tensor& h);

struct TransformerOut {
  ad::Tensor out;             // {T,D}
  std::vector<double> z_time;  // T*T post-softmax weights (pre-dropout copy)
};
TransformerOut transformer_encoder(const ad::Tensor& seq, int layer, BoundModel& bm, bool train,
                                   Rng* rng, double dropout_attn);

ad::Tensor assemble_representation(const std::vector<ad::Tensor>& layer_outputs, bool train,
                                   Rng* rng, double dropout_rep);

// Full pipeline. rng is required in train mode (dropout draws).
ForwardResult forward(const fc::DynamicGraph& g, const fc::RoiTimeseries& ts, ModelState& state,
                      Mode mode, ad::Tape& tape, Rng* rng = nullptr);

// ---- checkpoint / attention containers --------------------------------------

// "STGN": magic, u32 version, u32 JSON header length, JSON header
// (config + ordered manifest), float32 little-endian blobs in manifest order.
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

// "ATTN": same container family, float64 blobs (dtype recorded in the header).
void save_attention(const AttentionRecord& rec, const std::string& path);
AttentionRecord load_attention(const std::string& path);

}  // namespace stagin::model
