#include "stagin/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace stagin::model {

using ad::Tensor;

std::string readout_name(Readout r) {
  switch (r) {
    case Readout::Garo: return "garo";
    case Readout::Sero: return "sero";
    case Readout::Mean: return "mean";
  }
  return "sero";
}

Readout readout_from_name(const std::string& name) {
  if (name == "garo") return Readout::Garo;
  if (name == "sero") return Readout::Sero;
  if (name == "mean") return Readout::Mean;
  throw std::invalid_argument("unknown readout '" + name + "' (garo|sero|mean)");
}

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (n_layers <= 0) bad.push_back("n_layers must be positive");
  if (hidden_dim <= 0) bad.push_back("hidden_dim must be positive");
  if (n_nodes < 2) bad.push_back("n_nodes must be at least 2");
  if (n_classes < 2) bad.push_back("n_classes must be at least 2");
  if (lambda_ortho < 0) bad.push_back("lambda_ortho must be nonnegative");
  if (dropout_rep < 0 || dropout_rep >= 1) bad.push_back("dropout_rep must be in [0,1)");
  if (dropout_attn < 0 || dropout_attn >= 1) bad.push_back("dropout_attn must be in [0,1)");
  if (!bad.empty()) {
    std::string msg = "ModelConfig:";
    for (const auto& m : bad) msg += " " + m + ";";
    throw std::invalid_argument(msg);
  }
}

// ---- state -------------------------------------------------------------------

namespace {

struct Builder {
  ModelState& st;
  Rng rng;

  void matrix(const std::string& name, int rows, int cols) {
    // fan-based uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = cols
    double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    auto data = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * cols);
    for (auto& v : *data) v = (2.0 * rng.u01() - 1.0) * bound;
    st.params.push_back({name, {rows, cols}, std::move(data)});
  }
  void vector_fill(const std::string& name, int n, double fill) {
    auto data = std::make_shared<std::vector<double>>(static_cast<size_t>(n), fill);
    st.params.push_back({name, {n}, std::move(data)});
  }
  void scalar_fill(const std::string& name, double fill) {
    auto data = std::make_shared<std::vector<double>>(1, fill);
    st.params.push_back({name, {1}, std::move(data)});
  }
  void batchnorm(const std::string& prefix, int channels) {
    vector_fill(prefix + ".gamma", channels, 1.0);
    vector_fill(prefix + ".beta", channels, 0.0);
    st.bn.emplace(prefix, ad::BnState(channels));
  }
};

}  // namespace

ModelState::ModelState(const ModelState& other) : cfg(other.cfg), params(other.params), bn(other.bn) {
  for (auto& p : params) p.data = std::make_shared<std::vector<double>>(*p.data);
}

ModelState& ModelState::operator=(const ModelState& other) {
  if (this == &other) return *this;
  cfg = other.cfg;
  params = other.params;
  bn = other.bn;
  for (auto& p : params) p.data = std::make_shared<std::vector<double>>(*p.data);
  return *this;
}

ModelState ModelState::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelState st;
  st.cfg = cfg;
  Builder b{st, Rng(seed)};
  int d = cfg.hidden_dim, n = cfg.n_nodes;

  b.matrix("node.w", d, n + d);
  for (const char* gate : {"r", "z", "n"}) {
    b.matrix(std::string("gru.w_i") + gate, d, n);
    b.matrix(std::string("gru.w_h") + gate, d, d);
    b.vector_fill(std::string("gru.b_i") + gate, d, 0.0);
    b.vector_fill(std::string("gru.b_h") + gate, d, 0.0);
  }
  for (int k = 0; k < cfg.n_layers; ++k) {
    std::string p = "gin" + std::to_string(k);
    b.scalar_fill(p + ".eps", 0.0);  // learnable, initialised to zero
    b.matrix(p + ".w1", d, d);
    b.vector_fill(p + ".b1", d, 0.0);
    b.batchnorm(p + ".bn1", d);
    b.matrix(p + ".w2", d, d);
    b.vector_fill(p + ".b2", d, 0.0);
    b.batchnorm(p + ".bn2", d);

    std::string rk = std::to_string(k);
    if (cfg.readout == Readout::Garo) {
      b.matrix("garo" + rk + ".w_key", d, d);
      b.matrix("garo" + rk + ".w_query", d, d);
    } else if (cfg.readout == Readout::Sero) {
      b.matrix("sero" + rk + ".w1", d, d);
      b.batchnorm("sero" + rk + ".bn", d);
      b.matrix("sero" + rk + ".w2", n, d);
    }

    std::string tr = "tr" + std::to_string(k);
    b.matrix(tr + ".wq", d, d);
    b.matrix(tr + ".wk", d, d);
    b.matrix(tr + ".wv", d, d);
    b.matrix(tr + ".wo", d, d);
    b.matrix(tr + ".ff_w1", d, d);
    b.vector_fill(tr + ".ff_b1", d, 0.0);
    b.matrix(tr + ".ff_w2", d, d);
    b.vector_fill(tr + ".ff_b2", d, 0.0);
    b.vector_fill(tr + ".ln1.gain", d, 1.0);
    b.vector_fill(tr + ".ln1.bias", d, 0.0);
    b.vector_fill(tr + ".ln2.gain", d, 1.0);
    b.vector_fill(tr + ".ln2.bias", d, 0.0);
  }
  b.matrix("head.w", cfg.n_classes, cfg.n_layers * d);
  b.vector_fill("head.b", cfg.n_classes, 0.0);
  return st;
}

Param& ModelState::find(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw std::invalid_argument("ModelState: no parameter named " + name);
}

const Param& ModelState::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return p;
  throw std::invalid_argument("ModelState: no parameter named " + name);
}

int64_t ModelState::n_parameters() const {
  int64_t n = 0;
  for (const auto& p : params) n += ad::numel(p.shape);
  return n;
}

BoundModel::BoundModel(ModelState& state, ad::Tape& tape) : state_(&state) {
  bound_.reserve(state.params.size());
  for (size_t i = 0; i < state.params.size(); ++i) {
    const auto& p = state.params[i];
    bound_.push_back(tape.leaf(p.shape, *p.data));
    index_.emplace(p.name, i);
  }
}

const Tensor& BoundModel::t(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("BoundModel: no parameter named " + name);
  return bound_[it->second];
}

Mat AttentionRecord::z_time_layer(int k) const {
  Mat m(n_windows, n_windows);
  for (int i = 0; i < n_windows; ++i)
    for (int j = 0; j < n_windows; ++j) m(i, j) = zt(k, i, j);
  return m;
}

Mat AttentionRecord::z_space_layer(int k) const {
  Mat m(n_windows, n_nodes);
  for (int t = 0; t < n_windows; ++t)
    for (int v = 0; v < n_nodes; ++v) m(t, v) = zs(k, t, v);
  return m;
}

// ---- building blocks ---------------------------------------------------------

std::vector<Tensor> encode_timestamps(const fc::RoiTimeseries& ts,
                                      const std::vector<int>& window_ends, BoundModel& bm) {
  int n = ts.values.rows;
  int d = bm.state().cfg.hidden_dim;
  for (int e : window_ends)
    if (e < 1 || e > ts.values.cols)
      throw IndexOutOfRange("encode_timestamps: window end " + std::to_string(e) +
                            " outside series of length " + std::to_string(ts.values.cols));
  const Tensor& w_ir = bm.t("gru.w_ir");
  const Tensor& w_iz = bm.t("gru.w_iz");
  const Tensor& w_in = bm.t("gru.w_in");
  const Tensor& w_hr = bm.t("gru.w_hr");
  const Tensor& w_hz = bm.t("gru.w_hz");
  const Tensor& w_hn = bm.t("gru.w_hn");
  const Tensor& b_ir = bm.t("gru.b_ir");
  const Tensor& b_iz = bm.t("gru.b_iz");
  const Tensor& b_in = bm.t("gru.b_in");
  const Tensor& b_hr = bm.t("gru.b_hr");
  const Tensor& b_hz = bm.t("gru.b_hz");
  const Tensor& b_hn = bm.t("gru.b_hn");

  Tensor h = Tensor::zeros({d});
  Tensor ones = Tensor::full({d}, 1.0);
  std::vector<Tensor> etas(window_ends.size());
  int last = *std::max_element(window_ends.begin(), window_ends.end());
  for (int c = 0; c < last; ++c) {
    std::vector<double> col(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) col[static_cast<size_t>(i)] = ts.values(i, c);
    Tensor x = Tensor::constant({n}, std::move(col));
    Tensor r = ad::sigmoid(ad::add(ad::add(ad::matmul(w_ir, x), b_ir),
                                   ad::add(ad::matmul(w_hr, h), b_hr)));
    Tensor z = ad::sigmoid(ad::add(ad::add(ad::matmul(w_iz, x), b_iz),
                                   ad::add(ad::matmul(w_hz, h), b_hz)));
    Tensor cand = ad::tanh_t(ad::add(ad::add(ad::matmul(w_in, x), b_in),
                                     ad::hadamard(r, ad::add(ad::matmul(w_hn, h), b_hn))));
    h = ad::add(ad::hadamard(ad::sub(ones, z), cand), ad::hadamard(z, h));
    for (size_t i = 0; i < window_ends.size(); ++i)
      if (window_ends[i] == c + 1) etas[i] = h;
  }
  return etas;
}

Tensor node_features(const Tensor& eta, BoundModel& bm) {
  int n = bm.state().cfg.n_nodes;
  int d = bm.state().cfg.hidden_dim;
  const Tensor& w = bm.t("node.w");
  Tensor w_left = ad::slice_cols(w, 0, n);
  Tensor w_right = ad::slice_cols(w, n, n + d);
  Tensor shift = ad::matmul(w_right, eta);  // {D}
  return ad::add_col_broadcast(w_left, shift);
}

Tensor gin_propagate(const Tensor& h, const std::vector<uint8_t>& adjacency, int n_nodes,
                     const Tensor& eps) {
  if (h.rank() != 2 || h.dim(1) != n_nodes)
    throw ad::ShapeMismatch("gin_propagate: features " + ad::shape_str(h.shape) +
                            " do not match node count " + std::to_string(n_nodes));
  std::vector<double> a(adjacency.begin(), adjacency.end());
  Tensor adj = Tensor::constant({n_nodes, n_nodes}, std::move(a));
  // H ((1+eps) I + A): neighbour sum plus (1+eps)-weighted self term
  Tensor neighbour = ad::matmul(h, adj);
  Tensor self_scale = ad::add_const(eps, 1.0);
  return ad::add(neighbour, ad::mul_scalar(h, self_scale));
}

Tensor gin_mlp(const Tensor& x, int layer, BoundModel& bm, bool train) {
  std::string p = "gin" + std::to_string(layer);
  if (bm.state().cfg.linear_gin) return ad::matmul(bm.t(p + ".w1"), x);
  Tensor a1 = ad::add_col_broadcast(ad::matmul(bm.t(p + ".w1"), x), bm.t(p + ".b1"));
  Tensor n1 = ad::batchnorm_cols(a1, bm.t(p + ".bn1.gamma"), bm.t(p + ".bn1.beta"),
                                 bm.bn(p + ".bn1"), train);
  Tensor g1 = ad::gelu(n1);
  Tensor a2 = ad::add_col_broadcast(ad::matmul(bm.t(p + ".w2"), g1), bm.t(p + ".b2"));
  Tensor n2 = ad::batchnorm_cols(a2, bm.t(p + ".bn2.gamma"), bm.t(p + ".bn2.beta"),
                                 bm.bn(p + ".bn2"), train);
  return ad::gelu(n2);
}

Tensor gin_layer(const Tensor& h, const std::vector<uint8_t>& adjacency, int layer, BoundModel& bm,
                 bool train) {
  Tensor agg = gin_propagate(h, adjacency, h.dim(1), bm.t("gin" + std::to_string(layer) + ".eps"));
  return gin_mlp(agg, layer, bm, train);
}

Tensor readout_mean(const Tensor& h) { return ad::reduce_mean(h, 1); }
Tensor readout_sum(const Tensor& h) { return ad::reduce_sum(h, 1); }

ReadoutOut garo(const Tensor& h, int layer, BoundModel& bm) {
  std::string p = "garo" + std::to_string(layer);
  int d = h.dim(0);
  Tensor key = ad::matmul(bm.t(p + ".w_key"), h);                      // {D,N}
  Tensor query = ad::matmul(bm.t(p + ".w_query"), readout_mean(h));    // {D}
  Tensor logits = ad::scale(ad::matmul(query, key), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor z = ad::sigmoid(logits);
  return {z, ad::matmul(h, z)};
}

std::vector<ReadoutOut> sero_sequence(const std::vector<Tensor>& hs, int layer, BoundModel& bm,
                                      bool train) {
  std::string p = "sero" + std::to_string(layer);
  int t_count = static_cast<int>(hs.size());
  std::vector<Tensor> means;
  means.reserve(hs.size());
  for (const auto& h : hs) means.push_back(readout_mean(h));
  Tensor squeezed = ad::transpose(ad::stack_rows(means));  // {D,T}
  Tensor a1 = ad::matmul(bm.t(p + ".w1"), squeezed);
  Tensor n1 = ad::batchnorm_cols(a1, bm.t(p + ".bn.gamma"), bm.t(p + ".bn.beta"), bm.bn(p + ".bn"),
                                 train);
  Tensor g1 = ad::gelu(n1);
  Tensor z_all = ad::sigmoid(ad::matmul(bm.t(p + ".w2"), g1));  // {N,T}
  std::vector<ReadoutOut> outs;
  outs.reserve(hs.size());
  int n = z_all.dim(0);
  for (int t = 0; t < t_count; ++t) {
    Tensor z = ad::reshape(ad::slice_cols(z_all, t, t + 1), {n});
    outs.push_back({z, ad::matmul(hs[static_cast<size_t>(t)], z)});
  }
  return outs;
}

ReadoutOut sero(const Tensor& h, int layer, BoundModel& bm, bool train) {
  return sero_sequence({h}, layer, bm, train).front();
}

Tensor ortho_loss(const Tensor& h) {
  if (h.rank() != 2) throw ad::ShapeMismatch("ortho_loss: expected a matrix, got " +
                                             ad::shape_str(h.shape));
  Tensor gram = ad::matmul(ad::transpose(h), h);  // {N,N}
  Tensor m = ad::elementwise_max_reduce(gram);
  if (m.item() <= 1e-12)
    throw DegenerateInput("ortho_loss: max of HᵀH is " + std::to_string(m.item()));
  int n = gram.dim(0);
  std::vector<double> eye(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eye[static_cast<size_t>(i) * n + i] = 1.0;
  Tensor identity = Tensor::constant({n, n}, std::move(eye));
  return ad::frobenius_norm(ad::sub(ad::div_scalar(gram, m), identity));
}

TransformerOut transformer_encoder(const Tensor& seq, int layer, BoundModel& bm, bool train,
                                   Rng* rng, double dropout_attn) {
  std::string p = "tr" + std::to_string(layer);
  int d = seq.dim(1);
  Tensor q = ad::matmul(seq, bm.t(p + ".wq"));  // {T,D}, row convention
  Tensor k = ad::matmul(seq, bm.t(p + ".wk"));
  Tensor v = ad::matmul(seq, bm.t(p + ".wv"));
  Tensor scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor z = ad::softmax_last_dim(scores);
  TransformerOut out;
  out.z_time = *z.values;  // captured before attention dropout
  Tensor z_used = z;
  if (train && dropout_attn > 0.0) {
    if (!rng) throw std::invalid_argument("transformer_encoder: train mode requires an RNG");
    z_used = ad::dropout(z, dropout_attn, true, *rng);
  }
  Tensor attended = ad::matmul(ad::matmul(z_used, v), bm.t(p + ".wo"));
  Tensor ln1 = ad::layernorm(ad::add(seq, attended), bm.t(p + ".ln1.gain"), bm.t(p + ".ln1.bias"));
  Tensor ff = ad::add_row_broadcast(
      ad::matmul(ad::gelu(ad::add_row_broadcast(ad::matmul(ln1, bm.t(p + ".ff_w1")),
                                                bm.t(p + ".ff_b1"))),
                 bm.t(p + ".ff_w2")),
      bm.t(p + ".ff_b2"));
  out.out = ad::layernorm(ad::add(ln1, ff), bm.t(p + ".ln2.gain"), bm.t(p + ".ln2.bias"));
  return out;
}

Tensor assemble_representation(const std::vector<Tensor>& layer_outputs, bool train, Rng* rng,
                               double dropout_rep) {
  std::vector<Tensor> sums;
  sums.reserve(layer_outputs.size());
  for (const auto& out : layer_outputs) sums.push_back(ad::reduce_sum(out, 0));
  Tensor rep = ad::concat_last_dim(sums);
  if (train && dropout_rep > 0.0) {
    if (!rng) throw std::invalid_argument("assemble_representation: train mode requires an RNG");
    rep = ad::dropout(rep, dropout_rep, true, *rng);
  }
  return rep;
}

ForwardResult forward(const fc::DynamicGraph& g, const fc::RoiTimeseries& ts, ModelState& state,
                      Mode mode, ad::Tape& tape, Rng* rng) {
  const ModelConfig& cfg = state.cfg;
  if (g.n_nodes != cfg.n_nodes)
    throw ad::ShapeMismatch("forward: graph has " + std::to_string(g.n_nodes) +
                            " nodes, model expects " + std::to_string(cfg.n_nodes));
  bool train = mode == Mode::Train;
  if (train && !rng) throw std::invalid_argument("forward: train mode requires an RNG");
  int t_count = g.n_windows();
  int n = cfg.n_nodes, d = cfg.hidden_dim, k_layers = cfg.n_layers;

  BoundModel bm(state, tape);
  ForwardResult res;
  res.attn.n_layers = k_layers;
  res.attn.n_windows = t_count;
  res.attn.n_nodes = n;
  res.attn.hidden_dim = d;
  res.attn.z_space.reserve(static_cast<size_t>(k_layers) * t_count * n);
  res.attn.z_time_mat.reserve(static_cast<size_t>(k_layers) * t_count * t_count);

  // timestamp encoding -> per-window node features
  std::vector<Tensor> etas;
  if (cfg.timestamp_encoding) {
    etas = encode_timestamps(ts, g.window_ends, bm);
  } else {
    etas.assign(static_cast<size_t>(t_count), Tensor::zeros({d}));
  }
  std::vector<Tensor> features(static_cast<size_t>(t_count));
  for (int t = 0; t < t_count; ++t) features[static_cast<size_t>(t)] = node_features(etas[static_cast<size_t>(t)], bm);

  std::vector<Tensor> ortho_terms;
  ortho_terms.reserve(static_cast<size_t>(k_layers) * t_count);
  std::vector<Tensor> layer_outputs;
  layer_outputs.reserve(static_cast<size_t>(k_layers));

  for (int k = 0; k < k_layers; ++k) {
    const Tensor& eps = bm.t("gin" + std::to_string(k) + ".eps");
    std::vector<Tensor> agg(static_cast<size_t>(t_count));
    for (int t = 0; t < t_count; ++t)
      agg[static_cast<size_t>(t)] =
          gin_propagate(features[static_cast<size_t>(t)], g.adjacency[static_cast<size_t>(t)], n, eps);
    // layer MLP over all windows at once: batchnorm sees nodes x windows
    Tensor stacked = t_count == 1 ? agg[0] : ad::concat_cols(agg);
    Tensor mixed = gin_mlp(stacked, k, bm, train);
    for (int t = 0; t < t_count; ++t)
      features[static_cast<size_t>(t)] = ad::slice_cols(mixed, t * n, (t + 1) * n);

    // spatial readout per window
    std::vector<Tensor> pooled(static_cast<size_t>(t_count));
    std::vector<Tensor> z_pre(static_cast<size_t>(t_count));
    if (cfg.readout == Readout::Mean) {
      for (int t = 0; t < t_count; ++t) pooled[static_cast<size_t>(t)] = readout_mean(features[static_cast<size_t>(t)]);
    } else if (cfg.readout == Readout::Garo) {
      for (int t = 0; t < t_count; ++t) {
        ReadoutOut ro = garo(features[static_cast<size_t>(t)], k, bm);
        z_pre[static_cast<size_t>(t)] = ro.z;
        Tensor z_used = train && cfg.dropout_attn > 0.0 ? ad::dropout(ro.z, cfg.dropout_attn, true, *rng)
                                                        : ro.z;
        pooled[static_cast<size_t>(t)] = ad::matmul(features[static_cast<size_t>(t)], z_used);
      }
    } else {
      auto ros = sero_sequence(features, k, bm, train);
      for (int t = 0; t < t_count; ++t) {
        z_pre[static_cast<size_t>(t)] = ros[static_cast<size_t>(t)].z;
        Tensor z_used = train && cfg.dropout_attn > 0.0
                            ? ad::dropout(ros[static_cast<size_t>(t)].z, cfg.dropout_attn, true, *rng)
                            : ros[static_cast<size_t>(t)].z;
        pooled[static_cast<size_t>(t)] = ad::matmul(features[static_cast<size_t>(t)], z_used);
      }
    }
    // attention record: z_space entries (uniform 1/N for the mean readout)
    for (int t = 0; t < t_count; ++t) {
      if (cfg.readout == Readout::Mean) {
        res.attn.z_space.insert(res.attn.z_space.end(), static_cast<size_t>(n), 1.0 / n);
      } else {
        const auto& zv = *z_pre[static_cast<size_t>(t)].values;
        res.attn.z_space.insert(res.attn.z_space.end(), zv.begin(), zv.end());
      }
      ortho_terms.push_back(ortho_loss(features[static_cast<size_t>(t)]));
    }

    Tensor seq = ad::stack_rows(pooled);  // {T,D}
    TransformerOut tr = transformer_encoder(seq, k, bm, train, rng, cfg.dropout_attn);
    res.attn.z_time_mat.insert(res.attn.z_time_mat.end(), tr.z_time.begin(), tr.z_time.end());
    layer_outputs.push_back(tr.out);
  }

  Tensor rep = assemble_representation(layer_outputs, train, rng, cfg.dropout_rep);
  res.attn.h_dyn = *rep.values;
  res.logits = ad::add(ad::matmul(bm.t("head.w"), rep), bm.t("head.b"));
  res.loss_ortho = ad::reduce_mean_all(ad::concat_last_dim(ortho_terms));
  res.bound = bm.bound();
  return res;
}

// ---- binary containers ---------------------------------------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;
constexpr uint32_t kAttnVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("container: truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32_blob(std::ostream& out, const std::vector<double>& v) {
  for (double x : v) {
    float f = static_cast<float>(x);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

void read_f32_blob(std::istream& in, std::vector<double>& v, size_t n) {
  v.resize(n);
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits = get_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    v[i] = static_cast<double>(f);
  }
}

void write_f64_blob(std::ostream& out, const std::vector<double>& v) {
  for (double x : v) {
    uint64_t bits;
    std::memcpy(&bits, &x, 8);
    put_u32(out, static_cast<uint32_t>(bits & 0xffffffffu));
    put_u32(out, static_cast<uint32_t>(bits >> 32));
  }
}

void read_f64_blob(std::istream& in, std::vector<double>& v, size_t n) {
  v.resize(n);
  for (size_t i = 0; i < n; ++i) {
    uint64_t lo = get_u32(in);
    uint64_t hi = get_u32(in);
    uint64_t bits = lo | (hi << 32);
    double x;
    std::memcpy(&x, &bits, 8);
    v[i] = x;
  }
}

nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["n_layers"] = c.n_layers;
  j["hidden_dim"] = c.hidden_dim;
  j["n_nodes"] = c.n_nodes;
  j["n_classes"] = c.n_classes;
  j["readout"] = readout_name(c.readout);
  j["lambda_ortho"] = c.lambda_ortho;
  j["dropout_rep"] = c.dropout_rep;
  j["dropout_attn"] = c.dropout_attn;
  j["timestamp_encoding"] = c.timestamp_encoding;
  j["linear_gin"] = c.linear_gin;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_nodes = j.at("n_nodes").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.readout = readout_from_name(j.at("readout").get<std::string>());
  c.lambda_ortho = j.at("lambda_ortho").get<double>();
  c.dropout_rep = j.at("dropout_rep").get<double>();
  c.dropout_attn = j.at("dropout_attn").get<double>();
  c.timestamp_encoding = j.at("timestamp_encoding").get<bool>();
  c.linear_gin = j.at("linear_gin").get<bool>();
  return c;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : state.params)
    manifest.push_back({{"name", p.name}, {"shape", p.shape}, {"trainable", true}});
  for (const auto& [name, bn] : state.bn) {
    manifest.push_back(
        {{"name", name + ".running_mean"}, {"shape", {bn.channels()}}, {"trainable", false}});
    manifest.push_back(
        {{"name", name + ".running_var"}, {"shape", {bn.channels()}}, {"trainable", false}});
  }
  nlohmann::json header;
  header["config"] = config_to_json(state.cfg);
  header["manifest"] = manifest;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("STGN", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : state.params) write_f32_blob(out, *p.data);
  for (const auto& [name, bn] : state.bn) {
    write_f32_blob(out, bn.running_mean);
    write_f32_blob(out, bn.running_var);
  }
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "STGN", 4) != 0) throw IoError(path + ": not a checkpoint file");
  uint32_t version = get_u32(in);
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  uint32_t hlen = get_u32(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw IoError(path + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);

  ModelState st = ModelState::init(config_from_json(header.at("config")), 0);
  // overwrite every manifest entry in file order
  for (const auto& entry : header.at("manifest")) {
    std::string name = entry.at("name").get<std::string>();
    auto shape = entry.at("shape").get<std::vector<int>>();
    size_t count = static_cast<size_t>(ad::numel(shape));
    std::vector<double> blob;
    read_f32_blob(in, blob, count);
    if (entry.at("trainable").get<bool>()) {
      Param& p = st.find(name);
      if (p.shape != ad::Shape(shape)) throw IoError(path + ": shape mismatch for " + name);
      *p.data = std::move(blob);
    } else {
      bool is_mean = name.ends_with(".running_mean");
      std::string key = name.substr(0, name.size() - (is_mean ? 13 : 12));
      auto it = st.bn.find(key);
      if (it == st.bn.end()) throw IoError(path + ": unknown batchnorm state " + name);
      (is_mean ? it->second.running_mean : it->second.running_var) = std::move(blob);
    }
  }
  return st;
}

void save_attention(const AttentionRecord& rec, const std::string& path) {
  nlohmann::json header;
  header["n_layers"] = rec.n_layers;
  header["n_windows"] = rec.n_windows;
  header["n_nodes"] = rec.n_nodes;
  header["hidden_dim"] = rec.hidden_dim;
  header["subject_id"] = rec.subject_id;
  header["label"] = rec.label;
  header["dtype"] = "f64";
  std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("ATTN", 4);
  put_u32(out, kAttnVersion);
  put_u32(out, static_cast<uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  write_f64_blob(out, rec.z_space);
  write_f64_blob(out, rec.z_time_mat);
  write_f64_blob(out, rec.h_dyn);
}

AttentionRecord load_attention(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "ATTN", 4) != 0) throw IoError(path + ": not an attention file");
  uint32_t version = get_u32(in);
  if (version != kAttnVersion)
    throw IoError(path + ": unsupported attention container version " + std::to_string(version));
  uint32_t hlen = get_u32(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw IoError(path + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);
  AttentionRecord rec;
  rec.n_layers = header.at("n_layers").get<int>();
  rec.n_windows = header.at("n_windows").get<int>();
  rec.n_nodes = header.at("n_nodes").get<int>();
  rec.hidden_dim = header.at("hidden_dim").get<int>();
  rec.subject_id = header.at("subject_id").get<std::string>();
  rec.label = header.at("label").get<int>();
  read_f64_blob(in, rec.z_space, static_cast<size_t>(rec.n_layers) * rec.n_windows * rec.n_nodes);
  read_f64_blob(in, rec.z_time_mat,
                static_cast<size_t>(rec.n_layers) * rec.n_windows * rec.n_windows);
  read_f64_blob(in, rec.h_dyn, static_cast<size_t>(rec.n_layers) * rec.hidden_dim);
  return rec;
}

}  // namespace stagin::model
