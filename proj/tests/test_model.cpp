#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "model_harness.hpp"
#include "oracles.hpp"
#include "stagin/model.hpp"

using namespace stagin;
using ad::Tensor;

namespace {

model::ModelState tiny_state(int n, int d, int k, model::Readout ro, uint64_t seed,
                             bool linear = false) {
  model::ModelConfig cfg;
  cfg.n_layers = k;
  cfg.hidden_dim = d;
  cfg.n_nodes = n;
  cfg.n_classes = 2;
  cfg.readout = ro;
  cfg.linear_gin = linear;
  return model::ModelState::init(cfg, seed);
}

void randomize_bn(model::ModelState& st, uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, bn] : st.bn) {
    for (auto& v : bn.running_mean) v = 0.4 * (2.0 * rng.u01() - 1.0);
    for (auto& v : bn.running_var) v = 0.7 + rng.u01();
  }
}

}  // namespace

TEST_CASE("encode_timestamps: hand-unrolled GRU on an all-zero series") {
  int n = 3, d = 2;
  model::ModelState st = tiny_state(n, d, 1, model::Readout::Mean, 1);
  // distinctive biases so the closed form is nontrivial
  *st.find("gru.b_ir").data = {0.3, -0.2};
  *st.find("gru.b_hr").data = {0.1, 0.4};
  *st.find("gru.b_iz").data = {-0.5, 0.2};
  *st.find("gru.b_hz").data = {0.25, -0.1};
  *st.find("gru.b_in").data = {0.7, -0.3};
  *st.find("gru.b_hn").data = {-0.6, 0.5};

  fc::RoiTimeseries zero;
  zero.values = Mat(n, 4, 0.0);
  zero.roi_labels = {"a", "b", "c"};
  zero.icn_labels = {"unknown", "unknown", "unknown"};

  ad::Tape tape;
  model::BoundModel bm(st, tape);
  auto etas = model::encode_timestamps(zero, {1, 1, 2}, bm);
  REQUIRE(etas.size() == 3);

  // single step from h = 0 with x = 0: only the biases act
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (int i = 0; i < d; ++i) {
    double r = sig((*st.find("gru.b_ir").data)[static_cast<size_t>(i)] +
                   (*st.find("gru.b_hr").data)[static_cast<size_t>(i)]);
    double z = sig((*st.find("gru.b_iz").data)[static_cast<size_t>(i)] +
                   (*st.find("gru.b_hz").data)[static_cast<size_t>(i)]);
    double cand = std::tanh((*st.find("gru.b_in").data)[static_cast<size_t>(i)] +
                            r * (*st.find("gru.b_hn").data)[static_cast<size_t>(i)]);
    double h1 = (1.0 - z) * cand;
    CHECK(etas[0].data()[i] == doctest::Approx(h1).epsilon(1e-12));
  }
  // identical window ends share the identical hidden state
  for (int i = 0; i < d; ++i) CHECK(etas[0].data()[i] == etas[1].data()[i]);

  CHECK_THROWS_AS(model::encode_timestamps(zero, {5}, bm), model::IndexOutOfRange);
  CHECK_THROWS_AS(model::encode_timestamps(zero, {0}, bm), model::IndexOutOfRange);
}

TEST_CASE("node_features: zero timestamp, one-hot linearity, per-node oracle") {
  int n = 4, d = 3;
  model::ModelState st = tiny_state(n, d, 1, model::Readout::Mean, 7);
  ad::Tape tape;
  model::BoundModel bm(st, tape);
  const auto& w = *st.find("node.w").data;  // d x (n+d), row-major

  Tensor h0 = model::node_features(Tensor::zeros({d}), bm);
  for (int i = 0; i < d; ++i)
    for (int v = 0; v < n; ++v)
      CHECK(h0.data()[i * n + v] == doctest::Approx(w[static_cast<size_t>(i) * (n + d) + v]).epsilon(1e-12));

  // feature difference between nodes u,v = W_left[:,u] - W_left[:,v] for any eta
  Rng rng(3);
  std::vector<double> eta = oracles::random_vector(static_cast<size_t>(d), rng);
  Tensor h = model::node_features(Tensor::constant({d}, eta), bm);
  for (int i = 0; i < d; ++i) {
    double diff = h.data()[i * n + 1] - h.data()[i * n + 2];
    CHECK(diff == doctest::Approx(w[static_cast<size_t>(i) * (n + d) + 1] -
                                  w[static_cast<size_t>(i) * (n + d) + 2])
                      .epsilon(1e-12));
  }

  // explicit concatenate-then-multiply oracle per node
  for (int v = 0; v < n; ++v) {
    for (int i = 0; i < d; ++i) {
      double expect = w[static_cast<size_t>(i) * (n + d) + v];
      for (int j = 0; j < d; ++j)
        expect += w[static_cast<size_t>(i) * (n + d) + n + j] * eta[static_cast<size_t>(j)];
      CHECK(h.data()[i * n + v] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("gin_layer: isolated nodes, symmetry, node-form oracle") {
  int n = 8, d = 5;
  model::ModelState st = tiny_state(n, d, 1, model::Readout::Mean, 11);
  randomize_bn(st, 5);
  Rng rng(13);

  // A = 0, eps = 0: each column is the MLP of that node's features alone
  {
    Mat h = oracles::random_matrix(d, n, rng);
    std::vector<uint8_t> no_edges(static_cast<size_t>(n) * n, 0);
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    Tensor out = model::gin_layer(Tensor::constant({d, n}, h.d), no_edges, 0, bm, false);
    harness::GinRefParams p = harness::extract_gin(st, 0);
    Mat ref = harness::gin_node_form(h, no_edges, p);
    for (size_t i = 0; i < ref.d.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(ref.d[i]).epsilon(1e-9));
  }

  // complete graph with identical node features: all output columns identical
  {
    std::vector<double> col = oracles::random_vector(static_cast<size_t>(d), rng);
    Mat h(d, n);
    for (int i = 0; i < d; ++i)
      for (int v = 0; v < n; ++v) h(i, v) = col[static_cast<size_t>(i)];
    std::vector<uint8_t> complete(static_cast<size_t>(n) * n, 1);
    for (int i = 0; i < n; ++i) complete[static_cast<size_t>(i) * n + i] = 0;
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    Tensor out = model::gin_layer(Tensor::constant({d, n}, h.d), complete, 0, bm, false);
    for (int i = 0; i < d; ++i)
      for (int v = 1; v < n; ++v)
        CHECK(out.data()[i * n + v] == doctest::Approx(out.data()[i * n]).epsilon(1e-12));
  }

  // random graphs: matrix form vs node-wise sum aggregation
  for (uint64_t trial = 0; trial < 10; ++trial) {
    Rng trng(100 + trial);
    Mat h = oracles::random_matrix(d, n, trng);
    std::vector<uint8_t> adj(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (trng.u01() < 0.4) {
          adj[static_cast<size_t>(i) * n + j] = 1;
          adj[static_cast<size_t>(j) * n + i] = 1;
        }
    *st.find("gin0.eps").data = {0.2 * trng.u01()};
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    Tensor out = model::gin_layer(Tensor::constant({d, n}, h.d), adj, 0, bm, false);
    Mat ref = harness::gin_node_form(h, adj, harness::extract_gin(st, 0));
    double max_diff = 0;
    for (size_t i = 0; i < ref.d.size(); ++i)
      max_diff = std::max(max_diff, std::abs(out.data()[i] - ref.d[i]));
    CHECK(max_diff < 1e-6);
  }
}

TEST_CASE("readout_mean: constants, linearity, Kronecker decoder oracle") {
  Rng rng(17);
  int d = 4, n = 6;
  Mat h = oracles::random_matrix(d, n, rng);

  // identical columns pool to that column
  Mat c(d, n);
  for (int i = 0; i < d; ++i)
    for (int v = 0; v < n; ++v) c(i, v) = h(i, 0);
  Tensor pooled = model::readout_mean(Tensor::constant({d, n}, c.d));
  for (int i = 0; i < d; ++i) CHECK(pooled.data()[i] == doctest::Approx(h(i, 0)).epsilon(1e-12));

  // linearity
  Mat h2 = oracles::random_matrix(d, n, rng);
  Mat sum(d, n);
  for (size_t i = 0; i < sum.d.size(); ++i) sum.d[i] = h.d[i] + h2.d[i];
  Tensor r1 = model::readout_mean(Tensor::constant({d, n}, h.d));
  Tensor r2 = model::readout_mean(Tensor::constant({d, n}, h2.d));
  Tensor rs = model::readout_mean(Tensor::constant({d, n}, sum.d));
  for (int i = 0; i < d; ++i)
    CHECK(rs.data()[i] == doctest::Approx(r1.data()[i] + r2.data()[i]).epsilon(1e-12));

  // explicit (phi_mean^T (x) I) Vec(H) product
  Mat phi_t(1, n, 1.0 / n);
  Mat eye(d, d, 0.0);
  for (int i = 0; i < d; ++i) eye(i, i) = 1.0;
  Mat decoder = oracles::kron(phi_t, eye);  // d x (n*d)
  std::vector<double> vec_h = oracles::vec_columns(h);
  std::vector<double> expect = oracles::matvec(decoder, vec_h);
  Tensor got = model::readout_mean(Tensor::constant({d, n}, h.d));
  for (int i = 0; i < d; ++i) CHECK(got.data()[i] == doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-12));

  // readout_sum linearity (kept for completeness)
  Tensor s1 = model::readout_sum(Tensor::constant({d, n}, h.d));
  for (int i = 0; i < d; ++i) CHECK(s1.data()[i] == doctest::Approx(n * r1.data()[i]).epsilon(1e-10));
}

TEST_CASE("garo: zero-parameter case, permutation properties, formula oracle") {
  int n = 5, d = 4;
  model::ModelState st = tiny_state(n, d, 1, model::Readout::Garo, 19);
  Rng rng(23);
  Mat h = oracles::random_matrix(d, n, rng);

  // zero key/query: z = 0.5 everywhere and h~ = 0.5 * N * mean
  {
    model::ModelState zs = st;
    std::fill(zs.find("garo0.w_key").data->begin(), zs.find("garo0.w_key").data->end(), 0.0);
    std::fill(zs.find("garo0.w_query").data->begin(), zs.find("garo0.w_query").data->end(), 0.0);
    ad::Tape tape;
    model::BoundModel bm(zs, tape);
    auto ro = model::garo(Tensor::constant({d, n}, h.d), 0, bm);
    for (int v = 0; v < n; ++v) CHECK(ro.z.data()[v] == doctest::Approx(0.5).epsilon(1e-12));
    Tensor mean = model::readout_mean(Tensor::constant({d, n}, h.d));
    for (int i = 0; i < d; ++i)
      CHECK(ro.h.data()[i] == doctest::Approx(0.5 * n * mean.data()[i]).epsilon(1e-10));
  }

  ad::Tape tape;
  model::BoundModel bm(st, tape);
  auto ro = model::garo(Tensor::constant({d, n}, h.d), 0, bm);

  // step-by-step formula oracle
  Mat wk(d, d), wq(d, d);
  wk.d = *st.find("garo0.w_key").data;
  wq.d = *st.find("garo0.w_query").data;
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    for (int v = 0; v < n; ++v) mean[static_cast<size_t>(i)] += h(i, v);
    mean[static_cast<size_t>(i)] /= n;
  }
  std::vector<double> q = oracles::matvec(wq, mean);
  for (int v = 0; v < n; ++v) {
    double logit = 0.0;
    for (int i = 0; i < d; ++i) {
      double kiv = 0.0;
      for (int j = 0; j < d; ++j) kiv += wk(i, j) * h(j, v);
      logit += q[static_cast<size_t>(i)] * kiv;
    }
    logit /= std::sqrt(static_cast<double>(d));
    double z = 1.0 / (1.0 + std::exp(-logit));
    CHECK(ro.z.data()[v] == doctest::Approx(z).epsilon(1e-12));
  }
  for (int i = 0; i < d; ++i) {
    double hv = 0.0;
    for (int v = 0; v < n; ++v) hv += h(i, v) * ro.z.data()[v];
    CHECK(ro.h.data()[i] == doctest::Approx(hv).epsilon(1e-12));
  }

  // permuting columns permutes z and leaves the attended vector unchanged
  std::vector<int> perm = {3, 0, 4, 1, 2};
  Mat hp(d, n);
  for (int v = 0; v < n; ++v)
    for (int i = 0; i < d; ++i) hp(i, v) = h(i, perm[static_cast<size_t>(v)]);
  auto rop = model::garo(Tensor::constant({d, n}, hp.d), 0, bm);
  for (int v = 0; v < n; ++v)
    CHECK(rop.z.data()[v] == doctest::Approx(ro.z.data()[perm[static_cast<size_t>(v)]]).epsilon(1e-10));
  for (int i = 0; i < d; ++i)
    CHECK(rop.h.data()[i] == doctest::Approx(ro.h.data()[i]).epsilon(1e-10));
}

TEST_CASE("sero: zero excitation, squeeze bottleneck, formula oracle") {
  int n = 5, d = 4;
  model::ModelState st = tiny_state(n, d, 1, model::Readout::Sero, 29);
  randomize_bn(st, 31);
  Rng rng(37);
  Mat h = oracles::random_matrix(d, n, rng);

  // W2 = 0 -> z = sigmoid(0) = 0.5 everywhere
  {
    model::ModelState zs = st;
    std::fill(zs.find("sero0.w2").data->begin(), zs.find("sero0.w2").data->end(), 0.0);
    ad::Tape tape;
    model::BoundModel bm(zs, tape);
    auto ro = model::sero(Tensor::constant({d, n}, h.d), 0, bm, false);
    for (int v = 0; v < n; ++v) CHECK(ro.z.data()[v] == doctest::Approx(0.5).epsilon(1e-12));
  }

  // z depends on H only through the column mean
  {
    Mat h2 = oracles::random_matrix(d, n, rng);
    // shift h2 so its column mean equals h's
    for (int i = 0; i < d; ++i) {
      double m1 = 0, m2 = 0;
      for (int v = 0; v < n; ++v) {
        m1 += h(i, v);
        m2 += h2(i, v);
      }
      for (int v = 0; v < n; ++v) h2(i, v) += (m1 - m2) / n;
    }
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    auto r1 = model::sero(Tensor::constant({d, n}, h.d), 0, bm, false);
    auto r2 = model::sero(Tensor::constant({d, n}, h2.d), 0, bm, false);
    for (int v = 0; v < n; ++v)
      CHECK(r1.z.data()[v] == doctest::Approx(r2.z.data()[v]).epsilon(1e-10));
  }

  // explicit formula oracle in eval mode: z = sigmoid(W2 gelu(bn(W1 m)))
  {
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    auto ro = model::sero(Tensor::constant({d, n}, h.d), 0, bm, false);
    Mat w1(d, d), w2(n, d);
    w1.d = *st.find("sero0.w1").data;
    w2.d = *st.find("sero0.w2").data;
    const auto& bn = st.bn.at("sero0.bn");
    const auto& gamma = *st.find("sero0.bn.gamma").data;
    const auto& beta = *st.find("sero0.bn.beta").data;
    std::vector<double> m(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < d; ++i) {
      for (int v = 0; v < n; ++v) m[static_cast<size_t>(i)] += h(i, v);
      m[static_cast<size_t>(i)] /= n;
    }
    std::vector<double> a = oracles::matvec(w1, m);
    for (int i = 0; i < d; ++i)
      a[static_cast<size_t>(i)] = harness::gelu_ref(
          harness::bn_eval_ref(a[static_cast<size_t>(i)], bn.running_mean[static_cast<size_t>(i)],
                               bn.running_var[static_cast<size_t>(i)], gamma[static_cast<size_t>(i)],
                               beta[static_cast<size_t>(i)]));
    std::vector<double> logits = oracles::matvec(w2, a);
    for (int v = 0; v < n; ++v) {
      double z = 1.0 / (1.0 + std::exp(-logits[static_cast<size_t>(v)]));
      CHECK(ro.z.data()[v] == doctest::Approx(z).epsilon(1e-12));
    }
  }
}

TEST_CASE("ortho_loss: zeros on scaled orthonormal columns, rank-1 hand value") {
  // orthonormal columns: loss exactly 0 (HᵀH = I, max = 1)
  Mat q(3, 2, 0.0);
  q(0, 0) = 1.0;
  q(1, 1) = 1.0;
  CHECK(model::ortho_loss(Tensor::constant({3, 2}, q.d)).item() == doctest::Approx(0.0).epsilon(1e-12));

  for (double c : {0.1, 1.0, 10.0}) {
    Mat sq = q;
    for (auto& v : sq.d) v *= c;
    CHECK(model::ortho_loss(Tensor::constant({3, 2}, sq.d)).item() ==
          doctest::Approx(0.0).epsilon(1e-10));
  }

  // rank-1: H = [[1,1],[1,1]] gives HᵀH = [[2,2],[2,2]], m = 2,
  // scaled - I = [[0,1],[1,0]], Frobenius norm sqrt(2)
  Mat ones(2, 2, 1.0);
  CHECK(model::ortho_loss(Tensor::constant({2, 2}, ones.d)).item() ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

  Mat tiny(2, 2, 1e-9);
  CHECK_THROWS_AS(model::ortho_loss(Tensor::constant({2, 2}, tiny.d)), model::DegenerateInput);

  // scale invariance on a random instance
  Rng rng(41);
  Mat h = oracles::random_matrix(4, 3, rng);
  double base = model::ortho_loss(Tensor::constant({4, 3}, h.d)).item();
  CHECK(base >= 0.0);
  for (double c : {0.1, 10.0}) {
    Mat sc = h;
    for (auto& v : sc.d) v *= c;
    CHECK(model::ortho_loss(Tensor::constant({4, 3}, sc.d)).item() ==
          doctest::Approx(base).epsilon(1e-10));
  }
}

TEST_CASE("transformer_encoder: degenerate sizes and attention oracle") {
  int d = 6;
  model::ModelState st = tiny_state(4, d, 1, model::Readout::Mean, 43);
  Rng rng(47);

  // T = 1: the single attention weight is 1
  {
    Mat seq = oracles::random_matrix(1, d, rng);
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    auto out = model::transformer_encoder(Tensor::constant({1, d}, seq.d), 0, bm, false, nullptr, 0.0);
    REQUIRE(out.z_time.size() == 1);
    CHECK(out.z_time[0] == doctest::Approx(1.0).epsilon(1e-12));
  }

  // zero q/k projections: uniform attention 1/T
  {
    model::ModelState zs = st;
    std::fill(zs.find("tr0.wq").data->begin(), zs.find("tr0.wq").data->end(), 0.0);
    std::fill(zs.find("tr0.wk").data->begin(), zs.find("tr0.wk").data->end(), 0.0);
    Mat seq = oracles::random_matrix(5, d, rng);
    ad::Tape tape;
    model::BoundModel bm(zs, tape);
    auto out = model::transformer_encoder(Tensor::constant({5, d}, seq.d), 0, bm, false, nullptr, 0.0);
    for (double w : out.z_time) CHECK(w == doctest::Approx(0.2).epsilon(1e-12));
  }

  // explicit softmax(QK^T/sqrt(D)) oracle
  {
    int t = 4;
    Mat seq = oracles::random_matrix(t, d, rng);
    ad::Tape tape;
    model::BoundModel bm(st, tape);
    auto out = model::transformer_encoder(Tensor::constant({t, d}, seq.d), 0, bm, false, nullptr, 0.0);
    Mat wq(d, d), wk(d, d);
    wq.d = *st.find("tr0.wq").data;
    wk.d = *st.find("tr0.wk").data;
    Mat q = oracles::matmul(seq, wq);
    Mat k = oracles::matmul(seq, wk);
    for (int i = 0; i < t; ++i) {
      std::vector<double> row(static_cast<size_t>(t));
      double mx = -1e300;
      for (int j = 0; j < t; ++j) {
        double s = 0;
        for (int c = 0; c < d; ++c) s += q(i, c) * k(j, c);
        row[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, row[static_cast<size_t>(j)]);
      }
      double z = 0;
      for (double& v : row) {
        v = std::exp(v - mx);
        z += v;
      }
      for (int j = 0; j < t; ++j)
        CHECK(out.z_time[static_cast<size_t>(i) * t + j] ==
              doctest::Approx(row[static_cast<size_t>(j)] / z).epsilon(1e-10));
      double rowsum = 0;
      for (int j = 0; j < t; ++j) rowsum += out.z_time[static_cast<size_t>(i) * t + j];
      CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("assemble_representation: degenerate case and K*D length") {
  Rng rng(53);
  Mat single = oracles::random_matrix(1, 5, rng);
  Tensor rep = model::assemble_representation({Tensor::constant({1, 5}, single.d)}, false, nullptr, 0.5);
  REQUIRE(rep.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(rep.data()[i] == doctest::Approx(single.d[static_cast<size_t>(i)]).epsilon(1e-12));

  std::vector<Tensor> outs;
  for (int k = 0; k < 4; ++k)
    outs.push_back(Tensor::constant({3, 128}, std::vector<double>(3 * 128, 0.25)));
  Tensor big = model::assemble_representation(outs, false, nullptr, 0.5);
  CHECK(big.size() == 4 * 128);
}

TEST_CASE("forward: eval determinism and attention record invariants") {
  harness::ToyInstance toy = harness::make_toy(6, 60, 20, 5, 61);
  for (auto ro : {model::Readout::Sero, model::Readout::Garo, model::Readout::Mean}) {
    model::ModelState st = tiny_state(6, 8, 2, ro, 67);
    ad::Tape t1, t2;
    auto r1 = model::forward(toy.graph, toy.ts, st, model::Mode::Eval, t1);
    auto r2 = model::forward(toy.graph, toy.ts, st, model::Mode::Eval, t2);
    CHECK(*r1.logits.values == *r2.logits.values);  // bit-identical

    int T = toy.graph.n_windows();
    REQUIRE(r1.attn.n_windows == T);
    for (int k = 0; k < 2; ++k)
      for (int i = 0; i < T; ++i) {
        double row = 0;
        for (int j = 0; j < T; ++j) row += r1.attn.zt(k, i, j);
        CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
        for (int v = 0; v < 6; ++v) {
          CHECK(r1.attn.zs(k, i, v) >= 0.0);
          CHECK(r1.attn.zs(k, i, v) <= 1.0);
        }
      }
    CHECK(r1.attn.h_dyn.size() == 2 * 8);
    CHECK(r1.loss_ortho.item() >= 0.0);
  }
}

TEST_CASE("forward with mean readout and zeroed temporal stage matches a composed oracle") {
  // zeroed attention/ff make the transformer block a fixed layernorm chain;
  // the whole forward is then reproducible with plain double arithmetic
  int n = 5, d = 4, K = 2;
  harness::ToyInstance toy = harness::make_toy(n, 48, 16, 8, 71);
  model::ModelState st = tiny_state(n, d, K, model::Readout::Mean, 73);
  for (int k = 0; k < K; ++k) {
    std::string p = "tr" + std::to_string(k);
    for (const char* w : {".wq", ".wk", ".wv", ".wo", ".ff_w1", ".ff_w2"})
      std::fill(st.find(p + w).data->begin(), st.find(p + w).data->end(), 0.0);
  }
  ad::Tape tape;
  auto fr = model::forward(toy.graph, toy.ts, st, model::Mode::Eval, tape);

  int T = toy.graph.n_windows();
  // oracle: per window mean-pooled GIN column means, then LN(LN(.)) twice, sum, head
  auto layernorm_ref = [&](std::vector<double> x) {
    double mu = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    for (double& v : x) v = (v - mu) / std::sqrt(var + 1e-5);
    return x;
  };
  // recompute per-window features through the plain node-form reference
  std::vector<Mat> feats(static_cast<size_t>(T));
  {
    const auto& w = *st.find("node.w").data;
    // eta from the GRU: reuse the model's encoder (checked separately) to
    // keep this oracle focused on the GIN/readout/temporal composition
    ad::Tape tape2;
    model::BoundModel bm(st, tape2);
    auto etas = model::encode_timestamps(toy.ts, toy.graph.window_ends, bm);
    for (int t = 0; t < T; ++t) {
      Mat h0(d, n);
      for (int i = 0; i < d; ++i)
        for (int v = 0; v < n; ++v) {
          double val = w[static_cast<size_t>(i) * (n + d) + v];
          for (int j = 0; j < d; ++j)
            val += w[static_cast<size_t>(i) * (n + d) + n + j] * etas[static_cast<size_t>(t)].data()[j];
          h0(i, v) = val;
        }
      feats[static_cast<size_t>(t)] = h0;
    }
  }
  std::vector<double> rep;
  std::vector<std::vector<double>> pooled_per_layer;
  for (int k = 0; k < K; ++k) {
    harness::GinRefParams p = harness::extract_gin(st, k);
    std::vector<std::vector<double>> pooled(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      feats[static_cast<size_t>(t)] =
          harness::gin_node_form(feats[static_cast<size_t>(t)], toy.graph.adjacency[static_cast<size_t>(t)], p);
      std::vector<double> mean(static_cast<size_t>(d), 0.0);
      for (int i = 0; i < d; ++i) {
        for (int v = 0; v < n; ++v) mean[static_cast<size_t>(i)] += feats[static_cast<size_t>(t)](i, v);
        mean[static_cast<size_t>(i)] /= n;
      }
      pooled[static_cast<size_t>(t)] = layernorm_ref(layernorm_ref(mean));
    }
    std::vector<double> summed(static_cast<size_t>(d), 0.0);
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < d; ++i) summed[static_cast<size_t>(i)] += pooled[static_cast<size_t>(t)][static_cast<size_t>(i)];
    rep.insert(rep.end(), summed.begin(), summed.end());
  }
  const auto& hw = *st.find("head.w").data;
  const auto& hb = *st.find("head.b").data;
  for (int c = 0; c < 2; ++c) {
    double logit = hb[static_cast<size_t>(c)];
    for (int j = 0; j < K * d; ++j) logit += hw[static_cast<size_t>(c) * (K * d) + j] * rep[static_cast<size_t>(j)];
    CHECK(fr.logits.data()[c] == doctest::Approx(logit).epsilon(1e-8));
  }
}

TEST_CASE("framelet structure: linear layers match the explicit Kronecker product") {
  int n = 4, d = 3, K = 2;
  model::ModelState st = tiny_state(n, d, K, model::Readout::Mean, 79, /*linear=*/true);
  *st.find("gin0.eps").data = {0.3};
  *st.find("gin1.eps").data = {-0.2};
  Rng rng(83);
  Mat h0 = oracles::random_matrix(d, n, rng);
  std::vector<uint8_t> adj(static_cast<size_t>(n) * n, 0);
  auto connect = [&adj, n](int a, int b) {
    adj[static_cast<size_t>(a) * n + b] = 1;
    adj[static_cast<size_t>(b) * n + a] = 1;
  };
  connect(0, 1);
  connect(1, 2);
  connect(2, 3);

  // run the layer stack
  ad::Tape tape;
  model::BoundModel bm(st, tape);
  Tensor h = Tensor::constant({d, n}, h0.d);
  for (int k = 0; k < K; ++k) h = model::gin_layer(h, adj, k, bm, false);

  // explicit product of encoder matrices P (x) W on the column-vectorised input
  std::vector<double> vec = oracles::vec_columns(h0);
  for (int k = 0; k < K; ++k) {
    Mat p(n, n, 0.0);
    double eps = (*st.find("gin" + std::to_string(k) + ".eps").data)[0];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) p(i, j) = adj[static_cast<size_t>(i) * n + j] + (i == j ? 1.0 + eps : 0.0);
    Mat w(d, d);
    w.d = *st.find("gin" + std::to_string(k) + ".w1").data;
    vec = oracles::matvec(oracles::kron(p, w), vec);
  }
  std::vector<double> got = oracles::vec_columns([&] {
    Mat m(d, n);
    m.d = *h.values;
    return m;
  }());
  REQUIRE(got.size() == vec.size());
  for (size_t i = 0; i < vec.size(); ++i) CHECK(got[i] == doctest::Approx(vec[i]).epsilon(1e-8));

  // decoder application: readout of the stack equals (phi^T (x) I) Vec
  Mat phi_t(1, n, 1.0 / n);
  Mat eye(d, d, 0.0);
  for (int i = 0; i < d; ++i) eye(i, i) = 1.0;
  std::vector<double> decoded = oracles::matvec(oracles::kron(phi_t, eye), vec);
  Tensor pooled = model::readout_mean(h);
  for (int i = 0; i < d; ++i)
    CHECK(pooled.data()[i] == doctest::Approx(decoded[static_cast<size_t>(i)]).epsilon(1e-8));
}

TEST_CASE("full toy loss passes the finite-difference oracle") {
  harness::ToyInstance toy = harness::make_toy(3, 30, 10, 8, 89);
  model::ModelState st = tiny_state(3, 4, 1, model::Readout::Sero, 97);
  double err = harness::full_loss_grad_check(st, toy.graph, toy.ts, 1, 1e-5);
  CHECK(err < 1e-4);
}
