#include "stagin/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "json.hpp"

namespace stagin::train {

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (epochs <= 0) bad.push_back("epochs must be positive");
  if (minibatch_size <= 0) bad.push_back("minibatch_size must be positive");
  if (!(lr_final < lr_base && lr_base < lr_peak))
    bad.push_back("require lr_final < lr_base < lr_peak");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) bad.push_back("warmup_frac must be in (0,1)");
  if (lambda < 0) bad.push_back("lambda must be nonnegative");
  if (slice_len <= 0) bad.push_back("slice_len must be positive");
  if (folds < 2) bad.push_back("folds must be at least 2");
  if (!bad.empty()) {
    std::string msg = "TrainConfig:";
    for (const auto& m : bad) msg += " " + m + ";";
    throw std::invalid_argument(msg);
  }
}

double one_cycle_lr(int step, int total_steps, const TrainConfig& cfg) {
  if (step < 0 || step >= total_steps)
    throw OutOfRange("one_cycle_lr: step " + std::to_string(step) + " outside [0," +
                     std::to_string(total_steps) + ")");
  int warm = static_cast<int>(std::floor(cfg.warmup_frac * total_steps));
  if (step < warm) {
    return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * static_cast<double>(step) / warm;
  }
  int decay_steps = std::max(1, total_steps - 1 - warm);
  double progress = static_cast<double>(step - warm) / decay_steps;
  return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

fc::RoiTimeseries random_time_slice(const fc::RoiTimeseries& ts, int slice_len, Rng& rng) {
  int tmax = ts.values.cols;
  if (slice_len > tmax)
    throw SliceTooLong("random_time_slice: slice " + std::to_string(slice_len) +
                       " exceeds series length " + std::to_string(tmax));
  int start = static_cast<int>(rng.below(static_cast<uint64_t>(tmax - slice_len + 1)));
  return fc::slice_columns(ts, start, slice_len);
}

FoldSplit stratified_kfold(const std::vector<int>& labels, int k, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_kfold: k must be at least 2");
  std::map<int, std::vector<int>> per_class;
  for (size_t i = 0; i < labels.size(); ++i) per_class[labels[i]].push_back(static_cast<int>(i));
  for (const auto& [cls, members] : per_class)
    if (static_cast<int>(members.size()) < k)
      throw ClassTooSmall("stratified_kfold: class " + std::to_string(cls) + " has " +
                          std::to_string(members.size()) + " members, need at least " +
                          std::to_string(k));
  FoldSplit split;
  split.n_classes = static_cast<int>(per_class.size());
  split.test_indices.assign(static_cast<size_t>(k), {});
  Rng rng(seed);
  int class_rank = 0;
  for (auto& [cls, members] : per_class) {
    rng.shuffle(members);
    // deal round-robin, rotating the starting fold so remainders spread out
    for (size_t i = 0; i < members.size(); ++i)
      split.test_indices[(i + static_cast<size_t>(class_rank)) % static_cast<size_t>(k)].push_back(
          members[i]);
    ++class_rank;
  }
  for (auto& fold : split.test_indices) std::sort(fold.begin(), fold.end());
  split.train_indices.assign(static_cast<size_t>(k), {});
  for (int f = 0; f < k; ++f) {
    std::set<int> test(split.test_indices[static_cast<size_t>(f)].begin(),
                       split.test_indices[static_cast<size_t>(f)].end());
    for (size_t i = 0; i < labels.size(); ++i)
      if (!test.count(static_cast<int>(i)))
        split.train_indices[static_cast<size_t>(f)].push_back(static_cast<int>(i));
  }
  return split;
}

AdamState::AdamState(const model::ModelState& st) {
  for (const auto& p : st.params) {
    m.emplace_back(p.data->size(), 0.0);
    v.emplace_back(p.data->size(), 0.0);
  }
}

void adam_step(model::ModelState& params, const std::vector<std::vector<double>>& grads, double lr,
               AdamState& state) {
  if (grads.size() != params.params.size())
    throw ad::ShapeMismatch("adam_step: got " + std::to_string(grads.size()) +
                            " gradients for " + std::to_string(params.params.size()) +
                            " parameters");
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < grads.size(); ++i) {
    auto& p = *params.params[i].data;
    const auto& g = grads[i];
    if (g.size() != p.size())
      throw ad::ShapeMismatch("adam_step: gradient size mismatch for " + params.params[i].name);
    auto& mi = state.m[i];
    auto& vi = state.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
      vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
      double mhat = mi[j] / bc1;
      double vhat = vi[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auroc: scores and labels differ in length");
  size_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l == 1 ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) throw SingleClass("auroc: both classes must be present");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });
  // tie-averaged ranks
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::string epoch_record_jsonl(const EpochRecord& r) {
  nlohmann::json j;
  j["fold"] = r.fold;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss_xent"] = r.loss_xent;
  j["loss_ortho"] = r.loss_ortho;
  j["loss_total"] = r.loss_total;
  j["acc"] = r.acc;
  if (r.auroc)
    j["auroc"] = *r.auroc;
  else
    j["auroc"] = nullptr;
  return j.dump();
}

namespace {

EvalOutput evaluate_with_graphs(model::ModelState& state, const std::vector<Sample>& dataset,
                                const std::vector<int>& indices, const fc::WindowConfig& wcfg,
                                bool keep_attention,
                                const std::vector<fc::DynamicGraph>* graphs) {
  EvalOutput out;
  int correct = 0;
  for (int idx : indices) {
    const Sample& s = dataset[static_cast<size_t>(idx)];
    fc::DynamicGraph local;
    const fc::DynamicGraph* g;
    if (graphs) {
      g = &(*graphs)[static_cast<size_t>(idx)];
    } else {
      local = fc::build_dynamic_graph(s.ts, wcfg);
      g = &local;
    }
    ad::Tape tape;
    model::ForwardResult fr = model::forward(*g, s.ts, state, model::Mode::Eval, tape);
    const auto& logits = *fr.logits.values;
    int pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.predicted.push_back(pred);
    if (pred == s.label) ++correct;
    if (state.cfg.n_classes == 2) {
      double mx = std::max(logits[0], logits[1]);
      double p1 = std::exp(logits[1] - mx) / (std::exp(logits[0] - mx) + std::exp(logits[1] - mx));
      out.score_class1.push_back(p1);
    }
    if (keep_attention) {
      fr.attn.subject_id = s.id;
      fr.attn.label = s.label;
      out.attention.push_back(std::move(fr.attn));
    }
  }
  out.acc =
      indices.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(indices.size());
  return out;
}

}  // namespace

EvalOutput evaluate(model::ModelState& state, const std::vector<Sample>& dataset,
                    const std::vector<int>& indices, const fc::WindowConfig& wcfg,
                    bool keep_attention) {
  return evaluate_with_graphs(state, dataset, indices, wcfg, keep_attention, nullptr);
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  double sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  return {mean, sd};
}

}  // namespace

TrainResult train_model(const std::vector<Sample>& dataset, const fc::WindowConfig& wcfg,
                        const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                        std::ostream* progress) {
  tcfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train_model: empty dataset");
  std::vector<int> labels;
  labels.reserve(dataset.size());
  std::set<int> distinct;
  for (const auto& s : dataset) {
    labels.push_back(s.label);
    distinct.insert(s.label);
  }
  if (distinct.size() < 2)
    throw ClassTooSmall("train_model: need at least two classes, got " +
                        std::to_string(distinct.size()));

  FoldSplit split = stratified_kfold(labels, tcfg.folds, tcfg.seed);
  bool binary = mcfg.n_classes == 2;
  TrainResult result;
  std::vector<double> fold_accs, fold_aurocs;

  // full-series graphs are reused by every test evaluation
  std::vector<fc::DynamicGraph> full_graphs;
  full_graphs.reserve(dataset.size());
  for (const auto& s : dataset) full_graphs.push_back(fc::build_dynamic_graph(s.ts, wcfg));

  for (int fold = 0; fold < tcfg.folds; ++fold) {
    const auto& train_idx = split.train_indices[static_cast<size_t>(fold)];
    const auto& test_idx = split.test_indices[static_cast<size_t>(fold)];
    model::ModelState state =
        model::ModelState::init(mcfg, tcfg.seed + static_cast<uint64_t>(fold));
    AdamState adam(state);
    Rng rng(tcfg.seed * 1000003ull + static_cast<uint64_t>(fold) + 17ull);

    int steps_per_epoch =
        static_cast<int>((train_idx.size() + static_cast<size_t>(tcfg.minibatch_size) - 1) /
                         static_cast<size_t>(tcfg.minibatch_size));
    int total_steps = tcfg.epochs * steps_per_epoch;
    int step = 0;
    double last_lr = tcfg.lr_base;
    EpochRecord last_rec;

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
      std::vector<int> order = train_idx;
      rng.shuffle(order);
      double sum_xent = 0.0, sum_ortho = 0.0, sum_total = 0.0;
      size_t n_seen = 0;

      for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(tcfg.minibatch_size)) {
        size_t batch_end = std::min(order.size(), pos + static_cast<size_t>(tcfg.minibatch_size));
        double lr = one_cycle_lr(step, total_steps, tcfg);
        last_lr = lr;
        std::vector<std::vector<double>> grad_acc;
        grad_acc.reserve(state.params.size());
        for (const auto& p : state.params) grad_acc.emplace_back(p.data->size(), 0.0);
        double inv_b = 1.0 / static_cast<double>(batch_end - pos);

        for (size_t bi = pos; bi < batch_end; ++bi) {
          const Sample& s = dataset[static_cast<size_t>(order[static_cast<size_t>(bi)])];
          fc::RoiTimeseries sliced = tcfg.slice_len < s.ts.values.cols
                                         ? random_time_slice(s.ts, tcfg.slice_len, rng)
                                         : s.ts;
          fc::DynamicGraph g = fc::build_dynamic_graph(sliced, wcfg);
          ad::Tape tape;
          model::ForwardResult fr =
              model::forward(g, sliced, state, model::Mode::Train, tape, &rng);
          ad::Tensor xent = ad::cross_entropy_with_logits(fr.logits, s.label);
          ad::Tensor loss = ad::add(xent, ad::scale(fr.loss_ortho, tcfg.lambda));
          tape.backward(loss);
          sum_xent += xent.item();
          sum_ortho += fr.loss_ortho.item();
          sum_total += loss.item();
          ++n_seen;
          for (size_t pi = 0; pi < state.params.size(); ++pi) {
            std::vector<double> gp = tape.grad_of(fr.bound[pi]);
            auto& acc = grad_acc[pi];
            for (size_t j = 0; j < gp.size(); ++j) acc[j] += inv_b * gp[j];
          }
        }
        adam_step(state, grad_acc, lr, adam);
        ++step;
      }

      EvalOutput ev = evaluate_with_graphs(state, dataset, test_idx, wcfg, false, &full_graphs);
      EpochRecord rec;
      rec.fold = fold;
      rec.epoch = epoch;
      rec.lr = last_lr;
      rec.loss_xent = sum_xent / static_cast<double>(n_seen);
      rec.loss_ortho = sum_ortho / static_cast<double>(n_seen);
      rec.loss_total = sum_total / static_cast<double>(n_seen);
      rec.acc = ev.acc;
      if (binary) {
        std::vector<int> test_labels;
        for (int idx : test_idx) test_labels.push_back(dataset[static_cast<size_t>(idx)].label);
        rec.auroc = auroc(ev.score_class1, test_labels);
      }
      result.records.push_back(rec);
      last_rec = rec;
      if (progress) (*progress) << epoch_record_jsonl(rec) << "\n";
    }

    FoldOutcome outcome;
    outcome.fold = fold;
    outcome.state = std::move(state);
    outcome.test_acc = last_rec.acc;
    outcome.test_auroc = last_rec.auroc;
    outcome.test_indices = test_idx;
    fold_accs.push_back(outcome.test_acc);
    if (outcome.test_auroc) fold_aurocs.push_back(*outcome.test_auroc);
    result.folds.push_back(std::move(outcome));
  }

  auto [ma, sa] = mean_std(fold_accs);
  result.mean_acc = ma;
  result.std_acc = sa;
  if (!fold_aurocs.empty()) {
    auto [mu, su] = mean_std(fold_aurocs);
    result.mean_auroc = mu;
    result.std_auroc = su;
  }
  return result;
}

}  // namespace stagin::train
