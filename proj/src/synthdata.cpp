#include "stagin/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace stagin::synth {

void SynthConfig::validate() const {
  std::vector<std::string> bad;
  if (n_subjects <= 0) bad.push_back("n_subjects must be positive");
  if (n_nodes < 4) bad.push_back("n_nodes must be at least 4");
  if (t_max < 8) bad.push_back("t_max must be at least 8");
  if (tr_s <= 0) bad.push_back("tr_s must be positive");
  if (n_states <= 0) bad.push_back("n_states must be positive");
  if (group_effect < 0) bad.push_back("group_effect must be nonnegative");
  if (noise_std < 0) bad.push_back("noise_std must be nonnegative");
  if (!(rho_in > rho_out)) bad.push_back("rho_in must exceed rho_out");
  if (state_contrast < 0) bad.push_back("state_contrast must be nonnegative");
  if (rho_in >= 1.0 || rho_out < 0.0) bad.push_back("correlations must lie in [0,1)");
  if (occupancy_bias < 0.0 || occupancy_bias >= 1.0) bad.push_back("occupancy_bias must be in [0,1)");
  if (mean_dwell < 1) bad.push_back("mean_dwell must be at least 1");
  for (const auto& b : task_schedule) {
    if (b.onset < 0 || b.duration <= 0 || b.onset + b.duration > t_max)
      bad.push_back("task block outside [0, t_max)");
    if (b.label < 1 || b.label >= n_states) bad.push_back("task block label must name a non-baseline state");
  }
  if (!bad.empty()) {
    std::string msg = "SynthConfig:";
    for (const auto& m : bad) msg += " " + m + ";";
    throw std::invalid_argument(msg);
  }
}

Mat cholesky(const Mat& a) {
  if (a.rows != a.cols) throw NotSPD("cholesky: matrix not square");
  int n = a.rows;
  Mat l(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (s <= 0.0) throw NotSPD("cholesky: pivot " + std::to_string(i) + " not positive");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

namespace {

std::vector<std::vector<int>> partition_blocks(int n_nodes, int n_blocks) {
  std::vector<std::vector<int>> blocks(static_cast<size_t>(n_blocks));
  for (int i = 0; i < n_nodes; ++i)
    blocks[static_cast<size_t>(i * n_blocks / n_nodes)].push_back(i);
  return blocks;
}

// Correlation template from per-block strengths; diagonal loading until SPD.
Mat block_template(int n, const std::vector<std::vector<int>>& blocks,
                   const std::vector<double>& block_rho, double rho_out) {
  Mat c(n, n, 0.0);
  for (int i = 0; i < n; ++i) c(i, i) = 1.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      c(i, j) = rho_out;
      c(j, i) = rho_out;
    }
  for (size_t b = 0; b < blocks.size(); ++b) {
    const auto& nodes = blocks[b];
    for (size_t x = 0; x < nodes.size(); ++x)
      for (size_t y = x + 1; y < nodes.size(); ++y) {
        c(nodes[x], nodes[y]) = block_rho[b];
        c(nodes[y], nodes[x]) = block_rho[b];
      }
  }
  // enforce SPD with minimum eigenvalue above 1e-6 by diagonal loading
  for (int attempt = 0; attempt < 40; ++attempt) {
    try {
      Mat shifted = c;
      for (int i = 0; i < n; ++i) shifted(i, i) -= 1e-6;
      cholesky(shifted);
      return c;
    } catch (const NotSPD&) {
      for (int i = 0; i < n; ++i) c(i, i) += 1e-3;
    }
  }
  throw NotSPD("block_template: diagonal loading failed to reach SPD");
}

}  // namespace

TemplateSet make_templates(const SynthConfig& cfg) {
  cfg.validate();
  TemplateSet set;
  int n_blocks = std::max(3, cfg.n_states);
  set.blocks = partition_blocks(cfg.n_nodes, n_blocks);

  // the sensitive state carries the group signal on the block after its own
  int sensitive = cfg.n_states - 1;
  int responsive_block = (sensitive + 1) % n_blocks;
  set.responsive_nodes = set.blocks[static_cast<size_t>(responsive_block)];

  for (int s = 0; s < cfg.n_states; ++s) {
    std::vector<double> rho(static_cast<size_t>(n_blocks), cfg.rho_in);
    rho[static_cast<size_t>(s % n_blocks)] = std::min(0.95, cfg.rho_in + cfg.state_contrast);
    set.group_a.push_back(block_template(cfg.n_nodes, set.blocks, rho, cfg.rho_out));
    if (s == sensitive)
      rho[static_cast<size_t>(responsive_block)] =
          std::min(0.95, rho[static_cast<size_t>(responsive_block)] + cfg.group_effect);
    set.group_b.push_back(block_template(cfg.n_nodes, set.blocks, rho, cfg.rho_out));
  }
  return set;
}

namespace {

std::vector<int> rest_timeline(const SynthConfig& cfg, int group, Rng& rng) {
  // Markov dwell process; occupancy_bias stretches the favoured state's dwell
  // time and shrinks the others', tilting stationary occupancy per group.
  std::vector<int> timeline(static_cast<size_t>(cfg.t_max));
  int favoured = group == 0 ? 0 : cfg.n_states - 1;
  auto next_state = [&](int current) {
    int pick = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.n_states - 1)));
    return pick >= current ? pick + 1 : pick;
  };
  int state = cfg.n_states == 1 ? 0 : static_cast<int>(rng.below(static_cast<uint64_t>(cfg.n_states)));
  for (int t = 0; t < cfg.t_max; ++t) {
    timeline[static_cast<size_t>(t)] = state;
    if (cfg.n_states == 1) continue;
    double dwell = state == favoured ? cfg.mean_dwell / (1.0 - cfg.occupancy_bias)
                                     : cfg.mean_dwell * (1.0 - cfg.occupancy_bias);
    double p_switch = 1.0 / std::max(1.0, dwell);
    if (rng.u01() < p_switch) state = next_state(state);
  }
  return timeline;
}

std::vector<int> task_timeline(const SynthConfig& cfg) {
  std::vector<int> timeline(static_cast<size_t>(cfg.t_max), 0);
  for (const auto& b : cfg.task_schedule)
    for (int t = b.onset; t < b.onset + b.duration; ++t) timeline[static_cast<size_t>(t)] = b.label;
  return timeline;
}

}  // namespace

Subject simulate_subject(const TemplateSet& templates, const SynthConfig& cfg, int subject_index,
                         int group) {
  Rng rng(cfg.seed + static_cast<uint64_t>(subject_index));
  Subject subj;
  subj.id = "subj" + std::to_string(subject_index);
  subj.truth.group = group;
  subj.truth.blocks = templates.blocks;
  subj.truth.responsive_nodes = templates.responsive_nodes;
  subj.truth.state_timeline =
      cfg.rest_mode() ? rest_timeline(cfg, group, rng) : task_timeline(cfg);

  const auto& tpls = group == 0 ? templates.group_a : templates.group_b;
  std::vector<Mat> chol;
  chol.reserve(tpls.size());
  for (const auto& c : tpls) chol.push_back(cholesky(c));

  int n = cfg.n_nodes;
  subj.ts.values = Mat(n, cfg.t_max);
  subj.ts.repetition_time_s = cfg.tr_s;
  static const char* kIcnNames[7] = {"VN", "SMN", "DAN", "SVN", "LIM", "CCN", "DMN"};
  subj.ts.roi_labels.resize(static_cast<size_t>(n));
  subj.ts.icn_labels.resize(static_cast<size_t>(n));
  for (size_t b = 0; b < templates.blocks.size(); ++b)
    for (int node : templates.blocks[b]) {
      subj.ts.roi_labels[static_cast<size_t>(node)] = "roi" + std::to_string(node);
      subj.ts.icn_labels[static_cast<size_t>(node)] = kIcnNames[b % 7];
    }

  std::vector<double> g(static_cast<size_t>(n));
  for (int t = 0; t < cfg.t_max; ++t) {
    const Mat& l = chol[static_cast<size_t>(subj.truth.state_timeline[static_cast<size_t>(t)])];
    for (int i = 0; i < n; ++i) g[static_cast<size_t>(i)] = rng.normal();
    for (int i = 0; i < n; ++i) {
      double v = 0.0;
      for (int k = 0; k <= i; ++k) v += l(i, k) * g[static_cast<size_t>(k)];
      if (cfg.noise_std > 0) v += cfg.noise_std * rng.normal();
      subj.ts.values(i, t) = v;
    }
  }
  return subj;
}

// ---- dataset on disk ---------------------------------------------------------

namespace {

nlohmann::json truth_to_json(const GroundTruth& t) {
  nlohmann::json j;
  j["group"] = t.group;
  j["state_timeline"] = t.state_timeline;
  j["responsive_nodes"] = t.responsive_nodes;
  j["blocks"] = t.blocks;
  return j;
}

GroundTruth truth_from_json(const nlohmann::json& j) {
  GroundTruth t;
  t.group = j.at("group").get<int>();
  t.state_timeline = j.at("state_timeline").get<std::vector<int>>();
  t.responsive_nodes = j.at("responsive_nodes").get<std::vector<int>>();
  t.blocks = j.at("blocks").get<std::vector<std::vector<int>>>();
  return t;
}

nlohmann::json config_to_json(const SynthConfig& c) {
  nlohmann::json j;
  j["n_subjects"] = c.n_subjects;
  j["n_nodes"] = c.n_nodes;
  j["t_max"] = c.t_max;
  j["tr_s"] = c.tr_s;
  j["n_states"] = c.n_states;
  j["group_effect"] = c.group_effect;
  j["noise_std"] = c.noise_std;
  j["rho_in"] = c.rho_in;
  j["rho_out"] = c.rho_out;
  j["state_contrast"] = c.state_contrast;
  j["occupancy_bias"] = c.occupancy_bias;
  j["mean_dwell"] = c.mean_dwell;
  j["seed"] = c.seed;
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& b : c.task_schedule)
    sched.push_back({{"label", b.label}, {"onset", b.onset}, {"duration", b.duration}});
  j["task_schedule"] = sched;
  return j;
}

SynthConfig config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.n_subjects = j.at("n_subjects").get<int>();
  c.n_nodes = j.at("n_nodes").get<int>();
  c.t_max = j.at("t_max").get<int>();
  c.tr_s = j.at("tr_s").get<double>();
  c.n_states = j.at("n_states").get<int>();
  c.group_effect = j.at("group_effect").get<double>();
  c.noise_std = j.at("noise_std").get<double>();
  c.rho_in = j.at("rho_in").get<double>();
  c.rho_out = j.at("rho_out").get<double>();
  c.state_contrast = j.at("state_contrast").get<double>();
  c.occupancy_bias = j.at("occupancy_bias").get<double>();
  c.mean_dwell = j.at("mean_dwell").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  for (const auto& b : j.at("task_schedule"))
    c.task_schedule.push_back(
        {b.at("label").get<int>(), b.at("onset").get<int>(), b.at("duration").get<int>()});
  return c;
}

}  // namespace

DatasetManifest generate_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  TemplateSet templates = make_templates(cfg);
  DatasetManifest m;
  m.cfg = cfg;
  for (int i = 0; i < cfg.n_subjects; ++i) {
    int group = i % 2;  // balanced within +-1
    Subject s = simulate_subject(templates, cfg, i, group);
    std::string rel = s.id + ".csv";
    fc::save_timeseries_csv(s.ts, out_dir + "/" + rel);
    m.csv_paths.push_back(rel);
    m.truths.push_back(std::move(s.truth));
    m.ids.push_back(s.id);
  }
  save_manifest(m, out_dir + "/manifest.json");
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["config"] = config_to_json(m.cfg);
  nlohmann::json subs = nlohmann::json::array();
  for (size_t i = 0; i < m.csv_paths.size(); ++i) {
    nlohmann::json s;
    s["id"] = m.ids[i];
    s["csv"] = m.csv_paths[i];
    s["truth"] = truth_to_json(m.truths[i]);
    subs.push_back(s);
  }
  j["subjects"] = subs;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path);
  nlohmann::json j = nlohmann::json::parse(in);
  DatasetManifest m;
  m.cfg = config_from_json(j.at("config"));
  for (const auto& s : j.at("subjects")) {
    m.ids.push_back(s.at("id").get<std::string>());
    m.csv_paths.push_back(s.at("csv").get<std::string>());
    m.truths.push_back(truth_from_json(s.at("truth")));
  }
  return m;
}

std::vector<int> window_task_indicator(const GroundTruth& truth, const std::vector<int>& window_ends,
                                       int gamma) {
  std::vector<int> ind;
  ind.reserve(window_ends.size());
  for (int end : window_ends) {
    int start = end - gamma;
    int active = 0;
    for (int t = start; t < end; ++t)
      if (truth.state_timeline[static_cast<size_t>(t)] != 0) ++active;
    ind.push_back(active * 2 >= gamma ? 1 : 0);
  }
  return ind;
}

}  // namespace stagin::synth
