#include "stagin/fcgraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace stagin::fc {

void RoiTimeseries::validate() const {
  if (values.rows < 2) throw std::invalid_argument("RoiTimeseries: need at least 2 ROIs");
  if (values.cols < 2) throw std::invalid_argument("RoiTimeseries: need at least 2 timepoints");
  if (roi_labels.size() != static_cast<size_t>(values.rows) ||
      icn_labels.size() != static_cast<size_t>(values.rows))
    throw std::invalid_argument("RoiTimeseries: label count does not match ROI count");
  if (repetition_time_s <= 0.0)
    throw std::invalid_argument("RoiTimeseries: repetition time must be positive");
  for (double v : values.d)
    if (!std::isfinite(v)) throw std::invalid_argument("RoiTimeseries: non-finite sample");
}

RoiTimeseries standardize(const RoiTimeseries& ts) {
  RoiTimeseries out = ts;
  int n = ts.values.rows, t = ts.values.cols;
  out.degenerate.assign(static_cast<size_t>(n), 0);
  int alive = 0;
  for (int i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int j = 0; j < t; ++j) mean += ts.values(i, j);
    mean /= t;
    double ss = 0.0;
    for (int j = 0; j < t; ++j) {
      double d = ts.values(i, j) - mean;
      ss += d * d;
    }
    double sd = std::sqrt(ss / (t - 1));  // sample std
    if (sd <= 0.0) {
      out.degenerate[static_cast<size_t>(i)] = 1;
      for (int j = 0; j < t; ++j) out.values(i, j) = 0.0;
      out.warnings.push_back("ROI " + (i < static_cast<int>(ts.roi_labels.size())
                                           ? ts.roi_labels[static_cast<size_t>(i)]
                                           : std::to_string(i)) +
                             " has zero variance; zeroed");
      continue;
    }
    ++alive;
    for (int j = 0; j < t; ++j) out.values(i, j) = (ts.values(i, j) - mean) / sd;
  }
  if (alive == 0) throw AllDegenerate("standardize: every ROI is constant");
  return out;
}

std::vector<std::pair<int, int>> sliding_windows(const RoiTimeseries& ts, const WindowConfig& cfg) {
  if (cfg.gamma <= 0 || cfg.stride <= 0)
    throw std::invalid_argument("sliding_windows: gamma and stride must be positive");
  int tmax = ts.values.cols;
  if (cfg.gamma > tmax)
    throw WindowTooLong("sliding_windows: gamma " + std::to_string(cfg.gamma) +
                        " exceeds series length " + std::to_string(tmax));
  int count = (tmax - cfg.gamma) / cfg.stride;
  if (count <= 0)
    throw WindowTooLong("sliding_windows: configuration yields no windows (Tmax=" +
                        std::to_string(tmax) + ", gamma=" + std::to_string(cfg.gamma) +
                        ", stride=" + std::to_string(cfg.stride) + ")");
  std::vector<std::pair<int, int>> w;
  w.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) w.emplace_back(i * cfg.stride, i * cfg.stride + cfg.gamma);
  return w;
}

FcMatrix correlation_matrix(const RoiTimeseries& ts, int start, int end) {
  if (end - start < 2) throw WindowTooShort("correlation_matrix: window shorter than 2 samples");
  if (start < 0 || end > ts.values.cols)
    throw std::invalid_argument("correlation_matrix: window out of range");
  int n = ts.values.rows, w = end - start;
  FcMatrix fc;
  fc.window_start = start;
  fc.window_end = end;
  fc.r = Mat(n, n);

  // demean inside the window, track per-ROI norms
  Mat centred(n, w);
  std::vector<double> norm(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int j = 0; j < w; ++j) mean += ts.values(i, start + j);
    mean /= w;
    double ss = 0.0;
    for (int j = 0; j < w; ++j) {
      double d = ts.values(i, start + j) - mean;
      centred(i, j) = d;
      ss += d * d;
    }
    norm[static_cast<size_t>(i)] = std::sqrt(ss);
    if (ss <= 0.0) fc.degenerate_rois.push_back(i);
  }
  for (int i = 0; i < n; ++i) {
    bool di = norm[static_cast<size_t>(i)] <= 0.0;
    fc.r(i, i) = di ? 0.0 : 1.0;
    for (int j = i + 1; j < n; ++j) {
      double rij = 0.0;
      if (!di && norm[static_cast<size_t>(j)] > 0.0) {
        double dot = 0.0;
        for (int kk = 0; kk < w; ++kk) dot += centred(i, kk) * centred(j, kk);
        rij = dot / (norm[static_cast<size_t>(i)] * norm[static_cast<size_t>(j)]);
      }
      fc.r(i, j) = rij;
      fc.r(j, i) = rij;
    }
  }
  return fc;
}

ThresholdResult threshold_adjacency(const FcMatrix& fc, double edge_percentile) {
  if (edge_percentile <= 0.0 || edge_percentile >= 100.0)
    throw std::invalid_argument("threshold_adjacency: percentile must be in (0,100)");
  int n = fc.r.rows;
  ThresholdResult out;
  out.adjacency.assign(static_cast<size_t>(n) * n, 0);
  std::vector<double> pool;
  pool.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) pool.push_back(fc.r(i, j));
  if (pool.empty()) return out;
  double lo = *std::min_element(pool.begin(), pool.end());
  double hi = *std::max_element(pool.begin(), pool.end());
  out.degenerate = lo == hi;

  std::vector<double> sorted = pool;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  auto count = static_cast<size_t>(
      std::ceil(static_cast<double>(sorted.size()) * edge_percentile / 100.0));
  count = std::max<size_t>(1, std::min(count, sorted.size()));
  double cutoff = sorted[count - 1];

  size_t idx = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j, ++idx) {
      if (pool[idx] >= cutoff) {  // ties at the cutoff all included
        out.adjacency[static_cast<size_t>(i) * n + j] = 1;
        out.adjacency[static_cast<size_t>(j) * n + i] = 1;
      }
    }
  }
  return out;
}

DynamicGraph build_dynamic_graph(const RoiTimeseries& ts, const WindowConfig& cfg) {
  DynamicGraph g;
  g.n_nodes = ts.values.rows;
  auto windows = sliding_windows(ts, cfg);
  g.adjacency.reserve(windows.size());
  g.window_ends.reserve(windows.size());
  for (auto [start, end] : windows) {
    FcMatrix fcm = correlation_matrix(ts, start, end);
    ThresholdResult th = threshold_adjacency(fcm, cfg.edge_percentile);
    g.degenerate_threshold = g.degenerate_threshold || th.degenerate;
    g.adjacency.push_back(std::move(th.adjacency));
    g.window_ends.push_back(end);
  }
  return g;
}

RoiTimeseries slice_columns(const RoiTimeseries& ts, int start, int len) {
  if (start < 0 || len <= 0 || start + len > ts.values.cols)
    throw std::invalid_argument("slice_columns: slice out of range");
  RoiTimeseries out = ts;
  out.values = Mat(ts.values.rows, len);
  for (int i = 0; i < ts.values.rows; ++i)
    for (int j = 0; j < len; ++j) out.values(i, j) = ts.values(i, start + j);
  return out;
}

// ---- CSV + sidecar ----------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

std::string sidecar_path(const std::string& csv_path) {
  auto dot = csv_path.find_last_of('.');
  auto slash = csv_path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return csv_path + ".json";
  return csv_path.substr(0, dot) + ".json";
}

}  // namespace

RoiTimeseries load_timeseries_csv(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(csv_path + ": missing ROI label row");
  RoiTimeseries ts;
  ts.roi_labels = split_csv_line(line);
  if (!std::getline(in, line)) throw IoError(csv_path + ": missing ICN label row");
  ts.icn_labels = split_csv_line(line);
  size_t n = ts.roi_labels.size();
  if (ts.icn_labels.size() != n) throw IoError(csv_path + ": label rows differ in width");

  std::vector<double> data;  // Tmax x N on disk
  size_t t = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != n)
      throw IoError(csv_path + ": row " + std::to_string(t + 3) + " has " +
                    std::to_string(fields.size()) + " fields, expected " + std::to_string(n));
    for (const auto& f : fields) data.push_back(std::stod(f));
    ++t;
  }
  ts.values = Mat(static_cast<int>(n), static_cast<int>(t));
  for (size_t j = 0; j < t; ++j)
    for (size_t i = 0; i < n; ++i) ts.values(static_cast<int>(i), static_cast<int>(j)) = data[j * n + i];

  std::ifstream side(sidecar_path(csv_path));
  if (side) {
    nlohmann::json j = nlohmann::json::parse(side);
    ts.repetition_time_s = j.value("tr_s", 0.72);
  }
  ts.validate();
  return ts;
}

void save_timeseries_csv(const RoiTimeseries& ts, const std::string& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot write " + csv_path);
  auto write_row = [&out](const std::vector<std::string>& row) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  };
  write_row(ts.roi_labels);
  write_row(ts.icn_labels);
  for (int j = 0; j < ts.values.cols; ++j) {
    for (int i = 0; i < ts.values.rows; ++i) out << (i ? "," : "") << fmt_g17(ts.values(i, j));
    out << "\n";
  }
  out.close();
  nlohmann::json side;
  side["tr_s"] = ts.repetition_time_s;
  std::ofstream sj(sidecar_path(csv_path));
  if (!sj) throw IoError("cannot write sidecar for " + csv_path);
  sj << side.dump(2) << "\n";
}

// ---- DFCG -------------------------------------------------------------------

namespace {

constexpr uint32_t kDfcgVersion = 1;

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
  if (!in) throw IoError("DFCG: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_dfcg(const DynamicGraph& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("DFCG", 4);
  put_u32(out, kDfcgVersion);
  put_u32(out, static_cast<uint32_t>(g.n_nodes));
  put_u32(out, static_cast<uint32_t>(g.n_windows()));
  for (int e : g.window_ends) put_u32(out, static_cast<uint32_t>(e));
  int n = g.n_nodes;
  size_t nbits = static_cast<size_t>(n) * (n - 1) / 2;
  size_t nbytes = (nbits + 7) / 8;
  std::vector<unsigned char> packed;
  for (const auto& adj : g.adjacency) {
    packed.assign(nbytes, 0);
    size_t bit = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j, ++bit)
        if (adj[static_cast<size_t>(i) * n + j])
          packed[bit >> 3] |= static_cast<unsigned char>(1u << (bit & 7));
    out.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(nbytes));
  }
}

DynamicGraph load_dfcg(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DFCG", 4) != 0) throw IoError(path + ": not a DFCG file");
  uint32_t version = get_u32(in);
  if (version != kDfcgVersion)
    throw IoError(path + ": unsupported DFCG version " + std::to_string(version));
  DynamicGraph g;
  g.n_nodes = static_cast<int>(get_u32(in));
  uint32_t t = get_u32(in);
  g.window_ends.resize(t);
  for (uint32_t i = 0; i < t; ++i) g.window_ends[i] = static_cast<int>(get_u32(in));
  int n = g.n_nodes;
  size_t nbits = static_cast<size_t>(n) * (n - 1) / 2;
  size_t nbytes = (nbits + 7) / 8;
  std::vector<unsigned char> packed(nbytes);
  g.adjacency.reserve(t);
  for (uint32_t w = 0; w < t; ++w) {
    in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError(path + ": truncated adjacency block");
    std::vector<uint8_t> adj(static_cast<size_t>(n) * n, 0);
    size_t bit = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j, ++bit)
        if (packed[bit >> 3] & (1u << (bit & 7))) {
          adj[static_cast<size_t>(i) * n + j] = 1;
          adj[static_cast<size_t>(j) * n + i] = 1;
        }
    g.adjacency.push_back(std::move(adj));
  }
  return g;
}

}  // namespace stagin::fc
