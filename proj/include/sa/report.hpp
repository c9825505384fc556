#pragma once

// Result records: one CSV row per run, plus the aggregation that turns a
// directory of runs into mean/std comparison tables.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sa/error.hpp"
#include "sa/serialize.hpp"

namespace sa {

struct ResultRow {
  std::string run_id;
  std::string mode;
  size_t shots = 0;
  uint64_t seed = 0;
  std::optional<double> accuracy;
  std::optional<double> ssim;
  std::optional<double> psnr;
  double wall_seconds = 0.0;

  bool operator==(const ResultRow&) const = default;
};

inline const char* csv_header() {
  return "run_id,mode,shots,seed,accuracy,ssim,psnr,wall_seconds";
}

namespace report_detail {

inline std::string fmt_metric(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

inline std::optional<double> parse_metric(const std::string& s,
                                          size_t lineno) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size())
    throw FormatError("result csv line " + std::to_string(lineno) +
                          ": bad number '" + s + "'",
                      0);
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline uint64_t parse_uint(const std::string& s, size_t lineno) {
  const auto v = parse_metric(s, lineno);
  if (!v || *v < 0.0 || *v != std::floor(*v))
    throw FormatError("result csv line " + std::to_string(lineno) +
                          ": bad count '" + s + "'",
                      0);
  return static_cast<uint64_t>(*v);
}

}  // namespace report_detail

inline std::string format_result_row(const ResultRow& r) {
  using report_detail::fmt_metric;
  char wall[40];
  std::snprintf(wall, sizeof(wall), "%.3f", r.wall_seconds);
  return r.run_id + "," + r.mode + "," + std::to_string(r.shots) + "," +
         std::to_string(r.seed) + "," + fmt_metric(r.accuracy) + "," +
         fmt_metric(r.ssim) + "," + fmt_metric(r.psnr) + "," + wall;
}

inline std::string format_result_csv(const std::vector<ResultRow>& rows) {
  std::string s = std::string(csv_header()) + "\n";
  for (const ResultRow& r : rows) s += format_result_row(r) + "\n";
  return s;
}

inline std::vector<ResultRow> parse_result_csv(const std::string& text) {
  using namespace report_detail;
  std::stringstream ss(text);
  std::string line;
  size_t lineno = 0;
  std::vector<ResultRow> rows;
  bool saw_header = false;
  while (std::getline(ss, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != csv_header())
        throw FormatError("result csv line 1: unexpected header", 0);
      saw_header = true;
      continue;
    }
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 8)
      throw FormatError("result csv line " + std::to_string(lineno) +
                            ": expected 8 fields, got " +
                            std::to_string(f.size()),
                        0);
    ResultRow r;
    r.run_id = f[0];
    r.mode = f[1];
    r.shots = static_cast<size_t>(parse_uint(f[2], lineno));
    r.seed = parse_uint(f[3], lineno);
    r.accuracy = parse_metric(f[4], lineno);
    r.ssim = parse_metric(f[5], lineno);
    r.psnr = parse_metric(f[6], lineno);
    const auto wall = parse_metric(f[7], lineno);
    if (!wall)
      throw FormatError("result csv line " + std::to_string(lineno) +
                            ": missing wall_seconds",
                        0);
    r.wall_seconds = *wall;
    rows.push_back(std::move(r));
  }
  if (!saw_header) throw FormatError("result csv: empty file", 0);
  return rows;
}

inline void write_result_csv(const std::string& path,
                             const std::vector<ResultRow>& rows) {
  const std::string text = format_result_csv(rows);
  write_file_atomic(path,
                    std::vector<uint8_t>(text.begin(), text.end()));
}

inline std::vector<ResultRow> read_result_csv(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return parse_result_csv(std::string(bytes.begin(), bytes.end()));
}

// Every result.csv one level below `out_dir`, sorted by run directory name
// so aggregation order is stable.
inline std::vector<ResultRow> collect_results(const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (!fs::exists(out_dir)) return {};
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    if (!entry.is_directory()) continue;
    const fs::path csv = entry.path() / "result.csv";
    if (fs::exists(csv)) files.push_back(csv.string());
  }
  std::sort(files.begin(), files.end());
  std::vector<ResultRow> rows;
  for (const std::string& f : files)
    for (ResultRow& r : read_result_csv(f)) rows.push_back(std::move(r));
  return rows;
}

// Rows aggregate under their run_id with the trailing _seed<k> stripped, so
// the same experiment at different seeds lands in one group.
inline std::string experiment_key(const std::string& run_id) {
  const size_t at = run_id.rfind("_seed");
  if (at == std::string::npos) return run_id;
  const std::string tail = run_id.substr(at + 5);
  if (tail.empty()) return run_id;
  for (char c : tail)
    if (!std::isdigit(static_cast<unsigned char>(c))) return run_id;
  return run_id.substr(0, at);
}

struct MetricSummary {
  size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 when n < 2
};

inline MetricSummary summarize(const std::vector<double>& xs) {
  MetricSummary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct ExperimentSummary {
  std::string experiment;
  size_t runs = 0;
  MetricSummary accuracy;
  MetricSummary ssim;
  MetricSummary psnr;
};

inline std::vector<ExperimentSummary> aggregate_results(
    const std::vector<ResultRow>& rows) {
  std::map<std::string, std::vector<const ResultRow*>> groups;
  for (const ResultRow& r : rows)
    groups[experiment_key(r.run_id)].push_back(&r);
  std::vector<ExperimentSummary> out;
  for (const auto& [key, members] : groups) {
    ExperimentSummary e;
    e.experiment = key;
    e.runs = members.size();
    std::vector<double> acc, ss, ps;
    for (const ResultRow* r : members) {
      if (r->accuracy) acc.push_back(*r->accuracy);
      if (r->ssim) ss.push_back(*r->ssim);
      if (r->psnr) ps.push_back(*r->psnr);
    }
    e.accuracy = summarize(acc);
    e.ssim = summarize(ss);
    e.psnr = summarize(ps);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::string format_report(const std::vector<ExperimentSummary>& aggs) {
  auto cell = [](const MetricSummary& m) {
    if (m.n == 0) return std::string("-");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", m.mean, m.stddev);
    return std::string(buf);
  };
  size_t width = 10;
  for (const ExperimentSummary& e : aggs)
    width = std::max(width, e.experiment.size());
  char line[320];
  std::snprintf(line, sizeof(line), "%-*s %4s  %-20s %-20s %-20s\n",
                static_cast<int>(width), "experiment", "runs", "accuracy",
                "ssim", "psnr");
  std::string s = line;
  for (const ExperimentSummary& e : aggs) {
    std::snprintf(line, sizeof(line), "%-*s %4zu  %-20s %-20s %-20s\n",
                  static_cast<int>(width), e.experiment.c_str(), e.runs,
                  cell(e.accuracy).c_str(), cell(e.ssim).c_str(),
                  cell(e.psnr).c_str());
    s += line;
  }
  return s;
}

inline std::string format_report_csv(
    const std::vector<ExperimentSummary>& aggs) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string s =
      "experiment,runs,accuracy_mean,accuracy_std,ssim_mean,ssim_std,"
      "psnr_mean,psnr_std\n";
  for (const ExperimentSummary& e : aggs) {
    auto pair = [&](const MetricSummary& m) {
      if (m.n == 0) return std::string(",");
      return num(m.mean) + "," + num(m.stddev);
    };
    s += e.experiment + "," + std::to_string(e.runs) + "," +
         pair(e.accuracy) + "," + pair(e.ssim) + "," + pair(e.psnr) + "\n";
  }
  return s;
}

}  // namespace sa
