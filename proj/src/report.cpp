#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "lindit/harness.hpp"

namespace lindit {

using nlohmann::json;

namespace {

std::string cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  return v.dump();
}

bool scalar(const json& v) { return v.is_primitive(); }

// One row per seed with every scalar field; nested {success, trials} objects
// contribute their success.
fs::path write_seed_table(const fs::path& dir, const json& per_seed) {
  std::vector<std::string> cols;
  std::vector<std::vector<std::pair<std::string, std::string>>> rows;
  for (const auto& s : per_seed) {
    std::vector<std::pair<std::string, std::string>> row;
    for (const auto& [k, v] : s.items()) {
      if (scalar(v)) {
        row.emplace_back(k, cell(v));
      } else if (v.is_object() && v.contains("success") && v["success"].is_number()) {
        row.emplace_back(k, cell(v["success"]));
      } else {
        continue;
      }
      if (std::find(cols.begin(), cols.end(), row.back().first) == cols.end()) cols.push_back(row.back().first);
    }
    rows.push_back(std::move(row));
  }
  const fs::path path = dir / "per_seed.csv";
  std::ofstream out(path);
  if (!out) throw ConfigError("report: cannot write " + path.string());
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      auto it = std::find_if(row.begin(), row.end(), [&](const auto& p) { return p.first == cols[i]; });
      out << (i ? "," : "") << (it == row.end() ? "" : it->second);
    }
    out << "\n";
  }
  return path;
}

fs::path write_metrics_csv(const fs::path& jsonl) {
  const auto rows = read_metrics(jsonl);
  const fs::path path = jsonl.parent_path() / "metrics.csv";
  std::ofstream out(path);
  if (!out) throw ConfigError("report: cannot write " + path.string());
  out.precision(10);
  out << "step,loss,lr,wall,eval_success\n";
  for (const auto& r : rows) {
    out << r.step << "," << r.loss << "," << r.lr << "," << r.wall << ",";
    if (r.eval_success) out << *r.eval_success;
    out << "\n";
  }
  return path;
}

}  // namespace

ReportSummary report(const fs::path& run_dir) {
  ReportSummary s;
  if (!fs::is_directory(run_dir)) throw ConfigError("report: no such directory " + run_dir.string());
  std::vector<fs::path> results, logs;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (!e.is_regular_file()) continue;
    if (e.path().filename() == "result.json") results.push_back(e.path());
    if (e.path().filename() == "metrics.jsonl") logs.push_back(e.path());
  }
  std::sort(results.begin(), results.end());
  std::sort(logs.begin(), logs.end());

  std::ostringstream text;
  std::set<std::string> seen;
  for (const auto& path : results) {
    const json r = read_json(path);
    const std::string name = r.value("experiment", std::string("unknown"));
    seen.insert(name);
    s.found.push_back(fs::relative(path, run_dir).string());
    text << "[" << name << "] " << fs::relative(path.parent_path(), run_dir).string() << "\n";
    for (const auto& [k, v] : r.items()) {
      if (scalar(v) && k != "experiment") text << "  " << k << " = " << cell(v) << "\n";
    }
    if (r.contains("per_seed") && r["per_seed"].is_array()) {
      for (const auto& seed : r["per_seed"]) {
        text << "  seed " << cell(seed.value("seed", json())) << ":";
        for (const auto& [k, v] : seed.items()) {
          if (k != "seed" && (v.is_boolean() || v.is_number())) text << " " << k << "=" << cell(v);
        }
        text << "\n";
      }
      s.written.push_back(write_seed_table(path.parent_path(), r["per_seed"]));
    }
  }
  for (const auto& path : logs) {
    const auto rows = read_metrics(path);
    s.found.push_back(fs::relative(path, run_dir).string());
    text << "[train] " << fs::relative(path.parent_path(), run_dir).string() << ": " << rows.size() << " steps";
    if (!rows.empty()) text << ", final loss " << rows.back().loss;
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
      if (it->eval_success) {
        text << ", eval success " << *it->eval_success << " at step " << it->step;
        break;
      }
    }
    text << "\n";
    s.written.push_back(write_metrics_csv(path));
  }
  for (const auto& name : kExperimentNames) {
    if (!seen.count(name)) s.absent.push_back(name);
  }
  if (s.found.empty()) {
    text << "nothing to report under " << run_dir.string() << "\n";
  } else if (!s.absent.empty()) {
    text << "no results for:";
    for (const auto& a : s.absent) text << " " << a;
    text << "\n";
  }
  s.text = text.str();
  return s;
}

}  // namespace lindit
