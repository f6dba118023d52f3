#pragma once

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kvembed/eval_harness.hpp"
#include "kvembed/id_select.hpp"
#include "kvembed/synthetic.hpp"

namespace kvembed {

using Json = nlohmann::json;

namespace io {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline Json parse_record(const std::string& path, std::size_t line_no,
                         const std::string& line) {
  try {
    return Json::parse(line);
  } catch (const std::exception& e) {
    throw Error(path + ": record " + std::to_string(line_no) +
                " is not valid JSON: " + e.what());
  }
}

template <typename T>
T field(const Json& rec, const char* key, const std::string& path,
        std::size_t line_no) {
  if (!rec.contains(key)) {
    throw Error(path + ": record " + std::to_string(line_no) +
                " misses field '" + key + "'");
  }
  try {
    return rec.at(key).get<T>();
  } catch (const std::exception& e) {
    throw Error(path + ": record " + std::to_string(line_no) + " field '" +
                key + "': " + e.what());
  }
}

struct TextRecord {
  std::string id;
  std::string text;
};

// Text corpus: JSONL {id?, text} when the path ends in .jsonl, otherwise one
// text per line.
inline std::vector<TextRecord> read_text_corpus(const std::string& path) {
  const bool jsonl = path.size() >= 6 &&
                     path.compare(path.size() - 6, 6, ".jsonl") == 0;
  std::vector<TextRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    TextRecord rec;
    if (jsonl) {
      const Json j = parse_record(path, i + 1, lines[i]);
      rec.text = field<std::string>(j, "text", path, i + 1);
      rec.id = j.value("id", std::to_string(out.size()));
    } else {
      rec.text = lines[i];
      rec.id = std::to_string(out.size());
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw Error(path + ": no records");
  return out;
}

inline std::vector<STSRecord> read_sts(const std::string& path) {
  std::vector<STSRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const Json j = parse_record(path, i + 1, lines[i]);
    STSRecord rec;
    rec.text_a = field<std::string>(j, "text_a", path, i + 1);
    rec.text_b = field<std::string>(j, "text_b", path, i + 1);
    rec.gold = field<double>(j, "score", path, i + 1);
    if (!std::isfinite(rec.gold)) {
      throw Error(path + ": record " + std::to_string(i + 1) +
                  " has non-finite score");
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw Error(path + ": no records");
  return out;
}

inline std::map<std::string, std::string> read_id_text(const std::string& path) {
  std::map<std::string, std::string> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const Json j = parse_record(path, i + 1, lines[i]);
    const auto id = field<std::string>(j, "id", path, i + 1);
    if (out.count(id)) {
      throw Error(path + ": record " + std::to_string(i + 1) +
                  " repeats id '" + id + "'");
    }
    out[id] = field<std::string>(j, "text", path, i + 1);
  }
  if (out.empty()) throw Error(path + ": no records");
  return out;
}

// qrels TSV: query_id <TAB> doc_id <TAB> grade
inline std::map<std::string, std::map<std::string, int>> read_qrels(
    const std::string& path) {
  std::map<std::string, std::map<std::string, int>> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::istringstream ss(lines[i]);
    std::string qid, did, grade_str;
    if (!std::getline(ss, qid, '\t') || !std::getline(ss, did, '\t') ||
        !std::getline(ss, grade_str, '\t')) {
      throw Error(path + ": line " + std::to_string(i + 1) +
                  " is not query_id<TAB>doc_id<TAB>grade");
    }
    int grade = 0;
    try {
      grade = std::stoi(grade_str);
    } catch (const std::exception&) {
      throw Error(path + ": line " + std::to_string(i + 1) +
                  " has non-integer grade '" + grade_str + "'");
    }
    if (grade < 0) {
      throw Error(path + ": line " + std::to_string(i + 1) +
                  " has negative grade");
    }
    out[qid][did] = grade;
  }
  return out;
}

// Classification JSONL: {text, label, split} with split in {train, test}.
inline std::vector<LabeledRecord> read_labeled(const std::string& path,
                                               bool require_split) {
  std::vector<LabeledRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const Json j = parse_record(path, i + 1, lines[i]);
    LabeledRecord rec;
    rec.text = field<std::string>(j, "text", path, i + 1);
    rec.label = field<int>(j, "label", path, i + 1);
    if (j.contains("split")) {
      const auto split = field<std::string>(j, "split", path, i + 1);
      if (split != "train" && split != "test") {
        throw Error(path + ": record " + std::to_string(i + 1) +
                    " has split '" + split + "', expected train|test");
      }
      rec.is_train = split == "train";
    } else if (require_split) {
      throw Error(path + ": record " + std::to_string(i + 1) +
                  " misses field 'split'");
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw Error(path + ": no records");
  return out;
}

inline Json embedding_to_json(const Embedding& e) {
  Json j;
  j["id"] = e.id;
  j["vector"] = e.vector;
  j["strategy"] = to_string(e.strategy);
  j["pooling"] = to_string(e.pooling);
  j["layers"] = e.layers;
  j["bias"] = e.bias;
  return j;
}

inline Embedding embedding_from_json(const Json& j, const std::string& path,
                                     std::size_t line_no) {
  Embedding e;
  e.id = field<std::string>(j, "id", path, line_no);
  e.vector = field<RealVector>(j, "vector", path, line_no);
  const auto strategy = field<std::string>(j, "strategy", path, line_no);
  if (strategy == "kv_embedding") e.strategy = Strategy::kv_embedding;
  else if (strategy == "last_token") e.strategy = Strategy::last_token;
  else if (strategy == "mean") e.strategy = Strategy::mean;
  else if (strategy == "prompteol") e.strategy = Strategy::prompteol;
  else if (strategy == "echo") e.strategy = Strategy::echo;
  else {
    throw Error(path + ": record " + std::to_string(line_no) +
                " has unknown strategy '" + strategy + "'");
  }
  const auto pooling = field<std::string>(j, "pooling", path, line_no);
  if (pooling == "last") e.pooling = Pooling::last;
  else if (pooling == "mean") e.pooling = Pooling::mean;
  else if (pooling == "hybrid") e.pooling = Pooling::hybrid;
  else {
    throw Error(path + ": record " + std::to_string(line_no) +
                " has unknown pooling '" + pooling + "'");
  }
  e.layers = j.value("layers", std::vector<std::size_t>{});
  e.bias = j.value("bias", 0.0);
  return e;
}

inline std::vector<Embedding> read_embeddings(const std::string& path) {
  std::vector<Embedding> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    out.push_back(
        embedding_from_json(parse_record(path, i + 1, lines[i]), path, i + 1));
  }
  if (out.empty()) throw Error(path + ": no records");
  return out;
}

inline Json dump_to_json(const AttentionDump& d) {
  Json j;
  j["layer"] = d.layer;
  j["head"] = d.head;
  j["rerouted"] = d.rerouted;
  j["rows"] = d.weights.rows;
  j["cols"] = d.weights.cols;
  j["weights"] = d.weights.data;  // row-major
  return j;
}

inline Json selection_to_json(const LayerSelection& sel) {
  Json j;
  j["layers"] = sel.layers;
  j["strategy"] =
      sel.strategy == SelectionStrategy::window ? "window" : "multimin";
  if (sel.l_star) j["l_star"] = *sel.l_star;
  return j;
}

inline Json trajectory_report(const IDTrajectoryDetail& detail) {
  Json j;
  j["values"] = detail.trajectory.values;
  j["corpus_size"] = detail.trajectory.corpus_size;
  j["retained"] = detail.retained;
  j["duplicates_removed"] = detail.duplicates_removed;
  j["selection_window"] =
      selection_to_json(select_layers_window(detail.trajectory));
  j["selection_multimin"] =
      selection_to_json(select_layers_multimin(detail.trajectory));
  return j;
}

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

inline Json metric_report_to_json(const MetricReport& r) {
  Json j;
  if (r.alignment) {
    j["alignment"] = *r.alignment;
    j["alignment_4dp"] = round4(*r.alignment);
  }
  j["uniformity"] = r.uniformity;
  j["uniformity_4dp"] = round4(r.uniformity);
  j["alpha"] = r.alpha;
  j["t"] = r.t;
  j["n_points"] = r.n_points;
  j["n_pairs"] = r.n_pairs;
  return j;
}

inline Json eval_report_to_json(const EvalReport& r) {
  Json j;
  j["task"] = r.task;
  j["metric"] = r.metric;
  if (r.value) j["value"] = *r.value;
  j["degenerate"] = r.degenerate;
  j["per_strategy"] = r.per_strategy;
  j["config"] = {{"layers", r.layers},
                 {"bias", r.bias},
                 {"pooling", r.pooling}};
  j["skipped_queries"] = r.skipped_queries;
  return j;
}

}  // namespace io
}  // namespace kvembed
