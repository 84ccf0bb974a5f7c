#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskspec/common.hpp"

namespace maskspec {

/// One dataset clip. Relative paths are resolved against the manifest's
/// directory when the manifest is loaded.
struct ManifestRecord {
  std::string path;
  std::vector<long> labels;
  std::optional<int> fold;
  std::string split{"train"};  // "train" or "eval"
  std::optional<double> sample_weight;
};

/// Loads a line-delimited JSON manifest. Every referenced file must exist.
inline std::vector<ManifestRecord> load_manifest(const std::string& manifest_path,
                                                 bool check_paths = true) {
  std::ifstream in(manifest_path);
  if (!in) throw input_error("cannot open manifest: " + manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

  std::vector<ManifestRecord> records;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw input_error("manifest " + manifest_path + " line " + std::to_string(line_no) +
                        ": " + e.what());
    }
    ManifestRecord r;
    std::filesystem::path p = j.at("path").get<std::string>();
    if (p.is_relative()) p = base / p;
    r.path = p.string();
    if (j.contains("labels")) r.labels = j.at("labels").get<std::vector<long>>();
    if (j.contains("fold")) r.fold = j.at("fold").get<int>();
    if (j.contains("split")) r.split = j.at("split").get<std::string>();
    if (j.contains("sample_weight")) r.sample_weight = j.at("sample_weight").get<double>();
    if (r.split != "train" && r.split != "eval") {
      throw input_error("manifest " + manifest_path + " line " + std::to_string(line_no) +
                        ": split must be train or eval");
    }
    if (check_paths && !std::filesystem::exists(r.path)) {
      throw input_error("manifest " + manifest_path + " line " + std::to_string(line_no) +
                        ": no such file: " + r.path);
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw input_error("manifest is empty: " + manifest_path);
  return records;
}

inline void validate_labels(const std::vector<ManifestRecord>& records, long num_classes) {
  for (const auto& r : records) {
    for (const long l : r.labels) {
      if (l < 0 || l >= num_classes) {
        throw input_error("label index " + std::to_string(l) + " out of range for " +
                          std::to_string(num_classes) + " classes: " + r.path);
      }
    }
  }
}

inline std::vector<ManifestRecord> filter_split(const std::vector<ManifestRecord>& records,
                                                const std::string& split) {
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write manifest: " + path);
  for (const auto& r : records) {
    nlohmann::json j{{"path", r.path}, {"labels", r.labels}, {"split", r.split}};
    if (r.fold) j["fold"] = *r.fold;
    if (r.sample_weight) j["sample_weight"] = *r.sample_weight;
    out << j.dump() << '\n';
  }
}

}  // namespace maskspec
