#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "maskspec/audio.hpp"
#include "maskspec/common.hpp"
#include "maskspec/model.hpp"

namespace maskspec {

/// Plain `key = value` text with '#' comments. Unknown keys are rejected by
/// the typed loaders below so typos surface immediately.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open config file: " + path);
    ConfigFile cfg;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw input_error(path + " line " + std::to_string(line_no) + ": expected key = value");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) {
        throw input_error(path + " line " + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  std::string get_string(const std::string& key, std::optional<std::string> fallback = {}) {
    const auto it = values_.find(key);
    if (it == values_.end()) {
      if (fallback) return *fallback;
      throw input_error("config is missing required key: " + key);
    }
    used_.insert(*it);
    return it->second;
  }

  double get_double(const std::string& key, std::optional<double> fallback = {}) {
    if (!has(key) && fallback) return *fallback;
    const std::string s = get_string(key);
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw input_error("config key " + key + " is not a number: " + s);
    }
  }

  long get_long(const std::string& key, std::optional<long> fallback = {}) {
    if (!has(key) && fallback) return *fallback;
    const std::string s = get_string(key);
    try {
      std::size_t pos = 0;
      const long v = std::stol(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw input_error("config key " + key + " is not an integer: " + s);
    }
  }

  bool get_bool(const std::string& key, std::optional<bool> fallback = {}) {
    if (!has(key) && fallback) return *fallback;
    const std::string s = get_string(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw input_error("config key " + key + " is not a boolean: " + s);
  }

  /// Errors on keys that no loader consumed.
  void reject_unused(const std::string& path) const {
    for (const auto& kv : values_) {
      if (!used_.contains(kv)) {
        throw input_error(path + ": unknown config key: " + kv.first);
      }
    }
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::pair<std::string, std::string>> used_;
};

/// MASKSPEC_SEED in the environment overrides any configured seed.
inline std::uint64_t effective_seed(std::uint64_t configured) {
  if (const char* env = std::getenv("MASKSPEC_SEED")) {
    return static_cast<std::uint64_t>(std::stoull(env));
  }
  return configured;
}

struct PretrainRunConfig {
  std::string manifest;
  ModelScale scale{ModelScale::tiny};
  double alpha{0.75};
  double epochs{80.0};
  double warmup_epochs{40.0};
  long batch_size{8};
  double lr{1e-3};
  double weight_decay{0.05};
  std::uint64_t seed{0};
  std::string checkpoint_dir;
  std::string loss_csv;
  long checkpoint_every{0};  // epochs between checkpoints; 0 = final only
  long max_steps{0};         // 0 = run all epochs
  ChannelMode channel_mode{ChannelMode::mean};

  static PretrainRunConfig load(const std::string& path) {
    ConfigFile cfg = ConfigFile::parse(path);
    PretrainRunConfig c;
    c.manifest = cfg.get_string("manifest");
    c.scale = scale_from_string(cfg.get_string("scale", std::string("tiny")));
    c.alpha = cfg.get_double("alpha", 0.75);
    c.epochs = cfg.get_double("epochs", 80.0);
    c.warmup_epochs = cfg.get_double("warmup_epochs", 40.0);
    c.batch_size = cfg.get_long("batch_size", 8);
    c.lr = cfg.get_double("lr", 1e-3);
    c.weight_decay = cfg.get_double("weight_decay", 0.05);
    c.seed = effective_seed(static_cast<std::uint64_t>(cfg.get_long("seed", 0)));
    c.checkpoint_dir = cfg.get_string("checkpoint_dir", std::string());
    c.loss_csv = cfg.get_string("loss_csv", std::string());
    c.checkpoint_every = cfg.get_long("checkpoint_every", 0);
    c.max_steps = cfg.get_long("max_steps", 0);
    c.channel_mode = channel_mode_from_string(cfg.get_string("channel_mode", std::string("mean")));
    cfg.reject_unused(path);
    return c;
  }
};

enum class MixupMode { off, waveform, spectrogram, alternate };

inline MixupMode mixup_mode_from_string(const std::string& s) {
  if (s == "off") return MixupMode::off;
  if (s == "waveform") return MixupMode::waveform;
  if (s == "spectrogram") return MixupMode::spectrogram;
  if (s == "alternate") return MixupMode::alternate;
  throw input_error("unknown mixup mode: " + s);
}

enum class TaskType { multilabel, multiclass };

inline TaskType task_type_from_string(const std::string& s) {
  if (s == "multilabel") return TaskType::multilabel;
  if (s == "multiclass") return TaskType::multiclass;
  throw input_error("unknown task type: " + s);
}

struct FinetuneRunConfig {
  std::string manifest;
  ModelScale scale{ModelScale::tiny};
  long num_classes{0};
  TaskType task_type{TaskType::multiclass};
  double epochs{100.0};
  double warmup_epochs{5.0};
  long batch_size{8};
  double lr{1e-4};
  double weight_decay{0.05};
  double layer_decay{0.75};
  double mixup_alpha{0.3};
  MixupMode mixup_mode{MixupMode::alternate};
  bool roll_augment{true};
  std::uint64_t seed{0};
  std::string checkpoint_dir;
  std::string report_json;
  std::string report_csv;
  double early_stop_accuracy{2.0};  // > 1 disables early stopping
  ChannelMode channel_mode{ChannelMode::mean};

  static FinetuneRunConfig load(const std::string& path) {
    ConfigFile cfg = ConfigFile::parse(path);
    FinetuneRunConfig c;
    c.manifest = cfg.get_string("manifest");
    c.scale = scale_from_string(cfg.get_string("scale", std::string("tiny")));
    c.num_classes = cfg.get_long("num_classes");
    c.task_type = task_type_from_string(cfg.get_string("task_type", std::string("multiclass")));
    c.epochs = cfg.get_double("epochs", 100.0);
    c.warmup_epochs = cfg.get_double("warmup_epochs", 5.0);
    c.batch_size = cfg.get_long("batch_size", 8);
    c.lr = cfg.get_double("lr", 1e-4);
    c.weight_decay = cfg.get_double("weight_decay", 0.05);
    c.layer_decay = cfg.get_double("layer_decay", 0.75);
    c.mixup_alpha = cfg.get_double("mixup_alpha", 0.3);
    c.mixup_mode = mixup_mode_from_string(cfg.get_string("mixup_mode", std::string("alternate")));
    c.roll_augment = cfg.get_bool("roll_augment", true);
    c.seed = effective_seed(static_cast<std::uint64_t>(cfg.get_long("seed", 0)));
    c.checkpoint_dir = cfg.get_string("checkpoint_dir", std::string());
    c.report_json = cfg.get_string("report_json", std::string());
    c.report_csv = cfg.get_string("report_csv", std::string());
    c.early_stop_accuracy = cfg.get_double("early_stop_accuracy", 2.0);
    c.channel_mode = channel_mode_from_string(cfg.get_string("channel_mode", std::string("mean")));
    if (c.layer_decay <= 0.0 || c.layer_decay > 1.0) {
      throw input_error("layer_decay must lie in (0, 1]");
    }
    if (c.mixup_alpha < 0.0) throw input_error("mixup_alpha must be non-negative");
    cfg.reject_unused(path);
    return c;
  }
};

}  // namespace maskspec
