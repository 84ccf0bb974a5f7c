#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "maskspec/common.hpp"
#include "maskspec/model.hpp"
#include "maskspec/tensor.hpp"

namespace maskspec {

/// Linear warmup to the peak rate followed by a half-cosine decay to the
/// floor. Epoch positions are continuous, so fractional epochs are fine.
struct ScheduleConfig {
  double warmup_epochs{40.0};
  double total_epochs{80.0};
  double peak_lr{1e-3};
  double floor_lr{0.0};
};

inline double lr_at(double epoch_fraction, const ScheduleConfig& cfg) {
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs >= cfg.total_epochs) {
    throw contract_error("lr_at: warmup must be shorter than the total schedule");
  }
  if (epoch_fraction < 0 || epoch_fraction > cfg.total_epochs) {
    throw contract_error("lr_at: epoch position outside the schedule");
  }
  if (epoch_fraction < cfg.warmup_epochs) {
    return cfg.peak_lr * (epoch_fraction / cfg.warmup_epochs);
  }
  const double t = (epoch_fraction - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs);
  return cfg.floor_lr +
         (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Geometric per-layer rate: the head (layer_index == num_layers) trains at
/// base_lr, layers toward the input are scaled down by decay per step.
inline double layerwise_lr(double base_lr, double decay, long layer_index, long num_layers) {
  if (layer_index < 0 || layer_index > num_layers) {
    throw contract_error("layerwise_lr: layer index out of range");
  }
  return base_lr * std::pow(decay, static_cast<double>(num_layers - layer_index));
}

struct AdamWConfig {
  double beta1{0.9};
  double beta2{0.95};
  double weight_decay{0.05};
  double eps{1e-8};
};

/// Decoupled-weight-decay Adam over a model's parameter list. Moments are
/// kept per parameter; step() consumes and zeroes the accumulated gradients.
template <typename T>
class AdamW {
 public:
  AdamW(ModelParams<T>& model, AdamWConfig cfg = {}) : model_(&model), cfg_(cfg) {
    slots_.resize(model.params.size());
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      slots_[i].m.assign(model.params[i].tensor.values().size(), T(0));
      slots_[i].v.assign(model.params[i].tensor.values().size(), T(0));
      slots_[i].lr_scale = 1.0;
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  long step_count() const { return step_; }

  void set_lr_scale(const std::string& name, double scale) {
    slots_[param_index(name)].lr_scale = scale;
  }

  double lr_scale(const std::string& name) const { return slots_[param_index(name)].lr_scale; }

  /// One update with the given base learning rate. The decay term
  /// w -= lr * wd * w is applied separately from the moment update.
  void step(double lr) {
    ++step_;
    const T bias1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    const T bias2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      auto& p = model_->params[i].tensor;
      auto& slot = slots_[i];
      const long n = p.size();
      const T lr_eff = static_cast<T>(lr * slot.lr_scale);
      const T decay = static_cast<T>(lr * slot.lr_scale * cfg_.weight_decay);
      T* w = p.values_mut().data();
      T* g = p.grad_mut().data();
      T* m = slot.m.data();
      T* v = slot.v.data();
      for (long j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        w[j] -= decay * w[j];
        w[j] -= lr_eff * ((m[j] / bias1) / (std::sqrt(v[j] / bias2) + eps));
        g[j] = T(0);
      }
    }
  }

  /// Moment tensors for persistence, named after their parameters.
  std::vector<std::pair<std::string, const std::vector<T>*>> moment_tensors() const {
    std::vector<std::pair<std::string, const std::vector<T>*>> out;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      out.push_back({"optim.m." + model_->params[i].name, &slots_[i].m});
      out.push_back({"optim.v." + model_->params[i].name, &slots_[i].v});
    }
    return out;
  }

  void restore_moments(const std::string& param_name, const std::vector<T>& m,
                       const std::vector<T>& v, long step) {
    auto& slot = slots_[param_index(param_name)];
    if (m.size() != slot.m.size() || v.size() != slot.v.size()) {
      throw contract_error("restore_moments: moment size mismatch for " + param_name);
    }
    slot.m = m;
    slot.v = v;
    step_ = step;
  }

 private:
  struct Slot {
    std::vector<T> m, v;
    double lr_scale{1.0};
  };

  std::size_t param_index(const std::string& name) const {
    const auto it = model_->index.find(name);
    if (it == model_->index.end()) throw contract_error("unknown parameter: " + name);
    return it->second;
  }

  ModelParams<T>* model_;
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  long step_{0};
};

}  // namespace maskspec
