#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskspec/audio.hpp"
#include "maskspec/checkpoint.hpp"
#include "maskspec/common.hpp"
#include "maskspec/dataset.hpp"
#include "maskspec/model.hpp"
#include "maskspec/optim.hpp"
#include "maskspec/patch.hpp"
#include "maskspec/rng.hpp"
#include "maskspec/tensor.hpp"

namespace maskspec {

/// Reconstruction loss over the masked rows. `sum` is the plain sum of
/// squared errors; the per-element `mean` (sum / (N * patch_dim)) is the
/// value the optimizer minimizes, so the loss scale does not depend on how
/// many patches were masked.
template <typename T>
struct MaskedLoss {
  Tensor<T> mean;
  double sum{0.0};
  double mean_value{0.0};
};

template <typename T>
MaskedLoss<T> mse_masked_loss(const Matrix<T>& targets, const Tensor<T>& recon) {
  if (recon.rows() != targets.rows || recon.cols() != targets.cols) {
    throw contract_error("mse_masked_loss: target and reconstruction shapes differ");
  }
  if (targets.rows < 1) throw contract_error("mse_masked_loss: need at least one masked row");
  const Tensor<T> diff = sub(recon, Tensor<T>::constant(targets));
  const Tensor<T> sq = square(diff);
  MaskedLoss<T> out;
  out.mean = mean(sq);
  double total = 0.0;
  for (const T v : sq.values()) total += static_cast<double>(v);
  out.sum = total;
  out.mean_value = static_cast<double>(out.mean.item());
  return out;
}

struct StepRecord {
  long step{0};
  double epoch{0.0};
  double lr{0.0};
  double loss_mean{0.0};
  double loss_sum{0.0};
};

struct PretrainOptions {
  double alpha{0.75};
  double epochs{80.0};
  double warmup_epochs{40.0};
  long batch_size{8};
  double lr{1e-3};
  double weight_decay{0.05};
  std::uint64_t seed{0};
  long max_steps{0};  // 0 = run all epochs
  long patch_size{kPatchSize};
  std::string loss_csv;
  std::string checkpoint_dir;
  long checkpoint_every{0};
  std::function<void(const StepRecord&)> on_step;
};

namespace detail {

template <typename T>
class PosCache {
 public:
  const Matrix<T>& get(long n, long dim) {
    const auto key = std::make_pair(n, dim);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, sinusoidal_pos_encoding<T>(n, dim)).first;
    return it->second;
  }

 private:
  std::map<std::pair<long, long>, Matrix<T>> cache_;
};

inline void write_loss_csv(const std::string& path, const std::vector<StepRecord>& records) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write loss CSV: " + path);
  out << "step,epoch,lr,loss_mean,loss_sum\n";
  for (const auto& r : records) {
    out << r.step << ',' << format_value(r.epoch) << ',' << format_value(r.lr) << ','
        << format_value(r.loss_mean) << ',' << format_value(r.loss_sum) << '\n';
  }
}

}  // namespace detail

/// One clip's contribution to a batch: forward, loss, scaled backward.
/// Returns {mean, sum} of the masked MSE.
template <typename T>
std::pair<double, double> pretrain_clip_step(const Matrix<T>& spectrogram, double alpha,
                                             long patch_size, ModelParams<T>& model, Rng& mask_rng,
                                             detail::PosCache<T>& positions, double grad_scale) {
  PatchGrid<T> grid = patchify(spectrogram, patch_size);
  const MaskPlan plan = random_mask(grid.n(), alpha, mask_rng);

  // Position information is added to the patch pixels before masking; the
  // reconstruction targets stay raw.
  Matrix<T> tagged = grid.patches;
  const Matrix<T>& enc_pos = positions.get(grid.n(), grid.patches.cols);
  for (long i = 0; i < tagged.size(); ++i) tagged.data[i] += enc_pos.data[i];

  const Matrix<T>& dec_pos = positions.get(grid.n(), model.decoder_cfg.emb);
  const MaskedForward<T> fwd = masked_autoencoder_forward(tagged, plan, model, dec_pos);
  const Matrix<T> targets = gather_masked(grid, plan);
  MaskedLoss<T> loss = mse_masked_loss(targets, fwd.masked_reconstruction);
  if (!std::isfinite(loss.mean_value)) {
    throw numeric_error("pretraining loss became non-finite");
  }
  backward(scale(loss.mean, static_cast<T>(grad_scale)));
  return {loss.mean_value, loss.sum};
}

/// Runs the full masked-prediction training loop: shuffle clips each epoch,
/// and for every batch run patchify -> add positions -> mask -> encode the
/// survivors -> project -> scatter mask tokens -> add decoder positions ->
/// decode -> masked MSE -> backward -> optimizer step.
template <typename T>
std::vector<StepRecord> run_pretraining(ModelParams<T>& model, const SpectrogramSource<T>& data,
                                        const PretrainOptions& opt) {
  if (data.count <= 0) throw input_error("run_pretraining: empty dataset");
  if (opt.batch_size <= 0) throw contract_error("run_pretraining: batch size must be positive");

  AdamW<T> optimizer(model, AdamWConfig{0.9, 0.95, opt.weight_decay, 1e-8});
  Rng order_rng(derive_seed(opt.seed, 1));
  Rng mask_rng(derive_seed(opt.seed, 2));
  detail::PosCache<T> positions;
  ScheduleConfig schedule{opt.warmup_epochs, opt.epochs, opt.lr, 0.0};

  const long steps_per_epoch = (data.count + opt.batch_size - 1) / opt.batch_size;
  const long total_epochs = static_cast<long>(std::ceil(opt.epochs));
  std::vector<StepRecord> records;
  long step = 0;
  bool done = false;
  for (long epoch = 0; epoch < total_epochs && !done; ++epoch) {
    std::vector<long> order(data.count);
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order.begin(), order.end());

    for (long b = 0; b < steps_per_epoch && !done; ++b) {
      const long begin = b * opt.batch_size;
      const long end = std::min<long>(begin + opt.batch_size, data.count);
      // The rate is sampled at the end-of-batch position, so the first step
      // already trains at a nonzero warmup rate.
      const double epoch_pos = epoch + static_cast<double>(b + 1) / steps_per_epoch;
      const double lr = lr_at(std::min(epoch_pos, opt.epochs), schedule);

      double batch_mean = 0.0, batch_sum = 0.0;
      for (long i = begin; i < end; ++i) {
        const Matrix<T> spec = data.get(order[i]);
        const auto [m, s] = pretrain_clip_step(spec, opt.alpha, opt.patch_size, model, mask_rng,
                                               positions, 1.0 / static_cast<double>(end - begin));
        batch_mean += m;
        batch_sum += s;
      }
      batch_mean /= static_cast<double>(end - begin);
      optimizer.step(lr);

      ++step;
      StepRecord rec{step, epoch_pos, lr, batch_mean, batch_sum};
      records.push_back(rec);
      if (opt.on_step) opt.on_step(rec);
      if (opt.max_steps > 0 && step >= opt.max_steps) done = true;
      if (epoch_pos >= opt.epochs) done = true;
    }

    if (!opt.checkpoint_dir.empty() && opt.checkpoint_every > 0 &&
        (epoch + 1) % opt.checkpoint_every == 0) {
      std::filesystem::create_directories(opt.checkpoint_dir);
      save_checkpoint(opt.checkpoint_dir + "/epoch" + std::to_string(epoch + 1) + ".msks",
                      model, &optimizer,
                      {{"epoch", epoch + 1}, {"seed", opt.seed}, {"alpha", opt.alpha},
                       {"loss", records.back().loss_mean}});
    }
  }

  if (!opt.checkpoint_dir.empty()) {
    std::filesystem::create_directories(opt.checkpoint_dir);
    save_checkpoint(opt.checkpoint_dir + "/final.msks", model, &optimizer,
                    {{"epoch", total_epochs}, {"seed", opt.seed}, {"alpha", opt.alpha},
                     {"loss", records.empty() ? 0.0 : records.back().loss_mean}});
  }
  if (!opt.loss_csv.empty()) detail::write_loss_csv(opt.loss_csv, records);
  return records;
}

/// One epoch over the data with a caller-owned optimizer; returns the
/// accumulated (summed) per-batch mean loss for the epoch.
template <typename T>
double pretrain_epoch(ModelParams<T>& model, const SpectrogramSource<T>& data,
                      const PretrainOptions& opt, AdamW<T>& optimizer, Rng& order_rng,
                      Rng& mask_rng, double lr) {
  detail::PosCache<T> positions;
  std::vector<long> order(data.count);
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order.begin(), order.end());
  double epoch_loss = 0.0;
  for (long begin = 0; begin < data.count; begin += opt.batch_size) {
    const long end = std::min<long>(begin + opt.batch_size, data.count);
    double batch_mean = 0.0;
    for (long i = begin; i < end; ++i) {
      const Matrix<T> spec = data.get(order[i]);
      batch_mean += pretrain_clip_step(spec, opt.alpha, opt.patch_size, model, mask_rng, positions,
                                       1.0 / static_cast<double>(end - begin))
                        .first;
    }
    optimizer.step(lr);
    epoch_loss += batch_mean / static_cast<double>(end - begin);
  }
  return epoch_loss;
}

struct SweepRow {
  double ratio{0.0};
  double final_loss{0.0};
};

/// Short pretraining run per mask ratio on identical data and seeds; the
/// reported loss is the mean over the last quarter of the steps.
template <typename T>
std::vector<SweepRow> mask_ratio_sweep(const std::function<ModelParams<T>()>& model_factory,
                                       const SpectrogramSource<T>& data,
                                       const std::vector<double>& ratios, long steps,
                                       PretrainOptions opt) {
  if (steps <= 0) throw contract_error("mask_ratio_sweep: need a positive step count");
  for (const double r : ratios) {
    if (r < kMinMaskRatio || r > kMaxMaskRatio) {
      throw contract_error("mask_ratio_sweep: ratio outside [0.05, 0.95]");
    }
  }
  std::vector<SweepRow> rows;
  for (const double ratio : ratios) {
    ModelParams<T> model = model_factory();
    PretrainOptions run = opt;
    run.alpha = ratio;
    run.max_steps = steps;
    run.loss_csv.clear();
    run.checkpoint_dir.clear();
    const std::vector<StepRecord> records = run_pretraining(model, data, run);
    const long tail = std::max<long>(1, steps / 4);
    double acc = 0.0;
    for (long i = static_cast<long>(records.size()) - tail; i < static_cast<long>(records.size()); ++i) {
      acc += records[i].loss_mean;
    }
    rows.push_back({ratio, acc / tail});
  }
  return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write sweep CSV: " + path);
  out << "ratio,final_loss\n";
  for (const auto& r : rows) {
    out << format_value(r.ratio) << ',' << format_value(r.final_loss) << '\n';
  }
}

}  // namespace maskspec
