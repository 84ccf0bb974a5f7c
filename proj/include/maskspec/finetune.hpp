#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskspec/audio.hpp"
#include "maskspec/common.hpp"
#include "maskspec/config.hpp"
#include "maskspec/manifest.hpp"
#include "maskspec/metrics.hpp"
#include "maskspec/model.hpp"
#include "maskspec/optim.hpp"
#include "maskspec/patch.hpp"
#include "maskspec/pretrain.hpp"
#include "maskspec/rng.hpp"
#include "maskspec/tensor.hpp"

namespace maskspec {

/// Convex combination of two example/label pairs.
template <typename T>
std::vector<T> mixup(const std::vector<T>& a, const std::vector<T>& b, double lambda) {
  if (a.size() != b.size()) throw contract_error("mixup: size mismatch");
  if (lambda < 0.0 || lambda > 1.0) throw contract_error("mixup: lambda must lie in [0, 1]");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = static_cast<T>(lambda * static_cast<double>(a[i]) +
                            (1.0 - lambda) * static_cast<double>(b[i]));
  }
  return out;
}

template <typename T>
Matrix<T> mixup(const Matrix<T>& a, const Matrix<T>& b, double lambda) {
  if (!a.same_shape(b)) throw contract_error("mixup: shape mismatch");
  return Matrix<T>(a.rows, a.cols, mixup(a.data, b.data, lambda));
}

/// Circular shift over time; negative shifts and shifts past the length
/// wrap around.
template <typename T>
std::vector<T> time_roll(const std::vector<T>& x, long shift) {
  if (x.empty()) return x;
  const long n = static_cast<long>(x.size());
  long s = shift % n;
  if (s < 0) s += n;
  std::vector<T> out(x.size());
  for (long i = 0; i < n; ++i) out[(i + s) % n] = x[i];
  return out;
}

struct FinetuneOptions {
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
  long patch_size{kPatchSize};
  ChannelMode channel_mode{ChannelMode::mean};
  double early_stop_accuracy{2.0};  // > 1 never triggers
};

struct EvalReport {
  long num_clips{0};
  double accuracy{std::numeric_limits<double>::quiet_NaN()};
  double map{std::numeric_limits<double>::quiet_NaN()};
  std::vector<double> per_class_ap;
  std::vector<long> skipped_classes;
  Matrix<long> confusion;  // multiclass only, rows = true class

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["num_clips"] = num_clips;
    if (std::isfinite(accuracy)) j["accuracy"] = accuracy;
    if (std::isfinite(map)) j["mAP"] = map;
    if (!per_class_ap.empty()) {
      nlohmann::json ap = nlohmann::json::array();
      for (const double v : per_class_ap) {
        if (std::isfinite(v)) ap.push_back(v); else ap.push_back(nullptr);
      }
      j["per_class_ap"] = ap;
      j["skipped_classes"] = skipped_classes;
    }
    if (confusion.rows > 0) {
      nlohmann::json rows = nlohmann::json::array();
      for (long r = 0; r < confusion.rows; ++r) {
        rows.push_back(std::vector<long>(confusion.row(r), confusion.row(r) + confusion.cols));
      }
      j["confusion"] = rows;
    }
    return j;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write eval CSV: " + path);
    out << "metric,class,value\n";
    if (std::isfinite(accuracy)) out << "accuracy,," << format_value(accuracy) << '\n';
    if (std::isfinite(map)) out << "mAP,," << format_value(map) << '\n';
    for (std::size_t c = 0; c < per_class_ap.size(); ++c) {
      if (std::isfinite(per_class_ap[c])) {
        out << "ap," << c << ',' << format_value(per_class_ap[c]) << '\n';
      }
    }
    for (long r = 0; r < confusion.rows; ++r) {
      for (long c = 0; c < confusion.cols; ++c) {
        out << "confusion_" << r << '_' << c << ",," << confusion(r, c) << '\n';
      }
    }
  }
};

namespace detail {

template <typename T>
std::vector<T> label_vector(const ManifestRecord& r, long num_classes) {
  std::vector<T> y(num_classes, T(0));
  for (const long l : r.labels) y[l] = T(1);
  return y;
}

/// Patch pixels with encoder positions added, ready for patch_embed.
template <typename T>
Matrix<T> prepare_tokens(const Matrix<T>& spectrogram, long patch_size, PosCache<T>& positions) {
  PatchGrid<T> grid = patchify(spectrogram, patch_size);
  const Matrix<T>& pe = positions.get(grid.n(), grid.patches.cols);
  Matrix<T> tagged = grid.patches;
  for (long i = 0; i < tagged.size(); ++i) tagged.data[i] += pe.data[i];
  return tagged;
}

template <typename T>
Tensor<T> clip_logits(const Matrix<T>& spectrogram, const ModelParams<T>& model, long patch_size,
                      PosCache<T>& positions) {
  const Matrix<T> tokens = prepare_tokens(spectrogram, patch_size, positions);
  const Tensor<T> embedded = patch_embed(Tensor<T>::constant(tokens), model);
  return classifier_forward(encoder_forward(embedded, model), model);
}

}  // namespace detail

/// Logit rows for every record, evaluated without augmentation.
template <typename T>
Matrix<double> predict_logits(const ModelParams<T>& model, const std::vector<ManifestRecord>& records,
                              const FinetuneOptions& opt) {
  detail::PosCache<T> positions;
  Matrix<double> logits(static_cast<long>(records.size()), model.num_classes);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Spectrogram spec = compute_spectrogram(records[i].path, opt.channel_mode);
    const Tensor<T> z =
        detail::clip_logits(spec.values.template cast<T>(), model, opt.patch_size, positions);
    for (long c = 0; c < model.num_classes; ++c) {
      logits(static_cast<long>(i), c) = static_cast<double>(z.values()[c]);
    }
  }
  return logits;
}

inline EvalReport report_from_logits(const Matrix<double>& logits,
                                     const std::vector<ManifestRecord>& records, TaskType task,
                                     long num_classes) {
  EvalReport report;
  report.num_clips = logits.rows;
  if (task == TaskType::multiclass) {
    std::vector<long> preds, truth;
    report.confusion = Matrix<long>(num_classes, num_classes);
    for (long i = 0; i < logits.rows; ++i) {
      long arg = 0;
      for (long c = 1; c < num_classes; ++c) {
        if (logits(i, c) > logits(i, arg)) arg = c;
      }
      preds.push_back(arg);
      if (records[i].labels.empty()) throw input_error("record without label: " + records[i].path);
      truth.push_back(records[i].labels[0]);
      report.confusion(truth.back(), arg) += 1;
    }
    report.accuracy = accuracy(preds, truth);
  } else {
    EvalBatch batch;
    batch.scores = logits;
    batch.labels = Matrix<int>(logits.rows, num_classes);
    for (long i = 0; i < logits.rows; ++i) {
      for (const long l : records[i].labels) batch.labels(i, l) = 1;
    }
    const MeanApResult res = mean_ap(batch);
    report.map = res.map;
    report.per_class_ap = res.per_class_ap;
    report.skipped_classes = res.skipped_classes;
  }
  return report;
}

template <typename T>
EvalReport evaluate(const ModelParams<T>& model, const std::vector<ManifestRecord>& records,
                    const FinetuneOptions& opt) {
  if (records.empty()) throw input_error("evaluate: no records");
  return report_from_logits(predict_logits(model, records, opt), records, opt.task_type,
                            model.num_classes);
}

struct FinetuneResult {
  EvalReport final_report;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // multiclass eval per epoch (if eval set given)
  long epochs_run{0};
};

/// Supervised training of encoder plus head. The decoder never exists in
/// this graph. Per-layer learning rates decay geometrically from the head
/// (base rate) back to the patch embedding.
template <typename T>
FinetuneResult finetune_run(ModelParams<T>& model, const std::vector<ManifestRecord>& train_records,
                            const std::vector<ManifestRecord>& eval_records,
                            const FinetuneOptions& opt) {
  if (model.with_decoder) {
    throw contract_error("finetune_run: model must be encoder-only (no decoder parameters)");
  }
  if (model.num_classes != opt.num_classes || opt.num_classes <= 0) {
    throw contract_error("finetune_run: model head does not match num_classes");
  }
  if (train_records.empty()) throw input_error("finetune_run: empty training set");
  validate_labels(train_records, opt.num_classes);
  validate_labels(eval_records, opt.num_classes);

  AdamW<T> optimizer(model, AdamWConfig{0.9, 0.95, opt.weight_decay, 1e-8});
  // Layer assignment: patch embedding at 0, block b at b + 1, final norm and
  // head at depth + 1.
  const long num_layers = model.encoder_cfg.depth + 1;
  for (const auto& p : model.params) {
    long layer = num_layers;
    if (p.name.starts_with("patch_embed.")) {
      layer = 0;
    } else if (p.name.starts_with("encoder.block")) {
      layer = 1 + std::stol(p.name.substr(std::string("encoder.block").size()));
    }
    optimizer.set_lr_scale(p.name, layerwise_lr(1.0, opt.layer_decay, layer, num_layers));
  }

  ScheduleConfig schedule{opt.warmup_epochs, opt.epochs, opt.lr, 0.0};
  Rng order_rng(derive_seed(opt.seed, 11));
  Rng aug_rng(derive_seed(opt.seed, 12));
  detail::PosCache<T> positions;
  const MelFilterbank fb = build_mel_filterbank();

  // Standardized waveforms are cached; augmentation happens per step.
  std::vector<std::vector<float>> waveforms;
  std::vector<std::vector<T>> labels;
  for (const auto& r : train_records) {
    waveforms.push_back(standardize(wav_read(r.path), opt.channel_mode).samples);
    labels.push_back(detail::label_vector<T>(r, opt.num_classes));
  }

  const long n = static_cast<long>(train_records.size());
  const long steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const long total_epochs = static_cast<long>(std::ceil(opt.epochs));

  FinetuneResult result;
  long global_step = 0;
  for (long epoch = 0; epoch < total_epochs; ++epoch) {
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order.begin(), order.end());

    double epoch_loss = 0.0;
    long batches = 0;
    for (long begin = 0; begin < n; begin += opt.batch_size) {
      const long end = std::min<long>(begin + opt.batch_size, n);
      const double epoch_pos = epoch + static_cast<double>(batches + 1) / steps_per_epoch;
      const double lr = lr_at(std::min(epoch_pos, opt.epochs), schedule);

      double batch_loss = 0.0;
      for (long i = begin; i < end; ++i) {
        const long idx = order[i];
        std::vector<float> wave = waveforms[idx];
        std::vector<T> label = labels[idx];

        if (opt.roll_augment) {
          wave = time_roll(wave, aug_rng.uniform_int(0, static_cast<long>(wave.size()) - 1));
        }

        bool mix_wave = false, mix_spec = false;
        long partner = idx;
        double lambda = 1.0;
        if (opt.mixup_mode != MixupMode::off && opt.mixup_alpha > 0.0 && n > 1) {
          mix_wave = opt.mixup_mode == MixupMode::waveform ||
                     (opt.mixup_mode == MixupMode::alternate && global_step % 2 == 0);
          mix_spec = opt.mixup_mode == MixupMode::spectrogram ||
                     (opt.mixup_mode == MixupMode::alternate && global_step % 2 == 1);
          partner = order[(i - begin + 1) % (end - begin) + begin];
          lambda = aug_rng.beta(opt.mixup_alpha, opt.mixup_alpha);
          label = mixup(label, labels[partner], lambda);
        }
        if (mix_wave && partner != idx) wave = mixup(wave, waveforms[partner], lambda);

        WaveformClip clip;
        clip.samples = std::move(wave);
        Matrix<T> spec = logmel(stft_power(clip), fb).values.template cast<T>();
        if (mix_spec && partner != idx) {
          WaveformClip pclip;
          pclip.samples = waveforms[partner];
          const Matrix<T> pspec = logmel(stft_power(pclip), fb).values.template cast<T>();
          spec = mixup(spec, pspec, lambda);
        }

        const Tensor<T> logits = detail::clip_logits(spec, model, opt.patch_size, positions);
        Matrix<T> target(1, opt.num_classes, label);
        Tensor<T> loss = opt.task_type == TaskType::multiclass
                             ? softmax_cross_entropy(logits, target)
                             : bce_with_logits(logits, target);
        if (!std::isfinite(static_cast<double>(loss.item()))) {
          throw numeric_error("finetuning loss became non-finite");
        }
        batch_loss += static_cast<double>(loss.item());
        backward(scale(loss, static_cast<T>(1.0 / static_cast<double>(end - begin))));
      }
      optimizer.step(lr);
      epoch_loss += batch_loss / static_cast<double>(end - begin);
      ++batches;
      ++global_step;
    }
    result.epoch_loss.push_back(epoch_loss / batches);
    result.epochs_run = epoch + 1;

    if (!eval_records.empty()) {
      const EvalReport rep = evaluate(model, eval_records, opt);
      if (opt.task_type == TaskType::multiclass) result.epoch_accuracy.push_back(rep.accuracy);
      if (opt.task_type == TaskType::multiclass && rep.accuracy >= opt.early_stop_accuracy) {
        result.final_report = rep;
        return result;
      }
    }
  }
  if (!eval_records.empty()) {
    result.final_report = evaluate(model, eval_records, opt);
  }
  return result;
}

/// Evaluates a stereo manifest under left, right, and mean channel views and
/// averages the three logit sets before the argmax. Mono files fall back to
/// a single view with a warning.
template <typename T>
EvalReport channel_ensemble_eval(const ModelParams<T>& model,
                                 const std::vector<ManifestRecord>& records,
                                 const FinetuneOptions& opt) {
  if (records.empty()) throw input_error("channel_ensemble_eval: no records");
  detail::PosCache<T> positions;
  Matrix<double> logits(static_cast<long>(records.size()), model.num_classes);
  bool warned = false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const AudioFile audio = wav_read(records[i].path);
    std::vector<ChannelMode> views{ChannelMode::left, ChannelMode::right, ChannelMode::mean};
    if (audio.channels.size() < 2) {
      if (!warned) {
        std::cerr << "channel_ensemble_eval: mono input, falling back to a single view\n";
        warned = true;
      }
      views = {ChannelMode::mean};
    }
    const MelFilterbank fb = build_mel_filterbank();
    for (const ChannelMode mode : views) {
      const WaveformClip clip = standardize(audio, mode);
      const Matrix<T> spec = logmel(stft_power(clip), fb).values.template cast<T>();
      const Tensor<T> z = detail::clip_logits(spec, model, opt.patch_size, positions);
      for (long c = 0; c < model.num_classes; ++c) {
        logits(static_cast<long>(i), c) += static_cast<double>(z.values()[c]) / views.size();
      }
    }
  }
  return report_from_logits(logits, records, opt.task_type, model.num_classes);
}

}  // namespace maskspec
