#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

#include "maskspec/common.hpp"
#include "maskspec/manifest.hpp"

namespace maskspec {

/// Scores and binary labels for a batch of clips, one row per clip.
struct EvalBatch {
  Matrix<double> scores;
  Matrix<int> labels;
};

/// Non-interpolated average precision: the mean, over positive items, of the
/// precision at that item's rank. Ties are broken by stable original order.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw contract_error("average_precision: size mismatch");
  const long n = static_cast<long>(scores.size());
  long positives = 0;
  for (const int l : labels) positives += (l != 0);
  if (positives == 0) throw contract_error("average_precision: no positive labels");

  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](long a, long b) { return scores[a] > scores[b]; });

  double sum = 0.0;
  long hits = 0;
  for (long rank = 1; rank <= n; ++rank) {
    if (labels[order[rank - 1]] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return sum / static_cast<double>(positives);
}

struct MeanApResult {
  double map{0.0};
  std::vector<double> per_class_ap;     // NaN for skipped classes
  std::vector<long> skipped_classes;    // classes with no positive labels
};

/// Unweighted mean of per-class AP over the classes that have at least one
/// positive label; empty classes are skipped and reported.
inline MeanApResult mean_ap(const EvalBatch& batch) {
  if (batch.scores.rows != batch.labels.rows || batch.scores.cols != batch.labels.cols) {
    throw contract_error("mean_ap: scores and labels must have identical shapes");
  }
  const long classes = batch.scores.cols, clips = batch.scores.rows;
  MeanApResult result;
  double total = 0.0;
  long counted = 0;
  for (long c = 0; c < classes; ++c) {
    std::vector<double> s(clips);
    std::vector<int> l(clips);
    bool any = false;
    for (long r = 0; r < clips; ++r) {
      s[r] = batch.scores(r, c);
      l[r] = batch.labels(r, c);
      any = any || (l[r] != 0);
    }
    if (!any) {
      result.per_class_ap.push_back(std::numeric_limits<double>::quiet_NaN());
      result.skipped_classes.push_back(c);
      continue;
    }
    const double ap = average_precision(s, l);
    result.per_class_ap.push_back(ap);
    total += ap;
    ++counted;
  }
  if (counted == 0) throw input_error("mean_ap: no class has a positive label");
  result.map = total / counted;
  return result;
}

inline double accuracy(const std::vector<long>& preds, const std::vector<long>& labels) {
  if (preds.size() != labels.size()) throw contract_error("accuracy: size mismatch");
  if (preds.empty()) throw input_error("accuracy: empty input");
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += (preds[i] == labels[i]);
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

struct KfoldResult {
  std::vector<double> per_fold;
  double mean{0.0};
};

/// Runs the callback once per fold with (train records, eval records, fold)
/// where the eval set is exactly the records carrying that fold id.
inline KfoldResult kfold_runner(
    const std::vector<ManifestRecord>& records, int k,
    const std::function<double(const std::vector<ManifestRecord>&,
                               const std::vector<ManifestRecord>&, int)>& run_fold) {
  if (k <= 1) throw contract_error("kfold_runner: need at least two folds");
  std::vector<long> counts(k + 1, 0);
  for (const auto& r : records) {
    if (!r.fold.has_value() || *r.fold < 1 || *r.fold > k) {
      throw input_error("kfold_runner: record without a fold id in 1.." + std::to_string(k) +
                        ": " + r.path);
    }
    ++counts[*r.fold];
  }
  for (int f = 1; f <= k; ++f) {
    if (counts[f] == 0) throw input_error("kfold_runner: fold " + std::to_string(f) + " is empty");
  }

  KfoldResult result;
  for (int f = 1; f <= k; ++f) {
    std::vector<ManifestRecord> train, eval;
    for (const auto& r : records) {
      (*r.fold == f ? eval : train).push_back(r);
    }
    result.per_fold.push_back(run_fold(train, eval, f));
  }
  result.mean = std::accumulate(result.per_fold.begin(), result.per_fold.end(), 0.0) / k;
  return result;
}

}  // namespace maskspec
