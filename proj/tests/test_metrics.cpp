#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "maskspec/metrics.hpp"
#include "maskspec/rng.hpp"

using namespace maskspec;
using Catch::Approx;

namespace {

// Independent AP oracle: O(n^2) pairwise rank computation, no sorting.
// Item j outranks item i when it scores higher, or ties with a smaller
// original index.
double ap_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  const long n = static_cast<long>(scores.size());
  long positives = 0;
  for (const int l : labels) positives += (l != 0);
  double sum = 0.0;
  for (long i = 0; i < n; ++i) {
    if (labels[i] == 0) continue;
    long rank = 1, hits = 0;
    for (long j = 0; j < n; ++j) {
      const bool outranks = scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
      if (j != i && outranks) {
        ++rank;
        hits += (labels[j] != 0);
      }
    }
    sum += static_cast<double>(hits + 1) / static_cast<double>(rank);
  }
  return sum / positives;
}

}  // namespace

TEST_CASE("AP is one when every positive outranks every negative") {
  REQUIRE(average_precision({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
}

TEST_CASE("a single positive ranked last among three scores one third") {
  REQUIRE(average_precision({0.9, 0.5, 0.1}, {0, 0, 1}) == Approx(1.0 / 3.0).margin(1e-15));
}

TEST_CASE("AP requires at least one positive") {
  REQUIRE_THROWS_AS(average_precision({0.4, 0.2}, {0, 0}), contract_error);
}

TEST_CASE("AP ties break by stable original order") {
  // Both items score 0.5; the positive sits first, so it ranks first.
  REQUIRE(average_precision({0.5, 0.5}, {1, 0}) == 1.0);
  REQUIRE(average_precision({0.5, 0.5}, {0, 1}) == 0.5);
}

TEST_CASE("AP matches the exhaustive oracle on random instances") {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const long n = 10;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool any = false;
    for (long i = 0; i < n; ++i) {
      scores[i] = rng.uniform(-3.0, 3.0);
      labels[i] = rng.uniform01() < 0.4 ? 1 : 0;
      any = any || labels[i];
    }
    if (!any) labels[rng.uniform_int(0, n - 1)] = 1;
    REQUIRE(average_precision(scores, labels) ==
            Approx(ap_oracle(scores, labels)).margin(1e-12));
  }
}

TEST_CASE("AP is invariant under strictly monotone score transforms") {
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const long n = 10;
    std::vector<double> scores(n);
    std::vector<int> labels(n, 0);
    for (long i = 0; i < n; ++i) scores[i] = rng.uniform(-3.0, 3.0);
    labels[rng.uniform_int(0, n - 1)] = 1;
    labels[rng.uniform_int(0, n - 1)] = 1;

    const double base = average_precision(scores, labels);
    std::vector<std::vector<double>> transformed;
    std::vector<double> scaled(n), expd(n), cubed(n);
    for (long i = 0; i < n; ++i) {
      scaled[i] = scores[i] * 8.0;  // exact power-of-two scaling
      expd[i] = std::exp(scores[i]);
      cubed[i] = scores[i] * scores[i] * scores[i] + 4.0 * scores[i];
    }
    for (const auto& t : {scaled, expd, cubed}) {
      // The maps are strictly monotone; verify ranks survived rounding, then
      // demand bit-equal AP.
      std::vector<long> ra(n), rb(n);
      std::iota(ra.begin(), ra.end(), 0);
      rb = ra;
      std::stable_sort(ra.begin(), ra.end(), [&](long a, long b) { return scores[a] > scores[b]; });
      std::stable_sort(rb.begin(), rb.end(), [&](long a, long b) { return t[a] > t[b]; });
      if (ra == rb) {
        REQUIRE(average_precision(t, labels) == base);
      }
    }
  }
}

TEST_CASE("mean AP composes per-class AP") {
  EvalBatch batch;
  batch.scores = Matrix<double>(3, 2, {0.9, 0.1, 0.8, 0.9, 0.1, 0.2});
  batch.labels = Matrix<int>(3, 2, {1, 0, 1, 1, 0, 0});
  // class 0: positives at rows 0,1 with top scores -> AP 1.
  // class 1: one positive (row 1, score 0.9) ranked first -> AP 1.
  REQUIRE(mean_ap(batch).map == Approx(1.0).margin(1e-15));

  EvalBatch two;
  two.scores = Matrix<double>(2, 2, {0.9, 0.9, 0.8, 0.1});
  two.labels = Matrix<int>(2, 2, {1, 0, 0, 1});
  // class 0: positive first -> AP 1. class 1: positive second -> AP 0.5.
  REQUIRE(mean_ap(two).map == Approx(0.75).margin(1e-15));
}

TEST_CASE("mean AP skips and flags classes without positives") {
  EvalBatch batch;
  batch.scores = Matrix<double>(2, 3, {0.9, 0.5, 0.4, 0.2, 0.6, 0.3});
  batch.labels = Matrix<int>(2, 3, {1, 0, 0, 0, 0, 1});
  const MeanApResult res = mean_ap(batch);
  REQUIRE(res.skipped_classes == std::vector<long>{1});
  REQUIRE(std::isnan(res.per_class_ap[1]));
  // class 0 AP = 1, class 2 AP = 0.5 (its positive ranks second), mean 0.75.
  REQUIRE(res.map == Approx(0.75).margin(1e-15));
}

TEST_CASE("mean AP over randomly permuted classes is unchanged") {
  Rng rng(19);
  const long clips = 12, classes = 5;
  EvalBatch batch;
  batch.scores = Matrix<double>(clips, classes);
  batch.labels = Matrix<int>(clips, classes);
  for (long r = 0; r < clips; ++r) {
    for (long c = 0; c < classes; ++c) {
      batch.scores(r, c) = rng.uniform(-1, 1);
      batch.labels(r, c) = rng.uniform01() < 0.4 ? 1 : 0;
    }
  }
  for (long c = 0; c < classes; ++c) batch.labels(rng.uniform_int(0, clips - 1), c) = 1;

  std::vector<long> perm(classes);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  EvalBatch permuted;
  permuted.scores = Matrix<double>(clips, classes);
  permuted.labels = Matrix<int>(clips, classes);
  for (long r = 0; r < clips; ++r) {
    for (long c = 0; c < classes; ++c) {
      permuted.scores(r, c) = batch.scores(r, perm[c]);
      permuted.labels(r, c) = batch.labels(r, perm[c]);
    }
  }
  REQUIRE(mean_ap(batch).map == Approx(mean_ap(permuted).map).margin(1e-15));
}

TEST_CASE("accuracy cases") {
  REQUIRE(accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
  REQUIRE(accuracy({1, 2, 3}, {3, 1, 2}) == 0.0);
  REQUIRE(accuracy({1, 2, 3, 4}, {1, 2, 3, 0}) == 0.75);
  REQUIRE_THROWS_AS(accuracy({}, {}), input_error);
  REQUIRE_THROWS_AS(accuracy({1}, {1, 2}), contract_error);

  Rng rng(20);
  std::vector<long> preds(50);
  for (auto& p : preds) p = rng.uniform_int(0, 9);
  REQUIRE(accuracy(preds, preds) == 1.0);
}

TEST_CASE("kfold runner partitions folds and averages the metric") {
  std::vector<ManifestRecord> records;
  for (int f = 1; f <= 5; ++f) {
    for (int i = 0; i < f; ++i) {  // fold sizes 1..5
      ManifestRecord r;
      r.path = "clip_" + std::to_string(f) + "_" + std::to_string(i);
      r.fold = f;
      records.push_back(r);
    }
  }

  std::vector<int> eval_counts;
  const KfoldResult constant = kfold_runner(
      records, 5,
      [&eval_counts](const std::vector<ManifestRecord>& train,
                     const std::vector<ManifestRecord>& eval, int fold) {
        eval_counts.push_back(static_cast<int>(eval.size()));
        for (const auto& r : eval) REQUIRE(*r.fold == fold);
        for (const auto& r : train) REQUIRE(*r.fold != fold);
        REQUIRE(train.size() + eval.size() == 15);
        return 0.9;
      });
  REQUIRE(constant.mean == Approx(0.9).margin(1e-15));
  REQUIRE(eval_counts == std::vector<int>{1, 2, 3, 4, 5});

  // Missing fold coverage is an input error.
  records.pop_back();
  std::vector<ManifestRecord> no_fold_two;
  for (const auto& r : records) {
    if (*r.fold != 2) no_fold_two.push_back(r);
  }
  REQUIRE_THROWS_AS(kfold_runner(no_fold_two, 5,
                                 [](const auto&, const auto&, int) { return 0.0; }),
                    input_error);
}
