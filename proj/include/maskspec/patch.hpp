#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskspec/common.hpp"
#include "maskspec/rng.hpp"
#include "maskspec/tensor.hpp"

namespace maskspec {

inline constexpr int kPatchSize = 16;
inline constexpr double kMinMaskRatio = 0.05;
inline constexpr double kMaxMaskRatio = 0.95;

/// Non-overlapping p x p tiles of a spectrogram, flattened row-major.
/// Grid rows run over frequency bands, grid columns over time, so the
/// canonical 992 x 128 input with p=16 yields an 8 x 62 grid of 496 patches.
template <typename T>
struct PatchGrid {
  long rows{0};  // frequency-band rows
  long cols{0};  // time columns
  long p{0};
  Matrix<T> patches;  // n x (p*p)

  long n() const { return rows * cols; }
};

template <typename T>
PatchGrid<T> patchify(const Matrix<T>& spec, long p) {
  if (p <= 0) throw input_error("patchify: patch size must be positive");
  if (p > spec.rows || p > spec.cols) {
    throw input_error("patchify: patch size exceeds spectrogram dimensions");
  }
  PatchGrid<T> grid;
  grid.p = p;
  grid.rows = spec.cols / p;  // frequency
  grid.cols = spec.rows / p;  // time
  grid.patches = Matrix<T>(grid.n(), p * p);
  for (long r = 0; r < grid.rows; ++r) {
    for (long c = 0; c < grid.cols; ++c) {
      T* dst = grid.patches.row(r * grid.cols + c);
      for (long i = 0; i < p; ++i) {
        for (long j = 0; j < p; ++j) {
          dst[i * p + j] = spec(c * p + i, r * p + j);
        }
      }
    }
  }
  return grid;
}

/// Inverse of patchify for dimensions the patch size divides exactly.
template <typename T>
Matrix<T> unpatchify(const PatchGrid<T>& grid, long spec_rows, long spec_cols) {
  if (grid.rows * grid.p != spec_cols || grid.cols * grid.p != spec_rows) {
    throw contract_error("unpatchify: grid does not tile the requested shape exactly");
  }
  Matrix<T> spec(spec_rows, spec_cols);
  for (long r = 0; r < grid.rows; ++r) {
    for (long c = 0; c < grid.cols; ++c) {
      const T* src = grid.patches.row(r * grid.cols + c);
      for (long i = 0; i < grid.p; ++i) {
        for (long j = 0; j < grid.p; ++j) {
          spec(c * grid.p + i, r * grid.p + j) = src[i * grid.p + j];
        }
      }
    }
  }
  return spec;
}

/// N = floor(n * alpha) masked indices plus the sorted survivor complement.
struct MaskPlan {
  long n{0};
  double alpha{0.0};
  std::vector<long> masked_idx;    // sorted, |masked_idx| = N
  std::vector<long> survivor_idx;  // sorted complement

  long masked_count() const { return static_cast<long>(masked_idx.size()); }
  long survivor_count() const { return static_cast<long>(survivor_idx.size()); }
};

/// Uniformly samples floor(n * alpha) distinct indices via a partial
/// Fisher-Yates pass; both index sets come back sorted.
inline MaskPlan random_mask(long n, double alpha, Rng& rng) {
  if (n <= 0) throw input_error("random_mask: patch count must be positive");
  if (alpha < kMinMaskRatio || alpha > kMaxMaskRatio) {
    throw contract_error("random_mask: mask ratio must lie in [0.05, 0.95]");
  }
  const long masked = static_cast<long>(std::floor(n * alpha));

  std::vector<long> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (long i = 0; i < masked; ++i) {
    const long j = rng.uniform_int(i, n - 1);
    std::swap(perm[i], perm[j]);
  }

  MaskPlan plan;
  plan.n = n;
  plan.alpha = alpha;
  plan.masked_idx.assign(perm.begin(), perm.begin() + masked);
  std::sort(plan.masked_idx.begin(), plan.masked_idx.end());

  plan.survivor_idx.reserve(n - masked);
  std::size_t k = 0;
  for (long i = 0; i < n; ++i) {
    if (k < plan.masked_idx.size() && plan.masked_idx[k] == i) {
      ++k;
    } else {
      plan.survivor_idx.push_back(i);
    }
  }
  return plan;
}

inline MaskPlan random_mask(long n, double alpha, std::uint64_t seed) {
  Rng rng(seed);
  return random_mask(n, alpha, rng);
}

/// Rows of the grid at the survivor indices, in sorted index order.
template <typename T>
Matrix<T> gather_survivors(const PatchGrid<T>& grid, const MaskPlan& plan) {
  if (plan.n != grid.n()) throw contract_error("gather_survivors: plan and grid sizes differ");
  Matrix<T> out(plan.survivor_count(), grid.patches.cols);
  for (long i = 0; i < plan.survivor_count(); ++i) {
    std::copy_n(grid.patches.row(plan.survivor_idx[i]), grid.patches.cols, out.row(i));
  }
  return out;
}

template <typename T>
Matrix<T> gather_masked(const PatchGrid<T>& grid, const MaskPlan& plan) {
  if (plan.n != grid.n()) throw contract_error("gather_masked: plan and grid sizes differ");
  Matrix<T> out(plan.masked_count(), grid.patches.cols);
  for (long i = 0; i < plan.masked_count(); ++i) {
    std::copy_n(grid.patches.row(plan.masked_idx[i]), grid.patches.cols, out.row(i));
  }
  return out;
}

/// Rebuilds the full n-row sequence from encoded survivor rows, placing the
/// shared mask token at every masked position. Participates in the gradient
/// graph: survivor rows route gradients back to `encoded`, masked rows
/// accumulate into the token.
template <typename T>
Tensor<T> scatter_with_mask_token(const Tensor<T>& encoded, const MaskPlan& plan,
                                  const Tensor<T>& mask_token) {
  detail::require_2d(encoded, "scatter_with_mask_token");
  const long m = encoded.shape()[0], d = encoded.shape()[1];
  if (m != plan.survivor_count()) {
    throw contract_error("scatter_with_mask_token: encoded row count does not match survivors");
  }
  if (mask_token.size() != d) {
    throw contract_error("scatter_with_mask_token: mask token length does not match embedding dim");
  }
  std::vector<T> out = detail::pooled_buffer<T>(static_cast<std::size_t>(plan.n) * d);
  for (long i = 0; i < plan.survivor_count(); ++i) {
    std::copy_n(encoded.values().data() + i * d, d, out.data() + plan.survivor_idx[i] * d);
  }
  for (const long r : plan.masked_idx) {
    std::copy_n(mask_token.values().data(), d, out.data() + r * d);
  }
  auto pe = encoded.node();
  auto pt = mask_token.node();
  auto surv = plan.survivor_idx;
  auto masked = plan.masked_idx;
  return detail::make_op<T>("scatter_with_mask_token", {plan.n, d}, std::move(out), {pe, pt},
                            [pe, pt, surv, masked, d](detail::Node<T>& self) {
                              if (pe->requires_grad) {
                                pe->ensure_grad();
                                for (std::size_t i = 0; i < surv.size(); ++i) {
                                  detail::ArrMap<T>(pe->grad.data() + i * d, d) +=
                                      detail::CArrMap<T>(self.grad.data() + surv[i] * d, d);
                                }
                              }
                              if (pt->requires_grad) {
                                pt->ensure_grad();
                                detail::ArrMap<T> gt(pt->grad.data(), d);
                                for (const long r : masked) {
                                  gt += detail::CArrMap<T>(self.grad.data() + r * d, d);
                                }
                              }
                            });
}

inline nlohmann::json mask_plan_to_json(const MaskPlan& plan) {
  return nlohmann::json{{"n", plan.n}, {"alpha", plan.alpha}, {"masked_idx", plan.masked_idx}};
}

inline MaskPlan mask_plan_from_json(const nlohmann::json& j) {
  MaskPlan plan;
  plan.n = j.at("n").get<long>();
  plan.alpha = j.at("alpha").get<double>();
  plan.masked_idx = j.at("masked_idx").get<std::vector<long>>();
  std::size_t k = 0;
  for (long i = 0; i < plan.n; ++i) {
    if (k < plan.masked_idx.size() && plan.masked_idx[k] == i) {
      ++k;
    } else {
      plan.survivor_idx.push_back(i);
    }
  }
  return plan;
}

}  // namespace maskspec
