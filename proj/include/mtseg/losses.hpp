// Training objective: clipped binary cross-entropy plus Dice, summed over the
// three region tasks.
#pragma once

#include <array>

#include "mtseg/ops.hpp"

namespace mtseg {

inline constexpr double kBceLogFloor = -100.0;
inline constexpr double kDiceSmooth = 1e-6;

// Sum over pixels of -[y*max(log p, -100) + (1-y)*max(log(1-p), -100)].
template <typename T>
Tensor<T> bce_clipped(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError(str_cat("bce: prediction ", shape_str(pred.shape()),
                                 " vs target ", shape_str(target.shape())));
  auto pos = mul(target, log_clip(pred, kBceLogFloor));
  auto one_minus_t = add_scalar(mul_scalar(target, -1.0), 1.0);
  auto one_minus_p = add_scalar(mul_scalar(pred, -1.0), 1.0);
  auto neg = mul(one_minus_t, log_clip(one_minus_p, kBceLogFloor));
  return mul_scalar(add(sum_all(pos), sum_all(neg)), -1.0);
}

// 1 - (2*sum(y*p) + eps) / (sum(y^2) + sum(p^2) + eps).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError(str_cat("dice: prediction ", shape_str(pred.shape()),
                                 " vs target ", shape_str(target.shape())));
  auto num = add_scalar(mul_scalar(sum_all(mul(target, pred)), 2.0), kDiceSmooth);
  auto den = add_scalar(add(sum_all(mul(target, target)), sum_all(mul(pred, pred))), kDiceSmooth);
  return add_scalar(mul_scalar(div(num, den), -1.0), 1.0);
}

// Sum of per-task (BCE + Dice), tasks in WT, TC, ET order.
template <typename T>
Tensor<T> total_loss(const std::array<Tensor<T>, 3>& preds,
                     const std::array<Tensor<T>, 3>& targets) {
  Tensor<T> total;
  for (int t = 0; t < 3; ++t) {
    auto term = add(bce_clipped(preds[t], targets[t]), dice_loss(preds[t], targets[t]));
    total = t == 0 ? term : add(total, term);
  }
  return total;
}

// Optimization objective: same combination, but with the BCE term averaged
// over pixels so both terms sit at O(1) scale and the configured learning
// rate behaves the way mean-reduced training frameworks calibrate it.
template <typename T>
Tensor<T> training_loss(const std::array<Tensor<T>, 3>& preds,
                        const std::array<Tensor<T>, 3>& targets) {
  Tensor<T> total;
  for (int t = 0; t < 3; ++t) {
    const double n = static_cast<double>(preds[t].numel());
    auto term = add(mul_scalar(bce_clipped(preds[t], targets[t]), 1.0 / n),
                    dice_loss(preds[t], targets[t]));
    total = t == 0 ? term : add(total, term);
  }
  return total;
}

}  // namespace mtseg
