// Evaluation metrics over binary masks: Dice, 95th-percentile Hausdorff
// distance, sensitivity, and the BraTS label-to-region algebra.
//
// Empty-mask conventions (also printed in every report):
//   dice      = 1 if both masks empty, 0 if exactly one is empty
//   hd95      = 0 if both empty, undefined (excluded from means) if one is
//   sensitivity = 1 if the target is empty
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtseg/common.hpp"

namespace mtseg {

// N-dimensional {0,1} mask; 2-D slices or stacked 3-D volumes.
struct BinaryMask {
  Shape shape;
  std::vector<std::uint8_t> v;

  BinaryMask() = default;
  BinaryMask(Shape s, std::vector<std::uint8_t> data);

  Index count() const;
  bool empty_mask() const { return count() == 0; }
};

struct ConfusionCounts {
  Index tp = 0, fp = 0, tn = 0, fn = 0;
  Index total() const { return tp + fp + tn + fn; }
};

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& target);

// Per-sample Dice coefficient with the empty-mask convention above.
double dice_coef(const BinaryMask& pred, const BinaryMask& target);

// TP / (TP + FN); 1 when the target is empty.
double sensitivity(const BinaryMask& pred, const BinaryMask& target);

struct Hd95Result {
  double value = 0.0;
  bool undefined = false;  // exactly one mask empty
};

// Max of the two directed 95th-percentile distances (nearest-rank percentile
// over exact Euclidean point-to-set distances). pooled=true instead takes the
// percentile of the pooled directed-distance multiset.
Hd95Result hd95(const BinaryMask& pred, const BinaryMask& target, bool pooled = false);

// Table of region definitions over labels {0,1,2,4}:
//   WT = {1,2,4}, TC = {1,4}, ET = {4}.
std::array<BinaryMask, 3> labels_to_regions(const Shape& shape,
                                            const std::vector<std::uint8_t>& labels);

// Threshold sigmoid outputs at 0.5 (strictly greater).
BinaryMask threshold_mask(const Shape& shape, const std::vector<float>& probs);
BinaryMask threshold_mask(const Shape& shape, const std::vector<double>& probs);

// Exact squared Euclidean distance transform (per-axis parabolic envelopes);
// exposed for tests.
std::vector<double> squared_distance_transform(const Shape& shape,
                                               const std::vector<std::uint8_t>& mask);

inline const char* empty_mask_conventions() {
  return "dice: both-empty=1, one-empty=0; hd95: both-empty=0, one-empty=undefined "
         "(excluded from means); sensitivity: empty-target=1; threshold: p>0.5";
}

}  // namespace mtseg
