#pragma once

#include <cstddef>
#include <vector>

#include "amsam/tensor.hpp"

namespace amsam {

struct LossConfig {
  double lambda = 0.8;            // weight of the dice term
  double smooth = 1e-6;           // soft-dice smoothing
  std::size_t foreground = 1;     // class index scored by dice

  void validate() const;
};

/// Class-index targets (b, h, w) stored as a flat index vector plus shape.
struct SegmentationTarget {
  std::size_t batch = 0, height = 0, width = 0;
  std::vector<std::size_t> labels;  // row-major (b, h, w)

  /// From binary masks (H, W) in {0,1}: label 1 where the mask is nonzero.
  static SegmentationTarget from_masks(const std::vector<Tensor>& masks);
};

/// Mean over batch and pixels of -log softmax(logits)[target]; logits (b, n, h, w).
Tensor cross_entropy(const Tensor& logits, const SegmentationTarget& target);

/// 1 - soft dice of the foreground probability, averaged over the batch.
Tensor dice_loss(const Tensor& logits, const SegmentationTarget& target, const LossConfig& cfg = {});

/// (1 - lambda) * CE + lambda * dice loss.
Tensor combined_loss(const Tensor& logits, const SegmentationTarget& target, const LossConfig& cfg = {});
Tensor combine_losses(const Tensor& ce, const Tensor& dice, double lambda);

/// 2|A n B| / (|A| + |B|) of two binary (h, w) masks; 1.0 when both are empty.
double dice_score(const Tensor& pred_mask, const Tensor& gt_mask);

/// Channel argmax of logits (n, h, w) or (1, n, h, w), returned as a {0,1}
/// mask (h, w) marking pixels whose argmax is the foreground class.
Tensor binarize_prediction(const Tensor& logits, std::size_t foreground = 1);

}  // namespace amsam
