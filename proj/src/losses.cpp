#include "amsam/losses.hpp"

#include <stdexcept>

namespace amsam {

void LossConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(smooth > 0.0)) throw ConfigError("dice smoothing must be positive");
}

SegmentationTarget SegmentationTarget::from_masks(const std::vector<Tensor>& masks) {
  if (masks.empty()) throw DimensionError("segmentation target needs at least one mask");
  SegmentationTarget t;
  t.batch = masks.size();
  t.height = masks[0].dim(0);
  t.width = masks[0].dim(1);
  for (const auto& m : masks) {
    if (m.shape() != Shape{t.height, t.width}) throw DimensionError("masks in one batch must share a shape");
    for (double v : m.data()) t.labels.push_back(v != 0.0 ? 1 : 0);
  }
  return t;
}

namespace {

void check_target(const Tensor& logits, const SegmentationTarget& target) {
  if (logits.rank() != 4 || logits.dim(0) != target.batch || logits.dim(2) != target.height ||
      logits.dim(3) != target.width || target.labels.size() != target.batch * target.height * target.width) {
    throw DimensionError("logits " + shape_to_string(logits.shape()) + " do not match target (" +
                         std::to_string(target.batch) + "," + std::to_string(target.height) + "," +
                         std::to_string(target.width) + ")");
  }
  const std::size_t n = logits.dim(1);
  if (n < 2) throw DimensionError("segmentation losses need at least two classes");
  for (auto l : target.labels) {
    if (l >= n) throw std::out_of_range("target class " + std::to_string(l) + " outside [0," + std::to_string(n) + ")");
  }
}

// (b, n, h, w) -> (b, h, w, n)
Tensor classes_last(const Tensor& logits) { return permute(logits, {0, 2, 3, 1}); }

}  // namespace

Tensor cross_entropy(const Tensor& logits, const SegmentationTarget& target) {
  check_target(logits, target);
  Tensor logp = log_softmax_lastdim(classes_last(logits));
  return scale(mean_all(pick_lastdim(logp, target.labels)), -1.0);
}

Tensor dice_loss(const Tensor& logits, const SegmentationTarget& target, const LossConfig& cfg) {
  check_target(logits, target);
  cfg.validate();
  const std::size_t b = target.batch, hw = target.height * target.width;
  if (cfg.foreground >= logits.dim(1)) throw std::out_of_range("foreground class outside logits");
  Tensor probs = softmax_lastdim(classes_last(logits));
  Tensor p = reshape(pick_lastdim(probs, std::vector<std::size_t>(b * hw, cfg.foreground)), {b, hw});
  std::vector<double> t(b * hw);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = target.labels[i] == cfg.foreground ? 1.0 : 0.0;
  Tensor tt = Tensor::from_data({b, hw}, std::move(t));
  Tensor inter = sum_lastdim(hadamard(p, tt));                   // (b)
  Tensor denom = add_scalar(add(sum_lastdim(p), sum_lastdim(tt)), cfg.smooth);
  Tensor dice = div(add_scalar(scale(inter, 2.0), cfg.smooth), denom);
  return add_scalar(scale(mean_all(dice), -1.0), 1.0);
}

Tensor combine_losses(const Tensor& ce, const Tensor& dice, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  return add(scale(ce, 1.0 - lambda), scale(dice, lambda));
}

Tensor combined_loss(const Tensor& logits, const SegmentationTarget& target, const LossConfig& cfg) {
  cfg.validate();
  return combine_losses(cross_entropy(logits, target), dice_loss(logits, target, cfg), cfg.lambda);
}

double dice_score(const Tensor& pred_mask, const Tensor& gt_mask) {
  if (pred_mask.shape() != gt_mask.shape()) {
    throw DimensionError("dice_score: shapes " + shape_to_string(pred_mask.shape()) + " and " +
                         shape_to_string(gt_mask.shape()) + " differ");
  }
  auto a = pred_mask.data();
  auto b = gt_mask.data();
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != 0.0, ib = b[i] != 0.0;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Tensor binarize_prediction(const Tensor& logits, std::size_t foreground) {
  Shape s = logits.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 3) throw DimensionError("binarize_prediction expects (n,h,w) logits, got " + shape_to_string(logits.shape()));
  const std::size_t n = s[0], hw = s[1] * s[2];
  if (foreground >= n) throw std::out_of_range("foreground class outside logits");
  auto x = logits.data();
  std::vector<double> out(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (x[k * hw + i] > x[best * hw + i]) best = k;
    }
    out[i] = best == foreground ? 1.0 : 0.0;
  }
  return Tensor::from_data({s[1], s[2]}, std::move(out));
}

}  // namespace amsam
