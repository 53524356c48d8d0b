#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "amsam/checkpoint.hpp"
#include "amsam/data_io.hpp"
#include "amsam/losses.hpp"
#include "amsam/mask_decoder.hpp"
#include "amsam/nn.hpp"
#include "amsam/optim.hpp"
#include "amsam/prompting.hpp"
#include "amsam/sample.hpp"

namespace amsam {

struct TrainConfig {
  double lambda = 0.8;
  double alpha = 0.7;
  double lower_lr = 5e-3;
  double upper_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  std::size_t epochs = 100;
  std::size_t rank = 4;
  std::size_t batch_size = 1;
  std::size_t prompt_tokens = 4;
  std::uint64_t seed = 0;
  // Seed of the frozen parts (image encoder, base projections, positional
  // codes). Kept apart from `seed` so that runs share one "pretrained" backbone.
  std::uint64_t backbone_seed = 1234;
  bool box_prompts = true;
  bool calibration = true;
  bool per_batch_calibration = false;
  int jitter_px = 2;
  std::string detections_file;  // empty: oracle boxes from the ground-truth mask
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t dim = 32;
  std::size_t embed_channels = 8;
  std::size_t num_masks = 2;
  std::size_t decoder_blocks = 2;
  double pe_sigma = 4.0;
  bool debug_checks = false;

  void validate() const;
  KeyValues to_key_values() const;
  /// Applies `kv` on top of `base`; unknown keys and unparsable values throw ConfigError.
  static TrainConfig from_key_values(const KeyValues& kv);
  static TrainConfig from_key_values(const KeyValues& kv, TrainConfig base);
  static bool is_key(const std::string& key);
};

/// Frozen backbone, LoRA-adapted mask decoder, box corner types and the
/// learnable prompt embedding A. W is every trainable tensor except A.
class AmSamModel {
 public:
  static AmSamModel create(const TrainConfig& config);
  /// Rebuilds the frozen parts from the stored config and loads the trainable tensors.
  static AmSamModel from_checkpoint(const Checkpoint& checkpoint);

  const TrainConfig& config() const { return config_; }
  const ToyImageEncoder& encoder() const { return encoder_; }
  const FourierPositionalEncoder& positional_encoder() const { return pe_; }
  MaskDecoder& decoder() { return decoder_; }
  const MaskDecoder& decoder() const { return decoder_; }
  const DetectionSource& detector() const { return detector_; }
  const Tensor& prompt_embedding() const { return prompt_embedding_; }
  const Tensor& corner_types() const { return corner_types_; }

  std::vector<Parameter> weight_parameters() const;  // W
  std::vector<Parameter> prompt_parameters() const;  // A
  std::vector<Parameter> frozen_parameters() const;
  std::vector<Tensor> weight_tensors() const;
  std::vector<Tensor> frozen_tensors() const;

  /// Encoder output for one image (1, N, d); cached by image content.
  Tensor image_embedding(const Tensor& image) const;
  /// Box corner tokens (2, d) from the configured detector, or nothing when
  /// box prompting is off or the detector finds no box.
  std::optional<Tensor> detected_box_tokens(const Sample& sample) const;
  Tensor box_tokens(const BoundingBox& box) const;

  DecoderOutput forward(const std::vector<const Sample*>& batch) const;
  /// Single image with an explicit (or no) box.
  DecoderOutput forward_image(const Tensor& image, const std::optional<BoundingBox>& box) const;

  /// Binarised foreground (H, W) of M_final for one sample, boxes from the detector.
  Tensor predict_mask(const Sample& sample) const;

  std::vector<NamedTensor> export_tensors() const;
  /// Every trainable tensor must be present exactly once with a matching shape.
  void import_tensors(const std::vector<NamedTensor>& tensors);

 private:
  explicit AmSamModel(const TrainConfig& config);

  TrainConfig config_;
  ToyImageEncoder encoder_;
  FourierPositionalEncoder pe_;
  MaskDecoder decoder_;
  DetectionSource detector_;
  Tensor prompt_embedding_;  // A (n_A, d)
  Tensor corner_types_;      // (2, d)
  mutable std::map<std::uint64_t, Tensor> embedding_cache_;
};

struct SplitDataset {
  std::vector<Sample> d1;
  std::vector<Sample> d2;
  std::vector<Sample> test;
};

/// Deterministic shuffle, then halving; with an odd count D1 gets the extra sample.
SplitDataset split_dataset(std::vector<Sample> samples, std::uint64_t seed, std::vector<Sample> test = {});

/// One AdamW state per parameter, so parameters without a gradient in a
/// given step keep their moments untouched.
class LevelOptimizer {
 public:
  LevelOptimizer(std::vector<Parameter> params, AdamWConfig config);

  const std::vector<Parameter>& parameters() const { return params_; }
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::vector<AdamWState> states_;
};

AdamWConfig adamw_config(const TrainConfig& config);
LossConfig loss_config(const TrainConfig& config);

/// Combined loss of M_final on a batch; used by both levels.
Tensor batch_loss(const AmSamModel& model, const std::vector<const Sample*>& batch);

/// Gradient step on W with A held fixed; returns the loss before the update.
double lower_step(AmSamModel& model, const std::vector<const Sample*>& batch, LevelOptimizer& w_optimizer, double lr);
/// Gradient step on A with W held fixed; returns the loss before the update.
double upper_step(AmSamModel& model, const std::vector<const Sample*>& batch, LevelOptimizer& a_optimizer, double lr);

/// Raised when a loss turns non-finite.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checksums of W and A around one optimizer step (recorded when debug_checks is on).
struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  bool upper = false;
  std::uint64_t w_before = 0, w_after = 0;
  std::uint64_t a_before = 0, a_after = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<MetricsRow> metrics;
  double initial_d2_dice = 0.0;
  std::optional<double> best_test_dice;  // test dice of the selected checkpoint
  std::vector<StepRecord> steps;
  // Checksum of every frozen tensor of the trained model, before and after the run.
  std::uint64_t frozen_before = 0, frozen_after = 0;
};

/// Called after every epoch with the row just recorded.
using EpochCallback = std::function<void(const MetricsRow&)>;

TrainResult train(const TrainConfig& config, const SplitDataset& data, const EpochCallback& on_epoch = {});

/// Mean dice of the binarised M_final over `samples`.
double evaluate(const AmSamModel& model, const std::vector<Sample>& samples);
double evaluate(const Checkpoint& checkpoint, const std::vector<Sample>& samples);

Checkpoint make_checkpoint(const AmSamModel& model, double d2_dice, std::size_t epoch);

}  // namespace amsam
