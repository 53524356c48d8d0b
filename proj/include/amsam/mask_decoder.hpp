#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "amsam/nn.hpp"
#include "amsam/prompting.hpp"
#include "amsam/tensor.hpp"

namespace amsam {

struct MaskDecoderConfig {
  std::size_t dim = 32;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  std::size_t num_masks = 2;          // n
  std::size_t embed_channels = 8;     // c
  std::size_t lora_rank = 4;
  std::size_t num_blocks = 2;
  double alpha = 0.7;
  bool calibration_enabled = true;
  // Averages R over the c slices of each batch row instead of over all b*c rows.
  bool per_batch_calibration = false;
};

/// Everything one decoder pass produces.
struct DecoderOutput {
  Tensor upscaled;    // U (b, c, h, w)
  Tensor mask_embed;  // H (b, n, c)
  Tensor m_orig;      // (b, n, h, w)
  Tensor m_new;       // (b, n, h, w)
  Tensor m_final;     // (b, n, h, w), raw logits
};

/// Token self-attention, token->image cross-attention, token MLP, image->token
/// cross-attention; post-norm residuals throughout.
struct TwoWayBlock {
  AttentionBlock self_attn;
  AttentionBlock cross_token_to_image;
  Mlp mlp;
  AttentionBlock cross_image_to_token;
  std::vector<LayerNorm> norms;  // 4

  /// queries/keys are updated in place.
  void forward(Tensor& queries, Tensor& keys, const Tensor& query_pe, const Tensor& key_pe) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

class MaskDecoder {
 public:
  /// `image_pe` is the (h0*w0, d) positional code of the image grid. Frozen
  /// base projections are drawn from `frozen_seed`; all trainable tensors from `trainable_seed`.
  static MaskDecoder create(const MaskDecoderConfig& config, Tensor image_pe, std::uint64_t frozen_seed,
                            std::uint64_t trainable_seed);

  const MaskDecoderConfig& config() const { return config_; }
  void set_alpha(double alpha);
  void set_calibration_enabled(bool enabled) { config_.calibration_enabled = enabled; }

  /// Runs [mask tokens; prompts] against the image grid and returns (U, H).
  std::pair<Tensor, Tensor> decode(const Tensor& image_embedding, const PromptTokens& prompts) const;
  DecoderOutput forward(const Tensor& image_embedding, const PromptTokens& prompts) const;

  void collect(const std::string& prefix, ParameterSet& out) const;

  /// Copy sharing every tensor but with the low-rank adapters removed.
  MaskDecoder without_adapters() const;

 private:
  MaskDecoderConfig config_;
  Tensor image_pe_;
  Tensor mask_tokens_;  // (n, d)
  std::vector<TwoWayBlock> blocks_;
  AttentionBlock final_attn_;
  LayerNorm final_norm_;
  TransposedConvUpscaler upscaler_;
  std::vector<Mlp> heads_;  // one per mask token, d -> d -> d -> c
};

/// M_orig[b,i] = sum_k H[b,i,k] U[b,k].
Tensor predict_orig(const Tensor& upscaled, const Tensor& mask_embed);

/// Hadamard-product calibration: R_k = repeat(U_k) o reshape(H_k) for each of
/// the c channels, concatenated along the batch axis, averaged over that axis
/// and repeated back to batch size b.
Tensor calibrate(const Tensor& upscaled, const Tensor& mask_embed, bool per_batch = false);

/// alpha * M_orig + (1 - alpha) * M_new.
Tensor combine(const Tensor& m_orig, const Tensor& m_new, double alpha);

}  // namespace amsam
