#include "amsam/mask_decoder.hpp"

#include <random>

namespace amsam {

namespace {

void check_ue_h(const Tensor& u, const Tensor& h, const char* op) {
  if (u.rank() != 4 || h.rank() != 3 || u.dim(0) != h.dim(0) || u.dim(1) != h.dim(2)) {
    throw DimensionError(std::string(op) + ": U " + shape_to_string(u.shape()) + " and H " +
                         shape_to_string(h.shape()) + " disagree (need U (b,c,h,w), H (b,n,c))");
  }
}

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
}

}  // namespace

void TwoWayBlock::forward(Tensor& queries, Tensor& keys, const Tensor& query_pe, const Tensor& key_pe) const {
  Tensor q = add(queries, query_pe);
  queries = norms[0].forward(add(queries, self_attn.forward(q, q, queries)));

  q = add(queries, query_pe);
  Tensor k = add(keys, key_pe);
  queries = norms[1].forward(add(queries, cross_token_to_image.forward(q, k, keys)));

  queries = norms[2].forward(add(queries, mlp.forward(queries)));

  q = add(queries, query_pe);
  k = add(keys, key_pe);
  keys = norms[3].forward(add(keys, cross_image_to_token.forward(k, q, queries)));
}

void TwoWayBlock::collect(const std::string& prefix, ParameterSet& out) const {
  self_attn.collect(prefix + ".self_attn", out);
  cross_token_to_image.collect(prefix + ".cross_t2i", out);
  mlp.collect(prefix + ".mlp", out);
  cross_image_to_token.collect(prefix + ".cross_i2t", out);
  for (std::size_t i = 0; i < norms.size(); ++i) norms[i].collect(prefix + ".norm" + std::to_string(i), out);
}

MaskDecoder MaskDecoder::create(const MaskDecoderConfig& config, Tensor image_pe, std::uint64_t frozen_seed,
                                std::uint64_t trainable_seed) {
  check_alpha(config.alpha);
  if (config.num_masks == 0) throw ConfigError("mask decoder needs at least one mask token");
  const std::size_t d = config.dim;
  if (image_pe.shape() != Shape{config.grid_rows * config.grid_cols, d}) {
    throw DimensionError("image positional code " + shape_to_string(image_pe.shape()) + " does not match the " +
                         std::to_string(config.grid_rows) + "x" + std::to_string(config.grid_cols) + " grid");
  }
  std::mt19937_64 frozen_rng(frozen_seed);
  std::mt19937_64 rng(trainable_seed);
  MaskDecoder dec;
  dec.config_ = config;
  dec.image_pe_ = std::move(image_pe);
  dec.mask_tokens_ = Tensor::randn({config.num_masks, d}, rng, 1.0, true);
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    TwoWayBlock block{
        AttentionBlock::create(d, config.lora_rank, frozen_rng, rng, false),
        AttentionBlock::create(d, config.lora_rank, frozen_rng, rng, false),
        Mlp::create({d, 2 * d, d}, rng, false),
        AttentionBlock::create(d, config.lora_rank, frozen_rng, rng, false),
        {},
    };
    for (int j = 0; j < 4; ++j) block.norms.push_back(LayerNorm::create(d, false));
    dec.blocks_.push_back(std::move(block));
  }
  dec.final_attn_ = AttentionBlock::create(d, config.lora_rank, frozen_rng, rng, false);
  dec.final_norm_ = LayerNorm::create(d, false);
  dec.upscaler_ = TransposedConvUpscaler::create(d, config.embed_channels, rng);
  for (std::size_t i = 0; i < config.num_masks; ++i) {
    dec.heads_.push_back(Mlp::create({d, d, d, config.embed_channels}, rng, false));
  }
  return dec;
}

void MaskDecoder::set_alpha(double alpha) {
  check_alpha(alpha);
  config_.alpha = alpha;
}

std::pair<Tensor, Tensor> MaskDecoder::decode(const Tensor& image_embedding, const PromptTokens& prompts) const {
  const std::size_t d = config_.dim, n = config_.num_masks;
  const std::size_t N = config_.grid_rows * config_.grid_cols;
  if (image_embedding.rank() != 3 || image_embedding.dim(1) != N || image_embedding.dim(2) != d) {
    throw DimensionError("decoder expects image embedding (B," + std::to_string(N) + "," + std::to_string(d) +
                         "), got " + shape_to_string(image_embedding.shape()));
  }
  const std::size_t B = image_embedding.dim(0);
  if (prompts.tokens.rank() != 3 || prompts.tokens.dim(0) != B || prompts.tokens.dim(2) != d) {
    throw DimensionError("prompt tokens " + shape_to_string(prompts.tokens.shape()) + " do not match batch " +
                         std::to_string(B) + " and dim " + std::to_string(d));
  }
  Tensor mask_tokens = repeat_axis(reshape(mask_tokens_, {1, n, d}), 0, B);
  Tensor tokens = concat({mask_tokens, prompts.tokens}, 1);
  Tensor query_pe = tokens;
  Tensor key_pe = repeat_axis(reshape(image_pe_, {1, N, d}), 0, B);
  Tensor queries = tokens;
  Tensor keys = image_embedding;
  for (const auto& block : blocks_) block.forward(queries, keys, query_pe, key_pe);
  {
    Tensor q = add(queries, query_pe);
    Tensor k = add(keys, key_pe);
    queries = final_norm_.forward(add(queries, final_attn_.forward(q, k, keys)));
  }
  Tensor grid = reshape(transpose_last2(keys), {B, d, config_.grid_rows, config_.grid_cols});
  Tensor upscaled = upscaler_.forward(grid);

  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < n; ++i) rows.push_back(heads_[i].forward(slice_axis(queries, 1, i, 1)));
  Tensor mask_embed = concat(rows, 1);
  return {upscaled, mask_embed};
}

DecoderOutput MaskDecoder::forward(const Tensor& image_embedding, const PromptTokens& prompts) const {
  auto [u, h] = decode(image_embedding, prompts);
  Tensor m_orig = predict_orig(u, h);
  if (!config_.calibration_enabled) return DecoderOutput{u, h, m_orig, m_orig, m_orig};
  Tensor m_new = calibrate(u, h, config_.per_batch_calibration);
  Tensor m_final = combine(m_orig, m_new, config_.alpha);
  return DecoderOutput{u, h, m_orig, m_new, m_final};
}

void MaskDecoder::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".image_pe", image_pe_, true);
  out.add(prefix + ".mask_tokens", mask_tokens_, false);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
  final_attn_.collect(prefix + ".final_attn", out);
  final_norm_.collect(prefix + ".final_norm", out);
  upscaler_.collect(prefix + ".upscaler", out);
  for (std::size_t i = 0; i < heads_.size(); ++i) heads_[i].collect(prefix + ".head" + std::to_string(i), out);
}

MaskDecoder MaskDecoder::without_adapters() const {
  MaskDecoder copy = *this;
  auto strip = [](AttentionBlock& a) {
    a.q_proj.adapter.reset();
    a.k_proj.adapter.reset();
    a.v_proj.adapter.reset();
  };
  for (auto& block : copy.blocks_) {
    strip(block.self_attn);
    strip(block.cross_token_to_image);
    strip(block.cross_image_to_token);
  }
  strip(copy.final_attn_);
  return copy;
}

Tensor predict_orig(const Tensor& upscaled, const Tensor& mask_embed) {
  check_ue_h(upscaled, mask_embed, "predict_orig");
  const std::size_t b = upscaled.dim(0), c = upscaled.dim(1), h = upscaled.dim(2), w = upscaled.dim(3);
  const std::size_t n = mask_embed.dim(1);
  Tensor flat = reshape(upscaled, {b, c, h * w});
  return reshape(matmul(mask_embed, flat), {b, n, h, w});
}

Tensor calibrate(const Tensor& upscaled, const Tensor& mask_embed, bool per_batch) {
  check_ue_h(upscaled, mask_embed, "calibrate");
  const std::size_t b = upscaled.dim(0), c = upscaled.dim(1), h = upscaled.dim(2), w = upscaled.dim(3);
  const std::size_t n = mask_embed.dim(1);
  std::vector<Tensor> fused;
  fused.reserve(c);
  for (std::size_t k = 0; k < c; ++k) {
    Tensor u_k = repeat_axis(slice_axis(upscaled, 1, k, 1), 1, n);             // (b, n, h, w)
    Tensor h_k = reshape(slice_axis(mask_embed, 2, k, 1), {b, n, 1, 1});      // (b, n, 1, 1)
    fused.push_back(hadamard(u_k, h_k));
  }
  if (per_batch) {
    std::vector<Tensor> stacked;
    for (auto& r : fused) stacked.push_back(reshape(r, {1, b, n, h, w}));
    return reshape(mean_axis0(concat_axis0(stacked)), {b, n, h, w});
  }
  Tensor r = concat_axis0(fused);   // (b*c, n, h, w)
  Tensor m_bar = mean_axis0(r);     // (1, n, h, w)
  return repeat_axis(m_bar, 0, b);  // (b, n, h, w)
}

Tensor combine(const Tensor& m_orig, const Tensor& m_new, double alpha) {
  check_alpha(alpha);
  if (m_orig.shape() != m_new.shape()) {
    throw DimensionError("combine: shapes " + shape_to_string(m_orig.shape()) + " and " +
                         shape_to_string(m_new.shape()) + " differ");
  }
  return add(scale(m_orig, alpha), scale(m_new, 1.0 - alpha));
}

}  // namespace amsam
