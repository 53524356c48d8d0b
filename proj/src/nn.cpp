#include "amsam/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace amsam {

void ParameterSet::add(std::string name, const Tensor& t, bool is_frozen) {
  (is_frozen ? frozen : trainable).push_back(Parameter{std::move(name), t});
}

LinearLayer LinearLayer::random(std::size_t in, std::size_t out, std::mt19937_64& rng, bool frozen) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
  return LinearLayer{Tensor::randn({in, out}, rng, stddev, !frozen), Tensor::zeros({out}, !frozen), frozen};
}

LinearLayer LinearLayer::from_weights(Tensor weight, Tensor bias, bool frozen) {
  if (weight.rank() != 2 || bias.shape() != Shape{weight.dim(1)}) {
    throw DimensionError("linear layer: weight " + shape_to_string(weight.shape()) + " and bias " +
                         shape_to_string(bias.shape()) + " disagree");
  }
  weight.set_requires_grad(!frozen);
  bias.set_requires_grad(!frozen);
  return LinearLayer{std::move(weight), std::move(bias), frozen};
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.shape().back() != in_features()) {
    throw DimensionError("linear layer expects last dim " + std::to_string(in_features()) + ", got " +
                         shape_to_string(x.shape()));
  }
  return add_bias(matmul(x, weight), bias);
}

void LinearLayer::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".weight", weight, frozen);
  out.add(prefix + ".bias", bias, frozen);
}

LoraAdapter LoraAdapter::create(std::size_t in, std::size_t out, std::size_t rank, std::mt19937_64& rng) {
  if (rank == 0 || rank >= std::min(in, out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " must satisfy 0 < r < min(" + std::to_string(in) + ", " +
                      std::to_string(out) + ")");
  }
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  return LoraAdapter{Tensor::randn({rank, in}, rng, stddev, true), Tensor::zeros({out, rank}, true)};
}

LoraLinear LoraLinear::create(std::size_t in, std::size_t out, std::mt19937_64& base_rng,
                              std::optional<std::size_t> rank, std::mt19937_64& adapter_rng) {
  LoraLinear layer{LinearLayer::random(in, out, base_rng, true), std::nullopt};
  if (rank) layer.adapter = LoraAdapter::create(in, out, *rank, adapter_rng);
  return layer;
}

namespace {

void check_adapter(const LoraLinear& layer) {
  if (!layer.adapter) return;
  const auto& ad = *layer.adapter;
  const std::size_t in = layer.base.in_features(), out = layer.base.out_features();
  if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.a.dim(1) != in || ad.b.dim(0) != out || ad.b.dim(1) != ad.a.dim(0)) {
    throw DimensionError("LoRA factors A " + shape_to_string(ad.a.shape()) + ", B " + shape_to_string(ad.b.shape()) +
                         " incompatible with base (" + std::to_string(in) + "," + std::to_string(out) + ")");
  }
  if (ad.rank() >= std::min(in, out)) {
    throw ConfigError("LoRA rank " + std::to_string(ad.rank()) + " must be below min(C_in, C_out)");
  }
}

}  // namespace

Tensor LoraLinear::forward(const Tensor& x) const {
  Tensor y = base.forward(x);
  if (!adapter) return y;
  check_adapter(*this);
  Tensor low = matmul(x, transpose_last2(adapter->a));
  return add(y, matmul(low, transpose_last2(adapter->b)));
}

void LoraLinear::collect(const std::string& prefix, ParameterSet& out) const {
  base.collect(prefix, out);
  if (adapter) {
    out.add(prefix + ".lora_a", adapter->a, false);
    out.add(prefix + ".lora_b", adapter->b, false);
  }
}

Tensor lora_effective_weight(const LoraLinear& layer) {
  check_adapter(layer);
  if (!layer.adapter) return layer.base.weight;
  return add(layer.base.weight, transpose_last2(matmul(layer.adapter->b, layer.adapter->a)));
}

AttentionBlock AttentionBlock::create(std::size_t dim, std::optional<std::size_t> rank, std::mt19937_64& base_rng,
                                      std::mt19937_64& adapter_rng, bool frozen_out) {
  AttentionBlock block{
      LoraLinear::create(dim, dim, base_rng, rank, adapter_rng),
      LoraLinear::create(dim, dim, base_rng, std::nullopt, adapter_rng),
      LoraLinear::create(dim, dim, base_rng, rank, adapter_rng),
      LinearLayer::random(dim, dim, base_rng, frozen_out),
  };
  return block;
}

Tensor AttentionBlock::forward(const Tensor& queries, const Tensor& keys, const Tensor& values) const {
  if (queries.rank() != 3 || keys.rank() != 3 || values.rank() != 3 || queries.dim(0) != keys.dim(0) ||
      keys.shape() != values.shape() || queries.dim(2) != dim() || keys.dim(2) != dim()) {
    throw DimensionError("attention: incompatible queries " + shape_to_string(queries.shape()) + ", keys " +
                         shape_to_string(keys.shape()) + ", values " + shape_to_string(values.shape()) +
                         " for model dim " + std::to_string(dim()));
  }
  Tensor q = q_proj.forward(queries);
  Tensor k = k_proj.forward(keys);
  Tensor v = v_proj.forward(values);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(head_dim()));
  Tensor scores = scale(matmul(q, transpose_last2(k)), inv_sqrt_dk);
  Tensor mixed = matmul(softmax_lastdim(scores), v);
  return out_proj.forward(mixed);
}

void AttentionBlock::collect(const std::string& prefix, ParameterSet& out) const {
  q_proj.collect(prefix + ".q_proj", out);
  k_proj.collect(prefix + ".k_proj", out);
  v_proj.collect(prefix + ".v_proj", out);
  out_proj.collect(prefix + ".out_proj", out);
}

Tensor attention_forward(const AttentionBlock& block, const Tensor& queries, const Tensor& keys_values) {
  return block.forward(queries, keys_values, keys_values);
}

Mlp Mlp::create(const std::vector<std::size_t>& widths, std::mt19937_64& rng, bool frozen) {
  if (widths.size() < 2) throw ConfigError("MLP needs at least input and output widths");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) mlp.layers.push_back(LinearLayer::random(widths[i], widths[i + 1], rng, frozen));
  return mlp;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

void Mlp::collect(const std::string& prefix, ParameterSet& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layers." + std::to_string(i), out);
}

Tensor mlp_forward(const Mlp& head, const Tensor& tokens) { return head.forward(tokens); }

LayerNorm LayerNorm::create(std::size_t dim, bool frozen) {
  return LayerNorm{Tensor::ones({dim}, !frozen), Tensor::zeros({dim}, !frozen), frozen};
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".gamma", gamma, frozen);
  out.add(prefix + ".beta", beta, frozen);
}

TransposedConvUpscaler TransposedConvUpscaler::create(std::size_t dim, std::size_t out_channels, std::mt19937_64& rng) {
  if (dim < 4 || dim % 4 != 0) throw ConfigError("upscaler input channels must be a positive multiple of 4");
  const std::size_t mid = dim / 4;
  // Each output pixel of a stage sees exactly one input pixel, so fan-in is the channel count.
  return TransposedConvUpscaler{
      Tensor::randn({dim, mid, 2, 2}, rng, 1.0 / std::sqrt(static_cast<double>(dim)), true),
      Tensor::zeros({mid}, true),
      Tensor::randn({mid, out_channels, 2, 2}, rng, 1.0 / std::sqrt(static_cast<double>(mid)), true),
      Tensor::zeros({out_channels}, true),
  };
}

Tensor TransposedConvUpscaler::forward(const Tensor& grid) const {
  if (grid.rank() != 4 || grid.dim(1) != in_channels()) {
    throw DimensionError("upscaler expects (B," + std::to_string(in_channels()) + ",h,w), got " +
                         shape_to_string(grid.shape()));
  }
  return conv_transpose2x2(gelu(conv_transpose2x2(grid, kernel1, bias1)), kernel2, bias2);
}

void TransposedConvUpscaler::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".kernel1", kernel1, false);
  out.add(prefix + ".bias1", bias1, false);
  out.add(prefix + ".kernel2", kernel2, false);
  out.add(prefix + ".bias2", bias2, false);
}

Tensor upscale_forward(const TransposedConvUpscaler& upscaler, const Tensor& grid) { return upscaler.forward(grid); }

FourierPositionalEncoder::FourierPositionalEncoder(std::size_t dim, double sigma, std::uint64_t seed) : sigma_(sigma) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("positional encoding dim must be even and positive");
  if (!(sigma > 0.0)) throw ConfigError("positional encoding scale must be positive");
  std::mt19937_64 rng(seed);
  frequencies_ = Tensor::randn({2, dim / 2}, rng, sigma, false);
}

Tensor FourierPositionalEncoder::encode(double x, double y, bool* clamped) const {
  const double cx = std::clamp(x, 0.0, 1.0);
  const double cy = std::clamp(y, 0.0, 1.0);
  if (clamped) *clamped = cx != x || cy != y;
  const std::size_t half = frequencies_.dim(1);
  auto g = frequencies_.data();
  std::vector<double> code(2 * half);
  for (std::size_t j = 0; j < half; ++j) {
    const double phase = 2.0 * std::numbers::pi * (cx * g[j] + cy * g[half + j]);
    code[j] = std::sin(phase);
    code[half + j] = std::cos(phase);
  }
  return Tensor::from_data({2 * half}, std::move(code));
}

Tensor FourierPositionalEncoder::encode_grid(std::size_t rows, std::size_t cols, std::size_t image_h,
                                             std::size_t image_w) const {
  if (rows == 0 || cols == 0 || image_h < 2 || image_w < 2) throw ConfigError("invalid grid for positional encoding");
  const double patch_h = static_cast<double>(image_h) / static_cast<double>(rows);
  const double patch_w = static_cast<double>(image_w) / static_cast<double>(cols);
  std::vector<double> out;
  out.reserve(rows * cols * dim());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      // Patch centre in pixel coordinates, normalised the same way as box corners.
      const double px = ((static_cast<double>(c) + 0.5) * patch_w - 0.5) / static_cast<double>(image_w - 1);
      const double py = ((static_cast<double>(r) + 0.5) * patch_h - 0.5) / static_cast<double>(image_h - 1);
      auto code = encode(px, py);
      out.insert(out.end(), code.data().begin(), code.data().end());
    }
  }
  return Tensor::from_data({rows * cols, dim()}, std::move(out));
}

void FourierPositionalEncoder::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".frequencies", frequencies_, true);
}

Tensor pos_encode_point(const FourierPositionalEncoder& encoder, double x, double y) { return encoder.encode(x, y); }

}  // namespace amsam
