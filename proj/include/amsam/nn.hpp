#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "amsam/optim.hpp"
#include "amsam/tensor.hpp"

namespace amsam {

/// Trainable and frozen tensors of a model, in a stable registration order.
struct ParameterSet {
  std::vector<Parameter> trainable;
  std::vector<Parameter> frozen;

  void add(std::string name, const Tensor& t, bool is_frozen);
};

/// y = x W + b with W stored (in, out).
struct LinearLayer {
  Tensor weight;
  Tensor bias;
  bool frozen = false;

  /// Gaussian weights with std 1/sqrt(in), zero bias.
  static LinearLayer random(std::size_t in, std::size_t out, std::mt19937_64& rng, bool frozen);
  static LinearLayer from_weights(Tensor weight, Tensor bias, bool frozen);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

/// Low-rank update factors: delta W = B A with A (r, in) and B (out, r).
struct LoraAdapter {
  Tensor a;
  Tensor b;

  /// A ~ N(0, 1/r), B = 0.
  static LoraAdapter create(std::size_t in, std::size_t out, std::size_t rank, std::mt19937_64& rng);
  std::size_t rank() const { return a.dim(0); }
};

/// Frozen base projection plus an optional trainable low-rank update.
struct LoraLinear {
  LinearLayer base;
  std::optional<LoraAdapter> adapter;

  static LoraLinear create(std::size_t in, std::size_t out, std::mt19937_64& base_rng,
                           std::optional<std::size_t> rank, std::mt19937_64& adapter_rng);
  /// x W + b + (x A^T) B^T. Never materialises the effective weight.
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

/// W + (B A)^T in the (in, out) layout, so that x * W_eff matches forward() without bias.
Tensor lora_effective_weight(const LoraLinear& layer);

/// Single-head attention. Query and value projections carry adapters; the key
/// projection is the bare frozen map.
struct AttentionBlock {
  LoraLinear q_proj;
  LoraLinear k_proj;
  LoraLinear v_proj;
  LinearLayer out_proj;

  /// `rank` empty gives an adapter-free block; `frozen_out` freezes out_proj too.
  static AttentionBlock create(std::size_t dim, std::optional<std::size_t> rank, std::mt19937_64& base_rng,
                               std::mt19937_64& adapter_rng, bool frozen_out);

  std::size_t dim() const { return q_proj.base.in_features(); }
  std::size_t head_dim() const { return q_proj.base.out_features(); }
  /// queries (B, Nq, d), keys (B, Nk, d), values (B, Nk, d) -> (B, Nq, d).
  Tensor forward(const Tensor& queries, const Tensor& keys, const Tensor& values) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

Tensor attention_forward(const AttentionBlock& block, const Tensor& queries, const Tensor& keys_values);

/// Stack of linear layers with GELU between consecutive layers (none after the last).
struct Mlp {
  std::vector<LinearLayer> layers;

  static Mlp create(const std::vector<std::size_t>& widths, std::mt19937_64& rng, bool frozen);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

Tensor mlp_forward(const Mlp& head, const Tensor& tokens);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  bool frozen = false;

  static LayerNorm create(std::size_t dim, bool frozen);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

/// Two stride-2 transposed convolutions with GELU between them: (B,d,h,w) -> (B,c,4h,4w).
struct TransposedConvUpscaler {
  Tensor kernel1;  // (d, d/4, 2, 2)
  Tensor bias1;
  Tensor kernel2;  // (d/4, c, 2, 2)
  Tensor bias2;

  static TransposedConvUpscaler create(std::size_t dim, std::size_t out_channels, std::mt19937_64& rng);
  std::size_t in_channels() const { return kernel1.dim(0); }
  std::size_t out_channels() const { return kernel2.dim(1); }
  Tensor forward(const Tensor& grid) const;
  void collect(const std::string& prefix, ParameterSet& out) const;
};

Tensor upscale_forward(const TransposedConvUpscaler& upscaler, const Tensor& grid);

/// Random Fourier features of 2-D points in [0,1]^2: [sin(2 pi G^T p), cos(2 pi G^T p)].
class FourierPositionalEncoder {
 public:
  FourierPositionalEncoder() = default;
  FourierPositionalEncoder(std::size_t dim, double sigma, std::uint64_t seed);

  std::size_t dim() const { return 2 * frequencies_.dim(1); }
  double sigma() const { return sigma_; }
  const Tensor& frequencies() const { return frequencies_; }

  /// Coordinates outside [0,1] are clamped; `clamped` (if given) records whether that happened.
  Tensor encode(double x, double y, bool* clamped = nullptr) const;
  /// Codes for the centres of a rows x cols patch grid over an image of the given size -> (rows*cols, d).
  Tensor encode_grid(std::size_t rows, std::size_t cols, std::size_t image_h, std::size_t image_w) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

 private:
  Tensor frequencies_;  // (2, d/2), frozen
  double sigma_ = 1.0;
};

Tensor pos_encode_point(const FourierPositionalEncoder& encoder, double x, double y);

}  // namespace amsam
