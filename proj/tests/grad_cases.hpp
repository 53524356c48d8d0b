#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "amsam/losses.hpp"
#include "amsam/mask_decoder.hpp"
#include "amsam/nn.hpp"
#include "amsam/tensor.hpp"
#include "amsam/trainer.hpp"
#include "support.hpp"

namespace testing {

struct GradCase {
  std::string name;
  bool linear;  // linear (or multilinear) in each input: tighter tolerance
  std::function<double(std::mt19937_64&)> run;  // max relative error of one random instance
};

namespace detail {

using namespace amsam;

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

template <typename F>
double unary(std::mt19937_64& rng, Shape shape, F f) {
  Tensor x = random_tensor(shape, rng);
  const std::uint64_t seed = rng();
  return max_grad_error([&] { return probe_sum(f(x), seed); }, {x}, rng);
}

template <typename F>
double binary(std::mt19937_64& rng, Shape sa, Shape sb, F f, double b_offset = 0.0) {
  Tensor a = random_tensor(sa, rng);
  Tensor b = random_tensor(sb, rng);
  if (b_offset != 0.0) {
    for (auto& v : b.mutable_data()) v = b_offset + std::abs(v);
  }
  const std::uint64_t seed = rng();
  return max_grad_error([&] { return probe_sum(f(a, b), seed); }, {a, b}, rng);
}

// Equal-rank shapes where b keeps a prefix of a and is 1 on a random suffix.
inline std::pair<Shape, Shape> broadcast_pair(std::mt19937_64& rng) {
  Shape a = random_shape(rng, pick(rng, 1, 4), 4);
  Shape b = a;
  const std::size_t keep = pick(rng, 0, a.size());
  for (std::size_t i = keep; i < b.size(); ++i) b[i] = 1;
  if (pick(rng, 0, 1)) std::swap(a, b);
  return {a, b};
}

}  // namespace detail

inline std::vector<GradCase> op_grad_cases() {
  using namespace amsam;
  using namespace detail;
  std::vector<GradCase> cases;
  auto elementwise = [&](std::string name, bool linear, Tensor (*op)(const Tensor&, const Tensor&), double off) {
    cases.push_back({name, linear, [op, off](std::mt19937_64& rng) {
                       auto [sa, sb] = broadcast_pair(rng);
                       return binary(rng, sa, sb, op, off);
                     }});
  };
  elementwise("add", true, add, 0.0);
  elementwise("sub", true, sub, 0.0);
  elementwise("hadamard", true, hadamard, 0.0);
  elementwise("div", false, div, 0.5);
  cases.push_back({"scale", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 3, 4), [](const Tensor& x) { return scale(x, -1.7); });
                   }});
  cases.push_back({"add_scalar", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 2, 5), [](const Tensor& x) { return add_scalar(x, 0.3); });
                   }});
  cases.push_back({"gelu", false, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 2, 6), [](const Tensor& x) { return gelu(x); });
                   }});
  cases.push_back({"add_bias", true, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, pick(rng, 1, 3), 4);
                     return binary(rng, s, {s.back()}, add_bias);
                   }});
  cases.push_back({"matmul_shared", true, [](std::mt19937_64& rng) {
                     const std::size_t B = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), p = pick(rng, 1, 4);
                     return binary(rng, {B, m, k}, {k, p}, matmul);
                   }});
  cases.push_back({"matmul_batched", true, [](std::mt19937_64& rng) {
                     const std::size_t B = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), p = pick(rng, 1, 4);
                     return binary(rng, {B, m, k}, {B, k, p}, matmul);
                   }});
  cases.push_back({"transpose_last2", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 3, 4), [](const Tensor& x) { return transpose_last2(x); });
                   }});
  cases.push_back({"permute", true, [](std::mt19937_64& rng) {
                     std::vector<std::size_t> axes = {0, 1, 2, 3};
                     std::shuffle(axes.begin(), axes.end(), rng);
                     return unary(rng, random_shape(rng, 4, 3), [axes](const Tensor& x) { return permute(x, axes); });
                   }});
  cases.push_back({"reshape", true, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, 3, 4);
                     return unary(rng, s, [s](const Tensor& x) { return reshape(x, {s[0] * s[1], s[2]}); });
                   }});
  cases.push_back({"concat", true, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, 3, 3);
                     const std::size_t axis = pick(rng, 0, 2);
                     Shape t = s;
                     t[axis] = pick(rng, 1, 3);
                     return binary(rng, s, t, [axis](const Tensor& a, const Tensor& b) { return concat({a, b}, axis); });
                   }});
  cases.push_back({"slice_axis", true, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, 3, 4);
                     const std::size_t axis = pick(rng, 0, 2);
                     const std::size_t start = pick(rng, 0, s[axis] - 1);
                     const std::size_t len = pick(rng, 1, s[axis] - start);
                     return unary(rng, s, [=](const Tensor& x) { return slice_axis(x, axis, start, len); });
                   }});
  cases.push_back({"repeat_axis", true, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, 3, 3);
                     const std::size_t axis = pick(rng, 0, 2), times = pick(rng, 1, 3);
                     return unary(rng, s, [=](const Tensor& x) { return repeat_axis(x, axis, times); });
                   }});
  cases.push_back({"sum_all", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 3, 4), [](const Tensor& x) { return sum_all(x); });
                   }});
  cases.push_back({"mean_all", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 3, 4), [](const Tensor& x) { return mean_all(x); });
                   }});
  cases.push_back({"sum_lastdim", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 3, 4), [](const Tensor& x) { return sum_lastdim(x); });
                   }});
  cases.push_back({"mean_axis0", true, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 3, 4), [](const Tensor& x) { return mean_axis0(x); });
                   }});
  cases.push_back({"softmax_lastdim", false, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 2, 5), [](const Tensor& x) { return softmax_lastdim(x); });
                   }});
  cases.push_back({"log_softmax_lastdim", false, [](std::mt19937_64& rng) {
                     return unary(rng, random_shape(rng, 2, 5), [](const Tensor& x) { return log_softmax_lastdim(x); });
                   }});
  cases.push_back({"pick_lastdim", true, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, 2, 5);
                     std::vector<std::size_t> idx(s[0]);
                     for (auto& i : idx) i = pick(rng, 0, s[1] - 1);
                     return unary(rng, s, [idx](const Tensor& x) { return pick_lastdim(x, idx); });
                   }});
  cases.push_back({"layer_norm", false, [](std::mt19937_64& rng) {
                     Shape s = random_shape(rng, 2, 5);
                     s.back() = pick(rng, 2, 6);
                     Tensor x = random_tensor(s, rng), g = random_tensor({s.back()}, rng), b = random_tensor({s.back()}, rng);
                     const std::uint64_t seed = rng();
                     return max_grad_error([&] { return probe_sum(layer_norm(x, g, b), seed); }, {x, g, b}, rng);
                   }});
  cases.push_back({"conv_transpose2x2", true, [](std::mt19937_64& rng) {
                     const std::size_t B = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
                     const std::size_t h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                     Tensor x = random_tensor({B, ci, h, w}, rng), k = random_tensor({ci, co, 2, 2}, rng),
                            b = random_tensor({co}, rng);
                     const std::uint64_t seed = rng();
                     return max_grad_error([&] { return probe_sum(conv_transpose2x2(x, k, b), seed); }, {x, k, b}, rng);
                   }});
  return cases;
}

/// Module-level compositions, up to the full training loss of a small model.
inline std::vector<GradCase> model_grad_cases() {
  using namespace amsam;
  using namespace detail;
  std::vector<GradCase> cases;
  cases.push_back({"lora_linear", false, [](std::mt19937_64& rng) {
                     const std::size_t in = pick(rng, 3, 6), out = pick(rng, 3, 6), r = pick(rng, 1, std::min(in, out) - 1);
                     std::mt19937_64 base(rng()), ad(rng());
                     LoraLinear layer = LoraLinear::create(in, out, base, r, ad);
                     for (auto& v : layer.adapter->b.mutable_data()) v = std::normal_distribution<double>(0, 1)(rng);
                     Tensor x = random_tensor({2, in}, rng);
                     const std::uint64_t seed = rng();
                     return max_grad_error([&] { return probe_sum(layer.forward(x), seed); },
                                           {x, layer.adapter->a, layer.adapter->b}, rng);
                   }});
  cases.push_back({"attention", false, [](std::mt19937_64& rng) {
                     const std::size_t d = 4 * pick(rng, 1, 2);
                     std::mt19937_64 base(rng()), ad(rng());
                     AttentionBlock block = AttentionBlock::create(d, 2, base, ad, false);
                     for (auto& v : block.q_proj.adapter->b.mutable_data()) v = 0.3 * std::normal_distribution<double>()(rng);
                     Tensor q = random_tensor({1, pick(rng, 1, 3), d}, rng), kv = random_tensor({1, pick(rng, 1, 4), d}, rng);
                     const std::uint64_t seed = rng();
                     return max_grad_error([&] { return probe_sum(block.forward(q, kv, kv), seed); },
                                           {q, kv, block.q_proj.adapter->a, block.out_proj.weight}, rng);
                   }});
  cases.push_back({"calibrate_combine", true, [](std::mt19937_64& rng) {
                     const std::size_t b = pick(rng, 1, 3), n = pick(rng, 1, 3), c = pick(rng, 1, 4);
                     const std::size_t h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                     Tensor U = random_tensor({b, c, h, w}, rng), H = random_tensor({b, n, c}, rng);
                     const std::uint64_t seed = rng();
                     return max_grad_error(
                         [&] { return probe_sum(combine(predict_orig(U, H), calibrate(U, H), 0.7), seed); }, {U, H}, rng);
                   }});
  cases.push_back({"combined_loss", false, [](std::mt19937_64& rng) {
                     const std::size_t b = pick(rng, 1, 2), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
                     Tensor logits = random_tensor({b, 2, h, w}, rng);
                     std::vector<Tensor> masks;
                     for (std::size_t i = 0; i < b; ++i) {
                       std::vector<double> m(h * w);
                       for (auto& v : m) v = static_cast<double>(pick(rng, 0, 1));
                       masks.push_back(Tensor::from_data({h, w}, m));
                     }
                     auto target = SegmentationTarget::from_masks(masks);
                     return max_grad_error([&] { return combined_loss(logits, target); }, {logits}, rng);
                   }});
  cases.push_back({"end_to_end_loss", false, [](std::mt19937_64& rng) {
                     TrainConfig cfg;
                     cfg.image_size = 8;
                     cfg.dim = 8;
                     cfg.rank = 2;
                     cfg.embed_channels = 2;
                     cfg.prompt_tokens = 2;
                     cfg.decoder_blocks = 1;
                     cfg.seed = rng();
                     cfg.jitter_px = 0;
                     AmSamModel model = AmSamModel::create(cfg);
                     // Zero B factors would leave the A factors without gradient.
                     for (auto& p : model.weight_parameters()) {
                       if (p.name.ends_with(".lora_b")) {
                         Tensor t = p.tensor;
                         for (auto& v : t.mutable_data()) v = 0.3 * std::normal_distribution<double>()(rng);
                       }
                     }
                     std::vector<double> img(64), mask(64, 0.0);
                     for (auto& v : img) v = std::uniform_real_distribution<double>(0, 1)(rng);
                     for (std::size_t y = 2; y < 6; ++y) {
                       for (std::size_t x = 1; x < 5; ++x) mask[y * 8 + x] = 1.0;
                     }
                     Sample s{"e2e", Tensor::from_data({1, 8, 8}, img), Tensor::from_data({8, 8}, mask)};
                     std::vector<Tensor> inputs = {model.prompt_embedding()};
                     for (auto& p : model.weight_parameters()) inputs.push_back(p.tensor);
                     return max_grad_error([&] { return batch_loss(model, {&s}); }, inputs, rng, 1e-5, 3);
                   }});
  return cases;
}

}  // namespace testing
