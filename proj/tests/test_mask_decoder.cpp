#include <doctest.h>

#include <random>

#include "amsam/mask_decoder.hpp"
#include "support.hpp"

using namespace amsam;

TEST_CASE("calibration matches the loop reference on random shapes") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    Shape s = testing::random_shape(rng, 5, 5);  // b, c, h, w, n
    Tensor U = Tensor::randn({s[0], s[1], s[2], s[3]}, rng);
    Tensor H = Tensor::randn({s[0], s[4], s[1]}, rng);
    for (bool per_batch : {false, true}) {
      Tensor got = calibrate(U, H, per_batch);
      REQUIRE(got.shape() == Shape{s[0], s[4], s[2], s[3]});
      auto ref = testing::calibrate_reference(U, H, per_batch);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got.data()[i] - ref[i]) <= 1e-9);
    }
  }
}

TEST_CASE("with a single batch row calibration is the original prediction over c") {
  std::mt19937_64 rng(2);
  Tensor U = Tensor::randn({1, 5, 3, 4}, rng), H = Tensor::randn({1, 2, 5}, rng);
  Tensor orig = predict_orig(U, H), fresh = calibrate(U, H);
  for (std::size_t i = 0; i < orig.numel(); ++i) CHECK(5.0 * fresh.data()[i] == doctest::Approx(orig.data()[i]).epsilon(1e-12));
}

TEST_CASE("original prediction is the channel contraction") {
  std::mt19937_64 rng(3);
  Tensor U = Tensor::randn({2, 3, 2, 2}, rng), H = Tensor::randn({2, 2, 3}, rng);
  Tensor m = predict_orig(U, H);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t p = 0; p < 4; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 3; ++k) acc += H.at({b, i, k}) * U.at({b, k, p / 2, p % 2});
        CHECK(m.at({b, i, p / 2, p % 2}) == doctest::Approx(acc).epsilon(1e-13));
      }
    }
  }
  CHECK_THROWS_AS(predict_orig(U, Tensor::zeros({2, 2, 4})), DimensionError);
  CHECK_THROWS_AS(calibrate(U, Tensor::zeros({3, 2, 3})), DimensionError);
}

TEST_CASE("combine endpoints and interpolation") {
  std::mt19937_64 rng(4);
  Tensor a = Tensor::randn({2, 2, 3, 3}, rng), b = Tensor::randn({2, 2, 3, 3}, rng);
  Tensor one = combine(a, b, 1.0), zero = combine(a, b, 0.0), mid = combine(a, b, 0.7);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(one.data()[i] == a.data()[i]);
    CHECK(zero.data()[i] == b.data()[i]);
    CHECK(mid.data()[i] == doctest::Approx(0.7 * a.data()[i] + 0.3 * b.data()[i]).epsilon(1e-14));
  }
  CHECK_THROWS_AS(combine(a, b, 1.5), ConfigError);
  CHECK_THROWS_AS(combine(a, Tensor::zeros({2, 2, 3, 2}), 0.5), DimensionError);
}

TEST_CASE("decoder produces masks at four times the grid resolution") {
  MaskDecoderConfig cfg;
  cfg.dim = 16;
  cfg.grid_rows = 2;
  cfg.grid_cols = 3;
  cfg.embed_channels = 4;
  cfg.lora_rank = 2;
  cfg.num_blocks = 1;
  FourierPositionalEncoder pe(16, 1.0, 9);
  MaskDecoder dec = MaskDecoder::create(cfg, pe.encode_grid(2, 3, 8, 12), 1, 2);
  CHECK(dec.config().alpha == 0.7);
  std::mt19937_64 rng(5);
  Tensor emb = Tensor::randn({2, 6, 16}, rng);
  PromptTokens prompts = assemble_prompts(Tensor::randn({3, 16}, rng), std::nullopt, 2);
  DecoderOutput out = dec.forward(emb, prompts);
  CHECK(out.upscaled.shape() == Shape{2, 4, 8, 12});
  CHECK(out.mask_embed.shape() == Shape{2, 2, 4});
  CHECK(out.m_final.shape() == Shape{2, 2, 8, 12});
  Tensor expect = combine(out.m_orig, out.m_new, 0.7);
  for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(out.m_final.data()[i] == expect.data()[i]);

  dec.set_calibration_enabled(false);
  DecoderOutput plain = dec.forward(emb, prompts);
  for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(plain.m_final.data()[i] == plain.m_orig.data()[i]);

  MaskDecoder bare = dec.without_adapters();
  DecoderOutput stripped = bare.forward(emb, prompts);
  for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(stripped.m_final.data()[i] == plain.m_final.data()[i]);
  CHECK_THROWS_AS(dec.set_alpha(-0.1), ConfigError);
}
