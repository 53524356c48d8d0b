#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "amsam/trainer.hpp"
#include "support.hpp"

using namespace amsam;

namespace {

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.seed = seed;
  c.image_size = 16;
  c.dim = 16;
  c.embed_channels = 4;
  c.rank = 2;
  c.decoder_blocks = 1;
  c.prompt_tokens = 2;
  c.epochs = 3;
  return c;
}

std::vector<Sample> small_samples(std::size_t count, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.height = spec.width = 16;
  spec.count = count;
  spec.seed = seed;
  return gen_synthetic(spec);
}

std::vector<std::uint64_t> sums(const std::vector<Tensor>& ts) {
  std::vector<std::uint64_t> out;
  for (const auto& t : ts) out.push_back(checksum(t));
  return out;
}

}  // namespace

TEST_CASE("default configuration") {
  TrainConfig c;
  CHECK(c.lambda == 0.8);
  CHECK(c.alpha == 0.7);
  CHECK(c.lower_lr == 5e-3);
  CHECK(c.upper_lr == 1e-3);
  CHECK(c.beta1 == 0.9);
  CHECK(c.beta2 == 0.999);
  CHECK(c.weight_decay == 0.1);
  CHECK(c.epochs == 100);
  CHECK(c.rank == 4);
  CHECK(c.batch_size == 1);
}

TEST_CASE("configuration key=value round trip") {
  TrainConfig c = small_config(42);
  c.lambda = 1.0 / 3.0;
  c.box_prompts = false;
  c.detections_file = "dets.json";
  TrainConfig back = TrainConfig::from_key_values(c.to_key_values());
  CHECK(back.to_key_values() == c.to_key_values());
  CHECK(back.lambda == c.lambda);
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"lamda", "0.5"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"epochs", "ten"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"box_prompts", "maybe"}}), ConfigError);
  TrainConfig zero;
  zero.epochs = 0;
  CHECK_THROWS_AS(zero.validate(), ConfigError);
  CHECK(TrainConfig::is_key("upper_lr"));
  CHECK_FALSE(TrainConfig::is_key("count"));
}

TEST_CASE("dataset split") {
  auto four = split_dataset(small_samples(4, 1), 3);
  CHECK(four.d1.size() == 2);
  CHECK(four.d2.size() == 2);
  auto five = split_dataset(small_samples(5, 1), 3);
  CHECK(five.d1.size() == 3);
  CHECK(five.d2.size() == 2);
  auto again = split_dataset(small_samples(5, 1), 3);
  std::vector<std::string> ids_a, ids_b;
  for (const auto& s : five.d1) ids_a.push_back(s.id);
  for (const auto& s : five.d2) ids_a.push_back(s.id);
  for (const auto& s : again.d1) ids_b.push_back(s.id);
  for (const auto& s : again.d2) ids_b.push_back(s.id);
  CHECK(ids_a == ids_b);
  std::sort(ids_a.begin(), ids_a.end());
  CHECK(std::adjacent_find(ids_a.begin(), ids_a.end()) == ids_a.end());
  CHECK_THROWS(split_dataset(small_samples(1, 1), 0));
}

TEST_CASE("each level only moves its own parameters") {
  TrainConfig cfg = small_config();
  AmSamModel model = AmSamModel::create(cfg);
  auto samples = small_samples(2, 4);
  std::vector<const Sample*> batch{&samples[0]};
  LevelOptimizer w_opt(model.weight_parameters(), adamw_config(cfg));
  LevelOptimizer a_opt(model.prompt_parameters(), adamw_config(cfg));

  const auto w0 = sums(model.weight_tensors());
  const auto a0 = checksum(model.prompt_embedding());
  lower_step(model, batch, w_opt, 1e-2);
  CHECK(checksum(model.prompt_embedding()) == a0);
  const auto w1 = sums(model.weight_tensors());
  CHECK(w1 != w0);
  upper_step(model, batch, a_opt, 1e-2);
  CHECK(sums(model.weight_tensors()) == w1);
  CHECK(checksum(model.prompt_embedding()) != a0);

  const auto a1 = checksum(model.prompt_embedding());
  lower_step(model, batch, w_opt, 0.0);
  upper_step(model, batch, a_opt, 0.0);
  CHECK(sums(model.weight_tensors()) == w1);
  CHECK(checksum(model.prompt_embedding()) == a1);
  for (const auto& p : model.weight_parameters()) CHECK_FALSE(p.tensor.has_grad());
  CHECK_FALSE(model.prompt_embedding().has_grad());
  CHECK_THROWS(lower_step(model, {}, w_opt, 1e-3));
  CHECK_THROWS(upper_step(model, {}, a_opt, 1e-3));
}

TEST_CASE("upper loss gradient with respect to the prompt embedding") {
  AmSamModel model = AmSamModel::create(small_config(5));
  auto samples = small_samples(2, 6);
  std::vector<const Sample*> batch{&samples[0], &samples[1]};
  std::mt19937_64 rng(7);
  auto loss = [&] { return batch_loss(model, batch); };
  CHECK(testing::max_grad_error(loss, {model.prompt_embedding()}, rng, 1e-5, 32) < 1e-3);
}

TEST_CASE("a small lower step usually reduces the batch loss") {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TrainConfig cfg = small_config(seed);
    AmSamModel model = AmSamModel::create(cfg);
    auto samples = small_samples(1, 100 + seed);
    std::vector<const Sample*> batch{&samples[0]};
    LevelOptimizer w_opt(model.weight_parameters(), adamw_config(cfg));
    const double before = lower_step(model, batch, w_opt, 1e-3);
    const double after = batch_loss(model, batch).item();
    if (after <= before) ++decreased;
  }
  CHECK(decreased >= 6);
}

TEST_CASE("training with zero learning rates is a no-op") {
  TrainConfig cfg = small_config(2);
  cfg.epochs = 1;
  cfg.lower_lr = 0.0;
  cfg.upper_lr = 0.0;
  auto data = split_dataset(small_samples(4, 8), cfg.seed);
  TrainResult r = train(cfg, data);
  AmSamModel init = AmSamModel::create(cfg);
  CHECK(r.best.tensors == init.export_tensors());
  REQUIRE(r.metrics.size() == 1);
  CHECK(r.metrics[0].d2_dice == r.initial_d2_dice);
}

TEST_CASE("a training run: freeze, schedule, selection, determinism") {
  TrainConfig cfg = small_config(3);
  cfg.epochs = 6;
  cfg.debug_checks = true;
  auto data = split_dataset(small_samples(5, 9), cfg.seed, small_samples(2, 99));
  AmSamModel init = AmSamModel::create(cfg);
  const auto frozen = sums(init.frozen_tensors());

  std::size_t callbacks = 0;
  TrainResult r = train(cfg, data, [&](const MetricsRow&) { ++callbacks; });
  CHECK(callbacks == 6);
  REQUIRE(r.metrics.size() == 6);
  CHECK(sums(AmSamModel::from_checkpoint(r.best).frozen_tensors()) == frozen);
  CHECK(r.frozen_before == checksum(init.frozen_tensors()));
  CHECK(r.frozen_after == r.frozen_before);

  const LrSchedule lower{cfg.lower_lr, 6 * 3, 0.9}, upper{cfg.upper_lr, 6 * 2, 0.9};
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& row : r.metrics) {
    CHECK(row.lr_lower == lr_at(lower, row.epoch * 3));
    CHECK(row.lr_upper == lr_at(upper, row.epoch * 2));
    CHECK(row.test_dice.has_value());
    if (row.d2_dice > best) {
      best = row.d2_dice;
      best_epoch = row.epoch;
    }
  }
  CHECK(r.best.best_d2_dice == best);
  CHECK(r.best.best_epoch == best_epoch);
  CHECK(r.best_test_dice == r.metrics[best_epoch - 1].test_dice);

  CHECK(r.steps.size() == 6 * 5);
  for (const auto& s : r.steps) {
    if (s.upper) {
      CHECK(s.w_before == s.w_after);
    } else {
      CHECK(s.a_before == s.a_after);
    }
  }

  CHECK(evaluate(r.best, data.d2) == r.best.best_d2_dice);
  CHECK(evaluate(deserialize_checkpoint(serialize_checkpoint(r.best)), data.d2) == r.best.best_d2_dice);

  TrainResult again = train(cfg, data);
  REQUIRE(again.metrics.size() == r.metrics.size());
  for (std::size_t i = 0; i < r.metrics.size(); ++i) {
    CHECK(again.metrics[i].lower_loss == r.metrics[i].lower_loss);
    CHECK(again.metrics[i].upper_loss == r.metrics[i].upper_loss);
    CHECK(again.metrics[i].d2_dice == r.metrics[i].d2_dice);
  }
  CHECK(again.best == r.best);
}

TEST_CASE("evaluation") {
  AmSamModel model = AmSamModel::create(small_config(1));
  auto samples = small_samples(2, 12);
  const double a = evaluate(model, {samples[0]}), b = evaluate(model, {samples[1]});
  CHECK(evaluate(model, samples) == doctest::Approx((a + b) / 2.0).epsilon(1e-15));
  CHECK(evaluate(model, samples) == evaluate(model, samples));
  TrainConfig no_box = small_config(1);
  no_box.box_prompts = false;
  AmSamModel blind = AmSamModel::create(no_box);
  Sample own = samples[0];
  own.mask = blind.predict_mask(samples[0]);
  CHECK(evaluate(blind, {own}) == 1.0);
  CHECK_THROWS(evaluate(model, {}));
}

TEST_CASE("tensor import checks names and shapes") {
  AmSamModel model = AmSamModel::create(small_config());
  auto tensors = model.export_tensors();
  CHECK_NOTHROW(model.import_tensors(tensors));

  auto missing = tensors;
  missing.pop_back();
  CHECK_THROWS_AS(model.import_tensors(missing), std::invalid_argument);
  auto extra = tensors;
  extra.push_back({"bogus", {1}, {0.0}});
  CHECK_THROWS_AS(model.import_tensors(extra), std::invalid_argument);
  auto dup = tensors;
  dup.push_back(tensors.front());
  CHECK_THROWS_AS(model.import_tensors(dup), std::invalid_argument);
  auto bad = tensors;
  bad.front().shape.push_back(1);
  CHECK_THROWS_AS(model.import_tensors(bad), DimensionError);
}

TEST_CASE("a non-finite loss aborts training with its position") {
  TrainConfig cfg = small_config();
  auto data = split_dataset(small_samples(4, 3), 0);
  for (auto& s : data.d1) s.image.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(cfg, data);
    FAIL("training did not abort");
  } catch (const TrainingAborted& e) {
    const std::string what = e.what();
    CHECK(what.find("lower") != std::string::npos);
    CHECK(what.find("epoch 1, step 1") != std::string::npos);
  }
}

TEST_CASE("training on the 4-example task beats the untrained model") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    SyntheticSpec spec;
    spec.count = 4;
    spec.seed = 100 + seed;
    TrainResult r = train(cfg, split_dataset(gen_synthetic(spec), seed));
    CAPTURE(seed);
    CHECK(r.best.best_d2_dice - r.initial_d2_dice >= 0.2);
  }
}
