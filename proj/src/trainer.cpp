#include "amsam/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <variant>

namespace amsam {

// ------------------------------------------------------------------- config

namespace {

using Field = std::variant<double TrainConfig::*, std::size_t TrainConfig::*,
                           int TrainConfig::*, bool TrainConfig::*, std::string TrainConfig::*>;

const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"lambda", &TrainConfig::lambda},
      {"alpha", &TrainConfig::alpha},
      {"lower_lr", &TrainConfig::lower_lr},
      {"upper_lr", &TrainConfig::upper_lr},
      {"beta1", &TrainConfig::beta1},
      {"beta2", &TrainConfig::beta2},
      {"adam_eps", &TrainConfig::adam_eps},
      {"weight_decay", &TrainConfig::weight_decay},
      {"epochs", &TrainConfig::epochs},
      {"rank", &TrainConfig::rank},
      {"batch_size", &TrainConfig::batch_size},
      {"prompt_tokens", &TrainConfig::prompt_tokens},
      {"seed", &TrainConfig::seed},
      {"backbone_seed", &TrainConfig::backbone_seed},
      {"box_prompts", &TrainConfig::box_prompts},
      {"calibration", &TrainConfig::calibration},
      {"per_batch_calibration", &TrainConfig::per_batch_calibration},
      {"jitter_px", &TrainConfig::jitter_px},
      {"detections_file", &TrainConfig::detections_file},
      {"image_size", &TrainConfig::image_size},
      {"patch", &TrainConfig::patch},
      {"dim", &TrainConfig::dim},
      {"embed_channels", &TrainConfig::embed_channels},
      {"num_masks", &TrainConfig::num_masks},
      {"decoder_blocks", &TrainConfig::decoder_blocks},
      {"pe_sigma", &TrainConfig::pe_sigma},
      {"debug_checks", &TrainConfig::debug_checks},
  };
  return fields;
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T value{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': '" + text + "' is not a valid integer");
  }
  return value;
}

double parse_real(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': '" + text + "' is not a number");
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ConfigError("config key '" + key + "': '" + text + "' is not a boolean");
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(epochs >= 1, "epochs must be at least 1");
  need(batch_size >= 1, "batch_size must be at least 1");
  need(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  need(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
  need(lower_lr >= 0.0 && upper_lr >= 0.0, "learning rates must be non-negative");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  need(adam_eps > 0.0, "adam_eps must be positive");
  need(weight_decay >= 0.0, "weight_decay must be non-negative");
  need(prompt_tokens >= 1, "prompt_tokens must be at least 1");
  need(dim >= 8 && dim % 4 == 0, "dim must be a multiple of 4 and at least 8");
  need(num_masks >= 2, "num_masks must be at least 2 (background and foreground)");
  need(embed_channels >= 1, "embed_channels must be positive");
  need(patch == 4, "patch must be 4 so that the x4 upscaler restores the image size");
  need(image_size >= patch && image_size % patch == 0, "image_size must be a multiple of patch");
  need(rank >= 1 && rank < dim, "rank must satisfy 0 < rank < dim");
  need(jitter_px >= 0, "jitter_px must be non-negative");
  need(pe_sigma > 0.0, "pe_sigma must be positive");
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  for (const auto& [key, field] : config_fields()) {
    std::visit(
        [&, key = key](auto member) {
          const auto& v = this->*member;
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, double>) {
            kv.emplace_back(key, format_real(v));
          } else if constexpr (std::is_same_v<V, bool>) {
            kv.emplace_back(key, v ? "true" : "false");
          } else if constexpr (std::is_same_v<V, std::string>) {
            kv.emplace_back(key, v);
          } else {
            kv.emplace_back(key, std::to_string(v));
          }
        },
        field);
  }
  return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) { return from_key_values(kv, TrainConfig{}); }

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, TrainConfig base) {
  for (const auto& [key, text] : kv) {
    const auto& fields = config_fields();
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
    std::visit(
        [&, key = key, text = text](auto member) {
          auto& v = base.*member;
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, double>) {
            v = parse_real(key, text);
          } else if constexpr (std::is_same_v<V, bool>) {
            v = parse_bool(key, text);
          } else if constexpr (std::is_same_v<V, std::string>) {
            v = text;
          } else {
            v = parse_integer<V>(key, text);
          }
        },
        it->second);
  }
  return base;
}

bool TrainConfig::is_key(const std::string& key) {
  const auto& fields = config_fields();
  return std::any_of(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
}

AdamWConfig adamw_config(const TrainConfig& config) {
  return AdamWConfig{config.beta1, config.beta2, config.adam_eps, config.weight_decay};
}

LossConfig loss_config(const TrainConfig& config) {
  LossConfig cfg;
  cfg.lambda = config.lambda;
  return cfg;
}

// -------------------------------------------------------------------- model

namespace {

constexpr std::uint64_t kPromptStream = 0x9e3779b97f4a7c15ULL;

MaskDecoderConfig decoder_config(const TrainConfig& c) {
  MaskDecoderConfig d;
  d.dim = c.dim;
  d.grid_rows = c.image_size / c.patch;
  d.grid_cols = c.image_size / c.patch;
  d.num_masks = c.num_masks;
  d.embed_channels = c.embed_channels;
  d.lora_rank = c.rank;
  d.num_blocks = c.decoder_blocks;
  d.alpha = c.alpha;
  d.calibration_enabled = c.calibration;
  d.per_batch_calibration = c.per_batch_calibration;
  return d;
}

DetectionSource make_detector(const TrainConfig& c) {
  if (!c.box_prompts) return NoDetector{};
  if (!c.detections_file.empty()) return load_detections_file(c.detections_file);
  return OracleDetector{c.jitter_px, c.seed};
}

}  // namespace

AmSamModel::AmSamModel(const TrainConfig& config)
    : config_(config),
      encoder_(config.image_size, config.image_size, config.patch, config.dim, config.backbone_seed),
      pe_(config.dim, config.pe_sigma, config.backbone_seed + 1) {}

AmSamModel AmSamModel::create(const TrainConfig& config) {
  config.validate();
  AmSamModel m(config);
  const std::size_t rows = config.image_size / config.patch;
  Tensor image_pe = m.pe_.encode_grid(rows, rows, config.image_size, config.image_size);
  m.decoder_ = MaskDecoder::create(decoder_config(config), image_pe, config.backbone_seed + 2, config.seed);
  m.detector_ = make_detector(config);
  // Prompt-related tensors use their own stream so that toggling box prompts
  // leaves the rest of the initialisation unchanged.
  std::mt19937_64 prompt_rng(config.seed ^ kPromptStream);
  m.prompt_embedding_ = Tensor::randn({config.prompt_tokens, config.dim}, prompt_rng, 1.0, true);
  m.corner_types_ = Tensor::randn({2, config.dim}, prompt_rng, 1.0, true);
  return m;
}

AmSamModel AmSamModel::from_checkpoint(const Checkpoint& checkpoint) {
  AmSamModel m = create(TrainConfig::from_key_values(checkpoint.config));
  m.import_tensors(checkpoint.tensors);
  return m;
}

std::vector<Parameter> AmSamModel::weight_parameters() const {
  ParameterSet set;
  decoder_.collect("decoder", set);
  set.add("corner_types", corner_types_, false);
  return set.trainable;
}

std::vector<Parameter> AmSamModel::prompt_parameters() const { return {Parameter{"prompt_embedding", prompt_embedding_}}; }

std::vector<Parameter> AmSamModel::frozen_parameters() const {
  ParameterSet set;
  encoder_.collect("encoder", set);
  pe_.collect("pe", set);
  decoder_.collect("decoder", set);
  return set.frozen;
}

namespace {

std::vector<Tensor> tensors_of(const std::vector<Parameter>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

}  // namespace

std::vector<Tensor> AmSamModel::weight_tensors() const { return tensors_of(weight_parameters()); }
std::vector<Tensor> AmSamModel::frozen_tensors() const { return tensors_of(frozen_parameters()); }

Tensor AmSamModel::image_embedding(const Tensor& image) const {
  const std::uint64_t key = checksum(image);
  auto it = embedding_cache_.find(key);
  if (it != embedding_cache_.end()) return it->second;
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 1) throw DimensionError("image must be (1,H,W), got " + shape_to_string(s));
  Tensor emb = encoder_.encode(reshape(image.detach(), {1, 1, s[1], s[2]})).detach();
  embedding_cache_.emplace(key, emb);
  return emb;
}

Tensor AmSamModel::box_tokens(const BoundingBox& box) const {
  return box_to_prompt_tokens(box, pe_, config_.image_size, config_.image_size, corner_types_);
}

std::optional<Tensor> AmSamModel::detected_box_tokens(const Sample& sample) const {
  if (std::holds_alternative<NoDetector>(detector_)) return std::nullopt;
  auto box = select_best_box(detect_boxes(detector_, sample.id, &sample.mask));
  if (!box) return std::nullopt;
  return box_tokens(*box);
}

DecoderOutput AmSamModel::forward(const std::vector<const Sample*>& batch) const {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  std::vector<Tensor> embeddings;
  std::vector<std::optional<Tensor>> boxes;
  for (const Sample* s : batch) {
    embeddings.push_back(image_embedding(s->image));
    boxes.push_back(detected_box_tokens(*s));
  }
  const Tensor emb = embeddings.size() == 1 ? embeddings.front() : concat_axis0(embeddings);
  return decoder_.forward(emb, assemble_prompts(prompt_embedding_, boxes, corner_types_));
}

DecoderOutput AmSamModel::forward_image(const Tensor& image, const std::optional<BoundingBox>& box) const {
  std::optional<Tensor> tokens;
  if (box && config_.box_prompts) tokens = box_tokens(*box);
  return decoder_.forward(image_embedding(image), assemble_prompts(prompt_embedding_, tokens, 1));
}

Tensor AmSamModel::predict_mask(const Sample& sample) const {
  return binarize_prediction(forward({&sample}).m_final);
}

std::vector<NamedTensor> AmSamModel::export_tensors() const {
  std::vector<NamedTensor> out;
  auto params = weight_parameters();
  auto prompt = prompt_parameters();
  params.insert(params.end(), prompt.begin(), prompt.end());
  for (const auto& p : params) {
    auto d = p.tensor.data();
    out.push_back(NamedTensor{p.name, p.tensor.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return out;
}

void AmSamModel::import_tensors(const std::vector<NamedTensor>& tensors) {
  auto params = weight_parameters();
  auto prompt = prompt_parameters();
  params.insert(params.end(), prompt.begin(), prompt.end());
  std::map<std::string, const NamedTensor*> by_name;
  std::vector<std::string> unknown, duplicate, missing;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) duplicate.push_back(t.name);
  }
  std::set<std::string> known;
  for (const auto& p : params) {
    known.insert(p.name);
    if (!by_name.count(p.name)) missing.push_back(p.name);
  }
  for (const auto& [name, t] : by_name) {
    if (!known.count(name)) unknown.push_back(name);
  }
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  if (!unknown.empty()) throw std::invalid_argument("unknown tensor names: " + join(unknown));
  if (!duplicate.empty()) throw std::invalid_argument("duplicate tensor names: " + join(duplicate));
  if (!missing.empty()) throw std::invalid_argument("missing tensors: " + join(missing));
  for (const auto& p : params) {
    const NamedTensor& t = *by_name.at(p.name);
    if (t.shape != p.tensor.shape()) {
      throw DimensionError("tensor '" + p.name + "' has shape " + shape_to_string(t.shape) + ", model expects " +
                           shape_to_string(p.tensor.shape()));
    }
  }
  for (const auto& p : params) {
    const auto& values = by_name.at(p.name)->values;
    Tensor t = p.tensor;
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

// ------------------------------------------------------------------ training

SplitDataset split_dataset(std::vector<Sample> samples, std::uint64_t seed, std::vector<Sample> test) {
  if (samples.size() < 2) throw std::invalid_argument("bi-level training needs at least 2 training samples");
  std::mt19937_64 rng(seed);
  std::shuffle(samples.begin(), samples.end(), rng);
  const std::size_t n1 = (samples.size() + 1) / 2;
  SplitDataset split;
  split.d1.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n1));
  split.d2.assign(samples.begin() + static_cast<std::ptrdiff_t>(n1), samples.end());
  split.test = std::move(test);
  return split;
}

LevelOptimizer::LevelOptimizer(std::vector<Parameter> params, AdamWConfig config) : params_(std::move(params)) {
  states_.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) states_.emplace_back(config);
}

void LevelOptimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].tensor.has_grad()) continue;
    adamw_step({params_[i]}, states_[i], lr);
  }
}

void LevelOptimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Tensor batch_loss(const AmSamModel& model, const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<Tensor> masks;
  for (const Sample* s : batch) masks.push_back(s->mask);
  return combined_loss(model.forward(batch).m_final, SegmentationTarget::from_masks(masks), loss_config(model.config()));
}

namespace {

void set_flags(const std::vector<Parameter>& params, bool flag) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(flag);
  }
}

double level_step(AmSamModel& model, const std::vector<const Sample*>& batch, LevelOptimizer& optimizer, double lr,
                  bool upper) {
  if (batch.empty()) throw std::invalid_argument(std::string(upper ? "upper" : "lower") + "_step: empty batch");
  const auto w = model.weight_parameters();
  const auto a = model.prompt_parameters();
  set_flags(upper ? w : a, false);
  set_flags(upper ? a : w, true);
  optimizer.zero_grad();
  Tensor loss = batch_loss(model, batch);
  const double value = loss.item();
  if (std::isfinite(value)) {
    loss.backward();
    optimizer.step(lr);
  }
  optimizer.zero_grad();
  set_flags(w, true);
  set_flags(a, true);
  return value;
}

}  // namespace

double lower_step(AmSamModel& model, const std::vector<const Sample*>& batch, LevelOptimizer& w_optimizer, double lr) {
  return level_step(model, batch, w_optimizer, lr, false);
}

double upper_step(AmSamModel& model, const std::vector<const Sample*>& batch, LevelOptimizer& a_optimizer, double lr) {
  return level_step(model, batch, a_optimizer, lr, true);
}

double evaluate(const AmSamModel& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  double total = 0.0;
  for (const auto& s : samples) total += dice_score(model.predict_mask(s), s.mask);
  return total / static_cast<double>(samples.size());
}

double evaluate(const Checkpoint& checkpoint, const std::vector<Sample>& samples) {
  return evaluate(AmSamModel::from_checkpoint(checkpoint), samples);
}

Checkpoint make_checkpoint(const AmSamModel& model, double d2_dice, std::size_t epoch) {
  return Checkpoint{model.config().to_key_values(), model.export_tensors(), d2_dice, epoch};
}

namespace {

std::vector<std::vector<const Sample*>> make_batches(const std::vector<Sample>& samples, std::size_t batch_size,
                                                     std::mt19937_64& rng) {
  std::vector<const Sample*> order;
  for (const auto& s : samples) order.push_back(&s);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<const Sample*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return batches;
}

std::size_t batch_count(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

}  // namespace

TrainResult train(const TrainConfig& config, const SplitDataset& data, const EpochCallback& on_epoch) {
  config.validate();
  if (data.d1.empty() || data.d2.empty()) throw std::invalid_argument("train: D1 and D2 must both be nonempty");
  AmSamModel model = AmSamModel::create(config);
  LevelOptimizer w_opt(model.weight_parameters(), adamw_config(config));
  LevelOptimizer a_opt(model.prompt_parameters(), adamw_config(config));
  const LrSchedule lower{config.lower_lr, config.epochs * batch_count(data.d1.size(), config.batch_size), 0.9};
  const LrSchedule upper{config.upper_lr, config.epochs * batch_count(data.d2.size(), config.batch_size), 0.9};
  std::mt19937_64 order_rng(config.seed + 17);

  TrainResult result;
  result.frozen_before = checksum(model.frozen_tensors());
  result.initial_d2_dice = evaluate(model, data.d2);
  std::size_t lower_iter = 0, upper_iter = 0;
  bool have_best = false;

  auto run_level = [&](const std::vector<Sample>& samples, bool is_upper, std::size_t epoch, double& loss_sum) {
    auto batches = make_batches(samples, config.batch_size, order_rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::size_t& iter = is_upper ? upper_iter : lower_iter;
      const double lr = lr_at(is_upper ? upper : lower, iter);
      StepRecord rec{epoch, b, is_upper, 0, 0, 0, 0};
      if (config.debug_checks) {
        rec.w_before = checksum(model.weight_tensors());
        rec.a_before = checksum(model.prompt_embedding());
      }
      const double loss = is_upper ? upper_step(model, batches[b], a_opt, lr) : lower_step(model, batches[b], w_opt, lr);
      if (!std::isfinite(loss)) {
        throw TrainingAborted(std::string(is_upper ? "upper" : "lower") + "-level loss is not finite at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(b + 1));
      }
      ++iter;
      loss_sum += loss;
      if (config.debug_checks) {
        rec.w_after = checksum(model.weight_tensors());
        rec.a_after = checksum(model.prompt_embedding());
        const bool leaked = is_upper ? rec.w_after != rec.w_before : rec.a_after != rec.a_before;
        if (leaked) {
          throw std::logic_error(std::string(is_upper ? "W changed during an upper" : "A changed during a lower") +
                                 " step at epoch " + std::to_string(epoch));
        }
        result.steps.push_back(rec);
      }
    }
    return batches.size();
  };

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double lower_sum = 0.0, upper_sum = 0.0;
    const std::size_t n_lower = run_level(data.d1, false, epoch, lower_sum);
    const std::size_t n_upper = run_level(data.d2, true, epoch, upper_sum);

    MetricsRow row;
    row.epoch = epoch;
    row.lower_loss = lower_sum / static_cast<double>(n_lower);
    row.upper_loss = upper_sum / static_cast<double>(n_upper);
    row.d2_dice = evaluate(model, data.d2);
    if (!data.test.empty()) row.test_dice = evaluate(model, data.test);
    row.lr_lower = lr_at(lower, lower_iter);
    row.lr_upper = lr_at(upper, upper_iter);
    result.metrics.push_back(row);

    if (!have_best || row.d2_dice > result.best.best_d2_dice) {
      result.best = make_checkpoint(model, row.d2_dice, epoch);
      result.best_test_dice = row.test_dice;
      have_best = true;
    }
    if (on_epoch) on_epoch(row);
  }
  result.frozen_after = checksum(model.frozen_tensors());
  return result;
}

}  // namespace amsam
