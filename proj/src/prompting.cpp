#include "amsam/prompting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace amsam {

ToyImageEncoder::ToyImageEncoder(std::size_t image_h, std::size_t image_w, std::size_t patch, std::size_t dim,
                                 std::uint64_t seed)
    : image_h_(image_h), image_w_(image_w), patch_(patch) {
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
    throw ConfigError("image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " is not divisible by patch size " + std::to_string(patch));
  }
  std::mt19937_64 rng(seed);
  patch_embed_ = LinearLayer::random(patch * patch, dim, rng, true);
  // Patch intensities are in [0,1]; a nonzero bias keeps dark and bright patches apart after normalisation.
  patch_embed_.bias = Tensor::randn({dim}, rng, 0.5, false);
  pos_embed_ = Tensor::randn({num_tokens(), dim}, rng, 0.1, false);
  for (int i = 0; i < 2; ++i) {
    norms_.push_back(LayerNorm::create(dim, true));
    blocks_.push_back(AttentionBlock::create(dim, std::nullopt, rng, rng, true));
  }
}

Tensor ToyImageEncoder::encode(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != image_h_ || images.dim(3) != image_w_) {
    throw ConfigError("encoder expects images of shape (B,1," + std::to_string(image_h_) + "," +
                      std::to_string(image_w_) + "), got " + shape_to_string(images.shape()));
  }
  const std::size_t B = images.dim(0), rows = grid_rows(), cols = grid_cols(), p = patch_;
  Tensor patches = reshape(images, {B, rows, p, cols, p});
  patches = reshape(permute(patches, {0, 1, 3, 2, 4}), {B, rows * cols, p * p});
  Tensor x = add(patch_embed_.forward(patches), reshape(repeat_axis(reshape(pos_embed_, {1, rows * cols, dim()}), 0, B),
                                                        {B, rows * cols, dim()}));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Tensor h = norms_[i].forward(x);
    x = add(x, attention_forward(blocks_[i], h, h));
  }
  return x;
}

void ToyImageEncoder::collect(const std::string& prefix, ParameterSet& out) const {
  patch_embed_.collect(prefix + ".patch_embed", out);
  out.add(prefix + ".pos_embed", pos_embed_, true);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    norms_[i].collect(prefix + ".norm" + std::to_string(i), out);
    blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
  }
}

Tensor encode_image(const ToyImageEncoder& encoder, const Tensor& images) { return encoder.encode(images); }

namespace {

void validate_box(const BoundingBox& b, const std::string& where) {
  if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw std::invalid_argument(where + ": box corners must satisfy x1<x2, y1<y2");
  if (!(b.confidence >= 0.0 && b.confidence <= 1.0)) throw std::invalid_argument(where + ": confidence outside [0,1]");
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

FileDetections parse_detections(std::string_view text, std::string path) {
  using nlohmann::json;
  std::vector<std::string> seen;
  std::string duplicate;
  json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (event == json::parse_event_t::key && depth == 1) {
      auto key = parsed.get<std::string>();
      if (std::find(seen.begin(), seen.end(), key) != seen.end() && duplicate.empty()) duplicate = key;
      seen.push_back(std::move(key));
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(text.begin(), text.end(), cb);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!duplicate.empty()) throw std::runtime_error(path + ": duplicate image id '" + duplicate + "'");
  if (!doc.is_object()) throw std::runtime_error(path + ": top level must be an object keyed by image id");
  FileDetections out;
  out.path = std::move(path);
  for (const auto& [id, list] : doc.items()) {
    if (!list.is_array()) throw std::runtime_error(out.path + ": entry '" + id + "' must be a list of boxes");
    std::vector<BoundingBox> boxes;
    for (const auto& item : list) {
      try {
        BoundingBox b{item.at("x1").get<double>(), item.at("y1").get<double>(), item.at("x2").get<double>(),
                      item.at("y2").get<double>(), item.at("confidence").get<double>()};
        validate_box(b, out.path + " [" + id + "]");
        boxes.push_back(b);
      } catch (const json::exception& e) {
        throw std::runtime_error(out.path + ": malformed box for '" + id + "': " + e.what());
      }
    }
    out.entries.emplace(id, std::move(boxes));
  }
  return out;
}

FileDetections load_detections_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open detections file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_detections(buf.str(), path);
}

std::string format_detections(const FileDetections& detections) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [id, boxes] : detections.entries) {
    auto list = nlohmann::ordered_json::array();
    for (const auto& b : boxes) {
      list.push_back({{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"confidence", b.confidence}});
    }
    doc[id] = std::move(list);
  }
  return doc.dump(2) + "\n";
}

std::optional<BoundingBox> mask_bounding_box(const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("mask must be (H, W), got " + shape_to_string(mask.shape()));
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  auto m = mask.data();
  std::size_t x1 = W, y1 = H, x2 = 0, y2 = 0;
  bool any = false;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (m[y * W + x] != 0.0) {
        any = true;
        x1 = std::min(x1, x);
        x2 = std::max(x2, x);
        y1 = std::min(y1, y);
        y2 = std::max(y2, y);
      }
    }
  }
  if (!any) return std::nullopt;
  return BoundingBox{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2), static_cast<double>(y2),
                     1.0};
}

namespace {

// A one-pixel-wide extent is widened by one pixel so the corners stay distinct.
void widen_degenerate(double& lo, double& hi, std::size_t extent) {
  if (lo < hi) return;
  if (hi + 1.0 <= static_cast<double>(extent - 1)) {
    hi += 1.0;
  } else {
    lo -= 1.0;
  }
}

}  // namespace

std::vector<BoundingBox> detect_boxes(const DetectionSource& source, const std::string& image_id, const Tensor* mask) {
  if (std::holds_alternative<NoDetector>(source)) return {};
  if (const auto* file = std::get_if<FileDetections>(&source)) {
    auto it = file->entries.find(image_id);
    if (it == file->entries.end()) {
      throw std::runtime_error("detections file " + file->path + " has no entry for image id '" + image_id + "'");
    }
    return it->second;
  }
  const auto& oracle = std::get<OracleDetector>(source);
  if (!mask) throw std::invalid_argument("oracle detector needs the ground-truth mask of image '" + image_id + "'");
  auto tight = mask_bounding_box(*mask);
  if (!tight) return {};
  const std::size_t H = mask->dim(0), W = mask->dim(1);
  BoundingBox box = *tight;
  if (W > 1) widen_degenerate(box.x1, box.x2, W);
  if (H > 1) widen_degenerate(box.y1, box.y2, H);
  if (oracle.jitter_px > 0) {
    std::mt19937_64 rng(fnv1a(image_id, oracle.seed * 0x100000001b3ULL + 0x51ed27));
    std::uniform_int_distribution<int> grow(0, oracle.jitter_px);
    box.x1 = std::max(0.0, box.x1 - grow(rng));
    box.y1 = std::max(0.0, box.y1 - grow(rng));
    box.x2 = std::min(static_cast<double>(W - 1), box.x2 + grow(rng));
    box.y2 = std::min(static_cast<double>(H - 1), box.y2 + grow(rng));
  }
  return {box};
}

std::optional<std::size_t> select_best_box_index(const std::vector<BoundingBox>& boxes) {
  if (boxes.empty()) return std::nullopt;
  std::size_t best = 0;
  for (std::size_t i = 1; i < boxes.size(); ++i) {
    if (boxes[i].confidence > boxes[best].confidence) best = i;
  }
  return best;
}

std::optional<BoundingBox> select_best_box(const std::vector<BoundingBox>& boxes) {
  auto i = select_best_box_index(boxes);
  if (!i) return std::nullopt;
  return boxes[*i];
}

Tensor box_to_prompt_tokens(const BoundingBox& box, const FourierPositionalEncoder& encoder, std::size_t image_h,
                            std::size_t image_w, const Tensor& corner_types) {
  const std::size_t d = encoder.dim();
  if (corner_types.shape() != Shape{2, d}) {
    throw DimensionError("corner type vectors must be (2," + std::to_string(d) + "), got " +
                         shape_to_string(corner_types.shape()));
  }
  const double max_x = static_cast<double>(image_w - 1), max_y = static_cast<double>(image_h - 1);
  const double x1 = std::clamp(box.x1, 0.0, max_x), x2 = std::clamp(box.x2, 0.0, max_x);
  const double y1 = std::clamp(box.y1, 0.0, max_y), y2 = std::clamp(box.y2, 0.0, max_y);
  if (!(x1 < x2) || !(y1 < y2)) throw std::invalid_argument("degenerate box after clamping to the image");
  Tensor tl = reshape(encoder.encode(x1 / max_x, y1 / max_y), {1, d});
  Tensor br = reshape(encoder.encode(x2 / max_x, y2 / max_y), {1, d});
  return add(concat_axis0({tl, br}), corner_types);
}

PromptTokens assemble_prompts(const Tensor& prompt_embedding, const std::optional<Tensor>& box_tokens,
                              std::size_t batch) {
  if (batch == 0) throw DimensionError("assemble_prompts: batch must be positive");
  if (prompt_embedding.rank() != 2) {
    throw DimensionError("prompt embedding must be (n_A, d), got " + shape_to_string(prompt_embedding.shape()));
  }
  const std::size_t nA = prompt_embedding.dim(0), d = prompt_embedding.dim(1);
  Tensor rows = prompt_embedding;
  if (box_tokens) {
    if (box_tokens->shape() != Shape{2, d}) {
      throw DimensionError("box tokens must be (2," + std::to_string(d) + "), got " +
                           shape_to_string(box_tokens->shape()));
    }
    rows = concat_axis0({prompt_embedding, *box_tokens});
  }
  const std::size_t n = rows.dim(0);
  Tensor tokens = repeat_axis(reshape(rows, {1, n, d}), 0, batch);
  return PromptTokens{tokens, nA, box_tokens.has_value()};
}

PromptTokens assemble_prompts(const Tensor& prompt_embedding, const std::vector<std::optional<Tensor>>& box_tokens,
                              const Tensor& missing_box) {
  if (box_tokens.empty()) throw DimensionError("assemble_prompts: empty batch");
  const bool any = std::any_of(box_tokens.begin(), box_tokens.end(), [](const auto& t) { return t.has_value(); });
  if (!any) return assemble_prompts(prompt_embedding, std::nullopt, box_tokens.size());
  std::vector<Tensor> rows;
  for (const auto& t : box_tokens) {
    PromptTokens one = assemble_prompts(prompt_embedding, t ? *t : missing_box, 1);
    rows.push_back(one.tokens);
  }
  return PromptTokens{concat_axis0(rows), prompt_embedding.dim(0), true};
}

}  // namespace amsam
