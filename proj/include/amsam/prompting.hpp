#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "amsam/nn.hpp"
#include "amsam/tensor.hpp"

namespace amsam {

/// Frozen stand-in for a pretrained ViT image encoder: patch embedding,
/// learned-looking positional embeddings and two pre-norm attention blocks,
/// all drawn from a fixed seed and never trained.
class ToyImageEncoder {
 public:
  ToyImageEncoder(std::size_t image_h, std::size_t image_w, std::size_t patch, std::size_t dim, std::uint64_t seed);

  std::size_t image_h() const { return image_h_; }
  std::size_t image_w() const { return image_w_; }
  std::size_t patch() const { return patch_; }
  std::size_t dim() const { return patch_embed_.out_features(); }
  std::size_t grid_rows() const { return image_h_ / patch_; }
  std::size_t grid_cols() const { return image_w_ / patch_; }
  std::size_t num_tokens() const { return grid_rows() * grid_cols(); }

  /// images (B, 1, H, W) -> (B, h0*w0, d).
  Tensor encode(const Tensor& images) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

 private:
  std::size_t image_h_, image_w_, patch_;
  LinearLayer patch_embed_;
  Tensor pos_embed_;
  std::vector<LayerNorm> norms_;
  std::vector<AttentionBlock> blocks_;
};

Tensor encode_image(const ToyImageEncoder& encoder, const Tensor& images);

/// Pixel-coordinate box; (x1, y1) top-left, (x2, y2) bottom-right, inclusive.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double confidence = 1.0;

  bool operator==(const BoundingBox&) const = default;
};

/// Tight box of the ground-truth foreground with each edge pushed outwards by
/// 0..`jitter_px` pixels (deterministic per seed and image id), so the box
/// always covers the object.
struct OracleDetector {
  int jitter_px = 2;
  std::uint64_t seed = 0;
};

/// Boxes produced by an external detector and stored per image id.
struct FileDetections {
  std::string path;
  std::map<std::string, std::vector<BoundingBox>> entries;
};

/// Box prompting disabled.
struct NoDetector {};

using DetectionSource = std::variant<NoDetector, OracleDetector, FileDetections>;

/// Parses `{"<image id>": [{"x1":..,"y1":..,"x2":..,"y2":..,"confidence":..}, ...], ...}`.
/// Duplicate ids and malformed boxes are rejected.
FileDetections parse_detections(std::string_view text, std::string path = "<memory>");
FileDetections load_detections_file(const std::string& path);
std::string format_detections(const FileDetections& detections);

/// Tight bounding box of the nonzero pixels of an (H, W) mask; empty when the mask is all background.
std::optional<BoundingBox> mask_bounding_box(const Tensor& mask);

/// `mask` is required for the oracle and ignored otherwise.
std::vector<BoundingBox> detect_boxes(const DetectionSource& source, const std::string& image_id, const Tensor* mask);

/// Highest confidence wins; ties go to the lowest index.
std::optional<std::size_t> select_best_box_index(const std::vector<BoundingBox>& boxes);
std::optional<BoundingBox> select_best_box(const std::vector<BoundingBox>& boxes);

/// Two prompt tokens (2, d): positional code of each normalised corner plus
/// that corner's trainable type vector (rows of `corner_types`, shape (2, d)).
Tensor box_to_prompt_tokens(const BoundingBox& box, const FourierPositionalEncoder& encoder, std::size_t image_h,
                            std::size_t image_w, const Tensor& corner_types);

struct PromptTokens {
  Tensor tokens;  // (B, n_A [+2], d)
  std::size_t learnable_count = 0;
  bool has_box = false;
};

/// Learnable prompt rows first, then the box corners. With a single (or no) box shared by the batch.
PromptTokens assemble_prompts(const Tensor& prompt_embedding, const std::optional<Tensor>& box_tokens,
                              std::size_t batch);
/// One optional box per batch row. Rows without a box use `missing_box` (2, d) when others have one.
PromptTokens assemble_prompts(const Tensor& prompt_embedding, const std::vector<std::optional<Tensor>>& box_tokens,
                              const Tensor& missing_box);

}  // namespace amsam
