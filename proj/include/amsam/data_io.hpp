#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "amsam/checkpoint.hpp"
#include "amsam/sample.hpp"

namespace amsam {

enum class ShapeFamily { Rectangle, Ellipse, Mixed };

std::string to_string(ShapeFamily family);
ShapeFamily parse_shape_family(const std::string& text);

/// Generator settings for the synthetic few-shot task.
struct SyntheticSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  ShapeFamily family = ShapeFamily::Ellipse;
  double fg_mean = 0.75;
  double bg_mean = 0.25;
  double noise_sigma = 0.05;
  std::size_t count = 4;
  std::uint64_t seed = 0;
  std::string id_prefix;
  double min_occupancy = 0.05;
  double max_occupancy = 0.60;
};

/// One random shape per sample; masks cover between min and max occupancy
/// (shapes are redrawn until they do). Image values are quantised to k/255.
std::vector<Sample> gen_synthetic(const SyntheticSpec& spec);

/// Raised for malformed binary files; `offset` is the byte position of the problem.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Binary 8-bit portable graymap (P5).
void save_image(const std::filesystem::path& path, const Tensor& image);  // (1,H,W) or (H,W), values in [0,1]
void save_mask(const std::filesystem::path& path, const Tensor& mask);    // (H,W) binary -> {0,255}
Tensor load_image(const std::filesystem::path& path);                     // -> (1,H,W) in [0,1]
Tensor load_mask(const std::filesystem::path& path);                      // -> (H,W) in {0,1}

/// `img_<id>.pgm` / `mask_<id>.pgm` pairs directly inside `dir`, sorted by id.
std::vector<Sample> load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);

enum class CheckpointErrorKind { Format, Version, ShapeMismatch, Checksum };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what);
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline constexpr int kCheckpointVersion = 1;

/// Text manifest, raw little-endian doubles, FNV-1a trailer over everything before it.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct MetricsRow {
  std::size_t epoch = 0;
  double lower_loss = 0.0;
  double upper_loss = 0.0;
  double d2_dice = 0.0;
  std::optional<double> test_dice;
  double lr_lower = 0.0;
  double lr_upper = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,lower_loss,upper_loss,d2_dice,test_dice,lr_lower,lr_upper";

std::string format_metrics(const std::vector<MetricsRow>& rows);
void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics(const std::string& text);
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

/// Flat `key=value` lines with `#` comments.
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<config>");
std::string format_key_values(const KeyValues& kv);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace amsam
