#include "amsam/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace amsam {

namespace fs = std::filesystem;

void validate_sample(const Sample& sample) {
  if (sample.image.rank() != 3 || sample.image.dim(0) != 1 || sample.mask.rank() != 2 ||
      sample.image.dim(1) != sample.mask.dim(0) || sample.image.dim(2) != sample.mask.dim(1)) {
    throw DimensionError("sample '" + sample.id + "': image " + shape_to_string(sample.image.shape()) +
                         " and mask " + shape_to_string(sample.mask.shape()) + " disagree");
  }
  for (double v : sample.mask.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("sample '" + sample.id + "': mask is not binary");
  }
}

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::Rectangle: return "rectangle";
    case ShapeFamily::Ellipse: return "ellipse";
    case ShapeFamily::Mixed: return "mixed";
  }
  return "?";
}

ShapeFamily parse_shape_family(const std::string& text) {
  if (text == "rectangle") return ShapeFamily::Rectangle;
  if (text == "ellipse") return ShapeFamily::Ellipse;
  if (text == "mixed") return ShapeFamily::Mixed;
  throw std::invalid_argument("unknown shape family '" + text + "' (expected rectangle, ellipse or mixed)");
}

namespace {

std::string sample_id(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return prefix + buf;
}

std::vector<double> draw_shape(ShapeFamily family, std::size_t H, std::size_t W, std::mt19937_64& rng) {
  std::vector<double> mask(H * W, 0.0);
  const double h = static_cast<double>(H), w = static_cast<double>(W);
  if (family == ShapeFamily::Rectangle) {
    std::uniform_int_distribution<std::size_t> rw(std::max<std::size_t>(2, W / 6), std::max<std::size_t>(2, W * 4 / 5));
    std::uniform_int_distribution<std::size_t> rh(std::max<std::size_t>(2, H / 6), std::max<std::size_t>(2, H * 4 / 5));
    const std::size_t bw = std::min(rw(rng), W), bh = std::min(rh(rng), H);
    std::uniform_int_distribution<std::size_t> ox(0, W - bw), oy(0, H - bh);
    const std::size_t x0 = ox(rng), y0 = oy(rng);
    for (std::size_t y = y0; y < y0 + bh; ++y) {
      for (std::size_t x = x0; x < x0 + bw; ++x) mask[y * W + x] = 1.0;
    }
    return mask;
  }
  std::uniform_real_distribution<double> rx(w * 0.1, w * 0.42), ry(h * 0.1, h * 0.42);
  const double ax = rx(rng), ay = ry(rng);
  std::uniform_real_distribution<double> cx(ax - 0.5, w - 0.5 - ax), cy(ay - 0.5, h - 0.5 - ay);
  const double x0 = cx(rng), y0 = cy(rng);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = (static_cast<double>(x) - x0) / ax, dy = (static_cast<double>(y) - y0) / ay;
      if (dx * dx + dy * dy <= 1.0) mask[y * W + x] = 1.0;
    }
  }
  return mask;
}

}  // namespace

std::vector<Sample> gen_synthetic(const SyntheticSpec& spec) {
  if (spec.height < 4 || spec.width < 4) throw std::invalid_argument("synthetic images must be at least 4x4");
  if (!(spec.min_occupancy >= 0.0 && spec.min_occupancy < spec.max_occupancy && spec.max_occupancy <= 1.0)) {
    throw std::invalid_argument("synthetic occupancy bounds are infeasible");
  }
  if (!(spec.noise_sigma >= 0.0)) throw std::invalid_argument("noise sigma must be non-negative");
  const std::size_t H = spec.height, W = spec.width;
  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < spec.count; ++i) {
    std::vector<double> mask;
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      ShapeFamily family = spec.family;
      if (family == ShapeFamily::Mixed) family = coin(rng) ? ShapeFamily::Rectangle : ShapeFamily::Ellipse;
      mask = draw_shape(family, H, W, rng);
      double occupancy = 0.0;
      for (double v : mask) occupancy += v;
      occupancy /= static_cast<double>(H * W);
      ok = occupancy >= spec.min_occupancy && occupancy <= spec.max_occupancy;
    }
    if (!ok) throw std::invalid_argument("no shape satisfying the occupancy bounds fits the image");
    std::vector<double> image(H * W);
    for (std::size_t p = 0; p < H * W; ++p) {
      double v = mask[p] != 0.0 ? spec.fg_mean : spec.bg_mean;
      if (spec.noise_sigma > 0.0) v += noise(rng);
      image[p] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    }
    out.push_back(Sample{sample_id(spec.id_prefix, i), Tensor::from_data({1, H, W}, std::move(image)),
                         Tensor::from_data({H, W}, std::move(mask))});
  }
  return out;
}

ParseError::ParseError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

struct Graymap {
  std::size_t width = 0, height = 0, maxval = 255;
  std::vector<unsigned char> pixels;
};

std::string encode_pgm(std::size_t width, std::size_t height, const std::vector<unsigned char>& pixels) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

Graymap decode_pgm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) { throw ParseError(name + ": " + msg, pos); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  std::size_t token_start = 0;
  auto read_uint = [&](const char* what) {
    skip_space();
    token_start = pos;
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      fail(std::string("expected ") + what);
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1000000) fail(std::string(what) + " too large");
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') fail("not a binary graymap (missing P5 magic)");
  pos = 2;
  Graymap g;
  g.width = read_uint("width");
  g.height = read_uint("height");
  g.maxval = read_uint("maxval");
  if (g.width == 0 || g.height == 0) fail("zero image dimension");
  if (g.maxval == 0 || g.maxval > 255) {
    pos = token_start;
    fail("only 8-bit graymaps are supported");
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing separator after header");
  ++pos;
  const std::size_t need = g.width * g.height;
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    fail("truncated payload: expected " + std::to_string(need) + " pixel bytes");
  }
  g.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return g;
}

}  // namespace

void save_image(const fs::path& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (!(s.size() == 2 || (s.size() == 3 && s[0] == 1))) {
    throw DimensionError("save_image expects (1,H,W) or (H,W), got " + shape_to_string(s));
  }
  const std::size_t H = s[s.size() - 2], W = s.back();
  std::vector<unsigned char> px(H * W);
  auto d = image.data();
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(d[i], 0.0, 1.0) * 255.0));
  }
  write_file(path, encode_pgm(W, H, px));
}

void save_mask(const fs::path& path, const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("save_mask expects (H,W), got " + shape_to_string(mask.shape()));
  std::vector<unsigned char> px(mask.numel());
  auto d = mask.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = d[i] != 0.0 ? 255 : 0;
  write_file(path, encode_pgm(mask.dim(1), mask.dim(0), px));
}

Tensor load_image(const fs::path& path) {
  Graymap g = decode_pgm(read_file(path), path.string());
  std::vector<double> v(g.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(g.pixels[i]) / static_cast<double>(g.maxval);
  return Tensor::from_data({1, g.height, g.width}, std::move(v));
}

Tensor load_mask(const fs::path& path) {
  const std::string bytes = read_file(path);
  Graymap g = decode_pgm(bytes, path.string());
  const std::size_t header = bytes.size() - g.pixels.size();
  std::vector<double> v(g.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (g.pixels[i] == 0) {
      v[i] = 0.0;
    } else if (g.pixels[i] == g.maxval) {
      v[i] = 1.0;
    } else {
      throw ParseError(path.string() + ": mask pixel value " + std::to_string(g.pixels[i]) + " is not binary",
                       header + i);
    }
  }
  return Tensor::from_data({g.height, g.width}, std::move(v));
}

std::vector<Sample> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory " + dir.string() + " does not exist");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.starts_with("img_") && name.ends_with(".pgm")) {
      ids.push_back(name.substr(4, name.size() - 8));
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<Sample> out;
  for (const auto& id : ids) {
    const fs::path mask_path = dir / ("mask_" + id + ".pgm");
    if (!fs::exists(mask_path)) throw std::runtime_error("image '" + id + "' has no mask file " + mask_path.string());
    Sample s{id, load_image(dir / ("img_" + id + ".pgm")), load_mask(mask_path)};
    validate_sample(s);
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  for (const auto& s : samples) {
    validate_sample(s);
    save_image(dir / ("img_" + s.id + ".pgm"), s.image);
    save_mask(dir / ("mask_" + s.id + ".pgm"), s.mask);
  }
}

// ---------------------------------------------------------------- checkpoints

CheckpointError::CheckpointError(CheckpointErrorKind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

namespace {

constexpr std::size_t kTrailerSize = 26;  // "checksum " + 16 hex digits + "\n"

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void append_le(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

bool valid_token(const std::string& s) {
  return !s.empty() && std::none_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string manifest = "AMCK " + std::to_string(kCheckpointVersion) + "\n";
  for (const auto& [k, v] : ck.config) {
    if (!valid_token(k) || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("config entry '" + k + "' cannot be stored in a checkpoint");
    }
    manifest += "config " + k + " " + v + "\n";
  }
  manifest += "best_d2_dice " + format_double(ck.best_d2_dice) + "\n";
  manifest += "best_epoch " + std::to_string(ck.best_epoch) + "\n";
  std::size_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (!valid_token(t.name)) throw std::invalid_argument("tensor name '" + t.name + "' is not storable");
    if (shape_numel(t.shape) != t.values.size()) {
      throw std::invalid_argument("tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                                  " values for shape " + shape_to_string(t.shape));
    }
    manifest += "tensor " + t.name + " " + std::to_string(t.shape.size());
    for (auto d : t.shape) manifest += " " + std::to_string(d);
    manifest += " " + std::to_string(offset) + " " + std::to_string(t.values.size()) + "\n";
    offset += t.values.size() * 8;
  }
  manifest += "payload " + std::to_string(offset) + "\nend\n";
  std::string out = std::move(manifest);
  out.reserve(out.size() + offset + kTrailerSize);
  for (const auto& t : ck.tensors) {
    for (double v : t.values) append_le(out, v);
  }
  char trailer[kTrailerSize + 1];
  std::snprintf(trailer, sizeof trailer, "checksum %016llx\n",
                static_cast<unsigned long long>(fnv1a(out.data(), out.size())));
  out.append(trailer, kTrailerSize);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using K = CheckpointErrorKind;
  if (bytes.size() < kTrailerSize || bytes.compare(bytes.size() - kTrailerSize, 9, "checksum ") != 0 ||
      bytes.back() != '\n') {
    throw CheckpointError(K::Format, "checkpoint trailer missing or malformed");
  }
  const std::size_t body = bytes.size() - kTrailerSize;
  const std::string hex = bytes.substr(body + 9, 16);
  std::uint64_t stored = 0;
  try {
    std::size_t used = 0;
    stored = std::stoull(hex, &used, 16);
    if (used != 16) throw std::invalid_argument("short");
  } catch (const std::exception&) {
    throw CheckpointError(K::Checksum, "checkpoint checksum field is corrupt");
  }
  if (stored != fnv1a(bytes.data(), body)) throw CheckpointError(K::Checksum, "checkpoint checksum mismatch");

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos || nl >= body) throw CheckpointError(K::Format, "checkpoint manifest is truncated");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const std::string magic = next_line();
  if (!magic.starts_with("AMCK ")) throw CheckpointError(K::Format, "not a checkpoint file");
  if (magic != "AMCK " + std::to_string(kCheckpointVersion)) {
    throw CheckpointError(K::Version, "unsupported checkpoint version '" + magic.substr(5) + "' (expected " +
                                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  struct Entry {
    std::size_t offset, count;
  };
  std::vector<Entry> entries;
  std::size_t payload = 0;
  bool have_payload = false;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "config") {
      std::string key;
      in >> key;
      const std::size_t value_at = line.find(' ', 7 + key.size() - 1);
      ck.config.emplace_back(key, value_at == std::string::npos ? "" : line.substr(value_at + 1));
    } else if (kind == "best_d2_dice") {
      std::string v;
      in >> v;
      ck.best_d2_dice = std::strtod(v.c_str(), nullptr);
    } else if (kind == "best_epoch") {
      in >> ck.best_epoch;
    } else if (kind == "tensor") {
      NamedTensor t;
      std::size_t rank = 0;
      in >> t.name >> rank;
      t.shape.resize(rank);
      for (auto& d : t.shape) in >> d;
      Entry e{};
      in >> e.offset >> e.count;
      if (!in) throw CheckpointError(K::Format, "malformed tensor line: " + line);
      if (shape_numel(t.shape) != e.count) {
        throw CheckpointError(K::ShapeMismatch, "tensor '" + t.name + "' shape " + shape_to_string(t.shape) +
                                                    " does not match its " + std::to_string(e.count) + " values");
      }
      ck.tensors.push_back(std::move(t));
      entries.push_back(e);
    } else if (kind == "payload") {
      in >> payload;
      have_payload = static_cast<bool>(in);
    } else {
      throw CheckpointError(K::Format, "unknown manifest line: " + line);
    }
  }
  if (!have_payload) throw CheckpointError(K::Format, "checkpoint manifest has no payload line");
  if (body - pos != payload) {
    throw CheckpointError(K::ShapeMismatch, "payload holds " + std::to_string(body - pos) + " bytes, manifest says " +
                                                std::to_string(payload));
  }
  std::size_t expected = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].offset != expected || entries[i].offset + entries[i].count * 8 > payload) {
      throw CheckpointError(K::ShapeMismatch, "tensor '" + ck.tensors[i].name + "' lies outside the payload");
    }
    auto& values = ck.tensors[i].values;
    values.resize(entries[i].count);
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = read_le(bytes.data() + pos + expected + 8 * j);
    expected += entries[i].count * 8;
  }
  if (expected != payload) throw CheckpointError(K::ShapeMismatch, "payload has bytes not claimed by any tensor");
  return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const fs::path& path) { return deserialize_checkpoint(read_file(path)); }

// -------------------------------------------------------------------- metrics

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string format_metrics(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + fixed6(r.lower_loss) + "," + fixed6(r.upper_loss) + "," +
           fixed6(r.d2_dice) + "," + (r.test_dice ? fixed6(*r.test_dice) : std::string()) + "," + fixed6(r.lr_lower) +
           "," + fixed6(r.lr_upper) + "\n";
  }
  return out;
}

void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].epoch <= rows[i - 1].epoch) throw std::invalid_argument("metrics rows must be sorted by epoch");
  }
  write_file(path, format_metrics(rows));
}

std::vector<MetricsRow> parse_metrics(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::runtime_error("metrics CSV header mismatch");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 7) throw std::runtime_error("metrics CSV row has " + std::to_string(f.size()) + " fields: " + line);
    MetricsRow r;
    r.epoch = std::stoul(f[0]);
    r.lower_loss = std::stod(f[1]);
    r.upper_loss = std::stod(f[2]);
    r.d2_dice = std::stod(f[3]);
    if (!f[4].empty()) r.test_dice = std::stod(f[4]);
    r.lr_lower = std::stod(f[5]);
    r.lr_upper = std::stod(f[6]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<MetricsRow> read_metrics(const fs::path& path) { return parse_metrics(read_file(path)); }

// ------------------------------------------------------------ key=value files

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
    kv.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace amsam
