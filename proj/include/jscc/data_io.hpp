#pragma once

#include <png.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "jscc/random.hpp"
#include "jscc/tensor.hpp"

namespace jscc::data {

namespace fs = std::filesystem;

enum class Source { cifar10, stl10, folder, synthetic };

inline std::string to_string(Source s) {
  switch (s) {
    case Source::cifar10: return "cifar10";
    case Source::stl10: return "stl10";
    case Source::folder: return "folder";
    case Source::synthetic: return "synthetic";
  }
  return "";
}

/// Images stored planar (C, H, W) back to back, values in [0, 1].
struct Dataset {
  Source source = Source::cifar10;
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<float> pixels;

  std::size_t image_size() const { return channels * height * width; }
  std::size_t count() const { return image_size() ? pixels.size() / image_size() : 0; }
  bool empty() const { return count() == 0; }

  Tensor<float> image(std::size_t i) const {
    if (i >= count()) throw Error("image index " + std::to_string(i) + " out of range");
    const auto* p = pixels.data() + i * image_size();
    return Tensor<float>({channels, height, width}, std::vector<float>(p, p + image_size()));
  }

  /// Stacks the listed images into [B, C, H, W].
  template <class T = float>
  Tensor<T> batch(std::span<const std::size_t> indices) const {
    Tensor<T> out({indices.size(), channels, height, width});
    const std::size_t n = image_size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      if (indices[b] >= count()) throw Error("image index " + std::to_string(indices[b]) + " out of range");
      std::copy_n(pixels.begin() + indices[b] * n, n, out.data.begin() + b * n);
    }
    return out;
  }

  template <class T = float>
  Tensor<T> batch_range(std::size_t first, std::size_t n) const {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = first + i;
    return batch<T>(idx);
  }

  /// First `n` images as a new dataset, the rest as a second one.
  std::pair<Dataset, Dataset> split(std::size_t n) const {
    n = std::min(n, count());
    Dataset a = *this, b = *this;
    a.pixels.assign(pixels.begin(), pixels.begin() + n * image_size());
    b.pixels.assign(pixels.begin() + n * image_size(), pixels.end());
    return {std::move(a), std::move(b)};
  }
};

namespace detail {

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;
inline constexpr std::size_t kStlRecord = 3 * 96 * 96;

/// CIFAR-10 binary batches: 1 label byte + R, G, B planes of 32x32 row-major.
/// Labels are discarded. `max_count` = 0 reads everything.
inline Dataset load_cifar10(const std::vector<fs::path>& files, std::size_t max_count = 0) {
  Dataset ds;
  ds.source = Source::cifar10;
  ds.height = ds.width = 32;
  for (const fs::path& f : files) {
    const auto bytes = detail::read_bytes(f);
    if (bytes.size() % kCifarRecord != 0)
      throw ValidationError(f.string() + ": size " + std::to_string(bytes.size()) +
                            " is not a multiple of " + std::to_string(kCifarRecord) +
                            "; truncated record at offset " +
                            std::to_string(bytes.size() / kCifarRecord * kCifarRecord));
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      if (max_count && ds.count() >= max_count) return ds;
      for (std::size_t i = 1; i < kCifarRecord; ++i) ds.pixels.push_back(bytes[off + i] / 255.0f);
    }
  }
  return ds;
}

/// STL-10 binary: 3 planes of 96x96 stored column-major; transposed to
/// row-major on load.
inline Dataset load_stl10(const fs::path& file, std::size_t max_count = 0) {
  const auto bytes = detail::read_bytes(file);
  if (bytes.size() % kStlRecord != 0)
    throw ValidationError(file.string() + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of " + std::to_string(kStlRecord) +
                          "; truncated record at offset " +
                          std::to_string(bytes.size() / kStlRecord * kStlRecord));
  Dataset ds;
  ds.source = Source::stl10;
  ds.height = ds.width = 96;
  std::size_t n = bytes.size() / kStlRecord;
  if (max_count) n = std::min(n, max_count);
  ds.pixels.resize(n * kStlRecord);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t col = 0; col < 96; ++col)
        for (std::size_t row = 0; row < 96; ++row)
          ds.pixels[r * kStlRecord + (c * 96 + row) * 96 + col] =
              bytes[r * kStlRecord + (c * 96 + col) * 96 + row] / 255.0f;
  return ds;
}

// ---- image files ------------------------------------------------------------

inline constexpr const char* kImageFormats = "PNG (.png), binary PPM P6 (.ppm)";

namespace detail {

inline std::size_t ppm_int(const std::vector<unsigned char>& b, std::size_t& pos) {
  auto skip = [&] {
    while (pos < b.size()) {
      if (std::isspace(b[pos])) ++pos;
      else if (b[pos] == '#') while (pos < b.size() && b[pos] != '\n') ++pos;
      else break;
    }
  };
  skip();
  if (pos >= b.size() || !std::isdigit(b[pos])) throw ValidationError("malformed PPM header");
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) v = v * 10 + (b[pos++] - '0');
  return v;
}

inline Tensor<float> read_ppm(const fs::path& path) {
  const auto b = read_bytes(path);
  std::size_t pos = 2;
  const std::size_t w = ppm_int(b, pos), h = ppm_int(b, pos), maxval = ppm_int(b, pos);
  if (maxval != 255) throw ValidationError(path.string() + ": only 8-bit PPM (maxval 255) is supported");
  ++pos;  // single whitespace after maxval
  if (b.size() < pos + 3 * w * h) throw ValidationError(path.string() + ": truncated PPM data");
  Tensor<float> t({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) t[(c * h + y) * w + x] = b[pos + (y * w + x) * 3 + c] / 255.0f;
  return t;
}

inline std::vector<unsigned char> interleave(const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("image must be [3,H,W], got " + jscc::to_string(img.shape));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<unsigned char> rgb(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) rgb[(y * w + x) * 3 + c] = quantize(img[(c * h + y) * w + x]);
  return rgb;
}

inline Tensor<float> read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw ValidationError(path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ValidationError(path.string() + ": " + msg);
  }
  const std::size_t h = image.height, w = image.width;
  Tensor<float> t({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) t[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] / 255.0f;
  return t;
}

inline void write_png(const Tensor<float>& img, const fs::path& path) {
  const auto rgb = interleave(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.dim(2));
  image.height = static_cast<png_uint_32>(img.dim(1));
  image.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw Error(path.string() + ": " + image.message);
}

}  // namespace detail

/// Reads a PNG or binary PPM into [3, H, W] with values in [0, 1].
inline Tensor<float> read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  unsigned char magic[8] = {};
  in.read(reinterpret_cast<char*>(magic), 8);
  if (magic[0] == 'P' && magic[1] == '6') return detail::read_ppm(path);
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G') return detail::read_png(path);
  throw ValidationError(path.string() + ": unsupported image format; supported: " + kImageFormats);
}

/// Writes [3, H, W] as 8-bit RGB, format chosen by extension.
inline void write_image(const Tensor<float>& img, const fs::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".png") return detail::write_png(img, path);
  if (ext == ".ppm") {
    const auto rgb = detail::interleave(img);
    const std::string header = "P6\n" + std::to_string(img.dim(2)) + " " + std::to_string(img.dim(1)) + "\n255\n";
    std::vector<unsigned char> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), rgb.begin(), rgb.end());
    return detail::write_bytes(path, bytes);
  }
  throw ValidationError(path.string() + ": unsupported image format '" + ext + "'; supported: " + kImageFormats);
}

/// Every .png/.ppm in a directory, sorted by name; all must share a shape.
inline Dataset load_folder(const fs::path& dir, std::size_t max_count = 0) {
  if (!fs::is_directory(dir)) throw ValidationError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (ext == ".png" || ext == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset ds;
  ds.source = Source::folder;
  for (const auto& f : files) {
    if (max_count && ds.count() >= max_count) break;
    const Tensor<float> img = read_image(f);
    if (ds.height == 0) {
      ds.height = img.dim(1);
      ds.width = img.dim(2);
    } else if (img.dim(1) != ds.height || img.dim(2) != ds.width) {
      throw ValidationError(f.string() + ": shape " + jscc::to_string(img.shape) + " differs from the first image");
    }
    ds.pixels.insert(ds.pixels.end(), img.data.begin(), img.data.end());
  }
  return ds;
}

/// Rows of images laid out left to right with `gutter` pixels of
/// `background` between cells: width = n·W + (n − 1)·gutter.
inline Tensor<float> compose_grid(const std::vector<std::vector<Tensor<float>>>& rows,
                                  std::size_t gutter = 2, float background = 1.0f) {
  if (rows.empty() || rows.front().empty()) throw ValidationError("grid needs at least one image");
  const Shape cell = rows.front().front().shape;
  if (cell.size() != 3) throw ShapeError("grid images must be [C,H,W]");
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    for (const auto& img : r)
      if (img.shape != cell)
        throw ShapeError("grid image " + jscc::to_string(img.shape) + " differs from " + jscc::to_string(cell));
  }
  const std::size_t C = cell[0], H = cell[1], W = cell[2];
  const std::size_t GH = rows.size() * H + (rows.size() - 1) * gutter;
  const std::size_t GW = cols * W + (cols - 1) * gutter;
  Tensor<float> grid({C, GH, GW}, background);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x)
            grid[(ch * GH + r * (H + gutter) + y) * GW + c * (W + gutter) + x] =
                rows[r][c][(ch * H + y) * W + x];
  return grid;
}

// ---- batching ---------------------------------------------------------------

struct BatchPlan {
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool drop_last = true;
  bool shuffle = true;
};

/// Index batches for one epoch: a Fisher-Yates permutation keyed on
/// (seed, epoch), cut into consecutive runs of batch_size.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t count, const BatchPlan& plan,
                                                          std::size_t epoch = 0) {
  if (plan.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (plan.shuffle) {
    RngStream rng(hash_combine(plan.seed, epoch, 0x62617463ULL));
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += plan.batch_size) {
    const std::size_t end = std::min(count, i + plan.batch_size);
    if (plan.drop_last && end - i < plan.batch_size) break;
    out.emplace_back(order.begin() + i, order.begin() + end);
  }
  return out;
}

// ---- synthetic data ---------------------------------------------------------

/// One 8-bit planar RGB image of smooth shaded shapes over a gradient
/// background with mild grain; a stand-in for natural images.
inline std::vector<unsigned char> synthetic_image(std::size_t H, std::size_t W, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> img(3 * H * W);
  double base[3], grad[3][2];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.2, 0.8);
    grad[c][0] = rng.uniform(-0.4, 0.4);
    grad[c][1] = rng.uniform(-0.4, 0.4);
  }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        img[(c * H + y) * W + x] = base[c] + grad[c][0] * (double(y) / H - 0.5) + grad[c][1] * (double(x) / W - 0.5);

  const std::size_t shapes = 2 + rng.below(4);
  for (std::size_t s = 0; s < shapes; ++s) {
    const double cy = rng.uniform(0, H), cx = rng.uniform(0, W);
    const double ry = rng.uniform(0.1, 0.35) * H, rx = rng.uniform(0.1, 0.35) * W;
    const double angle = rng.uniform(0, 3.14159265358979);
    const bool rect = rng.uniform() < 0.4;
    double color[3];
    for (double& v : color) v = rng.uniform(0, 1);
    const double shade = rng.uniform(-0.3, 0.3);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double dy = (double(y) - cy), dx = (double(x) - cx);
        const double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
        const double d = rect ? std::max(std::abs(u), std::abs(v)) : std::sqrt(u * u + v * v);
        if (d > 1) continue;
        const double edge = std::clamp((1 - d) * 4, 0.0, 1.0);  // soft anti-aliased border
        for (int c = 0; c < 3; ++c) {
          double& p = img[(c * H + y) * W + x];
          p = (1 - edge) * p + edge * (color[c] + shade * u);
        }
      }
  }
  std::vector<unsigned char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i] + rng.normal() * 0.02;
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
  }
  return bytes;
}

/// Writes `count` synthetic records in CIFAR-10 binary layout (label 0).
inline void write_synthetic_cifar(const fs::path& path, std::size_t count, std::uint64_t seed) {
  std::vector<unsigned char> bytes;
  bytes.reserve(count * kCifarRecord);
  for (std::size_t i = 0; i < count; ++i) {
    bytes.push_back(static_cast<unsigned char>(i % 10));
    const auto img = synthetic_image(32, 32, hash_combine(seed, i));
    bytes.insert(bytes.end(), img.begin(), img.end());
  }
  detail::write_bytes(path, bytes);
}

}  // namespace jscc::data
