#pragma once

// Dataset IO (binary PPM images, PGM label maps), the training augmentation
// chain, batch assembly, and a synthetic scene generator in which objects of
// identical appearance take their class from the surrounding scene.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "psp/error.hpp"
#include "psp/label_map.hpp"
#include "psp/tensor.hpp"

namespace psp {

/// Planar 3-channel float image, values nominally in [0, 1].
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> data;  // channel-major: c * H * W + y * W + x

  static constexpr std::int64_t kChannels = 3;

  Image() = default;
  Image(std::int64_t h, std::int64_t w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<std::size_t>(kChannels * h * w), fill) {}

  float& at(std::int64_t c, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  float at(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((c * height + y) * width + x)];
  }

  bool operator==(const Image&) const = default;
};

struct SegSample {
  Image image;
  LabelMap labels;  // batch 1, same height and width as the image

  bool operator==(const SegSample&) const = default;
};

struct SegBatch {
  Tensor<float> images;  // N x 3 x H x W
  LabelMap labels;       // N x H x W
};

// ---------------------------------------------------------------------------
// PPM / PGM

namespace detail {

inline std::int64_t read_header_int(std::istream& in, const std::string& what, const std::string& path) {
  // whitespace and '#' comments may separate header fields
  int ch;
  while ((ch = in.peek()) != EOF) {
    if (std::isspace(ch)) {
      in.get();
    } else if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      break;
    }
  }
  std::int64_t v = -1;
  if (!(in >> v) || v < 0) throw FormatError(path + ": malformed header (" + what + ")");
  return v;
}

struct NetpbmHeader {
  std::int64_t width, height;
};

inline NetpbmHeader read_netpbm_header(std::istream& in, const char* magic, const std::string& path) {
  char m[2] = {0, 0};
  in.read(m, 2);
  if (!in || m[0] != magic[0] || m[1] != magic[1]) {
    throw FormatError(path + ": expected magic " + std::string(magic, 2));
  }
  NetpbmHeader h{};
  h.width = read_header_int(in, "width", path);
  h.height = read_header_int(in, "height", path);
  auto maxval = read_header_int(in, "maxval", path);
  if (h.width < 1 || h.height < 1) throw FormatError(path + ": empty image");
  if (maxval != 255) throw FormatError(path + ": only 8-bit files (maxval 255) are supported");
  if (!std::isspace(in.get())) throw FormatError(path + ": malformed header (separator)");
  return h;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open for reading");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  return out;
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline Image read_ppm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  auto h = detail::read_netpbm_header(in, "P6", path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * h.width * h.height));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path.string() + ": truncated pixel data");
  Image img(h.height, h.width);
  for (std::int64_t y = 0; y < h.height; ++y)
    for (std::int64_t x = 0; x < h.width; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(bytes[static_cast<std::size_t>((y * h.width + x) * 3 + c)]) / 255.0f;
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  auto out = detail::open_out(path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * img.width * img.height));
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        bytes[static_cast<std::size_t>((y * img.width + x) * 3 + c)] = detail::quantize(img.at(c, y, x));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline LabelMap read_pgm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  auto h = detail::read_netpbm_header(in, "P5", path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h.width * h.height));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path.string() + ": truncated pixel data");
  LabelMap m = LabelMap::single(h.height, h.width);
  std::copy(bytes.begin(), bytes.end(), m.data.begin());
  return m;
}

/// Writes the first map of `m` as an 8-bit PGM.
inline void write_pgm(const std::filesystem::path& path, const LabelMap& m) {
  auto out = detail::open_out(path);
  out << "P5\n" << m.width << ' ' << m.height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(m.plane_size()));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto v = m.data[i];
    if (v < 0 || v > 255) throw std::invalid_argument("label " + std::to_string(v) + " does not fit in a PGM byte");
    bytes[i] = static_cast<unsigned char>(v);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline SegSample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                             std::int32_t num_classes) {
  SegSample s{read_ppm(image_path), read_pgm(label_path)};
  if (s.image.height != s.labels.height || s.image.width != s.labels.width) {
    throw FormatError(image_path.string() + ": image is " + std::to_string(s.image.width) + "x" +
                      std::to_string(s.image.height) + " but labels are " + std::to_string(s.labels.width) + "x" +
                      std::to_string(s.labels.height));
  }
  try {
    validate_labels(s.labels, num_classes);
  } catch (const std::invalid_argument& e) {
    throw FormatError(label_path.string() + ": " + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dataset directories: images/NNNN.ppm, labels/NNNN.pgm, manifest.txt

inline std::string sample_basename(std::size_t i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

/// Writes `samples` in the dataset layout. An existing non-empty directory is
/// an error unless `force`, in which case the previous layout is replaced.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw std::runtime_error(dir.string() + " exists and is not empty (use --force to overwrite)");
    fs::remove_all(dir / "images");
    fs::remove_all(dir / "labels");
    fs::remove(dir / "manifest.txt");
  }
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  auto manifest = detail::open_out(dir / "manifest.txt");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto base = sample_basename(i);
    write_ppm(dir / "images" / (base + ".ppm"), samples[i].image);
    write_pgm(dir / "labels" / (base + ".pgm"), samples[i].labels);
    manifest << base << '\n';
  }
}

inline std::vector<SegSample> read_dataset(const std::filesystem::path& dir, std::int32_t num_classes) {
  auto manifest = detail::open_in(dir / "manifest.txt");
  std::vector<SegSample> out;
  std::string line;
  while (std::getline(manifest, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (line.empty()) continue;
    out.push_back(load_sample(dir / "images" / (line + ".ppm"), dir / "labels" / (line + ".pgm"), num_classes));
  }
  if (out.empty()) throw FormatError((dir / "manifest.txt").string() + ": manifest lists no samples");
  return out;
}

/// Per-channel mean over all pixels of all samples.
inline std::array<float, 3> channel_mean(const std::vector<SegSample>& samples) {
  std::array<double, 3> acc{0, 0, 0};
  double count = 0;
  for (const auto& s : samples) {
    const auto hw = s.image.height * s.image.width;
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < hw; ++i) acc[c] += s.image.data[static_cast<std::size_t>(c * hw + i)];
    count += static_cast<double>(hw);
  }
  if (count == 0) return {0, 0, 0};
  return {static_cast<float>(acc[0] / count), static_cast<float>(acc[1] / count), static_cast<float>(acc[2] / count)};
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  double mirror_prob = 0.5;
  double resize_min = 0.5;
  double resize_max = 2.0;
  double rotate_deg = 10.0;  // angle drawn from [-rotate_deg, rotate_deg]
  double blur_prob = 0.5;
  double blur_sigma_min = 0.3;
  double blur_sigma_max = 1.0;
  std::int64_t crop_size = 64;
  std::array<float, 3> pad_image{0.5f, 0.5f, 0.5f};
  std::int32_t pad_label = kIgnoreLabel;

  void validate() const {
    if (!(resize_min > 0 && resize_max >= resize_min)) throw ConfigError("augment: resize range must be positive");
    if (crop_size < 8 || crop_size % 8 != 0) throw ConfigError("augment: crop_size must be a positive multiple of 8");
    if (!(mirror_prob >= 0 && mirror_prob <= 1 && blur_prob >= 0 && blur_prob <= 1)) {
      throw ConfigError("augment: probabilities must be in [0, 1]");
    }
    if (!(blur_sigma_min > 0 && blur_sigma_max >= blur_sigma_min)) throw ConfigError("augment: bad blur sigma range");
    if (rotate_deg < 0) throw ConfigError("augment: rotate_deg must be non-negative");
  }
};

namespace detail {

inline float sample_clamped(const Image& img, std::int64_t c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  auto y0 = static_cast<std::int64_t>(std::floor(y)), x0 = static_cast<std::int64_t>(std::floor(x));
  auto y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
  double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace detail

/// Rescales to round(H * factor) x round(W * factor): bilinear (pixel-centre
/// aligned, edge clamped) for the image, nearest neighbour for labels.
inline SegSample resize_sample(const SegSample& s, double factor) {
  const auto h = std::max<std::int64_t>(1, std::llround(static_cast<double>(s.image.height) * factor));
  const auto w = std::max<std::int64_t>(1, std::llround(static_cast<double>(s.image.width) * factor));
  SegSample out{Image(h, w), LabelMap::single(h, w)};
  const double sy = static_cast<double>(s.image.height) / static_cast<double>(h);
  const double sx = static_cast<double>(s.image.width) / static_cast<double>(w);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double fy = (static_cast<double>(y) + 0.5) * sy, fx = (static_cast<double>(x) + 0.5) * sx;
      for (std::int64_t c = 0; c < 3; ++c) out.image.at(c, y, x) = detail::sample_clamped(s.image, c, fy - 0.5, fx - 0.5);
      auto ly = std::min(s.labels.height - 1, static_cast<std::int64_t>(fy));
      auto lx = std::min(s.labels.width - 1, static_cast<std::int64_t>(fx));
      out.labels.at(y, x) = s.labels.at(ly, lx);
    }
  }
  return out;
}

/// Rotates by `degrees` (counter-clockwise) about the image centre. The image
/// samples bilinearly with edge clamping; labels take the nearest source pixel
/// and `fill` where the source falls outside the frame.
inline SegSample rotate_sample(const SegSample& s, double degrees, std::int32_t fill = kIgnoreLabel) {
  const auto h = s.image.height, w = s.image.width;
  SegSample out{Image(h, w), LabelMap::single(h, w)};
  const double t = degrees * std::numbers::pi / 180.0;
  const double ct = std::cos(t), st = std::sin(t);
  const double cy = static_cast<double>(h - 1) / 2, cx = static_cast<double>(w - 1) / 2;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      double sx = ct * dx - st * dy + cx;
      double sy = st * dx + ct * dy + cy;
      for (std::int64_t c = 0; c < 3; ++c) out.image.at(c, y, x) = detail::sample_clamped(s.image, c, sy, sx);
      auto ry = std::llround(sy), rx = std::llround(sx);
      out.labels.at(y, x) = (ry < 0 || ry >= h || rx < 0 || rx >= w) ? fill : s.labels.at(ry, rx);
    }
  }
  return out;
}

/// Separable Gaussian blur with radius ceil(3 sigma), edges clamped.
inline Image gaussian_blur(const Image& img, double sigma) {
  const auto r = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0;
  for (std::int64_t i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    total += k[static_cast<std::size_t>(i + r)];
  }
  for (auto& v : k) v /= total;
  Image tmp(img.height, img.width), out(img.height, img.width);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < img.height; ++y)
      for (std::int64_t x = 0; x < img.width; ++x) {
        double acc = 0;
        for (std::int64_t i = -r; i <= r; ++i) {
          acc += k[static_cast<std::size_t>(i + r)] * img.at(c, y, std::clamp(x + i, std::int64_t{0}, img.width - 1));
        }
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    for (std::int64_t y = 0; y < img.height; ++y)
      for (std::int64_t x = 0; x < img.width; ++x) {
        double acc = 0;
        for (std::int64_t i = -r; i <= r; ++i) {
          acc += k[static_cast<std::size_t>(i + r)] * tmp.at(c, std::clamp(y + i, std::int64_t{0}, img.height - 1), x);
        }
        out.at(c, y, x) = static_cast<float>(acc);
      }
  }
  return out;
}

/// Horizontal flip of image and labels.
inline SegSample mirror_sample(const SegSample& s) {
  SegSample out = s;
  const auto w = s.image.width;
  for (std::int64_t y = 0; y < s.image.height; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
      out.labels.at(y, x) = s.labels.at(y, w - 1 - x);
    }
  return out;
}

/// Pads bottom/right up to `crop` (image with `pad_image`, labels with
/// `pad_label`), then takes the crop x crop window at (y0, x0).
inline SegSample pad_crop(const SegSample& s, std::int64_t crop, std::int64_t y0, std::int64_t x0,
                          const std::array<float, 3>& pad_image, std::int32_t pad_label) {
  const auto ph = std::max(s.image.height, crop), pw = std::max(s.image.width, crop);
  if (y0 < 0 || x0 < 0 || y0 + crop > ph || x0 + crop > pw) throw std::out_of_range("pad_crop: window outside padded image");
  SegSample out{Image(crop, crop), LabelMap::single(crop, crop, pad_label)};
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < crop; ++y)
      for (std::int64_t x = 0; x < crop; ++x) out.image.at(c, y, x) = pad_image[static_cast<std::size_t>(c)];
  for (std::int64_t y = 0; y < crop; ++y) {
    auto sy = y0 + y;
    if (sy >= s.image.height) break;
    for (std::int64_t x = 0; x < crop; ++x) {
      auto sx = x0 + x;
      if (sx >= s.image.width) break;
      for (std::int64_t c = 0; c < 3; ++c) out.image.at(c, y, x) = s.image.at(c, sy, sx);
      out.labels.at(y, x) = s.labels.at(sy, sx);
    }
  }
  return out;
}

/// resize -> rotate -> blur -> mirror -> pad and random crop. With
/// `enabled` off only the pad/crop step runs.
template <typename Urng>
SegSample augment(const SegSample& s, const AugmentConfig& cfg, Urng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SegSample cur = s;
  if (cfg.enabled) {
    double factor = cfg.resize_min + (cfg.resize_max - cfg.resize_min) * unit(rng);
    if (factor != 1.0) cur = resize_sample(cur, factor);
    double angle = cfg.rotate_deg * (2.0 * unit(rng) - 1.0);
    if (angle != 0.0) cur = rotate_sample(cur, angle, cfg.pad_label);
    if (unit(rng) < cfg.blur_prob) {
      double sigma = cfg.blur_sigma_min + (cfg.blur_sigma_max - cfg.blur_sigma_min) * unit(rng);
      cur.image = gaussian_blur(cur.image, sigma);
    }
    if (unit(rng) < cfg.mirror_prob) cur = mirror_sample(cur);
  }
  const auto ph = std::max(cur.image.height, cfg.crop_size), pw = std::max(cur.image.width, cfg.crop_size);
  std::uniform_int_distribution<std::int64_t> oy(0, ph - cfg.crop_size), ox(0, pw - cfg.crop_size);
  auto y0 = oy(rng);
  auto x0 = ox(rng);
  return pad_crop(cur, cfg.crop_size, y0, x0, cfg.pad_image, cfg.pad_label);
}

// ---------------------------------------------------------------------------
// Batching

/// Stacks equally sized samples into a batch.
inline SegBatch assemble_batch(const std::vector<SegSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("assemble_batch: no samples");
  const auto h = samples[0].image.height, w = samples[0].image.width;
  const auto n = static_cast<std::int64_t>(samples.size());
  std::vector<float> img;
  img.reserve(static_cast<std::size_t>(n * 3 * h * w));
  LabelMap labels(n, h, w);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (s.image.height != h || s.image.width != w || s.labels.height != h || s.labels.width != w) {
      throw ShapeError("assemble_batch: samples differ in size");
    }
    img.insert(img.end(), s.image.data.begin(), s.image.data.end());
    std::copy(s.labels.data.begin(), s.labels.data.end(), labels.data.begin() + i * h * w);
  }
  return {Tensor<float>::from_data({n, 3, h, w}, std::move(img)), std::move(labels)};
}

/// One epoch of shuffled sample indices split into batches; the last batch
/// may be short.
template <typename Urng>
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t num_samples, std::size_t batch_size, Urng& rng) {
  if (num_samples == 0) throw std::invalid_argument("make_batches: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be positive");
  std::vector<std::size_t> order(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < num_samples; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(num_samples, i + batch_size)));
  }
  return out;
}

template <typename Urng>
std::vector<SegBatch> make_batches(const std::vector<SegSample>& samples, std::size_t batch_size, Urng& rng) {
  std::vector<SegBatch> out;
  for (const auto& idx : epoch_batches(samples.size(), batch_size, rng)) {
    std::vector<SegSample> chunk;
    for (auto i : idx) chunk.push_back(samples[i]);
    out.push_back(assemble_batch(chunk));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic context scenes

/// Each scene class has its own background colour; objects share one
/// appearance distribution in every scene and an object in scene s is labelled
/// S + s. Objects are large, so pixels inside one are far from the background
/// that identifies them. With probability `split_prob` the canvas is divided
/// into a left and a right scene, which makes a single global summary ambiguous.
struct SynthConfig {
  std::int64_t height = 128;
  std::int64_t width = 128;
  int scene_classes = 2;
  int objects_min = 1;
  int objects_max = 3;
  int object_size_min = 48;
  int object_size_max = 64;
  int halo = 32;  // neutral band around objects hiding the scene colour
  double noise = 0.08;
  double scene_saturation = 0.6;
  double split_prob = 0.5;
  std::uint64_t seed = 0;

  int num_classes() const { return 2 * scene_classes; }

  void validate() const {
    if (scene_classes < 2) throw ConfigError("synth: at least two scene classes required");
    if (2 * scene_classes > 255) throw ConfigError("synth: too many classes");
    if (height < 16 || width < 16) throw ConfigError("synth: canvas must be at least 16x16");
    if (objects_min < 0 || objects_max < objects_min) throw ConfigError("synth: bad object count range");
    if (object_size_min < 1 || object_size_max < object_size_min || object_size_max > std::min(height, width) / 2) {
      throw ConfigError("synth: bad object size range");
    }
    if (noise < 0) throw ConfigError("synth: noise must be non-negative");
    if (halo < 0) throw ConfigError("synth: halo must be non-negative");
    if (split_prob < 0 || split_prob > 1) throw ConfigError("synth: split_prob must be in [0, 1]");
  }
};

namespace detail {

inline std::array<float, 3> hsv(double hue_deg, double s, double v) {
  double h = std::fmod(hue_deg, 360.0) / 60.0;
  double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

}  // namespace detail

inline constexpr std::array<float, 3> kSynthObject{0.25f, 0.75f, 0.3f};
inline constexpr std::array<float, 3> kSynthHalo{0.45f, 0.45f, 0.45f};

/// Background colour of scene `s`: hues spread over the arc away from the object green.
inline std::array<float, 3> synth_scene_color(int s, int scene_classes, double saturation = 0.6) {
  return detail::hsv(200.0 + 200.0 * s / std::max(1, scene_classes - 1), saturation, 0.8);
}

/// Sample `index` of the corpus defined by `cfg`; independent of how many
/// other samples are drawn.
inline SegSample synth_sample(const SynthConfig& cfg, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto randint = [&](std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
  };
  const auto h = cfg.height, w = cfg.width;
  const int S = cfg.scene_classes;

  // scene layout: one region, or left | right with different scenes
  std::int64_t split = w;
  int left = static_cast<int>(randint(0, S - 1)), right = left;
  if (unit(rng) < cfg.split_prob) {
    split = randint(static_cast<std::int64_t>(0.35 * static_cast<double>(w)),
                    static_cast<std::int64_t>(0.65 * static_cast<double>(w)));
    right = static_cast<int>((left + randint(1, S - 1)) % S);
  }

  std::vector<std::array<float, 3>> color(static_cast<std::size_t>(h * w));
  LabelMap labels = LabelMap::single(h, w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      int s = x < split ? left : right;
      color[static_cast<std::size_t>(y * w + x)] = synth_scene_color(s, S, cfg.scene_saturation);
      labels.at(y, x) = s;
    }

  // objects: axis-aligned rectangles kept inside one scene region
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h * w), 0);
  const auto n_obj = randint(cfg.objects_min, cfg.objects_max);
  for (std::int64_t o = 0; o < n_obj; ++o) {
    auto oh = randint(cfg.object_size_min, cfg.object_size_max);
    auto ow = randint(cfg.object_size_min, cfg.object_size_max);
    auto y0 = randint(0, h - oh);
    bool in_left = split == w || unit(rng) < static_cast<double>(split) / static_cast<double>(w);
    std::int64_t lo = in_left ? 0 : split, hi = in_left ? split : w;
    ow = std::min(ow, hi - lo);
    if (ow < 1) continue;
    auto x0 = randint(lo, hi - ow);
    int s = in_left ? left : right;
    for (auto y = y0; y < y0 + oh; ++y)
      for (auto x = x0; x < x0 + ow; ++x) {
        color[static_cast<std::size_t>(y * w + x)] = kSynthObject;
        labels.at(y, x) = S + s;
        mask[static_cast<std::size_t>(y * w + x)] = 1;
      }
  }

  // halo: background within `halo` pixels (Chebyshev) of an object turns neutral
  if (cfg.halo > 0) {
    auto near = mask;
    std::vector<std::uint8_t> tmp(near.size(), 0);
    const std::int64_t r = cfg.halo;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::uint8_t v = 0;
        for (auto xx = std::max<std::int64_t>(0, x - r); xx <= std::min(w - 1, x + r) && !v; ++xx) v = near[static_cast<std::size_t>(y * w + xx)];
        tmp[static_cast<std::size_t>(y * w + x)] = v;
      }
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::uint8_t v = 0;
        for (auto yy = std::max<std::int64_t>(0, y - r); yy <= std::min(h - 1, y + r) && !v; ++yy) v = tmp[static_cast<std::size_t>(yy * w + x)];
        const auto i = static_cast<std::size_t>(y * w + x);
        if (v && !mask[i]) color[i] = kSynthHalo;
      }
  }

  // additive noise, then 8-bit quantization so the sample survives a PPM round trip
  std::normal_distribution<double> nd(0.0, cfg.noise);
  Image img(h, w);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        double v = color[static_cast<std::size_t>(y * w + x)][static_cast<std::size_t>(c)] + (cfg.noise > 0 ? nd(rng) : 0.0);
        img.at(c, y, x) = static_cast<float>(detail::quantize(static_cast<float>(v))) / 255.0f;
      }
  return {std::move(img), std::move(labels)};
}

/// Samples [first, first + n) of the corpus.
inline std::vector<SegSample> synth_generate(const SynthConfig& cfg, std::size_t n, std::uint64_t first = 0) {
  cfg.validate();
  std::vector<SegSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample(cfg, first + i));
  return out;
}

// ---------------------------------------------------------------------------
// Visualization palette

/// Class c takes its red, green and blue bits from c's bits 0, 1, 2, then 3, 4,
/// 5 and so on, written from the most significant bit down: class 0 is black,
/// 1 is (128, 0, 0), 2 is (0, 128, 0), 3 is (128, 128, 0). The ignore label is
/// drawn as (224, 224, 192).
inline std::array<std::uint8_t, 3> palette_color(std::int32_t label) {
  if (label == kIgnoreLabel) return {224, 224, 192};
  if (label < 0 || label > 255) throw std::invalid_argument("palette_color: label " + std::to_string(label));
  std::array<std::uint8_t, 3> rgb{0, 0, 0};
  auto c = static_cast<unsigned>(label);
  for (int j = 7; j >= 0; --j, c >>= 3) {
    for (int k = 0; k < 3; ++k) rgb[static_cast<std::size_t>(k)] |= static_cast<std::uint8_t>(((c >> k) & 1u) << j);
  }
  return rgb;
}

inline Image colorize(const LabelMap& m) {
  if (m.batch != 1) throw std::invalid_argument("colorize: expected a single label map");
  Image img(m.height, m.width);
  for (std::int64_t y = 0; y < m.height; ++y)
    for (std::int64_t x = 0; x < m.width; ++x) {
      auto rgb = palette_color(m.at(y, x));
      for (std::int64_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rgb[static_cast<std::size_t>(c)]) / 255.0f;
    }
  return img;
}

}  // namespace psp
