#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psp/error.hpp"

namespace psp {

inline constexpr std::int32_t kIgnoreLabel = 255;

/// Per-pixel class ids for `batch` stacked maps of height x width.
struct LabelMap {
  std::int64_t batch = 1;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(std::int64_t b, std::int64_t h, std::int64_t w, std::int32_t fill = 0)
      : batch(b), height(h), width(w), data(static_cast<std::size_t>(b * h * w), fill) {}
  static LabelMap single(std::int64_t h, std::int64_t w, std::int32_t fill = 0) {
    return LabelMap(1, h, w, fill);
  }

  std::int64_t plane_size() const { return height * width; }
  std::int32_t& at(std::int64_t n, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((n * height + y) * width + x)];
  }
  std::int32_t at(std::int64_t n, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((n * height + y) * width + x)];
  }
  std::int32_t& at(std::int64_t y, std::int64_t x) { return at(0, y, x); }
  std::int32_t at(std::int64_t y, std::int64_t x) const { return at(0, y, x); }

  bool operator==(const LabelMap&) const = default;
};

/// Throws unless every entry is in [0, num_classes) or equals `ignore`.
inline void validate_labels(const LabelMap& m, std::int32_t num_classes,
                            std::int32_t ignore = kIgnoreLabel) {
  for (auto v : m.data) {
    if ((v < 0 || v >= num_classes) && v != ignore) {
      throw std::invalid_argument("label " + std::to_string(v) + " outside [0," +
                                  std::to_string(num_classes) + ") and not the ignore label " +
                                  std::to_string(ignore));
    }
  }
}

}  // namespace psp
