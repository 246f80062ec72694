#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "psp/data.hpp"
#include "psp/model.hpp"

namespace psp {

/// counts[g][p] = pixels with ground truth g predicted as p; ignored pixels
/// are never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes) : k_(num_classes), counts_(static_cast<std::size_t>(k_ * k_), 0) {
    if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
  }

  int num_classes() const { return k_; }
  std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }
  std::int64_t& at(int gt, int pred) { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }

  void accumulate(const LabelMap& pred, const LabelMap& gt, std::int32_t ignore = kIgnoreLabel) {
    if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError("confusion matrix: prediction " + std::to_string(pred.batch) + "x" +
                       std::to_string(pred.height) + "x" + std::to_string(pred.width) + " vs ground truth " +
                       std::to_string(gt.batch) + "x" + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    validate_labels(gt, k_, ignore);
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
      auto g = gt.data[i];
      if (g == ignore) continue;
      auto p = pred.data[i];
      if (p < 0 || p >= k_) throw std::invalid_argument("predicted label " + std::to_string(p) + " out of range");
      ++counts_[static_cast<std::size_t>(g * k_ + p)];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw std::invalid_argument("confusion matrix: class count mismatch in merge");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::int64_t row_sum(int c) const {
    std::int64_t s = 0;
    for (int p = 0; p < k_; ++p) s += at(c, p);
    return s;
  }

  std::int64_t col_sum(int c) const {
    std::int64_t s = 0;
    for (int g = 0; g < k_; ++g) s += at(g, c);
    return s;
  }

  /// IoU of class c, NaN when the class is absent from both prediction and ground truth.
  double class_iou(int c) const {
    auto denom = row_sum(c) + col_sum(c) - at(c, c);
    if (denom == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(at(c, c)) / static_cast<double>(denom);
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

inline double pixel_accuracy(const ConfusionMatrix& cm) {
  auto total = cm.total();
  if (total == 0) throw std::invalid_argument("pixel_accuracy: empty confusion matrix");
  std::int64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

/// Mean of class IoUs over classes that occur in the prediction or the ground truth.
inline double mean_iou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("mean_iou: empty confusion matrix");
  double sum = 0;
  int n = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    double iou = cm.class_iou(c);
    if (std::isnan(iou)) continue;
    sum += iou;
    ++n;
  }
  return sum / n;
}

struct ClassReport {
  std::vector<std::string> names;
  std::vector<double> iou;  // NaN for absent classes
  double miou = 0;
  double pixel_acc = 0;

  std::string text() const {
    std::size_t width = 5;
    for (const auto& n : names) width = std::max(width, n.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(width)) << "class" << "  iou\n";
    os << std::fixed << std::setprecision(4);
    for (std::size_t i = 0; i < names.size(); ++i) {
      os << std::setw(static_cast<int>(width)) << names[i] << "  ";
      if (std::isnan(iou[i])) {
        os << "n/a\n";
      } else {
        os << iou[i] << '\n';
      }
    }
    os << std::setw(static_cast<int>(width)) << "mIoU" << "  " << miou << '\n';
    os << std::setw(static_cast<int>(width)) << "pixAcc" << "  " << pixel_acc << '\n';
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "class,iou\n" << std::setprecision(17);
    for (std::size_t i = 0; i < names.size(); ++i) {
      os << names[i] << ',';
      if (std::isnan(iou[i])) {
        os << "nan";
      } else {
        os << iou[i];
      }
      os << '\n';
    }
    os << "mIoU," << miou << '\n';
    return os.str();
  }
};

inline ClassReport per_class_report(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  if (static_cast<int>(names.size()) != cm.num_classes()) {
    throw std::invalid_argument("per_class_report: " + std::to_string(names.size()) + " names for " +
                                std::to_string(cm.num_classes()) + " classes");
  }
  ClassReport r;
  r.names = names;
  for (int c = 0; c < cm.num_classes(); ++c) r.iou.push_back(cm.class_iou(c));
  r.miou = mean_iou(cm);
  r.pixel_acc = pixel_accuracy(cm);
  return r;
}

inline std::vector<std::string> default_class_names(int k) {
  std::vector<std::string> out;
  for (int c = 0; c < k; ++c) out.push_back("class" + std::to_string(c));
  return out;
}

// ---------------------------------------------------------------------------
// Inference on whole images, optionally at several scales.

inline const std::vector<double> kDefaultScales{0.5, 0.75, 1.0, 1.25, 1.5};
inline constexpr std::int64_t kMinInferSize = 64;

namespace detail {

/// Bilinear (pixel-centre aligned, edge clamped) resize of an N x C x H x W
/// buffer; used for both images and probability maps.
inline std::vector<float> resize_planes(std::span<const float> src, std::int64_t planes, std::int64_t h,
                                        std::int64_t w, std::int64_t oh, std::int64_t ow) {
  std::vector<float> out(static_cast<std::size_t>(planes * oh * ow));
  const double sy = static_cast<double>(h) / static_cast<double>(oh);
  const double sx = static_cast<double>(w) / static_cast<double>(ow);
  for (std::int64_t y = 0; y < oh; ++y) {
    double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    auto y0 = static_cast<std::int64_t>(fy);
    auto y1 = std::min(y0 + 1, h - 1);
    double ay = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < ow; ++x) {
      double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      auto x0 = static_cast<std::int64_t>(fx);
      auto x1 = std::min(x0 + 1, w - 1);
      double ax = fx - static_cast<double>(x0);
      for (std::int64_t p = 0; p < planes; ++p) {
        const float* s = src.data() + p * h * w;
        double top = s[y0 * w + x0] * (1 - ax) + s[y0 * w + x1] * ax;
        double bot = s[y1 * w + x0] * (1 - ax) + s[y1 * w + x1] * ax;
        out[static_cast<std::size_t>((p * oh + y) * ow + x)] = static_cast<float>(top * (1 - ay) + bot * ay);
      }
    }
  }
  return out;
}

inline std::int64_t round_to_8(double v) { return std::max<std::int64_t>(8, 8 * std::llround(v / 8.0)); }

}  // namespace detail

/// Single-image inference at native resolution. Sizes not divisible by 8 are
/// padded bottom/right with `pad` and the outputs cropped back.
inline Prediction<float> infer_image(const PSPNet<float>& model, const Image& img,
                                     const std::array<float, 3>& pad = {0.5f, 0.5f, 0.5f}) {
  const auto h = img.height, w = img.width;
  const auto ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  if (ph == h && pw == w) {
    return model.forward_infer(Tensor<float>::from_data({1, 3, h, w}, img.data));
  }
  SegSample s{img, LabelMap::single(h, w)};
  auto padded = pad_crop(s, std::max(ph, pw), 0, 0, pad, kIgnoreLabel);
  auto full = model.forward_infer(Tensor<float>::from_data({1, 3, padded.image.height, padded.image.width},
                                                           padded.image.data));
  const auto k = full.logits.dim(1), fh = full.logits.dim(2), fw = full.logits.dim(3);
  std::vector<float> logits(static_cast<std::size_t>(k * h * w)), probs(logits.size());
  auto fl = full.logits.data();
  for (std::int64_t c = 0; c < k; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        logits[static_cast<std::size_t>((c * h + y) * w + x)] = fl[static_cast<std::size_t>((c * fh + y) * fw + x)];
        probs[static_cast<std::size_t>((c * h + y) * w + x)] = full.probs[static_cast<std::size_t>((c * fh + y) * fw + x)];
      }
  Prediction<float> p;
  p.logits = Tensor<float>::from_data({1, k, h, w}, std::move(logits));
  p.probs = std::move(probs);
  p.labels = argmax_channels<float>(p.logits.data(), 1, k, h, w);
  return p;
}

/// Averages class probabilities over rescaled copies of the image. Each scale
/// s runs at round(H s / 8) * 8 by round(W s / 8) * 8, and its probabilities
/// are resized back to H x W. A scale that reproduces the native size runs on
/// the untouched image.
inline Prediction<float> multi_scale_infer(const PSPNet<float>& model, const Image& img,
                                           const std::vector<double>& scales,
                                           const std::array<float, 3>& pad = {0.5f, 0.5f, 0.5f},
                                           std::int64_t min_size = kMinInferSize) {
  if (scales.empty()) throw std::invalid_argument("multi_scale_infer: no scales given");
  const auto h = img.height, w = img.width;
  const auto k = static_cast<std::int64_t>(model.config().num_classes);
  std::vector<float> acc;
  for (double s : scales) {
    if (!(s > 0)) throw std::invalid_argument("multi_scale_infer: scales must be positive");
    std::vector<float> probs;
    if (s == 1.0) {
      probs = infer_image(model, img, pad).probs;
    } else {
      auto sh = detail::round_to_8(static_cast<double>(h) * s), sw = detail::round_to_8(static_cast<double>(w) * s);
      if (std::min(sh, sw) < min_size) {
        throw std::invalid_argument("multi_scale_infer: scale " + std::to_string(s) + " gives " +
                                    std::to_string(sh) + "x" + std::to_string(sw) + ", below the minimum side " +
                                    std::to_string(min_size));
      }
      auto scaled = detail::resize_planes(img.data, 3, h, w, sh, sw);
      auto p = model.forward_infer(Tensor<float>::from_data({1, 3, sh, sw}, std::move(scaled)));
      probs = detail::resize_planes(p.probs, k, sh, sw, h, w);
    }
    if (acc.empty()) {
      acc = std::move(probs);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += probs[i];
    }
  }
  const float n = static_cast<float>(scales.size());
  for (auto& v : acc) v /= n;
  Prediction<float> out;
  out.probs = acc;
  out.logits = Tensor<float>::from_data({1, k, h, w}, std::move(acc));  // averaged probabilities stand in for scores
  out.labels = argmax_channels<float>(out.logits.data(), 1, k, h, w);
  return out;
}

/// Confusion matrix of whole-image predictions over a dataset.
inline ConfusionMatrix evaluate(const PSPNet<float>& model, const std::vector<SegSample>& samples,
                                const std::vector<double>& scales = {1.0},
                                const std::array<float, 3>& pad = {0.5f, 0.5f, 0.5f}) {
  ConfusionMatrix cm(model.config().num_classes);
  for (const auto& s : samples) {
    auto p = scales.size() == 1 && scales[0] == 1.0 ? infer_image(model, s.image, pad)
                                                    : multi_scale_infer(model, s.image, scales, pad);
    cm.accumulate(p.labels, s.labels);
  }
  return cm;
}

}  // namespace psp
