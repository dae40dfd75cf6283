#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "albedo/error.hpp"

namespace albedo {

// H x W x 3 raster of doubles, interleaved (HWC) like the files it is read
// from. Values are nominally in [0,1]; shading is the one field allowed to
// exceed 1 before composition.
class ImageTensor {
 public:
  static constexpr int channels = 3;

  ImageTensor() = default;
  ImageTensor(int height, int width, double fill = 0.0)
      : height_(checked_dim(height)), width_(checked_dim(width)),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {}

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const ImageTensor& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool within(double lo, double hi) const noexcept {
    return std::all_of(data_.begin(), data_.end(), [=](double v) { return v >= lo && v <= hi; });
  }

  double mean() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v;
    return data_.empty() ? 0.0 : s / static_cast<double>(data_.size());
  }

  bool operator==(const ImageTensor&) const = default;

 private:
  static int checked_dim(int d) {
    require(d > 0, ErrorCode::invalid_argument, "image dimensions must be positive");
    return d;
  }
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const ImageTensor& a, const ImageTensor& b, const std::string& context) {
  if (!a.same_shape(b)) {
    fail(ErrorCode::shape_mismatch, context + ": shape mismatch (" + std::to_string(a.height()) + "x" +
                                        std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                                        std::to_string(b.width()) + ")");
  }
}

inline ImageTensor clipped(ImageTensor image, double lo = 0.0, double hi = 1.0) {
  for (double& v : image.values()) v = std::clamp(v, lo, hi);
  return image;
}

inline double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

}  // namespace albedo
