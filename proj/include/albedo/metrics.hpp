#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "albedo/error.hpp"
#include "albedo/image.hpp"
#include "albedo/types.hpp"

namespace albedo::metrics {

// PSNR reported for (near-)identical images instead of +inf, so reports stay
// serializable.
inline constexpr double kPsnrCap = 99.0;

inline double mse(const ImageTensor& a, const ImageTensor& b) {
  require_same_shape(a, b, "mse");
  auto av = a.values();
  auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return s / static_cast<double>(av.size());
}

inline double psnr_from_mse(double m, double peak = 1.0) {
  if (m < 1e-12) return kPsnrCap;
  return 10.0 * std::log10(peak * peak / m);
}

inline double psnr(const ImageTensor& a, const ImageTensor& b, double peak = 1.0) {
  return psnr_from_mse(mse(a, b), peak);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const double c = 0.5 * (size - 1);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

inline std::vector<double> grayscale(const ImageTensor& image) {
  std::vector<double> g(image.pixels());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      g[static_cast<std::size_t>(y) * image.width() + x] =
          (image.at(y, x, 0) + image.at(y, x, 1) + image.at(y, x, 2)) / 3.0;
    }
  }
  return g;
}

// Mean SSIM over all fully contained Gaussian windows of the channel-mean
// grayscale images. Uses a separable filter; the tests compare it against a
// direct 2-D window evaluation.
inline double ssim(const ImageTensor& a, const ImageTensor& b, const SsimOptions& opt = {}) {
  require_same_shape(a, b, "ssim");
  require(a.height() >= opt.window && a.width() >= opt.window, ErrorCode::invalid_argument,
          "ssim: image smaller than the window");
  const int h = a.height(), w = a.width(), k = opt.window;
  const int oh = h - k + 1, ow = w - k + 1;
  const auto win = gaussian_window(k, opt.sigma);
  const auto ga = grayscale(a);
  const auto gb = grayscale(b);

  // Five filtered moments: a, b, a^2, b^2, ab.
  std::vector<double> src[5];
  for (auto& s : src) s.resize(ga.size());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    src[0][i] = ga[i];
    src[1][i] = gb[i];
    src[2][i] = ga[i] * ga[i];
    src[3][i] = gb[i] * gb[i];
    src[4][i] = ga[i] * gb[i];
  }
  std::vector<double> filt[5];
  for (int m = 0; m < 5; ++m) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += win[static_cast<std::size_t>(j)] * src[m][static_cast<std::size_t>(y) * w + x + j];
        rows[static_cast<std::size_t>(y) * ow + x] = s;
      }
    filt[m].assign(static_cast<std::size_t>(oh) * ow, 0.0);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < k; ++i) s += win[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>(y + i) * ow + x];
        filt[m][static_cast<std::size_t>(y) * ow + x] = s;
      }
  }
  const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
  double total = 0.0;
  for (std::size_t i = 0; i < filt[0].size(); ++i) {
    const double mu_a = filt[0][i], mu_b = filt[1][i];
    const double var_a = filt[2][i] - mu_a * mu_a;
    const double var_b = filt[3][i] - mu_b * mu_b;
    const double cov = filt[4][i] - mu_a * mu_b;
    total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(filt[0].size());
}

// Fraction of the pool labeled negative. Every item counts in the
// denominator, ambiguous ones included.
inline double negative_class_ratio(std::span<const Label> labels) {
  require(!labels.empty(), ErrorCode::invalid_argument, "negative_class_ratio: empty pool");
  std::size_t neg = 0;
  for (auto l : labels) neg += (l == Label::negative);
  return static_cast<double>(neg) / static_cast<double>(labels.size());
}

// Labels from classifier scores: negative below `threshold`, positive otherwise.
inline std::vector<Label> labels_from_scores(std::span<const double> scores, double threshold = 0.5) {
  std::vector<Label> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(s < threshold ? Label::negative : Label::positive);
  return out;
}

// Binary accuracy of predicted labels against reference labels; reference
// items that are ambiguous or unlabeled are left out of the denominator.
inline double accuracy(std::span<const Label> predicted, std::span<const Label> reference) {
  require(predicted.size() == reference.size(), ErrorCode::shape_mismatch, "accuracy: length mismatch");
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    if (reference[i] != Label::positive && reference[i] != Label::negative) continue;
    ++n;
    hit += predicted[i] == reference[i];
  }
  require(n > 0, ErrorCode::invalid_argument, "accuracy: no decidable reference labels");
  return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace albedo::metrics
