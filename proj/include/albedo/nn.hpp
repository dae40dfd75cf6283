#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "albedo/error.hpp"
#include "albedo/image.hpp"
#include "albedo/rng.hpp"

// Minimal layer kit for the two toy networks. Parameters live in one flat
// vector per network; each layer only records its offsets into it, which
// keeps hashing, serialization, the optimizer and gradient checks trivial.
namespace albedo::nn {

// Activations in channel-major batch layout (C, N, H, W), so an im2col over
// the whole batch is a single GEMM operand.
template <class S>
struct Tensor {
  int c = 0;
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<S> v;

  Tensor() = default;
  Tensor(int channels, int batch, int height, int width, S fill = S(0))
      : c(channels), n(batch), h(height), w(width),
        v(static_cast<std::size_t>(channels) * batch * height * width, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t size() const { return v.size(); }
  S* data(int ci, int ni) { return v.data() + (static_cast<std::size_t>(ci) * n + ni) * plane(); }
  const S* data(int ci, int ni) const { return v.data() + (static_cast<std::size_t>(ci) * n + ni) * plane(); }
  bool same_shape(const Tensor& o) const { return c == o.c && n == o.n && h == o.h && w == o.w; }
};

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

// Packs images (HWC doubles) into a (3, N, H, W) tensor with v -> scale*v + shift.
template <class S>
Tensor<S> pack_images(std::span<const ImageTensor* const> images, double scale = 1.0, double shift = 0.0) {
  require(!images.empty(), ErrorCode::invalid_argument, "pack_images: empty batch");
  const int h = images[0]->height(), w = images[0]->width();
  Tensor<S> t(3, static_cast<int>(images.size()), h, w);
  for (int ni = 0; ni < t.n; ++ni) {
    const auto& img = *images[static_cast<std::size_t>(ni)];
    require(img.height() == h && img.width() == w, ErrorCode::shape_mismatch, "pack_images: mixed sizes");
    for (int ci = 0; ci < 3; ++ci) {
      S* dst = t.data(ci, ni);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dst[y * w + x] = static_cast<S>(scale * img.at(y, x, ci) + shift);
    }
  }
  return t;
}

template <class S>
ImageTensor unpack_image(const Tensor<S>& t, int ni, double scale = 1.0, double shift = 0.0) {
  ImageTensor img(t.h, t.w);
  for (int ci = 0; ci < 3; ++ci) {
    const S* src = t.data(ci, ni);
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) img.at(y, x, ci) = scale * static_cast<double>(src[y * t.w + x]) + shift;
  }
  return img;
}

// Concatenates along channels.
template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.n == b.n && a.h == b.h && a.w == b.w, ErrorCode::shape_mismatch, "concat_channels");
  Tensor<S> out(a.c + b.c, a.n, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return out;
}

struct ParamLayout {
  std::size_t total = 0;
  std::size_t take(std::size_t count) {
    const std::size_t off = total;
    total += count;
    return off;
  }
};

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1.

struct Conv3x3 {
  int cin = 0;
  int cout = 0;
  std::size_t w_off = 0;
  std::size_t b_off = 0;

  Conv3x3() = default;
  Conv3x3(int in, int out, ParamLayout& layout) : cin(in), cout(out) {
    w_off = layout.take(static_cast<std::size_t>(cout) * cin * 9);
    b_off = layout.take(static_cast<std::size_t>(cout));
  }
  int fan_in() const { return cin * 9; }
  std::size_t weight_count() const { return static_cast<std::size_t>(cout) * cin * 9; }
};

template <class S>
void im2col3x3(const Tensor<S>& x, std::vector<S>& cols) {
  const int h = x.h, w = x.w;
  const std::size_t width = static_cast<std::size_t>(x.n) * x.plane();
  cols.assign(static_cast<std::size_t>(x.c) * 9 * width, S(0));
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        S* row = cols.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * width;
        for (int ni = 0; ni < x.n; ++ni) {
          const S* src = x.data(ci, ni);
          S* dst = row + static_cast<std::size_t>(ni) * x.plane();
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
            const S* s = src + sy * w + (kx - 1);
            S* d = dst + y * w;
            for (int xx = x0; xx < x1; ++xx) d[xx] = s[xx];
          }
        }
      }
    }
  }
}

template <class S>
void col2im3x3_add(const std::vector<S>& cols, Tensor<S>& dx) {
  const int h = dx.h, w = dx.w;
  const std::size_t width = static_cast<std::size_t>(dx.n) * dx.plane();
  for (int ci = 0; ci < dx.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const S* row = cols.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * width;
        for (int ni = 0; ni < dx.n; ++ni) {
          S* dst = dx.data(ci, ni);
          const S* src = row + static_cast<std::size_t>(ni) * dx.plane();
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
            S* d = dst + sy * w + (kx - 1);
            const S* s = src + y * w;
            for (int xx = x0; xx < x1; ++xx) d[xx] += s[xx];
          }
        }
      }
    }
  }
}

// Forward pass; leaves the im2col buffer in `cols` for the backward pass.
template <class S>
Tensor<S> conv_forward(const Conv3x3& conv, std::span<const S> params, const Tensor<S>& x, std::vector<S>& cols) {
  require(x.c == conv.cin, ErrorCode::shape_mismatch, "conv_forward: channel mismatch");
  im2col3x3(x, cols);
  const auto width = static_cast<Eigen::Index>(static_cast<std::size_t>(x.n) * x.plane());
  Tensor<S> y(conv.cout, x.n, x.h, x.w);
  ConstMatMap<S> wm(params.data() + conv.w_off, conv.cout, conv.fan_in());
  ConstMatMap<S> cm(cols.data(), conv.fan_in(), width);
  MatMap<S> ym(y.v.data(), conv.cout, width);
  ym.noalias() = wm * cm;
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> b(params.data() + conv.b_off, conv.cout);
  ym.colwise() += b;
  return y;
}

// Accumulates parameter gradients into `grad`; writes the input gradient
// into *dx when requested.
template <class S>
void conv_backward(const Conv3x3& conv, std::span<const S> params, const std::vector<S>& cols, const Tensor<S>& dy,
                   std::span<S> grad, Tensor<S>* dx) {
  const auto width = static_cast<Eigen::Index>(static_cast<std::size_t>(dy.n) * dy.plane());
  ConstMatMap<S> dym(dy.v.data(), conv.cout, width);
  ConstMatMap<S> cm(cols.data(), conv.fan_in(), width);
  MatMap<S> gw(grad.data() + conv.w_off, conv.cout, conv.fan_in());
  gw.noalias() += dym * cm.transpose();
  // Plain loops for reductions: Eigen's peeling depends on buffer alignment,
  // which would make results vary from run to run.
  for (int o = 0; o < conv.cout; ++o) {
    const S* row = dy.v.data() + static_cast<std::size_t>(o) * static_cast<std::size_t>(width);
    S acc = 0;
    for (Eigen::Index q = 0; q < width; ++q) acc += row[q];
    grad[conv.b_off + static_cast<std::size_t>(o)] += acc;
  }
  if (dx != nullptr) {
    *dx = Tensor<S>(conv.cin, dy.n, dy.h, dy.w);
    thread_local std::vector<S> dcols;
    dcols.resize(static_cast<std::size_t>(conv.fan_in()) * static_cast<std::size_t>(width));
    ConstMatMap<S> wm(params.data() + conv.w_off, conv.cout, conv.fan_in());
    MatMap<S> dcm(dcols.data(), conv.fan_in(), width);
    dcm.noalias() = wm.transpose() * dym;
    col2im3x3_add(dcols, *dx);
  }
}

// ---------------------------------------------------------------------------
// Fully connected layer over row-major (N, in) inputs.

struct Dense {
  int in = 0;
  int out = 0;
  std::size_t w_off = 0;
  std::size_t b_off = 0;

  Dense() = default;
  Dense(int i, int o, ParamLayout& layout) : in(i), out(o) {
    w_off = layout.take(static_cast<std::size_t>(out) * in);
    b_off = layout.take(static_cast<std::size_t>(out));
  }
  std::size_t weight_count() const { return static_cast<std::size_t>(out) * in; }
};

template <class S>
std::vector<S> dense_forward(const Dense& d, std::span<const S> params, std::span<const S> x, int batch) {
  std::vector<S> y(static_cast<std::size_t>(batch) * d.out);
  ConstMatMap<S> xm(x.data(), batch, d.in);
  ConstMatMap<S> wm(params.data() + d.w_off, d.out, d.in);
  MatMap<S> ym(y.data(), batch, d.out);
  ym.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(params.data() + d.b_off, d.out);
  ym.rowwise() += b;
  return y;
}

template <class S>
void dense_backward(const Dense& d, std::span<const S> params, std::span<const S> x, std::span<const S> dy, int batch,
                    std::span<S> grad, std::vector<S>* dx) {
  ConstMatMap<S> xm(x.data(), batch, d.in);
  ConstMatMap<S> dym(dy.data(), batch, d.out);
  MatMap<S> gw(grad.data() + d.w_off, d.out, d.in);
  gw.noalias() += dym.transpose() * xm;
  for (int ni = 0; ni < batch; ++ni)
    for (int o = 0; o < d.out; ++o) grad[d.b_off + static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(ni) * d.out + o];
  if (dx != nullptr) {
    dx->assign(static_cast<std::size_t>(batch) * d.in, S(0));
    ConstMatMap<S> wm(params.data() + d.w_off, d.out, d.in);
    MatMap<S> dxm(dx->data(), batch, d.in);
    dxm.noalias() = dym * wm;
  }
}

// ---------------------------------------------------------------------------
// Pointwise and resampling ops

template <class S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

// In place; `pre` receives the pre-activation values.
template <class S>
void silu_inplace(std::vector<S>& x, std::vector<S>& pre) {
  pre = x;
  for (auto& v : x) v = v / (S(1) + std::exp(-v));
}

template <class S>
void silu_backward_inplace(std::vector<S>& dy, const std::vector<S>& pre) {
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const S z = pre[i];
    const S s = S(1) / (S(1) + std::exp(-z));
    dy[i] *= s * (S(1) + z * (S(1) - s));
  }
}

template <class S>
Tensor<S> avgpool2(const Tensor<S>& x) {
  require(x.h % 2 == 0 && x.w % 2 == 0, ErrorCode::shape_mismatch, "avgpool2 needs even spatial size");
  Tensor<S> y(x.c, x.n, x.h / 2, x.w / 2);
  for (int ci = 0; ci < x.c; ++ci)
    for (int ni = 0; ni < x.n; ++ni) {
      const S* s = x.data(ci, ni);
      S* d = y.data(ci, ni);
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) {
          const int a = 2 * yy * x.w + 2 * xx;
          d[yy * y.w + xx] = S(0.25) * (s[a] + s[a + 1] + s[a + x.w] + s[a + x.w + 1]);
        }
    }
  return y;
}

template <class S>
Tensor<S> avgpool2_backward(const Tensor<S>& dy) {
  Tensor<S> dx(dy.c, dy.n, dy.h * 2, dy.w * 2);
  for (int ci = 0; ci < dy.c; ++ci)
    for (int ni = 0; ni < dy.n; ++ni) {
      const S* s = dy.data(ci, ni);
      S* d = dx.data(ci, ni);
      for (int yy = 0; yy < dx.h; ++yy)
        for (int xx = 0; xx < dx.w; ++xx) d[yy * dx.w + xx] = S(0.25) * s[(yy / 2) * dy.w + xx / 2];
    }
  return dx;
}

template <class S>
Tensor<S> upsample2(const Tensor<S>& x) {
  Tensor<S> y(x.c, x.n, x.h * 2, x.w * 2);
  for (int ci = 0; ci < x.c; ++ci)
    for (int ni = 0; ni < x.n; ++ni) {
      const S* s = x.data(ci, ni);
      S* d = y.data(ci, ni);
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) d[yy * y.w + xx] = s[(yy / 2) * x.w + xx / 2];
    }
  return y;
}

template <class S>
Tensor<S> upsample2_backward(const Tensor<S>& dy) {
  Tensor<S> dx(dy.c, dy.n, dy.h / 2, dy.w / 2);
  for (int ci = 0; ci < dy.c; ++ci)
    for (int ni = 0; ni < dy.n; ++ni) {
      const S* s = dy.data(ci, ni);
      S* d = dx.data(ci, ni);
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx) d[(yy / 2) * dx.w + xx / 2] += s[yy * dy.w + xx];
    }
  return dx;
}

// Adds a per-(channel, sample) bias; bias is row-major (N, C).
template <class S>
void add_channel_bias(Tensor<S>& x, std::span<const S> bias) {
  for (int ci = 0; ci < x.c; ++ci)
    for (int ni = 0; ni < x.n; ++ni) {
      const S b = bias[static_cast<std::size_t>(ni) * x.c + ci];
      S* d = x.data(ci, ni);
      for (std::size_t k = 0; k < x.plane(); ++k) d[k] += b;
    }
}

template <class S>
std::vector<S> channel_bias_backward(const Tensor<S>& dy) {
  std::vector<S> db(static_cast<std::size_t>(dy.n) * dy.c, S(0));
  for (int ci = 0; ci < dy.c; ++ci)
    for (int ni = 0; ni < dy.n; ++ni) {
      const S* s = dy.data(ci, ni);
      S acc = 0;
      for (std::size_t k = 0; k < dy.plane(); ++k) acc += s[k];
      db[static_cast<std::size_t>(ni) * dy.c + ci] = acc;
    }
  return db;
}

// Spatial mean per (sample, channel), row-major (N, C).
template <class S>
std::vector<S> global_mean(const Tensor<S>& x) {
  std::vector<S> out(static_cast<std::size_t>(x.n) * x.c, S(0));
  for (int ci = 0; ci < x.c; ++ci)
    for (int ni = 0; ni < x.n; ++ni) {
      const S* d = x.data(ci, ni);
      S acc = 0;
      for (std::size_t k = 0; k < x.plane(); ++k) acc += d[k];
      out[static_cast<std::size_t>(ni) * x.c + ci] = acc / static_cast<S>(x.plane());
    }
  return out;
}

// Adds the gradient of global_mean, given d(out) (N, C), into dx.
template <class S>
void global_mean_backward_add(std::span<const S> dmean, Tensor<S>& dx) {
  const S inv = S(1) / static_cast<S>(dx.plane());
  for (int ci = 0; ci < dx.c; ++ci)
    for (int ni = 0; ni < dx.n; ++ni) {
      const S g = dmean[static_cast<std::size_t>(ni) * dx.c + ci] * inv;
      S* d = dx.data(ci, ni);
      for (std::size_t k = 0; k < dx.plane(); ++k) d[k] += g;
    }
}

// ---------------------------------------------------------------------------
// Initialization and optimization

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <class S>
void init_uniform(std::span<S> params, std::size_t offset, std::size_t count, int fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t i = 0; i < count; ++i) params[offset + i] = static_cast<S>(dist(rng));
}

template <class S>
void init_conv(std::span<S> params, const Conv3x3& conv, Rng& rng, double gain = 1.0) {
  init_uniform(params, conv.w_off, conv.weight_count(), conv.fan_in(), rng, gain);
  init_uniform(params, conv.b_off, static_cast<std::size_t>(conv.cout), conv.fan_in(), rng, gain);
}

template <class S>
void init_dense(std::span<S> params, const Dense& d, Rng& rng, double gain = 1.0) {
  init_uniform(params, d.w_off, d.weight_count(), d.in, rng, gain);
  init_uniform(params, d.b_off, static_cast<std::size_t>(d.out), d.in, rng, gain);
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

// Adam with moments kept in double regardless of the parameter type.
class Adam {
 public:
  Adam(std::size_t count, AdamOptions opt) : opt_(opt), m_(count, 0.0), v_(count, 0.0) {}

  template <class S>
  void step(std::span<S> params, std::span<const S> grad) {
    require(params.size() == m_.size() && grad.size() == m_.size(), ErrorCode::shape_mismatch, "adam: size mismatch");
    double scale = 1.0;
    if (opt_.clip_norm > 0.0) {
      double sq = 0.0;
      for (S g : grad) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const double g = scale * static_cast<double>(grad[i]);
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g * g;
      const double update = opt_.lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + opt_.eps);
      params[i] = static_cast<S>(static_cast<double>(params[i]) - update);
    }
  }

 private:
  AdamOptions opt_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

template <class S>
bool all_finite(std::span<const S> values) {
  return std::all_of(values.begin(), values.end(), [](S v) { return std::isfinite(static_cast<double>(v)); });
}

}  // namespace albedo::nn
