#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/checkpoint.hpp"
#include "albedo/error.hpp"
#include "albedo/image.hpp"
#include "albedo/nn.hpp"
#include "albedo/rng.hpp"

namespace albedo {

// ---------------------------------------------------------------------------
// Noise schedule. Index 0 is the clean limit (alpha_bar = 1); t runs 1..T.

struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;      // size T + 1, betas[0] = 0
  std::vector<double> alpha_bar;  // size T + 1, alpha_bar[0] = 1

  double ab(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
  nlohmann::json to_json() const { return {{"kind", "linear"}, {"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}}; }
};

inline NoiseSchedule linear_schedule(int T = 200, double beta_start = 5e-4, double beta_end = 0.05) {
  require(T >= 1, ErrorCode::invalid_argument, "schedule: T must be >= 1");
  require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end, ErrorCode::invalid_argument,
          "schedule: betas must satisfy 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    s.betas[static_cast<std::size_t>(t)] = beta_start + frac * (beta_end - beta_start);
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - s.betas[static_cast<std::size_t>(t)]);
  }
  return s;
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  require(j.value("kind", "") == "linear", ErrorCode::io, "schedule: unsupported kind");
  return linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

// x_t = sqrt(ab)*x0 + sqrt(1-ab)*eps for an explicit alpha_bar value.
template <class S>
void forward_noise_ab(std::span<const S> x0, double ab, std::span<const S> eps, std::span<S> out) {
  require(x0.size() == eps.size() && x0.size() == out.size(), ErrorCode::shape_mismatch, "forward_noise: size mismatch");
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<S>(a * x0[i] + b * eps[i]);
}

inline ImageTensor forward_noise(const ImageTensor& x0, int t, const ImageTensor& eps, const NoiseSchedule& s) {
  require(t >= 1 && t <= s.T, ErrorCode::invalid_argument, "forward_noise: t outside [1, T]");
  require_same_shape(x0, eps, "forward_noise");
  ImageTensor out(x0.height(), x0.width());
  forward_noise_ab<double>(x0.values(), s.ab(t), eps.values(), out.values());
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser: a two-level U-net over [x_t ; condition] with a timestep
// embedding injected as per-channel biases at both levels.

struct DenoiserArch {
  int channels = 16;
  int temb_dim = 32;
  bool residual = true;  // diffuse A - I instead of A
  // eps = sqrt(ab) * net + sqrt(1 - ab) * x_t; the net then carries the
  // x0 estimate at high noise instead of reproducing x_t.
  bool skip = true;

  nlohmann::json to_json() const {
    return {{"net", "unet2"},
            {"channels", channels},
            {"temb_dim", temb_dim},
            {"target", residual ? "residual" : "albedo"},
            {"output", skip ? "skip" : "direct"}};
  }
  static DenoiserArch from_json(const nlohmann::json& j) {
    require(j.value("net", "") == "unet2", ErrorCode::io, "denoiser: unknown architecture");
    const auto target = j.value("target", "albedo");
    require(target == "albedo" || target == "residual", ErrorCode::io, "denoiser: unknown target");
    const auto output = j.value("output", "direct");
    require(output == "direct" || output == "skip", ErrorCode::io, "denoiser: unknown output mode");
    return {j.at("channels").get<int>(), j.at("temb_dim").get<int>(), target == "residual", output == "skip"};
  }
  bool operator==(const DenoiserArch&) const = default;
};

template <class S>
std::vector<S> timestep_embedding(std::span<const int> ts, int dim) {
  const int half = dim / 2;
  std::vector<S> out(ts.size() * static_cast<std::size_t>(dim), S(0));
  for (std::size_t n = 0; n < ts.size(); ++n) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(1000.0) * k / std::max(1, half));
      out[n * dim + k] = static_cast<S>(std::sin(ts[n] * freq));
      out[n * dim + half + k] = static_cast<S>(std::cos(ts[n] * freq));
    }
  }
  return out;
}

template <class S>
struct DenoiserCache {
  int batch = 0;
  std::vector<S> temb, pre_e, e1;
  std::vector<S> cols1, cols2, cols3, cols4, cols5, cols6;
  std::vector<S> pre1, pre2, pre3, pre4, pre5;
  std::vector<double> out_scale;  // per sample, skip mode only
  int h = 0, w = 0;
};

class Denoiser {
 public:
  // The schedule is needed only in skip mode.
  explicit Denoiser(DenoiserArch arch = {}, std::vector<double> alpha_bar = {})
      : arch_(arch), alpha_bar_(std::move(alpha_bar)) {
    require(arch.channels >= 1 && arch.temb_dim >= 2 && arch.temb_dim % 2 == 0, ErrorCode::config,
            "denoiser: channels >= 1 and an even temb_dim >= 2 required");
    const int c = arch.channels, e = arch.temb_dim;
    nn::ParamLayout l;
    temb_ = nn::Dense(e, e, l);
    bias1_ = nn::Dense(e, c, l);
    bias2_ = nn::Dense(e, 2 * c, l);
    conv1_ = nn::Conv3x3(6, c, l);
    conv2_ = nn::Conv3x3(c, c, l);
    conv3_ = nn::Conv3x3(c, 2 * c, l);
    conv4_ = nn::Conv3x3(2 * c, 2 * c, l);
    conv5_ = nn::Conv3x3(3 * c, c, l);
    conv6_ = nn::Conv3x3(c, 3, l);
    count_ = l.total;
  }

  const DenoiserArch& arch() const { return arch_; }
  std::size_t param_count() const { return count_; }

  template <class S>
  std::vector<S> init(std::uint64_t seed) const {
    std::vector<S> p(count_, S(0));
    Rng rng = make_rng(seed, "denoiser-init");
    std::span<S> ps(p);
    nn::init_dense(ps, temb_, rng);
    nn::init_dense(ps, bias1_, rng);
    nn::init_dense(ps, bias2_, rng);
    nn::init_conv(ps, conv1_, rng);
    nn::init_conv(ps, conv2_, rng);
    nn::init_conv(ps, conv3_, rng);
    nn::init_conv(ps, conv4_, rng);
    nn::init_conv(ps, conv5_, rng);
    nn::init_conv(ps, conv6_, rng);
    return p;
  }

  // x_t and cond are (3, N, H, W) in the model's [-1, 1] space; H, W even.
  template <class S>
  nn::Tensor<S> forward(std::span<const S> p, const nn::Tensor<S>& xt, const nn::Tensor<S>& cond, std::span<const int> ts,
                        DenoiserCache<S>* cache = nullptr) const {
    require(xt.same_shape(cond) && xt.c == 3, ErrorCode::shape_mismatch, "denoiser: x_t / condition shape mismatch");
    require(ts.size() == static_cast<std::size_t>(xt.n), ErrorCode::shape_mismatch, "denoiser: one timestep per sample");
    require(xt.h % 2 == 0 && xt.w % 2 == 0, ErrorCode::shape_mismatch, "denoiser: spatial size must be even");
    thread_local DenoiserCache<S> scratch;  // keeps buffer capacity across calls
    DenoiserCache<S>& k = cache ? *cache : scratch;
    k.batch = xt.n;
    k.h = xt.h;
    k.w = xt.w;

    k.temb = timestep_embedding<S>(ts, arch_.temb_dim);
    k.e1 = nn::dense_forward<S>(temb_, p, k.temb, xt.n);
    nn::silu_inplace(k.e1, k.pre_e);
    const auto b1 = nn::dense_forward<S>(bias1_, p, k.e1, xt.n);
    const auto b2 = nn::dense_forward<S>(bias2_, p, k.e1, xt.n);

    auto x = nn::concat_channels(xt, cond);
    auto h1 = nn::conv_forward(conv1_, p, x, k.cols1);
    nn::add_channel_bias<S>(h1, b1);
    nn::silu_inplace(h1.v, k.pre1);
    auto h2 = nn::conv_forward(conv2_, p, h1, k.cols2);
    nn::silu_inplace(h2.v, k.pre2);
    auto pooled = nn::avgpool2(h2);
    auto h3 = nn::conv_forward(conv3_, p, pooled, k.cols3);
    nn::add_channel_bias<S>(h3, b2);
    nn::silu_inplace(h3.v, k.pre3);
    auto h4 = nn::conv_forward(conv4_, p, h3, k.cols4);
    nn::silu_inplace(h4.v, k.pre4);
    auto cat = nn::concat_channels(nn::upsample2(h4), h2);
    auto h5 = nn::conv_forward(conv5_, p, cat, k.cols5);
    nn::silu_inplace(h5.v, k.pre5);
    auto out = nn::conv_forward(conv6_, p, h5, k.cols6);
    if (arch_.skip) {
      k.out_scale.assign(static_cast<std::size_t>(xt.n), 0.0);
      for (int ni = 0; ni < xt.n; ++ni) {
        const auto t = static_cast<std::size_t>(ts[static_cast<std::size_t>(ni)]);
        require(t < alpha_bar_.size(), ErrorCode::invalid_argument, "denoiser: timestep outside the schedule");
        const double a = std::sqrt(alpha_bar_[t]), b = std::sqrt(1.0 - alpha_bar_[t]);
        k.out_scale[static_cast<std::size_t>(ni)] = a;
        for (int ci = 0; ci < 3; ++ci) {
          S* o = out.data(ci, ni);
          const S* x = xt.data(ci, ni);
          for (std::size_t q = 0; q < out.plane(); ++q) o[q] = static_cast<S>(a * o[q] + b * x[q]);
        }
      }
    }
    return out;
  }

  // Accumulates d(loss)/d(params) into grad given d(loss)/d(output).
  template <class S>
  void backward(std::span<const S> p, const DenoiserCache<S>& k, const nn::Tensor<S>& dout, std::span<S> grad) const {
    require(grad.size() == count_, ErrorCode::shape_mismatch, "denoiser: gradient buffer size");
    const int c = arch_.channels, n = k.batch, h = k.h, w = k.w;
    nn::Tensor<S> dh5, dcat, dh3, dpool, dh1;
    if (arch_.skip) {
      nn::Tensor<S> draw = dout;
      for (int ci = 0; ci < draw.c; ++ci)
        for (int ni = 0; ni < n; ++ni) {
          const double a = k.out_scale.at(static_cast<std::size_t>(ni));
          S* d = draw.data(ci, ni);
          for (std::size_t q = 0; q < draw.plane(); ++q) d[q] = static_cast<S>(a * d[q]);
        }
      nn::conv_backward(conv6_, p, k.cols6, draw, grad, &dh5);
    } else {
      nn::conv_backward(conv6_, p, k.cols6, dout, grad, &dh5);
    }
    nn::silu_backward_inplace(dh5.v, k.pre5);
    nn::conv_backward(conv5_, p, k.cols5, dh5, grad, &dcat);
    nn::Tensor<S> du(2 * c, n, h, w), dh2(c, n, h, w);
    std::copy(dcat.v.begin(), dcat.v.begin() + static_cast<std::ptrdiff_t>(du.size()), du.v.begin());
    std::copy(dcat.v.begin() + static_cast<std::ptrdiff_t>(du.size()), dcat.v.end(), dh2.v.begin());
    auto dh4 = nn::upsample2_backward(du);
    nn::silu_backward_inplace(dh4.v, k.pre4);
    nn::conv_backward(conv4_, p, k.cols4, dh4, grad, &dh3);
    nn::silu_backward_inplace(dh3.v, k.pre3);
    const auto db2 = nn::channel_bias_backward(dh3);
    nn::conv_backward(conv3_, p, k.cols3, dh3, grad, &dpool);
    const auto dh2_pool = nn::avgpool2_backward(dpool);
    for (std::size_t i = 0; i < dh2.v.size(); ++i) dh2.v[i] += dh2_pool.v[i];
    nn::silu_backward_inplace(dh2.v, k.pre2);
    nn::conv_backward(conv2_, p, k.cols2, dh2, grad, &dh1);
    nn::silu_backward_inplace(dh1.v, k.pre1);
    const auto db1 = nn::channel_bias_backward(dh1);
    nn::conv_backward<S>(conv1_, p, k.cols1, dh1, grad, nullptr);

    std::vector<S> de_a, de_b;
    nn::dense_backward<S>(bias1_, p, k.e1, db1, n, grad, &de_a);
    nn::dense_backward<S>(bias2_, p, k.e1, db2, n, grad, &de_b);
    for (std::size_t i = 0; i < de_a.size(); ++i) de_a[i] += de_b[i];
    nn::silu_backward_inplace(de_a, k.pre_e);
    nn::dense_backward<S>(temb_, p, k.temb, de_a, n, grad, nullptr);
  }

 private:
  DenoiserArch arch_;
  std::vector<double> alpha_bar_;
  nn::Dense temb_, bias1_, bias2_;
  nn::Conv3x3 conv1_, conv2_, conv3_, conv4_, conv5_, conv6_;
  std::size_t count_ = 0;
};

// Images live in [0,1]; the model works in [-1,1].
template <class S>
nn::Tensor<S> to_model_space(std::span<const ImageTensor* const> images) {
  return nn::pack_images<S>(images, 2.0, -1.0);
}

// Diffusion target x0: 2A - 1, or 2(A - I) in residual mode.
template <class S>
nn::Tensor<S> encode_target(bool residual, std::span<const ImageTensor* const> albedos, const nn::Tensor<S>& cond) {
  auto x0 = to_model_space<S>(albedos);
  require(x0.same_shape(cond), ErrorCode::shape_mismatch, "diffusion: albedo and condition sizes differ");
  if (residual)
    for (std::size_t i = 0; i < x0.v.size(); ++i) x0.v[i] -= cond.v[i];
  return x0;
}

inline double target_bound(bool residual) { return residual ? 2.0 : 1.0; }

template <class S>
ImageTensor decode_target(bool residual, const nn::Tensor<S>& x0, const nn::Tensor<S>& cond, int ni) {
  if (!residual) return clipped(nn::unpack_image(x0, ni, 0.5, 0.5));
  nn::Tensor<S> one(3, 1, x0.h, x0.w);
  for (int ci = 0; ci < 3; ++ci) {
    const S* a = x0.data(ci, ni);
    const S* c = cond.data(ci, ni);
    S* d = one.data(ci, 0);
    for (std::size_t k = 0; k < x0.plane(); ++k) d[k] = a[k] + c[k];
  }
  return clipped(nn::unpack_image(one, 0, 0.5, 0.5));
}

// ---------------------------------------------------------------------------
// Noise-prediction loss

template <class S>
struct NoiseBatch {
  nn::Tensor<S> x0, cond, eps, xt;
  std::vector<int> ts;
};

// Draws an independent t ~ U{1..T} and eps ~ N(0, I) per sample.
template <class S>
NoiseBatch<S> draw_noise_batch(std::span<const ImageTensor* const> albedos, std::span<const ImageTensor* const> conds,
                               const NoiseSchedule& sched, Rng& rng, bool residual = false) {
  require(!albedos.empty(), ErrorCode::invalid_argument, "noise batch: empty batch");
  require(albedos.size() == conds.size(), ErrorCode::shape_mismatch, "noise batch: albedo/condition count mismatch");
  NoiseBatch<S> b;
  b.cond = to_model_space<S>(conds);
  b.x0 = encode_target<S>(residual, albedos, b.cond);
  b.ts.resize(albedos.size());
  for (auto& t : b.ts) t = uniform_int(rng, 1, sched.T);
  b.eps = nn::Tensor<S>(3, b.x0.n, b.x0.h, b.x0.w);
  // Noise drawn sample-major so a sample's noise does not depend on the batch size.
  std::vector<S> tmp(3 * b.x0.plane());
  for (int ni = 0; ni < b.x0.n; ++ni) {
    fill_normal<S>(tmp, rng);
    for (int ci = 0; ci < 3; ++ci) std::copy_n(tmp.data() + ci * b.x0.plane(), b.x0.plane(), b.eps.data(ci, ni));
  }
  b.xt = nn::Tensor<S>(3, b.x0.n, b.x0.h, b.x0.w);
  for (int ci = 0; ci < 3; ++ci)
    for (int ni = 0; ni < b.x0.n; ++ni) {
      const double ab = sched.ab(b.ts[static_cast<std::size_t>(ni)]);
      forward_noise_ab<S>(std::span<const S>(b.x0.data(ci, ni), b.x0.plane()), ab,
                          std::span<const S>(b.eps.data(ci, ni), b.x0.plane()),
                          std::span<S>(b.xt.data(ci, ni), b.x0.plane()));
    }
  return b;
}

// Per-element mean of (eps - pred)^2; a zero predictor gives E[eps^2] = 1.
template <class S>
double noise_residual_loss(const nn::Tensor<S>& eps, const nn::Tensor<S>& pred) {
  require(eps.same_shape(pred), ErrorCode::shape_mismatch, "noise loss: prediction shape");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.v.size(); ++i) {
    const double d = static_cast<double>(eps.v[i]) - static_cast<double>(pred.v[i]);
    s += d * d;
  }
  const double loss = s / static_cast<double>(eps.v.size());
  require(std::isfinite(loss), ErrorCode::non_finite, "noise loss: non-finite value");
  return loss;
}

// Loss for an arbitrary predictor (x_t, cond, ts) -> eps_hat.
template <class S, class Predictor>
double noise_pred_loss_with(Predictor&& predict, const NoiseBatch<S>& b) {
  return noise_residual_loss(b.eps, predict(b.xt, b.cond, std::span<const int>(b.ts)));
}

// Loss and gradient (accumulated into grad) for the network.
template <class S>
double noise_pred_loss(const Denoiser& net, std::span<const S> params, const NoiseBatch<S>& b, std::span<S> grad) {
  thread_local DenoiserCache<S> cache;
  auto pred = net.forward<S>(params, b.xt, b.cond, b.ts, &cache);
  const double loss = noise_residual_loss(b.eps, pred);
  nn::Tensor<S> dout(pred.c, pred.n, pred.h, pred.w);
  const double scale = 2.0 / static_cast<double>(pred.v.size());
  for (std::size_t i = 0; i < pred.v.size(); ++i) dout.v[i] = static_cast<S>(scale * (pred.v[i] - b.eps.v[i]));
  net.backward<S>(params, cache, dout, grad);
  require(nn::all_finite<S>(grad), ErrorCode::non_finite, "noise loss: non-finite gradient");
  return loss;
}

// ---------------------------------------------------------------------------
// Sampling

// Strided timestep sequence, descending from T; always ends at the first
// scheduled step.
inline std::vector<int> sampling_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, ErrorCode::invalid_argument, "sampler: steps must be in [1, T]");
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i) {
    const int t = static_cast<int>(std::llround(static_cast<double>(i) * T / steps));
    if (ts.empty() || ts.back() != t) ts.push_back(std::max(1, t));
  }
  return ts;
}

// Reverse diffusion over a strided schedule with x0 predictions clipped to
// the target range. eta = 1 is ancestral sampling (the DDPM posterior), eta = 0 the
// deterministic DDIM update. Each item draws its noise from its own seed, so
// results do not depend on how items are batched.
template <class S>
std::vector<ImageTensor> sample_albedos(const Denoiser& net, std::span<const S> params,
                                        std::span<const ImageTensor* const> conds, std::span<const std::uint64_t> seeds,
                                        const NoiseSchedule& sched, int steps, double eta = 1.0) {
  require(conds.size() == seeds.size(), ErrorCode::shape_mismatch, "sampler: one seed per condition");
  require(eta >= 0.0 && eta <= 1.0, ErrorCode::invalid_argument, "sampler: eta must be in [0, 1]");
  if (conds.empty()) return {};
  const auto ts = sampling_timesteps(sched.T, steps);
  const auto cond = to_model_space<S>(conds);
  const int n = cond.n;
  const std::size_t plane = cond.plane();
  std::vector<Rng> rngs;
  rngs.reserve(seeds.size());
  for (auto s : seeds) rngs.emplace_back(s);

  nn::Tensor<S> x(3, n, cond.h, cond.w);
  std::vector<S> tmp(3 * plane);
  auto draw = [&](nn::Tensor<S>& dst) {
    for (int ni = 0; ni < n; ++ni) {
      fill_normal<S>(tmp, rngs[static_cast<std::size_t>(ni)]);
      for (int ci = 0; ci < 3; ++ci) std::copy_n(tmp.data() + ci * plane, plane, dst.data(ci, ni));
    }
  };
  draw(x);
  nn::Tensor<S> z(3, n, cond.h, cond.w);
  nn::Tensor<S> x0_hat(3, n, cond.h, cond.w);
  const double bound = target_bound(net.arch().residual);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const double ab_t = sched.ab(t), ab_prev = sched.ab(t_prev);
    const double beta = 1.0 - ab_t / ab_prev;
    const double sigma = eta * std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    std::vector<int> tv(static_cast<std::size_t>(n), t);
    const auto eps = net.forward<S>(params, x, cond, tv);
    const bool noisy = t_prev > 0 && sigma > 0.0;
    if (noisy) draw(z);
    for (std::size_t i = 0; i < x.v.size(); ++i) {
      const double xi = x.v[i];
      const double x0 = std::clamp((xi - std::sqrt(1.0 - ab_t) * eps.v[i]) / std::sqrt(ab_t), -bound, bound);
      const double e = (xi - std::sqrt(ab_t) * x0) / std::sqrt(1.0 - ab_t);
      x0_hat.v[i] = static_cast<S>(x0);
      double next = std::sqrt(ab_prev) * x0 + dir * e;
      if (noisy) next += sigma * z.v[i];
      x.v[i] = static_cast<S>(next);
    }
  }
  std::vector<ImageTensor> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int ni = 0; ni < n; ++ni) out.push_back(decode_target(net.arch().residual, x0_hat, cond, ni));
  return out;
}

template <class S>
ImageTensor sample_albedo(const Denoiser& net, std::span<const S> params, const ImageTensor& cond,
                          const NoiseSchedule& sched, std::uint64_t seed, int steps, double eta = 1.0) {
  const ImageTensor* c[] = {&cond};
  const std::uint64_t s[] = {seed};
  return sample_albedos<S>(net, params, c, s, sched, steps, eta).front();
}

// ---------------------------------------------------------------------------
// Checkpoints

struct ModelCheckpoint {
  DenoiserArch arch;
  NoiseSchedule schedule = linear_schedule();
  std::vector<float> params;
  std::string provenance = "base";  // base | iteration_<i> | dpo
  std::string parent_hash;          // hash of the checkpoint this one was trained from

  nlohmann::json arch_json() const { return {{"denoiser", arch.to_json()}, {"schedule", schedule.to_json()}}; }
  std::string hash() const { return params_hash(arch_json(), params); }
  Denoiser net() const { return Denoiser(arch, schedule.alpha_bar); }

  nlohmann::json to_json() const {
    return {{"format", kCheckpointFormat},
            {"kind", "denoiser"},
            {"arch", arch.to_json()},
            {"schedule", schedule.to_json()},
            {"provenance", provenance},
            {"parent_hash", parent_hash},
            {"param_count", params.size()},
            {"params", encode_params(params)},
            {"hash", hash()}};
  }

  static ModelCheckpoint from_json(const nlohmann::json& j) {
    require(j.value("format", "") == kCheckpointFormat && j.value("kind", "") == "denoiser", ErrorCode::io,
            "not a denoiser checkpoint");
    ModelCheckpoint c;
    c.arch = DenoiserArch::from_json(j.at("arch"));
    c.schedule = schedule_from_json(j.at("schedule"));
    c.provenance = j.at("provenance").get<std::string>();
    c.parent_hash = j.value("parent_hash", "");
    const Denoiser net(c.arch);
    const auto count = j.at("param_count").get<std::size_t>();
    require(count == net.param_count(), ErrorCode::io, "denoiser checkpoint: parameter count does not match arch");
    c.params = decode_params(j.at("params").get<std::string>(), count);
    require(c.hash() == j.at("hash").get<std::string>(), ErrorCode::io, "denoiser checkpoint: hash mismatch");
    return c;
  }

  void save(const std::string& path) const { write_json_file(path, to_json(), -1); }
  static ModelCheckpoint load(const std::string& path) { return from_json(read_json_file(path)); }
};

inline ModelCheckpoint init_model_checkpoint(const DenoiserArch& arch, const NoiseSchedule& sched, std::uint64_t seed) {
  ModelCheckpoint c;
  c.arch = arch;
  c.schedule = sched;
  c.params = Denoiser(arch).init<float>(seed);
  c.provenance = "init";
  return c;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct TrainExample {
  std::string id;
  const ImageTensor* albedo = nullptr;
  const ImageTensor* condition = nullptr;
};

struct DiffusionTrainConfig {
  int steps = 400;
  int batch = 16;
  double lr = 1e-3;
  double clip_norm = 1.0;
};

struct FinetuneResult {
  ModelCheckpoint checkpoint;
  std::vector<double> losses;
  // Ids of the examples in every training batch, in order.
  std::vector<std::vector<std::string>> batch_ids;
  std::string base_hash;
};

// Starts from `base` (never mutated), batches drawn uniformly with replacement.
inline FinetuneResult finetune(const ModelCheckpoint& base, std::span<const TrainExample> data,
                               const DiffusionTrainConfig& cfg, std::uint64_t seed, const std::string& provenance) {
  require(!data.empty(), ErrorCode::precondition, "finetune: empty training set");
  require(cfg.steps >= 0 && cfg.batch >= 1, ErrorCode::config, "finetune: steps >= 0 and batch >= 1 required");
  const Denoiser net = base.net();
  FinetuneResult r;
  r.base_hash = base.hash();
  r.checkpoint = base;
  r.checkpoint.provenance = provenance;
  r.checkpoint.parent_hash = r.base_hash;
  auto& p = r.checkpoint.params;
  nn::Adam adam(p.size(), {.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  Rng rng = make_rng(seed, "diffusion-finetune");
  std::vector<float> grad(p.size());
  std::vector<const ImageTensor*> albedos(static_cast<std::size_t>(cfg.batch)), conds(albedos.size());
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < albedos.size(); ++i) {
      const auto& ex = data[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(data.size()) - 1))];
      albedos[i] = ex.albedo;
      conds[i] = ex.condition;
      ids.push_back(ex.id);
    }
    auto b = draw_noise_batch<float>(albedos, conds, base.schedule, rng, base.arch.residual);
    std::fill(grad.begin(), grad.end(), 0.0f);
    r.losses.push_back(noise_pred_loss<float>(net, p, b, grad));
    adam.step<float>(p, grad);
    r.batch_ids.push_back(std::move(ids));
  }
  return r;
}

}  // namespace albedo
