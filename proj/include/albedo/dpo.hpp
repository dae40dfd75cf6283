#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/diffusion.hpp"
#include "albedo/error.hpp"
#include "albedo/rng.hpp"
#include "albedo/types.hpp"

namespace albedo {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// -log sigmoid(-scale * delta) with
// delta = (err_w_theta - err_w_ref) - (err_l_theta - err_l_ref).
inline double dpo_objective(double err_w_theta, double err_w_ref, double err_l_theta, double err_l_ref, double scale) {
  const double delta = (err_w_theta - err_w_ref) - (err_l_theta - err_l_ref);
  const double loss = softplus(scale * delta);
  require(std::isfinite(loss), ErrorCode::non_finite, "dpo: non-finite loss");
  return loss;
}

struct DpoConfig {
  int steps = 300;
  int batch = 8;  // pairs per step
  double lr = 5e-7;
  double beta = 0.5;
  double omega = 1.0;  // constant weighting
  double clip_norm = 1.0;
};

template <class S>
struct DpoBatch {
  nn::Tensor<S> xt;    // (3, 2B, H, W): win samples first, then lose
  nn::Tensor<S> cond;  // condition duplicated for both halves
  nn::Tensor<S> eps;
  std::vector<int> ts;
  int pairs = 0;
};

// Noised win/lose batch; each pair shares t and eps across its two members.
template <class S>
DpoBatch<S> make_dpo_batch(std::span<const PreferencePair* const> pairs, const NoiseSchedule& sched, Rng& rng,
                           bool residual = false) {
  require(!pairs.empty(), ErrorCode::invalid_argument, "dpo: empty batch");
  std::vector<const ImageTensor*> x0s, conds;
  for (const auto* p : pairs) {
    require_same_shape(p->win, p->lose, "dpo pair");
    require_same_shape(p->win, p->condition, "dpo pair");
    x0s.push_back(&p->win);
    conds.push_back(&p->condition);
  }
  for (const auto* p : pairs) {
    x0s.push_back(&p->lose);
    conds.push_back(&p->condition);
  }
  DpoBatch<S> b;
  b.pairs = static_cast<int>(pairs.size());
  b.cond = to_model_space<S>(conds);
  const auto x0 = encode_target<S>(residual, x0s, b.cond);
  b.ts.resize(x0s.size());
  b.eps = nn::Tensor<S>(3, x0.n, x0.h, x0.w);
  std::vector<S> tmp(3 * x0.plane());
  for (int i = 0; i < b.pairs; ++i) {
    const int t = uniform_int(rng, 1, sched.T);
    b.ts[static_cast<std::size_t>(i)] = t;
    b.ts[static_cast<std::size_t>(i + b.pairs)] = t;
    fill_normal<S>(tmp, rng);
    for (int ci = 0; ci < 3; ++ci) {
      std::copy_n(tmp.data() + ci * x0.plane(), x0.plane(), b.eps.data(ci, i));
      std::copy_n(tmp.data() + ci * x0.plane(), x0.plane(), b.eps.data(ci, i + b.pairs));
    }
  }
  b.xt = nn::Tensor<S>(3, x0.n, x0.h, x0.w);
  for (int ci = 0; ci < 3; ++ci)
    for (int ni = 0; ni < x0.n; ++ni)
      forward_noise_ab<S>(std::span<const S>(x0.data(ci, ni), x0.plane()), sched.ab(b.ts[static_cast<std::size_t>(ni)]),
                          std::span<const S>(b.eps.data(ci, ni), x0.plane()), std::span<S>(b.xt.data(ci, ni), x0.plane()));
  return b;
}

// Per-sample mean squared error between eps and a prediction.
template <class S>
std::vector<double> per_sample_error(const nn::Tensor<S>& eps, const nn::Tensor<S>& pred) {
  std::vector<double> err(static_cast<std::size_t>(eps.n), 0.0);
  for (int ci = 0; ci < eps.c; ++ci)
    for (int ni = 0; ni < eps.n; ++ni) {
      const S* e = eps.data(ci, ni);
      const S* p = pred.data(ci, ni);
      double s = 0.0;
      for (std::size_t k = 0; k < eps.plane(); ++k) {
        const double d = static_cast<double>(e[k]) - static_cast<double>(p[k]);
        s += d * d;
      }
      err[static_cast<std::size_t>(ni)] += s;
    }
  const double denom = static_cast<double>(eps.c) * static_cast<double>(eps.plane());
  for (auto& v : err) v /= denom;
  return err;
}

// Mean DPO loss over the batch's pairs for a policy and a frozen reference.
// The scale inside the sigmoid is beta * T * omega. Gradient (w.r.t. the
// policy only) is accumulated into grad when it is nonempty.
template <class S>
double dpo_loss(const Denoiser& net, std::span<const S> theta, std::span<const S> ref, const DpoBatch<S>& b,
                const NoiseSchedule& sched, double beta, double omega, std::span<S> grad) {
  const double scale = beta * sched.T * omega;
  thread_local DenoiserCache<S> cache;
  const auto pred = net.forward<S>(theta, b.xt, b.cond, b.ts, grad.empty() ? nullptr : &cache);
  const auto pred_ref = net.forward<S>(ref, b.xt, b.cond, b.ts);
  const auto e_theta = per_sample_error(b.eps, pred);
  const auto e_ref = per_sample_error(b.eps, pred_ref);
  const int P = b.pairs;
  double total = 0.0;
  std::vector<double> dscale(static_cast<std::size_t>(2 * P), 0.0);  // d loss / d e_theta per sample
  for (int i = 0; i < P; ++i) {
    const auto w = static_cast<std::size_t>(i), l = static_cast<std::size_t>(i + P);
    total += dpo_objective(e_theta[w], e_ref[w], e_theta[l], e_ref[l], scale);
    const double delta = (e_theta[w] - e_ref[w]) - (e_theta[l] - e_ref[l]);
    const double g = scale * nn::sigmoid(scale * delta) / P;
    dscale[w] = g;
    dscale[l] = -g;
  }
  if (!grad.empty()) {
    nn::Tensor<S> dout(pred.c, pred.n, pred.h, pred.w);
    const double denom = static_cast<double>(pred.c) * static_cast<double>(pred.plane());
    for (int ci = 0; ci < pred.c; ++ci)
      for (int ni = 0; ni < pred.n; ++ni) {
        const double f = 2.0 * dscale[static_cast<std::size_t>(ni)] / denom;
        const S* p = pred.data(ci, ni);
        const S* e = b.eps.data(ci, ni);
        S* d = dout.data(ci, ni);
        for (std::size_t k = 0; k < pred.plane(); ++k) d[k] = static_cast<S>(f * (static_cast<double>(p[k]) - e[k]));
      }
    net.backward<S>(theta, cache, dout, grad);
    require(nn::all_finite<S>(grad), ErrorCode::non_finite, "dpo: non-finite gradient");
  }
  return total / P;
}

struct DpoResult {
  ModelCheckpoint checkpoint;
  std::vector<double> losses;
};

// Fine-tunes a copy of `last` with `last` as the frozen reference.
inline DpoResult dpo_finetune(const ModelCheckpoint& last, const std::vector<PreferencePair>& pairs, const DpoConfig& cfg,
                              std::uint64_t seed) {
  require(!pairs.empty(), ErrorCode::precondition, "dpo_finetune: empty pair set");
  require(cfg.steps >= 0 && cfg.batch >= 1, ErrorCode::config, "dpo_finetune: steps >= 0 and batch >= 1 required");
  const Denoiser net = last.net();
  DpoResult r;
  r.checkpoint = last;
  r.checkpoint.provenance = "dpo";
  r.checkpoint.parent_hash = last.hash();
  const std::span<const float> ref(last.params);
  auto& theta = r.checkpoint.params;
  nn::Adam adam(theta.size(), {.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  Rng rng = make_rng(seed, "dpo-finetune");
  std::vector<float> grad(theta.size());
  std::vector<const PreferencePair*> batch(static_cast<std::size_t>(cfg.batch));
  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& p : batch) p = &pairs[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pairs.size()) - 1))];
    const auto b = make_dpo_batch<float>(batch, last.schedule, rng, last.arch.residual);
    std::fill(grad.begin(), grad.end(), 0.0f);
    r.losses.push_back(dpo_loss<float>(net, theta, ref, b, last.schedule, cfg.beta, cfg.omega, grad));
    adam.step<float>(theta, grad);
  }
  return r;
}

// Swaps win/lose on exactly round(fraction * n) pairs chosen uniformly.
inline std::vector<PreferencePair> corrupt_pairs(std::vector<PreferencePair> pairs, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction <= 1.0, ErrorCode::invalid_argument, "corrupt_pairs: fraction outside [0,1]");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pairs.size())));
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "corrupt-pairs");
  // Partial Fisher-Yates, spelled out so the choice is stable across standard libraries.
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = 0; i < k; ++i) {
    auto& p = pairs[idx[i]];
    std::swap(p.win, p.lose);
    std::swap(p.win_score, p.lose_score);
    std::swap(p.win_source_iter, p.lose_source_iter);
    p.corrupted = true;
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Pair manifest (JSON lines)

inline std::string pair_id(const PreferencePair& p) {
  return p.condition_id + ":" + std::to_string(p.win_source_iter) + "-" + std::to_string(p.lose_source_iter);
}

inline nlohmann::json pair_record(const PreferencePair& p) {
  return {{"pair_id", pair_id(p)},         {"condition_id", p.condition_id}, {"win_iter", p.win_source_iter},
          {"lose_iter", p.lose_source_iter}, {"win_score", p.win_score},       {"lose_score", p.lose_score},
          {"corrupted", p.corrupted}};
}

inline void write_pair_manifest(const std::string& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write pair manifest " + path);
  for (const auto& p : pairs) out << pair_record(p).dump() << "\n";
  require(static_cast<bool>(out), ErrorCode::io, "failed writing pair manifest " + path);
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::not_found, "cannot open " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::io, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace albedo
