#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/checkpoint.hpp"
#include "albedo/error.hpp"
#include "albedo/image.hpp"
#include "albedo/metrics.hpp"
#include "albedo/nn.hpp"
#include "albedo/rng.hpp"
#include "albedo/synthgen.hpp"
#include "albedo/types.hpp"

namespace albedo {

inline constexpr double kProbClamp = 1e-7;

// Mean binary cross-entropy over probabilities clamped to [eps, 1 - eps].
inline double bce_from_probs(std::span<const double> probs, std::span<const int> labels, double eps = kProbClamp) {
  require(!probs.empty(), ErrorCode::invalid_argument, "ce_loss: empty batch");
  require(probs.size() == labels.size(), ErrorCode::shape_mismatch, "ce_loss: label count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, ErrorCode::invalid_argument, "ce_loss: labels must be 0 or 1");
    const double p = std::clamp(probs[i], eps, 1.0 - eps);
    s -= labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return s / static_cast<double>(probs.size());
}

struct ClassifierArch {
  int c1 = 16;
  int c2 = 32;
  int c3 = 32;

  nlohmann::json to_json() const { return {{"net", "cnn3"}, {"c1", c1}, {"c2", c2}, {"c3", c3}}; }
  static ClassifierArch from_json(const nlohmann::json& j) {
    require(j.value("net", "") == "cnn3", ErrorCode::io, "classifier: unknown architecture");
    return {j.at("c1").get<int>(), j.at("c2").get<int>(), j.at("c3").get<int>()};
  }
  bool operator==(const ClassifierArch&) const = default;
};

template <class S>
struct ClassifierCache {
  int n = 0;
  std::vector<S> cols1, cols2, cols3, pre1, pre2, pre3, pooled;
  int h3 = 0, w3 = 0;
};

// Each image is rescaled to mean intensity 0.5 and centred before the first
// layer, so brightness alone cannot separate the classes.
template <class S>
nn::Tensor<S> normalize_for_classifier(std::span<const ImageTensor* const> images) {
  auto t = nn::pack_images<S>(images);
  for (int ni = 0; ni < t.n; ++ni) {
    const double scale = 0.5 / std::max(images[static_cast<std::size_t>(ni)]->mean(), 1e-3);
    for (int ci = 0; ci < 3; ++ci) {
      S* d = t.data(ci, ni);
      for (std::size_t k = 0; k < t.plane(); ++k) d[k] = static_cast<S>(static_cast<double>(d[k]) * scale - 0.5);
    }
  }
  return t;
}

class Classifier {
 public:
  explicit Classifier(ClassifierArch arch = {}) : arch_(arch) {
    require(arch.c1 >= 1 && arch.c2 >= 1 && arch.c3 >= 1, ErrorCode::config, "classifier: channel counts must be >= 1");
    nn::ParamLayout l;
    conv1_ = nn::Conv3x3(3, arch.c1, l);
    conv2_ = nn::Conv3x3(arch.c1, arch.c2, l);
    conv3_ = nn::Conv3x3(arch.c2, arch.c3, l);
    head_ = nn::Dense(arch.c3, 1, l);
    count_ = l.total;
  }

  const ClassifierArch& arch() const { return arch_; }
  std::size_t param_count() const { return count_; }

  template <class S>
  std::vector<S> init(std::uint64_t seed) const {
    std::vector<S> p(count_, S(0));
    Rng rng = make_rng(seed, "classifier-init");
    std::span<S> ps(p);
    nn::init_conv(ps, conv1_, rng);
    nn::init_conv(ps, conv2_, rng);
    nn::init_conv(ps, conv3_, rng);
    nn::init_dense(ps, head_, rng);
    return p;
  }

  // Logits for a normalized (3, N, H, W) batch; H and W divisible by 4.
  template <class S>
  std::vector<S> logits(std::span<const S> p, const nn::Tensor<S>& x, ClassifierCache<S>* cache = nullptr) const {
    require(x.c == 3 && x.h % 4 == 0 && x.w % 4 == 0, ErrorCode::shape_mismatch,
            "classifier: input must be 3-channel with sides divisible by 4");
    thread_local ClassifierCache<S> local;
    auto& k = cache ? *cache : local;
    k.n = x.n;
    auto a1 = nn::conv_forward(conv1_, p, x, k.cols1);
    nn::silu_inplace(a1.v, k.pre1);
    auto a2 = nn::conv_forward(conv2_, p, nn::avgpool2(a1), k.cols2);
    nn::silu_inplace(a2.v, k.pre2);
    auto a3 = nn::conv_forward(conv3_, p, nn::avgpool2(a2), k.cols3);
    nn::silu_inplace(a3.v, k.pre3);
    k.h3 = a3.h;
    k.w3 = a3.w;
    k.pooled = nn::global_mean(a3);
    return nn::dense_forward<S>(head_, p, k.pooled, x.n);
  }

  template <class S>
  void backward(std::span<const S> p, const ClassifierCache<S>& k, std::span<const S> dlogits, std::span<S> grad) const {
    require(grad.size() == count_, ErrorCode::shape_mismatch, "classifier: gradient buffer size");
    std::vector<S> dpooled;
    nn::dense_backward<S>(head_, p, k.pooled, dlogits, k.n, grad, &dpooled);
    nn::Tensor<S> da3(arch_.c3, k.n, k.h3, k.w3);
    nn::global_mean_backward_add<S>(dpooled, da3);
    nn::silu_backward_inplace(da3.v, k.pre3);
    nn::Tensor<S> dp2, dp1;
    nn::conv_backward(conv3_, p, k.cols3, da3, grad, &dp2);
    auto da2 = nn::avgpool2_backward(dp2);
    nn::silu_backward_inplace(da2.v, k.pre2);
    nn::conv_backward(conv2_, p, k.cols2, da2, grad, &dp1);
    auto da1 = nn::avgpool2_backward(dp1);
    nn::silu_backward_inplace(da1.v, k.pre1);
    nn::conv_backward<S>(conv1_, p, k.cols1, da1, grad, nullptr);
  }

 private:
  ClassifierArch arch_;
  nn::Conv3x3 conv1_, conv2_, conv3_;
  nn::Dense head_;
  std::size_t count_ = 0;
};

// Clamped BCE of the network on a batch; gradient accumulated into grad.
template <class S>
double ce_loss(const Classifier& net, std::span<const S> params, std::span<const ImageTensor* const> images,
               std::span<const int> labels, std::span<S> grad) {
  require(!images.empty(), ErrorCode::invalid_argument, "ce_loss: empty batch");
  require(images.size() == labels.size(), ErrorCode::shape_mismatch, "ce_loss: label count mismatch");
  thread_local ClassifierCache<S> cache;
  const auto x = normalize_for_classifier<S>(images);
  const auto z = net.logits<S>(params, x, &cache);
  std::vector<double> probs(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) probs[i] = nn::sigmoid(static_cast<double>(z[i]));
  const double loss = bce_from_probs(probs, labels);
  require(std::isfinite(loss), ErrorCode::non_finite, "ce_loss: non-finite loss");
  std::vector<S> dz(z.size());
  const double inv_n = 1.0 / static_cast<double>(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = probs[i];
    // The clamp has zero derivative outside [eps, 1 - eps].
    if (p <= kProbClamp || p >= 1.0 - kProbClamp) continue;
    const double dp = labels[i] == 1 ? -1.0 / p : 1.0 / (1.0 - p);
    dz[i] = static_cast<S>(inv_n * dp * p * (1.0 - p));
  }
  net.backward<S>(params, cache, dz, grad);
  require(nn::all_finite<S>(grad), ErrorCode::non_finite, "ce_loss: non-finite gradient");
  return loss;
}

template <class S>
std::vector<double> score_batch(const Classifier& net, std::span<const S> params, std::span<const ImageTensor* const> images) {
  if (images.empty()) return {};
  const auto z = net.logits<S>(params, normalize_for_classifier<S>(images));
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = nn::sigmoid(static_cast<double>(z[i]));
  return out;
}

// Scores in chunks to bound memory.
template <class S>
std::vector<double> score_all(const Classifier& net, std::span<const S> params, std::span<const ImageTensor* const> images,
                              std::size_t chunk = 64) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    const auto part = score_batch<S>(net, params, images.subspan(i, std::min(chunk, images.size() - i)));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <class S>
double score(const Classifier& net, std::span<const S> params, const ImageTensor& image) {
  const ImageTensor* one[] = {&image};
  return score_batch<S>(net, params, one).front();
}

// ---------------------------------------------------------------------------
// Checkpoints and training

struct ClassifierCheckpoint {
  ClassifierArch arch;
  std::vector<float> params;
  std::string provenance = "init";
  std::string parent_hash;

  std::string hash() const { return params_hash({{"classifier", arch.to_json()}}, params); }

  nlohmann::json to_json() const {
    return {{"format", kCheckpointFormat},
            {"kind", "classifier"},
            {"arch", arch.to_json()},
            {"provenance", provenance},
            {"parent_hash", parent_hash},
            {"param_count", params.size()},
            {"params", encode_params(params)},
            {"hash", hash()}};
  }

  static ClassifierCheckpoint from_json(const nlohmann::json& j) {
    require(j.value("format", "") == kCheckpointFormat && j.value("kind", "") == "classifier", ErrorCode::io,
            "not a classifier checkpoint");
    ClassifierCheckpoint c;
    c.arch = ClassifierArch::from_json(j.at("arch"));
    c.provenance = j.at("provenance").get<std::string>();
    c.parent_hash = j.value("parent_hash", "");
    const auto count = j.at("param_count").get<std::size_t>();
    require(count == Classifier(c.arch).param_count(), ErrorCode::io, "classifier checkpoint: parameter count mismatch");
    c.params = decode_params(j.at("params").get<std::string>(), count);
    require(c.hash() == j.at("hash").get<std::string>(), ErrorCode::io, "classifier checkpoint: hash mismatch");
    return c;
  }

  void save(const std::string& path) const { write_json_file(path, to_json(), -1); }
  static ClassifierCheckpoint load(const std::string& path) { return from_json(read_json_file(path)); }

  double score(const ImageTensor& image) const { return albedo::score<float>(Classifier(arch), params, image); }
  std::vector<double> scores(std::span<const ImageTensor* const> images) const {
    return score_all<float>(Classifier(arch), params, images);
  }
};

struct ClassifierTrainConfig {
  int steps = 600;
  int batch = 32;  // half positives, half negatives
  double lr = 2e-3;
  double clip_norm = 1.0;
  bool augment = true;
};

struct LabeledImage {
  const ImageTensor* image = nullptr;
  int label = 0;
};

// Balanced-batch training from `start` (never mutated). Both classes get the
// illuminance augmentation when enabled.
inline ClassifierCheckpoint train_classifier(const ClassifierCheckpoint& start, std::span<const ImageTensor* const> positives,
                                             std::span<const ImageTensor* const> negatives,
                                             const ClassifierTrainConfig& cfg, std::uint64_t seed,
                                             const std::string& provenance, std::vector<double>* losses = nullptr) {
  require(!positives.empty() && !negatives.empty(), ErrorCode::precondition,
          "classifier training needs both positive and negative examples");
  require(cfg.steps >= 0 && cfg.batch >= 2, ErrorCode::config, "classifier: steps >= 0 and batch >= 2 required");
  ClassifierCheckpoint out = start;
  out.provenance = provenance;
  out.parent_hash = start.hash();
  const Classifier net(start.arch);
  nn::Adam adam(out.params.size(), {.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  Rng rng = make_rng(seed, "classifier-train");
  std::vector<float> grad(out.params.size());
  std::vector<ImageTensor> batch(static_cast<std::size_t>(cfg.batch));
  std::vector<const ImageTensor*> ptrs(batch.size());
  std::vector<int> labels(batch.size());
  for (int step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const bool pos = i % 2 == 0;
      const auto& pool = pos ? positives : negatives;
      const auto* img = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      batch[i] = cfg.augment ? illuminance_augment(*img, rng) : *img;
      ptrs[i] = &batch[i];
      labels[i] = pos ? 1 : 0;
    }
    std::fill(grad.begin(), grad.end(), 0.0f);
    const double loss = ce_loss<float>(net, out.params, ptrs, labels, grad);
    if (losses) losses->push_back(loss);
    adam.step<float>(out.params, grad);
  }
  return out;
}

inline ClassifierCheckpoint init_classifier(const ClassifierArch& arch, std::uint64_t seed) {
  ClassifierCheckpoint c;
  c.arch = arch;
  c.params = Classifier(arch).init<float>(seed);
  return c;
}

// Initial classifier: albedo (positive) vs diffuse rgb (negative) on the
// synthetic domain. steps = 0 returns the untrained initialization.
inline ClassifierCheckpoint train_initial(std::span<const ScenePair> synthetic, const ClassifierArch& arch,
                                          const ClassifierTrainConfig& cfg, std::uint64_t seed) {
  std::vector<const ImageTensor*> pos, neg;
  for (const auto& s : synthetic) {
    require(s.domain == DomainTag::synthetic, ErrorCode::precondition, "train_initial: synthetic samples only");
    pos.push_back(&s.albedo);
    neg.push_back(&s.rgb);
  }
  return train_classifier(init_classifier(arch, derive_seed(seed, "classifier-init")), pos, neg, cfg, seed, "classifier_0");
}

// Fine-tunes from the previous classifier on the P&N sets.
inline ClassifierCheckpoint finetune_classifier(const ClassifierCheckpoint& prev, const PNSets& sets,
                                                const ClassifierTrainConfig& cfg, std::uint64_t seed) {
  require(!sets.positives.empty() && !sets.negatives.empty(), ErrorCode::precondition,
          "finetune_classifier: positive and negative sets must be nonempty");
  std::vector<const ImageTensor*> pos, neg;
  for (const auto& p : sets.positives) pos.push_back(&p.albedo);
  for (const auto& n : sets.negatives) neg.push_back(&n.albedo);
  return train_classifier(prev, pos, neg, cfg, seed, "classifier_" + std::to_string(sets.iteration + 1));
}

// Accuracy of the checkpoint on labeled images (threshold 0.5).
inline double classifier_accuracy(const ClassifierCheckpoint& c, std::span<const ImageTensor* const> images,
                                  std::span<const Label> reference) {
  const auto pred = metrics::labels_from_scores(c.scores(images));
  return metrics::accuracy(pred, reference);
}

}  // namespace albedo
