#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "json.hpp"

#include "albedo/checkpoint.hpp"
#include "albedo/classifier.hpp"
#include "albedo/diffusion.hpp"
#include "albedo/dpo.hpp"
#include "albedo/error.hpp"
#include "albedo/hash.hpp"
#include "albedo/types.hpp"

namespace albedo {

struct DataConfig {
  int synthetic_count = 200;
  int pool_count = 192;
  int eval_count = 64;
  int manual_positives = 40;
  int manual_negatives = 40;
  double oracle_mse_threshold = 0.02;
};

struct DiffusionConfig {
  int timesteps = 200;
  double beta_start = 5e-4;
  double beta_end = 0.05;
  int channels = 16;
  int temb_dim = 32;
  int sample_steps = 50;
  double sample_eta = 1.0;
  bool residual = true;  // diffuse albedo - rgb instead of albedo
  bool skip = true;      // skip-connected eps output
};

struct RunConfig {
  std::uint64_t seed = 0;
  int num_iterations = 2;
  int image_size = 32;
  PnThresholds thresholds;
  DataConfig data;
  DiffusionConfig diffusion;
  DiffusionTrainConfig base_training{.steps = 2000, .batch = 16, .lr = 2e-3, .clip_norm = 1.0};
  DiffusionTrainConfig model_finetune{.steps = 800, .batch = 16, .lr = 1e-3, .clip_norm = 1.0};
  ClassifierArch classifier;
  ClassifierTrainConfig classifier_initial{.steps = 600, .batch = 32, .lr = 4e-3, .clip_norm = 1.0, .augment = true};
  ClassifierTrainConfig classifier_finetune{.steps = 400, .batch = 32, .lr = 3e-3, .clip_norm = 1.0, .augment = true};
  DpoConfig dpo;

  NoiseSchedule schedule() const {
    return linear_schedule(diffusion.timesteps, diffusion.beta_start, diffusion.beta_end);
  }
  DenoiserArch denoiser_arch() const { return {diffusion.channels, diffusion.temb_dim, diffusion.residual, diffusion.skip}; }

  void validate() const {
    auto bad = [](const std::string& why) { fail(ErrorCode::config, why); };
    const auto& t = thresholds;
    if (!(0.0 <= t.tau_neg && t.tau_neg < t.tau_rectify && t.tau_rectify < t.tau_pos && t.tau_pos <= 1.0))
      bad("thresholds must satisfy 0 <= tau_neg < tau_rectify < tau_pos <= 1");
    if (num_iterations < 1) bad("num_iterations must be >= 1");
    if (image_size < 4 || image_size % 4 != 0) bad("image_size must be a positive multiple of 4");
    if (data.synthetic_count < 1 || data.pool_count < 1 || data.eval_count < 1) bad("dataset counts must be >= 1");
    if (data.manual_positives < 1 || data.manual_negatives < 1) bad("manual label budget must be >= 1 per class");
    if (!(data.oracle_mse_threshold > 0.0)) bad("oracle_mse_threshold must be > 0");
    if (diffusion.timesteps < 1) bad("diffusion.timesteps must be >= 1");
    if (diffusion.sample_steps < 1 || diffusion.sample_steps > diffusion.timesteps)
      bad("diffusion.sample_steps must be in [1, timesteps]");
    if (diffusion.sample_eta < 0.0 || diffusion.sample_eta > 1.0) bad("diffusion.sample_eta must be in [0, 1]");
    for (const auto* c : {&base_training, &model_finetune})
      if (c->steps < 0 || c->batch < 1 || !(c->lr > 0.0)) bad("diffusion training: steps >= 0, batch >= 1, lr > 0");
    for (const auto* c : {&classifier_initial, &classifier_finetune})
      if (c->steps < 0 || c->batch < 2 || !(c->lr > 0.0)) bad("classifier training: steps >= 0, batch >= 2, lr > 0");
    if (dpo.steps < 0 || dpo.batch < 1 || !(dpo.lr > 0.0) || !(dpo.beta > 0.0))
      bad("dpo: steps >= 0, batch >= 1, lr > 0, beta > 0");
    (void)schedule();
    (void)Denoiser(denoiser_arch());
    (void)Classifier(classifier);
  }
};

namespace detail {

inline nlohmann::json train_json(const DiffusionTrainConfig& c) {
  return {{"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"clip_norm", c.clip_norm}};
}
inline nlohmann::json train_json(const ClassifierTrainConfig& c) {
  return {{"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"clip_norm", c.clip_norm}, {"augment", c.augment}};
}

// Reads `key` from object `j` into `out` if present, checking the JSON type.
template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  bool ok;
  if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
  else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer();
  else ok = v.is_number();
  if (!ok) fail(ErrorCode::config, "config: " + where + "." + key + " has the wrong type");
  out = v.get<T>();
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::config, "config: " + where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.contains(it.key())) fail(ErrorCode::config, "config: unknown key " + where + "." + it.key());
  }
}

inline void read_train(const nlohmann::json& j, DiffusionTrainConfig& c, const std::string& where) {
  check_keys(j, {"steps", "batch", "lr", "clip_norm"}, where);
  read_field(j, "steps", c.steps, where);
  read_field(j, "batch", c.batch, where);
  read_field(j, "lr", c.lr, where);
  read_field(j, "clip_norm", c.clip_norm, where);
}

inline void read_train(const nlohmann::json& j, ClassifierTrainConfig& c, const std::string& where) {
  check_keys(j, {"steps", "batch", "lr", "clip_norm", "augment"}, where);
  read_field(j, "steps", c.steps, where);
  read_field(j, "batch", c.batch, where);
  read_field(j, "lr", c.lr, where);
  read_field(j, "clip_norm", c.clip_norm, where);
  read_field(j, "augment", c.augment, where);
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"num_iterations", c.num_iterations},
          {"image_size", c.image_size},
          {"thresholds",
           {{"tau_pos", c.thresholds.tau_pos}, {"tau_neg", c.thresholds.tau_neg}, {"tau_rectify", c.thresholds.tau_rectify}}},
          {"data",
           {{"synthetic_count", c.data.synthetic_count},
            {"pool_count", c.data.pool_count},
            {"eval_count", c.data.eval_count},
            {"manual_positives", c.data.manual_positives},
            {"manual_negatives", c.data.manual_negatives},
            {"oracle_mse_threshold", c.data.oracle_mse_threshold}}},
          {"diffusion",
           {{"timesteps", c.diffusion.timesteps},
            {"beta_start", c.diffusion.beta_start},
            {"beta_end", c.diffusion.beta_end},
            {"channels", c.diffusion.channels},
            {"temb_dim", c.diffusion.temb_dim},
            {"sample_steps", c.diffusion.sample_steps},
            {"sample_eta", c.diffusion.sample_eta},
            {"residual", c.diffusion.residual},
            {"skip", c.diffusion.skip}}},
          {"base_training", detail::train_json(c.base_training)},
          {"model_finetune", detail::train_json(c.model_finetune)},
          {"classifier", {{"c1", c.classifier.c1}, {"c2", c.classifier.c2}, {"c3", c.classifier.c3}}},
          {"classifier_initial", detail::train_json(c.classifier_initial)},
          {"classifier_finetune", detail::train_json(c.classifier_finetune)},
          {"dpo",
           {{"steps", c.dpo.steps},
            {"batch", c.dpo.batch},
            {"lr", c.dpo.lr},
            {"beta", c.dpo.beta},
            {"omega", c.dpo.omega},
            {"clip_norm", c.dpo.clip_norm}}}};
}

// Unknown keys and mistyped values are rejected; absent keys keep defaults.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  RunConfig c;
  detail::check_keys(j,
                     {"seed", "num_iterations", "image_size", "thresholds", "data", "diffusion", "base_training",
                      "model_finetune", "classifier", "classifier_initial", "classifier_finetune", "dpo"},
                     "config");
  read_field(j, "seed", c.seed, "config");
  read_field(j, "num_iterations", c.num_iterations, "config");
  read_field(j, "image_size", c.image_size, "config");
  if (j.contains("thresholds")) {
    const auto& t = j["thresholds"];
    detail::check_keys(t, {"tau_pos", "tau_neg", "tau_rectify"}, "thresholds");
    read_field(t, "tau_pos", c.thresholds.tau_pos, "thresholds");
    read_field(t, "tau_neg", c.thresholds.tau_neg, "thresholds");
    read_field(t, "tau_rectify", c.thresholds.tau_rectify, "thresholds");
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d,
                       {"synthetic_count", "pool_count", "eval_count", "manual_positives", "manual_negatives",
                        "oracle_mse_threshold"},
                       "data");
    read_field(d, "synthetic_count", c.data.synthetic_count, "data");
    read_field(d, "pool_count", c.data.pool_count, "data");
    read_field(d, "eval_count", c.data.eval_count, "data");
    read_field(d, "manual_positives", c.data.manual_positives, "data");
    read_field(d, "manual_negatives", c.data.manual_negatives, "data");
    read_field(d, "oracle_mse_threshold", c.data.oracle_mse_threshold, "data");
  }
  if (j.contains("diffusion")) {
    const auto& d = j["diffusion"];
    detail::check_keys(d, {"timesteps", "beta_start", "beta_end", "channels", "temb_dim", "sample_steps", "sample_eta", "residual",
                           "skip"},
                       "diffusion");
    read_field(d, "timesteps", c.diffusion.timesteps, "diffusion");
    read_field(d, "beta_start", c.diffusion.beta_start, "diffusion");
    read_field(d, "beta_end", c.diffusion.beta_end, "diffusion");
    read_field(d, "channels", c.diffusion.channels, "diffusion");
    read_field(d, "temb_dim", c.diffusion.temb_dim, "diffusion");
    read_field(d, "sample_steps", c.diffusion.sample_steps, "diffusion");
    read_field(d, "sample_eta", c.diffusion.sample_eta, "diffusion");
    read_field(d, "residual", c.diffusion.residual, "diffusion");
    read_field(d, "skip", c.diffusion.skip, "diffusion");
  }
  if (j.contains("base_training")) detail::read_train(j["base_training"], c.base_training, "base_training");
  if (j.contains("model_finetune")) detail::read_train(j["model_finetune"], c.model_finetune, "model_finetune");
  if (j.contains("classifier")) {
    const auto& a = j["classifier"];
    detail::check_keys(a, {"c1", "c2", "c3"}, "classifier");
    read_field(a, "c1", c.classifier.c1, "classifier");
    read_field(a, "c2", c.classifier.c2, "classifier");
    read_field(a, "c3", c.classifier.c3, "classifier");
  }
  if (j.contains("classifier_initial"))
    detail::read_train(j["classifier_initial"], c.classifier_initial, "classifier_initial");
  if (j.contains("classifier_finetune"))
    detail::read_train(j["classifier_finetune"], c.classifier_finetune, "classifier_finetune");
  if (j.contains("dpo")) {
    const auto& d = j["dpo"];
    detail::check_keys(d, {"steps", "batch", "lr", "beta", "omega", "clip_norm"}, "dpo");
    read_field(d, "steps", c.dpo.steps, "dpo");
    read_field(d, "batch", c.dpo.batch, "dpo");
    read_field(d, "lr", c.dpo.lr, "dpo");
    read_field(d, "beta", c.dpo.beta, "dpo");
    read_field(d, "omega", c.dpo.omega, "dpo");
    read_field(d, "clip_norm", c.dpo.clip_norm, "dpo");
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

inline std::string config_hash(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

}  // namespace albedo
