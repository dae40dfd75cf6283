#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/checkpoint.hpp"
#include "albedo/classifier.hpp"
#include "albedo/config.hpp"
#include "albedo/dataset.hpp"
#include "albedo/diffusion.hpp"
#include "albedo/dpo.hpp"
#include "albedo/error.hpp"
#include "albedo/label_store.hpp"
#include "albedo/metrics.hpp"
#include "albedo/png_io.hpp"
#include "albedo/pseudolabel.hpp"
#include "albedo/synthgen.hpp"
#include "albedo/types.hpp"

namespace albedo {

namespace fs = std::filesystem;

// Per-condition sampling seed. It depends on the run seed and the condition
// only, so every model sees the same noise for the same input.
inline std::uint64_t sample_seed(std::uint64_t run_seed, const std::string& condition_id) {
  return derive_seed(derive_seed(run_seed, "sample"), condition_id);
}

inline std::vector<ImageTensor> sample_scenes(const ModelCheckpoint& model, const std::vector<ScenePair>& scenes,
                                              std::uint64_t run_seed, int steps, double eta, std::size_t chunk = 32) {
  const Denoiser net = model.net();
  std::vector<ImageTensor> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); i += chunk) {
    std::vector<const ImageTensor*> conds;
    std::vector<std::uint64_t> seeds;
    for (std::size_t k = i; k < std::min(scenes.size(), i + chunk); ++k) {
      conds.push_back(&scenes[k].rgb);
      seeds.push_back(sample_seed(run_seed, scenes[k].id));
    }
    auto part = sample_albedos<float>(net, model.params, conds, seeds, model.schedule, steps, eta);
    for (auto& a : part) out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<const ImageTensor*> pointers(const std::vector<ImageTensor>& images) {
  std::vector<const ImageTensor*> out;
  for (const auto& i : images) out.push_back(&i);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation on a held-out pool with hidden truth

struct EvalReport {
  std::vector<ImageTensor> albedos;
  std::vector<double> mse;
  std::vector<Label> oracle_labels;
  std::vector<double> scores;  // empty without a classifier
  nlohmann::json json;
};

inline EvalReport evaluate_model(const ModelCheckpoint& model, const std::vector<ScenePair>& pool, const RunConfig& cfg,
                                 const ClassifierCheckpoint* classifier, const std::string& pool_name) {
  require(!pool.empty(), ErrorCode::precondition, "evaluate: empty pool");
  EvalReport r;
  r.albedos = sample_scenes(model, pool, cfg.seed, cfg.diffusion.sample_steps, cfg.diffusion.sample_eta);
  double mse_sum = 0.0, psnr_sum = 0.0, ssim_sum = 0.0;
  const bool with_ssim = cfg.image_size >= metrics::SsimOptions{}.window;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double m = metrics::mse(r.albedos[i], pool[i].albedo);
    r.mse.push_back(m);
    mse_sum += m;
    psnr_sum += metrics::psnr_from_mse(m);
    if (with_ssim) ssim_sum += metrics::ssim(r.albedos[i], pool[i].albedo);
    r.oracle_labels.push_back(oracle_annotate(r.albedos[i], pool[i].albedo, cfg.data.oracle_mse_threshold));
  }
  const double n = static_cast<double>(pool.size());
  r.json = {{"pool", pool_name},
            {"n", pool.size()},
            {"mse_mean", mse_sum / n},
            {"psnr_mean", psnr_sum / n},
            {"ssim_mean", with_ssim ? nlohmann::json(ssim_sum / n) : nlohmann::json(nullptr)},
            {"negative_ratio", metrics::negative_class_ratio(r.oracle_labels)},
            {"negative_ratio_judge", "oracle"},
            {"seed", cfg.seed},
            {"model_hash", model.hash()}};
  if (classifier) {
    r.scores = classifier->scores(pointers(r.albedos));
    double mean = 0.0;
    for (double s : r.scores) mean += s;
    r.json["classifier_hash"] = classifier->hash();
    r.json["classifier_score_mean"] = mean / n;
    r.json["classifier_negative_ratio"] = metrics::negative_class_ratio(metrics::labels_from_scores(r.scores));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Binary image arrays (exact doubles) for resumable state

inline void write_albedo_bin(const std::string& path, const std::vector<ImageTensor>& images) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path);
  const std::uint64_t header[3] = {images.size(), images.empty() ? 0u : static_cast<std::uint64_t>(images[0].height()),
                                   images.empty() ? 0u : static_cast<std::uint64_t>(images[0].width())};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  for (const auto& img : images) {
    require(img.height() == static_cast<int>(header[1]) && img.width() == static_cast<int>(header[2]), ErrorCode::shape_mismatch,
            "albedo array: mixed sizes");
    out.write(reinterpret_cast<const char*>(img.values().data()), static_cast<std::streamsize>(img.size() * sizeof(double)));
  }
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + path);
}

inline std::vector<ImageTensor> read_albedo_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::not_found, "cannot open " + path);
  std::uint64_t header[3] = {0, 0, 0};
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  require(static_cast<bool>(in), ErrorCode::io, "truncated albedo array " + path);
  std::vector<ImageTensor> out;
  for (std::uint64_t i = 0; i < header[0]; ++i) {
    ImageTensor img(static_cast<int>(header[1]), static_cast<int>(header[2]));
    in.read(reinterpret_cast<char*>(img.values().data()), static_cast<std::streamsize>(img.size() * sizeof(double)));
    require(static_cast<bool>(in), ErrorCode::io, "truncated albedo array " + path);
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// P&N set records

inline nlohmann::json labeled_record(const LabeledAlbedo& a) {
  return {{"sample_id", a.sample_id},
          {"condition_id", a.condition_id},
          {"label", to_string(a.label)},
          {"provenance", to_string(a.provenance)},
          {"score", a.score ? nlohmann::json(*a.score) : nlohmann::json(nullptr)},
          {"refreshed_score", a.refreshed_score ? nlohmann::json(*a.refreshed_score) : nlohmann::json(nullptr)},
          {"iteration", a.iteration}};
}

inline LabeledAlbedo labeled_from_record(const nlohmann::json& j) {
  LabeledAlbedo a;
  a.sample_id = j.at("sample_id").get<std::string>();
  a.condition_id = j.at("condition_id").get<std::string>();
  a.label = parse_label(j.at("label").get<std::string>());
  a.provenance = parse_provenance(j.at("provenance").get<std::string>());
  if (!j.at("score").is_null()) a.score = j["score"].get<double>();
  if (j.contains("refreshed_score") && !j["refreshed_score"].is_null()) a.refreshed_score = j["refreshed_score"].get<double>();
  a.iteration = j.at("iteration").get<int>();
  return a;
}

inline std::string pnsets_hash(const PNSets& s) {
  Sha256 h;
  h.update("iteration=" + std::to_string(s.iteration) + "\n");
  for (const auto* set : {&s.positives, &s.negatives})
    for (const auto& a : *set) {
      h.update(labeled_record(a).dump() + "\n");
      h.update_values(a.albedo.values());
    }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Loop state

struct LoopState {
  int iteration = 0;
  ClassifierCheckpoint classifier;  // C_i
  ModelCheckpoint model;            // M_i
  ModelCheckpoint base;             // M_0
  PNSets sets;                      // P&N Set_i
  std::vector<ImageTensor> pool_albedos;  // M_i outputs, pool order
};

struct LoopData {
  std::vector<ScenePair> synthetic;
  std::vector<ScenePair> pool;  // real-like; albedo used only by the oracle
  std::vector<ScenePair> eval;  // held-out real-like with hidden truth
};

// Generates the three datasets of a run, saves them under `dir` and reloads
// them, so a fresh run and a resumed run see the same quantized images.
inline LoopData prepare_data(const RunConfig& cfg, const fs::path& dir) {
  const auto s = cfg.image_size;
  save_dataset(generate_dataset(SceneDomain::synthetic, cfg.data.synthetic_count, s, derive_seed(cfg.seed, "data-synthetic")),
               dir / "synthetic", cfg.seed, "synthetic");
  save_dataset(generate_dataset(SceneDomain::real_like, cfg.data.pool_count, s, derive_seed(cfg.seed, "data-pool")),
               dir / "pool", cfg.seed, "real_like");
  save_dataset(generate_dataset(SceneDomain::real_like, cfg.data.eval_count, s, derive_seed(cfg.seed, "data-eval")),
               dir / "eval", cfg.seed, "real_like");
  return {load_dataset(dir / "synthetic"), load_dataset(dir / "pool"), load_dataset(dir / "eval")};
}

inline LoopData load_data(const fs::path& dir) {
  return {load_dataset(dir / "synthetic"), load_dataset(dir / "pool"), load_dataset(dir / "eval")};
}

// Picks a balanced initial label set by asking the oracle about the base
// model's pool outputs, visiting the pool in a seeded random order.
inline std::map<std::string, Label> oracle_initial_labels(const std::vector<ScenePair>& pool,
                                                          const std::vector<ImageTensor>& albedos, const RunConfig& cfg) {
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = make_rng(cfg.seed, "manual-pick");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
  std::map<std::string, Label> out;
  int pos = 0, neg = 0;
  for (auto i : order) {
    const Label l = oracle_annotate(albedos[i], pool[i].albedo, cfg.data.oracle_mse_threshold);
    if (l == Label::positive && pos < cfg.data.manual_positives) {
      out[pool[i].id] = l;
      ++pos;
    } else if (l == Label::negative && neg < cfg.data.manual_negatives) {
      out[pool[i].id] = l;
      ++neg;
    }
  }
  return out;
}

struct IterationRecord {
  nlohmann::json metrics;
  std::vector<nlohmann::json> pool_scores;
  std::vector<std::vector<std::string>> train_batches;
  nlohmann::json train_provenance;
};

class AdaptLoop {
 public:
  AdaptLoop(RunConfig cfg, fs::path run_dir) : cfg_(std::move(cfg)), dir_(std::move(run_dir)) { cfg_.validate(); }

  const RunConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  const LoopData& data() const { return data_; }
  fs::path iter_dir(int i) const { return dir_ / ("iter_" + std::to_string(i)); }

  // Builds C_0, M_0 and P&N Set_0 and persists iteration 0. `labels` maps
  // pool sample ids to positive/negative; when empty the oracle supplies them.
  LoopState initialize(std::map<std::string, Label> labels = {}, Provenance label_source = Provenance::oracle) {
    fs::create_directories(dir_);
    write_json_file((dir_ / "config.json").string(), to_json(cfg_));
    data_ = prepare_data(cfg_, dir_ / "data");
    require(!data_.pool.empty(), ErrorCode::precondition, "initialize: empty pool");

    LoopState st;
    st.classifier = train_initial(data_.synthetic, cfg_.classifier, cfg_.classifier_initial, derive_seed(cfg_.seed, "classifier-initial"));
    std::vector<TrainExample> syn;
    for (const auto& s : data_.synthetic) syn.push_back({s.id, &s.albedo, &s.rgb});
    const auto init = init_model_checkpoint(cfg_.denoiser_arch(), cfg_.schedule(), derive_seed(cfg_.seed, "model-init"));
    auto base = finetune(init, syn, cfg_.base_training, derive_seed(cfg_.seed, "model-base"), "base");
    st.base = base.checkpoint;
    st.model = st.base;
    st.pool_albedos = sample_pool(st.model);

    if (labels.empty()) labels = oracle_initial_labels(data_.pool, st.pool_albedos, cfg_);
    const auto scores = st.classifier.scores(pointers(st.pool_albedos));
    st.sets.iteration = 0;
    std::set<std::string> known;
    for (std::size_t i = 0; i < data_.pool.size(); ++i) {
      known.insert(data_.pool[i].id);
      auto it = labels.find(data_.pool[i].id);
      if (it == labels.end() || (it->second != Label::positive && it->second != Label::negative)) continue;
      LabeledAlbedo a{data_.pool[i].id, data_.pool[i].id, st.pool_albedos[i], scores[i], std::nullopt, it->second,
                      label_source, 0};
      (it->second == Label::positive ? st.sets.positives : st.sets.negatives).push_back(std::move(a));
    }
    for (const auto& [id, _] : labels)
      require(known.contains(id), ErrorCode::precondition, "initialize: label for unknown sample " + id);
    require(!st.sets.positives.empty() && !st.sets.negatives.empty(), ErrorCode::precondition,
            "initialize: initial labels need at least one positive and one negative");
    validate_pnsets(st.sets, cfg_.thresholds);

    // Fixed target-domain reference for classifier accuracy: base-model
    // outputs on the held-out pool, labeled by the oracle.
    eval_reference_ = sample_scenes(st.base, data_.eval, cfg_.seed, cfg_.diffusion.sample_steps, cfg_.diffusion.sample_eta);
    eval_labels_.clear();
    for (std::size_t i = 0; i < data_.eval.size(); ++i)
      eval_labels_.push_back(oracle_annotate(eval_reference_[i], data_.eval[i].albedo, cfg_.data.oracle_mse_threshold));
    write_albedo_bin((dir_ / "eval_reference.bin").string(), eval_reference_);
    nlohmann::json lj = nlohmann::json::array();
    for (auto l : eval_labels_) lj.push_back(to_string(l));
    write_json_file((dir_ / "eval_reference_labels.json").string(), lj);

    IterationRecord rec;
    for (std::size_t i = 0; i < data_.pool.size(); ++i)
      rec.pool_scores.push_back({{"condition_id", data_.pool[i].id}, {"score", scores[i]}});
    rec.metrics = iteration_metrics(st);
    ledger_.clear();
    persist(st, rec);
    return st;
  }

  // One pass of update classifier -> pseudo-label -> update model -> rectify.
  LoopState run_iteration(const LoopState& st) {
    const int i = st.iteration;
    LoopState next;
    next.iteration = i + 1;
    next.base = st.base;
    IterationRecord rec;

    // (1) C_{i+1} from C_i on Set_i.
    next.classifier = finetune_classifier(st.classifier, st.sets, cfg_.classifier_finetune,
                                          derive_seed(cfg_.seed, "classifier-finetune", static_cast<std::uint64_t>(i + 1)));

    // (2) Pseudo-label M_i's pool outputs with C_{i+1}.
    const auto label_scores = next.classifier.scores(pointers(st.pool_albedos));
    std::vector<LabeledAlbedo> scored;
    for (std::size_t k = 0; k < data_.pool.size(); ++k)
      scored.push_back({data_.pool[k].id, data_.pool[k].id, st.pool_albedos[k], label_scores[k], std::nullopt,
                        Label::unlabeled, Provenance::pseudo, i});
    auto part = partition(scored, cfg_.thresholds.tau_pos, cfg_.thresholds.tau_neg);
    require(!part.positives.empty(), ErrorCode::precondition,
            "iteration " + std::to_string(i + 1) + ": no pool albedo scored >= tau_pos; lower tau_pos or train longer");

    // (3) M_{i+1} from the base checkpoint on P_i only.
    std::map<std::string, const ScenePair*> by_id;
    for (const auto& s : data_.pool) by_id[s.id] = &s;
    std::vector<TrainExample> train;
    for (const auto& p : part.positives) train.push_back({p.sample_id, &p.albedo, &by_id.at(p.sample_id)->rgb});
    auto ft = finetune(st.base, train, cfg_.model_finetune, derive_seed(cfg_.seed, "model-finetune", static_cast<std::uint64_t>(i + 1)),
                       "iteration_" + std::to_string(i + 1));
    require(ft.base_hash == st.base.hash(), ErrorCode::invariant_violation, "model fine-tune did not start from the base");
    next.model = ft.checkpoint;
    rec.train_batches = ft.batch_ids;
    rec.train_provenance = train_provenance(ft, part);

    // (4) Re-infer with M_{i+1}, re-score with C_{i+1}, rectify.
    next.pool_albedos = sample_pool(next.model);
    const auto new_scores = next.classifier.scores(pointers(next.pool_albedos));
    std::map<std::string, ImageTensor> albedo_by_id;
    std::map<std::string, double> score_by_id;
    for (std::size_t k = 0; k < data_.pool.size(); ++k) {
      albedo_by_id[data_.pool[k].id] = next.pool_albedos[k];
      score_by_id[data_.pool[k].id] = new_scores[k];
    }
    next.sets = rectify_sets(part.positives, part.negatives, albedo_by_id, score_by_id, cfg_.thresholds.tau_rectify, i + 1);
    validate_pnsets(next.sets, cfg_.thresholds);

    std::set<std::string> pos_ids, neg_ids;
    for (const auto& p : part.positives) pos_ids.insert(p.sample_id);
    for (const auto& n : part.negatives) neg_ids.insert(n.sample_id);
    for (std::size_t k = 0; k < data_.pool.size(); ++k) {
      const auto& id = data_.pool[k].id;
      rec.pool_scores.push_back({{"condition_id", id},
                                 {"labeling_score", label_scores[k]},
                                 {"partition", pos_ids.contains(id) ? "positive" : neg_ids.contains(id) ? "negative" : "unassigned"},
                                 {"score", new_scores[k]}});
    }
    rec.metrics = iteration_metrics(next);
    rec.metrics["pseudo_positives"] = part.positives.size();
    rec.metrics["pseudo_negatives"] = part.negatives.size();
    persist(next, rec);
    return next;
  }

  LoopState run_loop(LoopState st, int n) {
    require(n >= 1, ErrorCode::invalid_argument, "run_loop: n must be >= 1");
    for (int k = 0; k < n; ++k) st = run_iteration(st);
    return st;
  }

  // Restores the state persisted for iteration i (and the ledger up to it).
  LoopState load_state(int i) {
    data_ = load_data(dir_ / "data");
    eval_reference_ = read_albedo_bin((dir_ / "eval_reference.bin").string());
    eval_labels_.clear();
    for (const auto& l : read_json_file((dir_ / "eval_reference_labels.json").string())) eval_labels_.push_back(parse_label(l.get<std::string>()));
    LoopState st;
    st.iteration = i;
    st.base = ModelCheckpoint::load((iter_dir(0) / "model.ckpt").string());
    st.model = ModelCheckpoint::load((iter_dir(i) / "model.ckpt").string());
    st.classifier = ClassifierCheckpoint::load((iter_dir(i) / "classifier.ckpt").string());
    st.pool_albedos = read_albedo_bin((iter_dir(i) / "pool_albedos.bin").string());
    require(st.pool_albedos.size() == data_.pool.size(), ErrorCode::invariant_violation, "pool albedo cache does not match pool");
    std::map<std::string, const ImageTensor*> by_id;
    for (std::size_t k = 0; k < data_.pool.size(); ++k) by_id[data_.pool[k].id] = &st.pool_albedos[k];
    st.sets.iteration = i;
    for (const auto& j : read_jsonl((iter_dir(i) / "pnsets.jsonl").string())) {
      auto a = labeled_from_record(j);
      a.albedo = *by_id.at(a.sample_id);
      (a.label == Label::positive ? st.sets.positives : st.sets.negatives).push_back(std::move(a));
    }
    validate_pnsets(st.sets, cfg_.thresholds);
    const auto ledger = read_json_file((dir_ / "ledger.json").string());
    ledger_.clear();
    for (const auto& e : ledger.at("iterations"))
      if (e.at("iteration").get<int>() <= i) ledger_.push_back(e);
    require(static_cast<int>(ledger_.size()) == i + 1, ErrorCode::invariant_violation, "ledger does not cover iteration " + std::to_string(i));
    return st;
  }

  // Albedo outputs of every persisted iteration 0..n on the pool.
  std::vector<std::vector<ImageTensor>> pool_history(int n) const {
    std::vector<std::vector<ImageTensor>> out;
    for (int i = 0; i <= n; ++i) out.push_back(read_albedo_bin((iter_dir(i) / "pool_albedos.bin").string()));
    return out;
  }

 private:
  std::vector<ImageTensor> sample_pool(const ModelCheckpoint& m) const {
    return sample_scenes(m, data_.pool, cfg_.seed, cfg_.diffusion.sample_steps, cfg_.diffusion.sample_eta);
  }

  nlohmann::json iteration_metrics(const LoopState& st) const {
    auto report = evaluate_model(st.model, data_.eval, cfg_, &st.classifier, "eval");
    auto j = report.json;
    j["iteration"] = st.iteration;
    j["classifier_accuracy"] = classifier_accuracy(st.classifier, pointers(eval_reference_), eval_labels_);
    j["positives"] = st.sets.positives.size();
    j["negatives"] = st.sets.negatives.size();
    return j;
  }

  static nlohmann::json train_provenance(const FinetuneResult& ft, const Partition& part) {
    std::set<std::string> pos, neg, used;
    for (const auto& p : part.positives) pos.insert(p.sample_id);
    for (const auto& n : part.negatives) neg.insert(n.sample_id);
    bool only_positive = true, any_negative = false;
    for (const auto& b : ft.batch_ids)
      for (const auto& id : b) {
        used.insert(id);
        only_positive = only_positive && pos.contains(id);
        any_negative = any_negative || neg.contains(id);
      }
    return {{"base_hash", ft.base_hash},
            {"parent_hash", ft.checkpoint.parent_hash},
            {"steps", ft.batch_ids.size()},
            {"positive_ids", std::vector<std::string>(pos.begin(), pos.end())},
            {"negative_ids", std::vector<std::string>(neg.begin(), neg.end())},
            {"used_ids", std::vector<std::string>(used.begin(), used.end())},
            {"only_positive", only_positive},
            {"any_negative", any_negative}};
  }

  void persist(const LoopState& st, const IterationRecord& rec) {
    const auto d = iter_dir(st.iteration);
    fs::create_directories(d / "albedos");
    st.classifier.save((d / "classifier.ckpt").string());
    st.model.save((d / "model.ckpt").string());
    {
      std::ofstream out(d / "pnsets.jsonl", std::ios::binary);
      for (const auto* set : {&st.sets.positives, &st.sets.negatives})
        for (const auto& a : *set) out << labeled_record(a).dump() << "\n";
      require(static_cast<bool>(out), ErrorCode::io, "failed writing pnsets.jsonl");
    }
    {
      std::ofstream out(d / "pool_scores.jsonl", std::ios::binary);
      for (const auto& r : rec.pool_scores) out << r.dump() << "\n";
      require(static_cast<bool>(out), ErrorCode::io, "failed writing pool_scores.jsonl");
    }
    write_albedo_bin((d / "pool_albedos.bin").string(), st.pool_albedos);
    for (std::size_t k = 0; k < data_.pool.size(); ++k)
      write_png((d / "albedos" / (data_.pool[k].id + ".png")).string(), st.pool_albedos[k]);
    if (st.iteration > 0) {
      std::ofstream out(d / "train_batches.jsonl", std::ios::binary);
      for (std::size_t s = 0; s < rec.train_batches.size(); ++s)
        out << nlohmann::json({{"step", s}, {"ids", rec.train_batches[s]}}).dump() << "\n";
      write_json_file((d / "train_provenance.json").string(), rec.train_provenance);
    }
    write_json_file((d / "metrics.json").string(), rec.metrics);

    nlohmann::json entry = {{"iteration", st.iteration},
                            {"classifier_hash", st.classifier.hash()},
                            {"classifier_parent_hash", st.classifier.parent_hash},
                            {"model_hash", st.model.hash()},
                            {"model_parent_hash", st.model.parent_hash},
                            {"model_provenance", st.model.provenance},
                            {"base_hash", st.base.hash()},
                            {"pnsets_hash", pnsets_hash(st.sets)},
                            {"positives", st.sets.positives.size()},
                            {"negatives", st.sets.negatives.size()},
                            {"metrics", rec.metrics}};
    ledger_.resize(static_cast<std::size_t>(st.iteration));
    ledger_.push_back(entry);
    write_json_file((dir_ / "ledger.json").string(),
                    {{"config_hash", config_hash(cfg_)}, {"run", dir_.filename().string()}, {"iterations", ledger_}});
  }

  RunConfig cfg_;
  fs::path dir_;
  LoopData data_;
  std::vector<ImageTensor> eval_reference_;
  std::vector<Label> eval_labels_;
  std::vector<nlohmann::json> ledger_;
};

// ---------------------------------------------------------------------------
// Phase 2: preference pairs from the persisted iterations, then DPO

struct DpoRun {
  std::vector<PreferencePair> pairs;
  ModelCheckpoint model;
  std::vector<double> losses;
  nlohmann::json metrics;
};

// Pairs: win = last iteration, lose = every earlier one; all albedos are
// scored by the final classifier.
inline std::vector<PreferencePair> pairs_from_run(const AdaptLoop& loop, const LoopState& last) {
  const auto& pool = loop.data().pool;
  const auto history = loop.pool_history(last.iteration);
  AlbedosByIter albedos;
  ScoresByIter scores;
  for (int i = 0; i <= last.iteration; ++i) {
    const auto s = last.classifier.scores(pointers(history[static_cast<std::size_t>(i)]));
    for (std::size_t k = 0; k < pool.size(); ++k) {
      albedos[i][pool[k].id] = history[static_cast<std::size_t>(i)][k];
      scores[i][pool[k].id] = s[k];
    }
  }
  std::vector<PairCondition> conds;
  for (const auto& s : pool) conds.push_back({s.id, &s.rgb});
  std::vector<int> lose;
  for (int i = 0; i < last.iteration; ++i) lose.push_back(i);
  return build_preference_pairs(conds, albedos, scores, last.iteration, lose);
}

inline DpoRun run_dpo(const AdaptLoop& loop, const LoopState& last, double corrupt_fraction, const fs::path& out_dir) {
  const auto& cfg = loop.config();
  DpoRun r;
  r.pairs = pairs_from_run(loop, last);
  require(!r.pairs.empty(), ErrorCode::precondition, "dpo: no preference pairs (the last model never beat an earlier one)");
  if (corrupt_fraction > 0.0) r.pairs = corrupt_pairs(r.pairs, corrupt_fraction, derive_seed(cfg.seed, "dpo-corrupt"));
  auto ft = dpo_finetune(last.model, r.pairs, cfg.dpo, derive_seed(cfg.seed, "dpo"));
  require(ft.checkpoint.parent_hash == last.model.hash(), ErrorCode::invariant_violation, "dpo did not start from the last model");
  r.model = ft.checkpoint;
  r.losses = ft.losses;
  auto report = evaluate_model(r.model, loop.data().eval, cfg, &last.classifier, "eval");
  r.metrics = report.json;
  r.metrics["pairs"] = r.pairs.size();
  r.metrics["corrupt_fraction"] = corrupt_fraction;
  r.metrics["reference_hash"] = last.model.hash();
  const std::size_t tail = std::max<std::size_t>(1, r.losses.size() / 10);
  double mean_tail = 0.0;
  for (std::size_t k = r.losses.size() - std::min(tail, r.losses.size()); k < r.losses.size(); ++k) mean_tail += r.losses[k];
  r.metrics["train_loss_tail_mean"] = r.losses.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_tail / static_cast<double>(tail));

  fs::create_directories(out_dir);
  r.model.save((out_dir / "model.ckpt").string());
  write_pair_manifest((out_dir / "pairs.jsonl").string(), r.pairs);
  write_json_file((out_dir / "metrics.json").string(), r.metrics);
  return r;
}

}  // namespace albedo
