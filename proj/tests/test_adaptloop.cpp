#include <gtest/gtest.h>

#include "albedo/adaptloop.hpp"
#include "test_support.hpp"

using namespace albedo;
using albedo::testing::TempDir;

namespace {

RunConfig tiny_config(std::uint64_t seed = 5) {
  RunConfig c;
  c.seed = seed;
  c.image_size = 8;
  c.thresholds = {.tau_pos = 0.49, .tau_neg = 0.48, .tau_rectify = 0.485};
  c.data = {.synthetic_count = 24, .pool_count = 16, .eval_count = 6, .manual_positives = 2, .manual_negatives = 2,
            .oracle_mse_threshold = 0.05};
  c.diffusion.timesteps = 20;
  c.diffusion.channels = 4;
  c.diffusion.temb_dim = 8;
  c.diffusion.sample_steps = 4;
  c.base_training = {.steps = 60, .batch = 4, .lr = 2e-3, .clip_norm = 1.0};
  c.model_finetune = {.steps = 6, .batch = 4, .lr = 1e-3, .clip_norm = 1.0};
  c.classifier = {4, 4, 4};
  c.classifier_initial = {.steps = 150, .batch = 8, .lr = 4e-3, .clip_norm = 1.0, .augment = true};
  c.classifier_finetune = {.steps = 5, .batch = 4, .lr = 1e-3, .clip_norm = 1.0, .augment = true};
  c.dpo.steps = 4;
  c.dpo.batch = 2;
  return c;
}

// Manual labels on the first pool ids, independent of any model output.
std::map<std::string, Label> manual_labels(const RunConfig& c) {
  const auto pool =
      generate_dataset(SceneDomain::real_like, c.data.pool_count, c.image_size, derive_seed(c.seed, "data-pool"));
  std::map<std::string, Label> out;
  for (int i = 0; i < 6; ++i) out[pool[static_cast<std::size_t>(i)].id] = i % 2 ? Label::negative : Label::positive;
  return out;
}

nlohmann::json ledger(const TempDir& dir) { return read_json_file((dir / "ledger.json").string()); }

}  // namespace

TEST(AdaptLoop, RunsAndRecordsProvenance) {
  TempDir dir;
  const auto cfg = tiny_config();
  AdaptLoop loop(cfg, dir.path());
  auto st = loop.initialize(manual_labels(cfg), Provenance::manual);
  EXPECT_EQ(st.sets.positives.size(), 3u);
  EXPECT_EQ(st.sets.negatives.size(), 3u);
  EXPECT_EQ(st.model.hash(), st.base.hash());
  EXPECT_EQ(st.base.provenance, "base");
  const auto base_hash = st.base.hash();

  st = loop.run_loop(st, 2);
  EXPECT_EQ(st.iteration, 2);
  const auto led = ledger(dir);
  ASSERT_EQ(led["iterations"].size(), 3u);
  EXPECT_EQ(led["config_hash"], config_hash(cfg));
  for (int i = 0; i <= 2; ++i) {
    const auto& e = led["iterations"][static_cast<std::size_t>(i)];
    EXPECT_EQ(e["iteration"], i);
    EXPECT_EQ(e["base_hash"], base_hash);
    for (const char* k : {"psnr_mean", "ssim_mean", "mse_mean", "negative_ratio", "classifier_accuracy"})
      EXPECT_TRUE(e["metrics"].contains(k)) << k;
    for (const char* f : {"model.ckpt", "classifier.ckpt", "pnsets.jsonl", "pool_scores.jsonl", "metrics.json"})
      EXPECT_TRUE(fs::exists(loop.iter_dir(i) / f)) << f;
    if (i == 0) continue;
    // Every fine-tune restarts from the base and never trains on negatives.
    EXPECT_EQ(e["model_parent_hash"], base_hash);
    EXPECT_EQ(e["classifier_parent_hash"], led["iterations"][static_cast<std::size_t>(i - 1)]["classifier_hash"]);
    const auto prov = read_json_file((loop.iter_dir(i) / "train_provenance.json").string());
    EXPECT_EQ(prov["base_hash"], base_hash);
    EXPECT_TRUE(prov["only_positive"].get<bool>());
    EXPECT_FALSE(prov["any_negative"].get<bool>());
    std::set<std::string> neg(prov["negative_ids"].begin(), prov["negative_ids"].end());
    for (const auto& row : read_jsonl((loop.iter_dir(i) / "train_batches.jsonl").string()))
      for (const auto& id : row["ids"]) EXPECT_FALSE(neg.contains(id.get<std::string>()));
    EXPECT_EQ(read_jsonl((loop.iter_dir(i) / "train_batches.jsonl").string()).size(),
              static_cast<std::size_t>(cfg.model_finetune.steps));
  }
  // Base checkpoint on disk is untouched by the loop.
  EXPECT_EQ(ModelCheckpoint::load((loop.iter_dir(0) / "model.ckpt").string()).hash(), base_hash);
}

TEST(AdaptLoop, ResumeMatchesUninterruptedRun) {
  const auto cfg = tiny_config(12);
  TempDir a, b;
  AdaptLoop full(cfg, a.path());
  auto sa = full.run_loop(full.initialize(manual_labels(cfg), Provenance::manual), 2);
  {
    AdaptLoop first(cfg, b.path());
    first.run_iteration(first.initialize(manual_labels(cfg), Provenance::manual));
  }
  AdaptLoop resumed(cfg, b.path());
  auto sb = resumed.run_iteration(resumed.load_state(1));
  EXPECT_EQ(sa.model.hash(), sb.model.hash());
  EXPECT_EQ(sa.classifier.hash(), sb.classifier.hash());
  EXPECT_EQ(pnsets_hash(sa.sets), pnsets_hash(sb.sets));
  auto la = ledger(a)["iterations"], lb = ledger(b)["iterations"];
  EXPECT_EQ(la, lb);
  EXPECT_EQ(read_file((full.iter_dir(2) / "metrics.json").string()), read_file((resumed.iter_dir(2) / "metrics.json").string()));
}

TEST(AdaptLoop, ZeroFinetuneStepsKeepsBaseWeights) {
  auto cfg = tiny_config(20);
  cfg.model_finetune.steps = 0;
  TempDir dir;
  AdaptLoop loop(cfg, dir.path());
  auto st = loop.run_iteration(loop.initialize(manual_labels(cfg), Provenance::manual));
  EXPECT_EQ(st.model.params, st.base.params);
  EXPECT_EQ(st.model.parent_hash, st.base.hash());
  const auto prov = read_json_file((loop.iter_dir(1) / "train_provenance.json").string());
  EXPECT_EQ(prov.value("steps", -1), 0);
}

TEST(AdaptLoop, RejectsBadInputs) {
  auto cfg = tiny_config();
  cfg.data.pool_count = 0;
  EXPECT_THROW(AdaptLoop(cfg, "/tmp/unused"), Error);

  cfg = tiny_config();
  TempDir dir;
  AdaptLoop loop(cfg, dir.path());
  EXPECT_THROW(loop.initialize({{"not-a-sample", Label::positive}}), Error);
  auto only_pos = manual_labels(cfg);
  for (auto& [id, l] : only_pos) l = Label::positive;
  EXPECT_THROW(loop.initialize(only_pos, Provenance::manual), Error);
  auto st = loop.initialize(manual_labels(cfg), Provenance::manual);
  EXPECT_THROW(loop.run_loop(st, 0), Error);
}

TEST(AdaptLoop, DpoStartsFromLastModelAndWritesPairs) {
  const auto cfg = tiny_config(15);
  TempDir dir;
  AdaptLoop loop(cfg, dir.path());
  auto st = loop.run_loop(loop.initialize(manual_labels(cfg), Provenance::manual), 2);
  const auto pairs = pairs_from_run(loop, st);
  ASSERT_FALSE(pairs.empty());
  for (const auto& p : pairs) {
    EXPECT_GT(p.win_score, p.lose_score);
    EXPECT_EQ(p.win_source_iter, 2);
    EXPECT_TRUE(p.lose_source_iter == 0 || p.lose_source_iter == 1);
  }
  const auto before = st.model.params;
  const auto r = run_dpo(loop, st, 0.0, dir / "dpo");
  EXPECT_EQ(st.model.params, before);
  EXPECT_EQ(r.model.parent_hash, st.model.hash());
  EXPECT_EQ(r.metrics["reference_hash"], st.model.hash());
  EXPECT_EQ(read_jsonl((dir / "dpo" / "pairs.jsonl").string()).size(), pairs.size());
  EXPECT_EQ(ModelCheckpoint::load((dir / "dpo" / "model.ckpt").string()).hash(), r.model.hash());
}
