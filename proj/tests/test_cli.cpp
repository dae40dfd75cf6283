#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "albedo/adaptloop.hpp"
#include "test_support.hpp"

using namespace albedo;
using albedo::testing::TempDir;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(ALBEDO_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string tiny_config_file(const TempDir& dir) {
  RunConfig c;
  c.seed = 5;
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
  const auto path = (dir / "config.json").string();
  write_json_file(path, to_json(c));
  return path;
}

// Balanced manual labels on the first pool ids, as a label store.
std::string labels_file(const TempDir& dir) {
  const auto pool = generate_dataset(SceneDomain::real_like, 16, 8, derive_seed(5, "data-pool"));
  LabelStore store((dir / "labels.jsonl").string());
  for (int i = 0; i < 6; ++i) {
    LabelRecord r;
    r.sample_id = pool[static_cast<std::size_t>(i)].id;
    r.label = i % 2 ? Label::negative : Label::positive;
    store.append(r);
  }
  return store.path();
}

}  // namespace

TEST(Cli, UsageErrors) {
  TempDir dir;
  EXPECT_EQ(run(dir, "--help").code, 0);
  EXPECT_EQ(run(dir, "").code, 64);
  EXPECT_EQ(run(dir, "init --out x --bogus 1").code, 64);
  EXPECT_EQ(run(dir, "frobnicate").code, 64);
  EXPECT_EQ(run(dir, "synthgen --out x --size 3").code, 64);
  const auto r = run(dir, "synthgen --out x --config /no/such.json");
  EXPECT_EQ(r.code, 64);
  EXPECT_NE(r.err.find("\"usage\""), std::string::npos);
}

TEST(Cli, LoopRejectsZeroIterationsAndMissingRun) {
  TempDir dir;
  auto r = run(dir, "loop --out " + (dir / "run").string() + " --iters 0");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "invalid_argument");
  r = run(dir, "loop --out " + (dir / "run").string() + " --iters 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "not_found");
}

TEST(Cli, SynthgenWritesDataset) {
  TempDir dir;
  const auto out = (dir / "ds").string();
  const auto r = run(dir, "synthgen --out " + out + " --count 3 --size 8 --domain real_like --seed 4");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["count"], 3);
  const auto data = load_dataset(out);
  ASSERT_EQ(data.size(), 3u);
  EXPECT_EQ(data[0].domain, DomainTag::real_like);
  EXPECT_EQ(data[0].rgb.height(), 8);
}

TEST(Cli, InitLoopDpoEvalPipeline) {
  TempDir dir;
  const auto cfg = tiny_config_file(dir);
  const auto labels = labels_file(dir);
  const auto out = (dir / "run").string();
  auto r = run(dir, "init --config " + cfg + " --out " + out + " --labels " + labels);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["iteration"], 0);

  r = run(dir, "loop --out " + out + " --iters 2");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["iteration"], 2);
  EXPECT_EQ(read_json_file(out + "/ledger.json")["iterations"].size(), 3u);

  // A different configuration cannot continue this run.
  r = run(dir, "loop --out " + out + " --iters 1 --seed 6");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "config");

  r = run(dir, "dpo --out " + out);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GT(nlohmann::json::parse(r.out)["pairs"].get<int>(), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "dpo" / "pairs.jsonl"));

  const std::string eval = "eval --config " + cfg + " --model " + out + "/dpo/model.ckpt --pool " + out +
                           "/data/eval --classifier " + out + "/iter_2/classifier.ckpt";
  const auto e1 = run(dir, eval + " --out " + (dir / "e1").string());
  const auto e2 = run(dir, eval + " --out " + (dir / "e2").string());
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
  EXPECT_EQ(slurp(dir / "e1" / "metrics.json"), slurp(dir / "e2" / "metrics.json"));
  EXPECT_EQ(nlohmann::json::parse(e1.out)["n"], 6);
}
