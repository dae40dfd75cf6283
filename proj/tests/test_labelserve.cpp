#include <gtest/gtest.h>

#include <algorithm>
#include <thread>

#include "albedo/labelserve.hpp"
#include "albedo/png_io.hpp"
#include "albedo/synthgen.hpp"
#include "test_support.hpp"

using namespace albedo;
using albedo::testing::random_image;
using albedo::testing::TempDir;
using nlohmann::json;

namespace {

// Minimal run directory: a 12-sample pool, albedos for iterations 0 and 1,
// pool scores and a pair manifest with one pair per pool sample.
struct FakeRun {
  TempDir dir{"labelserve"};
  std::vector<ScenePair> pool;

  FakeRun() {
    namespace fs = std::filesystem;
    pool = generate_dataset(SceneDomain::real_like, 12, 8, 4);
    save_dataset(pool, dir / "data" / "pool", 4, "real_like");
    Rng rng(9);
    std::vector<PreferencePair> pairs;
    for (int it = 0; it < 2; ++it) {
      const auto d = dir / ("iter_" + std::to_string(it));
      fs::create_directories(d / "albedos");
      std::ofstream scores(d / "pool_scores.jsonl");
      for (const auto& s : pool) {
        write_png((d / "albedos" / (s.id + ".png")).string(), random_image(rng, 8, 8));
        scores << json({{"condition_id", s.id}, {"score", 0.1 * it + 0.5}}).dump() << "\n";
      }
    }
    for (const auto& s : pool) {
      PreferencePair p;
      p.condition_id = s.id;
      p.win_source_iter = 1;
      p.lose_source_iter = 0;
      p.win_score = 0.9;
      p.lose_score = 0.1;
      pairs.push_back(p);
    }
    fs::create_directories(dir / "dpo");
    write_pair_manifest((dir / "dpo" / "pairs.jsonl").string(), pairs);
  }
};

// Server on an ephemeral port, listening on a background thread.
struct Running {
  LabelServer server;
  int port;
  std::thread thread;
  explicit Running(LabelServerOptions o) : server(std::move(o)), port(server.bind()) {
    thread = std::thread([this] { server.listen(); });
    server.wait_until_ready();
  }
  ~Running() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_connection_timeout(5);
    return c;
  }
};

LabelServerOptions opts(const FakeRun& run, std::uint64_t seed = 1) {
  LabelServerOptions o;
  o.run_dir = run.dir.path();
  o.seed = seed;
  return o;
}

json post(httplib::Client& c, const std::string& path, const json& body, int expect) {
  auto r = c.Post(path, body.dump(), "application/json");
  EXPECT_TRUE(r);
  if (!r) return {};
  EXPECT_EQ(r->status, expect) << r->body;
  return json::parse(r->body);
}

json get(httplib::Client& c, const std::string& path, int expect) {
  auto r = c.Get(path);
  EXPECT_TRUE(r);
  if (!r) return {};
  EXPECT_EQ(r->status, expect) << r->body;
  return r->status == 200 && r->get_header_value("Content-Type") == "application/json" ? json::parse(r->body) : json{};
}

}  // namespace

TEST(LabelServe, QueueLabelAndLabels) {
  FakeRun run;
  Running srv(opts(run));
  auto c = srv.client();
  EXPECT_EQ(get(c, "/health", 200)["iteration"], 1);
  auto q = get(c, "/queue?limit=5", 200);
  ASSERT_EQ(q.size(), 5u);
  std::vector<std::string> ids;
  for (const auto& s : run.pool) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(q[i]["sample_id"], ids[i]);
  EXPECT_DOUBLE_EQ(q[0]["score"].get<double>(), 0.6);
  const std::string first = q[0]["sample_id"];

  post(c, "/label", {{"sample_id", first}, {"label", "positive"}}, 200);
  EXPECT_EQ(get(c, "/labels", 200)[first], "positive");
  EXPECT_NE(get(c, "/queue?limit=5", 200)[0]["sample_id"], first);
  post(c, "/label", {{"sample_id", first}, {"label", "ambiguous"}}, 200);
  EXPECT_EQ(get(c, "/labels", 200)[first], "ambiguous");
  EXPECT_EQ(get(c, "/queue?limit=100", 200).size(), run.pool.size() - 1);

  const auto hist = LabelStore((run.dir / "labels.jsonl").string()).history();
  ASSERT_EQ(hist.size(), 2u);
  EXPECT_EQ(hist[0].provenance, Provenance::manual);
  EXPECT_EQ(hist[1].iteration, 1);
}

TEST(LabelServe, RejectsBadRequests) {
  FakeRun run;
  Running srv(opts(run));
  auto c = srv.client();
  post(c, "/label", {{"sample_id", run.pool[0].id}, {"label", "great"}}, 400);
  post(c, "/label", {{"sample_id", run.pool[0].id}, {"label", "unlabeled"}}, 400);
  post(c, "/label", {{"label", "positive"}}, 400);
  post(c, "/label", {{"sample_id", "nope"}, {"label", "positive"}}, 404);
  auto r = c.Post("/label", "{oops", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  get(c, "/queue?limit=-3", 400);
  get(c, "/queue?run=other", 404);
  get(c, "/images/rgb/nope.png", 404);
  post(c, "/vote", {{"session", "s"}, {"pair_id", "nope"}, {"winner", "a"}}, 404);
  post(c, "/vote", {{"session", "s"}, {"pair_id", "x"}, {"winner", "c"}}, 400);
  EXPECT_TRUE(LabelStore((run.dir / "labels.jsonl").string()).history().empty());
}

TEST(LabelServe, ServesImages) {
  FakeRun run;
  Running srv(opts(run));
  auto c = srv.client();
  const auto& id = run.pool[3].id;
  auto r = c.Get("/images/rgb/" + id + ".png");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  const auto img = decode_png(std::vector<unsigned char>(r->body.begin(), r->body.end()));
  EXPECT_EQ(img.height(), 8);
  auto a = c.Get("/images/albedo/" + id + ".png");
  ASSERT_TRUE(a);
  const auto disk = read_file((run.dir / "iter_1" / "albedos" / (id + ".png")).string());
  EXPECT_EQ(a->body, std::string(disk.begin(), disk.end()));
}

TEST(LabelServe, ConcurrentLabelPostsAreAllRecorded) {
  FakeRun run;
  Running srv(opts(run));
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int t = 0; t < 100; ++t)
    threads.emplace_back([&, t] {
      auto c = srv.client();
      const json body = {{"sample_id", run.pool[static_cast<std::size_t>(t) % run.pool.size()].id},
                         {"label", t % 2 ? "positive" : "negative"}};
      auto r = c.Post("/label", body.dump(), "application/json");
      if (r && r->status == 200) ++ok;
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(ok.load(), 100);
  LabelStore store((run.dir / "labels.jsonl").string());
  EXPECT_EQ(store.history().size(), 100u);
  auto c = srv.client();
  const auto labels = get(c, "/labels", 200);
  EXPECT_EQ(labels.size(), run.pool.size());
  for (const auto& [id, r] : store.effective()) EXPECT_EQ(labels[id], to_string(r.label));
}

TEST(LabelServe, PairPlacementIsBalancedAndStable) {
  FakeRun run;
  Running srv(opts(run, 3));
  auto c = srv.client();
  int servings = 0, a_win = 0;
  while (servings < 1000) {
    const auto resp = get(c, "/pairs", 200);
    const std::string session = resp["session"];
    ASSERT_EQ(resp["pairs"].size(), run.pool.size());
    servings += static_cast<int>(resp["pairs"].size());
    // Same session again: same placement, no new servings.
    const auto again = get(c, "/pairs?session=" + session, 200);
    EXPECT_EQ(again["pairs"], resp["pairs"]);
  }
  const auto log = JsonlLog((run.dir / "servings.jsonl").string()).read_all();
  EXPECT_EQ(static_cast<int>(log.size()), servings);
  for (const auto& s : log) a_win += s["a"] == "win";
  EXPECT_NEAR(static_cast<double>(a_win) / servings, 0.5, 0.05);
}

TEST(LabelServe, PairImagesFollowPlacementAndVotesLastWins) {
  FakeRun run;
  Running srv(opts(run));
  auto c = srv.client();
  const auto resp = get(c, "/pairs?limit=2", 200);
  ASSERT_EQ(resp["pairs"].size(), 2u);
  const std::string session = resp["session"];
  const std::string pid = resp["pairs"][0]["pair_id"];
  const auto cond = run.pool[0].id;

  auto a = c.Get(resp["pairs"][0]["a_url"].get<std::string>());
  ASSERT_TRUE(a);
  ASSERT_EQ(a->status, 200);
  const auto win_bytes = read_file((run.dir / "iter_1" / "albedos" / (cond + ".png")).string());
  const bool a_is_win = a->body == std::string(win_bytes.begin(), win_bytes.end());
  EXPECT_EQ(get(c, "/images/pairs/other/" + pid + "/a.png", 404), json{});

  post(c, "/vote", {{"session", "unknown"}, {"pair_id", pid}, {"winner", "a"}}, 400);
  post(c, "/vote", {{"session", session}, {"pair_id", pid}, {"winner", "a"}}, 200);
  post(c, "/vote", {{"session", session}, {"pair_id", pid}, {"winner", "b"}}, 200);
  const auto votes = get(c, "/votes?session=" + session, 200);
  EXPECT_EQ(votes["history"], 2);
  ASSERT_EQ(votes["effective"].size(), 1u);
  EXPECT_EQ(votes["effective"][0]["winner"], "b");
  EXPECT_EQ(votes["effective"][0]["preferred"], a_is_win ? "lose" : "win");
  EXPECT_EQ(votes["effective"][0]["preferred_iter"], a_is_win ? 0 : 1);
}

TEST(LabelServe, RestartKeepsLabelsAndPlacements) {
  FakeRun run;
  std::string session;
  json placement;
  {
    Running srv(opts(run));
    auto c = srv.client();
    post(c, "/label", {{"sample_id", run.pool[1].id}, {"label", "negative"}}, 200);
    const auto resp = get(c, "/pairs?limit=3", 200);
    session = resp["session"];
    placement = resp["pairs"];
  }
  Running srv(opts(run, 99));
  auto c = srv.client();
  EXPECT_EQ(get(c, "/labels", 200)[run.pool[1].id], "negative");
  EXPECT_EQ(get(c, "/pairs?limit=3&session=" + session, 200)["pairs"], placement);
  EXPECT_EQ(JsonlLog((run.dir / "servings.jsonl").string()).read_all().size(), 3u);
}

TEST(LabelServe, MissingRunDirectory) {
  LabelServerOptions o;
  o.run_dir = "/nonexistent/run";
  EXPECT_THROW(LabelServer s(o), Error);
}
