#include <gtest/gtest.h>

#include <thread>

#include "albedo/label_store.hpp"
#include "test_support.hpp"

using namespace albedo;
using albedo::testing::TempDir;

namespace {

LabelRecord rec(const std::string& id, Label l, double t) {
  LabelRecord r;
  r.sample_id = id;
  r.label = l;
  r.timestamp = t;
  return r;
}

}  // namespace

TEST(LabelRecord, JsonRoundTrip) {
  LabelRecord r = rec("s1", Label::ambiguous, 12.5);
  r.provenance = Provenance::pseudo;
  r.score = 0.25;
  r.iteration = 3;
  r.session = "abc";
  const auto back = LabelRecord::from_json(r.to_json());
  EXPECT_EQ(back.sample_id, "s1");
  EXPECT_EQ(back.label, Label::ambiguous);
  EXPECT_EQ(back.provenance, Provenance::pseudo);
  EXPECT_EQ(back.score, 0.25);
  EXPECT_EQ(back.iteration, 3);
  EXPECT_EQ(back.session, "abc");
  EXPECT_TRUE(r.to_json().contains("score"));
  EXPECT_TRUE(rec("x", Label::positive, 0).to_json()["score"].is_null());
  EXPECT_THROW(LabelRecord::from_json({{"sample_id", "a"}, {"label", "maybe"}, {"provenance", "manual"}}), Error);
}

TEST(LabelStore, LastRecordWinsAndHistoryIsKept) {
  TempDir dir;
  LabelStore store((dir / "labels.jsonl").string());
  EXPECT_TRUE(store.history().empty());
  store.append(rec("a", Label::positive, 1));
  store.append(rec("b", Label::negative, 2));
  store.append(rec("a", Label::negative, 3));
  store.append(rec("a", Label::ambiguous, 4));
  const auto eff = store.effective();
  ASSERT_EQ(eff.size(), 2u);
  EXPECT_EQ(eff.at("a").label, Label::ambiguous);
  EXPECT_EQ(eff.at("b").label, Label::negative);
  EXPECT_EQ(store.history().size(), 4u);

  // A second store over the same file sees the same effective labels.
  LabelStore again(store.path());
  EXPECT_EQ(again.effective().at("a").timestamp, 4);
}

TEST(LabelStore, ConcurrentAppendsAreAllKept) {
  TempDir dir;
  LabelStore store((dir / "labels.jsonl").string());
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&, t] {
      for (int i = 0; i < 50; ++i) store.append(rec("t" + std::to_string(t) + "_" + std::to_string(i), Label::positive, i));
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(store.history().size(), 400u);
  EXPECT_EQ(store.effective().size(), 400u);
}

TEST(LabelStore, CorruptLineIsReported) {
  TempDir dir;
  const auto path = (dir / "labels.jsonl").string();
  {
    std::ofstream out(path);
    out << rec("a", Label::positive, 1).to_json().dump() << "\n{not json\n";
  }
  LabelStore store(path);
  try {
    store.history();
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::io);
  }
}
