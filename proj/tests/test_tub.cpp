#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "rcpilot/tub.hpp"
#include "support/tempdir.hpp"

using namespace rcpilot;
using namespace rcpilot::tub;
using testdata::TempDir;

namespace {

CameraFrame pattern_frame(std::uint64_t seed) {
  CameraFrame f;
  std::mt19937_64 rng(seed);
  // Blocky noise: distinct per seed, compresses better than pixel noise.
  for (int y = 0; y < kFrameHeight; y += 4)
    for (int x = 0; x < kFrameWidth; x += 4) {
      const auto r = rng();
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx)
          for (int c = 0; c < 3; ++c)
            f.pixels[((static_cast<std::size_t>(y + dy) * kFrameWidth) + x + dx) * 3 + c] =
                static_cast<std::uint8_t>(r >> (8 * c));
    }
  return f;
}

void fill_tub(const fs::path& dir, std::size_t n, std::int64_t run_break_after = -1) {
  auto w = TubWriter::create(dir);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t run = (run_break_after >= 0 && static_cast<std::int64_t>(i) > run_break_after) ? 1 : 0;
    w.append(pattern_frame(i), NormalizedCommand(0.001 * static_cast<double>(i % 1000), 0.3), RecordMode::expert,
             0.05 * static_cast<double>(i), 0, run);
  }
}

std::size_t manifest_lines(const fs::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST(TubWriter, FirstAppendIsFrameZeroAndOneLine) {
  TempDir tmp;
  auto w = TubWriter::create(tmp / "t");
  EXPECT_EQ(w.append(pattern_frame(1), {0.25, 0.4}, RecordMode::user, 1.5), 0u);
  EXPECT_EQ(manifest_lines(tmp / "t"), 1u);
  EXPECT_TRUE(fs::exists(tmp / "t" / "images" / "0.png"));

  Tub t(tmp / "t");
  ASSERT_EQ(t.size(), 1u);
  const auto& r = t.records()[0];
  EXPECT_EQ(r.frame_id, 0u);
  EXPECT_EQ(r.image_ref, "images/0.png");
  EXPECT_DOUBLE_EQ(r.steering, 0.25);
  EXPECT_DOUBLE_EQ(r.throttle, 0.4);
  EXPECT_EQ(r.mode, RecordMode::user);
  EXPECT_DOUBLE_EQ(r.timestamp, 1.5);
  EXPECT_EQ(t.meta().format_version, kTubFormatVersion);
  EXPECT_DOUBLE_EQ(t.meta().record_rate_hz, 20.0);
}

TEST(TubWriter, CreateRefusesExistingTub) {
  TempDir tmp;
  TubWriter::create(tmp / "t");
  EXPECT_THROW(TubWriter::create(tmp / "t"), Error);
}

TEST(TubWriter, ReopenAfterTornLineContinuesIds) {
  TempDir tmp;
  fill_tub(tmp / "t", 3);
  {
    std::ofstream out(tmp / "t" / "manifest.jsonl", std::ios::app);
    out << R"({"frame_id":3,"image_ref":"images/3.p)";  // crash mid-write
  }
  EXPECT_EQ(Tub(tmp / "t").size(), 3u);
  auto w = TubWriter::open(tmp / "t");
  EXPECT_EQ(w.size(), 3u);
  EXPECT_EQ(w.append(pattern_frame(9), {0, 0}, RecordMode::expert, 1.0), 3u);
  Tub t(tmp / "t");
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t.records().back().frame_id, 3u);
  EXPECT_EQ(manifest_lines(tmp / "t"), 4u);
}

TEST(TubWriter, FailedImageWriteIsNotCounted) {
  TempDir tmp;
  auto w = TubWriter::create(tmp / "t");
  w.append(pattern_frame(0), {0, 0}, RecordMode::expert, 0.0);
  // A directory where the next image must go makes the rename fail.
  fs::create_directories(tmp / "t" / "images" / "1.png" / "blocker");
  EXPECT_THROW(w.append(pattern_frame(1), {0, 0}, RecordMode::expert, 0.05), Error);
  EXPECT_EQ(w.size(), 1u);
  EXPECT_EQ(manifest_lines(tmp / "t"), 1u);
  EXPECT_FALSE(fs::exists(tmp / "t" / "images" / "1.png.tmp"));
}

TEST(Tub, RejectsGarbageBeforeLastLine) {
  TempDir tmp;
  fill_tub(tmp / "t", 2);
  std::ofstream(tmp / "t" / "manifest.jsonl", std::ios::app) << "not json\n";
  EXPECT_THROW(Tub(tmp / "t"), Error);
}

TEST(Tub, RejectsWrongFormatVersion) {
  TempDir tmp;
  TubMeta m;
  m.format_version = 2;
  TubWriter::create(tmp / "t", m);
  try {
    Tub t(tmp / "t");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::version_mismatch);
  }
}

TEST(Split, TenRecordsSplitEightTwoDeterministically) {
  TempDir tmp;
  fill_tub(tmp / "t", 10);
  auto a = load_split(tmp / "t", 0.2, 7);
  auto b = load_split(tmp / "t", 0.2, 7);
  EXPECT_EQ(a.train.size(), 8u);
  EXPECT_EQ(a.val.size(), 2u);
  EXPECT_EQ(a.train.anchors(), b.train.anchors());
  EXPECT_EQ(a.val.anchors(), b.val.anchors());
  std::set<std::size_t> all(a.train.anchors().begin(), a.train.anchors().end());
  for (auto v : a.val.anchors()) EXPECT_TRUE(all.insert(v).second) << "record " << v << " in both splits";
  EXPECT_EQ(all.size(), 10u);

  // A different seed gives a different partition (for this seed pair).
  auto c = load_split(tmp / "t", 0.2, 8);
  EXPECT_NE(a.val.anchors(), c.val.anchors());
}

TEST(Split, FloorRule) {
  EXPECT_EQ(train_count(10000, 0.2), 8000u);
  EXPECT_EQ(train_count(10, 0.2), 8u);
  EXPECT_EQ(train_count(9, 0.2), 7u);
  EXPECT_EQ(train_count(7, 0.2), 5u);
  EXPECT_EQ(train_count(1, 0.2), 0u);
  EXPECT_EQ(train_count(3, 1.0 / 3.0), 2u);  // 3 * (2/3) must not round down to 1
}

TEST(Split, RejectsBadFractionAndEmptyTub) {
  TempDir tmp;
  TubWriter::create(tmp / "t");
  EXPECT_THROW(load_split(tmp / "t", 0.0, 1), Error);
  EXPECT_THROW(load_split(tmp / "t", 1.0, 1), Error);
  try {
    load_split(tmp / "t", 0.2, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_dataset);
  }
}

TEST(Split, CorruptImageIsSkippedAndCounted) {
  TempDir tmp;
  fill_tub(tmp / "t", 10);
  std::ofstream(tmp / "t" / "images" / "4.png", std::ios::trunc) << "definitely not a png";
  auto s = load_split(tmp / "t", 0.2, 3);
  EXPECT_EQ(s.usable, 9u);
  EXPECT_EQ(s.skipped, 1u);
  EXPECT_EQ(s.train.size() + s.val.size(), 9u);
  EXPECT_EQ(s.train.size(), 7u);  // floor(9 * 0.8)
  for (auto a : s.train.anchors()) EXPECT_NE(a, 4u);
  for (auto a : s.val.anchors()) EXPECT_NE(a, 4u);
}

TEST(Batches, FiveRecordsBatchTwo) {
  TempDir tmp;
  fill_tub(tmp / "t", 5);
  auto d = load_all(tmp / "t", 1);
  Batches b(d, 2, 1, false);
  EXPECT_EQ(b.count(), 3u);
  nn::Tensor<float> x, y;
  std::vector<std::size_t> sizes;
  while (b.next(x, y)) {
    sizes.push_back(x.shape()[0]);
    EXPECT_EQ(x.shape(), (nn::Shape{x.shape()[0], 120, 160, 3}));
    EXPECT_EQ(y.shape(), (nn::Shape{x.shape()[0], 2}));
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 1}));
}

TEST(Batches, ShuffledCoversEverySampleOnce) {
  TempDir tmp;
  fill_tub(tmp / "t", 7);
  auto d = load_all(tmp / "t", 1);
  Batches b(d, 3, 99, true);
  nn::Tensor<float> x, y;
  std::multiset<float> steer;
  while (b.next(x, y))
    for (std::size_t i = 0; i < x.shape()[0]; ++i) steer.insert(y[2 * i]);
  std::multiset<float> expect;
  for (int i = 0; i < 7; ++i) expect.insert(static_cast<float>(0.001 * i));
  EXPECT_EQ(steer, expect);
}

TEST(Windows, FiveRecordsLengthThree) {
  TempDir tmp;
  fill_tub(tmp / "t", 5);
  auto d = load_all(tmp / "t", 3);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d.window(0), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(d.window(1), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(d.window(2), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(d.sample_shape(), (nn::Shape{3, 120, 160, 3}));

  nn::Tensor<float> x, y;
  const std::size_t idx[] = {1};
  d.fill(idx, x, y);
  EXPECT_EQ(x.shape(), (nn::Shape{1, 3, 120, 160, 3}));
  EXPECT_FLOAT_EQ(y[0], 0.003f);  // anchor is record 3
  // Frame order inside the window is oldest first.
  const auto f1 = to_model_input<float>(pattern_frame(1));
  for (std::size_t k = 0; k < kFrameBytes; k += 997) EXPECT_EQ(x[k], f1[k]);
}

TEST(Windows, RunBoundaryBreaksWindows) {
  TempDir tmp;
  fill_tub(tmp / "t", 5, /*run_break_after=*/2);
  auto d = load_all(tmp / "t", 3);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.window(0), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Windows, FrameIdGapBreaksWindows) {
  TempDir tmp;
  fill_tub(tmp / "t", 6);
  std::ofstream(tmp / "t" / "images" / "3.png", std::ios::trunc) << "x";
  auto d = load_all(tmp / "t", 2);
  // Anchors needing record 3 (3 and 4) are gone.
  std::vector<std::size_t> anchors(d.anchors());
  EXPECT_EQ(anchors, (std::vector<std::size_t>{1, 2, 5}));
}

TEST(Windows, PropertyEveryWindowIsContiguousWithinOneRun) {
  TempDir tmp;
  {
    auto w = TubWriter::create(tmp / "t");
    std::mt19937 rng(5);
    std::int64_t run = 0;
    for (int i = 0; i < 60; ++i) {
      if (rng() % 7 == 0) ++run;
      w.append(pattern_frame(i), {0, 0}, RecordMode::expert, 0.05 * i, 0, run);
    }
  }
  for (std::size_t t = 1; t <= 5; ++t) {
    auto s = load_split(tmp / "t", 0.25, 11, t);
    const Tub tub(tmp / "t");
    std::size_t expected = 0;
    for (std::size_t a = t - 1; a < tub.size(); ++a) {
      bool ok = true;
      for (std::size_t k = 1; k < t; ++k) ok = ok && tub.records()[a - k].run == tub.records()[a].run;
      expected += ok;
    }
    EXPECT_EQ(s.train.size() + s.val.size(), expected) << "T=" << t;
    for (const TubDataset* d : {&s.train, &s.val})
      for (std::size_t i = 0; i < d->size(); ++i) {
        const auto w = d->window(i);
        ASSERT_EQ(w.size(), t);
        for (std::size_t k = 1; k < t; ++k) {
          EXPECT_EQ(tub.records()[w[k]].frame_id, tub.records()[w[k - 1]].frame_id + 1);
          EXPECT_EQ(tub.records()[w[k]].run, tub.records()[w[0]].run);
        }
      }
  }
}

TEST(RoundTrip, ThousandRecordsExact) {
  TempDir tmp;
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<NormalizedCommand> cmds;
  {
    auto w = TubWriter::create(tmp / "t");
    for (int i = 0; i < 1000; ++i) {
      cmds.emplace_back(u(rng), u(rng));
      w.append(pattern_frame(1000 + i), cmds.back(), i % 2 ? RecordMode::autopilot : RecordMode::user, 0.05 * i,
               i / 500, 0);
    }
  }
  Tub t(tmp / "t");
  ASSERT_EQ(t.size(), 1000u);
  for (int i = 0; i < 1000; ++i) {
    const auto& r = t.records()[i];
    EXPECT_EQ(r.frame_id, static_cast<std::uint64_t>(i));
    EXPECT_EQ(r.steering, cmds[i].steering());  // exact, not approximate
    EXPECT_EQ(r.throttle, cmds[i].throttle());
    EXPECT_EQ(r.mode, i % 2 ? RecordMode::autopilot : RecordMode::user);
    EXPECT_EQ(r.lap, i / 500);
    ASSERT_EQ(t.load_image(r).pixels, pattern_frame(1000 + i).pixels) << "frame " << i;
  }
  const auto st = tub_stats(t);
  EXPECT_EQ(st.records, 1000u);
  EXPECT_EQ(st.modes.at("auto"), 500u);
  EXPECT_EQ(st.modes.at("user"), 500u);
  EXPECT_EQ(st.max_lap, 1);
  std::size_t hist_total = 0;
  for (auto c : st.steering_hist) hist_total += c;
  EXPECT_EQ(hist_total, 1000u);
}
