#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <sstream>

#include "difflob/error.hpp"
#include "difflob/ingest.hpp"
#include "difflob/preprocess.hpp"
#include "difflob/regimes.hpp"

namespace difflob {
namespace {

LobSnapshot book(double t, double ask, double bid, double av = 10, double bv = 10) {
  return {t, {ask}, {av}, {bid}, {bv}};
}

TEST(ParseLobster, HandTracedRow) {
  std::istringstream ob("1000100,50,1000000,60\n");
  std::istringstream msg("34200.5,1,17,50,1000100,-1\n");
  const auto parsed = parse_lobster(ob, &msg, 1);
  ASSERT_EQ(parsed.snapshots.size(), 1u);
  const auto& s = parsed.snapshots[0];
  EXPECT_DOUBLE_EQ(s.timestamp, 34200.5);
  EXPECT_EQ(s.ask_price, std::vector<double>{1000100});
  EXPECT_EQ(s.ask_volume, std::vector<double>{50});
  EXPECT_EQ(s.bid_price, std::vector<double>{1000000});
  EXPECT_EQ(s.bid_volume, std::vector<double>{60});
}

TEST(ParseLobster, RowIndexWithoutMessageFile) {
  std::istringstream ob("1000100,50,1000000,60\n1000200,5,1000000,6\n");
  const auto parsed = parse_lobster(ob, nullptr, 1);
  ASSERT_EQ(parsed.snapshots.size(), 2u);
  EXPECT_EQ(parsed.snapshots[0].timestamp, 0.0);
  EXPECT_EQ(parsed.snapshots[1].timestamp, 1.0);
}

TEST(ParseLobster, EmptyFileIsAParseError) {
  std::istringstream ob("");
  try {
    parse_lobster(ob, nullptr, 1);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("no rows"), std::string::npos);
  }
}

TEST(ParseLobster, CrossedRowIsDroppedAndCounted) {
  std::istringstream ob("1000000,50,1000000,60\n1000100,50,1000000,60\n");
  const auto parsed = parse_lobster(ob, nullptr, 1);
  EXPECT_EQ(parsed.crossed_dropped, 1u);
  EXPECT_EQ(parsed.snapshots.size(), 1u);
}

TEST(ParseLobster, MalformedRowsReportTheirRow) {
  std::istringstream wrong_width("1000100,50,1000000,60\n1000100,50,1000000\n");
  try {
    parse_lobster(wrong_width, nullptr, 1);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 2u);
  }
  std::istringstream non_numeric("1000100,abc,1000000,60\n");
  try {
    parse_lobster(non_numeric, nullptr, 1);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 1u);
  }
}

TEST(SampleOneHz, CarriesTheLastEventForward) {
  const std::vector<LobSnapshot> events{book(34200.2, 1000100, 1000000), book(34201.7, 1000200, 1000000)};
  const auto s = sample_one_hz(events, 34200, 34203);
  ASSERT_EQ(s.snapshots.size(), 3u);
  EXPECT_EQ(s.snapshots[0].ask_price[0], 1000100);
  EXPECT_EQ(s.snapshots[1].ask_price[0], 1000100);
  EXPECT_EQ(s.snapshots[2].ask_price[0], 1000200);
  EXPECT_EQ(s.snapshots[0].timestamp, 34200);
  EXPECT_EQ(s.snapshots[2].timestamp, 34202);
}

TEST(SampleOneHz, LaterEventsWaitForTheirSecond) {
  const std::vector<LobSnapshot> events{book(10.0, 1000100, 1000000), book(11.5, 1000200, 1000000),
                                        book(11.9, 1000300, 1000000), book(13.0, 1000400, 1000000)};
  const auto s = sample_one_hz(events, 10, 14);
  ASSERT_EQ(s.snapshots.size(), 4u);
  EXPECT_EQ(s.snapshots[1].ask_price[0], 1000100);
  EXPECT_EQ(s.snapshots[2].ask_price[0], 1000300);
  EXPECT_EQ(s.snapshots[3].ask_price[0], 1000400);
}

TEST(SampleOneHz, SkipsSecondsBeforeTheFirstEvent) {
  const auto s = sample_one_hz({book(12.5, 1000100, 1000000)}, 10, 15);
  ASSERT_EQ(s.snapshots.size(), 3u);
  EXPECT_EQ(s.snapshots.front().timestamp, 12);
}

TEST(SampleOneHz, SingleEventFillsTheWindow) {
  const auto s = sample_one_hz({book(34200.0, 1000100, 1000000)}, 34200, 34202);
  ASSERT_EQ(s.snapshots.size(), 2u);
  EXPECT_EQ(s.snapshots[0].ask_price, s.snapshots[1].ask_price);
}

TEST(SampleOneHz, EventsAfterCloseMeanEmptySession) {
  EXPECT_THROW(sample_one_hz({book(40000, 1000100, 1000000)}, 34200, 34202), DataError);
  EXPECT_THROW(sample_one_hz({}, 34200, 34202), DataError);
}

TEST(SampleOneHz, IdempotentOnOneHzInput) {
  SynthConfig c;
  c.n_seconds = 200;
  c.levels = 3;
  const auto s = synthesize_lob(c);
  const auto again = sample_one_hz(s.snapshots, s.session_open, s.session_close);
  EXPECT_EQ(again.snapshots, s.snapshots);
  EXPECT_EQ(again.snapshots.size(), 200u);
}

TEST(LobsterCsv, WriteThenParseRoundTrips) {
  SynthConfig c;
  c.n_seconds = 300;
  c.levels = 4;
  const auto s = synthesize_lob(c);
  std::ostringstream ob, msg;
  write_lobster(s, ob, msg);
  std::istringstream ob_in(ob.str()), msg_in(msg.str());
  const auto parsed = parse_lobster(ob_in, &msg_in, 4);
  const auto back = sample_one_hz(parsed.snapshots, s.session_open, s.session_close);
  EXPECT_EQ(back.snapshots, s.snapshots);
}

TEST(SeriesStore, SaveLoadRoundTrips) {
  SynthConfig c;
  c.n_seconds = 120;
  c.levels = 3;
  const auto s = synthesize_lob(c);
  const auto dir = std::filesystem::temp_directory_path() / "difflob_series_test";
  std::filesystem::remove_all(dir);
  save_series(s, dir);
  EXPECT_EQ(load_series(dir), s);
  std::filesystem::remove_all(dir);
}

TEST(Synthesize, DeterministicPerSeed) {
  SynthConfig c;
  c.n_seconds = 500;
  EXPECT_EQ(synthesize_lob(c), synthesize_lob(c));
  SynthConfig d = c;
  d.seed = c.seed + 1;
  EXPECT_NE(synthesize_lob(c).snapshots, synthesize_lob(d).snapshots);
}

TEST(Synthesize, SatisfiesBookInvariants) {
  SynthConfig c;
  c.n_seconds = 3000;
  c.vol = 400;  // frequent wide spreads
  const auto s = synthesize_lob(c);
  for (std::size_t i = 0; i < s.snapshots.size(); ++i) {
    const auto& b = s.snapshots[i];
    ASSERT_FALSE(check_snapshot(b)) << *check_snapshot(b);
    ASSERT_GE(b.ask_price[0] - b.bid_price[0], c.tick);
    if (i) {
      ASSERT_DOUBLE_EQ(b.timestamp - s.snapshots[i - 1].timestamp, 1.0);
    }
  }
}

TEST(Synthesize, RejectsInvalidConfig) {
  SynthConfig c;
  c.vol = 0;
  EXPECT_THROW(synthesize_lob(c), ConfigError);
  c = {};
  c.imbalance_bias = 1.0;
  EXPECT_THROW(synthesize_lob(c), ConfigError);
  c = {};
  c.base_depth = -1;
  EXPECT_THROW(synthesize_lob(c), ConfigError);
}

struct WindowStats {
  double mean = 0, se = 0;
};

// Component summary over non-overlapping 64-step windows.
WindowStats window_stats(const SnapshotSeries& s, RegimeComponent c) {
  std::vector<double> v;
  for (std::size_t start = 0; start + 64 < s.snapshots.size(); start += 64) {
    const double anchor = mid_price(s.snapshots[start + 31]);
    const std::span<const LobSnapshot> fut(s.snapshots.data() + start + 32, 32);
    v.push_back(component_summary(compute_regime(anchor, fut), c));
  }
  WindowStats w;
  w.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - w.mean) * (x - w.mean);
  w.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return w;
}

TEST(Synthesize, NeutralDriftGivesZeroMeanTrend) {
  SynthConfig c;
  c.n_seconds = 64 * 600;
  c.vol = 20;
  c.drift_swing = 0;
  const auto w = window_stats(synthesize_lob(c), RegimeComponent::trend);
  EXPECT_LT(std::abs(w.mean), 3 * w.se);
}

TEST(Synthesize, NeutralBiasGivesZeroMeanImbalance) {
  SynthConfig c;
  c.n_seconds = 64 * 600;
  c.imbalance_swing = 0;
  const auto w = window_stats(synthesize_lob(c), RegimeComponent::imb);
  EXPECT_LT(std::abs(w.mean), 3 * w.se);
}

// Each knob shifts its realized regime in the same direction (common seed).
TEST(Synthesize, RegimesRespondMonotonicallyToTheirKnobs) {
  SynthConfig base;
  base.n_seconds = 64 * 500;
  auto mean_of = [](SynthConfig c, RegimeComponent comp) { return window_stats(synthesize_lob(c), comp).mean; };
  for (double step : {5.0, 20.0}) {
    SynthConfig up = base;
    up.drift = base.drift + step;
    EXPECT_GT(mean_of(up, RegimeComponent::trend), mean_of(base, RegimeComponent::trend));
  }
  SynthConfig hv = base;
  hv.vol = base.vol * 1.5;
  EXPECT_GT(mean_of(hv, RegimeComponent::vol), mean_of(base, RegimeComponent::vol));
  SynthConfig deep = base;
  deep.base_depth = base.base_depth * 1.5;
  EXPECT_GT(mean_of(deep, RegimeComponent::liq), mean_of(base, RegimeComponent::liq));
  SynthConfig ask_heavy = base;
  ask_heavy.imbalance_bias = 0.3;
  EXPECT_GT(mean_of(ask_heavy, RegimeComponent::imb), mean_of(base, RegimeComponent::imb));
}

}  // namespace
}  // namespace difflob
