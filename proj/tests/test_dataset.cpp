#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "nowcast/dataset.hpp"
#include "test_support.hpp"

using namespace nowcast;

namespace {

constexpr std::int64_t kHour = 3600;
constexpr std::int64_t kT0 = 1'700'000'000;

/// 10-minute sequence of `frames` dry 8x8 frames starting at kT0.
FieldSequence dry(int frames) {
  return testing::make_sequence(std::vector<Grid>(static_cast<std::size_t>(frames), Grid(8)), 600, kT0);
}

/// Spreads `mass` evenly over the pixels of frame k.
void add_mass(FieldSequence& s, std::size_t k, double mass) {
  for (auto& v : s.frames[k].values.values()) v += mass / 64.0;
}

/// Centroid of mass (row, col).
std::array<double, 2> centroid(const Grid& g) {
  double m = 0, r = 0, c = 0;
  for (int i = 0; i < g.n(); ++i)
    for (int j = 0; j < g.n(); ++j) {
      m += g(i, j);
      r += i * g(i, j);
      c += j * g(i, j);
    }
  return {r / m, c / m};
}

}  // namespace

TEST_CASE("all-dry sequence has no events") {
  CHECK(extract_events(dry(100), 1.0).empty());
  CHECK(extract_events(dry(100), 0.0).empty());  // strict >, zero does not exceed zero
}

TEST_CASE("a seven-frame plateau centered at t marks exactly t +- 4 h") {
  // Mass (tau + 1) / 7 per frame on [t - 30 min, t + 30 min]: only t itself sees
  // all seven frames, its neighbours see six sevenths of tau + 1, below tau.
  const double tau = 1000;
  FieldSequence s = dry(145);  // 24 h
  const std::size_t center = 72;
  for (std::size_t k = center - 3; k <= center + 3; ++k) add_mass(s, k, (tau + 1) / 7);
  const auto ev = extract_events(s, tau, "plateau");
  REQUIRE(ev.size() == 1);
  const std::int64_t t = s.frames[center].timestamp;
  CHECK(ev[0].start == t - 4 * kHour);
  CHECK(ev[0].end == t + 4 * kHour);
  CHECK(ev[0].source == "plateau");
  CHECK(ev[0].accumulation_peak == doctest::Approx(tau + 1));
}

TEST_CASE("a single-frame spike is seen by every window that contains it") {
  // Windows centered within 30 min of the spike all exceed tau, so the
  // marked span widens to t +- 4.5 h.
  const double tau = 1000;
  FieldSequence s = dry(145);
  add_mass(s, 72, tau + 1);
  const auto ev = extract_events(s, tau);
  REQUIRE(ev.size() == 1);
  const std::int64_t t = s.frames[72].timestamp;
  CHECK(ev[0].start == t - 4 * kHour - 30 * 60);
  CHECK(ev[0].end == t + 4 * kHour + 30 * 60);
}

TEST_CASE("accumulation must strictly exceed tau") {
  FieldSequence s = dry(73);
  add_mass(s, 36, 64.0);  // exactly representable per pixel
  CHECK(extract_events(s, 64.0).empty());
  CHECK(extract_events(s, std::nextafter(64.0, 0.0)).size() == 1);
}

TEST_CASE("spikes 6 h apart merge, 10 h apart stay separate") {
  FieldSequence s = dry(217);  // 36 h
  add_mass(s, 60, 10);
  add_mass(s, 96, 10);
  const auto merged = extract_events(s, 5);
  REQUIRE(merged.size() == 1);
  CHECK(merged[0].start == s.frames[60].timestamp - 4 * kHour - 1800);
  CHECK(merged[0].end == s.frames[96].timestamp + 4 * kHour + 1800);

  FieldSequence far = dry(217);
  add_mass(far, 60, 10);
  add_mass(far, 120, 10);
  const auto apart = extract_events(far, 5);
  REQUIRE(apart.size() == 2);
  CHECK(apart[0].end < apart[1].start);
}

TEST_CASE("events clip to the sequence and ignore leading dry padding") {
  FieldSequence s = dry(30);
  add_mass(s, 5, 10);
  const auto ev = extract_events(s, 5);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0].start == kT0);
  CHECK(ev[0].end == s.frames.back().timestamp);

  // Padding with dry frames in front changes nothing once clipping is out of play.
  FieldSequence a = dry(120);
  add_mass(a, 60, 10);
  FieldSequence b = testing::make_sequence(std::vector<Grid>(150, Grid(8)), 600, kT0 - 30 * 600);
  add_mass(b, 90, 10);
  CHECK(extract_events(a, 5) == extract_events(b, 5));
}

TEST_CASE("extraction requires a 10-minute cadence") {
  FieldSequence s = testing::make_sequence({Grid(8), Grid(8)}, 1800);
  CHECK_THROWS_AS(extract_events(s, 1.0), InvalidArgument);
}

TEST_CASE("split sizes use largest-remainder rounding") {
  const SplitManifest m = split_events(20);
  CHECK(m.train.size() == 14);
  CHECK(m.validation.size() == 3);
  CHECK(m.test.size() == 3);
  const SplitManifest odd = split_events(7);
  CHECK(odd.train.size() + odd.validation.size() + odd.test.size() == 7);
  CHECK(odd.train.size() == 5);
  CHECK_THROWS_AS(split_events(2), InvalidArgument);
  CHECK_THROWS_AS(split_events(20, {0.5, 0.5, 0.5}), InvalidArgument);
}

TEST_CASE("splits are disjoint, complete and seed-determined") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SplitManifest m = split_events(37, {0.7, 0.15, 0.15}, seed);
    std::set<std::size_t> all;
    for (auto s : {Split::Train, Split::Validation, Split::Test})
      for (auto i : m.members(s)) {
        CHECK(all.insert(i).second);
        CHECK(m.split_of(i) == s);
      }
    CHECK(all.size() == 37);
  }
  CHECK(split_events(37, {0.7, 0.15, 0.15}, 5).train == split_events(37, {0.7, 0.15, 0.15}, 5).train);
  CHECK(split_events(37, {0.7, 0.15, 0.15}, 5).train != split_events(37, {0.7, 0.15, 0.15}, 6).train);
  CHECK_THROWS_AS(split_events(10).split_of(10), InvalidArgument);
}

TEST_CASE("manifest csv round trip") {
  std::vector<RainEvent> events{{100, 200, "", 1.5e5}, {300, 900, "", 2.25e5}};
  const SplitManifest m = split_events(2, {0.5, 0.5, 0.0}, 1);
  std::stringstream ss;
  write_manifest_csv(ss, events, &m);
  CHECK(ss.str().rfind("event_id,start_unix,end_unix,peak_accum,split\n", 0) == 0);
  const auto rows = read_manifest_csv(ss);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].event.start == 300);
  CHECK(rows[1].event.end == 900);
  CHECK(rows[1].event.accumulation_peak == 2.25e5);
  CHECK(rows[0].split == to_string(m.split_of(0)));

  std::stringstream bad("event_id,start_unix,end_unix,peak_accum,split\n0,1,x,3,train\n");
  CHECK_THROWS_AS(read_manifest_csv(bad), InvalidArgument);
  std::stringstream headless("0,1,2,3,train\n");
  CHECK_THROWS_AS(read_manifest_csv(headless), InvalidArgument);
}

TEST_CASE("window counts follow the closed form") {
  CHECK(window_count(10, 4, 6) == 1);
  CHECK(window_count(9, 4, 6) == 0);
  CHECK(window_count(25, 4, 6) == 16);

  // Events of 10, 9 and 25 frames within one 12 h sequence.
  FieldSequence s = dry(73);
  auto at = [&](std::size_t k) { return s.frames[k].timestamp; };
  const std::vector<RainEvent> events{{at(0), at(9), "", 0}, {at(12), at(20), "", 0}, {at(30), at(54), "", 0}};
  std::vector<std::string> logs;
  const auto w = sample_windows(s, events, {0, 1, 2}, 4, 6, [&](std::string_view m) { logs.emplace_back(m); });
  CHECK(w.size() == 1 + 0 + 16);
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].find("event 1") != std::string::npos);
  for (const auto& win : w) {
    const auto& ev = events[win.event_index];
    CHECK(at(win.first_frame) >= ev.start);
    CHECK(at(win.first_frame + 9) <= ev.end);
  }
  // Selecting a subset never yields windows from other events.
  for (const auto& win : sample_windows(s, events, {2}, 4, 6)) CHECK(win.event_index == 2);
}

TEST_CASE("a static storm repeats its first frame") {
  StormSpec spec;
  spec.flow_u = spec.flow_v = 0;
  spec.frames = 5;
  const SyntheticStorm st = synthesize_storms(spec, 3);
  for (const auto& f : st.sequence.frames) CHECK(f.values == st.sequence.frames[0].values);
}

TEST_CASE("storm blobs move with the specified flow") {
  StormSpec spec;
  spec.blob_count = 1;
  spec.sigma_min = spec.sigma_max = 4.0;
  spec.frames = 6;
  spec.center_margin = 24;
  spec.flow_u = 1.5;
  spec.flow_v = -0.5;
  const SyntheticStorm st = synthesize_storms(spec, 4);
  for (int k = 1; k < spec.frames; ++k) {
    const auto a = centroid(st.sequence.frames[k - 1].values), b = centroid(st.sequence.frames[k].values);
    CHECK(std::abs(b[1] - a[1] - 1.5) < 0.05);
    CHECK(std::abs(b[0] - a[0] + 0.5) < 0.05);
  }
  CHECK(st.truth_motion.size() == 5);
  CHECK(st.truth_motion[0].u(3, 3) == 1.5);
}

TEST_CASE("storm amplitude grows by 1 + g per step") {
  StormSpec spec;
  spec.blob_count = 1;
  spec.flow_u = spec.flow_v = 0;
  spec.growth_min = spec.growth_max = 0.07;
  spec.frames = 5;
  const SyntheticStorm st = synthesize_storms(spec, 5);
  auto peak = [](const Grid& g) { return *std::max_element(g.values().begin(), g.values().end()); };
  for (int k = 1; k < spec.frames; ++k)
    CHECK(peak(st.sequence.frames[k].values) / peak(st.sequence.frames[k - 1].values) ==
          doctest::Approx(1.07).epsilon(1e-6));
}

TEST_CASE("storm truth fields reproduce the next frame through the warp") {
  StormSpec spec;
  spec.flow = StormFlow::Rotational;
  spec.growth_min = -0.02;
  spec.growth_max = 0.05;
  const SyntheticStorm st = synthesize_storms(spec, 6);
  for (std::size_t k = 0; k + 1 < st.sequence.size(); ++k) {
    const Grid next = warp(st.truth_motion[k], st.truth_intensity[k].values, st.sequence.frames[k].values);
    for (std::size_t i = 0; i < next.size(); ++i)
      CHECK(next[i] == doctest::Approx(st.sequence.frames[k + 1].values[i]).epsilon(1e-12).scale(1e-12));
  }
}

TEST_CASE("synthetic translation is recovered by target derivation") {
  StormSpec spec;
  spec.blob_count = 2;
  spec.frames = 3;
  spec.flow_u = 1.2;
  spec.flow_v = 0.8;
  const SyntheticStorm st = synthesize_storms(spec, 7);
  const auto grids = grids_of(st.sequence.frames);
  FlowConfig cfg;
  double se = 0;
  int count = 0;
  const auto motion = estimate_flow(grids, cfg).motion;
  for (std::size_t i = 0; i < motion.u.size(); ++i) {
    if (std::max(grids[1][i], grids[2][i]) < 1.0) continue;
    se += std::pow(motion.u[i] - 1.2, 2) + std::pow(motion.v[i] - 0.8, 2);
    ++count;
  }
  REQUIRE(count > 0);
  CHECK(std::sqrt(se / count) < 0.25);
}
