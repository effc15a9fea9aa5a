// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include <sys/wait.h>

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "nowcast/dataset.hpp"
#include "nowcast/flow.hpp"
#include "nowcast/gradcheck.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/supervision.hpp"
#include "nowcast/tpnn.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace nowcast;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::uint8_t> group_bytes(const Model& m, std::initializer_list<ParamGroup> groups) {
  std::vector<std::uint8_t> out;
  for (const auto& p : m.parameters()) {
    if (std::find(groups.begin(), groups.end(), group_of(p.name)) == groups.end()) continue;
    const auto* b = reinterpret_cast<const std::uint8_t*>(p.tensor.value().data());
    out.insert(out.end(), b, b + p.tensor.numel() * sizeof(double));
  }
  return out;
}

std::vector<EventRecord> records(const std::vector<FieldSequence>& seqs, const SplitManifest& manifest) {
  std::vector<EventRecord> out(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out[i].id = i;
    out[i].split = to_string(manifest.split_of(i));
    out[i].sequence = seqs[i];
  }
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NOWCAST_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---- 1 ---------------------------------------------------------------------

Outcome warp_identity() {
  Rng rng(101);
  const MotionField zero(64);
  const Grid no_growth(64);
  int exact = 0;
  for (int i = 0; i < 50; ++i) {
    const Grid x = testing::random_grid(rng, 64, 0.0, 100.0);
    if (warp(zero, no_growth, x) == x) ++exact;
  }
  return {exact == 50, fmt("%d/50 fields bit-exact", exact)};
}

// ---- 2 ---------------------------------------------------------------------

Outcome gradient_suite() {
  GradcheckOptions o;
  o.seed = 0;
  o.instances = 10;
  o.side = 16;
  bool ok = true;
  double worst_op = 0, worst_e2e = 0;
  std::string failed;
  for (const auto& r : run_gradcheck(o)) {
    if (r.tolerance == kEndToEndGradTolerance) worst_e2e = std::max(worst_e2e, r.max_rel_error);
    else worst_op = std::max(worst_op, r.max_rel_error);
    if (!r.passed()) {
      ok = false;
      failed += " " + r.component;
    }
  }
  return {ok, fmt("max rel err ops %.2e (< 1e-4), end-to-end %.2e (< 1e-3)%s%s", worst_op, worst_e2e,
                  failed.empty() ? "" : "; failed:", failed.c_str())};
}

// ---- 3 ---------------------------------------------------------------------

Outcome flow_recovery() {
  const auto frames = testing::translated_blob(64, 2, 31.7, 30.3, 6.0, 2.0, 0.0);
  FlowConfig lk, darts;
  lk.method = FlowMethod::LucasKanade;
  darts.method = FlowMethod::Darts;
  lk.context_frames = darts.context_frames = 2;
  const MotionField a = estimate_flow(frames, lk).motion, b = estimate_flow(frames, darts).motion;
  // Blob support: pixels at or above 1 (peak 10) in either frame.
  double err_lk = 0, err_darts = 0, cross = 0;
  int count = 0;
  for (std::size_t i = 0; i < a.u.size(); ++i) {
    if (std::max(frames[0][i], frames[1][i]) < 1.0) continue;
    err_lk += std::hypot(a.u[i] - 2.0, a.v[i]);
    err_darts += std::hypot(b.u[i] - 2.0, b.v[i]);
    cross += std::pow(a.u[i] - b.u[i], 2) + std::pow(a.v[i] - b.v[i], 2);
    ++count;
  }
  err_lk /= count;
  err_darts /= count;
  cross = std::sqrt(cross / count);
  return {err_lk < 0.25 && err_darts < 0.25 && cross < 0.3,
          fmt("mean err LK %.3f DARTS %.3f px (< 0.25), cross RMS %.3f px (< 0.3)", err_lk, err_darts, cross)};
}

// ---- 4 ---------------------------------------------------------------------

Outcome metric_oracle() {
  Rng rng(104);
  int mismatches = 0, compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Grid f = testing::random_rain(rng, 16), o = testing::random_rain(rng, 16);
    for (double t : kDefaultThresholds)
      for (int p : kDefaultPools) {
        const ConfusionCounts c = confusion(f, o, t, p), want = testing::brute_force_counts(f, o, t, p);
        ++compared;
        if (!(c == want)) ++mismatches;
        const double d_csi = want.tp + want.fp + want.fn;
        const double want_csi = d_csi > 0 ? want.tp / d_csi : 0.0;
        if (csi(c).value != want_csi || csi(c).degenerate != (d_csi == 0)) ++mismatches;
      }
  }
  // Degenerate conventions: score 0 with the flag set.
  const Score dry_csi = csi({0, 256, 0, 0}), dry_hss = hss({0, 256, 0, 0});
  const bool conventions = dry_csi.value == 0.0 && dry_csi.degenerate && dry_hss.value == 0.0 && dry_hss.degenerate &&
                           !csi({1, 0, 0, 0}).degenerate && confusion(Grid(16), Grid(16), 4.0, 4) == ConfusionCounts{0, 16, 0, 0};
  return {mismatches == 0 && conventions,
          fmt("%d/%d count+CSI mismatches, degenerate conventions %s", mismatches, compared, conventions ? "ok" : "broken")};
}

// ---- 5 ---------------------------------------------------------------------

Outcome self_consistency() {
  StormSpec spec;
  spec.n = 64;
  spec.frames = 4;
  spec.random_direction = true;
  spec.growth_min = -0.02;
  spec.growth_max = 0.05;
  FlowConfig cfg;
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const SyntheticStorm st = synthesize_storms(spec, 500 + i);
    const auto window = grids_of(st.sequence.frames);
    const std::span<const Grid> flow_window(window.data() + 1, 3);
    const SupervisionPair p = derive_targets(flow_window, cfg, kDefaultCropMargin);
    const Grid rebuilt = warp(p.motion_target, p.intensity_target.values, window[2]);
    const CropRegion crop = crop_region(64, p.crop_margin);
    for (int r = crop.begin; r < crop.end; ++r)
      for (int c = crop.begin; c < crop.end; ++c)
        worst = std::max(worst, std::abs(rebuilt(r, c) - window[3](r, c)) / std::max(1.0, std::abs(window[3](r, c))));
  }
  return {worst <= 1e-12, fmt("20 windows, max rel deviation %.2e on the crop (<= 1e-12, rounding only)", worst)};
}

// ---- 6 ---------------------------------------------------------------------

Outcome event_extraction() {
  constexpr std::int64_t t0 = 1'700'000'000, hour = 3600;
  auto dry = [&](int frames) {
    return testing::make_sequence(std::vector<Grid>(static_cast<std::size_t>(frames), Grid(8)), 600, t0);
  };
  auto add = [](FieldSequence& s, std::size_t k, double mass) {
    for (auto& v : s.frames[k].values.values()) v += mass / 64.0;
  };
  const double tau = 1000;

  FieldSequence plateau = dry(145);
  for (std::size_t k = 69; k <= 75; ++k) add(plateau, k, (tau + 1) / 7);
  const auto p = extract_events(plateau, tau);
  const std::int64_t t = plateau.frames[72].timestamp;
  const bool window_ok = p.size() == 1 && p[0].start == t - 4 * hour && p[0].end == t + 4 * hour;

  FieldSequence two = dry(217);
  add(two, 60, tau + 1);
  add(two, 96, tau + 1);
  const bool merged = extract_events(two, tau).size() == 1;
  const bool none = extract_events(dry(145), tau).empty();
  return {window_ok && merged && none, fmt("spike window +-4 h %s, 6 h spikes merge %s, all-dry events %zu",
                                           window_ok ? "ok" : "wrong", merged ? "ok" : "no",
                                           extract_events(dry(145), tau).size())};
}

// ---- 7, 8 ------------------------------------------------------------------

/// Toy benchmark setup. Paper-default optimizer and loss weights; the model is
/// scaled down to run on a few CPU cores.
struct Benchmark {
  int events = 200;
  int n = 64;
  int frames = 16;
  std::uint64_t corpus_seed = 1;
  int context = 4;
  int horizon = 6;
  int channels = 8;
  int ved_steps = 1500;
  int evolver_steps = 500;
  int batch = 4;
  double lr = 1e-4;
  std::uint64_t seed = 7;
  int windows_per_event = 2;
};

struct BenchmarkRun {
  Outcome skill, freeze;
};

BenchmarkRun toy_benchmark(const Benchmark& b) {
  CorpusSpec spec;
  spec.events = b.events;
  spec.storm.n = b.n;
  spec.storm.frames = b.frames;
  spec.storm.random_direction = true;
  spec.storm.growth_min = -0.02;
  spec.storm.growth_max = 0.05;
  SplitManifest manifest;
  const auto seqs = synthesize_corpus(spec, b.corpus_seed, manifest);
  std::vector<EventRecord> events = records(seqs, manifest);

  ModelConfig mc;
  mc.context_frames = b.context;
  mc.horizon = b.horizon;
  mc.lead_time_classes = b.horizon;
  mc.channels = b.channels;
  FlowConfig targets;  // DARTS
  const auto samples = build_samples(events, "train", mc, targets, kDefaultCropMargin, b.windows_per_event);

  TrainConfig tc;
  tc.batch = b.batch;
  tc.adam.lr = b.lr;
  tc.seed = b.seed;
  tc.threads = threads_from_env();
  Model model(mc, derive_seed(b.seed, 20));
  model.set_normalization(fit_normalization(samples));
  tc.steps = b.ved_steps;
  const TrainReport ved = train_ved(model, samples, tc);

  const auto frozen = group_bytes(model, {ParamGroup::Encoder, ParamGroup::Decoder});
  const auto evolver_before = group_bytes(model, {ParamGroup::Evolver});
  tc.steps = b.evolver_steps;
  const TrainReport evo = train_evolver(model, samples, tc);
  const bool unchanged = group_bytes(model, {ParamGroup::Encoder, ParamGroup::Decoder}) == frozen;
  const bool evolver_moved = group_bytes(model, {ParamGroup::Evolver}) != evolver_before;

  FlowConfig lk;
  lk.method = FlowMethod::LucasKanade;
  const BenchmarkScores s = score_split(model, events, "test", lk, 0, tc.threads);
  const ConfusionCounts c4 = s.model.counts(1, 4.0, 1);
  const double csi4 = csi(c4).value;
  bool beats_persistence = true, matches_lk = true;
  std::string curve;
  for (int k = 1; k <= 6; ++k) {
    const double m = s.model.csi_m(k, 1), p = s.persistence.csi_m(k, 1), e = s.extrapolation.csi_m(k, 1);
    beats_persistence = beats_persistence && m > p;
    if (k >= 3) matches_lk = matches_lk && m >= e;
    curve += fmt(" %d:%.3f/%.3f/%.3f", k, m, p, e);
  }
  const bool trained = !ved.diverged && !evo.diverged;
  BenchmarkRun run;
  run.skill.pass = trained && csi4 >= 0.8 && beats_persistence && matches_lk;
  run.skill.detail = fmt("%zu train windows, %d+%d steps; CSI4 POOL1 lead1 %.3f (>= 0.8); CSI-M model/pers/LK%s; "
                         "> persistence %s, >= LK at lead>=3 %s%s",
                         samples.size(), ved.steps_completed, evo.steps_completed, csi4, curve.c_str(),
                         beats_persistence ? "yes" : "no", matches_lk ? "yes" : "no", trained ? "" : "; diverged");
  run.freeze.pass = unchanged && evolver_moved;
  run.freeze.detail = fmt("encoder+decoder bytes %s after %d evolver steps, evolver %s", unchanged ? "unchanged" : "CHANGED",
                          evo.steps_completed, evolver_moved ? "updated" : "not updated");
  return run;
}

// ---- 9 ---------------------------------------------------------------------

Outcome determinism() {
  CorpusSpec spec;
  spec.events = 12;
  spec.storm.n = 32;
  spec.storm.frames = 10;
  spec.storm.random_direction = true;
  spec.storm.center_margin = 8;
  spec.storm.sigma_min = 3;
  spec.storm.sigma_max = 5;
  SplitManifest manifest;
  const auto seqs = synthesize_corpus(spec, 9, manifest);
  std::vector<EventRecord> events = records(seqs, manifest);
  ModelConfig mc;
  mc.horizon = 4;
  mc.lead_time_classes = 4;
  mc.channels = 8;
  mc.evolver_depth = 1;
  mc.evolver_dim = 8;
  const auto samples = build_samples(events, "train", mc, FlowConfig{}, 4, 2);

  auto run = [&] {
    Model m(mc, 11);
    m.set_normalization(fit_normalization(samples));
    TrainConfig tc;
    tc.steps = 25;
    tc.batch = 4;
    tc.seed = 12;
    tc.threads = 1;
    std::ostringstream log;
    write_training_log(log, train_ved(m, samples, tc).log);
    write_training_log(log, train_evolver(m, samples, tc).log);
    const std::string s = log.str();
    return std::make_pair(fnv1a({s.begin(), s.end()}), fnv1a(encode_weights(m)));
  };
  const auto a = run(), b = run();
  return {a == b, fmt("loss log %016" PRIx64 " vs %016" PRIx64 ", weights %016" PRIx64 " vs %016" PRIx64, a.first,
                      b.first, a.second, b.second)};
}

// ---- 10 --------------------------------------------------------------------

Outcome format_round_trips() {
  const auto dir = testing::temp_dir("acceptance_formats");
  Rng rng(110);
  std::vector<Grid> grids;
  for (int k = 0; k < 4; ++k) grids.push_back(testing::random_rain(rng, 32));
  const FieldSequence seq = testing::make_sequence(grids, 600, 1'700'000'000);
  // Values pass through float32 on disk, so compare the second write with the first.
  write_sequence(seq, dir / "a.tpnn");
  write_sequence(read_sequence(dir / "a.tpnn"), dir / "b.tpnn");
  const bool tpnn = read_file_bytes(dir / "a.tpnn") == read_file_bytes(dir / "b.tpnn");

  ModelConfig mc;
  mc.context_frames = 4;
  mc.horizon = 6;
  mc.lead_time_classes = 6;
  mc.channels = 8;
  mc.evolver_dim = 8;
  Model m(mc, 3);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor.mutable_value()) v += rng.uniform(-0.1, 0.1);
  save_weights(m, dir / "a.tpnw");
  save_weights(load_weights(dir / "a.tpnw"), dir / "b.tpnw");
  const bool tpnw = read_file_bytes(dir / "a.tpnw") == read_file_bytes(dir / "b.tpnw");

  auto bytes = read_file_bytes(dir / "a.tpnn");
  bytes[1] = 'X';
  write_file_bytes(bytes, dir / "magic.tpnn");
  bytes = read_file_bytes(dir / "a.tpnn");
  bytes.resize(bytes.size() - 1);
  write_file_bytes(bytes, dir / "short.tpnn");
  bytes = read_file_bytes(dir / "a.tpnn");
  bytes.push_back(0);
  write_file_bytes(bytes, dir / "long.tpnn");
  auto w = read_file_bytes(dir / "a.tpnw");
  w[4] = 7;
  write_file_bytes(w, dir / "version.tpnw");
  w = read_file_bytes(dir / "a.tpnw");
  w.resize(w.size() - 5);
  write_file_bytes(w, dir / "short.tpnw");
  std::ofstream(dir / "bad.cfg") << "model.horizon=zero\n";

  const std::string ctx = (dir / "a.tpnn").string(), out = " --out " + (dir / "o.tpnn").string();
  struct Case {
    const char* name;
    std::string args;
    int want;
  };
  const std::vector<Case> cases{
      {"bad magic", "extract --input " + (dir / "magic.tpnn").string() + " --out " + (dir / "e.csv").string(), 2},
      {"truncated tpnn", "nowcast --weights " + (dir / "a.tpnw").string() + " --input " + (dir / "short.tpnn").string() + out, 2},
      {"trailing bytes", "nowcast --weights " + (dir / "a.tpnw").string() + " --input " + (dir / "long.tpnn").string() + out, 2},
      {"tpnw version", "nowcast --weights " + (dir / "version.tpnw").string() + " --input " + ctx + out, 2},
      {"truncated tpnw", "nowcast --weights " + (dir / "short.tpnw").string() + " --input " + ctx + out, 2},
      {"bad config", "init --config " + (dir / "bad.cfg").string() + " --weights " + (dir / "x.tpnw").string(), 3},
      {"evolver without weights", "train --stage evolver --data " + dir.string() + " --weights " + (dir / "none.tpnw").string(), 3},
      {"valid nowcast", "nowcast --weights " + (dir / "a.tpnw").string() + " --input " + ctx + out, 0},
  };
  std::string wrong;
  for (const auto& c : cases) {
    const int got = run_cli(c.args);
    if (got != c.want) wrong += fmt(" %s=%d(want %d)", c.name, got, c.want);
  }
  return {tpnn && tpnw && wrong.empty(), fmt("TPNN %s, TPNW %s, %zu exit-code fixtures%s%s", tpnn ? "identical" : "DIFFER",
                                             tpnw ? "identical" : "DIFFER", cases.size(), wrong.empty() ? " ok" : ":",
                                             wrong.c_str())};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, double limit_s, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = limit_s <= 0 || secs < limit_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::printf("%s %2d %s: %s [%.2f s%s]\n", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs,
                limit_s > 0 ? fmt(", limit %.0f s", limit_s).c_str() : "");
    std::fflush(stdout);
  };

  report(1, "warp identity", 1, warp_identity);
  report(2, "gradient suite", 120, gradient_suite);
  report(3, "flow recovery", 10, flow_recovery);
  report(4, "metric oracle", 10, metric_oracle);
  report(5, "target self-consistency", 0, self_consistency);
  report(6, "event extraction", 5, event_extraction);

  BenchmarkRun bench;
  report(7, "toy benchmark", 30 * 60, [&] {
    bench = toy_benchmark(Benchmark{});
    return bench.skill;
  });
  report(8, "freeze contract", 0, [&] { return bench.freeze; });
  report(9, "determinism", 0, determinism);
  report(10, "format round-trips", 0, format_round_trips);

  std::printf("%d/10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
