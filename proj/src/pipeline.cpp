#include "nowcast/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <thread>

#include "nowcast/tpnn.hpp"

namespace nowcast {

namespace {

/// Largest summed mass over 7 consecutive frames.
double peak_accumulation(const FieldSequence& seq) {
  std::vector<double> mass;
  for (const auto& f : seq.frames) {
    double s = 0.0;
    for (double v : f.values.values()) s += v;
    mass.push_back(s);
  }
  double peak = 0.0;
  for (std::size_t t = 0; t < mass.size(); ++t) {
    double s = 0.0;
    for (std::size_t j = t; j < std::min(mass.size(), t + 7); ++j) s += mass[j];
    peak = std::max(peak, s);
  }
  return peak;
}

/// Evenly spaced window starts in a run of `frames` frames.
std::vector<std::size_t> window_starts(std::size_t frames, int span, int max_windows) {
  std::vector<std::size_t> starts;
  if (frames < static_cast<std::size_t>(span)) return starts;
  const std::size_t count = frames - static_cast<std::size_t>(span) + 1;
  if (max_windows <= 0 || count <= static_cast<std::size_t>(max_windows)) {
    for (std::size_t s = 0; s < count; ++s) starts.push_back(s);
    return starts;
  }
  if (max_windows == 1) return {0};
  for (int i = 0; i < max_windows; ++i)
    starts.push_back(static_cast<std::size_t>(i) * (count - 1) / static_cast<std::size_t>(max_windows - 1));
  return starts;
}

}  // namespace

std::filesystem::path event_file(const std::filesystem::path& dir, std::size_t id) {
  char name[32];
  std::snprintf(name, sizeof name, "event_%04zu.tpnn", id);
  return dir / name;
}

std::vector<EventRecord> load_event_dir(const std::filesystem::path& dir) {
  using K = FormatError::Kind;
  if (!std::filesystem::is_directory(dir)) throw FormatError(K::Io, 0, "data directory " + dir.string() + " not found");
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw FormatError(K::Io, 0, "cannot open " + (dir / "manifest.csv").string());
  std::vector<ManifestRow> rows;
  try {
    rows = read_manifest_csv(in);
  } catch (const InvalidArgument& e) {
    throw FormatError(K::Malformed, 0, (dir / "manifest.csv").string() + ": " + e.what());
  }
  std::vector<EventRecord> out;
  for (const auto& r : rows) {
    EventRecord rec;
    rec.id = r.event_id;
    rec.split = r.split;
    rec.event = r.event;
    rec.sequence = read_sequence(event_file(dir, r.event_id));
    out.push_back(std::move(rec));
  }
  return out;
}

void write_event_dir(const std::filesystem::path& dir, const std::vector<FieldSequence>& sequences,
                     const SplitManifest& manifest) {
  std::filesystem::create_directories(dir);
  std::vector<RainEvent> events;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    events.push_back({s.frames.front().timestamp, s.frames.back().timestamp, event_file(dir, i).filename().string(),
                      peak_accumulation(s)});
    write_sequence(s, event_file(dir, i));
  }
  std::ofstream os(dir / "manifest.csv");
  if (!os) throw FormatError(FormatError::Kind::Io, 0, "cannot write " + (dir / "manifest.csv").string());
  write_manifest_csv(os, events, &manifest);
}

std::vector<FieldSequence> synthesize_corpus(const CorpusSpec& spec, std::uint64_t seed, SplitManifest& manifest) {
  if (spec.events < 1) throw InvalidArgument("corpus needs at least one event");
  std::vector<FieldSequence> out;
  for (int i = 0; i < spec.events; ++i) {
    StormSpec s = spec.storm;
    s.start_time = spec.storm.start_time + static_cast<std::int64_t>(i) * spec.event_spacing;
    out.push_back(synthesize_storms(s, derive_seed(seed, 10, static_cast<std::uint64_t>(i))).sequence);
  }
  manifest = split_events(out.size(), spec.fractions, derive_seed(seed, 11));
  return out;
}

std::vector<TrainingSample> build_samples(const std::vector<EventRecord>& events, const std::string& split,
                                          const ModelConfig& model, const FlowConfig& flow, int crop_margin,
                                          int max_windows) {
  const int span = model.context_frames + model.horizon;
  std::vector<TrainingSample> out;
  for (const auto& e : events) {
    if (e.split != split) continue;
    const auto grids = grids_of(e.sequence.frames);
    for (std::size_t s : window_starts(grids.size(), span, max_windows))
      out.push_back(make_training_sample(std::span<const Grid>(grids).subspan(s, static_cast<std::size_t>(span)),
                                         model.context_frames, flow, crop_margin));
  }
  return out;
}

BenchmarkScores score_split(const Model& model, const std::vector<EventRecord>& events, const std::string& split,
                            const FlowConfig& flow, int max_windows, int threads) {
  const ModelConfig& cfg = model.config();
  const int span = cfg.context_frames + cfg.horizon;
  struct Job {
    const EventRecord* event;
    std::size_t start;
  };
  std::vector<Job> jobs;
  std::int64_t step = 600;
  for (const auto& e : events) {
    if (e.split != split) continue;
    step = e.sequence.step_seconds;
    for (std::size_t s : window_starts(e.sequence.size(), span, max_windows)) jobs.push_back({&e, s});
  }

  const int workers = std::clamp(threads, 1, std::max<int>(1, static_cast<int>(jobs.size())));
  std::vector<BenchmarkScores> partial(static_cast<std::size_t>(workers),
                                       BenchmarkScores{SkillTable({kDefaultThresholds.begin(), kDefaultThresholds.end()},
                                                                  {kDefaultPools.begin(), kDefaultPools.end()}, step),
                                                       SkillTable({kDefaultThresholds.begin(), kDefaultThresholds.end()},
                                                                  {kDefaultPools.begin(), kDefaultPools.end()}, step),
                                                       SkillTable({kDefaultThresholds.begin(), kDefaultThresholds.end()},
                                                                  {kDefaultPools.begin(), kDefaultPools.end()}, step)});
  auto work = [&](int w) {
    auto& acc = partial[static_cast<std::size_t>(w)];
    for (std::size_t j = static_cast<std::size_t>(w); j < jobs.size(); j += static_cast<std::size_t>(workers)) {
      const auto& seq = jobs[j].event->sequence;
      FieldSequence context;
      context.step_seconds = seq.step_seconds;
      const auto first = seq.frames.begin() + static_cast<std::ptrdiff_t>(jobs[j].start);
      context.frames.assign(first, first + cfg.context_frames);
      const auto truth = first + cfg.context_frames;

      const NowcastOutput pred = model.nowcast(context);
      const auto pers = persistence(context, cfg.horizon);
      const auto extr = extrapolate(context, flow, cfg.horizon);
      for (int k = 1; k <= cfg.horizon; ++k) {
        const Grid& obs = (truth + (k - 1))->values;
        acc.model.add(k, pred.frames[static_cast<std::size_t>(k - 1)].values, obs);
        acc.persistence.add(k, pers[static_cast<std::size_t>(k - 1)].values, obs);
        acc.extrapolation.add(k, extr[static_cast<std::size_t>(k - 1)].values, obs);
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  // Counts are integers, so merging order does not change the result.
  BenchmarkScores out = std::move(partial.front());
  for (std::size_t w = 1; w < partial.size(); ++w) {
    out.model.merge(partial[w].model);
    out.persistence.merge(partial[w].persistence);
    out.extrapolation.merge(partial[w].extrapolation);
  }
  return out;
}

}  // namespace nowcast
