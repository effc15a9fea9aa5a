#pragma once

// Event directories and the glue between data, training and evaluation used
// by the command-line tool and the benchmark.
//
// An event directory holds manifest.csv (see write_manifest_csv) and one
// event_<id>.tpnn sequence per manifest row.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nowcast/advection.hpp"
#include "nowcast/dataset.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/model.hpp"
#include "nowcast/training.hpp"

namespace nowcast {

struct EventRecord {
  std::size_t id = 0;
  std::string split;
  RainEvent event;
  FieldSequence sequence;
};

std::filesystem::path event_file(const std::filesystem::path& dir, std::size_t id);

/// Throws FormatError (Io) when the directory or a listed file is missing.
std::vector<EventRecord> load_event_dir(const std::filesystem::path& dir);
void write_event_dir(const std::filesystem::path& dir, const std::vector<FieldSequence>& sequences,
                     const SplitManifest& manifest);

struct CorpusSpec {
  int events = 200;
  StormSpec storm;
  std::array<double, 3> fractions{0.70, 0.15, 0.15};
  // Seconds between the starts of consecutive events.
  std::int64_t event_spacing = 86400;
};

/// Synthetic advecting and growing blob events with a split manifest.
std::vector<FieldSequence> synthesize_corpus(const CorpusSpec& spec, std::uint64_t seed, SplitManifest& manifest);

/// Training windows of context_frames + horizon frames from every event of
/// one split. At most `max_windows` evenly spaced windows per event (0 = all).
std::vector<TrainingSample> build_samples(const std::vector<EventRecord>& events, const std::string& split,
                                          const ModelConfig& model, const FlowConfig& flow, int crop_margin,
                                          int max_windows = 0);

/// Forecasts of a model, persistence and flow extrapolation over the same
/// windows of one split.
struct BenchmarkScores {
  SkillTable model;
  SkillTable persistence;
  SkillTable extrapolation;
};
BenchmarkScores score_split(const Model& model, const std::vector<EventRecord>& events, const std::string& split,
                            const FlowConfig& flow, int max_windows = 0, int threads = 1);

}  // namespace nowcast
