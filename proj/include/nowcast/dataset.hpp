#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "nowcast/field.hpp"

namespace nowcast {

inline constexpr double kDefaultEventTau = 120000.0;
inline constexpr std::int64_t kEventCadenceSeconds = 600;
inline constexpr std::int64_t kAccumulationHalfWindow = 30 * 60;
inline constexpr std::int64_t kEventHalfWindow = 4 * 3600;

struct RainEvent {
  std::int64_t start = 0;
  std::int64_t end = 0;
  std::string source;
  double accumulation_peak = 0.0;

  bool operator==(const RainEvent&) const = default;
};

/// Rainy windows: every timestamp whose accumulation over the 7 frames of
/// [t - 30 min, t + 30 min] (summed over all pixels) exceeds tau marks
/// [t - 4 h, t + 4 h]; intersecting windows are merged and clipped to the
/// sequence. Requires a 10-minute cadence.
std::vector<RainEvent> extract_events(const FieldSequence& seq, double tau, const std::string& source = "");

enum class Split { Train, Validation, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct SplitManifest {
  // Indices into the event list the manifest was built from.
  std::vector<std::size_t> train, validation, test;
  std::array<double, 3> fractions{0.70, 0.15, 0.15};
  std::uint64_t seed = 0;

  const std::vector<std::size_t>& members(Split s) const;
  /// Split of one event index; throws when the index is not in the manifest.
  Split split_of(std::size_t event_index) const;
};

/// Random assignment by event. Sizes use largest-remainder rounding.
SplitManifest split_events(std::size_t event_count, std::array<double, 3> fractions = {0.70, 0.15, 0.15},
                           std::uint64_t seed = 0);

/// Columns: event_id,start_unix,end_unix,peak_accum,split.
void write_manifest_csv(std::ostream& os, const std::vector<RainEvent>& events, const SplitManifest* manifest);
struct ManifestRow {
  std::size_t event_id = 0;
  RainEvent event;
  std::string split;
};
std::vector<ManifestRow> read_manifest_csv(std::istream& is);

/// A training window: frames [first_frame, first_frame + context + horizon).
struct Window {
  std::size_t event_index = 0;
  std::size_t first_frame = 0;
};

using LogSink = std::function<void(std::string_view)>;

/// Every window lying wholly inside one of the selected events of `seq`.
/// Events too short to hold a window are skipped with a log line.
std::vector<Window> sample_windows(const FieldSequence& seq, const std::vector<RainEvent>& events,
                                   const std::vector<std::size_t>& selected, int context, int horizon,
                                   const LogSink& log = {});

/// Number of windows in a run of `frames` consecutive frames.
std::size_t window_count(std::size_t frames, int context, int horizon);

enum class StormFlow { Constant, Rotational };

struct StormSpec {
  int n = 64;
  int frames = 16;
  std::int64_t step_seconds = 600;
  std::int64_t start_time = 0;
  int blob_count = 2;
  double amplitude_min = 10.0, amplitude_max = 40.0;  // mm/h
  double sigma_min = 4.0, sigma_max = 8.0;            // px
  // Blob centers start at least this far from the border.
  double center_margin = 16.0;
  StormFlow flow = StormFlow::Constant;
  // Constant flow: fixed (flow_u, flow_v) unless random_direction is set, in
  // which case a direction is drawn and the speed comes from [speed_min, speed_max].
  double flow_u = 1.0, flow_v = 0.0;
  bool random_direction = false;
  double speed_min = 0.5, speed_max = 2.0;
  // Rotational flow about the domain center, radians per step.
  double rotation_rate = 0.02;
  // Per-blob amplitude growth per step; amplitude(t) = A (1 + g)^t.
  double growth_min = 0.0, growth_max = 0.0;
};

struct Blob {
  double row = 0, col = 0;  // center at frame 0
  double amplitude = 0;
  double sigma = 0;
  double growth = 0;
};

struct SyntheticStorm {
  FieldSequence sequence;
  std::vector<Blob> blobs;
  double flow_u = 0, flow_v = 0;  // constant-flow case
  // truth_motion[k] / truth_intensity[k] take frame k to frame k + 1.
  std::vector<MotionField> truth_motion;
  std::vector<IntensityField> truth_intensity;
};

/// Analytic Gaussian blobs advected by a known flow with known growth.
SyntheticStorm synthesize_storms(const StormSpec& spec, std::uint64_t seed);

}  // namespace nowcast
