#include "nowcast/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "nowcast/advection.hpp"
#include "nowcast/random.hpp"

namespace nowcast {

std::vector<RainEvent> extract_events(const FieldSequence& seq, double tau, const std::string& source) {
  seq.validate();
  if (seq.step_seconds != kEventCadenceSeconds)
    throw InvalidArgument("extract_events: cadence must be 600 s, got " + std::to_string(seq.step_seconds));
  if (!std::isfinite(tau) || tau < 0) throw InvalidArgument("extract_events: tau must be finite and >= 0");

  const std::size_t T = seq.size();
  const std::int64_t reach = kAccumulationHalfWindow / seq.step_seconds;  // 3 frames each side
  std::vector<double> frame_sum(T);
  for (std::size_t k = 0; k < T; ++k) {
    const auto v = seq.frames[k].values.values();
    frame_sum[k] = std::accumulate(v.begin(), v.end(), 0.0);
  }
  const std::int64_t first = seq.frames.front().timestamp;
  const std::int64_t last = seq.frames.back().timestamp;

  std::vector<RainEvent> events;
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t lo = k >= static_cast<std::size_t>(reach) ? k - reach : 0;
    const std::size_t hi = std::min(T - 1, k + reach);
    double acc = 0;
    for (std::size_t j = lo; j <= hi; ++j) acc += frame_sum[j];
    if (!(acc > tau)) continue;

    const std::int64_t t = seq.frames[k].timestamp;
    RainEvent ev{std::max(first, t - kEventHalfWindow), std::min(last, t + kEventHalfWindow), source, acc};
    if (!events.empty() && ev.start <= events.back().end) {
      auto& cur = events.back();
      cur.end = std::max(cur.end, ev.end);
      cur.accumulation_peak = std::max(cur.accumulation_peak, acc);
    } else {
      events.push_back(std::move(ev));
    }
  }
  return events;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  throw InvalidArgument("unknown split '" + std::string(s) + "'");
}

const std::vector<std::size_t>& SplitManifest::members(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Validation: return validation;
    case Split::Test: return test;
  }
  return train;
}

Split SplitManifest::split_of(std::size_t idx) const {
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    const auto& m = members(s);
    if (std::find(m.begin(), m.end(), idx) != m.end()) return s;
  }
  throw InvalidArgument("event " + std::to_string(idx) + " is not in the manifest");
}

SplitManifest split_events(std::size_t event_count, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw InvalidArgument("split_events: fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("split_events: fractions must sum to 1");
  const auto nonzero = static_cast<std::size_t>(std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0; }));
  if (event_count < nonzero)
    throw InvalidArgument("split_events: " + std::to_string(event_count) + " events cannot fill " +
                          std::to_string(nonzero) + " splits");

  // Largest-remainder rounding; ties go to the earlier split.
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(event_count);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; assigned < event_count; k = (k + 1) % 3, ++assigned) ++sizes[order[k]];

  std::vector<std::size_t> perm(event_count);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = event_count; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);

  SplitManifest m;
  m.fractions = fractions;
  m.seed = seed;
  auto it = perm.begin();
  for (auto* dst : {&m.train, &m.validation, &m.test}) {
    const std::size_t k = sizes[dst == &m.train ? 0 : dst == &m.validation ? 1 : 2];
    dst->assign(it, it + static_cast<std::ptrdiff_t>(k));
    std::sort(dst->begin(), dst->end());
    it += static_cast<std::ptrdiff_t>(k);
  }
  return m;
}

void write_manifest_csv(std::ostream& os, const std::vector<RainEvent>& events, const SplitManifest* manifest) {
  os << "event_id,start_unix,end_unix,peak_accum,split\n";
  char buf[64];
  for (std::size_t i = 0; i < events.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6g", events[i].accumulation_peak);
    os << i << ',' << events[i].start << ',' << events[i].end << ',' << buf << ','
       << (manifest ? to_string(manifest->split_of(i)) : std::string_view{}) << '\n';
  }
}

std::vector<ManifestRow> read_manifest_csv(std::istream& is) {
  std::vector<ManifestRow> rows;
  std::string line;
  if (!std::getline(is, line) || line.rfind("event_id,start_unix,end_unix,peak_accum,split", 0) != 0)
    throw InvalidArgument("manifest: missing or unexpected header");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw InvalidArgument("manifest: line " + std::to_string(lineno) + " needs 5 columns");
    try {
      ManifestRow r;
      r.event_id = std::stoull(f[0]);
      r.event.start = std::stoll(f[1]);
      r.event.end = std::stoll(f[2]);
      r.event.accumulation_peak = std::stod(f[3]);
      r.split = f[4];
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw InvalidArgument("manifest: malformed number on line " + std::to_string(lineno));
    }
  }
  return rows;
}

std::size_t window_count(std::size_t frames, int context, int horizon) {
  const std::size_t span = static_cast<std::size_t>(context + horizon);
  return frames >= span ? frames - span + 1 : 0;
}

std::vector<Window> sample_windows(const FieldSequence& seq, const std::vector<RainEvent>& events,
                                   const std::vector<std::size_t>& selected, int context, int horizon,
                                   const LogSink& log) {
  if (context < 1 || horizon < 1) throw InvalidArgument("sample_windows: context and horizon must be >= 1");
  std::vector<Window> out;
  for (std::size_t idx : selected) {
    if (idx >= events.size()) throw InvalidArgument("sample_windows: event index out of range");
    const auto& ev = events[idx];
    std::size_t first = seq.size(), count = 0;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const auto t = seq.frames[k].timestamp;
      if (t >= ev.start && t <= ev.end) {
        first = std::min(first, k);
        ++count;
      }
    }
    const std::size_t windows = window_count(count, context, horizon);
    if (windows == 0) {
      const std::string msg = "skipping event " + std::to_string(idx) + ": " + std::to_string(count) +
                              " frames, need " + std::to_string(context + horizon);
      if (log)
        log(msg);
      else
        std::clog << msg << '\n';
      continue;
    }
    for (std::size_t w = 0; w < windows; ++w) out.push_back(Window{idx, first + w});
  }
  return out;
}

namespace {

void render(Grid& g, const std::vector<Blob>& blobs, const std::vector<std::array<double, 2>>& centers, int t) {
  const int n = g.n();
  for (std::size_t b = 0; b < blobs.size(); ++b) {
    const double amp = blobs[b].amplitude * std::pow(1.0 + blobs[b].growth, t);
    const double inv2s2 = 1.0 / (2.0 * blobs[b].sigma * blobs[b].sigma);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const double dr = r - centers[b][0], dc = c - centers[b][1];
        g(r, c) += amp * std::exp(-(dr * dr + dc * dc) * inv2s2);
      }
  }
}

}  // namespace

SyntheticStorm synthesize_storms(const StormSpec& spec, std::uint64_t seed) {
  if (!is_valid_side(spec.n)) throw InvalidArgument("synthesize_storms: n must be a power of two >= 8");
  if (spec.frames < 2) throw InvalidArgument("synthesize_storms: need at least 2 frames");
  Rng rng(seed);
  SyntheticStorm out;
  const double lo = spec.center_margin, hi = spec.n - 1 - spec.center_margin;
  for (int b = 0; b < spec.blob_count; ++b) {
    Blob blob;
    blob.row = rng.uniform(lo, hi);
    blob.col = rng.uniform(lo, hi);
    blob.amplitude = rng.uniform(spec.amplitude_min, spec.amplitude_max);
    blob.sigma = rng.uniform(spec.sigma_min, spec.sigma_max);
    blob.growth = rng.uniform(spec.growth_min, spec.growth_max);
    out.blobs.push_back(blob);
  }
  out.flow_u = spec.flow_u;
  out.flow_v = spec.flow_v;
  if (spec.flow == StormFlow::Constant && spec.random_direction) {
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double speed = rng.uniform(spec.speed_min, spec.speed_max);
    out.flow_u = speed * std::cos(angle);
    out.flow_v = speed * std::sin(angle);
  }

  const double cr = 0.5 * (spec.n - 1), cc = 0.5 * (spec.n - 1);
  auto center_at = [&](const Blob& b, int t) -> std::array<double, 2> {
    if (spec.flow == StormFlow::Constant) return {b.row + t * out.flow_v, b.col + t * out.flow_u};
    const double a = spec.rotation_rate * t;
    const double dx = b.col - cc, dy = b.row - cr;
    return {cr + std::sin(a) * dx + std::cos(a) * dy, cc + std::cos(a) * dx - std::sin(a) * dy};
  };

  out.sequence.step_seconds = spec.step_seconds;
  for (int t = 0; t < spec.frames; ++t) {
    std::vector<std::array<double, 2>> centers;
    for (const auto& b : out.blobs) centers.push_back(center_at(b, t));
    PrecipField f{Grid(spec.n), spec.start_time + t * spec.step_seconds};
    render(f.values, out.blobs, centers, t);
    out.sequence.frames.push_back(std::move(f));
  }

  MotionField motion(spec.n);
  for (int r = 0; r < spec.n; ++r)
    for (int c = 0; c < spec.n; ++c) {
      if (spec.flow == StormFlow::Constant) {
        motion.u(r, c) = out.flow_u;
        motion.v(r, c) = out.flow_v;
      } else {
        // p minus the point that rotates onto p in one step.
        const double a = -spec.rotation_rate;
        const double dx = c - cc, dy = r - cr;
        motion.u(r, c) = c - (cc + std::cos(a) * dx - std::sin(a) * dy);
        motion.v(r, c) = r - (cr + std::sin(a) * dx + std::cos(a) * dy);
      }
    }
  const Grid zero(spec.n);
  for (int t = 0; t + 1 < spec.frames; ++t) {
    const Grid advected = warp(motion, zero, out.sequence.frames[t].values);
    IntensityField s(spec.n);
    for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = out.sequence.frames[t + 1].values[i] - advected[i];
    out.truth_motion.push_back(motion);
    out.truth_intensity.push_back(std::move(s));
  }
  return out;
}

}  // namespace nowcast
