#pragma once

// Shared fixtures for the unit tests and the acceptance binary.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "nowcast/advection.hpp"
#include "nowcast/field.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/random.hpp"

namespace nowcast::testing {

inline Grid random_grid(Rng& rng, int n, double lo, double hi) {
  Grid g(n);
  for (auto& v : g.values()) v = rng.uniform(lo, hi);
  return g;
}

/// Isotropic Gaussian blob of peak `amp` centered at (row, col).
inline Grid gaussian_blob(int n, double row, double col, double sigma, double amp = 10.0) {
  Grid g(n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double d2 = (r - row) * (r - row) + (c - col) * (c - col);
      g(r, c) = amp * std::exp(-d2 / (2 * sigma * sigma));
    }
  return g;
}

inline MotionField constant_flow(int n, double u, double v) {
  MotionField m(n);
  for (auto& x : m.u.values()) x = u;
  for (auto& x : m.v.values()) x = v;
  return m;
}

inline FieldSequence make_sequence(std::vector<Grid> grids, std::int64_t step = 600, std::int64_t t0 = 0) {
  FieldSequence s;
  s.step_seconds = step;
  for (std::size_t i = 0; i < grids.size(); ++i)
    s.frames.push_back({std::move(grids[i]), t0 + static_cast<std::int64_t>(i) * step});
  return s;
}

/// Frames of a field advected k times by a constant flow (exact analytic
/// translation of a Gaussian blob).
inline std::vector<Grid> translated_blob(int n, int frames, double row, double col, double sigma, double u, double v,
                                         double amp = 10.0) {
  std::vector<Grid> out;
  for (int k = 0; k < frames; ++k) out.push_back(gaussian_blob(n, row + k * v, col + k * u, sigma, amp));
  return out;
}

/// Confusion counts by scalar loops: a pooled cell is wet when any pixel of
/// its block reaches the threshold.
inline ConfusionCounts brute_force_counts(const Grid& f, const Grid& o, double threshold, int pool) {
  const int n = f.n() / pool;
  ConfusionCounts c;
  for (int br = 0; br < n; ++br)
    for (int bc = 0; bc < n; ++bc) {
      bool fw = false, ow = false;
      for (int r = br * pool; r < (br + 1) * pool; ++r)
        for (int col = bc * pool; col < (bc + 1) * pool; ++col) {
          fw = fw || f(r, col) >= threshold;
          ow = ow || o(r, col) >= threshold;
        }
      if (fw && ow) ++c.tp;
      else if (fw) ++c.fp;
      else if (ow) ++c.fn;
      else ++c.tn;
    }
  return c;
}

/// Random rain field with a realistic spread of intensities across the
/// 4..64 mm/h thresholds.
inline Grid random_rain(Rng& rng, int n) {
  Grid g(n);
  for (auto& v : g.values()) v = rng.uniform() < 0.4 ? 0.0 : std::exp(rng.uniform(0.0, std::log(90.0)));
  return g;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("nowcast_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace nowcast::testing
