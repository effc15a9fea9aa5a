#include "nowcast/field.hpp"

#include <algorithm>
#include <cmath>

namespace nowcast {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

bool is_valid_side(int n) { return n >= 8 && (n & (n - 1)) == 0; }

bool all_finite(const Grid& g) {
  return std::all_of(g.values().begin(), g.values().end(), [](double x) { return std::isfinite(x); });
}

void PrecipField::validate() const {
  if (!is_valid_side(values.n()))
    throw InvalidArgument("PrecipField: side " + std::to_string(values.n()) + " is not a power of two >= 8");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]) || values[i] < 0.0)
      throw InvalidArgument("PrecipField: invalid rain rate at cell " + std::to_string(i));
  }
}

void MotionField::validate() const {
  if (u.n() != v.n()) throw InvalidArgument("MotionField: u and v differ in size");
  const double bound = 0.5 * u.n();
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!std::isfinite(u[i]) || !std::isfinite(v[i]))
      throw InvalidArgument("MotionField: non-finite component at cell " + std::to_string(i));
    if (std::hypot(u[i], v[i]) > bound)
      throw InvalidArgument("MotionField: displacement exceeds n/2 at cell " + std::to_string(i));
  }
}

void IntensityField::validate() const {
  if (!all_finite(values)) throw InvalidArgument("IntensityField: non-finite value");
}

void FieldSequence::validate() const {
  if (frames.size() < 2) throw InvalidArgument("FieldSequence: needs at least 2 frames");
  if (step_seconds <= 0) throw InvalidArgument("FieldSequence: step_seconds must be positive");
  const int side = frames.front().n();
  for (std::size_t k = 0; k < frames.size(); ++k) {
    frames[k].validate();
    if (frames[k].n() != side) throw InvalidArgument("FieldSequence: frame " + std::to_string(k) + " has a different size");
    if (k > 0 && frames[k].timestamp - frames[k - 1].timestamp != step_seconds)
      throw InvalidArgument("FieldSequence: timestamp gap at frame " + std::to_string(k));
  }
}

Mask threshold_mask(const Grid& field, double threshold) {
  if (!(threshold > 0.0)) throw InvalidArgument("threshold_mask: threshold must be positive");
  Mask m(field.n());
  for (std::size_t i = 0; i < field.size(); ++i) m.cells[i] = field[i] >= threshold ? 1 : 0;
  return m;
}

Mask max_pool(const Mask& mask, int block) {
  if (block != 1 && block != 4) throw InvalidArgument("max_pool: block must be 1 or 4");
  if (mask.n % block != 0) throw InvalidArgument("max_pool: block does not divide n");
  if (block == 1) return mask;
  const int out_n = mask.n / block;
  Mask out(out_n);
  for (int r = 0; r < mask.n; ++r)
    for (int c = 0; c < mask.n; ++c)
      if (mask.at(r, c)) out.set(r / block, c / block, true);
  return out;
}

std::vector<Grid> grids_of(std::span<const PrecipField> frames) {
  std::vector<Grid> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(f.values);
  return out;
}

}  // namespace nowcast
