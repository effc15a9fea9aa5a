#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nowcast {

/// Thrown when an argument violates a shape or domain contract.
class InvalidArgument : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Square n×n raster of doubles, row-major. Row index grows southward,
/// column index grows eastward.
class Grid {
public:
  Grid() = default;
  explicit Grid(int n, double fill = 0.0) : n_(n), data_(static_cast<std::size_t>(n) * n, fill) {
    if (n <= 0) throw InvalidArgument("Grid: side must be positive");
  }

  int n() const { return n_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int row, int col) { return data_[static_cast<std::size_t>(row) * n_ + col]; }
  double operator()(int row, int col) const { return data_[static_cast<std::size_t>(row) * n_ + col]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool operator==(const Grid&) const = default;

private:
  int n_ = 0;
  std::vector<double> data_;
};

/// n×n boolean exceedance grid.
struct Mask {
  int n = 0;
  std::vector<std::uint8_t> cells;

  Mask() = default;
  explicit Mask(int side) : n(side), cells(static_cast<std::size_t>(side) * side, 0) {}
  bool at(int row, int col) const { return cells[static_cast<std::size_t>(row) * n + col] != 0; }
  void set(int row, int col, bool v) { cells[static_cast<std::size_t>(row) * n + col] = v ? 1 : 0; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

/// One precipitation raster (mm/h) valid at `timestamp` (Unix seconds).
struct PrecipField {
  Grid values;
  std::int64_t timestamp = 0;

  int n() const { return values.n(); }
  /// Throws InvalidArgument unless values are finite, non-negative and n is a power of two ≥ 8.
  void validate() const;
};

/// Per-pixel displacement in pixels per step. `u` is eastward (columns),
/// `v` is southward (rows).
struct MotionField {
  Grid u;
  Grid v;

  MotionField() = default;
  explicit MotionField(int n) : u(n), v(n) {}
  int n() const { return u.n(); }
  /// Throws InvalidArgument on non-finite components or displacement above n/2.
  void validate() const;
};

/// Per-pixel additive correction in mm/h; may be negative.
struct IntensityField {
  Grid values;

  IntensityField() = default;
  explicit IntensityField(int n) : values(n) {}
  int n() const { return values.n(); }
  void validate() const;
};

/// Ordered frames at a fixed cadence.
struct FieldSequence {
  std::vector<PrecipField> frames;
  std::int64_t step_seconds = 600;

  int n() const { return frames.empty() ? 0 : frames.front().n(); }
  std::size_t size() const { return frames.size(); }
  /// Checks every frame, shared n, length ≥ 2 and timestamps spaced by exactly step_seconds.
  void validate() const;
};

bool is_valid_side(int n);
bool all_finite(const Grid& g);

/// mask[i,j] = values[i,j] ≥ threshold.
Mask threshold_mask(const Grid& field, double threshold);
inline Mask threshold_mask(const PrecipField& field, double threshold) {
  return threshold_mask(field.values, threshold);
}

/// Block max-pool of a mask. `block` must be 1 or 4 and divide n.
Mask max_pool(const Mask& mask, int block);

/// Copies the grids out of a frame span, in order.
std::vector<Grid> grids_of(std::span<const PrecipField> frames);

}  // namespace nowcast
