#pragma once

#include <array>
#include <span>
#include <string>

#include "nowcast/field.hpp"

namespace nowcast {

enum class FlowMethod { LucasKanade, Darts };

std::string to_string(FlowMethod m);
FlowMethod parse_flow_method(const std::string& s);

struct FlowConfig {
  FlowMethod method = FlowMethod::Darts;
  int lk_window = 11;
  double lk_smooth_sigma = 1.5;
  // Ridge added to every local tensor, as a fraction of the largest tensor
  // trace in the frame.
  double lk_ridge = 1e-4;
  int darts_modes = 2;
  // Data (equation) modes kept per axis; clipped to n/2 - 1.
  int darts_data_modes = 16;
  // Ridge as a fraction of the mean diagonal of the normal matrix, scaled by
  // |m|^2 for flow mode m.
  double darts_regularization = 1e-4;
  int context_frames = 3;

  /// Throws InvalidArgument when a field is out of range for side n.
  void validate(int n) const;
};

struct FlowResult {
  MotionField motion;
  // Set when the input had no usable texture; motion is then all zeros.
  bool degenerate = false;
};

/// Windowed 2×2 least-squares system: tensor = [[xx, xy], [xy, yy]],
/// rhs = (bx, by).
struct StructureTensor {
  double xx = 0, xy = 0, yy = 0;
  double bx = 0, by = 0;
};

inline constexpr double kMaxLkCondition = 1e8;

/// Solves (tensor + ridge·I) d = rhs. Returns zero when the regularized
/// system has a condition number above kMaxLkCondition.
std::array<double, 2> lucas_kanade_pixel(const StructureTensor& system, double ridge);

/// Dense flow from the frames, which must number cfg.context_frames.
/// The result is the displacement per step from the penultimate frame to
/// the last one, fitted jointly over every consecutive pair.
FlowResult estimate_flow(std::span<const Grid> frames, const FlowConfig& cfg);

FlowResult lucas_kanade(std::span<const Grid> frames, const FlowConfig& cfg);

/// Spectral solver: flow is a truncated Fourier series with
/// cfg.darts_modes harmonics per axis, fitted to the brightness-constancy
/// equation in Fourier space. Spatial derivatives are one-sided at the
/// border, so the frames need not be periodic.
FlowResult darts_solve(std::span<const Grid> frames, const FlowConfig& cfg);

/// Separable Gaussian blur with replicated borders.
Grid gaussian_smooth(const Grid& g, double sigma);

}  // namespace nowcast
