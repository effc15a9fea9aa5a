#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nowcast/field.hpp"
#include "nowcast/flow.hpp"

namespace nowcast {

/// Local derivatives of one warp evaluation, one entry per output pixel.
struct WarpJacobians {
  struct Pixel {
    // The four bilinear source cells (flat indices) and their weights.
    std::array<std::uint32_t, 4> source{};
    std::array<double, 4> weight{};
    // d output / d (u, v); zero on clamped axes or inactive pixels.
    std::array<double, 2> d_flow{};
    // 1 when the non-negativity clamp is inactive, else 0. Scales every
    // derivative of the pixel, including the identity d out / d intensity.
    double d_intensity = 0.0;
  };

  int n = 0;
  std::vector<Pixel> pixels;
};

struct WarpGradients {
  MotionField flow;
  Grid intensity;
  Grid frame;
};

/// out(p) = max(0, bilinear(frame, p - flow(p)) + intensity(p)), with source
/// coordinates clamped to the grid (border replication).
Grid warp(const MotionField& flow, const Grid& intensity, const Grid& frame);
PrecipField warp(const MotionField& flow, const IntensityField& intensity, const PrecipField& frame);

WarpJacobians warp_jacobians(const MotionField& flow, const Grid& intensity, const Grid& frame);

/// Vector-Jacobian product of warp for an upstream gradient on the output.
WarpGradients warp_vjp(const Grid& upstream, const MotionField& flow, const Grid& intensity, const Grid& frame);
WarpGradients warp_vjp(const Grid& upstream, const WarpJacobians& jac);

/// Deterministic semi-Lagrangian extrapolation: one flow from the trailing
/// cfg.context_frames frames, applied `steps` times with zero intensity.
std::vector<PrecipField> extrapolate(const FieldSequence& frames, const FlowConfig& cfg, int steps);

/// Persistence forecast: the last frame repeated `steps` times.
std::vector<PrecipField> persistence(const FieldSequence& frames, int steps);

}  // namespace nowcast
