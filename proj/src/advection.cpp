#include "nowcast/advection.hpp"

#include <algorithm>
#include <cmath>

namespace nowcast {

namespace {

void check_warp_inputs(const MotionField& flow, const Grid& intensity, const Grid& frame) {
  const int n = frame.n();
  if (flow.u.n() != n || flow.v.n() != n || intensity.n() != n)
    throw InvalidArgument("warp: flow, intensity and frame must share n");
  if (n < 2) throw InvalidArgument("warp: grid too small");
  if (!all_finite(flow.u) || !all_finite(flow.v)) throw InvalidArgument("warp: non-finite flow");
  if (!all_finite(intensity)) throw InvalidArgument("warp: non-finite intensity");
}

struct Axis {
  int lo;       // lower source index, in [0, n-2]
  double frac;  // weight of lo + 1
  bool clamped;
};

Axis locate(double coord, int n) {
  Axis a{0, 0.0, false};
  if (coord <= 0.0) {
    a.clamped = coord < 0.0;
    coord = 0.0;
  } else if (coord >= n - 1) {
    a.clamped = coord > n - 1;
    coord = n - 1;
  }
  a.lo = std::min(static_cast<int>(std::floor(coord)), n - 2);
  a.frac = coord - a.lo;
  return a;
}

}  // namespace

WarpJacobians warp_jacobians(const MotionField& flow, const Grid& intensity, const Grid& frame) {
  check_warp_inputs(flow, intensity, frame);
  const int n = frame.n();
  WarpJacobians jac;
  jac.n = n;
  jac.pixels.resize(frame.size());
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * n + c;
      const Axis x = locate(c - flow.u[i], n);
      const Axis y = locate(r - flow.v[i], n);
      auto& px = jac.pixels[i];
      const std::uint32_t base = static_cast<std::uint32_t>(y.lo * n + x.lo);
      px.source = {base, base + 1, base + static_cast<std::uint32_t>(n), base + static_cast<std::uint32_t>(n) + 1};
      px.weight = {(1 - y.frac) * (1 - x.frac), (1 - y.frac) * x.frac, y.frac * (1 - x.frac), y.frac * x.frac};
      const double f00 = frame[px.source[0]], f01 = frame[px.source[1]];
      const double f10 = frame[px.source[2]], f11 = frame[px.source[3]];
      const double sample = (1 - y.frac) * ((1 - x.frac) * f00 + x.frac * f01) + y.frac * ((1 - x.frac) * f10 + x.frac * f11);
      const bool active = sample + intensity[i] > 0.0;
      px.d_intensity = active ? 1.0 : 0.0;
      if (active) {
        // Source coordinate is p - flow, hence the sign flip.
        const double d_dx = (1 - y.frac) * (f01 - f00) + y.frac * (f11 - f10);
        const double d_dy = (1 - x.frac) * (f10 - f00) + x.frac * (f11 - f01);
        px.d_flow = {x.clamped ? 0.0 : -d_dx, y.clamped ? 0.0 : -d_dy};
      }
    }
  }
  return jac;
}

Grid warp(const MotionField& flow, const Grid& intensity, const Grid& frame) {
  check_warp_inputs(flow, intensity, frame);
  const int n = frame.n();
  Grid out(n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * n + c;
      const Axis x = locate(c - flow.u[i], n);
      const Axis y = locate(r - flow.v[i], n);
      const double f00 = frame(y.lo, x.lo), f01 = frame(y.lo, x.lo + 1);
      const double f10 = frame(y.lo + 1, x.lo), f11 = frame(y.lo + 1, x.lo + 1);
      const double sample = (1 - y.frac) * ((1 - x.frac) * f00 + x.frac * f01) + y.frac * ((1 - x.frac) * f10 + x.frac * f11);
      out[i] = std::max(0.0, sample + intensity[i]);
    }
  }
  return out;
}

PrecipField warp(const MotionField& flow, const IntensityField& intensity, const PrecipField& frame) {
  return PrecipField{warp(flow, intensity.values, frame.values), frame.timestamp};
}

WarpGradients warp_vjp(const Grid& upstream, const WarpJacobians& jac) {
  const int n = jac.n;
  if (upstream.n() != n) throw InvalidArgument("warp_vjp: upstream has the wrong size");
  WarpGradients g{MotionField(n), Grid(n), Grid(n)};
  for (std::size_t i = 0; i < jac.pixels.size(); ++i) {
    const auto& px = jac.pixels[i];
    const double up = upstream[i] * px.d_intensity;
    if (up == 0.0) continue;
    g.intensity[i] = up;
    g.flow.u[i] = up * px.d_flow[0];
    g.flow.v[i] = up * px.d_flow[1];
    for (int k = 0; k < 4; ++k) g.frame[px.source[k]] += up * px.weight[k];
  }
  return g;
}

WarpGradients warp_vjp(const Grid& upstream, const MotionField& flow, const Grid& intensity, const Grid& frame) {
  return warp_vjp(upstream, warp_jacobians(flow, intensity, frame));
}

std::vector<PrecipField> extrapolate(const FieldSequence& frames, const FlowConfig& cfg, int steps) {
  if (steps < 1) throw InvalidArgument("extrapolate: steps must be >= 1");
  if (static_cast<int>(frames.size()) < cfg.context_frames)
    throw InvalidArgument("extrapolate: fewer frames than the flow context");
  const auto tail = std::span(frames.frames).last(static_cast<std::size_t>(cfg.context_frames));
  const auto grids = grids_of(tail);
  const FlowResult flow = estimate_flow(grids, cfg);
  const Grid zero(frames.n());

  std::vector<PrecipField> out;
  out.reserve(steps);
  PrecipField current = frames.frames.back();
  for (int k = 1; k <= steps; ++k) {
    current = PrecipField{warp(flow.motion, zero, current.values), current.timestamp + frames.step_seconds};
    out.push_back(current);
  }
  return out;
}

std::vector<PrecipField> persistence(const FieldSequence& frames, int steps) {
  if (steps < 1) throw InvalidArgument("persistence: steps must be >= 1");
  std::vector<PrecipField> out;
  const auto& last = frames.frames.back();
  for (int k = 1; k <= steps; ++k) out.push_back(PrecipField{last.values, last.timestamp + k * frames.step_seconds});
  return out;
}

}  // namespace nowcast
