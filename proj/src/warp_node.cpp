#include "nowcast/warp_node.hpp"

#include <algorithm>

#include "nowcast/advection.hpp"

namespace nowcast {

namespace {

int fields_side(const ad::Tensor& fields, const char* op) {
  const auto& s = fields.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 3 || s[2] != s[3])
    throw ad::ShapeError(op, "fields must be [1, 3, n, n], got " + ad::to_string(s));
  return s[2];
}

}  // namespace

void unpack_fields(const ad::Tensor& fields, MotionField& motion, Grid& intensity) {
  const int n = fields_side(fields, "unpack_fields");
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  motion = MotionField(n);
  intensity = Grid(n);
  const auto v = fields.value();
  std::copy_n(v.begin(), cells, motion.u.data());
  std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(cells), cells, motion.v.data());
  std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(2 * cells), cells, intensity.data());
}

ad::Tensor warp_node(ad::Tape& tape, const ad::Tensor& fields, const Grid& frame) {
  const int n = fields_side(fields, "warp_node");
  if (frame.n() != n) throw ad::ShapeError("warp_node", "frame size does not match fields");
  MotionField motion;
  Grid intensity;
  unpack_fields(fields, motion, intensity);
  auto jac = std::make_shared<WarpJacobians>(warp_jacobians(motion, intensity, frame));
  const Grid out = warp(motion, intensity, frame);
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  return ad::custom(tape, {fields}, {1, 1, n, n}, std::vector<double>(out.values().begin(), out.values().end()),
                    [jac, n, cells](std::span<const double> up, std::vector<std::span<double>>& grads) {
                      if (grads[0].empty()) return;
                      Grid upstream(n);
                      std::copy(up.begin(), up.end(), upstream.data());
                      const WarpGradients g = warp_vjp(upstream, *jac);
                      auto& gf = grads[0];
                      for (std::size_t i = 0; i < cells; ++i) {
                        gf[i] += g.flow.u[i];
                        gf[cells + i] += g.flow.v[i];
                        gf[2 * cells + i] += g.intensity[i];
                      }
                    });
}

ad::Tensor ved_loss_node(ad::Tape& tape, const ad::Tensor& fields, const ad::Tensor& mu, const ad::Tensor& log_var,
                         const SupervisionPair& targets, const LossWeights& weights, KlOrder order, VedLoss* breakdown) {
  const int n = fields_side(fields, "ved_loss_node");
  MotionField motion;
  Grid intensity;
  unpack_fields(fields, motion, intensity);
  auto loss = std::make_shared<VedLoss>(loss_ved(motion, intensity, targets, mu.value(), log_var.value(), weights, order));
  if (breakdown) *breakdown = *loss;
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  return ad::custom(tape, {fields, mu, log_var}, {1}, {loss->total},
                    [loss, cells](std::span<const double> up, std::vector<std::span<double>>& grads) {
                      const double g = up[0];
                      if (!grads[0].empty())
                        for (std::size_t i = 0; i < cells; ++i) {
                          grads[0][i] += g * loss->grad_motion.u[i];
                          grads[0][cells + i] += g * loss->grad_motion.v[i];
                          grads[0][2 * cells + i] += g * loss->grad_intensity[i];
                        }
                      if (!grads[1].empty())
                        for (std::size_t i = 0; i < grads[1].size(); ++i) grads[1][i] += g * loss->grad_mu[i];
                      if (!grads[2].empty())
                        for (std::size_t i = 0; i < grads[2].size(); ++i) grads[2][i] += g * loss->grad_log_var[i];
                    });
}

ad::Tensor evolver_loss_node(ad::Tape& tape, const ad::Tensor& fields, const Grid& prev, const Grid& next,
                             int crop_margin) {
  const int n = fields_side(fields, "evolver_loss_node");
  MotionField motion;
  Grid intensity;
  unpack_fields(fields, motion, intensity);
  auto loss = std::make_shared<EvolverLoss>(loss_evolver(motion, intensity, prev, next, crop_margin));
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  return ad::custom(tape, {fields}, {1}, {loss->value},
                    [loss, cells](std::span<const double> up, std::vector<std::span<double>>& grads) {
                      if (grads[0].empty()) return;
                      const double g = up[0];
                      for (std::size_t i = 0; i < cells; ++i) {
                        grads[0][i] += g * loss->grad_motion.u[i];
                        grads[0][cells + i] += g * loss->grad_motion.v[i];
                        grads[0][2 * cells + i] += g * loss->grad_intensity[i];
                      }
                    });
}

}  // namespace nowcast
