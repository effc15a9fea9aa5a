#pragma once

// Tape nodes that hand the physical operators (warp and the two losses) to the
// autodiff engine. The gradients come from warp_vjp and the supervision
// module; nothing here re-derives them.

#include "nowcast/autodiff.hpp"
#include "nowcast/field.hpp"
#include "nowcast/supervision.hpp"

namespace nowcast {

/// Splits a [1, 3, n, n] tensor (u, v, s) into fields.
void unpack_fields(const ad::Tensor& fields, MotionField& motion, Grid& intensity);

/// warp(u, v, s, frame) for fields: [1, 3, n, n]; returns [1, 1, n, n].
ad::Tensor warp_node(ad::Tape& tape, const ad::Tensor& fields, const Grid& frame);

/// loss_ved as a scalar node over fields [1, 3, n, n] and the latent
/// parameters. `breakdown`, when given, receives the individual terms.
ad::Tensor ved_loss_node(ad::Tape& tape, const ad::Tensor& fields, const ad::Tensor& mu, const ad::Tensor& log_var,
                         const SupervisionPair& targets, const LossWeights& weights, KlOrder order,
                         VedLoss* breakdown = nullptr);

/// loss_evolver as a scalar node over fields [1, 3, n, n].
ad::Tensor evolver_loss_node(ad::Tape& tape, const ad::Tensor& fields, const Grid& prev, const Grid& next,
                             int crop_margin);

}  // namespace nowcast
