#pragma once

#include <span>
#include <vector>

#include "nowcast/advection.hpp"
#include "nowcast/field.hpp"
#include "nowcast/flow.hpp"

namespace nowcast {

inline constexpr int kDefaultCropMargin = 4;
inline constexpr double kCosineEpsilon = 1e-8;

/// Optical-flow derived targets for one step X0 -> X1.
struct SupervisionPair {
  MotionField motion_target;
  IntensityField intensity_target;  // X1 - advected_intermediate
  Grid advected_intermediate;       // warp(motion_target, 0, X0)
  int crop_margin = kDefaultCropMargin;
};

/// Loss weights; defaults are the tuned values for the encoder-decoder.
struct LossWeights {
  double lambda_int = 0.995;
  double lambda_motion = 0.0033;
  double lambda_cos = 0.00165;
  double lambda_kl = 1e-6;

  void validate() const;
};

/// Which direction the latent KL term is taken in.
enum class KlOrder {
  PosteriorToPrior,  // KL(q || N(0, I)), the usual VAE regularizer
  PriorToPosterior,  // KL(N(0, I) || q)
};

/// `window` runs X_{-T~+2} .. X_1: its last element is the future frame X1 and
/// the one before it is X0. The flow is fitted over the whole window.
SupervisionPair derive_targets(std::span<const Grid> window, const FlowConfig& cfg,
                               int crop_margin = kDefaultCropMargin);

/// Half-open index range [begin, end) kept on each axis after cropping.
struct CropRegion {
  int begin = 0;
  int end = 0;
  std::size_t cells() const { return static_cast<std::size_t>(end - begin) * (end - begin); }
};
CropRegion crop_region(int n, int margin);

struct CosineTermResult {
  double value = 0.0;
  MotionField grad;  // d value / d v_hat
  std::size_t valid_pixels = 0;
};

/// 1 - mean over cropped pixels of v·v̂ / (|v||v̂| + eps). Pixels where both
/// vectors are shorter than eps are left out of the mean.
CosineTermResult cosine_term(const MotionField& v, const MotionField& v_hat, int crop_margin = 0);

struct KlResult {
  double value = 0.0;
  std::vector<double> grad_mu;
  std::vector<double> grad_log_var;
};

KlResult kl_divergence(std::span<const double> mu, std::span<const double> log_var,
                       KlOrder order = KlOrder::PosteriorToPrior);

struct VedLoss {
  double total = 0.0;
  double l_int = 0.0;
  double l_motion = 0.0;
  double l_cos = 0.0;
  double l_kl = 0.0;

  MotionField grad_motion;
  Grid grad_intensity;
  std::vector<double> grad_mu;
  std::vector<double> grad_log_var;
};

/// Weighted sum of mean-absolute intensity and motion errors, the cosine
/// term and the latent KL. Spatial terms use targets.crop_margin.
VedLoss loss_ved(const MotionField& pred_motion, const Grid& pred_intensity, const SupervisionPair& targets,
                 std::span<const double> mu, std::span<const double> log_var, const LossWeights& w,
                 KlOrder order = KlOrder::PosteriorToPrior);

struct EvolverLoss {
  double value = 0.0;
  MotionField grad_motion;
  Grid grad_intensity;
};

/// Teacher-forced step loss: mean |warp(v̂, ŝ, prev) - next| over the crop.
EvolverLoss loss_evolver(const MotionField& pred_motion, const Grid& pred_intensity, const Grid& prev,
                         const Grid& next, int crop_margin = kDefaultCropMargin);

}  // namespace nowcast
