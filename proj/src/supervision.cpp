#include "nowcast/supervision.hpp"

#include <cmath>

namespace nowcast {

namespace {

double sign(double x) { return (x > 0) - (x < 0); }

void require_same(int n, const Grid& g, const char* what) {
  if (g.n() != n) throw InvalidArgument(std::string(what) + ": shape mismatch");
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {lambda_int, lambda_motion, lambda_cos, lambda_kl})
    if (!std::isfinite(w) || w < 0) throw InvalidArgument("LossWeights: weights must be finite and >= 0");
}

CropRegion crop_region(int n, int margin) {
  if (margin < 0 || 2 * margin >= n) throw InvalidArgument("crop margin " + std::to_string(margin) + " too large");
  return CropRegion{margin, n - margin};
}

SupervisionPair derive_targets(std::span<const Grid> window, const FlowConfig& cfg, int crop_margin) {
  if (window.size() < 2) throw InvalidArgument("derive_targets: window needs X0 and X1");
  const Grid& x0 = window[window.size() - 2];
  const Grid& x1 = window.back();
  SupervisionPair p;
  p.crop_margin = crop_margin;
  crop_region(x1.n(), crop_margin);
  p.motion_target = estimate_flow(window, cfg).motion;
  p.advected_intermediate = warp(p.motion_target, Grid(x0.n()), x0);
  p.intensity_target = IntensityField(x1.n());
  for (std::size_t i = 0; i < x1.size(); ++i) p.intensity_target.values[i] = x1[i] - p.advected_intermediate[i];
  return p;
}

CosineTermResult cosine_term(const MotionField& v, const MotionField& v_hat, int crop_margin) {
  const int n = v.n();
  require_same(n, v_hat.u, "cosine_term");
  const CropRegion crop = crop_region(n, crop_margin);
  CosineTermResult res{0.0, MotionField(n), 0};
  double sum = 0;
  for (int r = crop.begin; r < crop.end; ++r) {
    for (int c = crop.begin; c < crop.end; ++c) {
      const double a0 = v.u(r, c), a1 = v.v(r, c);
      const double b0 = v_hat.u(r, c), b1 = v_hat.v(r, c);
      const double na = std::hypot(a0, a1), nb = std::hypot(b0, b1);
      if (na < kCosineEpsilon && nb < kCosineEpsilon) continue;
      ++res.valid_pixels;
      const double dot = a0 * b0 + a1 * b1;
      const double den = na * nb + kCosineEpsilon;
      sum += dot / den;
      // d(dot/den)/db = a/den - dot * na * (b/nb) / den²
      const double k = nb > 0 ? dot * na / (nb * den * den) : 0.0;
      res.grad.u(r, c) = a0 / den - k * b0;
      res.grad.v(r, c) = a1 / den - k * b1;
    }
  }
  if (res.valid_pixels == 0) return res;
  const double inv = 1.0 / static_cast<double>(res.valid_pixels);
  res.value = 1.0 - sum * inv;
  for (std::size_t i = 0; i < res.grad.u.size(); ++i) {
    res.grad.u[i] *= -inv;
    res.grad.v[i] *= -inv;
  }
  return res;
}

KlResult kl_divergence(std::span<const double> mu, std::span<const double> log_var, KlOrder order) {
  if (mu.size() != log_var.size()) throw InvalidArgument("kl_divergence: mu and log_var differ in length");
  KlResult res{0.0, std::vector<double>(mu.size()), std::vector<double>(mu.size())};
  double acc = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu[i], lv = log_var[i];
    if (!std::isfinite(m) || !std::isfinite(lv)) throw InvalidArgument("kl_divergence: non-finite parameter");
    if (order == KlOrder::PosteriorToPrior) {
      const double var = std::exp(lv);
      acc += m * m + var - lv - 1.0;
      res.grad_mu[i] = m;
      res.grad_log_var[i] = 0.5 * (var - 1.0);
    } else {
      const double inv_var = std::exp(-lv);
      acc += lv + (1.0 + m * m) * inv_var - 1.0;
      res.grad_mu[i] = m * inv_var;
      res.grad_log_var[i] = 0.5 * (1.0 - (1.0 + m * m) * inv_var);
    }
  }
  res.value = 0.5 * acc;
  return res;
}

VedLoss loss_ved(const MotionField& pred_motion, const Grid& pred_intensity, const SupervisionPair& targets,
                 std::span<const double> mu, std::span<const double> log_var, const LossWeights& w, KlOrder order) {
  w.validate();
  const int n = targets.motion_target.n();
  require_same(n, pred_motion.u, "loss_ved");
  require_same(n, pred_motion.v, "loss_ved");
  require_same(n, pred_intensity, "loss_ved");
  if (!all_finite(pred_motion.u) || !all_finite(pred_motion.v) || !all_finite(pred_intensity))
    throw InvalidArgument("loss_ved: non-finite prediction");

  const CropRegion crop = crop_region(n, targets.crop_margin);
  const double inv_cells = 1.0 / static_cast<double>(crop.cells());

  VedLoss out;
  out.grad_motion = MotionField(n);
  out.grad_intensity = Grid(n);
  double s_int = 0, s_mot = 0;
  for (int r = crop.begin; r < crop.end; ++r) {
    for (int c = crop.begin; c < crop.end; ++c) {
      const double di = pred_intensity(r, c) - targets.intensity_target.values(r, c);
      const double du = pred_motion.u(r, c) - targets.motion_target.u(r, c);
      const double dv = pred_motion.v(r, c) - targets.motion_target.v(r, c);
      s_int += std::abs(di);
      s_mot += std::abs(du) + std::abs(dv);
      out.grad_intensity(r, c) = w.lambda_int * sign(di) * inv_cells;
      out.grad_motion.u(r, c) = w.lambda_motion * sign(du) * 0.5 * inv_cells;
      out.grad_motion.v(r, c) = w.lambda_motion * sign(dv) * 0.5 * inv_cells;
    }
  }
  out.l_int = s_int * inv_cells;
  out.l_motion = 0.5 * s_mot * inv_cells;

  const CosineTermResult cos = cosine_term(targets.motion_target, pred_motion, targets.crop_margin);
  out.l_cos = cos.value;
  for (std::size_t i = 0; i < cos.grad.u.size(); ++i) {
    out.grad_motion.u[i] += w.lambda_cos * cos.grad.u[i];
    out.grad_motion.v[i] += w.lambda_cos * cos.grad.v[i];
  }

  const KlResult kl = kl_divergence(mu, log_var, order);
  out.l_kl = kl.value;
  out.grad_mu = kl.grad_mu;
  out.grad_log_var = kl.grad_log_var;
  for (auto& g : out.grad_mu) g *= w.lambda_kl;
  for (auto& g : out.grad_log_var) g *= w.lambda_kl;

  out.total = w.lambda_int * out.l_int + w.lambda_motion * out.l_motion + w.lambda_cos * out.l_cos + w.lambda_kl * out.l_kl;
  return out;
}

EvolverLoss loss_evolver(const MotionField& pred_motion, const Grid& pred_intensity, const Grid& prev, const Grid& next,
                         int crop_margin) {
  const int n = prev.n();
  require_same(n, next, "loss_evolver");
  const auto jac = warp_jacobians(pred_motion, pred_intensity, prev);
  const Grid pred = warp(pred_motion, pred_intensity, prev);
  const CropRegion crop = crop_region(n, crop_margin);
  const double inv_cells = 1.0 / static_cast<double>(crop.cells());

  Grid upstream(n);
  double sum = 0;
  for (int r = crop.begin; r < crop.end; ++r)
    for (int c = crop.begin; c < crop.end; ++c) {
      const double d = pred(r, c) - next(r, c);
      sum += std::abs(d);
      upstream(r, c) = sign(d) * inv_cells;
    }
  WarpGradients g = warp_vjp(upstream, jac);
  return EvolverLoss{sum * inv_cells, std::move(g.flow), std::move(g.intensity)};
}

}  // namespace nowcast
