#include "nowcast/flow.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <vector>

namespace nowcast {

namespace {

using cd = std::complex<double>;

void check_frames(std::span<const Grid> frames, const FlowConfig& cfg) {
  if (frames.size() < 2) throw InvalidArgument("estimate_flow: need at least two frames");
  if (static_cast<int>(frames.size()) != cfg.context_frames)
    throw InvalidArgument("estimate_flow: got " + std::to_string(frames.size()) + " frames, config expects " +
                          std::to_string(cfg.context_frames));
  const int n = frames.front().n();
  for (const auto& f : frames)
    if (f.n() != n) throw InvalidArgument("estimate_flow: frames differ in size");
  cfg.validate(n);
}

FlowResult zero_flow(int n, bool degenerate) { return FlowResult{MotionField(n), degenerate}; }

// Central differences; `periodic` wraps at the border, otherwise indices clamp.
void gradients(const Grid& g, bool periodic, Grid& gx, Grid& gy) {
  const int n = g.n();
  gx = Grid(n);
  gy = Grid(n);
  auto idx = [&](int i) {
    if (periodic) return (i + n) % n;
    return std::clamp(i, 0, n - 1);
  };
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const int cl = idx(c - 1), cr = idx(c + 1), ru = idx(r - 1), rd = idx(r + 1);
      gx(r, c) = (g(r, cr) - g(r, cl)) / static_cast<double>(periodic ? 2 : (cr - cl));
      gy(r, c) = (g(rd, c) - g(ru, c)) / static_cast<double>(periodic ? 2 : (rd - ru));
    }
  }
}

Grid box_sum(const Grid& g, int window) {
  const int n = g.n(), h = window / 2;
  Grid tmp(n), out(n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double s = 0;
      for (int k = std::max(0, c - h); k <= std::min(n - 1, c + h); ++k) s += g(r, k);
      tmp(r, c) = s;
    }
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double s = 0;
      for (int k = std::max(0, r - h); k <= std::min(n - 1, r + h); ++k) s += tmp(k, c);
      out(r, c) = s;
    }
  return out;
}

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Forward 2-D DFT normalized by 1/n², so coefficient (0,0) is the mean.
std::vector<cd> fft2(const Grid& g) {
  const int n = g.n();
  std::vector<cd> in(g.size()), out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) in[i] = g[i];
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(n, n, reinterpret_cast<fftw_complex*>(in.data()),
                            reinterpret_cast<fftw_complex*>(out.data()), FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  const double scale = 1.0 / (static_cast<double>(n) * n);
  for (auto& v : out) v *= scale;
  return out;
}

}  // namespace

std::string to_string(FlowMethod m) { return m == FlowMethod::Darts ? "darts" : "lk"; }

FlowMethod parse_flow_method(const std::string& s) {
  if (s == "darts" || s == "DARTS") return FlowMethod::Darts;
  if (s == "lk" || s == "lucas_kanade" || s == "LK") return FlowMethod::LucasKanade;
  throw InvalidArgument("unknown flow method '" + s + "'");
}

void FlowConfig::validate(int n) const {
  if (lk_window < 3 || lk_window % 2 == 0) throw InvalidArgument("FlowConfig: lk_window must be odd and >= 3");
  if (!(lk_smooth_sigma >= 0)) throw InvalidArgument("FlowConfig: lk_smooth_sigma must be >= 0");
  if (!(lk_ridge >= 0)) throw InvalidArgument("FlowConfig: lk_ridge must be >= 0");
  if (darts_modes < 1) throw InvalidArgument("FlowConfig: darts_modes must be >= 1");
  if (n > 0 && darts_modes > n / 2)
    throw InvalidArgument("FlowConfig: darts_modes " + std::to_string(darts_modes) + " exceeds Nyquist (" +
                          std::to_string(n / 2) + ")");
  if (darts_data_modes < 1) throw InvalidArgument("FlowConfig: darts_data_modes must be >= 1");
  if (!(darts_regularization >= 0)) throw InvalidArgument("FlowConfig: darts_regularization must be >= 0");
  if (context_frames < 2) throw InvalidArgument("FlowConfig: context_frames must be >= 2");
}

std::array<double, 2> lucas_kanade_pixel(const StructureTensor& s, double ridge) {
  const double a = s.xx + ridge, b = s.xy, d = s.yy + ridge;
  const double half_tr = 0.5 * (a + d);
  const double disc = std::sqrt(0.25 * (a - d) * (a - d) + b * b);
  const double lmax = half_tr + disc, lmin = half_tr - disc;
  if (!(lmin > 0.0) || lmax / lmin > kMaxLkCondition) return {0.0, 0.0};
  const double det = a * d - b * b;
  return {(d * s.bx - b * s.by) / det, (a * s.by - b * s.bx) / det};
}

Grid gaussian_smooth(const Grid& g, double sigma) {
  if (sigma <= 0) return g;
  const int n = g.n();
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& w : k) w /= sum;
  Grid tmp(n), out(n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * g(r, std::clamp(c + i, 0, n - 1));
      tmp(r, c) = s;
    }
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp(std::clamp(r + i, 0, n - 1), c);
      out(r, c) = s;
    }
  return out;
}

FlowResult lucas_kanade(std::span<const Grid> frames, const FlowConfig& cfg) {
  check_frames(frames, cfg);
  const int n = frames.front().n();

  std::vector<Grid> smooth;
  smooth.reserve(frames.size());
  for (const auto& f : frames) smooth.push_back(gaussian_smooth(f, cfg.lk_smooth_sigma));

  // Products accumulated over every consecutive pair; the spatial gradient
  // is taken at the temporal midpoint of each pair.
  Grid pxx(n), pxy(n), pyy(n), pbx(n), pby(n);
  Grid gx, gy;
  for (std::size_t k = 1; k < smooth.size(); ++k) {
    Grid mid(n);
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = 0.5 * (smooth[k][i] + smooth[k - 1][i]);
    gradients(mid, false, gx, gy);
    for (std::size_t i = 0; i < mid.size(); ++i) {
      const double it = smooth[k][i] - smooth[k - 1][i];
      pxx[i] += gx[i] * gx[i];
      pxy[i] += gx[i] * gy[i];
      pyy[i] += gy[i] * gy[i];
      pbx[i] -= gx[i] * it;
      pby[i] -= gy[i] * it;
    }
  }
  const Grid sxx = box_sum(pxx, cfg.lk_window), sxy = box_sum(pxy, cfg.lk_window), syy = box_sum(pyy, cfg.lk_window);
  const Grid sbx = box_sum(pbx, cfg.lk_window), sby = box_sum(pby, cfg.lk_window);

  double max_trace = 0;
  for (std::size_t i = 0; i < sxx.size(); ++i) max_trace = std::max(max_trace, sxx[i] + syy[i]);
  if (!(max_trace > 0)) return zero_flow(n, true);
  const double ridge = cfg.lk_ridge * max_trace;

  FlowResult res{MotionField(n), false};
  std::size_t solved = 0;
  for (std::size_t i = 0; i < sxx.size(); ++i) {
    const auto d = lucas_kanade_pixel({sxx[i], sxy[i], syy[i], sbx[i], sby[i]}, ridge);
    res.motion.u[i] = d[0];
    res.motion.v[i] = d[1];
    if (d[0] != 0.0 || d[1] != 0.0) ++solved;
  }
  if (solved == 0) res.degenerate = true;
  return res;
}

FlowResult darts_solve(std::span<const Grid> frames, const FlowConfig& cfg) {
  check_frames(frames, cfg);
  const int n = frames.front().n();
  const int M = cfg.darts_modes;
  const int K = std::min(cfg.darts_data_modes, n / 2 - 1);
  const int side = 2 * M + 1;
  const int F = side * side;
  const int unknowns = 2 * F;
  auto wrap = [n](int k) { return ((k % n) + n) % n; };

  Eigen::MatrixXcd normal = Eigen::MatrixXcd::Zero(unknowns, unknowns);
  Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(unknowns);
  Eigen::VectorXcd row(unknowns);

  Grid gx, gy;
  for (std::size_t p = 1; p < frames.size(); ++p) {
    Grid mid(n), dt(n);
    for (std::size_t i = 0; i < mid.size(); ++i) {
      mid[i] = 0.5 * (frames[p][i] + frames[p - 1][i]);
      dt[i] = frames[p][i] - frames[p - 1][i];
    }
    gradients(mid, false, gx, gy);
    // Border pixels only have one-sided derivatives; their equations are
    // dropped. The product theorem needs no periodicity, so nothing wraps.
    for (int i = 0; i < n; ++i)
      for (const auto at : {static_cast<std::size_t>(i), static_cast<std::size_t>(n - 1) * n + i,
                            static_cast<std::size_t>(i) * n, static_cast<std::size_t>(i) * n + n - 1}) {
        dt[at] = 0;
        gx[at] = 0;
        gy[at] = 0;
      }
    const auto ft = fft2(dt), fx = fft2(gx), fy = fft2(gy);

    // One equation per retained data mode k:
    //   T(k) + Σ_m U_m Gx(k-m) + V_m Gy(k-m) = 0
    for (int ky = -K; ky <= K; ++ky) {
      for (int kx = -K; kx <= K; ++kx) {
        int col = 0;
        for (int my = -M; my <= M; ++my)
          for (int mx = -M; mx <= M; ++mx, ++col) {
            const std::size_t at = static_cast<std::size_t>(wrap(ky - my)) * n + wrap(kx - mx);
            row[col] = fx[at];
            row[F + col] = fy[at];
          }
        const cd b = -ft[static_cast<std::size_t>(wrap(ky)) * n + wrap(kx)];
        normal.noalias() += row.conjugate() * row.transpose();
        rhs += row.conjugate() * b;
      }
    }
  }

  const double trace = normal.diagonal().real().sum();
  if (!(trace > 0)) return zero_flow(n, true);
  // Smoothness-weighted ridge: mode m is penalized in proportion to |m|^2,
  // so a uniform flow is not shrunk. The mean mode keeps a tiny term for
  // solvability.
  const double ridge = cfg.darts_regularization * trace / unknowns;
  {
    int col = 0;
    for (int my = -M; my <= M; ++my)
      for (int mx = -M; mx <= M; ++mx, ++col) {
        const double weight = (mx == 0 && my == 0) ? 1e-6 : static_cast<double>(mx * mx + my * my);
        normal(col, col) += ridge * weight;
        normal(F + col, F + col) += ridge * weight;
      }
  }
  const Eigen::VectorXcd coef = normal.ldlt().solve(rhs);

  FlowResult res{MotionField(n), false};
  if (coef.cwiseAbs().maxCoeff() == 0.0) return res;
  const double w = 2.0 * M_PI / n;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      cd u = 0, v = 0;
      int col = 0;
      for (int my = -M; my <= M; ++my)
        for (int mx = -M; mx <= M; ++mx, ++col) {
          const cd e = std::polar(1.0, w * (mx * c + my * r));
          u += coef[col] * e;
          v += coef[F + col] * e;
        }
      res.motion.u(r, c) = u.real();
      res.motion.v(r, c) = v.real();
    }
  }
  return res;
}

FlowResult estimate_flow(std::span<const Grid> frames, const FlowConfig& cfg) {
  FlowResult res = cfg.method == FlowMethod::Darts ? darts_solve(frames, cfg) : lucas_kanade(frames, cfg);
  // Displacements above n/2 are rejected as degenerate.
  const double bound = 0.5 * res.motion.n();
  for (std::size_t i = 0; i < res.motion.u.size(); ++i) {
    if (!std::isfinite(res.motion.u[i]) || !std::isfinite(res.motion.v[i]) ||
        std::hypot(res.motion.u[i], res.motion.v[i]) > bound)
      return zero_flow(res.motion.n(), true);
  }
  return res;
}

}  // namespace nowcast
