#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nowcast/supervision.hpp"
#include "test_support.hpp"

using namespace nowcast;

namespace {

/// KL(N(m1, v1) || N(m2, v2)) for scalar Gaussians.
double gaussian_kl(double m1, double v1, double m2, double v2) {
  return 0.5 * std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / (2 * v2) - 0.5;
}

MotionField random_flow(Rng& rng, int n, double amp) {
  MotionField m(n);
  for (auto& x : m.u.values()) x = rng.uniform(-amp, amp);
  for (auto& x : m.v.values()) x = rng.uniform(-amp, amp);
  return m;
}

/// Storm-like window: two blobs drifting with growth.
std::vector<Grid> storm_window(Rng& rng, int n, int frames) {
  const double u = rng.uniform(-2, 2), v = rng.uniform(-2, 2);
  const double r0 = rng.uniform(n * 0.3, n * 0.7), c0 = rng.uniform(n * 0.3, n * 0.7);
  std::vector<Grid> out;
  for (int k = 0; k < frames; ++k) {
    Grid g = testing::gaussian_blob(n, r0 + k * v, c0 + k * u, 5.0, 10.0 * (1 + 0.05 * k));
    const Grid b = testing::gaussian_blob(n, r0 + 8 + k * v, c0 - 6 + k * u, 3.0, 6.0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += b[i];
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace

TEST_CASE("derived targets reconstruct X1 on the cropped region") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto window = storm_window(rng, 32, 3);
    FlowConfig cfg;
    cfg.method = trial % 2 ? FlowMethod::LucasKanade : FlowMethod::Darts;
    const SupervisionPair p = derive_targets(window, cfg, 4);
    const Grid rebuilt = warp(p.motion_target, p.intensity_target.values, window[1]);
    const CropRegion crop = crop_region(32, p.crop_margin);
    for (int r = crop.begin; r < crop.end; ++r)
      for (int c = crop.begin; c < crop.end; ++c)
        CHECK(rebuilt(r, c) == doctest::Approx(window[2](r, c)).epsilon(1e-12).scale(1e-12));
  }
}

TEST_CASE("static field has zero targets") {
  const Grid x = testing::gaussian_blob(16, 8, 8, 3);
  const std::vector<Grid> window{x, x};
  FlowConfig cfg;
  cfg.context_frames = 2;
  const SupervisionPair p = derive_targets(window, cfg, 2);
  for (double v : p.intensity_target.values.values()) CHECK(std::abs(v) < 1e-9);
  CHECK_THROWS_AS(derive_targets(std::span<const Grid>(window).first(1), cfg), InvalidArgument);
}

TEST_CASE("crop region bounds") {
  const CropRegion c = crop_region(16, 4);
  CHECK(c.begin == 4);
  CHECK(c.end == 12);
  CHECK(c.cells() == 64);
  CHECK(crop_region(8, 0).cells() == 64);
  CHECK_THROWS_AS(crop_region(8, 4), InvalidArgument);
  CHECK_THROWS_AS(crop_region(8, -1), InvalidArgument);
}

TEST_CASE("cosine term of aligned, orthogonal and opposite fields") {
  const MotionField a = testing::constant_flow(8, 1.0, 2.0);
  CHECK(cosine_term(a, testing::constant_flow(8, 3.0, 6.0)).value == doctest::Approx(0.0).scale(1.0).epsilon(1e-8));
  CHECK(cosine_term(a, testing::constant_flow(8, -2.0, 1.0)).value == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(cosine_term(a, testing::constant_flow(8, -1.0, -2.0)).value == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("cosine term skips pixels where both vectors vanish") {
  MotionField a(8), b(8);
  a.u(2, 2) = 1.0;
  b.u(2, 2) = 1.0;
  const auto res = cosine_term(a, b);
  CHECK(res.valid_pixels == 1);
  CHECK(res.value == doctest::Approx(0.0).scale(1.0).epsilon(1e-8));
  const auto none = cosine_term(MotionField(8), MotionField(8));
  CHECK(none.valid_pixels == 0);
  CHECK(none.value == 0.0);
}

TEST_CASE("cosine term gradient matches central differences") {
  Rng rng(12);
  const MotionField a = random_flow(rng, 8, 2.0), b = random_flow(rng, 8, 2.0);
  const auto res = cosine_term(a, b, 1);
  const double h = 1e-6;
  for (std::size_t i = 0; i < a.u.size(); ++i) {
    for (int comp = 0; comp < 2; ++comp) {
      MotionField p = b, m = b;
      (comp ? p.v : p.u)[i] += h;
      (comp ? m.v : m.u)[i] -= h;
      const double fd = (cosine_term(a, p, 1).value - cosine_term(a, m, 1).value) / (2 * h);
      CHECK((comp ? res.grad.v : res.grad.u)[i] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("KL terms match the closed-form Gaussian divergence in both orders") {
  Rng rng(13);
  std::vector<double> mu(6), lv(6);
  for (auto& m : mu) m = rng.uniform(-2, 2);
  for (auto& l : lv) l = rng.uniform(-1.5, 1.5);
  double forward = 0, reverse = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    forward += gaussian_kl(mu[i], std::exp(lv[i]), 0.0, 1.0);
    reverse += gaussian_kl(0.0, 1.0, mu[i], std::exp(lv[i]));
  }
  CHECK(kl_divergence(mu, lv, KlOrder::PosteriorToPrior).value == doctest::Approx(forward).epsilon(1e-12));
  CHECK(kl_divergence(mu, lv, KlOrder::PriorToPosterior).value == doctest::Approx(reverse).epsilon(1e-12));

  const std::vector<double> zero(4, 0.0);
  CHECK(kl_divergence(zero, zero).value == 0.0);
  CHECK(kl_divergence(zero, zero, KlOrder::PriorToPosterior).value == 0.0);
}

TEST_CASE("KL gradients match central differences") {
  Rng rng(14);
  std::vector<double> mu(5), lv(5);
  for (auto& m : mu) m = rng.uniform(-2, 2);
  for (auto& l : lv) l = rng.uniform(-1, 1);
  const double h = 1e-6;
  for (auto order : {KlOrder::PosteriorToPrior, KlOrder::PriorToPosterior}) {
    const auto res = kl_divergence(mu, lv, order);
    for (std::size_t i = 0; i < mu.size(); ++i) {
      auto m1 = mu, m2 = mu, l1 = lv, l2 = lv;
      m1[i] += h;
      m2[i] -= h;
      l1[i] += h;
      l2[i] -= h;
      const double dm = (kl_divergence(m1, lv, order).value - kl_divergence(m2, lv, order).value) / (2 * h);
      const double dl = (kl_divergence(mu, l1, order).value - kl_divergence(mu, l2, order).value) / (2 * h);
      CHECK(res.grad_mu[i] == doctest::Approx(dm).epsilon(1e-7));
      CHECK(res.grad_log_var[i] == doctest::Approx(dl).epsilon(1e-7).scale(1e-6));
    }
  }
}

TEST_CASE("loss_ved combines the weighted terms on the crop") {
  Rng rng(15);
  const int n = 12;
  SupervisionPair t;
  t.crop_margin = 2;
  t.motion_target = random_flow(rng, n, 2.0);
  t.intensity_target = IntensityField(n);
  for (auto& v : t.intensity_target.values.values()) v = rng.uniform(-1, 1);
  const MotionField pm = random_flow(rng, n, 2.0);
  Grid pi(n);
  for (auto& v : pi.values()) v = rng.uniform(-1, 1);
  const std::vector<double> mu{0.3, -0.2}, lv{0.1, -0.4};
  const LossWeights w;

  // Brute-force means over the 8x8 crop.
  double l_int = 0, l_mot = 0;
  for (int r = 2; r < 10; ++r)
    for (int c = 2; c < 10; ++c) {
      l_int += std::abs(pi(r, c) - t.intensity_target.values(r, c));
      l_mot += std::abs(pm.u(r, c) - t.motion_target.u(r, c)) + std::abs(pm.v(r, c) - t.motion_target.v(r, c));
    }
  l_int /= 64;
  l_mot /= 128;
  const double l_cos = cosine_term(t.motion_target, pm, 2).value;
  const double l_kl = kl_divergence(mu, lv).value;

  const VedLoss loss = loss_ved(pm, pi, t, mu, lv, w);
  CHECK(loss.l_int == doctest::Approx(l_int).epsilon(1e-13));
  CHECK(loss.l_motion == doctest::Approx(l_mot).epsilon(1e-13));
  CHECK(loss.l_cos == doctest::Approx(l_cos).epsilon(1e-13));
  CHECK(loss.l_kl == doctest::Approx(l_kl).epsilon(1e-13));
  CHECK(loss.total == doctest::Approx(0.995 * l_int + 0.0033 * l_mot + 0.00165 * l_cos + 1e-6 * l_kl).epsilon(1e-13));

  // Gradients outside the crop are zero; inside they match finite differences.
  CHECK(loss.grad_intensity(0, 0) == 0.0);
  CHECK(loss.grad_motion.u(11, 5) == 0.0);
  const double h = 1e-7;
  for (int probe = 0; probe < 10; ++probe) {
    const int r = 2 + static_cast<int>(rng.index(8)), c = 2 + static_cast<int>(rng.index(8));
    Grid ip = pi, im = pi;
    ip(r, c) += h;
    im(r, c) -= h;
    const double fd_i = (loss_ved(pm, ip, t, mu, lv, w).total - loss_ved(pm, im, t, mu, lv, w).total) / (2 * h);
    CHECK(loss.grad_intensity(r, c) == doctest::Approx(fd_i).epsilon(1e-5));
    MotionField mp = pm, mm = pm;
    mp.u(r, c) += h;
    mm.u(r, c) -= h;
    const double fd_u = (loss_ved(mp, pi, t, mu, lv, w).total - loss_ved(mm, pi, t, mu, lv, w).total) / (2 * h);
    CHECK(loss.grad_motion.u(r, c) == doctest::Approx(fd_u).epsilon(1e-4));
  }
}

TEST_CASE("loss weights are validated") {
  LossWeights w;
  w.lambda_kl = -1;
  CHECK_THROWS_AS(w.validate(), InvalidArgument);
  w.lambda_kl = NAN;
  CHECK_THROWS_AS(w.validate(), InvalidArgument);
}

TEST_CASE("evolver loss is zero for the true step and matches its definition otherwise") {
  const auto g = testing::translated_blob(16, 2, 8, 6, 2.5, 1.0, 0.0);
  const MotionField truth = testing::constant_flow(16, 1.0, 0.0);
  const auto exact = loss_evolver(truth, Grid(16), g[0], warp(truth, Grid(16), g[0]), 2);
  CHECK(exact.value == 0.0);

  const MotionField off = testing::constant_flow(16, 0.4, 0.3);
  const auto loss = loss_evolver(off, Grid(16), g[0], g[1], 2);
  const Grid pred = warp(off, Grid(16), g[0]);
  double expect = 0;
  for (int r = 2; r < 14; ++r)
    for (int c = 2; c < 14; ++c) expect += std::abs(pred(r, c) - g[1](r, c));
  CHECK(loss.value == doctest::Approx(expect / 144).epsilon(1e-13));
}
