#include "nowcast/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "nowcast/advection.hpp"
#include "nowcast/autodiff.hpp"
#include "nowcast/model.hpp"
#include "nowcast/random.hpp"
#include "nowcast/supervision.hpp"
#include "nowcast/warp_node.hpp"

namespace nowcast {

namespace {

constexpr double kStep = 1e-5;
// Entries whose input lies this close to a kink are not compared.
constexpr double kKinkMargin = 1e-3;

std::vector<double> uniform_values(Rng& rng, std::size_t count, double lo, double hi) {
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

Grid uniform_grid(Rng& rng, int n, double lo, double hi) {
  Grid g(n);
  for (auto& x : g.values()) x = rng.uniform(lo, hi);
  return g;
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

bool near_integer(double x) { return std::abs(x - std::round(x)) < kKinkMargin; }

/// Bilinear sampling kinks for a displacement entry: the source coordinate
/// crossing a grid line or the border clamp.
bool near_sampling_kink(double coord, int n) {
  return near_integer(coord) || std::abs(coord) < kKinkMargin || std::abs(coord - (n - 1)) < kKinkMargin;
}

void accumulate(GradcheckResult& r, double analytic, double numeric, double floor) {
  r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic, numeric, floor));
  ++r.checked;
}

// ---- autodiff ops ----------------------------------------------------------

struct OpCase {
  std::vector<ad::Shape> shapes;
  std::vector<std::vector<double>> values;
};

using OpFn = std::function<ad::Tensor(ad::Tape&, const std::vector<ad::Tensor>&)>;
using MakeFn = std::function<OpCase(Rng&)>;
// True when (input, element) sits next to a kink of the op.
using KinkFn = std::function<bool(const OpCase&, std::size_t, std::size_t)>;

double weighted_output(const OpFn& fn, const OpCase& c, std::span<const double> w) {
  ad::Tape t(ad::Tape::Mode::Inference);
  std::vector<ad::Tensor> in;
  for (std::size_t i = 0; i < c.shapes.size(); ++i) in.push_back(ad::Tensor::constant(c.shapes[i], c.values[i]));
  const ad::Tensor out = fn(t, in);
  double s = 0.0;
  const auto v = out.value();
  for (std::size_t i = 0; i < v.size(); ++i) s += w[i] * v[i];
  return s;
}

GradcheckResult check_op(const std::string& name, const GradcheckOptions& opts, std::uint64_t stream, const MakeFn& make,
                         const OpFn& fn, const KinkFn& kink = {}) {
  GradcheckResult r;
  r.component = name;
  for (int inst = 0; inst < opts.instances; ++inst) {
    Rng rng(derive_seed(opts.seed, stream, static_cast<std::uint64_t>(inst)));
    OpCase c = make(rng);

    ad::Tape tape;
    std::vector<ad::Tensor> in;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) in.push_back(ad::Tensor::parameter(c.shapes[i], c.values[i]));
    const ad::Tensor out = fn(tape, in);
    const std::vector<double> w = uniform_values(rng, out.numel(), -1.0, 1.0);
    double dot = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) dot += w[i] * out.value()[i];
    const ad::Tensor loss = ad::custom(tape, {out}, {1}, {dot},
                                       [w](std::span<const double> up, std::vector<std::span<double>>& g) {
                                         for (std::size_t i = 0; i < w.size(); ++i) g[0][i] += up[0] * w[i];
                                       });
    tape.backward(loss);

    double gmax = 0.0;
    for (const auto& t : in) gmax = std::max(gmax, max_abs(t.grad()));
    const double floor = std::max(1e-3 * gmax, 1e-12);
    for (std::size_t i = 0; i < in.size(); ++i)
      for (std::size_t e = 0; e < c.values[i].size(); ++e) {
        if (kink && kink(c, i, e)) {
          ++r.skipped;
          continue;
        }
        const double x0 = c.values[i][e];
        c.values[i][e] = x0 + kStep;
        const double fp = weighted_output(fn, c, w);
        c.values[i][e] = x0 - kStep;
        const double fm = weighted_output(fn, c, w);
        c.values[i][e] = x0;
        accumulate(r, in[i].grad()[e], (fp - fm) / (2 * kStep), floor);
      }
    ++r.instances;
  }
  return r;
}

MakeFn random_inputs(std::vector<ad::Shape> shapes, double lo = -1.0, double hi = 1.0) {
  return [shapes, lo, hi](Rng& rng) {
    OpCase c;
    c.shapes = shapes;
    for (const auto& s : shapes) c.values.push_back(uniform_values(rng, ad::numel(s), lo, hi));
    return c;
  };
}

std::vector<GradcheckResult> check_ops(const GradcheckOptions& o) {
  const int n = o.side;
  const ad::Shape img{1, 2, n, n};
  std::vector<GradcheckResult> out;
  std::uint64_t stream = 100;

  out.push_back(check_op("op.matmul", o, ++stream, random_inputs({{n, n}, {n, n}}),
                         [](ad::Tape& t, const auto& x) { return ad::matmul(t, x[0], x[1]); }));
  out.push_back(check_op("op.conv2d_3x3", o, ++stream, random_inputs({img, {3, 2, 3, 3}, {3}}),
                         [](ad::Tape& t, const auto& x) { return ad::conv2d(t, x[0], x[1], x[2], 1); }));
  out.push_back(check_op("op.conv2d_3x3_stride2", o, ++stream, random_inputs({img, {3, 2, 3, 3}, {3}}),
                         [](ad::Tape& t, const auto& x) { return ad::conv2d(t, x[0], x[1], x[2], 2); }));
  out.push_back(check_op("op.conv2d_1x1", o, ++stream, random_inputs({img, {3, 2, 1, 1}, {3}}),
                         [](ad::Tape& t, const auto& x) { return ad::conv2d(t, x[0], x[1], x[2], 1); }));
  out.push_back(check_op("op.add", o, ++stream, random_inputs({img, img}),
                         [](ad::Tape& t, const auto& x) { return ad::add(t, x[0], x[1]); }));
  out.push_back(check_op("op.add_channel_bias", o, ++stream, random_inputs({img, {1, 2}}),
                         [](ad::Tape& t, const auto& x) { return ad::add_channel_bias(t, x[0], x[1]); }));
  out.push_back(check_op("op.mul", o, ++stream, random_inputs({img, img}),
                         [](ad::Tape& t, const auto& x) { return ad::mul(t, x[0], x[1]); }));
  out.push_back(check_op("op.scale", o, ++stream, random_inputs({img}),
                         [](ad::Tape& t, const auto& x) { return ad::scale(t, x[0], -1.75); }));
  out.push_back(check_op("op.scale_channels", o, ++stream, random_inputs({img}),
                         [](ad::Tape& t, const auto& x) { return ad::scale_channels(t, x[0], {0.5, -3.0}); }));
  out.push_back(check_op(
      "op.relu", o, ++stream, random_inputs({img}), [](ad::Tape& t, const auto& x) { return ad::relu(t, x[0]); },
      [](const OpCase& c, std::size_t i, std::size_t e) { return std::abs(c.values[i][e]) < kKinkMargin; }));
  out.push_back(check_op("op.sigmoid", o, ++stream, random_inputs({img}, -3.0, 3.0),
                         [](ad::Tape& t, const auto& x) { return ad::sigmoid(t, x[0]); }));
  out.push_back(check_op("op.mean", o, ++stream, random_inputs({img}),
                         [](ad::Tape& t, const auto& x) { return ad::mean(t, x[0]); }));
  out.push_back(check_op(
      "op.l1_distance", o, ++stream, random_inputs({img, img}),
      [](ad::Tape& t, const auto& x) { return ad::l1_distance(t, x[0], x[1]); },
      [](const OpCase& c, std::size_t, std::size_t e) {
        return std::abs(c.values[0][e] - c.values[1][e]) < kKinkMargin;
      }));
  out.push_back(check_op("op.reshape", o, ++stream, random_inputs({img}),
                         [n](ad::Tape& t, const auto& x) { return ad::reshape(t, x[0], {2, n * n}); }));
  out.push_back(check_op("op.upsample2x", o, ++stream, random_inputs({{1, 2, n / 2, n / 2}}),
                         [](ad::Tape& t, const auto& x) { return ad::upsample2x(t, x[0]); }));
  out.push_back(check_op("op.slice_channels", o, ++stream, random_inputs({{1, 4, n, n}}),
                         [](ad::Tape& t, const auto& x) { return ad::slice_channels(t, x[0], 1, 2); }));
  {
    Rng noise_rng(derive_seed(o.seed, 99));
    std::vector<double> noise(ad::numel(img));
    for (auto& z : noise) z = noise_rng.normal();
    out.push_back(check_op("op.gaussian_sample", o, ++stream, random_inputs({img, img}),
                           [noise](ad::Tape& t, const auto& x) { return ad::gaussian_sample(t, x[0], x[1], noise); }));
    std::vector<double> keep(ad::numel(img));
    for (auto& k : keep) k = noise_rng.uniform() < 0.8 ? 1.0 : 0.0;
    out.push_back(check_op("op.dropout", o, ++stream, random_inputs({img}),
                           [keep](ad::Tape& t, const auto& x) { return ad::dropout(t, x[0], keep, 0.2); }));
  }
  return out;
}

// ---- warp and the tape adapters -------------------------------------------

struct WarpCase {
  MotionField flow;
  Grid intensity;
  Grid frame;
};

/// Positive frame and intensity keep the non-negativity clamp inactive.
WarpCase random_warp_case(Rng& rng, int n) {
  WarpCase c;
  c.flow.u = uniform_grid(rng, n, -3.0, 3.0);
  c.flow.v = uniform_grid(rng, n, -3.0, 3.0);
  c.intensity = uniform_grid(rng, n, 0.0, 0.5);
  c.frame = uniform_grid(rng, n, 1.0, 2.0);
  return c;
}

double weighted_warp(const WarpCase& c, const Grid& w) {
  const Grid out = warp(c.flow, c.intensity, c.frame);
  double s = 0.0;
  for (std::size_t i = 0; i < out.values().size(); ++i) s += w[i] * out[i];
  return s;
}

GradcheckResult check_warp(const GradcheckOptions& o) {
  GradcheckResult r;
  r.component = "warp";
  const int n = o.side;
  for (int inst = 0; inst < o.instances; ++inst) {
    Rng rng(derive_seed(o.seed, 1, static_cast<std::uint64_t>(inst)));
    WarpCase c = random_warp_case(rng, n);
    const Grid w = uniform_grid(rng, n, -1.0, 1.0);
    WarpGradients g = warp_vjp(w, c.flow, c.intensity, c.frame);
    if (o.fault == GradcheckFault::Warp)
      for (auto& x : g.flow.u.values()) x *= 1.01;

    const double gmax = std::max({max_abs(g.flow.u.values()), max_abs(g.flow.v.values()), max_abs(g.intensity.values()),
                                  max_abs(g.frame.values())});
    const double floor = std::max(1e-3 * gmax, 1e-12);
    auto probe = [&](double& x, double analytic) {
      const double x0 = x;
      x = x0 + kStep;
      const double fp = weighted_warp(c, w);
      x = x0 - kStep;
      const double fm = weighted_warp(c, w);
      x = x0;
      accumulate(r, analytic, (fp - fm) / (2 * kStep), floor);
    };
    for (int row = 0; row < n; ++row)
      for (int col = 0; col < n; ++col) {
        const std::size_t i = static_cast<std::size_t>(row) * n + col;
        if (near_sampling_kink(col - c.flow.u[i], n)) ++r.skipped;
        else probe(c.flow.u[i], g.flow.u[i]);
        if (near_sampling_kink(row - c.flow.v[i], n)) ++r.skipped;
        else probe(c.flow.v[i], g.flow.v[i]);
        probe(c.intensity[i], g.intensity[i]);
        probe(c.frame[i], g.frame[i]);
      }
    ++r.instances;
  }
  return r;
}

GradcheckResult check_warp_node(const GradcheckOptions& o) {
  const int n = o.side;
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  auto frame = std::make_shared<Grid>();
  auto make = [n, frame](Rng& rng) {
    const WarpCase w = random_warp_case(rng, n);
    *frame = w.frame;
    OpCase c;
    c.shapes = {{1, 3, n, n}};
    std::vector<double> v;
    for (const Grid* g : {&w.flow.u, &w.flow.v, &w.intensity}) v.insert(v.end(), g->values().begin(), g->values().end());
    c.values = {std::move(v)};
    return c;
  };
  auto kink = [n, cells](const OpCase& c, std::size_t, std::size_t e) {
    if (e >= 2 * cells) return false;
    const std::size_t i = e % cells;
    const int row = static_cast<int>(i) / n, col = static_cast<int>(i) % n;
    return e < cells ? near_sampling_kink(col - c.values[0][e], n) : near_sampling_kink(row - c.values[0][e], n);
  };
  return check_op(
      "warp_node", o, 2, make, [frame](ad::Tape& t, const auto& x) { return warp_node(t, x[0], *frame); }, kink);
}

// ---- losses ----------------------------------------------------------------

GradcheckResult check_loss_ved(const GradcheckOptions& o) {
  GradcheckResult r;
  r.component = "loss_ved";
  const int n = o.side;
  const LossWeights weights{1.0, 1.0, 1.0, 1.0};
  const int margin = 2;
  for (int inst = 0; inst < o.instances; ++inst) {
    Rng rng(derive_seed(o.seed, 3, static_cast<std::uint64_t>(inst)));
    SupervisionPair t;
    t.crop_margin = margin;
    t.motion_target.u = uniform_grid(rng, n, -2.0, 2.0);
    t.motion_target.v = uniform_grid(rng, n, -2.0, 2.0);
    t.intensity_target.values = uniform_grid(rng, n, -1.0, 1.0);
    t.advected_intermediate = Grid(n);
    MotionField pm;
    pm.u = uniform_grid(rng, n, -2.0, 2.0);
    pm.v = uniform_grid(rng, n, -2.0, 2.0);
    Grid pi = uniform_grid(rng, n, -1.0, 1.0);
    std::vector<double> mu = uniform_values(rng, 32, -1.0, 1.0), lv = uniform_values(rng, 32, -1.0, 1.0);
    const KlOrder order = inst % 2 == 0 ? KlOrder::PosteriorToPrior : KlOrder::PriorToPosterior;

    const VedLoss a = loss_ved(pm, pi, t, mu, lv, weights, order);
    auto f = [&] { return loss_ved(pm, pi, t, mu, lv, weights, order).total; };
    const double gmax = std::max({max_abs(a.grad_motion.u.values()), max_abs(a.grad_motion.v.values()),
                                  max_abs(a.grad_intensity.values()), max_abs(a.grad_mu), max_abs(a.grad_log_var)});
    const double floor = std::max(1e-3 * gmax, 1e-12);
    auto probe = [&](double& x, double analytic) {
      const double x0 = x;
      x = x0 + kStep;
      const double fp = f();
      x = x0 - kStep;
      const double fm = f();
      x = x0;
      accumulate(r, analytic, (fp - fm) / (2 * kStep), floor);
    };
    for (std::size_t i = 0; i < pi.values().size(); ++i) {
      if (std::abs(pm.u[i] - t.motion_target.u[i]) < kKinkMargin) ++r.skipped;
      else probe(pm.u[i], a.grad_motion.u[i]);
      if (std::abs(pm.v[i] - t.motion_target.v[i]) < kKinkMargin) ++r.skipped;
      else probe(pm.v[i], a.grad_motion.v[i]);
      if (std::abs(pi[i] - t.intensity_target.values[i]) < kKinkMargin) ++r.skipped;
      else probe(pi[i], a.grad_intensity[i]);
    }
    for (std::size_t i = 0; i < mu.size(); ++i) {
      probe(mu[i], a.grad_mu[i]);
      probe(lv[i], a.grad_log_var[i]);
    }
    ++r.instances;
  }
  return r;
}

GradcheckResult check_loss_evolver(const GradcheckOptions& o) {
  GradcheckResult r;
  r.component = "loss_evolver";
  const int n = o.side;
  const int margin = 2;
  for (int inst = 0; inst < o.instances; ++inst) {
    Rng rng(derive_seed(o.seed, 4, static_cast<std::uint64_t>(inst)));
    WarpCase c = random_warp_case(rng, n);
    const Grid next = uniform_grid(rng, n, 1.0, 2.5);
    const EvolverLoss a = loss_evolver(c.flow, c.intensity, c.frame, next, margin);
    const Grid pred = warp(c.flow, c.intensity, c.frame);
    auto f = [&] { return loss_evolver(c.flow, c.intensity, c.frame, next, margin).value; };
    const double gmax =
        std::max({max_abs(a.grad_motion.u.values()), max_abs(a.grad_motion.v.values()), max_abs(a.grad_intensity.values())});
    const double floor = std::max(1e-3 * gmax, 1e-12);
    auto probe = [&](double& x, double analytic) {
      const double x0 = x;
      x = x0 + kStep;
      const double fp = f();
      x = x0 - kStep;
      const double fm = f();
      x = x0;
      accumulate(r, analytic, (fp - fm) / (2 * kStep), floor);
    };
    for (int row = 0; row < n; ++row)
      for (int col = 0; col < n; ++col) {
        const std::size_t i = static_cast<std::size_t>(row) * n + col;
        if (std::abs(pred[i] - next[i]) < kKinkMargin) {
          r.skipped += 3;
          continue;
        }
        if (near_sampling_kink(col - c.flow.u[i], n)) ++r.skipped;
        else probe(c.flow.u[i], a.grad_motion.u[i]);
        if (near_sampling_kink(row - c.flow.v[i], n)) ++r.skipped;
        else probe(c.flow.v[i], a.grad_motion.v[i]);
        probe(c.intensity[i], a.grad_intensity[i]);
      }
    ++r.instances;
  }
  return r;
}

// ---- end-to-end probe ------------------------------------------------------

/// Evolver loss at lead 2 through a small model, against finite differences
/// on a handful of evolver parameters.
GradcheckResult check_end_to_end(const GradcheckOptions& o) {
  GradcheckResult r;
  r.component = "end_to_end";
  r.tolerance = kEndToEndGradTolerance;
  const int n = o.side;
  constexpr int kProbes = 5;

  ModelConfig cfg;
  cfg.context_frames = 2;
  cfg.horizon = 3;
  cfg.lead_time_classes = 3;
  cfg.channels = 4;
  cfg.embed_dim = 2;
  cfg.reduc_factor = 2;
  cfg.dropout = 0.0;
  cfg.evolver_depth = 1;
  cfg.evolver_dim = 4;

  for (int inst = 0; inst < o.instances; ++inst) {
    Rng rng(derive_seed(o.seed, 5, static_cast<std::uint64_t>(inst)));
    Model model(cfg, derive_seed(o.seed, 6, static_cast<std::uint64_t>(inst)));
    model.set_normalization({1.0, 0.5, 0.1});
    // Zero-initialized output layers would hide most paths; randomize them.
    for (auto& p : model.parameters())
      if (p.name.starts_with("decoder.out.") || p.name.starts_with("evolver.out."))
        for (auto& v : p.tensor.mutable_value()) v = rng.uniform(-0.3, 0.3);

    std::vector<Grid> context{uniform_grid(rng, n, 0.0, 2.0), uniform_grid(rng, n, 0.0, 2.0)};
    const Grid prev = uniform_grid(rng, n, 1.0, 2.0);
    const Grid next = uniform_grid(rng, n, 1.0, 2.5);
    const LatentState l1 = model.ved_encode(context);

    auto loss_value = [&](const ParamSet& p, ad::Tape& t) {
      const ad::Tensor z = ad::Tensor::constant({1, l1.embed_dim, l1.side, l1.side}, l1.mu);
      const ad::Tensor fields = model.decode(t, p, model.evolve(t, p, z, 2), nullptr);
      return evolver_loss_node(t, fields, prev, next, 2);
    };
    const std::array<ParamGroup, 1> evolver{ParamGroup::Evolver};
    ParamSet p = model.snapshot(evolver);
    {
      ad::Tape t;
      t.backward(loss_value(p, t));
    }
    double gmax = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i].requires_grad()) gmax = std::max(gmax, max_abs(p[i].grad()));
    const double floor = std::max(1e-3 * gmax, 1e-12);

    auto fd = [&](ad::Tensor& param, std::size_t e, double h) {
      auto v = param.mutable_value();
      const double x0 = v[e];
      v[e] = x0 + h;
      ad::Tape tp(ad::Tape::Mode::Inference);
      const double fp = loss_value(p, tp).item();
      v[e] = x0 - h;
      ad::Tape tm(ad::Tape::Mode::Inference);
      const double fm = loss_value(p, tm).item();
      v[e] = x0;
      return (fp - fm) / (2 * h);
    };

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i].requires_grad()) candidates.push_back(i);
    int accepted = 0;
    for (int attempt = 0; attempt < 200 && accepted < kProbes; ++attempt) {
      const std::size_t pi = candidates[static_cast<std::size_t>(rng.index(candidates.size()))];
      const std::size_t e = static_cast<std::size_t>(rng.index(p[pi].numel()));
      const double analytic = p[pi].grad()[e];
      if (std::abs(analytic) < floor) continue;
      const double full = fd(p[pi], e, kStep);
      const double half = fd(p[pi], e, 0.5 * kStep);
      // Disagreement between step sizes means the stencil straddles a kink
      // (a ReLU or a grid line crossed by the warp).
      if (std::abs(full - half) > 1e-2 * std::max(std::abs(full), floor)) {
        ++r.skipped;
        continue;
      }
      accumulate(r, analytic, full, floor);
      ++accepted;
    }
    if (accepted < kProbes) r.max_rel_error = std::max(r.max_rel_error, 1.0);
    ++r.instances;
  }
  return r;
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opts) {
  if (opts.instances < 1 || opts.side < 4 || opts.side % 4 != 0)
    throw InvalidArgument("gradcheck needs at least one instance and a side divisible by 4");
  std::vector<GradcheckResult> out;
  out.push_back(check_warp(opts));
  for (auto& r : check_ops(opts)) out.push_back(std::move(r));
  out.push_back(check_warp_node(opts));
  out.push_back(check_loss_ved(opts));
  out.push_back(check_loss_evolver(opts));
  out.push_back(check_end_to_end(opts));
  return out;
}

std::string format_result(const GradcheckResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "component=%s max_rel_error=%.3e tolerance=%.0e instances=%d checked=%zu skipped=%zu status=%s",
                r.component.c_str(), r.max_rel_error, r.tolerance, r.instances, r.checked, r.skipped,
                r.passed() ? "pass" : "fail");
  return buf;
}

}  // namespace nowcast
