#include "nowcast/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace nowcast::ad {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

namespace {

void check_shape(const char* op, const Shape& s) {
  if (s.empty() || s.size() > 4) throw ShapeError(op, "rank must be 1..4, got " + to_string(s));
  for (int d : s)
    if (d <= 0) throw ShapeError(op, "non-positive dimension in " + to_string(s));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.shape().size() != rank)
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
}

}  // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  check_shape("constant", shape);
  if (values.size() != ad::numel(shape)) throw ShapeError("constant", "value count does not match " + to_string(shape));
  auto s = std::make_shared<TensorStorage>();
  s->shape = std::move(shape);
  s->value = std::move(values);
  return Tensor(std::move(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  Tensor t = constant(std::move(shape), std::vector<double>(n, 0.0));
  if (requires_grad) {
    t.storage_->requires_grad = true;
    t.storage_->grad.assign(n, 0.0);
  }
  return t;
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.storage_->requires_grad = true;
  t.storage_->grad.assign(t.numel(), 0.0);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "tensor has " + std::to_string(numel()) + " elements");
  return storage_->value[0];
}

void Tensor::zero_grad() const { std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0); }

Tensor Tensor::detach_copy(bool requires_grad) const {
  return requires_grad ? parameter(shape(), storage_->value) : constant(shape(), storage_->value);
}

Tensor Tape::make_output(Shape shape, std::initializer_list<const Tensor*> inputs) {
  return make_output(std::move(shape), std::vector<const Tensor*>(inputs));
}

Tensor Tape::make_output(Shape shape, const std::vector<const Tensor*>& inputs) {
  bool rg = false;
  if (recording())
    for (const Tensor* in : inputs) rg = rg || in->requires_grad();
  return Tensor::zeros(std::move(shape), rg);
}

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw TapeError("tape already ran backward; record a new forward pass");
  if (recording()) entries_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward called twice on the same tape");
  if (!recording()) throw TapeError("backward on an inference tape");
  if (!loss.defined() || loss.numel() != 1) throw TapeError("backward needs a scalar loss");
  if (!loss.requires_grad()) throw TapeError("loss does not depend on any tracked tensor");
  consumed_ = true;
  loss.storage_->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) throw ShapeError("matmul", to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor out = t.make_output({M, N}, {&a, &b});
  auto o = out.mutable_value();
  const auto av = a.value(), bv = b.value();
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) {
      const double x = av[i * K + k];
      for (int j = 0; j < N; ++j) o[i * N + j] += x * bv[k * N + j];
    }
  if (out.requires_grad())
    t.record([a, b, out, M, K, N]() mutable {
      const auto g = out.grad();
      const auto av = a.value(), bv = b.value();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            double s = 0;
            for (int j = 0; j < N; ++j) s += g[i * N + j] * bv[k * N + j];
            ga[i * K + k] += s;
          }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            const double x = av[i * K + k];
            for (int j = 0; j < N; ++j) gb[k * N + j] += x * g[i * N + j];
          }
      }
    });
  return out;
}

namespace {

struct ConvGeom {
  int B, C, H, W, O, k, pad, stride, Ho, Wo;
  // Output column range [lo, hi] whose input column ox*stride + kx - pad is in range.
  std::pair<int, int> out_range(int kk, int in_extent, int out_extent) const {
    int lo = 0;
    while (lo < out_extent && lo * stride + kk - pad < 0) ++lo;
    int hi = out_extent - 1;
    while (hi >= lo && hi * stride + kk - pad >= in_extent) --hi;
    return {lo, hi};
  }
};

}  // namespace

Tensor conv2d(Tape& t, const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  require_rank("conv2d", bias, 1);
  ConvGeom g{};
  g.B = x.dim(0), g.C = x.dim(1), g.H = x.dim(2), g.W = x.dim(3);
  g.O = w.dim(0), g.k = w.dim(2);
  if (w.dim(1) != g.C) throw ShapeError("conv2d", "weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
  if (g.k != w.dim(3) || (g.k != 1 && g.k != 3)) throw ShapeError("conv2d", "kernel must be 1x1 or 3x3");
  if (bias.dim(0) != g.O) throw ShapeError("conv2d", "bias " + to_string(bias.shape()));
  if (stride != 1 && stride != 2) throw ShapeError("conv2d", "stride must be 1 or 2");
  if (g.H % stride || g.W % stride) throw ShapeError("conv2d", "input side not divisible by stride");
  g.pad = g.k / 2;
  g.stride = stride;
  g.Ho = g.H / stride;
  g.Wo = g.W / stride;

  Tensor out = t.make_output({g.B, g.O, g.Ho, g.Wo}, {&x, &w, &bias});
  {
    auto o = out.mutable_value();
    const auto xv = x.value(), wv = w.value(), bv = bias.value();
    for (int b = 0; b < g.B; ++b)
      for (int oc = 0; oc < g.O; ++oc) {
        double* op = o.data() + (static_cast<std::size_t>(b) * g.O + oc) * g.Ho * g.Wo;
        std::fill(op, op + g.Ho * g.Wo, bv[oc]);
        for (int c = 0; c < g.C; ++c) {
          const double* ip = xv.data() + (static_cast<std::size_t>(b) * g.C + c) * g.H * g.W;
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              const double wk = wv[((static_cast<std::size_t>(oc) * g.C + c) * g.k + ky) * g.k + kx];
              const auto [ylo, yhi] = g.out_range(ky, g.H, g.Ho);
              const auto [xlo, xhi] = g.out_range(kx, g.W, g.Wo);
              for (int oy = ylo; oy <= yhi; ++oy) {
                const double* irow = ip + static_cast<std::size_t>(oy * g.stride + ky - g.pad) * g.W + (kx - g.pad);
                double* orow = op + static_cast<std::size_t>(oy) * g.Wo;
                if (g.stride == 1)
                  for (int ox = xlo; ox <= xhi; ++ox) orow[ox] += wk * irow[ox];
                else
                  for (int ox = xlo; ox <= xhi; ++ox) orow[ox] += wk * irow[2 * ox];
              }
            }
        }
      }
  }
  if (out.requires_grad())
    t.record([x, w, bias, out, g]() mutable {
      const auto go = out.grad();
      const auto xv = x.value(), wv = w.value();
      const bool gx_on = x.requires_grad(), gw_on = w.requires_grad();
      std::span<double> gx = gx_on ? x.mutable_grad() : std::span<double>{};
      std::span<double> gw = gw_on ? w.mutable_grad() : std::span<double>{};
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (int b = 0; b < g.B; ++b)
          for (int oc = 0; oc < g.O; ++oc) {
            const double* gp = go.data() + (static_cast<std::size_t>(b) * g.O + oc) * g.Ho * g.Wo;
            double s = 0;
            for (int i = 0; i < g.Ho * g.Wo; ++i) s += gp[i];
            gb[oc] += s;
          }
      }
      if (!gx_on && !gw_on) return;
      for (int b = 0; b < g.B; ++b)
        for (int oc = 0; oc < g.O; ++oc) {
          const double* gp = go.data() + (static_cast<std::size_t>(b) * g.O + oc) * g.Ho * g.Wo;
          for (int c = 0; c < g.C; ++c) {
            const std::size_t plane = (static_cast<std::size_t>(b) * g.C + c) * g.H * g.W;
            for (int ky = 0; ky < g.k; ++ky)
              for (int kx = 0; kx < g.k; ++kx) {
                const std::size_t widx = ((static_cast<std::size_t>(oc) * g.C + c) * g.k + ky) * g.k + kx;
                const double wk = wv[widx];
                const auto [ylo, yhi] = g.out_range(ky, g.H, g.Ho);
                const auto [xlo, xhi] = g.out_range(kx, g.W, g.Wo);
                double acc = 0;
                for (int oy = ylo; oy <= yhi; ++oy) {
                  const std::size_t ibase = plane + static_cast<std::size_t>(oy * g.stride + ky - g.pad) * g.W + (kx - g.pad);
                  const double* grow = gp + static_cast<std::size_t>(oy) * g.Wo;
                  const double* irow = xv.data() + ibase;
                  if (g.stride == 1) {
                    if (gx_on) {
                      double* gxrow = gx.data() + ibase;
                      for (int ox = xlo; ox <= xhi; ++ox) gxrow[ox] += wk * grow[ox];
                    }
                    if (gw_on)
                      for (int ox = xlo; ox <= xhi; ++ox) acc += grow[ox] * irow[ox];
                  } else {
                    if (gx_on) {
                      double* gxrow = gx.data() + ibase;
                      for (int ox = xlo; ox <= xhi; ++ox) gxrow[2 * ox] += wk * grow[ox];
                    }
                    if (gw_on)
                      for (int ox = xlo; ox <= xhi; ++ox) acc += grow[ox] * irow[2 * ox];
                  }
                }
                if (gw_on) gw[widx] += acc;
              }
          }
        }
    });
  return out;
}

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  Tensor out = t.make_output(a.shape(), {&a, &b});
  auto o = out.mutable_value();
  const auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (out.requires_grad())
    t.record([a, b, out]() mutable {
      const auto g = out.grad();
      for (const Tensor* in : {&a, &b})
        if (in->requires_grad()) {
          auto gi = in->mutable_grad();
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
  return out;
}

Tensor add_channel_bias(Tape& t, const Tensor& x, const Tensor& b) {
  require_rank("add_channel_bias", x, 4);
  require_rank("add_channel_bias", b, 2);
  if (b.dim(0) != x.dim(0) || b.dim(1) != x.dim(1))
    throw ShapeError("add_channel_bias", to_string(x.shape()) + " + " + to_string(b.shape()));
  const std::size_t planes = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out = t.make_output(x.shape(), {&x, &b});
  auto o = out.mutable_value();
  const auto xv = x.value(), bv = b.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) o[p * hw + i] = xv[p * hw + i] + bv[p];
  if (out.requires_grad())
    t.record([x, b, out, planes, hw]() mutable {
      const auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          double s = 0;
          for (std::size_t i = 0; i < hw; ++i) s += g[p * hw + i];
          gb[p] += s;
        }
      }
    });
  return out;
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  Tensor out = t.make_output(a.shape(), {&a, &b});
  auto o = out.mutable_value();
  const auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (out.requires_grad())
    t.record([a, b, out]() mutable {
      const auto g = out.grad();
      const auto av = a.value(), bv = b.value();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  return out;
}

Tensor scale(Tape& t, const Tensor& a, double factor) {
  Tensor out = t.make_output(a.shape(), {&a});
  auto o = out.mutable_value();
  const auto av = a.value();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  if (out.requires_grad())
    t.record([a, out, factor]() mutable {
      const auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  return out;
}

Tensor scale_channels(Tape& t, const Tensor& x, std::vector<double> factors) {
  require_rank("scale_channels", x, 4);
  const int C = x.dim(1);
  if (static_cast<int>(factors.size()) != C)
    throw ShapeError("scale_channels", std::to_string(factors.size()) + " factors for " + std::to_string(C) + " channels");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out = t.make_output(x.shape(), {&x});
  auto o = out.mutable_value();
  const auto xv = x.value();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factors[(i / hw) % C];
  if (out.requires_grad())
    t.record([x, out, factors = std::move(factors), hw, C]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factors[(i / hw) % C];
    });
  return out;
}

Tensor relu(Tape& t, const Tensor& a) {
  Tensor out = t.make_output(a.shape(), {&a});
  auto o = out.mutable_value();
  const auto av = a.value();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > 0 ? av[i] : 0.0;
  if (out.requires_grad())
    t.record([a, out]() mutable {
      const auto g = out.grad();
      const auto av = a.value();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0) ga[i] += g[i];
    });
  return out;
}

Tensor sigmoid(Tape& t, const Tensor& a) {
  Tensor out = t.make_output(a.shape(), {&a});
  auto o = out.mutable_value();
  const auto av = a.value();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-av[i]));
  if (out.requires_grad())
    t.record([a, out]() mutable {
      const auto g = out.grad();
      const auto ov = out.value();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i] * (1.0 - ov[i]);
    });
  return out;
}

Tensor mean(Tape& t, const Tensor& a) {
  Tensor out = t.make_output({1}, {&a});
  double s = 0;
  for (double v : a.value()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  out.mutable_value()[0] = s * inv;
  if (out.requires_grad())
    t.record([a, out, inv]() mutable {
      const double g = out.grad()[0] * inv;
      for (auto& gi : a.mutable_grad()) gi += g;
    });
  return out;
}

Tensor l1_distance(Tape& t, const Tensor& a, const Tensor& b) {
  require_same("l1_distance", a, b);
  Tensor out = t.make_output({1}, {&a, &b});
  const auto av = a.value(), bv = b.value();
  double s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  const double inv = 1.0 / static_cast<double>(a.numel());
  out.mutable_value()[0] = s * inv;
  if (out.requires_grad())
    t.record([a, b, out, inv]() mutable {
      const double g = out.grad()[0] * inv;
      const auto av = a.value(), bv = b.value();
      for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - bv[i];
        const double sg = (d > 0) - (d < 0);
        if (a.requires_grad()) a.mutable_grad()[i] += g * sg;
        if (b.requires_grad()) b.mutable_grad()[i] -= g * sg;
      }
    });
  return out;
}

Tensor reshape(Tape& t, const Tensor& a, Shape shape) {
  check_shape("reshape", shape);
  if (numel(shape) != a.numel()) throw ShapeError("reshape", to_string(a.shape()) + " -> " + to_string(shape));
  Tensor out = t.make_output(std::move(shape), {&a});
  std::copy(a.value().begin(), a.value().end(), out.mutable_value().begin());
  if (out.requires_grad())
    t.record([a, out]() mutable {
      const auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  return out;
}

Tensor upsample2x(Tape& t, const Tensor& x) {
  require_rank("upsample2x", x, 4);
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = t.make_output({B, C, 2 * H, 2 * W}, {&x});
  auto o = out.mutable_value();
  const auto xv = x.value();
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  for (std::size_t p = 0; p < planes; ++p)
    for (int r = 0; r < 2 * H; ++r)
      for (int c = 0; c < 2 * W; ++c)
        o[(p * 2 * H + r) * 2 * W + c] = xv[(p * H + r / 2) * W + c / 2];
  if (out.requires_grad())
    t.record([x, out, planes, H, W]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t p = 0; p < planes; ++p)
        for (int r = 0; r < 2 * H; ++r)
          for (int c = 0; c < 2 * W; ++c) gx[(p * H + r / 2) * W + c / 2] += g[(p * 2 * H + r) * 2 * W + c];
    });
  return out;
}

Tensor slice_channels(Tape& t, const Tensor& x, int begin, int count) {
  require_rank("slice_channels", x, 4);
  const int B = x.dim(0), C = x.dim(1);
  if (begin < 0 || count < 1 || begin + count > C)
    throw ShapeError("slice_channels", "range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                           ") outside " + std::to_string(C) + " channels");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out = t.make_output({B, count, x.dim(2), x.dim(3)}, {&x});
  auto o = out.mutable_value();
  const auto xv = x.value();
  for (int b = 0; b < B; ++b)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(b) * C + begin) * hw), count * hw,
                o.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * count * hw));
  if (out.requires_grad())
    t.record([x, out, B, C, begin, count, hw]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (int b = 0; b < B; ++b)
        for (std::size_t i = 0; i < count * hw; ++i)
          gx[(static_cast<std::size_t>(b) * C + begin) * hw + i] += g[static_cast<std::size_t>(b) * count * hw + i];
    });
  return out;
}

Tensor gaussian_sample(Tape& t, const Tensor& mu, const Tensor& log_var, std::span<const double> noise) {
  require_same("gaussian_sample", mu, log_var);
  if (noise.size() != mu.numel()) throw ShapeError("gaussian_sample", "noise length does not match mu");
  Tensor out = t.make_output(mu.shape(), {&mu, &log_var});
  auto o = out.mutable_value();
  const auto mv = mu.value(), lv = log_var.value();
  std::vector<double> eps(noise.begin(), noise.end());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = mv[i] + std::exp(0.5 * lv[i]) * eps[i];
  if (out.requires_grad())
    t.record([mu, log_var, out, eps = std::move(eps)]() mutable {
      const auto g = out.grad();
      const auto lv = log_var.value();
      if (mu.requires_grad()) {
        auto gm = mu.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
      }
      if (log_var.requires_grad()) {
        auto gl = log_var.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i] * 0.5 * std::exp(0.5 * lv[i]) * eps[i];
      }
    });
  return out;
}

Tensor dropout(Tape& t, const Tensor& x, std::span<const double> keep_mask, double rate) {
  if (keep_mask.size() != x.numel()) throw ShapeError("dropout", "mask length does not match input");
  if (!(rate >= 0 && rate < 1)) throw ShapeError("dropout", "rate must be in [0, 1)");
  const double k = 1.0 / (1.0 - rate);
  std::vector<double> m(keep_mask.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = keep_mask[i] * k;
  return mul(t, x, Tensor::constant(x.shape(), std::move(m)));
}

Tensor custom(Tape& t, const std::vector<Tensor>& inputs, Shape shape, std::vector<double> value, CustomVjp vjp) {
  check_shape("custom", shape);
  if (value.size() != numel(shape)) throw ShapeError("custom", "value count does not match " + to_string(shape));
  std::vector<const Tensor*> ptrs;
  for (const auto& in : inputs) ptrs.push_back(&in);
  Tensor out = t.make_output(std::move(shape), ptrs);
  std::copy(value.begin(), value.end(), out.mutable_value().begin());
  if (out.requires_grad())
    t.record([inputs, out, vjp = std::move(vjp)]() mutable {
      std::vector<std::span<double>> grads;
      for (auto& in : inputs) grads.push_back(in.requires_grad() ? in.mutable_grad() : std::span<double>{});
      vjp(out.grad(), grads);
    });
  return out;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adam_step", "parameter and gradient sizes differ");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

}  // namespace nowcast::ad
