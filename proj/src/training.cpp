#include "nowcast/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <thread>

#include "nowcast/warp_node.hpp"

namespace nowcast {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double rms(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

/// Gradient and loss terms of one sample.
struct SampleResult {
  std::vector<std::vector<double>> grads;  // per parameter; empty when frozen
  double loss = 0.0;
  VedLoss terms;
  int lead = 1;
};

/// Runs fn(slot) for slot in [0, count) on up to `threads` workers. Each slot
/// owns its output, so the result does not depend on scheduling.
template <class Fn>
void run_slots(int count, int threads, Fn&& fn) {
  const int workers = std::clamp(threads, 1, std::max(count, 1));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<std::vector<double>> collect_grads(const ParamSet& p) {
  std::vector<std::vector<double>> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].requires_grad()) g[i].assign(p[i].grad().begin(), p[i].grad().end());
  return g;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Shared optimizer loop. `sample_fn(step, slot, index)` computes one sample.
template <class SampleFn>
TrainReport optimize(Model& model, std::span<const TrainingSample> samples, const TrainConfig& cfg,
                     const std::vector<ParamGroup>& groups, const std::string& stage, SampleFn&& sample_fn) {
  cfg.validate();
  if (samples.empty()) throw InvalidArgument("no training samples");
  auto& params = model.parameters();
  std::vector<bool> trained(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    trained[i] = std::find(groups.begin(), groups.end(), group_of(params[i].name)) != groups.end();
  std::vector<ad::AdamState> adam(params.size());

  TrainReport report;
  std::vector<SampleResult> results(static_cast<std::size_t>(cfg.batch));
  for (int step = 0; step < cfg.steps; ++step) {
    Rng pick(derive_seed(cfg.seed, 1, static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> indices(static_cast<std::size_t>(cfg.batch));
    for (auto& idx : indices) idx = static_cast<std::size_t>(pick.index(samples.size()));

    run_slots(cfg.batch, cfg.threads, [&](int slot) {
      results[static_cast<std::size_t>(slot)] = sample_fn(step, slot, indices[static_cast<std::size_t>(slot)]);
    });

    // Reduce in slot order so the sum is independent of the thread count.
    const double inv = 1.0 / cfg.batch;
    std::vector<std::vector<double>> grad(params.size());
    bool finite = true;
    double loss = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trained[i]) continue;
      grad[i].assign(params[i].tensor.numel(), 0.0);
      for (const auto& r : results)
        for (std::size_t j = 0; j < grad[i].size(); ++j) grad[i][j] += r.grads[i][j];
      for (auto& g : grad[i]) g *= inv;
      finite = finite && all_finite(grad[i]);
    }
    for (const auto& r : results) loss += r.loss * inv;
    finite = finite && std::isfinite(loss);
    if (!finite) {
      report.diverged = true;
      report.message = stage + " training diverged at step " + std::to_string(step) + " (non-finite loss or gradient)";
      break;
    }

    std::vector<std::vector<double>> before(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trained[i]) continue;
      auto v = params[i].tensor.mutable_value();
      before[i].assign(v.begin(), v.end());
      ad::adam_step(v, grad[i], adam[i], cfg.adam);
      finite = finite && all_finite(v);
    }
    if (!finite) {
      for (std::size_t i = 0; i < params.size(); ++i)
        if (trained[i]) std::copy(before[i].begin(), before[i].end(), params[i].tensor.mutable_value().begin());
      report.diverged = true;
      report.message = stage + " training diverged at step " + std::to_string(step) + " (non-finite update)";
      break;
    }
    ++report.steps_completed;

    // One row per lead present in the batch, leads in ascending order.
    std::map<int, TrainLogRow> rows;
    for (const auto& r : results) {
      TrainLogRow& row = rows[r.lead];
      row.step = step;
      row.stage = stage;
      row.lead = r.lead;
      ++row.samples;
      row.loss += r.loss;
      row.l_int += r.terms.l_int;
      row.l_motion += r.terms.l_motion;
      row.l_cos += r.terms.l_cos;
      row.l_kl += r.terms.l_kl;
    }
    for (auto& [lead, row] : rows) {
      const double m = 1.0 / row.samples;
      row.loss *= m;
      if (stage == "ved") {
        row.l_int *= m;
        row.l_motion *= m;
        row.l_cos *= m;
        row.l_kl *= m;
      } else {
        row.l_int = row.l_motion = row.l_cos = row.l_kl = kNaN;
      }
      report.log.push_back(row);
    }
  }
  return report;
}

}  // namespace

TrainingSample make_training_sample(std::span<const Grid> frames, int context_frames, const FlowConfig& flow,
                                    int crop_margin) {
  if (context_frames < 1 || static_cast<int>(frames.size()) <= context_frames)
    throw InvalidArgument("a training window needs more frames than the context length");
  const int flow_history = flow.context_frames - 1;
  if (flow_history < 1 || flow_history > context_frames)
    throw InvalidArgument("flow.context_frames must lie in 2.." + std::to_string(context_frames + 1));
  TrainingSample s;
  s.context.assign(frames.begin(), frames.begin() + context_frames);
  s.future.assign(frames.begin() + context_frames, frames.end());
  std::vector<Grid> window(frames.begin() + (context_frames - flow_history), frames.begin() + context_frames + 1);
  s.targets = derive_targets(window, flow, crop_margin);
  return s;
}

Normalization fit_normalization(std::span<const TrainingSample> samples) {
  double in2 = 0.0, flow2 = 0.0, int2 = 0.0;
  std::size_t in_n = 0, flow_n = 0, int_n = 0;
  for (const auto& s : samples) {
    for (const auto& g : s.context) {
      const double r = rms(g.values());
      in2 += r * r * static_cast<double>(g.values().size());
      in_n += g.values().size();
    }
    for (const Grid* g : {&s.targets.motion_target.u, &s.targets.motion_target.v}) {
      const double r = rms(g->values());
      flow2 += r * r * static_cast<double>(g->values().size());
      flow_n += g->values().size();
    }
    const double r = rms(s.targets.intensity_target.values.values());
    int2 += r * r * static_cast<double>(s.targets.intensity_target.values.values().size());
    int_n += s.targets.intensity_target.values.values().size();
  }
  // Floors keep an all-dry or motionless training set usable.
  auto scale = [](double sum, std::size_t n, double floor) {
    const double v = n ? std::sqrt(sum / static_cast<double>(n)) : 0.0;
    return std::max(v, floor);
  };
  Normalization norm;
  norm.input_scale = scale(in2, in_n, 1e-3);
  norm.flow_scale = scale(flow2, flow_n, 1e-2);
  norm.intensity_scale = scale(int2, int_n, 1e-3);
  return norm;
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("training.steps must be non-negative");
  if (batch < 1) throw ConfigError("training.batch must be at least 1");
  if (!(adam.lr > 0.0) || !std::isfinite(adam.lr)) throw ConfigError("training.lr must be positive");
  if (threads < 1) throw ConfigError("thread count must be at least 1");
  weights.validate();
}

TrainReport train_ved(Model& model, std::span<const TrainingSample> samples, const TrainConfig& cfg) {
  const std::vector<ParamGroup> groups{ParamGroup::Encoder, ParamGroup::Decoder};
  const Model& m = model;
  return optimize(model, samples, cfg, groups, "ved", [&](int step, int slot, std::size_t index) {
    const TrainingSample& s = samples[index];
    const std::uint64_t stream = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) +
                                 static_cast<std::uint64_t>(slot);
    Rng noise_rng(derive_seed(cfg.seed, 2, stream));
    Rng dropout_rng(derive_seed(cfg.seed, 3, stream));
    std::vector<double> noise(m.latent_size(s.context.front().n()));
    for (auto& z : noise) z = noise_rng.normal();

    ParamSet p = m.snapshot(groups);
    ad::Tape tape;
    const auto enc = m.encode(tape, p, s.context, noise, &dropout_rng);
    const ad::Tensor fields = m.decode(tape, p, enc.sample, &dropout_rng);
    SampleResult r;
    const ad::Tensor loss =
        ved_loss_node(tape, fields, enc.mu, enc.log_var, s.targets, cfg.weights, cfg.kl_order, &r.terms);
    tape.backward(loss);
    r.loss = loss.item();
    r.grads = collect_grads(p);
    r.lead = 1;
    return r;
  });
}

TrainReport train_evolver(Model& model, std::span<const TrainingSample> samples, const TrainConfig& cfg) {
  const std::vector<ParamGroup> groups{ParamGroup::Evolver};
  const Model& m = model;
  const int horizon = m.config().horizon;
  if (horizon < 2) throw ConfigError("evolver training needs model.horizon of at least 2");
  for (const auto& s : samples)
    if (static_cast<int>(s.future.size()) < horizon)
      throw InvalidArgument("training sample holds " + std::to_string(s.future.size()) + " future frames, horizon is " +
                            std::to_string(horizon));

  // The encoder is frozen, so each sample's L_1 (the latent mean) is fixed.
  std::vector<LatentState> latents(samples.size());
  run_slots(static_cast<int>(samples.size()), cfg.threads,
            [&](int i) { latents[static_cast<std::size_t>(i)] = m.ved_encode(samples[static_cast<std::size_t>(i)].context); });

  return optimize(model, samples, cfg, groups, "evolver", [&](int step, int slot, std::size_t index) {
    const TrainingSample& s = samples[index];
    const std::uint64_t stream = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) +
                                 static_cast<std::uint64_t>(slot);
    Rng lead_rng(derive_seed(cfg.seed, 4, stream));
    const int k = 2 + static_cast<int>(lead_rng.index(static_cast<std::uint64_t>(horizon - 1)));

    const LatentState& l1 = latents[index];
    ParamSet p = m.snapshot(groups);
    ad::Tape tape;
    const ad::Tensor z = ad::Tensor::constant({1, l1.embed_dim, l1.side, l1.side}, l1.mu);
    const ad::Tensor lk = m.evolve(tape, p, z, k);
    const ad::Tensor fields = m.decode(tape, p, lk, nullptr);
    const auto k_index = static_cast<std::size_t>(k);
    const ad::Tensor loss =
        evolver_loss_node(tape, fields, s.future[k_index - 2], s.future[k_index - 1], s.targets.crop_margin);
    tape.backward(loss);
    SampleResult r;
    r.loss = loss.item();
    r.grads = collect_grads(p);
    r.lead = k;
    return r;
  });
}

void write_training_log(std::ostream& os, const std::vector<TrainLogRow>& rows) {
  auto num = [](double v) -> std::string {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  };
  os << "step,stage,lead,samples,loss,l_int,l_motion,l_cos,l_kl\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.stage << ',' << r.lead << ',' << r.samples << ',' << num(r.loss) << ',' << num(r.l_int)
       << ',' << num(r.l_motion) << ',' << num(r.l_cos) << ',' << num(r.l_kl) << '\n';
}

int threads_from_env() {
  const char* v = std::getenv("NOWCAST_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("NOWCAST_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<int>(std::min<long>(n, 256));
}

}  // namespace nowcast
