// Command-line front end. Exit codes: 0 success, 1 self-check failure or
// diverged training, 2 data error, 3 config error.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/advection.hpp"
#include "nowcast/config.hpp"
#include "nowcast/dataset.hpp"
#include "nowcast/gradcheck.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/model.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/tpnn.hpp"
#include "nowcast/training.hpp"

namespace fs = std::filesystem;
using namespace nowcast;

namespace {

enum Exit { kOk = 0, kSelfCheck = 1, kDataError = 2, kConfigError = 3 };

/// Errors in how a command was invoked; reported as config errors.
struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

ToolkitConfig load_config(const std::string& path) {
  if (path.empty()) return ToolkitConfig{};
  if (!fs::exists(path)) throw ConfigError("config file " + path + " not found");
  return ToolkitConfig::load(path);
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError(FormatError::Kind::Io, 0, "cannot write " + path.string());
  return os;
}

RasterStack frames_to_stack(const std::vector<PrecipField>& frames, std::int64_t step) {
  RasterStack s;
  s.height = s.width = static_cast<std::uint32_t>(frames.front().n());
  s.step_seconds = static_cast<std::uint32_t>(step);
  for (const auto& f : frames) {
    s.timestamps.push_back(f.timestamp);
    for (double v : f.values.values()) s.values.push_back(static_cast<float>(v));
  }
  return s;
}

/// Frames of a raster stack; square rasters with finite values only.
std::vector<PrecipField> stack_to_frames(const RasterStack& s, const std::string& name) {
  if (s.height != s.width) throw FormatError(FormatError::Kind::BadDimensions, 12, name + ": rasters are not square");
  const int n = static_cast<int>(s.height);
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  std::vector<PrecipField> out;
  for (std::size_t t = 0; t < s.timestamps.size(); ++t) {
    PrecipField f{Grid(n), s.timestamps[t]};
    for (std::size_t i = 0; i < cells; ++i) {
      const float v = s.values[t * cells + i];
      if (!std::isfinite(v)) throw FormatError(FormatError::Kind::InvalidValue, 0, name + ": non-finite value");
      f.values[i] = v;
    }
    out.push_back(std::move(f));
  }
  return out;
}

// ---- commands ----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int events = 200;
  int n = 64;
  int frames = 16;
  std::uint64_t seed = 0;
  double speed_min = 0.5, speed_max = 2.0;
  double growth_min = -0.02, growth_max = 0.05;
};

int cmd_synth(const SynthArgs& a) {
  CorpusSpec spec;
  spec.events = a.events;
  spec.storm.n = a.n;
  spec.storm.frames = a.frames;
  spec.storm.random_direction = true;
  spec.storm.speed_min = a.speed_min;
  spec.storm.speed_max = a.speed_max;
  spec.storm.growth_min = a.growth_min;
  spec.storm.growth_max = a.growth_max;
  SplitManifest manifest;
  const auto seqs = synthesize_corpus(spec, a.seed, manifest);
  write_event_dir(a.out, seqs, manifest);
  std::cout << "events=" << seqs.size() << " train=" << manifest.train.size()
            << " validation=" << manifest.validation.size() << " test=" << manifest.test.size() << '\n';
  return kOk;
}

struct ExtractArgs {
  std::string input, out;
  double tau = kDefaultEventTau;
};

int cmd_extract(const ExtractArgs& a) {
  const FieldSequence seq = read_sequence(a.input);
  const auto events = extract_events(seq, a.tau, fs::path(a.input).filename().string());
  auto os = open_output(a.out);
  write_manifest_csv(os, events, nullptr);
  std::cout << "events=" << events.size() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string stage, config, data, weights, init, log;
  std::optional<std::uint64_t> seed;
  int max_windows = 0;
};

int cmd_train(const TrainArgs& a) {
  ToolkitConfig cfg = load_config(a.config);
  if (!a.data.empty()) cfg.paths.data_dir = a.data;
  if (!a.weights.empty()) cfg.paths.weights = a.weights;
  if (a.seed) cfg.training.seed = *a.seed;
  if (cfg.paths.data_dir.empty()) throw UsageError("no data directory given (--data or paths.data_dir)");
  if (cfg.paths.weights.empty()) throw UsageError("no weights path given (--weights or paths.weights)");
  if (a.stage != "ved" && a.stage != "evolver") throw UsageError("--stage must be ved or evolver");

  std::optional<Model> model;
  if (a.stage == "evolver") {
    const std::string init = a.init.empty() ? cfg.paths.weights : a.init;
    if (!fs::exists(init)) throw ConfigError("stage evolver needs trained encoder-decoder weights; " + init + " not found");
    model.emplace(load_weights(init));
    if (!a.config.empty() && !(model->config() == cfg.model))
      throw ConfigError("model section of " + a.config + " does not match the weights in " + init);
    cfg.model = model->config();
  }

  const auto events = load_event_dir(cfg.paths.data_dir);
  const auto samples = build_samples(events, "train", cfg.model, cfg.flow, cfg.data.crop_margin, a.max_windows);
  if (samples.empty()) throw FormatError(FormatError::Kind::Malformed, 0, "no training windows in " + cfg.paths.data_dir);

  TrainConfig tc;
  tc.steps = training_steps(cfg.training, samples.size());
  tc.batch = cfg.training.batch;
  tc.adam.lr = cfg.training.lr;
  tc.seed = cfg.training.seed;
  tc.threads = threads_from_env();
  tc.weights = cfg.losses;
  tc.kl_order = cfg.kl_order;

  TrainReport report;
  if (a.stage == "ved") {
    model.emplace(cfg.model, derive_seed(cfg.training.seed, 20));
    model->set_normalization(fit_normalization(samples));
    report = train_ved(*model, samples, tc);
  } else {
    report = train_evolver(*model, samples, tc);
  }

  save_weights(*model, cfg.paths.weights);
  const std::string log_path = a.log.empty() ? cfg.paths.weights + ".loss.csv" : a.log;
  auto os = open_output(log_path);
  write_training_log(os, report.log);
  std::cout << "stage=" << a.stage << " samples=" << samples.size() << " steps=" << report.steps_completed
            << " weights=" << cfg.paths.weights << " log=" << log_path << '\n';
  if (report.diverged) {
    std::cerr << "error: " << report.message << "; last finite parameters were saved\n";
    return kSelfCheck;
  }
  return kOk;
}

struct NowcastArgs {
  std::string weights, input, out, fields, intensity;
};

int cmd_nowcast(const NowcastArgs& a) {
  if (!fs::exists(a.weights)) throw ConfigError("weights file " + a.weights + " not found");
  const Model model = load_weights(a.weights);
  const FieldSequence context = read_sequence(a.input);
  if (static_cast<int>(context.size()) != model.config().context_frames)
    throw ConfigError("context holds " + std::to_string(context.size()) + " frames, the weights expect " +
                      std::to_string(model.config().context_frames));
  model.config().validate_for(context.n());
  const NowcastOutput out = model.nowcast(context);
  write_raster_stack(frames_to_stack(out.frames, context.step_seconds), a.out);

  // Field dumps: frames 2(k-1) and 2(k-1)+1 hold u and v of lead k; the
  // intensity file holds one frame per lead. Timestamps are valid times.
  if (!a.fields.empty() || !a.intensity.empty()) {
    RasterStack flow, intensity;
    flow.height = flow.width = intensity.height = intensity.width = static_cast<std::uint32_t>(context.n());
    flow.step_seconds = intensity.step_seconds = static_cast<std::uint32_t>(context.step_seconds);
    for (std::size_t k = 0; k < out.frames.size(); ++k) {
      const std::int64_t ts = out.frames[k].timestamp;
      for (const Grid* g : {&out.motion[k].u, &out.motion[k].v}) {
        flow.timestamps.push_back(ts);
        for (double v : g->values()) flow.values.push_back(static_cast<float>(v));
      }
      intensity.timestamps.push_back(ts);
      for (double v : out.intensity[k].values.values()) intensity.values.push_back(static_cast<float>(v));
    }
    if (!a.fields.empty()) write_raster_stack(flow, a.fields);
    if (!a.intensity.empty()) write_raster_stack(intensity, a.intensity);
  }
  std::cout << "leads=" << out.frames.size() << '\n';
  return kOk;
}

struct ExtrapolateArgs {
  std::string input, out, config, method = "lk";
  int steps = 18;
};

int cmd_extrapolate(const ExtrapolateArgs& a) {
  ToolkitConfig cfg = load_config(a.config);
  if (a.steps < 1) throw UsageError("--steps must be at least 1");
  if (a.method != "persistence" && a.method != "lk" && a.method != "darts")
    throw UsageError("--method must be persistence, lk or darts");
  const FieldSequence context = read_sequence(a.input);
  std::vector<PrecipField> frames;
  if (a.method == "persistence") {
    frames = persistence(context, a.steps);
  } else {
    cfg.flow.method = parse_flow_method(a.method);
    frames = extrapolate(context, cfg.flow, a.steps);
  }
  write_raster_stack(frames_to_stack(frames, context.step_seconds), a.out);
  std::cout << "leads=" << frames.size() << '\n';
  return kOk;
}

struct EvaluateArgs {
  std::string pred, truth, out, curves;
};

int cmd_evaluate(const EvaluateArgs& a) {
  for (const auto* d : {&a.pred, &a.truth})
    if (!fs::is_directory(*d)) throw FormatError(FormatError::Kind::Io, 0, "directory " + *d + " not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.pred))
    if (entry.is_regular_file() && entry.path().extension() == ".tpnn") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw AlignmentError("no .tpnn forecasts in " + a.pred);

  std::vector<ForecastCase> cases;
  std::int64_t step = 0;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    const fs::path truth_path = fs::path(a.truth) / name;
    if (!fs::exists(truth_path)) throw AlignmentError(name + ": no truth file " + truth_path.string());
    const RasterStack ps = read_raster_stack(f);
    if (step == 0) step = ps.step_seconds;
    if (ps.step_seconds != step) throw AlignmentError(name + ": cadence differs from the other forecasts");
    ForecastCase c;
    c.event = name;
    c.forecast = stack_to_frames(ps, name);
    const auto truth = stack_to_frames(read_raster_stack(truth_path), truth_path.string());
    std::map<std::int64_t, const PrecipField*> by_time;
    for (const auto& t : truth) by_time[t.timestamp] = &t;
    for (std::size_t k = 0; k < c.forecast.size(); ++k) {
      const auto it = by_time.find(c.forecast[k].timestamp);
      if (it == by_time.end())
        throw AlignmentError(name + ": lead " + std::to_string(k + 1) + " (timestamp " +
                             std::to_string(c.forecast[k].timestamp) + ") has no truth frame");
      c.observed.push_back(*it->second);
    }
    cases.push_back(std::move(c));
  }
  const SkillTable table = evaluate_run(cases, {kDefaultThresholds.begin(), kDefaultThresholds.end()},
                                        {kDefaultPools.begin(), kDefaultPools.end()}, step);
  {
    auto os = open_output(a.out);
    table.write_csv(os);
  }
  fs::path curves = a.curves;
  if (curves.empty()) curves = fs::path(a.out).replace_extension("").string() + "_curves.csv";
  auto os = open_output(curves);
  table.write_curves_csv(os);
  std::cout << "forecasts=" << cases.size() << " table=" << a.out << " curves=" << curves.string() << '\n';
  return kOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 0;
  int instances = 10;
  std::string fault = "none";
};

int cmd_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions o;
  o.seed = a.seed;
  o.instances = a.instances;
  if (a.fault == "warp") o.fault = GradcheckFault::Warp;
  else if (a.fault != "none") throw UsageError("unknown fault '" + a.fault + "'");
  bool ok = true;
  std::string failed;
  for (const auto& r : run_gradcheck(o)) {
    std::cout << format_result(r) << '\n';
    if (!r.passed()) {
      ok = false;
      failed += (failed.empty() ? "" : ",") + r.component;
    }
  }
  std::cout << "result=" << (ok ? "pass" : "fail") << '\n';
  if (!ok) {
    std::cerr << "gradcheck failed: " << failed << '\n';
    return kSelfCheck;
  }
  return kOk;
}

struct InitArgs {
  std::string config, weights;
  std::optional<std::uint64_t> seed;
};

int cmd_init(const InitArgs& a) {
  ToolkitConfig cfg = load_config(a.config);
  if (!a.weights.empty()) cfg.paths.weights = a.weights;
  if (cfg.paths.weights.empty()) throw UsageError("no weights path given (--weights or paths.weights)");
  const std::uint64_t seed = a.seed.value_or(cfg.training.seed);
  const Model model(cfg.model, derive_seed(seed, 20));
  save_weights(model, cfg.paths.weights);
  std::cout << "parameters=" << model.parameter_count() << " weights=" << cfg.paths.weights << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Precipitation nowcasting toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic event directory");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--events", synth.events, "Number of events")->capture_default_str();
  c_synth->add_option("--n", synth.n, "Raster side")->capture_default_str();
  c_synth->add_option("--frames", synth.frames, "Frames per event")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  c_synth->add_option("--speed-min", synth.speed_min, "Slowest storm (px/step)")->capture_default_str();
  c_synth->add_option("--speed-max", synth.speed_max, "Fastest storm (px/step)")->capture_default_str();
  c_synth->add_option("--growth-min", synth.growth_min, "Lowest growth per step")->capture_default_str();
  c_synth->add_option("--growth-max", synth.growth_max, "Highest growth per step")->capture_default_str();

  ExtractArgs extract;
  auto* c_extract = app.add_subcommand("extract", "Find rainy windows in a sequence");
  c_extract->add_option("--input", extract.input, "TPNN sequence")->required();
  c_extract->add_option("--tau", extract.tau, "Accumulation threshold")->capture_default_str();
  c_extract->add_option("--out", extract.out, "Events CSV")->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train one stage");
  c_train->add_option("--stage", train.stage, "ved or evolver")->required();
  c_train->add_option("--config", train.config, "key=value config file");
  c_train->add_option("--data", train.data, "Event directory");
  c_train->add_option("--weights", train.weights, "Output weights (TPNW)");
  c_train->add_option("--init", train.init, "Encoder-decoder weights for stage evolver (default: --weights)");
  c_train->add_option("--log", train.log, "Loss-curve CSV (default: <weights>.loss.csv)");
  c_train->add_option("--seed", train.seed, "Overrides training.seed");
  c_train->add_option("--max-windows", train.max_windows, "Windows per event, evenly spaced (0 = all)");

  NowcastArgs nowcast;
  auto* c_nowcast = app.add_subcommand("nowcast", "Forecast from a context sequence");
  c_nowcast->add_option("--weights", nowcast.weights, "TPNW weights")->required();
  c_nowcast->add_option("--input", nowcast.input, "Context TPNN")->required();
  c_nowcast->add_option("--out", nowcast.out, "Forecast TPNN")->required();
  c_nowcast->add_option("--fields", nowcast.fields, "Per-lead motion TPNN (u, v per lead)");
  c_nowcast->add_option("--intensity", nowcast.intensity, "Per-lead intensity TPNN");

  ExtrapolateArgs extrap;
  auto* c_extrap = app.add_subcommand("extrapolate", "Baseline forecast (persistence, lk or darts)");
  c_extrap->add_option("--input", extrap.input, "Context TPNN")->required();
  c_extrap->add_option("--out", extrap.out, "Forecast TPNN")->required();
  c_extrap->add_option("--method", extrap.method, "persistence, lk or darts")->capture_default_str();
  c_extrap->add_option("--steps", extrap.steps, "Lead steps")->capture_default_str();
  c_extrap->add_option("--config", extrap.config, "key=value config file (flow section)");

  EvaluateArgs evaluate;
  auto* c_eval = app.add_subcommand("evaluate", "Score forecasts against observations");
  c_eval->add_option("--pred", evaluate.pred, "Directory of forecast TPNN files")->required();
  c_eval->add_option("--truth", evaluate.truth, "Directory of observed TPNN files with the same names")->required();
  c_eval->add_option("--out", evaluate.out, "Skill table CSV")->required();
  c_eval->add_option("--curves", evaluate.curves, "Per-lead CSI-M/HSS-M CSV (default: <out>_curves.csv)");

  GradcheckArgs gradcheck;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient self-test");
  c_grad->add_option("--seed", gradcheck.seed, "Random seed")->capture_default_str();
  c_grad->add_option("--instances", gradcheck.instances, "Random instances per component")->capture_default_str();
  c_grad->add_option("--inject-fault", gradcheck.fault)->group("");

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "Write freshly initialized weights (predicts persistence)");
  c_init->add_option("--config", init.config, "key=value config file");
  c_init->add_option("--weights", init.weights, "Output weights (TPNW)");
  c_init->add_option("--seed", init.seed, "Overrides training.seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*c_synth) return cmd_synth(synth);
    if (*c_extract) return cmd_extract(extract);
    if (*c_train) return cmd_train(train);
    if (*c_nowcast) return cmd_nowcast(nowcast);
    if (*c_extrap) return cmd_extrapolate(extrap);
    if (*c_eval) return cmd_evaluate(evaluate);
    if (*c_grad) return cmd_gradcheck(gradcheck);
    if (*c_init) return cmd_init(init);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const AlignmentError& e) {
    std::cerr << "alignment error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  }
  return kConfigError;
}
