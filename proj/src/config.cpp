#include "nowcast/config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace nowcast {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(d))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

long long parse_integer(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return i;
}

int parse_int(const std::string& key, const std::string& v) {
  const long long i = parse_integer(key, v);
  if (i < -2147483647LL || i > 2147483647LL) throw ConfigError(key + ": value out of range");
  return static_cast<int>(i);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(ToolkitConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"flow.method", [](auto& c, auto&, auto& v) {
         try {
           c.flow.method = parse_flow_method(v);
         } catch (const InvalidArgument& e) {
           throw ConfigError(std::string("flow.method: ") + e.what());
         }
       }},
      {"flow.lk_window", [](auto& c, auto& k, auto& v) { c.flow.lk_window = parse_int(k, v); }},
      {"flow.lk_smooth_sigma", [](auto& c, auto& k, auto& v) { c.flow.lk_smooth_sigma = parse_double(k, v); }},
      {"flow.lk_ridge", [](auto& c, auto& k, auto& v) { c.flow.lk_ridge = parse_double(k, v); }},
      {"flow.darts_modes", [](auto& c, auto& k, auto& v) { c.flow.darts_modes = parse_int(k, v); }},
      {"flow.darts_data_modes", [](auto& c, auto& k, auto& v) { c.flow.darts_data_modes = parse_int(k, v); }},
      {"flow.darts_regularization", [](auto& c, auto& k, auto& v) { c.flow.darts_regularization = parse_double(k, v); }},
      {"flow.context_frames", [](auto& c, auto& k, auto& v) { c.flow.context_frames = parse_int(k, v); }},
      {"model.context_frames", [](auto& c, auto& k, auto& v) { c.model.context_frames = parse_int(k, v); }},
      {"model.horizon", [](auto& c, auto& k, auto& v) { c.model.horizon = parse_int(k, v); }},
      {"model.channels", [](auto& c, auto& k, auto& v) { c.model.channels = parse_int(k, v); }},
      {"model.embed_dim", [](auto& c, auto& k, auto& v) { c.model.embed_dim = parse_int(k, v); }},
      {"model.reduc_factor", [](auto& c, auto& k, auto& v) { c.model.reduc_factor = parse_int(k, v); }},
      {"model.dropout", [](auto& c, auto& k, auto& v) { c.model.dropout = parse_double(k, v); }},
      {"model.evolver_depth", [](auto& c, auto& k, auto& v) { c.model.evolver_depth = parse_int(k, v); }},
      {"model.evolver_dim", [](auto& c, auto& k, auto& v) { c.model.evolver_dim = parse_int(k, v); }},
      {"model.lead_time_classes", [](auto& c, auto& k, auto& v) { c.model.lead_time_classes = parse_int(k, v); }},
      {"losses.lambda_int", [](auto& c, auto& k, auto& v) { c.losses.lambda_int = parse_double(k, v); }},
      {"losses.lambda_motion", [](auto& c, auto& k, auto& v) { c.losses.lambda_motion = parse_double(k, v); }},
      {"losses.lambda_cos", [](auto& c, auto& k, auto& v) { c.losses.lambda_cos = parse_double(k, v); }},
      {"losses.lambda_kl", [](auto& c, auto& k, auto& v) { c.losses.lambda_kl = parse_double(k, v); }},
      {"losses.kl_order", [](auto& c, auto& k, auto& v) {
         if (v == "posterior_prior") c.kl_order = KlOrder::PosteriorToPrior;
         else if (v == "prior_posterior") c.kl_order = KlOrder::PriorToPosterior;
         else throw ConfigError(k + ": expected posterior_prior or prior_posterior, got '" + v + "'");
       }},
      {"training.lr", [](auto& c, auto& k, auto& v) { c.training.lr = parse_double(k, v); }},
      {"training.batch", [](auto& c, auto& k, auto& v) { c.training.batch = parse_int(k, v); }},
      {"training.epochs", [](auto& c, auto& k, auto& v) { c.training.epochs = parse_int(k, v); }},
      {"training.steps", [](auto& c, auto& k, auto& v) { c.training.steps = parse_int(k, v); }},
      {"training.seed", [](auto& c, auto& k, auto& v) {
         errno = 0;
         char* end = nullptr;
         const unsigned long long s = std::strtoull(v.c_str(), &end, 10);
         if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE)
           throw ConfigError(k + ": expected a non-negative integer, got '" + v + "'");
         c.training.seed = s;
       }},
      {"data.tau", [](auto& c, auto& k, auto& v) { c.data.tau = parse_double(k, v); }},
      {"data.train_fraction", [](auto& c, auto& k, auto& v) { c.data.fractions[0] = parse_double(k, v); }},
      {"data.validation_fraction", [](auto& c, auto& k, auto& v) { c.data.fractions[1] = parse_double(k, v); }},
      {"data.test_fraction", [](auto& c, auto& k, auto& v) { c.data.fractions[2] = parse_double(k, v); }},
      {"data.crop_margin", [](auto& c, auto& k, auto& v) { c.data.crop_margin = parse_int(k, v); }},
      {"paths.data_dir", [](auto& c, auto&, auto& v) { c.paths.data_dir = v; }},
      {"paths.weights", [](auto& c, auto&, auto& v) { c.paths.weights = v; }},
      {"paths.output_dir", [](auto& c, auto&, auto& v) { c.paths.output_dir = v; }},
  };
  return table;
}

}  // namespace

void ToolkitConfig::set(const std::string& key, const std::string& value) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, key, value);
}

void ToolkitConfig::validate() const {
  try {
    flow.validate(0);
    losses.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  model.validate();
  if (!(training.lr > 0.0)) throw ConfigError("training.lr must be positive");
  if (training.batch < 1) throw ConfigError("training.batch must be at least 1");
  if (training.epochs < 1 && training.steps <= 0) throw ConfigError("training.epochs must be at least 1");
  if (training.steps < 0) throw ConfigError("training.steps must be non-negative");
  if (!(data.tau > 0.0)) throw ConfigError("data.tau must be positive");
  if (data.crop_margin < 0) throw ConfigError("data.crop_margin must be non-negative");
  double sum = 0.0;
  for (double f : data.fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  if (flow.context_frames - 1 > model.context_frames)
    throw ConfigError("flow.context_frames exceeds model.context_frames + 1");
}

std::string ToolkitConfig::to_text() const {
  std::ostringstream os;
  os << "flow.method=" << (flow.method == FlowMethod::Darts ? "darts" : "lk") << '\n'
     << "flow.lk_window=" << flow.lk_window << '\n'
     << "flow.lk_smooth_sigma=" << fmt(flow.lk_smooth_sigma) << '\n'
     << "flow.lk_ridge=" << fmt(flow.lk_ridge) << '\n'
     << "flow.darts_modes=" << flow.darts_modes << '\n'
     << "flow.darts_data_modes=" << flow.darts_data_modes << '\n'
     << "flow.darts_regularization=" << fmt(flow.darts_regularization) << '\n'
     << "flow.context_frames=" << flow.context_frames << '\n'
     << "model.context_frames=" << model.context_frames << '\n'
     << "model.horizon=" << model.horizon << '\n'
     << "model.channels=" << model.channels << '\n'
     << "model.embed_dim=" << model.embed_dim << '\n'
     << "model.reduc_factor=" << model.reduc_factor << '\n'
     << "model.dropout=" << fmt(model.dropout) << '\n'
     << "model.evolver_depth=" << model.evolver_depth << '\n'
     << "model.evolver_dim=" << model.evolver_dim << '\n'
     << "model.lead_time_classes=" << model.lead_time_classes << '\n'
     << "losses.lambda_int=" << fmt(losses.lambda_int) << '\n'
     << "losses.lambda_motion=" << fmt(losses.lambda_motion) << '\n'
     << "losses.lambda_cos=" << fmt(losses.lambda_cos) << '\n'
     << "losses.lambda_kl=" << fmt(losses.lambda_kl) << '\n'
     << "losses.kl_order=" << (kl_order == KlOrder::PosteriorToPrior ? "posterior_prior" : "prior_posterior") << '\n'
     << "training.lr=" << fmt(training.lr) << '\n'
     << "training.batch=" << training.batch << '\n'
     << "training.epochs=" << training.epochs << '\n'
     << "training.steps=" << training.steps << '\n'
     << "training.seed=" << training.seed << '\n'
     << "data.tau=" << fmt(data.tau) << '\n'
     << "data.train_fraction=" << fmt(data.fractions[0]) << '\n'
     << "data.validation_fraction=" << fmt(data.fractions[1]) << '\n'
     << "data.test_fraction=" << fmt(data.fractions[2]) << '\n'
     << "data.crop_margin=" << data.crop_margin << '\n'
     << "paths.data_dir=" << paths.data_dir << '\n'
     << "paths.weights=" << paths.weights << '\n'
     << "paths.output_dir=" << paths.output_dir << '\n';
  return os.str();
}

ToolkitConfig ToolkitConfig::parse(std::istream& is) {
  ToolkitConfig cfg;
  int lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    try {
      cfg.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ToolkitConfig ToolkitConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse(in);
}

int training_steps(const TrainingSettings& t, std::size_t samples) {
  if (t.steps > 0) return t.steps;
  const std::size_t per_epoch = (samples + static_cast<std::size_t>(t.batch) - 1) / static_cast<std::size_t>(t.batch);
  return static_cast<int>(per_epoch * static_cast<std::size_t>(t.epochs));
}

}  // namespace nowcast
