#include "nowcast/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "nowcast/advection.hpp"
#include "nowcast/tpnn.hpp"

namespace nowcast {

namespace {

constexpr char kWeightsMagic[4] = {'T', 'P', 'N', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;

std::vector<double> he_normal(std::size_t count, int fan_in, double gain, Rng& rng) {
  const double sd = gain * std::sqrt(2.0 / fan_in);
  std::vector<double> v(count);
  for (auto& x : v) x = sd * rng.normal();
  return v;
}

ad::Tensor maybe_dropout(ad::Tape& t, const ad::Tensor& x, double rate, Rng* rng) {
  if (!rng || rate <= 0.0) return x;
  std::vector<double> keep(x.numel());
  for (auto& k : keep) k = rng->uniform() >= rate ? 1.0 : 0.0;
  return ad::dropout(t, x, keep, rate);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void ModelConfig::validate() const {
  if (context_frames < 2) throw ConfigError("model.context_frames must be at least 2");
  if (horizon < 1) throw ConfigError("model.horizon must be at least 1");
  if (channels < 1 || embed_dim < 1 || evolver_dim < 1) throw ConfigError("model channel counts must be positive");
  if (reduc_factor != 2 && reduc_factor != 4 && reduc_factor != 8)
    throw ConfigError("model.reduc_factor must be 2, 4 or 8");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
  if (evolver_depth < 0) throw ConfigError("model.evolver_depth must be non-negative");
  if (lead_time_classes < horizon)
    throw ConfigError("model.lead_time_classes (" + std::to_string(lead_time_classes) + ") is smaller than horizon (" +
                      std::to_string(horizon) + ")");
}

void ModelConfig::validate_for(int n) const {
  validate();
  if (n % reduc_factor != 0 || n / reduc_factor < 1)
    throw ConfigError("reduc_factor " + std::to_string(reduc_factor) + " does not divide n = " + std::to_string(n));
}

void LatentState::validate() const {
  if (mu.size() != log_var.size() || mu.size() != sample.size())
    throw InvalidArgument("latent mu/log_var/sample sizes differ");
  if (mu.size() != static_cast<std::size_t>(embed_dim) * side * side)
    throw InvalidArgument("latent size does not match embed_dim x side x side");
  for (const auto* v : {&mu, &log_var, &sample})
    for (double x : *v)
      if (!std::isfinite(x)) throw InvalidArgument("latent holds a non-finite value");
}

ParamGroup group_of(const std::string& name) {
  if (name.starts_with("encoder.")) return ParamGroup::Encoder;
  if (name.starts_with("decoder.")) return ParamGroup::Decoder;
  if (name.starts_with("evolver.")) return ParamGroup::Evolver;
  throw InvalidArgument("parameter '" + name + "' belongs to no group");
}

int sampling_stages(int reduc_factor) {
  int s = 0;
  while ((1 << s) < reduc_factor) ++s;
  return s;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int C = cfg_.channels, E = cfg_.embed_dim, D = cfg_.evolver_dim;
  const int stages = sampling_stages(cfg_.reduc_factor);

  enc_in_ = add_conv("encoder.in", cfg_.context_frames, C, 3, rng, false);
  for (int i = 0; i < stages; ++i) enc_down_.push_back(add_conv("encoder.down" + std::to_string(i), C, C, 3, rng, false));
  enc_head_ = add_conv("encoder.head", C, 2 * E, 3, rng, false);

  dec_in_ = add_conv("decoder.in", E, C, 3, rng, false);
  for (int i = 0; i < stages; ++i) dec_up_.push_back(add_conv("decoder.up" + std::to_string(i), C, C, 3, rng, false));
  dec_out_ = add_conv("decoder.out", C, 3, 3, rng, true);

  evo_in_ = add_conv("evolver.in", E, D, 1, rng, false);
  evo_embed_ = add_param("evolver.embed", {cfg_.lead_time_classes, D},
                         he_normal(static_cast<std::size_t>(cfg_.lead_time_classes) * D, 1, 0.5, rng));
  for (int i = 0; i < cfg_.evolver_depth; ++i) {
    const std::string b = "evolver.block" + std::to_string(i);
    evo_spatial_.push_back(add_conv(b + ".spatial", D, D, 3, rng, false));
    evo_mix_.push_back(add_conv(b + ".mix", D, D, 1, rng, false));
  }
  evo_out_ = add_conv("evolver.out", D, E, 1, rng, true);
}

int Model::add_param(const std::string& name, ad::Shape shape, std::vector<double> values) {
  params_.push_back({name, ad::Tensor::parameter(std::move(shape), std::move(values))});
  return static_cast<int>(params_.size()) - 1;
}

Model::Conv Model::add_conv(const std::string& name, int in, int out, int k, Rng& rng, bool zero_init) {
  const std::size_t count = static_cast<std::size_t>(out) * in * k * k;
  // Residual branches inside the evolver start small so the trunk begins
  // close to the identity.
  const double gain = name.ends_with(".mix") ? 0.25 : 1.0;
  Conv c;
  c.weight = add_param(name + ".weight", {out, in, k, k},
                       zero_init ? std::vector<double>(count, 0.0) : he_normal(count, in * k * k, gain, rng));
  c.bias = add_param(name + ".bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
  return c;
}

void Model::set_normalization(const Normalization& n) {
  for (double s : {n.input_scale, n.flow_scale, n.intensity_scale})
    if (!(std::isfinite(s) && s > 0.0)) throw ConfigError("normalization scales must be finite and positive");
  norm_ = n;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.tensor.numel();
  return total;
}

std::size_t Model::latent_size(int n) const {
  const int m = n / cfg_.reduc_factor;
  return static_cast<std::size_t>(cfg_.embed_dim) * m * m;
}

ParamSet Model::snapshot(std::span<const ParamGroup> trainable) const {
  ParamSet out;
  out.reserve(params_.size());
  for (const auto& p : params_) {
    const bool train = std::find(trainable.begin(), trainable.end(), group_of(p.name)) != trainable.end();
    out.push_back(p.tensor.detach_copy(train));
  }
  return out;
}

ParamSet Model::current() const {
  ParamSet out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

void Model::check_context(std::span<const Grid> context) const {
  if (static_cast<int>(context.size()) != cfg_.context_frames)
    throw ConfigError("context has " + std::to_string(context.size()) + " frames, model expects " +
                      std::to_string(cfg_.context_frames));
  const int n = context.front().n();
  for (const auto& g : context)
    if (g.n() != n) throw InvalidArgument("context frames differ in size");
  cfg_.validate_for(n);
}

Model::Encoded Model::encode(ad::Tape& t, const ParamSet& p, std::span<const Grid> context,
                             std::span<const double> noise, Rng* dropout_rng) const {
  check_context(context);
  const int n = context.front().n();
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  std::vector<double> input(context.size() * cells);
  for (std::size_t f = 0; f < context.size(); ++f)
    for (std::size_t i = 0; i < cells; ++i) input[f * cells + i] = context[f][i] / norm_.input_scale;
  ad::Tensor x = ad::Tensor::constant({1, cfg_.context_frames, n, n}, std::move(input));

  x = ad::relu(t, ad::conv2d(t, x, p[enc_in_.weight], p[enc_in_.bias], 1));
  for (const auto& c : enc_down_) {
    x = ad::relu(t, ad::conv2d(t, x, p[c.weight], p[c.bias], 2));
    x = maybe_dropout(t, x, cfg_.dropout, dropout_rng);
  }
  const ad::Tensor head = ad::conv2d(t, x, p[enc_head_.weight], p[enc_head_.bias], 1);
  Encoded e;
  e.mu = ad::slice_channels(t, head, 0, cfg_.embed_dim);
  e.log_var = ad::slice_channels(t, head, cfg_.embed_dim, cfg_.embed_dim);
  if (!noise.empty() && noise.size() != e.mu.numel())
    throw InvalidArgument("noise has " + std::to_string(noise.size()) + " values, latent has " +
                          std::to_string(e.mu.numel()));
  if (noise.empty()) {
    const std::vector<double> zero(e.mu.numel(), 0.0);
    e.sample = ad::gaussian_sample(t, e.mu, e.log_var, zero);
  } else {
    e.sample = ad::gaussian_sample(t, e.mu, e.log_var, noise);
  }
  return e;
}

ad::Tensor Model::decode(ad::Tape& t, const ParamSet& p, const ad::Tensor& latent, Rng* dropout_rng) const {
  if (latent.shape().size() != 4 || latent.dim(0) != 1 || latent.dim(1) != cfg_.embed_dim)
    throw ad::ShapeError("decode", "latent must be [1, " + std::to_string(cfg_.embed_dim) + ", m, m], got " +
                                       ad::to_string(latent.shape()));
  ad::Tensor x = ad::relu(t, ad::conv2d(t, latent, p[dec_in_.weight], p[dec_in_.bias], 1));
  for (const auto& c : dec_up_) {
    x = ad::upsample2x(t, x);
    x = ad::relu(t, ad::conv2d(t, x, p[c.weight], p[c.bias], 1));
    x = maybe_dropout(t, x, cfg_.dropout, dropout_rng);
  }
  x = ad::conv2d(t, x, p[dec_out_.weight], p[dec_out_.bias], 1);
  return ad::scale_channels(t, x, {norm_.flow_scale, norm_.flow_scale, norm_.intensity_scale});
}

ad::Tensor Model::evolve(ad::Tape& t, const ParamSet& p, const ad::Tensor& latent, int k) const {
  if (k < 2 || k > cfg_.horizon)
    throw InvalidArgument("lead index " + std::to_string(k) + " outside 2.." + std::to_string(cfg_.horizon));
  if (latent.shape().size() != 4 || latent.dim(0) != 1 || latent.dim(1) != cfg_.embed_dim)
    throw ad::ShapeError("evolve", "latent must be [1, " + std::to_string(cfg_.embed_dim) + ", m, m], got " +
                                       ad::to_string(latent.shape()));
  std::vector<double> one_hot(static_cast<std::size_t>(cfg_.lead_time_classes), 0.0);
  one_hot[static_cast<std::size_t>(k - 1)] = 1.0;
  const ad::Tensor code = ad::Tensor::constant({1, cfg_.lead_time_classes}, std::move(one_hot));
  const ad::Tensor embedding = ad::matmul(t, code, p[evo_embed_]);

  ad::Tensor h = ad::conv2d(t, latent, p[evo_in_.weight], p[evo_in_.bias], 1);
  h = ad::add_channel_bias(t, h, embedding);
  for (std::size_t i = 0; i < evo_spatial_.size(); ++i) {
    ad::Tensor r = ad::relu(t, ad::conv2d(t, h, p[evo_spatial_[i].weight], p[evo_spatial_[i].bias], 1));
    r = ad::conv2d(t, r, p[evo_mix_[i].weight], p[evo_mix_[i].bias], 1);
    h = ad::add(t, h, r);
  }
  return ad::add(t, latent, ad::conv2d(t, ad::relu(t, h), p[evo_out_.weight], p[evo_out_.bias], 1));
}

LatentState Model::ved_encode(std::span<const Grid> context, std::span<const double> noise) const {
  ad::Tape t(ad::Tape::Mode::Inference);
  const Encoded e = encode(t, current(), context, noise, nullptr);
  LatentState s;
  s.mu.assign(e.mu.value().begin(), e.mu.value().end());
  s.log_var.assign(e.log_var.value().begin(), e.log_var.value().end());
  s.sample.assign(e.sample.value().begin(), e.sample.value().end());
  s.embed_dim = cfg_.embed_dim;
  s.side = e.mu.dim(2);
  return s;
}

LatentState Model::ved_encode(const FieldSequence& context, std::span<const double> noise) const {
  const auto grids = grids_of(context.frames);
  return ved_encode(std::span<const Grid>(grids), noise);
}

void Model::ved_decode(const LatentState& latent, MotionField& motion, IntensityField& intensity) const {
  if (latent.embed_dim != cfg_.embed_dim)
    throw InvalidArgument("latent embed_dim " + std::to_string(latent.embed_dim) + " does not match model");
  latent.validate();
  ad::Tape t(ad::Tape::Mode::Inference);
  const ad::Tensor z = ad::Tensor::constant({1, latent.embed_dim, latent.side, latent.side}, latent.sample);
  const ad::Tensor fields = decode(t, current(), z, nullptr);
  const int n = fields.dim(2);
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  motion = MotionField(n);
  intensity = IntensityField(n);
  const auto v = fields.value();
  std::copy_n(v.begin(), cells, motion.u.data());
  std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(cells), cells, motion.v.data());
  std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(2 * cells), cells, intensity.values.data());
}

LatentState Model::evolve(const LatentState& latent_1, int k) const {
  if (latent_1.embed_dim != cfg_.embed_dim)
    throw InvalidArgument("latent embed_dim " + std::to_string(latent_1.embed_dim) + " does not match model");
  latent_1.validate();
  ad::Tape t(ad::Tape::Mode::Inference);
  const ad::Tensor z = ad::Tensor::constant({1, latent_1.embed_dim, latent_1.side, latent_1.side}, latent_1.sample);
  const ad::Tensor out = evolve(t, current(), z, k);
  LatentState s = latent_1;
  s.mu.assign(out.value().begin(), out.value().end());
  s.sample = s.mu;
  return s;
}

NowcastOutput Model::nowcast(const FieldSequence& context) const {
  context.validate();
  const LatentState l1 = ved_encode(context);
  NowcastOutput out;
  Grid previous = context.frames.back().values;
  const std::int64_t t0 = context.frames.back().timestamp;
  for (int k = 1; k <= cfg_.horizon; ++k) {
    const LatentState lk = k == 1 ? l1 : evolve(l1, k);
    MotionField motion;
    IntensityField intensity;
    ved_decode(lk, motion, intensity);
    PrecipField frame;
    frame.values = warp(motion, intensity.values, previous);
    frame.timestamp = t0 + k * context.step_seconds;
    previous = frame.values;
    out.frames.push_back(std::move(frame));
    out.motion.push_back(std::move(motion));
    out.intensity.push_back(std::move(intensity));
  }
  return out;
}

std::string config_echo(const ModelConfig& cfg, const Normalization& norm) {
  std::ostringstream os;
  os << "model.context_frames=" << cfg.context_frames << '\n'
     << "model.horizon=" << cfg.horizon << '\n'
     << "model.channels=" << cfg.channels << '\n'
     << "model.embed_dim=" << cfg.embed_dim << '\n'
     << "model.reduc_factor=" << cfg.reduc_factor << '\n'
     << "model.dropout=" << format_double(cfg.dropout) << '\n'
     << "model.evolver_depth=" << cfg.evolver_depth << '\n'
     << "model.evolver_dim=" << cfg.evolver_dim << '\n'
     << "model.lead_time_classes=" << cfg.lead_time_classes << '\n'
     << "norm.input_scale=" << format_double(norm.input_scale) << '\n'
     << "norm.flow_scale=" << format_double(norm.flow_scale) << '\n'
     << "norm.intensity_scale=" << format_double(norm.intensity_scale) << '\n';
  return os.str();
}

std::vector<std::uint8_t> encode_weights(const Model& model) {
  detail::ByteWriter w;
  w.bytes(kWeightsMagic, 4);
  w.u32(kWeightsVersion);
  const std::string echo = config_echo(model.config(), model.normalization());
  w.u32(static_cast<std::uint32_t>(echo.size()));
  w.str(echo);
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.str(p.name);
    const auto& shape = p.tensor.shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.value()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

Model decode_weights(const std::vector<std::uint8_t>& bytes) {
  using K = FormatError::Kind;
  detail::ByteReader r(bytes);
  const std::string magic = r.str(4);
  if (magic != std::string(kWeightsMagic, 4)) throw FormatError(K::BadMagic, 0, "not a TPNW weights file");
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion)
    throw FormatError(K::VersionMismatch, 4, "unsupported TPNW version " + std::to_string(version));
  const std::size_t echo_at = r.offset();
  const std::uint32_t echo_len = r.u32();
  const std::string echo = r.str(echo_len);

  std::map<std::string, std::string> kv;
  std::istringstream is(echo);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(K::Malformed, echo_at, "config echo line without '='");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(K::Malformed, echo_at, "config echo lacks " + key);
    return it->second;
  };
  ModelConfig cfg;
  Normalization norm;
  try {
    cfg.context_frames = std::stoi(get("model.context_frames"));
    cfg.horizon = std::stoi(get("model.horizon"));
    cfg.channels = std::stoi(get("model.channels"));
    cfg.embed_dim = std::stoi(get("model.embed_dim"));
    cfg.reduc_factor = std::stoi(get("model.reduc_factor"));
    cfg.dropout = std::stod(get("model.dropout"));
    cfg.evolver_depth = std::stoi(get("model.evolver_depth"));
    cfg.evolver_dim = std::stoi(get("model.evolver_dim"));
    cfg.lead_time_classes = std::stoi(get("model.lead_time_classes"));
    norm.input_scale = std::stod(get("norm.input_scale"));
    norm.flow_scale = std::stod(get("norm.flow_scale"));
    norm.intensity_scale = std::stod(get("norm.intensity_scale"));
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const FormatError*>(&e)) throw;
    throw FormatError(K::Malformed, echo_at, std::string("unreadable config echo value: ") + e.what());
  }

  Model model(cfg, 0);
  model.set_normalization(norm);
  const std::uint32_t count = r.u32();
  if (count != model.parameters().size())
    throw ConfigError("weights hold " + std::to_string(count) + " tensors, config implies " +
                      std::to_string(model.parameters().size()));
  for (auto& p : model.parameters()) {
    const std::size_t at = r.offset();
    const std::string name = r.str(r.u32());
    if (name != p.name) throw ConfigError("weights tensor '" + name + "' where '" + p.name + "' was expected");
    const std::uint32_t ndim = r.u32();
    ad::Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(r.u32()));
    if (shape != p.tensor.shape())
      throw FormatError(K::BadDimensions, at,
                        "tensor " + name + " has shape " + ad::to_string(shape) + ", expected " +
                            ad::to_string(p.tensor.shape()));
    for (auto& v : p.tensor.mutable_value()) {
      const std::size_t vat = r.offset();
      const float f = r.f32();
      if (!std::isfinite(f)) throw FormatError(K::InvalidValue, vat, "non-finite weight in " + name);
      v = f;
    }
  }
  if (r.remaining() != 0) throw FormatError(K::TrailingBytes, r.offset(), "trailing bytes after weights");
  return model;
}

void save_weights(const Model& model, const std::filesystem::path& path) {
  write_file_bytes(encode_weights(model), path);
}

Model load_weights(const std::filesystem::path& path) { return decode_weights(read_file_bytes(path)); }

}  // namespace nowcast
