#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nowcast/autodiff.hpp"
#include "nowcast/field.hpp"
#include "nowcast/random.hpp"

namespace nowcast {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int context_frames = 4;  // T + 1
  int horizon = 18;        // T_f
  int channels = 128;
  int embed_dim = 4;
  int reduc_factor = 4;
  double dropout = 0.2;
  int evolver_depth = 4;
  int evolver_dim = 64;
  int lead_time_classes = 18;

  void validate() const;
  /// Also checks that reduc_factor divides the raster side.
  void validate_for(int n) const;
  bool operator==(const ModelConfig&) const = default;
};

/// Affine scales applied around the networks: inputs are divided by
/// input_scale; decoded channels are multiplied by flow_scale (u, v) and
/// intensity_scale (s). Fitted on the training split and stored with the
/// weights.
struct Normalization {
  double input_scale = 1.0;
  double flow_scale = 1.0;
  double intensity_scale = 1.0;
  bool operator==(const Normalization&) const = default;
};

/// Latent grid of embed_dim channels at side n / reduc_factor, stored
/// channel-major.
struct LatentState {
  std::vector<double> mu;
  std::vector<double> log_var;
  std::vector<double> sample;
  int embed_dim = 0;
  int side = 0;

  std::size_t size() const { return mu.size(); }
  void validate() const;
};

struct NamedParameter {
  std::string name;
  ad::Tensor tensor;
};

/// Which part of the network a parameter belongs to.
enum class ParamGroup { Encoder, Decoder, Evolver };
ParamGroup group_of(const std::string& name);

/// Parameter values as used by one forward pass. Training clones these per
/// sample so that gradients stay local to a worker.
using ParamSet = std::vector<ad::Tensor>;

struct NowcastOutput {
  std::vector<PrecipField> frames;       // X̂_1 .. X̂_{T_f}
  std::vector<MotionField> motion;       // v̂ per lead
  std::vector<IntensityField> intensity; // ŝ per lead
};

class Model {
public:
  /// Random initialization from `seed`. The decoder output layer and the
  /// evolver output projection start at zero, so a fresh model predicts
  /// persistence.
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const Normalization& normalization() const { return norm_; }
  void set_normalization(const Normalization& n);

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  /// Current values as a ParamSet; `trainable` selects which groups get
  /// fresh gradient-tracking leaves (the rest are constants).
  ParamSet snapshot(std::span<const ParamGroup> trainable) const;

  // Tape-level building blocks. `p` is indexed like parameters().
  struct Encoded {
    ad::Tensor mu;
    ad::Tensor log_var;
    ad::Tensor sample;
  };
  /// `context` holds T+1 frames ending at X0. Empty noise means zero noise.
  /// `dropout_rng` null disables dropout.
  Encoded encode(ad::Tape& t, const ParamSet& p, std::span<const Grid> context, std::span<const double> noise,
                 Rng* dropout_rng) const;
  /// [1, E, m, m] -> [1, 3, n, n] fields (u, v, s) in physical units.
  ad::Tensor decode(ad::Tape& t, const ParamSet& p, const ad::Tensor& latent, Rng* dropout_rng) const;
  /// Lead-time conditioned latent step, k in 2..horizon.
  ad::Tensor evolve(ad::Tape& t, const ParamSet& p, const ad::Tensor& latent, int k) const;

  // Inference API; thread-safe on a const model.
  LatentState ved_encode(std::span<const Grid> context, std::span<const double> noise = {}) const;
  LatentState ved_encode(const FieldSequence& context, std::span<const double> noise = {}) const;
  void ved_decode(const LatentState& latent, MotionField& motion, IntensityField& intensity) const;
  LatentState evolve(const LatentState& latent_1, int k) const;
  NowcastOutput nowcast(const FieldSequence& context) const;

  /// Latent element count for side n.
  std::size_t latent_size(int n) const;

private:
  struct Conv {
    int weight = -1;
    int bias = -1;
  };
  Conv add_conv(const std::string& name, int in, int out, int k, Rng& rng, bool zero_init);
  int add_param(const std::string& name, ad::Shape shape, std::vector<double> values);
  ParamSet current() const;
  void check_context(std::span<const Grid> context) const;

  ModelConfig cfg_;
  Normalization norm_;
  std::vector<NamedParameter> params_;

  Conv enc_in_;
  std::vector<Conv> enc_down_;
  Conv enc_head_;
  Conv dec_in_;
  std::vector<Conv> dec_up_;
  Conv dec_out_;
  Conv evo_in_;
  int evo_embed_ = -1;
  std::vector<Conv> evo_spatial_;
  std::vector<Conv> evo_mix_;
  Conv evo_out_;
};

/// Number of down/up sampling stages for a reduction factor.
int sampling_stages(int reduc_factor);

/// key=value lines echoing the model config and normalization.
std::string config_echo(const ModelConfig& cfg, const Normalization& norm);

std::vector<std::uint8_t> encode_weights(const Model& model);
Model decode_weights(const std::vector<std::uint8_t>& bytes);
void save_weights(const Model& model, const std::filesystem::path& path);
Model load_weights(const std::filesystem::path& path);

}  // namespace nowcast
