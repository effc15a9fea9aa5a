#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>

#include "nowcast/dataset.hpp"
#include "nowcast/flow.hpp"
#include "nowcast/model.hpp"
#include "nowcast/supervision.hpp"

namespace nowcast {

struct TrainingSettings {
  double lr = 1e-4;
  int batch = 8;
  int epochs = 1;
  // When positive, overrides the epoch-derived step count.
  int steps = 0;
  std::uint64_t seed = 0;
};

struct DataSettings {
  double tau = kDefaultEventTau;
  std::array<double, 3> fractions{0.70, 0.15, 0.15};
  int crop_margin = kDefaultCropMargin;
};

struct PathSettings {
  std::string data_dir;
  std::string weights;
  std::string output_dir;
};

/// Everything a command needs, read from key=value lines with dotted
/// sections: flow.*, model.*, losses.*, training.*, data.*, paths.*.
struct ToolkitConfig {
  FlowConfig flow;
  ModelConfig model;
  LossWeights losses;
  KlOrder kl_order = KlOrder::PosteriorToPrior;
  TrainingSettings training;
  DataSettings data;
  PathSettings paths;

  /// Sets one key; throws ConfigError on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;

  static ToolkitConfig parse(std::istream& is);
  static ToolkitConfig load(const std::filesystem::path& path);
};

/// Training steps implied by the settings for a data set of `samples` windows.
int training_steps(const TrainingSettings& t, std::size_t samples);

}  // namespace nowcast
