#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "nowcast/flow.hpp"
#include "nowcast/model.hpp"
#include "nowcast/supervision.hpp"

namespace nowcast {

/// One window: context X_{-T}..X_0, future X_1..X_{T_f} and the flow targets
/// for the step X_0 -> X_1.
struct TrainingSample {
  std::vector<Grid> context;
  std::vector<Grid> future;
  SupervisionPair targets;
};

/// `frames` holds context_frames + horizon consecutive frames. The flow
/// window for the targets is the last flow.context_frames - 1 context frames
/// followed by X_1.
TrainingSample make_training_sample(std::span<const Grid> frames, int context_frames, const FlowConfig& flow,
                                    int crop_margin = kDefaultCropMargin);

/// Input scale from the context RMS, output scales from the target RMS.
Normalization fit_normalization(std::span<const TrainingSample> samples);

struct TrainConfig {
  int steps = 200;
  int batch = 8;
  ad::AdamConfig adam;
  std::uint64_t seed = 0;
  int threads = 1;
  LossWeights weights;
  KlOrder kl_order = KlOrder::PosteriorToPrior;

  void validate() const;
};

struct TrainLogRow {
  int step = 0;
  std::string stage;
  int lead = 1;
  int samples = 0;
  double loss = 0.0;
  // Encoder-decoder term breakdown; NaN for the evolver stage.
  double l_int = 0.0, l_motion = 0.0, l_cos = 0.0, l_kl = 0.0;
};

struct TrainReport {
  std::vector<TrainLogRow> log;
  int steps_completed = 0;
  bool diverged = false;
  std::string message;
};

/// Stage 1: Adam over the encoder and decoder on loss_ved. On a non-finite
/// loss or update the parameters are restored to the last finite state and
/// the report is flagged as diverged.
TrainReport train_ved(Model& model, std::span<const TrainingSample> samples, const TrainConfig& cfg);

/// Stage 2: Adam over the evolver only, on the teacher-forced warp loss at a
/// lead k drawn uniformly from 2..horizon per sample. The encoder and decoder
/// take part as constants.
TrainReport train_evolver(Model& model, std::span<const TrainingSample> samples, const TrainConfig& cfg);

/// Columns: step,stage,lead,samples,loss,l_int,l_motion,l_cos,l_kl.
void write_training_log(std::ostream& os, const std::vector<TrainLogRow>& rows);

/// Worker count from NOWCAST_THREADS (default 1).
int threads_from_env();

}  // namespace nowcast
