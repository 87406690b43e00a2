#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cte/dataset.hpp"
#include "cte/model.hpp"

namespace cte::train {

struct OptimConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 3000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double tau = 0.999;
  double clip_norm = 5.0;  ///< global gradient norm; 0 disables clipping
  num::Precision precision = num::Precision::f64;

  void validate() const;
  /// Linear warmup over warmup_steps, then constant. `step` counts from 0.
  double learning_rate_at(std::size_t step) const;
};

struct LoopOptions {
  std::size_t log_interval = 100;         ///< stderr progress lines; 0 = silent
  std::size_t checkpoint_interval = 0;    ///< 0 = only at the end
  std::filesystem::path checkpoint_dir;   ///< empty = no checkpoints
  /// Called after every step with (step just completed, loss).
  std::function<void(std::size_t, double)> on_step;
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  model::ModelPair model;
  std::vector<num::Tensor> adam_m;  ///< first moments, one per student parameter
  std::vector<num::Tensor> adam_v;  ///< second moments
  std::uint64_t step = 0;           ///< completed training steps
  std::uint64_t adam_steps = 0;     ///< updates since the moments were reset
  std::uint64_t seed = 0;           ///< root of batch order and dropout streams
};

TrainState init_state(const model::ModelConfig& config, std::uint64_t seed);
/// Zeroes the moments and the Adam update counter.
void reset_optimizer(TrainState& state);

/// One bias-corrected Adam update of the student from its accumulated
/// gradients. Throws NumericalError naming the step and parameter on a
/// non-finite gradient, before anything is modified.
void adam_step(TrainState& state, const OptimConfig& optim, double lr);

/// Rescales the student gradients so their global norm is at most max_norm.
/// Returns the norm before clipping.
double clip_gradients(model::EncoderParams& student, double max_norm);

/// Batch mean loss of the student on side a against teacher targets from
/// side b, without touching any parameter or gradient.
double batch_loss(model::ModelPair& model, const data::Batch& batch, std::size_t top_k,
                  num::Precision precision = num::Precision::f64);

/// Forward both encoders, loss, backward, Adam, EMA. Returns the batch loss.
double train_step(TrainState& state, const data::Batch& batch, const OptimConfig& optim);

/// Batch used at a given step: the pair list is reshuffled every epoch by a
/// permutation derived from (seed, epoch).
data::Batch batch_for_step(const std::vector<data::WordPair>& pairs, const data::UtteranceFeatures& utterances,
                           std::size_t batch_size, std::uint64_t seed, std::uint64_t step, double token_value);

struct LossPoint {
  std::size_t step;  ///< 1-based index of the completed step
  double loss;
};

/// Runs steps until state.step == optim.total_steps and returns the losses
/// of the steps it ran. Resuming from a checkpoint continues the curve
/// bit-identically (64-bit mode).
std::vector<LossPoint> train_loop(TrainState& state, const std::vector<data::WordPair>& pairs,
                                  const data::UtteranceFeatures& utterances, const OptimConfig& optim,
                                  const LoopOptions& options = {});

/// Continues training a loaded state on new pairs for `steps` steps with
/// fresh optimizer moments and a step counter restarted at 0.
std::vector<LossPoint> finetune(TrainState& state, const std::vector<data::WordPair>& pairs,
                                const data::UtteranceFeatures& utterances, OptimConfig optim, std::size_t steps = 5000,
                                const LoopOptions& options = {});

/// Reverse-mode gradients of the batch loss against central differences for
/// every student parameter. The model is initialised from `seed` and then
/// perturbed away from the near-zero init so that the check is informative;
/// the teacher is a perturbed copy. Inputs are `pairs` random pairs of
/// 1..max_frames frames. Dropout is disabled.
num::GradCheckReport check_loss_gradients(model::ModelConfig config, std::uint64_t seed, std::size_t max_frames = 12,
                                          std::size_t pairs = 3, const num::GradCheckOptions& options = {});

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

void write_loss_curve(const std::filesystem::path& path, const std::vector<LossPoint>& curve);
std::vector<LossPoint> read_loss_curve(const std::filesystem::path& path);

/// Model and optimizer settings read from a flat key=value file.
struct TrainConfig {
  model::ModelConfig model;
  OptimConfig optim;

  /// Sets one documented key; ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> entries() const;
  void validate() const;
};

/// Applies every key=value line of the file on top of `base`. Blank lines
/// and lines starting with '#' are ignored.
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
void write_config(const std::filesystem::path& path, const TrainConfig& config);

}  // namespace cte::train
