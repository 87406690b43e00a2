#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cte/dataset.hpp"
#include "cte/features.hpp"
#include "cte/gradcheck.hpp"
#include "cte/ops.hpp"

namespace cte::model {

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t model_dim = 256;
  std::size_t ffn_dim = 1024;
  std::size_t heads = 4;
  std::size_t top_k = 4;  ///< teacher layers averaged into the target
  std::size_t feature_dim = 80;
  double dropout = 0.1;
  std::size_t max_frames = 201;
  /// Value of every element of the token prepended at position 0.
  double token_value = 1.0;
  /// Std of the truncated-normal (+-2 sigma) init of projection weights.
  double init_std = 0.02;

  static ModelConfig small();
  static ModelConfig base();

  /// Requires 1 <= top_k <= layers, except the degenerate layers == 0 case
  /// (with top_k == 0) that is only meaningful for encoding.
  void validate() const;
  /// Number of learnable scalars.
  std::size_t parameter_count() const;
};

/// Weights of one pre-norm transformer block. Projection weights are stored
/// [in x out] and applied as x * W + b.
struct BlockParams {
  num::Tensor attn_norm_gamma, attn_norm_beta;
  num::Tensor query_weight, query_bias;
  num::Tensor key_weight, key_bias;
  num::Tensor value_weight, value_bias;
  num::Tensor output_weight, output_bias;
  num::Tensor ffn_norm_gamma, ffn_norm_beta;
  num::Tensor ffn_in_weight, ffn_in_bias;
  num::Tensor ffn_out_weight, ffn_out_bias;
};

/// All weights of one encoder. The sinusoidal position table is derived from
/// the config and is not learnable.
struct EncoderParams {
  ModelConfig config;
  num::Tensor input_weight, input_bias;
  std::vector<BlockParams> blocks;
  num::Tensor final_norm_gamma, final_norm_beta;
  num::Tensor positions;  ///< (max_frames + 1) x model_dim, fixed

  /// Learnable tensors in a stable order with stable names.
  std::vector<num::NamedTensor> named_parameters();
  std::vector<std::pair<std::string, const num::Tensor*>> named_parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
};

num::Tensor sinusoidal_positions(std::size_t rows, std::size_t dim);

/// Student and teacher; the teacher starts as an exact copy.
struct ModelPair {
  EncoderParams student;
  EncoderParams teacher;
};

/// Truncated-normal (std config.init_std, +-2 sigma) projection weights, zero biases,
/// unit norm gains. Deterministic in the seed.
ModelPair init_model(const ModelConfig& config, std::uint64_t seed);

/// Sequences packed row-wise; each segment starts with its token row.
struct PackedInput {
  num::Tensor frames;  ///< N x F
  std::vector<num::Segment> segments;
};

/// Prepends the token to each sequence and packs them.
PackedInput pack_sequences(std::span<const features::FeatureSequence* const> sequences, const ModelConfig& config);
/// Gathers the unmasked positions of one side of a padded batch.
PackedInput pack_batch(const data::Batch& batch, bool student_side);

struct EncodeOptions {
  bool training = false;  ///< enables dropout
  Rng* rng = nullptr;     ///< required when training with dropout > 0
  /// When false, the last block is evaluated only at position 0 (all that
  /// the embedding and the target need) and `sequence` is left empty.
  bool full_sequence = true;
};

struct EncoderOutput {
  std::vector<num::Var> layer_vectors;  ///< v_l: position-0 rows after block l, each B x D
  num::Var embedding;                   ///< v: position-0 rows after the final norm, B x D
  num::Var sequence;                    ///< final-norm output at every packed row, N x D
};

/// Input projection, fixed positions, pre-norm blocks, final norm. Rows of
/// different segments never attend to each other.
EncoderOutput encode(num::Tape& tape, EncoderParams& params, const PackedInput& input, const EncodeOptions& options = {});

/// Embedding of one sequence, inference mode.
std::vector<double> embed(EncoderParams& params, const features::FeatureSequence& features,
                          num::Precision precision = num::Precision::f64);

/// Per-row (1/K) * sum over the top K layers of the parameter-free layer
/// norm of v_l. Plain values: no gradient flows through the target.
num::Tensor build_target(std::span<const num::Tensor> layer_vectors, std::size_t top_k);

/// 1 - cos(v, target) for single vectors.
double cosine_loss(std::span<const double> v, std::span<const double> target);
/// Batch mean of 1 - cos(v_i, target_i); differentiable in v only.
num::Var cosine_loss(num::Var v, const num::Tensor& target);

/// teacher <- tau * teacher + (1 - tau) * student, element-wise.
void ema_update(EncoderParams& teacher, const EncoderParams& student, double tau);

}  // namespace cte::model
