#include "cte/model.hpp"

#include <cmath>

#include "cte/error.hpp"

namespace cte::model {

using num::Tensor;
using num::Var;

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.layers = 6;
  c.model_dim = 256;
  c.ffn_dim = 1024;
  c.heads = 4;
  c.top_k = 4;
  return c;
}

ModelConfig ModelConfig::base() {
  ModelConfig c;
  c.layers = 12;
  c.model_dim = 512;
  c.ffn_dim = 2048;
  c.heads = 8;
  c.top_k = 8;
  return c;
}

void ModelConfig::validate() const {
  if (model_dim < 2) throw ConfigError("model_dim must be at least 2");
  if (heads == 0 || model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (max_frames == 0) throw ConfigError("max_frames must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  if (layers == 0) {
    if (top_k != 0) throw ConfigError("a zero-layer encoder has no layers to average (top_k must be 0)");
  } else if (top_k < 1 || top_k > layers) {
    throw ConfigError("top_k must satisfy 1 <= K <= layers (K=" + std::to_string(top_k) +
                      ", L=" + std::to_string(layers) + ")");
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = model_dim, f = ffn_dim;
  const std::size_t per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  return feature_dim * d + d + layers * per_block + 2 * d;
}

namespace {

template <typename Params, typename Visit>
void visit_parameters(Params& p, Visit&& visit) {
  visit("input.weight", p.input_weight);
  visit("input.bias", p.input_bias);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    visit(pre + "attn_norm.gamma", b.attn_norm_gamma);
    visit(pre + "attn_norm.beta", b.attn_norm_beta);
    visit(pre + "query.weight", b.query_weight);
    visit(pre + "query.bias", b.query_bias);
    visit(pre + "key.weight", b.key_weight);
    visit(pre + "key.bias", b.key_bias);
    visit(pre + "value.weight", b.value_weight);
    visit(pre + "value.bias", b.value_bias);
    visit(pre + "output.weight", b.output_weight);
    visit(pre + "output.bias", b.output_bias);
    visit(pre + "ffn_norm.gamma", b.ffn_norm_gamma);
    visit(pre + "ffn_norm.beta", b.ffn_norm_beta);
    visit(pre + "ffn_in.weight", b.ffn_in_weight);
    visit(pre + "ffn_in.bias", b.ffn_in_bias);
    visit(pre + "ffn_out.weight", b.ffn_out_weight);
    visit(pre + "ffn_out.bias", b.ffn_out_bias);
  }
  visit("final_norm.gamma", p.final_norm_gamma);
  visit("final_norm.beta", p.final_norm_beta);
}

bool is_weight_matrix(const std::string& name) {
  return name.ends_with(".weight");
}

}  // namespace

std::vector<num::NamedTensor> EncoderParams::named_parameters() {
  std::vector<num::NamedTensor> out;
  visit_parameters(*this, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> EncoderParams::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_parameters(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t->size();
  return n;
}

void EncoderParams::zero_grad() {
  for (auto& p : named_parameters()) p.tensor->zero_grad();
}

Tensor sinusoidal_positions(std::size_t rows, std::size_t dim) {
  Tensor table({rows, dim});
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      table.at(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < dim) table.at(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return table;
}

ModelPair init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.model_dim, f = config.ffn_dim;
  EncoderParams s;
  s.config = config;
  s.input_weight = Tensor({config.feature_dim, d});
  s.input_bias = Tensor({d});
  s.blocks.resize(config.layers);
  for (auto& b : s.blocks) {
    b.attn_norm_gamma = Tensor({d}, 1.0);
    b.attn_norm_beta = Tensor({d});
    b.query_weight = Tensor({d, d});
    b.query_bias = Tensor({d});
    b.key_weight = Tensor({d, d});
    b.key_bias = Tensor({d});
    b.value_weight = Tensor({d, d});
    b.value_bias = Tensor({d});
    b.output_weight = Tensor({d, d});
    b.output_bias = Tensor({d});
    b.ffn_norm_gamma = Tensor({d}, 1.0);
    b.ffn_norm_beta = Tensor({d});
    b.ffn_in_weight = Tensor({d, f});
    b.ffn_in_bias = Tensor({f});
    b.ffn_out_weight = Tensor({f, d});
    b.ffn_out_bias = Tensor({d});
  }
  s.final_norm_gamma = Tensor({d}, 1.0);
  s.final_norm_beta = Tensor({d});
  s.positions = sinusoidal_positions(config.max_frames + 1, d);

  Rng rng(seed);
  for (auto& p : s.named_parameters()) {
    if (!is_weight_matrix(p.name)) continue;
    for (double& w : p.tensor->data()) w = rng.truncated_normal(config.init_std, 2.0);
  }
  for (auto& p : s.named_parameters()) p.tensor->set_requires_grad(true);

  ModelPair pair{s, s};
  for (auto& p : pair.teacher.named_parameters()) p.tensor->set_requires_grad(false);
  return pair;
}

namespace {

void check_length(std::size_t frames, const ModelConfig& config) {
  if (frames == 0) throw InputError("cannot encode an empty sequence (T = 0)");
  if (frames > config.max_frames) {
    throw LengthError("sequence of " + std::to_string(frames) + " frames exceeds max_frames = " +
                      std::to_string(config.max_frames));
  }
}

}  // namespace

PackedInput pack_sequences(std::span<const features::FeatureSequence* const> sequences, const ModelConfig& config) {
  if (sequences.empty()) throw InputError("nothing to encode");
  std::size_t rows = 0;
  for (const auto* s : sequences) {
    check_length(s->num_frames, config);
    if (s->num_bins != config.feature_dim) {
      throw DimensionError("feature dimension " + std::to_string(s->num_bins) + " differs from the model's " +
                           std::to_string(config.feature_dim));
    }
    rows += s->num_frames + 1;
  }
  PackedInput out;
  out.frames = Tensor({rows, config.feature_dim});
  std::size_t offset = 0;
  for (const auto* s : sequences) {
    double* dst = out.frames.data().data() + offset * config.feature_dim;
    std::fill(dst, dst + config.feature_dim, config.token_value);
    std::copy(s->values.begin(), s->values.end(), dst + config.feature_dim);
    out.segments.push_back({offset, s->num_frames + 1});
    offset += s->num_frames + 1;
  }
  return out;
}

PackedInput pack_batch(const data::Batch& batch, bool student_side) {
  const std::size_t len = student_side ? batch.student_len : batch.teacher_len;
  const auto& values = student_side ? batch.student_features : batch.teacher_features;
  const auto& mask = student_side ? batch.student_mask : batch.teacher_mask;
  const std::size_t f = batch.feature_dim;
  std::size_t rows = 0;
  for (auto m : mask) rows += m != 0;
  if (rows == 0) throw InputError("batch side has no unmasked positions");
  PackedInput out;
  out.frames = Tensor({rows, f});
  std::size_t offset = 0;
  for (std::size_t r = 0; r < batch.size; ++r) {
    const std::size_t start = offset;
    if (!mask[r * len]) throw InputError("position 0 of a batch row must be unmasked");
    for (std::size_t t = 0; t < len; ++t) {
      if (!mask[r * len + t]) continue;
      const double* src = values.data() + (r * len + t) * f;
      std::copy(src, src + f, out.frames.data().data() + offset * f);
      ++offset;
    }
    out.segments.push_back({start, offset - start});
  }
  return out;
}

namespace {

Var maybe_dropout(Var x, const ModelConfig& config, const EncodeOptions& options) {
  if (!options.training || config.dropout == 0.0) return x;
  if (!options.rng) throw ContractError("training-mode encode with dropout needs an rng");
  return num::dropout(x, config.dropout, *options.rng);
}

Var feed_forward(num::Tape& tape, BlockParams& b, Var x, const ModelConfig& config, const EncodeOptions& options) {
  auto h = num::layer_norm(x, tape.leaf(b.ffn_norm_gamma), tape.leaf(b.ffn_norm_beta));
  h = num::gelu(num::linear(h, tape.leaf(b.ffn_in_weight), tape.leaf(b.ffn_in_bias)));
  h = num::linear(h, tape.leaf(b.ffn_out_weight), tape.leaf(b.ffn_out_bias));
  return num::add(x, maybe_dropout(h, config, options));
}

}  // namespace

EncoderOutput encode(num::Tape& tape, EncoderParams& params, const PackedInput& input, const EncodeOptions& options) {
  const ModelConfig& cfg = params.config;
  if (input.frames.cols() != cfg.feature_dim) throw DimensionError("packed input has the wrong feature dimension");
  if (input.segments.empty()) throw InputError("nothing to encode");

  const std::size_t n = input.frames.rows(), d = cfg.model_dim;
  Tensor pos({n, d});
  std::vector<std::size_t> first_rows;
  std::vector<num::Segment> single_rows;
  for (const auto& seg : input.segments) {
    if (seg.length < 2) throw InputError("cannot encode an empty sequence (T = 0)");
    check_length(seg.length - 1, cfg);
    if (seg.offset + seg.length > n) throw DimensionError("segment exceeds packed input");
    for (std::size_t t = 0; t < seg.length; ++t) {
      std::copy_n(params.positions.data().begin() + static_cast<std::ptrdiff_t>(t * d), d,
                  pos.data().begin() + static_cast<std::ptrdiff_t>((seg.offset + t) * d));
    }
    single_rows.push_back({first_rows.size(), 1});
    first_rows.push_back(seg.offset);
  }

  Var x = num::linear(tape.constant(input.frames), tape.leaf(params.input_weight), tape.leaf(params.input_bias));
  x = num::add(x, tape.constant(std::move(pos)));
  x = maybe_dropout(x, cfg, options);

  EncoderOutput out;
  bool reduced = false;
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    BlockParams& b = params.blocks[l];
    const bool last_only = !options.full_sequence && l + 1 == params.blocks.size();
    auto h = num::layer_norm(x, tape.leaf(b.attn_norm_gamma), tape.leaf(b.attn_norm_beta));
    auto k = num::linear(h, tape.leaf(b.key_weight), tape.leaf(b.key_bias));
    auto v = num::linear(h, tape.leaf(b.value_weight), tape.leaf(b.value_bias));
    if (!last_only) {
      auto q = num::linear(h, tape.leaf(b.query_weight), tape.leaf(b.query_bias));
      auto a = num::attention(q, k, v, input.segments, cfg.heads);
      a = num::linear(a, tape.leaf(b.output_weight), tape.leaf(b.output_bias));
      x = num::add(x, maybe_dropout(a, cfg, options));
      x = feed_forward(tape, b, x, cfg, options);
      out.layer_vectors.push_back(num::gather_rows(x, first_rows));
    } else {
      auto q = num::linear(num::gather_rows(h, first_rows), tape.leaf(b.query_weight), tape.leaf(b.query_bias));
      auto a = num::attention(q, k, v, single_rows, input.segments, cfg.heads);
      a = num::linear(a, tape.leaf(b.output_weight), tape.leaf(b.output_bias));
      x = num::add(num::gather_rows(x, first_rows), maybe_dropout(a, cfg, options));
      x = feed_forward(tape, b, x, cfg, options);
      out.layer_vectors.push_back(x);
      reduced = true;
    }
  }

  auto y = num::layer_norm(x, tape.leaf(params.final_norm_gamma), tape.leaf(params.final_norm_beta));
  if (reduced) {
    out.embedding = y;
  } else {
    if (options.full_sequence) out.sequence = y;
    out.embedding = num::gather_rows(y, first_rows);
  }
  return out;
}

std::vector<double> embed(EncoderParams& params, const features::FeatureSequence& features, num::Precision precision) {
  const features::FeatureSequence* one[] = {&features};
  const auto input = pack_sequences(one, params.config);
  num::Tape tape(precision);
  EncodeOptions options;
  options.full_sequence = false;
  const auto out = encode(tape, params, input, options);
  const auto values = out.embedding.value().data();
  return {values.begin(), values.end()};
}

Tensor build_target(std::span<const Tensor> layer_vectors, std::size_t top_k) {
  const std::size_t layers = layer_vectors.size();
  if (top_k == 0 || top_k > layers) {
    throw ConfigError("top_k must satisfy 1 <= K <= L (K=" + std::to_string(top_k) + ", L=" +
                      std::to_string(layers) + ")");
  }
  const Tensor& ref = layer_vectors.back();
  const std::size_t rows = ref.rows(), d = ref.cols();
  Tensor target({rows, d});
  for (std::size_t l = layers - top_k; l < layers; ++l) {
    if (layer_vectors[l].shape() != ref.shape()) throw DimensionError("layer vectors differ in shape");
    for (std::size_t r = 0; r < rows; ++r) {
      const auto normed = num::normalize_vector(layer_vectors[l].data().subspan(r * d, d));
      for (std::size_t j = 0; j < d; ++j) target.at(r, j) += normed[j];
    }
  }
  const double inv_k = 1.0 / static_cast<double>(top_k);
  for (double& v : target.data()) v *= inv_k;
  return target;
}

double cosine_loss(std::span<const double> v, std::span<const double> target) {
  if (v.size() != target.size()) throw DimensionError("cosine_loss: vectors differ in length");
  double dot = 0.0, nv = 0.0, nt = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    dot += v[i] * target[i];
    nv += v[i] * v[i];
    nt += target[i] * target[i];
  }
  nv = std::sqrt(nv);
  nt = std::sqrt(nt);
  if (nv <= 1e-8 || nt <= 1e-8) throw DegenerateInputError("cosine_loss: near-zero vector norm");
  return 1.0 - dot / (nv * nt);
}

Var cosine_loss(Var v, const Tensor& target) {
  auto t = v.tape().constant(target);
  return num::affine(num::mean(num::cosine_similarity_rows(v, t)), -1.0, 1.0);
}

void ema_update(EncoderParams& teacher, const EncoderParams& student, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ContractError("EMA decay must lie in [0, 1]");
  auto xi = teacher.named_parameters();
  const auto theta = student.named_parameters();
  if (xi.size() != theta.size()) throw ContractError("EMA: teacher and student differ in structure");
  const double keep = tau, take = 1.0 - tau;
  for (std::size_t i = 0; i < xi.size(); ++i) {
    if (xi[i].tensor->shape() != theta[i].second->shape()) {
      throw ContractError("EMA: shape mismatch for " + xi[i].name);
    }
    auto dst = xi[i].tensor->data();
    const auto src = theta[i].second->data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = keep * dst[j] + take * src[j];
  }
}

}  // namespace cte::model
