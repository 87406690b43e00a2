#include "cte/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cte/binary_io.hpp"
#include "cte/error.hpp"
#include "cte/text.hpp"

namespace cte::train {

using num::Tensor;

namespace {

constexpr std::uint64_t kBatchStream = 0xba7c;
constexpr std::uint64_t kDropoutStream = 0xd209;
constexpr char kCheckpointMagic[4] = {'C', 'T', 'E', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<Tensor> zeros_like(const model::EncoderParams& params) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params.named_parameters()) out.emplace_back(t->shape());
  return out;
}

}  // namespace

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be non-negative");
}

double OptimConfig::learning_rate_at(std::size_t step) const {
  if (warmup_steps == 0 || step >= warmup_steps) return learning_rate;
  return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

TrainState init_state(const model::ModelConfig& config, std::uint64_t seed) {
  TrainState s;
  s.model = model::init_model(config, seed);
  s.seed = seed;
  reset_optimizer(s);
  return s;
}

void reset_optimizer(TrainState& state) {
  state.adam_m = zeros_like(state.model.student);
  state.adam_v = zeros_like(state.model.student);
  state.adam_steps = 0;
}

void adam_step(TrainState& state, const OptimConfig& optim, double lr) {
  auto params = state.model.student.named_parameters();
  if (state.adam_m.size() != params.size() || state.adam_v.size() != params.size()) {
    throw ContractError("optimizer moments do not match the student parameters");
  }
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (double g : p.tensor->grad()) {
      if (!std::isfinite(g)) {
        throw NumericalError("non-finite gradient at step " + std::to_string(state.step + 1) + " in parameter " +
                             p.name);
      }
    }
  }
  const double t = static_cast<double>(state.adam_steps + 1);
  const double correction1 = 1.0 - std::pow(optim.beta1, t);
  const double correction2 = 1.0 - std::pow(optim.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = *params[i].tensor;
    if (!w.has_grad()) continue;
    const auto g = std::as_const(w).grad();
    auto value = w.data();
    auto m = state.adam_m[i].data();
    auto v = state.adam_v[i].data();
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = optim.beta1 * m[j] + (1.0 - optim.beta1) * g[j];
      v[j] = optim.beta2 * v[j] + (1.0 - optim.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      value[j] -= lr * m_hat / (std::sqrt(v_hat) + optim.adam_eps);
    }
  }
  ++state.adam_steps;
}

double clip_gradients(model::EncoderParams& student, double max_norm) {
  double sq = 0.0;
  auto params = student.named_parameters();
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (double g : std::as_const(*p.tensor).grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor->has_grad()) continue;
      for (double& g : p.tensor->grad()) g *= scale;
    }
  }
  return norm;
}

namespace {

Tensor teacher_target(model::EncoderParams& teacher, const data::Batch& batch, std::size_t top_k,
                      num::Precision precision) {
  num::Tape tape(precision);
  model::EncodeOptions options;
  options.full_sequence = false;
  const auto out = model::encode(tape, teacher, model::pack_batch(batch, false), options);
  std::vector<Tensor> layers;
  layers.reserve(out.layer_vectors.size());
  for (const auto& v : out.layer_vectors) layers.push_back(v.value());
  return model::build_target(layers, top_k);
}

}  // namespace

double batch_loss(model::ModelPair& model, const data::Batch& batch, std::size_t top_k, num::Precision precision) {
  num::Tape tape(precision);
  model::EncodeOptions options;
  options.full_sequence = false;
  const auto student = model::encode(tape, model.student, model::pack_batch(batch, true), options);
  const auto target = teacher_target(model.teacher, batch, top_k, precision);
  return model::cosine_loss(student.embedding, target).value().item();
}

double train_step(TrainState& state, const data::Batch& batch, const OptimConfig& optim) {
  auto& student = state.model.student;
  const auto& config = student.config;
  Rng dropout_rng(derive_seed(state.seed, kDropoutStream, state.step));

  num::Tape tape(optim.precision);
  model::EncodeOptions options;
  options.training = true;
  options.rng = &dropout_rng;
  options.full_sequence = false;
  const auto out = model::encode(tape, student, model::pack_batch(batch, true), options);
  const auto target = teacher_target(state.model.teacher, batch, config.top_k, optim.precision);
  const auto loss = model::cosine_loss(out.embedding, target);
  const double value = loss.value().item();

  student.zero_grad();
  tape.backward(loss);
  clip_gradients(student, optim.clip_norm);
  adam_step(state, optim, optim.learning_rate_at(static_cast<std::size_t>(state.step)));
  model::ema_update(state.model.teacher, student, optim.tau);
  ++state.step;
  return value;
}

num::GradCheckReport check_loss_gradients(model::ModelConfig config, std::uint64_t seed, std::size_t max_frames,
                                          std::size_t pairs, const num::GradCheckOptions& options) {
  if (max_frames == 0 || pairs == 0) throw ConfigError("gradient check needs at least one pair of one frame");
  config.dropout = 0.0;
  config.validate();
  auto model = model::init_model(config, seed);
  Rng rng(derive_seed(seed, 0x67c4, 0));
  for (auto& [name, t] : model.student.named_parameters()) {
    for (auto& v : t->data()) v += 0.3 * rng.normal();
  }
  model.teacher = model.student;
  for (auto& [name, t] : model.teacher.named_parameters()) {
    for (auto& v : t->data()) v += 0.1 * rng.normal();
  }

  std::vector<features::FeatureSequence> student_side, teacher_side;
  for (std::size_t i = 0; i < pairs; ++i) {
    for (auto* side : {&student_side, &teacher_side}) {
      features::FeatureSequence f(1 + rng.below(max_frames), config.feature_dim);
      for (auto& v : f.values) v = rng.normal();
      side->push_back(std::move(f));
    }
  }
  auto pointers = [](const std::vector<features::FeatureSequence>& seqs) {
    std::vector<const features::FeatureSequence*> out;
    for (const auto& s : seqs) out.push_back(&s);
    return out;
  };
  const auto student_input = model::pack_sequences(pointers(student_side), config);
  const auto teacher_input = model::pack_sequences(pointers(teacher_side), config);

  Tensor target;
  {
    num::Tape tape;
    const auto out = model::encode(tape, model.teacher, teacher_input);
    std::vector<Tensor> layers;
    for (const auto& v : out.layer_vectors) layers.push_back(v.value());
    target = model::build_target(layers, config.top_k);
  }
  model::EncodeOptions encode_options;
  encode_options.full_sequence = false;
  return num::grad_check(
      [&](num::Tape& tape) {
        return model::cosine_loss(model::encode(tape, model.student, student_input, encode_options).embedding, target);
      },
      model.student.named_parameters(), options);
}

data::Batch batch_for_step(const std::vector<data::WordPair>& pairs, const data::UtteranceFeatures& utterances,
                           std::size_t batch_size, std::uint64_t seed, std::uint64_t step, double token_value) {
  if (pairs.empty()) throw ConfigError("training needs at least one pair");
  const std::size_t per_epoch = (pairs.size() + batch_size - 1) / batch_size;
  const std::uint64_t epoch = step / per_epoch;
  data::BatchStream stream(pairs, utterances, batch_size, derive_seed(seed, kBatchStream, epoch), token_value);
  return stream.batch(static_cast<std::size_t>(step % per_epoch));
}

std::vector<LossPoint> train_loop(TrainState& state, const std::vector<data::WordPair>& pairs,
                                  const data::UtteranceFeatures& utterances, const OptimConfig& optim,
                                  const LoopOptions& options) {
  optim.validate();
  state.model.student.config.validate();
  std::vector<LossPoint> curve;
  if (state.step >= optim.total_steps) return curve;
  if (pairs.empty()) throw ConfigError("training needs at least one pair");
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  const double token = state.model.student.config.token_value;
  double window = 0.0;
  std::size_t window_count = 0;
  while (state.step < optim.total_steps) {
    const auto batch = batch_for_step(pairs, utterances, optim.batch_size, state.seed, state.step, token);
    const double loss = train_step(state, batch, optim);
    const auto step = static_cast<std::size_t>(state.step);
    curve.push_back({step, loss});
    if (options.on_step) options.on_step(step, loss);
    window += loss;
    ++window_count;
    if (options.log_interval > 0 && step % options.log_interval == 0) {
      std::cerr << "train step=" << step << " loss=" << window / static_cast<double>(window_count)
                << " lr=" << optim.learning_rate_at(step - 1) << '\n';
      window = 0.0;
      window_count = 0;
    }
    if (!options.checkpoint_dir.empty() && options.checkpoint_interval > 0 &&
        step % options.checkpoint_interval == 0 && step != optim.total_steps) {
      save_checkpoint(options.checkpoint_dir / ("step_" + std::to_string(step) + ".ctec"), state);
    }
  }
  if (!options.checkpoint_dir.empty()) save_checkpoint(options.checkpoint_dir / "last.ctec", state);
  return curve;
}

std::vector<LossPoint> finetune(TrainState& state, const std::vector<data::WordPair>& pairs,
                                const data::UtteranceFeatures& utterances, OptimConfig optim, std::size_t steps,
                                const LoopOptions& options) {
  if (pairs.empty()) throw ConfigError("fine-tuning needs at least one pair");
  reset_optimizer(state);
  state.step = 0;
  optim.total_steps = steps;
  return train_loop(state, pairs, utterances, optim, options);
}

// Checkpoint layout (little-endian):
//   "CTEC", u32 version, model config (7 x u32 sizes, dropout f64,
//   token_value f64, init_std f64), step u64, adam_steps u64, seed u64, u32 tensor count,
//   then per tensor: name string, u32 rank, rank x u32 dims, u8 dtype
//   (0 = f64, 1 = f32), payload.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const auto& c = state.model.student.config;
    out.write(kCheckpointMagic, 4);
    io::write_u32(out, kCheckpointVersion);
    for (std::size_t v : {c.layers, c.model_dim, c.ffn_dim, c.heads, c.top_k, c.feature_dim, c.max_frames}) {
      io::write_u32(out, static_cast<std::uint32_t>(v));
    }
    io::write_f64(out, c.dropout);
    io::write_f64(out, c.token_value);
    io::write_f64(out, c.init_std);
    io::write_u64(out, state.step);
    io::write_u64(out, state.adam_steps);
    io::write_u64(out, state.seed);

    std::vector<std::pair<std::string, const Tensor*>> all;
    for (const auto& [name, t] : state.model.student.named_parameters()) all.emplace_back("student/" + name, t);
    for (const auto& [name, t] : state.model.teacher.named_parameters()) all.emplace_back("teacher/" + name, t);
    const auto names = state.model.student.named_parameters();
    for (std::size_t i = 0; i < state.adam_m.size(); ++i) all.emplace_back("adam_m/" + names[i].first, &state.adam_m[i]);
    for (std::size_t i = 0; i < state.adam_v.size(); ++i) all.emplace_back("adam_v/" + names[i].first, &state.adam_v[i]);

    io::write_u32(out, static_cast<std::uint32_t>(all.size()));
    for (const auto& [name, t] : all) {
      io::write_string(out, name);
      io::write_u32(out, static_cast<std::uint32_t>(t->rank()));
      for (std::size_t d : t->shape()) io::write_u32(out, static_cast<std::uint32_t>(d));
      out.put(0);
      for (double v : t->data()) io::write_f64(out, v);
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  io::read_exact(in, magic, 4, "checkpoint magic");
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw ParseError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = io::read_u32(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  model::ModelConfig c;
  for (std::size_t* field : {&c.layers, &c.model_dim, &c.ffn_dim, &c.heads, &c.top_k, &c.feature_dim, &c.max_frames}) {
    *field = io::read_u32(in, "model config");
  }
  c.dropout = io::read_f64(in, "model config");
  c.token_value = io::read_f64(in, "model config");
  c.init_std = io::read_f64(in, "model config");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": invalid model config: " + e.what());
  }

  TrainState state = init_state(c, 0);
  state.step = io::read_u64(in, "step");
  state.adam_steps = io::read_u64(in, "adam step count");
  state.seed = io::read_u64(in, "seed");

  std::vector<std::pair<std::string, Tensor*>> expected;
  for (auto& p : state.model.student.named_parameters()) expected.emplace_back("student/" + p.name, p.tensor);
  for (auto& p : state.model.teacher.named_parameters()) expected.emplace_back("teacher/" + p.name, p.tensor);
  const auto names = state.model.student.named_parameters();
  for (std::size_t i = 0; i < state.adam_m.size(); ++i) expected.emplace_back("adam_m/" + names[i].name, &state.adam_m[i]);
  for (std::size_t i = 0; i < state.adam_v.size(); ++i) expected.emplace_back("adam_v/" + names[i].name, &state.adam_v[i]);

  const auto count = io::read_u32(in, "tensor count");
  if (count != expected.size()) throw ParseError(path.string() + ": unexpected tensor count");
  for (auto& [name, tensor] : expected) {
    const auto stored = io::read_string(in, "tensor name");
    if (stored != name) throw ParseError(path.string() + ": expected tensor " + name + ", found " + stored);
    const auto rank = io::read_u32(in, "tensor rank");
    num::Shape shape(rank);
    for (auto& d : shape) d = io::read_u32(in, "tensor dims");
    if (shape != tensor->shape()) throw ParseError(path.string() + ": shape mismatch for " + name);
    char dtype = 0;
    io::read_exact(in, &dtype, 1, "tensor dtype");
    auto values = tensor->data();
    if (dtype == 0) {
      for (double& v : values) v = io::read_f64(in, "tensor payload");
    } else if (dtype == 1) {
      for (double& v : values) v = io::read_f32(in, "tensor payload");
    } else {
      throw ParseError(path.string() + ": unknown dtype for " + name);
    }
  }
  return state;
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss\n";
  for (const auto& p : curve) out << p.step << ',' << text::format_double(p.loss) << '\n';
}

std::vector<LossPoint> read_loss_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<LossPoint> curve;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line == "step,loss") continue;
    if (text::trim(line).empty()) continue;
    const auto fields = text::split(line, ',');
    const auto step = fields.size() == 2 ? text::parse_int(fields[0]) : std::nullopt;
    const auto loss = fields.size() == 2 ? text::parse_double(fields[1]) : std::nullopt;
    if (!step || !loss || *step < 0) throw ParseError(path.string(), line_no, "expected step,loss");
    curve.push_back({static_cast<std::size_t>(*step), *loss});
  }
  return curve;
}

namespace {

std::size_t to_size(const std::string& key, const std::string& value) {
  const auto v = text::parse_int(text::trim(value));
  if (!v || *v < 0) throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  return static_cast<std::size_t>(*v);
}

double to_double(const std::string& key, const std::string& value) {
  const auto v = text::parse_double(text::trim(value));
  if (!v || !std::isfinite(*v)) throw ConfigError(key + ": expected a number, got '" + value + "'");
  return *v;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  auto& m = model;
  auto& o = optim;
  if (key == "layers") m.layers = to_size(key, value);
  else if (key == "model_dim") m.model_dim = to_size(key, value);
  else if (key == "ffn_dim") m.ffn_dim = to_size(key, value);
  else if (key == "heads") m.heads = to_size(key, value);
  else if (key == "top_k") m.top_k = to_size(key, value);
  else if (key == "feature_dim") m.feature_dim = to_size(key, value);
  else if (key == "dropout") m.dropout = to_double(key, value);
  else if (key == "max_frames") m.max_frames = to_size(key, value);
  else if (key == "token_value") m.token_value = to_double(key, value);
  else if (key == "init_std") m.init_std = to_double(key, value);
  else if (key == "learning_rate") o.learning_rate = to_double(key, value);
  else if (key == "beta1") o.beta1 = to_double(key, value);
  else if (key == "beta2") o.beta2 = to_double(key, value);
  else if (key == "adam_eps") o.adam_eps = to_double(key, value);
  else if (key == "warmup_steps") o.warmup_steps = to_size(key, value);
  else if (key == "total_steps") o.total_steps = to_size(key, value);
  else if (key == "batch_size") o.batch_size = to_size(key, value);
  else if (key == "seed") o.seed = to_size(key, value);
  else if (key == "tau") o.tau = to_double(key, value);
  else if (key == "clip_norm") o.clip_norm = to_double(key, value);
  else if (key == "precision") {
    const auto v = text::trim(value);
    if (v == "64" || v == "f64") o.precision = num::Precision::f64;
    else if (v == "32" || v == "f32") o.precision = num::Precision::f32;
    else throw ConfigError("precision: expected 64 or 32, got '" + value + "'");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

std::map<std::string, std::string> TrainConfig::entries() const {
  auto n = [](std::size_t v) { return std::to_string(v); };
  auto d = [](double v) { return text::format_double(v); };
  return {
      {"layers", n(model.layers)},
      {"model_dim", n(model.model_dim)},
      {"ffn_dim", n(model.ffn_dim)},
      {"heads", n(model.heads)},
      {"top_k", n(model.top_k)},
      {"feature_dim", n(model.feature_dim)},
      {"dropout", d(model.dropout)},
      {"max_frames", n(model.max_frames)},
      {"token_value", d(model.token_value)},
      {"init_std", d(model.init_std)},
      {"learning_rate", d(optim.learning_rate)},
      {"beta1", d(optim.beta1)},
      {"beta2", d(optim.beta2)},
      {"adam_eps", d(optim.adam_eps)},
      {"warmup_steps", n(optim.warmup_steps)},
      {"total_steps", n(optim.total_steps)},
      {"batch_size", n(optim.batch_size)},
      {"seed", std::to_string(optim.seed)},
      {"tau", d(optim.tau)},
      {"clip_norm", d(optim.clip_norm)},
      {"precision", optim.precision == num::Precision::f64 ? "64" : "32"},
  };
}

void TrainConfig::validate() const {
  model.validate();
  optim.validate();
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = text::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ParseError(path.string(), line_no, "expected key=value");
    const std::string key(text::trim(body.substr(0, eq)));
    const std::string value(text::trim(body.substr(eq + 1)));
    try {
      base.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

void write_config(const std::filesystem::path& path, const TrainConfig& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [key, value] : config.entries()) out << key << '=' << value << '\n';
}

}  // namespace cte::train
