#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "cte/error.hpp"
#include "cte/trainer.hpp"

using namespace cte;
using namespace cte::train;
using num::Tensor;

namespace {

model::ModelConfig tiny() {
  model::ModelConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.ffn_dim = 32;
  c.heads = 2;
  c.top_k = 2;
  c.feature_dim = 6;
  c.dropout = 0.0;
  c.max_frames = 40;
  return c;
}

struct ToyData {
  data::UtteranceFeatures utterances;
  std::vector<data::WordPair> pairs;
};

// n utterances of random frames; pair i is (i, i+1 mod n), whole utterances.
ToyData toy_data(std::size_t n, std::uint64_t seed) {
  ToyData d;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    features::FeatureSequence f(5 + rng.below(8), 6);
    for (double& v : f.values) v = rng.uniform(-2.0, 2.0);
    d.utterances["u" + std::to_string(i)] = f;
  }
  auto whole = [&](std::size_t i) {
    data::WordSegment w;
    w.utterance_id = "u" + std::to_string(i);
    w.end = d.utterances[w.utterance_id].duration();
    return w;
  };
  for (std::size_t i = 0; i < n; ++i) d.pairs.push_back({whole(i), whole((i + 1) % n)});
  return d;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cte_test_trainer_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool same_parameters(const model::EncoderParams& a, const model::EncoderParams& b) {
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto x = pa[i].second->data();
    const auto y = pb[i].second->data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

// Zero gradients everywhere except element 0 of the input bias.
Tensor& single_parameter(TrainState& s) {
  s.model.student.zero_grad();
  return s.model.student.input_bias;
}

}  // namespace

TEST_CASE("learning-rate schedule: linear warmup then constant") {
  OptimConfig o;
  o.learning_rate = 1e-4;
  o.warmup_steps = 500;
  CHECK(o.learning_rate_at(0) == doctest::Approx(1e-4 / 500));
  CHECK(o.learning_rate_at(249) == doctest::Approx(0.5e-4));
  CHECK(o.learning_rate_at(499) == 1e-4);
  CHECK(o.learning_rate_at(10000) == 1e-4);
  o.warmup_steps = 0;
  CHECK(o.learning_rate_at(0) == 1e-4);

  OptimConfig bad;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.beta2 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.tau = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adam_step: hand-computed single step") {
  auto s = init_state(tiny(), 1);
  auto& w = single_parameter(s);
  w[0] = 1.0;
  w.grad()[0] = 1.0;
  const auto before = s.model.student.input_weight;
  OptimConfig o;
  adam_step(s, o, 0.1);
  // m = 0.1 * 1, v = 0.02 * 1; bias corrections 1 - 0.9 and 1 - 0.98.
  const double m_hat = (0.1 * 1.0) / (1.0 - 0.9);
  const double v_hat = (0.02 * 1.0) / (1.0 - 0.98);
  const double expect = 1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  CHECK(std::abs(w[0] - expect) <= 1e-12);
  CHECK(w[1] == 0.0);  // zero gradient leaves the parameter where it was
  CHECK(s.model.student.input_weight.storage() == before.storage());
  CHECK(s.adam_steps == 1);
}

TEST_CASE("adam_step: two steps follow the recurrence") {
  auto s = init_state(tiny(), 1);
  auto& w = single_parameter(s);
  w[0] = 0.5;
  OptimConfig o;
  double m = 0.0, v = 0.0, x = 0.5;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? 0.3 : -0.7;
    w.grad()[0] = g;
    adam_step(s, o, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.98 * v + 0.02 * g * g;
    x -= 0.01 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.98, t))) + 1e-8);
    CHECK(std::abs(w[0] - x) <= 1e-12);
  }
}

TEST_CASE("adam_step: descends f(w) = w^2 monotonically") {
  auto s = init_state(tiny(), 1);
  auto& w = single_parameter(s);
  w[0] = 1.0;
  OptimConfig o;
  double prev = w[0];
  for (int i = 0; i < 100; ++i) {
    w.grad()[0] = 2.0 * w[0];
    adam_step(s, o, 0.001);
    CHECK(w[0] < prev);
    CHECK(w[0] > 0.0);
    prev = w[0];
  }
  CHECK(w[0] < 0.95);
}

TEST_CASE("adam_step: non-finite gradient aborts with diagnostics") {
  auto s = init_state(tiny(), 1);
  s.model.student.zero_grad();
  s.step = 41;
  s.model.student.blocks[1].key_weight.grad()[3] = std::nan("");
  const auto before = s.model.student;
  try {
    adam_step(s, OptimConfig{}, 0.1);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 42") != std::string::npos);
    CHECK(msg.find("blocks.1.key.weight") != std::string::npos);
  }
  CHECK(same_parameters(before, s.model.student));
}

TEST_CASE("clip_gradients rescales to the global norm") {
  auto s = init_state(tiny(), 1);
  s.model.student.zero_grad();
  s.model.student.input_bias.grad()[0] = 3.0;
  s.model.student.final_norm_beta.grad()[2] = 4.0;
  CHECK(clip_gradients(s.model.student, 10.0) == doctest::Approx(5.0));
  CHECK(s.model.student.input_bias.grad()[0] == 3.0);
  CHECK(clip_gradients(s.model.student, 1.0) == doctest::Approx(5.0));
  CHECK(s.model.student.input_bias.grad()[0] == doctest::Approx(0.6));
  CHECK(s.model.student.final_norm_beta.grad()[2] == doctest::Approx(0.8));
}

TEST_CASE("train_step: frozen dynamics with tau = 1 and lr = 0") {
  auto d = toy_data(4, 3);
  auto s = init_state(tiny(), 2);
  OptimConfig o;
  o.learning_rate = 0.0;
  o.warmup_steps = 0;
  o.tau = 1.0;
  const auto batch = batch_for_step(d.pairs, d.utterances, 4, 0, 0, 1.0);
  const auto student = s.model.student;
  const auto teacher = s.model.teacher;
  const double first = train_step(s, batch, o);
  for (int i = 0; i < 3; ++i) CHECK(train_step(s, batch, o) == first);
  CHECK(same_parameters(student, s.model.student));
  CHECK(same_parameters(teacher, s.model.teacher));
  CHECK(s.step == 4);
}

TEST_CASE("train_step: teacher moves only by the EMA rule") {
  auto d = toy_data(6, 4);
  auto cfg = tiny();
  cfg.dropout = 0.1;
  auto s = init_state(cfg, 5);
  OptimConfig o;
  o.learning_rate = 1e-3;
  o.warmup_steps = 0;
  o.tau = 0.9;
  for (std::uint64_t step = 0; step < 3; ++step) {
    const auto batch = batch_for_step(d.pairs, d.utterances, 3, s.seed, step, 1.0);
    const auto teacher_before = s.model.teacher;
    const auto student_before = s.model.student;
    train_step(s, batch, o);
    CHECK_FALSE(same_parameters(student_before, s.model.student));
    const auto xi0 = teacher_before.named_parameters();
    const auto xi1 = std::as_const(s.model.teacher).named_parameters();
    const auto theta = std::as_const(s.model.student).named_parameters();
    bool exact = true;
    for (std::size_t i = 0; i < xi0.size(); ++i) {
      for (std::size_t j = 0; j < xi0[i].second->size(); ++j) {
        const double expect = 0.9 * (*xi0[i].second)[j] + (1.0 - 0.9) * (*theta[i].second)[j];
        exact = exact && (*xi1[i].second)[j] == expect;
      }
    }
    CHECK(exact);
    for (const auto& p : s.model.teacher.named_parameters()) CHECK_FALSE(p.tensor->has_grad());
  }
}

TEST_CASE("train_loop: zero steps, empty data, overfitting two pairs") {
  auto d = toy_data(2, 6);
  OptimConfig o;
  o.total_steps = 0;
  auto s = init_state(tiny(), 1);
  const auto before = s.model.student;
  LoopOptions quiet;
  quiet.log_interval = 0;
  CHECK(train_loop(s, d.pairs, d.utterances, o, quiet).empty());
  CHECK(same_parameters(before, s.model.student));

  o.total_steps = 5;
  CHECK_THROWS_AS(train_loop(s, {}, d.utterances, o, quiet), ConfigError);

  o.total_steps = 200;
  o.learning_rate = 1e-3;
  o.warmup_steps = 10;
  o.batch_size = 2;
  const auto curve = train_loop(s, d.pairs, d.utterances, o, quiet);
  REQUIRE(curve.size() == 200);
  CHECK(curve.front().step == 1);
  CHECK(curve.back().step == 200);
  CHECK(curve.back().loss < curve.front().loss);
  for (const auto& p : curve) CHECK(std::isfinite(p.loss));
}

TEST_CASE("batch_for_step: epochs cover every pair once") {
  auto d = toy_data(7, 2);
  std::vector<int> seen(7, 0);
  for (std::uint64_t step = 3; step < 6; ++step) {  // epoch 1 with batches of 3
    for (auto i : batch_for_step(d.pairs, d.utterances, 3, 9, step, 1.0).pair_indices) ++seen[i];
  }
  for (int c : seen) CHECK(c == 1);
  const auto a = batch_for_step(d.pairs, d.utterances, 3, 9, 0, 1.0).pair_indices;
  const auto b = batch_for_step(d.pairs, d.utterances, 3, 9, 3, 1.0).pair_indices;
  const auto c = batch_for_step(d.pairs, d.utterances, 3, 9, 0, 1.0).pair_indices;
  CHECK(a == c);
  CHECK(a != b);
}

TEST_CASE("checkpoint: round trip and resume are bit-identical") {
  auto d = toy_data(5, 8);
  auto cfg = tiny();
  cfg.dropout = 0.1;
  OptimConfig o;
  o.total_steps = 12;
  o.batch_size = 2;
  o.learning_rate = 1e-3;
  o.warmup_steps = 3;
  const auto dir = temp_dir("resume");
  LoopOptions opts;
  opts.log_interval = 0;
  opts.checkpoint_dir = dir;
  opts.checkpoint_interval = 6;

  auto full = init_state(cfg, 11);
  const auto curve = train_loop(full, d.pairs, d.utterances, o, opts);
  REQUIRE(std::filesystem::exists(dir / "step_6.ctec"));
  REQUIRE(std::filesystem::exists(dir / "last.ctec"));

  auto last = load_checkpoint(dir / "last.ctec");
  CHECK(last.step == 12);
  CHECK(last.seed == 11);
  CHECK(last.adam_steps == 12);
  CHECK(same_parameters(last.model.student, full.model.student));
  CHECK(same_parameters(last.model.teacher, full.model.teacher));
  for (std::size_t i = 0; i < full.adam_m.size(); ++i) {
    CHECK(last.adam_m[i].storage() == full.adam_m[i].storage());
    CHECK(last.adam_v[i].storage() == full.adam_v[i].storage());
  }
  CHECK(last.model.student.config.dropout == 0.1);

  auto resumed = load_checkpoint(dir / "step_6.ctec");
  CHECK(resumed.step == 6);
  LoopOptions plain;
  plain.log_interval = 0;
  const auto tail = train_loop(resumed, d.pairs, d.utterances, o, plain);
  REQUIRE(tail.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(tail[i].step == curve[6 + i].step);
    CHECK(tail[i].loss == curve[6 + i].loss);
  }
  CHECK(same_parameters(resumed.model.student, full.model.student));
  CHECK(same_parameters(resumed.model.teacher, full.model.teacher));
}

TEST_CASE("checkpoint: malformed files") {
  const auto dir = temp_dir("bad");
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ctec"), IoError);
  {
    std::ofstream out(dir / "magic.ctec", std::ios::binary);
    out << "NOPE and more bytes";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ctec"), ParseError);

  const auto s = init_state(tiny(), 1);
  save_checkpoint(dir / "ok.ctec", s);
  const auto size = std::filesystem::file_size(dir / "ok.ctec");
  std::filesystem::copy_file(dir / "ok.ctec", dir / "short.ctec");
  std::filesystem::resize_file(dir / "short.ctec", size - 5);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ctec"), ParseError);
  CHECK_NOTHROW(load_checkpoint(dir / "ok.ctec"));
}

TEST_CASE("finetune: zero steps keeps embeddings; optimizer restarts") {
  auto d = toy_data(4, 12);
  auto s = init_state(tiny(), 3);
  OptimConfig o;
  o.total_steps = 4;
  o.batch_size = 2;
  LoopOptions quiet;
  quiet.log_interval = 0;
  train_loop(s, d.pairs, d.utterances, o, quiet);
  const auto& probe = d.utterances.at("u0");
  const auto before = model::embed(s.model.student, probe);

  auto copy = s;
  CHECK(finetune(copy, d.pairs, d.utterances, o, 0, quiet).empty());
  CHECK(model::embed(copy.model.student, probe) == before);
  CHECK(copy.step == 0);
  CHECK(copy.adam_steps == 0);

  const auto curve = finetune(copy, d.pairs, d.utterances, o, 3, quiet);
  CHECK(curve.size() == 3);
  CHECK(copy.step == 3);
  CHECK(copy.adam_steps == 3);
  CHECK_THROWS_AS(finetune(copy, {}, d.utterances, o, 3, quiet), ConfigError);
}

TEST_CASE("loss curve CSV round trip") {
  const auto dir = temp_dir("curve");
  std::vector<LossPoint> curve{{1, 0.75}, {2, 0.1 + 0.2}, {3, 1e-17}};
  write_loss_curve(dir / "loss.csv", curve);
  std::ifstream in(dir / "loss.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,loss");
  const auto back = read_loss_curve(dir / "loss.csv");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].step == curve[i].step);
    CHECK(back[i].loss == curve[i].loss);
  }
}

TEST_CASE("config file: keys, overrides and errors") {
  const auto dir = temp_dir("config");
  {
    std::ofstream out(dir / "a.cfg");
    out << "# desk-scale\nlayers = 4\nmodel_dim=128\n\nlearning_rate=3e-4\nprecision=32\ntau=0.99\n";
  }
  const auto c = load_config(dir / "a.cfg");
  CHECK(c.model.layers == 4);
  CHECK(c.model.model_dim == 128);
  CHECK(c.model.ffn_dim == 1024);
  CHECK(c.optim.learning_rate == 3e-4);
  CHECK(c.optim.tau == 0.99);
  CHECK(c.optim.precision == num::Precision::f32);

  write_config(dir / "b.cfg", c);
  const auto back = load_config(dir / "b.cfg");
  CHECK(back.entries() == c.entries());

  {
    std::ofstream out(dir / "bad.cfg");
    out << "layers=4\nwidth=3\n";
  }
  CHECK_THROWS_AS(load_config(dir / "bad.cfg"), ConfigError);
  {
    std::ofstream out(dir / "noeq.cfg");
    out << "layers 4\n";
  }
  CHECK_THROWS_AS(load_config(dir / "noeq.cfg"), ParseError);
  CHECK_THROWS_AS(load_config(dir / "missing.cfg"), IoError);
  TrainConfig t;
  CHECK_THROWS_AS(t.set("heads", "-1"), ConfigError);
  CHECK_THROWS_AS(t.set("dropout", "abc"), ConfigError);
}

TEST_CASE("check_loss_gradients: full loss of a small encoder passes at 1e-4") {
  model::ModelConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.ffn_dim = 32;
  c.heads = 2;
  c.top_k = 2;
  num::GradCheckOptions o;
  o.tolerance = 1e-4;
  const auto report = train::check_loss_gradients(c, 5, 12, 3, o);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.entries.size() == model::init_model(c, 5).student.named_parameters().size());
}
