// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,5] [--steps N] [--out DIR]
//
// Criteria 5, 6, 8 and 9 share the desk-scale training run; 7 fine-tunes
// its final model on a second synthetic language.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "cte/evaluation.hpp"
#include "cte/gradcheck.hpp"
#include "cte/ops.hpp"
#include "cte/synthcorpus.hpp"
#include "cte/trainer.hpp"
#include "oracles.hpp"

using namespace cte;
using num::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

void report(int id, const std::string& title, const Outcome& o) {
  std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << title << ": " << o.detail
            << std::endl;
}

Tensor random_tensor(Rng& rng, num::Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  num::GradCheckOptions opt;
  opt.tolerance = 1e-4;
  Rng rng(2024);
  Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), bias = random_tensor(rng, {5});
  Tensor g = random_tensor(rng, {4}), be = random_tensor(rng, {4});
  Tensor w = random_tensor(rng, {3, 4}), c = random_tensor(rng, {3, 4}), w5 = random_tensor(rng, {3, 5});
  Tensor q = random_tensor(rng, {7, 4}), k = random_tensor(rng, {7, 4}), v = random_tensor(rng, {7, 4});
  Tensor o = random_tensor(rng, {7, 4});
  std::vector<std::uint8_t> mask(12, 1);
  mask[1] = mask[6] = 0;
  const std::vector<std::size_t> rows{2, 0, 2};
  const std::vector<num::Segment> segs{{0, 3}, {3, 4}};

  using num::Tape;
  std::vector<std::pair<std::string, num::GradCheckReport>> reports;
  reports.emplace_back("matmul", num::grad_check([&](Tape& t) {
    auto m = num::matmul(t.leaf(a), t.leaf(b));
    return num::sum(num::mul(m, m));
  }, {{"a", &a}, {"b", &b}}, opt));
  reports.emplace_back("linear", num::grad_check([&](Tape& t) {
    return num::sum(num::mul(num::linear(t.leaf(a), t.leaf(b), t.leaf(bias)), t.constant(w5)));
  }, {{"x", &a}, {"w", &b}, {"b", &bias}}, opt));
  reports.emplace_back("add/affine/mean", num::grad_check([&](Tape& t) {
    auto s = num::add(num::affine(t.leaf(a), 1.5, -0.2), t.leaf(c));
    return num::mean(num::mul(s, s));
  }, {{"a", &a}, {"c", &c}}, opt));
  reports.emplace_back("layer_norm", num::grad_check([&](Tape& t) {
    return num::sum(num::mul(num::layer_norm(t.leaf(a), t.leaf(g), t.leaf(be)), t.constant(w)));
  }, {{"x", &a}, {"gamma", &g}, {"beta", &be}}, opt));
  reports.emplace_back("softmax", num::grad_check([&](Tape& t) {
    return num::sum(num::mul(num::softmax(t.leaf(a), mask), t.constant(w)));
  }, {{"x", &a}}, opt));
  reports.emplace_back("gelu", num::grad_check([&](Tape& t) {
    return num::sum(num::mul(num::gelu(t.leaf(a)), t.constant(w)));
  }, {{"x", &a}}, opt));
  reports.emplace_back("gather/cosine", num::grad_check([&](Tape& t) {
    return num::sum(num::cosine_similarity_rows(num::gather_rows(t.leaf(a), rows), num::gather_rows(t.leaf(c), rows)));
  }, {{"a", &a}, {"c", &c}}, opt));
  reports.emplace_back("attention", num::grad_check([&](Tape& t) {
    return num::sum(num::mul(num::attention(t.leaf(q), t.leaf(k), t.leaf(v), segs, 2), t.constant(o)));
  }, {{"q", &q}, {"k", &k}, {"v", &v}}, opt));

  model::ModelConfig small;
  small.layers = 2;
  small.model_dim = 16;
  small.ffn_dim = 32;
  small.heads = 2;
  small.top_k = 2;
  reports.emplace_back("full loss", train::check_loss_gradients(small, 7, 12, 3, opt));

  const double elapsed = seconds_since(t0);
  bool pass = elapsed < 120.0;
  double worst = 0.0;
  std::string failed;
  for (const auto& [name, r] : reports) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.pass) {
      pass = false;
      failed += " " + name;
    }
  }
  std::string detail = std::to_string(reports.size()) + " checks, max rel error " + sci(worst) +
                       " (tol 1e-4), " + fmt(elapsed, 1) + " s (limit 120 s)";
  if (!failed.empty()) detail += ", failed:" + failed;
  return {pass, detail};
}

// ---------------------------------------------------------------- 2

Outcome ema_exactness() {
  model::ModelConfig cfg = model::ModelConfig::small();
  cfg.layers = 2;
  cfg.top_k = 2;
  auto start = model::init_model(cfg, 1);
  auto target = model::init_model(cfg, 2);
  auto teacher = start.teacher;
  const double tau = 0.999;
  const int updates = 1000;
  for (int u = 0; u < updates; ++u) model::ema_update(teacher, target.student, tau);
  const double tu = std::pow(tau, updates);
  const auto got = teacher.named_parameters();
  const auto xi0 = start.teacher.named_parameters();
  const auto theta = target.student.named_parameters();
  double worst = 0.0;
  for (std::size_t p = 0; p < got.size(); ++p) {
    const auto x = got[p].tensor->data();
    const auto x0 = xi0[p].tensor->data();
    const auto th = theta[p].tensor->data();
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - (tu * x0[i] + (1.0 - tu) * th[i])));
  }
  return {worst <= 1e-12, "max error " + sci(worst) + " over " + std::to_string(cfg.parameter_count()) +
                              " parameters (tol 1e-12)"};
}

// ---------------------------------------------------------------- 3

Outcome ap_oracles() {
  Rng rng(33);
  int matches = 0;
  const int sets = 30;
  for (int trial = 0; trial < sets; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    std::vector<std::string> labels(n);
    for (auto& l : labels) l = std::string(1, static_cast<char>('a' + rng.below(4)));
    labels[0] = labels[1];
    labels[2] = "z";
    const bool coarse = trial % 2 == 0;
    std::vector<std::vector<double>> m(n, std::vector<double>(n));
    for (auto& row : m)
      for (auto& v : row) v = coarse ? static_cast<double>(rng.below(5)) : rng.uniform(-1.0, 1.0);
    const auto r = eval::same_different(n, labels, [&](std::size_t i, std::size_t j) { return m[i][j]; });
    std::vector<double> scores;
    std::vector<std::uint8_t> same;
    for (const auto& p : r.pairs) {
      scores.push_back(p.score);
      same.push_back(p.same);
    }
    if (r.ap_roc == oracle::roc_by_thresholds(scores, same) && r.ap_pr == oracle::pr_by_cutoffs(scores, same))
      ++matches;
  }
  return {matches == sets, std::to_string(matches) + "/" + std::to_string(sets) +
                               " sets match both oracles exactly (half with tied scores)"};
}

// ---------------------------------------------------------------- experiment setup

model::ModelConfig desk_model() {
  model::ModelConfig c;
  c.layers = 4;
  c.model_dim = 128;
  c.ffn_dim = 512;
  c.heads = 4;
  c.top_k = 3;
  c.init_std = 1.0 / std::sqrt(static_cast<double>(c.model_dim));
  return c;
}

synth::CorpusSpec desk_corpus(const std::string& language, std::uint64_t seed) {
  synth::CorpusSpec s;
  s.language = language;
  s.seed = seed;
  s.formant_range = 1.3;
  s.min_snr_db = 5.0;
  s.max_snr_db = 20.0;
  s.boundary_slop = 0.07;
  return s;
}

constexpr std::uint64_t kCorpusSeed = 1;
constexpr std::uint64_t kSecondCorpusSeed = 2;
constexpr std::uint64_t kTrainSeed = 1;

Outcome padding_invariance() {
  auto cfg = desk_model();
  auto pair = model::init_model(cfg, 5);
  Rng rng(44);
  const std::size_t count = 20;
  double worst = 0.0;
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t short_len = 10 + rng.below(120);
    const std::size_t long_len = short_len + 5 + rng.below(cfg.max_frames - short_len - 5);
    features::FeatureSequence shorter(short_len, cfg.feature_dim), longer(long_len, cfg.feature_dim);
    for (double& v : shorter.values) v = rng.uniform(-8.0, 2.0);
    for (double& v : longer.values) v = rng.uniform(-8.0, 2.0);
    data::UtteranceFeatures utts{{"s", shorter}, {"l", longer}};
    auto whole = [&](const std::string& id) {
      data::WordSegment w;
      w.utterance_id = id;
      w.end = utts[id].duration();
      return w;
    };
    std::vector<data::WordPair> pairs{{whole("s"), whole("l")}, {whole("l"), whole("s")}};
    auto batch = data::make_batches(pairs, utts, 2, std::nullopt).front();
    num::Tape tape(num::Precision::f32);
    auto padded = model::encode(tape, pair.student, model::pack_batch(batch, true));
    const auto alone = model::embed(pair.student, shorter, num::Precision::f32);
    for (std::size_t j = 0; j < cfg.model_dim; ++j)
      worst = std::max(worst, std::abs(padded.embedding.value().at(0, j) - alone[j]));
  }
  return {worst <= 1e-5, std::to_string(count) + " segments, max |padded - unpadded| " + sci(worst) +
                             " (32-bit, tol 1e-5)"};
}

struct Language {
  synth::Corpus corpus;
  data::UtteranceFeatures utterances;
  std::vector<data::WordPair> train_pairs;
  std::vector<eval::EvalSegment> test;
  std::vector<std::string> labels;
};

Language make_language(const synth::CorpusSpec& spec) {
  Language l;
  l.corpus = synth::generate(spec);
  const features::LogMelFrontend frontend{features::FrontendConfig{}};
  for (const auto& u : l.corpus.utterances) l.utterances[u.id] = frontend.compute(u.audio);
  l.train_pairs = data::build_pairs(l.corpus.segments_in(data::Split::train));
  l.test = eval::make_eval_segments(l.corpus.segments_in(data::Split::test), l.utterances, l.corpus.phones,
                                    l.corpus.speakers);
  for (const auto& e : l.test) l.labels.push_back(*e.segment.word_id);
  return l;
}

struct Evaluation {
  eval::SameDiffResult ap;
  double collapse = 0.0;
  std::vector<eval::PsedBucket> psed;
};

Evaluation evaluate(model::EncoderParams& student, const Language& lang) {
  Evaluation e;
  const auto emb = eval::extract_embeddings(student, lang.test);
  e.ap = eval::same_different(emb, lang.labels);
  e.collapse = eval::collapse_metric(emb);
  std::vector<std::vector<std::string>> phones;
  for (const auto& s : lang.test) phones.push_back(s.phones);
  e.psed = eval::psed_curve(phones, emb);
  return e;
}

struct Run {
  std::vector<train::LossPoint> curve;
  train::TrainState state;
  Evaluation result;
  double seconds = 0.0;
};

train::OptimConfig desk_optim(std::size_t steps) {
  train::OptimConfig o;
  o.total_steps = steps;
  o.seed = kTrainSeed;
  return o;
}

train::LoopOptions quiet() {
  train::LoopOptions o;
  o.log_interval = 0;
  return o;
}

// Trains to `steps`, saving a checkpoint at `save_at` when given.
Run train_run(const Language& lang, std::size_t steps, std::optional<std::size_t> save_at,
              const std::filesystem::path& checkpoint) {
  Run r;
  const auto t0 = Clock::now();
  r.state = train::init_state(desk_model(), kTrainSeed);
  if (save_at) {
    auto first = train::train_loop(r.state, lang.train_pairs, lang.utterances, desk_optim(*save_at), quiet());
    train::save_checkpoint(checkpoint, r.state);
    r.curve = std::move(first);
  }
  auto rest = train::train_loop(r.state, lang.train_pairs, lang.utterances, desk_optim(steps), quiet());
  r.curve.insert(r.curve.end(), rest.begin(), rest.end());
  r.seconds = seconds_since(t0);
  r.result = evaluate(r.state.model.student, lang);
  return r;
}

std::string psed_text(const std::vector<eval::PsedBucket>& curve) {
  std::string s;
  for (const auto& b : curve) {
    s += (s.empty() ? "" : " ") + std::string(b.bucket == 4 ? "4+" : std::to_string(b.bucket)) + ":" +
         fmt(b.mean_cosine, 3) + "(" + std::to_string(b.count) + ")";
  }
  return s;
}

bool same_curve(const std::vector<train::LossPoint>& a, const std::vector<train::LossPoint>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].step != b[i].step || a[i].loss != b[i].loss) return false;
  return true;
}

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  num::retain_freed_memory();
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::size_t steps = 3000;
  std::string out_dir;
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--steps", steps, "training steps of the desk-scale run")->check(CLI::Range(2, 1000000));
  app.add_option("--out", out_dir, "directory for loss curves and summaries");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted(only.begin(), only.end());
  auto want = [&](int id) { return wanted.empty() || wanted.count(id) > 0; };
  std::filesystem::path out = out_dir.empty() ? std::filesystem::temp_directory_path() / "cte_acceptance" : std::filesystem::path(out_dir);
  std::filesystem::create_directories(out);
  int failures = 0;
  auto record = [&](int id, const std::string& title, const Outcome& o) {
    report(id, title, o);
    if (!o.pass) ++failures;
  };

  if (want(1)) record(1, "gradient suite", gradient_suite());
  if (want(2)) record(2, "EMA exactness", ema_exactness());
  if (want(3)) record(3, "AP oracle equivalence", ap_oracles());
  if (want(4)) record(4, "padding invariance", padding_invariance());

  const bool needs_run = want(5) || want(6) || want(7) || want(8) || want(9);
  if (!needs_run) return failures == 0 ? 0 : 1;

  const std::size_t half = steps / 2;
  const auto lang = make_language(desk_corpus("a", kCorpusSeed));
  std::cerr << "corpus: " << lang.corpus.segments.size() << " segments, " << lang.train_pairs.size()
            << " training pairs, " << lang.test.size() << " test segments" << std::endl;
  const auto midway = out / ("step_" + std::to_string(half) + ".ctec");
  auto main_run = train_run(lang, steps, half, midway);
  train::write_loss_curve(out / "loss.csv", main_run.curve);
  eval::write_ap_summary(out / "ap_summary.csv", main_run.result.ap);
  eval::write_psed_curve(out / "psed_curve.csv", main_run.result.psed);
  std::cerr << "main run: " << fmt(main_run.seconds, 0) << " s, final loss " << main_run.curve.back().loss
            << std::endl;

  if (want(5)) {
    std::vector<eval::Embedding> baseline;
    for (const auto& e : lang.test) baseline.push_back(eval::downsampling_baseline(e.features));
    const auto base = eval::same_different(baseline, lang.labels);
    const auto& r = main_run.result;
    const double minutes = main_run.seconds / 60.0;
    const bool a = r.ap.ap_roc >= 0.85;
    const bool b = r.ap.ap_roc - base.ap_roc >= 0.10;
    const bool c = r.collapse >= 0.01;
    const bool t = minutes <= 30.0;
    record(5, "desk-scale experiment",
           {a && b && c && t,
            "(a) AP " + fmt(r.ap.ap_roc) + " >= 0.85 " + (a ? "ok" : "no") + "; (b) downsampling AP " +
                fmt(base.ap_roc) + ", margin " + fmt(r.ap.ap_roc - base.ap_roc) + " >= 0.10 " + (b ? "ok" : "no") +
                "; (c) collapse " + fmt(r.collapse) + " >= 0.01 " + (c ? "ok" : "no") + "; runtime " +
                fmt(minutes, 1) + " min on " + std::to_string(std::thread::hardware_concurrency()) +
                " core(s) <= 30 " + (t ? "ok" : "no") + " [PR-AP " + fmt(r.ap.ap_pr) +
                " vs baseline " + fmt(base.ap_pr) + "]"});
  }

  if (want(6)) {
    const auto& curve = main_run.result.psed;
    bool monotone = true;
    for (std::size_t i = 1; i < curve.size(); ++i)
      if (!(curve[i].mean_cosine <= curve[i - 1].mean_cosine)) monotone = false;
    const double gap = curve.front().mean_cosine - curve.back().mean_cosine;
    record(6, "PSED trend",
           {monotone && gap >= 0.2, psed_text(curve) + "; non-increasing " + (monotone ? "yes" : "no") +
                                        ", bucket 0 - bucket 4+ = " + fmt(gap) + " (>= 0.2)"});
  }

  if (want(7)) {
    const auto second = make_language(desk_corpus("b", kSecondCorpusSeed));
    auto state = main_run.state;
    const auto zero_shot = evaluate(state.model.student, second);
    const std::size_t ft_steps = std::max<std::size_t>(1, steps / 3);
    train::finetune(state, second.train_pairs, second.utterances, desk_optim(ft_steps), ft_steps, quiet());
    const auto tuned = evaluate(state.model.student, second);
    const double gain = tuned.ap.ap_roc - zero_shot.ap.ap_roc;
    record(7, "fine-tuning on a second language",
           {gain >= 0.05, "zero-shot AP " + fmt(zero_shot.ap.ap_roc) + ", after " + std::to_string(ft_steps) +
                              " steps " + fmt(tuned.ap.ap_roc) + ", gain " + fmt(gain) + " (>= 0.05)"});
  }

  if (want(8)) {
    auto repeat = train_run(lang, steps, std::nullopt, {});
    const bool curves = same_curve(main_run.curve, repeat.curve);
    const bool ap = repeat.result.ap.ap_roc == main_run.result.ap.ap_roc &&
                    repeat.result.ap.ap_pr == main_run.result.ap.ap_pr;
    record(8, "determinism",
           {curves && ap, std::string("loss curves ") + (curves ? "identical" : "differ") + " over " +
                              std::to_string(repeat.curve.size()) + " steps; AP " + exact(main_run.result.ap.ap_roc) +
                              " vs " + exact(repeat.result.ap.ap_roc)});
  }

  if (want(9)) {
    auto state = train::load_checkpoint(midway);
    auto rest = train::train_loop(state, lang.train_pairs, lang.utterances, desk_optim(steps), quiet());
    const auto resumed = evaluate(state.model.student, lang);
    const std::vector<train::LossPoint> tail(main_run.curve.begin() + static_cast<std::ptrdiff_t>(half),
                                             main_run.curve.end());
    const bool curves = same_curve(tail, rest);
    const bool ap = resumed.ap.ap_roc == main_run.result.ap.ap_roc && resumed.ap.ap_pr == main_run.result.ap.ap_pr;
    record(9, "checkpoint round trip",
           {curves && ap, "resumed at step " + std::to_string(half) + "; remaining losses " +
                              (curves ? "identical" : "differ") + "; AP " + exact(resumed.ap.ap_roc) + " vs " +
                              exact(main_run.result.ap.ap_roc)});
  }

  return failures == 0 ? 0 : 1;
}
