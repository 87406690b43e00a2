#include "cte/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"

#include "cte/dataset.hpp"
#include "cte/error.hpp"
#include "cte/evaluation.hpp"
#include "cte/features.hpp"
#include "cte/synthcorpus.hpp"
#include "cte/text.hpp"
#include "cte/trainer.hpp"

namespace cte::cli {

namespace fs = std::filesystem;

namespace {

using KeyValues = std::map<std::string, std::string>;

/// Reads key=value lines; blank lines and '#' comments are skipped.
KeyValues read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  KeyValues out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto t = text::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ParseError(path.string(), number, "expected key=value");
    out[std::string(text::trim(t.substr(0, eq)))] = std::string(text::trim(t.substr(eq + 1)));
  }
  return out;
}

void write_key_values(const fs::path& path, const KeyValues& values) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : values) out << k << '=' << v << '\n';
}

/// Flags shared by every command, plus one flag per config key.
struct Options {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir;
  KeyValues flags;

  void add_common(CLI::App* app, bool out_dir_required) {
    app->add_option("--seed", seed, "Random seed");
    app->add_option("--config", config, "key=value config file; flags override its values");
    auto* o = app->add_option("--out-dir", out_dir, "Output directory");
    if (out_dir_required) o->required();
  }

  void add_keys(CLI::App* app, const KeyValues& defaults) {
    for (const auto& [key, value] : defaults) {
      if (key == "seed") continue;
      app->add_option_function<std::string>("--" + key, [this, k = key](const std::string& v) { flags[k] = v; },
                                            "default " + value);
    }
  }

  /// Config file values, then flags, then --seed, each through `set`.
  template <typename Set>
  void apply(Set&& set) const {
    if (!config.empty()) {
      for (const auto& [k, v] : read_key_values(config)) set(k, v);
    }
    for (const auto& [k, v] : flags) set(k, v);
    if (seed) set("seed", std::to_string(*seed));
  }

  fs::path out() const {
    fs::create_directories(out_dir);
    return out_dir;
  }
};

void log(std::ostream& err, const std::string& command, const std::string& message) {
  err << "cte " << command << ": " << message << '\n';
}

data::UtteranceFeatures load_features(const fs::path& dir, const std::set<std::string>& utterances) {
  data::UtteranceFeatures out;
  for (const auto& u : utterances) out.emplace(u, features::read_feature_file(dir / (u + ".ctef")));
  return out;
}

std::set<std::string> utterances_of(const std::vector<data::WordSegment>& segments) {
  std::set<std::string> out;
  for (const auto& s : segments) out.insert(s.utterance_id);
  return out;
}

std::set<std::string> utterances_of(const std::vector<data::WordPair>& pairs) {
  std::set<std::string> out;
  for (const auto& p : pairs) {
    out.insert(p.a.utterance_id);
    out.insert(p.b.utterance_id);
  }
  return out;
}

num::Precision parse_precision(const std::string& s) {
  if (s == "64") return num::Precision::f64;
  if (s == "32") return num::Precision::f32;
  throw ConfigError("precision must be 64 or 32, got '" + s + "'");
}

// Frontend keys.
KeyValues frontend_entries(const features::FrontendConfig& c) {
  return {{"sample_rate", std::to_string(c.sample_rate)},
          {"frame_length", text::format_double(c.frame_length)},
          {"frame_shift", text::format_double(c.frame_shift)},
          {"num_mel_bins", std::to_string(c.num_mel_bins)},
          {"log_floor", text::format_double(c.log_floor)}};
}

void frontend_set(features::FrontendConfig& c, const std::string& key, const std::string& value) {
  const auto number = text::parse_double(text::trim(value));
  if (!number) throw ConfigError(key + ": expected a number, got '" + value + "'");
  if (key == "sample_rate") c.sample_rate = static_cast<int>(*number);
  else if (key == "frame_length") c.frame_length = *number;
  else if (key == "frame_shift") c.frame_shift = *number;
  else if (key == "num_mel_bins") c.num_mel_bins = static_cast<std::size_t>(*number);
  else if (key == "log_floor") c.log_floor = *number;
  else if (key == "seed") return;
  else throw ConfigError("unknown frontend key '" + key + "'");
}

// Pair-building keys.
KeyValues pair_entries(const data::PairOptions& o) {
  return {{"min_seconds", text::format_double(o.filter.min_seconds)},
          {"max_seconds", text::format_double(o.filter.max_seconds)},
          {"max_instances_per_type", std::to_string(o.max_instances_per_type)},
          {"seed", std::to_string(o.seed)}};
}

void pair_set(data::PairOptions& o, const std::string& key, const std::string& value) {
  const auto number = text::parse_double(text::trim(value));
  if (!number) throw ConfigError(key + ": expected a number, got '" + value + "'");
  if (key == "min_seconds") o.filter.min_seconds = *number;
  else if (key == "max_seconds") o.filter.max_seconds = *number;
  else if (key == "max_instances_per_type") o.max_instances_per_type = static_cast<std::size_t>(*number);
  else if (key == "seed") o.seed = static_cast<std::uint64_t>(*number);
  else throw ConfigError("unknown pairs key '" + key + "'");
}

struct EvalInputs {
  std::string alignments;
  std::string features;
  std::string checkpoint;
  std::string phones;
  std::string speakers;
  std::string precision = "64";

  void add(CLI::App* app, bool needs_checkpoint) {
    app->add_option("--alignments", alignments, "Alignment manifest of the segments")->required();
    app->add_option("--features", features, "Directory of <utterance>.ctef feature files")->required();
    auto* c = app->add_option("--checkpoint", checkpoint, "Model checkpoint");
    if (needs_checkpoint) c->required();
    app->add_option("--precision", precision, "Arithmetic precision for embedding: 64 or 32");
  }

  std::vector<eval::EvalSegment> segments() const {
    const auto segs = data::load_alignments(alignments);
    const auto feats = load_features(features, utterances_of(segs));
    std::vector<data::PhoneEntry> ph;
    std::vector<data::SpeakerEntry> sp;
    if (!phones.empty()) ph = data::load_phone_manifest(phones);
    if (!speakers.empty()) sp = data::load_speaker_manifest(speakers);
    return eval::make_eval_segments(segs, feats, ph, sp);
  }

  std::vector<eval::Embedding> embed(const std::vector<eval::EvalSegment>& segs) const {
    auto state = train::load_checkpoint(checkpoint);
    return eval::extract_embeddings(state.model.student, segs, parse_precision(precision));
  }
};

std::vector<std::string> labels_of(const std::vector<eval::EvalSegment>& segs) {
  std::vector<std::string> out;
  for (const auto& s : segs) {
    if (!s.segment.word_id) throw InputError("segment in " + s.segment.utterance_id + " has no word label");
    out.push_back(*s.segment.word_id);
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Correspondence transformer encoder: acoustic word embeddings", "cte"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // gen-corpus
  Options gen_opts;
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic word corpus");
  gen_opts.add_common(gen, true);
  gen_opts.add_keys(gen, synth::CorpusSpec{}.entries());

  // featurize
  Options feat_opts;
  std::string feat_alignments;
  auto* feat = app.add_subcommand("featurize", "Compute log-mel features of every utterance in a manifest");
  feat_opts.add_common(feat, true);
  feat_opts.add_keys(feat, frontend_entries({}));
  feat->add_option("--alignments", feat_alignments, "Alignment manifest; wav paths are relative to its directory")
      ->required();

  // pairs
  Options pair_opts;
  std::string pair_alignments, pair_utd;
  auto* pairs = app.add_subcommand("pairs", "Build training pairs from alignments or a UTD pair list");
  pair_opts.add_common(pairs, true);
  pair_opts.add_keys(pairs, pair_entries({}));
  auto* pa = pairs->add_option("--alignments", pair_alignments, "Alignment manifest with word labels");
  auto* pu = pairs->add_option("--utd", pair_utd, "UTD pair list");
  pa->excludes(pu);

  // train / finetune
  Options train_opts, tune_opts;
  std::string train_pairs, train_features, train_resume;
  std::string tune_pairs, tune_features, tune_checkpoint;
  std::size_t train_log = 100, train_ckpt = 0, tune_log = 100, tune_steps = 5000;
  auto* trn = app.add_subcommand("train", "Pre-train the student/teacher encoders");
  train_opts.add_common(trn, true);
  train_opts.add_keys(trn, train::TrainConfig{}.entries());
  trn->add_option("--pairs", train_pairs, "Pair manifest")->required();
  trn->add_option("--features", train_features, "Directory of <utterance>.ctef feature files")->required();
  trn->add_option("--resume", train_resume, "Continue from this checkpoint");
  trn->add_option("--log_interval", train_log, "Steps between progress lines (0 = silent)");
  trn->add_option("--checkpoint_interval", train_ckpt, "Steps between checkpoints (0 = only at the end)");

  auto* tune = app.add_subcommand("finetune", "Fine-tune a checkpoint on new pairs with fresh optimizer state");
  tune_opts.add_common(tune, true);
  {
    auto keys = train::TrainConfig{}.entries();
    for (auto k : {"layers", "model_dim", "ffn_dim", "heads", "top_k", "feature_dim", "max_frames", "token_value",
                   "dropout", "init_std", "total_steps"}) {
      keys.erase(k);
    }
    tune_opts.add_keys(tune, keys);
  }
  tune->add_option("--checkpoint", tune_checkpoint, "Pre-trained checkpoint")->required();
  tune->add_option("--pairs", tune_pairs, "Pair manifest")->required();
  tune->add_option("--features", tune_features, "Directory of <utterance>.ctef feature files")->required();
  tune->add_option("--steps", tune_steps, "Fine-tuning steps");
  tune->add_option("--log_interval", tune_log, "Steps between progress lines (0 = silent)");

  // embed and evaluation
  Options embed_opts, sd_opts, psed_opts, pca_opts;
  EvalInputs embed_in, sd_in, psed_in, pca_in;
  std::string sd_method = "cte";
  std::size_t pca_components = 2;
  auto* emb = app.add_subcommand("embed", "Write one embedding per segment");
  embed_opts.add_common(emb, true);
  embed_in.add(emb, true);
  auto* sd = app.add_subcommand("eval-samediff", "Same-different average precision");
  sd_opts.add_common(sd, true);
  sd_in.add(sd, false);
  sd->add_option("--method", sd_method, "cte, downsampling or dtw")
      ->check(CLI::IsMember({"cte", "downsampling", "dtw"}));
  auto* ps = app.add_subcommand("eval-psed", "Mean cosine similarity by phone edit distance");
  psed_opts.add_common(ps, true);
  psed_in.add(ps, true);
  ps->add_option("--phones", psed_in.phones, "Phone manifest")->required();
  auto* pc = app.add_subcommand("eval-pca", "Project embeddings on their principal components");
  pca_opts.add_common(pc, true);
  pca_in.add(pc, true);
  pc->add_option("--speakers", pca_in.speakers, "Speaker manifest");
  pc->add_option("--components", pca_components, "Number of components")->check(CLI::PositiveNumber);

  // gradcheck
  Options gc_opts;
  model::ModelConfig gc_model;
  gc_model.layers = 2;
  gc_model.model_dim = 16;
  gc_model.ffn_dim = 32;
  gc_model.heads = 2;
  gc_model.top_k = 2;
  std::size_t gc_frames = 12, gc_pairs = 3;
  double gc_tolerance = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Check loss gradients of a small encoder by finite differences");
  gc_opts.add_common(gc, false);
  gc->add_option("--layers", gc_model.layers);
  gc->add_option("--model_dim", gc_model.model_dim);
  gc->add_option("--ffn_dim", gc_model.ffn_dim);
  gc->add_option("--heads", gc_model.heads);
  gc->add_option("--top_k", gc_model.top_k);
  gc->add_option("--max_frames", gc_frames, "Longest random input");
  gc->add_option("--pairs", gc_pairs, "Random pairs in the batch");
  gc->add_option("--tolerance", gc_tolerance, "Largest accepted relative error");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "cte: " << e.what() << '\n';
    if (!app.get_subcommands().empty()) err << "run 'cte " << app.get_subcommands().front()->get_name() << " --help'\n";
    else err << app.help();
    return usage_error;
  }

  auto* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    if (cmd == gen) {
      synth::CorpusSpec spec;
      gen_opts.apply([&](const std::string& k, const std::string& v) { spec.set(k, v); });
      spec.validate();
      const auto corpus = synth::generate(spec);
      synth::write_corpus(corpus, gen_opts.out());
      log(err, name, "wrote " + std::to_string(corpus.segments.size()) + " segments in " +
                         std::to_string(corpus.utterances.size()) + " utterances to " + gen_opts.out_dir);
    } else if (cmd == feat) {
      features::FrontendConfig fc;
      feat_opts.apply([&](const std::string& k, const std::string& v) { frontend_set(fc, k, v); });
      fc.validate();
      const auto dir = feat_opts.out();
      const auto segs = data::load_alignments(feat_alignments);
      const auto base = fs::path(feat_alignments).parent_path();
      features::LogMelFrontend frontend(fc);
      std::map<std::string, std::string> wavs;
      for (const auto& s : segs) {
        auto [it, fresh] = wavs.emplace(s.utterance_id, s.wav_path);
        if (!fresh && it->second != s.wav_path) {
          throw InputError("utterance " + s.utterance_id + " refers to two wav files");
        }
      }
      for (const auto& [utt, wav] : wavs) {
        const fs::path p = fs::path(wav).is_absolute() ? fs::path(wav) : base / wav;
        features::write_feature_file(dir / (utt + ".ctef"), frontend.compute(features::read_wav(p)));
      }
      write_key_values(dir / "featurize.cfg", frontend_entries(fc));
      log(err, name, "wrote features of " + std::to_string(wavs.size()) + " utterances to " + feat_opts.out_dir);
    } else if (cmd == pairs) {
      data::PairOptions po;
      pair_opts.apply([&](const std::string& k, const std::string& v) { pair_set(po, k, v); });
      if (pair_alignments.empty() == pair_utd.empty()) throw ConfigError("give exactly one of --alignments or --utd");
      const auto list = pair_utd.empty() ? data::build_pairs(data::load_alignments(pair_alignments), po)
                                         : data::load_utd_pairs(pair_utd, po.filter);
      const auto dir = pair_opts.out();
      data::write_pairs(dir / "pairs.tsv", list);
      write_key_values(dir / "pairs.cfg", pair_entries(po));
      log(err, name, "wrote " + std::to_string(list.size()) + " pairs to " + (dir / "pairs.tsv").string());
    } else if (cmd == trn) {
      train::TrainConfig tc;
      train_opts.apply([&](const std::string& k, const std::string& v) { tc.set(k, v); });
      tc.validate();
      const auto list = data::load_utd_pairs(train_pairs, data::DurationFilter{0.0, 1e300});
      const auto feats = load_features(train_features, utterances_of(list));
      train::TrainState state;
      if (train_resume.empty()) {
        state = train::init_state(tc.model, tc.optim.seed);
      } else {
        state = train::load_checkpoint(train_resume);
        if (state.seed != tc.optim.seed) {
          log(err, name, "resuming with the checkpoint's seed " + std::to_string(state.seed));
          tc.optim.seed = state.seed;
        }
        tc.model = state.model.student.config;
      }
      const auto dir = train_opts.out();
      train::write_config(dir / "train.cfg", tc);
      train::LoopOptions lo;
      lo.log_interval = train_log;
      lo.checkpoint_interval = train_ckpt;
      lo.checkpoint_dir = dir;
      log(err, name, std::to_string(list.size()) + " pairs, " + std::to_string(state.model.student.parameter_count()) +
                         " parameters, steps " + std::to_string(state.step) + ".." +
                         std::to_string(tc.optim.total_steps));
      const auto curve = train::train_loop(state, list, feats, tc.optim, lo);
      train::write_loss_curve(dir / "loss.csv", curve);
      log(err, name, "wrote " + (dir / "last.ctec").string());
    } else if (cmd == tune) {
      auto state = train::load_checkpoint(tune_checkpoint);
      train::TrainConfig tc;
      tc.model = state.model.student.config;
      tc.optim.seed = state.seed;
      tune_opts.apply([&](const std::string& k, const std::string& v) { tc.set(k, v); });
      tc.optim.total_steps = tune_steps;
      tc.validate();
      state.seed = tc.optim.seed;
      const auto list = data::load_utd_pairs(tune_pairs, data::DurationFilter{0.0, 1e300});
      const auto feats = load_features(tune_features, utterances_of(list));
      const auto dir = tune_opts.out();
      train::write_config(dir / "finetune.cfg", tc);
      train::LoopOptions lo;
      lo.log_interval = tune_log;
      lo.checkpoint_dir = dir;
      const auto curve = train::finetune(state, list, feats, tc.optim, tune_steps, lo);
      train::write_loss_curve(dir / "loss.csv", curve);
      log(err, name, "wrote " + (dir / "last.ctec").string());
    } else if (cmd == emb) {
      embed_opts.apply([](const std::string& k, const std::string&) {
        if (k != "seed") throw ConfigError("embed takes no config key '" + k + "'");
      });
      const auto segs = embed_in.segments();
      const auto vecs = embed_in.embed(segs);
      const auto dir = embed_opts.out();
      eval::write_embeddings(dir / "embeddings.tsv", segs, vecs);
      log(err, name, "wrote " + std::to_string(vecs.size()) + " embeddings");
    } else if (cmd == sd) {
      sd_opts.apply([](const std::string& k, const std::string&) {
        if (k != "seed") throw ConfigError("eval-samediff takes no config key '" + k + "'");
      });
      const auto segs = sd_in.segments();
      const auto labels = labels_of(segs);
      eval::SameDiffResult r;
      if (sd_method == "cte") {
        if (sd_in.checkpoint.empty()) throw ConfigError("--method cte needs --checkpoint");
        r = eval::same_different(sd_in.embed(segs), labels);
      } else if (sd_method == "downsampling") {
        std::vector<eval::Embedding> vecs;
        for (const auto& s : segs) vecs.push_back(eval::downsampling_baseline(s.features));
        r = eval::same_different(vecs, labels);
      } else {
        r = eval::same_different(segs.size(), labels, [&](std::size_t i, std::size_t j) {
          return -eval::dtw_distance(segs[i].features, segs[j].features);
        });
      }
      const auto dir = sd_opts.out();
      eval::write_ap_summary(dir / "ap_summary.csv", r);
      out << "method=" << sd_method << " ap_roc=" << text::format_double(r.ap_roc)
          << " ap_pr=" << text::format_double(r.ap_pr) << " n_same=" << r.n_same << " n_diff=" << r.n_diff << '\n';
    } else if (cmd == ps) {
      psed_opts.apply([](const std::string& k, const std::string&) {
        if (k != "seed") throw ConfigError("eval-psed takes no config key '" + k + "'");
      });
      const auto segs = psed_in.segments();
      std::vector<std::vector<std::string>> phones;
      for (const auto& s : segs) {
        if (s.phones.empty()) throw InputError("no phone transcription for a segment of " + s.segment.utterance_id);
        phones.push_back(s.phones);
      }
      const auto curve = eval::psed_curve(phones, psed_in.embed(segs));
      const auto dir = psed_opts.out();
      eval::write_psed_curve(dir / "psed_curve.csv", curve);
      for (const auto& b : curve) {
        out << "psed=" << (b.bucket >= 4 ? std::string("4+") : std::to_string(b.bucket))
            << " mean_cos=" << text::format_double(b.mean_cosine) << " count=" << b.count << '\n';
      }
    } else if (cmd == pc) {
      pca_opts.apply([](const std::string& k, const std::string&) {
        if (k != "seed") throw ConfigError("eval-pca takes no config key '" + k + "'");
      });
      const auto segs = pca_in.segments();
      const auto pca = eval::pca_project(pca_in.embed(segs), pca_components);
      const auto dir = pca_opts.out();
      eval::write_pca_coordinates(dir / "pca.csv", segs, pca);
      out << "explained=";
      for (std::size_t i = 0; i < pca.explained.size(); ++i) out << (i ? "," : "") << text::format_double(pca.explained[i]);
      out << '\n';
    } else if (cmd == gc) {
      std::uint64_t seed = gc_opts.seed.value_or(0);
      gc_opts.apply([](const std::string& k, const std::string&) {
        if (k != "seed") throw ConfigError("gradcheck takes no config key '" + k + "'");
      });
      num::GradCheckOptions go;
      go.tolerance = gc_tolerance;
      const auto report = train::check_loss_gradients(gc_model, seed, gc_frames, gc_pairs, go);
      for (const auto& e : report.entries) {
        out << (e.pass ? "ok   " : "FAIL ") << e.name << " max_rel_error=" << text::format_double(e.max_rel_error)
            << '\n';
      }
      out << "max_rel_error=" << text::format_double(report.max_rel_error) << (report.pass ? " pass" : " fail") << '\n';
      if (!gc_opts.out_dir.empty()) {
        std::ofstream f(gc_opts.out() / "gradcheck.csv");
        f << "parameter,max_rel_error,pass\n";
        for (const auto& e : report.entries) f << e.name << ',' << text::format_double(e.max_rel_error) << ',' << e.pass << '\n';
      }
      if (!report.pass) return numerical_error;
    }
  } catch (const NumericalError& e) {
    log(err, name, std::string("numerical error: ") + e.what());
    return numerical_error;
  } catch (const ConfigError& e) {
    log(err, name, std::string("config error: ") + e.what());
    return usage_error;
  } catch (const Error& e) {
    log(err, name, std::string("error: ") + e.what());
    return data_error;
  } catch (const fs::filesystem_error& e) {
    log(err, name, std::string("error: ") + e.what());
    return data_error;
  }
  return ok;
}

}  // namespace cte::cli
