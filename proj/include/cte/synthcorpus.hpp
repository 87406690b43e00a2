#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cte/dataset.hpp"
#include "cte/features.hpp"

namespace cte::synth {

enum class UnitKind { tone, chirp, noise };

/// One synthetic phone. Parameters by kind:
///   tone:  harmonic source, `low`/`high` = two resonance centres (Hz)
///   chirp: sine sweep from `low` to `high` (Hz)
///   noise: band-passed noise, `low`/`high` = band edges (Hz)
struct PhoneUnit {
  std::string symbol;
  UnitKind kind = UnitKind::tone;
  double seconds = 0.1;  ///< nominal duration
  double low = 0.0;
  double high = 0.0;
};

struct WordTemplate {
  std::string word_id;
  std::vector<std::size_t> phones;  ///< indices into the inventory
};

struct CorpusSpec {
  std::size_t word_types = 20;
  std::size_t instances_per_type = 12;
  std::size_t speakers = 8;
  std::size_t valid_speakers = 1;
  std::size_t test_speakers = 2;
  std::size_t min_phones = 3;
  std::size_t max_phones = 5;
  std::size_t inventory_size = 12;
  double min_unit_seconds = 0.08;
  double max_unit_seconds = 0.20;
  double duration_jitter = 0.2;  ///< per-phone factor in [1 - j, 1 + j]
  double pitch_jitter = 0.15;    ///< per-instance factor in [1 - j, 1 + j]
  /// Alignment boundaries extend past the word by up to this many seconds
  /// on each side, like an imprecise forced alignment.
  double boundary_slop = 0.0;
  /// Speaker resonance scale is drawn log-uniformly from [1/r, r].
  double formant_range = 1.12;
  /// Per-speaker channel: first-order tilt coefficient drawn from
  /// [-channel_tilt, channel_tilt] and a peaking band whose added gain is
  /// drawn from [0, channel_resonance].
  double channel_tilt = 0.8;
  double channel_resonance = 2.0;
  double min_snr_db = 15.0;
  double max_snr_db = 30.0;
  std::size_t max_words_per_utterance = 3;
  /// Share of word types derived from an earlier type by one or two phone
  /// edits, so that small phone edit distances occur.
  double derived_word_rate = 0.5;
  /// Prefix of phone symbols, word ids, speaker and utterance ids. Corpora
  /// with different prefixes have disjoint inventories.
  std::string language = "a";
  std::uint64_t seed = 0;
  int sample_rate = 16000;
  data::DurationFilter word_bounds;
  /// Optional fixed lexicon of phone-symbol sequences; when non-empty it
  /// replaces random word generation and must only use inventory symbols.
  std::vector<std::vector<std::string>> lexicon;

  /// ConfigError if the ranges are inconsistent or no word could satisfy
  /// the duration bounds under the worst-case jitter.
  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> entries() const;
};

CorpusSpec load_spec(const std::filesystem::path& path, CorpusSpec base = {});

struct Utterance {
  std::string id;
  std::string speaker_id;
  data::Split split = data::Split::unspecified;
  features::Waveform audio;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<PhoneUnit> inventory;
  std::vector<WordTemplate> lexicon;
  std::vector<Utterance> utterances;
  std::vector<data::WordSegment> segments;  ///< wav_path relative to the corpus directory
  std::vector<data::PhoneEntry> phones;     ///< parallel to segments
  std::vector<data::SpeakerEntry> speakers;

  std::vector<data::WordSegment> segments_in(data::Split split) const;
};

/// Phone symbol sequence of a lexicon entry.
std::vector<std::string> phone_symbols(const Corpus& corpus, const WordTemplate& word);

/// Deterministic in the spec (including its seed).
Corpus generate(const CorpusSpec& spec);

/// Writes wav/<utterance>.wav, alignments.tsv and alignments_<split>.tsv,
/// phones.tsv, speakers.tsv, lexicon.tsv, inventory.tsv and spec.cfg.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

}  // namespace cte::synth
