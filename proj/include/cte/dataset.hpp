#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cte/features.hpp"

namespace cte::data {

enum class Split { unspecified, train, valid, test };

std::string to_string(Split split);
Split parse_split(const std::string& name);

struct WordSegment {
  std::string utterance_id;
  std::string wav_path;
  double start = 0.0;  ///< seconds
  double end = 0.0;    ///< seconds
  std::optional<std::string> word_id;
  Split split = Split::unspecified;

  double duration() const { return end - start; }
  /// Same utterance and boundaries (to within a microsecond).
  bool same_span(const WordSegment& other) const;
};

struct WordPair {
  WordSegment a;  ///< student side
  WordSegment b;  ///< teacher side
};

/// Admits segments with min <= duration <= max (both ends inclusive).
struct DurationFilter {
  double min_seconds = 0.5;
  double max_seconds = 2.0;

  bool admits(const WordSegment& s) const;
};

/// Alignment manifest, one segment per line:
/// utterance_id TAB wav_path TAB start_s TAB end_s TAB word_id
/// Blank lines and lines starting with '#' are ignored.
std::vector<WordSegment> load_alignments(const std::filesystem::path& path, Split split = Split::unspecified);
void write_alignments(const std::filesystem::path& path, const std::vector<WordSegment>& segments);

struct PairOptions {
  DurationFilter filter;
  /// Word types with more admitted instances are subsampled to this many.
  std::size_t max_instances_per_type = 20;
  std::uint64_t seed = 0;
};

/// All ordered pairs of distinct same-word instances, after the duration
/// filter. Both (X, Y) and (Y, X) are emitted.
std::vector<WordPair> build_pairs(const std::vector<WordSegment>& segments, const PairOptions& options = {});

/// Pairs manifest: utt_a TAB start_a TAB end_a TAB utt_b TAB start_b TAB end_b.
/// Pairs are kept as listed, filtered by duration, and each pair's reverse is
/// appended right after it unless the file already lists it.
std::vector<WordPair> load_utd_pairs(const std::filesystem::path& path, const DurationFilter& filter = {});
void write_pairs(const std::filesystem::path& path, const std::vector<WordPair>& pairs);

/// utterance_id TAB start TAB end TAB space-separated phones
struct PhoneEntry {
  std::string utterance_id;
  double start = 0.0;
  double end = 0.0;
  std::vector<std::string> phones;
};
std::vector<PhoneEntry> load_phone_manifest(const std::filesystem::path& path);
void write_phone_manifest(const std::filesystem::path& path, const std::vector<PhoneEntry>& entries);

/// utterance_id TAB speaker_id TAB split
struct SpeakerEntry {
  std::string utterance_id;
  std::string speaker_id;
  Split split = Split::unspecified;
};
std::vector<SpeakerEntry> load_speaker_manifest(const std::filesystem::path& path);
void write_speaker_manifest(const std::filesystem::path& path, const std::vector<SpeakerEntry>& entries);

using UtteranceFeatures = std::unordered_map<std::string, features::FeatureSequence>;

/// Features of one segment sliced from its utterance; LookupError if absent.
features::FeatureSequence segment_features(const UtteranceFeatures& utterances, const WordSegment& segment);

/// Padded pair batch. Row r of each side holds the prepended token at
/// position 0 followed by that segment's frames; masked positions are zero.
struct Batch {
  std::size_t size = 0;          ///< B
  std::size_t feature_dim = 0;   ///< F
  std::size_t student_len = 0;   ///< Tmax + 1
  std::size_t teacher_len = 0;   ///< T'max + 1
  std::vector<double> student_features;  ///< B x student_len x F
  std::vector<double> teacher_features;  ///< B x teacher_len x F
  std::vector<std::uint8_t> student_mask;  ///< B x student_len, 1 = real
  std::vector<std::uint8_t> teacher_mask;  ///< B x teacher_len
  std::vector<std::size_t> pair_indices;   ///< into the pair list

  std::size_t student_length(std::size_t row) const;  ///< unmasked positions
  std::size_t teacher_length(std::size_t row) const;
};

/// Partitions the pair list into batches of batch_size (the last may be
/// smaller). A seed applies a deterministic permutation first.
class BatchStream {
 public:
  BatchStream(const std::vector<WordPair>& pairs, const UtteranceFeatures& utterances, std::size_t batch_size,
              std::optional<std::uint64_t> shuffle_seed, double token_value = 1.0);

  std::size_t num_batches() const;
  Batch batch(std::size_t index) const;
  const std::vector<std::size_t>& order() const noexcept { return order_; }

 private:
  const std::vector<WordPair>* pairs_;
  const UtteranceFeatures* utterances_;
  std::size_t batch_size_;
  double token_value_;
  std::vector<std::size_t> order_;
};

std::vector<Batch> make_batches(const std::vector<WordPair>& pairs, const UtteranceFeatures& utterances,
                                std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                                double token_value = 1.0);

}  // namespace cte::data
