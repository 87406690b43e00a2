#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cte/dataset.hpp"
#include "cte/features.hpp"
#include "cte/model.hpp"

namespace cte::eval {

using Embedding = std::vector<double>;

/// A labelled evaluation segment with its features.
struct EvalSegment {
  data::WordSegment segment;
  features::FeatureSequence features;
  std::vector<std::string> phones;  ///< empty when unknown
  std::string speaker_id;
};

/// Slices features for each segment and attaches phone sequences (matched
/// on utterance and boundaries) and speakers (matched on utterance).
std::vector<EvalSegment> make_eval_segments(const std::vector<data::WordSegment>& segments,
                                            const data::UtteranceFeatures& utterances,
                                            const std::vector<data::PhoneEntry>& phones = {},
                                            const std::vector<data::SpeakerEntry>& speakers = {});

/// Student embeddings in inference mode, `batch_size` segments per forward pass.
std::vector<Embedding> extract_embeddings(model::EncoderParams& student,
                                          std::span<const features::FeatureSequence> segments,
                                          num::Precision precision = num::Precision::f64, std::size_t batch_size = 32);
std::vector<Embedding> extract_embeddings(model::EncoderParams& student, std::span<const EvalSegment> segments,
                                          num::Precision precision = num::Precision::f64, std::size_t batch_size = 32);

struct ScoredPair {
  std::size_t i, j;  ///< segment indices, i < j
  bool same;
  double score;
};

struct SameDiffResult {
  std::vector<ScoredPair> pairs;  ///< all unordered pairs, (0,1), (0,2), ..., (n-2,n-1)
  double ap_roc = 0.0;
  double ap_pr = 0.0;
  std::size_t n_same = 0;
  std::size_t n_diff = 0;
};

/// Probability that a same pair outscores a different pair, ties counting
/// one half. `same` flags positives.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> same);
/// Mean precision at the rank of each positive after a stable sort by
/// descending score (ties keep the input order).
double pr_ap(std::span<const double> scores, std::span<const std::uint8_t> same);

/// Scores every unordered pair with score(i, j). InputError unless there are
/// at least two segments, one same pair and one different pair.
SameDiffResult same_different(std::size_t n, std::span<const std::string> labels,
                              const std::function<double(std::size_t, std::size_t)>& score);
/// Cosine similarity between embeddings.
SameDiffResult same_different(std::span<const Embedding> embeddings, std::span<const std::string> labels);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Levenshtein distance with unit costs.
std::size_t psed(std::span<const std::string> a, std::span<const std::string> b);

struct PsedBucket {
  std::size_t bucket;  ///< 0..3, and 4 for "4+"
  double mean_cosine;  ///< NaN when count == 0
  std::size_t count;
};

/// Mean cosine similarity of all unordered pairs grouped by phone edit distance.
std::vector<PsedBucket> psed_curve(std::span<const std::vector<std::string>> phones,
                                   std::span<const Embedding> embeddings);

struct PcaResult {
  std::vector<std::vector<double>> coordinates;  ///< n x components
  std::vector<std::vector<double>> components;   ///< components x D, orthonormal rows
  std::vector<double> explained;                 ///< variance fractions, non-increasing
  bool reduced_rank = false;                     ///< fewer than k components had variance
};

/// Principal components of the mean-centred embeddings. Each component's
/// largest-magnitude entry is made positive.
PcaResult pca_project(std::span<const Embedding> embeddings, std::size_t k = 2);

/// n frames at round(linspace(0, T-1, n)), concatenated.
Embedding downsampling_baseline(const features::FeatureSequence& features, std::size_t n = 10);
std::vector<std::size_t> downsample_indices(std::size_t frames, std::size_t n);

/// Dynamic time warping with cosine frame distance and steps (up, left,
/// diagonal); total cost of the cheapest path divided by its length.
double dtw_distance(const features::FeatureSequence& a, const features::FeatureSequence& b);

/// Mean over dimensions of the population std of length-normalised embeddings.
double collapse_metric(std::span<const Embedding> embeddings);

void write_ap_summary(const std::filesystem::path& path, const SameDiffResult& result);
void write_psed_curve(const std::filesystem::path& path, const std::vector<PsedBucket>& curve);
void write_pca_coordinates(const std::filesystem::path& path, std::span<const EvalSegment> segments,
                           const PcaResult& pca);
void write_embeddings(const std::filesystem::path& path, std::span<const EvalSegment> segments,
                      std::span<const Embedding> embeddings);

}  // namespace cte::eval
