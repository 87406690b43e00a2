#include "cte/evaluation.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "cte/error.hpp"
#include "cte/text.hpp"

namespace cte::eval {

std::vector<EvalSegment> make_eval_segments(const std::vector<data::WordSegment>& segments,
                                            const data::UtteranceFeatures& utterances,
                                            const std::vector<data::PhoneEntry>& phones,
                                            const std::vector<data::SpeakerEntry>& speakers) {
  std::map<std::string, std::vector<const data::PhoneEntry*>> phones_by_utt;
  for (const auto& p : phones) phones_by_utt[p.utterance_id].push_back(&p);
  std::map<std::string, std::string> speaker_of;
  for (const auto& s : speakers) speaker_of[s.utterance_id] = s.speaker_id;

  std::vector<EvalSegment> out;
  out.reserve(segments.size());
  for (const auto& seg : segments) {
    EvalSegment e;
    e.segment = seg;
    e.features = data::segment_features(utterances, seg);
    if (auto it = phones_by_utt.find(seg.utterance_id); it != phones_by_utt.end()) {
      for (const auto* p : it->second) {
        if (std::abs(p->start - seg.start) < 1e-6 && std::abs(p->end - seg.end) < 1e-6) e.phones = p->phones;
      }
    }
    if (auto it = speaker_of.find(seg.utterance_id); it != speaker_of.end()) e.speaker_id = it->second;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Embedding> extract_embeddings(model::EncoderParams& student,
                                          std::span<const features::FeatureSequence> segments,
                                          num::Precision precision, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<Embedding> out;
  out.reserve(segments.size());
  for (std::size_t first = 0; first < segments.size(); first += batch_size) {
    const std::size_t last = std::min(segments.size(), first + batch_size);
    std::vector<const features::FeatureSequence*> batch;
    for (std::size_t i = first; i < last; ++i) batch.push_back(&segments[i]);
    const auto input = model::pack_sequences(batch, student.config);
    num::Tape tape(precision);
    model::EncodeOptions options;
    options.full_sequence = false;
    const auto enc = model::encode(tape, student, input, options);
    const auto& v = enc.embedding.value();
    for (std::size_t r = 0; r < v.rows(); ++r) {
      out.emplace_back(v.data().begin() + static_cast<std::ptrdiff_t>(r * v.cols()),
                       v.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * v.cols()));
    }
  }
  return out;
}

std::vector<Embedding> extract_embeddings(model::EncoderParams& student, std::span<const EvalSegment> segments,
                                          num::Precision precision, std::size_t batch_size) {
  std::vector<features::FeatureSequence> feats;
  feats.reserve(segments.size());
  for (const auto& s : segments) feats.push_back(s.features);
  return extract_embeddings(student, feats, precision, batch_size);
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> same) {
  if (scores.size() != same.size()) throw DimensionError("roc_auc: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // 2 * wins + ties, kept in integers so the ratio is exact up to one division.
  std::uint64_t twice = 0, positives = 0, negatives = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t h = g;
    std::uint64_t pos_here = 0, neg_here = 0;
    while (h < order.size() && scores[order[h]] == scores[order[g]]) {
      (same[order[h]] ? pos_here : neg_here)++;
      ++h;
    }
    twice += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    positives += pos_here;
    negatives += neg_here;
    g = h;
  }
  if (positives == 0 || negatives == 0) throw InputError("roc_auc needs both same and different pairs");
  return static_cast<double>(twice) / static_cast<double>(2 * positives * negatives);
}

double pr_ap(std::span<const double> scores, std::span<const std::uint8_t> same) {
  if (scores.size() != same.size()) throw DimensionError("pr_ap: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!same[order[k]]) continue;
    ++hits;
    total += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  if (hits == 0) throw InputError("pr_ap needs at least one same pair");
  return total / static_cast<double>(hits);
}

SameDiffResult same_different(std::size_t n, std::span<const std::string> labels,
                              const std::function<double(std::size_t, std::size_t)>& score) {
  if (labels.size() != n) throw DimensionError("same_different: label count differs from segment count");
  if (n < 2) throw InputError("same_different needs at least two segments");
  SameDiffResult r;
  r.pairs.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool same = labels[i] == labels[j];
      r.pairs.push_back({i, j, same, score(i, j)});
      (same ? r.n_same : r.n_diff)++;
    }
  }
  if (r.n_same == 0 || r.n_diff == 0) {
    throw InputError("same_different needs at least one same-word and one different-word pair");
  }
  std::vector<double> scores;
  std::vector<std::uint8_t> same;
  for (const auto& p : r.pairs) {
    scores.push_back(p.score);
    same.push_back(p.same ? 1 : 0);
  }
  r.ap_roc = roc_auc(scores, same);
  r.ap_pr = pr_ap(scores, same);
  return r;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine similarity of a zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

SameDiffResult same_different(std::span<const Embedding> embeddings, std::span<const std::string> labels) {
  return same_different(embeddings.size(), labels,
                        [&](std::size_t i, std::size_t j) { return cosine_similarity(embeddings[i], embeddings[j]); });
}

std::size_t psed(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<PsedBucket> psed_curve(std::span<const std::vector<std::string>> phones,
                                   std::span<const Embedding> embeddings) {
  if (phones.size() != embeddings.size()) throw DimensionError("psed_curve: phone and embedding counts differ");
  std::vector<double> sums(5, 0.0);
  std::vector<std::size_t> counts(5, 0);
  for (std::size_t i = 0; i < phones.size(); ++i) {
    if (phones[i].empty()) throw InputError("psed_curve: segment " + std::to_string(i) + " has no phone sequence");
    for (std::size_t j = i + 1; j < phones.size(); ++j) {
      const std::size_t b = std::min<std::size_t>(psed(phones[i], phones[j]), 4);
      sums[b] += cosine_similarity(embeddings[i], embeddings[j]);
      ++counts[b];
    }
  }
  std::vector<PsedBucket> out;
  for (std::size_t b = 0; b < 5; ++b) {
    out.push_back({b, counts[b] ? sums[b] / static_cast<double>(counts[b]) : std::numeric_limits<double>::quiet_NaN(),
                   counts[b]});
  }
  return out;
}

namespace {

// Top-k eigenpairs of a symmetric matrix by power iteration with deflation.
void power_eigen(Eigen::MatrixXd c, std::size_t k, std::vector<double>& values, std::vector<Eigen::VectorXd>& vectors) {
  const Eigen::Index d = c.rows();
  for (std::size_t m = 0; m < k; ++m) {
    Eigen::VectorXd v = Eigen::VectorXd::Ones(d) / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < d; ++i) v[i] += 1e-3 * static_cast<double>(i % 7);
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < 5000; ++it) {
      Eigen::VectorXd w = c * v;
      const double norm = w.norm();
      if (norm == 0.0) break;
      w /= norm;
      const double change = (w - v).norm();
      v = w;
      lambda = v.dot(c * v);
      if (change < 1e-13) break;
    }
    values.push_back(lambda);
    vectors.push_back(v);
    c -= lambda * v * v.transpose();
  }
}

}  // namespace

PcaResult pca_project(std::span<const Embedding> embeddings, std::size_t k) {
  const std::size_t n = embeddings.size();
  if (k == 0) throw ConfigError("pca_project: k must be positive");
  if (n < k + 1) throw InputError("pca_project needs at least k + 1 embeddings");
  const std::size_t d = embeddings[0].size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (embeddings[i].size() != d) throw DimensionError("pca_project: embeddings differ in dimension");
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = embeddings[i][j];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  const double total = cov.trace();

  std::vector<double> values;
  std::vector<Eigen::VectorXd> vectors;
  if (d <= 512) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    for (std::size_t m = 0; m < std::min(k, d); ++m) {
      const auto idx = static_cast<Eigen::Index>(d - 1 - m);  // ascending order
      values.push_back(solver.eigenvalues()[idx]);
      vectors.push_back(solver.eigenvectors().col(idx));
    }
  } else {
    power_eigen(cov, std::min(k, d), values, vectors);
  }

  PcaResult r;
  const double tol = 1e-12 * std::max(total, 0.0);
  for (std::size_t m = 0; m < values.size(); ++m) {
    if (!(total > 0.0) || values[m] <= tol) break;
    Eigen::VectorXd v = vectors[m];
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    r.components.emplace_back(v.data(), v.data() + v.size());
    r.explained.push_back(values[m] / total);
  }
  r.reduced_rank = r.components.size() < k;
  r.coordinates.assign(n, std::vector<double>(r.components.size()));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < r.components.size(); ++m) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * r.components[m][j];
      r.coordinates[i][m] = s;
    }
  }
  return r;
}

std::vector<std::size_t> downsample_indices(std::size_t frames, std::size_t n) {
  if (frames == 0) throw InputError("downsampling needs at least one frame");
  if (n == 0) throw ConfigError("downsampling needs n >= 1");
  std::vector<std::size_t> idx(n, 0);
  if (n == 1) return idx;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(frames - 1) / static_cast<double>(n - 1);
    idx[i] = static_cast<std::size_t>(std::round(pos));
  }
  return idx;
}

Embedding downsampling_baseline(const features::FeatureSequence& features, std::size_t n) {
  Embedding out;
  out.reserve(n * features.num_bins);
  for (auto t : downsample_indices(features.num_frames, n)) {
    const auto row = features.frame(t);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

double dtw_distance(const features::FeatureSequence& a, const features::FeatureSequence& b) {
  if (a.num_frames == 0 || b.num_frames == 0) throw InputError("dtw needs non-empty sequences");
  if (a.num_bins != b.num_bins) throw DimensionError("dtw: feature dimensions differ");
  const std::size_t n = a.num_frames, m = b.num_frames, f = a.num_bins;
  auto norms = [f](const features::FeatureSequence& s) {
    std::vector<double> out(s.num_frames);
    for (std::size_t t = 0; t < s.num_frames; ++t) {
      const auto row = s.frame(t);
      double q = 0.0;
      for (std::size_t k = 0; k < f; ++k) q += row[k] * row[k];
      out[t] = std::sqrt(q);
    }
    return out;
  };
  const auto na = norms(a), nb = norms(b);
  auto dist = [&](std::size_t i, std::size_t j) {
    if (na[i] == 0.0 || nb[j] == 0.0) return 1.0;
    const auto x = a.frame(i), y = b.frame(j);
    double dot = 0.0;
    for (std::size_t k = 0; k < f; ++k) dot += x[k] * y[k];
    return 1.0 - dot / (na[i] * nb[j]);
  };
  struct Cell {
    double cost;
    std::size_t length;
  };
  auto better = [](const Cell& p, const Cell& q) { return p.cost < q.cost || (p.cost == q.cost && p.length < q.length); };
  std::vector<Cell> prev(m), cur(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      Cell best{0.0, 0};
      if (i == 0 && j == 0) {
        best = {0.0, 0};
      } else {
        bool have = false;
        auto consider = [&](const Cell& c) {
          if (!have || better(c, best)) best = c;
          have = true;
        };
        if (i > 0) consider(prev[j]);
        if (j > 0) consider(cur[j - 1]);
        if (i > 0 && j > 0) consider(prev[j - 1]);
      }
      cur[j] = {best.cost + dist(i, j), best.length + 1};
    }
    std::swap(prev, cur);
  }
  return prev[m - 1].cost / static_cast<double>(prev[m - 1].length);
}

double collapse_metric(std::span<const Embedding> embeddings) {
  const std::size_t n = embeddings.size();
  if (n < 2) throw InputError("collapse_metric needs at least two embeddings");
  const std::size_t d = embeddings[0].size();
  std::vector<std::vector<double>> unit;
  for (const auto& e : embeddings) {
    if (e.size() != d) throw DimensionError("collapse_metric: embeddings differ in dimension");
    double q = 0.0;
    for (double v : e) q += v * v;
    if (q == 0.0) throw DegenerateInputError("collapse_metric: zero embedding");
    const double inv = 1.0 / std::sqrt(q);
    std::vector<double> u(d);
    for (std::size_t j = 0; j < d; ++j) u[j] = e[j] * inv;
    unit.push_back(std::move(u));
  }
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (const auto& u : unit) mean += u[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& u : unit) var += (u[j] - mean) * (u[j] - mean);
    total += std::sqrt(var / static_cast<double>(n));
  }
  return total / static_cast<double>(d);
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_ap_summary(const std::filesystem::path& path, const SameDiffResult& result) {
  auto out = open_output(path);
  out << "metric,value,n_same,n_diff\n";
  out << "ap_roc," << text::format_double(result.ap_roc) << ',' << result.n_same << ',' << result.n_diff << '\n';
  out << "ap_pr," << text::format_double(result.ap_pr) << ',' << result.n_same << ',' << result.n_diff << '\n';
}

void write_psed_curve(const std::filesystem::path& path, const std::vector<PsedBucket>& curve) {
  auto out = open_output(path);
  out << "psed,mean_cos,count\n";
  for (const auto& b : curve) {
    out << (b.bucket >= 4 ? std::string("4+") : std::to_string(b.bucket)) << ','
        << (b.count ? text::format_double(b.mean_cosine) : std::string("NA")) << ',' << b.count << '\n';
  }
}

void write_pca_coordinates(const std::filesystem::path& path, std::span<const EvalSegment> segments,
                           const PcaResult& pca) {
  if (segments.size() != pca.coordinates.size()) throw DimensionError("PCA coordinates do not match the segments");
  auto out = open_output(path);
  out << "id,word,speaker,x,y\n";
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i].segment;
    const auto& c = pca.coordinates[i];
    out << s.utterance_id << ':' << text::format_seconds(s.start) << '-' << text::format_seconds(s.end) << ','
        << s.word_id.value_or("") << ',' << segments[i].speaker_id << ','
        << (c.size() > 0 ? text::format_double(c[0]) : "0") << ',' << (c.size() > 1 ? text::format_double(c[1]) : "0")
        << '\n';
  }
}

void write_embeddings(const std::filesystem::path& path, std::span<const EvalSegment> segments,
                      std::span<const Embedding> embeddings) {
  if (segments.size() != embeddings.size()) throw DimensionError("embedding count does not match the segments");
  auto out = open_output(path);
  out << "# utterance_id\tstart\tend\tword_id\tvalues\n";
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i].segment;
    out << s.utterance_id << '\t' << text::format_seconds(s.start) << '\t' << text::format_seconds(s.end) << '\t'
        << s.word_id.value_or("") << '\t';
    for (std::size_t j = 0; j < embeddings[i].size(); ++j) out << (j ? " " : "") << text::format_double(embeddings[i][j]);
    out << '\n';
  }
}

}  // namespace cte::eval
