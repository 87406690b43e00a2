#include "cte/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "cte/error.hpp"
#include "cte/random.hpp"
#include "cte/text.hpp"

namespace cte::data {

namespace {

constexpr double kSpanTolerance = 1e-6;

std::ifstream open_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

std::ofstream create_text(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

bool skip_line(const std::string& line) {
  const auto t = text::trim(line);
  return t.empty() || t.front() == '#';
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

double field_seconds(const std::filesystem::path& path, std::size_t line_no, const std::string& field,
                     const char* name) {
  const auto v = text::parse_double(field);
  if (!v || !std::isfinite(*v)) {
    throw ParseError(path.string(), line_no, std::string("bad ") + name + " '" + field + "'");
  }
  return *v;
}

// Key identifying a span for symmetry checks; microsecond resolution.
std::string span_key(const WordSegment& s) {
  return s.utterance_id + '\t' + std::to_string(std::llround(s.start * 1e6)) + '\t' +
         std::to_string(std::llround(s.end * 1e6));
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    case Split::unspecified: break;
  }
  return "unspecified";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "valid") return Split::valid;
  if (name == "test") return Split::test;
  if (name == "unspecified" || name.empty()) return Split::unspecified;
  throw ConfigError("unknown split '" + name + "'");
}

bool WordSegment::same_span(const WordSegment& other) const {
  return utterance_id == other.utterance_id && std::abs(start - other.start) < kSpanTolerance &&
         std::abs(end - other.end) < kSpanTolerance;
}

bool DurationFilter::admits(const WordSegment& s) const {
  const double d = s.duration();
  return d >= min_seconds - 1e-9 && d <= max_seconds + 1e-9;
}

std::vector<WordSegment> load_alignments(const std::filesystem::path& path, Split split) {
  auto in = open_text(path);
  std::vector<WordSegment> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (skip_line(line)) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 5) {
      throw ParseError(path.string(), line_no, "expected 5 tab-separated fields, found " + std::to_string(f.size()));
    }
    WordSegment s;
    s.utterance_id = f[0];
    s.wav_path = f[1];
    s.start = field_seconds(path, line_no, f[2], "start");
    s.end = field_seconds(path, line_no, f[3], "end");
    if (s.utterance_id.empty()) throw ParseError(path.string(), line_no, "empty utterance id");
    if (!(s.end > s.start)) throw ParseError(path.string(), line_no, "end must be greater than start");
    if (!f[4].empty()) s.word_id = f[4];
    s.split = split;
    out.push_back(std::move(s));
  }
  return out;
}

void write_alignments(const std::filesystem::path& path, const std::vector<WordSegment>& segments) {
  auto out = create_text(path);
  out << "# utterance_id\twav_path\tstart_s\tend_s\tword_id\n";
  for (const auto& s : segments) {
    out << s.utterance_id << '\t' << s.wav_path << '\t' << text::format_seconds(s.start) << '\t'
        << text::format_seconds(s.end) << '\t' << s.word_id.value_or("") << '\n';
  }
}

std::vector<WordPair> build_pairs(const std::vector<WordSegment>& segments, const PairOptions& options) {
  std::vector<std::string> type_order;
  std::map<std::string, std::vector<std::size_t>> by_type;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    if (!s.word_id) {
      throw InputError("segment " + s.utterance_id + " [" + text::format_seconds(s.start) + "] has no word id");
    }
    if (!options.filter.admits(s)) continue;
    auto [it, inserted] = by_type.try_emplace(*s.word_id);
    if (inserted) type_order.push_back(*s.word_id);
    it->second.push_back(i);
  }

  std::vector<WordPair> pairs;
  for (std::size_t t = 0; t < type_order.size(); ++t) {
    auto members = by_type[type_order[t]];
    if (members.size() > options.max_instances_per_type) {
      Rng rng(derive_seed(options.seed, 0x9a1f, t));
      rng.shuffle(members);
      members.resize(options.max_instances_per_type);
      std::sort(members.begin(), members.end());
    }
    for (std::size_t i : members) {
      for (std::size_t j : members) {
        if (i == j || segments[i].same_span(segments[j])) continue;
        pairs.push_back({segments[i], segments[j]});
      }
    }
  }
  return pairs;
}

std::vector<WordPair> load_utd_pairs(const std::filesystem::path& path, const DurationFilter& filter) {
  auto in = open_text(path);
  std::vector<WordPair> listed;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (skip_line(line)) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 6) {
      throw ParseError(path.string(), line_no, "expected 6 tab-separated fields, found " + std::to_string(f.size()));
    }
    WordPair p;
    p.a.utterance_id = f[0];
    p.a.start = field_seconds(path, line_no, f[1], "start_a");
    p.a.end = field_seconds(path, line_no, f[2], "end_a");
    p.b.utterance_id = f[3];
    p.b.start = field_seconds(path, line_no, f[4], "start_b");
    p.b.end = field_seconds(path, line_no, f[5], "end_b");
    if (!(p.a.end > p.a.start) || !(p.b.end > p.b.start)) {
      throw ParseError(path.string(), line_no, "end must be greater than start");
    }
    if (!filter.admits(p.a) || !filter.admits(p.b)) continue;
    listed.push_back(std::move(p));
  }

  std::set<std::pair<std::string, std::string>> present;
  for (const auto& p : listed) present.emplace(span_key(p.a), span_key(p.b));
  std::vector<WordPair> out;
  out.reserve(2 * listed.size());
  for (const auto& p : listed) {
    out.push_back(p);
    auto reverse = std::make_pair(span_key(p.b), span_key(p.a));
    if (present.insert(reverse).second) out.push_back({p.b, p.a});
  }
  return out;
}

void write_pairs(const std::filesystem::path& path, const std::vector<WordPair>& pairs) {
  auto out = create_text(path);
  out << "# utt_a\tstart_a\tend_a\tutt_b\tstart_b\tend_b\n";
  for (const auto& p : pairs) {
    out << p.a.utterance_id << '\t' << text::format_seconds(p.a.start) << '\t' << text::format_seconds(p.a.end)
        << '\t' << p.b.utterance_id << '\t' << text::format_seconds(p.b.start) << '\t'
        << text::format_seconds(p.b.end) << '\n';
  }
}

std::vector<PhoneEntry> load_phone_manifest(const std::filesystem::path& path) {
  auto in = open_text(path);
  std::vector<PhoneEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (skip_line(line)) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 4) throw ParseError(path.string(), line_no, "expected 4 tab-separated fields");
    PhoneEntry e;
    e.utterance_id = f[0];
    e.start = field_seconds(path, line_no, f[1], "start");
    e.end = field_seconds(path, line_no, f[2], "end");
    for (auto& p : text::split(f[3], ' ')) {
      if (!p.empty()) e.phones.push_back(std::move(p));
    }
    if (e.phones.empty()) throw ParseError(path.string(), line_no, "empty phone sequence");
    out.push_back(std::move(e));
  }
  return out;
}

void write_phone_manifest(const std::filesystem::path& path, const std::vector<PhoneEntry>& entries) {
  auto out = create_text(path);
  out << "# utterance_id\tstart_s\tend_s\tphones\n";
  for (const auto& e : entries) {
    out << e.utterance_id << '\t' << text::format_seconds(e.start) << '\t' << text::format_seconds(e.end) << '\t';
    for (std::size_t i = 0; i < e.phones.size(); ++i) out << (i ? " " : "") << e.phones[i];
    out << '\n';
  }
}

std::vector<SpeakerEntry> load_speaker_manifest(const std::filesystem::path& path) {
  auto in = open_text(path);
  std::vector<SpeakerEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (skip_line(line)) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 3) throw ParseError(path.string(), line_no, "expected 3 tab-separated fields");
    try {
      out.push_back({f[0], f[1], parse_split(f[2])});
    } catch (const ConfigError& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  return out;
}

void write_speaker_manifest(const std::filesystem::path& path, const std::vector<SpeakerEntry>& entries) {
  auto out = create_text(path);
  out << "# utterance_id\tspeaker_id\tsplit\n";
  for (const auto& e : entries) out << e.utterance_id << '\t' << e.speaker_id << '\t' << to_string(e.split) << '\n';
}

features::FeatureSequence segment_features(const UtteranceFeatures& utterances, const WordSegment& segment) {
  const auto it = utterances.find(segment.utterance_id);
  if (it == utterances.end()) throw LookupError("no features for utterance '" + segment.utterance_id + "'");
  return features::slice_segment(it->second, segment.start, segment.end);
}

std::size_t Batch::student_length(std::size_t row) const {
  const auto* m = student_mask.data() + row * student_len;
  return static_cast<std::size_t>(std::count(m, m + student_len, std::uint8_t{1}));
}

std::size_t Batch::teacher_length(std::size_t row) const {
  const auto* m = teacher_mask.data() + row * teacher_len;
  return static_cast<std::size_t>(std::count(m, m + teacher_len, std::uint8_t{1}));
}

BatchStream::BatchStream(const std::vector<WordPair>& pairs, const UtteranceFeatures& utterances,
                         std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed, double token_value)
    : pairs_(&pairs), utterances_(&utterances), batch_size_(batch_size), token_value_(token_value) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  order_.resize(pairs.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(order_);
  }
}

std::size_t BatchStream::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch BatchStream::batch(std::size_t index) const {
  if (index >= num_batches()) throw ContractError("batch index out of range");
  const std::size_t first = index * batch_size_;
  const std::size_t last = std::min(order_.size(), first + batch_size_);

  std::vector<features::FeatureSequence> student, teacher;
  Batch b;
  b.size = last - first;
  for (std::size_t i = first; i < last; ++i) {
    const auto& pair = (*pairs_)[order_[i]];
    student.push_back(segment_features(*utterances_, pair.a));
    teacher.push_back(segment_features(*utterances_, pair.b));
    b.pair_indices.push_back(order_[i]);
  }
  b.feature_dim = student.front().num_bins;
  for (std::size_t r = 0; r < b.size; ++r) {
    if (student[r].num_bins != b.feature_dim || teacher[r].num_bins != b.feature_dim) {
      throw InputError("inconsistent feature dimensions within a batch");
    }
    b.student_len = std::max(b.student_len, student[r].num_frames + 1);
    b.teacher_len = std::max(b.teacher_len, teacher[r].num_frames + 1);
  }

  auto fill = [&](const std::vector<features::FeatureSequence>& side, std::size_t len, std::vector<double>& values,
                  std::vector<std::uint8_t>& mask) {
    const std::size_t f = b.feature_dim;
    values.assign(b.size * len * f, 0.0);
    mask.assign(b.size * len, 0);
    for (std::size_t r = 0; r < b.size; ++r) {
      double* row = values.data() + r * len * f;
      std::fill(row, row + f, token_value_);
      std::copy(side[r].values.begin(), side[r].values.end(), row + f);
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(r * len),
                mask.begin() + static_cast<std::ptrdiff_t>(r * len + side[r].num_frames + 1), std::uint8_t{1});
    }
  };
  fill(student, b.student_len, b.student_features, b.student_mask);
  fill(teacher, b.teacher_len, b.teacher_features, b.teacher_mask);
  return b;
}

std::vector<Batch> make_batches(const std::vector<WordPair>& pairs, const UtteranceFeatures& utterances,
                                std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                                double token_value) {
  BatchStream stream(pairs, utterances, batch_size, shuffle_seed, token_value);
  std::vector<Batch> out;
  out.reserve(stream.num_batches());
  for (std::size_t i = 0; i < stream.num_batches(); ++i) out.push_back(stream.batch(i));
  return out;
}

}  // namespace cte::data
