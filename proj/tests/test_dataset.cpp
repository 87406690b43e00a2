#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"

#include "cte/dataset.hpp"
#include "cte/error.hpp"

using namespace cte::data;
using namespace cte;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& contents) {
  auto dir = fs::temp_directory_path() / "cte_test_dataset";
  fs::create_directories(dir);
  auto p = dir / name;
  std::ofstream(p) << contents;
  return p;
}

WordSegment seg(std::string utt, double start, double end, std::string word) {
  WordSegment s;
  s.utterance_id = std::move(utt);
  s.start = start;
  s.end = end;
  s.word_id = std::move(word);
  return s;
}

features::FeatureSequence ramp(std::size_t frames, std::size_t bins = 4) {
  features::FeatureSequence f(frames, bins);
  for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = static_cast<double>(i % 97) + 1.0;
  return f;
}

}  // namespace

TEST_CASE("load_alignments: empty, single row, bad row") {
  CHECK(load_alignments(temp_file("empty.tsv", "")).empty());

  auto one = load_alignments(temp_file("one.tsv", "# header\nutt1\ta/utt1.wav\t0.25\t1.125\tcat\n"), Split::train);
  REQUIRE(one.size() == 1);
  CHECK(one[0].utterance_id == "utt1");
  CHECK(one[0].wav_path == "a/utt1.wav");
  CHECK(one[0].start == 0.25);
  CHECK(one[0].end == 1.125);
  CHECK(one[0].word_id == "cat");
  CHECK(one[0].split == Split::train);

  std::string ten;
  for (int i = 0; i < 10; ++i) {
    ten += "u" + std::to_string(i) + "\tw.wav\t" + (i == 6 ? "1.0\t0.5" : "0.0\t0.7") + "\tdog\n";
  }
  try {
    load_alignments(temp_file("ten.tsv", ten));
    FAIL("expected a parse error");
  } catch (const cte::ParseError& e) {
    CHECK(e.line() == 7);
    CHECK(std::string(e.what()).find(":7:") != std::string::npos);
  }

  CHECK_THROWS_AS(load_alignments(temp_file("fields.tsv", "u\tw\t0.1\t0.9\n")), cte::ParseError);
  CHECK_THROWS_AS(load_alignments(temp_file("num.tsv", "u\tw\tzero\t0.9\tx\n")), cte::ParseError);
  CHECK_THROWS_AS(load_alignments("/nonexistent/align.tsv"), cte::IoError);
}

TEST_CASE("build_pairs: counts, symmetry, duration filter") {
  SUBCASE("two instances give both orders") {
    auto pairs = build_pairs({seg("u1", 0, 0.6, "a"), seg("u2", 0, 0.7, "a")});
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].a.utterance_id == "u1");
    CHECK(pairs[1].a.utterance_id == "u2");
  }
  SUBCASE("short instance excluded") {
    auto pairs = build_pairs({seg("u1", 0, 0.6, "a"), seg("u2", 0, 0.3, "a"), seg("u3", 0, 0.8, "a")});
    CHECK(pairs.size() == 2);
    for (const auto& p : pairs) {
      CHECK(p.a.utterance_id != "u2");
      CHECK(p.b.utterance_id != "u2");
    }
  }
  SUBCASE("n instances give n(n-1) pairs; singletons nothing") {
    std::vector<WordSegment> segs;
    for (int i = 0; i < 4; ++i) segs.push_back(seg("u" + std::to_string(i), 0, 0.5 + 0.1 * i, "w"));
    segs.push_back(seg("lonely", 0, 1.0, "z"));
    auto pairs = build_pairs(segs);
    CHECK(pairs.size() == 12);
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : pairs) seen.emplace(p.a.utterance_id, p.b.utterance_id);
    for (const auto& p : pairs) CHECK(seen.count({p.b.utterance_id, p.a.utterance_id}) == 1);
  }
  SUBCASE("boundaries inclusive") {
    auto pairs = build_pairs({seg("u1", 1.0, 1.5, "a"), seg("u2", 0, 2.0, "a"), seg("u3", 0, 2.01, "a")});
    CHECK(pairs.size() == 2);
  }
  SUBCASE("large word types are capped with the seed") {
    std::vector<WordSegment> segs;
    for (int i = 0; i < 30; ++i) segs.push_back(seg("u" + std::to_string(i), 0, 0.6, "w"));
    PairOptions opt;
    opt.seed = 5;
    auto p1 = build_pairs(segs, opt);
    auto p2 = build_pairs(segs, opt);
    CHECK(p1.size() == 20 * 19);
    CHECK(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].a.utterance_id == p2[i].a.utterance_id);
  }
  SUBCASE("missing word id is an input error") {
    auto s = seg("u", 0, 1, "a");
    s.word_id.reset();
    CHECK_THROWS_AS(build_pairs({s}), cte::InputError);
  }
}

TEST_CASE("load_utd_pairs: symmetrisation and filtering") {
  auto one = load_utd_pairs(temp_file("p1.tsv", "a\t0.0\t0.6\tb\t1.0\t1.8\n"));
  REQUIRE(one.size() == 2);
  CHECK(one[1].a.utterance_id == "b");
  CHECK(one[1].b.utterance_id == "a");

  auto already = load_utd_pairs(temp_file("p4.tsv",
                                          "a\t0.0\t0.6\tb\t1.0\t1.8\n"
                                          "b\t1.0\t1.8\ta\t0.0\t0.6\n"
                                          "c\t0.0\t0.9\td\t0.2\t1.0\n"
                                          "d\t0.2\t1.0\tc\t0.0\t0.9\n"));
  CHECK(already.size() == 4);

  auto longseg = load_utd_pairs(temp_file("plong.tsv", "a\t0.0\t2.5\tb\t1.0\t1.8\na\t0\t1\tc\t0\t1\n"));
  CHECK(longseg.size() == 2);

  CHECK_THROWS_AS(load_utd_pairs(temp_file("pbad.tsv", "a\t0\t1\tb\t0\n")), cte::ParseError);
}

TEST_CASE("manifests: phones and speakers round trip") {
  auto dir = fs::temp_directory_path() / "cte_test_dataset";
  write_phone_manifest(dir / "phones.tsv", {{"u1", 0.1, 0.9, {"t3", "c1", "n0"}}});
  auto phones = load_phone_manifest(dir / "phones.tsv");
  REQUIRE(phones.size() == 1);
  CHECK(phones[0].phones == std::vector<std::string>{"t3", "c1", "n0"});
  write_speaker_manifest(dir / "spk.tsv", {{"u1", "s04", Split::test}});
  auto spk = load_speaker_manifest(dir / "spk.tsv");
  REQUIRE(spk.size() == 1);
  CHECK(spk[0].split == Split::test);
}

TEST_CASE("make_batches: padding, masks, partition, determinism") {
  UtteranceFeatures utts;
  utts["u50"] = ramp(50);
  utts["u80"] = ramp(80);
  utts["u30"] = ramp(30);
  const double shift = 0.010;
  auto whole = [&](const std::string& id) { return seg(id, 0.0, utts[id].num_frames * shift, "w"); };

  SUBCASE("single pair") {
    std::vector<WordPair> pairs{{whole("u50"), whole("u30")}};
    auto batches = make_batches(pairs, utts, 1, std::nullopt);
    REQUIRE(batches.size() == 1);
    const auto& b = batches[0];
    CHECK(b.student_len == 51);
    CHECK(b.teacher_len == 31);
    CHECK(b.student_length(0) == 51);
    for (std::size_t f = 0; f < 4; ++f) CHECK(b.student_features[f] == 1.0);
  }
  SUBCASE("two pairs of 50 and 80 frames") {
    std::vector<WordPair> pairs{{whole("u50"), whole("u30")}, {whole("u80"), whole("u50")}};
    auto batches = make_batches(pairs, utts, 2, std::nullopt);
    REQUIRE(batches.size() == 1);
    const auto& b = batches[0];
    CHECK(b.student_len == 81);
    CHECK(b.student_features.size() == 2 * 81 * 4);
    std::size_t masked = 0;
    for (std::size_t t = 0; t < 81; ++t) masked += b.student_mask[t] == 0;
    CHECK(masked == 30);
    CHECK(b.student_length(0) == 51);
    CHECK(b.student_length(1) == 81);
    for (std::size_t t = 51; t < 81; ++t)
      for (std::size_t f = 0; f < 4; ++f) CHECK(b.student_features[t * 4 + f] == 0.0);
    CHECK(b.student_mask[0] == 1);
    CHECK(b.student_mask[81] == 1);
  }
  SUBCASE("partition and seeded determinism") {
    std::vector<WordPair> pairs;
    for (int i = 0; i < 7; ++i) pairs.push_back({whole(i % 2 ? "u50" : "u80"), whole("u30")});
    auto b1 = make_batches(pairs, utts, 3, 42);
    auto b2 = make_batches(pairs, utts, 3, 42);
    REQUIRE(b1.size() == 3);
    CHECK(b1.back().size == 1);
    std::vector<std::size_t> all;
    for (std::size_t i = 0; i < b1.size(); ++i) {
      CHECK(b1[i].pair_indices == b2[i].pair_indices);
      CHECK(b1[i].student_features == b2[i].student_features);
      all.insert(all.end(), b1[i].pair_indices.begin(), b1[i].pair_indices.end());
    }
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  }
  SUBCASE("missing utterance") {
    std::vector<WordPair> pairs{{seg("nope", 0, 0.6, "w"), whole("u30")}};
    CHECK_THROWS_AS(make_batches(pairs, utts, 1, std::nullopt), cte::LookupError);
  }
}
