#include "cte/synthcorpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "cte/error.hpp"
#include "cte/random.hpp"
#include "cte/text.hpp"

namespace cte::synth {

namespace {

constexpr std::uint64_t kInventory = 0x1a7e;
constexpr std::uint64_t kLexicon = 0x1e81;
constexpr std::uint64_t kSpeaker = 0x5be4;
constexpr std::uint64_t kGrouping = 0x6a0b;
constexpr std::uint64_t kInstance = 0x1457;
constexpr std::uint64_t kLayout = 0x1a40;
constexpr std::uint64_t kNoise = 0x2015;

constexpr double kBaseF0 = 130.0;
constexpr double kFadeSeconds = 0.010;
constexpr double kUnitLevel = 0.25;
// Rendered word lengths are a few samples off the nominal product; keep the
// nominal range this far inside the duration bounds.
constexpr double kBoundMargin = 0.005;

struct Speaker {
  std::string id;
  data::Split split;
  double pitch;    // multiplies the source f0
  double formant;  // multiplies resonances, sweep and noise bands
  double level;
  double snr_db;
  double tilt;            // first-order channel filter coefficient
  double resonance_hz;    // centre of the channel's peaking band
  double resonance_gain;  // added share of the band-passed signal
};

char kind_letter(UnitKind k) {
  switch (k) {
    case UnitKind::tone: return 'v';
    case UnitKind::chirp: return 'c';
    case UnitKind::noise: return 's';
  }
  return '?';
}

std::string kind_name(UnitKind k) {
  switch (k) {
    case UnitKind::tone: return "tone";
    case UnitKind::chirp: return "chirp";
    case UnitKind::noise: return "noise";
  }
  return "?";
}

std::uint64_t language_key(const std::string& language) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : language) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::vector<PhoneUnit> make_inventory(const CorpusSpec& spec) {
  Rng rng(derive_seed(spec.seed, kInventory, language_key(spec.language)));
  std::vector<PhoneUnit> units;
  for (std::size_t i = 0; i < spec.inventory_size; ++i) {
    PhoneUnit u;
    u.kind = static_cast<UnitKind>(i % 3);
    u.symbol = spec.language + kind_letter(u.kind) + std::to_string(i);
    u.seconds = rng.uniform(spec.min_unit_seconds, spec.max_unit_seconds);
    switch (u.kind) {
      case UnitKind::tone:
        u.low = rng.uniform(300.0, 900.0);
        u.high = rng.uniform(u.low + 500.0, 3000.0);
        break;
      case UnitKind::chirp: {
        const double a = rng.uniform(400.0, 3500.0);
        double b = rng.uniform(400.0, 3500.0);
        while (std::abs(std::log(b / a)) < 0.4) b = rng.uniform(400.0, 3500.0);
        u.low = a;
        u.high = b;
        break;
      }
      case UnitKind::noise: {
        const double centre = rng.uniform(1500.0, 6500.0);
        const double width = rng.uniform(600.0, 2000.0);
        u.low = centre - width / 2.0;
        u.high = centre + width / 2.0;
        break;
      }
    }
    units.push_back(u);
  }
  return units;
}

double nominal_seconds(const std::vector<PhoneUnit>& inventory, const std::vector<std::size_t>& phones) {
  double s = 0.0;
  for (auto p : phones) s += inventory[p].seconds;
  return s;
}

// Nominal word durations whose every jittered rendering stays in bounds.
std::pair<double, double> admissible_nominal(const CorpusSpec& spec) {
  return {spec.word_bounds.min_seconds / (1.0 - spec.duration_jitter) + kBoundMargin,
          (spec.word_bounds.max_seconds - 2.0 * spec.boundary_slop) / (1.0 + spec.duration_jitter) - kBoundMargin};
}

std::vector<WordTemplate> make_lexicon(const CorpusSpec& spec, const std::vector<PhoneUnit>& inventory) {
  const auto [lo, hi] = admissible_nominal(spec);
  auto word_id = [&](std::size_t t) { return spec.language + "w" + std::to_string(t); };
  std::vector<WordTemplate> words;

  if (!spec.lexicon.empty()) {
    for (std::size_t t = 0; t < spec.lexicon.size(); ++t) {
      WordTemplate w{word_id(t), {}};
      for (const auto& sym : spec.lexicon[t]) {
        auto it = std::find_if(inventory.begin(), inventory.end(), [&](const PhoneUnit& u) { return u.symbol == sym; });
        if (it == inventory.end()) throw ConfigError("lexicon uses unknown phone '" + sym + "'");
        w.phones.push_back(static_cast<std::size_t>(it - inventory.begin()));
      }
      const double d = nominal_seconds(inventory, w.phones);
      if (d < lo || d > hi) {
        throw ConfigError("lexicon word " + std::to_string(t) + " has nominal duration " + text::format_double(d) +
                          " s; jittered instances would leave the word duration bounds");
      }
      words.push_back(std::move(w));
    }
    return words;
  }

  Rng rng(derive_seed(spec.seed, kLexicon, language_key(spec.language)));
  std::set<std::vector<std::size_t>> seen;
  const std::size_t n_units = inventory.size();
  for (std::size_t t = 0; t < spec.word_types; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < 100000 && !placed; ++attempt) {
      std::vector<std::size_t> phones;
      if (!words.empty() && rng.uniform() < spec.derived_word_rate) {
        phones = words[rng.below(words.size())].phones;
        const std::size_t edits = 1 + rng.below(2);
        for (std::size_t e = 0; e < edits; ++e) {
          const auto op = rng.below(3);
          if (op == 0 || (op == 1 && phones.size() >= spec.max_phones) || (op == 2 && phones.size() <= spec.min_phones)) {
            const auto pos = rng.below(phones.size());
            std::size_t sub = rng.below(n_units);
            if (n_units > 1) {
              while (sub == phones[pos]) sub = rng.below(n_units);
            }
            phones[pos] = sub;
          } else if (op == 1) {
            phones.insert(phones.begin() + static_cast<std::ptrdiff_t>(rng.below(phones.size() + 1)),
                          rng.below(n_units));
          } else {
            phones.erase(phones.begin() + static_cast<std::ptrdiff_t>(rng.below(phones.size())));
          }
        }
      } else {
        const std::size_t n = spec.min_phones + rng.below(spec.max_phones - spec.min_phones + 1);
        for (std::size_t i = 0; i < n; ++i) phones.push_back(rng.below(n_units));
      }
      const double d = nominal_seconds(inventory, phones);
      if (d < lo || d > hi || seen.count(phones)) continue;
      seen.insert(phones);
      words.push_back({word_id(t), std::move(phones)});
      placed = true;
    }
    if (!placed) {
      throw ConfigError("could not draw " + std::to_string(spec.word_types) +
                        " distinct words within the duration bounds; widen the unit or phone-count ranges");
    }
  }
  return words;
}

std::vector<Speaker> make_speakers(const CorpusSpec& spec) {
  std::vector<Speaker> out;
  const std::size_t n_train = spec.speakers - spec.valid_speakers - spec.test_speakers;
  for (std::size_t s = 0; s < spec.speakers; ++s) {
    Rng rng(derive_seed(spec.seed, kSpeaker, language_key(spec.language) + s));
    Speaker sp;
    sp.id = spec.language + "spk" + std::to_string(s);
    sp.split = s < n_train ? data::Split::train
               : s < n_train + spec.valid_speakers ? data::Split::valid
                                                   : data::Split::test;
    sp.pitch = std::exp(rng.uniform(std::log(0.75), std::log(1.35)));
    sp.formant = std::exp(rng.uniform(-std::log(spec.formant_range), std::log(spec.formant_range)));
    sp.level = rng.uniform(0.4, 1.0);
    sp.snr_db = rng.uniform(spec.min_snr_db, spec.max_snr_db);
    sp.tilt = rng.uniform(-spec.channel_tilt, spec.channel_tilt);
    sp.resonance_hz = std::exp(rng.uniform(std::log(400.0), std::log(4000.0)));
    sp.resonance_gain = rng.uniform(0.0, spec.channel_resonance);
    out.push_back(sp);
  }
  return out;
}

// Second-order band-pass (constant peak gain), direct form I.
class BandPass {
 public:
  BandPass(double centre, double q, double rate) {
    const double w = 2.0 * std::numbers::pi * centre / rate;
    const double alpha = std::sin(w) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w) / a0;
    a2_ = (1.0 - alpha) / a0;
  }
  double operator()(double x) {
    const double y = b0_ * x + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double b0_, b2_, a1_, a2_;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

std::vector<double> render_unit(const PhoneUnit& u, std::size_t n, double pitch, double formant, double rate,
                                Rng& rng) {
  std::vector<double> out(n, 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double nyquist = rate / 2.0;
  switch (u.kind) {
    case UnitKind::tone: {
      const double f0 = kBaseF0 * pitch;
      const double r1 = u.low * formant, r2 = u.high * formant;
      for (std::size_t k = 1; k * f0 < std::min(5000.0, nyquist - 100.0); ++k) {
        const double f = static_cast<double>(k) * f0;
        const double a = std::exp(-0.5 * std::pow((f - r1) / 150.0, 2)) +
                         0.7 * std::exp(-0.5 * std::pow((f - r2) / 200.0, 2)) + 0.02;
        for (std::size_t i = 0; i < n; ++i) out[i] += a * std::sin(two_pi * f * static_cast<double>(i) / rate);
      }
      break;
    }
    case UnitKind::chirp: {
      const double scale = formant * std::sqrt(pitch);
      const double f_start = std::min(u.low * scale, nyquist / 2.0), f_end = std::min(u.high * scale, nyquist / 2.0);
      const double seconds = static_cast<double>(n) / rate;
      double phase = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / rate;
        const double f = f_start * std::pow(f_end / f_start, t / seconds);
        out[i] = std::sin(phase) + 0.3 * std::sin(2.0 * phase);
        phase += two_pi * f / rate;
      }
      break;
    }
    case UnitKind::noise: {
      const double lo = u.low * formant, hi = std::min(u.high * formant, nyquist * 0.95);
      const double centre = std::sqrt(lo * hi);
      const double q = centre / std::max(hi - lo, 100.0);
      BandPass first(centre, q, rate), second(centre, q, rate);
      for (std::size_t i = 0; i < n; ++i) out[i] = second(first(rng.normal()));
      break;
    }
  }
  double power = 0.0;
  for (double v : out) power += v * v;
  const double gain = power > 0.0 ? kUnitLevel / std::sqrt(power / static_cast<double>(n)) : 0.0;
  const auto fade = std::min<std::size_t>(static_cast<std::size_t>(kFadeSeconds * rate), n / 4);
  for (std::size_t i = 0; i < n; ++i) {
    double env = 1.0;
    if (i < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(fade));
    if (n - 1 - i < fade) {
      env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n - 1 - i) / static_cast<double>(fade));
    }
    out[i] *= gain * env;
  }
  return out;
}

// Speaker channel: a peaking band followed by a first-order spectral tilt.
void apply_channel(std::vector<double>& x, const Speaker& speaker, double rate) {
  if (speaker.resonance_gain > 0.0) {
    BandPass band(speaker.resonance_hz, 2.0, rate);
    for (double& v : x) v += speaker.resonance_gain * band(v);
  }
  if (speaker.tilt != 0.0) {
    double prev = 0.0;
    for (double& v : x) {
      const double cur = v;
      v = cur - speaker.tilt * prev;
      prev = cur;
    }
  }
}

std::vector<double> render_word(const CorpusSpec& spec, const std::vector<PhoneUnit>& inventory,
                                const WordTemplate& word, const Speaker& speaker, std::uint64_t instance_seed) {
  Rng rng(instance_seed);
  const double pitch = speaker.pitch * rng.uniform(1.0 - spec.pitch_jitter, 1.0 + spec.pitch_jitter);
  std::vector<double> out;
  for (auto p : word.phones) {
    const double factor = rng.uniform(1.0 - spec.duration_jitter, 1.0 + spec.duration_jitter);
    const auto n = static_cast<std::size_t>(std::llround(inventory[p].seconds * factor * spec.sample_rate));
    const auto unit = render_unit(inventory[p], n, pitch, speaker.formant, spec.sample_rate, rng);
    for (double v : unit) out.push_back(v * speaker.level);
  }
  apply_channel(out, speaker, spec.sample_rate);
  return out;
}

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

void CorpusSpec::validate() const {
  if (word_types == 0 && lexicon.empty()) throw ConfigError("corpus needs at least one word type");
  if (instances_per_type == 0) throw ConfigError("instances_per_type must be positive");
  if (speakers < valid_speakers + test_speakers + 1) {
    throw ConfigError("need at least one training speaker besides the valid and test speakers");
  }
  if (min_phones == 0 || min_phones > max_phones) throw ConfigError("phone count range is empty");
  if (inventory_size == 0) throw ConfigError("inventory_size must be positive");
  if (!(min_unit_seconds > 0.0 && min_unit_seconds <= max_unit_seconds)) throw ConfigError("unit duration range is empty");
  if (!(duration_jitter >= 0.0 && duration_jitter < 1.0)) throw ConfigError("duration_jitter must lie in [0, 1)");
  if (!(boundary_slop >= 0.0 && boundary_slop <= 0.07)) throw ConfigError("boundary_slop must lie in [0, 0.07] s");
  if (!(formant_range >= 1.0)) throw ConfigError("formant_range must be at least 1");
  if (!(channel_tilt >= 0.0 && channel_tilt < 1.0)) throw ConfigError("channel_tilt must lie in [0, 1)");
  if (!(channel_resonance >= 0.0)) throw ConfigError("channel_resonance must be non-negative");
  if (!(pitch_jitter >= 0.0 && pitch_jitter < 1.0)) throw ConfigError("pitch_jitter must lie in [0, 1)");
  if (!(min_snr_db <= max_snr_db)) throw ConfigError("SNR range is empty");
  if (max_words_per_utterance == 0) throw ConfigError("max_words_per_utterance must be positive");
  if (!(derived_word_rate >= 0.0 && derived_word_rate <= 1.0)) throw ConfigError("derived_word_rate must lie in [0, 1]");
  if (sample_rate < 8000) throw ConfigError("sample_rate must be at least 8000");
  if (language.empty() || !std::all_of(language.begin(), language.end(), [](unsigned char c) { return std::isalnum(c); })) {
    throw ConfigError("language must be a non-empty alphanumeric tag");
  }
  const auto [lo, hi] = admissible_nominal(*this);
  const double shortest = static_cast<double>(min_phones) * min_unit_seconds;
  const double longest = static_cast<double>(max_phones) * max_unit_seconds;
  if (lo > hi || longest < lo || shortest > hi) {
    throw ConfigError("no word of " + std::to_string(min_phones) + "-" + std::to_string(max_phones) + " units of " +
                      text::format_double(min_unit_seconds) + "-" + text::format_double(max_unit_seconds) +
                      " s stays within [" + text::format_double(word_bounds.min_seconds) + ", " +
                      text::format_double(word_bounds.max_seconds) + "] s under +-" +
                      text::format_double(duration_jitter * 100.0) + "% jitter");
  }
}

void CorpusSpec::set(const std::string& key, const std::string& value) {
  if (key == "word_types") word_types = to_size(key, value);
  else if (key == "instances_per_type") instances_per_type = to_size(key, value);
  else if (key == "speakers") speakers = to_size(key, value);
  else if (key == "valid_speakers") valid_speakers = to_size(key, value);
  else if (key == "test_speakers") test_speakers = to_size(key, value);
  else if (key == "min_phones") min_phones = to_size(key, value);
  else if (key == "max_phones") max_phones = to_size(key, value);
  else if (key == "inventory_size") inventory_size = to_size(key, value);
  else if (key == "min_unit_seconds") min_unit_seconds = to_double(key, value);
  else if (key == "max_unit_seconds") max_unit_seconds = to_double(key, value);
  else if (key == "duration_jitter") duration_jitter = to_double(key, value);
  else if (key == "boundary_slop") boundary_slop = to_double(key, value);
  else if (key == "formant_range") formant_range = to_double(key, value);
  else if (key == "channel_tilt") channel_tilt = to_double(key, value);
  else if (key == "channel_resonance") channel_resonance = to_double(key, value);
  else if (key == "pitch_jitter") pitch_jitter = to_double(key, value);
  else if (key == "min_snr_db") min_snr_db = to_double(key, value);
  else if (key == "max_snr_db") max_snr_db = to_double(key, value);
  else if (key == "max_words_per_utterance") max_words_per_utterance = to_size(key, value);
  else if (key == "derived_word_rate") derived_word_rate = to_double(key, value);
  else if (key == "language") language = std::string(text::trim(value));
  else if (key == "seed") seed = to_size(key, value);
  else if (key == "sample_rate") sample_rate = static_cast<int>(to_size(key, value));
  else if (key == "min_word_seconds") word_bounds.min_seconds = to_double(key, value);
  else if (key == "max_word_seconds") word_bounds.max_seconds = to_double(key, value);
  else if (key == "lexicon") {
    // words separated by ';', phones by spaces
    lexicon.clear();
    for (const auto& word : text::split(value, ';')) {
      std::vector<std::string> phones;
      for (const auto& p : text::split(text::trim(word), ' ')) {
        if (!p.empty()) phones.push_back(p);
      }
      if (!phones.empty()) lexicon.push_back(std::move(phones));
    }
  } else {
    throw ConfigError("unknown corpus key '" + key + "'");
  }
}

std::map<std::string, std::string> CorpusSpec::entries() const {
  auto n = [](std::size_t v) { return std::to_string(v); };
  auto d = [](double v) { return text::format_double(v); };
  std::map<std::string, std::string> e{
      {"word_types", n(word_types)},
      {"instances_per_type", n(instances_per_type)},
      {"speakers", n(speakers)},
      {"valid_speakers", n(valid_speakers)},
      {"test_speakers", n(test_speakers)},
      {"min_phones", n(min_phones)},
      {"max_phones", n(max_phones)},
      {"inventory_size", n(inventory_size)},
      {"min_unit_seconds", d(min_unit_seconds)},
      {"max_unit_seconds", d(max_unit_seconds)},
      {"duration_jitter", d(duration_jitter)},
      {"formant_range", d(formant_range)},
      {"boundary_slop", d(boundary_slop)},
      {"channel_tilt", d(channel_tilt)},
      {"channel_resonance", d(channel_resonance)},
      {"pitch_jitter", d(pitch_jitter)},
      {"min_snr_db", d(min_snr_db)},
      {"max_snr_db", d(max_snr_db)},
      {"max_words_per_utterance", n(max_words_per_utterance)},
      {"derived_word_rate", d(derived_word_rate)},
      {"language", language},
      {"seed", std::to_string(seed)},
      {"sample_rate", std::to_string(sample_rate)},
      {"min_word_seconds", d(word_bounds.min_seconds)},
      {"max_word_seconds", d(word_bounds.max_seconds)},
  };
  if (!lexicon.empty()) {
    std::string joined;
    for (const auto& w : lexicon) {
      if (!joined.empty()) joined += ';';
      for (std::size_t i = 0; i < w.size(); ++i) joined += (i ? " " : "") + w[i];
    }
    e["lexicon"] = joined;
  }
  return e;
}

CorpusSpec load_spec(const std::filesystem::path& path, CorpusSpec base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus spec " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = text::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ParseError(path.string(), line_no, "expected key=value");
    try {
      base.set(std::string(text::trim(body.substr(0, eq))), std::string(text::trim(body.substr(eq + 1))));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

std::vector<data::WordSegment> Corpus::segments_in(data::Split split) const {
  std::vector<data::WordSegment> out;
  for (const auto& s : segments) {
    if (s.split == split) out.push_back(s);
  }
  return out;
}

std::vector<std::string> phone_symbols(const Corpus& corpus, const WordTemplate& word) {
  std::vector<std::string> out;
  for (auto p : word.phones) out.push_back(corpus.inventory.at(p).symbol);
  return out;
}

Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.inventory = make_inventory(spec);
  c.lexicon = make_lexicon(spec, c.inventory);
  const auto speakers = make_speakers(spec);
  const std::size_t n_types = c.lexicon.size();
  const double rate = spec.sample_rate;

  // Instance i of type t is spoken by speaker (t + i) mod S.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> by_speaker(spec.speakers);
  for (std::size_t t = 0; t < n_types; ++t) {
    for (std::size_t i = 0; i < spec.instances_per_type; ++i) by_speaker[(t + i) % spec.speakers].push_back({t, i});
  }

  const auto lang = language_key(spec.language);
  for (std::size_t s = 0; s < spec.speakers; ++s) {
    const auto& sp = speakers[s];
    auto items = by_speaker[s];
    Rng grouping(derive_seed(spec.seed, kGrouping, lang + s));
    grouping.shuffle(items);
    std::size_t next = 0;
    for (std::size_t u = 0; next < items.size(); ++u) {
      const std::size_t count = std::min(items.size() - next, 1 + grouping.below(spec.max_words_per_utterance));
      Utterance utt;
      utt.id = sp.id + "u" + std::to_string(u);
      utt.speaker_id = sp.id;
      utt.split = sp.split;
      utt.audio.sample_rate = spec.sample_rate;
      Rng layout(derive_seed(derive_seed(spec.seed, kLayout, lang + s), u));

      auto& x = utt.audio.samples;
      auto silence = [&](double lo, double hi) {
        x.resize(x.size() + static_cast<std::size_t>(std::llround(layout.uniform(lo, hi) * rate)), 0.0);
      };
      double signal_power = 0.0;
      std::size_t signal_samples = 0;
      silence(0.15, 0.30);
      for (std::size_t k = 0; k < count; ++k, ++next) {
        const auto [t, i] = items[next];
        if (k > 0) silence(0.15, 0.35);
        const auto word = render_word(spec, c.inventory, c.lexicon[t], sp,
                                      derive_seed(spec.seed, kInstance, lang + t * spec.instances_per_type + i));
        const std::size_t start = x.size();
        x.insert(x.end(), word.begin(), word.end());
        for (double v : word) signal_power += v * v;
        signal_samples += word.size();

        data::WordSegment seg;
        seg.utterance_id = utt.id;
        seg.wav_path = "wav/" + utt.id + ".wav";
        seg.start = static_cast<double>(start) / rate - layout.uniform(0.0, spec.boundary_slop);
        seg.end = static_cast<double>(x.size()) / rate + layout.uniform(0.0, spec.boundary_slop);
        seg.word_id = c.lexicon[t].word_id;
        seg.split = sp.split;
        c.segments.push_back(seg);
        c.phones.push_back({utt.id, seg.start, seg.end, phone_symbols(c, c.lexicon[t])});
      }
      silence(0.15, 0.30);

      Rng noise(derive_seed(derive_seed(spec.seed, kNoise, lang + s), u));
      const double noise_std =
          std::sqrt(signal_power / static_cast<double>(signal_samples) / std::pow(10.0, sp.snr_db / 10.0));
      double peak = 0.0;
      for (double& v : x) {
        v += noise_std * noise.normal();
        peak = std::max(peak, std::abs(v));
      }
      if (peak > 0.99) {
        for (double& v : x) v *= 0.99 / peak;
      }
      c.speakers.push_back({utt.id, sp.id, sp.split});
      c.utterances.push_back(std::move(utt));
    }
  }

  for (const auto& seg : c.segments) {
    if (!spec.word_bounds.admits(seg)) {
      throw ConfigError("generated word of " + text::format_double(seg.duration()) + " s is outside the bounds");
    }
  }
  return c;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "wav");
  for (const auto& u : corpus.utterances) features::write_wav(dir / "wav" / (u.id + ".wav"), u.audio);
  data::write_alignments(dir / "alignments.tsv", corpus.segments);
  for (auto split : {data::Split::train, data::Split::valid, data::Split::test}) {
    data::write_alignments(dir / ("alignments_" + data::to_string(split) + ".tsv"), corpus.segments_in(split));
  }
  data::write_phone_manifest(dir / "phones.tsv", corpus.phones);
  data::write_speaker_manifest(dir / "speakers.tsv", corpus.speakers);

  std::ofstream lex(dir / "lexicon.tsv");
  if (!lex) throw IoError("cannot write " + (dir / "lexicon.tsv").string());
  lex << "# word_id\tphones\n";
  for (const auto& w : corpus.lexicon) {
    lex << w.word_id << '\t';
    const auto symbols = phone_symbols(corpus, w);
    for (std::size_t i = 0; i < symbols.size(); ++i) lex << (i ? " " : "") << symbols[i];
    lex << '\n';
  }

  std::ofstream inv(dir / "inventory.tsv");
  if (!inv) throw IoError("cannot write " + (dir / "inventory.tsv").string());
  inv << "# symbol\tkind\tseconds\tlow_hz\thigh_hz\n";
  for (const auto& u : corpus.inventory) {
    inv << u.symbol << '\t' << kind_name(u.kind) << '\t' << text::format_double(u.seconds) << '\t'
        << text::format_double(u.low) << '\t' << text::format_double(u.high) << '\n';
  }

  std::ofstream cfg(dir / "spec.cfg");
  if (!cfg) throw IoError("cannot write " + (dir / "spec.cfg").string());
  for (const auto& [k, v] : corpus.spec.entries()) cfg << k << '=' << v << '\n';
}

}  // namespace cte::synth
