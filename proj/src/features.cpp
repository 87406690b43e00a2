#include "cte/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <fftw3.h>

#include "cte/binary_io.hpp"
#include "cte/error.hpp"

namespace cte::features {

std::size_t FrontendConfig::window_samples() const {
  return static_cast<std::size_t>(std::lround(frame_length * sample_rate));
}

std::size_t FrontendConfig::hop_samples() const {
  return static_cast<std::size_t>(std::lround(frame_shift * sample_rate));
}

std::size_t FrontendConfig::fft_size() const {
  std::size_t n = 1;
  while (n < window_samples()) n <<= 1;
  return n;
}

void FrontendConfig::validate() const {
  if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
  if (window_samples() < 2 || hop_samples() < 1) throw ConfigError("frame length/shift too small for the sample rate");
  if (num_mel_bins < 2) throw ConfigError("need at least two mel bins");
  if (!(log_floor > 0.0)) throw ConfigError("log floor must be positive");
}

double FeatureSequence::duration() const {
  if (num_frames == 0) return 0.0;
  return static_cast<double>(num_frames - 1) * frame_shift + frame_length;
}

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop) {
  if (num_samples < window) return 0;
  return (num_samples - window) / hop + 1;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct LogMelFrontend::Plan {
  fftw_plan plan = nullptr;
};

LogMelFrontend::LogMelFrontend(const FrontendConfig& config) : config_(config) {
  config_.validate();
  const std::size_t win = config_.window_samples();
  const std::size_t nfft = config_.fft_size();
  const std::size_t nbins = nfft / 2 + 1;
  const std::size_t nmel = config_.num_mel_bins;

  window_.resize(win);
  for (std::size_t n = 0; n < win; ++n) {
    window_[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(win));
  }

  const double nyquist = config_.sample_rate / 2.0;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(nmel + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(nmel + 1));
  }
  filters_.assign(nmel * nbins, 0.0);
  centres_.resize(nmel);
  for (std::size_t m = 0; m < nmel; ++m) {
    const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
    centres_[m] = centre;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * config_.sample_rate / static_cast<double>(nfft);
      double w = 0.0;
      if (f > left && f <= centre) {
        w = (f - left) / (centre - left);
      } else if (f > centre && f < right) {
        w = (right - f) / (right - centre);
      }
      filters_[m * nbins + k] = w;
    }
  }

  plan_ = new Plan;
  double* in = fftw_alloc_real(nfft);
  fftw_complex* out = fftw_alloc_complex(nbins);
  plan_->plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), in, out, FFTW_ESTIMATE);
  fftw_free(in);
  fftw_free(out);
}

LogMelFrontend::~LogMelFrontend() {
  if (plan_) {
    fftw_destroy_plan(plan_->plan);
    delete plan_;
  }
}

FeatureSequence LogMelFrontend::compute(const Waveform& wave) const {
  if (wave.sample_rate != config_.sample_rate) {
    throw ConfigError("waveform sample rate " + std::to_string(wave.sample_rate) +
                      " differs from the frontend's " + std::to_string(config_.sample_rate));
  }
  const std::size_t win = config_.window_samples();
  const std::size_t hop = config_.hop_samples();
  const std::size_t frames = frame_count(wave.samples.size(), win, hop);
  if (frames == 0) {
    throw InputError("waveform of " + std::to_string(wave.samples.size()) +
                     " samples is shorter than one frame (" + std::to_string(win) + ")");
  }
  const std::size_t nfft = config_.fft_size();
  const std::size_t nbins = nfft / 2 + 1;
  const std::size_t nmel = config_.num_mel_bins;

  FeatureSequence out(frames, nmel, config_.frame_shift, config_.frame_length);
  double* in = fftw_alloc_real(nfft);
  fftw_complex* spec = fftw_alloc_complex(nbins);
  std::vector<double> power(nbins);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = wave.samples.data() + t * hop;
    for (std::size_t n = 0; n < win; ++n) in[n] = src[n] * window_[n];
    std::fill(in + win, in + nfft, 0.0);
    fftw_execute_dft_r2c(plan_->plan, in, spec);
    for (std::size_t k = 0; k < nbins; ++k) power[k] = spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1];
    auto row = out.frame(t);
    for (std::size_t m = 0; m < nmel; ++m) {
      const double* w = filters_.data() + m * nbins;
      double e = 0.0;
      for (std::size_t k = 0; k < nbins; ++k) e += w[k] * power[k];
      row[m] = std::log(std::max(e, config_.log_floor));
    }
  }
  fftw_free(in);
  fftw_free(spec);
  return out;
}

FeatureSequence compute_log_mel(const Waveform& wave, const FrontendConfig& config) {
  return LogMelFrontend(config).compute(wave);
}

FeatureSequence slice_segment(const FeatureSequence& features, double start, double end) {
  if (!(start >= 0.0) || !(end > start)) {
    throw InputError("invalid segment bounds [" + std::to_string(start) + ", " + std::to_string(end) + ")");
  }
  if (end > features.duration() + 1e-9) {
    throw InputError("segment end " + std::to_string(end) + " s lies beyond the utterance (" +
                     std::to_string(features.duration()) + " s)");
  }
  const double shift = features.frame_shift;
  // The 1e-9 slack keeps boundaries such as 0.10 / 0.010 on the intended index.
  const auto first = static_cast<std::size_t>(std::max(0.0, std::ceil(start / shift - 1e-9)));
  const auto last = std::min(features.num_frames,
                             static_cast<std::size_t>(std::max(0.0, std::ceil(end / shift - 1e-9))));
  if (first >= last) throw InputError("segment selects no frames");
  FeatureSequence out(last - first, features.num_bins, features.frame_shift, features.frame_length);
  std::copy(features.values.begin() + static_cast<std::ptrdiff_t>(first * features.num_bins),
            features.values.begin() + static_cast<std::ptrdiff_t>(last * features.num_bins), out.values.begin());
  return out;
}

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  auto in = open_input(path);
  char tag[4];
  io::read_exact(in, tag, 4, "RIFF tag");
  if (std::string(tag, 4) != "RIFF") throw ParseError(path.string() + ": not a RIFF file");
  io::read_u32(in, "RIFF size");
  io::read_exact(in, tag, 4, "WAVE tag");
  if (std::string(tag, 4) != "WAVE") throw ParseError(path.string() + ": not a WAVE file");

  Waveform wave;
  bool have_format = false;
  for (;;) {
    char id[4];
    in.read(id, 4);
    if (in.gcount() != 4) break;
    const std::uint32_t size = io::read_u32(in, "chunk size");
    const std::string chunk(id, 4);
    if (chunk == "fmt ") {
      const std::uint16_t format = io::read_u16(in);
      const std::uint16_t channels = io::read_u16(in);
      const std::uint32_t rate = io::read_u32(in);
      io::read_u32(in);  // byte rate
      io::read_u16(in);  // block align
      const std::uint16_t bits = io::read_u16(in);
      if (format != 1 || channels != 1 || bits != 16) {
        throw ParseError(path.string() + ": only 16-bit PCM mono is supported");
      }
      wave.sample_rate = static_cast<int>(rate);
      have_format = true;
      in.ignore(size - 16 + (size & 1));
    } else if (chunk == "data") {
      if (!have_format) throw ParseError(path.string() + ": data chunk before fmt chunk");
      const std::size_t n = size / 2;
      std::vector<char> raw(size);
      io::read_exact(in, raw.data(), size, "sample data");
      wave.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto lo = static_cast<unsigned char>(raw[2 * i]);
        const auto hi = static_cast<unsigned char>(raw[2 * i + 1]);
        const auto s = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
        wave.samples[i] = static_cast<double>(s) / 32768.0;
      }
      return wave;
    } else {
      in.ignore(size + (size & 1));
    }
  }
  throw ParseError(path.string() + ": no data chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  auto out = open_output(path);
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out.write("RIFF", 4);
  io::write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  io::write_u32(out, 16);
  io::write_u16(out, 1);
  io::write_u16(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  io::write_u32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
  io::write_u16(out, 2);
  io::write_u16(out, 16);
  out.write("data", 4);
  io::write_u32(out, data_bytes);
  for (double x : wave.samples) {
    const long v = std::clamp(std::lround(x * 32768.0), -32768L, 32767L);
    io::write_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_feature_file(const std::filesystem::path& path, const FeatureSequence& features) {
  auto out = open_output(path);
  out.write("CTEF", 4);
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(features.num_frames));
  io::write_u32(out, static_cast<std::uint32_t>(features.num_bins));
  for (double v : features.values) io::write_f32(out, static_cast<float>(v));
  if (!out) throw IoError("failed writing " + path.string());
}

FeatureSequence read_feature_file(const std::filesystem::path& path) {
  auto in = open_input(path);
  char magic[4];
  io::read_exact(in, magic, 4, "magic");
  if (std::string(magic, 4) != "CTEF") throw ParseError(path.string() + ": bad feature-file magic");
  const std::uint32_t version = io::read_u32(in, "version");
  if (version != 1) throw ParseError(path.string() + ": unsupported feature-file version " + std::to_string(version));
  const std::uint32_t frames = io::read_u32(in, "T");
  const std::uint32_t bins = io::read_u32(in, "F");
  if (frames == 0 || bins == 0) throw ParseError(path.string() + ": empty feature matrix");
  FeatureSequence f(frames, bins);
  for (double& v : f.values) v = io::read_f32(in, "feature payload");
  return f;
}

}  // namespace cte::features
