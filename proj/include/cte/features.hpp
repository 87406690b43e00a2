#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace cte::features {

struct Waveform {
  std::vector<double> samples;  ///< in [-1, 1]
  int sample_rate = 16000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct FrontendConfig {
  int sample_rate = 16000;
  double frame_length = 0.025;  ///< seconds
  double frame_shift = 0.010;   ///< seconds
  std::size_t num_mel_bins = 80;
  double log_floor = 1e-10;

  std::size_t window_samples() const;
  std::size_t hop_samples() const;
  /// Next power of two >= window_samples().
  std::size_t fft_size() const;
  void validate() const;
};

/// T x F log-Mel frames, row-major.
struct FeatureSequence {
  std::size_t num_frames = 0;
  std::size_t num_bins = 0;
  std::vector<double> values;
  double frame_shift = 0.010;
  double frame_length = 0.025;

  FeatureSequence() = default;
  FeatureSequence(std::size_t frames, std::size_t bins, double shift = 0.010, double length = 0.025)
      : num_frames(frames), num_bins(bins), values(frames * bins, 0.0), frame_shift(shift), frame_length(length) {}

  std::span<const double> frame(std::size_t t) const { return {values.data() + t * num_bins, num_bins}; }
  std::span<double> frame(std::size_t t) { return {values.data() + t * num_bins, num_bins}; }
  double at(std::size_t t, std::size_t f) const { return values[t * num_bins + f]; }
  /// Span covered by the frames: (T - 1) * shift + length.
  double duration() const;
};

/// Number of frames for N samples: floor((N - win) / hop) + 1, or 0 if N < win.
std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop);

/// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Periodic Hann window -> |FFT|^2 -> triangular mel filters from 0 Hz to
/// Nyquist -> log(max(energy, floor)).
class LogMelFrontend {
 public:
  explicit LogMelFrontend(const FrontendConfig& config);
  ~LogMelFrontend();
  LogMelFrontend(const LogMelFrontend&) = delete;
  LogMelFrontend& operator=(const LogMelFrontend&) = delete;

  FeatureSequence compute(const Waveform& wave) const;

  const FrontendConfig& config() const noexcept { return config_; }
  /// Centre frequency in Hz of each mel filter.
  const std::vector<double>& centre_frequencies() const noexcept { return centres_; }
  /// Filter weights, num_mel_bins x (fft_size / 2 + 1).
  const std::vector<double>& filterbank() const noexcept { return filters_; }

 private:
  struct Plan;

  FrontendConfig config_;
  std::vector<double> window_;
  std::vector<double> filters_;
  std::vector<double> centres_;
  Plan* plan_ = nullptr;
};

FeatureSequence compute_log_mel(const Waveform& wave, const FrontendConfig& config = {});

/// Frames i with start <= i * shift < end.
FeatureSequence slice_segment(const FeatureSequence& features, double start, double end);

Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wave);

/// "CTEF" feature file: magic, version u32, T u32, F u32, then T*F float32,
/// all little-endian.
void write_feature_file(const std::filesystem::path& path, const FeatureSequence& features);
FeatureSequence read_feature_file(const std::filesystem::path& path);

}  // namespace cte::features
