#pragma once

// Log-mel feature extraction, corpus-level channel normalization and
// non-overlapping frame stacking.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/tensor.hpp"

namespace textless {

struct FrontendConfig {
  double sample_rate = 16000.0;
  std::size_t window = 400;  // 25 ms
  std::size_t hop = 160;     // 10 ms
  std::size_t fft_size = 512;
  std::size_t num_mels = 80;
  double low_hz = 0.0;
  double high_hz = 8000.0;
  double log_floor = 1e-6;

  double frame_rate_hz() const { return sample_rate / static_cast<double>(hop); }
  bool operator==(const FrontendConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const FrontendConfig& c) {
  j = {{"sample_rate", c.sample_rate}, {"window", c.window},   {"hop", c.hop},         {"fft_size", c.fft_size},
       {"num_mels", c.num_mels},       {"low_hz", c.low_hz},   {"high_hz", c.high_hz}, {"log_floor", c.log_floor}};
}
inline void from_json(const nlohmann::json& j, FrontendConfig& c) {
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.window = j.value("window", c.window);
  c.hop = j.value("hop", c.hop);
  c.fft_size = j.value("fft_size", c.fft_size);
  c.num_mels = j.value("num_mels", c.num_mels);
  c.low_hz = j.value("low_hz", c.low_hz);
  c.high_hz = j.value("high_hz", c.high_hz);
  c.log_floor = j.value("log_floor", c.log_floor);
}

/// T x d log-mel frames.
struct Spectrogram {
  Tensor frames;
  double frame_rate_hz = 100.0;

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
};

/// floor(T/s) rows of width d*s.
struct StackedSequence {
  Tensor frames;
  std::size_t stride = 1;
};

inline double hz_to_mel(double hz) { return 1127.0 * std::log1p(hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * std::expm1(mel / 1127.0); }

/// Triangular filters evenly spaced on the HTK mel scale.
class MelFilterbank {
 public:
  explicit MelFilterbank(const FrontendConfig& cfg) : bins_(cfg.fft_size / 2 + 1), weights_(cfg.num_mels) {
    const double lo = hz_to_mel(cfg.low_hz);
    const double hi = hz_to_mel(cfg.high_hz);
    const double step = (hi - lo) / static_cast<double>(cfg.num_mels + 1);
    const double bin_hz = cfg.sample_rate / static_cast<double>(cfg.fft_size);
    centers_.resize(cfg.num_mels);
    for (std::size_t m = 0; m < cfg.num_mels; ++m) {
      const double left = lo + step * static_cast<double>(m);
      const double center = left + step;
      const double right = center + step;
      centers_[m] = mel_to_hz(center);
      auto& w = weights_[m];
      w.assign(bins_, 0.0);
      for (std::size_t b = 0; b < bins_; ++b) {
        const double mel = hz_to_mel(bin_hz * static_cast<double>(b));
        if (mel > left && mel < right) w[b] = mel <= center ? (mel - left) / step : (right - mel) / step;
      }
      auto nz = [](double v) { return v != 0.0; };
      const auto first = std::find_if(w.begin(), w.end(), nz);
      begin_.push_back(static_cast<std::size_t>(first - w.begin()));
      end_.push_back(first == w.end() ? begin_.back()
                                      : static_cast<std::size_t>(std::find_if(w.rbegin(), w.rend(), nz).base() - w.begin()));
    }
  }

  std::span<const double> center_frequencies() const { return centers_; }

  void apply(std::span<const double> power, std::span<double> out) const {
    for (std::size_t m = 0; m < weights_.size(); ++m) {
      double e = 0;
      for (std::size_t b = begin_[m]; b < end_[m]; ++b) e += weights_[m][b] * power[b];
      out[m] = e;
    }
  }

 private:
  std::size_t bins_;
  std::vector<std::vector<double>> weights_;
  std::vector<std::size_t> begin_, end_;  // nonzero support per filter
  std::vector<double> centers_;
};

/// Short-time power spectra via FFTW with a Hann window.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(FrontendConfig cfg = {})
      : cfg_(cfg), bank_(cfg), window_(cfg.window), in_(cfg.fft_size), out_(cfg.fft_size / 2 + 1) {
    if (cfg_.window > cfg_.fft_size || cfg_.hop == 0) throw std::invalid_argument("frontend: window must fit fft_size, hop > 0");
    for (std::size_t i = 0; i < cfg_.window; ++i) {
      window_[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(cfg_.window - 1));
    }
    plan_.reset(fftw_plan_dft_r2c_1d(static_cast<int>(cfg_.fft_size), in_.data(),
                                     reinterpret_cast<fftw_complex*>(out_.data()), FFTW_ESTIMATE));
  }

  const FrontendConfig& config() const { return cfg_; }
  const MelFilterbank& filterbank() const { return bank_; }

  std::size_t num_frames(std::size_t samples) const {
    return samples < cfg_.window ? 0 : (samples - cfg_.window) / cfg_.hop + 1;
  }

  Spectrogram operator()(std::span<const double> waveform) {
    if (waveform.size() < cfg_.window) {
      throw std::invalid_argument("log_mel_spectrogram: " + std::to_string(waveform.size()) +
                                  " samples is shorter than one window (" + std::to_string(cfg_.window) + ")");
    }
    const auto frames = num_frames(waveform.size());
    Spectrogram spec{Tensor::matrix(frames, cfg_.num_mels), cfg_.frame_rate_hz()};
    std::vector<double> power(out_.size());
    for (std::size_t t = 0; t < frames; ++t) {
      std::fill(in_.begin(), in_.end(), 0.0);
      for (std::size_t i = 0; i < cfg_.window; ++i) in_[i] = waveform[t * cfg_.hop + i] * window_[i];
      fftw_execute(plan_.get());
      for (std::size_t b = 0; b < out_.size(); ++b) power[b] = std::norm(out_[b]);
      auto row = spec.frames.row(t);
      bank_.apply(power, row);
      for (auto& v : row) v = std::log(std::max(v, cfg_.log_floor));
    }
    return spec;
  }

 private:
  struct PlanDeleter {
    void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
  };
  FrontendConfig cfg_;
  MelFilterbank bank_;
  std::vector<double> window_;
  std::vector<double> in_;
  std::vector<std::complex<double>> out_;
  std::unique_ptr<fftw_plan_s, PlanDeleter> plan_;
};

inline Spectrogram log_mel_spectrogram(std::span<const double> waveform, const FrontendConfig& cfg = {}) {
  LogMelExtractor extract(cfg);
  return extract(waveform);
}

// ---------------------------------------------------------------------------
// Channel statistics

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static constexpr double kStdFloor = 1e-3;

  std::size_t dim() const { return mean.size(); }
};

inline void to_json(nlohmann::json& j, const ChannelStats& s) { j = {{"mean", s.mean}, {"stddev", s.stddev}}; }
inline void from_json(const nlohmann::json& j, ChannelStats& s) {
  j.at("mean").get_to(s.mean);
  j.at("stddev").get_to(s.stddev);
  if (s.mean.size() != s.stddev.size()) throw std::invalid_argument("channel stats: mean/stddev length mismatch");
}

/// Pooled per-channel mean and standard deviation over every frame of the
/// corpus. Standard deviations are floored at ChannelStats::kStdFloor.
inline ChannelStats compute_channel_stats(std::span<const Spectrogram> corpus) {
  if (corpus.empty()) throw std::invalid_argument("compute_channel_stats: empty corpus");
  const auto d = corpus.front().dim();
  std::vector<double> sum(d, 0.0);
  std::size_t count = 0;
  for (const auto& s : corpus) {
    if (s.dim() != d) throw ShapeError("compute_channel_stats: mixed channel counts");
    for (std::size_t t = 0; t < s.num_frames(); ++t) {
      for (std::size_t c = 0; c < d; ++c) sum[c] += s.frames(t, c);
    }
    count += s.num_frames();
  }
  if (count == 0) throw std::invalid_argument("compute_channel_stats: corpus has no frames");
  ChannelStats stats{std::vector<double>(d), std::vector<double>(d)};
  for (std::size_t c = 0; c < d; ++c) stats.mean[c] = sum[c] / static_cast<double>(count);
  std::vector<double> sq(d, 0.0);
  for (const auto& s : corpus) {
    for (std::size_t t = 0; t < s.num_frames(); ++t) {
      for (std::size_t c = 0; c < d; ++c) {
        const double dev = s.frames(t, c) - stats.mean[c];
        sq[c] += dev * dev;
      }
    }
  }
  for (std::size_t c = 0; c < d; ++c) {
    stats.stddev[c] = std::max(std::sqrt(sq[c] / static_cast<double>(count)), ChannelStats::kStdFloor);
  }
  return stats;
}

inline Spectrogram channel_normalize(const Spectrogram& spec, const ChannelStats& stats) {
  if (stats.dim() != spec.dim()) {
    throw ShapeError("channel_normalize: stats for " + std::to_string(stats.dim()) + " channels, spectrogram has " +
                     std::to_string(spec.dim()));
  }
  Spectrogram out = spec;
  const auto d = spec.dim();
  for (std::size_t t = 0; t < spec.num_frames(); ++t) {
    for (std::size_t c = 0; c < d; ++c) out.frames(t, c) = (spec.frames(t, c) - stats.mean[c]) / stats.stddev[c];
  }
  return out;
}

inline Spectrogram channel_denormalize(const Spectrogram& spec, const ChannelStats& stats) {
  if (stats.dim() != spec.dim()) throw ShapeError("channel_denormalize: dimension mismatch");
  Spectrogram out = spec;
  const auto d = spec.dim();
  for (std::size_t t = 0; t < spec.num_frames(); ++t) {
    for (std::size_t c = 0; c < d; ++c) out.frames(t, c) = spec.frames(t, c) * stats.stddev[c] + stats.mean[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame stacking

inline bool is_supported_stride(std::size_t s) { return s == 1 || s == 2 || s == 4 || s == 8 || s == 16; }

/// Concatenates s consecutive frames without overlap; the trailing T mod s
/// frames are dropped.
inline StackedSequence stack_frames(const Spectrogram& spec, std::size_t s) {
  if (!is_supported_stride(s)) throw std::invalid_argument("stack_frames: unsupported stride " + std::to_string(s));
  const auto t = spec.num_frames();
  if (t < s) {
    throw std::invalid_argument("stack_frames: " + std::to_string(t) + " frames is fewer than stride " + std::to_string(s));
  }
  const auto rows = t / s;
  const auto d = spec.dim();
  std::vector<double> v(spec.frames.values().begin(),
                        spec.frames.values().begin() + static_cast<std::ptrdiff_t>(rows * s * d));
  return StackedSequence{Tensor::matrix(rows, d * s, std::move(v)), s};
}

inline Spectrogram unstack_frames(const StackedSequence& stacked, double frame_rate_hz = 100.0) {
  const auto s = stacked.stride;
  const auto d = stacked.frames.cols() / s;
  return Spectrogram{stacked.frames.reshaped({stacked.frames.rows() * s, d}), frame_rate_hz};
}

}  // namespace textless
