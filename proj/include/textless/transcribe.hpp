#pragma once

// Oracle transcription of toy spectrograms by template correlation.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/frontend.hpp"
#include "textless/toy_corpus.hpp"

namespace textless {

struct TranscriberConfig {
  double threshold = 0.6;     // minimum smoothed correlation for a token frame
  std::size_t window = 1;     // frames averaged around each position
  std::size_t min_run = 3;    // shorter token runs are discarded
};

inline void to_json(nlohmann::json& j, const TranscriberConfig& c) {
  j = {{"threshold", c.threshold}, {"window", c.window}, {"min_run", c.min_run}};
}
inline void from_json(const nlohmann::json& j, TranscriberConfig& c) {
  c.threshold = j.value("threshold", c.threshold);
  c.window = j.value("window", c.window);
  c.min_run = j.value("min_run", c.min_run);
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Frame labels (-1 = no token) before run cleanup.
inline std::vector<int> label_frames(const Spectrogram& spec, const std::vector<std::vector<double>>& templates,
                                     const TranscriberConfig& cfg) {
  const auto t_count = spec.num_frames();
  const auto v_count = templates.size();
  std::vector<double> corr(t_count * v_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto row = spec.frames.row(t);
    for (std::size_t v = 0; v < v_count; ++v) corr[t * v_count + v] = pearson(row, templates[v]);
  }
  std::vector<int> labels(t_count, -1);
  const auto half = cfg.window / 2;
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto lo = t >= half ? t - half : 0;
    const auto hi = std::min(t_count, t + half + 1);
    double best = -2.0;
    int arg = -1;
    for (std::size_t v = 0; v < v_count; ++v) {
      double s = 0;
      for (std::size_t u = lo; u < hi; ++u) s += corr[u * v_count + v];
      s /= static_cast<double>(hi - lo);
      if (s > best) {
        best = s;
        arg = static_cast<int>(v);
      }
    }
    if (best >= cfg.threshold) labels[t] = arg;
  }
  return labels;
}

/// Segments the spectrogram (raw log-mel) into template matches. Token runs
/// shorter than min_run are dropped, neighbouring runs with the same label
/// are merged, and each remaining token run emits its label. Any blank frame
/// separates tokens.
inline std::vector<int> transcribe_toy(const Spectrogram& spec, const std::vector<std::vector<double>>& templates,
                                       const TranscriberConfig& cfg = {}) {
  if (spec.num_frames() == 0 || templates.empty()) return {};
  const auto labels = label_frames(spec, templates, cfg);
  struct Run {
    int label;
    std::size_t length;
  };
  std::vector<Run> runs;
  for (int l : labels) {
    if (!runs.empty() && runs.back().label == l) {
      ++runs.back().length;
    } else {
      runs.push_back({l, 1});
    }
  }
  std::vector<Run> kept;
  for (const auto& r : runs) {
    if (r.label >= 0 && r.length < cfg.min_run) continue;
    if (!kept.empty() && kept.back().label == r.label) {
      kept.back().length += r.length;
    } else {
      kept.push_back(r);
    }
  }
  std::vector<int> out;
  for (const auto& r : kept) {
    if (r.label >= 0) out.push_back(r.label);
  }
  return out;
}

}  // namespace textless
