#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "codats/rng.hpp"
#include "codats/tensor.hpp"

namespace codats {

// One domain's fixed-length windows: X is N x H x K row-major, labels in
// [0, L). Immutable after construction apart from in-place normalization.
struct DomainDataset {
  std::size_t num_windows = 0;  // N
  std::size_t length = 0;       // H
  std::size_t channels = 0;     // K
  std::size_t num_labels = 0;   // L
  std::vector<float> x;         // N*H*K
  std::vector<int> y;           // N
  std::uint32_t domain_id = 0;

  static DomainDataset empty_like(std::size_t H, std::size_t K, std::size_t L,
                                  std::uint32_t domain_id) {
    DomainDataset ds;
    ds.length = H;
    ds.channels = K;
    ds.num_labels = L;
    ds.domain_id = domain_id;
    return ds;
  }

  const float* window(std::size_t i) const { return x.data() + i * length * channels; }

  void append_window(const float* values, int label) {
    x.insert(x.end(), values, values + length * channels);
    y.push_back(label);
    ++num_windows;
  }

  void validate() const {
    if (x.size() != num_windows * length * channels) {
      throw std::invalid_argument("dataset: value count does not match N*H*K");
    }
    if (y.size() != num_windows) throw std::invalid_argument("dataset: label count != N");
    for (int lab : y) {
      if (lab < 0 || static_cast<std::size_t>(lab) >= num_labels) {
        throw std::invalid_argument("dataset: label " + std::to_string(lab) + " out of range");
      }
    }
  }
};

// Discrete probability distribution over the L labels.
struct LabelDistribution {
  std::vector<double> p;

  void validate() const {
    double sum = 0.0;
    for (double v : p) {
      if (v < 0.0) throw std::invalid_argument("label distribution: negative entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("label distribution: entries sum to " + std::to_string(sum));
    }
  }
};

// ---- windowing / padding ----------------------------------------------------

// Segments a step stream into non-overlapping fixed-width windows (offsets at
// multiples of step, trailing remainder dropped). Window label is the
// majority step label, ties broken toward the smaller label index.
struct Windowed {
  std::vector<std::vector<float>> windows;  // each width*K
  std::vector<int> labels;
};

inline Windowed window_stream(const std::vector<float>& series, std::size_t channels,
                              const std::vector<int>& step_labels, std::size_t width = 128,
                              std::size_t step = 0) {
  if (width < 1) throw std::invalid_argument("window_stream: width must be >= 1");
  if (step == 0) step = width;
  if (channels < 1) throw std::invalid_argument("window_stream: channels must be >= 1");
  if (series.size() % channels != 0) {
    throw std::invalid_argument("window_stream: series length not divisible by channel count");
  }
  const std::size_t t_len = series.size() / channels;
  if (step_labels.size() != t_len) {
    throw std::invalid_argument("window_stream: need one label per step");
  }
  Windowed out;
  for (std::size_t start = 0; start + width <= t_len; start += step) {
    std::map<int, std::size_t> counts;
    for (std::size_t t = start; t < start + width; ++t) ++counts[step_labels[t]];
    int best_label = counts.begin()->first;
    std::size_t best_count = counts.begin()->second;
    for (const auto& [lab, cnt] : counts) {
      if (cnt > best_count) {
        best_label = lab;
        best_count = cnt;
      }
    }
    out.windows.emplace_back(series.begin() + start * channels,
                             series.begin() + (start + width) * channels);
    out.labels.push_back(best_label);
  }
  return out;
}

// Right zero-padding on the time axis: h x K -> target_len x K.
inline std::vector<float> pad_right(const std::vector<float>& series, std::size_t channels,
                                    std::size_t target_len) {
  if (channels < 1) throw std::invalid_argument("pad_right: channels must be >= 1");
  if (series.size() % channels != 0) {
    throw std::invalid_argument("pad_right: series length not divisible by channel count");
  }
  const std::size_t h = series.size() / channels;
  if (h > target_len) {
    throw std::invalid_argument("pad_right: series length " + std::to_string(h) +
                                " exceeds target " + std::to_string(target_len));
  }
  std::vector<float> out = series;
  out.resize(target_len * channels, 0.0f);
  return out;
}

// ---- stratified splitting -----------------------------------------------------

// Per-label 80/20 style split: the train side takes round-to-nearest
// fraction*count per label (ties toward train); within-label assignment is a
// seeded shuffle. Apply twice for the train/validation/test hierarchy.
inline std::pair<DomainDataset, DomainDataset> stratified_split(const DomainDataset& ds,
                                                                double fraction,
                                                                std::uint64_t seed) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("stratified_split: fraction must be in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_label(ds.num_labels);
  for (std::size_t i = 0; i < ds.num_windows; ++i) by_label[ds.y[i]].push_back(i);
  for (std::size_t lab = 0; lab < ds.num_labels; ++lab) {
    if (by_label[lab].size() < 2) {
      throw std::invalid_argument("stratified_split: label " + std::to_string(lab) +
                                  " has fewer than 2 examples");
    }
  }
  Rng rng(seed);
  DomainDataset train = DomainDataset::empty_like(ds.length, ds.channels, ds.num_labels, ds.domain_id);
  DomainDataset holdout = DomainDataset::empty_like(ds.length, ds.channels, ds.num_labels, ds.domain_id);
  for (std::size_t lab = 0; lab < ds.num_labels; ++lab) {
    auto& idx = by_label[lab];
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t take =
        std::min(idx.size(), static_cast<std::size_t>(std::floor(
                                 fraction * static_cast<double>(idx.size()) + 0.5)));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      (j < take ? train : holdout).append_window(ds.window(idx[j]), lab);
    }
  }
  return {std::move(train), std::move(holdout)};
}

// ---- normalization --------------------------------------------------------------

// Per-channel mean and standard deviation fitted on a training split.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std_dev;  // floored at 1e-8
};

inline NormStats fit_normalizer(const DomainDataset& train) {
  if (train.num_windows == 0) throw std::invalid_argument("normalizer: empty training split");
  const std::size_t K = train.channels;
  const std::size_t steps = train.num_windows * train.length;
  NormStats stats;
  stats.mean.assign(K, 0.0);
  stats.std_dev.assign(K, 0.0);
  for (std::size_t i = 0; i < steps; ++i) {
    for (std::size_t c = 0; c < K; ++c) stats.mean[c] += train.x[i * K + c];
  }
  for (std::size_t c = 0; c < K; ++c) stats.mean[c] /= static_cast<double>(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    for (std::size_t c = 0; c < K; ++c) {
      const double d = train.x[i * K + c] - stats.mean[c];
      stats.std_dev[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < K; ++c) {
    stats.std_dev[c] = std::max(1e-8, std::sqrt(stats.std_dev[c] / static_cast<double>(steps)));
  }
  return stats;
}

inline void apply_normalizer(const NormStats& stats, DomainDataset& ds) {
  if (stats.mean.size() != ds.channels) {
    throw std::invalid_argument("normalizer: channel count mismatch");
  }
  const std::size_t K = ds.channels;
  for (std::size_t i = 0; i < ds.num_windows * ds.length; ++i) {
    for (std::size_t c = 0; c < K; ++c) {
      ds.x[i * K + c] = static_cast<float>((ds.x[i * K + c] - stats.mean[c]) / stats.std_dev[c]);
    }
  }
}

// Fits on the training split only and applies the same statistics to the
// training split and every other split of the domain.
inline NormStats fit_apply_normalizer(DomainDataset& train, std::vector<DomainDataset*> others) {
  NormStats stats = fit_normalizer(train);
  apply_normalizer(stats, train);
  for (DomainDataset* ds : others) apply_normalizer(stats, *ds);
  return stats;
}

// ---- label proportions -------------------------------------------------------------

inline LabelDistribution estimate_label_proportions(const std::vector<int>& labels,
                                                    std::size_t num_labels) {
  if (labels.empty()) throw std::invalid_argument("label proportions: empty label list");
  LabelDistribution dist;
  dist.p.assign(num_labels, 0.0);
  for (int lab : labels) {
    if (lab < 0 || static_cast<std::size_t>(lab) >= num_labels) {
      throw std::invalid_argument("label proportions: label out of range");
    }
    dist.p[lab] += 1.0;
  }
  for (double& v : dist.p) v /= static_cast<double>(labels.size());
  return dist;
}

// ---- synthetic domain-shifted data ----------------------------------------------

// Sinusoid family: label c has base frequency freq[c]; a domain shifts every
// window by its amplitude, phase, and per-channel scaling, plus i.i.d.
// Gaussian noise. Desk-scale stand-in for multi-domain sensor corpora.
struct SynthSpec {
  std::size_t num_labels = 4;
  std::size_t channels = 3;
  std::size_t length = 64;
  std::size_t examples_per_label = 100;
  std::vector<double> base_freqs;  // per label, distinct
  double noise_std = 0.3;

  struct DomainShift {
    double amplitude = 1.0;
    double phase = 0.0;
    std::vector<double> channel_scale;  // empty = all ones
    std::vector<double> proportions;    // empty = uniform
  };
  std::map<std::uint32_t, DomainShift> domains;

  void validate() const {
    if (num_labels < 2) throw std::invalid_argument("synth: need at least 2 labels");
    if (channels < 1 || length < 1) throw std::invalid_argument("synth: bad extents");
    if (base_freqs.size() != num_labels) {
      throw std::invalid_argument("synth: need one base frequency per label");
    }
    for (std::size_t a = 0; a < base_freqs.size(); ++a) {
      for (std::size_t b = a + 1; b < base_freqs.size(); ++b) {
        if (base_freqs[a] == base_freqs[b]) {
          throw std::invalid_argument("synth: base frequencies must be distinct");
        }
      }
    }
    if (noise_std < 0.0) throw std::invalid_argument("synth: negative noise std");
    for (const auto& [id, shift] : domains) {
      if (!shift.channel_scale.empty() && shift.channel_scale.size() != channels) {
        throw std::invalid_argument("synth: channel scale length mismatch for domain " +
                                    std::to_string(id));
      }
      if (!shift.proportions.empty()) {
        if (shift.proportions.size() != num_labels) {
          throw std::invalid_argument("synth: proportions length mismatch for domain " +
                                      std::to_string(id));
        }
        LabelDistribution{shift.proportions}.validate();
      }
    }
  }
};

// Largest-remainder apportionment of `total` across `weights` (assumed to sum
// to 1); ties go to the smaller index.
inline std::vector<std::size_t> largest_remainder_counts(const std::vector<double>& weights,
                                                         std::size_t total) {
  const std::size_t n = weights.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> remainders(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = weights[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainders[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) counts[order[i % n]] += 1;
  return counts;
}

inline DomainDataset synth_generate(const SynthSpec& spec, std::uint32_t domain_id,
                                    std::uint64_t seed) {
  spec.validate();
  const auto it = spec.domains.find(domain_id);
  if (it == spec.domains.end()) {
    throw std::invalid_argument("synth: no shift configured for domain " +
                                std::to_string(domain_id));
  }
  const SynthSpec::DomainShift& shift = it->second;
  std::vector<double> scale = shift.channel_scale;
  if (scale.empty()) scale.assign(spec.channels, 1.0);
  std::vector<double> props = shift.proportions;
  if (props.empty()) props.assign(spec.num_labels, 1.0 / static_cast<double>(spec.num_labels));

  const std::size_t total = spec.examples_per_label * spec.num_labels;
  const std::vector<std::size_t> counts = largest_remainder_counts(props, total);

  DomainDataset ds = DomainDataset::empty_like(spec.length, spec.channels, spec.num_labels,
                                               domain_id);
  Rng rng(seed);
  std::vector<float> window(spec.length * spec.channels);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (std::size_t lab = 0; lab < spec.num_labels; ++lab) {
    for (std::size_t rep = 0; rep < counts[lab]; ++rep) {
      for (std::size_t t = 0; t < spec.length; ++t) {
        const double angle = two_pi * spec.base_freqs[lab] * static_cast<double>(t) /
                                 static_cast<double>(spec.length) +
                             shift.phase;
        const double base = shift.amplitude * std::sin(angle);
        for (std::size_t c = 0; c < spec.channels; ++c) {
          const double noise = spec.noise_std > 0.0 ? spec.noise_std * rng.normal() : 0.0;
          window[t * spec.channels + c] = static_cast<float>(base * scale[c] + noise);
        }
      }
      ds.append_window(window.data(), static_cast<int>(lab));
    }
  }
  return ds;
}

// ---- batch composition -----------------------------------------------------------

enum class BatchPolicy { SingleSource, MultiSourceEven, DawsHalfTarget };

inline const char* to_string(BatchPolicy p) {
  switch (p) {
    case BatchPolicy::SingleSource: return "single-source";
    case BatchPolicy::MultiSourceEven: return "multi-source-even";
    case BatchPolicy::DawsHalfTarget: return "daws-half-target";
  }
  return "?";
}

// Per-domain example counts for one batch; index 0 is the target, 1..n the
// sources. Remainders go one each to the lowest domain ids (for the DA-WS
// policy, the lowest source ids).
inline std::vector<std::size_t> plan_batch(BatchPolicy policy, std::size_t batch, std::size_t n) {
  if (n < 1) throw std::invalid_argument("plan_batch: need at least one source");
  if (batch < n + 1) throw std::invalid_argument("plan_batch: batch smaller than domain count");
  std::vector<std::size_t> counts(n + 1, 0);
  switch (policy) {
    case BatchPolicy::SingleSource:
      if (n != 1) throw std::invalid_argument("plan_batch: single-source policy needs n == 1");
      [[fallthrough]];
    case BatchPolicy::MultiSourceEven: {
      const std::size_t q = batch / (n + 1), r = batch % (n + 1);
      for (std::size_t d = 0; d <= n; ++d) counts[d] = q + (d < r ? 1 : 0);
      break;
    }
    case BatchPolicy::DawsHalfTarget: {
      counts[0] = batch / 2;
      const std::size_t rest = batch - counts[0];
      const std::size_t q = rest / n, r = rest % n;
      for (std::size_t i = 0; i < n; ++i) counts[1 + i] = q + (i < r ? 1 : 0);
      break;
    }
  }
  return counts;
}

// Assembled training batch. Rows are grouped by domain label in id order
// (target block first); task labels are attached only where known (-1 marks
// an unlabeled row).
struct MixedBatch {
  Tensor<float> x;                  // B x H x K
  std::vector<int> task_labels;     // B, -1 = unlabeled
  std::vector<int> domain_labels;   // B, in {0..n}
  std::vector<std::size_t> counts;  // n+1 entries

  std::size_t batch_size() const { return domain_labels.size(); }
  std::size_t target_count() const { return counts.empty() ? 0 : counts[0]; }
};

// Draws a batch per the given policy: examples uniform with replacement
// within each domain, target rows unlabeled, source rows labeled.
inline MixedBatch compose_batch(const std::vector<const DomainDataset*>& source_trains,
                                const DomainDataset& target_train, std::size_t batch,
                                BatchPolicy policy, Rng& rng) {
  const std::size_t n = source_trains.size();
  const std::vector<std::size_t> counts = plan_batch(policy, batch, n);
  if (target_train.num_windows == 0) throw std::invalid_argument("compose_batch: empty target split");
  for (const DomainDataset* s : source_trains) {
    if (s->num_windows == 0) throw std::invalid_argument("compose_batch: empty source split");
    if (s->length != target_train.length || s->channels != target_train.channels) {
      throw std::invalid_argument("compose_batch: domain shape mismatch");
    }
  }
  MixedBatch mb;
  mb.counts = counts;
  mb.x = Tensor<float>({batch, target_train.length, target_train.channels});
  mb.task_labels.assign(batch, -1);
  mb.domain_labels.assign(batch, 0);
  const std::size_t row = target_train.length * target_train.channels;
  std::size_t at = 0;
  for (std::size_t d = 0; d <= n; ++d) {
    const DomainDataset& ds = d == 0 ? target_train : *source_trains[d - 1];
    for (std::size_t j = 0; j < counts[d]; ++j, ++at) {
      const std::size_t pick = rng.uniform_index(ds.num_windows);
      std::copy(ds.window(pick), ds.window(pick) + row, mb.x.data() + at * row);
      mb.domain_labels[at] = static_cast<int>(d);
      if (d > 0) mb.task_labels[at] = ds.y[pick];
    }
  }
  return mb;
}

// Labeled-only batch over designated domains (the no-adaptation and
// train-on-target baselines): even split with the same remainder rule, all
// rows labeled.
inline MixedBatch compose_labeled_batch(const std::vector<const DomainDataset*>& domains,
                                        const std::vector<int>& domain_ids, std::size_t batch,
                                        Rng& rng) {
  if (domains.empty()) throw std::invalid_argument("compose_labeled_batch: no domains");
  if (domains.size() != domain_ids.size()) {
    throw std::invalid_argument("compose_labeled_batch: id count mismatch");
  }
  const std::size_t m = domains.size();
  const std::size_t q = batch / m, r = batch % m;
  MixedBatch mb;
  mb.counts.assign(m, 0);
  mb.x = Tensor<float>({batch, domains[0]->length, domains[0]->channels});
  mb.task_labels.assign(batch, -1);
  mb.domain_labels.assign(batch, 0);
  const std::size_t row = domains[0]->length * domains[0]->channels;
  std::size_t at = 0;
  for (std::size_t d = 0; d < m; ++d) {
    if (domains[d]->num_windows == 0) {
      throw std::invalid_argument("compose_labeled_batch: empty domain split");
    }
    mb.counts[d] = q + (d < r ? 1 : 0);
    for (std::size_t j = 0; j < mb.counts[d]; ++j, ++at) {
      const std::size_t pick = rng.uniform_index(domains[d]->num_windows);
      std::copy(domains[d]->window(pick), domains[d]->window(pick) + row, mb.x.data() + at * row);
      mb.domain_labels[at] = domain_ids[d];
      mb.task_labels[at] = domains[d]->y[pick];
    }
  }
  return mb;
}

}  // namespace codats
