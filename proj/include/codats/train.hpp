#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "codats/checkpoint.hpp"
#include "codats/data.hpp"
#include "codats/grad_check.hpp"
#include "codats/net.hpp"
#include "codats/optim.hpp"
#include "codats/ops.hpp"

namespace codats {

enum class TrainMethod { None, Codats, CodatsWs, TargetOnly };

inline const char* to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::None: return "none";
    case TrainMethod::Codats: return "codats";
    case TrainMethod::CodatsWs: return "codats-ws";
    case TrainMethod::TargetOnly: return "target-only";
  }
  return "?";
}

inline TrainMethod parse_method(const std::string& s) {
  if (s == "none") return TrainMethod::None;
  if (s == "codats") return TrainMethod::Codats;
  if (s == "codats-ws") return TrainMethod::CodatsWs;
  if (s == "target-only") return TrainMethod::TargetOnly;
  throw std::invalid_argument("unknown method '" + s + "'");
}

enum class SelectionMode { TargetVal, SourceVal };

struct TrainConfig {
  TrainMethod method = TrainMethod::Codats;
  std::size_t iterations = 30000;
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  std::size_t eval_interval = 4000;
  double grl_gamma = 10.0;
  bool grl_constant = false;         // constant lambda instead of the ramp
  double grl_constant_value = 1.0;
  std::uint64_t seed = 1;
  SelectionMode selection = SelectionMode::TargetVal;
  std::optional<BatchPolicy> policy;  // default chosen from method and n

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
    if (eval_interval < 1) throw std::invalid_argument("train: eval interval must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("train: batch size must be >= 2");
    if (learning_rate <= 0) throw std::invalid_argument("train: learning rate must be positive");
  }

  BatchPolicy resolved_policy(std::size_t n) const {
    if (policy.has_value()) return *policy;
    if (method == TrainMethod::CodatsWs) return BatchPolicy::DawsHalfTarget;
    return n == 1 ? BatchPolicy::SingleSource : BatchPolicy::MultiSourceEven;
  }
};

// One domain's train/validation/test splits (already normalized).
struct DomainData {
  DomainDataset train;
  DomainDataset val;
  DomainDataset test;
};

struct StepLosses {
  double task = 0.0;
  double domain = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct MetricsRecord {
  std::size_t iteration = 0;
  std::string split;        // train | val | test
  std::uint32_t domain = 0;
  double accuracy = 0.0;
  double task_loss = 0.0;
  double domain_loss = 0.0;
  double kl_term = 0.0;
  double wall_time = 0.0;   // seconds since training started
};

// ---- loss graph -----------------------------------------------------------

template <typename T>
struct LossGraph {
  Var total;
  StepLosses values;
};

// Task loss over labeled rows plus (for the adversarial methods) domain loss
// over all rows through the gradient reversal layer, plus (for weak
// supervision) the KL term on the target rows' batch-mean prediction.
// Labeled rows must form a contiguous tail of the batch.
template <typename T>
LossGraph<T> build_loss(Tape<T>& tape, BoundNet<T>& net, const MixedBatch& batch, T lambda,
                        TrainMethod method, Mode mode, Rng& rng,
                        const LabelDistribution* y_true) {
  const std::size_t B = batch.batch_size();
  if (B == 0) throw std::invalid_argument("train: empty batch");
  std::size_t labeled_begin = B;
  for (std::size_t i = 0; i < B; ++i) {
    if (batch.task_labels[i] >= 0) {
      labeled_begin = i;
      break;
    }
  }
  for (std::size_t i = labeled_begin; i < B; ++i) {
    if (batch.task_labels[i] < 0) {
      throw std::invalid_argument("train: missing task label on source example");
    }
  }
  if (labeled_begin == B) throw std::invalid_argument("train: batch has no labeled examples");

  Var x = tape.leaf(batch.x.template cast<T>());
  Var feats = feature_extractor(tape, net, x, mode);

  Var task_feats = labeled_begin == 0 ? feats : slice_rows(tape, feats, labeled_begin, B);
  Var task_logits = task_classifier(tape, net, task_feats);
  std::vector<int> labels(batch.task_labels.begin() + labeled_begin, batch.task_labels.end());
  XentResult<T> task = softmax_xent(tape, task_logits, labels);

  LossGraph<T> graph;
  graph.total = task.loss;
  graph.values.task = static_cast<double>(tape.val(task.loss)[0]);

  if (method == TrainMethod::Codats || method == TrainMethod::CodatsWs) {
    Var dom_logits = domain_classifier(tape, net, feats, lambda, rng, mode);
    XentResult<T> dom = softmax_xent(tape, dom_logits, batch.domain_labels);
    graph.total = add(tape, graph.total, dom.loss);
    graph.values.domain = static_cast<double>(tape.val(dom.loss)[0]);
  }

  if (method == TrainMethod::CodatsWs) {
    if (y_true == nullptr) throw std::invalid_argument("train: weak supervision needs y_true");
    const std::size_t target_count = batch.target_count();
    if (target_count == 0) throw std::invalid_argument("train: weak supervision needs target rows");
    Var target_feats = slice_rows(tape, feats, 0, target_count);
    Var target_logits = task_classifier(tape, net, target_feats);
    Var probs = softmax(tape, target_logits);
    Var mean_pred = mean_over_batch(tape, probs);
    Var kl = kl_true_vs_pred(tape, y_true->p, mean_pred);
    graph.total = add(tape, graph.total, kl);
    graph.values.kl = static_cast<double>(tape.val(kl)[0]);
  }

  graph.values.total = static_cast<double>(tape.val(graph.total)[0]);
  return graph;
}

// One combined optimization step (Eq. of the adversarial objective): builds
// the loss, backpropagates, and applies Adam.
template <typename T>
StepLosses codats_step(ParamStore<T>& params, AdamState<T>& adam, const MixedBatch& batch,
                       T lambda, double lr, Rng& rng, TrainMethod method = TrainMethod::Codats,
                       const LabelDistribution* y_true = nullptr) {
  Tape<T> tape;
  BoundNet<T> net = bind_params(tape, params);
  LossGraph<T> graph = build_loss(tape, net, batch, lambda, method, Mode::Train, rng, y_true);
  tape.backward(graph.total);
  GradMap<T> grads = collect_grads(tape, net);
  adam_step(params, grads, adam, lr);
  return graph.values;
}

template <typename T>
StepLosses daws_step(ParamStore<T>& params, AdamState<T>& adam, const MixedBatch& batch,
                     T lambda, const LabelDistribution& y_true, double lr, Rng& rng) {
  if (batch.target_count() < 16) {
    throw std::invalid_argument("train: target portion too small to estimate proportions");
  }
  return codats_step(params, adam, batch, lambda, lr, rng, TrainMethod::CodatsWs, &y_true);
}

// ---- evaluation ------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> confusion;  // L x L, row = true label, col = prediction
  double task_loss = 0.0;
};

// Deterministic inference-mode evaluation in batches: batch norm uses running
// statistics and dropout is disabled.
template <typename T>
EvalResult evaluate_accuracy(ParamStore<T>& params, const DomainDataset& split,
                             std::size_t batch_cap = 128) {
  if (split.num_windows == 0) throw std::invalid_argument("evaluate: empty split");
  const std::size_t L = params.cfg.num_labels;
  EvalResult result;
  result.confusion.assign(L * L, 0);
  std::size_t correct = 0;
  double loss_sum = 0.0;
  Rng dummy(0);
  for (std::size_t begin = 0; begin < split.num_windows; begin += batch_cap) {
    const std::size_t end = std::min(split.num_windows, begin + batch_cap);
    const std::size_t b = end - begin;
    Tensor<float> xf({b, split.length, split.channels});
    std::copy(split.window(begin), split.window(begin) + b * split.length * split.channels,
              xf.data());
    std::vector<int> labels(split.y.begin() + begin, split.y.begin() + end);
    Tape<T> tape;
    BoundNet<T> net = bind_params(tape, params);
    Var x = tape.leaf(xf.template cast<T>());
    Var feats = feature_extractor(tape, net, x, Mode::Inference);
    Var logits = task_classifier(tape, net, feats);
    XentResult<T> xent = softmax_xent(tape, logits, labels);
    loss_sum += static_cast<double>(tape.val(xent.loss)[0]) * static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t argmax = 0;
      for (std::size_t j = 1; j < L; ++j) {
        if (xent.probs.at2(i, j) > xent.probs.at2(i, argmax)) argmax = j;
      }
      const auto truth = static_cast<std::size_t>(labels[i]);
      result.confusion[truth * L + argmax] += 1;
      if (argmax == truth) ++correct;
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(split.num_windows);
  result.task_loss = loss_sum / static_cast<double>(split.num_windows);
  return result;
}

// Mean domain-classifier cross entropy of a split under its true domain
// label (informational metric; forward pass only).
template <typename T>
double evaluate_domain_loss(ParamStore<T>& params, const DomainDataset& split, int domain_label,
                            std::size_t batch_cap = 128) {
  if (split.num_windows == 0) throw std::invalid_argument("evaluate: empty split");
  double loss_sum = 0.0;
  Rng dummy(0);
  for (std::size_t begin = 0; begin < split.num_windows; begin += batch_cap) {
    const std::size_t end = std::min(split.num_windows, begin + batch_cap);
    const std::size_t b = end - begin;
    Tensor<float> xf({b, split.length, split.channels});
    std::copy(split.window(begin), split.window(begin) + b * split.length * split.channels,
              xf.data());
    Tape<T> tape;
    BoundNet<T> net = bind_params(tape, params);
    Var x = tape.leaf(xf.template cast<T>());
    Var feats = feature_extractor(tape, net, x, Mode::Inference);
    Var logits = domain_classifier(tape, net, feats, T(0), dummy, Mode::Inference);
    XentResult<T> xent = softmax_xent(tape, logits, std::vector<int>(b, domain_label));
    loss_sum += static_cast<double>(tape.val(xent.loss)[0]) * static_cast<double>(b);
  }
  return loss_sum / static_cast<double>(split.num_windows);
}

// KL of the known target label distribution against the split's mean
// softmax prediction (informational metric).
template <typename T>
double evaluate_kl(ParamStore<T>& params, const DomainDataset& split,
                   const LabelDistribution& y_true, std::size_t batch_cap = 128) {
  if (split.num_windows == 0) throw std::invalid_argument("evaluate: empty split");
  const std::size_t L = params.cfg.num_labels;
  std::vector<double> mean_pred(L, 0.0);
  Rng dummy(0);
  for (std::size_t begin = 0; begin < split.num_windows; begin += batch_cap) {
    const std::size_t end = std::min(split.num_windows, begin + batch_cap);
    const std::size_t b = end - begin;
    Tensor<float> xf({b, split.length, split.channels});
    std::copy(split.window(begin), split.window(begin) + b * split.length * split.channels,
              xf.data());
    Tape<T> tape;
    BoundNet<T> net = bind_params(tape, params);
    Var x = tape.leaf(xf.template cast<T>());
    Var feats = feature_extractor(tape, net, x, Mode::Inference);
    Var logits = task_classifier(tape, net, feats);
    Var probs = softmax(tape, logits);
    const Tensor<T>& pv = tape.val(probs);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < L; ++j) mean_pred[j] += static_cast<double>(pv.at2(i, j));
    }
  }
  double kl = 0.0;
  for (std::size_t j = 0; j < L; ++j) {
    mean_pred[j] = std::clamp(mean_pred[j] / static_cast<double>(split.num_windows),
                              kKlClampFloor, 1.0);
    if (y_true.p[j] > 0.0) kl += y_true.p[j] * (std::log(y_true.p[j]) - std::log(mean_pred[j]));
  }
  return kl;
}

// ---- training loop -----------------------------------------------------------

// Candidate schedule: iteration 0, every eval_interval iterations, and the
// final iteration (9 points at the 30000/4000 defaults).
inline std::vector<std::size_t> evaluation_points(std::size_t iterations, std::size_t interval) {
  if (iterations < 1 || interval < 1) {
    throw std::invalid_argument("evaluation_points: iterations and interval must be >= 1");
  }
  std::vector<std::size_t> points{0};
  for (std::size_t it = interval; it < iterations; it += interval) points.push_back(it);
  points.push_back(iterations);
  return points;
}

template <typename T>
struct TrainResult {
  ParamStore<T> best_params;
  std::uint64_t best_iteration = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  ParamStore<T> final_params;
  AdamState<T> final_adam;
  std::vector<MetricsRecord> metrics;
  std::vector<StepLosses> step_losses;  // one per executed iteration
  double step_seconds_mean = 0.0;
  double step_seconds_std = 0.0;
  std::size_t eval_points = 0;
};

namespace detail {

inline void check_domain_compat(const std::vector<DomainData>& sources, const DomainData& target) {
  auto check = [&](const DomainDataset& ds) {
    if (ds.num_labels != target.train.num_labels) {
      throw std::invalid_argument("train: label-space mismatch across domains");
    }
    if (ds.channels != target.train.channels || ds.length != target.train.length) {
      throw std::invalid_argument("train: dataset shape mismatch across domains");
    }
  };
  for (const DomainData& s : sources) {
    check(s.train);
    check(s.val);
    check(s.test);
  }
  check(target.val);
  check(target.test);
}

}  // namespace detail

// Runs the configured method. Evaluates at iteration 0, every eval_interval
// iterations, and at the end; snapshots each candidate and returns the one
// maximizing the selection metric (target validation accuracy by default,
// mean source validation accuracy in source-val mode). When a checkpoint
// directory is given, a resumable checkpoint is written at every evaluation
// point; resume continues the run bit-exactly.
template <typename T>
TrainResult<T> train_loop(const TrainConfig& tc, const NetConfig& nc,
                          const std::vector<DomainData>& sources, const DomainData& target,
                          const Checkpoint* resume = nullptr,
                          const std::filesystem::path& checkpoint_dir = {}) {
  tc.validate();
  nc.validate();
  if (sources.empty() && tc.method != TrainMethod::TargetOnly) {
    throw std::invalid_argument("train: need at least one source domain");
  }
  const std::size_t n = std::max<std::size_t>(sources.size(), 1);
  if (nc.num_sources != n) {
    throw std::invalid_argument("train: net configured for " + std::to_string(nc.num_sources) +
                                " sources, got " + std::to_string(sources.size()));
  }
  detail::check_domain_compat(sources, target);

  Rng rng(tc.seed);
  ParamStore<T> params = init_params<T>(nc, rng);
  AdamState<T> adam = AdamState<T>::for_params(params);

  TrainResult<T> result;
  std::uint64_t start_iteration = 0;
  if (resume != nullptr) {
    restore_checkpoint(*resume, params, adam);
    rng = Rng::deserialize(resume->rng_state);
    start_iteration = resume->iteration;
    if (resume->has_best) {
      result.best_iteration = resume->best_iteration;
      result.best_metric = resume->best_metric;
    }
    if (start_iteration > tc.iterations) {
      throw std::invalid_argument("train: checkpoint is beyond the configured iterations");
    }
  }

  LabelDistribution y_true;
  if (tc.method == TrainMethod::CodatsWs) {
    y_true = estimate_label_proportions(target.train.y, target.train.num_labels);
  }

  const BatchPolicy policy = tc.resolved_policy(n);
  std::vector<const DomainDataset*> source_trains;
  for (const DomainData& s : sources) source_trains.push_back(&s.train);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  bool best_taken_from_resume = resume != nullptr && resume->has_best;

  auto evaluate_all = [&](std::size_t iteration) -> double {
    double selection_metric = 0.0;
    double source_val_sum = 0.0;
    auto record = [&](const DomainData& dom, int internal_id) {
      const DomainDataset* splits[3] = {&dom.train, &dom.val, &dom.test};
      const char* names[3] = {"train", "val", "test"};
      for (int s = 0; s < 3; ++s) {
        EvalResult ev = evaluate_accuracy(params, *splits[s]);
        MetricsRecord rec;
        rec.iteration = iteration;
        rec.split = names[s];
        rec.domain = splits[s]->domain_id;
        rec.accuracy = ev.accuracy;
        rec.task_loss = ev.task_loss;
        if (tc.method == TrainMethod::Codats || tc.method == TrainMethod::CodatsWs) {
          rec.domain_loss = evaluate_domain_loss(params, *splits[s], internal_id);
        }
        if (tc.method == TrainMethod::CodatsWs && internal_id == 0) {
          rec.kl_term = evaluate_kl(params, *splits[s], y_true);
        }
        rec.wall_time = elapsed();
        result.metrics.push_back(rec);
        if (internal_id == 0 && s == 1) selection_metric = ev.accuracy;
        if (internal_id > 0 && s == 1) source_val_sum += ev.accuracy;
      }
    };
    record(target, 0);
    for (std::size_t i = 0; i < sources.size(); ++i) record(sources[i], static_cast<int>(i + 1));
    if (tc.selection == SelectionMode::SourceVal && !sources.empty()) {
      selection_metric = source_val_sum / static_cast<double>(sources.size());
    }
    return selection_metric;
  };

  auto consider_candidate = [&](std::size_t iteration, double metric) {
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_iteration = iteration;
      result.best_params = params;
      best_taken_from_resume = false;
    }
  };

  auto maybe_checkpoint = [&](std::size_t iteration) {
    if (checkpoint_dir.empty()) return;
    std::filesystem::create_directories(checkpoint_dir);
    save_checkpoint(checkpoint_dir / ("iter" + std::to_string(iteration) + ".ckpt"),
                    make_checkpoint(params, adam, iteration, rng,
                                    result.best_metric > -std::numeric_limits<double>::infinity(),
                                    result.best_iteration, result.best_metric));
  };

  double step_sum = 0.0, step_sq_sum = 0.0;
  std::size_t steps_done = 0;

  if (resume == nullptr) {
    consider_candidate(0, evaluate_all(0));
    ++result.eval_points;
    maybe_checkpoint(0);
  }

  for (std::size_t it = start_iteration + 1; it <= tc.iterations; ++it) {
    const T lambda = static_cast<T>(
        tc.grl_constant ? tc.grl_constant_value : grl_lambda(it - 1, tc.iterations, tc.grl_gamma));
    const auto s0 = std::chrono::steady_clock::now();
    MixedBatch batch;
    StepLosses losses;
    switch (tc.method) {
      case TrainMethod::Codats:
        batch = compose_batch(source_trains, target.train, tc.batch_size, policy, rng);
        losses = codats_step(params, adam, batch, lambda, tc.learning_rate, rng);
        break;
      case TrainMethod::CodatsWs:
        batch = compose_batch(source_trains, target.train, tc.batch_size, policy, rng);
        losses = daws_step(params, adam, batch, lambda, y_true, tc.learning_rate, rng);
        break;
      case TrainMethod::None: {
        std::vector<int> ids;
        for (std::size_t i = 0; i < sources.size(); ++i) ids.push_back(static_cast<int>(i + 1));
        batch = compose_labeled_batch(source_trains, ids, tc.batch_size, rng);
        losses = codats_step(params, adam, batch, lambda, tc.learning_rate, rng, TrainMethod::None);
        break;
      }
      case TrainMethod::TargetOnly:
        batch = compose_labeled_batch({&target.train}, {0}, tc.batch_size, rng);
        losses = codats_step(params, adam, batch, lambda, tc.learning_rate, rng,
                             TrainMethod::TargetOnly);
        break;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();
    step_sum += secs;
    step_sq_sum += secs * secs;
    ++steps_done;
    result.step_losses.push_back(losses);

    if (it % tc.eval_interval == 0 || it == tc.iterations) {
      consider_candidate(it, evaluate_all(it));
      ++result.eval_points;
      maybe_checkpoint(it);
    }
  }

  // A best candidate inherited from a resumed segment lives in that segment's
  // periodic checkpoint, not in memory.
  if (best_taken_from_resume) {
    const std::filesystem::path best_path =
        checkpoint_dir / ("iter" + std::to_string(result.best_iteration) + ".ckpt");
    if (!checkpoint_dir.empty() && std::filesystem::exists(best_path)) {
      const Checkpoint best_ckpt = load_checkpoint(best_path);
      result.best_params = params;
      AdamState<T> scratch = AdamState<T>::for_params(result.best_params);
      restore_checkpoint(best_ckpt, result.best_params, scratch);
    } else {
      result.best_params = params;  // best weights unavailable; fall back to final
    }
  }

  result.final_params = params;
  result.final_adam = adam;
  if (steps_done > 0) {
    result.step_seconds_mean = step_sum / static_cast<double>(steps_done);
    const double var = std::max(0.0, step_sq_sum / static_cast<double>(steps_done) -
                                         result.step_seconds_mean * result.step_seconds_mean);
    result.step_seconds_std = std::sqrt(var);
  }
  return result;
}

// ---- step-time benchmark ------------------------------------------------------

struct BenchResult {
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  std::size_t measured = 0;
};

// Wall-clock seconds per training iteration after warmup, for any method.
template <typename T>
BenchResult bench_step_time(const TrainConfig& tc, const NetConfig& nc,
                            const std::vector<DomainData>& sources, const DomainData& target,
                            std::size_t warmup = 20, std::size_t measured = 100) {
  if (measured < 10) throw std::invalid_argument("bench: need at least 10 measured iterations");
  nc.validate();
  detail::check_domain_compat(sources, target);
  Rng rng(tc.seed);
  ParamStore<T> params = init_params<T>(nc, rng);
  AdamState<T> adam = AdamState<T>::for_params(params);
  LabelDistribution y_true;
  if (tc.method == TrainMethod::CodatsWs) {
    y_true = estimate_label_proportions(target.train.y, target.train.num_labels);
  }
  const std::size_t n = std::max<std::size_t>(sources.size(), 1);
  const BatchPolicy policy = tc.resolved_policy(n);
  std::vector<const DomainDataset*> source_trains;
  for (const DomainData& s : sources) source_trains.push_back(&s.train);

  auto one_step = [&](std::size_t it) {
    const T lambda = static_cast<T>(
        tc.grl_constant ? tc.grl_constant_value
                        : grl_lambda(std::min(it, tc.iterations), tc.iterations, tc.grl_gamma));
    switch (tc.method) {
      case TrainMethod::Codats: {
        MixedBatch b = compose_batch(source_trains, target.train, tc.batch_size, policy, rng);
        codats_step(params, adam, b, lambda, tc.learning_rate, rng);
        break;
      }
      case TrainMethod::CodatsWs: {
        MixedBatch b = compose_batch(source_trains, target.train, tc.batch_size, policy, rng);
        daws_step(params, adam, b, lambda, y_true, tc.learning_rate, rng);
        break;
      }
      case TrainMethod::None: {
        std::vector<int> ids;
        for (std::size_t i = 0; i < sources.size(); ++i) ids.push_back(static_cast<int>(i + 1));
        MixedBatch b = compose_labeled_batch(source_trains, ids, tc.batch_size, rng);
        codats_step(params, adam, b, lambda, tc.learning_rate, rng, TrainMethod::None);
        break;
      }
      case TrainMethod::TargetOnly: {
        MixedBatch b = compose_labeled_batch({&target.train}, {0}, tc.batch_size, rng);
        codats_step(params, adam, b, lambda, tc.learning_rate, rng, TrainMethod::TargetOnly);
        break;
      }
    }
  };

  for (std::size_t i = 0; i < warmup; ++i) one_step(i);
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < measured; ++i) {
    const auto s0 = std::chrono::steady_clock::now();
    one_step(warmup + i);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();
    sum += secs;
    sq += secs * secs;
  }
  BenchResult r;
  r.measured = measured;
  r.mean_seconds = sum / static_cast<double>(measured);
  const double var = std::max(0.0, sq / static_cast<double>(measured) - r.mean_seconds * r.mean_seconds);
  r.std_seconds = std::sqrt(var);
  return r;
}

}  // namespace codats
