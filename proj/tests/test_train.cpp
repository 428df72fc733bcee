#include <doctest.h>

#include <cmath>

#include "codats/data.hpp"
#include "codats/train.hpp"
#include "codats/verify.hpp"

using namespace codats;

namespace {

NetConfig reduced_config(std::size_t channels, std::size_t labels, std::size_t sources) {
  NetConfig cfg;
  cfg.in_channels = channels;
  cfg.num_labels = labels;
  cfg.num_sources = sources;
  cfg.conv_filters = {4, 8, 4};
  cfg.conv_kernels = {8, 5, 3};
  cfg.domain_widths = {8, 8, 8};
  return cfg;
}

SynthSpec two_domain_spec(std::size_t L = 2, std::size_t K = 2, std::size_t H = 16,
                          std::size_t per_label = 30) {
  SynthSpec spec;
  spec.num_labels = L;
  spec.channels = K;
  spec.length = H;
  spec.examples_per_label = per_label;
  for (std::size_t i = 0; i < L; ++i) spec.base_freqs.push_back(1.0 + static_cast<double>(i));
  spec.noise_std = 0.1;
  spec.domains[0] = {1.3, 0.5, {}, {}};  // target
  spec.domains[1] = {};                  // source
  spec.domains[2] = {0.8, -0.4, {}, {}};
  spec.domains[3] = {1.1, 1.0, {}, {}};
  return spec;
}

DomainData make_domain(const SynthSpec& spec, std::uint32_t id, std::uint64_t seed) {
  DomainDataset full = synth_generate(spec, id, seed);
  auto [pool, test] = stratified_split(full, 0.8, seed * 11 + 1);
  auto [train, val] = stratified_split(pool, 0.8, seed * 11 + 2);
  DomainData dom;
  dom.train = std::move(train);
  dom.val = std::move(val);
  dom.test = std::move(test);
  fit_apply_normalizer(dom.train, {&dom.val, &dom.test});
  return dom;
}

MixedBatch random_mixed_batch(std::size_t target_rows, std::size_t source_rows, std::size_t n,
                              std::size_t H, std::size_t K, std::size_t L, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t B = target_rows + source_rows;
  MixedBatch mb;
  mb.counts.assign(n + 1, 0);
  mb.counts[0] = target_rows;
  mb.x = Tensor<float>({B, H, K});
  for (auto& v : mb.x.values) v = static_cast<float>(rng.uniform(-1, 1));
  mb.task_labels.assign(B, -1);
  mb.domain_labels.assign(B, 0);
  for (std::size_t i = target_rows; i < B; ++i) {
    const std::size_t src = 1 + rng.uniform_index(n);
    mb.counts[src] += 1;
    mb.domain_labels[i] = static_cast<int>(src);
    mb.task_labels[i] = static_cast<int>(rng.uniform_index(L));
  }
  return mb;
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("lambda zero cuts the domain gradient to the feature extractor") {
  const NetConfig cfg = reduced_config(2, 3, 1);
  Rng rng(17);
  ParamStore<double> params = init_params<double>(cfg, rng);
  const MixedBatch batch = random_mixed_batch(2, 2, 1, 8, 2, 3, 5);

  Tape<double> tape;
  BoundNet<double> net = bind_params(tape, params);
  Var x = tape.leaf(batch.x.cast<double>());
  Var feats = feature_extractor(tape, net, x, Mode::Train);
  Rng drop(1);
  Var logits = domain_classifier(tape, net, feats, 0.0, drop, Mode::Train);
  XentResult<double> xent = softmax_xent(tape, logits, batch.domain_labels);
  tape.backward(xent.loss);
  const GradMap<double> grads = collect_grads(tape, net);
  for (const auto& e : params.entries) {
    bool all_zero = true;
    for (double v : grads.at(e.name).values) {
      if (v != 0.0) all_zero = false;
    }
    if (e.group == ParamGroup::Feature) {
      CHECK(all_zero);
    }
    if (e.name == "d.fc0.w" || e.name == "d.out.w") {
      CHECK(!all_zero);  // the adversary still trains
    }
  }
}

TEST_CASE("combined objective matches the two-objective gradients, n in {1,2,3}") {
  for (std::size_t n : {std::size_t(1), std::size_t(2), std::size_t(3)}) {
    for (double lambda : {0.3, 1.0}) {
      const NetConfig cfg = reduced_config(2, 3, n);
      Rng rng(100 * n + 7);
      ParamStore<double> params = init_params<double>(cfg, rng);
      const MixedBatch batch = random_mixed_batch(3, 3 + n, n, 8, 2, 3, 50 + n);
      const std::uint64_t mask_seed = 77;

      // combined route: gradient reversal inside one graph
      GradMap<double> combined;
      {
        Tape<double> tape;
        BoundNet<double> net = bind_params(tape, params);
        Rng drop(mask_seed);
        LossGraph<double> graph =
            build_loss(tape, net, batch, lambda, TrainMethod::Codats, Mode::Train, drop, nullptr);
        tape.backward(graph.total);
        combined = collect_grads(tape, net);
        params.bn = {BatchNormState<double>(cfg.conv_filters[0]),
                     BatchNormState<double>(cfg.conv_filters[1]),
                     BatchNormState<double>(cfg.conv_filters[2])};
      }

      // two-objective route: feature/task side minimizes task - lambda*domain,
      // domain side minimizes the domain loss
      GradMap<double> obj_a, obj_b;
      {
        Tape<double> tape;
        BoundNet<double> net = bind_params(tape, params);
        Rng drop(mask_seed);
        Var x = tape.leaf(batch.x.cast<double>());
        Var feats = feature_extractor(tape, net, x, Mode::Train);
        const std::size_t B = batch.batch_size();
        Var task_feats = slice_rows(tape, feats, batch.counts[0], B);
        std::vector<int> labels(batch.task_labels.begin() + batch.counts[0],
                                batch.task_labels.end());
        Var task = softmax_xent(tape, task_classifier(tape, net, task_feats), labels).loss;
        Var dom_logits = domain_classifier_no_grl(tape, net, feats, drop, Mode::Train);
        Var dom = softmax_xent(tape, dom_logits, batch.domain_labels).loss;
        Var loss_a = add(tape, task, scale(tape, dom, -lambda));
        tape.backward(loss_a);
        obj_a = collect_grads(tape, net);
        params.bn = {BatchNormState<double>(cfg.conv_filters[0]),
                     BatchNormState<double>(cfg.conv_filters[1]),
                     BatchNormState<double>(cfg.conv_filters[2])};
      }
      {
        Tape<double> tape;
        BoundNet<double> net = bind_params(tape, params);
        Rng drop(mask_seed);
        Var x = tape.leaf(batch.x.cast<double>());
        Var feats = feature_extractor(tape, net, x, Mode::Train);
        Var dom_logits = domain_classifier_no_grl(tape, net, feats, drop, Mode::Train);
        Var dom = softmax_xent(tape, dom_logits, batch.domain_labels).loss;
        tape.backward(dom);
        obj_b = collect_grads(tape, net);
        params.bn = {BatchNormState<double>(cfg.conv_filters[0]),
                     BatchNormState<double>(cfg.conv_filters[1]),
                     BatchNormState<double>(cfg.conv_filters[2])};
      }

      for (const auto& e : params.entries) {
        const Tensor<double>& ours = combined.at(e.name);
        const Tensor<double>& reference =
            e.group == ParamGroup::Domain ? obj_b.at(e.name) : obj_a.at(e.name);
        for (std::size_t i = 0; i < ours.numel(); ++i) {
          CHECK(rel_error(ours[i], reference[i]) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("with lambda 0 the step reduces to supervised training of F and C") {
  const NetConfig cfg = reduced_config(2, 3, 1);
  Rng rng(23);
  const ParamStore<float> initial = init_params<float>(cfg, rng);

  // labeled source-only batch
  MixedBatch batch = random_mixed_batch(0, 6, 1, 8, 2, 3, 91);

  ParamStore<float> with_adversary = initial;
  AdamState<float> adam_a = AdamState<float>::for_params(with_adversary);
  Rng rng_a(5);
  codats_step(with_adversary, adam_a, batch, 0.0f, 1e-3, rng_a, TrainMethod::Codats);

  ParamStore<float> plain = initial;
  AdamState<float> adam_b = AdamState<float>::for_params(plain);
  Rng rng_b(5);
  codats_step(plain, adam_b, batch, 0.0f, 1e-3, rng_b, TrainMethod::None);

  for (std::size_t i = 0; i < plain.entries.size(); ++i) {
    const auto& e = plain.entries[i];
    if (e.group == ParamGroup::Feature || e.group == ParamGroup::Task) {
      CHECK(e.value.values == with_adversary.entries[i].value.values);  // bitwise
    }
  }
}

TEST_CASE("weak supervision: matched batch-mean prediction adds nothing") {
  const NetConfig cfg = reduced_config(2, 3, 1);
  Rng rng(29);
  ParamStore<double> params = init_params<double>(cfg, rng);
  const MixedBatch batch = random_mixed_batch(16, 8, 1, 8, 2, 3, 17);
  const std::uint64_t mask_seed = 3;

  // read the batch-mean target prediction off a probe forward pass
  LabelDistribution matched;
  {
    const auto bn = params.bn;
    Tape<double> tape;
    BoundNet<double> net = bind_params(tape, params);
    Var x = tape.leaf(batch.x.cast<double>());
    Var feats = feature_extractor(tape, net, x, Mode::Train);
    Var probs = softmax(tape, task_classifier(tape, net, slice_rows(tape, feats, 0, 16)));
    Var mean_pred = mean_over_batch(tape, probs);
    matched.p.assign(tape.val(mean_pred).values.begin(), tape.val(mean_pred).values.end());
    params.bn = bn;
  }
  matched.validate();  // softmax means stay a distribution well within 1e-9

  auto grads_for = [&](TrainMethod method, const LabelDistribution* y_true) {
    const auto bn = params.bn;
    Tape<double> tape;
    BoundNet<double> net = bind_params(tape, params);
    Rng drop(mask_seed);
    LossGraph<double> graph = build_loss(tape, net, batch, 0.7, method, Mode::Train, drop, y_true);
    tape.backward(graph.total);
    GradMap<double> grads = collect_grads(tape, net);
    params.bn = bn;
    return std::pair{graph.values, grads};
  };

  const auto [ws_losses, ws_grads] = grads_for(TrainMethod::CodatsWs, &matched);
  const auto [plain_losses, plain_grads] = grads_for(TrainMethod::Codats, nullptr);

  CHECK(ws_losses.kl == 0.0);
  for (const auto& e : params.entries) {
    CHECK(ws_grads.at(e.name).values == plain_grads.at(e.name).values);  // bitwise
  }
}

TEST_CASE("weak supervision KL term value matches the divergence oracle") {
  // same derivation as the op-level test: 0.5*ln(2) + 0.5*ln(2/3)
  Tape<double> tape;
  Var q = tape.leaf(Tensor<double>({2}, {0.25, 0.75}));
  Var kl = kl_true_vs_pred(tape, {0.5, 0.5}, q);
  CHECK(tape.val(kl)[0] == doctest::Approx(0.14384103622589042).epsilon(1e-14));
}

TEST_CASE("the regularizer constrains the mean, not every row") {
  // rows predict different classes, yet the batch mean matches y_true exactly
  Tape<double> tape;
  Var rows = tape.leaf(Tensor<double>({2, 2}, {0.75, 0.25, 0.25, 0.75}));
  Var mean_pred = mean_over_batch(tape, rows);
  Var kl = kl_true_vs_pred(tape, {0.5, 0.5}, mean_pred);
  CHECK(tape.val(kl)[0] == 0.0);
}

TEST_CASE("daws_step insists on a target portion of at least 16") {
  const NetConfig cfg = reduced_config(2, 3, 1);
  Rng rng(31);
  ParamStore<float> params = init_params<float>(cfg, rng);
  AdamState<float> adam = AdamState<float>::for_params(params);
  const MixedBatch batch = random_mixed_batch(8, 8, 1, 8, 2, 3, 19);
  LabelDistribution y_true{{0.4, 0.3, 0.3}};
  Rng step_rng(2);
  CHECK_THROWS_WITH_AS(daws_step(params, adam, batch, 0.5f, y_true, 1e-3, step_rng),
                       doctest::Contains("target portion"), std::invalid_argument);
}

TEST_CASE("missing task labels on source rows are rejected") {
  const NetConfig cfg = reduced_config(2, 3, 1);
  Rng rng(37);
  ParamStore<float> params = init_params<float>(cfg, rng);
  AdamState<float> adam = AdamState<float>::for_params(params);
  MixedBatch batch = random_mixed_batch(2, 4, 1, 8, 2, 3, 23);
  batch.task_labels[4] = -1;  // hole inside the labeled block
  Rng step_rng(2);
  CHECK_THROWS_AS(codats_step(params, adam, batch, 0.5f, 1e-3, step_rng), std::invalid_argument);
}

TEST_CASE("200 steps separate an easy two-label source") {
  SynthSpec spec = two_domain_spec(2, 2, 16, 40);
  spec.noise_std = 0.05;
  const DomainData source = make_domain(spec, 1, 101);
  const DomainData target = make_domain(spec, 0, 102);

  TrainConfig tc;
  tc.method = TrainMethod::None;
  tc.iterations = 200;
  tc.eval_interval = 200;
  tc.batch_size = 32;
  tc.learning_rate = 1e-3;
  tc.seed = 9;
  const NetConfig nc = reduced_config(2, 2, 1);
  TrainResult<float> result = train_loop<float>(tc, nc, {source}, target);
  const EvalResult ev = evaluate_accuracy(result.final_params, source.train);
  CHECK(ev.accuracy > 0.95);
}

TEST_CASE("evaluation schedule: 9 candidates at the default configuration") {
  CHECK(evaluation_points(30000, 4000).size() == 9);
  CHECK(evaluation_points(30000, 4000) ==
        std::vector<std::size_t>{0, 4000, 8000, 12000, 16000, 20000, 24000, 28000, 30000});
  CHECK(evaluation_points(8000, 4000) == std::vector<std::size_t>{0, 4000, 8000});
}

TEST_CASE("train_loop records one metrics block per evaluation point") {
  const SynthSpec spec = two_domain_spec();
  const DomainData source = make_domain(spec, 1, 201);
  const DomainData target = make_domain(spec, 0, 202);
  TrainConfig tc;
  tc.method = TrainMethod::Codats;
  tc.iterations = 8;
  tc.eval_interval = 4;
  tc.batch_size = 16;
  tc.seed = 3;
  const NetConfig nc = reduced_config(2, 2, 1);
  const TrainResult<float> result = train_loop<float>(tc, nc, {source}, target);
  CHECK(result.eval_points == 3);
  // two domains x three splits per evaluation point
  CHECK(result.metrics.size() == 3 * 2 * 3);
  CHECK(result.step_losses.size() == 8);

  // model selection returns the metric maximum over recorded candidates
  double best_seen = -1.0;
  for (const MetricsRecord& rec : result.metrics) {
    if (rec.domain == 0 && rec.split == "val") best_seen = std::max(best_seen, rec.accuracy);
  }
  CHECK(result.best_metric == doctest::Approx(best_seen));
}

TEST_CASE("method none ignores target data except at evaluation") {
  const SynthSpec spec = two_domain_spec();
  const DomainData source = make_domain(spec, 1, 301);
  const DomainData target_a = make_domain(spec, 0, 302);
  DomainData target_b = make_domain(spec, 0, 303);  // different target data

  TrainConfig tc;
  tc.method = TrainMethod::None;
  tc.iterations = 10;
  tc.eval_interval = 5;
  tc.batch_size = 16;
  tc.seed = 8;
  const NetConfig nc = reduced_config(2, 2, 1);
  const TrainResult<float> a = train_loop<float>(tc, nc, {source}, target_a);
  const TrainResult<float> b = train_loop<float>(tc, nc, {source}, target_b);
  for (std::size_t i = 0; i < a.final_params.entries.size(); ++i) {
    CHECK(a.final_params.entries[i].value.values == b.final_params.entries[i].value.values);
  }
}

TEST_CASE("fixed seed and data reproduce training bit-exactly") {
  const SynthSpec spec = two_domain_spec();
  const DomainData source = make_domain(spec, 1, 401);
  const DomainData target = make_domain(spec, 0, 402);
  TrainConfig tc;
  tc.method = TrainMethod::CodatsWs;
  tc.iterations = 12;
  tc.eval_interval = 6;
  tc.batch_size = 32;
  tc.seed = 21;
  const NetConfig nc = reduced_config(2, 2, 1);
  const TrainResult<float> a = train_loop<float>(tc, nc, {source}, target);
  const TrainResult<float> b = train_loop<float>(tc, nc, {source}, target);
  REQUIRE(a.step_losses.size() == b.step_losses.size());
  for (std::size_t i = 0; i < a.step_losses.size(); ++i) {
    CHECK(a.step_losses[i].total == b.step_losses[i].total);
  }
  for (std::size_t i = 0; i < a.final_params.entries.size(); ++i) {
    CHECK(a.final_params.entries[i].value.values == b.final_params.entries[i].value.values);
  }
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].accuracy == b.metrics[i].accuracy);
    CHECK(a.metrics[i].task_loss == b.metrics[i].task_loss);
  }
}

TEST_CASE("train_loop rejects mismatched label spaces") {
  const SynthSpec spec = two_domain_spec();
  const DomainData source = make_domain(spec, 1, 501);
  SynthSpec other = two_domain_spec(3);
  other.base_freqs = {1.0, 2.0, 3.0};
  const DomainData target = make_domain(other, 0, 502);
  TrainConfig tc;
  tc.iterations = 2;
  tc.eval_interval = 2;
  tc.batch_size = 8;
  const NetConfig nc = reduced_config(2, 2, 1);
  CHECK_THROWS_WITH_AS(static_cast<void>(train_loop<float>(tc, nc, {source}, target)),
                       doctest::Contains("label-space"), std::invalid_argument);
}

TEST_CASE("evaluate_accuracy invariants") {
  const SynthSpec spec = two_domain_spec();
  const DomainData target = make_domain(spec, 0, 601);
  const NetConfig nc = reduced_config(2, 2, 1);
  Rng rng(5);
  ParamStore<float> params = init_params<float>(nc, rng);

  const EvalResult first = evaluate_accuracy(params, target.test);
  const EvalResult second = evaluate_accuracy(params, target.test);
  CHECK(first.accuracy == second.accuracy);  // deterministic
  CHECK(first.confusion == second.confusion);

  // zero task weights predict argmax 0 everywhere; labels set to match give 1
  for (auto& v : params.value("c.out.w").values) v = 0.0f;
  for (auto& v : params.value("c.out.b").values) v = 0.0f;
  DomainDataset all_zero = target.test;
  std::fill(all_zero.y.begin(), all_zero.y.end(), 0);
  CHECK(evaluate_accuracy(params, all_zero).accuracy == 1.0);

  // balanced labels under the constant predictor give exactly 1/L
  const EvalResult uniform = evaluate_accuracy(params, target.test);
  const double frac0 =
      static_cast<double>(std::count(target.test.y.begin(), target.test.y.end(), 0)) /
      static_cast<double>(target.test.num_windows);
  CHECK(uniform.accuracy == doctest::Approx(frac0));

  DomainDataset empty = DomainDataset::empty_like(4, 2, 2, 0);
  CHECK_THROWS_AS(static_cast<void>(evaluate_accuracy(params, empty)), std::invalid_argument);
}

TEST_CASE("bench_step_time validates its sample size") {
  const SynthSpec spec = two_domain_spec();
  const DomainData source = make_domain(spec, 1, 701);
  const DomainData target = make_domain(spec, 0, 702);
  TrainConfig tc;
  tc.method = TrainMethod::None;
  tc.batch_size = 8;
  const NetConfig nc = reduced_config(2, 2, 1);
  CHECK_THROWS_AS(static_cast<void>(bench_step_time<float>(tc, nc, {source}, target, 0, 5)),
                  std::invalid_argument);
  const BenchResult r = bench_step_time<float>(tc, nc, {source}, target, 2, 10);
  CHECK(r.mean_seconds > 0.0);
  CHECK(r.std_seconds >= 0.0);
  CHECK(r.measured == 10);
}

TEST_SUITE_END();
