#pragma once

#include <functional>
#include <string>
#include <vector>

#include "codats/data.hpp"
#include "codats/grad_check.hpp"
#include "codats/net.hpp"
#include "codats/ops.hpp"
#include "codats/train.hpp"

namespace codats {

// 64-bit finite-difference verification of every differentiable operator and
// of the full training losses on a reduced network. The gradient reversal
// layer is excluded from finite differences by construction (its backward is
// deliberately not the derivative of its forward); its sign-flip law is
// checked separately. The full-loss checks therefore difference the
// two-objective formulation: feature/task parameters against
// task - lambda*domain (+ KL), domain parameters against the domain loss.

struct VerifyCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  bool passed = false;
};

// Sum of elementwise products with fixed weights; reduces an op output to a
// scalar so every element participates in the check.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const Tensor<T>& xv = tape.val(x);
  if (!xv.same_shape(weights)) throw std::invalid_argument("weighted_sum: shape mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i] * weights[i];
  Var y = tape.push(Tensor<T>::scalar(acc), "weighted_sum");
  tape.set_backward(y, [x, y, weights](Tape<T>& tp) {
    const T g = tp.grad(y)[0];
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g * weights[i];
  });
  return y;
}

// Domain-classifier stack without the gradient reversal layer; the reference
// route for the sign-flip and two-objective comparisons.
template <typename T>
Var domain_classifier_no_grl(Tape<T>& tape, BoundNet<T>& net, Var features, Rng& rng, Mode mode) {
  const NetConfig& cfg = net.store->cfg;
  Var h = features;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(i);
    h = add_rowwise(tape, matmul(tape, h, net.of("d.fc" + tag + ".w")),
                    net.of("d.fc" + tag + ".b"));
    h = relu(tape, h);
    h = dropout(tape, h, cfg.dropout_rate, rng, mode);
  }
  return add_rowwise(tape, matmul(tape, h, net.of("d.out.w")), net.of("d.out.b"));
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// values bounded away from zero, for kink-free relu differencing
inline Tensor<double> random_tensor_off_zero(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double u = rng.uniform(0.1, 1.5);
    t[i] = rng.uniform() < 0.5 ? -u : u;
  }
  return t;
}

inline std::vector<double> random_distribution(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& v : p) {
    v = rng.uniform(0.05, 1.0);
    sum += v;
  }
  // exact unit sum under the 1e-9 distribution tolerance
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    p[i] /= sum;
    acc += p[i];
  }
  p[n - 1] = 1.0 - acc;
  return p;
}

// Central differences of `eval` against a precomputed gradient map, over the
// parameter entries selected by `filter`. Batch-norm state is restored
// around every evaluation.
inline GradCheckResult grad_check_against(
    const GradMap<double>& analytic, const std::function<double()>& eval,
    ParamStore<double>& params, const std::function<bool(ParamGroup)>& filter, double eps = 1e-5) {
  const auto bn_snapshot = params.bn;
  auto protected_eval = [&]() {
    const double v = eval();
    params.bn = bn_snapshot;
    return v;
  };
  GradCheckResult result;
  for (auto& entry : params.entries) {
    if (!filter(entry.group)) continue;
    const Tensor<double>& grad = analytic.at(entry.name);
    for (std::size_t i = 0; i < entry.value.numel(); ++i) {
      const double saved = entry.value[i];
      entry.value[i] = saved + eps;
      const double plus = protected_eval();
      entry.value[i] = saved - eps;
      const double minus = protected_eval();
      entry.value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = rel_error(grad[i], numeric);
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = entry.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace detail

// Per-operator finite-difference checks on random shapes up to 4x8x4. The
// reduction weights are regenerated from a fixed seed inside each build so
// they act as constants, not perturbable inputs.
inline std::vector<VerifyCase> run_op_grad_checks(std::size_t seeds = 5, double tolerance = 1e-4) {
  std::vector<VerifyCase> cases;
  auto run = [&](const std::string& name, std::uint64_t seed, auto&& make_inputs, auto&& build) {
    Rng rng(seed);
    std::vector<Tensor<double>> inputs = make_inputs(rng);
    const GradCheckResult r = grad_check_inputs(build, inputs);
    VerifyCase c;
    c.name = name + " seed" + std::to_string(seed);
    c.max_rel_error = r.max_rel_error;
    c.tolerance = tolerance;
    c.passed = r.max_rel_error < tolerance;
    cases.push_back(c);
  };

  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    Rng shape_rng(seed * 977);
    const std::size_t B = 1 + shape_rng.uniform_index(4);
    const std::size_t H = 2 + shape_rng.uniform_index(7);
    const std::size_t K = 1 + shape_rng.uniform_index(4);
    const std::size_t L = 2 + shape_rng.uniform_index(3);

    auto reduce = [seed](Tape<double>& tp, Var out) {
      Rng weight_rng(seed * 1009 + 13);
      return weighted_sum(tp, out, detail::random_tensor(tp.val(out).shape, weight_rng));
    };

    run("matmul", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H}, rng));
          in.push_back(detail::random_tensor({H, K}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          return reduce(tp, matmul(tp, v[0], v[1]));
        });

    for (std::size_t kernel : {std::size_t(3), std::size_t(5), std::size_t(8)}) {
      const std::size_t F = 1 + (seed % 4);
      run("conv1d_same k" + std::to_string(kernel), seed,
          [&](Rng& rng) {
            std::vector<Tensor<double>> in;
            in.push_back(detail::random_tensor({B, H, K}, rng));
            in.push_back(detail::random_tensor({kernel, K, F}, rng));
            return in;
          },
          [&](Tape<double>& tp, std::vector<Var>& v) {
            return reduce(tp, conv1d_same(tp, v[0], v[1]));
          });
    }

    run("relu", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor_off_zero({B, H}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) { return reduce(tp, relu(tp, v[0])); });

    run("batchnorm1d train", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H, K}, rng));
          in.push_back(detail::random_tensor({K}, rng, 0.5, 1.5));   // gamma
          in.push_back(detail::random_tensor({K}, rng, -0.5, 0.5));  // beta
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          BatchNormState<double> state(tp.val(v[1]).shape[0]);
          return reduce(tp, batchnorm1d(tp, v[0], v[1], v[2], state, Mode::Train));
        });

    run("batchnorm1d inference", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H, K}, rng));
          in.push_back(detail::random_tensor({K}, rng, 0.5, 1.5));
          in.push_back(detail::random_tensor({K}, rng, -0.5, 0.5));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          const std::size_t C = tp.val(v[1]).shape[0];
          BatchNormState<double> state(C);
          Rng stats(seed * 31 + 7);
          for (std::size_t c = 0; c < C; ++c) {
            state.running_mean[c] = stats.uniform(-0.5, 0.5);
            state.running_var[c] = stats.uniform(0.5, 2.0);
          }
          return reduce(tp, batchnorm1d(tp, v[0], v[1], v[2], state, Mode::Inference));
        });

    run("global_avg_pool", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H, K}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          return reduce(tp, global_avg_pool(tp, v[0]));
        });

    run("dropout train", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          Rng mask_rng(seed * 131 + 5);  // same mask on every evaluation
          return reduce(tp, dropout(tp, v[0], 0.3, mask_rng, Mode::Train));
        });

    run("softmax", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, L}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) { return reduce(tp, softmax(tp, v[0])); });

    run("softmax_xent", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, L}, rng));
          return in;
        },
        [B, L, seed](Tape<double>& tp, std::vector<Var>& v) {
          Rng label_rng(seed * 17 + 3);
          std::vector<int> labels(B);
          for (int& lab : labels) lab = static_cast<int>(label_rng.uniform_index(L));
          return softmax_xent(tp, v[0], labels).loss;
        });

    run("mean_over_batch", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, L}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          return reduce(tp, mean_over_batch(tp, v[0]));
        });

    run("kl_true_vs_pred", seed,
        [&](Rng& rng) {
          const std::vector<double> q = detail::random_distribution(L, rng);
          std::vector<Tensor<double>> in;
          in.push_back(Tensor<double>({L}, std::vector<double>(q)));
          return in;
        },
        [L, seed](Tape<double>& tp, std::vector<Var>& v) {
          Rng p_rng(seed * 57 + 11);
          return kl_true_vs_pred(tp, detail::random_distribution(L, p_rng), v[0]);
        });

    run("slice_rows", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B + 1, H}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          return reduce(tp, slice_rows(tp, v[0], 1, B + 1));
        });

    run("add_rowwise", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H}, rng));
          in.push_back(detail::random_tensor({H}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          return reduce(tp, add_rowwise(tp, v[0], v[1]));
        });

    run("add+scale+mul", seed,
        [&](Rng& rng) {
          std::vector<Tensor<double>> in;
          in.push_back(detail::random_tensor({B, H}, rng));
          in.push_back(detail::random_tensor({B, H}, rng));
          return in;
        },
        [&](Tape<double>& tp, std::vector<Var>& v) {
          Var combined = add(tp, mul(tp, v[0], v[1]), scale(tp, v[1], -0.75));
          return reduce(tp, combined);
        });
  }
  return cases;
}

// Full-loss checks on a reduced network (filters 4/8/4, domain widths 8):
// analytic gradients come from the combined gradient-reversal graph; the
// finite-difference references are the two-objective losses.
inline std::vector<VerifyCase> run_full_loss_grad_checks(std::size_t seeds = 5,
                                                         double tolerance = 1e-4) {
  std::vector<VerifyCase> cases;
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.num_labels = 3;
  cfg.num_sources = 1;
  cfg.conv_filters = {4, 8, 4};
  cfg.conv_kernels = {8, 5, 3};
  cfg.domain_widths = {8, 8, 8};
  cfg.dropout_rate = 0.3;

  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    Rng rng(seed * 7919);
    ParamStore<double> params = init_params<double>(cfg, rng);

    // 4-example mixed batch: 2 unlabeled target rows, 2 labeled source rows
    const std::size_t B = 4, H = 8;
    MixedBatch batch;
    batch.counts = {2, 2};
    batch.x = Tensor<float>({B, H, cfg.in_channels});
    for (std::size_t i = 0; i < batch.x.numel(); ++i) {
      batch.x[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    batch.domain_labels = {0, 0, 1, 1};
    batch.task_labels = {-1, -1, static_cast<int>(rng.uniform_index(cfg.num_labels)),
                         static_cast<int>(rng.uniform_index(cfg.num_labels))};
    LabelDistribution y_true{detail::random_distribution(cfg.num_labels, rng)};
    const double lambda = 0.7;
    const std::uint64_t mask_seed = seed * 37 + 1;

    for (const TrainMethod method : {TrainMethod::Codats, TrainMethod::CodatsWs}) {
      GradMap<double> analytic;
      {
        const auto bn_snapshot = params.bn;
        Tape<double> tape;
        tape.set_check_finite(true);
        BoundNet<double> net = bind_params(tape, params);
        Rng mask_rng(mask_seed);
        LossGraph<double> graph =
            build_loss(tape, net, batch, lambda, method, Mode::Train, mask_rng,
                       method == TrainMethod::CodatsWs ? &y_true : nullptr);
        tape.backward(graph.total);
        analytic = collect_grads(tape, net);
        params.bn = bn_snapshot;
      }

      // task - lambda*domain (+ KL): the objective whose gradient the
      // reversal layer reports for the feature and task parameters
      auto eval_feature_task = [&]() {
        Tape<double> tape;
        BoundNet<double> net = bind_params(tape, params);
        Rng mask_rng(mask_seed);
        Var x = tape.leaf(batch.x.cast<double>());
        Var feats = feature_extractor(tape, net, x, Mode::Train);
        Var task_feats = slice_rows(tape, feats, 2, B);
        std::vector<int> labels(batch.task_labels.begin() + 2, batch.task_labels.end());
        Var task = softmax_xent(tape, task_classifier(tape, net, task_feats), labels).loss;
        Var dom_logits = domain_classifier_no_grl(tape, net, feats, mask_rng, Mode::Train);
        Var dom = softmax_xent(tape, dom_logits, batch.domain_labels).loss;
        Var total = add(tape, task, scale(tape, dom, -lambda));
        if (method == TrainMethod::CodatsWs) {
          Var target_feats = slice_rows(tape, feats, 0, 2);
          Var probs = softmax(tape, task_classifier(tape, net, target_feats));
          Var kl = kl_true_vs_pred(tape, y_true.p, mean_over_batch(tape, probs));
          total = add(tape, total, kl);
        }
        return tape.val(total)[0];
      };

      // plain domain loss: the objective the domain parameters descend
      auto eval_domain = [&]() {
        Tape<double> tape;
        BoundNet<double> net = bind_params(tape, params);
        Rng mask_rng(mask_seed);
        Var x = tape.leaf(batch.x.cast<double>());
        Var feats = feature_extractor(tape, net, x, Mode::Train);
        Var dom_logits = domain_classifier_no_grl(tape, net, feats, mask_rng, Mode::Train);
        return tape.val(softmax_xent(tape, dom_logits, batch.domain_labels).loss)[0];
      };

      const GradCheckResult r_ft = detail::grad_check_against(
          analytic, eval_feature_task, params,
          [](ParamGroup g) { return g == ParamGroup::Feature || g == ParamGroup::Task; });
      const GradCheckResult r_d = detail::grad_check_against(
          analytic, eval_domain, params, [](ParamGroup g) { return g == ParamGroup::Domain; });

      const char* mname = method == TrainMethod::Codats ? "codats" : "codats-ws";
      VerifyCase ft;
      ft.name = std::string("full ") + mname + " loss, feature+task params, seed" +
                std::to_string(seed);
      ft.max_rel_error = r_ft.max_rel_error;
      ft.tolerance = tolerance;
      ft.passed = r_ft.max_rel_error < tolerance;
      cases.push_back(ft);
      VerifyCase d;
      d.name = std::string("full ") + mname + " loss, domain params, seed" + std::to_string(seed);
      d.max_rel_error = r_d.max_rel_error;
      d.tolerance = tolerance;
      d.passed = r_d.max_rel_error < tolerance;
      cases.push_back(d);
    }
  }
  return cases;
}

}  // namespace codats
