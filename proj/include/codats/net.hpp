#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "codats/ops.hpp"
#include "codats/rng.hpp"
#include "codats/tape.hpp"
#include "codats/tensor.hpp"

namespace codats {

// Architecture description. The defaults are the full-size network: three
// conv blocks (128/256/128 filters, kernels 8/5/3, batch norm + ReLU), global
// average pooling, a single dense task head, and a 3x500 MLP domain head with
// 0.3 dropout and n+1 outputs. Widths are configurable so verification suites
// and desk-scale experiments can run reduced networks.
struct NetConfig {
  std::size_t in_channels = 1;  // K
  std::size_t num_labels = 2;   // L
  std::size_t num_sources = 1;  // n
  std::array<std::size_t, 3> conv_filters{128, 256, 128};
  std::array<std::size_t, 3> conv_kernels{8, 5, 3};
  std::array<std::size_t, 3> domain_widths{500, 500, 500};
  double dropout_rate = 0.3;

  std::size_t feature_width() const { return conv_filters[2]; }
  std::size_t domain_outputs() const { return num_sources + 1; }

  void validate() const {
    if (in_channels < 1) throw std::invalid_argument("net: in_channels must be >= 1");
    if (num_labels < 2) throw std::invalid_argument("net: num_labels must be >= 2");
    if (num_sources < 1) throw std::invalid_argument("net: num_sources must be >= 1");
    for (std::size_t f : conv_filters)
      if (f < 1) throw std::invalid_argument("net: conv filter count must be >= 1");
    for (std::size_t k : conv_kernels)
      if (k < 1) throw std::invalid_argument("net: kernel width must be >= 1");
    for (std::size_t w : domain_widths)
      if (w < 1) throw std::invalid_argument("net: domain width must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw std::invalid_argument("net: dropout rate must be in [0, 1)");
  }

  bool operator==(const NetConfig&) const = default;
};

enum class ParamGroup { Feature, Task, Domain };

// Named parameter tensors grouped as feature extractor / task classifier /
// domain classifier, plus the non-trainable batch-norm running state.
template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor<T> value;
  };

  NetConfig cfg;
  std::vector<Entry> entries;                // registration order
  std::array<BatchNormState<T>, 3> bn;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].name == name) return i;
    }
    throw std::invalid_argument("params: unknown parameter '" + name + "'");
  }

  Tensor<T>& value(const std::string& name) { return entries[index_of(name)].value; }
  const Tensor<T>& value(const std::string& name) const { return entries[index_of(name)].value; }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    out.cfg = cfg;
    out.entries.reserve(entries.size());
    for (const auto& e : entries) {
      out.entries.push_back({e.name, e.group, e.value.template cast<U>()});
    }
    for (std::size_t i = 0; i < 3; ++i) {
      out.bn[i].running_mean = bn[i].running_mean.template cast<U>();
      out.bn[i].running_var = bn[i].running_var.template cast<U>();
      out.bn[i].momentum = static_cast<U>(bn[i].momentum);
      out.bn[i].epsilon = static_cast<U>(bn[i].epsilon);
    }
    return out;
  }
};

namespace detail {

template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
  return t;
}

}  // namespace detail

// Glorot-uniform weights (conv fan counts include the kernel width), zero
// biases, unit gamma, zero beta, running mean 0 / variance 1. Consumes the
// generator in registration order, so equal seeds give bit-identical stores.
template <typename T>
ParamStore<T> init_params(const NetConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore<T> store;
  store.cfg = cfg;

  std::size_t in_ch = cfg.in_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t k = cfg.conv_kernels[i], f = cfg.conv_filters[i];
    store.entries.push_back({"f.conv" + std::to_string(i) + ".w", ParamGroup::Feature,
                             detail::glorot_uniform<T>({k, in_ch, f}, k * in_ch, k * f, rng)});
    store.entries.push_back({"f.bn" + std::to_string(i) + ".gamma", ParamGroup::Feature,
                             Tensor<T>::full({f}, T(1))});
    store.entries.push_back({"f.bn" + std::to_string(i) + ".beta", ParamGroup::Feature,
                             Tensor<T>::zeros({f})});
    store.bn[i] = BatchNormState<T>(f);
    in_ch = f;
  }

  const std::size_t fw = cfg.feature_width();
  store.entries.push_back({"c.out.w", ParamGroup::Task,
                           detail::glorot_uniform<T>({fw, cfg.num_labels}, fw, cfg.num_labels, rng)});
  store.entries.push_back({"c.out.b", ParamGroup::Task, Tensor<T>::zeros({cfg.num_labels})});

  std::size_t in_w = fw;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t w = cfg.domain_widths[i];
    store.entries.push_back({"d.fc" + std::to_string(i) + ".w", ParamGroup::Domain,
                             detail::glorot_uniform<T>({in_w, w}, in_w, w, rng)});
    store.entries.push_back({"d.fc" + std::to_string(i) + ".b", ParamGroup::Domain,
                             Tensor<T>::zeros({w})});
    in_w = w;
  }
  const std::size_t dout = cfg.domain_outputs();
  store.entries.push_back({"d.out.w", ParamGroup::Domain,
                           detail::glorot_uniform<T>({in_w, dout}, in_w, dout, rng)});
  store.entries.push_back({"d.out.b", ParamGroup::Domain, Tensor<T>::zeros({dout})});
  return store;
}

// Parameters registered as leaves on a tape for one forward/backward pass.
template <typename T>
struct BoundNet {
  ParamStore<T>* store = nullptr;
  std::vector<Var> vars;  // parallel to store->entries

  Var of(const std::string& name) const { return vars[store->index_of(name)]; }
};

template <typename T>
BoundNet<T> bind_params(Tape<T>& tape, ParamStore<T>& store) {
  BoundNet<T> bound;
  bound.store = &store;
  bound.vars.reserve(store.entries.size());
  for (const auto& e : store.entries) bound.vars.push_back(tape.leaf(e.value));
  return bound;
}

// conv(k8) -> BN -> ReLU -> conv(k5) -> BN -> ReLU -> conv(k3) -> BN -> ReLU
// -> global average pooling. Output width is conv_filters[2] regardless of H.
template <typename T>
Var feature_extractor(Tape<T>& tape, BoundNet<T>& net, Var x, Mode mode) {
  const NetConfig& cfg = net.store->cfg;
  const Tensor<T>& xv = tape.val(x);
  require_rank(xv, 3, "feature_extractor");
  if (xv.shape[2] != cfg.in_channels) {
    throw std::invalid_argument("feature_extractor: input channels " +
                                std::to_string(xv.shape[2]) + " vs configured " +
                                std::to_string(cfg.in_channels));
  }
  Var h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(i);
    h = conv1d_same(tape, h, net.of("f.conv" + tag + ".w"));
    h = batchnorm1d(tape, h, net.of("f.bn" + tag + ".gamma"), net.of("f.bn" + tag + ".beta"),
                    net.store->bn[i], mode);
    h = relu(tape, h);
  }
  return global_avg_pool(tape, h);
}

// Single dense layer to L logits; softmax is applied inside the loss or at
// prediction time.
template <typename T>
Var task_classifier(Tape<T>& tape, BoundNet<T>& net, Var features) {
  const NetConfig& cfg = net.store->cfg;
  const Tensor<T>& fv = tape.val(features);
  require_rank(fv, 2, "task_classifier");
  if (fv.shape[1] != cfg.feature_width()) {
    throw std::invalid_argument("task_classifier: feature width " + std::to_string(fv.shape[1]) +
                                " vs configured " + std::to_string(cfg.feature_width()));
  }
  return add_rowwise(tape, matmul(tape, features, net.of("c.out.w")), net.of("c.out.b"));
}

// GRL, then three dense->ReLU->dropout blocks, then a dense layer to n+1
// domain logits. Dropout is active only in train mode.
template <typename T>
Var domain_classifier(Tape<T>& tape, BoundNet<T>& net, Var features, T lambda, Rng& rng,
                      Mode mode) {
  const NetConfig& cfg = net.store->cfg;
  const Tensor<T>& fv = tape.val(features);
  require_rank(fv, 2, "domain_classifier");
  if (fv.shape[1] != cfg.feature_width()) {
    throw std::invalid_argument("domain_classifier: feature width " + std::to_string(fv.shape[1]) +
                                " vs configured " + std::to_string(cfg.feature_width()));
  }
  Var h = grl(tape, features, lambda);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(i);
    h = add_rowwise(tape, matmul(tape, h, net.of("d.fc" + tag + ".w")),
                    net.of("d.fc" + tag + ".b"));
    h = relu(tape, h);
    h = dropout(tape, h, cfg.dropout_rate, rng, mode);
  }
  return add_rowwise(tape, matmul(tape, h, net.of("d.out.w")), net.of("d.out.b"));
}

// Gradients for all bound parameters after a backward pass; parameters that
// did not participate get zero gradients of the right shape.
template <typename T>
GradMap<T> collect_grads(Tape<T>& tape, const BoundNet<T>& net) {
  GradMap<T> grads;
  for (std::size_t i = 0; i < net.store->entries.size(); ++i) {
    const auto& e = net.store->entries[i];
    if (tape.has_grad(net.vars[i])) {
      grads[e.name] = tape.grad(net.vars[i]);
    } else {
      grads[e.name] = Tensor<T>::zeros(e.value.shape);
    }
  }
  return grads;
}

}  // namespace codats
