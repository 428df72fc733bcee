#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "codats/checkpoint.hpp"
#include "codats/data.hpp"
#include "codats/train.hpp"

using namespace codats;
namespace fs = std::filesystem;

namespace {

NetConfig tiny_config(std::size_t sources = 1) {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.num_labels = 2;
  cfg.num_sources = sources;
  cfg.conv_filters = {3, 4, 3};
  cfg.conv_kernels = {8, 5, 3};
  cfg.domain_widths = {4, 4, 4};
  return cfg;
}

fs::path temp_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "codats_ckpt_test" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DomainData make_domain(std::uint32_t id, std::uint64_t seed) {
  SynthSpec spec;
  spec.num_labels = 2;
  spec.channels = 2;
  spec.length = 12;
  spec.examples_per_label = 25;
  spec.base_freqs = {1.0, 2.5};
  spec.noise_std = 0.2;
  spec.domains[0] = {1.4, 0.6, {}, {}};
  spec.domains[1] = {};
  DomainDataset full = synth_generate(spec, id, seed);
  auto [pool, test] = stratified_split(full, 0.8, seed + 1);
  auto [train, val] = stratified_split(pool, 0.8, seed + 2);
  DomainData dom;
  dom.train = std::move(train);
  dom.val = std::move(val);
  dom.test = std::move(test);
  fit_apply_normalizer(dom.train, {&dom.val, &dom.test});
  return dom;
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("save and load round trip bit-identically") {
  const NetConfig cfg = tiny_config();
  Rng init_rng(5);
  ParamStore<float> params = init_params<float>(cfg, init_rng);
  AdamState<float> adam = AdamState<float>::for_params(params);
  // dirty the state so the round trip is non-trivial
  Rng noise(9);
  for (auto& e : params.entries) {
    for (auto& v : e.value.values) v += static_cast<float>(noise.uniform(-0.1, 0.1));
  }
  for (auto& m : adam.m) {
    for (auto& v : m.values) v = static_cast<float>(noise.uniform(-1, 1));
  }
  adam.timestep = 77;
  params.bn[1].running_mean[0] = 0.25f;
  Rng train_rng(1234);
  train_rng.uniform();  // advance past the seed state

  const fs::path path = temp_dir("roundtrip") / "state.ckpt";
  save_checkpoint(path, make_checkpoint(params, adam, 4000, train_rng, true, 2000, 0.875));
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.iteration == 4000);
  CHECK(back.adam_timestep == 77);
  CHECK(back.has_best);
  CHECK(back.best_iteration == 2000);
  CHECK(back.best_metric == 0.875);

  ParamStore<float> restored = init_params<float>(cfg, init_rng);
  AdamState<float> restored_adam = AdamState<float>::for_params(restored);
  restore_checkpoint(back, restored, restored_adam);
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    CHECK(restored.entries[i].value.values == params.entries[i].value.values);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(restored.bn[i].running_mean.values == params.bn[i].running_mean.values);
    CHECK(restored.bn[i].running_var.values == params.bn[i].running_var.values);
  }
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    CHECK(restored_adam.m[i].values == adam.m[i].values);
    CHECK(restored_adam.v[i].values == adam.v[i].values);
  }
  CHECK(Rng::deserialize(back.rng_state) == train_rng);
}

TEST_CASE("wrong version and truncation are explicit errors") {
  const fs::path dir = temp_dir("corrupt");
  const NetConfig cfg = tiny_config();
  Rng rng(2);
  ParamStore<float> params = init_params<float>(cfg, rng);
  AdamState<float> adam = AdamState<float>::for_params(params);
  const fs::path path = dir / "good.ckpt";
  save_checkpoint(path, make_checkpoint(params, adam, 1, Rng(1), false, 0, 0.0));

  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    bytes = ss.str();
  }

  std::string wrong_version = bytes;
  wrong_version[4] = 99;
  { std::ofstream os(dir / "version.ckpt", std::ios::binary); os << wrong_version; }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint(dir / "version.ckpt")),
                       doctest::Contains("version"), std::runtime_error);

  { std::ofstream os(dir / "short.ckpt", std::ios::binary); os << bytes.substr(0, 40); }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint(dir / "short.ckpt")),
                       doctest::Contains("truncated"), std::runtime_error);

  std::string wrong_magic = bytes;
  wrong_magic[0] = 'Z';
  { std::ofstream os(dir / "magic.ckpt", std::ios::binary); os << wrong_magic; }
  CHECK_THROWS_AS(static_cast<void>(load_checkpoint(dir / "magic.ckpt")), std::runtime_error);
}

TEST_CASE("restore rejects a mismatched network configuration") {
  const fs::path dir = temp_dir("mismatch");
  Rng rng(3);
  ParamStore<float> params = init_params<float>(tiny_config(1), rng);
  AdamState<float> adam = AdamState<float>::for_params(params);
  const fs::path path = dir / "n1.ckpt";
  save_checkpoint(path, make_checkpoint(params, adam, 1, Rng(1), false, 0, 0.0));

  // different head width (two sources -> three domain outputs)
  Rng rng2(3);
  ParamStore<float> other = init_params<float>(tiny_config(2), rng2);
  AdamState<float> other_adam = AdamState<float>::for_params(other);
  const Checkpoint ckpt = load_checkpoint(path);
  CHECK_THROWS_AS(restore_checkpoint(ckpt, other, other_adam), std::runtime_error);
}

TEST_CASE("resume reproduces the loss trajectory bit-exactly") {
  const DomainData source = make_domain(1, 11);
  const DomainData target = make_domain(0, 12);
  const NetConfig nc = tiny_config();

  TrainConfig tc;
  tc.method = TrainMethod::Codats;
  tc.iterations = 8;
  tc.eval_interval = 4;
  tc.batch_size = 16;
  tc.learning_rate = 1e-3;
  tc.seed = 31;

  const fs::path dir_a = temp_dir("resume_a");
  const TrainResult<float> full_run = train_loop<float>(tc, nc, {source}, target, nullptr, dir_a);

  const Checkpoint mid = load_checkpoint(dir_a / "iter4.ckpt");
  CHECK(mid.iteration == 4);
  const fs::path dir_b = temp_dir("resume_b");
  const TrainResult<float> resumed = train_loop<float>(tc, nc, {source}, target, &mid, dir_b);

  // steps 5..8 must match the uninterrupted run exactly
  REQUIRE(resumed.step_losses.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(resumed.step_losses[i].total == full_run.step_losses[4 + i].total);
    CHECK(resumed.step_losses[i].task == full_run.step_losses[4 + i].task);
    CHECK(resumed.step_losses[i].domain == full_run.step_losses[4 + i].domain);
  }
  for (std::size_t i = 0; i < full_run.final_params.entries.size(); ++i) {
    CHECK(resumed.final_params.entries[i].value.values ==
          full_run.final_params.entries[i].value.values);
  }
}

TEST_SUITE_END();
