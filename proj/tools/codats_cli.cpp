#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "codats/experiment.hpp"
#include "codats/verify.hpp"

namespace fs = std::filesystem;
using codats::ExperimentConfig;

namespace {

ExperimentConfig load_experiment(const std::string& config_path, const std::string& method,
                                 long seed, const std::string& output) {
  ExperimentConfig ec = ExperimentConfig::from_config(codats::Config::parse_file(config_path));
  if (!method.empty()) {
    ec.method = codats::parse_method(method);
    ec.train.method = ec.method;
  }
  if (seed >= 0) ec.train.seed = static_cast<std::uint64_t>(seed);
  if (!output.empty()) ec.output_root = output;
  ec.validate();
  return ec;
}

int cmd_synth(const ExperimentConfig& ec) {
  if (ec.kind != ExperimentConfig::DataKind::Synth) {
    throw std::runtime_error("synth: config must use data.kind = synth");
  }
  const fs::path out_dir = ec.output_root / ec.name / "data";
  fs::create_directories(out_dir);
  std::vector<std::uint32_t> ids = ec.source_ids;
  ids.push_back(ec.target_id);
  for (std::uint32_t id : ids) {
    const codats::DomainDataset ds = codats::load_domain(ec, id);
    const fs::path path = out_dir / ("domain" + std::to_string(id) + ".tsdb");
    codats::save_tsdb(path, ds);
    std::cout << path.string() << "  windows=" << ds.num_windows << " H=" << ds.length
              << " K=" << ds.channels << " L=" << ds.num_labels << "\n";
  }
  return 0;
}

int cmd_train(const ExperimentConfig& ec) {
  const codats::RunSummary summary = codats::run_experiment(ec);
  std::cout << "experiment " << summary.experiment << " (" << summary.method
            << ", n=" << summary.n_sources << ")\n";
  for (const codats::SeedResult& sr : summary.seeds) {
    std::cout << "  seed " << sr.seed << ": best target test accuracy "
              << sr.best_target_test_accuracy << " (candidate at iteration " << sr.best_iteration
              << ", step mean " << sr.step_time_mean_s << " s)\n";
  }
  std::cout << "  mean " << summary.mean_best_target_test << " +- " << summary.std_best_target_test
            << "\n";
  std::cout << "  outputs in " << summary.run_dir.string() << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& ec, const std::string& checkpoint_path) {
  codats::PreparedData data = codats::prepare_all_domains(ec);
  codats::NetConfig nc = ec.net;
  nc.in_channels = data.target.train.channels;
  nc.num_labels = data.target.train.num_labels;
  nc.num_sources = std::max<std::size_t>(ec.source_ids.size(), 1);

  codats::Rng rng(ec.train.seed);
  codats::ParamStore<float> params = codats::init_params<float>(nc, rng);
  codats::AdamState<float> adam = codats::AdamState<float>::for_params(params);
  const codats::Checkpoint ckpt = codats::load_checkpoint(checkpoint_path);
  codats::restore_checkpoint(ckpt, params, adam);

  nlohmann::ordered_json report;
  report["checkpoint"] = checkpoint_path;
  report["iteration"] = ckpt.iteration;
  auto eval_domain = [&](const codats::DomainData& dom) {
    const codats::DomainDataset* splits[3] = {&dom.train, &dom.val, &dom.test};
    const char* names[3] = {"train", "val", "test"};
    nlohmann::ordered_json j;
    for (int s = 0; s < 3; ++s) {
      j[names[s]] = codats::evaluate_accuracy(params, *splits[s]).accuracy;
    }
    report["domain" + std::to_string(splits[0]->domain_id)] = j;
  };
  eval_domain(data.target);
  for (const codats::DomainData& src : data.sources) eval_domain(src);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t seeds) {
  std::vector<codats::VerifyCase> cases = codats::run_op_grad_checks(seeds);
  std::vector<codats::VerifyCase> full = codats::run_full_loss_grad_checks(seeds);
  cases.insert(cases.end(), full.begin(), full.end());
  std::size_t failed = 0;
  for (const codats::VerifyCase& c : cases) {
    if (!c.passed) ++failed;
    std::printf("%-55s max rel err %.3e  %s\n", c.name.c_str(), c.max_rel_error,
                c.passed ? "ok" : "FAIL");
  }
  std::printf("%zu checks, %zu failed\n", cases.size(), failed);
  return failed == 0 ? 0 : 1;
}

int cmd_bench(const ExperimentConfig& ec, std::size_t warmup, std::size_t measured) {
  codats::PreparedData data = codats::prepare_all_domains(ec);
  codats::NetConfig nc = ec.net;
  nc.in_channels = data.target.train.channels;
  nc.num_labels = data.target.train.num_labels;
  nc.num_sources = std::max<std::size_t>(ec.source_ids.size(), 1);
  codats::TrainConfig tc = ec.train;
  tc.method = ec.method;
  const codats::BenchResult r =
      codats::bench_step_time<float>(tc, nc, data.sources, data.target, warmup, measured);
  std::cout << codats::to_string(ec.method) << ": " << r.mean_seconds << " +- " << r.std_seconds
            << " s/iteration over " << r.measured << " iterations\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial time-series domain adaptation: experiments and verification"};
  app.require_subcommand(1);

  std::string config_path, method_override, output_override, checkpoint_path;
  long seed_override = -1;
  std::size_t gradcheck_seeds = 5;
  std::size_t bench_warmup = 20, bench_measured = 100;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--method", method_override,
                    "override method (none|codats|codats-ws|target-only)");
    sub->add_option("--seed", seed_override, "override base seed");
    sub->add_option("--output", output_override, "override output root directory");
  };

  CLI::App* synth = app.add_subcommand("synth", "write TSDB dataset files from a synthetic spec");
  add_common(synth);
  CLI::App* train = app.add_subcommand("train", "run the configured experiment");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "re-evaluate a checkpoint on the configured data");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "run the 64-bit finite-difference verification suite");
  gradcheck->add_option("--seeds", gradcheck_seeds, "random seeds per check");
  CLI::App* bench = app.add_subcommand("bench", "measure seconds per training iteration");
  add_common(bench);
  bench->add_option("--warmup", bench_warmup, "warmup iterations");
  bench->add_option("--measured", bench_measured, "measured iterations");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_seeds);
    const ExperimentConfig ec =
        load_experiment(config_path, method_override, seed_override, output_override);
    if (synth->parsed()) return cmd_synth(ec);
    if (train->parsed()) return cmd_train(ec);
    if (eval->parsed()) return cmd_eval(ec, checkpoint_path);
    if (bench->parsed()) return cmd_bench(ec, bench_warmup, bench_measured);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
