#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "codats/config.hpp"
#include "codats/data.hpp"
#include "codats/train.hpp"
#include "codats/tsdb.hpp"

namespace codats {

using ordered_json = nlohmann::ordered_json;

// Full description of one experiment: data per domain, adaptation method,
// training schedule, and repetition count. Seeds derive as base seed +
// repetition index.
struct ExperimentConfig {
  enum class DataKind { Synth, Tsdb, Csv };

  std::string name = "experiment";
  TrainMethod method = TrainMethod::Codats;
  std::filesystem::path output_root;
  std::size_t repetitions = 3;
  std::vector<std::uint32_t> source_ids;
  std::uint32_t target_id = 0;
  TrainConfig train;
  NetConfig net;  // channel/label counts are filled from the data
  DataKind kind = DataKind::Synth;
  std::map<std::uint32_t, std::filesystem::path> domain_paths;
  SynthSpec synth;
  std::uint64_t data_seed = 9000;

  void validate() const {
    if (name.empty()) throw std::runtime_error("config: experiment.name: must not be empty");
    for (std::uint32_t s : source_ids) {
      if (s == target_id) {
        throw std::runtime_error("config: experiment.target: target domain " +
                                 std::to_string(target_id) + " is listed among the sources");
      }
    }
    for (std::size_t a = 0; a < source_ids.size(); ++a) {
      for (std::size_t b = a + 1; b < source_ids.size(); ++b) {
        if (source_ids[a] == source_ids[b]) {
          throw std::runtime_error("config: experiment.sources: domain id " +
                                   std::to_string(source_ids[a]) + " appears twice");
        }
      }
    }
    if (source_ids.empty() && method != TrainMethod::TargetOnly) {
      throw std::runtime_error("config: experiment.sources: need at least one source domain");
    }
    if (repetitions < 1) throw std::runtime_error("config: experiment.repetitions: must be >= 1");
  }

  static std::filesystem::path default_output_root() {
    if (const char* env = std::getenv("CODATS_OUTPUT_ROOT")) return env;
    return "runs";
  }

  static ExperimentConfig from_config(const Config& cfg) {
    ExperimentConfig ec;
    ec.name = cfg.get_string("experiment", "name");
    ec.method = parse_method(cfg.get_string("experiment", "method"));
    ec.output_root = cfg.get_string("experiment", "output", default_output_root().string());
    ec.repetitions = check_positive(cfg.get_int("experiment", "repetitions", 3),
                                    "experiment.repetitions");
    ec.target_id = static_cast<std::uint32_t>(
        check_non_negative(cfg.get_int("experiment", "target"), "experiment.target"));
    if (cfg.has("experiment", "sources")) {
      for (long v : cfg.get_int_list("experiment", "sources")) {
        ec.source_ids.push_back(
            static_cast<std::uint32_t>(check_non_negative(v, "experiment.sources")));
      }
    }

    ec.train.iterations = check_positive(cfg.get_int("train", "iterations", 30000),
                                         "train.iterations");
    ec.train.learning_rate = cfg.get_double("train", "learning_rate", 1e-4);
    ec.train.batch_size = check_positive(cfg.get_int("train", "batch_size", 128),
                                         "train.batch_size");
    ec.train.eval_interval = check_positive(cfg.get_int("train", "eval_interval", 4000),
                                            "train.eval_interval");
    ec.train.grl_gamma = cfg.get_double("train", "grl_gamma", 10.0);
    const std::string sched = cfg.get_string("train", "grl_schedule", "dann");
    if (sched == "constant") {
      ec.train.grl_constant = true;
      ec.train.grl_constant_value = cfg.get_double("train", "grl_lambda", 1.0);
    } else if (sched != "dann") {
      throw std::runtime_error("config: train.grl_schedule: expected 'dann' or 'constant', got '" +
                               sched + "'");
    }
    ec.train.seed = static_cast<std::uint64_t>(
        check_non_negative(cfg.get_int("train", "seed", 1), "train.seed"));
    const std::string sel = cfg.get_string("train", "model_selection", "target-val");
    if (sel == "target-val") {
      ec.train.selection = SelectionMode::TargetVal;
    } else if (sel == "source-val") {
      ec.train.selection = SelectionMode::SourceVal;
    } else {
      throw std::runtime_error(
          "config: train.model_selection: expected 'target-val' or 'source-val', got '" + sel +
          "'");
    }
    if (cfg.has("train", "policy")) {
      const std::string pol = cfg.get_string("train", "policy");
      if (pol == "single-source") {
        ec.train.policy = BatchPolicy::SingleSource;
      } else if (pol == "multi-source-even") {
        ec.train.policy = BatchPolicy::MultiSourceEven;
      } else if (pol == "daws-half-target") {
        ec.train.policy = BatchPolicy::DawsHalfTarget;
      } else if (pol != "auto") {
        throw std::runtime_error("config: train.policy: unknown policy '" + pol + "'");
      }
    }
    ec.train.method = ec.method;

    if (cfg.has_section("net")) {
      auto read3 = [&](const char* key, std::array<std::size_t, 3>& into) {
        if (!cfg.has("net", key)) return;
        const auto list = cfg.get_int_list("net", key);
        if (list.size() != 3) {
          throw std::runtime_error("config: net." + std::string(key) + ": expected 3 entries");
        }
        for (std::size_t i = 0; i < 3; ++i) {
          into[i] = check_positive(list[i], "net." + std::string(key));
        }
      };
      read3("filters", ec.net.conv_filters);
      read3("kernels", ec.net.conv_kernels);
      read3("domain_widths", ec.net.domain_widths);
      ec.net.dropout_rate = cfg.get_double("net", "dropout", 0.3);
    }

    const std::string kind = cfg.get_string("data", "kind", "synth");
    ec.data_seed = static_cast<std::uint64_t>(
        check_non_negative(cfg.get_int("data", "seed", 9000), "data.seed"));
    if (kind == "synth") {
      ec.kind = DataKind::Synth;
      ec.synth = parse_synth(cfg, ec);
    } else if (kind == "tsdb" || kind == "csv") {
      ec.kind = kind == "tsdb" ? DataKind::Tsdb : DataKind::Csv;
      std::vector<std::uint32_t> all_ids = ec.source_ids;
      all_ids.push_back(ec.target_id);
      for (std::uint32_t id : all_ids) {
        const std::string key = "domain" + std::to_string(id);
        ec.domain_paths[id] = cfg.get_string("data", key);
      }
    } else {
      throw std::runtime_error("config: data.kind: expected synth, tsdb, or csv, got '" + kind +
                               "'");
    }

    ec.validate();
    return ec;
  }

 private:
  static std::size_t check_positive(long v, const std::string& field) {
    if (v < 1) throw std::runtime_error("config: " + field + ": must be >= 1");
    return static_cast<std::size_t>(v);
  }

  static long check_non_negative(long v, const std::string& field) {
    if (v < 0) throw std::runtime_error("config: " + field + ": must be >= 0");
    return v;
  }

  static SynthSpec parse_synth(const Config& cfg, const ExperimentConfig& ec) {
    SynthSpec spec;
    spec.num_labels = check_positive(cfg.get_int("synth", "labels", 4), "synth.labels");
    spec.channels = check_positive(cfg.get_int("synth", "channels", 3), "synth.channels");
    spec.length = check_positive(cfg.get_int("synth", "length", 64), "synth.length");
    spec.examples_per_label = check_positive(cfg.get_int("synth", "examples_per_label", 100),
                                             "synth.examples_per_label");
    spec.noise_std = cfg.get_double("synth", "noise_std", 0.3);
    if (cfg.has("synth", "freqs")) {
      spec.base_freqs = cfg.get_double_list("synth", "freqs");
    } else {
      for (std::size_t i = 0; i < spec.num_labels; ++i) {
        spec.base_freqs.push_back(1.0 + 0.5 * static_cast<double>(i));
      }
    }
    std::vector<std::uint32_t> all_ids = ec.source_ids;
    all_ids.push_back(ec.target_id);
    for (std::uint32_t id : all_ids) {
      const std::string sec = "synth.domain" + std::to_string(id);
      SynthSpec::DomainShift shift;
      shift.amplitude = cfg.get_double(sec, "amplitude", 1.0);
      shift.phase = cfg.get_double(sec, "phase", 0.0);
      if (cfg.has(sec, "scale")) shift.channel_scale = cfg.get_double_list(sec, "scale");
      if (cfg.has(sec, "proportions")) shift.proportions = cfg.get_double_list(sec, "proportions");
      spec.domains[id] = shift;
    }
    spec.validate();
    return spec;
  }
};

// ---- dataset assembly ------------------------------------------------------

inline DomainDataset load_domain(const ExperimentConfig& ec, std::uint32_t domain_id) {
  switch (ec.kind) {
    case ExperimentConfig::DataKind::Synth:
      return synth_generate(ec.synth, domain_id, ec.data_seed + domain_id);
    case ExperimentConfig::DataKind::Tsdb: {
      DomainDataset ds = load_tsdb(ec.domain_paths.at(domain_id));
      if (ds.domain_id != domain_id) {
        throw std::runtime_error("data: file for domain " + std::to_string(domain_id) +
                                 " carries domain id " + std::to_string(ds.domain_id));
      }
      return ds;
    }
    case ExperimentConfig::DataKind::Csv:
      return load_csv(ec.domain_paths.at(domain_id), domain_id);
  }
  throw std::logic_error("unreachable");
}

// Splits 80/20 into pool/test and the pool 80/20 again into train/val,
// stratified by label, then normalizes every split with statistics fitted on
// the training split only. Split seeds depend on the data seed and domain id,
// not the repetition, so repetitions differ only in network initialization
// and batch sampling.
inline DomainData prepare_domain(const ExperimentConfig& ec, std::uint32_t domain_id) {
  DomainDataset full = load_domain(ec, domain_id);
  const std::uint64_t split_seed = ec.data_seed ^ (0x5bd1e995ULL * (domain_id + 1));
  auto [pool, test] = stratified_split(full, 0.8, split_seed);
  auto [train, val] = stratified_split(pool, 0.8, split_seed + 1);
  DomainData dom;
  dom.train = std::move(train);
  dom.val = std::move(val);
  dom.test = std::move(test);
  fit_apply_normalizer(dom.train, {&dom.val, &dom.test});
  return dom;
}

struct PreparedData {
  std::vector<DomainData> sources;
  DomainData target;
};

inline PreparedData prepare_all_domains(const ExperimentConfig& ec) {
  PreparedData data;
  for (std::uint32_t id : ec.source_ids) data.sources.push_back(prepare_domain(ec, id));
  data.target = prepare_domain(ec, ec.target_id);
  return data;
}

// ---- run summary ------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  std::uint64_t best_iteration = 0;
  double best_metric = 0.0;
  // accuracies keyed "domain<id>.<split>"
  std::map<std::string, double> best_accuracy;
  std::map<std::string, double> final_accuracy;
  double best_target_test_accuracy = 0.0;
  double step_time_mean_s = 0.0;
  double step_time_std_s = 0.0;
};

struct RunSummary {
  std::string experiment;
  std::string method;
  std::size_t n_sources = 0;
  std::vector<SeedResult> seeds;
  double mean_best_target_test = 0.0;
  double std_best_target_test = 0.0;
  std::filesystem::path run_dir;
};

namespace detail {

inline std::string render_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text);
}

}  // namespace detail

// Re-emits a run directory's records: one JSON object per metrics record into
// metrics.jsonl and a per-seed summary CSV. Fails on missing or truncated
// inputs.
inline void emit_metrics(const std::filesystem::path& run_dir) {
  if (!std::filesystem::exists(run_dir / "summary.json")) {
    throw std::runtime_error("emit_metrics: missing " + (run_dir / "summary.json").string());
  }
  ordered_json summary;
  {
    std::ifstream is(run_dir / "summary.json");
    try {
      is >> summary;
    } catch (const std::exception& e) {
      throw std::runtime_error("emit_metrics: bad summary.json: " + std::string(e.what()));
    }
  }
  const auto& seeds = summary.at("seeds");

  std::ostringstream combined;
  for (const auto& seed_entry : seeds) {
    const std::uint64_t seed = seed_entry.at("seed").get<std::uint64_t>();
    const std::filesystem::path seed_metrics =
        run_dir / ("seed" + std::to_string(seed)) / "metrics.jsonl";
    std::ifstream is(seed_metrics);
    if (!is) throw std::runtime_error("emit_metrics: missing " + seed_metrics.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      ordered_json rec;
      try {
        rec = ordered_json::parse(line);
      } catch (const std::exception&) {
        throw std::runtime_error("emit_metrics: " + seed_metrics.string() + ":" +
                                 std::to_string(line_no) + ": truncated or malformed record");
      }
      for (const char* key :
           {"iteration", "split", "domain", "accuracy", "task_loss", "domain_loss", "kl_term",
            "wall_time"}) {
        if (!rec.contains(key)) {
          throw std::runtime_error("emit_metrics: " + seed_metrics.string() + ":" +
                                   std::to_string(line_no) + ": missing key '" + key + "'");
        }
      }
      rec["seed"] = seed;
      combined << rec.dump() << "\n";
    }
  }
  detail::write_text_atomic(run_dir / "metrics.jsonl", combined.str());

  std::ostringstream csv;
  csv << "method,n_sources,seed,best_target_test_accuracy,step_time_mean_s\n";
  for (const auto& seed_entry : seeds) {
    csv << summary.at("method").get<std::string>() << ","
        << summary.at("n_sources").get<std::size_t>() << ","
        << seed_entry.at("seed").get<std::uint64_t>() << ","
        << detail::render_double(seed_entry.at("best_target_test_accuracy").get<double>()) << ","
        << detail::render_double(seed_entry.at("step_time_mean_s").get<double>()) << "\n";
  }
  detail::write_text_atomic(run_dir / "summary.csv", csv.str());
}

// Full experiment: for each repetition, build the data, train, checkpoint the
// selected candidate, evaluate, and append records; finally aggregate across
// seeds and emit metrics files.
inline RunSummary run_experiment(const ExperimentConfig& ec) {
  ec.validate();
  const std::filesystem::path run_dir = ec.output_root / ec.name;
  std::filesystem::create_directories(run_dir);

  PreparedData data = prepare_all_domains(ec);
  const std::size_t L = data.target.train.num_labels;
  const std::size_t K = data.target.train.channels;

  NetConfig nc = ec.net;
  nc.in_channels = K;
  nc.num_labels = L;
  nc.num_sources = std::max<std::size_t>(ec.source_ids.size(), 1);
  nc.validate();

  RunSummary summary;
  summary.experiment = ec.name;
  summary.method = to_string(ec.method);
  summary.n_sources = ec.source_ids.size();
  summary.run_dir = run_dir;

  for (std::size_t rep = 0; rep < ec.repetitions; ++rep) {
    TrainConfig tc = ec.train;
    tc.method = ec.method;
    tc.seed = ec.train.seed + rep;

    const std::filesystem::path seed_dir = run_dir / ("seed" + std::to_string(tc.seed));
    std::filesystem::create_directories(seed_dir);

    TrainResult<float> tr = train_loop<float>(tc, nc, data.sources, data.target);

    SeedResult sr;
    sr.seed = tc.seed;
    sr.best_iteration = tr.best_iteration;
    sr.best_metric = tr.best_metric;
    sr.step_time_mean_s = tr.step_seconds_mean;
    sr.step_time_std_s = tr.step_seconds_std;

    auto record_accuracy = [&](ParamStore<float>& params, std::map<std::string, double>& into) {
      auto one = [&](const DomainData& dom) {
        const DomainDataset* splits[3] = {&dom.train, &dom.val, &dom.test};
        const char* names[3] = {"train", "val", "test"};
        for (int s = 0; s < 3; ++s) {
          into["domain" + std::to_string(splits[s]->domain_id) + "." + names[s]] =
              evaluate_accuracy(params, *splits[s]).accuracy;
        }
      };
      one(data.target);
      for (const DomainData& src : data.sources) one(src);
    };
    record_accuracy(tr.best_params, sr.best_accuracy);
    record_accuracy(tr.final_params, sr.final_accuracy);
    sr.best_target_test_accuracy =
        sr.best_accuracy.at("domain" + std::to_string(ec.target_id) + ".test");

    // metrics records for this seed
    std::ostringstream jsonl;
    for (const MetricsRecord& rec : tr.metrics) {
      ordered_json j;
      j["iteration"] = rec.iteration;
      j["split"] = rec.split;
      j["domain"] = rec.domain;
      j["accuracy"] = rec.accuracy;
      j["task_loss"] = rec.task_loss;
      j["domain_loss"] = rec.domain_loss;
      j["kl_term"] = rec.kl_term;
      j["wall_time"] = rec.wall_time;
      jsonl << j.dump() << "\n";
    }
    detail::write_text_atomic(seed_dir / "metrics.jsonl", jsonl.str());

    save_checkpoint(seed_dir / "best.ckpt",
                    make_checkpoint(tr.best_params, tr.final_adam, tr.best_iteration, Rng(tc.seed),
                                    true, tr.best_iteration, tr.best_metric));
    summary.seeds.push_back(std::move(sr));
  }

  double sum = 0.0, sq = 0.0;
  for (const SeedResult& sr : summary.seeds) {
    sum += sr.best_target_test_accuracy;
    sq += sr.best_target_test_accuracy * sr.best_target_test_accuracy;
  }
  const double count = static_cast<double>(summary.seeds.size());
  summary.mean_best_target_test = sum / count;
  summary.std_best_target_test =
      std::sqrt(std::max(0.0, sq / count - summary.mean_best_target_test * summary.mean_best_target_test));

  ordered_json sj;
  sj["experiment"] = summary.experiment;
  sj["method"] = summary.method;
  sj["n_sources"] = summary.n_sources;
  sj["target"] = ec.target_id;
  sj["repetitions"] = ec.repetitions;
  sj["mean_best_target_test_accuracy"] = summary.mean_best_target_test;
  sj["std_best_target_test_accuracy"] = summary.std_best_target_test;
  sj["seeds"] = ordered_json::array();
  for (const SeedResult& sr : summary.seeds) {
    ordered_json j;
    j["seed"] = sr.seed;
    j["best_iteration"] = sr.best_iteration;
    j["best_metric"] = sr.best_metric;
    j["best_target_test_accuracy"] = sr.best_target_test_accuracy;
    j["best_accuracy"] = sr.best_accuracy;
    j["final_accuracy"] = sr.final_accuracy;
    j["step_time_mean_s"] = sr.step_time_mean_s;
    j["step_time_std_s"] = sr.step_time_std_s;
    sj["seeds"].push_back(j);
  }
  detail::write_text_atomic(run_dir / "summary.json", sj.dump(2) + "\n");

  emit_metrics(run_dir);
  return summary;
}

}  // namespace codats
