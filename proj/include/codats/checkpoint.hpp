#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "codats/net.hpp"
#include "codats/optim.hpp"
#include "codats/rng.hpp"
#include "codats/tsdb.hpp"

namespace codats {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Lossless training snapshot: parameters and batch-norm running state by
// name, optimizer moments, iteration, generator state, and the best-so-far
// selection record. Values are stored as 64-bit floats, so 32-bit training
// state round-trips bit-exactly.
struct Checkpoint {
  std::uint64_t iteration = 0;
  std::vector<std::pair<std::string, Tensor<double>>> tensors;
  std::uint64_t adam_timestep = 0;
  std::vector<std::pair<std::string, Tensor<double>>> adam_m;
  std::vector<std::pair<std::string, Tensor<double>>> adam_v;
  std::string rng_state;
  bool has_best = false;
  std::uint64_t best_iteration = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
};

namespace detail {

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto len = read_le<std::uint32_t>(is, "string length");
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw std::runtime_error("truncated file reading string");
  return s;
}

inline void write_tensor_record(std::ostream& os, const std::string& name,
                                const Tensor<double>& t) {
  write_string(os, name);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape) write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (double v : t.values) write_le<double>(os, v);
}

inline std::pair<std::string, Tensor<double>> read_tensor_record(std::istream& is) {
  std::string name = read_string(is);
  const auto rank = read_le<std::uint32_t>(is, "tensor rank");
  Shape shape(rank);
  for (auto& e : shape) e = read_le<std::uint32_t>(is, "tensor extent");
  Tensor<double> t(shape);
  for (double& v : t.values) v = read_le<double>(is, "tensor values");
  return {std::move(name), std::move(t)};
}

inline void write_record_list(std::ostream& os,
                              const std::vector<std::pair<std::string, Tensor<double>>>& list) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(list.size()));
  for (const auto& [name, t] : list) write_tensor_record(os, name, t);
}

inline std::vector<std::pair<std::string, Tensor<double>>> read_record_list(std::istream& is) {
  const auto count = read_le<std::uint32_t>(is, "record count");
  std::vector<std::pair<std::string, Tensor<double>>> list;
  list.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) list.push_back(read_tensor_record(is));
  return list;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  os.write("CKPT", 4);
  detail::write_le<std::uint16_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, ckpt.iteration);
  detail::write_record_list(os, ckpt.tensors);
  detail::write_le<std::uint64_t>(os, ckpt.adam_timestep);
  detail::write_record_list(os, ckpt.adam_m);
  detail::write_record_list(os, ckpt.adam_v);
  detail::write_string(os, ckpt.rng_state);
  detail::write_le<std::uint8_t>(os, ckpt.has_best ? 1 : 0);
  detail::write_le<std::uint64_t>(os, ckpt.best_iteration);
  detail::write_le<double>(os, ckpt.best_metric);
  detail::write_file_atomic(path, os.str());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CKPT", 4) != 0) {
    throw std::runtime_error(path.string() + ": not a checkpoint file");
  }
  const auto version = detail::read_le<std::uint16_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                             std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.iteration = detail::read_le<std::uint64_t>(is, "iteration");
  ckpt.tensors = detail::read_record_list(is);
  ckpt.adam_timestep = detail::read_le<std::uint64_t>(is, "adam timestep");
  ckpt.adam_m = detail::read_record_list(is);
  ckpt.adam_v = detail::read_record_list(is);
  ckpt.rng_state = detail::read_string(is);
  ckpt.has_best = detail::read_le<std::uint8_t>(is, "selection flag") != 0;
  ckpt.best_iteration = detail::read_le<std::uint64_t>(is, "selection iteration");
  ckpt.best_metric = detail::read_le<double>(is, "selection metric");
  return ckpt;
}

template <typename T>
Checkpoint make_checkpoint(const ParamStore<T>& params, const AdamState<T>& adam,
                           std::uint64_t iteration, const Rng& rng, bool has_best,
                           std::uint64_t best_iteration, double best_metric) {
  Checkpoint ckpt;
  ckpt.iteration = iteration;
  for (const auto& e : params.entries) {
    ckpt.tensors.emplace_back(e.name, e.value.template cast<double>());
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string tag = "f.bn" + std::to_string(i);
    ckpt.tensors.emplace_back(tag + ".running_mean", params.bn[i].running_mean.template cast<double>());
    ckpt.tensors.emplace_back(tag + ".running_var", params.bn[i].running_var.template cast<double>());
  }
  ckpt.adam_timestep = adam.timestep;
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    ckpt.adam_m.emplace_back(params.entries[i].name, adam.m[i].template cast<double>());
    ckpt.adam_v.emplace_back(params.entries[i].name, adam.v[i].template cast<double>());
  }
  ckpt.rng_state = rng.serialize();
  ckpt.has_best = has_best;
  ckpt.best_iteration = best_iteration;
  ckpt.best_metric = best_metric;
  return ckpt;
}

// Restores parameters, batch-norm state, and optimizer moments into an
// existing store. Names and shapes must match the store exactly.
template <typename T>
void restore_checkpoint(const Checkpoint& ckpt, ParamStore<T>& params, AdamState<T>& adam) {
  const std::size_t expect = params.entries.size() + 6;  // 3 bn pairs
  if (ckpt.tensors.size() != expect) {
    throw std::runtime_error("checkpoint: tensor count " + std::to_string(ckpt.tensors.size()) +
                             " does not match network (" + std::to_string(expect) + ")");
  }
  auto assign = [](Tensor<T>& dst, const std::string& name, const Tensor<double>& src) {
    if (dst.shape != src.shape) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < src.numel(); ++i) dst[i] = static_cast<T>(src[i]);
  };
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.ends_with(".running_mean") || name.ends_with(".running_var")) {
      const bool is_mean = name.ends_with(".running_mean");
      bool found = false;
      for (std::size_t i = 0; i < 3; ++i) {
        if (name == "f.bn" + std::to_string(i) + (is_mean ? ".running_mean" : ".running_var")) {
          assign(is_mean ? params.bn[i].running_mean : params.bn[i].running_var, name, t);
          found = true;
        }
      }
      if (!found) throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
    } else {
      assign(params.value(name), name, t);  // throws on unknown name
    }
  }
  if (ckpt.adam_m.size() != params.entries.size() || ckpt.adam_v.size() != params.entries.size()) {
    throw std::runtime_error("checkpoint: optimizer state does not match network");
  }
  adam = AdamState<T>::for_params(params);
  adam.timestep = ckpt.adam_timestep;
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    const std::size_t idx = params.index_of(ckpt.adam_m[i].first);
    assign(adam.m[idx], ckpt.adam_m[i].first, ckpt.adam_m[i].second);
    const std::size_t idx_v = params.index_of(ckpt.adam_v[i].first);
    assign(adam.v[idx_v], ckpt.adam_v[i].first, ckpt.adam_v[i].second);
  }
}

}  // namespace codats
