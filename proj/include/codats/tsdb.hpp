#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "codats/data.hpp"

namespace codats {

// TSDB binary dataset file, version 1:
//   "TSDB", u16 version, u32 N/H/K/L, N*H*K f32 values in (window, step,
//   channel) row-major order, N i32 labels, u32 domain id. All little-endian.
inline constexpr std::uint16_t kTsdbVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  // this codebase targets little-endian hosts
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error(std::string("truncated file reading ") + what);
  return value;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& payload) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline void save_tsdb(const std::filesystem::path& path, const DomainDataset& ds) {
  ds.validate();
  std::ostringstream os(std::ios::binary);
  os.write("TSDB", 4);
  detail::write_le<std::uint16_t>(os, kTsdbVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_windows));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.length));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.channels));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_labels));
  for (float v : ds.x) detail::write_le<float>(os, v);
  for (int lab : ds.y) detail::write_le<std::int32_t>(os, static_cast<std::int32_t>(lab));
  detail::write_le<std::uint32_t>(os, ds.domain_id);
  detail::write_file_atomic(path, os.str());
}

inline DomainDataset load_tsdb(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TSDB", 4) != 0) {
    throw std::runtime_error(path.string() + ": not a TSDB file");
  }
  const auto version = detail::read_le<std::uint16_t>(is, "version");
  if (version != kTsdbVersion) {
    throw std::runtime_error(path.string() + ": unsupported TSDB version " +
                             std::to_string(version));
  }
  DomainDataset ds;
  ds.num_windows = detail::read_le<std::uint32_t>(is, "N");
  ds.length = detail::read_le<std::uint32_t>(is, "H");
  ds.channels = detail::read_le<std::uint32_t>(is, "K");
  ds.num_labels = detail::read_le<std::uint32_t>(is, "L");
  ds.x.resize(ds.num_windows * ds.length * ds.channels);
  for (float& v : ds.x) v = detail::read_le<float>(is, "values");
  ds.y.resize(ds.num_windows);
  for (int& lab : ds.y) lab = detail::read_le<std::int32_t>(is, "labels");
  ds.domain_id = detail::read_le<std::uint32_t>(is, "domain id");
  ds.validate();
  return ds;
}

// CSV import, one file per domain. Header:
//   window_id,step,feature_0,...,feature_{K-1},label
// Rows are grouped by window_id with consecutive steps; every window must
// have the same length. Label symbols are mapped to a sorted 0-based index;
// the window label is the majority row label (ties toward the smaller index).
inline DomainDataset load_csv(const std::filesystem::path& path, std::uint32_t domain_id) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty file");

  auto split = [](const std::string& s) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        fields.push_back(cur);
        cur.clear();
      } else if (ch != '\r') {
        cur += ch;
      }
    }
    fields.push_back(cur);
    return fields;
  };

  const std::vector<std::string> header = split(line);
  if (header.size() < 4 || header[0] != "window_id" || header[1] != "step" ||
      header.back() != "label") {
    throw std::runtime_error(path.string() + ": bad CSV header");
  }
  const std::size_t K = header.size() - 3;
  for (std::size_t c = 0; c < K; ++c) {
    if (header[2 + c] != "feature_" + std::to_string(c)) {
      throw std::runtime_error(path.string() + ": bad feature column '" + header[2 + c] + "'");
    }
  }

  struct Row {
    std::string window_id;
    long step;
    std::vector<float> features;
    std::string label;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line);
    if (f.size() != header.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected " + std::to_string(header.size()) + " fields");
    }
    Row row;
    row.window_id = f[0];
    try {
      row.step = std::stol(f[1]);
      row.features.reserve(K);
      for (std::size_t c = 0; c < K; ++c) row.features.push_back(std::stof(f[2 + c]));
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
    row.label = f.back();
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path.string() + ": no data rows");

  // label symbols -> sorted index
  std::set<std::string> symbols;
  for (const Row& r : rows) symbols.insert(r.label);
  std::map<std::string, int> label_index;
  int next = 0;
  for (const std::string& s : symbols) label_index[s] = next++;

  // group consecutive rows by window id
  struct Window {
    std::vector<float> values;
    std::map<int, std::size_t> label_counts;
    std::size_t steps = 0;
  };
  std::vector<Window> windows;
  std::string current_id;
  for (const Row& r : rows) {
    if (windows.empty() || r.window_id != current_id) {
      current_id = r.window_id;
      windows.emplace_back();
    }
    Window& w = windows.back();
    if (r.step != static_cast<long>(w.steps)) {
      throw std::runtime_error(path.string() + ": window '" + r.window_id +
                               "' has non-consecutive steps");
    }
    w.values.insert(w.values.end(), r.features.begin(), r.features.end());
    ++w.label_counts[label_index[r.label]];
    ++w.steps;
  }

  const std::size_t H = windows.front().steps;
  DomainDataset ds = DomainDataset::empty_like(H, K, symbols.size(), domain_id);
  for (const Window& w : windows) {
    if (w.steps != H) {
      throw std::runtime_error(path.string() + ": windows have differing lengths");
    }
    int best_label = w.label_counts.begin()->first;
    std::size_t best_count = w.label_counts.begin()->second;
    for (const auto& [lab, cnt] : w.label_counts) {
      if (cnt > best_count) {
        best_label = lab;
        best_count = cnt;
      }
    }
    ds.append_window(w.values.data(), best_label);
  }
  ds.validate();
  return ds;
}

}  // namespace codats
