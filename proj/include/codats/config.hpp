#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace codats {

// Sectioned key-value configuration:
//   [section]            # comments with '#' or ';'
//   key = value
//   list = 1,2,3
// Section names may be dotted ([synth.domain0]). Errors carry the
// section.key field path.
class Config {
 public:
  static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
    Config cfg;
    cfg.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const std::string trimmed = trim(strip_comment(line));
      if (trimmed.empty()) continue;
      if (trimmed.front() == '[') {
        if (trimmed.back() != ']' || trimmed.size() < 3) {
          throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": bad section header");
        }
        section = trim(trimmed.substr(1, trimmed.size() - 2));
        cfg.sections_[section];  // register even if empty
        continue;
      }
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw std::runtime_error(origin + ":" + std::to_string(line_no) +
                                 ": expected 'key = value'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": empty key");
      }
      if (section.empty()) {
        throw std::runtime_error(origin + ":" + std::to_string(line_no) +
                                 ": key outside any section");
      }
      auto& sec = cfg.sections_[section];
      if (sec.count(key)) {
        throw std::runtime_error("config: " + section + "." + key + ": duplicate key");
      }
      sec[key] = value;
    }
    return cfg;
  }

  static Config parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file " + path.string());
    std::stringstream buffer;
    buffer << is.rdbuf();
    return parse_string(buffer.str(), path.string());
  }

  bool has_section(const std::string& section) const { return sections_.count(section) > 0; }

  bool has(const std::string& section, const std::string& key) const {
    const auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) > 0;
  }

  std::string get_string(const std::string& section, const std::string& key) const {
    const auto sec = sections_.find(section);
    if (sec == sections_.end() || !sec->second.count(key)) {
      throw std::runtime_error("config: " + section + "." + key + ": missing required field");
    }
    return sec->second.at(key);
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const {
    return has(section, key) ? get_string(section, key) : fallback;
  }

  long get_int(const std::string& section, const std::string& key) const {
    return to_int(section, key, get_string(section, key));
  }

  long get_int(const std::string& section, const std::string& key, long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
  }

  double get_double(const std::string& section, const std::string& key) const {
    return to_double(section, key, get_string(section, key));
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
  }

  std::vector<long> get_int_list(const std::string& section, const std::string& key) const {
    std::vector<long> out;
    for (const std::string& item : split_list(get_string(section, key))) {
      out.push_back(to_int(section, key, item));
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const std::string& item : split_list(get_string(section, key))) {
      out.push_back(to_double(section, key, item));
    }
    return out;
  }

  std::vector<std::string> section_names() const {
    std::vector<std::string> names;
    for (const auto& [name, _] : sections_) names.push_back(name);
    return names;
  }

  const std::map<std::string, std::string>& section(const std::string& name) const {
    const auto it = sections_.find(name);
    if (it == sections_.end()) {
      throw std::runtime_error("config: missing required section [" + name + "]");
    }
    return it->second;
  }

 private:
  static std::string strip_comment(const std::string& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '#' || s[i] == ';') return s.substr(0, i);
    }
    return s;
  }

  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur += ch;
      }
    }
    out.push_back(trim(cur));
    return out;
  }

  static long to_int(const std::string& section, const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config: " + section + "." + key + ": expected integer, got '" +
                               s + "'");
    }
  }

  static double to_double(const std::string& section, const std::string& key,
                          const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config: " + section + "." + key + ": expected number, got '" + s +
                               "'");
    }
  }

  std::string origin_;
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace codats
