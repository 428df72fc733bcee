#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace codats {

// Seeded generator with a fully specified mapping from engine output to
// uniforms/normals, so streams reproduce bit-exactly and serialize losslessly
// for checkpoint resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; two uniforms per draw, no cached state.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // [0, n)
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("rng: uniform_index over empty range");
    return static_cast<std::size_t>(engine_() % n);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const std::size_t n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[uniform_index(i)]);
    }
  }

  std::uint64_t raw() { return engine_(); }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& state) {
    Rng r(0);
    std::istringstream is(state);
    is >> r.engine_;
    if (is.fail()) throw std::runtime_error("rng: bad serialized state");
    return r;
  }

  bool operator==(const Rng& o) const { return engine_ == o.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace codats
