#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stagin {

// Dense row-major double matrix for the non-differentiable numerics
// (correlation, GLM, clustering, covariance sampling).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), d(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int i, int j) { return d[static_cast<size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return d[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return d.size(); }

  Mat transposed() const {
    Mat t(cols, rows);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
  }
};

// Deterministic RNG. mt19937_64 gives a standardized bit stream; the
// derived draws below are hand-rolled so output does not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // uniform in [0,1)
  double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform in (0,1]
  double u01_pos() { return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53; }

  // standard normal via Box-Muller (no cached second value)
  double normal() {
    double u1 = u01_pos();
    double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // uniform integer in [0, n), rejection sampled
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// printf-style %.17g formatting shared by every serializer so that
// reruns with the same seed produce byte-identical files.
std::string fmt_g17(double x);

}  // namespace stagin
