#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nmil {

using Shape = std::vector<std::size_t>;

/// Raised whenever tensor extents do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + nmil::to_string(shape_));
    }
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element of a rank-3 [C,H,W] tensor.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + nmil::to_string(shape_) + " to " + nmil::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void check_extents(const Shape& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == 0) {
        throw ShapeError("zero extent in dimension " + std::to_string(i) + " of shape " +
                         nmil::to_string(shape));
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// ---------------------------------------------------------------------------
// Randomness. Every stochastic component takes an explicit Rng; named
// sub-seeds let a component be reproduced without replaying the others.

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives a stable child seed from a parent seed and a name (FNV-1a mixed).
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(parent ^ splitmix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view name, std::uint64_t index) {
  return splitmix64(derive_seed(parent, name) + splitmix64(index));
}

/// Uniform double in [lo, hi). Implemented directly so streams match across standard libraries.
inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  // Reject the top partial block so the modulo is unbiased.
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

}  // namespace nmil
