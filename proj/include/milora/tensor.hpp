// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace milora {

// ---------------------------------------------------------------------------
// Error hierarchy. Every failure mode surfaces as a typed exception so
// callers (and the CLI) can map them to distinct exit behaviour.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  enum class Kind {
    NotFound,
    BadMagic,
    VersionMismatch,
    Truncated,
    ChecksumMismatch,
    InvalidDims,
    Malformed,
  };
  Kind kind;
  IoError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Eager NaN/Inf detection after every op. On by default; heavy production
// loops may switch it off once a configuration has been gradient-checked.
inline bool& finite_checks_enabled() {
  static bool enabled = true;
  return enabled;
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major array with an explicit shape. The only value type
// that crosses module boundaries. No views, no strides; copies are cheap at
// the sizes this library targets.
// ---------------------------------------------------------------------------
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  // 2D convenience constructor from nested initializer data.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix initializer");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Row-major element access for the ranks used in this library.
  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  T& operator()(std::size_t o, std::size_t c, std::size_t i, std::size_t j) {
    return data_[((o * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  const T& operator()(std::size_t o, std::size_t c, std::size_t i,
                      std::size_t j) const {
    return data_[((o * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void require_finite(std::string_view context) const {
    if (!finite_checks_enabled()) return;
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(static_cast<double>(data_[i]))) {
        throw NumericError(std::string(context) + ": non-finite value at index " +
                           std::to_string(i));
      }
    }
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. The engine is std::mt19937_64 (fully specified by the
// standard); all value mappings are explicit so streams are bit-identical
// across platforms. Standard-library distributions are deliberately avoided.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  // Independent stream for a named tensor; insensitive to draw order.
  static Rng for_name(std::uint64_t seed, std::string_view name) {
    return Rng(splitmix64(seed ^ fnv1a(name)));
  }

  std::uint64_t next_u64() { return eng_(); }

  double uniform() {  // [0, 1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller with the spare discarded: deterministic and stateless.
    double u1 = uniform();
    double u2 = uniform();
    u1 = std::max(u1, 0x1.0p-60);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::size_t below(std::size_t n) {
    // Rejection-free modulo is fine here: n is tiny relative to 2^64.
    return static_cast<std::size_t>(eng_() % n);
  }

  template <class It>
  void shuffle(It first, It last) {
    // Fisher-Yates with our own index draws (std::shuffle is unspecified).
    auto n = static_cast<std::size_t>(std::distance(first, last));
    for (std::size_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

template <class T>
Tensor<T> randn(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <class T>
Tensor<T> rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace milora
