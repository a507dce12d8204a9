// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared numeric types, error hierarchy, and deterministic RNG.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace tyr {

// All in-memory arithmetic is double precision; disk tensors are f32.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

// Caller handed us something malformed (bad shape, bad id, bad flag value).
class InputError : public Error {
 public:
  explicit InputError(const std::string& msg) : Error("input_error", msg) {}
};

// Math went sideways: non-finite values, failed factorization, dead pivot.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric_error", msg) {}
};

// On-disk artifact does not match its own declaration.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format_error", msg) {}
};

// Supernet store is missing or inconsistent.
class StoreError : public Error {
 public:
  explicit StoreError(const std::string& msg) : Error("store_error", msg) {}
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable seed derivation for independent sub-streams (per layer, per
// candidate, per budget, ...). Hash-chains the path onto the base seed.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = base ^ 0xa0761d6478bd642fULL;
  splitmix64(s);
  for (std::uint64_t p : path) {
    s ^= p + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
    splitmix64(s);
  }
  return splitmix64(s);
}

// xoshiro-free deterministic generator: same sequence on every platform and
// standard library, which the byte-identical-rerun guarantee depends on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x6a09e667f3bcc909ULL) {
    // Warm up so nearby seeds decorrelate.
    next();
    next();
  }

  std::uint64_t next() { return splitmix64(state_); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling over the top bits keeps the draw unbiased.
    const std::uint64_t limit = n * ((~0ULL) / n);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (avoids libstdc++-specific streams).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0x1.0p-60) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tyr
