// Copyright 2026 The ensdiag Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

namespace ensdiag {

/// Exactly rounded floating-point summation (Shewchuk partials with the
/// final half-even correction used by Python's math.fsum). The result is
/// independent of the order in which terms are added.
class ExactSum {
 public:
  void add(double x) {
    std::size_t i = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[i++] = lo;
      x = hi;
    }
    partials_.resize(i);
    partials_.push_back(x);
  }

  void add(const ExactSum& other) {
    for (double p : other.partials_) add(p);
  }

  double value() const {
    std::size_t n = partials_.size();
    if (n == 0) return 0.0;
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      const double yr = hi - x;
      lo = y - yr;
      if (lo != 0.0) break;
    }
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      const double yr = x - hi;
      if (y == yr) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

template <typename Range>
double exact_sum(const Range& r) {
  ExactSum s;
  for (double v : r) s.add(v);
  return s.value();
}

/// Many independent exact sums of nonnegative terms. Each stream keeps a
/// 256-bit fixed-point window placed around its first term; terms outside
/// the window go to a per-stream ExactSum. Results equal ExactSum bitwise.
class NonnegativeSums {
 public:
  explicit NonnegativeSums(std::size_t n) : base_(n, kUnset), limbs_(n) {}

  std::size_t size() const { return base_.size(); }

  void add(std::size_t i, double x) {
    if (x == 0.0) return;
    const auto bits = std::bit_cast<std::uint64_t>(x);
    const int e = static_cast<int>(bits >> 52);
    if ((bits >> 63) || e == 0x7ff) {
      overflow_[i].add(x);
      return;
    }
    const std::uint64_t m = e == 0 ? bits : (bits & kMantissa) | (kMantissa + 1);
    const int offset = e == 0 ? 0 : e - 1;  // x = m * 2^(offset - 1074)
    const int limb = offset / 32;
    if (base_[i] == kUnset) base_[i] = static_cast<std::int16_t>(limb - 3);
    const int pos = limb - base_[i];
    if (pos < 0 || pos + 2 >= kLimbs) {
      overflow_[i].add(x);
      return;
    }
    const unsigned __int128 shifted = static_cast<unsigned __int128>(m) << (offset % 32);
    auto& w = limbs_[i];
    w[pos] += static_cast<std::uint32_t>(shifted);
    w[pos + 1] += static_cast<std::uint32_t>(shifted >> 32);
    w[pos + 2] += static_cast<std::uint64_t>(shifted >> 64);
  }

  double value(std::size_t i) const {
    ExactSum s;
    if (base_[i] != kUnset) {
      std::uint64_t carry = 0;
      for (int k = 0; k < kLimbs; ++k) {
        const std::uint64_t v = limbs_[i][k] + carry;  // limbs stay below 2^63 for < 2^31 terms
        carry = v >> 32;
        s.add(std::ldexp(static_cast<double>(v & 0xffffffffu), 32 * (base_[i] + k) - 1074));
      }
      for (int k = kLimbs; carry != 0; ++k, carry >>= 32)
        s.add(std::ldexp(static_cast<double>(carry & 0xffffffffu), 32 * (base_[i] + k) - 1074));
    }
    if (auto it = overflow_.find(i); it != overflow_.end()) s.add(it->second);
    return s.value();
  }

 private:
  static constexpr int kLimbs = 8;
  static constexpr std::int16_t kUnset = INT16_MIN;
  static constexpr std::uint64_t kMantissa = (std::uint64_t{1} << 52) - 1;

  std::vector<std::int16_t> base_;
  std::vector<std::array<std::uint64_t, kLimbs>> limbs_;
  std::unordered_map<std::size_t, ExactSum> overflow_;
};

}  // namespace ensdiag
