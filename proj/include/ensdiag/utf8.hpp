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

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ensdiag::utf8 {

/// Length in bytes of the well-formed code point starting at s[pos], or
/// nullopt when the bytes there are not valid UTF-8 (overlongs, surrogates
/// and values above U+10FFFF are rejected).
inline std::optional<std::size_t> sequence_length(std::string_view s, std::size_t pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  std::size_t len = 0;
  unsigned lo = 0x80, hi = 0xBF;
  if (b0 < 0x80) return 1;
  if (b0 >= 0xC2 && b0 <= 0xDF) {
    len = 2;
  } else if (b0 >= 0xE0 && b0 <= 0xEF) {
    len = 3;
    if (b0 == 0xE0) lo = 0xA0;
    if (b0 == 0xED) hi = 0x9F;
  } else if (b0 >= 0xF0 && b0 <= 0xF4) {
    len = 4;
    if (b0 == 0xF0) lo = 0x90;
    if (b0 == 0xF4) hi = 0x8F;
  } else {
    return std::nullopt;
  }
  if (pos + len > s.size()) return std::nullopt;
  for (std::size_t i = 1; i < len; ++i) {
    const auto b = static_cast<unsigned char>(s[pos + i]);
    const unsigned l = (i == 1) ? lo : 0x80;
    const unsigned h = (i == 1) ? hi : 0xBF;
    if (b < l || b > h) return std::nullopt;
  }
  return len;
}

/// Byte offset of the first invalid sequence, or nullopt if `s` is valid.
inline std::optional<std::size_t> first_invalid(std::string_view s) {
  std::size_t pos = 0;
  while (pos < s.size()) {
    auto len = sequence_length(s, pos);
    if (!len) return pos;
    pos += *len;
  }
  return std::nullopt;
}

/// Splits valid UTF-8 into one string per code point.
inline std::vector<std::string> code_points(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const std::size_t len = sequence_length(s, pos).value_or(1);
    out.emplace_back(s.substr(pos, len));
    pos += len;
  }
  return out;
}

}  // namespace ensdiag::utf8
