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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensdiag/hash.hpp"
#include "ensdiag/model.hpp"

namespace ensdiag {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Provenance carried in a checkpoint header next to the config.
struct CheckpointMeta {
  std::size_t member = 0;
  std::uint64_t data_seed = 0;
  std::string tokenizer_hash;
  std::string train_hash;
  std::string config_hash;
  std::vector<double> epoch_losses;
};

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"model_dim", c.model_dim},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"ffn_dim", c.ffn_dim},
          {"dropout", c.dropout},       {"weight_seed", c.weight_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.weight_seed = j.at("weight_seed").get<std::uint64_t>();
  return c;
}

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'E', 'N', 'S', 'D', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

inline void put_u64(std::string& buf, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buf.append(b, 8);
}
inline std::uint64_t get_u64(const std::string& buf, std::size_t at) {
  std::uint64_t v;
  std::memcpy(&v, buf.data() + at, 8);
  return v;
}
}  // namespace detail

/// Layout: magic (8 bytes) | header length (u64) | JSON header | tensor
/// payloads as little-endian float64 in header order | FNV-1a of everything
/// before it (u64).
inline std::string encode_checkpoint(const ModelParams& params, const CheckpointMeta& meta) {
  nlohmann::ordered_json h;
  h["format"] = "ensdiag-checkpoint";
  h["version"] = detail::kCheckpointVersion;
  h["member"] = meta.member;
  h["data_seed"] = meta.data_seed;
  h["weight_seed"] = params.config.weight_seed;
  h["tokenizer_hash"] = meta.tokenizer_hash;
  h["train_hash"] = meta.train_hash;
  h["config_hash"] = meta.config_hash;
  h["epoch_losses"] = meta.epoch_losses;
  h["config"] = config_to_json(params.config);
  auto tensors = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : params.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.value.shape}, {"group", to_string(t.group)}, {"layer", t.layer},
                       {"offset", offset}});
    offset += t.value.size() * sizeof(double);
  }
  h["tensors"] = std::move(tensors);
  const std::string header = h.dump();

  std::string buf(detail::kCheckpointMagic, 8);
  detail::put_u64(buf, header.size());
  buf += header;
  for (const auto& t : params.tensors)
    buf.append(reinterpret_cast<const char*>(t.value.values.data()), t.value.size() * sizeof(double));
  detail::put_u64(buf, fnv1a(buf));
  return buf;
}

struct LoadedCheckpoint {
  ModelParams params;
  CheckpointMeta meta;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& buf) {
  if (buf.size() < 24 || std::memcmp(buf.data(), detail::kCheckpointMagic, 8) != 0)
    throw CheckpointError("not an ensdiag checkpoint");
  const std::uint64_t stored = detail::get_u64(buf, buf.size() - 8);
  if (fnv1a(std::string_view(buf).substr(0, buf.size() - 8)) != stored) throw CheckpointError("checkpoint checksum mismatch");
  const std::uint64_t header_len = detail::get_u64(buf, 8);
  if (16 + header_len + 8 > buf.size()) throw CheckpointError("truncated checkpoint header");
  const auto h = nlohmann::json::parse(buf.substr(16, header_len));
  if (h.value("version", 0) != detail::kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");

  LoadedCheckpoint out;
  out.meta.member = h.at("member").get<std::size_t>();
  out.meta.data_seed = h.at("data_seed").get<std::uint64_t>();
  out.meta.tokenizer_hash = h.at("tokenizer_hash").get<std::string>();
  out.meta.train_hash = h.at("train_hash").get<std::string>();
  out.meta.config_hash = h.at("config_hash").get<std::string>();
  out.meta.epoch_losses = h.at("epoch_losses").get<std::vector<double>>();
  out.params = init_params(config_from_json(h.at("config")));

  const std::size_t payload = 16 + header_len;
  const auto& entries = h.at("tensors");
  if (entries.size() != out.params.tensors.size()) throw CheckpointError("checkpoint tensor count does not match its config");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = out.params.tensors[i];
    if (entries[i].at("name").get<std::string>() != t.name ||
        entries[i].at("shape").get<std::vector<std::size_t>>() != t.value.shape)
      throw CheckpointError("checkpoint tensor '" + t.name + "' does not match the layout");
    const std::size_t at = payload + entries[i].at("offset").get<std::size_t>();
    const std::size_t bytes = t.value.size() * sizeof(double);
    if (at + bytes > buf.size() - 8) throw CheckpointError("truncated tensor payload for '" + t.name + "'");
    std::memcpy(t.value.values.data(), buf.data() + at, bytes);
  }
  return out;
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write '" + tmp.string() + "'");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const CheckpointMeta& meta) {
  write_file_atomic(path, encode_checkpoint(params, meta));
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace ensdiag
