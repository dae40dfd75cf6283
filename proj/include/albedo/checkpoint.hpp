#pragma once

#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/error.hpp"
#include "albedo/hash.hpp"

namespace albedo {

inline constexpr const char* kCheckpointFormat = "albedo-ckpt-1";

// Hash over the architecture description and the raw float parameter bytes.
// Provenance is metadata and deliberately left out, so a zero-step fine-tune
// hashes equal to its base.
inline std::string params_hash(const nlohmann::json& arch, std::span<const float> params) {
  Sha256 h;
  h.update(arch.dump());
  h.update_values(params);
  return h.hex();
}

inline std::string encode_params(std::span<const float> params) {
  return base64_encode(std::as_bytes(params));
}

inline std::vector<float> decode_params(const std::string& text, std::size_t expected) {
  auto bytes = base64_decode(text);
  require(bytes.size() == expected * sizeof(float), ErrorCode::io, "checkpoint: parameter blob has wrong length");
  std::vector<float> out(expected);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j, int indent = 2) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path);
  out << j.dump(indent) << "\n";
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::not_found, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::io, "malformed JSON in " + path + ": " + e.what());
  }
}

}  // namespace albedo
