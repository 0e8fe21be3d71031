#pragma once

#include <json.hpp>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "protostream/encoder.hpp"
#include "protostream/memory.hpp"
#include "protostream/vec_ops.hpp"

// Versioned JSON checkpoints: parameters and optimizer moments as base64
// little-endian float64 arrays, an optional prototype-memory snapshot, the
// run-config document that produced them, and an FNV-1a content checksum.
// save → load is bit-exact; any byte tampering fails the checksum.

namespace protostream {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::int64_t step = 0;
  ParameterSet params;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  std::int64_t adam_t = 0;
  bool has_memory = false;
  PrototypeMemory<double> memory;
  nlohmann::json config_echo;  // opaque run-config document, stored verbatim
};

std::string base64_encode(const std::uint8_t* data, std::size_t n);
std::vector<std::uint8_t> base64_decode(const std::string& text);
std::uint64_t fnv1a64(std::string_view bytes);

std::string encode_doubles(const Eigen::VectorXd& v);
Eigen::VectorXd decode_doubles(const std::string& b64, const std::string& what);

nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace protostream
