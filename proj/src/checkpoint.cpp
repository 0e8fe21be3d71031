#include "protostream/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

#include "protostream/errors.hpp"

namespace protostream {
namespace {

using nlohmann::json;

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int base64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

std::string encoder_kind_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::identity: return "identity";
    case EncoderKind::linear: return "linear";
    case EncoderKind::mlp: return "mlp";
  }
  throw ValidationError("checkpoint: unknown encoder kind");
}

EncoderKind encoder_kind_from(const std::string& s) {
  if (s == "identity") return EncoderKind::identity;
  if (s == "linear") return EncoderKind::linear;
  if (s == "mlp") return EncoderKind::mlp;
  throw ValidationError("checkpoint: unknown encoder kind \"" + s + "\"");
}

const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw ValidationError(std::string("checkpoint: missing field \"") + key + "\"");
  return j.at(key);
}

std::string require_string(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_string())
    throw ValidationError(std::string("checkpoint: field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

std::int64_t require_int(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_number_integer())
    throw ValidationError(std::string("checkpoint: field \"") + key + "\" must be an integer");
  return v.get<std::int64_t>();
}

std::string checksum_hex(const json& doc_without_checksum) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(doc_without_checksum.dump())));
  return buf;
}

}  // namespace

std::string base64_encode(const std::uint8_t* data, std::size_t n) {
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(data[i]) << 16;
    if (i + 1 < n) chunk |= static_cast<std::uint32_t>(data[i + 1]) << 8;
    if (i + 2 < n) chunk |= data[i + 2];
    out.push_back(kAlphabet[(chunk >> 18) & 63]);
    out.push_back(kAlphabet[(chunk >> 12) & 63]);
    out.push_back(i + 1 < n ? kAlphabet[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? kAlphabet[chunk & 63] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0)
    throw ValidationError("base64: length must be a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int pad = 0;
    std::uint32_t chunk = 0;
    for (int k = 0; k < 4; ++k) {
      char c = text[i + k];
      if (c == '=') {
        if (i + 4 != text.size() || k < 2) throw ValidationError("base64: stray padding");
        ++pad;
        chunk <<= 6;
        continue;
      }
      if (pad > 0) throw ValidationError("base64: data after padding");
      int v = base64_value(c);
      if (v < 0) throw ValidationError(std::string("base64: invalid character '") + c + "'");
      chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
    }
    out.push_back(static_cast<std::uint8_t>((chunk >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((chunk >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(chunk & 0xff));
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string encode_doubles(const Eigen::VectorXd& v) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(v.size()) * 8);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b)
      bytes[static_cast<std::size_t>(i) * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return base64_encode(bytes.data(), bytes.size());
}

Eigen::VectorXd decode_doubles(const std::string& b64, const std::string& what) {
  std::vector<std::uint8_t> bytes = base64_decode(b64);
  if (bytes.size() % 8 != 0)
    throw ValidationError("checkpoint: " + what + " has a truncated float64 payload");
  Eigen::VectorXd v(static_cast<Eigen::Index>(bytes.size() / 8));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i) * 8 + b]) << (8 * b);
    v[i] = std::bit_cast<double>(bits);
  }
  return v;
}

nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  json j;
  j["kind"] = "checkpoint";
  j["format_version"] = c.format_version;
  j["step"] = c.step;
  const EncoderConfig& e = c.params.enc;
  j["encoder"] = {{"kind", encoder_kind_name(e.kind)},
                  {"input_dim", e.input_dim},
                  {"output_dim", e.output_dim},
                  {"hidden_dim", e.hidden_dim},
                  {"activation", e.activation == Activation::tanh ? "tanh" : "relu"}};
  j["tau_ratio"] = c.params.tau_ratio;
  j["params"] = encode_doubles(flatten(c.params));
  j["adam_m"] = encode_doubles(c.adam_m);
  j["adam_v"] = encode_doubles(c.adam_v);
  j["adam_t"] = c.adam_t;
  if (c.has_memory) {
    const PrototypeMemory<double>& m = c.memory;
    Eigen::Index d = m.size() > 0 ? m.protos[0].mean.size() : 0;
    Eigen::VectorXd means(static_cast<Eigen::Index>(m.size()) * d);
    Eigen::VectorXd counts(m.size());
    for (int i = 0; i < m.size(); ++i) {
      counts[i] = m.protos[static_cast<std::size_t>(i)].count;
      for (Eigen::Index k = 0; k < d; ++k)
        means[i * d + k] = m.protos[static_cast<std::size_t>(i)].mean[k];
    }
    j["memory"] = {{"capacity", m.cfg.capacity},
                   {"rho", m.cfg.rho},
                   {"alpha", m.cfg.alpha},
                   {"decay_on_create", m.cfg.decay_on_create},
                   {"dim", d},
                   {"means", encode_doubles(means)},
                   {"counts", encode_doubles(counts)},
                   {"ids", m.ids},
                   {"next_id", m.next_id}};
  } else {
    j["memory"] = nullptr;
  }
  j["config"] = c.config_echo;
  j["checksum"] = checksum_hex(j);
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("checkpoint: expected a JSON object");
  if (require_string(j, "kind") != "checkpoint")
    throw ValidationError("checkpoint: not a checkpoint document");
  json body = j;
  std::string stored = require_string(j, "checksum");
  body.erase("checksum");
  std::string actual = checksum_hex(body);
  if (stored != actual)
    throw ValidationError("checkpoint: checksum mismatch (stored " + stored + ", computed " +
                          actual + ")");

  Checkpoint c;
  c.format_version = static_cast<int>(require_int(j, "format_version"));
  if (c.format_version != kCheckpointFormatVersion)
    throw ValidationError("checkpoint: unsupported format_version " +
                          std::to_string(c.format_version));
  c.step = require_int(j, "step");

  const json& enc = require(j, "encoder");
  EncoderConfig e;
  e.kind = encoder_kind_from(require_string(enc, "kind"));
  e.input_dim = static_cast<int>(require_int(enc, "input_dim"));
  e.output_dim = static_cast<int>(require_int(enc, "output_dim"));
  e.hidden_dim = static_cast<int>(require_int(enc, "hidden_dim"));
  std::string act = require_string(enc, "activation");
  if (act != "tanh" && act != "relu")
    throw ValidationError("checkpoint: unknown activation \"" + act + "\"");
  e.activation = act == "tanh" ? Activation::tanh : Activation::relu;
  validate_encoder(e);

  c.params.enc = e;
  if (e.kind == EncoderKind::linear) {
    c.params.w1.resize(e.output_dim, e.input_dim);
    c.params.b1.resize(e.output_dim);
  } else if (e.kind == EncoderKind::mlp) {
    c.params.w1.resize(e.hidden_dim, e.input_dim);
    c.params.b1.resize(e.hidden_dim);
    c.params.w2.resize(e.output_dim, e.hidden_dim);
    c.params.b2.resize(e.output_dim);
  }
  const json& ratio = require(j, "tau_ratio");
  if (!ratio.is_number()) throw ValidationError("checkpoint: tau_ratio must be a number");
  c.params.tau_ratio = ratio.get<double>();

  Eigen::VectorXd flat = decode_doubles(require_string(j, "params"), "params");
  if (flat.size() != param_count(e))
    throw ValidationError("checkpoint: params has " + std::to_string(flat.size()) +
                          " values, encoder expects " + std::to_string(param_count(e)));
  unflatten(c.params, flat);

  c.adam_m = decode_doubles(require_string(j, "adam_m"), "adam_m");
  c.adam_v = decode_doubles(require_string(j, "adam_v"), "adam_v");
  if (c.adam_m.size() != flat.size() || c.adam_v.size() != flat.size())
    throw ValidationError("checkpoint: optimizer moment sizes do not match params");
  c.adam_t = require_int(j, "adam_t");

  const json& mem = require(j, "memory");
  if (!mem.is_null()) {
    c.has_memory = true;
    c.memory.cfg.capacity = static_cast<int>(require_int(mem, "capacity"));
    c.memory.cfg.rho = require(mem, "rho").get<double>();
    c.memory.cfg.alpha = require(mem, "alpha").get<double>();
    c.memory.cfg.decay_on_create = require(mem, "decay_on_create").get<bool>();
    Eigen::Index d = require_int(mem, "dim");
    Eigen::VectorXd means = decode_doubles(require_string(mem, "means"), "memory.means");
    Eigen::VectorXd counts = decode_doubles(require_string(mem, "counts"), "memory.counts");
    if (d < 0 || (d == 0 && counts.size() > 0) || (d > 0 && means.size() != counts.size() * d))
      throw ValidationError("checkpoint: memory means/counts shapes disagree");
    const json& ids = require(mem, "ids");
    if (!ids.is_array() || static_cast<Eigen::Index>(ids.size()) != counts.size())
      throw ValidationError("checkpoint: memory ids must match the prototype count");
    c.memory.protos.resize(static_cast<std::size_t>(counts.size()));
    c.memory.ids.clear();
    for (Eigen::Index i = 0; i < counts.size(); ++i) {
      c.memory.protos[static_cast<std::size_t>(i)].count = counts[i];
      c.memory.protos[static_cast<std::size_t>(i)].mean = means.segment(i * d, d);
      if (!ids[static_cast<std::size_t>(i)].is_number_integer())
        throw ValidationError("checkpoint: memory ids must be integers");
      c.memory.ids.push_back(ids[static_cast<std::size_t>(i)].get<std::int64_t>());
    }
    c.memory.next_id = require_int(mem, "next_id");
  }

  c.config_echo = require(j, "config");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << checkpoint_to_json(c).dump(2) << "\n";
  if (!out) throw IoError("failed while writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError("checkpoint: malformed JSON in " + path);
  return checkpoint_from_json(j);
}

}  // namespace protostream
