#pragma once

// Portable checkpoint format ("NTF") for named weight/bias tensors, plus
// layer-by-layer alignment of two checkpoints.
//
// Layout (all integers little-endian):
//   [0, 4)        magic "NTF1"
//   [4, 12)       u64 header length H
//   [12, 12 + H)  UTF-8 JSON header
//   [12 + H, ..)  concatenated f32 payload, tensors in header order
//
// Header: {"format_version":1,"metadata":{...},"tensors":[{"name","kind",
// "layer","shape","offset","length"}...]}; offset/length count floats.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <iterator>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tunescope/error.hpp"

namespace tunescope {

enum class TensorKind { weight, bias };

inline std::string_view to_string(TensorKind kind) {
  return kind == TensorKind::weight ? "weight" : "bias";
}

inline TensorKind parse_tensor_kind(std::string_view text) {
  if (text == "weight") return TensorKind::weight;
  if (text == "bias") return TensorKind::bias;
  throw Error("unknown tensor kind \"" + std::string(text) + "\"");
}

// "conv1.weight" -> "conv1"; "a.b.c" -> "a.b"; "scale" -> "scale".
inline std::string layer_of(std::string_view tensor_name) {
  const auto dot = tensor_name.rfind('.');
  return std::string(dot == std::string_view::npos ? tensor_name : tensor_name.substr(0, dot));
}

struct NamedTensor {
  std::string name;
  TensorKind kind = TensorKind::weight;
  std::string layer;
  std::vector<std::size_t> shape;
  std::vector<float> values;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  bool operator==(const NamedTensor&) const = default;
};

// Derives layer from the name prefix and kind from a trailing "bias".
inline NamedTensor make_tensor(std::string name, std::vector<std::size_t> shape,
                               std::vector<float> values) {
  NamedTensor t;
  t.layer = layer_of(name);
  const auto dot = name.rfind('.');
  const std::string_view suffix =
      dot == std::string::npos ? std::string_view(name) : std::string_view(name).substr(dot + 1);
  t.kind = suffix == "bias" ? TensorKind::bias : TensorKind::weight;
  t.name = std::move(name);
  t.shape = std::move(shape);
  t.values = std::move(values);
  return t;
}

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  int format_version = kFormatVersion;
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::string> metadata;

  const NamedTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  // Distinct layer ids in first-appearance (serialized) order.
  std::vector<std::string> layer_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : tensors)
      if (std::find(ids.begin(), ids.end(), t.layer) == ids.end()) ids.push_back(t.layer);
    return ids;
  }

  std::vector<const NamedTensor*> layer_tensors(std::string_view layer) const {
    std::vector<const NamedTensor*> out;
    for (const auto& t : tensors)
      if (t.layer == layer) out.push_back(&t);
    return out;
  }

  bool operator==(const Checkpoint&) const = default;
};

// Throws naming the first tensor that violates a checkpoint invariant.
inline void validate(const Checkpoint& ckpt) {
  std::set<std::string_view> names;
  for (const auto& t : ckpt.tensors) {
    if (!names.insert(t.name).second) throw Error("duplicate tensor name \"" + t.name + "\"");
    if (t.shape.empty() || std::any_of(t.shape.begin(), t.shape.end(), [](auto d) { return d == 0; }))
      throw Error("tensor \"" + t.name + "\" has an empty or zero dimension");
    if (t.element_count() != t.values.size())
      throw Error("tensor \"" + t.name + "\": shape holds " + std::to_string(t.element_count()) +
                  " elements but " + std::to_string(t.values.size()) + " values are present");
    for (float v : t.values)
      if (!std::isfinite(v)) throw Error("tensor \"" + t.name + "\" contains a non-finite value");
  }
}

namespace detail {

inline constexpr std::array<char, 4> kNtfMagic{'N', 'T', 'F', '1'};

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::string at_byte(std::size_t offset) { return " (at byte " + std::to_string(offset) + ")"; }

}  // namespace detail

// Serializes to the NTF layout. Returns the number of bytes written.
inline std::size_t write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  validate(ckpt);

  nlohmann::json header;
  header["format_version"] = ckpt.format_version;
  header["metadata"] = nlohmann::json::object();
  for (const auto& [k, v] : ckpt.metadata) header["metadata"][k] = v;
  header["tensors"] = nlohmann::json::array();

  std::string payload;
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    header["tensors"].push_back({{"name", t.name},
                                 {"kind", to_string(t.kind)},
                                 {"layer", t.layer},
                                 {"shape", t.shape},
                                 {"offset", offset},
                                 {"length", t.values.size()}});
    offset += t.values.size();
    for (float v : t.values) detail::put_f32_le(payload, v);
  }

  const std::string header_text = header.dump();
  out.write(detail::kNtfMagic.data(), detail::kNtfMagic.size());
  detail::put_u64_le(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error("failed to write NTF stream");
  return 12 + header_text.size() + payload.size();
}

inline std::string checkpoint_bytes(const Checkpoint& ckpt) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(ckpt, out);
  return std::move(out).str();
}

inline Checkpoint read_checkpoint(std::istream& in) {
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());

  if (bytes.size() < 4 || std::memcmp(data, detail::kNtfMagic.data(), 4) != 0)
    throw Error("not an NTF file: bad magic" + detail::at_byte(0));
  if (bytes.size() < 12)
    throw Error("header length mismatch: file ends before the header length field" + detail::at_byte(4));

  const std::uint64_t header_len = detail::get_u64_le(data + 4);
  if (header_len > bytes.size() - 12)
    throw Error("header length mismatch: declared " + std::to_string(header_len) + " bytes, " +
                std::to_string(bytes.size() - 12) + " available" + detail::at_byte(12));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed NTF header: ") + e.what() + detail::at_byte(12));
  }

  const std::size_t payload_start = 12 + header_len;
  const std::size_t payload_bytes = bytes.size() - payload_start;

  Checkpoint ckpt;
  std::set<std::string> seen;
  std::size_t expected_floats = 0;
  try {
    ckpt.format_version = header.at("format_version").get<int>();
    if (ckpt.format_version != Checkpoint::kFormatVersion)
      throw Error("unsupported NTF format_version " + std::to_string(ckpt.format_version) + detail::at_byte(12));
    for (const auto& [k, v] : header.at("metadata").items()) ckpt.metadata[k] = v.get<std::string>();

    std::size_t declared_floats = 0;
    for (const auto& entry : header.at("tensors")) declared_floats += entry.at("length").get<std::size_t>();
    if (4 * declared_floats != payload_bytes)
      throw Error("payload length mismatch: expected " + std::to_string(4 * declared_floats) +
                  " bytes, actual " + std::to_string(payload_bytes) + detail::at_byte(payload_start));

    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.kind = parse_tensor_kind(entry.at("kind").get<std::string>());
      t.layer = entry.at("layer").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      const std::size_t byte_pos = payload_start + 4 * offset;
      if (!seen.insert(t.name).second)
        throw Error("duplicate tensor name \"" + t.name + "\"" + detail::at_byte(byte_pos));
      if (offset != expected_floats)
        throw Error("tensor \"" + t.name + "\" offset " + std::to_string(offset) +
                    " is not contiguous (expected " + std::to_string(expected_floats) + ")" +
                    detail::at_byte(byte_pos));
      if (t.element_count() != length)
        throw Error("tensor \"" + t.name + "\" length " + std::to_string(length) +
                    " disagrees with its shape" + detail::at_byte(byte_pos));
      expected_floats += length;
      t.values.resize(length);
      for (std::size_t i = 0; i < length; ++i) t.values[i] = detail::get_f32_le(data + byte_pos + 4 * i);
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed NTF header: ") + e.what() + detail::at_byte(12));
  }

  validate(ckpt);
  return ckpt;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Layer pairing
// ---------------------------------------------------------------------------

struct LayerPair {
  std::string layer;
  std::vector<const NamedTensor*> from_a;
  std::vector<const NamedTensor*> from_b;  // same names and shapes, in from_a order
};

struct UnmatchedLayer {
  std::string layer;
  std::string reason;
};

// Holds pointers into the two checkpoints; they must outlive the pairing.
struct LayerPairing {
  std::vector<LayerPair> pairs;
  std::vector<UnmatchedLayer> unmatched_a;
  std::vector<UnmatchedLayer> unmatched_b;
};

// Pairs layers by identical id, in `a`'s layer order. Layers in `exclude`
// are dropped from both sides. Layers present on both sides whose tensor
// names or shapes disagree go to both unmatched lists.
inline LayerPairing pair_layers(const Checkpoint& a, const Checkpoint& b,
                                const std::set<std::string>& exclude = {}) {
  LayerPairing out;
  const auto ids_a = a.layer_ids();
  const auto ids_b = b.layer_ids();
  auto contains = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };

  for (const auto& id : ids_a) {
    if (exclude.count(id)) continue;
    if (!contains(ids_b, id)) {
      out.unmatched_a.push_back({id, "missing in other checkpoint"});
      continue;
    }
    const auto ta = a.layer_tensors(id);
    const auto tb = b.layer_tensors(id);
    LayerPair pair{id, ta, {}};
    std::string problem;
    if (ta.size() != tb.size()) problem = "tensor set mismatch";
    for (const auto* t : ta) {
      if (!problem.empty()) break;
      auto it = std::find_if(tb.begin(), tb.end(), [&](const NamedTensor* u) { return u->name == t->name; });
      if (it == tb.end()) {
        problem = "tensor set mismatch";
      } else if ((*it)->shape != t->shape) {
        problem = "shape mismatch";
      } else {
        pair.from_b.push_back(*it);
      }
    }
    if (problem.empty()) {
      out.pairs.push_back(std::move(pair));
    } else {
      out.unmatched_a.push_back({id, problem});
      out.unmatched_b.push_back({id, problem});
    }
  }
  for (const auto& id : ids_b) {
    if (exclude.count(id) || contains(ids_a, id)) continue;
    out.unmatched_b.push_back({id, "missing in other checkpoint"});
  }
  return out;
}

}  // namespace tunescope
