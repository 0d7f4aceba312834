#pragma once

// Checkpoint container: "FXCK" magic, version, JSON manifest (parameter
// names, shapes, roles, byte offsets, descriptor, hashes, round index),
// then a raw little-endian 32-bit float payload. Round-trips are bitwise.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedx/data.hpp"
#include "fedx/encoder.hpp"

namespace fedx {

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(s.data(), s.size())));
  return buf;
}

inline nlohmann::json descriptor_to_json(const EncoderDescriptor& d) {
  return {{"input_dim", d.input_dim},   {"hidden", d.hidden},
          {"embed_dim", d.embed_dim},   {"proj_hidden", d.proj_hidden},
          {"activation", d.activation}, {"norm_hidden", d.norm_hidden},
          {"norm_output", d.norm_output}, {"with_predictor", d.with_predictor}};
}

inline EncoderDescriptor descriptor_from_json(const nlohmann::json& j) {
  EncoderDescriptor d;
  d.input_dim = j.at("input_dim").get<std::size_t>();
  d.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  d.embed_dim = j.at("embed_dim").get<std::size_t>();
  d.proj_hidden = j.at("proj_hidden").get<std::size_t>();
  d.activation = j.at("activation").get<std::string>();
  d.norm_hidden = j.at("norm_hidden").get<bool>();
  d.norm_output = j.at("norm_output").get<bool>();
  d.with_predictor = j.at("with_predictor").get<bool>();
  return d;
}

inline ParamRole role_from_name(const std::string& s) {
  if (s == "backbone") return ParamRole::backbone;
  if (s == "projection_head") return ParamRole::projection_head;
  if (s == "predictor") return ParamRole::predictor;
  throw std::runtime_error("checkpoint: unknown role " + s);
}

template <typename T>
struct Checkpoint {
  ModelParams<T> params;
  std::size_t round = 0;
  std::string config_hash;
  std::string descriptor_hash;
};

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::string& path, std::size_t round,
                     const std::string& config_hash) {
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["round"] = round;
  manifest["config_hash"] = config_hash;
  manifest["descriptor"] = descriptor_to_json(params.descriptor());
  manifest["descriptor_hash"] = fnv1a64_hex(params.descriptor().to_string());
  std::vector<float> payload;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& p : params.params()) {
    plist.push_back({{"name", p.name},
                     {"role", role_name(p.role)},
                     {"shape", p.tensor.shape()},
                     {"offset", payload.size() * sizeof(float)}});
    for (auto v : p.tensor.value()) payload.push_back(float(v));
  }
  manifest["params"] = plist;
  manifest["payload_bytes"] = payload.size() * sizeof(float);
  std::string mtext = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write("FXCK", 4);
  detail::write_pod(os, std::uint32_t{1});
  detail::write_pod(os, std::uint64_t(mtext.size()));
  os.write(mtext.data(), std::streamsize(mtext.size()));
  os.write(reinterpret_cast<const char*>(payload.data()),
           std::streamsize(payload.size() * sizeof(float)));
  if (!os) throw std::runtime_error("checkpoint: write failure on " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FXCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (detail::read_pod<std::uint32_t>(is, "version") != 1)
    throw std::runtime_error("checkpoint: unsupported version");
  auto mlen = detail::read_pod<std::uint64_t>(is, "manifest length");
  std::string mtext(mlen, '\0');
  is.read(mtext.data(), std::streamsize(mlen));
  if (!is) throw std::runtime_error("checkpoint: truncated manifest");
  auto manifest = nlohmann::json::parse(mtext);

  Checkpoint<T> ck;
  ck.round = manifest.at("round").get<std::size_t>();
  ck.config_hash = manifest.at("config_hash").get<std::string>();
  ck.descriptor_hash = manifest.at("descriptor_hash").get<std::string>();
  auto desc = descriptor_from_json(manifest.at("descriptor"));
  if (ck.descriptor_hash != fnv1a64_hex(desc.to_string()))
    throw std::runtime_error("checkpoint: descriptor hash mismatch");

  std::size_t payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
  std::vector<float> payload(payload_bytes / sizeof(float));
  is.read(reinterpret_cast<char*>(payload.data()), std::streamsize(payload_bytes));
  if (!is) throw std::runtime_error("checkpoint: truncated payload");

  ck.params.set_descriptor(desc);
  std::size_t expected_offset = 0;
  for (const auto& pj : manifest.at("params")) {
    auto name = pj.at("name").get<std::string>();
    auto shape = pj.at("shape").get<Shape>();
    auto offset = pj.at("offset").get<std::size_t>();
    if (offset != expected_offset)
      throw std::runtime_error("checkpoint: manifest offsets not contiguous at " + name);
    std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > payload_bytes)
      throw std::runtime_error("checkpoint: payload overrun at " + name);
    std::vector<T> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = T(payload[offset / sizeof(float) + i]);
    ck.params.add(name, role_from_name(pj.at("role").get<std::string>()),
                  Tensor<T>::constant(shape, std::move(vals)));
    expected_offset += n * sizeof(float);
  }
  if (expected_offset != payload_bytes)
    throw std::runtime_error("checkpoint: manifest does not cover payload");
  return ck;
}

}  // namespace fedx
