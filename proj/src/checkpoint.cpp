// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace flora {

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'R', 'A', 'C', 'K', 'P'};

template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

template <typename T>
void write_elements(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      T s = byteswap_if_big(v);
      out.write(reinterpret_cast<const char*>(&s), sizeof(T));
    }
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const std::vector<NamedTensor<T>>& tensors, const Json& meta) {
  Json dir = Json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : tensors) {
    const std::uint64_t bytes = nt.tensor.numel() * sizeof(T);
    dir.push_back(Json{{"name", nt.name},
                       {"shape", nt.tensor.shape()},
                       {"precision", precision_name(precision_of<T>())},
                       {"offset", offset},
                       {"bytes", bytes}});
    offset += bytes;
  }
  Json header{{"format_version", kCheckpointFormatVersion},
              {"config", Json{{"model", to_json(config)}, {"adapter", to_json(config.adapter)}}},
              {"tensors", dir},
              {"meta", meta}};
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = byteswap_if_big<std::uint64_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& nt : tensors) write_elements<T>(out, nt.tensor.data());
  if (!out) throw ConfigError("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ConfigError(path.string() + ": not a checkpoint file");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  len = byteswap_if_big(len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ConfigError(path.string() + ": truncated header");
  Json header;
  try {
    header = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": malformed header: " + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointFormatVersion) {
    throw ConfigError(path.string() + ": unsupported format_version");
  }
  Checkpoint<T> ckpt;
  ckpt.config = model_config_from_json(header.at("config").at("model"), "config.model");
  ckpt.config.adapter = adapter_spec_from_json(header.at("config").at("adapter"), "config.adapter");
  ckpt.meta = header.value("meta", Json::object());
  const auto payload_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string precision = entry.at("precision").get<std::string>();
    if (parse_precision(precision) != precision_of<T>()) {
      throw ConfigError(path.string() + ": tensor '" + name + "' is " + precision + ", expected " +
                        precision_name(precision_of<T>()));
    }
    Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t bytes = entry.at("bytes").get<std::uint64_t>();
    if (bytes != element_count(shape) * sizeof(T)) {
      throw ConfigError(path.string() + ": byte count of '" + name + "' does not match its shape");
    }
    std::vector<T> values(element_count(shape));
    in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw ConfigError(path.string() + ": truncated payload for '" + name + "'");
    for (auto& v : values) v = byteswap_if_big(v);
    ckpt.tensors.emplace(name, Tensor<T>::from_vector(std::move(shape), std::move(values)));
  }
  return ckpt;
}

template <typename T>
BaseWeights<T> base_from_checkpoint(const Checkpoint<T>& ckpt) {
  BaseWeights<T> base = BaseWeights<T>::random(ckpt.config, 0);
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint lacks base tensor '" + name + "'");
    if (it->second.shape() != dst.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                        to_string(it->second.shape()) + ", expected " + to_string(dst.shape()));
    }
    dst = it->second;
  };
  take("embed", base.embed);
  take("final_norm", base.final_norm);
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    auto& L = base.layers[l];
    const std::string p = "layers." + std::to_string(l);
    take(p + ".attn.norm", L.attn_norm);
    take(p + ".attn.q.W", L.wq);
    take(p + ".attn.k.W", L.wk);
    take(p + ".attn.v.W", L.wv);
    take(p + ".attn.o.W", L.wo);
    take(p + ".ffn.norm", L.ffn_norm);
    take(p + ".ffn.gate.W", L.wgate);
    take(p + ".ffn.up.W", L.wup);
    take(p + ".ffn.down.W", L.wdown);
  }
  return base;
}

template <typename T>
AdapterTensors<T> adapters_from_checkpoint(const Checkpoint<T>& ckpt) {
  AdapterTensors<T> out;
  for (const auto& [name, t] : ckpt.tensors) {
    if (ends_with(name, ".A") || ends_with(name, ".B") || ends_with(name, ".C")) {
      auto copy = t.clone();
      copy.set_requires_grad(true);
      out.emplace(name, std::move(copy));
    }
  }
  return out;
}

#define FLORA_INSTANTIATE_CHECKPOINT(T)                                                       \
  template void save_checkpoint(const std::filesystem::path&, const ModelConfig&,            \
                                const std::vector<NamedTensor<T>>&, const Json&);            \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);                    \
  template BaseWeights<T> base_from_checkpoint(const Checkpoint<T>&);                         \
  template AdapterTensors<T> adapters_from_checkpoint(const Checkpoint<T>&);

FLORA_INSTANTIATE_CHECKPOINT(float)
FLORA_INSTANTIATE_CHECKPOINT(double)

#undef FLORA_INSTANTIATE_CHECKPOINT

}  // namespace flora
