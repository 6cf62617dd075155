// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files:
//
//   "FLORACKP"                 8-byte magic
//   u64 little-endian          header length in bytes
//   JSON header                {format_version, config, tensors, meta}
//   payload                    raw little-endian elements, one tensor after
//                              another at the offsets listed in the header
//
// Adapter partitions are stored under their own names and never merged into
// the base weights.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flora/config_json.hpp"
#include "flora/model.hpp"

namespace flora {

inline constexpr int kCheckpointFormatVersion = 1;

template <typename T>
struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor<T>> tensors;
  Json meta = Json::object();
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const std::vector<NamedTensor<T>>& tensors, const Json& meta = Json::object());

// Throws ConfigError on a malformed file or a precision mismatch.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

// Base weights from a checkpoint written with BaseWeights::named().
template <typename T>
BaseWeights<T> base_from_checkpoint(const Checkpoint<T>& ckpt);

// Adapter partitions ("*.A", "*.B", "*.C") of a checkpoint.
template <typename T>
AdapterTensors<T> adapters_from_checkpoint(const Checkpoint<T>& ckpt);

}  // namespace flora
