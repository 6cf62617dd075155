// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON mapping for configuration structs. Readers are strict: unknown keys
// and wrongly typed values raise ConfigError naming the full key path
// (e.g. "model.d_ff").

#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "flora/adapters.hpp"
#include "flora/model.hpp"

namespace flora {

using Json = nlohmann::ordered_json;

// Reads keys out of one JSON object and remembers which were consumed.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string path);

  bool has(const std::string& key) const;
  // Leaves `out` untouched when the key is absent.
  void read(const std::string& key, std::size_t& out);
  void read(const std::string& key, int& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  const Json* child(const std::string& key);
  std::string key_path(const std::string& key) const;
  // Throws on the first key that was never consumed.
  void finish() const;

 private:
  const Json& get(const std::string& key);
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json to_json(const AdapterSpec& spec);
// Unspecified fields take the preset of the given variant.
AdapterSpec adapter_spec_from_json(const Json& j, const std::string& path = "adapter");

// Model dimensions only; the adapter lives in its own section.
Json to_json(const ModelConfig& config);
// An optional "shape" key selects the preset the other keys override.
ModelConfig model_config_from_json(const Json& j, const std::string& path = "model");

}  // namespace flora
