// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/config_json.hpp"

namespace flora {

StrictObject::StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
  if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
}

bool StrictObject::has(const std::string& key) const { return j_.contains(key); }

std::string StrictObject::key_path(const std::string& key) const {
  return path_.empty() ? key : path_ + "." + key;
}

const Json& StrictObject::get(const std::string& key) {
  seen_.insert(key);
  return j_.at(key);
}

void StrictObject::read(const std::string& key, std::size_t& out) {
  if (!has(key)) return;
  const auto& v = get(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError(key_path(key) + ": expected a non-negative integer");
  }
  out = v.get<std::size_t>();
}

void StrictObject::read(const std::string& key, int& out) {
  if (!has(key)) return;
  const auto& v = get(key);
  if (!v.is_number_integer()) throw ConfigError(key_path(key) + ": expected an integer");
  out = v.get<int>();
}

void StrictObject::read(const std::string& key, double& out) {
  if (!has(key)) return;
  const auto& v = get(key);
  if (!v.is_number()) throw ConfigError(key_path(key) + ": expected a number");
  out = v.get<double>();
}

void StrictObject::read(const std::string& key, bool& out) {
  if (!has(key)) return;
  const auto& v = get(key);
  if (!v.is_boolean()) throw ConfigError(key_path(key) + ": expected a boolean");
  out = v.get<bool>();
}

void StrictObject::read(const std::string& key, std::string& out) {
  if (!has(key)) return;
  const auto& v = get(key);
  if (!v.is_string()) throw ConfigError(key_path(key) + ": expected a string");
  out = v.get<std::string>();
}

const Json* StrictObject::child(const std::string& key) {
  if (!has(key)) return nullptr;
  return &get(key);
}

void StrictObject::finish() const {
  for (const auto& item : j_.items()) {
    if (!seen_.count(item.key())) throw ConfigError(key_path(item.key()) + ": unknown key");
  }
}

Json to_json(const AdapterSpec& spec) {
  Json add = Json::array();
  for (Projection p : spec.add_set) add.push_back(projection_name(p));
  return Json{{"variant", variant_name(spec.variant)},
              {"rank", spec.rank},
              {"nonlinearity", nonlinearity_name(spec.nonlinearity)},
              {"add_set", add},
              {"use_c", spec.use_c},
              {"shared_backward", spec.shared_backward}};
}

AdapterSpec adapter_spec_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  std::string variant = "none";
  std::size_t rank = 0;
  o.read("variant", variant);
  o.read("rank", rank);
  AdapterSpec spec;
  try {
    spec = AdapterSpec::preset(parse_variant(variant), rank);
  } catch (const ConfigError& e) {
    throw ConfigError(o.key_path("variant") + ": " + e.what());
  }
  std::string nl = nonlinearity_name(spec.nonlinearity);
  o.read("nonlinearity", nl);
  try {
    spec.nonlinearity = parse_nonlinearity(nl);
  } catch (const ConfigError& e) {
    throw ConfigError(o.key_path("nonlinearity") + ": " + e.what());
  }
  if (const Json* add = o.child("add_set")) {
    if (!add->is_array()) throw ConfigError(o.key_path("add_set") + ": expected an array");
    spec.add_set.clear();
    for (std::size_t i = 0; i < add->size(); ++i) {
      const auto& item = (*add)[i];
      const std::string where = o.key_path("add_set") + "[" + std::to_string(i) + "]";
      if (!item.is_string()) throw ConfigError(where + ": expected a projection name");
      try {
        spec.add_set.insert(parse_projection(item.get<std::string>()));
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
  }
  o.read("use_c", spec.use_c);
  o.read("shared_backward", spec.shared_backward);
  o.finish();
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return spec;
}

Json to_json(const ModelConfig& c) {
  return Json{{"d_model", c.d_model},       {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
              {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len}, {"rope_theta", c.rope_theta},
              {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  std::string shape = "toy";
  o.read("shape", shape);
  ModelConfig c;
  try {
    c = ModelConfig::preset(shape);
  } catch (const ConfigError& e) {
    throw ConfigError(o.key_path("shape") + ": " + e.what());
  }
  o.read("d_model", c.d_model);
  o.read("n_layers", c.n_layers);
  o.read("n_heads", c.n_heads);
  o.read("n_kv_heads", c.n_kv_heads);
  o.read("d_ff", c.d_ff);
  o.read("vocab_size", c.vocab_size);
  o.read("max_seq_len", c.max_seq_len);
  o.read("rope_theta", c.rope_theta);
  o.read("norm_eps", c.norm_eps);
  o.finish();
  return c;
}

}  // namespace flora
