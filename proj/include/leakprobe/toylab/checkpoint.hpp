#pragma once

// JSON checkpoints. Doubles are written in shortest round-trip form, so a
// save/load cycle is exact.
//
//   {"format":"leakprobe-toylm/1","config":{...},"E":[[...]],"W_a":...,"b_o":[...]}
//   {"format":"leakprobe-lora/1","rank":4,"alpha":8,"modules":{"a":{"A":[[...]],"B":[[...]]},...}}

#include <string>
#include <string_view>

#include <json.hpp>

#include "leakprobe/toylab/model.hpp"

namespace leakprobe::toylab {

inline constexpr std::string_view kModelFormat = "leakprobe-toylm/1";
inline constexpr std::string_view kAdapterFormat = "leakprobe-lora/1";

nlohmann::ordered_json model_to_json(const ToyLM& model);
ToyLM model_from_json(const nlohmann::ordered_json& j);

nlohmann::ordered_json adapters_to_json(const LoRAAdapterSet& adapters);
LoRAAdapterSet adapters_from_json(const nlohmann::ordered_json& j);

/// Read/write helpers; throw ConfigError on I/O failure or a wrong format tag.
void save_model(const std::string& path, const ToyLM& model);
ToyLM load_model(const std::string& path);
void save_adapters(const std::string& path, const LoRAAdapterSet& adapters);
LoRAAdapterSet load_adapters(const std::string& path);

}  // namespace leakprobe::toylab
