#pragma once

#include <string>

#include "json.hpp"
#include "p3d/unet.hpp"

namespace p3d {

// On-disk model format: 8-byte magic "P3DCKPT\n", a little-endian uint64 header
// length, a JSON header (config, named tensor table with element offsets, free
// form "extra" metadata), then the flat float64 payload, little endian.

nlohmann::json config_to_json(const UNetConfig& cfg);

// Starts from defaults and overrides the keys present; unknown keys are a
// ConfigError so typos in config files fail loudly instead of being ignored.
UNetConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const UNetModel& model, const std::string& path,
                     const nlohmann::json& extra = nlohmann::json::object());

UNetModel load_checkpoint(const std::string& path, nlohmann::json* extra_out = nullptr);

// Header peek without loading tensors (for provenance checks and reporting).
nlohmann::json read_checkpoint_header(const std::string& path);

// Encoders and the prior are plain named-parameter collections, not UNets.
// They share the container format; `kind` tags the header so a text-encoder
// file cannot be loaded into an image encoder by accident, and `config` is
// whatever JSON the owner needs to rebuild itself before loading.
void save_param_bundle(const ParamMap& params, const std::string& kind,
                       const nlohmann::json& config, const std::string& path,
                       const nlohmann::json& extra = nlohmann::json::object());

// Fills an already-built ParamMap from a bundle file (names and shapes must
// match exactly) and returns the stored config.
nlohmann::json load_param_bundle(const std::string& path, const std::string& kind,
                                 ParamMap& params, nlohmann::json* extra_out = nullptr);

}  // namespace p3d
