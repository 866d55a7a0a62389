// SPDX-License-Identifier: Apache-2.0
//
// Flat binary container of named float64 arrays:
//
//   8 bytes   magic "CLORACK1"
//   8 bytes   manifest length n, little-endian u64
//   n bytes   JSON manifest {"arrays":[{name,rows,cols,offset}], "meta":{...}}
//   ...       array payloads, little-endian float64, row-major, back to back
//
// Offsets count float64 values from the start of the payload.
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "clora/model.hpp"

namespace clora {

struct Container {
    std::map<std::string, Matrix> arrays;
    nlohmann::json meta = nlohmann::json::object();
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

Container backbone_container(const Backbone& backbone);
Backbone backbone_from_container(const Container& c);

// Backbone, adapters, head, adapter config and the training seed.
Container model_container(const AdaptedModel& model, std::uint64_t seed);
AdaptedModel model_from_container(const Container& c);

void save_model(const std::filesystem::path& path, const AdaptedModel& model, std::uint64_t seed);
AdaptedModel load_model(const std::filesystem::path& path);

nlohmann::json adapter_config_json(const AdapterConfig& c);
AdapterConfig adapter_config_from_json(const nlohmann::json& j);

}  // namespace clora
