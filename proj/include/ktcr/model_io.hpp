#pragma once

// Self-describing JSON model container:
//   {"format": "ktcr-model", "version": 1, "kind": ..., "meta": {...},
//    "params": {name: {"shape": [...], "data": [...]}}}
// Doubles are written in shortest round-trip form, so save/load is bit-exact.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "ktcr/encoder.hpp"
#include "ktcr/tensor.hpp"

namespace ktcr {

struct ModelContainer {
    std::string kind;
    nlohmann::json meta;
    ParamSet params;
};

void write_container(const std::filesystem::path& path, const ModelContainer& c);
/// Throws SchemaError if the file is not a container or holds another kind.
ModelContainer read_container(const std::filesystem::path& path, const std::string& expected_kind);

nlohmann::json params_to_json(const ParamSet& params);
ParamSet params_from_json(const nlohmann::json& j);

void save_encoder(const std::filesystem::path& path, const EncoderModel& model);
EncoderModel load_encoder(const std::filesystem::path& path);

} // namespace ktcr
