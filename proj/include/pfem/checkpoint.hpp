#pragma once

// Checkpoint file: "PFEMCKPT" magic, u64 LE header length, JSON header text,
// then the flat float64 parameters (little-endian). When the header carries
// "optimizer", the Adam first and second moments follow the parameters.

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "pfem/tensor.hpp"

namespace pfem::ad {

struct Checkpoint {
  ParamStore params;
  nlohmann::json config;  // free-form, stored under "config" in the header
  std::optional<AdamState> optimizer;
};

std::string config_hash(const nlohmann::json& config);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const nlohmann::json& config,
                     const AdamState* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace pfem::ad
