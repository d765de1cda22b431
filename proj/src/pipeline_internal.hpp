#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>

#include <json.hpp>

namespace pfem::pipe {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k);
// Throws PipelineError naming the first key of j not in allowed.
void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where);

}  // namespace pfem::pipe
