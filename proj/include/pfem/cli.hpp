#pragma once

// Command-line front end: pfem <gen|refs|train|eval|warmstart|patch-test|fem|
// convergence-check|validate-mesh> [options]. Exit codes: 0 success, 1 usage or
// input error, 2 numerical failure (a failure report is written under --out).

#include <string>
#include <vector>

#include <json.hpp>

namespace pfem::cli {

int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

// Default configuration document for a problem (schema_version 1).
nlohmann::json default_config(const std::string& problem);
// Overlays patch onto base; keys absent from base are rejected with their dotted path.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");
// Applies "a.b.c=value"; value is parsed as JSON when possible, else kept as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

}  // namespace pfem::cli
