#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "projprobe/models.hpp"

namespace projprobe {

// Binary container of named arrays:
//   magic "PPCK" | u32 version | u32 count |
//   per array: u16 name_len | name | u32 rows | u32 cols | rows*cols f64 LE
// A JSON sidecar at <path>.json carries architecture hyperparameters, seed
// and provenance. Writes are deterministic byte-for-byte for equal inputs.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_arrays(const std::string& path,
                 const std::vector<std::pair<std::string, const Mat*>>& arrays);
std::map<std::string, Mat> load_arrays(const std::string& path);

nlohmann::json arch_to_json(const ToyLVLM& model);
ToyLVLM model_from_arch_json(const nlohmann::json& arch);

nlohmann::json projector_arch_to_json(const ProjectorParams& proj);
ProjectorParams projector_from_arch_json(const nlohmann::json& arch);

// sidecar written to <path>.json with keys: schema_version, arch, plus `extra`
void save_model(ToyLVLM& model, const std::string& path, const nlohmann::json& extra);
ToyLVLM load_model(const std::string& path);

void save_projector(ProjectorParams& proj, const std::string& path,
                    const nlohmann::json& extra);
ProjectorParams load_projector(const std::string& path);

}  // namespace projprobe
