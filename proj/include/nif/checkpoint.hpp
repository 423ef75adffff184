#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nif/model.hpp"

namespace nif {

// On-disk layout (little-endian):
//   "NIF1" | u32 version | u32 n | n bytes of UTF-8 JSON {"model": ..., "meta": ...}
//   | u32 tensor count | per tensor: u32 name length, name, u32 rank, u32 dims[rank],
//     f32 data[prod(dims)] | u32 CRC32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  // Training metadata: "step", "seed", "regime", "sampler", ...
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, dc::Tensor>> tensors;
};

Checkpoint make_checkpoint(const Model& model, nlohmann::json meta);

std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(const std::string& bytes);

// Writes to a temporary file and renames it into place.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into an existing model. The model's config must
/// equal the checkpoint's (VersionMismatch otherwise).
void load_into(Model& model, const Checkpoint& c);
Model model_from_checkpoint(const Checkpoint& c);

}  // namespace nif
