#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/transformer.h"

namespace psyt {

// Binary checkpoint layout (all integers little-endian):
//
//   "PSYT" | u16 version | u32 len, header JSON ({"model": ModelConfig, ...})
//   u32 tensor count, then per tensor:
//     u32 name len, name | u32 rank, u32 dims[rank] | f32 data
//   u32 section count, then per section:
//     4-byte tag | u32 len, JSON | u32 tensor count | tensors as above, f64 data
//
// Sections carry state that must survive bit-exactly (e.g. training state).
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointSection {
  std::array<char, 4> tag{};
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;
};

struct Checkpoint {
  ModelConfig config;
  // Header entries besides "model", e.g. the vocabulary.
  nlohmann::json extra = nlohmann::json::object();
  TransformerParams params;
  std::vector<CheckpointSection> sections;

  const CheckpointSection* find_section(std::string_view tag) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);

// File variants. save_checkpoint writes to a sibling temp file and renames it
// into place, so a failed write never leaves a truncated checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rounds every parameter through 32-bit storage, as a save/load cycle does.
TransformerParams round_to_f32(const TransformerParams& params);

}  // namespace psyt
