#pragma once

#include <filesystem>
#include <optional>

#include "fusedrec/config.hpp"
#include "fusedrec/model.hpp"
#include "fusedrec/trainer.hpp"

namespace fusedrec {

// Container layout (little-endian):
//   "FRCK" u32 version
//   u32 meta_len, meta bytes   key = value lines: training config, catalog
//                              shape and trainer state scalars
//   u32 tensor_count, then per tensor:
//     u32 name_len, name, u8 dtype (1 = f32, 2 = f64), u64 rows, u64 cols,
//     rows*cols floats row-major
// The frozen text matrix is stored as tensor "item.text"; optimizer moments
// as "adam.m.<name>" / "adam.v.<name>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  ModelParams params;
  std::optional<TrainState> state;
};

// f64 payloads when cfg.deterministic, f32 otherwise.
void write_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const ModelParams& params,
                      const TrainState* state);

// Rejects unknown versions, missing tensors and any dimension that disagrees
// with the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fusedrec
