#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "unidit/config.hpp"
#include "unidit/flowmatch.hpp"
#include "unidit/params.hpp"

namespace unidit {

// File layout (all integers little-endian):
//   "UNIDITCK" | u32 version | u64 config digest | u64 step | u32 config length | config text
//   u32 block count | per block: u32 name length | name | u32 rows | u32 cols | rows*cols float32
// Parameter blocks are named "param/<name>", optimizer moments "adam_m/<name>" and "adam_v/<name>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::uint64_t digest = 0;
  int step = 0;
  Params<float> params;
  std::optional<AdamW> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, int step, const Params<float>& params,
                     const AdamW* optimizer);
// Loads and verifies shapes; when `expected_digest` is given a mismatch raises CheckpointError.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_digest = std::nullopt);

}  // namespace unidit
