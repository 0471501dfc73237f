#pragma once

#include <iosfwd>
#include <string>

#include "fsts/data.hpp"
#include "fsts/model.hpp"

namespace fsts {

// Flat binary container, little-endian throughout:
//   magic "FSTS" | u32 version | u32 json_len | json bytes | blobs...
// The JSON document holds {"config": <model config>, "norm_stats": {...}}.
// Each blob: u32 name_len | name | u32 rank | u32 dims[rank] | f64 data.
// Blobs run to end of stream.
inline constexpr char kCheckpointMagic[4] = {'F', 'S', 'T', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(std::ostream& out, Model& model, const NormStats& stats);
void save_checkpoint_file(const std::string& path, Model& model,
                          const NormStats& stats);
std::string checkpoint_bytes(Model& model, const NormStats& stats);

struct LoadedCheckpoint {
  Model model;
  NormStats stats;
};

LoadedCheckpoint load_checkpoint(std::istream& in);
LoadedCheckpoint load_checkpoint_file(const std::string& path);

}  // namespace fsts
