#ifndef ROWQUANT_CHECKPOINT_HPP
#define ROWQUANT_CHECKPOINT_HPP

#include <optional>
#include <string>
#include <vector>

#include "rowquant/assign.hpp"
#include "rowquant/kernels.hpp"
#include "rowquant/nn.hpp"

namespace rowquant {

uint32_t crc32(const void* data, size_t len);

struct CheckpointInfo {
  std::string arch;
  std::vector<int64_t> input_shape;
  int classes = 0;
  uint64_t seed = 0;
  int epoch = 0;
  std::optional<RatioConfig> ratio;  // absent for float baselines
};

/// Writes `<prefix>.manifest` (structured text with per-tensor offsets and
/// CRC32s) and `<prefix>.tensors` (little-endian float64 blob). Round trips
/// bit-exactly.
void save_checkpoint(const Model& model, const CheckpointInfo& info, const std::string& prefix);

struct LoadedCheckpoint {
  Model model;
  CheckpointInfo info;
};

/// Rejects unknown major format versions, bad checksums, and assignments
/// violating the row-count invariants.
LoadedCheckpoint load_checkpoint(const std::string& prefix);

/// Packed deployment export for the inference kernels: per-row spec byte,
/// float32 scale, and integer codes (4-bit nibble-packed low-nibble-first,
/// 8-bit byte-packed), row-major, little-endian.
void export_packed(const Model& model, const std::string& path);

struct PackedLayer {
  std::vector<RowKernel> rows;
  double act_clip = 6.0;
};

std::vector<PackedLayer> load_packed(const std::string& path);

}  // namespace rowquant

#endif  // ROWQUANT_CHECKPOINT_HPP
