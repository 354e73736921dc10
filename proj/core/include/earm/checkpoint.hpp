#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "earm/model.hpp"
#include "earm/train.hpp"

namespace earm {

/// Checkpoint container: a magic line, a one-line JSON header (realization,
/// V, K, dims, seed, step, block directory, FNV-1a checksum), then raw
/// little-endian 64-bit float blocks. Round-trips bit-exactly; corrupt or
/// truncated files fail the checksum before anything is constructed.

void save_model_checkpoint(const ArModel& model, const std::string& path, std::uint64_t seed = 0,
                           std::int64_t step = 0);
std::unique_ptr<ArModel> load_model_checkpoint(const std::string& path);

/// Model plus EMA cells and optimizer state (everything in
/// TrainCheckpointData), for exact training continuation.
void save_train_checkpoint(const ArModel& model, const TrainCheckpointData& state,
                           const std::string& path, std::uint64_t seed = 0);

struct LoadedTrainCheckpoint {
  std::unique_ptr<ArModel> model;
  TrainCheckpointData state;
};
LoadedTrainCheckpoint load_train_checkpoint(const std::string& path);

}  // namespace earm
