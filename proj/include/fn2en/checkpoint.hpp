#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "fn2en/network.hpp"
#include "fn2en/tensor.hpp"

namespace fn2en {

struct CheckpointMeta {
    int stage = 0;
    std::uint64_t epoch = 0;
    std::string config_hash;
};

// Checkpoint file: magic FN2E, u32 version=1, u32 tensor count; per tensor a u16
// name length + UTF-8 name, u8 rank, rank x u32 dims, little-endian f32 payload;
// then u32 descriptor length + UTF-8 architecture descriptor (JSON carrying the
// layer list and provenance). All integers little-endian.
void save_network(const Network& net, const std::string& path, const CheckpointMeta& meta = {});

// Rebuilds the network from the stored descriptor and fills its parameters.
// Unknown extra tensors are ignored with a warning; a missing parameter is a
// format error. Round trips are bit-exact.
Network load_network(const std::string& path, CheckpointMeta* meta = nullptr);

TeacherNet load_teacher(const std::string& path);

// Canonical JSON of the structural part only (layers + input channels).
std::string architecture_descriptor(const Network& net);
// FNV-1a 64 hex digest of the canonical descriptor; used to reject mismatched
// resumes.
std::string architecture_hash(const Network& net);

// Optimizer state for bit-exact resume from an epoch boundary: magic FNTS,
// version, stage, next epoch, step count, seed, and the momentum buffers.
struct TrainState {
    int stage = 0;
    std::uint64_t epoch = 0;  // next epoch to run
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::map<std::string, Tensor<real>> velocity;
};

void save_train_state(const TrainState& state, const std::string& path);
TrainState load_train_state(const std::string& path);

}  // namespace fn2en
