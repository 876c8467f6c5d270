#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "balab/model.hpp"
#include "balab/tensor.hpp"

namespace balab {

// Binary container, little-endian throughout:
//   magic "BALB" | u32 version | u64 header length | header | raw payloads
// header: u64 config fingerprint, u32 tensor count, then per tensor
//   u16 name length, name bytes, u8 dtype code, u8 ndim, u32 dims...,
//   u64 payload offset, u64 payload bytes
// Round-trips are bit-exact.

struct CheckpointEntry {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    uint64_t fingerprint = 0;
    std::vector<CheckpointEntry> tensors;
};

void save_checkpoint(const std::string& path, uint64_t fingerprint,
                     const std::vector<CheckpointEntry>& tensors);

Checkpoint load_checkpoint(const std::string& path);

// trainable parameters only; the frozen backbone is reproducible from the
// config fingerprint's seed
void save_model_checkpoint(const std::string& path, const Model& model);

// verifies the fingerprint (FingerprintError on mismatch) and restores every
// trainable tensor bitwise
void load_model_checkpoint(const std::string& path, Model& model);

}  // namespace balab
