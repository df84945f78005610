#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bifrec/tensor.hpp"

namespace bifrec {

// Binary checkpoint layout (all integers little-endian):
//   magic "BFRC"
//   format_version     u32
//   config JSON        u32 length + bytes
//   tensor count       u32
//   per tensor:        u32 name length, name bytes, u32 rank,
//                      u64 extents[rank], f64 payload[numel]
//   CRC-32 of everything above
struct Checkpoint {
    uint32_t format_version = 1;
    std::string config_json;
    std::vector<std::pair<std::string, Tensor>> tensors;  // order is preserved

    const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);  // verifies magic, version, CRC

// Byte-exact encoding of a named tensor list (same per-tensor layout as the
// checkpoint body); used to compare frozen parameter sets.
std::vector<uint8_t> serialize_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors);

uint32_t crc32_bytes(const uint8_t* data, std::size_t len);

}  // namespace bifrec
