#pragma once

#include <cstdint>
#include <string>

#include "regseg/tensor.hpp"

namespace regseg::io {

// Volumes live on disk as `<base>.raw` (little-endian, row-major) plus a
// `<base>.json` sidecar: {dims, spacing_mm, dtype, order, endian} and, for
// displacement fields, a channels count. `base` excludes the extension.

struct Sidecar {
    std::vector<int> dims;               // [D,H,W]
    double spacing_mm[3] = {1, 1, 1};
    std::string dtype;                   // "f32" | "u8"
    int channels = 0;                    // 0 = plain scalar volume
};

void write_volume(const std::string& base, const Tensor<float>& vol,
                  const double spacing_mm[3] = nullptr);
Tensor<float> read_volume(const std::string& base);

void write_labels(const std::string& base, const LabelMap& labels);
LabelMap read_labels(const std::string& base);

// Displacement fields, channel-major [3,D,H,W] in (dz,dy,dx) order.
void write_dvf(const std::string& base, const Tensor<float>& disp);
Tensor<float> read_dvf(const std::string& base);

Sidecar read_sidecar(const std::string& base);

// Raw byte helpers shared with checkpointing.
void write_bytes(const std::string& path, const void* data, size_t len);
std::vector<uint8_t> read_bytes(const std::string& path);

// FNV-1a over a byte range / a whole file; used for manifest hashes.
uint64_t fnv1a(const void* data, size_t len, uint64_t h = 14695981039346656037ULL);
uint64_t hash_file(const std::string& path);

std::string hex64(uint64_t v);

}  // namespace regseg::io
