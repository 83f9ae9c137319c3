#pragma once

#include <map>
#include <string>

#include "regseg/network.hpp"

namespace regseg::ckpt {

// On-disk checkpoint: `<base>.json` manifest (architecture, iteration, tensor
// table, blob hash, free-form metadata) plus `<base>.bin`, a single
// little-endian f32 blob. Round trips are bit-exact.

struct Loaded {
    Network<float> net;
    long long iteration = 0;
    std::map<std::string, Tensor<float>> extra;  // optimizer state and friends
    std::string meta;                            // metadata JSON as saved
};

// `extra` carries any non-network tensors (Adam moments, eta scalars, ...).
// `meta` is an optional JSON object string echoed into the manifest.
void save(const std::string& base, const Network<float>& net, long long iteration,
          const std::map<std::string, Tensor<float>>& extra = {},
          const std::string& meta = "{}");

// Throws CorruptCheckpointError on manifest/blob hash mismatch, ConfigError
// when `expect` names a different architecture than the manifest.
Loaded load(const std::string& base, const ArchKind* expect = nullptr);

}  // namespace regseg::ckpt
