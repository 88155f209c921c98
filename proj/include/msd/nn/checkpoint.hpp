// Model checkpoint container: 4-byte little-endian header length, a text
// header (meta key/value lines and a tensor manifest), then all tensor
// payloads as 32-bit little-endian floats in manifest order.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msd/nn/tensor.hpp"

namespace msd::nn {

class CheckpointError : public NnError {
public:
    using NnError::NnError;
};

struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;  // manifest order

    const Tensor<float>& tensor(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors);

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Loads and rejects on architecture mismatch: every (key, value) in
// expected_meta must match the stored meta exactly.
Checkpoint load_checkpoint_checked(const std::filesystem::path& path,
                                   const std::map<std::string, std::string>& expected_meta);

}  // namespace msd::nn
