// Versioned binary model container: an eight-byte magic, a format version,
// a JSON manifest (config, seed, parameter names and shapes, target scaler,
// content hash), then the raw little-endian float64 parameter blobs in
// manifest order.
#pragma once

#include <cstddef>
#include <string>

#include "qkcv/forecaster.hpp"

namespace qkcv {

// FNV-1a, the fingerprint used for checkpoint integrity and frozen-weight
// verification.
unsigned long long fnv1a64(const void* data, std::size_t n);
unsigned long long tensor_fingerprint(const Tensor& t);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

void save_model(const std::string& path, const Model& m);

// Rebuilds the architecture from the manifest config, then overwrites every
// named parameter from the blobs. A hash mismatch or unknown name is a data
// error.
Model load_model(const std::string& path);

// Hash over the concatenated parameter blobs in registry order.
unsigned long long model_content_hash(const Model& m);

}  // namespace qkcv
