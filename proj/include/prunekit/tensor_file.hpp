#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace prunekit {

// On-disk container shared by checkpoints and calibration batches:
//
//   magic "PBCK" | u32 version (=1, LE) | u64 header length (LE)
//   | UTF-8 JSON header | concatenated payloads
//
// The header holds {"config": ..., "tensors": [...]} where each tensor
// entry records name, dtype ("f32" or "u32"), shape, payload offset
// (relative to the end of the header) and payload byte length. Payloads
// are row-major little-endian. Writing the same content twice produces
// byte-identical files.

struct TensorEntry {
    std::string name;
    std::string dtype; // "f32" | "u32"
    std::vector<int64_t> shape;
    std::vector<uint8_t> bytes;
};

struct TensorFile {
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::vector<TensorEntry> tensors;

    const TensorEntry * find(const std::string & name) const;
};

void save_tensor_file(const std::string & path, const TensorFile & file);
TensorFile load_tensor_file(const std::string & path);

} // namespace prunekit
