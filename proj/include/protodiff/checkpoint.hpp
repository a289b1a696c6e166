#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "protodiff/tensor.hpp"

namespace protodiff {

// Binary tensor container used for checkpoints, datasets and raw sample
// batches. Layout:
//
//   magic "PDCK" | u32 version | u64 header length | canonical JSON header |
//   tensor records | u32 CRC32
//
// Each record: u32 path length + UTF-8 path | u8 dtype (0=f32, 1=f64) |
// u32 rank | u32 dims[rank] | row-major little-endian payload. The record
// count is carried in the header ("tensor_count"). The CRC covers every byte
// between the version field and the CRC itself, so any single corrupted
// payload byte is detected.
struct TensorFile {
    uint32_t version = 1;
    nlohmann::json header; // "kind" plus arbitrary metadata
    std::map<std::string, Tensor> tensors;
    std::map<std::string, char> dtypes; // 'f' or 'd'; default 'd' when absent

    char dtype_of(const std::string& name) const {
        auto it = dtypes.find(name);
        return it == dtypes.end() ? 'd' : it->second;
    }
};

inline constexpr uint32_t kTensorFileVersion = 1;

void write_tensor_file(const std::string& path, const TensorFile& tf);
TensorFile read_tensor_file(const std::string& path);

// 64-bit FNV-1a as a hex string; used for config hashes and artifact ids.
std::string fnv1a_hex(const std::string& bytes);

} // namespace protodiff
