#pragma once
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "selva/tensor.hpp"

#include "json.hpp"

namespace selva {

// Binary tensor container (.slvt): magic "SLVT", then little-endian
// u32 format version, u32 rank, rank x u64 dims, row-major f64 payload.
inline constexpr uint32_t kSlvtVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// A checkpoint is a directory: manifest.json plus tensors/<name>.slvt.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    nlohmann::json meta;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// FNV-1a64 fingerprints of file / directory contents, used for the manifest
// hash chain. Directory fingerprints fold in sorted relative paths so renames
// change the value.
uint64_t file_fingerprint(const std::filesystem::path& path);
uint64_t dir_fingerprint(const std::filesystem::path& dir);
std::string to_hex(uint64_t v);  // 16 lowercase hex digits

// Canonical JSON serialization: sorted keys, 2-space indent, trailing newline.
void save_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json load_json(const std::filesystem::path& path);

}  // namespace selva
