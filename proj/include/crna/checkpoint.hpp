#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crna/tensor.hpp"

namespace crna::io {

// Versioned binary container shared by the supernet ("CRNA") and surrogate
// ("CRNS") checkpoints: magic, format version, owning config hash, a JSON
// metadata blob, then named raw float32 little-endian arrays with a shape
// table.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Container {
  std::string magic;  // 4 bytes
  std::uint32_t version = 1;
  std::uint64_t config_hash = 0;
  std::string meta_json;
  std::vector<NamedArray> arrays;
};

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path,
                         const std::string& expected_magic);

NamedArray to_f32(const std::string& name, const Tensor& t);
Tensor to_tensor(const NamedArray& a);

}  // namespace crna::io
