#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "crna/tensor.hpp"

namespace crna::harness {

// Image classification dataset: pixels in [0,1], layout (N, C, H, W).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int classes = 0;
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  // Copies samples [start, start+count) into a batch tensor.
  std::pair<Tensor, std::vector<int>> batch(std::size_t start,
                                            std::size_t count) const;
  Dataset take(std::size_t n) const;
};

// Parses one CIFAR-10 style binary batch file: records of 3073 bytes,
// 1 label byte followed by 3072 pixel bytes (R, G, B planes, row-major
// 32x32). Pixels are scaled to [0,1] by division with 255.
Dataset load_cifar_file(const std::filesystem::path& file, int classes = 10);

// Loads the standard binary batches found in a directory: training batches
// data_batch_1..5.bin when present, otherwise test_batch.bin.
Dataset load_cifar_binary(const std::filesystem::path& dir, int classes = 10);

// Serializes a dataset back into the binary batch format (test fixture and
// round-trip oracle). Requires 3x32x32 images.
void write_cifar_file(const std::filesystem::path& file, const Dataset& data);

// Class-conditional colored shapes: each class has a distinct hue and shape.
// Deterministic per seed; labels are assigned round-robin so the class
// balance is exact whenever size is divisible by the class count.
Dataset synthetic_dataset(std::uint64_t seed, int classes, std::size_t size,
                          int resolution, const std::string& split = "train");

}  // namespace crna::harness
