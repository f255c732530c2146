#include "crna/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "crna/error.hpp"
#include "crna/rng.hpp"

namespace crna::harness {

namespace {

constexpr std::size_t kCifarRecord = 3073;
constexpr std::size_t kCifarPixels = 3072;

void hsv_to_rgb_pixel(double h, double s, double v, double& r, double& g,
                      double& b) {
  double h6 = h * (3.0 / M_PI);
  int k = static_cast<int>(std::floor(h6));
  double f = h6 - k;
  k = ((k % 6) + 6) % 6;
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (k) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

}  // namespace

std::pair<Tensor, std::vector<int>> Dataset::batch(std::size_t start,
                                                   std::size_t count) const {
  if (start + count > size()) {
    throw ConfigError("batch: range exceeds dataset size");
  }
  std::size_t stride = images.numel() / size();
  Tensor out({count, images.dim(1), images.dim(2), images.dim(3)});
  std::copy(images.data() + start * stride,
            images.data() + (start + count) * stride, out.data());
  std::vector<int> lab(labels.begin() + static_cast<std::ptrdiff_t>(start),
                       labels.begin() + static_cast<std::ptrdiff_t>(start + count));
  return {std::move(out), std::move(lab)};
}

Dataset Dataset::take(std::size_t n) const {
  if (n > size()) throw ConfigError("take: not enough samples");
  auto [img, lab] = batch(0, n);
  return Dataset{std::move(img), std::move(lab), classes, split};
}

Dataset load_cifar_file(const std::filesystem::path& file, int classes) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open " + file.string());
  is.seekg(0, std::ios::end);
  auto file_size = static_cast<std::size_t>(is.tellg());
  is.seekg(0);
  if (file_size % kCifarRecord != 0) {
    std::size_t offset = (file_size / kCifarRecord) * kCifarRecord;
    throw IoError(file.string() + ": truncated record at byte offset " +
                  std::to_string(offset));
  }
  std::size_t count = file_size / kCifarRecord;
  Dataset out;
  out.classes = classes;
  out.images = Tensor({count, 3, 32, 32});
  out.labels.resize(count);
  std::vector<unsigned char> record(kCifarRecord);
  for (std::size_t i = 0; i < count; ++i) {
    is.read(reinterpret_cast<char*>(record.data()),
            static_cast<std::streamsize>(kCifarRecord));
    if (!is) {
      throw IoError(file.string() + ": short read at byte offset " +
                    std::to_string(i * kCifarRecord));
    }
    int label = record[0];
    if (label >= classes) {
      throw IoError(file.string() + ": label " + std::to_string(label) +
                    " >= class count at byte offset " +
                    std::to_string(i * kCifarRecord));
    }
    out.labels[i] = label;
    double* dst = out.images.data() + i * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j) {
      dst[j] = static_cast<double>(record[1 + j]) / 255.0;
    }
  }
  return out;
}

Dataset load_cifar_binary(const std::filesystem::path& dir, int classes) {
  std::vector<std::filesystem::path> files;
  for (int i = 1; i <= 5; ++i) {
    auto f = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (std::filesystem::exists(f)) files.push_back(f);
  }
  std::string split = "train";
  if (files.empty()) {
    auto f = dir / "test_batch.bin";
    if (std::filesystem::exists(f)) {
      files.push_back(f);
      split = "test";
    }
  }
  if (files.empty()) {
    throw IoError("no CIFAR binary batches found in " + dir.string());
  }
  Dataset merged;
  for (const auto& f : files) {
    Dataset part = load_cifar_file(f, classes);
    if (merged.size() == 0) {
      merged = std::move(part);
    } else {
      Tensor joined({merged.size() + part.size(), 3, 32, 32});
      std::copy(merged.images.data(),
                merged.images.data() + merged.images.numel(), joined.data());
      std::copy(part.images.data(), part.images.data() + part.images.numel(),
                joined.data() + merged.images.numel());
      merged.images = std::move(joined);
      merged.labels.insert(merged.labels.end(), part.labels.begin(),
                           part.labels.end());
    }
  }
  merged.split = split;
  merged.classes = classes;
  return merged;
}

void write_cifar_file(const std::filesystem::path& file, const Dataset& data) {
  if (data.channels() != 3 || data.height() != 32 || data.width() != 32) {
    throw ConfigError("write_cifar_file: images must be 3x32x32");
  }
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  std::vector<unsigned char> record(kCifarRecord);
  for (std::size_t i = 0; i < data.size(); ++i) {
    record[0] = static_cast<unsigned char>(data.labels[i]);
    const double* src = data.images.data() + i * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j) {
      double v = std::min(1.0, std::max(0.0, src[j]));
      record[1 + j] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    os.write(reinterpret_cast<const char*>(record.data()),
             static_cast<std::streamsize>(kCifarRecord));
  }
}

Dataset synthetic_dataset(std::uint64_t seed, int classes, std::size_t size,
                          int resolution, const std::string& split) {
  if (classes < 2) throw ConfigError("synthetic_dataset: need >= 2 classes");
  if (resolution < 8) throw ConfigError("synthetic_dataset: resolution < 8");
  Rng rng(seed);
  const std::size_t R = static_cast<std::size_t>(resolution);
  Dataset out;
  out.classes = classes;
  out.split = split;
  out.images = Tensor({size, 3, R, R});
  out.labels.resize(size);
  const double rescale = static_cast<double>(resolution);
  for (std::size_t i = 0; i < size; ++i) {
    int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    out.labels[i] = label;
    double hue = 2.0 * M_PI * label / classes + rng.uniform(-0.12, 0.12);
    if (hue < 0) hue += 2.0 * M_PI;
    if (hue >= 2.0 * M_PI) hue -= 2.0 * M_PI;
    int shape = label % 4;
    double cx = rescale / 2.0 + rng.uniform(-rescale / 8.0, rescale / 8.0);
    double cy = rescale / 2.0 + rng.uniform(-rescale / 8.0, rescale / 8.0);
    double rad = rescale * rng.uniform(0.24, 0.32);
    double sr, sg, sb;
    hsv_to_rgb_pixel(hue, 0.85, 0.9, sr, sg, sb);
    for (std::size_t y = 0; y < R; ++y) {
      for (std::size_t x = 0; x < R; ++x) {
        double dx = static_cast<double>(x) - cx;
        double dy = static_cast<double>(y) - cy;
        bool inside = false;
        switch (shape) {
          case 0:  // disk
            inside = dx * dx + dy * dy <= rad * rad;
            break;
          case 1:  // square
            inside = std::fabs(dx) <= rad * 0.8 && std::fabs(dy) <= rad * 0.8;
            break;
          case 2:  // cross
            inside = (std::fabs(dx) <= rad * 0.35 || std::fabs(dy) <= rad * 0.35) &&
                     std::fabs(dx) <= rad && std::fabs(dy) <= rad;
            break;
          default: {  // ring
            double d2 = dx * dx + dy * dy;
            inside = d2 <= rad * rad && d2 >= 0.35 * rad * rad;
            break;
          }
        }
        double r, g, b;
        if (inside) {
          r = sr + rng.uniform(-0.02, 0.02);
          g = sg + rng.uniform(-0.02, 0.02);
          b = sb + rng.uniform(-0.02, 0.02);
        } else {
          double bg = rng.uniform(0.05, 0.2);
          r = g = b = bg;
        }
        out.images.at4(i, 0, y, x) = std::min(1.0, std::max(0.0, r));
        out.images.at4(i, 1, y, x) = std::min(1.0, std::max(0.0, g));
        out.images.at4(i, 2, y, x) = std::min(1.0, std::max(0.0, b));
      }
    }
  }
  return out;
}

}  // namespace crna::harness
