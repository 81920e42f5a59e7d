#pragma once

// Minimal reader/writer for the NumPy .npy container (format version 1.0).
// Only C-ordered 2D arrays of little-endian float32 or uint8 are supported,
// which covers the image and label files used throughout the project.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hgd::npy {

template <typename T>
struct Array2D {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<T> data;  // row-major
};

void save_f32(const std::filesystem::path& path, const Array2D<float>& array);
void save_u8(const std::filesystem::path& path, const Array2D<uint8_t>& array);

Array2D<float> load_f32(const std::filesystem::path& path);
Array2D<uint8_t> load_u8(const std::filesystem::path& path);

}  // namespace hgd::npy
