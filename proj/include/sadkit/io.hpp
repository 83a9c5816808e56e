#pragma once

#include "sadkit/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace sadkit {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// SADT: "SADT", u32 rank, rank x u32 extents, then float32 values in
// row-major order. Everything little-endian.
struct SadtTensor {
  Shape shape;
  std::vector<float> values;
};

void write_sadt(std::ostream& out, const Shape& shape, const float* values);
SadtTensor read_sadt(std::istream& in);

void write_sadt(const std::filesystem::path& path, const Shape& shape, const float* values);
SadtTensor read_sadt(const std::filesystem::path& path);

/// 8-bit grayscale image, row-major.
struct GrayImage {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> pixels;
};

/// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

/// Min-max normalizes a map to 0..255; a constant map becomes all zeros.
GrayImage to_gray(const float* values, Index height, Index width);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace sadkit
