#include "sadkit/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace sadkit {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw IoError("sadt: truncated stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

// Next whitespace-delimited PGM header token, skipping comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IoError("pgm: truncated header");
  return tok;
}

}  // namespace

void write_sadt(std::ostream& out, const Shape& shape, const float* values) {
  out.write("SADT", 4);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (Index e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  const Index n = numel(shape);
  for (Index i = 0; i < n; ++i) put_u32(out, std::bit_cast<std::uint32_t>(values[i]));
  if (!out) throw IoError("sadt: write failed");
}

SadtTensor read_sadt(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || std::string(magic.data(), 4) != "SADT") throw IoError("sadt: bad magic");
  SadtTensor t;
  const std::uint32_t rank = get_u32(in);
  if (rank > 8) throw IoError("sadt: implausible rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(static_cast<Index>(get_u32(in)));
  t.values.resize(static_cast<std::size_t>(numel(t.shape)));
  for (float& v : t.values) v = std::bit_cast<float>(get_u32(in));
  return t;
}

void write_sadt(const std::filesystem::path& path, const Shape& shape, const float* values) {
  auto out = open_out(path);
  write_sadt(out, shape, values);
}

SadtTensor read_sadt(const std::filesystem::path& path) {
  auto in = open_in(path);
  try {
    return read_sadt(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (static_cast<Index>(image.pixels.size()) != image.height * image.width) {
    throw IoError("pgm: pixel count does not match " + std::to_string(image.height) + "x" +
                  std::to_string(image.width));
  }
  auto out = open_out(path);
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("pgm: write failed for " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  auto in = open_in(path);
  if (pgm_token(in) != "P5") throw IoError(path.string() + ": not a binary PGM");
  GrayImage img;
  img.width = std::stol(pgm_token(in));
  img.height = std::stol(pgm_token(in));
  if (std::stol(pgm_token(in)) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  return img;
}

GrayImage to_gray(const float* values, Index height, Index width) {
  GrayImage img{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width), 0)};
  const auto [lo, hi] = std::minmax_element(values, values + height * width);
  const float span = *hi - *lo;
  if (!(span > 0.0f)) return img;
  for (Index i = 0; i < height * width; ++i) {
    img.pixels[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(255.0f * (values[i] - *lo) / span));
  }
  return img;
}

std::string read_text(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace sadkit
