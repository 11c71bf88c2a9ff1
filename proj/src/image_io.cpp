#include "nfa/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <vector>

namespace nfa {

namespace {

struct NetpbmHeader {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
};

// Reads one header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

NetpbmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  NetpbmHeader h;
  h.magic = next_token(in);
  try {
    h.width = std::stoi(next_token(in));
    h.height = std::stoi(next_token(in));
    h.maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed netpbm header");
  }
  if (h.width <= 0 || h.height <= 0 || h.maxval != 255) {
    throw IoError(path.string() + ": unsupported netpbm header (need maxval 255)");
  }
  return h;
}

std::vector<std::uint8_t> read_payload(std::istream& in, std::size_t n,
                                       const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::string& header,
                const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

float quantize8(float v) { return static_cast<float>(to_byte(v)) / 255.0f; }

Tensor quantize8(const Tensor& image) {
  Tensor out = image;
  for (float& v : out.values()) v = quantize8(v);
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("write_ppm: expected [3 x H x W], got " + shape_str(image.shape()));
  }
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = std::size_t(h) * w;
  std::vector<std::uint8_t> bytes(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) bytes[3 * i + c] = to_byte(image[c * plane + i]);
  write_file(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const NetpbmHeader hdr = read_header(in, path);
  if (hdr.magic != "P6") throw IoError(path.string() + ": not a binary PPM (P6)");
  const std::size_t plane = std::size_t(hdr.height) * hdr.width;
  const auto bytes = read_payload(in, 3 * plane, path);
  Tensor image(Shape{3, hdr.height, hdr.width});
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) image[c * plane + i] = bytes[3 * i + c] / 255.0f;
  return image;
}

void write_pgm_mask(const std::filesystem::path& path, const Tensor& mask) {
  if (mask.rank() != 2) {
    throw DimensionError("write_pgm_mask: expected [H x W], got " + shape_str(mask.shape()));
  }
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask[i] > 0.5f ? 255 : 0;
  write_file(path,
             "P5\n" + std::to_string(mask.dim(1)) + " " + std::to_string(mask.dim(0)) + "\n255\n",
             bytes);
}

Tensor read_pgm_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const NetpbmHeader hdr = read_header(in, path);
  if (hdr.magic != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  const auto bytes = read_payload(in, std::size_t(hdr.height) * hdr.width, path);
  Tensor mask(Shape{hdr.height, hdr.width});
  for (std::size_t i = 0; i < bytes.size(); ++i) mask[i] = bytes[i] != 0 ? 1.0f : 0.0f;
  return mask;
}

}  // namespace nfa
