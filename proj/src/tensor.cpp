#include "nfa/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace nfa {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<float> data)
    : Tensor(std::move(shape), std::vector<float>(data)) {}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

float Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

MatrixMap Tensor::matrix() {
  const int cols = shape_.empty() ? 1 : shape_.back();
  return MatrixMap(data_.data(), static_cast<Eigen::Index>(data_.size() / cols), cols);
}

ConstMatrixMap Tensor::matrix() const {
  const int cols = shape_.empty() ? 1 : shape_.back();
  return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(data_.size() / cols),
                        cols);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

namespace {

constexpr std::array<char, 4> kMagic = {'N', 'F', 'A', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated NFAT header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_nfat(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw DimensionError("rank too large for NFAT");
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(t.rank()));
  for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw IoError("failed writing NFAT payload");
}

Tensor read_nfat(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("bad NFAT magic");
  }
  const int rank = in.get();
  if (rank <= 0) throw IoError("bad NFAT rank");
  Shape shape(rank);
  for (int& d : shape) {
    const std::uint32_t v = get_u32(in);
    if (v == 0 || v > (1u << 30)) throw IoError("bad NFAT dimension");
    d = static_cast<int>(v);
  }
  std::vector<float> data(shape_numel(shape));
  for (float& v : data) v = std::bit_cast<float>(get_u32(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_nfat(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_nfat(out, t);
}

Tensor load_nfat(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_nfat(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace nfa
