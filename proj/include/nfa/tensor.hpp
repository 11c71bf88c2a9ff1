#pragma once

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace nfa {

// Error categories shared by every module. Callers (the CLI in particular)
// map them onto exit codes, so keep the hierarchy flat.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

using RowMatrixXf =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrixXf>;
using ConstMatrixMap = Eigen::Map<const RowMatrixXf>;

/// Aligned so vectorized reductions split the same way wherever a buffer lands.
using FloatStorage = std::vector<float, Eigen::aligned_allocator<float>>;

/// Dense row-major float32 array. Plain value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);
  Tensor(Shape shape, std::initializer_list<float> data);

  static Tensor scalar(float value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float> vec() const { return {data_.begin(), data_.end()}; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float item() const;

  // Row-major indexing helpers for the common ranks.
  float& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  float at(int i, int j) const {
    return data_[static_cast<std::size_t>(i) * shape_[1] + j];
  }
  float& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  float at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  /// Same data, new shape. Throws DimensionError if the element count differs.
  Tensor reshaped(Shape shape) const;

  /// View a rank-2 tensor (or a rank-3 slab) as an Eigen matrix.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  void fill(float value);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  FloatStorage data_;
};

float max_abs_diff(const Tensor& a, const Tensor& b);

// NFAT binary tensor file: "NFAT", u8 rank, rank x u32 LE dims, f32 LE payload.
void write_nfat(std::ostream& out, const Tensor& t);
Tensor read_nfat(std::istream& in);
void save_nfat(const std::filesystem::path& path, const Tensor& t);
Tensor load_nfat(const std::filesystem::path& path);

}  // namespace nfa
