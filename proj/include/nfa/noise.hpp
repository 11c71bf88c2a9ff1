#pragma once

#include <memory>
#include <string>

#include <Eigen/Core>

#include "nfa/tensor.hpp"

namespace nfa {

/// Per-pixel residual map [1 x H x W] with the id of the extractor that made it.
struct NoiseTrace {
  Tensor map;
  std::string extractor_id;
};

/// Pluggable residual extractor; the detector only depends on this interface.
class NoiseExtractor {
 public:
  virtual ~NoiseExtractor() = default;
  virtual std::string id() const = 0;
  /// image: [3 x H x W] in [0, 1].
  virtual NoiseTrace extract(const Tensor& image) const = 0;
};

/// Fixed 3x3 Laplacian high-pass on the channel-averaged image,
/// kernel [[-1,-1,-1],[-1,8,-1],[-1,-1,-1]] / 8 with symmetric
/// (edge-duplicating) border reflection. The output sums to zero exactly in
/// exact arithmetic for any input.
class LaplacianResidualExtractor final : public NoiseExtractor {
 public:
  std::string id() const override { return "laplacian3x3"; }
  NoiseTrace extract(const Tensor& image) const override;
};

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Index into [0, n) under symmetric reflection: -1 -> 0, n -> n - 1.
inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

template <typename Scalar>
Plane<Scalar> laplacian_residual(const Plane<Scalar>& gray) {
  const int h = static_cast<int>(gray.rows());
  const int w = static_cast<int>(gray.cols());
  Plane<Scalar> out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Scalar ring = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dy != 0 || dx != 0) ring += gray(reflect_index(y + dy, h), reflect_index(x + dx, w));
      out(y, x) = (Scalar(8) * gray(y, x) - ring) / Scalar(8);
    }
  }
  return out;
}

/// Default extractor.
NoiseTrace extract_noise(const Tensor& image);

struct NoiseStatistics {
  double mean_abs_in = 0.0;
  double mean_abs_out = 0.0;
};

/// Mean |trace| inside and outside a binary [H x W] mask.
NoiseStatistics noise_statistics(const NoiseTrace& trace, const Tensor& mask);

}  // namespace nfa
