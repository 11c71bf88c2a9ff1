#include "nfa/noise.hpp"

#include <cmath>

namespace nfa {

NoiseTrace LaplacianResidualExtractor::extract(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("extract_noise: expected [3 x H x W], got " + shape_str(image.shape()));
  }
  const int h = image.dim(1), w = image.dim(2);
  if (h < 3 || w < 3) {
    throw DimensionError("extract_noise: image " + shape_str(image.shape()) +
                         " is smaller than the 3x3 kernel");
  }
  Plane<float> gray(h, w);
  const std::size_t plane = std::size_t(h) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    gray.data()[i] = (image[i] + image[plane + i] + image[2 * plane + i]) / 3.0f;
  }
  const Plane<float> res = laplacian_residual(gray);
  Tensor map(Shape{1, h, w});
  std::copy(res.data(), res.data() + plane, map.data());
  return NoiseTrace{std::move(map), id()};
}

NoiseTrace extract_noise(const Tensor& image) {
  static const LaplacianResidualExtractor extractor;
  return extractor.extract(image);
}

NoiseStatistics noise_statistics(const NoiseTrace& trace, const Tensor& mask) {
  const Tensor& t = trace.map;
  if (mask.size() != t.size() || mask.dim(-1) != t.dim(-1)) {
    throw DimensionError("noise_statistics: mask " + shape_str(mask.shape()) +
                         " does not match trace " + shape_str(t.shape()));
  }
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (mask[i] > 0.5f) {
      in += std::fabs(t[i]);
      ++n_in;
    } else {
      out += std::fabs(t[i]);
      ++n_out;
    }
  }
  if (n_in == 0 || n_out == 0) {
    throw ValueError("noise_statistics: mask must contain both classes");
  }
  return NoiseStatistics{in / double(n_in), out / double(n_out)};
}

}  // namespace nfa
