#pragma once

#include <filesystem>

#include "nfa/tensor.hpp"

namespace nfa {

/// Rounds to the nearest 8-bit level: round(clamp(v, 0, 1) * 255) / 255.
float quantize8(float v);
Tensor quantize8(const Tensor& image);

/// Binary PPM (P6, maxval 255) from/to [3 x H x W] in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

/// Binary PGM (P5, maxval 255). Masks are written as 0/255 and read back as
/// 0/1 ([H x W]); any nonzero byte counts as forged.
void write_pgm_mask(const std::filesystem::path& path, const Tensor& mask);
Tensor read_pgm_mask(const std::filesystem::path& path);

}  // namespace nfa
