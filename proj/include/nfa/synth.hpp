#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nfa/tensor.hpp"

namespace nfa {

enum class RegionKind { kNone, kObject, kStuff, kBackground };

std::string to_string(RegionKind kind);
/// Throws ValueError on an unknown name.
RegionKind parse_region_kind(const std::string& name);

/// Area bins <20%, <40%, <60%, <80%, <100%.
constexpr int kAreaBins = 5;
int area_bin(double area_fraction);
std::string area_bin_name(int bin);

struct ForgerySample {
  int id = 0;
  std::string split;
  Tensor image;  // [3 x H x W] in [0, 1]
  Tensor mask;   // [H x W], 1 = forged
  int label = 0;
  RegionKind kind = RegionKind::kNone;
  double area_fraction = 0.0;
  std::uint64_t seed = 0;  // base-image seed
};

struct KindMix {
  double object = 0.4;
  double stuff = 0.3;
  double background = 0.3;

  /// Throws ConfigError unless the weights are non-negative and sum to 1.
  void validate() const;
  double weight(RegionKind kind) const;
};

struct CorpusSpec {
  std::array<int, 3> counts{800, 100, 100};  // train, val, test
  int height = 64;
  int width = 64;
  KindMix mix;
  std::uint64_t master_seed = 0;

  void validate() const;
  int total() const { return counts[0] + counts[1] + counts[2]; }
};

inline const std::array<std::string, 3> kSplits{"train", "val", "test"};

// --- generators ------------------------------------------------------------

/// Multi-octave value-noise texture (RGB) without the fingerprint.
Tensor gen_texture(std::uint64_t seed, int height, int width);
/// Per-seed high-frequency fingerprint, shared by the three channels,
/// amplitude (std) 0.02. Shape [H x W].
Tensor gen_fingerprint(std::uint64_t seed, int height, int width);
/// clip(texture(seed) + fingerprint(seed)).
Tensor gen_base_image(std::uint64_t seed, int height, int width);

/// Smooth single blob whose area is as close to `area` as the pixel grid
/// allows; any area in (0, 1).
Tensor gen_object_blob(double area, std::uint64_t seed, int height, int width);
/// Legal targets: object (0.05, 0.2], stuff (0.2, 0.8], background (0.3, 0.95].
Tensor gen_region_mask(RegionKind kind, double target_area, std::uint64_t seed, int height,
                       int width);
/// Legal target interval of a kind (open on the left).
std::pair<double, double> legal_area_range(RegionKind kind);

/// Re-renders the base texture with the fingerprint of `forge_seed`, box
/// blurs it and blends it in over a 2-pixel feathered border. Pixels more
/// than 2 pixels outside the mask are copied from `base` bit for bit.
Tensor forge_region(const Tensor& base, const Tensor& mask, std::uint64_t base_seed,
                    std::uint64_t forge_seed);

/// Deterministic sample `local_index` of `split` (global id `id`), not
/// quantized.
ForgerySample make_sample(const CorpusSpec& spec, int split, int local_index);

// --- on-disk corpus ---------------------------------------------------------

struct ManifestRow {
  int id = 0;
  std::string split;
  int label = 0;
  RegionKind kind = RegionKind::kNone;
  double area_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Writes root/{train,val,test}/{images,masks} and root/manifest.csv.
std::vector<ManifestRow> build_corpus(const CorpusSpec& spec, const std::filesystem::path& root);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& root);
/// Loads one split from disk, in id order. Throws IoError with the path on
/// any failure.
std::vector<ForgerySample> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace nfa
