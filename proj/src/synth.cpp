#include "nfa/synth.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "nfa/image_io.hpp"
#include "nfa/noise.hpp"
#include "nfa/rng.hpp"

namespace nfa {

namespace fs = std::filesystem;

std::string to_string(RegionKind kind) {
  switch (kind) {
    case RegionKind::kNone:
      return "none";
    case RegionKind::kObject:
      return "object";
    case RegionKind::kStuff:
      return "stuff";
    case RegionKind::kBackground:
      return "background";
  }
  return "none";
}

RegionKind parse_region_kind(const std::string& name) {
  for (RegionKind k :
       {RegionKind::kNone, RegionKind::kObject, RegionKind::kStuff, RegionKind::kBackground}) {
    if (to_string(k) == name) return k;
  }
  throw ValueError("unknown region kind '" + name + "'");
}

int area_bin(double area_fraction) {
  return std::clamp(static_cast<int>(std::floor(area_fraction * kAreaBins)), 0, kAreaBins - 1);
}

std::string area_bin_name(int bin) { return "<" + std::to_string(20 * (bin + 1)) + "%"; }

void KindMix::validate() const {
  if (object < 0 || stuff < 0 || background < 0) {
    throw ConfigError("kind mix weights must be non-negative");
  }
  const double total = object + stuff + background;
  if (std::fabs(total - 1.0) > 1e-6) {
    throw ConfigError("kind mix must sum to 1, got " + std::to_string(total));
  }
}

double KindMix::weight(RegionKind kind) const {
  switch (kind) {
    case RegionKind::kObject:
      return object;
    case RegionKind::kStuff:
      return stuff;
    case RegionKind::kBackground:
      return background;
    default:
      return 0.0;
  }
}

void CorpusSpec::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (counts[i] < 1) throw ConfigError(kSplits[i] + " count must be >= 1");
  }
  if (height < 3 || width < 3) throw ConfigError("image size must be at least 3x3");
  mix.validate();
}

namespace {

using PlaneF = Plane<float>;

float smoothstep(float t) { return t * t * (3.0f - 2.0f * t); }

// Smoothly interpolated lattice noise in [0, 1] with lattice spacing `cell`.
PlaneF value_noise(std::mt19937_64& rng, int h, int w, int cell) {
  const int gh = h / cell + 2, gw = w / cell + 2;
  PlaneF lattice(gh, gw);
  for (int i = 0; i < gh * gw; ++i) lattice.data()[i] = static_cast<float>(uniform01(rng));
  PlaneF out(h, w);
  for (int y = 0; y < h; ++y) {
    const float fy = (y + 0.5f) / cell;
    const int iy = static_cast<int>(fy);
    const float ty = smoothstep(fy - iy);
    for (int x = 0; x < w; ++x) {
      const float fx = (x + 0.5f) / cell;
      const int ix = static_cast<int>(fx);
      const float tx = smoothstep(fx - ix);
      const float top = lattice(iy, ix) * (1 - tx) + lattice(iy, ix + 1) * tx;
      const float bottom = lattice(iy + 1, ix) * (1 - tx) + lattice(iy + 1, ix + 1) * tx;
      out(y, x) = top * (1 - ty) + bottom * ty;
    }
  }
  return out;
}

// Marks the `count` pixels with the smallest score (lower index on ties).
Tensor lowest_pixels(const std::vector<float>& score, int count, int h, int w) {
  std::vector<int> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](int a, int b) { return score[a] < score[b] || (score[a] == score[b] && a < b); };
  if (count < static_cast<int>(order.size())) {
    std::nth_element(order.begin(), order.begin() + count, order.end(), less);
  }
  Tensor mask(Shape{h, w}, 0.0f);
  for (int i = 0; i < count; ++i) mask[order[i]] = 1.0f;
  return mask;
}

int pixel_count(double area, int h, int w) {
  const int n = h * w;
  return std::clamp(static_cast<int>(std::lround(area * n)), 1, n - 1);
}

Tensor box3(const Tensor& image) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float s = 0.0f;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += image.at(ch, reflect_index(y + dy, h), reflect_index(x + dx, w));
        out.at(ch, y, x) = s / 9.0f;
      }
  return out;
}

constexpr float kFingerprintStd = 0.02f;
constexpr double kGrainMin = 0.004;
constexpr double kGrainMax = 0.16;

}  // namespace

Tensor gen_texture(std::uint64_t seed, int height, int width) {
  std::mt19937_64 rng(derive_seed(seed, 1));
  // Per-image roughness and contrast keep the residual level from being a
  // giveaway on its own.
  const double persistence = uniform(rng, 0.35, 0.8);
  const double contrast = uniform(rng, 0.3, 0.9);
  PlaneF tex = PlaneF::Zero(height, width);
  double amp = 1.0, total = 0.0;
  for (int cell : {16, 8, 4, 2}) {
    tex += static_cast<float>(amp) * value_noise(rng, height, width, cell);
    total += amp;
    amp *= persistence;
  }
  tex /= static_cast<float>(total);
  Tensor out(Shape{3, height, width});
  for (int c = 0; c < 3; ++c) {
    const float mean = static_cast<float>(uniform(rng, 0.3, 0.7));
    const float gain = static_cast<float>(contrast * uniform(rng, 0.7, 1.0));
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = mean + gain * (tex(y, x) - 0.5f);
  }
  // Pixel-scale grain shared by the channels. Its strength is log-uniform
  // over a 40x range so the global residual level says little about the
  // label; only the local contrast does.
  const float grain = static_cast<float>(kGrainMin * std::pow(kGrainMax / kGrainMin, uniform01(rng)));
  const std::size_t plane = std::size_t(height) * width;
  for (std::size_t i = 0; i < plane; ++i) {
    const float g = grain * static_cast<float>(2.0 * uniform01(rng) - 1.0);
    for (int c = 0; c < 3; ++c) out[c * plane + i] += g;
  }
  return out;
}

Tensor gen_fingerprint(std::uint64_t seed, int height, int width) {
  std::mt19937_64 rng(derive_seed(seed, 2));
  Tensor fp(Shape{height, width});
  for (float& v : fp.values()) v = kFingerprintStd * static_cast<float>(normal(rng));
  return fp;
}

namespace {

Tensor render(const Tensor& texture, const Tensor& fingerprint) {
  Tensor out = texture;
  const std::size_t plane = fingerprint.size();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      out[c * plane + i] = std::clamp(out[c * plane + i] + fingerprint[i], 0.0f, 1.0f);
    }
  return out;
}

}  // namespace

Tensor gen_base_image(std::uint64_t seed, int height, int width) {
  return render(gen_texture(seed, height, width), gen_fingerprint(seed, height, width));
}

Tensor gen_object_blob(double area, std::uint64_t seed, int height, int width) {
  if (!(area > 0.0 && area < 1.0)) throw ValueError("object blob area must lie in (0, 1)");
  std::mt19937_64 rng(derive_seed(seed, 3));
  const double cx = uniform(rng, 0.35, 0.65) * width;
  const double cy = uniform(rng, 0.35, 0.65) * height;
  std::array<double, 3> amp{}, phase{};
  for (int k = 0; k < 3; ++k) {
    amp[k] = uniform(rng, 0.0, 0.18);
    phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  // Star-shaped blob: rank pixels by radius over the harmonic outline, so
  // every prefix of the ranking is a single connected shape.
  std::vector<float> score(std::size_t(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double theta = std::atan2(dy, dx);
      double outline = 1.0;
      for (int k = 0; k < 3; ++k) outline += amp[k] * std::cos((k + 2) * theta + phase[k]);
      score[std::size_t(y) * width + x] = static_cast<float>(std::hypot(dx, dy) / outline);
    }
  return lowest_pixels(score, pixel_count(area, height, width), height, width);
}

std::pair<double, double> legal_area_range(RegionKind kind) {
  switch (kind) {
    case RegionKind::kObject:
      return {0.05, 0.2};
    case RegionKind::kStuff:
      return {0.2, 0.8};
    case RegionKind::kBackground:
      return {0.3, 0.95};
    default:
      throw ValueError("region kind 'none' has no mask");
  }
}

Tensor gen_region_mask(RegionKind kind, double target_area, std::uint64_t seed, int height,
                       int width) {
  const auto [lo, hi] = legal_area_range(kind);
  if (!(target_area > lo && target_area <= hi)) {
    throw ValueError(to_string(kind) + " target area " + std::to_string(target_area) +
                     " outside (" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  switch (kind) {
    case RegionKind::kObject:
      return gen_object_blob(target_area, seed, height, width);
    case RegionKind::kBackground: {
      Tensor mask = gen_object_blob(1.0 - target_area, seed, height, width);
      for (float& v : mask.values()) v = 1.0f - v;
      return mask;
    }
    default: {
      // Low-frequency field plus a random ramp, cut at the target quantile.
      std::mt19937_64 rng(derive_seed(seed, 4));
      const PlaneF coarse = value_noise(rng, height, width, std::max(4, width / 2));
      const PlaneF fine = value_noise(rng, height, width, std::max(2, width / 4));
      const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      std::vector<float> score(std::size_t(height) * width);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double ramp = (std::cos(angle) * x / width + std::sin(angle) * y / height);
          score[std::size_t(y) * width + x] =
              static_cast<float>(-(coarse(y, x) + 0.5 * fine(y, x) + 0.6 * ramp));
        }
      return lowest_pixels(score, pixel_count(target_area, height, width), height, width);
    }
  }
}

Tensor forge_region(const Tensor& base, const Tensor& mask, std::uint64_t base_seed,
                    std::uint64_t forge_seed) {
  if (base.rank() != 3 || base.dim(0) != 3 || mask.rank() != 2 || mask.dim(0) != base.dim(1) ||
      mask.dim(1) != base.dim(2)) {
    throw DimensionError("forge_region: image " + shape_str(base.shape()) + " and mask " +
                         shape_str(mask.shape()) + " disagree");
  }
  if (std::none_of(mask.values().begin(), mask.values().end(), [](float v) { return v > 0.5f; })) {
    throw ValueError("forge_region: mask is empty");
  }
  const int h = base.dim(1), w = base.dim(2);
  const Tensor forged =
      box3(render(gen_texture(base_seed, h, w), gen_fingerprint(forge_seed, h, w)));
  Tensor out = base;
  const std::size_t plane = std::size_t(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // 5x5 mean of the mask gives a 2-pixel feather on both sides.
      int inside = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
          inside += mask.at(yy, xx) > 0.5f;
        }
      if (inside == 0) continue;
      const float a = inside / 25.0f;
      const std::size_t i = std::size_t(y) * w + x;
      for (std::size_t c = 0; c < 3; ++c) {
        out[c * plane + i] = (1.0f - a) * base[c * plane + i] + a * forged[c * plane + i];
      }
    }
  return out;
}

ForgerySample make_sample(const CorpusSpec& spec, int split, int local_index) {
  if (split < 0 || split > 2 || local_index < 0 || local_index >= spec.counts[split]) {
    throw ValueError("make_sample: index out of range");
  }
  int id = local_index;
  for (int s = 0; s < split; ++s) id += spec.counts[s];
  const std::uint64_t stream = 4 * static_cast<std::uint64_t>(id);
  ForgerySample sample;
  sample.id = id;
  sample.split = kSplits[split];
  sample.seed = derive_seed(spec.master_seed, stream);
  sample.label = local_index % 2;
  const int h = spec.height, w = spec.width;
  sample.image = gen_base_image(sample.seed, h, w);
  sample.mask = Tensor(Shape{h, w}, 0.0f);
  if (sample.label == 0) return sample;

  // Forged samples cycle through the area bins; the kind is drawn among the
  // kinds whose legal range reaches into the bin.
  const int bin = (local_index / 2) % kAreaBins;
  constexpr double kMargin = 0.02;
  const double bin_lo = 0.2 * bin + kMargin, bin_hi = 0.2 * (bin + 1) - kMargin;
  std::vector<std::pair<RegionKind, std::pair<double, double>>> legal;
  double total = 0.0;
  for (RegionKind k : {RegionKind::kObject, RegionKind::kStuff, RegionKind::kBackground}) {
    const auto [lo, hi] = legal_area_range(k);
    const double a = std::max(bin_lo, lo + kMargin), b = std::min(bin_hi, hi - kMargin);
    if (a <= b && spec.mix.weight(k) > 0.0) {
      legal.push_back({k, {a, b}});
      total += spec.mix.weight(k);
    }
  }
  if (legal.empty()) {
    throw ConfigError("area bin " + area_bin_name(bin) +
                      " has no region kind with positive weight");
  }
  std::mt19937_64 rng(derive_seed(spec.master_seed, stream + 3));
  double pick = uniform01(rng) * total;
  auto chosen = legal.back();
  for (const auto& entry : legal) {
    pick -= spec.mix.weight(entry.first);
    if (pick < 0.0) {
      chosen = entry;
      break;
    }
  }
  const double target = uniform(rng, chosen.second.first, chosen.second.second);
  sample.kind = chosen.first;
  sample.mask =
      gen_region_mask(sample.kind, target, derive_seed(spec.master_seed, stream + 2), h, w);
  sample.image = forge_region(sample.image, sample.mask, sample.seed,
                              derive_seed(spec.master_seed, stream + 1));
  double forged = 0.0;
  for (float v : sample.mask.values()) forged += v;
  sample.area_fraction = forged / static_cast<double>(sample.mask.size());
  return sample;
}

namespace {

std::string sample_name(int id, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.%s", id, ext);
  return buf;
}

constexpr const char* kManifestHeader = "id,split,label,kind,area_fraction,seed";

}  // namespace

std::vector<ManifestRow> build_corpus(const CorpusSpec& spec, const fs::path& root) {
  spec.validate();
  std::vector<ManifestRow> rows;
  try {
    for (int s = 0; s < 3; ++s) {
      fs::create_directories(root / kSplits[s] / "images");
      fs::create_directories(root / kSplits[s] / "masks");
    }
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create dataset directories under " + root.string() + ": " + e.what());
  }
  for (int s = 0; s < 3; ++s) {
    for (int i = 0; i < spec.counts[s]; ++i) {
      const ForgerySample sample = make_sample(spec, s, i);
      write_ppm(root / kSplits[s] / "images" / sample_name(sample.id, "ppm"), sample.image);
      write_pgm_mask(root / kSplits[s] / "masks" / sample_name(sample.id, "pgm"), sample.mask);
      rows.push_back({sample.id, sample.split, sample.label, sample.kind, sample.area_fraction,
                      sample.seed});
    }
  }
  const fs::path manifest = root / "manifest.csv";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << kManifestHeader << "\n";
  for (const ManifestRow& r : rows) {
    char area[32];
    std::snprintf(area, sizeof area, "%.6f", r.area_fraction);
    out << r.id << "," << r.split << "," << r.label << "," << to_string(r.kind) << "," << area
        << "," << r.seed << "\n";
  }
  if (!out) throw IoError("write failed: " + manifest.string());
  return rows;
}

std::vector<ManifestRow> read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.csv";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw IoError(path.string() + ": unexpected header");
  }
  std::vector<ManifestRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected 6 columns");
    }
    try {
      ManifestRow r;
      r.id = std::stoi(cells[0]);
      r.split = cells[1];
      r.label = std::stoi(cells[2]);
      r.kind = parse_region_kind(cells[3]);
      r.area_fraction = std::stod(cells[4]);
      r.seed = std::stoull(cells[5]);
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<ForgerySample> load_split(const fs::path& root, const std::string& split) {
  if (std::find(kSplits.begin(), kSplits.end(), split) == kSplits.end()) {
    throw ConfigError("unknown split '" + split + "'");
  }
  std::vector<ForgerySample> samples;
  for (const ManifestRow& r : read_manifest(root)) {
    if (r.split != split) continue;
    ForgerySample s;
    s.id = r.id;
    s.split = r.split;
    s.label = r.label;
    s.kind = r.kind;
    s.area_fraction = r.area_fraction;
    s.seed = r.seed;
    s.image = read_ppm(root / split / "images" / sample_name(r.id, "ppm"));
    s.mask = read_pgm_mask(root / split / "masks" / sample_name(r.id, "pgm"));
    samples.push_back(std::move(s));
  }
  std::sort(samples.begin(), samples.end(),
            [](const ForgerySample& a, const ForgerySample& b) { return a.id < b.id; });
  return samples;
}

}  // namespace nfa
