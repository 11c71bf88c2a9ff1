#include "nfa/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "nfa/noise.hpp"
#include "nfa/rng.hpp"

namespace nfa {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool predicted_forged(float p) { return p >= 0.5f; }

}  // namespace

double recall_at_50(std::span<const PredictionRecord> records, int positive_class) {
  int total = 0, hit = 0;
  for (const PredictionRecord& r : records) {
    if (r.label != positive_class) continue;
    ++total;
    hit += predicted_forged(r.cls_prob) == (positive_class == 1);
  }
  if (total == 0) {
    throw ValueError("recall_at_50: no records of class " + std::to_string(positive_class));
  }
  return static_cast<double>(hit) / total;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::int64_t pos = 0;
  for (int l : labels) pos += l == 1;
  const std::int64_t neg = static_cast<std::int64_t>(n) - pos;
  if (pos == 0 || neg == 0) throw ValueError("auc: both classes are required");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Doubled ranks keep the tie correction in integers: a tie group at
  // 1-based positions i..j contributes i + j per member.
  std::int64_t rank2_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::int64_t r2 = static_cast<std::int64_t>(i + 1 + j + 1);
    for (std::size_t t = i; t <= j; ++t) rank2_pos += labels[order[t]] == 1 ? r2 : 0;
    i = j + 1;
  }
  return static_cast<double>(rank2_pos - pos * (pos + 1)) / (2.0 * pos * neg);
}

double auc(std::span<const PredictionRecord> records) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const PredictionRecord& r : records) {
    scores.push_back(r.cls_prob);
    labels.push_back(r.label);
  }
  return auc(scores, labels);
}

double image_f1(std::span<const PredictionRecord> records) {
  int tp = 0, fp = 0, fn = 0;
  for (const PredictionRecord& r : records) {
    const bool p = predicted_forged(r.cls_prob);
    tp += p && r.label == 1;
    fp += p && r.label == 0;
    fn += !p && r.label == 1;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * tp / (2.0 * tp + fp + fn);
}

PixelScore pixel_f1_iou(const Tensor& mask_prob, const Tensor& gt_mask, double threshold) {
  if (mask_prob.size() != gt_mask.size() || mask_prob.dim(-1) != gt_mask.dim(-1)) {
    throw DimensionError("pixel_f1_iou: prediction " + shape_str(mask_prob.shape()) +
                         " does not match ground truth " + shape_str(gt_mask.shape()));
  }
  std::int64_t tp = 0, fp = 0, fn = 0, gt = 0;
  for (std::size_t i = 0; i < gt_mask.size(); ++i) {
    const bool p = mask_prob[i] >= threshold;
    const bool g = gt_mask[i] > 0.5f;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
    gt += g;
  }
  if (gt == 0) return fp == 0 ? PixelScore{1.0, 1.0} : PixelScore{0.0, 0.0};
  return PixelScore{2.0 * tp / (2.0 * tp + fp + fn), static_cast<double>(tp) / (tp + fp + fn)};
}

int seg_only_classification(const Tensor& mask_prob) {
  for (float p : mask_prob.values())
    if (predicted_forged(p)) return 1;
  return 0;
}

namespace {

SliceReport slice_report(std::string name, const std::vector<const PredictionRecord*>& members) {
  SliceReport s;
  s.name = std::move(name);
  s.n = static_cast<int>(members.size());
  if (s.n == 0) {
    s.gen_recall_50 = s.mean_iou = s.pixel_f1 = kNaN;
    return s;
  }
  double hit = 0, iou = 0, f1 = 0;
  for (const PredictionRecord* r : members) {
    hit += predicted_forged(r->cls_prob);
    const PixelScore ps = pixel_f1_iou(r->mask_prob, r->gt_mask);
    iou += ps.iou;
    f1 += ps.f1;
  }
  s.gen_recall_50 = hit / s.n;
  s.mean_iou = iou / s.n;
  s.pixel_f1 = f1 / s.n;
  return s;
}

}  // namespace

MetricsReport summarize(std::vector<PredictionRecord> records) {
  if (records.empty()) throw ValueError("summarize: no records");
  std::sort(records.begin(), records.end(),
            [](const PredictionRecord& a, const PredictionRecord& b) { return a.id < b.id; });
  MetricsReport rep;
  rep.n = static_cast<int>(records.size());
  bool has_pos = false, has_neg = false;
  for (const PredictionRecord& r : records) (r.label == 1 ? has_pos : has_neg) = true;
  rep.gen_recall_50 = has_pos ? recall_at_50(records, 1) : kNaN;
  rep.real_recall_50 = has_neg ? recall_at_50(records, 0) : kNaN;
  rep.auc = has_pos && has_neg ? auc(records) : kNaN;
  rep.image_f1 = image_f1(records);

  std::vector<const PredictionRecord*> forged;
  for (const PredictionRecord& r : records)
    if (r.label == 1) forged.push_back(&r);
  const SliceReport all = slice_report("forged", forged);
  rep.mean_iou = all.mean_iou;
  rep.pixel_f1 = all.pixel_f1;

  for (RegionKind k : {RegionKind::kObject, RegionKind::kStuff, RegionKind::kBackground}) {
    std::vector<const PredictionRecord*> members;
    for (const PredictionRecord* r : forged)
      if (r->kind == k) members.push_back(r);
    rep.by_kind.push_back(slice_report("kind:" + to_string(k), members));
  }
  for (int b = 0; b < kAreaBins; ++b) {
    std::vector<const PredictionRecord*> members;
    for (const PredictionRecord* r : forged)
      if (area_bin(r->area_fraction) == b) members.push_back(r);
    rep.by_area.push_back(slice_report("area:" + area_bin_name(b), members));
  }
  return rep;
}

std::vector<PredictionRecord> predict_records(const Predictor& predict,
                                              std::span<const ForgerySample> samples,
                                              const EvalOptions& options) {
  if (samples.empty()) throw ValueError("evaluate: split is empty");
  const int bs = std::max(1, options.batch_size);
  const int batches = static_cast<int>((samples.size() + bs - 1) / bs);
  std::vector<PredictionRecord> records(samples.size());
  std::vector<std::exception_ptr> errors(std::max(1, options.threads));

  auto run = [&](int worker, int stride) {
    try {
      for (int b = worker; b < batches; b += stride) {
        const std::size_t lo = std::size_t(b) * bs;
        const std::size_t hi = std::min(samples.size(), lo + bs);
        const auto batch = samples.subspan(lo, hi - lo);
        std::vector<Prediction> preds = predict(batch);
        if (preds.size() != batch.size()) throw ValueError("predictor returned a short batch");
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const ForgerySample& s = batch[i];
          Prediction& p = preds[i];
          if (p.mask_prob.size() != s.mask.size()) {
            throw DimensionError("predicted mask " + shape_str(p.mask_prob.shape()) +
                                 " does not match " + shape_str(s.mask.shape()));
          }
          records[lo + i] = PredictionRecord{s.id,   p.cls_prob, p.mask_prob.reshaped(s.mask.shape()),
                                             s.label, s.mask,     s.kind,
                                             s.area_fraction};
        }
      }
    } catch (...) {
      errors[worker] = std::current_exception();
    }
  };
  const int threads = std::clamp(options.threads, 1, std::max(1, batches));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
    for (std::thread& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return records;
}

MetricsReport evaluate(const Predictor& predict, std::span<const ForgerySample> samples,
                       const EvalOptions& options) {
  return summarize(predict_records(predict, samples, options));
}

Predictor oracle_predictor() {
  return [](std::span<const ForgerySample> batch) {
    std::vector<Prediction> out;
    for (const ForgerySample& s : batch) {
      out.push_back(Prediction{s.label == 1 ? 1.0f : 0.0f, s.mask});
    }
    return out;
  };
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void slice_rows(std::ostringstream& out, const SliceReport& s) {
  out << s.name << ",n," << s.n << "\n";
  out << s.name << ",gen_r50," << fmt(s.gen_recall_50) << "\n";
  out << s.name << ",iou," << fmt(s.mean_iou) << "\n";
  out << s.name << ",pixel_f1," << fmt(s.pixel_f1) << "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::string metrics_csv(const MetricsReport& r, ReportSections sections) {
  std::ostringstream out;
  out << "slice,metric,value\n";
  out << "overall,n," << r.n << "\n";
  out << "overall,gen_r50," << fmt(r.gen_recall_50) << "\n";
  out << "overall,real_r50," << fmt(r.real_recall_50) << "\n";
  out << "overall,image_f1," << fmt(r.image_f1) << "\n";
  out << "overall,auc," << fmt(r.auc) << "\n";
  out << "overall,iou," << fmt(r.mean_iou) << "\n";
  out << "overall,pixel_f1," << fmt(r.pixel_f1) << "\n";
  if (sections.by_kind)
    for (const SliceReport& s : r.by_kind) slice_rows(out, s);
  if (sections.by_area)
    for (const SliceReport& s : r.by_area) slice_rows(out, s);
  return out.str();
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report,
                       ReportSections sections) {
  write_text(path, metrics_csv(report, sections));
}

// --- perturbations ------------------------------------------------------------

std::string Perturbation::name() const {
  switch (kind) {
    case PerturbKind::kGaussNoise:
      return "gauss_noise_" + std::to_string(severity);
    case PerturbKind::kGaussBlur:
      return "gauss_blur_" + std::to_string(severity);
    case PerturbKind::kJpeg:
      return "jpeg_" + std::to_string(severity);
  }
  return "unknown";
}

const std::vector<Perturbation>& robustness_protocol() {
  static const std::vector<Perturbation> grid{
      {PerturbKind::kGaussNoise, 1}, {PerturbKind::kGaussNoise, 3}, {PerturbKind::kGaussBlur, 1},
      {PerturbKind::kGaussBlur, 3},  {PerturbKind::kJpeg, 95},      {PerturbKind::kJpeg, 75}};
  return grid;
}

namespace {

void require_image(const Tensor& image, const char* who) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError(std::string(who) + ": expected [3 x H x W], got " +
                         shape_str(image.shape()));
  }
}

constexpr std::array<int, 64> kLumaTable{
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

// cos((2x + 1) u pi / 16) scaled by the orthonormal DCT-II factors.
const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        const double cu = u == 0 ? std::sqrt(0.125) : 0.5;
        b[u * 8 + x] = cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    return b;
  }();
  return basis;
}

}  // namespace

Tensor gaussian_blur(const Tensor& image, double sigma) {
  require_image(image, "gaussian_blur");
  if (!(sigma > 0)) throw ConfigError("gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= total;
  const int h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  std::vector<double> tmp(std::size_t(h) * w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[i + radius] * image.at(c, y, reflect_index(x + i, w));
        tmp[std::size_t(y) * w + x] = s;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp[std::size_t(reflect_index(y + i, h)) * w + x];
        out.at(c, y, x) = static_cast<float>(s);
      }
  }
  return out;
}

Tensor jpeg_luma(const Tensor& image, int quality) {
  require_image(image, "jpeg_luma");
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<double, 64> q{};
  for (int i = 0; i < 64; ++i) q[i] = std::clamp((kLumaTable[i] * scale + 50) / 100, 1, 255);

  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = std::size_t(h) * w;
  std::vector<double> Y(plane), Cb(plane), Cr(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const double r = 255.0 * image[i], g = 255.0 * image[plane + i], b = 255.0 * image[2 * plane + i];
    Y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
    Cb[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
    Cr[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
  }
  const auto& basis = dct_basis();
  std::vector<double> Yq(plane);
  for (int by = 0; by < h; by += 8)
    for (int bx = 0; bx < w; bx += 8) {
      std::array<double, 64> f{}, tmp{}, coef{};
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          // Partial edge blocks replicate the last row/column.
          const int yy = std::min(by + y, h - 1), xx = std::min(bx + x, w - 1);
          f[y * 8 + x] = Y[std::size_t(yy) * w + xx] - 128.0;
        }
      for (int y = 0; y < 8; ++y)
        for (int v = 0; v < 8; ++v) {
          double s = 0.0;
          for (int x = 0; x < 8; ++x) s += basis[v * 8 + x] * f[y * 8 + x];
          tmp[y * 8 + v] = s;
        }
      for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
          double s = 0.0;
          for (int y = 0; y < 8; ++y) s += basis[u * 8 + y] * tmp[y * 8 + v];
          coef[u * 8 + v] = std::round(s / q[u * 8 + v]) * q[u * 8 + v];
        }
      for (int u = 0; u < 8; ++u)
        for (int x = 0; x < 8; ++x) {
          double s = 0.0;
          for (int v = 0; v < 8; ++v) s += basis[v * 8 + x] * coef[u * 8 + v];
          tmp[u * 8 + x] = s;
        }
      for (int y = 0; y < 8 && by + y < h; ++y)
        for (int x = 0; x < 8 && bx + x < w; ++x) {
          double s = 0.0;
          for (int u = 0; u < 8; ++u) s += basis[u * 8 + y] * tmp[u * 8 + x];
          Yq[std::size_t(by + y) * w + bx + x] = s + 128.0;
        }
    }
  Tensor out(image.shape());
  auto level = [](double v) { return static_cast<float>(std::clamp(std::round(v), 0.0, 255.0) / 255.0); };
  for (std::size_t i = 0; i < plane; ++i) {
    const double cb = Cb[i] - 128.0, cr = Cr[i] - 128.0;
    out[i] = level(Yq[i] + 1.402 * cr);
    out[plane + i] = level(Yq[i] - 0.344136 * cb - 0.714136 * cr);
    out[2 * plane + i] = level(Yq[i] + 1.772 * cb);
  }
  return out;
}

Tensor perturb(const Tensor& image, const Perturbation& p, std::uint64_t seed) {
  require_image(image, "perturb");
  const bool sigma_ok = p.severity == 1 || p.severity == 3;
  switch (p.kind) {
    case PerturbKind::kGaussNoise: {
      if (!sigma_ok) throw ConfigError("gauss_noise severity must be 1 or 3");
      std::mt19937_64 rng(derive_seed(seed, 0x6E6F697365ull + p.severity));
      Tensor out = image;
      const double sigma = p.severity / 255.0;
      for (float& v : out.values()) {
        v = std::clamp(static_cast<float>(v + sigma * normal(rng)), 0.0f, 1.0f);
      }
      return out;
    }
    case PerturbKind::kGaussBlur:
      if (!sigma_ok) throw ConfigError("gauss_blur severity must be 1 or 3");
      return gaussian_blur(image, p.severity);
    case PerturbKind::kJpeg:
      if (p.severity != 95 && p.severity != 75) throw ConfigError("jpeg quality must be 95 or 75");
      return jpeg_luma(image, p.severity);
  }
  throw ConfigError("unknown perturbation");
}

RobustnessReport robustness_report(const Predictor& predict,
                                   std::span<const ForgerySample> samples, std::uint64_t seed,
                                   const EvalOptions& options) {
  RobustnessReport rep;
  rep.columns.push_back("original");
  rep.gen_recall_50.push_back(evaluate(predict, samples, options).gen_recall_50);
  for (const Perturbation& p : robustness_protocol()) {
    std::vector<ForgerySample> degraded(samples.begin(), samples.end());
    for (ForgerySample& s : degraded) {
      s.image = perturb(s.image, p, derive_seed(seed, static_cast<std::uint64_t>(s.id)));
    }
    rep.columns.push_back(p.name());
    rep.gen_recall_50.push_back(evaluate(predict, degraded, options).gen_recall_50);
  }
  constexpr double kSlack = 0.02;
  const auto& r = rep.gen_recall_50;
  rep.noise_monotone = r[2] <= r[1] + kSlack;
  rep.blur_monotone = r[4] <= r[3] + kSlack;
  rep.jpeg_monotone = r[6] <= r[5] + kSlack;
  return rep;
}

std::string robustness_csv(const RobustnessReport& rep) {
  std::ostringstream out;
  out << "row";
  for (const std::string& c : rep.columns) out << "," << c;
  out << "\ngen_r50";
  for (double v : rep.gen_recall_50) out << "," << fmt(v);
  out << "\ndelta";
  for (std::size_t i = 0; i < rep.columns.size(); ++i) out << "," << fmt(rep.delta(i));
  // The monotonicity flag sits under the higher-severity column of each pair.
  out << "\nmonotone,,," << int(rep.noise_monotone) << ",," << int(rep.blur_monotone) << ",,"
      << int(rep.jpeg_monotone) << "\n";
  return out.str();
}

void write_robustness_csv(const std::filesystem::path& path, const RobustnessReport& report) {
  write_text(path, robustness_csv(report));
}

double trivial_residual_score(const Tensor& image) {
  const NoiseTrace t = extract_noise(image);
  double s = 0.0;
  for (float v : t.map.values()) s += std::fabs(v);
  return -s / static_cast<double>(t.map.size());
}

double trivial_detector_auc(std::span<const ForgerySample> samples) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const ForgerySample& s : samples) {
    scores.push_back(trivial_residual_score(s.image));
    labels.push_back(s.label);
  }
  return auc(scores, labels);
}

}  // namespace nfa
