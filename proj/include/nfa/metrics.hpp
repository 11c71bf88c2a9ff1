#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nfa/synth.hpp"
#include "nfa/tensor.hpp"

namespace nfa {

/// One evaluated sample, probabilities already through the sigmoid.
struct PredictionRecord {
  int id = 0;
  float cls_prob = 0.0f;
  Tensor mask_prob;  // [H x W]
  int label = 0;
  Tensor gt_mask;  // [H x W]
  RegionKind kind = RegionKind::kNone;
  double area_fraction = 0.0;
};

/// Fraction of `positive_class` records on the correct side of 0.5
/// (forged: p >= 0.5, real: p < 0.5). Throws ValueError without positives.
double recall_at_50(std::span<const PredictionRecord> records, int positive_class);

/// Rank ROC AUC over cls_prob with ties counted 1/2. Throws ValueError unless
/// both classes are present.
double auc(std::span<const PredictionRecord> records);
/// Same, on raw scores and 0/1 labels.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Image-level F1 of the forged class at threshold 0.5.
double image_f1(std::span<const PredictionRecord> records);

struct PixelScore {
  double f1 = 0.0;
  double iou = 0.0;
};

/// Forged-class F1 and IoU after binarizing at `threshold` (p >= threshold is
/// forged). Empty gt and empty prediction score (1, 1); empty gt with a
/// nonempty prediction scores (0, 0).
PixelScore pixel_f1_iou(const Tensor& mask_prob, const Tensor& gt_mask, double threshold = 0.5);

/// Loss-ablation rule: 0 (real) iff every pixel probability is below 0.5.
int seg_only_classification(const Tensor& mask_prob);

struct SliceReport {
  std::string name;
  int n = 0;  // forged samples in the slice
  double gen_recall_50 = 0.0;
  double mean_iou = 0.0;
  double pixel_f1 = 0.0;
};

struct MetricsReport {
  int n = 0;
  double gen_recall_50 = 0.0;
  double real_recall_50 = 0.0;
  double image_f1 = 0.0;
  double auc = 0.0;
  double mean_iou = 0.0;  // forged samples only
  double pixel_f1 = 0.0;  // forged samples only
  std::vector<SliceReport> by_kind;  // object, stuff, background
  std::vector<SliceReport> by_area;  // five area bins
};

/// Reduces records in id order, so the result does not depend on input order.
MetricsReport summarize(std::vector<PredictionRecord> records);

/// Per-sample probabilities from a detector.
struct Prediction {
  float cls_prob = 0.0f;
  Tensor mask_prob;  // [H x W]
};

/// Batch predictor. Implementations must be safe to call concurrently on
/// disjoint batches.
using Predictor = std::function<std::vector<Prediction>(std::span<const ForgerySample>)>;

struct EvalOptions {
  int batch_size = 16;
  int threads = 1;
};

/// Runs `predict` over `samples` and summarizes. Throws ValueError on an
/// empty split.
MetricsReport evaluate(const Predictor& predict, std::span<const ForgerySample> samples,
                       const EvalOptions& options = {});
std::vector<PredictionRecord> predict_records(const Predictor& predict,
                                              std::span<const ForgerySample> samples,
                                              const EvalOptions& options = {});

/// Predictor that returns the ground truth.
Predictor oracle_predictor();

struct ReportSections {
  bool by_kind = false;
  bool by_area = false;
};

/// Long format: slice,metric,value.
void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report,
                       ReportSections sections);
std::string metrics_csv(const MetricsReport& report, ReportSections sections);

// --- perturbations ------------------------------------------------------------

enum class PerturbKind { kGaussNoise, kGaussBlur, kJpeg };

struct Perturbation {
  PerturbKind kind;
  int severity;  // sigma for noise (0-255 scale) and blur, quality for jpeg

  std::string name() const;
};

/// The robustness grid, clean column excluded, in report order.
const std::vector<Perturbation>& robustness_protocol();

/// Deterministic in (image, perturbation, seed). Severity must be one of the
/// protocol values; anything else throws ConfigError.
Tensor perturb(const Tensor& image, const Perturbation& p, std::uint64_t seed);

/// Luma-only 8x8 block DCT quantization with the standard luminance table
/// scaled for `quality`; output rounded to 8-bit levels.
Tensor jpeg_luma(const Tensor& image, int quality);
/// Separable Gaussian blur, radius ceil(3 sigma), symmetric borders.
Tensor gaussian_blur(const Tensor& image, double sigma);

struct RobustnessReport {
  std::vector<std::string> columns;  // "original" first
  std::vector<double> gen_recall_50;
  /// Worse-at-higher-severity check per kind, with 0.02 slack.
  bool noise_monotone = false;
  bool blur_monotone = false;
  bool jpeg_monotone = false;

  double delta(std::size_t column) const { return gen_recall_50[column] - gen_recall_50[0]; }
};

RobustnessReport robustness_report(const Predictor& predict,
                                   std::span<const ForgerySample> samples,
                                   std::uint64_t seed, const EvalOptions& options = {});
std::string robustness_csv(const RobustnessReport& report);
void write_robustness_csv(const std::filesystem::path& path, const RobustnessReport& report);

/// Baseline detector: score = -mean |noise trace| (blurred forgeries carry
/// less residual energy).
double trivial_residual_score(const Tensor& image);
double trivial_detector_auc(std::span<const ForgerySample> samples);

}  // namespace nfa
