#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nfa/config.hpp"
#include "nfa/metrics.hpp"
#include "nfa/model.hpp"

namespace nfa {

struct Batch {
  Tensor images;  // [B x 3 x H x W]
  Tensor labels;  // [B]
  Tensor masks;   // [B x H x W]
};

Batch make_batch(std::span<const ForgerySample> samples);

/// Sigmoid outputs of `model`. Under the seg-only loss the classification
/// probability comes from the mask (see seg_only_classification).
Predictor model_predictor(const NfaVit& model);

/// Scales every trainable gradient so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& params, double max_norm);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_iou = 0.0;
  double val_f1 = 0.0;  // pixel F1
  double val_auc = 0.0;
  double val_gen_r50 = 0.0;
  double val_real_r50 = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  std::vector<Tensor> best_params;
};

using ProgressFn = std::function<void(const EpochLog&)>;

/// Adam with warmup + cosine decay. Keeps the parameters of the epoch with
/// the highest validation IoU (earliest wins ties) and restores them into
/// `model` before returning.
TrainResult train_model(NfaVit& model, const RunConfig& config,
                        std::span<const ForgerySample> train, std::span<const ForgerySample> val,
                        int eval_threads = 1, const ProgressFn& progress = {});

std::string epoch_log_csv(const std::vector<EpochLog>& log);

// --- checkpoints ---------------------------------------------------------------

/// Either a trained model or the ground-truth oracle fixture.
struct Checkpoint {
  std::string kind;  // "nfa_vit" or "oracle"
  std::unique_ptr<NfaVit> model;

  Predictor predictor() const;
};

/// Directory of NFAT files plus manifest.txt (config keys, then one
/// "param <name> <shape> <file>" line per parameter).
void save_checkpoint(const std::filesystem::path& dir, const NfaVit& model);
void save_oracle_checkpoint(const std::filesystem::path& dir);
/// Throws IoError on anything missing, malformed or inconsistent.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// --- experiment drivers ----------------------------------------------------------

/// Reads the corpus under config.data_dir, trains, and writes
/// out_dir/{config.txt, train_log.csv, checkpoint/}.
TrainResult run_training(const RunConfig& config, int threads, const ProgressFn& progress = {});

struct AblationRow {
  std::string config;
  double top_k_ratio = 0.0;
  std::uint64_t seed = 0;
  MetricsReport test;
};

/// Trains and evaluates one variant on the test split. Writes the same
/// artifacts as run_training plus out_dir/metrics.csv.
AblationRow run_variant(const RunConfig& config, int threads, const ProgressFn& progress = {});

/// config,top_k_ratio,seed,gen_r50,real_r50,iou,auc,image_f1,iou_lt20..iou_lt100
std::string ablation_csv(const std::vector<AblationRow>& rows);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace nfa
