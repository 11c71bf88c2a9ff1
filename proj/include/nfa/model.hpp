#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nfa/attention.hpp"
#include "nfa/autograd.hpp"
#include "nfa/noise.hpp"
#include "nfa/optim.hpp"

namespace nfa {

constexpr int kStages = 4;
using StageInts = std::array<int, kStages>;

struct BranchConfig {
  StageInts dims;
  StageInts depths;
};

enum class LossMode { kJoint, kSegOnly };

struct ModelConfig {
  BranchConfig image{{32, 64, 128, 256}, {2, 2, 2, 2}};
  BranchConfig noise{{16, 32, 64, 128}, {2, 2, 2, 2}};
  StageInts heads{1, 2, 4, 8};
  StageInts patch_strides{4, 2, 2, 2};
  StageInts sparse_strides{8, 4, 2, 1};
  double top_k_ratio = 0.25;
  MaskMode mask_mode = MaskMode::kRenormalized;
  int mlp_ratio = 2;
  int decoder_width = 64;
  int cls_width = 32;
  // Component switches for the structural ablation.
  bool use_noise = true;
  bool use_naa = true;
  bool use_weighted_decoder = true;
  LossMode loss_mode = LossMode::kJoint;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  /// Total downsampling factor of the encoder (32 by default).
  int total_stride() const;
};

/// Minimal configuration (every width <= 16) used by gradient checks.
ModelConfig tiny_model_config();

/// Encoder outputs F1..F4 as token matrices [batch*N_i x C_i].
struct StagePyramid {
  std::array<Var, kStages> features;
  std::array<TokenLayout, kStages> layouts;
};

struct NoiseEncoderOutput {
  StagePyramid pyramid;
  /// Last-layer attention weights per stage, [batch*heads x N x N].
  std::array<Tensor, kStages> attention;
};

struct ForwardResult {
  Var mask_logits;  // [batch x H x W]
  Var cls_logits;   // [batch]
  std::array<NoiseMask, kStages> masks;
};

/// Per-sample prediction in logit space.
struct ModelOutput {
  Tensor mask_logits;  // [1 x H x W]
  float cls_logit = 0.0f;
};

/// Dual-branch forgery localization transformer.
class NfaVit {
 public:
  explicit NfaVit(ModelConfig config);
  NfaVit(const NfaVit&) = delete;
  NfaVit& operator=(const NfaVit&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Stacks per-image noise traces into [batch x 1 x H x W].
  Tensor noise_traces(const Tensor& images) const;

  NoiseEncoderOutput noise_encoder_forward(Tape& tape, const Tensor& traces, bool track) const;

  /// Image branch. The last layer of each stage is noise-guided when `masks`
  /// is given; with `masks == nullptr` it falls back to `fallback_final`.
  StagePyramid image_encoder_forward(Tape& tape, const Tensor& images,
                                     const std::array<NoiseMask, kStages>* masks, bool track,
                                     AttentionKind fallback_final = AttentionKind::kFixSparse) const;

  /// Adds the projected noise features to the image pyramid.
  StagePyramid fuse_noise(Tape& tape, const StagePyramid& image, const StagePyramid& noise,
                          bool track) const;

  /// Weighted multi-scale decoder -> mask logits [batch x H x W].
  Var weighted_decoder(Tape& tape, const StagePyramid& pyramid, int out_h, int out_w,
                       bool track) const;
  /// The gamma-weighted sum before the fuse layer, [batch*N1 x width].
  Var decoder_pre_fuse(Tape& tape, const StagePyramid& pyramid, bool track) const;

  /// Classification head on F4 -> logits [batch].
  Var cls_head(Tape& tape, Var f4, const TokenLayout& layout, bool track) const;

  /// Full forward pass on images [batch x 3 x H x W].
  ForwardResult forward(Tape& tape, const Tensor& images, bool track) const;

  /// Inference on a batch, no gradient tracking.
  std::vector<ModelOutput> predict(const Tensor& images) const;

 private:
  struct Norm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
  };
  struct Linear {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
  };
  struct Block {
    Norm norm1;
    MultiHeadAttention attn;
    Norm norm2;
    Linear fc1, fc2;
  };
  struct Stage {
    Linear embed;
    Norm embed_norm;
    std::vector<Block> blocks;
    Norm out_norm;
  };

  Norm make_norm(const std::string& name, int width);
  Linear make_linear(const std::string& name, int in, int out, bool bias = true);
  std::vector<Stage> make_branch(const std::string& name, const BranchConfig& branch,
                                 int in_channels, MaskMode mode);

  Var apply(Tape& tape, const Norm& n, Var x, bool track) const;
  Var apply(Tape& tape, const Linear& l, Var x, bool track) const;
  Var run_block(Tape& tape, const Block& block, Var x, const TokenLayout& layout,
                AttentionKind kind, const NoiseMask* mask, Tensor* probs, bool track) const;
  /// Shared stage driver; `final_kind` applies to the last block.
  StagePyramid run_branch(Tape& tape, const std::vector<Stage>& stages, const Tensor& input,
                          AttentionKind body_kind, AttentionKind final_kind,
                          const std::array<NoiseMask, kStages>* masks,
                          std::array<Tensor, kStages>* probs, bool track) const;

  ModelConfig config_;
  ParameterStore params_;
  std::vector<Stage> image_stages_;
  std::vector<Stage> noise_stages_;
  std::array<Linear, kStages> noise_fuse_;
  std::array<Linear, kStages> dec_proj_;
  std::array<Parameter*, kStages> gamma_{};
  Linear dec_fuse_, dec_head_;
  Linear cls_conv1_, cls_conv2_, cls_out_;
  Norm cls_norm1_, cls_norm2_;
};

/// L = BCE(cls, y) + BCE(mask, M); the classification term is dropped in
/// seg-only mode. `labels` is [batch], `masks` is [batch x H x W].
Var nfa_loss(Var mask_logits, Var cls_logits, const Tensor& labels, const Tensor& masks,
             LossMode mode = LossMode::kJoint);

}  // namespace nfa
