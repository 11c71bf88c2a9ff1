#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nfa/autograd.hpp"
#include "nfa/optim.hpp"

namespace nfa {

/// How a NoiseMask is applied inside masked attention.
enum class MaskMode {
  /// -inf on disallowed logits before the softmax; rows renormalize over the
  /// allowed keys.
  kRenormalized,
  /// Softmax over the full row, then disallowed weights are zeroed.
  kPostSoftmax,
};

struct AttentionConfig {
  int num_heads = 1;
  double top_k_ratio = 0.25;
  int sparse_stride = 1;
  MaskMode mask_mode = MaskMode::kRenormalized;
};

/// Number of allowed keys per query row: ceil(ratio * n), at least 1.
int topk_count(int n, double ratio);

/// Boolean query x key selection per head, stored as 0/1 floats in
/// `allow` with shape [heads x N x N]. Every row has exactly `k` ones.
struct NoiseMask {
  Tensor allow;
  int k = 0;

  int heads() const { return allow.dim(0); }
  int tokens() const { return allow.dim(1); }
  /// 0 where allowed, -inf elsewhere.
  Tensor additive() const;
  /// Mask restricted to one head, shape [1 x N x N].
  NoiseMask head(int h) const;
};

/// Softmax(Q K^T / sqrt(d)) for Q, K of shape [N x d].
Tensor attention_matrix(const Tensor& q, const Tensor& k);
Var attention_matrix(Var q, Var k);

/// Marks, per query row, the k = ceil(ratio * N) keys with the smallest
/// attention weight (lowest key index wins ties). Accepts [N x N] or
/// [heads x N x N]. Operates on plain values: no gradient flows through the
/// selection.
NoiseMask topk_dissimilar_mask(const Tensor& attention, double ratio);

/// Single-head masked attention on [N x d] inputs, plus `residual` when given.
Var naa_attention(Var q, Var k, Var v, const NoiseMask& mask,
                  std::optional<Var> residual = std::nullopt,
                  MaskMode mode = MaskMode::kRenormalized);

/// Token layout of a batch of feature grids flattened to [batch*N x width].
struct TokenLayout {
  int batch = 1;
  int grid_h = 1;
  int grid_w = 1;
  int width = 1;

  int tokens() const { return grid_h * grid_w; }
};

/// Multi-head attention on already projected q, k, v of shape [batch*N x width].
/// Tokens are split into stride^2 dilated groups (token (r, c) joins group
/// (r mod stride, c mod stride)); attention runs within each group. An
/// additive mask [batch*heads x N x N] requires stride 1. When `probs` is
/// non-null it receives the attention weights [batch*heads*groups x n x n].
Var grouped_attention(Var q, Var k, Var v, const TokenLayout& layout, int heads, int stride,
                      const Tensor* mask = nullptr, MaskMode mode = MaskMode::kRenormalized,
                      Tensor* probs = nullptr);

/// Fix-Sparse self attention on X [N x d] laid out as a grid_h x grid_w grid:
/// Q = K = V = X per head, dense attention inside each dilated group.
Var fix_sparse_attention(Var x, int grid_h, int grid_w, int stride, int heads);

enum class AttentionKind { kDense, kFixSparse, kNoiseGuided };

/// Q/K/V/output projections around grouped_attention.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& prefix, int width,
                     AttentionConfig config, std::mt19937_64& rng);

  /// kNoiseGuided requires `mask`; kFixSparse uses config.sparse_stride.
  /// `probs` receives the (pre-value) attention weights when non-null.
  Var forward(Tape& tape, Var x, const TokenLayout& layout, AttentionKind kind,
              const NoiseMask* mask = nullptr, Tensor* probs = nullptr,
              bool track = true) const;

  const AttentionConfig& config() const { return config_; }
  Parameter& out_weight() const { return *wo_; }
  Parameter& out_bias() const { return *bo_; }

 private:
  AttentionConfig config_;
  int width_ = 0;
  Parameter *wq_ = nullptr, *bq_ = nullptr, *wk_ = nullptr, *bk_ = nullptr;
  Parameter *wv_ = nullptr, *bv_ = nullptr, *wo_ = nullptr, *bo_ = nullptr;
};

/// Binds a parameter to the tape: tracked leaf when `track`, constant
/// otherwise.
inline Var bind(Tape& tape, Parameter& p, bool track) {
  return track ? tape.watch(p) : tape.constant(p.value);
}

// --- feature-diffusion reference model ----------------------------------------

struct FeatureGrid {
  Tensor features;            // [N x d]
  std::vector<bool> forged;   // length N
};

struct DiffusionOracleConfig {
  double alpha = 0.5;
  double beta = 0.5;
};

/// Iterates P(i) <- alpha * P(i) + beta * mean of forged features for every
/// real token i; forged tokens stay fixed. Verification fixture only.
FeatureGrid diffusion_oracle(const FeatureGrid& grid, const DiffusionOracleConfig& config,
                             int layers);

}  // namespace nfa
