#include "nfa/attention.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace nfa {

int topk_count(int n, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError("top-k ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  // The epsilon keeps products such as 0.1 * 30 from rounding up past 3.
  const int k = static_cast<int>(std::ceil(ratio * n - 1e-9));
  return std::clamp(k, 1, n);
}

namespace {

Tensor additive_from_allow(const Tensor& allow) {
  Tensor out(allow.shape());
  constexpr float kNegInf = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < allow.size(); ++i) out[i] = allow[i] == 0.0f ? kNegInf : 0.0f;
  return out;
}

}  // namespace

Tensor NoiseMask::additive() const { return additive_from_allow(allow); }

NoiseMask NoiseMask::head(int h) const {
  const int n = tokens();
  const std::size_t plane = std::size_t(n) * n;
  std::vector<float> data(allow.data() + h * plane, allow.data() + (h + 1) * plane);
  return NoiseMask{Tensor(Shape{1, n, n}, std::move(data)), k};
}

Var attention_matrix(Var q, Var k) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 2 || ks.size() != 2 || qs[1] != ks[1]) {
    throw DimensionError("attention_matrix: Q " + shape_str(qs) + " and K " + shape_str(ks) +
                         " must be [N x d] with equal d");
  }
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(qs[1]));
  return softmax_lastdim(scale(matmul_bt(q, k), inv_sqrt_d));
}

Tensor attention_matrix(const Tensor& q, const Tensor& k) {
  if (q.rank() == 2 && q.dim(1) == 0) throw DimensionError("attention_matrix: d = 0");
  Tape tape;
  return attention_matrix(tape.constant(q), tape.constant(k)).value();
}

namespace {

// Maps a float to an unsigned key with the same ordering.
std::uint32_t order_key(float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  return (u & 0x80000000u) != 0 ? ~u : u | 0x80000000u;
}

float from_order_key(std::uint32_t key) {
  const std::uint32_t u = (key & 0x80000000u) != 0 ? key & 0x7FFFFFFFu : ~key;
  return std::bit_cast<float>(u);
}

// Radix select, one byte per pass. Branch-free histograms beat
// nth_element on the short, unpredictable rows seen here.
float kth_smallest(const float* row, int n, int k, std::vector<std::uint32_t>& keys) {
  for (int j = 0; j < n; ++j) keys[j] = order_key(row[j]);
  std::uint32_t prefix = 0, fixed = 0;
  int need = k;
  for (int shift = 24; shift >= 0; shift -= 8) {
    std::array<int, 256> count{};
    for (int j = 0; j < n; ++j) {
      count[(keys[j] >> shift) & 0xFFu] += (keys[j] & fixed) == prefix;
    }
    int digit = 0;
    while (need > count[digit]) need -= count[digit++];
    prefix |= std::uint32_t(digit) << shift;
    fixed |= 0xFFu << shift;
  }
  return from_order_key(prefix);
}

}  // namespace

NoiseMask topk_dissimilar_mask(const Tensor& attention, double ratio) {
  const bool square = attention.rank() >= 2 && attention.dim(-1) == attention.dim(-2);
  if (!square || attention.rank() > 3) {
    throw DimensionError("topk_dissimilar_mask: expected [N x N] or [heads x N x N], got " +
                         shape_str(attention.shape()));
  }
  const int n = attention.dim(-1);
  const int heads = attention.rank() == 3 ? attention.dim(0) : 1;
  const int k = topk_count(n, ratio);
  Tensor allow(Shape{heads, n, n}, 0.0f);
  std::vector<std::uint32_t> keys(n);
  for (std::size_t r = 0; r < std::size_t(heads) * n; ++r) {
    const float* row = attention.data() + r * n;
    float* out = allow.data() + r * n;
    if (k == n) {
      std::fill(out, out + n, 1.0f);
      continue;
    }
    // Top-k of -A: the k smallest weights, lower key index on ties.
    const float kth = kth_smallest(row, n, k, keys);
    int taken = 0;
    for (int j = 0; j < n; ++j) {
      out[j] = row[j] <= kth ? 1.0f : 0.0f;
      taken += row[j] <= kth;
    }
    if (taken == k) continue;
    // Ties at the k-th value: keep them in key order.
    taken = 0;
    for (int j = 0; j < n; ++j) {
      out[j] = row[j] < kth ? 1.0f : 0.0f;
      taken += row[j] < kth;
    }
    for (int j = 0; j < n && taken < k; ++j) {
      if (row[j] == kth) {
        out[j] = 1.0f;
        ++taken;
      }
    }
  }
  return NoiseMask{std::move(allow), k};
}

Var naa_attention(Var q, Var k, Var v, const NoiseMask& mask, std::optional<Var> residual,
                  MaskMode mode) {
  const Shape& qs = q.shape();
  if (qs.size() != 2 || k.shape() != qs || v.shape() != qs) {
    throw DimensionError("naa_attention: Q, K, V must share an [N x d] shape");
  }
  const int n = qs[0];
  if (mask.heads() != 1 || mask.tokens() != n) {
    throw DimensionError("naa_attention: mask " + shape_str(mask.allow.shape()) +
                         " is not a single-head mask for N = " + std::to_string(n));
  }
  Tape& tape = *q.tape;
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(qs[1]));
  Var logits = scale(matmul_bt(q, k), inv_sqrt_d);
  Var probs;
  if (mode == MaskMode::kRenormalized) {
    const Tensor add = mask.additive().reshaped({n, n});
    probs = softmax_lastdim(logits, &add);
  } else {
    probs = mul(softmax_lastdim(logits), tape.constant(mask.allow.reshaped({n, n})));
  }
  Var out = matmul(probs, v);
  return residual ? add(*residual, out) : out;
}

// --- grouped multi-head attention ---------------------------------------------

namespace {

struct GroupGeometry {
  int batch, grid_h, grid_w, width, heads, stride;
  int head_dim() const { return width / heads; }
  int groups_per_image() const { return stride * stride; }
  int group_size() const { return (grid_h / stride) * (grid_w / stride); }
  int total_groups() const { return batch * heads * groups_per_image(); }
};

using GeometryKey = std::array<int, 6>;

// Index from the grouped [G x s x dh] layout into the flat [batch*N x width]
// layout; `inverse` maps the other way.
IndexMap group_index(const GroupGeometry& g, bool inverse) {
  thread_local std::map<std::pair<GeometryKey, bool>, IndexMap> cache;
  const GeometryKey key{g.batch, g.grid_h, g.grid_w, g.width, g.heads, g.stride};
  auto it = cache.find({key, inverse});
  if (it != cache.end()) return it->second;

  const int n = g.grid_h * g.grid_w;
  const int dh = g.head_dim();
  const int sh = g.grid_h / g.stride, sw = g.grid_w / g.stride;
  auto idx = std::make_shared<std::vector<int>>(std::size_t(g.batch) * n * g.width);
  std::size_t pos = 0;
  for (int b = 0; b < g.batch; ++b)
    for (int h = 0; h < g.heads; ++h)
      for (int gy = 0; gy < g.stride; ++gy)
        for (int gx = 0; gx < g.stride; ++gx)
          for (int ry = 0; ry < sh; ++ry)
            for (int rx = 0; rx < sw; ++rx) {
              const int tok = (ry * g.stride + gy) * g.grid_w + (rx * g.stride + gx);
              for (int c = 0; c < dh; ++c, ++pos) {
                const int flat = (b * n + tok) * g.width + h * dh + c;
                if (inverse) {
                  (*idx)[flat] = static_cast<int>(pos);
                } else {
                  (*idx)[pos] = flat;
                }
              }
            }
  IndexMap result = idx;
  cache.emplace(std::make_pair(key, inverse), result);
  return result;
}

}  // namespace

Var grouped_attention(Var q, Var k, Var v, const TokenLayout& layout, int heads, int stride,
                      const Tensor* mask, MaskMode mode, Tensor* probs) {
  const int n = layout.tokens();
  const Shape flat{layout.batch * n, layout.width};
  if (q.shape() != flat || k.shape() != flat || v.shape() != flat) {
    throw DimensionError("grouped_attention: expected q/k/v of shape " + shape_str(flat) +
                         ", got " + shape_str(q.shape()));
  }
  if (heads < 1 || layout.width % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(layout.width) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (stride < 1 || layout.grid_h % stride != 0 || layout.grid_w % stride != 0) {
    throw ConfigError("fix-sparse attention: grid " + std::to_string(layout.grid_h) + "x" +
                      std::to_string(layout.grid_w) + " is not divisible by stride " +
                      std::to_string(stride));
  }
  if (mask != nullptr && stride != 1) {
    throw ConfigError("attention: a key mask requires stride 1");
  }
  const GroupGeometry geo{layout.batch, layout.grid_h, layout.grid_w, layout.width, heads, stride};
  const int s = geo.group_size();
  const int dh = geo.head_dim();
  const Shape grouped{geo.total_groups(), s, dh};
  if (mask != nullptr && mask->shape() != Shape{layout.batch * heads, n, n}) {
    throw DimensionError("attention: mask " + shape_str(mask->shape()) + " does not match " +
                         std::to_string(layout.batch * heads) + " heads of " +
                         std::to_string(n) + " tokens");
  }

  const IndexMap split = group_index(geo, false);
  Var qg = gather(q, split, grouped);
  Var kg = gather(k, split, grouped);
  Var vg = gather(v, split, grouped);
  Var logits = scale(matmul_bt(qg, kg), 1.0f / std::sqrt(static_cast<float>(dh)));
  Var p;
  if (mask == nullptr) {
    p = softmax_lastdim(logits);
  } else if (mode == MaskMode::kRenormalized) {
    const Tensor add = additive_from_allow(*mask);
    p = softmax_lastdim(logits, &add);
  } else {
    p = mul(softmax_lastdim(logits), q.tape->constant(*mask));
  }
  if (probs != nullptr) *probs = p.value();
  Var out = matmul(p, vg);
  return gather(out, group_index(geo, true), flat);
}

Var fix_sparse_attention(Var x, int grid_h, int grid_w, int stride, int heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 || xs[0] != grid_h * grid_w) {
    throw DimensionError("fix_sparse_attention: X " + shape_str(xs) + " is not a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " token grid");
  }
  const TokenLayout layout{1, grid_h, grid_w, xs[1]};
  return grouped_attention(x, x, x, layout, heads, stride);
}

// --- projections ----------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& prefix,
                                       int width, AttentionConfig config, std::mt19937_64& rng)
    : config_(config), width_(width) {
  if (config.num_heads < 1 || width % config.num_heads != 0) {
    throw ConfigError(prefix + ": model width " + std::to_string(width) +
                      " is not divisible by " + std::to_string(config.num_heads) + " heads");
  }
  auto proj = [&](const char* name, Parameter*& w, Parameter*& b) {
    w = &store.add(prefix + "." + name + ".weight", glorot_uniform(width, width, rng));
    b = &store.add(prefix + "." + name + ".bias", Tensor(Shape{width}, 0.0f));
  };
  proj("q_proj", wq_, bq_);
  proj("k_proj", wk_, bk_);
  proj("v_proj", wv_, bv_);
  proj("out_proj", wo_, bo_);
}

Var MultiHeadAttention::forward(Tape& tape, Var x, const TokenLayout& layout, AttentionKind kind,
                                const NoiseMask* mask, Tensor* probs, bool track) const {
  if (layout.width != width_) {
    throw DimensionError("attention: layout width " + std::to_string(layout.width) +
                         " does not match layer width " + std::to_string(width_));
  }
  Var q = linear(x, bind(tape, *wq_, track), bind(tape, *bq_, track));
  Var k = linear(x, bind(tape, *wk_, track), bind(tape, *bk_, track));
  Var v = linear(x, bind(tape, *wv_, track), bind(tape, *bv_, track));
  Var attended;
  switch (kind) {
    case AttentionKind::kDense:
      attended = grouped_attention(q, k, v, layout, config_.num_heads, 1, nullptr,
                                   config_.mask_mode, probs);
      break;
    case AttentionKind::kFixSparse:
      attended = grouped_attention(q, k, v, layout, config_.num_heads, config_.sparse_stride,
                                   nullptr, config_.mask_mode, probs);
      break;
    case AttentionKind::kNoiseGuided:
      if (mask == nullptr) throw ValueError("attention: noise-guided layer needs a NoiseMask");
      if (mask->heads() != layout.batch * config_.num_heads || mask->tokens() != layout.tokens()) {
        throw DimensionError("attention: NoiseMask " + shape_str(mask->allow.shape()) +
                             " does not match " + std::to_string(layout.batch) + " x " +
                             std::to_string(config_.num_heads) + " heads over " +
                             std::to_string(layout.tokens()) + " tokens");
      }
      attended = grouped_attention(q, k, v, layout, config_.num_heads, 1, &mask->allow,
                                   config_.mask_mode, probs);
      break;
  }
  return linear(attended, bind(tape, *wo_, track), bind(tape, *bo_, track));
}

// --- diffusion oracle ----------------------------------------------------------------

FeatureGrid diffusion_oracle(const FeatureGrid& grid, const DiffusionOracleConfig& config,
                             int layers) {
  const Tensor& p = grid.features;
  if (p.rank() != 2 || grid.forged.size() != std::size_t(p.dim(0))) {
    throw DimensionError("diffusion_oracle: forged set does not match feature rows");
  }
  if (config.alpha < 0.0 || config.beta < 0.0 || std::fabs(config.alpha + config.beta - 1.0) > 1e-9) {
    throw ValueError("diffusion_oracle: alpha and beta must be nonnegative and sum to 1");
  }
  if (std::none_of(grid.forged.begin(), grid.forged.end(), [](bool f) { return f; })) {
    throw ValueError("diffusion_oracle: forged set is empty");
  }
  if (layers < 0) throw ValueError("diffusion_oracle: negative layer count");
  const int n = p.dim(0), d = p.dim(1);
  Eigen::MatrixXd cur = p.matrix().cast<double>();
  for (int l = 0; l < layers; ++l) {
    Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(d);
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (grid.forged[i]) {
        centroid += cur.row(i);
        ++count;
      }
    }
    centroid /= count;
    for (int i = 0; i < n; ++i) {
      if (!grid.forged[i]) cur.row(i) = config.alpha * cur.row(i) + config.beta * centroid;
    }
  }
  FeatureGrid out{Tensor(p.shape()), grid.forged};
  out.features.matrix() = cur.cast<float>();
  return out;
}

}  // namespace nfa
