#include "nfa/model.hpp"

#include <algorithm>
#include <map>

#include "nfa/rng.hpp"

namespace nfa {

namespace {

using IndexKey = std::array<int, 6>;

template <typename Build>
IndexMap cached_index(int kind, IndexKey key, Build build) {
  thread_local std::map<std::pair<int, IndexKey>, IndexMap> cache;
  auto it = cache.find({kind, key});
  if (it != cache.end()) return it->second;
  IndexMap idx = std::make_shared<const std::vector<int>>(build());
  cache.emplace(std::make_pair(kind, key), idx);
  return idx;
}

// [b x c x h x w] image -> [b*(h/p)*(w/p) x p*p*c] patches, feature order (dy, dx, c).
IndexMap image_patch_index(int b, int c, int h, int w, int p) {
  return cached_index(0, {b, c, h, w, p, 0}, [=] {
    std::vector<int> idx;
    idx.reserve(std::size_t(b) * c * h * w);
    for (int n = 0; n < b; ++n)
      for (int py = 0; py < h / p; ++py)
        for (int px = 0; px < w / p; ++px)
          for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
              for (int ch = 0; ch < c; ++ch)
                idx.push_back(((n * c + ch) * h + py * p + dy) * w + px * p + dx);
    return idx;
  });
}

// [b*h*w x c] tokens -> [b*(h/p)*(w/p) x p*p*c] patches.
IndexMap token_patch_index(int b, int h, int w, int c, int p) {
  return cached_index(1, {b, h, w, c, p, 0}, [=] {
    std::vector<int> idx;
    idx.reserve(std::size_t(b) * c * h * w);
    for (int n = 0; n < b; ++n)
      for (int py = 0; py < h / p; ++py)
        for (int px = 0; px < w / p; ++px)
          for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
              for (int ch = 0; ch < c; ++ch)
                idx.push_back(((n * h + py * p + dy) * w + px * p + dx) * c + ch);
    return idx;
  });
}

// [b*h*w x c] tokens <-> [b*c x h x w] channel maps.
IndexMap tokens_to_maps_index(int b, int h, int w, int c) {
  return cached_index(2, {b, h, w, c, 0, 0}, [=] {
    std::vector<int> idx;
    idx.reserve(std::size_t(b) * c * h * w);
    for (int n = 0; n < b; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) idx.push_back(((n * h + y) * w + x) * c + ch);
    return idx;
  });
}

IndexMap maps_to_tokens_index(int b, int h, int w, int c) {
  return cached_index(3, {b, h, w, c, 0, 0}, [=] {
    std::vector<int> idx;
    idx.reserve(std::size_t(b) * c * h * w);
    for (int n = 0; n < b; ++n)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ch = 0; ch < c; ++ch) idx.push_back(((n * c + ch) * h + y) * w + x);
    return idx;
  });
}

// 3x3, zero-padded neighbourhoods: [b*h*w x c] -> [b*h*w x 9*c].
IndexMap im2col3x3_index(int b, int h, int w, int c) {
  return cached_index(4, {b, h, w, c, 0, 0}, [=] {
    std::vector<int> idx;
    idx.reserve(std::size_t(b) * h * w * 9 * c);
    for (int n = 0; n < b; ++n)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx)
              for (int ch = 0; ch < c; ++ch) {
                const int yy = y + ky, xx = x + kx;
                const bool inside = yy >= 0 && yy < h && xx >= 0 && xx < w;
                idx.push_back(inside ? ((n * h + yy) * w + xx) * c + ch : -1);
              }
    return idx;
  });
}

std::string stage_name(const std::string& branch, int s) {
  return branch + ".stage" + std::to_string(s + 1);
}

}  // namespace

// --- configuration -----------------------------------------------------------

int ModelConfig::total_stride() const {
  int s = 1;
  for (int p : patch_strides) s *= p;
  return s;
}

void ModelConfig::validate() const {
  for (int s = 0; s < kStages; ++s) {
    const std::string where = "stage " + std::to_string(s + 1);
    if (image.dims[s] < 1 || noise.dims[s] < 1) throw ConfigError(where + ": widths must be >= 1");
    if (image.depths[s] < 1 || noise.depths[s] < 1) {
      throw ConfigError(where + ": depths must be >= 1");
    }
    if (heads[s] < 1 || image.dims[s] % heads[s] != 0 || noise.dims[s] % heads[s] != 0) {
      throw ConfigError(where + ": both branch widths must be divisible by " +
                        std::to_string(heads[s]) + " heads");
    }
    if (patch_strides[s] < 1) throw ConfigError(where + ": patch stride must be >= 1");
    if (sparse_strides[s] < 1) throw ConfigError(where + ": sparse stride must be >= 1");
  }
  if (!(top_k_ratio > 0.0 && top_k_ratio <= 1.0)) {
    throw ConfigError("top_k_ratio must lie in (0, 1]");
  }
  if (mlp_ratio < 1 || decoder_width < 1 || cls_width < 1) {
    throw ConfigError("mlp_ratio, decoder_width and cls_width must be >= 1");
  }
  if (use_naa && !use_noise) throw ConfigError("noise-guided attention requires the noise branch");
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image = {{8, 8, 16, 16}, {2, 1, 1, 1}};
  c.noise = {{4, 8, 8, 16}, {1, 1, 1, 1}};
  c.heads = {1, 2, 2, 2};
  c.sparse_strides = {2, 2, 1, 1};
  c.mlp_ratio = 2;
  c.decoder_width = 8;
  c.cls_width = 8;
  return c;
}

// --- construction ---------------------------------------------------------------

NfaVit::NfaVit(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  image_stages_ = make_branch("image_enc", config_.image, 3, config_.mask_mode);
  if (config_.use_noise) {
    noise_stages_ = make_branch("noise_enc", config_.noise, 1, config_.mask_mode);
    for (int s = 0; s < kStages; ++s) {
      noise_fuse_[s] = make_linear("fuse.stage" + std::to_string(s + 1), config_.noise.dims[s],
                                   config_.image.dims[s]);
    }
  }
  const int width = config_.decoder_width;
  for (int s = 0; s < kStages; ++s) {
    dec_proj_[s] = make_linear("decoder.proj" + std::to_string(s + 1), config_.image.dims[s], width);
    gamma_[s] = &params_.add("decoder.gamma" + std::to_string(s + 1), Tensor(Shape{1}, 1.0f));
    gamma_[s]->trainable = config_.use_weighted_decoder;
  }
  dec_fuse_ = make_linear("decoder.fuse", width, width);
  dec_head_ = make_linear("decoder.head", width, 1);
  const int c4 = config_.image.dims[kStages - 1];
  cls_conv1_ = make_linear("cls.conv1", 9 * c4, config_.cls_width);
  cls_norm1_ = make_norm("cls.norm1", config_.cls_width);
  cls_conv2_ = make_linear("cls.conv2", 9 * config_.cls_width, config_.cls_width);
  cls_norm2_ = make_norm("cls.norm2", config_.cls_width);
  cls_out_ = make_linear("cls.out", config_.cls_width, 1);
}

NfaVit::Norm NfaVit::make_norm(const std::string& name, int width) {
  Norm n;
  n.gain = &params_.add(name + ".gain", Tensor(Shape{width}, 1.0f));
  n.bias = &params_.add(name + ".bias", Tensor(Shape{width}, 0.0f));
  return n;
}

NfaVit::Linear NfaVit::make_linear(const std::string& name, int in, int out, bool bias) {
  // Each parameter gets its own stream so adding a layer never reshuffles
  // the initialization of the others.
  std::mt19937_64 rng(derive_seed(config_.init_seed, name_hash(name)));
  Linear l;
  l.weight = &params_.add(name + ".weight", glorot_uniform(in, out, rng));
  if (bias) l.bias = &params_.add(name + ".bias", Tensor(Shape{out}, 0.0f));
  return l;
}

std::vector<NfaVit::Stage> NfaVit::make_branch(const std::string& name, const BranchConfig& branch,
                                               int in_channels, MaskMode mode) {
  std::vector<Stage> stages(kStages);
  int in = in_channels;
  for (int s = 0; s < kStages; ++s) {
    const std::string prefix = stage_name(name, s);
    const int p = config_.patch_strides[s];
    const int d = branch.dims[s];
    Stage& st = stages[s];
    st.embed = make_linear(prefix + ".patch_embed", in * p * p, d);
    st.embed_norm = make_norm(prefix + ".patch_norm", d);
    const AttentionConfig ac{config_.heads[s], config_.top_k_ratio, config_.sparse_strides[s], mode};
    for (int j = 0; j < branch.depths[s]; ++j) {
      const std::string bp = prefix + ".block" + std::to_string(j + 1);
      Block b;
      b.norm1 = make_norm(bp + ".norm1", d);
      std::mt19937_64 rng(derive_seed(config_.init_seed, name_hash(bp + ".attn")));
      b.attn = MultiHeadAttention(params_, bp + ".attn", d, ac, rng);
      b.norm2 = make_norm(bp + ".norm2", d);
      b.fc1 = make_linear(bp + ".mlp.fc1", d, d * config_.mlp_ratio);
      b.fc2 = make_linear(bp + ".mlp.fc2", d * config_.mlp_ratio, d);
      st.blocks.push_back(std::move(b));
    }
    st.out_norm = make_norm(prefix + ".out_norm", d);
    in = d;
  }
  return stages;
}

// --- forward pieces ---------------------------------------------------------------

Var NfaVit::apply(Tape& tape, const Norm& n, Var x, bool track) const {
  return layer_norm(x, bind(tape, *n.gain, track), bind(tape, *n.bias, track));
}

Var NfaVit::apply(Tape& tape, const Linear& l, Var x, bool track) const {
  if (l.bias == nullptr) return linear(x, bind(tape, *l.weight, track));
  return linear(x, bind(tape, *l.weight, track), bind(tape, *l.bias, track));
}

Var NfaVit::run_block(Tape& tape, const Block& block, Var x, const TokenLayout& layout,
                      AttentionKind kind, const NoiseMask* mask, Tensor* probs, bool track) const {
  Var h = apply(tape, block.norm1, x, track);
  x = add(x, block.attn.forward(tape, h, layout, kind, mask, probs, track));
  Var m = apply(tape, block.fc2, gelu(apply(tape, block.fc1, apply(tape, block.norm2, x, track),
                                            track)),
                track);
  return add(x, m);
}

StagePyramid NfaVit::run_branch(Tape& tape, const std::vector<Stage>& stages, const Tensor& input,
                                AttentionKind body_kind, AttentionKind final_kind,
                                const std::array<NoiseMask, kStages>* masks,
                                std::array<Tensor, kStages>* probs, bool track) const {
  if (input.rank() != 4) {
    throw DimensionError("encoder: expected [batch x C x H x W], got " + shape_str(input.shape()));
  }
  const int b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int total = config_.total_stride();
  if (h % total != 0 || w % total != 0) {
    throw ConfigError("encoder: input size " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by " + std::to_string(total));
  }
  StagePyramid out;
  Var x = tape.constant(input);
  int gh = h, gw = w, width = c;
  for (int s = 0; s < kStages; ++s) {
    const Stage& st = stages[s];
    const int p = config_.patch_strides[s];
    const IndexMap idx = s == 0 ? image_patch_index(b, c, h, w, p)
                                : token_patch_index(b, gh, gw, width, p);
    gh /= p;
    gw /= p;
    x = gather(x, idx, {b * gh * gw, width * p * p});
    width = st.embed.weight->value.dim(1);
    x = apply(tape, st.embed_norm, apply(tape, st.embed, x, track), track);
    const TokenLayout layout{b, gh, gw, width};
    const int depth = static_cast<int>(st.blocks.size());
    for (int j = 0; j < depth; ++j) {
      const bool last = j == depth - 1;
      const AttentionKind kind = last ? final_kind : body_kind;
      const NoiseMask* mask = nullptr;
      if (kind == AttentionKind::kNoiseGuided) {
        mask = &(*masks)[s];
        if (mask->tokens() != layout.tokens() || mask->heads() != b * config_.heads[s]) {
          throw DimensionError("stage " + std::to_string(s + 1) + ": NoiseMask " +
                               shape_str(mask->allow.shape()) + " does not match " +
                               std::to_string(b * config_.heads[s]) + " heads over " +
                               std::to_string(layout.tokens()) + " tokens");
        }
      }
      Tensor* p_out = (last && probs != nullptr) ? &(*probs)[s] : nullptr;
      x = run_block(tape, st.blocks[j], x, layout, kind, mask, p_out, track);
    }
    x = apply(tape, st.out_norm, x, track);
    out.features[s] = x;
    out.layouts[s] = layout;
  }
  return out;
}

Tensor NfaVit::noise_traces(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw DimensionError("noise_traces: expected [batch x 3 x H x W], got " +
                         shape_str(images.shape()));
  }
  const int b = images.dim(0), h = images.dim(2), w = images.dim(3);
  const std::size_t plane = std::size_t(h) * w;
  Tensor out(Shape{b, 1, h, w});
  for (int n = 0; n < b; ++n) {
    Tensor img(Shape{3, h, w},
               std::vector<float>(images.data() + n * 3 * plane,
                                  images.data() + (n + 1) * 3 * plane));
    const NoiseTrace t = extract_noise(img);
    std::copy(t.map.data(), t.map.data() + plane, out.data() + n * plane);
  }
  return out;
}

NoiseEncoderOutput NfaVit::noise_encoder_forward(Tape& tape, const Tensor& traces,
                                                 bool track) const {
  if (!config_.use_noise) throw ConfigError("noise branch is disabled in this configuration");
  NoiseEncoderOutput out;
  out.pyramid = run_branch(tape, noise_stages_, traces, AttentionKind::kDense,
                           AttentionKind::kDense, nullptr, &out.attention, track);
  return out;
}

StagePyramid NfaVit::image_encoder_forward(Tape& tape, const Tensor& images,
                                           const std::array<NoiseMask, kStages>* masks,
                                           bool track, AttentionKind fallback_final) const {
  const AttentionKind final_kind = masks != nullptr ? AttentionKind::kNoiseGuided : fallback_final;
  return run_branch(tape, image_stages_, images, AttentionKind::kFixSparse, final_kind, masks,
                    nullptr, track);
}

StagePyramid NfaVit::fuse_noise(Tape& tape, const StagePyramid& image, const StagePyramid& noise,
                                bool track) const {
  StagePyramid out = image;
  for (int s = 0; s < kStages; ++s) {
    out.features[s] = add(image.features[s], apply(tape, noise_fuse_[s], noise.features[s], track));
  }
  return out;
}

Var NfaVit::decoder_pre_fuse(Tape& tape, const StagePyramid& pyramid, bool track) const {
  const TokenLayout& base = pyramid.layouts[0];
  const int width = config_.decoder_width;
  Var acc;
  for (int s = 0; s < kStages; ++s) {
    const TokenLayout& l = pyramid.layouts[s];
    if (pyramid.features[s].shape() != Shape{l.batch * l.tokens(), l.width} ||
        l.width != dec_proj_[s].weight->value.dim(0)) {
      throw DimensionError("decoder: stage " + std::to_string(s + 1) + " features " +
                           shape_str(pyramid.features[s].shape()) +
                           " do not match the projection width");
    }
    if (base.grid_h % l.grid_h != 0 || base.grid_h / l.grid_h != base.grid_w / l.grid_w) {
      throw DimensionError("decoder: stage " + std::to_string(s + 1) +
                           " resolution is inconsistent with stage 1");
    }
    Var t = apply(tape, dec_proj_[s], pyramid.features[s], track);
    Var maps = gather(t, tokens_to_maps_index(l.batch, l.grid_h, l.grid_w, width),
                      {l.batch * width, l.grid_h, l.grid_w});
    Var up = bilinear_upsample(maps, base.grid_h / l.grid_h);
    Var weighted = scale_by(up, bind(tape, *gamma_[s], track));
    acc = s == 0 ? weighted : add(acc, weighted);
  }
  return gather(acc, maps_to_tokens_index(base.batch, base.grid_h, base.grid_w, width),
                {base.batch * base.tokens(), width});
}

Var NfaVit::weighted_decoder(Tape& tape, const StagePyramid& pyramid, int out_h, int out_w,
                             bool track) const {
  const TokenLayout& base = pyramid.layouts[0];
  if (out_h % base.grid_h != 0 || out_h / base.grid_h != out_w / base.grid_w) {
    throw DimensionError("decoder: output size is not an integer multiple of stage 1");
  }
  Var fused = gelu(apply(tape, dec_fuse_, decoder_pre_fuse(tape, pyramid, track), track));
  Var logits = apply(tape, dec_head_, fused, track);
  logits = reshape(logits, {base.batch, base.grid_h, base.grid_w});
  return bilinear_upsample(logits, out_h / base.grid_h);
}

Var NfaVit::cls_head(Tape& tape, Var f4, const TokenLayout& l, bool track) const {
  const int c4 = f4.shape().back();
  Var x = gather(f4, im2col3x3_index(l.batch, l.grid_h, l.grid_w, c4),
                 {l.batch * l.tokens(), 9 * c4});
  x = gelu(apply(tape, cls_norm1_, apply(tape, cls_conv1_, x, track), track));
  const int cw = config_.cls_width;
  x = gather(x, im2col3x3_index(l.batch, l.grid_h, l.grid_w, cw), {l.batch * l.tokens(), 9 * cw});
  x = gelu(apply(tape, cls_norm2_, apply(tape, cls_conv2_, x, track), track));
  Var pooled = mean_axis1(reshape(x, {l.batch, l.tokens(), cw}));
  return reshape(apply(tape, cls_out_, pooled, track), {l.batch});
}

ForwardResult NfaVit::forward(Tape& tape, const Tensor& images, bool track) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw DimensionError("forward: expected [batch x 3 x H x W], got " + shape_str(images.shape()));
  }
  ForwardResult result;
  StagePyramid pyramid;
  if (config_.use_noise) {
    const NoiseEncoderOutput noise = noise_encoder_forward(tape, noise_traces(images), track);
    if (config_.use_naa) {
      for (int s = 0; s < kStages; ++s) {
        result.masks[s] = topk_dissimilar_mask(noise.attention[s], config_.top_k_ratio);
      }
      pyramid = image_encoder_forward(tape, images, &result.masks, track);
    } else {
      pyramid = image_encoder_forward(tape, images, nullptr, track);
    }
    pyramid = fuse_noise(tape, pyramid, noise.pyramid, track);
  } else {
    pyramid = image_encoder_forward(tape, images, nullptr, track);
  }
  result.mask_logits = weighted_decoder(tape, pyramid, images.dim(2), images.dim(3), track);
  result.cls_logits = cls_head(tape, pyramid.features[kStages - 1], pyramid.layouts[kStages - 1],
                               track);
  return result;
}

std::vector<ModelOutput> NfaVit::predict(const Tensor& images) const {
  Tape tape;
  const ForwardResult r = forward(tape, images, false);
  const int b = images.dim(0), h = images.dim(2), w = images.dim(3);
  const std::size_t plane = std::size_t(h) * w;
  std::vector<ModelOutput> out(b);
  for (int n = 0; n < b; ++n) {
    const float* src = r.mask_logits.value().data() + n * plane;
    out[n].mask_logits = Tensor(Shape{1, h, w}, std::vector<float>(src, src + plane));
    out[n].cls_logit = r.cls_logits.value()[n];
  }
  return out;
}

Var nfa_loss(Var mask_logits, Var cls_logits, const Tensor& labels, const Tensor& masks,
             LossMode mode) {
  if (mask_logits.value().size() != masks.size() ||
      mask_logits.shape().back() != masks.shape().back()) {
    throw DimensionError("loss: mask logits " + shape_str(mask_logits.shape()) +
                         " do not match ground truth " + shape_str(masks.shape()));
  }
  Var seg = bce_with_logits(mask_logits, masks.reshaped(mask_logits.shape()));
  if (mode == LossMode::kSegOnly) return seg;
  if (cls_logits.value().size() != labels.size()) {
    throw DimensionError("loss: classification logits " + shape_str(cls_logits.shape()) +
                         " do not match labels " + shape_str(labels.shape()));
  }
  Var cls = bce_with_logits(cls_logits, labels.reshaped(cls_logits.shape()));
  return add(cls, seg);
}

}  // namespace nfa
