// Four-branch pyramid encoder: per-modality stem convolution, patch embedding
// with learned positions, and spatial-reduction attention blocks. Branches
// share structure but never parameters.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mtseg/modality.hpp"
#include "mtseg/ops.hpp"

namespace mtseg {

struct StageConfig {
  int patch_size = 2;
  Index embed_dim = 16;
  int heads = 1;
  Index head_dim = 16;
  int sr_ratio = 1;
  int depth = 1;
  int ffn_ratio = 4;

  void validate() const {
    if (patch_size < 1 || embed_dim < 1 || heads < 1 || sr_ratio < 1 || depth < 1 ||
        ffn_ratio < 1)
      throw ConfigError("stage config fields must be positive");
    if (embed_dim % heads != 0)
      throw ConfigError(str_cat("embed dim ", embed_dim, " not divisible by ", heads, " heads"));
    if (head_dim * heads != embed_dim)
      throw ConfigError(str_cat("embed dim ", embed_dim, " != heads ", heads, " x head dim ",
                                head_dim));
  }
};

template <typename T>
struct SrParams {
  Parameter<T> w, ln_g, ln_b;
};

template <typename T>
struct BlockParams {
  Parameter<T> ln1_g, ln1_b;
  Parameter<T> wq, wk, wv, wo;
  std::optional<SrParams<T>> sr;  // absent when sr_ratio == 1
  Parameter<T> ln2_g, ln2_b;
  Parameter<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename T>
struct StageParams {
  StageConfig cfg;
  Index in_channels = 0;
  Index in_extent = 0;
  Index grid = 0;  // token grid side after patching
  Parameter<T> embed_w, embed_b, embed_ln_g, embed_ln_b;
  Parameter<T> pos;  // [n x C], sized to this stage's token count
  std::vector<BlockParams<T>> blocks;
};

template <typename T>
StageParams<T> make_stage(ParamStore<T>& store, const std::string& prefix, StageConfig cfg,
                          Index in_channels, Index in_extent, Rng& rng) {
  cfg.validate();
  if (in_extent % cfg.patch_size != 0)
    throw ConfigError(str_cat(prefix, ": extent ", in_extent, " not divisible by patch size ",
                              cfg.patch_size));
  StageParams<T> sp;
  sp.cfg = cfg;
  sp.in_channels = in_channels;
  sp.in_extent = in_extent;
  sp.grid = in_extent / cfg.patch_size;
  if (sp.grid % cfg.sr_ratio != 0)
    throw ConfigError(str_cat(prefix, ": token grid ", sp.grid, " not divisible by sr ratio ",
                              cfg.sr_ratio));
  const Index c = cfg.embed_dim;
  const Index patch_len = in_channels * cfg.patch_size * cfg.patch_size;
  const Index n = sp.grid * sp.grid;
  sp.embed_w = store.create(prefix + ".embed.w", {c, patch_len}, patch_len, rng);
  sp.embed_b = store.create(prefix + ".embed.b", {c}, patch_len, rng);
  sp.embed_ln_g = store.create_const(prefix + ".embed.ln.g", {c}, T(1));
  sp.embed_ln_b = store.create_const(prefix + ".embed.ln.b", {c}, T(0));
  sp.pos = store.create(prefix + ".pos", {n, c}, c, rng);
  const Index hidden = c * cfg.ffn_ratio;
  for (int d = 0; d < cfg.depth; ++d) {
    const std::string bp = str_cat(prefix, ".b", d);
    BlockParams<T> blk;
    blk.ln1_g = store.create_const(bp + ".ln1.g", {c}, T(1));
    blk.ln1_b = store.create_const(bp + ".ln1.b", {c}, T(0));
    blk.wq = store.create(bp + ".attn.wq", {c, c}, c, rng);
    blk.wk = store.create(bp + ".attn.wk", {c, c}, c, rng);
    blk.wv = store.create(bp + ".attn.wv", {c, c}, c, rng);
    blk.wo = store.create(bp + ".attn.wo", {c, c}, c, rng);
    if (cfg.sr_ratio > 1) {
      const Index rr = static_cast<Index>(cfg.sr_ratio) * cfg.sr_ratio;
      SrParams<T> sr;
      sr.w = store.create(bp + ".sr.w", {rr * c, c}, rr * c, rng);
      sr.ln_g = store.create_const(bp + ".sr.ln.g", {c}, T(1));
      sr.ln_b = store.create_const(bp + ".sr.ln.b", {c}, T(0));
      blk.sr = std::move(sr);
    }
    blk.ln2_g = store.create_const(bp + ".ln2.g", {c}, T(1));
    blk.ln2_b = store.create_const(bp + ".ln2.b", {c}, T(0));
    blk.ffn_w1 = store.create(bp + ".ffn.w1", {c, hidden}, c, rng);
    blk.ffn_b1 = store.create(bp + ".ffn.b1", {hidden}, c, rng);
    blk.ffn_w2 = store.create(bp + ".ffn.w2", {hidden, c}, hidden, rng);
    blk.ffn_b2 = store.create(bp + ".ffn.b2", {c}, hidden, rng);
    sp.blocks.push_back(std::move(blk));
  }
  return sp;
}

// Patch embedding: flatten p x p x C patches, affine map, layer norm, learned
// positions. Inputs whose extent differs from the configured one are rejected
// (positions are not interpolated).
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const StageParams<T>& sp) {
  if (x.rank() != 3 || x.dim(0) != sp.in_channels)
    throw DimensionError(str_cat("patch_embed: expected [", sp.in_channels, ",", sp.in_extent, ",",
                                 sp.in_extent, "], got ", shape_str(x.shape())));
  if (x.dim(1) != sp.in_extent || x.dim(2) != sp.in_extent)
    throw ConfigError(str_cat("patch_embed: extent ", x.dim(1), "x", x.dim(2),
                              " does not match configured extent ", sp.in_extent,
                              " (patch size ", sp.cfg.patch_size, ")"));
  const Index p = sp.cfg.patch_size;
  const Index g = sp.grid;
  const Index cin = sp.in_channels;
  auto t = reshape(x, {cin, g, p, g, p});
  t = transpose(t, {1, 3, 0, 2, 4});  // [g, g, Cin, p, p]
  t = reshape(t, {g * g, cin * p * p});
  auto tokens = layer_norm(linear(t, sp.embed_w.tensor(), sp.embed_b.tensor()),
                           sp.embed_ln_g.tensor(), sp.embed_ln_b.tensor());
  return add(tokens, sp.pos.tensor());
}

// Group r x r token neighborhoods, map to the embedding width, normalize.
template <typename T>
Tensor<T> spatial_reduce(const Tensor<T>& seq, int r, Index grid, const SrParams<T>& p) {
  if (seq.rank() != 2)
    throw DimensionError(str_cat("spatial_reduce expects [n,C], got ", shape_str(seq.shape())));
  if (grid % r != 0)
    throw ConfigError(str_cat("spatial_reduce: grid ", grid, " not divisible by ratio ", r));
  const Index c = seq.dim(1);
  const Index gr = grid / r;
  auto t = reshape(seq, {gr, static_cast<Index>(r), gr, static_cast<Index>(r), c});
  t = transpose(t, {0, 2, 1, 3, 4});  // [g', g', r, r, C]
  t = reshape(t, {gr * gr, static_cast<Index>(r) * r * c});
  auto red = matmul(t, p.w.tensor());
  return layer_norm(red, p.ln_g.tensor(), p.ln_b.tensor());
}

// Spatial-reduction attention over a normalized token sequence. Keys and
// values come from the reduced sequence; with ratio 1 the reduction step is
// skipped and this is vanilla multi-head attention. attn_sink, when given,
// receives each head's attention probabilities.
template <typename T>
Tensor<T> sra(const Tensor<T>& seq, const StageParams<T>& sp, const BlockParams<T>& bp,
              std::vector<Tensor<T>>* attn_sink = nullptr) {
  const Index c = sp.cfg.embed_dim;
  if (seq.dim(1) != c)
    throw ConfigError(str_cat("sra: sequence width ", seq.dim(1), " != heads x head_dim = ", c));
  auto xn = layer_norm(seq, bp.ln1_g.tensor(), bp.ln1_b.tensor());
  auto q = matmul(xn, bp.wq.tensor());
  Tensor<T> kv_src = bp.sr ? spatial_reduce(xn, sp.cfg.sr_ratio, sp.grid, *bp.sr) : xn;
  auto k = matmul(kv_src, bp.wk.tensor());
  auto v = matmul(kv_src, bp.wv.tensor());
  const Index d = sp.cfg.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor<T>> heads;
  for (int i = 0; i < sp.cfg.heads; ++i) {
    auto qi = slice(q, 1, i * d, d);
    auto ki = slice(k, 1, i * d, d);
    auto vi = slice(v, 1, i * d, d);
    auto scores = mul_scalar(matmul(qi, transpose(ki, {1, 0})), scale);
    auto attn = softmax(scores, 1);
    if (attn_sink) attn_sink->push_back(attn);
    heads.push_back(matmul(attn, vi));
  }
  auto merged = sp.cfg.heads == 1 ? heads[0] : concat(heads, 1);
  return matmul(merged, bp.wo.tensor());
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const BlockParams<T>& bp) {
  const Index hidden = bp.ffn_w1.shape()[1];
  const Index c = bp.ffn_w2.shape()[1];
  auto h = add(matmul(x, bp.ffn_w1.tensor()), reshape(bp.ffn_b1.tensor(), {1, hidden}));
  h = relu(h);
  return add(matmul(h, bp.ffn_w2.tensor()), reshape(bp.ffn_b2.tensor(), {1, c}));
}

// Two pre-norm residual sublayers; the residual is applied once per sublayer.
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& seq, const StageParams<T>& sp,
                            const BlockParams<T>& bp) {
  auto g = add(sra(seq, sp, bp), seq);
  auto f = ffn(layer_norm(g, bp.ln2_g.tensor(), bp.ln2_b.tensor()), bp);
  return add(f, g);
}

// Full stage: map in, blocks over tokens, map out at the new scale.
template <typename T>
Tensor<T> run_stage(const Tensor<T>& x, const StageParams<T>& sp) {
  auto seq = patch_embed(x, sp);
  for (const auto& blk : sp.blocks) seq = transformer_block(seq, sp, blk);
  const Index g = sp.grid;
  auto t = reshape(seq, {g, g, sp.cfg.embed_dim});
  return transpose(t, {2, 0, 1});  // [C, g, g]
}

struct EncoderConfig {
  Index input_extent = 64;
  Index stem_channels = 16;
  Index stem_stride = 1;
  std::array<StageConfig, 4> stages;  // stage 4 is consumed by the fusion module

  // Stem kernel: 3x3 same-padding at stride 1; at larger strides a
  // stride-sized patchify kernel keeps output extents exact.
  Index stem_kernel() const { return stem_stride == 1 ? 3 : stem_stride; }
  Index stem_pad() const { return stem_stride == 1 ? 1 : 0; }
  Index stem_out_extent() const {
    return conv_out_extent(input_extent, stem_kernel(), stem_stride, stem_pad());
  }
};

template <typename T>
struct BranchParams {
  Parameter<T> stem_w, stem_b;
  std::array<StageParams<T>, 3> stages;
};

template <typename T>
struct EncoderParams {
  EncoderConfig cfg;
  std::array<BranchParams<T>, 4> branches;  // indexed by Modality, no sharing
};

template <typename T>
EncoderParams<T> make_encoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng) {
  EncoderParams<T> enc;
  enc.cfg = cfg;
  for (std::size_t m = 0; m < 4; ++m) {
    const std::string prefix = str_cat("enc.", modality_name(kModalityOrder[m]));
    BranchParams<T>& br = enc.branches[m];
    const Index k = cfg.stem_kernel();
    br.stem_w = store.create(prefix + ".stem.w", {cfg.stem_channels, 1, k, k}, k * k, rng);
    br.stem_b = store.create(prefix + ".stem.b", {cfg.stem_channels}, k * k, rng);
    Index channels = cfg.stem_channels;
    Index extent = cfg.stem_out_extent();
    for (int s = 0; s < 3; ++s) {
      br.stages[s] = make_stage(store, str_cat(prefix, ".s", s + 1), cfg.stages[s], channels,
                                extent, rng);
      channels = cfg.stages[s].embed_dim;
      extent = br.stages[s].grid;
    }
  }
  return enc;
}

// Features indexed [modality][stage 0..2]; these are the per-modality maps
// consumed by fusion and by the task decoders.
template <typename T>
using ModalityFeatures = std::array<std::array<Tensor<T>, 3>, 4>;

template <typename T>
ModalityFeatures<T> encode(const std::array<Tensor<T>, 4>& scans, const EncoderParams<T>& enc) {
  const Index ext = enc.cfg.input_extent;
  for (std::size_t m = 0; m < 4; ++m) {
    if (!scans[m].defined())
      throw InputError(str_cat("missing modality: ", modality_name(kModalityOrder[m])));
    const auto& s = scans[m].shape();
    if (s.size() != 3 || s[0] != 1 || s[1] != ext || s[2] != ext)
      throw InputError(str_cat("modality ", modality_name(kModalityOrder[m]), ": expected [1,",
                               ext, ",", ext, "], got ", shape_str(s)));
  }
  ModalityFeatures<T> out;
  for (std::size_t m = 0; m < 4; ++m) {
    const BranchParams<T>& br = enc.branches[m];
    auto x = conv2d(scans[m], br.stem_w.tensor(), br.stem_b.tensor(), enc.cfg.stem_stride,
                    enc.cfg.stem_pad());
    for (int s = 0; s < 3; ++s) {
      x = run_stage(x, br.stages[s]);
      out[m][s] = x;
    }
  }
  return out;
}

}  // namespace mtseg
