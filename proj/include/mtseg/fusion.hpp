// Adaptive feature fusion: squeeze-and-excitation recalibration over the
// concatenated modality maps, a fusion convolution down to the stage width,
// and element-wise enhancement. Also owns the single-branch fourth stage and
// the three task seeds.
#pragma once

#include <array>
#include <string>

#include "mtseg/encoder.hpp"

namespace mtseg {

template <typename T>
struct AffStageParams {
  Index channels = 0;  // C_s; the concat carries 4*C_s
  Parameter<T> se_reduce_w, se_reduce_b;   // 1x1, 4C -> 4C/R
  Parameter<T> se_restore_w, se_restore_b; // 1x1, 4C/R -> 4C
  Parameter<T> fuse_w, fuse_b;             // 3x3, 4C -> C
};

template <typename T>
struct AffParams {
  Index reduction = 4;  // R
  double leaky_slope = 0.01;
  bool enabled = true;  // false = ablation: concat + fusion conv only
  std::array<AffStageParams<T>, 3> stages;
};

template <typename T>
AffParams<T> make_aff(ParamStore<T>& store, const std::array<StageConfig, 4>& stages,
                      Index reduction, double leaky_slope, bool enabled, Rng& rng) {
  if (reduction < 1) throw ConfigError("aff: reduction factor must be positive");
  AffParams<T> aff;
  aff.reduction = reduction;
  aff.leaky_slope = leaky_slope;
  aff.enabled = enabled;
  for (int s = 0; s < 3; ++s) {
    const Index c = stages[s].embed_dim;
    const Index cat = 4 * c;
    if (cat % reduction != 0)
      throw ConfigError(str_cat("aff stage ", s + 1, ": reduction ", reduction,
                                " does not divide ", cat, " channels"));
    const Index mid = cat / reduction;
    const std::string p = str_cat("aff.s", s + 1);
    AffStageParams<T>& sp = aff.stages[s];
    sp.channels = c;
    sp.se_reduce_w = store.create(p + ".se.reduce.w", {mid, cat, 1, 1}, cat, rng);
    sp.se_reduce_b = store.create(p + ".se.reduce.b", {mid}, cat, rng);
    sp.se_restore_w = store.create(p + ".se.restore.w", {cat, mid, 1, 1}, mid, rng);
    sp.se_restore_b = store.create(p + ".se.restore.b", {cat}, mid, rng);
    sp.fuse_w = store.create(p + ".fuse.w", {c, cat, 3, 3}, cat * 9, rng);
    sp.fuse_b = store.create(p + ".fuse.b", {c}, cat * 9, rng);
  }
  return aff;
}

// Concatenate the four modality maps in fixed order.
template <typename T>
Tensor<T> concat_modalities(const std::array<Tensor<T>, 4>& maps) {
  for (std::size_t m = 1; m < 4; ++m)
    if (maps[m].shape() != maps[0].shape())
      throw DimensionError(str_cat("fusion: modality map shapes disagree: ",
                                   shape_str(maps[0].shape()), " vs ",
                                   shape_str(maps[m].shape())));
  return concat<T>({maps[0], maps[1], maps[2], maps[3]}, 0);
}

// SE recalibration: global pool, bottleneck 1x1 convs, sigmoid gate broadcast
// over space.
template <typename T>
Tensor<T> se_recalibrate(const std::array<Tensor<T>, 4>& maps, const AffStageParams<T>& p,
                         double leaky_slope) {
  auto phi = concat_modalities(maps);
  auto pooled = global_avg_pool(phi);
  auto mid = leaky_relu(conv2d(pooled, p.se_reduce_w.tensor(), p.se_reduce_b.tensor(), 1, 0),
                        leaky_slope);
  auto theta = sigmoid(conv2d(mid, p.se_restore_w.tensor(), p.se_restore_b.tensor(), 1, 0));
  return mul(theta, phi);
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& recalibrated, const AffStageParams<T>& p) {
  if (recalibrated.dim(0) != p.fuse_w.shape()[1])
    throw DimensionError(str_cat("fuse: expected ", p.fuse_w.shape()[1], " channels, got ",
                                 recalibrated.dim(0)));
  return conv2d(recalibrated, p.fuse_w.tensor(), p.fuse_b.tensor(), 1, 1);
}

// Element-wise enhancement: local 3x3 average pooling, sigmoid, gate.
template <typename T>
Tensor<T> element_enhance(const Tensor<T>& x) {
  return mul(x, sigmoid(local_avg_pool(x, 3)));
}

// Full AFF for one stage. In the ablated form only concat + fusion conv run,
// which keeps all shapes identical.
template <typename T>
Tensor<T> aff(const std::array<Tensor<T>, 4>& maps, const AffStageParams<T>& p,
              const AffParams<T>& cfg) {
  if (!cfg.enabled) return fuse(concat_modalities(maps), p);
  return element_enhance(fuse(se_recalibrate(maps, p, cfg.leaky_slope), p));
}

// ---------------------------------------------------------------------------
// Stage 4: one SRSA stage over the fused F_3 plus three 1x1 task projections.
// ---------------------------------------------------------------------------

template <typename T>
struct Stage4Params {
  StageParams<T> stage;
  Parameter<T> wt_w, wt_b, tc_w, tc_b, et_w, et_b;
};

template <typename T>
struct Stage4Out {
  Tensor<T> common;  // F_4
  std::array<Tensor<T>, 3> seeds;  // WT, TC, ET
};

template <typename T>
Stage4Params<T> make_stage4(ParamStore<T>& store, const StageConfig& cfg, Index in_channels,
                            Index in_extent, Rng& rng) {
  Stage4Params<T> p;
  p.stage = make_stage(store, "stage4", cfg, in_channels, in_extent, rng);
  const Index c = cfg.embed_dim;
  p.wt_w = store.create("stage4.seed.wt.w", {c, c, 1, 1}, c, rng);
  p.wt_b = store.create("stage4.seed.wt.b", {c}, c, rng);
  p.tc_w = store.create("stage4.seed.tc.w", {c, c, 1, 1}, c, rng);
  p.tc_b = store.create("stage4.seed.tc.b", {c}, c, rng);
  p.et_w = store.create("stage4.seed.et.w", {c, c, 1, 1}, c, rng);
  p.et_b = store.create("stage4.seed.et.b", {c}, c, rng);
  return p;
}

template <typename T>
Stage4Out<T> stage4(const Tensor<T>& f3, const Stage4Params<T>& p) {
  Stage4Out<T> out;
  out.common = run_stage(f3, p.stage);
  out.seeds[0] = conv2d(out.common, p.wt_w.tensor(), p.wt_b.tensor(), 1, 0);
  out.seeds[1] = conv2d(out.common, p.tc_w.tensor(), p.tc_b.tensor(), 1, 0);
  out.seeds[2] = conv2d(out.common, p.et_w.tensor(), p.et_b.tensor(), 1, 0);
  return out;
}

}  // namespace mtseg
