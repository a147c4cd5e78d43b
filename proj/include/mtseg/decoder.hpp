// Task-specific decoders. WT and TC consume two routed modality features per
// level, ET consumes only the T1Gd feature and adds curvature-based channel
// enhancement at its finest level. Upsampling between levels is bilinear
// followed by a 3x3 convolution.
#pragma once

#include <array>
#include <numeric>
#include <string>
#include <vector>

#include "mtseg/fusion.hpp"

namespace mtseg {

enum class Task : int { WT = 0, TC = 1, ET = 2 };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::WT: return "wt";
    case Task::TC: return "tc";
    case Task::ET: return "et";
  }
  return "?";
}

// Fixed routing table: WT reads FLAIR (+T2), TC reads T1Gd (+T2), ET reads
// T1Gd only.
inline Modality primary_modality(Task t) {
  switch (t) {
    case Task::WT: return Modality::Flair;
    case Task::TC: return Modality::T1Gd;
    case Task::ET: return Modality::T1Gd;
  }
  return Modality::T1Gd;
}

template <typename T>
std::vector<T> curvature_kernel() {
  return {T(-1.0 / 16), T(5.0 / 16),  T(-1.0 / 16), T(5.0 / 16), T(-1.0),
          T(5.0 / 16),  T(-1.0 / 16), T(5.0 / 16),  T(-1.0 / 16)};
}

// Depthwise convolution of each channel with the fixed curvature kernel,
// stride 1, replicate same-padding. The kernel sums to zero, so constant
// channels map to exact zeros.
template <typename T>
Tensor<T> curvature_map(const Tensor<T>& x) {
  return depthwise_fixed_conv(x, curvature_kernel<T>(), 3, 3, PadMode::Replicate);
}

struct FeConfig {
  double fraction = 0.5;  // K
  bool enabled = true;

  Index selected(Index channels) const {
    return static_cast<Index>(std::ceil(fraction * static_cast<double>(channels)));
  }
  void validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0))
      throw ConfigError(str_cat("feature enhancement fraction must be in (0,1], got ", fraction));
  }
};

// Channel score: spatial mean of the absolute curvature response. Computed on
// raw values; the selection itself is not differentiated.
template <typename T>
std::vector<double> fe_channel_scores(const Tensor<T>& x) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto k = curvature_kernel<double>();
  std::vector<double> scores(static_cast<std::size_t>(c), 0.0);
  const T* xv = x.values().data();
  for (Index d = 0; d < c; ++d) {
    double acc = 0.0;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double v = 0.0;
        for (Index ky = 0; ky < 3; ++ky) {
          const Index iy = std::clamp<Index>(i - 1 + ky, 0, h - 1);
          for (Index kx = 0; kx < 3; ++kx) {
            const Index ix = std::clamp<Index>(j - 1 + kx, 0, w - 1);
            v += static_cast<double>(xv[(d * h + iy) * w + ix]) * k[ky * 3 + kx];
          }
        }
        acc += std::fabs(v);
      }
    }
    scores[static_cast<std::size_t>(d)] = acc / static_cast<double>(h * w);
  }
  return scores;
}

// Top-ceil(K*C) channel indices, score-descending, ties to the lower index.
template <typename T>
std::vector<Index> fe_select(const Tensor<T>& x, const FeConfig& cfg) {
  const auto scores = fe_channel_scores(x);
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(cfg.selected(x.dim(0))));
  return order;
}

// Output keeps the original channels as a prefix and appends the selected
// high-curvature channels.
template <typename T>
Tensor<T> feature_enhance(const Tensor<T>& x, const FeConfig& cfg) {
  if (x.rank() != 3 || x.dim(0) < 1)
    throw DimensionError(str_cat("feature_enhance expects [C,H,W] with C >= 1, got ",
                                 shape_str(x.shape())));
  auto picks = fe_select(x, cfg);
  return concat<T>({x, channel_select(x, picks)}, 0);
}

// ---------------------------------------------------------------------------
// Level parameter blocks
// ---------------------------------------------------------------------------

template <typename T>
struct WtTcLevelParams {
  Index up_factor = 2;
  Parameter<T> up_w, up_b;
  Parameter<T> c1_w, c1_b, c2_w, c2_b, c3_w, c3_b, c4_w, c4_b, c5_w, c5_b;
};

template <typename T>
struct EtLevelParams {
  Index up_factor = 2;
  Parameter<T> up_w, up_b;
  Parameter<T> c1_w, c1_b, c2_w, c2_b;
};

template <typename T>
struct HeadParams {
  Index up_factor = 1;
  Parameter<T> w, b;
};

// Channel/extent bookkeeping for the whole pyramid, stage 1..4.
struct PyramidShape {
  Index input_extent = 0;
  std::array<Index, 4> channels{};  // C_1..C_4
  std::array<Index, 4> extents{};   // token-grid extents e_1..e_4
};

template <typename T>
struct DecoderParams {
  bool tsfi = true;
  FeConfig fe;
  PyramidShape shape;
  std::array<std::array<WtTcLevelParams<T>, 3>, 2> wt_tc;  // [WT|TC][level-1]
  std::array<EtLevelParams<T>, 3> et;
  std::array<HeadParams<T>, 3> heads;
};

namespace detail {

inline Index up_factor_between(Index from_extent, Index to_extent, const char* what) {
  if (to_extent % from_extent != 0)
    throw ConfigError(str_cat(what, ": extent ", from_extent, " does not upsample integrally to ",
                              to_extent));
  return to_extent / from_extent;
}

template <typename T>
void make_conv_pair(ParamStore<T>& store, const std::string& id, Index out_c, Index in_c,
                    Index k, Rng& rng, Parameter<T>& w, Parameter<T>& b) {
  w = store.create(id + ".w", {out_c, in_c, k, k}, in_c * k * k, rng);
  b = store.create(id + ".b", {out_c}, in_c * k * k, rng);
}

}  // namespace detail

template <typename T>
DecoderParams<T> make_decoder(ParamStore<T>& store, const PyramidShape& shape, bool tsfi,
                              const FeConfig& fe, Rng& rng) {
  fe.validate();
  DecoderParams<T> dp;
  dp.tsfi = tsfi;
  dp.fe = fe;
  dp.shape = shape;
  for (int t = 0; t < 2; ++t) {
    const char* tn = t == 0 ? "wt" : "tc";
    for (int lvl = 1; lvl <= 3; ++lvl) {
      const Index c = shape.channels[3 - lvl];
      const Index c_prev = shape.channels[4 - lvl];
      const Index e = shape.extents[3 - lvl];
      const Index e_prev = shape.extents[4 - lvl];
      auto& p = dp.wt_tc[t][lvl - 1];
      p.up_factor = detail::up_factor_between(e_prev, e, "decoder");
      const std::string prefix = str_cat("dec.", tn, ".l", lvl);
      detail::make_conv_pair(store, prefix + ".up", c, c_prev, 3, rng, p.up_w, p.up_b);
      detail::make_conv_pair(store, prefix + ".c1", c, 2 * c, 3, rng, p.c1_w, p.c1_b);
      detail::make_conv_pair(store, prefix + ".c2", c, 2 * c, 3, rng, p.c2_w, p.c2_b);
      detail::make_conv_pair(store, prefix + ".c3", c, 2 * c, 3, rng, p.c3_w, p.c3_b);
      detail::make_conv_pair(store, prefix + ".c4", c, 2 * c, 3, rng, p.c4_w, p.c4_b);
      detail::make_conv_pair(store, prefix + ".c5", c, 2 * c, 3, rng, p.c5_w, p.c5_b);
    }
  }
  for (int lvl = 1; lvl <= 3; ++lvl) {
    const Index c = shape.channels[3 - lvl];
    const Index c_prev = shape.channels[4 - lvl];
    const Index e = shape.extents[3 - lvl];
    const Index e_prev = shape.extents[4 - lvl];
    auto& p = dp.et[lvl - 1];
    p.up_factor = detail::up_factor_between(e_prev, e, "decoder");
    const std::string prefix = str_cat("dec.et.l", lvl);
    detail::make_conv_pair(store, prefix + ".up", c, c_prev, 3, rng, p.up_w, p.up_b);
    const Index c_in = lvl == 3 && fe.enabled ? c + fe.selected(c) : c;
    detail::make_conv_pair(store, prefix + ".c1", c, 2 * c_in, 3, rng, p.c1_w, p.c1_b);
    detail::make_conv_pair(store, prefix + ".c2", c, 2 * c, 3, rng, p.c2_w, p.c2_b);
  }
  for (int t = 0; t < 3; ++t) {
    auto& h = dp.heads[t];
    h.up_factor = detail::up_factor_between(shape.extents[0], shape.input_extent, "head");
    const std::string prefix = str_cat("dec.", task_name(static_cast<Task>(t)), ".head");
    h.w = store.create(prefix + ".w", {1, shape.channels[0], 1, 1}, shape.channels[0], rng);
    h.b = store.create(prefix + ".b", {1}, shape.channels[0], rng);
  }
  return dp;
}

template <typename T>
Tensor<T> upsample_conv(const Tensor<T>& x, Index factor, const Parameter<T>& w,
                        const Parameter<T>& b) {
  return conv2d(upsample_bilinear(x, factor), w.tensor(), b.tensor(), 1, 1);
}

// One WT/TC level: gate the common feature with each routed modality, fuse,
// append the triple product, merge with the upsampled previous level.
template <typename T>
Tensor<T> wt_tc_level(const Tensor<T>& common, const Tensor<T>& prev, const Tensor<T>& t2_feat,
                      const Tensor<T>& x_feat, const WtTcLevelParams<T>& p) {
  if (common.shape() != t2_feat.shape() || common.shape() != x_feat.shape())
    throw DimensionError(str_cat("decoder level: feature shapes disagree: ",
                                 shape_str(common.shape()), " vs ", shape_str(t2_feat.shape()),
                                 " vs ", shape_str(x_feat.shape())));
  auto z1 = conv2d(concat<T>({mul(x_feat, common), common}, 0), p.c1_w.tensor(), p.c1_b.tensor(),
                   1, 1);
  auto z2 = conv2d(concat<T>({mul(t2_feat, common), common}, 0), p.c2_w.tensor(), p.c2_b.tensor(),
                   1, 1);
  auto fused = conv2d(concat<T>({z1, z2}, 0), p.c3_w.tensor(), p.c3_b.tensor(), 1, 1);
  auto z3 = concat<T>({fused, mul(x_feat, mul(t2_feat, common))}, 0);
  auto up = upsample_conv(prev, p.up_factor, p.up_w, p.up_b);
  auto z4 = conv2d(z3, p.c4_w.tensor(), p.c4_b.tensor(), 1, 1);
  return conv2d(concat<T>({up, z4}, 0), p.c5_w.tensor(), p.c5_b.tensor(), 1, 1);
}

// One ET level; at level 3 the caller passes edge-enhanced inputs.
template <typename T>
Tensor<T> et_level(const Tensor<T>& common, const Tensor<T>& prev, const Tensor<T>& t1gd_feat,
                   const EtLevelParams<T>& p) {
  if (common.shape() != t1gd_feat.shape())
    throw DimensionError(str_cat("et decoder level: feature shapes disagree: ",
                                 shape_str(common.shape()), " vs ",
                                 shape_str(t1gd_feat.shape())));
  auto z1 = conv2d(concat<T>({mul(t1gd_feat, common), common}, 0), p.c1_w.tensor(),
                   p.c1_b.tensor(), 1, 1);
  auto up = upsample_conv(prev, p.up_factor, p.up_w, p.up_b);
  return conv2d(concat<T>({up, z1}, 0), p.c2_w.tensor(), p.c2_b.tensor(), 1, 1);
}

// Upsample to the input resolution, project to one channel, sigmoid.
template <typename T>
Tensor<T> seg_head(const Tensor<T>& f, const HeadParams<T>& p) {
  return sigmoid(conv2d(upsample_bilinear(f, p.up_factor), p.w.tensor(), p.b.tensor(), 1, 0));
}

// Runs the three decoders over the shared pyramid. With tsfi off, every
// modality-specific input is replaced by the common feature.
template <typename T>
std::array<Tensor<T>, 3> decode_all(const std::array<Tensor<T>, 3>& common,
                                    const ModalityFeatures<T>& feats,
                                    const std::array<Tensor<T>, 3>& seeds,
                                    const DecoderParams<T>& dp) {
  std::array<Tensor<T>, 3> maps;
  for (int t = 0; t < 2; ++t) {
    const auto xm = static_cast<std::size_t>(primary_modality(static_cast<Task>(t)));
    const auto t2 = static_cast<std::size_t>(Modality::T2);
    Tensor<T> f = seeds[t];
    for (int lvl = 1; lvl <= 3; ++lvl) {
      const int s = 3 - lvl;  // stage index 2,1,0
      const Tensor<T>& fx = dp.tsfi ? feats[xm][s] : common[s];
      const Tensor<T>& ft2 = dp.tsfi ? feats[t2][s] : common[s];
      f = wt_tc_level(common[s], f, ft2, fx, dp.wt_tc[t][lvl - 1]);
    }
    maps[t] = seg_head(f, dp.heads[t]);
  }
  {
    const auto gd = static_cast<std::size_t>(Modality::T1Gd);
    Tensor<T> f = seeds[2];
    for (int lvl = 1; lvl <= 3; ++lvl) {
      const int s = 3 - lvl;
      Tensor<T> x = common[s];
      Tensor<T> xg = dp.tsfi ? feats[gd][s] : common[s];
      if (lvl == 3 && dp.fe.enabled) {
        x = feature_enhance(x, dp.fe);
        xg = feature_enhance(xg, dp.fe);
      }
      f = et_level(x, f, xg, dp.et[lvl - 1]);
    }
    maps[2] = seg_head(f, dp.heads[2]);
  }
  return maps;
}

}  // namespace mtseg
