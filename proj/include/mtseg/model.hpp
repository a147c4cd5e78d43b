// Whole-network assembly: multi-branch encoder, per-stage fusion, bottleneck
// stage with task seeds, and the three task decoders.
#pragma once

#include <array>
#include <cstdint>

#include "mtseg/decoder.hpp"

namespace mtseg {

struct ModelConfig {
  Index input_extent = 64;
  Index stem_channels = 16;
  Index stem_stride = 1;
  std::array<Index, 4> stage_dims = {16, 32, 64, 128};
  std::array<int, 4> stage_heads = {1, 2, 4, 8};
  std::array<int, 4> sr_ratios = {8, 4, 2, 1};
  std::array<int, 4> stage_depths = {1, 1, 1, 1};
  std::array<int, 4> patch_sizes = {2, 2, 2, 2};
  int ffn_ratio = 4;
  Index se_reduction = 4;
  double fe_fraction = 0.5;
  double leaky_slope = 0.01;
  bool aff_enabled = true;
  bool tsfi_enabled = true;
  bool fe_enabled = true;

  std::array<StageConfig, 4> stage_configs() const {
    std::array<StageConfig, 4> out;
    for (int s = 0; s < 4; ++s) {
      out[s].patch_size = patch_sizes[s];
      out[s].embed_dim = stage_dims[s];
      out[s].heads = stage_heads[s];
      out[s].head_dim = stage_dims[s] / stage_heads[s];
      out[s].sr_ratio = sr_ratios[s];
      out[s].depth = stage_depths[s];
      out[s].ffn_ratio = ffn_ratio;
      out[s].validate();
    }
    return out;
  }

  EncoderConfig encoder_config() const {
    EncoderConfig ec;
    ec.input_extent = input_extent;
    ec.stem_channels = stem_channels;
    ec.stem_stride = stem_stride;
    ec.stages = stage_configs();
    return ec;
  }

  // Stage channel widths and token-grid extents, derived from the configured
  // strides and patch sizes.
  PyramidShape pyramid_shape() const {
    PyramidShape ps;
    ps.input_extent = input_extent;
    Index extent = encoder_config().stem_out_extent();
    for (int s = 0; s < 4; ++s) {
      if (extent % patch_sizes[s] != 0)
        throw ConfigError(str_cat("stage ", s + 1, ": extent ", extent,
                                  " not divisible by patch size ", patch_sizes[s]));
      extent /= patch_sizes[s];
      ps.channels[s] = stage_dims[s];
      ps.extents[s] = extent;
    }
    return ps;
  }

  void validate() const {
    if (input_extent < 4) throw ConfigError("input extent too small");
    if (stem_stride < 1) throw ConfigError("stem stride must be >= 1");
    (void)stage_configs();
    (void)pyramid_shape();
    FeConfig fc{fe_fraction, fe_enabled};
    fc.validate();
  }
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto stages = cfg_.stage_configs();
    encoder_ = make_encoder(params_, cfg_.encoder_config(), rng);
    aff_ = make_aff(params_, stages, cfg_.se_reduction, cfg_.leaky_slope, cfg_.aff_enabled, rng);
    const auto ps = cfg_.pyramid_shape();
    s4_ = make_stage4(params_, stages[3], cfg_.stage_dims[2], ps.extents[2], rng);
    decoder_ = make_decoder(params_, ps, cfg_.tsfi_enabled,
                            FeConfig{cfg_.fe_fraction, cfg_.fe_enabled}, rng);
  }

  struct Forward {
    ModalityFeatures<T> feats;
    std::array<Tensor<T>, 3> common;  // F_1..F_3
    Stage4Out<T> bottleneck;
    std::array<Tensor<T>, 3> prob;  // WT, TC, ET probability maps [1,H,W]
  };

  Forward forward(const std::array<Tensor<T>, 4>& scans) const {
    Forward out;
    out.feats = encode(scans, encoder_);
    for (int s = 0; s < 3; ++s) {
      std::array<Tensor<T>, 4> maps;
      for (std::size_t m = 0; m < 4; ++m) maps[m] = out.feats[m][s];
      out.common[s] = aff(maps, aff_.stages[s], aff_);
    }
    out.bottleneck = stage4(out.common[2], s4_);
    out.prob = decode_all(out.common, out.feats, out.bottleneck.seeds, decoder_);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const EncoderParams<T>& encoder_params() const { return encoder_; }
  const AffParams<T>& aff_params() const { return aff_; }
  const Stage4Params<T>& stage4_params() const { return s4_; }
  const DecoderParams<T>& decoder_params() const { return decoder_; }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  EncoderParams<T> encoder_;
  AffParams<T> aff_;
  Stage4Params<T> s4_;
  DecoderParams<T> decoder_;
};

// The tiny verification profile: 16x16 inputs, narrow stages.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.input_extent = 16;
  c.stem_channels = 8;
  c.stem_stride = 1;
  c.stage_dims = {8, 16, 32, 64};
  c.stage_heads = {1, 2, 4, 8};
  c.sr_ratios = {8, 4, 2, 1};
  c.ffn_ratio = 2;
  return c;
}

// Desk-scale training profile: 64x64 slices, stride-2 stem.
inline ModelConfig desk_model_config() {
  ModelConfig c;
  c.input_extent = 64;
  c.stem_channels = 16;
  c.stem_stride = 2;
  c.stage_dims = {16, 32, 64, 128};
  c.stage_heads = {1, 2, 4, 8};
  c.sr_ratios = {8, 4, 2, 1};
  return c;
}

}  // namespace mtseg
