#pragma once

#include "mufasa/decoder.hpp"
#include "mufasa/fusion.hpp"
#include "mufasa/slot_attention.hpp"

namespace mufasa {

enum class DecoderKind { transformer, broadcast };

// Architecture hyperparameters; everything needed to build ModelParams.
struct ModelConfig {
  int d_emb = 0;
  int patches = 0;  // N, fixes decoder positional tables
  int layers = 1;   // M, number of selected feature layers
  int slots = 5;
  int d_slot = 256;
  int attn_dim = 0;  // 0: use d_slot
  int sa_mlp_hidden = 1024;
  int sa_iters = 3;
  SlotInitMode slot_init = SlotInitMode::gaussian;

  FusionStrategy fusion = FusionStrategy::m_fusion;
  int fusion_hidden = 768;
  int fusion_heads = 4;  // t_fusion attention heads
  MaskWeightMode mask_weights = MaskWeightMode::uniform;

  DecoderKind decoder = DecoderKind::transformer;
  int dec_layers = 4;
  int dec_heads = 6;
  int dec_width = 0;  // 0: use d_slot
  int dec_hidden = 2048;
  DecodeOrder dec_order = DecodeOrder::raster;

  void validate() const;
};

// One slot-attention module per selected layer (no weight sharing), the
// fusion stage, and the decoder.
struct ModelParams {
  std::vector<SaParams> sa;
  FusionParams fusion;
  DecoderParams decoder;
};

ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed);

// Visits every parameter matrix in a fixed order under stable names
// ("sa0.key.w", "fusion.mlp_in.b", "decoder.posenc", ...).
void for_each_param(ModelParams& model, const std::function<void(const std::string&, Mat&)>& fn);

std::int64_t parameter_count(ModelParams& model);
std::int64_t sa_parameter_count(SaParams& sa);
std::int64_t fusion_parameter_count(FusionParams& fusion);

struct ModelVars {
  std::vector<SaVars> sa;
  FusionVars fusion;
  TransformerDecoderVars dec_transformer;
  BroadcastDecoderVars dec_broadcast;
};

ModelVars bind_model(ParamBinding& pb, ModelParams& model);

}  // namespace mufasa
