#pragma once

#include "mufasa/nn.hpp"

#include <variant>

namespace mufasa {

// M per-layer slot sets with their attention masks. `aligned` flips once
// align_family has reordered every layer onto the first.
struct SlotFamily {
  std::vector<Mat> slot_sets;  // each K x d_slot
  std::vector<Mat> masks;      // each N x K, row-stochastic
  bool aligned = false;

  int layers() const { return int(slot_sets.size()); }
  void validate() const;
};

// Per-row argmax one-hot; ties break toward the lowest slot index.
Mat binarize_mask(const Eigen::Ref<const Mat>& mask);

// (i,j) = IoU of column i of A and column j of B; two empty columns give 0.
Mat pairwise_miou_cost(const Eigen::Ref<const Mat>& bin_a, const Eigen::Ref<const Mat>& bin_b);

// Exact assignment maximizing the matched score sum. Deterministic
// tie-break: the lexicographically smallest permutation among optima.
// Throws NumericError on non-finite entries. perm[i] = matched column of
// reference row i.
std::vector<int> hungarian_match(const Eigen::Ref<const Mat>& score);

// Chained permutations aligning masks[m] onto the already-aligned masks[m-1]
// (perms[0] is the identity). Shared by align_family and the training graph.
std::vector<std::vector<int>> chained_alignment(const std::vector<Mat>& masks);

// Reorders every layer's slots/masks onto the first layer by Hungarian
// matching on binarized-mask IoU, chaining through already-aligned layers.
SlotFamily align_family(const SlotFamily& family);

// --- fusion parameters -------------------------------------------------------

// Pairwise sums of adjacent aligned slot sets, feature-axis concatenation,
// then an MLP projection to one slot set.
struct MFusionParams {
  LinearParams mlp_in;   // (M-1)*d_slot -> hidden
  LinearParams mlp_out;  // hidden -> d_slot
};
// Elementwise mean of the aligned slot sets; no parameters.
struct AvgFusionParams {};
// Plain concatenation of all M sets (no pairwise sums), then MLP.
struct ConcatFusionParams {
  LinearParams mlp_in;   // M*d_slot -> hidden
  LinearParams mlp_out;  // hidden -> d_slot
};
struct TransformerEncoderLayer {
  LayerNormParams ln1;
  LinearParams wq, wk, wv, wo;
  LayerNormParams ln2;
  LinearParams ff1, ff2;
  int heads = 4;
};

enum class MaskWeightMode { uniform, learned };

struct FusionParams {
  // Pairwise sums + projection with the MLP replaced by one transformer
  // encoder layer over the K slot tokens.
  struct TFusion {
    LinearParams in_proj;  // (M-1)*d_slot -> d_slot
    TransformerEncoderLayer layer;
  };
  std::variant<MFusionParams, AvgFusionParams, ConcatFusionParams, TFusion> strategy;
  MaskWeightMode weight_mode = MaskWeightMode::uniform;
  Mat weight_logits;  // 1 x (M-1), zero-initialized

  bool is_m() const { return std::holds_alternative<MFusionParams>(strategy); }
  bool is_avg() const { return std::holds_alternative<AvgFusionParams>(strategy); }
  bool is_concat() const { return std::holds_alternative<ConcatFusionParams>(strategy); }
  bool is_t() const { return std::holds_alternative<TFusion>(strategy); }
  int min_layers() const { return is_avg() ? 1 : 2; }
};

enum class FusionStrategy { m_fusion, avg_fusion, concat_fusion, t_fusion };

FusionParams make_fusion_params(FusionStrategy strategy, int layers, int d_slot, int hidden,
                                MaskWeightMode weight_mode, Rng& rng, int t_heads = 4);

// Aligned family -> fused K x d_slot slot set. Throws ConfigError when the
// family is smaller than the strategy minimum or not aligned.
Mat fuse_slots(const SlotFamily& family, const FusionParams& params);

// Aligned family -> fused N x K mask: adjacent pairs are summed and combined
// with softmax(logits) (learned) or 1/(M-1) (uniform) weights. Rows sum to 2
// for M >= 2; the single mask passes through for M = 1. The result is left
// unnormalized: consumers needing a distribution divide rows by their sums.
Mat fuse_masks(const SlotFamily& family, const FusionParams& params);

// Softmax of the stored logits (learned mode) or the uniform vector.
Vec mask_weights(const FusionParams& params, int layers);

// --- tape interface ----------------------------------------------------------

struct TransformerEncoderLayerVars {
  LayerNormVars ln1;
  LinearVars wq, wk, wv, wo;
  LayerNormVars ln2;
  LinearVars ff1, ff2;
  int heads = 4;
};

struct FusionVars {
  LinearVars mlp_in, mlp_out;  // m_fusion / concat_fusion
  LinearVars t_in;
  TransformerEncoderLayerVars t_layer;
  ad::Var weight_logits;
};

FusionVars bind_fusion(ParamBinding& pb, FusionParams& p);

TransformerEncoderLayerVars bind(ParamBinding& pb, TransformerEncoderLayer& p);
ad::Var transformer_encoder_layer(ad::Tape& t, ad::Var x, const TransformerEncoderLayerVars& vars,
                                  int blocks);

// aligned_slots: M vars of (B*K) x d_slot.
ad::Var fuse_slots_forward(ad::Tape& t, const std::vector<ad::Var>& aligned_slots,
                           const FusionVars& vars, const FusionParams& meta, int batch);
// aligned_masks: M vars of (B*N) x K.
ad::Var fuse_masks_forward(ad::Tape& t, const std::vector<ad::Var>& aligned_masks,
                           const FusionVars& vars, const FusionParams& meta);

}  // namespace mufasa
