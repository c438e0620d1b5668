#pragma once

#include "mufasa/nn.hpp"

#include <variant>

namespace mufasa {

// Autoregressive transformer decoder: teacher-forced causal self-attention
// over the (optionally permuted) target patch sequence, patch-to-slot
// cross-attention, pre-norm blocks. The decoder attention mask is the J-head
// average of the final cross-attention layer's softmax scores, returned in
// raster patch order.
struct TransformerDecoderParams {
  struct Block {
    LayerNormParams ln1;
    LinearParams wq, wk, wv, wo;  // causal self-attention (width -> width)
    LayerNormParams ln2;
    LinearParams cq;      // width -> width (queries from the sequence)
    LinearParams ck, cv;  // d_slot -> width (keys/values from slots)
    LinearParams co;
    LayerNormParams ln3;
    LinearParams ff1, ff2;
  };

  int heads = 6;
  int patches = 0;        // N; positional table and permutation are sized to it
  std::vector<int> perm;  // decoding order: step t emits raster patch perm[t]
  LinearParams in_proj;   // d_emb -> width
  Mat bos;                // 1 x width, zero-initialized
  Mat posenc;             // N x width
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  LinearParams out_proj;  // width -> d_emb

  int width() const { return int(in_proj.out()); }
  int d_emb() const { return int(in_proj.in()); }
  int d_slot() const { return blocks.empty() ? 0 : int(blocks.front().ck.in()); }
};

enum class DecodeOrder { raster, reverse, random };

TransformerDecoderParams make_transformer_decoder(int d_emb, int d_slot, int width, int layers,
                                                  int heads, int patches, DecodeOrder order,
                                                  Rng& rng);

// Spatial-broadcast decoder: every slot is broadcast over the N patch
// positions, a shared MLP maps slot + position code to d_emb features plus
// an alpha logit; softmax over slots per patch mixes the per-slot maps.
struct BroadcastDecoderParams {
  Mat posenc;                       // N x d_slot, truncated-normal init
  std::vector<LinearParams> mlp;    // d_slot -> hidden -> ... -> d_emb + 1
  int patches() const { return int(posenc.rows()); }
  int d_slot() const { return int(posenc.cols()); }
  int d_emb() const { return int(mlp.back().out()) - 1; }
};

BroadcastDecoderParams make_broadcast_decoder(int d_emb, int d_slot, int hidden, int layers,
                                              int patches, Rng& rng);

struct DecodeResult {
  Mat reconstruction;  // N x d_emb, raster order
  Mat mask;            // N x K, rows sum to 1
};

DecodeResult transformer_decode(const Eigen::Ref<const Mat>& slots,
                                const Eigen::Ref<const Mat>& target,
                                const TransformerDecoderParams& params);

DecodeResult broadcast_decode(const Eigen::Ref<const Mat>& slots,
                              const BroadcastDecoderParams& params);

// --- tape interface ----------------------------------------------------------

struct TransformerDecoderVars {
  struct Block {
    LayerNormVars ln1;
    LinearVars wq, wk, wv, wo;
    LayerNormVars ln2;
    LinearVars cq, ck, cv, co;
    LayerNormVars ln3;
    LinearVars ff1, ff2;
  };
  LinearVars in_proj;
  ad::Var bos, posenc;
  std::vector<Block> blocks;
  LayerNormVars ln_final;
  LinearVars out_proj;
};

struct BroadcastDecoderVars {
  ad::Var posenc;
  std::vector<LinearVars> mlp;
};

TransformerDecoderVars bind_decoder(ParamBinding& pb, TransformerDecoderParams& p);
BroadcastDecoderVars bind_decoder(ParamBinding& pb, BroadcastDecoderParams& p);

struct DecodeForward {
  ad::Var reconstruction;  // (B*N) x d_emb, raster order
  ad::Var mask;            // (B*N) x K
};

// slots: (B*K) x d_slot; target: (B*N) x d_emb (the teacher-forcing input).
DecodeForward transformer_decode_forward(ad::Tape& t, ad::Var slots, ad::Var target,
                                         const TransformerDecoderVars& vars,
                                         const TransformerDecoderParams& meta, int batch);

DecodeForward broadcast_decode_forward(ad::Tape& t, ad::Var slots,
                                       const BroadcastDecoderVars& vars,
                                       const BroadcastDecoderParams& meta, int batch);

using DecoderParams = std::variant<TransformerDecoderParams, BroadcastDecoderParams>;

}  // namespace mufasa
