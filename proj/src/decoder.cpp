#include "mufasa/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mufasa {

TransformerDecoderParams make_transformer_decoder(int d_emb, int d_slot, int width, int layers,
                                                  int heads, int patches, DecodeOrder order,
                                                  Rng& rng) {
  if (width % heads != 0) throw ConfigError("decoder width must be divisible by head count");
  if (layers < 1) throw ConfigError("decoder needs at least one layer");
  TransformerDecoderParams p;
  p.heads = heads;
  p.patches = patches;
  p.perm.resize(size_t(patches));
  std::iota(p.perm.begin(), p.perm.end(), 0);
  if (order == DecodeOrder::reverse) {
    std::reverse(p.perm.begin(), p.perm.end());
  } else if (order == DecodeOrder::random) {
    Rng perm_rng(derive_seed(0x5EC0, std::uint64_t(patches)));
    perm_rng.shuffle(p.perm);
  }
  p.in_proj = make_linear(d_emb, width, rng);
  p.bos = Mat::Zero(1, width);
  p.posenc = truncated_normal_matrix(patches, width, 0.02, rng);
  p.blocks.resize(size_t(layers));
  for (auto& b : p.blocks) {
    b.ln1 = make_layer_norm(width);
    b.wq = make_linear(width, width, rng);
    b.wk = make_linear(width, width, rng);
    b.wv = make_linear(width, width, rng);
    b.wo = make_linear(width, width, rng);
    b.ln2 = make_layer_norm(width);
    b.cq = make_linear(width, width, rng);
    b.ck = make_linear(d_slot, width, rng);
    b.cv = make_linear(d_slot, width, rng);
    b.co = make_linear(width, width, rng);
    b.ln3 = make_layer_norm(width);
    b.ff1 = make_linear(width, 2 * width, rng);
    b.ff2 = make_linear(2 * width, width, rng);
  }
  p.ln_final = make_layer_norm(width);
  p.out_proj = make_linear(width, d_emb, rng);
  return p;
}

BroadcastDecoderParams make_broadcast_decoder(int d_emb, int d_slot, int hidden, int layers,
                                              int patches, Rng& rng) {
  if (layers < 2) throw ConfigError("broadcast decoder needs at least two layers");
  BroadcastDecoderParams p;
  p.posenc = truncated_normal_matrix(patches, d_slot, 0.02, rng);
  p.mlp.push_back(make_linear(d_slot, hidden, rng));
  for (int i = 0; i < layers - 2; ++i) p.mlp.push_back(make_linear(hidden, hidden, rng));
  p.mlp.push_back(make_linear(hidden, d_emb + 1, rng));
  return p;
}

TransformerDecoderVars bind_decoder(ParamBinding& pb, TransformerDecoderParams& p) {
  TransformerDecoderVars v;
  v.in_proj = bind(pb, p.in_proj);
  v.bos = pb.bind(p.bos);
  v.posenc = pb.bind(p.posenc);
  for (auto& b : p.blocks) {
    TransformerDecoderVars::Block bv;
    bv.ln1 = bind(pb, b.ln1);
    bv.wq = bind(pb, b.wq);
    bv.wk = bind(pb, b.wk);
    bv.wv = bind(pb, b.wv);
    bv.wo = bind(pb, b.wo);
    bv.ln2 = bind(pb, b.ln2);
    bv.cq = bind(pb, b.cq);
    bv.ck = bind(pb, b.ck);
    bv.cv = bind(pb, b.cv);
    bv.co = bind(pb, b.co);
    bv.ln3 = bind(pb, b.ln3);
    bv.ff1 = bind(pb, b.ff1);
    bv.ff2 = bind(pb, b.ff2);
    v.blocks.push_back(bv);
  }
  v.ln_final = bind(pb, p.ln_final);
  v.out_proj = bind(pb, p.out_proj);
  return v;
}

BroadcastDecoderVars bind_decoder(ParamBinding& pb, BroadcastDecoderParams& p) {
  BroadcastDecoderVars v;
  v.posenc = pb.bind(p.posenc);
  for (auto& l : p.mlp) v.mlp.push_back(bind(pb, l));
  return v;
}

namespace {

std::vector<int> stacked_perm(const std::vector<int>& perm, int batch, int patches) {
  std::vector<int> out(size_t(batch) * size_t(patches));
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < patches; ++t) out[size_t(b * patches + t)] = b * patches + perm[size_t(t)];
  return out;
}

std::vector<int> invert(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
  return inv;
}

Mat causal_mask(int batch, int patches) {
  Mat m = Mat::Zero(Index(batch) * patches, patches);
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < patches; ++t)
      for (int s = t + 1; s < patches; ++s) m(Index(b) * patches + t, s) = -1e30;
  return m;
}

}  // namespace

DecodeForward transformer_decode_forward(ad::Tape& t, ad::Var slots, ad::Var target,
                                         const TransformerDecoderVars& vars,
                                         const TransformerDecoderParams& meta, int batch) {
  const int n = meta.patches;
  if (target.rows() != Index(batch) * n) throw DimensionError("decoder: target rows mismatch");
  if (target.cols() != meta.d_emb()) throw DimensionError("decoder: target width mismatch");
  if (slots.rows() % batch != 0 || slots.cols() != meta.d_slot())
    throw DimensionError("decoder: slot shape mismatch");

  const std::vector<int> order = stacked_perm(meta.perm, batch, n);
  const std::vector<int> inverse_order = stacked_perm(invert(meta.perm), batch, n);

  // Teacher-forced input: step 0 reads BOS, step t reads target token t-1 in
  // decoding order. Positions are encoded per decoding step.
  ad::Var tokens = linear(t, t.permute_rows(target, order), vars.in_proj);
  tokens = t.shift_down_blocked(tokens, batch);
  Mat bos_selector = Mat::Zero(Index(batch) * n, 1);
  for (int b = 0; b < batch; ++b) bos_selector(Index(b) * n, 0) = 1.0;
  ad::Var x = t.add(tokens, t.matmul(t.constant(std::move(bos_selector)), vars.bos));
  x = t.add(x, t.tile_rows(vars.posenc, batch));

  const Mat causal = causal_mask(batch, n);
  ad::Var last_cross_mask;
  for (size_t layer = 0; layer < vars.blocks.size(); ++layer) {
    const auto& b = vars.blocks[layer];
    {
      const ad::Var h = layer_norm(t, x, b.ln1);
      const ad::Var ctx = multihead_attention(t, linear(t, h, b.wq), linear(t, h, b.wk),
                                              linear(t, h, b.wv), meta.heads, batch, &causal);
      x = t.add(x, linear(t, ctx, b.wo));
    }
    {
      const ad::Var h = layer_norm(t, x, b.ln2);
      std::vector<ad::Var> head_scores;
      const bool want_mask = layer + 1 == vars.blocks.size();
      const ad::Var ctx =
          multihead_attention(t, linear(t, h, b.cq), linear(t, slots, b.ck),
                              linear(t, slots, b.cv), meta.heads, batch, nullptr,
                              want_mask ? &head_scores : nullptr);
      x = t.add(x, linear(t, ctx, b.co));
      if (want_mask) {
        ad::Var acc = head_scores[0];
        for (size_t hh = 1; hh < head_scores.size(); ++hh) acc = t.add(acc, head_scores[hh]);
        last_cross_mask = t.scale(acc, 1.0 / double(head_scores.size()));
      }
    }
    {
      const ad::Var h = layer_norm(t, x, b.ln3);
      x = t.add(x, linear(t, t.gelu(linear(t, h, b.ff1)), b.ff2));
    }
  }
  x = layer_norm(t, x, vars.ln_final);
  const ad::Var out_permuted = linear(t, x, vars.out_proj);

  DecodeForward fwd;
  fwd.reconstruction = t.permute_rows(out_permuted, inverse_order);
  fwd.mask = t.permute_rows(last_cross_mask, inverse_order);
  return fwd;
}

DecodeForward broadcast_decode_forward(ad::Tape& t, ad::Var slots,
                                       const BroadcastDecoderVars& vars,
                                       const BroadcastDecoderParams& meta, int batch) {
  const int n = meta.patches();
  if (slots.rows() % batch != 0 || slots.cols() != meta.d_slot())
    throw DimensionError("broadcast decoder: slot shape mismatch");
  const int k = int(slots.rows()) / batch;

  ad::Var x = t.repeat_each_row(slots, n);  // (B*K*N) x d_slot, slot-major
  x = t.add(x, t.tile_rows(vars.posenc, batch * k));
  for (size_t i = 0; i < vars.mlp.size(); ++i) {
    x = linear(t, x, vars.mlp[i]);
    if (i + 1 < vars.mlp.size()) x = t.relu(x);
  }
  const int d_emb = meta.d_emb();
  const ad::Var feats = t.slice_cols(x, 0, d_emb);
  const ad::Var alpha_logits = t.slice_cols(x, d_emb, 1);
  const ad::Var alpha = t.softmax_rows(t.slot_major_to_cols(alpha_logits, batch, k, n));

  DecodeForward fwd;
  fwd.mask = alpha;
  fwd.reconstruction = t.alpha_combine(feats, alpha, batch, k, n);
  return fwd;
}

DecodeResult transformer_decode(const Eigen::Ref<const Mat>& slots,
                                const Eigen::Ref<const Mat>& target,
                                const TransformerDecoderParams& params) {
  ad::Tape tape;
  ParamBinding pb(tape, /*needs_grad=*/false);
  const TransformerDecoderVars vars =
      bind_decoder(pb, const_cast<TransformerDecoderParams&>(params));
  const ad::Var s = tape.constant(slots);
  const ad::Var y = tape.constant(target);
  const DecodeForward fwd = transformer_decode_forward(tape, s, y, vars, params, /*batch=*/1);
  return DecodeResult{fwd.reconstruction.value(), fwd.mask.value()};
}

DecodeResult broadcast_decode(const Eigen::Ref<const Mat>& slots,
                              const BroadcastDecoderParams& params) {
  ad::Tape tape;
  ParamBinding pb(tape, /*needs_grad=*/false);
  const BroadcastDecoderVars vars = bind_decoder(pb, const_cast<BroadcastDecoderParams&>(params));
  const ad::Var s = tape.constant(slots);
  const DecodeForward fwd = broadcast_decode_forward(tape, s, vars, params, /*batch=*/1);
  return DecodeResult{fwd.reconstruction.value(), fwd.mask.value()};
}

}  // namespace mufasa
