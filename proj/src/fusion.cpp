#include "mufasa/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mufasa {

void SlotFamily::validate() const {
  if (slot_sets.empty() || slot_sets.size() != masks.size())
    throw DimensionError("slot family: need matching slot sets and masks");
  const Index k = slot_sets.front().rows();
  const Index d = slot_sets.front().cols();
  const Index n = masks.front().rows();
  for (size_t m = 0; m < slot_sets.size(); ++m) {
    if (slot_sets[m].rows() != k || slot_sets[m].cols() != d)
      throw DimensionError("slot family: slot set " + std::to_string(m) + " shape mismatch");
    if (masks[m].rows() != n || masks[m].cols() != k)
      throw DimensionError("slot family: mask " + std::to_string(m) + " shape mismatch");
  }
}

Mat binarize_mask(const Eigen::Ref<const Mat>& mask) {
  Mat out = Mat::Zero(mask.rows(), mask.cols());
  for (Index r = 0; r < mask.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < mask.cols(); ++c)
      if (mask(r, c) > mask(r, best)) best = c;  // ties keep the lowest index
    out(r, best) = 1.0;
  }
  return out;
}

Mat pairwise_miou_cost(const Eigen::Ref<const Mat>& bin_a, const Eigen::Ref<const Mat>& bin_b) {
  if (bin_a.rows() != bin_b.rows() || bin_a.cols() != bin_b.cols())
    throw DimensionError("pairwise_miou_cost: shape mismatch");
  const Mat inter = bin_a.transpose() * bin_b;
  const Vec count_a = bin_a.colwise().sum();
  const Vec count_b = bin_b.colwise().sum();
  Mat iou(bin_a.cols(), bin_b.cols());
  for (Index i = 0; i < iou.rows(); ++i)
    for (Index j = 0; j < iou.cols(); ++j) {
      const double uni = count_a(i) + count_b(j) - inter(i, j);
      iou(i, j) = uni > 0.0 ? inter(i, j) / uni : 0.0;  // two empty columns -> 0
    }
  return iou;
}

namespace {

// O(n^3) assignment with potentials; returns row -> column minimizing cost.
std::vector<int> assignment_min(const Mat& cost) {
  const int n = int(cost.rows());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(n) + 1, 0.0), minv(size_t(n) + 1, 0.0);
  std::vector<int> p(size_t(n) + 1, 0), way(size_t(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(size_t(n) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      const int i0 = p[size_t(j0)];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[size_t(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[size_t(i0)] - v[size_t(j)];
        if (cur < minv[size_t(j)]) {
          minv[size_t(j)] = cur;
          way[size_t(j)] = j0;
        }
        if (minv[size_t(j)] < delta) {
          delta = minv[size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[size_t(j)]) {
          u[size_t(p[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[size_t(j0)] != 0);
    do {
      const int j1 = way[size_t(j0)];
      p[size_t(j0)] = p[size_t(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(size_t(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[size_t(j)] > 0) row_to_col[size_t(p[size_t(j)] - 1)] = j - 1;
  return row_to_col;
}

double assignment_max_value(const Mat& score) {
  if (score.rows() == 0) return 0.0;
  const std::vector<int> perm = assignment_min(-score);
  double total = 0.0;
  for (Index i = 0; i < score.rows(); ++i) total += score(i, perm[size_t(i)]);
  return total;
}

}  // namespace

std::vector<int> hungarian_match(const Eigen::Ref<const Mat>& score) {
  if (score.rows() != score.cols()) throw DimensionError("hungarian_match: matrix must be square");
  if (!score.allFinite()) throw NumericError("hungarian_match: non-finite score entries");
  const int n = int(score.rows());
  if (n == 0) return {};
  const Mat s = score;
  const double best_total = assignment_max_value(s);
  const double tol = 1e-9 * std::max(1.0, s.cwiseAbs().maxCoeff() * n);

  // Fix rows in order, taking the smallest column that still completes to the
  // optimum: the lexicographically smallest optimal permutation.
  std::vector<int> result(size_t(n), -1);
  std::vector<char> used(size_t(n), 0);
  double fixed_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const int rem = n - i - 1;
    std::vector<int> free_cols;
    for (int j = 0; j < n; ++j)
      if (!used[size_t(j)]) free_cols.push_back(j);
    for (int j : free_cols) {
      double completion = 0.0;
      if (rem > 0) {
        Mat sub(rem, rem);
        int cc = 0;
        for (int col : free_cols) {
          if (col == j) continue;
          for (int r = 0; r < rem; ++r) sub(r, cc) = s(i + 1 + r, col);
          ++cc;
        }
        completion = assignment_max_value(sub);
      }
      if (fixed_sum + s(i, j) + completion >= best_total - tol) {
        result[size_t(i)] = j;
        used[size_t(j)] = 1;
        fixed_sum += s(i, j);
        break;
      }
    }
    if (result[size_t(i)] < 0) throw NumericError("hungarian_match: completion search failed");
  }
  return result;
}

std::vector<std::vector<int>> chained_alignment(const std::vector<Mat>& masks) {
  if (masks.empty()) throw DimensionError("chained_alignment: no masks");
  const int m = int(masks.size());
  const int k = int(masks.front().cols());
  std::vector<std::vector<int>> perms;
  perms.resize(size_t(m));
  perms[0].resize(size_t(k));
  for (int i = 0; i < k; ++i) perms[0][size_t(i)] = i;

  Mat prev_aligned_bin = binarize_mask(masks[0]);
  for (int i = 1; i < m; ++i) {
    const Mat bin = binarize_mask(masks[size_t(i)]);
    const Mat cost = pairwise_miou_cost(prev_aligned_bin, bin);
    perms[size_t(i)] = hungarian_match(cost);
    // reference for the next layer is the aligned current one
    Mat aligned_bin(bin.rows(), bin.cols());
    for (int j = 0; j < k; ++j) aligned_bin.col(j) = bin.col(perms[size_t(i)][size_t(j)]);
    prev_aligned_bin = aligned_bin;
  }
  return perms;
}

SlotFamily align_family(const SlotFamily& family) {
  family.validate();
  if (family.aligned) {
    // Idempotent: re-aligning computes identity permutations.
  }
  SlotFamily out = family;
  const auto perms = chained_alignment(family.masks);
  for (size_t m = 1; m < out.slot_sets.size(); ++m) {
    const auto& p = perms[m];
    Mat slots(out.slot_sets[m].rows(), out.slot_sets[m].cols());
    Mat mask(out.masks[m].rows(), out.masks[m].cols());
    for (size_t i = 0; i < p.size(); ++i) {
      slots.row(Index(i)) = family.slot_sets[m].row(p[i]);
      mask.col(Index(i)) = family.masks[m].col(p[i]);
    }
    out.slot_sets[m] = std::move(slots);
    out.masks[m] = std::move(mask);
  }
  out.aligned = true;
  return out;
}

FusionParams make_fusion_params(FusionStrategy strategy, int layers, int d_slot, int hidden,
                                MaskWeightMode weight_mode, Rng& rng, int t_heads) {
  FusionParams p;
  p.weight_mode = weight_mode;
  p.weight_logits = Mat::Zero(1, std::max(0, layers - 1));
  switch (strategy) {
    case FusionStrategy::avg_fusion:
      p.strategy = AvgFusionParams{};
      break;
    case FusionStrategy::m_fusion: {
      if (layers < 2) throw ConfigError("m_fusion needs at least two layers");
      MFusionParams m;
      m.mlp_in = make_linear((layers - 1) * d_slot, hidden, rng);
      m.mlp_out = make_linear(hidden, d_slot, rng);
      p.strategy = std::move(m);
      break;
    }
    case FusionStrategy::concat_fusion: {
      if (layers < 2) throw ConfigError("concat_fusion needs at least two layers");
      ConcatFusionParams c;
      c.mlp_in = make_linear(layers * d_slot, hidden, rng);
      c.mlp_out = make_linear(hidden, d_slot, rng);
      p.strategy = std::move(c);
      break;
    }
    case FusionStrategy::t_fusion: {
      if (layers < 2) throw ConfigError("t_fusion needs at least two layers");
      FusionParams::TFusion tf;
      tf.in_proj = make_linear((layers - 1) * d_slot, d_slot, rng);
      if (d_slot % t_heads != 0) throw ConfigError("t_fusion: d_slot must divide into heads");
      tf.layer.heads = t_heads;
      tf.layer.ln1 = make_layer_norm(d_slot);
      tf.layer.wq = make_linear(d_slot, d_slot, rng);
      tf.layer.wk = make_linear(d_slot, d_slot, rng);
      tf.layer.wv = make_linear(d_slot, d_slot, rng);
      tf.layer.wo = make_linear(d_slot, d_slot, rng);
      tf.layer.ln2 = make_layer_norm(d_slot);
      tf.layer.ff1 = make_linear(d_slot, hidden, rng);
      tf.layer.ff2 = make_linear(hidden, d_slot, rng);
      p.strategy = std::move(tf);
      break;
    }
  }
  return p;
}

Vec mask_weights(const FusionParams& params, int layers) {
  if (layers < 2) return Vec{};
  const int pairs = layers - 1;
  if (params.weight_mode == MaskWeightMode::uniform)
    return Vec::Constant(pairs, 1.0 / double(pairs));
  if (params.weight_logits.cols() != pairs)
    throw ConfigError("mask weight logits length must equal M-1");
  const Eigen::RowVectorXd logits = params.weight_logits.row(0);
  const double m = logits.maxCoeff();
  Eigen::RowVectorXd e = (logits.array() - m).exp();
  return (e / e.sum()).transpose();
}

TransformerEncoderLayerVars bind(ParamBinding& pb, TransformerEncoderLayer& p) {
  TransformerEncoderLayerVars v;
  v.ln1 = bind(pb, p.ln1);
  v.wq = bind(pb, p.wq);
  v.wk = bind(pb, p.wk);
  v.wv = bind(pb, p.wv);
  v.wo = bind(pb, p.wo);
  v.ln2 = bind(pb, p.ln2);
  v.ff1 = bind(pb, p.ff1);
  v.ff2 = bind(pb, p.ff2);
  v.heads = p.heads;
  return v;
}

ad::Var transformer_encoder_layer(ad::Tape& t, ad::Var x, const TransformerEncoderLayerVars& vars,
                                  int blocks) {
  const ad::Var h1 = layer_norm(t, x, vars.ln1);
  const ad::Var ctx = multihead_attention(t, linear(t, h1, vars.wq), linear(t, h1, vars.wk),
                                          linear(t, h1, vars.wv), vars.heads, blocks);
  x = t.add(x, linear(t, ctx, vars.wo));
  const ad::Var h2 = layer_norm(t, x, vars.ln2);
  return t.add(x, linear(t, t.gelu(linear(t, h2, vars.ff1)), vars.ff2));
}

FusionVars bind_fusion(ParamBinding& pb, FusionParams& p) {
  FusionVars v;
  if (auto* m = std::get_if<MFusionParams>(&p.strategy)) {
    v.mlp_in = bind(pb, m->mlp_in);
    v.mlp_out = bind(pb, m->mlp_out);
  } else if (auto* c = std::get_if<ConcatFusionParams>(&p.strategy)) {
    v.mlp_in = bind(pb, c->mlp_in);
    v.mlp_out = bind(pb, c->mlp_out);
  } else if (auto* tf = std::get_if<FusionParams::TFusion>(&p.strategy)) {
    v.t_in = bind(pb, tf->in_proj);
    v.t_layer = bind(pb, tf->layer);
  }
  if (p.weight_mode == MaskWeightMode::learned && p.weight_logits.size() > 0)
    v.weight_logits = pb.bind(p.weight_logits);
  return v;
}

ad::Var fuse_slots_forward(ad::Tape& t, const std::vector<ad::Var>& aligned_slots,
                           const FusionVars& vars, const FusionParams& meta, int batch) {
  const int m = int(aligned_slots.size());
  if (m < meta.min_layers())
    throw ConfigError("fusion strategy needs at least " + std::to_string(meta.min_layers()) +
                      " layers, got " + std::to_string(m));
  if (meta.is_avg()) {
    ad::Var acc = aligned_slots[0];
    for (int i = 1; i < m; ++i) acc = t.add(acc, aligned_slots[size_t(i)]);
    return t.scale(acc, 1.0 / double(m));
  }
  ad::Var z;
  if (meta.is_concat()) {
    z = aligned_slots[0];
    for (int i = 1; i < m; ++i) z = t.concat_cols(z, aligned_slots[size_t(i)]);
  } else {
    // sliding-window pairwise sums of adjacent layers
    for (int i = 0; i + 1 < m; ++i) {
      const ad::Var pair = t.add(aligned_slots[size_t(i)], aligned_slots[size_t(i) + 1]);
      z = i == 0 ? pair : t.concat_cols(z, pair);
    }
  }
  if (meta.is_t()) {
    const ad::Var projected = linear(t, z, vars.t_in);
    return transformer_encoder_layer(t, projected, vars.t_layer, batch);
  }
  return linear(t, t.gelu(linear(t, z, vars.mlp_in)), vars.mlp_out);
}

ad::Var fuse_masks_forward(ad::Tape& t, const std::vector<ad::Var>& aligned_masks,
                           const FusionVars& vars, const FusionParams& meta) {
  const int m = int(aligned_masks.size());
  if (m == 0) throw DimensionError("fuse_masks: empty family");
  if (m == 1) return aligned_masks[0];
  const int pairs = m - 1;
  ad::Var fused;
  if (meta.weight_mode == MaskWeightMode::uniform) {
    for (int i = 0; i < pairs; ++i) {
      const ad::Var z = t.add(aligned_masks[size_t(i)], aligned_masks[size_t(i) + 1]);
      const ad::Var term = t.scale(z, 1.0 / double(pairs));
      fused = i == 0 ? term : t.add(fused, term);
    }
    return fused;
  }
  if (!vars.weight_logits.valid() || vars.weight_logits.cols() != pairs)
    throw ConfigError("mask weight logits length must equal M-1");
  const ad::Var w = t.softmax_rows(vars.weight_logits);
  for (int i = 0; i < pairs; ++i) {
    const ad::Var z = t.add(aligned_masks[size_t(i)], aligned_masks[size_t(i) + 1]);
    const ad::Var term = t.mul_scalar_var(z, t.slice_cols(w, i, 1));
    fused = i == 0 ? term : t.add(fused, term);
  }
  return fused;
}

namespace {

struct FusionTapeContext {
  ad::Tape tape;
  FusionVars vars;
  std::vector<ad::Var> slots;
  std::vector<ad::Var> masks;
};

FusionTapeContext make_context(const SlotFamily& family, const FusionParams& params) {
  family.validate();
  if (!family.aligned && family.layers() > 1)
    throw ConfigError("fusion requires an aligned family");
  FusionTapeContext ctx;
  ParamBinding pb(ctx.tape, /*needs_grad=*/false);
  ctx.vars = bind_fusion(pb, const_cast<FusionParams&>(params));
  for (const Mat& s : family.slot_sets) ctx.slots.push_back(ctx.tape.constant(s));
  for (const Mat& a : family.masks) ctx.masks.push_back(ctx.tape.constant(a));
  return ctx;
}

}  // namespace

Mat fuse_slots(const SlotFamily& family, const FusionParams& params) {
  FusionTapeContext ctx = make_context(family, params);
  return fuse_slots_forward(ctx.tape, ctx.slots, ctx.vars, params, /*batch=*/1).value();
}

Mat fuse_masks(const SlotFamily& family, const FusionParams& params) {
  FusionTapeContext ctx = make_context(family, params);
  return fuse_masks_forward(ctx.tape, ctx.masks, ctx.vars, params).value();
}

}  // namespace mufasa
