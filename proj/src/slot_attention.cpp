#include "mufasa/slot_attention.hpp"

#include <cmath>

namespace mufasa {

SaParams make_sa_params(int d_emb, int d_slot, int attn_dim, int mlp_hidden, int slots,
                        SlotInitMode mode, int iters, Rng& rng) {
  if (slots < 1) throw ConfigError("slot attention needs at least one slot");
  if (iters < 0) throw ConfigError("iteration count must be >= 0");
  SaParams p;
  p.key = make_linear(d_emb, attn_dim, rng);
  p.query = make_linear(d_slot, attn_dim, rng);
  p.value = make_linear(d_emb, d_slot, rng);
  p.gru = make_gru(d_slot, d_slot, rng);
  p.mlp_in = make_linear(d_slot, mlp_hidden, rng);
  p.mlp_out = make_linear(mlp_hidden, d_slot, rng);
  p.init.mode = mode;
  p.init.slots = slots;
  if (mode == SlotInitMode::gaussian) {
    p.init.mean = Mat::Zero(1, d_slot);
    p.init.log_sigma = Mat::Zero(1, d_slot);
  } else {
    Mat learned(slots, d_slot);
    for (int i = 0; i < slots; ++i)
      for (int j = 0; j < d_slot; ++j) learned(i, j) = rng.gaussian();
    p.init.learned = learned;
  }
  p.iters = iters;
  return p;
}

Mat init_slots(const SaParams& params, std::uint64_t seed) {
  const auto& init = params.init;
  if (init.mode == SlotInitMode::learned) return init.learned;
  Rng rng(seed);
  Mat slots(init.slots, params.d_slot());
  for (int i = 0; i < init.slots; ++i)
    for (int j = 0; j < params.d_slot(); ++j)
      slots(i, j) = init.mean(0, j) + std::exp(init.log_sigma(0, j)) * rng.gaussian();
  return slots;
}

SaVars bind_sa(ParamBinding& pb, SaParams& p) {
  SaVars v;
  v.key = bind(pb, p.key);
  v.query = bind(pb, p.query);
  v.value = bind(pb, p.value);
  v.gru = bind(pb, p.gru);
  v.mlp_in = bind(pb, p.mlp_in);
  v.mlp_out = bind(pb, p.mlp_out);
  if (p.init.mode == SlotInitMode::gaussian) {
    v.init_mean = pb.bind(p.init.mean);
    v.init_log_sigma = pb.bind(p.init.log_sigma);
  } else {
    v.init_learned = pb.bind(p.init.learned);
  }
  return v;
}

namespace {

// Fixed (non-learnable) row normalization applied to inputs and to slots
// before their projections; it carries no parameters, keeping the module's
// parameter surface to the projection/GRU/MLP/init weights.
ad::Var norm_rows(ad::Tape& t, ad::Var x) {
  const ad::Var gamma = t.constant(Mat::Ones(1, x.cols()));
  const ad::Var beta = t.constant(Mat::Zero(1, x.cols()));
  return t.layer_norm_rows(x, gamma, beta);
}

ad::Var attention_from(ad::Tape& t, ad::Var keys, ad::Var slots, const SaVars& vars,
                       const SaParams& meta, int batch) {
  const ad::Var q = linear(t, norm_rows(t, slots), vars.query);
  const ad::Var logits = t.scale(t.bmm_nt(keys, q, batch), 1.0 / std::sqrt(double(meta.attn_dim())));
  return t.softmax_rows(logits);
}

}  // namespace

SaForward sa_forward(ad::Tape& t, ad::Var features, const SaVars& vars, const SaParams& meta,
                     int batch, const Mat* noise, ad::Var initial_slots,
                     std::vector<ad::Var>* iteration_masks) {
  if (features.cols() != meta.d_emb()) throw DimensionError("sa_forward: feature width mismatch");
  if (features.rows() % batch != 0) throw DimensionError("sa_forward: batch does not divide rows");
  const int k = meta.slots();

  ad::Var slots = initial_slots;
  if (!slots.valid()) {
    if (meta.init.mode == SlotInitMode::learned) {
      slots = t.tile_rows(vars.init_learned, batch);
    } else {
      if (noise == nullptr || noise->rows() != Index(batch) * k || noise->cols() != meta.d_slot())
        throw DimensionError("sa_forward: gaussian init needs (B*K) x d_slot noise");
      const ad::Var eps = t.constant(*noise);
      const ad::Var sigma = t.tile_rows(t.exp(vars.init_log_sigma), batch * k);
      slots = t.add(t.cmul(eps, sigma), t.tile_rows(vars.init_mean, batch * k));
    }
  } else if (slots.rows() != Index(batch) * k || slots.cols() != meta.d_slot()) {
    throw DimensionError("sa_forward: initial slots must be (B*K) x d_slot");
  }

  // Keys/values of the (fixed) features are shared by all iterations.
  const ad::Var features_n = norm_rows(t, features);
  const ad::Var keys = linear(t, features_n, vars.key);
  const ad::Var values = linear(t, features_n, vars.value);

  ad::Var mask;
  if (meta.iters == 0) {
    mask = attention_from(t, keys, slots, vars, meta, batch);
    if (iteration_masks) iteration_masks->push_back(mask);
  }
  for (int iter = 1; iter <= meta.iters; ++iter) {
    const ad::Var attn = attention_from(t, keys, slots, vars, meta, batch);
    mask = attn;
    if (iteration_masks) iteration_masks->push_back(attn);
    // Weighted-mean aggregation: renormalize attention per slot over patches.
    const ad::Var weights = t.normalize_cols_blocked(attn, batch, kSlotUpdateEps);
    const ad::Var updates = t.bmm_tn(weights, values, batch);
    slots = gru_cell(t, updates, slots, vars.gru);
    slots = t.add(slots, linear(t, t.relu(linear(t, norm_rows(t, slots), vars.mlp_in)),
                                vars.mlp_out));
    if (!slots.value().allFinite())
      throw NumericError("slot attention produced non-finite values at iteration " +
                         std::to_string(iter));
  }
  return SaForward{slots, mask};
}

namespace {

SaResult run_sa_impl(const Eigen::Ref<const Mat>& features, const SaParams& params,
                     const Mat* noise, const Mat* initial,
                     std::vector<Mat>* iteration_masks) {
  ad::Tape tape;
  ParamBinding pb(tape, /*needs_grad=*/false);
  SaParams& mutable_params = const_cast<SaParams&>(params);
  const SaVars vars = bind_sa(pb, mutable_params);
  const ad::Var f = tape.constant(features);
  ad::Var init_var;
  if (initial) init_var = tape.constant(*initial);
  std::vector<ad::Var> iter_vars;
  const SaForward fwd = sa_forward(tape, f, vars, params, /*batch=*/1, noise, init_var,
                                   iteration_masks ? &iter_vars : nullptr);
  if (iteration_masks)
    for (const ad::Var& v : iter_vars) iteration_masks->push_back(v.value());
  return SaResult{fwd.slots.value(), fwd.mask.value()};
}

}  // namespace

namespace {

Mat norm_rows_plain(const Eigen::Ref<const Mat>& x) {
  // mirrors the tape layer norm bit for bit (multiply by the reciprocal)
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / double(x.cols());
    const double inv_std = 1.0 / std::sqrt(var + 1e-6);
    out.row(r) = ((x.row(r).array() - mu) * inv_std).matrix();
  }
  return out;
}

}  // namespace

Mat compute_attention(const Eigen::Ref<const Mat>& features, const Eigen::Ref<const Mat>& slots,
                      const SaParams& params) {
  if (features.cols() != params.d_emb())
    throw DimensionError("compute_attention: feature width mismatch");
  if (slots.cols() != params.d_slot())
    throw DimensionError("compute_attention: slot width mismatch");
  const Mat features_n = norm_rows_plain(features);
  const Mat slots_n = norm_rows_plain(slots);
  const Mat keys = (features_n * params.key.w).rowwise() + params.key.b.row(0);
  const Mat queries = (slots_n * params.query.w).rowwise() + params.query.b.row(0);
  Mat logits = keys * queries.transpose() / std::sqrt(double(params.attn_dim()));
  Mat out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

SaResult run_slot_attention(const Eigen::Ref<const Mat>& features, const SaParams& params,
                            std::uint64_t seed, std::vector<Mat>* iteration_masks) {
  if (params.init.mode == SlotInitMode::gaussian) {
    const Mat noise = [&] {
      Rng rng(seed);
      Mat eps(params.slots(), params.d_slot());
      for (Index i = 0; i < eps.rows(); ++i)
        for (Index j = 0; j < eps.cols(); ++j) eps(i, j) = rng.gaussian();
      return eps;
    }();
    return run_sa_impl(features, params, &noise, nullptr, iteration_masks);
  }
  return run_sa_impl(features, params, nullptr, nullptr, iteration_masks);
}

SaResult run_slot_attention_from(const Eigen::Ref<const Mat>& features, const SaParams& params,
                                 const Eigen::Ref<const Mat>& initial_slots,
                                 std::vector<Mat>* iteration_masks) {
  const Mat init = initial_slots;
  return run_sa_impl(features, params, nullptr, &init, iteration_masks);
}

}  // namespace mufasa
