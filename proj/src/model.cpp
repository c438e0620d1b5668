#include "mufasa/model.hpp"

#include <cmath>

namespace mufasa {

Mat xavier_matrix(Index rows, Index cols, Rng& rng) {
  const double a = std::sqrt(6.0 / double(rows + cols));
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-a, a);
  return m;
}

Mat truncated_normal_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.truncated_gaussian(stddev);
  return m;
}

LinearParams make_linear(int in, int out, Rng& rng) {
  return LinearParams{xavier_matrix(in, out, rng), Mat::Zero(1, out)};
}

LayerNormParams make_layer_norm(int d) {
  return LayerNormParams{Mat::Ones(1, d), Mat::Zero(1, d)};
}

GruParams make_gru(int input, int hidden, Rng& rng) {
  GruParams g;
  g.w_ir = xavier_matrix(input, hidden, rng);
  g.w_iz = xavier_matrix(input, hidden, rng);
  g.w_in = xavier_matrix(input, hidden, rng);
  g.w_hr = xavier_matrix(hidden, hidden, rng);
  g.w_hz = xavier_matrix(hidden, hidden, rng);
  g.w_hn = xavier_matrix(hidden, hidden, rng);
  g.b_ir = Mat::Zero(1, hidden);
  g.b_iz = Mat::Zero(1, hidden);
  g.b_in = Mat::Zero(1, hidden);
  g.b_hr = Mat::Zero(1, hidden);
  g.b_hz = Mat::Zero(1, hidden);
  g.b_hn = Mat::Zero(1, hidden);
  return g;
}

LinearVars bind(ParamBinding& pb, LinearParams& p) { return {pb.bind(p.w), pb.bind(p.b)}; }

LayerNormVars bind(ParamBinding& pb, LayerNormParams& p) {
  return {pb.bind(p.gamma), pb.bind(p.beta)};
}

GruVars bind(ParamBinding& pb, GruParams& p) {
  GruVars v;
  v.w_ir = pb.bind(p.w_ir);
  v.w_iz = pb.bind(p.w_iz);
  v.w_in = pb.bind(p.w_in);
  v.w_hr = pb.bind(p.w_hr);
  v.w_hz = pb.bind(p.w_hz);
  v.w_hn = pb.bind(p.w_hn);
  v.b_ir = pb.bind(p.b_ir);
  v.b_iz = pb.bind(p.b_iz);
  v.b_in = pb.bind(p.b_in);
  v.b_hr = pb.bind(p.b_hr);
  v.b_hz = pb.bind(p.b_hz);
  v.b_hn = pb.bind(p.b_hn);
  return v;
}

ad::Var linear(ad::Tape& t, ad::Var x, const LinearVars& p) {
  return t.add_rowvec(t.matmul(x, p.w), p.b);
}

ad::Var layer_norm(ad::Tape& t, ad::Var x, const LayerNormVars& p) {
  return t.layer_norm_rows(x, p.gamma, p.beta);
}

ad::Var gru_cell(ad::Tape& t, ad::Var input, ad::Var hidden, const GruVars& p) {
  const ad::Var r = t.sigmoid(t.add(t.add_rowvec(t.matmul(input, p.w_ir), p.b_ir),
                                    t.add_rowvec(t.matmul(hidden, p.w_hr), p.b_hr)));
  const ad::Var z = t.sigmoid(t.add(t.add_rowvec(t.matmul(input, p.w_iz), p.b_iz),
                                    t.add_rowvec(t.matmul(hidden, p.w_hz), p.b_hz)));
  const ad::Var n = t.tanh(t.add(t.add_rowvec(t.matmul(input, p.w_in), p.b_in),
                                 t.cmul(r, t.add_rowvec(t.matmul(hidden, p.w_hn), p.b_hn))));
  const ad::Var one_minus_z = t.add_scalar(t.scale(z, -1.0), 1.0);
  return t.add(t.cmul(one_minus_z, n), t.cmul(z, hidden));
}

ad::Var multihead_attention(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, int heads, int blocks,
                            const Mat* additive_mask, std::vector<ad::Var>* head_softmaxes) {
  const int width = int(q.cols());
  if (width % heads != 0) throw ConfigError("attention width not divisible by head count");
  const int hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(hd));
  ad::Var ctx;
  for (int h = 0; h < heads; ++h) {
    const ad::Var qh = t.slice_cols(q, h * hd, hd);
    const ad::Var kh = t.slice_cols(k, h * hd, hd);
    const ad::Var vh = t.slice_cols(v, h * hd, hd);
    ad::Var scores = t.scale(t.bmm_nt(qh, kh, blocks), inv_sqrt);
    if (additive_mask) scores = t.add_const(scores, *additive_mask);
    const ad::Var p = t.softmax_rows(scores);
    if (head_softmaxes) head_softmaxes->push_back(p);
    const ad::Var ch = t.bmm(p, vh, blocks);
    ctx = h == 0 ? ch : t.concat_cols(ctx, ch);
  }
  return ctx;
}

void visit_params(LinearParams& p, const std::string& prefix,
                  const std::function<void(const std::string&, Mat&)>& fn) {
  fn(prefix + ".w", p.w);
  fn(prefix + ".b", p.b);
}

void visit_params(LayerNormParams& p, const std::string& prefix,
                  const std::function<void(const std::string&, Mat&)>& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

void visit_params(GruParams& p, const std::string& prefix,
                  const std::function<void(const std::string&, Mat&)>& fn) {
  fn(prefix + ".w_ir", p.w_ir);
  fn(prefix + ".w_iz", p.w_iz);
  fn(prefix + ".w_in", p.w_in);
  fn(prefix + ".w_hr", p.w_hr);
  fn(prefix + ".w_hz", p.w_hz);
  fn(prefix + ".w_hn", p.w_hn);
  fn(prefix + ".b_ir", p.b_ir);
  fn(prefix + ".b_iz", p.b_iz);
  fn(prefix + ".b_in", p.b_in);
  fn(prefix + ".b_hr", p.b_hr);
  fn(prefix + ".b_hz", p.b_hz);
  fn(prefix + ".b_hn", p.b_hn);
}

void ModelConfig::validate() const {
  if (d_emb <= 0 || patches <= 0) throw ConfigError("model: d_emb and patches must be positive");
  if (layers < 1) throw ConfigError("model: need at least one feature layer");
  if (slots < 1) throw ConfigError("model: need at least one slot");
  if (d_slot < 1) throw ConfigError("model: d_slot must be positive");
  if (sa_iters < 0) throw ConfigError("model: sa_iters must be >= 0");
  if (layers == 1 && fusion != FusionStrategy::avg_fusion)
    throw ConfigError("model: single-layer runs need avg_fusion (pass-through)");
  const int width = dec_width > 0 ? dec_width : d_slot;
  if (decoder == DecoderKind::transformer && width % dec_heads != 0)
    throw ConfigError("model: decoder width must be divisible by head count");
}

ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams model;
  const int d = cfg.attn_dim > 0 ? cfg.attn_dim : cfg.d_slot;
  for (int m = 0; m < cfg.layers; ++m) {
    Rng rng(derive_seed(seed, 0x5A00 + std::uint64_t(m)));
    model.sa.push_back(make_sa_params(cfg.d_emb, cfg.d_slot, d, cfg.sa_mlp_hidden, cfg.slots,
                                      cfg.slot_init, cfg.sa_iters, rng));
  }
  {
    Rng rng(derive_seed(seed, 0xF500));
    model.fusion = make_fusion_params(cfg.fusion, cfg.layers, cfg.d_slot, cfg.fusion_hidden,
                                      cfg.mask_weights, rng, cfg.fusion_heads);
  }
  Rng rng(derive_seed(seed, 0xDEC0));
  if (cfg.decoder == DecoderKind::transformer) {
    const int width = cfg.dec_width > 0 ? cfg.dec_width : cfg.d_slot;
    model.decoder = make_transformer_decoder(cfg.d_emb, cfg.d_slot, width, cfg.dec_layers,
                                             cfg.dec_heads, cfg.patches, cfg.dec_order, rng);
  } else {
    model.decoder = make_broadcast_decoder(cfg.d_emb, cfg.d_slot, cfg.dec_hidden, cfg.dec_layers,
                                           cfg.patches, rng);
  }
  return model;
}

namespace {

void visit_sa(SaParams& sa, const std::string& prefix,
              const std::function<void(const std::string&, Mat&)>& fn) {
  visit_params(sa.key, prefix + ".key", fn);
  visit_params(sa.query, prefix + ".query", fn);
  visit_params(sa.value, prefix + ".value", fn);
  visit_params(sa.gru, prefix + ".gru", fn);
  visit_params(sa.mlp_in, prefix + ".mlp_in", fn);
  visit_params(sa.mlp_out, prefix + ".mlp_out", fn);
  if (sa.init.mode == SlotInitMode::gaussian) {
    fn(prefix + ".init.mean", sa.init.mean);
    fn(prefix + ".init.log_sigma", sa.init.log_sigma);
  } else {
    fn(prefix + ".init.learned", sa.init.learned);
  }
}

void visit_fusion(FusionParams& fusion, const std::function<void(const std::string&, Mat&)>& fn) {
  if (auto* m = std::get_if<MFusionParams>(&fusion.strategy)) {
    visit_params(m->mlp_in, "fusion.mlp_in", fn);
    visit_params(m->mlp_out, "fusion.mlp_out", fn);
  } else if (auto* c = std::get_if<ConcatFusionParams>(&fusion.strategy)) {
    visit_params(c->mlp_in, "fusion.mlp_in", fn);
    visit_params(c->mlp_out, "fusion.mlp_out", fn);
  } else if (auto* tf = std::get_if<FusionParams::TFusion>(&fusion.strategy)) {
    visit_params(tf->in_proj, "fusion.t_in", fn);
    visit_params(tf->layer.ln1, "fusion.t.ln1", fn);
    visit_params(tf->layer.wq, "fusion.t.wq", fn);
    visit_params(tf->layer.wk, "fusion.t.wk", fn);
    visit_params(tf->layer.wv, "fusion.t.wv", fn);
    visit_params(tf->layer.wo, "fusion.t.wo", fn);
    visit_params(tf->layer.ln2, "fusion.t.ln2", fn);
    visit_params(tf->layer.ff1, "fusion.t.ff1", fn);
    visit_params(tf->layer.ff2, "fusion.t.ff2", fn);
  }
  if (fusion.weight_mode == MaskWeightMode::learned && fusion.weight_logits.size() > 0)
    fn("fusion.weight_logits", fusion.weight_logits);
}

void visit_decoder(DecoderParams& decoder, const std::function<void(const std::string&, Mat&)>& fn) {
  if (auto* td = std::get_if<TransformerDecoderParams>(&decoder)) {
    visit_params(td->in_proj, "decoder.in_proj", fn);
    fn("decoder.bos", td->bos);
    fn("decoder.posenc", td->posenc);
    for (size_t i = 0; i < td->blocks.size(); ++i) {
      const std::string p = "decoder.block" + std::to_string(i);
      auto& b = td->blocks[i];
      visit_params(b.ln1, p + ".ln1", fn);
      visit_params(b.wq, p + ".wq", fn);
      visit_params(b.wk, p + ".wk", fn);
      visit_params(b.wv, p + ".wv", fn);
      visit_params(b.wo, p + ".wo", fn);
      visit_params(b.ln2, p + ".ln2", fn);
      visit_params(b.cq, p + ".cq", fn);
      visit_params(b.ck, p + ".ck", fn);
      visit_params(b.cv, p + ".cv", fn);
      visit_params(b.co, p + ".co", fn);
      visit_params(b.ln3, p + ".ln3", fn);
      visit_params(b.ff1, p + ".ff1", fn);
      visit_params(b.ff2, p + ".ff2", fn);
    }
    visit_params(td->ln_final, "decoder.ln_final", fn);
    visit_params(td->out_proj, "decoder.out_proj", fn);
  } else {
    auto& bd = std::get<BroadcastDecoderParams>(decoder);
    fn("decoder.posenc", bd.posenc);
    for (size_t i = 0; i < bd.mlp.size(); ++i)
      visit_params(bd.mlp[i], "decoder.mlp" + std::to_string(i), fn);
  }
}

}  // namespace

void for_each_param(ModelParams& model, const std::function<void(const std::string&, Mat&)>& fn) {
  for (size_t m = 0; m < model.sa.size(); ++m) visit_sa(model.sa[m], "sa" + std::to_string(m), fn);
  visit_fusion(model.fusion, fn);
  visit_decoder(model.decoder, fn);
}

std::int64_t parameter_count(ModelParams& model) {
  std::int64_t count = 0;
  for_each_param(model, [&](const std::string&, Mat& m) { count += m.size(); });
  return count;
}

std::int64_t sa_parameter_count(SaParams& sa) {
  std::int64_t count = 0;
  visit_sa(sa, "sa", [&](const std::string&, Mat& m) { count += m.size(); });
  return count;
}

std::int64_t fusion_parameter_count(FusionParams& fusion) {
  std::int64_t count = 0;
  visit_fusion(fusion, [&](const std::string&, Mat& m) { count += m.size(); });
  return count;
}

ModelVars bind_model(ParamBinding& pb, ModelParams& model) {
  ModelVars vars;
  for (auto& sa : model.sa) vars.sa.push_back(bind_sa(pb, sa));
  vars.fusion = bind_fusion(pb, model.fusion);
  if (auto* td = std::get_if<TransformerDecoderParams>(&model.decoder))
    vars.dec_transformer = bind_decoder(pb, *td);
  else
    vars.dec_broadcast = bind_decoder(pb, std::get<BroadcastDecoderParams>(model.decoder));
  return vars;
}

}  // namespace mufasa
