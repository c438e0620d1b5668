// Acceptance suite. Each criterion prints one PASS/FAIL line; run a single
// criterion with --criterion N (the ctest entries) or all of them with no
// arguments. Heavy comparative runs cache per-run metric series under
// MUFASA_ACCEPT_DIR so the fusion-ablation criterion can reuse them.

#include "mufasa/config.hpp"
#include "mufasa/training.hpp"

#include "fd_check.hpp"
#include "oracles.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace mufasa;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string accept_dir() {
  const std::string dir = MUFASA_ACCEPT_DIR;
  fs::create_directories(dir);
  return dir;
}

// --- criterion 1: Hungarian vs exhaustive search -----------------------------

Outcome criterion_assignment_oracle() {
  const auto start = Clock::now();
  Rng rng(20240816);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = rng.uniform_int(1, 6);
    Mat score(k, k);
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < k; ++j) score(i, j) = rng.uniform();
    if (trial % 7 == 0) {
      // inject exact ties to exercise the lexicographic tie-break
      const int dupes = rng.uniform_int(0, k - 1);
      for (int d = 0; d < dupes; ++d)
        score(rng.uniform_int(0, k - 1), rng.uniform_int(0, k - 1)) = 0.5;
    }
    if (hungarian_match(score) != mufasa::testing::exhaustive_assignment(score)) ++mismatches;
  }
  const double elapsed = seconds_since(start);
  std::ostringstream ss;
  ss << "1000 random K<=6 matrices, " << mismatches << " mismatches, " << elapsed << " s";
  return {mismatches == 0 && elapsed < 10.0, ss.str()};
}

// --- criterion 2: metric oracles ---------------------------------------------

Outcome criterion_metric_oracles() {
  const auto start = Clock::now();
  Rng rng(77);
  double worst = 0.0;
  int checked = 0;
  while (checked < 500) {
    const SegmentationLabelMap gt = mufasa::testing::random_label_map(16, 16, 5, rng);
    const SegmentationLabelMap pred = mufasa::testing::random_label_map(16, 16, 5, rng);
    bool has_fg = false;
    for (Index y = 0; y < 16; ++y)
      for (Index x = 0; x < 16; ++x) has_fg = has_fg || gt.labels(y, x) != 0;
    if (!has_fg) continue;
    ++checked;
    const EvalOptions opts{true, 0};
    worst = std::max(worst, std::abs(miou_metric(pred, gt, opts) -
                                     mufasa::testing::brute_miou(pred, gt, true, 0)));
    worst = std::max(worst, std::abs(mbo_metric(pred, gt, LabelSemantics::instance, opts) -
                                     mufasa::testing::brute_mbo(pred, gt, true, 0)));
    worst = std::max(worst, std::abs(fg_ari(pred, gt, 0) -
                                     mufasa::testing::pair_counting_fg_ari(pred, gt, 0)));
  }
  const double elapsed = seconds_since(start);
  std::ostringstream ss;
  ss << "500 random 16x16 label-map pairs, max |error| = " << worst << ", " << elapsed << " s";
  return {worst <= 1e-9 && elapsed < 60.0, ss.str()};
}

// --- criterion 3: end-to-end gradient check -----------------------------------

ModelConfig tiny_pipeline_config(DecoderKind decoder) {
  ModelConfig mc;
  mc.d_emb = 8;
  mc.patches = 16;
  mc.layers = 2;
  mc.slots = 3;
  mc.d_slot = 8;
  mc.attn_dim = 8;
  mc.sa_mlp_hidden = 8;
  mc.sa_iters = 2;
  mc.slot_init = SlotInitMode::learned;
  mc.fusion = FusionStrategy::m_fusion;
  mc.fusion_hidden = 8;
  mc.decoder = decoder;
  mc.dec_layers = 2;
  mc.dec_heads = 2;
  mc.dec_width = 8;
  mc.dec_hidden = 8;
  return mc;
}

Outcome criterion_end_to_end_gradients() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_where;
  for (DecoderKind decoder : {DecoderKind::transformer, DecoderKind::broadcast}) {
    const ModelConfig mc = tiny_pipeline_config(decoder);
    ModelParams model = make_model(mc, 99);
    Rng rng(decoder == DecoderKind::transformer ? 5u : 6u);
    std::vector<Mat> features = {mufasa::testing::random_mat(16, 8, rng, 0.7),
                                 mufasa::testing::random_mat(16, 8, rng, 0.7)};

    auto loss_fn = [&]() {
      ad::Tape t;
      ParamBinding pb(t, false);
      const ModelVars vars = bind_model(pb, model);
      std::vector<ad::Var> feat;
      for (const Mat& f : features) feat.push_back(t.constant(f));
      return pipeline_forward(t, vars, model, feat, 1, nullptr).loss_rec.value()(0, 0);
    };

    ad::Tape t;
    ParamBinding pb(t, true);
    const ModelVars vars = bind_model(pb, model);
    std::vector<ad::Var> feat;
    for (Mat& f : features) feat.push_back(t.leaf(f));
    const PipelineForward fwd = pipeline_forward(t, vars, model, feat, 1, nullptr);
    t.backward(fwd.loss_rec);

    std::vector<std::pair<std::string, Mat*>> params;
    std::map<std::string, Mat> grads;
    int idx = 0;
    pb.for_each_grad([&](Mat& param, const Mat& grad) {
      const std::string name = "p" + std::to_string(idx++);
      params.push_back({name, &param});
      grads[name] = grad;
    });
    for (size_t i = 0; i < features.size(); ++i) {
      const std::string name = "features" + std::to_string(i);
      params.push_back({name, &features[i]});
      grads[name] = t.grad(feat[i]);
    }

    const auto report = mufasa::testing::finite_difference_check(
        params, loss_fn, [&](const std::string& name) { return grads.at(name); });
    if (report.max_rel_err > worst) {
      worst = report.max_rel_err;
      worst_where = (decoder == DecoderKind::transformer ? "transformer " : "broadcast ") +
                    report.worst;
    }
  }
  const double elapsed = seconds_since(start);
  std::ostringstream ss;
  ss << "N=16 K=3 M=2 T=2, both decoders, max rel err = " << worst << " at " << worst_where
     << ", " << elapsed << " s";
  return {worst <= 1e-4 && elapsed < 120.0, ss.str()};
}

// --- criterion 4: analytic loss values ----------------------------------------

Outcome criterion_loss_values() {
  Rng rng(3);
  const Mat target = mufasa::testing::random_mat(12, 7, rng);
  const double zero = reconstruction_loss(target, target);
  const Mat offset = target.array() + 1.0;
  const double one = reconstruction_loss(target, offset);
  std::ostringstream ss;
  ss << "loss(target,target) = " << zero << ", loss(target,target+1) = " << one;
  return {std::abs(zero) <= 1e-12 && std::abs(one - 1.0) <= 1e-12, ss.str()};
}

// --- criterion 5: normalization invariants ------------------------------------

Outcome criterion_normalization() {
  const auto start = Clock::now();
  Rng rng(11);
  double worst_sa = 0.0, worst_dec = 0.0, worst_fused = 0.0, worst_weights = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int g = rng.uniform_int(2, 4);
    const int n = g * g;
    const int k = rng.uniform_int(1, 6);
    const int m = rng.uniform_int(1, 4);
    ModelConfig mc;
    mc.d_emb = rng.uniform_int(4, 10);
    mc.patches = n;
    mc.layers = m;
    mc.slots = k;
    mc.d_slot = 2 * rng.uniform_int(2, 6);
    mc.attn_dim = rng.uniform_int(3, 8);
    mc.sa_mlp_hidden = rng.uniform_int(4, 10);
    mc.sa_iters = rng.uniform_int(1, 3);
    mc.slot_init = trial % 2 ? SlotInitMode::gaussian : SlotInitMode::learned;
    if (m == 1) {
      mc.fusion = FusionStrategy::avg_fusion;
    } else {
      const FusionStrategy all[] = {FusionStrategy::m_fusion, FusionStrategy::avg_fusion,
                                    FusionStrategy::concat_fusion, FusionStrategy::t_fusion};
      mc.fusion = all[trial % 4];
    }
    mc.fusion_hidden = 8;
    mc.fusion_heads = 2;  // d_slot is always even here
    mc.mask_weights = trial % 3 == 0 ? MaskWeightMode::learned : MaskWeightMode::uniform;
    mc.decoder = trial % 2 ? DecoderKind::transformer : DecoderKind::broadcast;
    mc.dec_layers = 2;
    mc.dec_heads = 2;
    mc.dec_width = 8;
    mc.dec_hidden = 8;
    ModelParams model = make_model(mc, 1000 + std::uint64_t(trial));
    if (mc.mask_weights == MaskWeightMode::learned)
      for (Index i = 0; i < model.fusion.weight_logits.cols(); ++i)
        model.fusion.weight_logits(0, i) = rng.gaussian();

    std::vector<Mat> features;
    std::vector<Mat> noise;
    for (int i = 0; i < m; ++i) {
      features.push_back(mufasa::testing::random_mat(n, mc.d_emb, rng));
      Mat eps(k, mc.d_slot);
      for (Index a = 0; a < eps.rows(); ++a)
        for (Index b = 0; b < eps.cols(); ++b) eps(a, b) = rng.gaussian();
      noise.push_back(std::move(eps));
    }

    ad::Tape t;
    ParamBinding pb(t, false);
    const ModelVars vars = bind_model(pb, model);
    std::vector<ad::Var> feat;
    for (const Mat& f : features) feat.push_back(t.constant(f));
    const PipelineForward fwd = pipeline_forward(
        t, vars, model, feat, 1, mc.slot_init == SlotInitMode::gaussian ? &noise : nullptr);

    for (const ad::Var& mask : fwd.sa_masks) {
      const Mat& v = mask.value();
      for (Index r = 0; r < v.rows(); ++r)
        worst_sa = std::max(worst_sa, std::abs(v.row(r).sum() - 1.0));
    }
    {
      const Mat& v = fwd.decoder_mask.value();
      for (Index r = 0; r < v.rows(); ++r)
        worst_dec = std::max(worst_dec, std::abs(v.row(r).sum() - 1.0));
    }
    if (m >= 2) {
      const Mat& v = fwd.fused_mask.value();
      for (Index r = 0; r < v.rows(); ++r)
        worst_fused = std::max(worst_fused, std::abs(v.row(r).sum() - 2.0));
    }
    const Vec w = mask_weights(model.fusion, m);
    if (w.size() > 0) worst_weights = std::max(worst_weights, std::abs(w.sum() - 1.0));
  }
  const double elapsed = seconds_since(start);
  std::ostringstream ss;
  ss << "200 random configurations; |sa-1| <= " << worst_sa << ", |dec-1| <= " << worst_dec
     << ", |fused-2| <= " << worst_fused << ", |softmax-1| <= " << worst_weights << ", "
     << elapsed << " s";
  return {worst_sa <= 1e-6 && worst_dec <= 1e-6 && worst_fused <= 1e-6 && worst_weights <= 1e-6,
          ss.str()};
}

// --- criterion 6: equivariance suite -------------------------------------------

Outcome criterion_equivariance() {
  Rng rng(13);
  double worst = 0.0;
  std::string what = "ok";
  auto track = [&](double err, const std::string& label) {
    if (err > worst) {
      worst = err;
      what = label;
    }
  };

  // slot-permutation equivariance of SA
  {
    Rng prng(17);
    SaParams p = make_sa_params(6, 6, 6, 8, 4, SlotInitMode::learned, 3, prng);
    const Mat features = mufasa::testing::random_mat(12, 6, rng);
    const std::vector<int> perm = {2, 3, 0, 1};
    const SaResult base = run_slot_attention_from(features, p, p.init.learned);
    Mat permuted(4, 6);
    for (int i = 0; i < 4; ++i) permuted.row(i) = p.init.learned.row(perm[size_t(i)]);
    const SaResult other = run_slot_attention_from(features, p, permuted);
    for (int i = 0; i < 4; ++i) {
      track((other.slots.row(i) - base.slots.row(perm[size_t(i)])).cwiseAbs().maxCoeff(),
            "sa slots");
      track((other.mask.col(i) - base.mask.col(perm[size_t(i)])).cwiseAbs().maxCoeff(),
            "sa mask");
    }
  }

  // slot-permutation equivariance of the broadcast decoder
  {
    Rng prng(19);
    BroadcastDecoderParams p = make_broadcast_decoder(5, 6, 10, 3, 9, prng);
    const Mat slots = mufasa::testing::random_mat(4, 6, rng);
    const std::vector<int> perm = {1, 3, 2, 0};
    Mat permuted(4, 6);
    for (int i = 0; i < 4; ++i) permuted.row(i) = slots.row(perm[size_t(i)]);
    const DecodeResult base = broadcast_decode(slots, p);
    const DecodeResult other = broadcast_decode(permuted, p);
    track((base.reconstruction - other.reconstruction).cwiseAbs().maxCoeff(), "broadcast recon");
    for (int i = 0; i < 4; ++i)
      track((other.mask.col(i) - base.mask.col(perm[size_t(i)])).cwiseAbs().maxCoeff(),
            "broadcast mask");
  }

  // relabeling invariance of every metric
  for (int trial = 0; trial < 25; ++trial) {
    const auto gt = mufasa::testing::random_label_map(10, 10, 4, rng);
    const auto pred = mufasa::testing::random_label_map(10, 10, 4, rng);
    SegmentationLabelMap renamed = pred;
    for (Index y = 0; y < 10; ++y)
      for (Index x = 0; x < 10; ++x) renamed.labels(y, x) = 3 * pred.labels(y, x) + 11;
    const EvalOptions opts{true, 0};
    track(std::abs(miou_metric(pred, gt, opts) - miou_metric(renamed, gt, opts)), "miou relabel");
    track(std::abs(mbo_metric(pred, gt, LabelSemantics::instance, opts) -
                   mbo_metric(renamed, gt, LabelSemantics::instance, opts)),
          "mbo relabel");
    bool has_fg = false;
    for (Index y = 0; y < 10; ++y)
      for (Index x = 0; x < 10; ++x) has_fg = has_fg || gt.labels(y, x) != 0;
    if (has_fg) track(std::abs(fg_ari(pred, gt, 0) - fg_ari(renamed, gt, 0)), "fg_ari relabel");
  }

  // fused-mask argmax invariance under a global positive scale
  for (int trial = 0; trial < 25; ++trial) {
    const int m = rng.uniform_int(2, 4), k = rng.uniform_int(2, 5);
    SlotFamily family;
    for (int i = 0; i < m; ++i) {
      family.slot_sets.push_back(mufasa::testing::random_mat(k, 4, rng));
      family.masks.push_back(mufasa::testing::random_normalized_mask(16, k, rng));
    }
    family.aligned = true;
    Rng prng(200 + std::uint64_t(trial));
    FusionParams params =
        make_fusion_params(FusionStrategy::avg_fusion, m, 4, 8, MaskWeightMode::uniform, prng);
    const Mat fused = fuse_masks(family, params);
    const double c = 0.2 + rng.uniform() * 8.0;
    SlotFamily scaled = family;
    for (Mat& mask : scaled.masks) mask *= c;
    const Mat fused_scaled = fuse_masks(scaled, params);
    track((binarize_mask(fused / 2.0) - binarize_mask(fused_scaled / (2.0 * c)))
              .cwiseAbs()
              .maxCoeff(),
          "fused argmax scale");
  }

  std::ostringstream ss;
  ss << "max deviation = " << worst << " (" << what << ")";
  return {worst <= 1e-6, ss.str()};
}

// --- criterion 7: M=1 degeneration ---------------------------------------------

std::string degeneration_config(const std::string& dataset) {
  std::string text;
  text += "[data]\ndataset = " + dataset + "\ntarget = 32\ncrop = full\nflip_prob = 0.5\n";
  text += "[backend]\nkind = handcrafted\npatch = 8\nd_emb = 12\nradii = 1\n";
  text +=
      "[model]\nlayers = 1\nslots = 3\nd_slot = 16\nattn_dim = 16\nsa_mlp_hidden = 16\n"
      "sa_iters = 2\nslot_init = learned\nfusion = avg_fusion\ndecoder = broadcast\n"
      "dec_layers = 3\ndec_hidden = 16\n";
  text +=
      "[train]\nepochs = 7\nbatch = 8\nlr_main = 2e-3\nlr_low = 2e-5\nwarmup = 5\nseed = 12\n"
      "max_steps = 50\n";
  return text;
}

Outcome criterion_degeneration() {
  const auto start = Clock::now();
  const std::string dataset = accept_dir() + "/degeneration_data";
  if (!fs::exists(dataset + "/manifest_train.txt")) {
    SceneSpec spec;
    spec.size = 32;
    spec.min_objects = 1;
    spec.max_objects = 2;
    spec.min_size = 8;
    spec.max_size = 14;
    spec.seed = 99;
    generate_shapes_dataset(spec, 64, 16, dataset);
  }
  const TrainConfig cfg = parse_train_config(degeneration_config(dataset));

  // pipeline path
  const TrainResult pipeline = train_single_phase(cfg);

  // direct single-layer path: slot attention -> decoder -> loss, no family
  // machinery, same seed streams
  const Dataset train = Dataset::open(cfg.dataset_dir, "train");
  std::vector<LoadedItem> items;
  for (int i = 0; i < train.size(); ++i) items.push_back(train.item(i));
  Rng dummy(1);
  const Sample probe = preprocess(items[0], PreprocessMode::eval, cfg.preprocess, dummy);
  const FeatureStack pstack = extract_features(probe.image, cfg.backend, cfg.layer_ids, probe.id);
  const int n = pstack.grid.patches();

  ModelParams model =
      make_model(cfg.model_config(pstack.d_emb, n), derive_seed(cfg.seed, seed_streams::kParams));
  auto& dec_meta = std::get<BroadcastDecoderParams>(model.decoder);

  std::vector<double> direct_losses;
  std::map<int, Mat> adam_m, adam_v;
  std::int64_t adam_t = 0;
  const std::int64_t spe = steps_per_epoch(int(items.size()), cfg.batch);
  const std::int64_t total_steps = spe * cfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < cfg.max_steps; ++epoch) {
    std::vector<int> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, seed_streams::kShuffle, std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);
    for (std::int64_t bi = 0; bi < spe && step < cfg.max_steps; ++bi) {
      const size_t begin = size_t(bi) * size_t(cfg.batch);
      const size_t end = std::min(order.size(), begin + size_t(cfg.batch));
      const int batch = int(end - begin);
      Mat features(Index(batch) * n, pstack.d_emb);
      for (int pos = 0; pos < batch; ++pos) {
        Rng aug(derive_seed(derive_seed(cfg.seed, seed_streams::kAugment, std::uint64_t(step)),
                            std::uint64_t(pos)));
        const Sample s = preprocess(items[size_t(order[begin + size_t(pos)])],
                                    PreprocessMode::train, cfg.preprocess, aug);
        const FeatureStack stack = extract_features(s.image, cfg.backend, cfg.layer_ids, s.id);
        features.middleRows(Index(pos) * n, n) = stack.layers[0].cast<double>();
      }

      ad::Tape t;
      ParamBinding pb(t, true);
      const SaVars sa_vars = bind_sa(pb, model.sa[0]);
      const FusionVars fusion_vars = bind_fusion(pb, model.fusion);  // binds nothing for avg
      (void)fusion_vars;
      const BroadcastDecoderVars dec_vars = bind_decoder(pb, dec_meta);
      const ad::Var feat = t.constant(features);
      const SaForward sa = sa_forward(t, feat, sa_vars, model.sa[0], batch, nullptr);
      const DecodeForward dec = broadcast_decode_forward(t, sa.slots, dec_vars, dec_meta, batch);
      const ad::Var diff = t.sub(dec.reconstruction, feat);
      const ad::Var loss = t.mean_all(t.cmul(diff, diff));
      t.backward(loss);

      std::vector<std::pair<Mat*, Mat>> grads;
      pb.for_each_grad([&](Mat& param, const Mat& g) { grads.push_back({&param, g}); });
      double sq = 0.0;
      for (const auto& [p, g] : grads) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      const AdamConfig adam;
      const double clip_scale = norm > adam.clip_norm ? adam.clip_norm / norm : 1.0;
      const double lr = lr_at_step(step, total_steps, cfg.warmup_steps, cfg.lr_main, cfg.lr_low);
      adam_t += 1;
      int gi = 0;
      for (auto& [param, g] : grads) {
        if (clip_scale != 1.0) g *= clip_scale;
        adam_step(*param, g, adam_m[gi], adam_v[gi], adam_t, lr, adam);
        ++gi;
      }
      direct_losses.push_back(loss.value()(0, 0));
      ++step;
    }
  }

  double worst = 0.0;
  const size_t steps = std::min(pipeline.step_losses.size(), direct_losses.size());
  for (size_t i = 0; i < steps; ++i)
    worst = std::max(worst, std::abs(pipeline.step_losses[i] - direct_losses[i]));
  std::ostringstream ss;
  ss << steps << " steps compared, max |loss difference| = " << worst << ", "
     << seconds_since(start) << " s";
  return {steps == 50 && worst <= 1e-9, ss.str()};
}

// --- criteria 8 and 9: desk-scale comparative runs ------------------------------

struct RunSeries {
  std::vector<double> mbo_i;
  std::vector<double> fg_ari;
};

std::string comparative_config(const std::string& dataset, const std::string& layers,
                               const std::string& radii, const std::string& fusion,
                               std::uint64_t seed) {
  std::string text;
  text += "[data]\ndataset = " + dataset + "\ntarget = 64\ncrop = full\nflip_prob = 0.5\n";
  text += "[backend]\nkind = handcrafted\npatch = 8\nd_emb = 24\nradii = " + radii + "\n";
  text += "[model]\nlayers = " + layers +
          "\nslots = 5\nd_slot = 64\nattn_dim = 32\nsa_mlp_hidden = 64\nsa_iters = 3\n"
          "slot_init = learned\nfusion = " + fusion +
          "\nfusion_hidden = 64\ndecoder = broadcast\ndec_layers = 4\ndec_hidden = 48\n";
  text += "[train]\nepochs = 50\nbatch = 32\nlr_main = 2e-3\nlr_low = 2e-5\nwarmup = 200\n"
          "seed = " + std::to_string(seed) + "\n";
  return text;
}

std::string comparative_dataset() {
  const std::string dataset = accept_dir() + "/shapes2000";
  if (!fs::exists(dataset + "/manifest_train.txt")) {
    SceneSpec spec;  // defaults: 64x64, 2..4 objects
    spec.seed = 424242;
    generate_shapes_dataset(spec, 2000, 200, dataset);
  }
  return dataset;
}

RunSeries run_arm(const std::string& arm, std::uint64_t seed) {
  const std::string dataset = comparative_dataset();
  std::string layers = "1,2", radii = "0,2", fusion = "m_fusion";
  if (arm == "baseline") {
    layers = "2";
    radii = "2";
    fusion = "avg_fusion";
  } else if (arm == "avg") {
    fusion = "avg_fusion";
  }
  const std::string config_text = comparative_config(dataset, layers, radii, fusion, seed);
  const std::string cache_path =
      accept_dir() + "/" + arm + "_seed" + std::to_string(seed) + ".json";
  const std::string config_hash = git_blob_sha1(config_text);

  if (fs::exists(cache_path)) {
    try {
      const nlohmann::json j = nlohmann::json::parse(read_text_file(cache_path));
      if (j.at("config_hash") == config_hash) {
        RunSeries series;
        for (const auto& v : j.at("mbo_i")) series.mbo_i.push_back(v);
        for (const auto& v : j.at("fg_ari")) series.fg_ari.push_back(v);
        return series;
      }
    } catch (const std::exception&) {
      // fall through and recompute
    }
  }

  const TrainConfig cfg = parse_train_config(config_text);
  const TrainResult result = train_single_phase(cfg);
  RunSeries series;
  for (const EpochMetrics& em : result.eval_history) {
    series.mbo_i.push_back(em.report.mbo_i_max());
    series.fg_ari.push_back(em.report.fg_ari_max());
  }
  nlohmann::json j;
  j["arm"] = arm;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["mbo_i"] = series.mbo_i;
  j["fg_ari"] = series.fg_ari;
  write_text_file(cache_path, j.dump(2) + "\n");
  return series;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome criterion_comparative() {
  const auto start = Clock::now();
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<RunSeries> fused, baseline;
  for (std::uint64_t seed : seeds) fused.push_back(run_arm("m2", seed));
  for (std::uint64_t seed : seeds) baseline.push_back(run_arm("baseline", seed));

  std::vector<double> fused_final_mbo, fused_final_ari, base_final_mbo;
  for (const RunSeries& s : fused) {
    fused_final_mbo.push_back(s.mbo_i.back());
    fused_final_ari.push_back(s.fg_ari.back());
  }
  for (const RunSeries& s : baseline) base_final_mbo.push_back(s.mbo_i.back());

  const double med_mbo = median3(fused_final_mbo);
  const double med_ari = median3(fused_final_ari);
  const double target = median3(base_final_mbo);

  std::vector<double> reach_epochs;
  for (const RunSeries& s : fused) {
    double reached = 1e9;
    for (size_t e = 0; e < s.mbo_i.size(); ++e)
      if (s.mbo_i[e] >= target) {
        reached = double(e + 1);
        break;
      }
    reach_epochs.push_back(reached);
  }
  const double med_reach = median3(reach_epochs);
  const double budget_epochs = 0.6 * double(fused.front().mbo_i.size());
  const double elapsed = seconds_since(start);

  std::ostringstream ss;
  ss << "fused median: mBO_i " << med_mbo << " (need >= 0.5), FG-ARI " << med_ari
     << " (need >= 0.6); baseline epoch-50 mBO_i " << target << " reached at median epoch "
     << med_reach << " (need <= " << budget_epochs << "); " << elapsed << " s";
  const bool pass = med_mbo >= 0.5 && med_ari >= 0.6 && med_reach <= budget_epochs;
  return {pass, ss.str()};
}

Outcome criterion_fusion_ablation() {
  const auto start = Clock::now();
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<double> m_final, avg_final;
  for (std::uint64_t seed : seeds) m_final.push_back(run_arm("m2", seed).mbo_i.back());
  for (std::uint64_t seed : seeds) avg_final.push_back(run_arm("avg", seed).mbo_i.back());
  const double med_m = median3(m_final);
  const double med_avg = median3(avg_final);
  std::ostringstream ss;
  ss << "median epoch-50 mBO_i: pairwise-sum fusion " << med_m << ", averaging " << med_avg
     << " (need >= averaging - 0.02); " << seconds_since(start) << " s";
  return {med_m >= med_avg - 0.02, ss.str()};
}

// --- criterion 10: CLI smoke -----------------------------------------------------

int run_cmd(const std::string& cwd, const std::string& args) {
  const std::string cmd =
      "cd '" + cwd + "' && '" + MUFASA_CLI_PATH + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

Outcome criterion_cli_smoke() {
  const auto start = Clock::now();
  const std::string work = accept_dir() + "/cli_smoke";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string configs = MUFASA_CONFIG_DIR;

  std::vector<std::string> failures;
  auto expect = [&](int got, int want, const std::string& what) {
    if (got != want)
      failures.push_back(what + " exited " + std::to_string(got) + " (wanted " +
                         std::to_string(want) + ")");
  };

  expect(
      run_cmd(work, "gen-data --config '" + configs + "/shapes_demo.cfg' --out data/shapes_demo"),
      0, "gen-data");
  expect(run_cmd(work, "train --config '" + configs + "/train_demo.cfg' --out runs/demo"), 0,
         "train");
  expect(run_cmd(work, "eval --config '" + configs +
                           "/train_demo.cfg' --ckpt runs/demo/checkpoint_best.mufc --out eval1"),
         0, "eval (first)");
  expect(run_cmd(work, "eval --config '" + configs +
                           "/train_demo.cfg' --ckpt runs/demo/checkpoint_best.mufc --out eval2"),
         0, "eval (second)");
  expect(run_cmd(work, "export-masks --config '" + configs +
                           "/train_demo.cfg' --ckpt runs/demo/checkpoint_best.mufc --out masks"),
         0, "export-masks");
  expect(run_cmd(work, "viz-pca --config '" + configs + "/train_demo.cfg' --out pca --layer 2"),
         0, "viz-pca");

  if (failures.empty()) {
    const std::string r1 = read_text_file(work + "/eval1/report.txt");
    const std::string r2 = read_text_file(work + "/eval2/report.txt");
    const std::string j1 = read_text_file(work + "/eval1/report.json");
    const std::string j2 = read_text_file(work + "/eval2/report.json");
    if (r1 != r2 || j1 != j2) failures.push_back("repeated eval reports are not byte-identical");
    if (!fs::exists(work + "/masks/e00000_sa.png")) failures.push_back("export-masks wrote no PNG");
    if (!fs::exists(work + "/pca")) failures.push_back("viz-pca wrote nothing");
    if (!fs::exists(work + "/runs/demo/run_manifest.txt"))
      failures.push_back("train wrote no run manifest");
  }

  // checkpoint/dataset mismatch must exit 2; unknown flags are usage errors
  if (failures.empty()) {
    expect(run_cmd(work,
                   "gen-data --config '" + configs + "/shapes_demo.cfg' --seed 999 --out data/other"),
           0, "gen-data (other)");
    std::string mismatched = read_text_file(configs + "/train_demo.cfg");
    const auto pos = mismatched.find("data/shapes_demo");
    mismatched.replace(pos, std::string("data/shapes_demo").size(), "data/other");
    write_text_file(work + "/mismatched.cfg", mismatched);
    expect(
        run_cmd(work,
                "eval --config mismatched.cfg --ckpt runs/demo/checkpoint_best.mufc --out eval3"),
        2, "eval with mismatched dataset");
    expect(run_cmd(work, "train --no-such-flag"), 1, "unknown flag");
  }

  std::ostringstream ss;
  if (failures.empty())
    ss << "gen-data -> train -> eval -> export-masks -> viz-pca, byte-identical re-eval, "
       << seconds_since(start) << " s";
  else
    ss << failures.front() << " (" << failures.size() << " failure(s))";
  return {failures.empty(), ss.str()};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) only = std::atoi(argv[++i]);
  }

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion_assignment_oracle},
      {2, criterion_metric_oracles},
      {3, criterion_end_to_end_gradients},
      {4, criterion_loss_values},
      {5, criterion_normalization},
      {6, criterion_equivariance},
      {7, criterion_degeneration},
      {8, criterion_comparative},
      {9, criterion_fusion_ablation},
      {10, criterion_cli_smoke},
  };

  static const char* kNames[11] = {"",
                                   "assignment oracle equivalence",
                                   "metric oracle equivalence",
                                   "end-to-end gradient correctness",
                                   "analytic loss values",
                                   "normalization invariants",
                                   "equivariance suite",
                                   "single-layer degeneration",
                                   "desk-scale comparative run",
                                   "fusion ablation direction",
                                   "end-to-end CLI smoke"};

  bool all_pass = true;
  for (const auto& [id, fn] : criteria) {
    if (only != 0 && id != only) continue;
    Outcome outcome;
    try {
      outcome = fn();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (outcome.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << kNames[id]
              << "): " << outcome.detail << "\n";
    all_pass = all_pass && outcome.pass;
  }
  return all_pass ? 0 : 1;
}
