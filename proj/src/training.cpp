#include "mufasa/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace mufasa {

double reconstruction_loss(const Eigen::Ref<const Mat>& target,
                           const Eigen::Ref<const Mat>& recon) {
  if (target.rows() != recon.rows() || target.cols() != recon.cols())
    throw DimensionError("reconstruction_loss: shape mismatch");
  return (target - recon).squaredNorm() / double(target.size());
}

double lr_at_step(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                  double eta_main, double eta_low) {
  if (step < 0 || step > total_steps) throw RangeError("lr_at_step: step outside [0, total]");
  if (warmup_steps >= total_steps) throw ConfigError("lr_at_step: warmup must be < total steps");
  if (warmup_steps > 0 && step <= warmup_steps)
    return eta_main * double(step) / double(warmup_steps);
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return eta_low + 0.5 * (eta_main - eta_low) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

namespace {

Mat normalize_rows_plain(const Eigen::Ref<const Mat>& m, double eps) {
  Mat out(m.rows(), m.cols());
  for (Index r = 0; r < m.rows(); ++r) out.row(r) = m.row(r) / (m.row(r).sum() + eps);
  return out;
}

struct DistillPlan {
  std::vector<int> student_col_perm;  // teacher column i <- student column perm[i]
  std::vector<int> targets;           // per patch: teacher argmax slot
};

DistillPlan make_distill_plan(const Eigen::Ref<const Mat>& teacher,
                              const Eigen::Ref<const Mat>& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
    throw DimensionError("distillation: mask shapes differ");
  DistillPlan plan;
  const Mat t_norm = normalize_rows_plain(teacher, kRowNormEps);
  const Mat s_norm = normalize_rows_plain(student, kRowNormEps);
  const Mat cost = pairwise_miou_cost(binarize_mask(t_norm), binarize_mask(s_norm));
  plan.student_col_perm = hungarian_match(cost);
  plan.targets.resize(size_t(teacher.rows()));
  for (Index r = 0; r < teacher.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < teacher.cols(); ++c)
      if (teacher(r, c) > teacher(r, best)) best = c;
    plan.targets[size_t(r)] = int(best);
  }
  return plan;
}

}  // namespace

double distillation_loss(const Eigen::Ref<const Mat>& teacher_mask,
                         const Eigen::Ref<const Mat>& student_fused_mask, double lambda,
                         bool soft_targets) {
  if (lambda == 0.0) return 0.0;
  const DistillPlan plan = make_distill_plan(teacher_mask, student_fused_mask);
  Mat aligned(student_fused_mask.rows(), student_fused_mask.cols());
  for (Index c = 0; c < aligned.cols(); ++c)
    aligned.col(c) = student_fused_mask.col(plan.student_col_perm[size_t(c)]);
  const Mat p = normalize_rows_plain(aligned, kRowNormEps);
  double total = 0.0;
  if (soft_targets) {
    const Mat t = normalize_rows_plain(teacher_mask, kRowNormEps);
    for (Index r = 0; r < p.rows(); ++r)
      for (Index c = 0; c < p.cols(); ++c) total -= t(r, c) * std::log(p(r, c));
  } else {
    for (Index r = 0; r < p.rows(); ++r) total -= std::log(p(r, plan.targets[size_t(r)]));
  }
  return lambda * total / double(p.rows());
}

// ---------------------------------------------------------------------------
// pipeline graph
// ---------------------------------------------------------------------------

PipelineForward pipeline_forward(ad::Tape& t, const ModelVars& vars, ModelParams& params,
                                 const std::vector<ad::Var>& features, int batch,
                                 const std::vector<Mat>* noise_per_layer) {
  const int m = int(params.sa.size());
  if (int(features.size()) != m) throw DimensionError("pipeline: feature/layer count mismatch");
  const int k = params.sa.front().slots();
  const Index n = features.front().rows() / batch;

  PipelineForward out;
  for (int i = 0; i < m; ++i) {
    const Mat* noise = noise_per_layer ? &(*noise_per_layer)[size_t(i)] : nullptr;
    const SaForward sa =
        sa_forward(t, features[size_t(i)], vars.sa[size_t(i)], params.sa[size_t(i)], batch, noise);
    out.sa_slots.push_back(sa.slots);
    out.sa_masks.push_back(sa.mask);
  }

  // Hungarian alignment: permutations are data, derived from mask values.
  std::vector<ad::Var> aligned_slots{out.sa_slots[0]};
  std::vector<ad::Var> aligned_masks{out.sa_masks[0]};
  out.alignments.assign(size_t(m), {});
  {
    std::vector<int> identity(size_t(batch) * size_t(k));
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < k; ++i) identity[size_t(b * k + i)] = i;
    out.alignments[0] = identity;
  }
  if (m > 1) {
    std::vector<std::vector<int>> per_layer_perm;  // flattened per image
    per_layer_perm.resize(size_t(m));
    for (int i = 1; i < m; ++i) per_layer_perm[size_t(i)].resize(size_t(batch) * size_t(k));
    for (int b = 0; b < batch; ++b) {
      std::vector<Mat> blocks;
      blocks.reserve(size_t(m));
      for (int i = 0; i < m; ++i)
        blocks.push_back(out.sa_masks[size_t(i)].value().middleRows(Index(b) * n, n));
      const auto perms = chained_alignment(blocks);
      for (int i = 1; i < m; ++i)
        for (int j = 0; j < k; ++j)
          per_layer_perm[size_t(i)][size_t(b * k + j)] = perms[size_t(i)][size_t(j)];
    }
    for (int i = 1; i < m; ++i) {
      out.alignments[size_t(i)] = per_layer_perm[size_t(i)];
      std::vector<int> row_perm(size_t(batch) * size_t(k));
      for (int b = 0; b < batch; ++b)
        for (int j = 0; j < k; ++j)
          row_perm[size_t(b * k + j)] = b * k + per_layer_perm[size_t(i)][size_t(b * k + j)];
      aligned_slots.push_back(t.permute_rows(out.sa_slots[size_t(i)], row_perm));
      aligned_masks.push_back(
          t.permute_cols_blocked(out.sa_masks[size_t(i)], batch, per_layer_perm[size_t(i)]));
    }
  }

  out.fused_slots = fuse_slots_forward(t, aligned_slots, vars.fusion, params.fusion, batch);
  out.fused_mask = fuse_masks_forward(t, aligned_masks, vars.fusion, params.fusion);

  const ad::Var target = features.back();
  if (std::holds_alternative<TransformerDecoderParams>(params.decoder)) {
    const auto& meta = std::get<TransformerDecoderParams>(params.decoder);
    const DecodeForward dec =
        transformer_decode_forward(t, out.fused_slots, target, vars.dec_transformer, meta, batch);
    out.reconstruction = dec.reconstruction;
    out.decoder_mask = dec.mask;
  } else {
    const auto& meta = std::get<BroadcastDecoderParams>(params.decoder);
    const DecodeForward dec =
        broadcast_decode_forward(t, out.fused_slots, vars.dec_broadcast, meta, batch);
    out.reconstruction = dec.reconstruction;
    out.decoder_mask = dec.mask;
  }

  const ad::Var diff = t.sub(out.reconstruction, target);
  out.loss_rec = t.mean_all(t.cmul(diff, diff));
  return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void adam_step(Mat& param, const Eigen::Ref<const Mat>& grad, Mat& m, Mat& v, std::int64_t t,
               double lr, const AdamConfig& cfg) {
  if (m.size() == 0) m = Mat::Zero(param.rows(), param.cols());
  if (v.size() == 0) v = Mat::Zero(param.rows(), param.cols());
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  param.array() -=
      lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'M', 'U', 'F', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::uint8_t b[4] = {std::uint8_t(v), std::uint8_t(v >> 8), std::uint8_t(v >> 16),
                             std::uint8_t(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, std::uint32_t(v & 0xFFFFFFFFu));
  put_u32(os, std::uint32_t(v >> 32));
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

struct ByteReader {
  const std::uint8_t* p;
  size_t n;
  size_t pos = 0;

  void need(size_t k, const char* what) {
    if (pos + k > n) throw CorruptionError(std::string("checkpoint truncated reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    const std::uint32_t v = std::uint32_t(p[pos]) | (std::uint32_t(p[pos + 1]) << 8) |
                            (std::uint32_t(p[pos + 2]) << 16) | (std::uint32_t(p[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    const std::uint64_t hi = u32(what);
    return lo | (hi << 32);
  }
  std::string str(const char* what) {
    const std::uint32_t len = u32(what);
    need(len, what);
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
};

void put_tensor(std::ostream& os, const std::string& name, const Mat& m) {
  if (name.size() > 0xFFFF) throw ConfigError("tensor name too long");
  const std::uint16_t len = std::uint16_t(name.size());
  const std::uint8_t lb[2] = {std::uint8_t(len & 0xFF), std::uint8_t(len >> 8)};
  os.write(reinterpret_cast<const char*>(lb), 2);
  os.write(name.data(), std::streamsize(name.size()));
  put_u32(os, std::uint32_t(m.rows()));
  put_u32(os, std::uint32_t(m.cols()));
  for (Index r = 0; r < m.rows(); ++r) {
    const Eigen::RowVectorXd row = m.row(r);
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(sizeof(double)) * m.cols());
  }
}

std::pair<std::string, Mat> read_tensor(ByteReader& br) {
  br.need(2, "tensor name length");
  const std::uint16_t len = std::uint16_t(br.p[br.pos] | (br.p[br.pos + 1] << 8));
  br.pos += 2;
  br.need(len, "tensor name");
  std::string name(reinterpret_cast<const char*>(br.p + br.pos), len);
  br.pos += len;
  const std::uint32_t rows = br.u32("tensor rows");
  const std::uint32_t cols = br.u32("tensor cols");
  br.need(size_t(rows) * cols * sizeof(double), "tensor payload");
  Mat m(rows, cols);
  Eigen::RowVectorXd row(cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    std::memcpy(row.data(), br.p + br.pos, sizeof(double) * cols);
    m.row(r) = row;
    br.pos += sizeof(double) * cols;
  }
  return {std::move(name), std::move(m)};
}

}  // namespace

void save_checkpoint(const std::string& path, Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write(kCkptMagic, 4);
  put_u32(os, kCkptVersion);
  put_u32(os, std::uint32_t(ckpt.d_emb));
  put_u32(os, std::uint32_t(ckpt.patches));
  put_u64(os, std::uint64_t(ckpt.step));
  put_u32(os, std::uint32_t(ckpt.epoch));
  put_u64(os, std::uint64_t(ckpt.adam_t));
  const bool learned_weights = ckpt.model.fusion.weight_mode == MaskWeightMode::learned;
  put_u32(os, learned_weights ? 1 : 0);
  put_string(os, ckpt.config_text);
  put_string(os, ckpt.config_hash);
  put_string(os, ckpt.dataset_spec_hash);
  std::string history;
  for (const auto& line : ckpt.metric_history) history += line + "\n";
  put_string(os, history);

  std::vector<std::pair<std::string, Mat*>> tensors;
  for_each_param(ckpt.model, [&](const std::string& name, Mat& m) { tensors.push_back({name, &m}); });
  std::uint32_t count = std::uint32_t(tensors.size());
  for (const auto& [name, m] : tensors) {
    if (ckpt.adam_m.count(name)) ++count;
    if (ckpt.adam_v.count(name)) ++count;
  }
  put_u32(os, count);
  for (const auto& [name, m] : tensors) put_tensor(os, name, *m);
  for (const auto& [name, m] : tensors) {
    const auto im = ckpt.adam_m.find(name);
    if (im != ckpt.adam_m.end()) put_tensor(os, "adam.m." + name, im->second);
    const auto iv = ckpt.adam_v.find(name);
    if (iv != ckpt.adam_v.end()) put_tensor(os, "adam.v." + name, iv->second);
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw FormatError("bad checkpoint magic: " + path);
  ByteReader br{bytes.data(), bytes.size(), 4};
  const std::uint32_t version = br.u32("version");
  if (version != kCkptVersion) throw FormatError("unsupported checkpoint version");

  Checkpoint ckpt;
  ckpt.d_emb = int(br.u32("d_emb"));
  ckpt.patches = int(br.u32("patches"));
  ckpt.step = std::int64_t(br.u64("step"));
  ckpt.epoch = int(br.u32("epoch"));
  ckpt.adam_t = std::int64_t(br.u64("adam_t"));
  const bool learned_weights = br.u32("weight mode") != 0;
  ckpt.config_text = br.str("config text");
  ckpt.config_hash = br.str("config hash");
  ckpt.dataset_spec_hash = br.str("dataset spec hash");
  const std::string history = br.str("metric history");
  {
    std::istringstream hs(history);
    std::string line;
    while (std::getline(hs, line))
      if (!line.empty()) ckpt.metric_history.push_back(line);
  }
  if (git_blob_sha1(ckpt.config_text) != ckpt.config_hash)
    throw CorruptionError("checkpoint config hash does not match its config text");

  const TrainConfig cfg = parse_train_config(ckpt.config_text);
  ModelConfig mc = cfg.model_config(ckpt.d_emb, ckpt.patches);
  mc.mask_weights = learned_weights ? MaskWeightMode::learned : MaskWeightMode::uniform;
  ckpt.model = make_model(mc, derive_seed(cfg.seed, seed_streams::kParams));

  std::map<std::string, Mat*> by_name;
  for_each_param(ckpt.model, [&](const std::string& name, Mat& m) { by_name[name] = &m; });
  std::set<std::string> filled;
  const std::uint32_t count = br.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, m] = read_tensor(br);
    if (name.rfind("adam.m.", 0) == 0) {
      ckpt.adam_m[name.substr(7)] = std::move(m);
      continue;
    }
    if (name.rfind("adam.v.", 0) == 0) {
      ckpt.adam_v[name.substr(7)] = std::move(m);
      continue;
    }
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CorruptionError("checkpoint tensor unknown to model: " + name);
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols())
      throw CorruptionError("checkpoint tensor shape mismatch: " + name);
    *it->second = std::move(m);
    filled.insert(name);
  }
  if (filled.size() != by_name.size())
    throw CorruptionError("checkpoint missing parameter tensors");
  return ckpt;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

std::int64_t steps_per_epoch(int dataset_size, int batch) {
  return (std::int64_t(dataset_size) + batch - 1) / batch;
}

namespace {

struct PhaseOptions {
  std::uint64_t base_seed = 0;
  int epochs = 1;
  bool learned_mask_weights = false;
  ModelParams* teacher = nullptr;
  double lambda = 0.0;
  bool soft_targets = false;
};

struct BatchData {
  std::vector<Mat> layer_features;  // M mats, (B*N) x d_emb
  int batch = 0;
};

struct LoadedSplit {
  std::vector<LoadedItem> items;
  std::string spec_hash;
};

LoadedSplit load_split(const std::string& dir, const std::string& split) {
  const Dataset ds = Dataset::open(dir, split);
  LoadedSplit out;
  out.spec_hash = ds.manifest().spec_hash;
  out.items.resize(size_t(ds.size()));
  parallel_for(ds.size(), [&](int i) { out.items[size_t(i)] = ds.item(i); });
  return out;
}

struct FeatureGeometry {
  int d_emb = 0;
  GridShape grid;
};

FeatureGeometry probe_geometry(const TrainConfig& cfg, const LoadedItem& item) {
  Rng dummy(1);
  const Sample s = preprocess(item, PreprocessMode::eval, cfg.preprocess, dummy);
  const FeatureStack stack = extract_features(s.image, cfg.backend, cfg.layer_ids, s.id);
  return FeatureGeometry{stack.d_emb, stack.grid};
}

BatchData assemble_batch(const TrainConfig& cfg, const std::vector<LoadedItem>& items,
                         const std::vector<int>& indices, std::uint64_t base_seed,
                         std::int64_t step, const FeatureGeometry& geom) {
  BatchData data;
  data.batch = int(indices.size());
  const int m = cfg.layers();
  const Index n = geom.grid.patches();
  for (int i = 0; i < m; ++i) data.layer_features.emplace_back(Index(data.batch) * n, geom.d_emb);

  std::vector<FeatureStack> stacks(size_t(data.batch));
  parallel_for(data.batch, [&](int pos) {
    Rng aug(derive_seed(derive_seed(base_seed, seed_streams::kAugment, std::uint64_t(step)),
                        std::uint64_t(pos)));
    const Sample s = preprocess(items[size_t(indices[size_t(pos)])], PreprocessMode::train,
                                cfg.preprocess, aug);
    stacks[size_t(pos)] = extract_features(s.image, cfg.backend, cfg.layer_ids, s.id);
  });
  for (int pos = 0; pos < data.batch; ++pos) {
    const FeatureStack& stack = stacks[size_t(pos)];
    if (stack.d_emb != geom.d_emb || stack.grid != geom.grid)
      throw DimensionError("feature geometry varies across the dataset");
    for (int i = 0; i < m; ++i)
      data.layer_features[size_t(i)].middleRows(Index(pos) * n, n) =
          stack.layers[size_t(i)].cast<double>();
  }
  return data;
}

std::vector<Mat> gaussian_noise(const TrainConfig& cfg, std::uint64_t base_seed, std::int64_t step,
                                int batch, std::uint64_t tag) {
  std::vector<Mat> noise;
  if (cfg.slot_init != SlotInitMode::gaussian) return noise;
  for (int layer = 0; layer < cfg.layers(); ++layer) {
    Mat eps(Index(batch) * cfg.slots, cfg.d_slot);
    for (int pos = 0; pos < batch; ++pos) {
      Rng rng(derive_seed(
          derive_seed(base_seed, seed_streams::kNoise + tag + std::uint64_t(layer), std::uint64_t(step)),
          std::uint64_t(pos)));
      for (int i = 0; i < cfg.slots; ++i)
        for (int j = 0; j < cfg.d_slot; ++j) eps(Index(pos) * cfg.slots + i, j) = rng.gaussian();
    }
    noise.push_back(std::move(eps));
  }
  return noise;
}

std::string metrics_line(int epoch, std::int64_t step, const MetricsReport& r) {
  std::ostringstream ss;
  ss << "epoch=" << epoch << " step=" << step << " miou.max=" << format_double(r.miou_max())
     << " mbo_i.max=" << format_double(r.mbo_i_max());
  if (r.has_class_metrics) ss << " mbo_c.max=" << format_double(r.mbo_c_max());
  ss << " fg_ari.max=" << format_double(r.fg_ari_max());
  return ss.str();
}

MetricsReport evaluate_split(ModelParams& model, const TrainConfig& cfg,
                             const std::vector<LoadedItem>& items, int eval_h, int eval_w);

TrainResult run_training(const TrainConfig& cfg, const PhaseOptions& phase,
                         const Checkpoint* resume_from) {
  const LoadedSplit train = load_split(cfg.dataset_dir, "train");
  const LoadedSplit eval = load_split(cfg.dataset_dir, "eval");
  if (train.items.empty()) throw IoError("training split is empty");
  const FeatureGeometry geom = probe_geometry(cfg, train.items.front());

  ModelConfig mc = cfg.model_config(geom.d_emb, geom.grid.patches());
  mc.mask_weights = phase.learned_mask_weights ? MaskWeightMode::learned : MaskWeightMode::uniform;

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  if (resume_from) {
    if (resume_from->config_hash != cfg.config_hash())
      throw CompatibilityError("resume checkpoint was produced by a different config");
    ckpt = *resume_from;
  } else {
    ckpt.config_text = cfg.source_text;
    ckpt.config_hash = cfg.config_hash();
    ckpt.dataset_spec_hash = train.spec_hash;
    ckpt.d_emb = geom.d_emb;
    ckpt.patches = geom.grid.patches();
    ckpt.model = make_model(mc, derive_seed(phase.base_seed, seed_streams::kParams));
  }

  std::vector<std::pair<std::string, Mat*>> registry;
  for_each_param(ckpt.model, [&](const std::string& name, Mat& m) { registry.push_back({name, &m}); });

  const std::int64_t spe = steps_per_epoch(int(train.items.size()), cfg.batch);
  const std::int64_t total_steps = spe * phase.epochs;
  if (cfg.warmup_steps >= total_steps)
    throw ConfigError("warmup steps must be below the total step count");

  const AdamConfig adam;
  double best_mbo = -1.0;
  for (const std::string& line : ckpt.metric_history) {
    const auto pos = line.find("mbo_i.max=");
    if (pos != std::string::npos) best_mbo = std::max(best_mbo, std::stod(line.substr(pos + 10)));
  }

  const bool distill = phase.teacher != nullptr && phase.lambda > 0.0;

  std::int64_t step = ckpt.step;
  for (int epoch = int(step / spe); epoch < phase.epochs; ++epoch) {
    std::vector<int> order(train.items.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(phase.base_seed, seed_streams::kShuffle, std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    const std::int64_t first_batch = step - std::int64_t(epoch) * spe;
    for (std::int64_t bi = first_batch; bi < spe; ++bi) {
      const size_t begin = size_t(bi) * size_t(cfg.batch);
      const size_t end = std::min(order.size(), begin + size_t(cfg.batch));
      const std::vector<int> indices(order.begin() + std::ptrdiff_t(begin),
                                     order.begin() + std::ptrdiff_t(end));
      const BatchData data =
          assemble_batch(cfg, train.items, indices, phase.base_seed, step, geom);
      const std::vector<Mat> noise = gaussian_noise(cfg, phase.base_seed, step, data.batch, 0);

      // Frozen teacher masks for the same batch (no gradients).
      Mat teacher_fused;
      if (distill) {
        ad::Tape ttape;
        ParamBinding tpb(ttape, /*needs_grad=*/false);
        const ModelVars tvars = bind_model(tpb, *phase.teacher);
        std::vector<ad::Var> tfeat;
        for (const Mat& f : data.layer_features) tfeat.push_back(ttape.constant(f));
        const std::vector<Mat> tnoise =
            gaussian_noise(cfg, derive_seed(phase.base_seed, seed_streams::kTeacher), step, data.batch, 0xEE);
        const PipelineForward tfwd = pipeline_forward(
            ttape, tvars, *phase.teacher, tfeat, data.batch,
            cfg.slot_init == SlotInitMode::gaussian ? &tnoise : nullptr);
        teacher_fused = tfwd.fused_mask.value();
      }

      ad::Tape tape(1024);
      ParamBinding pb(tape, /*needs_grad=*/true);
      const ModelVars vars = bind_model(pb, ckpt.model);
      std::vector<ad::Var> feat;
      for (const Mat& f : data.layer_features) feat.push_back(tape.constant(f));
      const PipelineForward fwd =
          pipeline_forward(tape, vars, ckpt.model, feat, data.batch,
                           cfg.slot_init == SlotInitMode::gaussian ? &noise : nullptr);

      ad::Var loss = fwd.loss_rec;
      if (distill) {
        const Index n = geom.grid.patches();
        const Mat student_fused = fwd.fused_mask.value();
        std::vector<int> col_perm(size_t(data.batch) * size_t(cfg.slots));
        std::vector<int> targets(size_t(data.batch) * size_t(n));
        for (int b = 0; b < data.batch; ++b) {
          const DistillPlan plan =
              make_distill_plan(teacher_fused.middleRows(Index(b) * n, n),
                                student_fused.middleRows(Index(b) * n, n));
          for (int j = 0; j < cfg.slots; ++j)
            col_perm[size_t(b * cfg.slots + j)] = plan.student_col_perm[size_t(j)];
          for (Index r = 0; r < n; ++r)
            targets[size_t(Index(b) * n + r)] = plan.targets[size_t(r)];
        }
        const ad::Var aligned = tape.permute_cols_blocked(fwd.fused_mask, data.batch, col_perm);
        const ad::Var probs = tape.normalize_rows(aligned, kRowNormEps);
        ad::Var ce;
        if (phase.soft_targets) {
          const Mat t_norm = normalize_rows_plain(teacher_fused, kRowNormEps);
          ce = tape.scale(tape.sum_all(tape.cmul(tape.constant(t_norm), tape.log(probs))),
                          -phase.lambda / double(teacher_fused.rows()));
        } else {
          ce = tape.scale(tape.mean_all(tape.log(tape.gather_rowwise(probs, targets))),
                          -phase.lambda);
        }
        loss = tape.add(loss, ce);
      }

      const double loss_value = loss.value()(0, 0);
      if (!std::isfinite(loss_value)) {
        if (!cfg.out_dir.empty()) {
          ckpt.step = step;
          save_checkpoint(cfg.out_dir + "/checkpoint_abort.mufc", ckpt);
        }
        throw NumericError("non-finite loss at step " + std::to_string(step));
      }

      tape.backward(loss);

      std::vector<std::pair<Mat*, Mat>> grads;
      pb.for_each_grad([&](Mat& param, const Mat& g) { grads.push_back({&param, g}); });
      double sq = 0.0;
      for (const auto& [p, g] : grads) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      const double clip_scale = norm > adam.clip_norm ? adam.clip_norm / norm : 1.0;

      const double lr = lr_at_step(step, total_steps, cfg.warmup_steps, cfg.lr_main, cfg.lr_low);
      ckpt.adam_t += 1;
      // grads arrive in binding order == registry order
      size_t gi = 0;
      for (auto& [name, param] : registry) {
        Mat& g = grads[gi].second;
        if (grads[gi].first != param)
          throw NumericError("internal: gradient/parameter registry order mismatch");
        if (clip_scale != 1.0) g *= clip_scale;
        adam_step(*param, g, ckpt.adam_m[name], ckpt.adam_v[name], ckpt.adam_t, lr, adam);
        ++gi;
      }

      result.step_losses.push_back(loss_value);
      ++step;
      ckpt.step = step;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) goto training_done;
    }

    ckpt.epoch = epoch + 1;
    {
      EpochMetrics em;
      em.epoch = epoch + 1;
      em.step = step;
      em.report = evaluate_split(ckpt.model, cfg, eval.items,
                                 cfg.eval_height > 0 ? cfg.eval_height : cfg.preprocess.target,
                                 cfg.eval_width > 0 ? cfg.eval_width : cfg.preprocess.target);
      result.eval_history.push_back(em);
      ckpt.metric_history.push_back(metrics_line(em.epoch, step, em.report));
      if (!cfg.out_dir.empty() && (epoch + 1) % std::max(1, cfg.checkpoint_every) == 0) {
        result.last_path = cfg.out_dir + "/checkpoint_last.mufc";
        save_checkpoint(result.last_path, ckpt);
        if (em.report.mbo_i_max() > best_mbo) {
          best_mbo = em.report.mbo_i_max();
          result.best_path = cfg.out_dir + "/checkpoint_best.mufc";
          save_checkpoint(result.best_path, ckpt);
        }
      }
    }
  }
training_done:
  if (!cfg.out_dir.empty()) {
    result.last_path = cfg.out_dir + "/checkpoint_last.mufc";
    save_checkpoint(result.last_path, ckpt);
    if (result.best_path.empty()) result.best_path = result.last_path;
  }
  return result;
}

MetricsReport evaluate_split(ModelParams& model, const TrainConfig& cfg,
                             const std::vector<LoadedItem>& items, int eval_h, int eval_w) {
  MetricsReport report;
  report.sample_count = int(items.size());
  bool all_classes = !items.empty();
  for (const auto& item : items) all_classes = all_classes && item.has_classes;
  report.has_class_metrics = all_classes;

  struct PerImage {
    double miou_sa, miou_dec, mbo_i_sa, mbo_i_dec, mbo_c_sa, mbo_c_dec, ari_sa, ari_dec;
  };
  std::vector<PerImage> values(items.size());
  const EvalOptions opts{cfg.include_background, 0};

  parallel_for(int(items.size()), [&](int i) {
    Rng dummy(1);
    const Sample s = preprocess(items[size_t(i)], PreprocessMode::eval, cfg.preprocess, dummy);
    const InferenceMasks masks = infer_masks(model, cfg, s);

    SegmentationLabelMap gt_inst;
    gt_inst.semantics = LabelSemantics::instance;
    const LabelImage inst = (s.instances.width == eval_w && s.instances.height == eval_h)
                                ? s.instances
                                : resize_nearest(s.instances, eval_w, eval_h);
    gt_inst.labels.resize(eval_h, eval_w);
    for (int y = 0; y < eval_h; ++y)
      for (int x = 0; x < eval_w; ++x) gt_inst.labels(y, x) = inst.at(x, y);

    SegmentationLabelMap gt_class;
    gt_class.semantics = LabelSemantics::class_id;
    if (all_classes) {
      const LabelImage cls = (s.classes.width == eval_w && s.classes.height == eval_h)
                                 ? s.classes
                                 : resize_nearest(s.classes, eval_w, eval_h);
      gt_class.labels.resize(eval_h, eval_w);
      for (int y = 0; y < eval_h; ++y)
        for (int x = 0; x < eval_w; ++x) gt_class.labels(y, x) = cls.at(x, y);
    }

    const SegmentationLabelMap pred_sa =
        label_map_from_attention(masks.fused_mask, masks.grid, eval_h, eval_w);
    const SegmentationLabelMap pred_dec =
        label_map_from_attention(masks.decoder_mask, masks.grid, eval_h, eval_w);

    PerImage v{};
    v.miou_sa = miou_metric(pred_sa, gt_inst, opts);
    v.miou_dec = miou_metric(pred_dec, gt_inst, opts);
    v.mbo_i_sa = mbo_metric(pred_sa, gt_inst, LabelSemantics::instance, opts);
    v.mbo_i_dec = mbo_metric(pred_dec, gt_inst, LabelSemantics::instance, opts);
    if (all_classes) {
      v.mbo_c_sa = mbo_metric(pred_sa, gt_class, LabelSemantics::class_id, opts);
      v.mbo_c_dec = mbo_metric(pred_dec, gt_class, LabelSemantics::class_id, opts);
    }
    v.ari_sa = fg_ari(pred_sa, gt_inst, 0);
    v.ari_dec = fg_ari(pred_dec, gt_inst, 0);
    values[size_t(i)] = v;
  });

  KahanSum miou_sa, miou_dec, mbo_i_sa, mbo_i_dec, mbo_c_sa, mbo_c_dec, ari_sa, ari_dec;
  for (const PerImage& v : values) {
    miou_sa.add(v.miou_sa);
    miou_dec.add(v.miou_dec);
    mbo_i_sa.add(v.mbo_i_sa);
    mbo_i_dec.add(v.mbo_i_dec);
    mbo_c_sa.add(v.mbo_c_sa);
    mbo_c_dec.add(v.mbo_c_dec);
    ari_sa.add(v.ari_sa);
    ari_dec.add(v.ari_dec);
  }
  const double n = std::max<size_t>(1, items.size());
  report.miou_sa = miou_sa.value() / n;
  report.miou_decoder = miou_dec.value() / n;
  report.mbo_i_sa = mbo_i_sa.value() / n;
  report.mbo_i_decoder = mbo_i_dec.value() / n;
  report.mbo_c_sa = mbo_c_sa.value() / n;
  report.mbo_c_decoder = mbo_c_dec.value() / n;
  report.fg_ari_sa = ari_sa.value() / n;
  report.fg_ari_decoder = ari_dec.value() / n;
  return report;
}

}  // namespace

TrainResult train_single_phase(const TrainConfig& cfg, const Checkpoint* resume_from) {
  cfg.validate();
  if (cfg.mask_weights != MaskWeightMode::uniform)
    throw ConfigError("single-phase training uses uniform mask weights");
  PhaseOptions phase;
  phase.base_seed = cfg.seed;
  phase.epochs = cfg.epochs;
  return run_training(cfg, phase, resume_from);
}

SelfDistillResult train_self_distilled(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.teacher_epochs < 1 || cfg.student_epochs < 1)
    throw ConfigError("self-distillation needs teacher_epochs and student_epochs >= 1");

  TrainConfig teacher_cfg = cfg;
  teacher_cfg.epochs = cfg.teacher_epochs;
  teacher_cfg.out_dir = cfg.out_dir.empty() ? "" : cfg.out_dir + "/teacher";
  if (!teacher_cfg.out_dir.empty()) fs::create_directories(teacher_cfg.out_dir);
  PhaseOptions teacher_phase;
  teacher_phase.base_seed = derive_seed(cfg.seed, seed_streams::kTeacher);
  teacher_phase.epochs = cfg.teacher_epochs;

  SelfDistillResult result;
  result.teacher = run_training(teacher_cfg, teacher_phase, nullptr);

  result.student = train_student_phase(cfg, result.teacher.checkpoint.model);
  return result;
}

TrainResult train_student_phase(const TrainConfig& cfg, ModelParams& teacher) {
  cfg.validate();
  if (cfg.student_epochs < 1) throw ConfigError("student phase needs student_epochs >= 1");
  TrainConfig student_cfg = cfg;
  student_cfg.epochs = cfg.student_epochs;
  PhaseOptions student_phase;
  student_phase.base_seed = cfg.seed;
  student_phase.epochs = cfg.student_epochs;
  student_phase.learned_mask_weights = true;
  student_phase.teacher = &teacher;
  student_phase.lambda = cfg.lambda;
  student_phase.soft_targets = cfg.soft_targets;
  return run_training(student_cfg, student_phase, nullptr);
}

InferenceMasks infer_masks(ModelParams& model, const TrainConfig& cfg, const Sample& sample) {
  const FeatureStack stack = extract_features(sample.image, cfg.backend, cfg.layer_ids, sample.id);
  ad::Tape tape;
  ParamBinding pb(tape, /*needs_grad=*/false);
  const ModelVars vars = bind_model(pb, model);
  std::vector<ad::Var> feat;
  for (const MatF& f : stack.layers) feat.push_back(tape.constant(f.cast<double>()));

  std::vector<Mat> noise;
  const std::vector<Mat>* noise_ptr = nullptr;
  if (cfg.slot_init == SlotInitMode::gaussian) {
    // FNV-1a over the item id keeps per-image eval noise reproducible
    std::uint64_t id_hash = 0xcbf29ce484222325ull;
    for (const char c : sample.id) id_hash = (id_hash ^ std::uint64_t(std::uint8_t(c))) * 0x100000001b3ull;
    for (int layer = 0; layer < cfg.layers(); ++layer) {
      Rng rng(derive_seed(derive_seed(cfg.seed, 0xE7A1, std::uint64_t(layer)), id_hash));
      Mat eps(cfg.slots, cfg.d_slot);
      for (int i = 0; i < cfg.slots; ++i)
        for (int j = 0; j < cfg.d_slot; ++j) eps(i, j) = rng.gaussian();
      noise.push_back(std::move(eps));
    }
    noise_ptr = &noise;
  }
  const PipelineForward fwd = pipeline_forward(tape, vars, model, feat, 1, noise_ptr);
  return InferenceMasks{fwd.fused_mask.value(), fwd.decoder_mask.value(), stack.grid};
}

MetricsReport evaluate_model(ModelParams& model, const TrainConfig& cfg, const Dataset& dataset,
                             int eval_height, int eval_width) {
  std::vector<LoadedItem> items(size_t(dataset.size()));
  parallel_for(dataset.size(), [&](int i) { items[size_t(i)] = dataset.item(i); });
  return evaluate_split(model, cfg, items, eval_height, eval_width);
}

}  // namespace mufasa
