#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mufasa/training.hpp"
#include "oracles.hpp"

#include <filesystem>

namespace fs = std::filesystem;
using namespace mufasa;
using mufasa::testing::random_mat;
using mufasa::testing::random_normalized_mask;

namespace {

std::string temp_dir(const std::string& name) {
  const std::string dir = (fs::temp_directory_path() / name).string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string make_tiny_dataset(const std::string& name, std::uint64_t seed) {
  const std::string dir = temp_dir(name);
  SceneSpec spec;
  spec.size = 32;
  spec.min_objects = 1;
  spec.max_objects = 2;
  spec.min_size = 8;
  spec.max_size = 14;
  spec.seed = seed;
  generate_shapes_dataset(spec, 24, 6, dir);
  return dir;
}

std::string tiny_config_text(const std::string& dataset, int epochs, std::uint64_t seed,
                             const std::string& extra_train = "",
                             const std::string& layers = "1,2",
                             const std::string& radii = "0,1",
                             const std::string& fusion = "m_fusion") {
  std::string text;
  text += "[data]\ndataset = " + dataset + "\ntarget = 32\ncrop = full\nflip_prob = 0.0\n";
  text += "[backend]\nkind = handcrafted\npatch = 8\nd_emb = 16\nradii = " + radii + "\n";
  text += "[model]\nlayers = " + layers +
          "\nslots = 3\nd_slot = 16\nattn_dim = 16\nsa_mlp_hidden = 16\nsa_iters = 2\n"
          "slot_init = learned\nfusion = " + fusion +
          "\nfusion_hidden = 16\ndecoder = broadcast\ndec_layers = 3\ndec_hidden = 16\n";
  text += "[train]\nepochs = " + std::to_string(epochs) +
          "\nbatch = 8\nlr_main = 2e-3\nlr_low = 2e-5\nwarmup = 2\nseed = " +
          std::to_string(seed) + "\n" + extra_train;
  return text;
}

}  // namespace

TEST_CASE("reconstruction loss: exact and oracle values") {
  Rng rng(3);
  const Mat target = random_mat(8, 4, rng);
  CHECK(reconstruction_loss(target, target) == 0.0);
  const Mat offset = target.array() + 1.0;
  CHECK(reconstruction_loss(target, offset) == doctest::Approx(1.0).epsilon(1e-12));

  const Mat recon = random_mat(8, 4, rng);
  long double acc = 0.0L;
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 4; ++j) {
      const long double d = (long double)target(i, j) - (long double)recon(i, j);
      acc += d * d;
    }
  const double expect = double(acc / (8.0L * 4.0L));
  CHECK(std::abs(reconstruction_loss(target, recon) - expect) < 1e-12);

  CHECK_THROWS_AS(reconstruction_loss(target, Mat::Zero(4, 8)), DimensionError);
}

TEST_CASE("learning-rate schedule boundaries") {
  const double main_lr = 3e-4, low_lr = 3e-6;
  CHECK(lr_at_step(100, 1000, 100, main_lr, low_lr) == doctest::Approx(main_lr));
  CHECK(lr_at_step(1000, 1000, 100, main_lr, low_lr) == doctest::Approx(low_lr));
  CHECK(lr_at_step(100 + 450, 1000, 100, main_lr, low_lr) ==
        doctest::Approx((main_lr + low_lr) / 2));
  CHECK(lr_at_step(50, 1000, 100, main_lr, low_lr) == doctest::Approx(main_lr / 2));
  CHECK(lr_at_step(0, 1000, 0, main_lr, low_lr) == doctest::Approx(main_lr));
  CHECK_THROWS_AS(lr_at_step(5, 10, 10, main_lr, low_lr), ConfigError);
  CHECK_THROWS_AS(lr_at_step(11, 10, 2, main_lr, low_lr), RangeError);
}

TEST_CASE("distillation loss: perfect agreement, lambda scaling, oracle") {
  Rng rng(7);
  {
    // one-hot teacher equals one-hot student
    Mat teacher = Mat::Zero(6, 3);
    for (int i = 0; i < 6; ++i) teacher(i, i % 3) = 1.0;
    CHECK(distillation_loss(teacher, teacher, 1.0) <= 1e-7);
    CHECK(distillation_loss(teacher, teacher, 0.0) == 0.0);
  }
  {
    const Mat teacher = random_normalized_mask(8, 3, rng);
    const Mat student = 2.0 * random_normalized_mask(8, 3, rng);
    CHECK(distillation_loss(teacher, student, 0.0) == 0.0);

    // hand-rolled oracle: explicit per-patch log-prob sum in long double
    const double lambda = 0.37;
    auto norm = [](const Mat& m) {
      Mat out = m;
      for (Index r = 0; r < m.rows(); ++r) out.row(r) /= (m.row(r).sum() + 1e-8);
      return out;
    };
    const Mat tn = norm(teacher), sn = norm(student);
    const Mat cost =
        pairwise_miou_cost(binarize_mask(tn), binarize_mask(sn));
    const auto perm = mufasa::testing::exhaustive_assignment(cost);
    long double total = 0.0L;
    for (Index r = 0; r < 8; ++r) {
      Index t_argmax = 0;
      for (Index c = 1; c < 3; ++c)
        if (teacher(r, c) > teacher(r, t_argmax)) t_argmax = c;
      const long double aligned = (long double)student(r, perm[size_t(t_argmax)]);
      long double row_sum = 1e-8L;
      for (Index c = 0; c < 3; ++c) row_sum += (long double)student(r, perm[size_t(c)]);
      total += -std::log(aligned / row_sum);
    }
    const double expect = double((long double)lambda * total / 8.0L);
    CHECK(std::abs(distillation_loss(teacher, student, lambda) - expect) < 1e-10);
  }
}

TEST_CASE("parameter count grows by (M-1)|SA| + |Fusion|") {
  ModelConfig base;
  base.d_emb = 16;
  base.patches = 16;
  base.layers = 1;
  base.slots = 3;
  base.d_slot = 16;
  base.attn_dim = 16;
  base.sa_mlp_hidden = 16;
  base.slot_init = SlotInitMode::learned;
  base.fusion = FusionStrategy::avg_fusion;
  base.decoder = DecoderKind::broadcast;
  base.dec_layers = 3;
  base.dec_hidden = 16;

  ModelConfig multi = base;
  multi.layers = 3;
  multi.fusion = FusionStrategy::m_fusion;
  multi.fusion_hidden = 16;

  ModelParams single = make_model(base, 1);
  ModelParams fused = make_model(multi, 1);
  const std::int64_t expect = parameter_count(single) +
                              2 * sa_parameter_count(single.sa[0]) +
                              fusion_parameter_count(fused.fusion);
  CHECK(parameter_count(fused) == expect);
}

TEST_CASE("loss is invariant under one global permutation of all learned initial slots") {
  Rng rng(17);
  ModelConfig mc;
  mc.d_emb = 12;
  mc.patches = 16;
  mc.layers = 2;
  mc.slots = 4;
  mc.d_slot = 12;
  mc.attn_dim = 12;
  mc.sa_mlp_hidden = 12;
  mc.sa_iters = 2;
  mc.slot_init = SlotInitMode::learned;
  mc.fusion = FusionStrategy::avg_fusion;
  mc.decoder = DecoderKind::broadcast;
  mc.dec_layers = 3;
  mc.dec_hidden = 12;
  ModelParams model = make_model(mc, 5);

  std::vector<Mat> features = {random_mat(16, 12, rng), random_mat(16, 12, rng)};
  auto loss_of = [&](ModelParams& m) {
    ad::Tape t;
    ParamBinding pb(t, false);
    const ModelVars vars = bind_model(pb, m);
    std::vector<ad::Var> feat;
    for (const Mat& f : features) feat.push_back(t.constant(f));
    return pipeline_forward(t, vars, m, feat, 1, nullptr).loss_rec.value()(0, 0);
  };

  const double base_loss = loss_of(model);
  const std::vector<int> perm = {2, 0, 3, 1};
  ModelParams permuted = model;
  for (auto& sa : permuted.sa) {
    Mat rows(mc.slots, mc.d_slot);
    for (int i = 0; i < mc.slots; ++i) rows.row(i) = sa.init.learned.row(perm[size_t(i)]);
    sa.init.learned = rows;
  }
  CHECK(std::abs(loss_of(permuted) - base_loss) < 1e-9);
}

TEST_CASE("single-phase training descends on an overfit-scale problem") {
  const std::string dataset = make_tiny_dataset("mufasa_train_descent", 11);
  std::vector<double> first_losses, last_losses;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const TrainConfig cfg = parse_train_config(tiny_config_text(dataset, 2, seed));
    const TrainResult res = train_single_phase(cfg);
    REQUIRE(res.step_losses.size() == 6);  // 24 images / batch 8 * 2 epochs
    first_losses.push_back(res.step_losses.front());
    last_losses.push_back(res.step_losses.back());
  }
  std::sort(first_losses.begin(), first_losses.end());
  std::sort(last_losses.begin(), last_losses.end());
  CHECK(last_losses[1] < first_losses[1]);  // median over seeds
  fs::remove_all(dataset);
}

TEST_CASE("checkpoint round trip and bit-exact resume") {
  const std::string dataset = make_tiny_dataset("mufasa_train_resume", 13);
  const std::string out = temp_dir("mufasa_train_resume_out");

  const TrainConfig cfg =
      parse_train_config(tiny_config_text(dataset, 2, 5, "out = " + out + "\n"));
  const TrainResult full = train_single_phase(cfg);
  REQUIRE(full.step_losses.size() == 6);

  TrainConfig one_epoch = cfg;
  // same config text (hash compatibility); stop after the first epoch's steps
  one_epoch.max_steps = 3;
  const TrainResult half = train_single_phase(one_epoch);
  const std::string ckpt_path = out + "/resume.mufc";
  {
    Checkpoint ckpt = half.checkpoint;
    save_checkpoint(ckpt_path, ckpt);
  }
  const Checkpoint reloaded = load_checkpoint(ckpt_path);
  CHECK(reloaded.step == 3);
  CHECK(reloaded.config_hash == cfg.config_hash());

  // saved tensors reproduce bit-identical values
  ModelParams& a = const_cast<ModelParams&>(half.checkpoint.model);
  ModelParams& b = const_cast<Checkpoint&>(reloaded).model;
  std::vector<Mat*> mats_a, mats_b;
  for_each_param(a, [&](const std::string&, Mat& m) { mats_a.push_back(&m); });
  for_each_param(b, [&](const std::string&, Mat& m) { mats_b.push_back(&m); });
  REQUIRE(mats_a.size() == mats_b.size());
  for (size_t i = 0; i < mats_a.size(); ++i) CHECK(*mats_a[i] == *mats_b[i]);

  const TrainResult resumed = train_single_phase(cfg, &reloaded);
  REQUIRE(resumed.step_losses.size() == 3);
  // losses of steps 4..6 match the uninterrupted run bit for bit
  for (int i = 0; i < 3; ++i) {
    CHECK(resumed.step_losses[size_t(i)] == full.step_losses[size_t(3 + i)]);
  }

  // corrupting the magic is a format error
  std::string bytes = read_text_file(ckpt_path);
  bytes[0] = 'Z';
  write_text_file(ckpt_path, bytes);
  CHECK_THROWS_AS(load_checkpoint(ckpt_path), FormatError);

  fs::remove_all(dataset);
  fs::remove_all(out);
}

TEST_CASE("self-distillation: frozen teacher, lambda=0 equivalence, weight softmax") {
  const std::string dataset = make_tiny_dataset("mufasa_train_distill", 21);

  // lambda = 0: the student phase is loss-equivalent to single-phase training
  {
    const TrainConfig plain = parse_train_config(tiny_config_text(dataset, 2, 9));
    const TrainResult single = train_single_phase(plain);

    const TrainConfig distill_cfg = parse_train_config(tiny_config_text(
        dataset, 2, 9, "teacher_epochs = 1\nstudent_epochs = 2\nlambda = 0.0\n"));
    const SelfDistillResult distill = train_self_distilled(distill_cfg);
    REQUIRE(distill.student.step_losses.size() == single.step_losses.size());
    for (size_t i = 0; i < single.step_losses.size(); ++i)
      CHECK(std::abs(distill.student.step_losses[i] - single.step_losses[i]) < 1e-9);
  }

  // lambda > 0: teacher stays bitwise frozen, learned weights stay a softmax
  {
    const TrainConfig cfg = parse_train_config(tiny_config_text(
        dataset, 2, 31, "teacher_epochs = 1\nstudent_epochs = 1\nlambda = 0.05\n"));

    SelfDistillResult res = train_self_distilled(cfg);

    // drive the student phase against our own teacher copy: every tensor must
    // come back bit-identical
    ModelParams teacher = res.teacher.checkpoint.model;
    const ModelParams teacher_before = teacher;
    const TrainResult student2 = train_student_phase(cfg, teacher);
    CHECK(!student2.step_losses.empty());
    std::vector<Mat*> t1, t2;
    for_each_param(teacher, [&](const std::string&, Mat& m) { t1.push_back(&m); });
    for_each_param(const_cast<ModelParams&>(teacher_before),
                   [&](const std::string&, Mat& m) { t2.push_back(&m); });
    REQUIRE(t1.size() == t2.size());
    for (size_t i = 0; i < t1.size(); ++i) CHECK(*t1[i] == *t2[i]);

    // student mask weights remain a probability vector
    ModelParams& student = const_cast<ModelParams&>(res.student.checkpoint.model);
    CHECK(student.fusion.weight_mode == MaskWeightMode::learned);
    const Vec w = mask_weights(student.fusion, 2);
    CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((w.array() > 0.0).all());

    // distillation must actually move the student: losses differ from a
    // lambda=0 run
    const TrainConfig zero_cfg = parse_train_config(tiny_config_text(
        dataset, 2, 31, "teacher_epochs = 1\nstudent_epochs = 1\nlambda = 0.0\n"));
    const SelfDistillResult zero = train_self_distilled(zero_cfg);
    bool any_diff = false;
    for (size_t i = 0; i < zero.student.step_losses.size(); ++i)
      any_diff = any_diff ||
                 std::abs(zero.student.step_losses[i] - res.student.step_losses[i]) > 1e-12;
    CHECK(any_diff);
  }
  fs::remove_all(dataset);
}

TEST_CASE("training evaluation history and reports") {
  const std::string dataset = make_tiny_dataset("mufasa_train_eval", 41);
  const TrainConfig cfg = parse_train_config(tiny_config_text(dataset, 1, 3));
  const TrainResult res = train_single_phase(cfg);
  REQUIRE(res.eval_history.size() == 1);
  const MetricsReport& report = res.eval_history[0].report;
  CHECK(report.sample_count == 6);
  CHECK(report.has_class_metrics);
  CHECK(report.miou_max() >= 0.0);
  CHECK(report.miou_max() <= 1.0);
  CHECK(report.fg_ari_max() >= -0.5);
  CHECK(report.fg_ari_max() <= 1.0);
  CHECK(report.miou_max() <= report.mbo_i_max() + 1e-12);
  CHECK(res.checkpoint.metric_history.size() == 1);
  fs::remove_all(dataset);
}
