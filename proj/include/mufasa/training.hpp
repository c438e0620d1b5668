#pragma once

#include "mufasa/config.hpp"
#include "mufasa/data.hpp"
#include "mufasa/features.hpp"
#include "mufasa/metrics.hpp"
#include "mufasa/model.hpp"

#include <optional>

namespace mufasa {

// Normalized squared error: (1/(N*d_emb)) * ||target - recon||_F^2. Inputs
// stacked over a batch yield the batch mean.
double reconstruction_loss(const Eigen::Ref<const Mat>& target, const Eigen::Ref<const Mat>& recon);

// Cross-entropy between aligned teacher/student masks, weighted by lambda.
// Student columns are matched to teacher columns by Hungarian on
// binarized-mask IoU; rows are normalized with a 1e-8 floor; targets are the
// teacher's per-row argmax (or the full normalized teacher rows when
// soft_targets). The teacher side receives no gradient.
double distillation_loss(const Eigen::Ref<const Mat>& teacher_mask,
                         const Eigen::Ref<const Mat>& student_fused_mask, double lambda,
                         bool soft_targets = false);

// Linear warmup to eta_main, then cosine annealing to eta_low.
double lr_at_step(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                  double eta_main, double eta_low);

inline constexpr double kRowNormEps = 1e-8;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip
};

// One Adam update with bias correction; t counts updates starting at 1.
// Moment buffers are allocated on first use.
void adam_step(Mat& param, const Eigen::Ref<const Mat>& grad, Mat& m, Mat& v, std::int64_t t,
               double lr, const AdamConfig& cfg = {});

// Deterministic seed streams used by the trainer. They are fixed so that a
// run is reproducible from (config, seed) alone and resumable without saved
// generator state; external baselines can replay the exact batch order.
namespace seed_streams {
inline constexpr std::uint64_t kParams = 0xA11CEull;
inline constexpr std::uint64_t kShuffle = 0x5FF1Eull;
inline constexpr std::uint64_t kNoise = 0x2015Eull;
inline constexpr std::uint64_t kAugment = 0xA06ull;
inline constexpr std::uint64_t kTeacher = 0x7EACull;
}  // namespace seed_streams

// --- shared forward graph ----------------------------------------------------

struct PipelineForward {
  std::vector<ad::Var> sa_slots;  // per layer, (B*K) x d_slot (unaligned)
  std::vector<ad::Var> sa_masks;  // per layer, (B*N) x K (unaligned)
  std::vector<std::vector<int>> alignments;  // per layer per image, flattened K ints
  ad::Var fused_slots;  // (B*K) x d_slot
  ad::Var fused_mask;   // (B*N) x K, rows sum to 2 for M >= 2
  ad::Var reconstruction;
  ad::Var decoder_mask;
  ad::Var loss_rec;  // 1x1
};

// Full per-step graph: per-layer slot attention, Hungarian alignment
// (permutations computed from mask values, applied as index ops), slot and
// mask fusion, decoding of the deepest layer's features, reconstruction
// loss. `features` holds one Var per selected layer, each (B*N) x d_emb;
// the last entry is both the decoder target and the loss target.
PipelineForward pipeline_forward(ad::Tape& t, const ModelVars& vars, ModelParams& params,
                                 const std::vector<ad::Var>& features, int batch,
                                 const std::vector<Mat>* noise_per_layer);

// --- checkpoints ---------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  std::int64_t step = 0;
  MetricsReport report;
};

struct Checkpoint {
  std::string config_text;
  std::string config_hash;
  std::string dataset_spec_hash;
  int d_emb = 0;
  int patches = 0;
  std::int64_t step = 0;
  int epoch = 0;
  std::int64_t adam_t = 0;
  ModelParams model;
  std::map<std::string, Mat> adam_m, adam_v;
  std::vector<std::string> metric_history;  // one text line per evaluation
};

// Single binary container: manifest (config text, step, metric history) plus
// named float64 tensor records (parameters, then Adam moments).
void save_checkpoint(const std::string& path, Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// --- training -----------------------------------------------------------------

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> step_losses;  // total loss per optimizer step
  std::vector<EpochMetrics> eval_history;
  std::string last_path, best_path;  // empty when out_dir is unset
};

// DINOSAUR-style single-phase training: reconstruction loss only, uniform
// mask weights. Deterministic given cfg.seed. `resume_from` continues a run
// bit-exactly from a saved checkpoint.
TrainResult train_single_phase(const TrainConfig& cfg, const Checkpoint* resume_from = nullptr);

// Two-phase self-distillation: phase 1 trains a teacher (single-phase) on
// its own seed stream; phase 2 trains a fresh student with
// L_rec + distillation against the frozen teacher's fused slot-attention
// masks, mask-weight logits trainable.
struct SelfDistillResult {
  TrainResult teacher;
  TrainResult student;
};
SelfDistillResult train_self_distilled(const TrainConfig& cfg);

// Phase 2 alone, against a caller-provided teacher. The teacher is only read
// (its masks become distillation targets); cfg.student_epochs and cfg.lambda
// apply. train_self_distilled is teacher-phase + this.
TrainResult train_student_phase(const TrainConfig& cfg, ModelParams& teacher);

// Forward pass + metrics over a dataset split; per-image work runs in
// parallel, means use compensated summation in index order.
MetricsReport evaluate_model(ModelParams& model, const TrainConfig& cfg, const Dataset& dataset,
                             int eval_height, int eval_width);

// One-image forward that returns the fused slot-attention mask and decoder
// mask (plain values), shared by evaluation and mask export.
struct InferenceMasks {
  Mat fused_mask;    // N x K
  Mat decoder_mask;  // N x K
  GridShape grid;
};
InferenceMasks infer_masks(ModelParams& model, const TrainConfig& cfg, const Sample& sample);

std::int64_t steps_per_epoch(int dataset_size, int batch);

}  // namespace mufasa
