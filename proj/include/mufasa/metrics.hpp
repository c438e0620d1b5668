#pragma once

#include "mufasa/support.hpp"

#include <cstdint>
#include <string>

namespace mufasa {

enum class LabelSemantics { instance, class_id };

// H x W integer id grid; -1 is the reserved ignore id.
struct SegmentationLabelMap {
  MatX<std::int32_t> labels;
  LabelSemantics semantics = LabelSemantics::instance;

  static constexpr std::int32_t kIgnore = -1;
  int height() const { return int(labels.rows()); }
  int width() const { return int(labels.cols()); }
};

struct EvalOptions {
  bool include_background = true;  // background participates in mIoU/mBO
  std::int32_t background_id = 0;
};

// Argmax segmentation: the N x K mask is laid out on the patch grid, each
// slot channel bilinearly upsampled to the evaluation resolution, then each
// pixel takes the slot with the highest value (lowest index on ties).
SegmentationLabelMap label_map_from_attention(const Eigen::Ref<const Mat>& mask, GridShape grid,
                                              int eval_height, int eval_width);

// Exclusive optimal matching between gt and predicted segments (IoU matrix
// padded to square, Hungarian maximize); mean over gt segments, unmatched gt
// segments contribute 0. Throws UndefinedInputError without a non-empty gt
// segment.
double miou_metric(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
                   const EvalOptions& opts = {});

// Mean best overlap: per gt mask the maximum IoU over predicted segments,
// with replacement. `level` must match the semantics carried by `gt`
// (UnsupportedError otherwise).
double mbo_metric(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
                  LabelSemantics level, const EvalOptions& opts = {});

// Adjusted Rand index over gt-foreground pixels; 1.0 when both restrictions
// are single-cluster. Throws UndefinedInputError with zero foreground.
double fg_ari(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
              std::int32_t background_id = 0);

// Dataset means for both mask sources; Table-style protocol reports the
// per-metric maximum across the two.
struct MetricsReport {
  int sample_count = 0;
  bool has_class_metrics = false;
  double miou_sa = 0, miou_decoder = 0;
  double mbo_i_sa = 0, mbo_i_decoder = 0;
  double mbo_c_sa = 0, mbo_c_decoder = 0;
  double fg_ari_sa = 0, fg_ari_decoder = 0;

  double miou_max() const { return std::max(miou_sa, miou_decoder); }
  double mbo_i_max() const { return std::max(mbo_i_sa, mbo_i_decoder); }
  double mbo_c_max() const { return std::max(mbo_c_sa, mbo_c_decoder); }
  double fg_ari_max() const { return std::max(fg_ari_sa, fg_ari_decoder); }

  std::string to_text() const;
  std::string to_json() const;
};

// Deterministic float formatting shared by reports (shortest round-trip).
std::string format_double(double v);

}  // namespace mufasa
