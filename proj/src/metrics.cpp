#include "mufasa/metrics.hpp"

#include "mufasa/fusion.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <vector>

namespace mufasa {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

SegmentationLabelMap label_map_from_attention(const Eigen::Ref<const Mat>& mask, GridShape grid,
                                              int eval_height, int eval_width) {
  if (mask.rows() != grid.patches())
    throw DimensionError("label_map_from_attention: mask rows must equal grid patches");
  if (eval_height <= 0 || eval_width <= 0)
    throw DimensionError("label_map_from_attention: bad evaluation resolution");
  const int k = int(mask.cols());
  const double sy = double(grid.rows) / eval_height;
  const double sx = double(grid.cols) / eval_width;

  SegmentationLabelMap out;
  out.labels.resize(eval_height, eval_width);
  for (int y = 0; y < eval_height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(grid.rows - 1));
    const int y0 = int(fy);
    const int y1 = std::min(y0 + 1, grid.rows - 1);
    const double wy = fy - y0;
    for (int x = 0; x < eval_width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(grid.cols - 1));
      const int x0 = int(fx);
      const int x1 = std::min(x0 + 1, grid.cols - 1);
      const double wx = fx - x0;
      int best = 0;
      double best_v = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double top = (1.0 - wx) * mask(y0 * grid.cols + x0, c) + wx * mask(y0 * grid.cols + x1, c);
        const double bot = (1.0 - wx) * mask(y1 * grid.cols + x0, c) + wx * mask(y1 * grid.cols + x1, c);
        const double v = (1.0 - wy) * top + wy * bot;
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.labels(y, x) = best;
    }
  }
  return out;
}

namespace {

struct Overlap {
  std::vector<std::int32_t> gt_ids, pred_ids;
  Mat iou;  // gt x pred
};

// IoU table over pixels where gt != ignore; gt background optionally dropped.
Overlap overlap_table(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
                      bool include_background, std::int32_t background_id) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw DimensionError("metric: resolution mismatch between prediction and ground truth");

  std::map<std::int32_t, int> gt_index, pred_index;
  std::vector<std::int64_t> gt_area, pred_area;
  std::map<std::pair<int, int>, std::int64_t> inter;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      const std::int32_t g = gt.labels(y, x);
      if (g == SegmentationLabelMap::kIgnore) continue;
      if (!include_background && g == background_id) continue;
      const std::int32_t p = pred.labels(y, x);
      auto [git, ginserted] = gt_index.try_emplace(g, int(gt_area.size()));
      if (ginserted) gt_area.push_back(0);
      auto [pit, pinserted] = pred_index.try_emplace(p, int(pred_area.size()));
      if (pinserted) pred_area.push_back(0);
      ++gt_area[size_t(git->second)];
      ++pred_area[size_t(pit->second)];
      ++inter[{git->second, pit->second}];
    }

  Overlap ov;
  ov.gt_ids.resize(gt_index.size());
  for (const auto& [id, idx] : gt_index) ov.gt_ids[size_t(idx)] = id;
  ov.pred_ids.resize(pred_index.size());
  for (const auto& [id, idx] : pred_index) ov.pred_ids[size_t(idx)] = id;
  ov.iou = Mat::Zero(Index(gt_area.size()), Index(pred_area.size()));
  for (const auto& [key, count] : inter) {
    const auto [gi, pi] = key;
    const double uni = double(gt_area[size_t(gi)]) + double(pred_area[size_t(pi)]) - double(count);
    ov.iou(gi, pi) = uni > 0.0 ? double(count) / uni : 0.0;
  }
  return ov;
}

}  // namespace

double miou_metric(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
                   const EvalOptions& opts) {
  const Overlap ov = overlap_table(pred, gt, opts.include_background, opts.background_id);
  const int num_gt = int(ov.gt_ids.size());
  if (num_gt == 0) throw UndefinedInputError("miou: ground truth has no non-empty segment");
  const int n = std::max<int>(num_gt, int(ov.pred_ids.size()));
  Mat padded = Mat::Zero(n, n);
  padded.topLeftCorner(ov.iou.rows(), ov.iou.cols()) = ov.iou;
  const std::vector<int> match = hungarian_match(padded);
  double total = 0.0;
  for (int i = 0; i < num_gt; ++i)
    if (match[size_t(i)] < int(ov.pred_ids.size())) total += padded(i, match[size_t(i)]);
  return total / double(num_gt);
}

double mbo_metric(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
                  LabelSemantics level, const EvalOptions& opts) {
  if (gt.semantics != level)
    throw UnsupportedError(level == LabelSemantics::class_id
                               ? "mbo: class-level metric requested without class annotations"
                               : "mbo: instance-level metric requested on class annotations");
  const Overlap ov = overlap_table(pred, gt, opts.include_background, opts.background_id);
  if (ov.gt_ids.empty()) throw UndefinedInputError("mbo: ground truth has no non-empty segment");
  double total = 0.0;
  for (Index i = 0; i < ov.iou.rows(); ++i)
    total += ov.iou.cols() > 0 ? ov.iou.row(i).maxCoeff() : 0.0;
  return total / double(ov.iou.rows());
}

double fg_ari(const SegmentationLabelMap& pred, const SegmentationLabelMap& gt,
              std::int32_t background_id) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw DimensionError("fg_ari: resolution mismatch");
  std::map<std::int32_t, int> gt_index, pred_index;
  std::map<std::pair<int, int>, std::int64_t> cells;
  std::vector<std::int64_t> gt_count, pred_count;
  std::int64_t total = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      const std::int32_t g = gt.labels(y, x);
      if (g == background_id || g == SegmentationLabelMap::kIgnore) continue;
      const std::int32_t p = pred.labels(y, x);
      auto [git, gnew] = gt_index.try_emplace(g, int(gt_count.size()));
      if (gnew) gt_count.push_back(0);
      auto [pit, pnew] = pred_index.try_emplace(p, int(pred_count.size()));
      if (pnew) pred_count.push_back(0);
      ++gt_count[size_t(git->second)];
      ++pred_count[size_t(pit->second)];
      ++cells[{git->second, pit->second}];
      ++total;
    }
  if (total == 0) throw UndefinedInputError("fg_ari: no foreground pixels");

  auto comb2 = [](std::int64_t v) { return double(v) * double(v - 1) / 2.0; };
  double sum_cells = 0.0;
  for (const auto& [key, c] : cells) sum_cells += comb2(c);
  double sum_gt = 0.0, sum_pred = 0.0;
  for (std::int64_t c : gt_count) sum_gt += comb2(c);
  for (std::int64_t c : pred_count) sum_pred += comb2(c);
  const double pairs = comb2(total);
  if (pairs == 0.0) return 1.0;  // a single foreground pixel
  const double expected = sum_gt * sum_pred / pairs;
  const double max_index = 0.5 * (sum_gt + sum_pred);
  const double denom = max_index - expected;
  if (denom == 0.0) return 1.0;  // both partitions single-cluster (or equivalent)
  return (sum_cells - expected) / denom;
}

std::string MetricsReport::to_text() const {
  std::string out;
  auto line = [&out](const std::string& key, double v) {
    out += key;
    out += " = ";
    out += format_double(v);
    out += "\n";
  };
  out += "samples = " + std::to_string(sample_count) + "\n";
  line("miou.sa", miou_sa);
  line("miou.decoder", miou_decoder);
  line("miou.max", miou_max());
  line("mbo_i.sa", mbo_i_sa);
  line("mbo_i.decoder", mbo_i_decoder);
  line("mbo_i.max", mbo_i_max());
  if (has_class_metrics) {
    line("mbo_c.sa", mbo_c_sa);
    line("mbo_c.decoder", mbo_c_decoder);
    line("mbo_c.max", mbo_c_max());
  }
  line("fg_ari.sa", fg_ari_sa);
  line("fg_ari.decoder", fg_ari_decoder);
  line("fg_ari.max", fg_ari_max());
  return out;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["samples"] = sample_count;
  auto metric = [](double sa, double dec) {
    nlohmann::ordered_json m;
    m["sa"] = sa;
    m["decoder"] = dec;
    m["max"] = std::max(sa, dec);
    return m;
  };
  j["miou"] = metric(miou_sa, miou_decoder);
  j["mbo_i"] = metric(mbo_i_sa, mbo_i_decoder);
  if (has_class_metrics) j["mbo_c"] = metric(mbo_c_sa, mbo_c_decoder);
  j["fg_ari"] = metric(fg_ari_sa, fg_ari_decoder);
  return j.dump(2) + "\n";
}

}  // namespace mufasa
