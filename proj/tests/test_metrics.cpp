#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mufasa/metrics.hpp"
#include "oracles.hpp"

using namespace mufasa;
using mufasa::testing::random_label_map;
using mufasa::testing::random_normalized_mask;

namespace {

SegmentationLabelMap map_of(std::initializer_list<std::initializer_list<int>> rows,
                            LabelSemantics semantics = LabelSemantics::instance) {
  SegmentationLabelMap m;
  m.semantics = semantics;
  const int h = int(rows.size());
  const int w = int(rows.begin()->size());
  m.labels.resize(h, w);
  int y = 0;
  for (const auto& row : rows) {
    int x = 0;
    for (int v : row) m.labels(y, x++) = v;
    ++y;
  }
  return m;
}

SegmentationLabelMap relabel(const SegmentationLabelMap& map, const std::map<int, int>& lut) {
  SegmentationLabelMap out = map;
  for (Index y = 0; y < out.labels.rows(); ++y)
    for (Index x = 0; x < out.labels.cols(); ++x) {
      const auto it = lut.find(out.labels(y, x));
      if (it != lut.end()) out.labels(y, x) = it->second;
    }
  return out;
}

}  // namespace

TEST_CASE("label map from attention: degenerate and identity-resolution cases") {
  Rng rng(3);
  {
    const SegmentationLabelMap m =
        label_map_from_attention(Mat::Ones(16, 1), GridShape{4, 4}, 8, 8);
    CHECK((m.labels.array() == 0).all());
  }
  {
    // constant mask per channel: tie-break picks slot 0 everywhere
    const SegmentationLabelMap m =
        label_map_from_attention(Mat::Constant(16, 3, 1.0 / 3), GridShape{4, 4}, 12, 12);
    CHECK((m.labels.array() == 0).all());
  }
  {
    // eval resolution equal to the grid: pure argmax, checked per row
    const Mat mask = random_normalized_mask(16, 4, rng);
    const SegmentationLabelMap m = label_map_from_attention(mask, GridShape{4, 4}, 4, 4);
    for (int patch = 0; patch < 16; ++patch) {
      Index best = 0;
      for (Index c = 1; c < 4; ++c)
        if (mask(patch, c) > mask(patch, best)) best = c;
      CHECK(m.labels(patch / 4, patch % 4) == int(best));
    }
  }
  CHECK_THROWS_AS(label_map_from_attention(Mat::Ones(10, 2), GridShape{3, 3}, 4, 4),
                  DimensionError);
}

TEST_CASE("miou: crafted values") {
  const auto gt = map_of({{0, 0, 1, 1}, {0, 0, 1, 1}});
  CHECK(miou_metric(gt, gt) == doctest::Approx(1.0));

  // one predicted segment covering everything vs two equal halves:
  // matched half scores 0.5, the other 0 -> mean 0.25
  const auto pred = map_of({{7, 7, 7, 7}, {7, 7, 7, 7}});
  CHECK(miou_metric(pred, gt) == doctest::Approx(0.25));

  SegmentationLabelMap ignore_only = gt;
  ignore_only.labels.setConstant(SegmentationLabelMap::kIgnore);
  CHECK_THROWS_AS(miou_metric(pred, ignore_only), UndefinedInputError);
}

TEST_CASE("miou and mbo match brute-force oracles on random maps") {
  Rng rng(11);
  for (int trial = 0; trial < 120; ++trial) {
    const auto gt = random_label_map(8, 8, 4, rng);
    const auto pred = random_label_map(8, 8, 4, rng);
    const EvalOptions opts{true, 0};
    const double miou = miou_metric(pred, gt, opts);
    const double miou_brute = mufasa::testing::brute_miou(pred, gt, true, 0);
    CHECK(miou == doctest::Approx(miou_brute).epsilon(1e-9));

    const double mbo = mbo_metric(pred, gt, LabelSemantics::instance, opts);
    const double mbo_brute = mufasa::testing::brute_mbo(pred, gt, true, 0);
    CHECK(mbo == doctest::Approx(mbo_brute).epsilon(1e-9));

    // exclusive matching can never beat the per-gt maximum
    CHECK(miou <= mbo + 1e-12);
  }
}

TEST_CASE("mbo: identity, relaxation ordering, class-level guard") {
  const auto gt = map_of({{0, 1, 1}, {0, 2, 2}});
  CHECK(mbo_metric(gt, gt, LabelSemantics::instance) == doctest::Approx(1.0));

  SegmentationLabelMap class_gt = gt;
  class_gt.semantics = LabelSemantics::class_id;
  CHECK_THROWS_AS(mbo_metric(gt, gt, LabelSemantics::class_id), UnsupportedError);
  CHECK_NOTHROW(mbo_metric(gt, class_gt, LabelSemantics::class_id));
}

TEST_CASE("fg_ari: identity, relabeling, oracle, errors") {
  Rng rng(17);
  const auto gt = map_of({{0, 1, 1, 0}, {2, 2, 1, 0}, {2, 2, 0, 3}});
  CHECK(fg_ari(gt, gt, 0) == doctest::Approx(1.0));

  const auto renamed = relabel(gt, {{1, 9}, {2, 4}, {3, 1}});
  CHECK(fg_ari(renamed, gt, 0) == doctest::Approx(1.0));

  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_label_map(6, 6, 4, rng);
    const auto b = random_label_map(6, 6, 4, rng);
    bool has_fg = false;
    for (Index y = 0; y < 6; ++y)
      for (Index x = 0; x < 6; ++x) has_fg = has_fg || b.labels(y, x) != 0;
    if (!has_fg) continue;
    const double fast = fg_ari(a, b, 0);
    const double brute = mufasa::testing::pair_counting_fg_ari(a, b, 0);
    CHECK(fast == doctest::Approx(brute).epsilon(1e-9));
  }

  SegmentationLabelMap all_bg = gt;
  all_bg.labels.setZero();
  CHECK_THROWS_AS(fg_ari(gt, all_bg, 0), UndefinedInputError);

  // both partitions single-cluster over the foreground
  const auto single = map_of({{0, 5, 5}, {0, 5, 5}});
  const auto pred_single = map_of({{3, 8, 8}, {3, 8, 8}});
  CHECK(fg_ari(pred_single, single, 0) == doctest::Approx(1.0));
}

TEST_CASE("fg_ari concentrates near zero for independent random labelings") {
  Rng rng(23);
  KahanSum sum;
  int count = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    SegmentationLabelMap gt, pred;
    gt.labels.resize(32, 32);
    pred.labels.resize(32, 32);
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) {
        gt.labels(y, x) = rng.uniform_int(0, 3) + 1;  // foreground everywhere
        pred.labels(y, x) = rng.uniform_int(0, 3);
      }
    sum.add(fg_ari(pred, gt, 0));
    ++count;
  }
  CHECK(std::abs(sum.value() / count) < 0.05);
}

TEST_CASE("all metrics are invariant to relabeling the prediction") {
  Rng rng(29);
  for (int trial = 0; trial < 30; ++trial) {
    const auto gt = random_label_map(10, 10, 4, rng);
    const auto pred = random_label_map(10, 10, 4, rng);
    const auto renamed = relabel(pred, {{0, 17}, {1, 3}, {2, 11}, {3, 5}});
    const EvalOptions opts{true, 0};
    CHECK(miou_metric(pred, gt, opts) == doctest::Approx(miou_metric(renamed, gt, opts)));
    CHECK(mbo_metric(pred, gt, LabelSemantics::instance, opts) ==
          doctest::Approx(mbo_metric(renamed, gt, LabelSemantics::instance, opts)));
    bool has_fg = false;
    for (Index y = 0; y < 10; ++y)
      for (Index x = 0; x < 10; ++x) has_fg = has_fg || gt.labels(y, x) != 0;
    if (has_fg) CHECK(fg_ari(pred, gt, 0) == doctest::Approx(fg_ari(renamed, gt, 0)));
  }
}

TEST_CASE("include_background flag drops the background segment") {
  const auto gt = map_of({{0, 0, 1, 1}, {0, 0, 1, 1}});
  const auto pred = map_of({{5, 5, 5, 5}, {5, 5, 5, 5}});
  const EvalOptions with_bg{true, 0};
  const EvalOptions without_bg{false, 0};
  CHECK(miou_metric(pred, gt, with_bg) == doctest::Approx(0.25));
  // only the object segment counts; the single prediction covers half of it
  CHECK(miou_metric(pred, gt, without_bg) == doctest::Approx(1.0));
}

TEST_CASE("report serialization carries per-variant values and maxima") {
  MetricsReport r;
  r.sample_count = 3;
  r.has_class_metrics = true;
  r.miou_sa = 0.5;
  r.miou_decoder = 0.625;
  r.mbo_i_sa = 0.75;
  r.mbo_i_decoder = 0.5;
  r.mbo_c_sa = 0.25;
  r.mbo_c_decoder = 0.375;
  r.fg_ari_sa = 0.125;
  r.fg_ari_decoder = 0.0625;
  const std::string text = r.to_text();
  CHECK(text.find("miou.max = 0.625") != std::string::npos);
  CHECK(text.find("mbo_i.max = 0.75") != std::string::npos);
  CHECK(text.find("mbo_c.sa = 0.25") != std::string::npos);
  CHECK(text.find("fg_ari.max = 0.125") != std::string::npos);
  const std::string json = r.to_json();
  CHECK(json.find("\"max\": 0.75") != std::string::npos);
}
