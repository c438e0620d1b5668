#pragma once

#include "mufasa/image.hpp"
#include "mufasa/support.hpp"

#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mufasa {

// Per-layer patch features for one image. Layers are float32 (matching the
// on-disk format); the training pipeline promotes to double on entry.
struct FeatureStack {
  std::vector<MatF> layers;    // each N x d_emb
  std::vector<int> layer_ids;  // strictly increasing, 1-based
  GridShape grid;              // grid.patches() == N
  int d_emb = 0;

  int num_layers() const { return int(layers.size()); }
  int patches() const { return grid.patches(); }

  // Throws DimensionError/RangeError/NumericError when an invariant fails.
  void validate() const;
};

// A frozen, randomly initialized transformer encoder. Stands in for a large
// pre-trained backbone at desk scale: layer outputs play the role of the
// intermediate feature maps. Parameters are derived from `seed` and never
// trained.
struct TinyVitConfig {
  int depth = 4;
  int heads = 4;
  int patch = 8;
  int d_emb = 64;
  std::uint64_t seed = 0;
};

// Deterministic analytic backend: per-patch mean color scaled by a fixed
// gain, concatenated with a 2-D sinusoidal position code, box-smoothed over
// the patch grid with a per-pseudo-layer radius. Increasing radii give the
// complementary granularities the multi-layer pipeline consumes.
struct HandcraftedConfig {
  int patch = 8;
  int d_emb = 32;
  std::vector<int> radii;  // one per pseudo-layer, typically increasing
};

// Reads per-image feature files previously produced by `dump-features` (or
// an external exporter honoring the same format). `directory/<key>.mufe`.
struct FileBackendConfig {
  std::string directory;
};

// Exactly one backend is populated by construction.
struct FeatureBackendConfig {
  std::variant<TinyVitConfig, HandcraftedConfig, FileBackendConfig> backend;

  int patch_size() const;
  bool is_file() const { return std::holds_alternative<FileBackendConfig>(backend); }
};

double handcrafted_color_gain();

// Computes the feature stack for one image. For the file backend `key`
// selects the per-image file; computational backends ignore it.
// Throws ConfigError when the resolution is not divisible by the patch size,
// RangeError when a layer id exceeds the backend depth.
FeatureStack extract_features(const ImageD& image, const FeatureBackendConfig& backend,
                              const std::vector<int>& layer_ids, const std::string& key = {});

std::vector<FeatureStack> extract_features(const std::vector<ImageD>& images,
                                           const FeatureBackendConfig& backend,
                                           const std::vector<int>& layer_ids);

// Binary feature file, little-endian, no padding:
//   magic "MUFE" | version u32=1 | M u32 | N u32 | d_emb u32 | H u16 | W u16
//   then M records: layer_id u32, N*d_emb float32 row-major.
void write_feature_file(const std::string& path, const FeatureStack& stack);
FeatureStack load_feature_file(const std::string& path);

struct PcaResult {
  Vec mean;        // d
  Mat components;  // d x k, orthonormal columns
  Mat projected;   // N x k, centered projections
};

// Top-k principal components via eigendecomposition of the feature
// covariance. Throws DimensionError when N < k.
PcaResult pca_components(const Eigen::Ref<const Mat>& features, int k);

// N x 3 map of the top-3 projections, min-max scaled to [0,1] per channel;
// a zero-variance channel renders as 0.5.
Mat pca_project(const Eigen::Ref<const Mat>& features, int k = 3);

}  // namespace mufasa
