#pragma once

#include "mufasa/image.hpp"
#include "mufasa/support.hpp"

#include <array>
#include <string>
#include <vector>

namespace mufasa {

// Shape class ids double as the class-level ground truth (circle 1, square 2,
// triangle 3; background 0).
enum class ShapeClass : int { circle = 1, square = 2, triangle = 3 };

struct SceneSpec {
  int size = 64;
  int min_objects = 2;
  int max_objects = 4;
  double min_size = 20.0;  // object extent in pixels
  double max_size = 30.0;
  int margin = 3;  // minimum separation under the disjoint policy
  std::array<std::uint8_t, 3> background{40, 40, 45};
  std::vector<std::array<std::uint8_t, 3>> palette;  // empty: default 8 colors
  std::uint64_t seed = 0;

  // Canonical serialization; its git blob hash keys dataset/checkpoint
  // compatibility checks.
  std::string to_text() const;
  void validate(int patch_size = 0) const;
};

const std::vector<std::array<std::uint8_t, 3>>& default_palette();

struct DatasetItem {
  std::string id;
  std::string image_path;     // relative to the manifest directory
  std::string instance_path;  // 16-bit grayscale instance-id PNG, 0 = background
  std::vector<int> class_ids;  // class of instance i at index i-1
};

struct DatasetManifest {
  std::string directory;
  std::string spec_hash;
  std::vector<DatasetItem> items;
};

// Renders `n_train` + `n_eval` scenes under out_dir (images/, masks/, plus
// manifest_train.txt / manifest_eval.txt). Deterministic under spec.seed;
// when rejection sampling cannot place an object after 1000 draws the scene
// keeps the objects placed so far.
void generate_shapes_dataset(const SceneSpec& spec, int n_train, int n_eval,
                             const std::string& out_dir);

DatasetManifest load_manifest(const std::string& path);

struct LoadedItem {
  std::string id;
  ImageU8 image;
  LabelImage instances;       // 0 background, 1..n objects
  LabelImage classes;         // shape class per pixel, 0 background
  std::vector<int> class_ids;  // class of instance i at index i-1
  bool has_classes = false;
};

class Dataset {
 public:
  // `split` is "train" or "eval".
  static Dataset open(const std::string& dir, const std::string& split);

  int size() const { return int(manifest_.items.size()); }
  // Loads one item from disk; throws IoError naming the missing file.
  LoadedItem item(int index) const;
  const DatasetManifest& manifest() const { return manifest_; }
  bool has_class_maps() const;

 private:
  DatasetManifest manifest_;
};

enum class PreprocessMode { train, eval };
enum class CropStrategy { random, center, full };

struct PreprocessConfig {
  int target = 64;
  CropStrategy crop = CropStrategy::full;
  double flip_prob = 0.5;
};

struct Sample {
  std::string id;
  ImageD image;
  LabelImage instances;
  LabelImage classes;
  bool has_classes = false;
};

// Resize minor axis to target (bilinear; labels nearest), crop per strategy
// (random at train, center at eval, "full" skips cropping), horizontal flip
// with flip_prob at train. Ground-truth maps receive identical transforms.
Sample preprocess(const LoadedItem& item, PreprocessMode mode, const PreprocessConfig& cfg,
                  Rng& rng);

}  // namespace mufasa
