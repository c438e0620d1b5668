#include "mufasa/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace mufasa {

const std::vector<std::array<std::uint8_t, 3>>& default_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> palette = {
      {220, 50, 47},  {60, 180, 75},  {0, 114, 178},  {240, 228, 66},
      {204, 121, 167}, {86, 180, 233}, {230, 159, 0},  {145, 30, 180},
  };
  return palette;
}

std::string SceneSpec::to_text() const {
  std::ostringstream ss;
  ss << "size=" << size << "\nobjects=" << min_objects << ".." << max_objects
     << "\nobject_size=" << min_size << ".." << max_size << "\nmargin=" << margin
     << "\nbackground=" << int(background[0]) << "," << int(background[1]) << ","
     << int(background[2]) << "\npalette=";
  const auto& pal = palette.empty() ? default_palette() : palette;
  for (size_t i = 0; i < pal.size(); ++i) {
    if (i) ss << ";";
    ss << int(pal[i][0]) << "," << int(pal[i][1]) << "," << int(pal[i][2]);
  }
  ss << "\nseed=" << seed << "\n";
  return ss.str();
}

void SceneSpec::validate(int patch_size) const {
  if (size <= 0) throw ConfigError("scene: size must be positive");
  if (patch_size > 0 && size % patch_size != 0)
    throw ConfigError("scene: size must be divisible by the backend patch size");
  if (min_objects < 0 || max_objects < min_objects)
    throw ConfigError("scene: object count range is empty");
  if (min_size <= 0 || max_size < min_size) throw ConfigError("scene: object size range is empty");
  if ((palette.empty() ? default_palette() : palette).size() < size_t(max_objects))
    throw ConfigError("scene: palette smaller than the maximum object count");
}

namespace {

struct PlacedShape {
  ShapeClass shape;
  double cx, cy, half;
};

bool shape_covers(const PlacedShape& s, int x, int y) {
  const double dx = x + 0.5 - s.cx;
  const double dy = y + 0.5 - s.cy;
  switch (s.shape) {
    case ShapeClass::circle:
      return dx * dx + dy * dy <= s.half * s.half;
    case ShapeClass::square:
      return std::abs(dx) <= s.half && std::abs(dy) <= s.half;
    case ShapeClass::triangle: {
      if (dy < -s.half || dy > s.half) return false;
      const double t = (dy + s.half) / (2.0 * s.half);
      return std::abs(dx) <= t * s.half;
    }
  }
  return false;
}

struct Scene {
  ImageU8 image;
  LabelImage instances;
  std::vector<int> class_ids;
};

Scene render_scene(const SceneSpec& spec, std::uint64_t scene_seed) {
  Rng rng(scene_seed);
  const auto& pal = spec.palette.empty() ? default_palette() : spec.palette;

  Scene scene;
  scene.image = ImageU8{spec.size, spec.size, 3, {}};
  scene.image.pixels.resize(size_t(spec.size) * spec.size * 3);
  for (int y = 0; y < spec.size; ++y)
    for (int x = 0; x < spec.size; ++x)
      for (int c = 0; c < 3; ++c) scene.image.at(x, y, c) = spec.background[size_t(c)];
  scene.instances = LabelImage{spec.size, spec.size, {}};
  scene.instances.ids.assign(size_t(spec.size) * spec.size, 0);

  const int wanted = rng.uniform_int(spec.min_objects, spec.max_objects);
  std::vector<int> color_order(pal.size());
  for (size_t i = 0; i < pal.size(); ++i) color_order[i] = int(i);
  rng.shuffle(color_order);

  int placed = 0;
  for (int obj = 0; obj < wanted; ++obj) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      PlacedShape s;
      s.shape = ShapeClass(rng.uniform_int(1, 3));
      const double sz = rng.uniform(spec.min_size, spec.max_size);
      s.half = sz / 2.0;
      s.cx = rng.uniform(s.half + 1.0, spec.size - s.half - 1.0);
      s.cy = rng.uniform(s.half + 1.0, spec.size - s.half - 1.0);

      // exact pixel test with `margin` clearance against existing objects
      const int x0 = std::max(0, int(s.cx - s.half - 1));
      const int x1 = std::min(spec.size - 1, int(s.cx + s.half + 1));
      const int y0 = std::max(0, int(s.cy - s.half - 1));
      const int y1 = std::min(spec.size - 1, int(s.cy + s.half + 1));
      bool clear = true;
      int covered = 0;
      for (int y = y0; y <= y1 && clear; ++y)
        for (int x = x0; x <= x1 && clear; ++x) {
          if (!shape_covers(s, x, y)) continue;
          ++covered;
          for (int dy = -spec.margin; dy <= spec.margin && clear; ++dy)
            for (int dx = -spec.margin; dx <= spec.margin && clear; ++dx) {
              const int nx = x + dx, ny = y + dy;
              if (nx < 0 || ny < 0 || nx >= spec.size || ny >= spec.size) continue;
              if (scene.instances.at(nx, ny) != 0) clear = false;
            }
        }
      if (!clear || covered == 0) continue;

      const int id = placed + 1;
      const auto& color = pal[size_t(color_order[size_t(placed)])];
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (shape_covers(s, x, y)) {
            scene.instances.at(x, y) = id;
            for (int c = 0; c < 3; ++c) scene.image.at(x, y, c) = color[size_t(c)];
          }
      scene.class_ids.push_back(int(s.shape));
      ++placed;
      ok = true;
    }
    if (!ok) break;  // placement failed: the scene keeps fewer objects
  }
  return scene;
}

void write_split(const SceneSpec& spec, const std::string& out_dir, const std::string& split,
                 int count, int index_offset, const std::string& spec_hash) {
  std::ostringstream manifest;
  manifest << "# mufasa-dataset v1 spec=" << spec_hash << " split=" << split << "\n";
  std::vector<Scene> scenes;
  scenes.resize(size_t(count));
  parallel_for(count, [&](int i) {
    scenes[size_t(i)] = render_scene(spec, derive_seed(spec.seed, 0xDA7A, std::uint64_t(index_offset + i)));
  });
  for (int i = 0; i < count; ++i) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "%s%05d", split == "train" ? "t" : "e", i);
    const std::string id = idbuf;
    const std::string image_rel = "images/" + id + ".png";
    const std::string mask_rel = "masks/" + id + ".png";
    const Scene& scene = scenes[size_t(i)];
    write_png_rgb8(out_dir + "/" + image_rel, scene.image);
    std::vector<std::uint16_t> mask16(scene.instances.ids.size());
    for (size_t p = 0; p < mask16.size(); ++p)
      mask16[p] = std::uint16_t(scene.instances.ids[p]);
    write_png_gray16(out_dir + "/" + mask_rel, mask16, spec.size, spec.size);
    manifest << id << ", " << image_rel << ", " << mask_rel << ", class_ids=";
    for (size_t c = 0; c < scene.class_ids.size(); ++c) {
      if (c) manifest << ",";
      manifest << scene.class_ids[c];
    }
    manifest << "\n";
  }
  write_text_file(out_dir + "/manifest_" + split + ".txt", manifest.str());
}

}  // namespace

void generate_shapes_dataset(const SceneSpec& spec, int n_train, int n_eval,
                             const std::string& out_dir) {
  spec.validate();
  if (n_train < 0 || n_eval < 0) throw ConfigError("dataset sizes must be non-negative");
  std::error_code ec;
  fs::create_directories(out_dir + "/images", ec);
  fs::create_directories(out_dir + "/masks", ec);
  if (!fs::exists(out_dir + "/images")) throw IoError("cannot create dataset directory: " + out_dir);
  const std::string spec_hash = git_blob_sha1(spec.to_text());
  write_split(spec, out_dir, "train", n_train, 0, spec_hash);
  write_split(spec, out_dir, "eval", n_eval, n_train, spec_hash);
  write_text_file(out_dir + "/spec.txt", spec.to_text());
}

DatasetManifest load_manifest(const std::string& path) {
  const std::string text = read_text_file(path);
  DatasetManifest manifest;
  manifest.directory = fs::path(path).parent_path().string();
  if (manifest.directory.empty()) manifest.directory = ".";
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      const auto pos = line.find("spec=");
      if (line.rfind("# mufasa-dataset", 0) != 0 || pos == std::string::npos)
        throw FormatError("manifest header missing or malformed: " + path);
      manifest.spec_hash = line.substr(pos + 5, 40);
      continue;
    }
    DatasetItem item;
    std::istringstream ls(line);
    std::string field;
    auto next_field = [&](const char* what) {
      if (!std::getline(ls, field, ',')) throw FormatError(std::string("manifest record missing ") + what);
      const auto b = field.find_first_not_of(' ');
      const auto e = field.find_last_not_of(' ');
      return field.substr(b, e - b + 1);
    };
    item.id = next_field("id");
    item.image_path = next_field("image path");
    item.instance_path = next_field("instance path");
    std::string rest;
    std::getline(ls, rest);
    const auto pos = rest.find("class_ids=");
    if (pos == std::string::npos) throw FormatError("manifest record missing class_ids");
    std::string ids = rest.substr(pos + 10);
    std::istringstream is(ids);
    std::string tok;
    while (std::getline(is, tok, ','))
      if (!tok.empty()) item.class_ids.push_back(std::stoi(tok));
    manifest.items.push_back(std::move(item));
  }
  return manifest;
}

Dataset Dataset::open(const std::string& dir, const std::string& split) {
  Dataset ds;
  ds.manifest_ = load_manifest(dir + "/manifest_" + split + ".txt");
  return ds;
}

LoadedItem Dataset::item(int index) const {
  if (index < 0 || index >= size()) throw RangeError("dataset index out of range");
  const DatasetItem& rec = manifest_.items[size_t(index)];
  LoadedItem out;
  out.id = rec.id;
  const std::string image_path = manifest_.directory + "/" + rec.image_path;
  const std::string mask_path = manifest_.directory + "/" + rec.instance_path;
  if (!fs::exists(image_path)) throw IoError("missing image file: " + image_path);
  if (!fs::exists(mask_path)) throw IoError("missing instance map file: " + mask_path);
  out.image = read_png_rgb8(image_path);
  int w = 0, h = 0;
  const std::vector<std::uint16_t> mask = read_png_gray16(mask_path, w, h);
  out.instances = LabelImage{w, h, {}};
  out.instances.ids.resize(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) out.instances.ids[i] = std::int32_t(mask[i]);

  out.class_ids = rec.class_ids;
  out.has_classes = !rec.class_ids.empty();
  out.classes = LabelImage{w, h, {}};
  out.classes.ids.assign(mask.size(), 0);
  if (out.has_classes) {
    for (size_t i = 0; i < mask.size(); ++i) {
      const int inst = out.instances.ids[i];
      if (inst > 0) {
        if (inst > int(rec.class_ids.size()))
          throw CorruptionError("instance id exceeds class list in " + rec.id);
        out.classes.ids[i] = rec.class_ids[size_t(inst - 1)];
      }
    }
  }
  return out;
}

bool Dataset::has_class_maps() const {
  for (const auto& item : manifest_.items)
    if (item.class_ids.empty()) return false;
  return !manifest_.items.empty();
}

Sample preprocess(const LoadedItem& item, PreprocessMode mode, const PreprocessConfig& cfg,
                  Rng& rng) {
  Sample s;
  s.id = item.id;
  s.has_classes = item.has_classes;
  ImageD img = to_image_d(item.image);
  LabelImage inst = item.instances;
  LabelImage cls = item.classes;

  const int minor = std::min(img.width, img.height);
  if (minor != cfg.target) {
    const double scale = double(cfg.target) / minor;
    const int nw = std::max(cfg.target, int(std::lround(img.width * scale)));
    const int nh = std::max(cfg.target, int(std::lround(img.height * scale)));
    img = resize_bilinear(img, nw, nh);
    inst = resize_nearest(inst, nw, nh);
    cls = resize_nearest(cls, nw, nh);
  }

  if (cfg.crop != CropStrategy::full) {
    if (img.width < cfg.target || img.height < cfg.target)
      throw ConfigError("crop target larger than resized image");
    int x0 = (img.width - cfg.target) / 2;
    int y0 = (img.height - cfg.target) / 2;
    if (mode == PreprocessMode::train && cfg.crop == CropStrategy::random) {
      x0 = img.width == cfg.target ? 0 : rng.uniform_int(0, img.width - cfg.target);
      y0 = img.height == cfg.target ? 0 : rng.uniform_int(0, img.height - cfg.target);
    }
    img = crop(img, x0, y0, cfg.target, cfg.target);
    inst = crop(inst, x0, y0, cfg.target, cfg.target);
    cls = crop(cls, x0, y0, cfg.target, cfg.target);
  }

  if (mode == PreprocessMode::train && cfg.flip_prob > 0.0 && rng.uniform() < cfg.flip_prob) {
    img = hflip(img);
    inst = hflip(inst);
    cls = hflip(cls);
  }

  s.image = std::move(img);
  s.instances = std::move(inst);
  s.classes = std::move(cls);
  return s;
}

}  // namespace mufasa
