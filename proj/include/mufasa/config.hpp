#pragma once

#include "mufasa/data.hpp"
#include "mufasa/features.hpp"
#include "mufasa/model.hpp"
#include "mufasa/support.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace mufasa {

// INI-style configuration: [section] headers, `key = value` lines, `#`
// comments, UTF-8. Unknown keys are hard errors so typos cannot silently
// fall back to defaults.
struct IniFile {
  // section -> key -> value; duplicate keys are rejected at parse time
  std::map<std::string, std::map<std::string, std::string>> sections;
  static IniFile parse(const std::string& text);
};

class IniReader {
 public:
  explicit IniReader(IniFile file) : file_(std::move(file)) {}

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback);
  std::string require(const std::string& section, const std::string& key);
  std::int64_t get_int(const std::string& section, const std::string& key, std::int64_t fallback);
  double get_double(const std::string& section, const std::string& key, double fallback);
  bool get_bool(const std::string& section, const std::string& key, bool fallback);
  std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                std::vector<int> fallback);

  // Throws ConfigError listing every key never consumed by a getter.
  void finish() const;

 private:
  IniFile file_;
  std::set<std::pair<std::string, std::string>> consumed_;
};

struct TrainConfig {
  // [data]
  std::string dataset_dir;
  PreprocessConfig preprocess;
  int eval_height = 0, eval_width = 0;  // 0: preprocess target
  bool include_background = true;

  // [backend]
  FeatureBackendConfig backend;

  // [model]
  std::vector<int> layer_ids;
  int slots = 5;
  int d_slot = 256;
  int attn_dim = 0;
  int sa_mlp_hidden = 1024;
  int sa_iters = 3;
  SlotInitMode slot_init = SlotInitMode::gaussian;
  FusionStrategy fusion = FusionStrategy::m_fusion;
  int fusion_hidden = 768;
  MaskWeightMode mask_weights = MaskWeightMode::uniform;
  DecoderKind decoder = DecoderKind::transformer;
  int dec_layers = 4;
  int dec_heads = 6;
  int dec_width = 0;
  int dec_hidden = 2048;
  DecodeOrder dec_order = DecodeOrder::raster;

  // [train]
  int epochs = 1;
  int teacher_epochs = 0;
  int student_epochs = 0;
  int batch = 64;
  double lr_main = 4e-4;
  double lr_low = 4e-7;
  int warmup_steps = 200;
  double lambda = 0.01;
  bool soft_targets = false;
  std::uint64_t seed = 1;
  std::string out_dir;
  int checkpoint_every = 1;
  std::int64_t max_steps = 0;  // 0: run every epoch to completion

  // raw config file content, hashed for checkpoints and run manifests
  std::string source_text;

  void validate() const;
  int layers() const { return int(layer_ids.size()); }
  ModelConfig model_config(int d_emb, int patches) const;
  std::string config_hash() const { return git_blob_sha1(source_text); }
};

TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);

// Parses only the [gen] section of a dataset-generation config.
struct GenConfig {
  SceneSpec spec;
  int n_train = 2000;
  int n_eval = 200;
  std::string source_text;
};
GenConfig parse_gen_config(const std::string& text);
GenConfig load_gen_config(const std::string& path);

// Written alongside every CLI output directory.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const std::string& config_path, const std::string& config_text,
                        const std::string& started_at, const std::string& finished_at);

std::string iso8601_now();

}  // namespace mufasa
