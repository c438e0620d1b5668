#include "mufasa/config.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <sstream>

namespace mufasa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniFile IniFile::parse(const std::string& text) {
  IniFile file;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) +
                                                ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      file.sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    auto& sec = file.sections[section];
    if (sec.count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    sec[key] = value;
  }
  return file;
}

bool IniReader::has(const std::string& section, const std::string& key) const {
  const auto sec = file_.sections.find(section);
  return sec != file_.sections.end() && sec->second.count(key) > 0;
}

std::string IniReader::get(const std::string& section, const std::string& key,
                           const std::string& fallback) {
  consumed_.insert({section, key});
  const auto sec = file_.sections.find(section);
  if (sec == file_.sections.end()) return fallback;
  const auto it = sec->second.find(key);
  return it == sec->second.end() ? fallback : it->second;
}

std::string IniReader::require(const std::string& section, const std::string& key) {
  if (!has(section, key))
    throw ConfigError("config: missing required key [" + section + "] " + key);
  return get(section, key, "");
}

std::int64_t IniReader::get_int(const std::string& section, const std::string& key,
                                std::int64_t fallback) {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  try {
    size_t pos = 0;
    const std::int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: [" + section + "] " + key + " is not an integer: '" + v + "'");
  }
}

double IniReader::get_double(const std::string& section, const std::string& key, double fallback) {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: [" + section + "] " + key + " is not a number: '" + v + "'");
  }
}

bool IniReader::get_bool(const std::string& section, const std::string& key, bool fallback) {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: [" + section + "] " + key + " is not a boolean: '" + v + "'");
}

std::vector<int> IniReader::get_int_list(const std::string& section, const std::string& key,
                                         std::vector<int> fallback) {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  std::vector<int> out;
  std::istringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("config: [" + section + "] " + key + " has a non-integer entry: '" + tok +
                        "'");
    }
  }
  return out;
}

void IniReader::finish() const {
  std::string unknown;
  for (const auto& [section, keys] : file_.sections)
    for (const auto& [key, value] : keys)
      if (!consumed_.count({section, key}))
        unknown += (unknown.empty() ? "" : ", ") + ("[" + section + "] " + key);
  if (!unknown.empty()) throw ConfigError("config: unknown keys: " + unknown);
}

namespace {

SlotInitMode parse_slot_init(const std::string& v) {
  if (v == "gaussian") return SlotInitMode::gaussian;
  if (v == "learned") return SlotInitMode::learned;
  throw ConfigError("config: slot_init must be gaussian|learned, got '" + v + "'");
}

FusionStrategy parse_fusion(const std::string& v) {
  if (v == "m_fusion") return FusionStrategy::m_fusion;
  if (v == "avg_fusion") return FusionStrategy::avg_fusion;
  if (v == "concat_fusion") return FusionStrategy::concat_fusion;
  if (v == "t_fusion") return FusionStrategy::t_fusion;
  throw ConfigError("config: fusion must be m_fusion|avg_fusion|concat_fusion|t_fusion");
}

MaskWeightMode parse_weight_mode(const std::string& v) {
  if (v == "uniform") return MaskWeightMode::uniform;
  if (v == "learned") return MaskWeightMode::learned;
  throw ConfigError("config: mask_weights must be uniform|learned");
}

DecoderKind parse_decoder(const std::string& v) {
  if (v == "transformer") return DecoderKind::transformer;
  if (v == "broadcast") return DecoderKind::broadcast;
  throw ConfigError("config: decoder must be transformer|broadcast");
}

DecodeOrder parse_order(const std::string& v) {
  if (v == "raster") return DecodeOrder::raster;
  if (v == "reverse") return DecodeOrder::reverse;
  if (v == "random") return DecodeOrder::random;
  throw ConfigError("config: dec_order must be raster|reverse|random");
}

CropStrategy parse_crop(const std::string& v) {
  if (v == "random") return CropStrategy::random;
  if (v == "center") return CropStrategy::center;
  if (v == "full") return CropStrategy::full;
  throw ConfigError("config: crop must be random|center|full");
}

FeatureBackendConfig parse_backend(IniReader& r) {
  const std::string kind = r.require("backend", "kind");
  FeatureBackendConfig cfg;
  if (kind == "handcrafted") {
    HandcraftedConfig h;
    h.patch = int(r.get_int("backend", "patch", h.patch));
    h.d_emb = int(r.get_int("backend", "d_emb", h.d_emb));
    const std::vector<int> radii = r.get_int_list("backend", "radii", {});
    if (radii.empty()) throw ConfigError("config: handcrafted backend needs radii");
    h.radii = radii;
    cfg.backend = h;
  } else if (kind == "tiny_vit") {
    TinyVitConfig v;
    v.depth = int(r.get_int("backend", "depth", v.depth));
    v.heads = int(r.get_int("backend", "heads", v.heads));
    v.patch = int(r.get_int("backend", "patch", v.patch));
    v.d_emb = int(r.get_int("backend", "d_emb", v.d_emb));
    v.seed = std::uint64_t(r.get_int("backend", "seed", 0));
    cfg.backend = v;
  } else if (kind == "file") {
    FileBackendConfig f;
    f.directory = r.require("backend", "path");
    cfg.backend = f;
  } else {
    throw ConfigError("config: backend kind must be handcrafted|tiny_vit|file");
  }
  return cfg;
}

}  // namespace

void TrainConfig::validate() const {
  if (dataset_dir.empty()) throw ConfigError("config: [data] dataset is required");
  if (layer_ids.empty()) throw ConfigError("config: [model] layers is required");
  for (size_t i = 1; i < layer_ids.size(); ++i)
    if (layer_ids[i] <= layer_ids[i - 1])
      throw ConfigError("config: [model] layers must be strictly increasing");
  if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (batch < 1) throw ConfigError("config: batch must be >= 1");
  if (!(lr_main > lr_low) || lr_low < 0)
    throw ConfigError("config: need lr_main > lr_low >= 0");
  if (lambda < 0) throw ConfigError("config: lambda must be >= 0");
  if (warmup_steps < 0) throw ConfigError("config: warmup must be >= 0");
  if (layers() == 1 && fusion != FusionStrategy::avg_fusion)
    throw ConfigError("config: single-layer runs use fusion = avg_fusion (pass-through)");
  if (const auto* h = std::get_if<HandcraftedConfig>(&backend.backend))
    if (int(h->radii.size()) != layers())
      throw ConfigError("config: handcrafted radii count must match the layer count");
}

ModelConfig TrainConfig::model_config(int d_emb, int patches) const {
  ModelConfig mc;
  mc.d_emb = d_emb;
  mc.patches = patches;
  mc.layers = layers();
  mc.slots = slots;
  mc.d_slot = d_slot;
  mc.attn_dim = attn_dim;
  mc.sa_mlp_hidden = sa_mlp_hidden;
  mc.sa_iters = sa_iters;
  mc.slot_init = slot_init;
  mc.fusion = fusion;
  mc.fusion_hidden = fusion_hidden;
  mc.mask_weights = mask_weights;
  mc.decoder = decoder;
  mc.dec_layers = dec_layers;
  mc.dec_heads = dec_heads;
  mc.dec_width = dec_width;
  mc.dec_hidden = dec_hidden;
  mc.dec_order = dec_order;
  return mc;
}

TrainConfig parse_train_config(const std::string& text) {
  IniReader r(IniFile::parse(text));
  TrainConfig cfg;
  cfg.source_text = text;

  cfg.dataset_dir = r.get("data", "dataset", "");
  cfg.preprocess.target = int(r.get_int("data", "target", 64));
  cfg.preprocess.crop = parse_crop(r.get("data", "crop", "full"));
  cfg.preprocess.flip_prob = r.get_double("data", "flip_prob", 0.5);
  cfg.eval_height = int(r.get_int("data", "eval_height", 0));
  cfg.eval_width = int(r.get_int("data", "eval_width", 0));
  cfg.include_background = r.get_bool("data", "include_background", true);

  cfg.backend = parse_backend(r);

  cfg.layer_ids = r.get_int_list("model", "layers", {});
  cfg.slots = int(r.get_int("model", "slots", cfg.slots));
  cfg.d_slot = int(r.get_int("model", "d_slot", cfg.d_slot));
  cfg.attn_dim = int(r.get_int("model", "attn_dim", cfg.attn_dim));
  cfg.sa_mlp_hidden = int(r.get_int("model", "sa_mlp_hidden", cfg.sa_mlp_hidden));
  cfg.sa_iters = int(r.get_int("model", "sa_iters", cfg.sa_iters));
  cfg.slot_init = parse_slot_init(r.get("model", "slot_init", "gaussian"));
  cfg.fusion = parse_fusion(r.get("model", "fusion", "m_fusion"));
  cfg.fusion_hidden = int(r.get_int("model", "fusion_hidden", cfg.fusion_hidden));
  cfg.mask_weights = parse_weight_mode(r.get("model", "mask_weights", "uniform"));
  cfg.decoder = parse_decoder(r.get("model", "decoder", "transformer"));
  cfg.dec_layers = int(r.get_int("model", "dec_layers", cfg.dec_layers));
  cfg.dec_heads = int(r.get_int("model", "dec_heads", cfg.dec_heads));
  cfg.dec_width = int(r.get_int("model", "dec_width", cfg.dec_width));
  cfg.dec_hidden = int(r.get_int("model", "dec_hidden", cfg.dec_hidden));
  cfg.dec_order = parse_order(r.get("model", "dec_order", "raster"));

  cfg.epochs = int(r.get_int("train", "epochs", cfg.epochs));
  cfg.teacher_epochs = int(r.get_int("train", "teacher_epochs", 0));
  cfg.student_epochs = int(r.get_int("train", "student_epochs", 0));
  cfg.batch = int(r.get_int("train", "batch", cfg.batch));
  cfg.lr_main = r.get_double("train", "lr_main", cfg.lr_main);
  cfg.lr_low = r.get_double("train", "lr_low", cfg.lr_low);
  cfg.warmup_steps = int(r.get_int("train", "warmup", cfg.warmup_steps));
  cfg.lambda = r.get_double("train", "lambda", cfg.lambda);
  cfg.soft_targets = r.get_bool("train", "soft_targets", false);
  cfg.seed = std::uint64_t(r.get_int("train", "seed", 1));
  cfg.out_dir = r.get("train", "out", "");
  cfg.checkpoint_every = int(r.get_int("train", "checkpoint_every", 1));
  cfg.max_steps = r.get_int("train", "max_steps", 0);

  r.finish();
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  return parse_train_config(read_text_file(path));
}

GenConfig parse_gen_config(const std::string& text) {
  IniReader r(IniFile::parse(text));
  GenConfig g;
  g.source_text = text;
  g.spec.size = int(r.get_int("gen", "size", g.spec.size));
  g.spec.min_objects = int(r.get_int("gen", "min_objects", g.spec.min_objects));
  g.spec.max_objects = int(r.get_int("gen", "max_objects", g.spec.max_objects));
  g.spec.min_size = r.get_double("gen", "min_object_size", g.spec.min_size);
  g.spec.max_size = r.get_double("gen", "max_object_size", g.spec.max_size);
  g.spec.margin = int(r.get_int("gen", "margin", g.spec.margin));
  g.spec.seed = std::uint64_t(r.get_int("gen", "seed", 0));
  g.n_train = int(r.get_int("gen", "n_train", g.n_train));
  g.n_eval = int(r.get_int("gen", "n_eval", g.n_eval));
  r.finish();
  g.spec.validate();
  return g;
}

GenConfig load_gen_config(const std::string& path) {
  return parse_gen_config(read_text_file(path));
}

std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const std::string& config_path, const std::string& config_text,
                        const std::string& started_at, const std::string& finished_at) {
  std::ostringstream ss;
  ss << "command = " << command << "\n"
     << "config_path = " << config_path << "\n"
     << "config_hash = " << git_blob_sha1(config_text) << "\n"
     << "started_at = " << started_at << "\n"
     << "finished_at = " << finished_at << "\n"
     << "config:\n"
     << config_text;
  write_text_file(out_dir + "/run_manifest.txt", ss.str());
}

}  // namespace mufasa
