#include "mufasa/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mufasa {

namespace {

constexpr double kColorGain = 8.0;
// Position code amplitude is kept well below the color gain so reconstruction
// error is dominated by object appearance rather than by the (trivially
// predictable) spatial code.
constexpr double kPosAmplitude = 0.02;
constexpr double kPi = 3.14159265358979323846;

void check_patch_divisible(const ImageD& image, int patch) {
  if (patch <= 0) throw ConfigError("patch size must be positive");
  if (image.width % patch != 0 || image.height % patch != 0)
    throw ConfigError("image resolution " + std::to_string(image.width) + "x" +
                      std::to_string(image.height) + " not divisible by patch size " +
                      std::to_string(patch));
}

void check_layer_ids(const std::vector<int>& layer_ids, int depth) {
  if (layer_ids.empty()) throw ConfigError("layer id set must not be empty");
  for (size_t i = 0; i < layer_ids.size(); ++i) {
    if (layer_ids[i] < 1 || layer_ids[i] > depth)
      throw RangeError("layer id " + std::to_string(layer_ids[i]) + " outside backend depth " +
                       std::to_string(depth));
    if (i > 0 && layer_ids[i] <= layer_ids[i - 1])
      throw ConfigError("layer ids must be strictly increasing");
  }
}

// 2-D sinusoidal position code over normalized grid coordinates, filling
// `dims` entries with interleaved (sin fx, cos fx, sin fy, cos fy) quadruples
// of linearly spaced frequencies.
void fill_position_code(double* out, int dims, int row, int col, const GridShape& grid) {
  const double x = grid.cols > 1 ? double(col) / (grid.cols - 1) : 0.0;
  const double y = grid.rows > 1 ? double(row) / (grid.rows - 1) : 0.0;
  const int quads = (dims + 3) / 4;
  int j = 0;
  for (int f = 0; f < quads && j < dims; ++f) {
    const double w = kPi * double(f + 1);
    if (j < dims) out[j++] = kPosAmplitude * std::sin(w * x);
    if (j < dims) out[j++] = kPosAmplitude * std::cos(w * x);
    if (j < dims) out[j++] = kPosAmplitude * std::sin(w * y);
    if (j < dims) out[j++] = kPosAmplitude * std::cos(w * y);
  }
}

MatF box_smooth_grid(const MatF& feats, const GridShape& grid, int radius) {
  if (radius <= 0) return feats;
  MatF out(feats.rows(), feats.cols());
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const int r0 = std::max(0, r - radius), r1 = std::min(grid.rows - 1, r + radius);
      const int c0 = std::max(0, c - radius), c1 = std::min(grid.cols - 1, c + radius);
      // double accumulation keeps constant regions exactly constant
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(feats.cols());
      for (int rr = r0; rr <= r1; ++rr)
        for (int cc = c0; cc <= c1; ++cc) acc += feats.row(rr * grid.cols + cc).cast<double>();
      out.row(r * grid.cols + c) =
          (acc / double((r1 - r0 + 1) * (c1 - c0 + 1))).cast<float>();
    }
  return out;
}

FeatureStack extract_handcrafted(const ImageD& image, const HandcraftedConfig& cfg,
                                 const std::vector<int>& layer_ids) {
  check_patch_divisible(image, cfg.patch);
  if (cfg.radii.empty()) throw ConfigError("handcrafted backend needs at least one radius");
  if (cfg.radii.size() != layer_ids.size())
    throw ConfigError("handcrafted radii count must equal the requested layer count");
  if (cfg.d_emb <= image.channels)
    throw ConfigError("handcrafted d_emb must exceed the channel count");
  if (layer_ids.empty()) throw ConfigError("layer id set must not be empty");
  for (size_t i = 1; i < layer_ids.size(); ++i)
    if (layer_ids[i] <= layer_ids[i - 1]) throw ConfigError("layer ids must be strictly increasing");
  if (layer_ids.front() < 1) throw RangeError("layer ids are 1-based");

  const GridShape grid{image.height / cfg.patch, image.width / cfg.patch};
  const int n = grid.patches();
  const int color_dims = image.channels;
  MatF base(n, cfg.d_emb);
  std::vector<double> code(size_t(cfg.d_emb - color_dims));
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const int idx = r * grid.cols + c;
      for (int ch = 0; ch < color_dims; ++ch) {
        double sum = 0.0;
        for (int py = 0; py < cfg.patch; ++py)
          for (int px = 0; px < cfg.patch; ++px)
            sum += image.at(c * cfg.patch + px, r * cfg.patch + py, ch);
        base(idx, ch) = float(kColorGain * sum / double(cfg.patch * cfg.patch));
      }
      fill_position_code(code.data(), int(code.size()), r, c, grid);
      for (size_t j = 0; j < code.size(); ++j) base(idx, color_dims + int(j)) = float(code[j]);
    }

  FeatureStack stack;
  stack.layer_ids = layer_ids;
  stack.grid = grid;
  stack.d_emb = cfg.d_emb;
  stack.layers.reserve(cfg.radii.size());
  for (int radius : cfg.radii) stack.layers.push_back(box_smooth_grid(base, grid, radius));
  stack.validate();
  return stack;
}

// --- frozen random transformer backend -------------------------------------

struct TinyVitWeights {
  Mat patch_embed_w;  // (patch*patch*C) x d
  Vec patch_embed_b;
  struct Block {
    Mat wq, wk, wv, wo;  // d x d
    Mat mlp1;            // d x 2d
    Vec mlp1_b;
    Mat mlp2;  // 2d x d
    Vec mlp2_b;
  };
  std::vector<Block> blocks;
};

Mat xavier(Index rows, Index cols, Rng& rng) {
  const double a = std::sqrt(6.0 / double(rows + cols));
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-a, a);
  return m;
}

TinyVitWeights make_tiny_vit(const TinyVitConfig& cfg, int channels) {
  if (cfg.depth < 1) throw ConfigError("tiny_vit depth must be >= 1");
  if (cfg.d_emb % cfg.heads != 0) throw ConfigError("tiny_vit d_emb must be divisible by heads");
  TinyVitWeights w;
  Rng rng(derive_seed(cfg.seed, 0xF17Eull));
  w.patch_embed_w = xavier(Index(cfg.patch) * cfg.patch * channels, cfg.d_emb, rng);
  w.patch_embed_b = Vec::Zero(cfg.d_emb);
  w.blocks.resize(size_t(cfg.depth));
  for (auto& b : w.blocks) {
    b.wq = xavier(cfg.d_emb, cfg.d_emb, rng);
    b.wk = xavier(cfg.d_emb, cfg.d_emb, rng);
    b.wv = xavier(cfg.d_emb, cfg.d_emb, rng);
    b.wo = xavier(cfg.d_emb, cfg.d_emb, rng);
    b.mlp1 = xavier(cfg.d_emb, 2 * cfg.d_emb, rng);
    b.mlp1_b = Vec::Zero(2 * cfg.d_emb);
    b.mlp2 = xavier(2 * cfg.d_emb, cfg.d_emb, rng);
    b.mlp2_b = Vec::Zero(cfg.d_emb);
  }
  return w;
}

Mat layer_norm_plain(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / double(x.cols());
    out.row(r) = ((x.row(r).array() - mu) / std::sqrt(var + 1e-6)).matrix();
  }
  return out;
}

Mat softmax_rows_plain(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::RowVectorXd e = (x.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

FeatureStack extract_tiny_vit(const ImageD& image, const TinyVitConfig& cfg,
                              const std::vector<int>& layer_ids) {
  check_patch_divisible(image, cfg.patch);
  check_layer_ids(layer_ids, cfg.depth);
  const TinyVitWeights w = make_tiny_vit(cfg, image.channels);
  const GridShape grid{image.height / cfg.patch, image.width / cfg.patch};
  const int n = grid.patches();
  const int pd = cfg.patch * cfg.patch * image.channels;

  Mat tokens(n, pd);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      int j = 0;
      for (int py = 0; py < cfg.patch; ++py)
        for (int px = 0; px < cfg.patch; ++px)
          for (int ch = 0; ch < image.channels; ++ch)
            tokens(r * grid.cols + c, j++) = image.at(c * cfg.patch + px, r * cfg.patch + py, ch);
    }
  Mat x = tokens * w.patch_embed_w;
  x.rowwise() += w.patch_embed_b.transpose();
  // frozen per-position embedding, derived per patch index so any grid works
  for (int i = 0; i < n; ++i) {
    Rng prng(derive_seed(cfg.seed, 0x90Dull, std::uint64_t(i)));
    for (int j = 0; j < cfg.d_emb; ++j) x(i, j) += 0.02 * prng.gaussian();
  }

  FeatureStack stack;
  stack.layer_ids = layer_ids;
  stack.grid = grid;
  stack.d_emb = cfg.d_emb;

  const int hd = cfg.d_emb / cfg.heads;
  int next_wanted = 0;
  for (int layer = 1; layer <= cfg.depth; ++layer) {
    const auto& b = w.blocks[size_t(layer - 1)];
    const Mat xn = layer_norm_plain(x);
    Mat q = xn * b.wq, k = xn * b.wk, v = xn * b.wv;
    Mat ctx(n, cfg.d_emb);
    for (int h = 0; h < cfg.heads; ++h) {
      const auto qh = q.middleCols(h * hd, hd);
      const auto kh = k.middleCols(h * hd, hd);
      const auto vh = v.middleCols(h * hd, hd);
      const Mat attn = softmax_rows_plain(qh * kh.transpose() / std::sqrt(double(hd)));
      ctx.middleCols(h * hd, hd) = attn * vh;
    }
    x += ctx * b.wo;
    const Mat xm = layer_norm_plain(x);
    Mat hm = xm * b.mlp1;
    hm.rowwise() += b.mlp1_b.transpose();
    hm = hm.unaryExpr([](double u) { return 0.5 * u * (1.0 + std::erf(u * 0.7071067811865475)); });
    Mat mo = hm * b.mlp2;
    mo.rowwise() += b.mlp2_b.transpose();
    x += mo;

    if (next_wanted < int(layer_ids.size()) && layer_ids[size_t(next_wanted)] == layer) {
      stack.layers.push_back(x.cast<float>());
      ++next_wanted;
    }
  }
  stack.validate();
  return stack;
}

constexpr std::uint32_t kFeatureVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::uint8_t b[4] = {std::uint8_t(v), std::uint8_t(v >> 8), std::uint8_t(v >> 16),
                             std::uint8_t(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ostream& os, std::uint16_t v) {
  const std::uint8_t b[2] = {std::uint8_t(v), std::uint8_t(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}

}  // namespace

double handcrafted_color_gain() { return kColorGain; }

void FeatureStack::validate() const {
  if (layers.empty()) throw DimensionError("feature stack has no layers");
  if (layers.size() != layer_ids.size())
    throw DimensionError("feature stack: layer/id count mismatch");
  if (grid.rows <= 0 || grid.cols <= 0) throw DimensionError("feature stack: bad grid");
  if (d_emb <= 0) throw DimensionError("feature stack: bad d_emb");
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].rows() != grid.patches() || layers[i].cols() != d_emb)
      throw DimensionError("feature stack: layer " + std::to_string(i) + " shape mismatch");
    if (!layers[i].allFinite()) throw NumericError("feature stack: non-finite entries");
    if (i > 0 && layer_ids[i] <= layer_ids[i - 1])
      throw RangeError("feature stack: layer ids must be strictly increasing");
  }
  if (layer_ids.front() < 1) throw RangeError("feature stack: layer ids are 1-based");
}

int FeatureBackendConfig::patch_size() const {
  if (const auto* v = std::get_if<TinyVitConfig>(&backend)) return v->patch;
  if (const auto* h = std::get_if<HandcraftedConfig>(&backend)) return h->patch;
  return 1;  // file backend: geometry comes from the file
}

FeatureStack extract_features(const ImageD& image, const FeatureBackendConfig& backend,
                              const std::vector<int>& layer_ids, const std::string& key) {
  if (const auto* h = std::get_if<HandcraftedConfig>(&backend.backend))
    return extract_handcrafted(image, *h, layer_ids);
  if (const auto* v = std::get_if<TinyVitConfig>(&backend.backend))
    return extract_tiny_vit(image, *v, layer_ids);
  const auto& f = std::get<FileBackendConfig>(backend.backend);
  if (key.empty()) throw ConfigError("file backend requires an item key");
  FeatureStack full = load_feature_file(f.directory + "/" + key + ".mufe");
  FeatureStack subset;
  subset.grid = full.grid;
  subset.d_emb = full.d_emb;
  for (int id : layer_ids) {
    const auto it = std::find(full.layer_ids.begin(), full.layer_ids.end(), id);
    if (it == full.layer_ids.end())
      throw RangeError("layer id " + std::to_string(id) + " not present in feature file");
    subset.layer_ids.push_back(id);
    subset.layers.push_back(full.layers[size_t(it - full.layer_ids.begin())]);
  }
  subset.validate();
  return subset;
}

std::vector<FeatureStack> extract_features(const std::vector<ImageD>& images,
                                           const FeatureBackendConfig& backend,
                                           const std::vector<int>& layer_ids) {
  std::vector<FeatureStack> out(images.size());
  for (size_t i = 0; i < images.size(); ++i)
    out[i] = extract_features(images[i], backend, layer_ids);
  return out;
}

void write_feature_file(const std::string& path, const FeatureStack& stack) {
  stack.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write feature file: " + path);
  os.write("MUFE", 4);
  put_u32(os, kFeatureVersion);
  put_u32(os, std::uint32_t(stack.num_layers()));
  put_u32(os, std::uint32_t(stack.patches()));
  put_u32(os, std::uint32_t(stack.d_emb));
  put_u16(os, std::uint16_t(stack.grid.rows));
  put_u16(os, std::uint16_t(stack.grid.cols));
  for (int m = 0; m < stack.num_layers(); ++m) {
    put_u32(os, std::uint32_t(stack.layer_ids[size_t(m)]));
    const MatF& layer = stack.layers[size_t(m)];
    // row-major float32 payload
    for (Index r = 0; r < layer.rows(); ++r)
      os.write(reinterpret_cast<const char*>(Eigen::RowVectorXf(layer.row(r)).data()),
               std::streamsize(sizeof(float)) * layer.cols());
  }
  if (!os) throw IoError("feature file write failed: " + path);
}

FeatureStack load_feature_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open feature file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 24) throw CorruptionError("feature file truncated: " + path);
  if (std::memcmp(bytes.data(), "MUFE", 4) != 0)
    throw FormatError("bad magic in feature file: " + path);
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kFeatureVersion)
    throw FormatError("unsupported feature file version " + std::to_string(version));
  const std::uint32_t m = get_u32(bytes.data() + 8);
  const std::uint32_t n = get_u32(bytes.data() + 12);
  const std::uint32_t d = get_u32(bytes.data() + 16);
  const std::uint16_t rows = get_u16(bytes.data() + 20);
  const std::uint16_t cols = get_u16(bytes.data() + 22);
  const size_t expected = 24 + size_t(m) * (4 + size_t(n) * d * sizeof(float));
  if (bytes.size() != expected)
    throw CorruptionError("feature file payload size mismatch (declared N*d_emb vs file size)");
  if (std::uint32_t(rows) * cols != n)
    throw CorruptionError("feature file grid does not match N");

  FeatureStack stack;
  stack.grid = GridShape{int(rows), int(cols)};
  stack.d_emb = int(d);
  size_t pos = 24;
  Eigen::RowVectorXf rowbuf(d);
  for (std::uint32_t i = 0; i < m; ++i) {
    stack.layer_ids.push_back(int(get_u32(bytes.data() + pos)));
    pos += 4;
    MatF layer(n, d);
    for (std::uint32_t r = 0; r < n; ++r) {
      std::memcpy(rowbuf.data(), bytes.data() + pos, sizeof(float) * d);
      layer.row(r) = rowbuf;
      pos += sizeof(float) * d;
    }
    stack.layers.push_back(std::move(layer));
  }
  try {
    stack.validate();
  } catch (const Error& e) {
    throw CorruptionError(std::string("feature file inconsistent: ") + e.what());
  }
  return stack;
}

namespace {

PcaResult pca_impl(const Eigen::Ref<const Mat>& features, int k, Vec* eigenvalues_out) {
  if (k < 1) throw DimensionError("pca: k must be positive");
  if (features.rows() < k) throw DimensionError("pca: need at least k rows");
  PcaResult res;
  res.mean = features.colwise().mean();
  const Mat centered = features.rowwise() - res.mean.transpose();
  const Mat cov = centered.transpose() * centered;
  Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");
  const Index d = features.cols();
  const int kk = std::min<int>(k, int(d));
  res.components = Mat::Zero(d, k);
  for (int j = 0; j < kk; ++j) res.components.col(j) = solver.eigenvectors().col(d - 1 - j);
  res.projected = centered * res.components;
  if (eigenvalues_out) {
    eigenvalues_out->resize(k);
    for (int j = 0; j < k; ++j) (*eigenvalues_out)(j) = j < kk ? solver.eigenvalues()(d - 1 - j) : 0.0;
  }
  return res;
}

}  // namespace

PcaResult pca_components(const Eigen::Ref<const Mat>& features, int k) {
  return pca_impl(features, k, nullptr);
}

Mat pca_project(const Eigen::Ref<const Mat>& features, int k) {
  Vec evals;
  const PcaResult pca = pca_impl(features, k, &evals);
  const double top = std::max(evals.maxCoeff(), 0.0);

  Mat out(features.rows(), k);
  for (int j = 0; j < k; ++j) {
    const double lo = pca.projected.col(j).minCoeff();
    const double hi = pca.projected.col(j).maxCoeff();
    // channels carrying no variance render mid-gray
    if (top <= 0.0 || evals(j) <= top * 1e-12 || hi - lo <= 0.0) {
      out.col(j).setConstant(0.5);
    } else {
      out.col(j) = (pca.projected.col(j).array() - lo) / (hi - lo);
    }
  }
  return out;
}

}  // namespace mufasa
