#include "mufasa/autodiff.hpp"

#include <cmath>

namespace mufasa::ad {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

void check_block_divisible(Index rows, int blocks, const char* what) {
  if (blocks <= 0 || rows % blocks != 0)
    throw DimensionError(std::string(what) + ": rows " + std::to_string(rows) +
                         " not divisible into " + std::to_string(blocks) + " blocks");
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

const Mat& Var::value() const { return tape->value(*this); }

const Node& Tape::at(Var v) const { return nodes_[size_t(v.id)]; }

Var Tape::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return Var{this, int(nodes_.size()) - 1};
}

Var Tape::leaf(Mat v, bool needs_grad) {
  Node n;
  n.value = std::move(v);
  n.op = Op::kLeaf;
  n.needs_grad = needs_grad;
  return push(std::move(n));
}

Mat Tape::grad(Var v) const {
  const Node& n = at(v);
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

#define MUFASA_AD_BINARY_PROLOG(name)              \
  Node n;                                          \
  n.a = a.id;                                      \
  n.b = b.id;                                      \
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;

#define MUFASA_AD_UNARY_PROLOG(name) \
  Node n;                            \
  n.a = a.id;                        \
  n.needs_grad = at(a).needs_grad;

Var Tape::add(Var a, Var b) {
  check_same_shape(at(a).value, at(b).value, "add");
  MUFASA_AD_BINARY_PROLOG("add")
  n.op = Op::kAdd;
  n.value = at(a).value + at(b).value;
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(at(a).value, at(b).value, "sub");
  MUFASA_AD_BINARY_PROLOG("sub")
  n.op = Op::kSub;
  n.value = at(a).value - at(b).value;
  return push(std::move(n));
}

Var Tape::cmul(Var a, Var b) {
  check_same_shape(at(a).value, at(b).value, "cmul");
  MUFASA_AD_BINARY_PROLOG("cmul")
  n.op = Op::kCMul;
  n.value = at(a).value.cwiseProduct(at(b).value);
  return push(std::move(n));
}

Var Tape::scale(Var a, double s) {
  MUFASA_AD_UNARY_PROLOG("scale")
  n.op = Op::kScale;
  n.s0 = s;
  n.value = at(a).value * s;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double s) {
  MUFASA_AD_UNARY_PROLOG("add_scalar")
  n.op = Op::kAddScalar;
  n.s0 = s;
  n.value = at(a).value.array() + s;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  if (at(a).value.cols() != at(b).value.rows()) throw DimensionError("matmul: inner dims differ");
  MUFASA_AD_BINARY_PROLOG("matmul")
  n.op = Op::kMatMulNN;
  n.value.noalias() = at(a).value * at(b).value;
  return push(std::move(n));
}

Var Tape::matmul_nt(Var a, Var b) {
  if (at(a).value.cols() != at(b).value.cols()) throw DimensionError("matmul_nt: inner dims differ");
  MUFASA_AD_BINARY_PROLOG("matmul_nt")
  n.op = Op::kMatMulNT;
  n.value.noalias() = at(a).value * at(b).value.transpose();
  return push(std::move(n));
}

Var Tape::matmul_tn(Var a, Var b) {
  if (at(a).value.rows() != at(b).value.rows()) throw DimensionError("matmul_tn: inner dims differ");
  MUFASA_AD_BINARY_PROLOG("matmul_tn")
  n.op = Op::kMatMulTN;
  n.value.noalias() = at(a).value.transpose() * at(b).value;
  return push(std::move(n));
}

Var Tape::bmm(Var a, Var b, int blocks) {
  check_block_divisible(at(a).value.rows(), blocks, "bmm A");
  check_block_divisible(at(b).value.rows(), blocks, "bmm B");
  const Index ra = at(a).value.rows() / blocks, rb = at(b).value.rows() / blocks;
  if (at(a).value.cols() != rb) throw DimensionError("bmm: inner dims differ");
  MUFASA_AD_BINARY_PROLOG("bmm")
  n.op = Op::kBmmNN;
  n.i0 = blocks;
  n.value.resize(ra * blocks, at(b).value.cols());
  for (int i = 0; i < blocks; ++i)
    n.value.middleRows(i * ra, ra).noalias() =
        at(a).value.middleRows(i * ra, ra) * at(b).value.middleRows(i * rb, rb);
  return push(std::move(n));
}

Var Tape::bmm_nt(Var a, Var b, int blocks) {
  check_block_divisible(at(a).value.rows(), blocks, "bmm_nt A");
  check_block_divisible(at(b).value.rows(), blocks, "bmm_nt B");
  if (at(a).value.cols() != at(b).value.cols()) throw DimensionError("bmm_nt: inner dims differ");
  const Index ra = at(a).value.rows() / blocks, rb = at(b).value.rows() / blocks;
  MUFASA_AD_BINARY_PROLOG("bmm_nt")
  n.op = Op::kBmmNT;
  n.i0 = blocks;
  n.value.resize(ra * blocks, rb);
  for (int i = 0; i < blocks; ++i)
    n.value.middleRows(i * ra, ra).noalias() =
        at(a).value.middleRows(i * ra, ra) * at(b).value.middleRows(i * rb, rb).transpose();
  return push(std::move(n));
}

Var Tape::bmm_tn(Var a, Var b, int blocks) {
  check_block_divisible(at(a).value.rows(), blocks, "bmm_tn A");
  check_block_divisible(at(b).value.rows(), blocks, "bmm_tn B");
  const Index ra = at(a).value.rows() / blocks, rb = at(b).value.rows() / blocks;
  if (ra != rb) throw DimensionError("bmm_tn: block rows differ");
  MUFASA_AD_BINARY_PROLOG("bmm_tn")
  n.op = Op::kBmmTN;
  n.i0 = blocks;
  n.value.resize(at(a).value.cols() * blocks, at(b).value.cols());
  const Index ca = at(a).value.cols();
  for (int i = 0; i < blocks; ++i)
    n.value.middleRows(i * ca, ca).noalias() =
        at(a).value.middleRows(i * ra, ra).transpose() * at(b).value.middleRows(i * rb, rb);
  return push(std::move(n));
}

Var Tape::softmax_rows(Var a) {
  MUFASA_AD_UNARY_PROLOG("softmax_rows")
  n.op = Op::kSoftmaxRows;
  const Mat& x = at(a).value;
  n.value.resize(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::RowVectorXd e = (x.row(r).array() - m).exp();
    n.value.row(r) = e / e.sum();
  }
  return push(std::move(n));
}

Var Tape::normalize_rows(Var a, double eps) {
  MUFASA_AD_UNARY_PROLOG("normalize_rows")
  n.op = Op::kNormalizeRows;
  n.s0 = eps;
  const Mat& x = at(a).value;
  n.aux = x.rowwise().sum().array() + eps;  // rows x 1
  n.value = x.array().colwise() / n.aux.col(0).array();
  return push(std::move(n));
}

Var Tape::normalize_cols_blocked(Var a, int blocks, double eps) {
  check_block_divisible(at(a).value.rows(), blocks, "normalize_cols_blocked");
  MUFASA_AD_UNARY_PROLOG("normalize_cols_blocked")
  n.op = Op::kNormalizeColsBlocked;
  n.s0 = eps;
  n.i0 = blocks;
  const Mat& x = at(a).value;
  const Index br = x.rows() / blocks;
  n.aux.resize(blocks, x.cols());
  n.value.resize(x.rows(), x.cols());
  for (int i = 0; i < blocks; ++i) {
    n.aux.row(i) = x.middleRows(i * br, br).colwise().sum().array() + eps;
    n.value.middleRows(i * br, br) =
        x.middleRows(i * br, br).array().rowwise() / n.aux.row(i).array();
  }
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  MUFASA_AD_UNARY_PROLOG("relu")
  n.op = Op::kRelu;
  n.value = at(a).value.cwiseMax(0.0);
  return push(std::move(n));
}

Var Tape::gelu(Var a) {
  MUFASA_AD_UNARY_PROLOG("gelu")
  n.op = Op::kGelu;
  const Mat& x = at(a).value;
  n.value = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  return push(std::move(n));
}

Var Tape::sigmoid(Var a) {
  MUFASA_AD_UNARY_PROLOG("sigmoid")
  n.op = Op::kSigmoid;
  n.value = at(a).value.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return push(std::move(n));
}

Var Tape::tanh(Var a) {
  MUFASA_AD_UNARY_PROLOG("tanh")
  n.op = Op::kTanh;
  n.value = at(a).value.array().tanh();
  return push(std::move(n));
}

Var Tape::log(Var a) {
  MUFASA_AD_UNARY_PROLOG("log")
  n.op = Op::kLog;
  n.value = at(a).value.array().log();
  return push(std::move(n));
}

Var Tape::exp(Var a) {
  MUFASA_AD_UNARY_PROLOG("exp")
  n.op = Op::kExp;
  n.value = at(a).value.array().exp();
  return push(std::move(n));
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Mat& xv = at(x).value;
  if (at(gamma).value.rows() != 1 || at(gamma).value.cols() != xv.cols() ||
      at(beta).value.rows() != 1 || at(beta).value.cols() != xv.cols())
    throw DimensionError("layer_norm_rows: gamma/beta must be 1 x cols");
  Node n;
  n.a = x.id;
  n.b = gamma.id;
  n.c = beta.id;
  n.needs_grad = at(x).needs_grad || at(gamma).needs_grad || at(beta).needs_grad;
  n.op = Op::kLayerNormRows;
  n.s0 = eps;
  const Index d = xv.cols();
  n.aux.resize(xv.rows(), d + 1);  // [xhat | inv_std]
  n.value.resize(xv.rows(), d);
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().sum() / double(d);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    n.aux.block(r, 0, 1, d) = (xv.row(r).array() - mu) * inv_std;
    n.aux(r, d) = inv_std;
    n.value.row(r) =
        n.aux.block(r, 0, 1, d).cwiseProduct(at(gamma).value.row(0)) + at(beta).value.row(0);
  }
  return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
  if (at(a).value.rows() != at(b).value.rows()) throw DimensionError("concat_cols: rows differ");
  MUFASA_AD_BINARY_PROLOG("concat_cols")
  n.op = Op::kConcatCols;
  n.value.resize(at(a).value.rows(), at(a).value.cols() + at(b).value.cols());
  n.value << at(a).value, at(b).value;
  return push(std::move(n));
}

Var Tape::concat_rows(Var a, Var b) {
  if (at(a).value.cols() != at(b).value.cols()) throw DimensionError("concat_rows: cols differ");
  MUFASA_AD_BINARY_PROLOG("concat_rows")
  n.op = Op::kConcatRows;
  n.value.resize(at(a).value.rows() + at(b).value.rows(), at(a).value.cols());
  n.value << at(a).value, at(b).value;
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > at(a).value.cols())
    throw DimensionError("slice_cols: out of range");
  MUFASA_AD_UNARY_PROLOG("slice_cols")
  n.op = Op::kSliceCols;
  n.i0 = start;
  n.i1 = count;
  n.value = at(a).value.middleCols(start, count);
  return push(std::move(n));
}

Var Tape::slice_rows(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > at(a).value.rows())
    throw DimensionError("slice_rows: out of range");
  MUFASA_AD_UNARY_PROLOG("slice_rows")
  n.op = Op::kSliceRows;
  n.i0 = start;
  n.i1 = count;
  n.value = at(a).value.middleRows(start, count);
  return push(std::move(n));
}

Var Tape::permute_rows(Var a, std::vector<int> perm) {
  if (Index(perm.size()) != at(a).value.rows()) throw DimensionError("permute_rows: size mismatch");
  MUFASA_AD_UNARY_PROLOG("permute_rows")
  n.op = Op::kPermuteRows;
  n.idx = std::move(perm);
  n.value.resize(at(a).value.rows(), at(a).value.cols());
  for (size_t i = 0; i < n.idx.size(); ++i) n.value.row(Index(i)) = at(a).value.row(n.idx[i]);
  return push(std::move(n));
}

Var Tape::permute_cols_blocked(Var a, int blocks, std::vector<int> perms) {
  check_block_divisible(at(a).value.rows(), blocks, "permute_cols_blocked");
  const Index k = at(a).value.cols();
  if (Index(perms.size()) != k * blocks)
    throw DimensionError("permute_cols_blocked: need one permutation per block");
  MUFASA_AD_UNARY_PROLOG("permute_cols_blocked")
  n.op = Op::kPermuteColsBlocked;
  n.i0 = blocks;
  n.idx = std::move(perms);
  const Mat& x = at(a).value;
  const Index br = x.rows() / blocks;
  n.value.resize(x.rows(), k);
  for (int i = 0; i < blocks; ++i)
    for (Index j = 0; j < k; ++j)
      n.value.block(i * br, j, br, 1) = x.block(i * br, n.idx[size_t(i * k + j)], br, 1);
  return push(std::move(n));
}

Var Tape::repeat_each_row(Var a, int times) {
  if (times <= 0) throw DimensionError("repeat_each_row: times must be positive");
  MUFASA_AD_UNARY_PROLOG("repeat_each_row")
  n.op = Op::kRepeatEachRow;
  n.i0 = times;
  const Mat& x = at(a).value;
  n.value.resize(x.rows() * times, x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    n.value.middleRows(r * times, times).rowwise() = x.row(r);
  return push(std::move(n));
}

Var Tape::tile_rows(Var a, int times) {
  if (times <= 0) throw DimensionError("tile_rows: times must be positive");
  MUFASA_AD_UNARY_PROLOG("tile_rows")
  n.op = Op::kTileRows;
  n.i0 = times;
  const Mat& x = at(a).value;
  n.value.resize(x.rows() * times, x.cols());
  for (int i = 0; i < times; ++i) n.value.middleRows(i * x.rows(), x.rows()) = x;
  return push(std::move(n));
}

Var Tape::alpha_combine(Var feats, Var alpha, int blocks, int slots, int patches) {
  const Mat& f = at(feats).value;
  const Mat& al = at(alpha).value;
  if (f.rows() != Index(blocks) * slots * patches)
    throw DimensionError("alpha_combine: feature rows mismatch");
  if (al.rows() != Index(blocks) * patches || al.cols() != slots)
    throw DimensionError("alpha_combine: alpha shape mismatch");
  Node n;
  n.a = feats.id;
  n.b = alpha.id;
  n.needs_grad = at(feats).needs_grad || at(alpha).needs_grad;
  n.op = Op::kAlphaCombine;
  n.i0 = blocks;
  n.i1 = slots;
  n.i2 = patches;
  n.value = Mat::Zero(Index(blocks) * patches, f.cols());
  for (int b = 0; b < blocks; ++b)
    for (int k = 0; k < slots; ++k) {
      const Index fr = (Index(b) * slots + k) * patches;
      const Index ar = Index(b) * patches;
      n.value.middleRows(ar, patches).noalias() +=
          al.block(ar, k, patches, 1).asDiagonal() * f.middleRows(fr, patches);
    }
  return push(std::move(n));
}

Var Tape::slot_major_to_cols(Var a, int blocks, int slots, int patches) {
  const Mat& x = at(a).value;
  if (x.cols() != 1 || x.rows() != Index(blocks) * slots * patches)
    throw DimensionError("slot_major_to_cols: expect stacked column");
  MUFASA_AD_UNARY_PROLOG("slot_major_to_cols")
  n.op = Op::kSlotMajorToCols;
  n.i0 = blocks;
  n.i1 = slots;
  n.i2 = patches;
  n.value.resize(Index(blocks) * patches, slots);
  for (int b = 0; b < blocks; ++b)
    for (int k = 0; k < slots; ++k)
      n.value.block(Index(b) * patches, k, patches, 1) =
          x.middleRows((Index(b) * slots + k) * patches, patches);
  return push(std::move(n));
}

Var Tape::gather_rowwise(Var a, std::vector<int> col_per_row) {
  const Mat& x = at(a).value;
  if (Index(col_per_row.size()) != x.rows()) throw DimensionError("gather_rowwise: size mismatch");
  MUFASA_AD_UNARY_PROLOG("gather_rowwise")
  n.op = Op::kGatherRowwise;
  n.idx = std::move(col_per_row);
  n.value.resize(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) n.value(r, 0) = x(r, n.idx[size_t(r)]);
  return push(std::move(n));
}

Var Tape::sum_all(Var a) {
  MUFASA_AD_UNARY_PROLOG("sum_all")
  n.op = Op::kSumAll;
  n.value = Mat::Constant(1, 1, at(a).value.sum());
  return push(std::move(n));
}

Var Tape::mean_all(Var a) {
  MUFASA_AD_UNARY_PROLOG("mean_all")
  n.op = Op::kMeanAll;
  n.value = Mat::Constant(1, 1, at(a).value.mean());
  return push(std::move(n));
}

Var Tape::add_rowvec(Var a, Var row) {
  const Mat& x = at(a).value;
  const Mat& r = at(row).value;
  if (r.rows() != 1 || r.cols() != x.cols()) throw DimensionError("add_rowvec: need 1 x cols");
  Node n;
  n.a = a.id;
  n.b = row.id;
  n.needs_grad = at(a).needs_grad || at(row).needs_grad;
  n.op = Op::kAddRowVec;
  n.value = x.rowwise() + r.row(0);
  return push(std::move(n));
}

Var Tape::mul_scalar_var(Var a, Var scalar_1x1) {
  if (at(scalar_1x1).value.size() != 1) throw DimensionError("mul_scalar_var: scalar must be 1x1");
  Node n;
  n.a = a.id;
  n.b = scalar_1x1.id;
  n.needs_grad = at(a).needs_grad || at(scalar_1x1).needs_grad;
  n.op = Op::kMulScalarVar;
  n.value = at(a).value * at(scalar_1x1).value(0, 0);
  return push(std::move(n));
}

Var Tape::add_const(Var a, Mat constant) {
  check_same_shape(at(a).value, constant, "add_const");
  MUFASA_AD_UNARY_PROLOG("add_const")
  n.op = Op::kAddConstMat;
  n.value = at(a).value + constant;
  n.aux = std::move(constant);
  return push(std::move(n));
}

Var Tape::shift_down_blocked(Var a, int blocks) {
  check_block_divisible(at(a).value.rows(), blocks, "shift_down_blocked");
  MUFASA_AD_UNARY_PROLOG("shift_down_blocked")
  n.op = Op::kShiftDownBlocked;
  n.i0 = blocks;
  const Mat& x = at(a).value;
  const Index br = x.rows() / blocks;
  n.value = Mat::Zero(x.rows(), x.cols());
  for (int i = 0; i < blocks; ++i)
    if (br > 1)
      n.value.middleRows(i * br + 1, br - 1) = x.middleRows(i * br, br - 1);
  return push(std::move(n));
}

Var Tape::transpose(Var a) {
  MUFASA_AD_UNARY_PROLOG("transpose")
  n.op = Op::kTranspose;
  n.value = at(a).value.transpose();
  return push(std::move(n));
}

#undef MUFASA_AD_BINARY_PROLOG
#undef MUFASA_AD_UNARY_PROLOG

void Tape::backward(Var scalar_loss) {
  if (!scalar_loss.valid() || scalar_loss.tape != this) throw DimensionError("backward: bad var");
  Node& loss = nodes_[size_t(scalar_loss.id)];
  if (loss.value.size() != 1) throw DimensionError("backward: loss must be scalar");

  // Mark ancestors of the loss that require gradients.
  std::vector<char> active(nodes_.size(), 0);
  active[size_t(scalar_loss.id)] = 1;
  for (int i = scalar_loss.id; i >= 0; --i) {
    if (!active[size_t(i)]) continue;
    const Node& n = nodes_[size_t(i)];
    for (int input : {n.a, n.b, n.c})
      if (input >= 0 && nodes_[size_t(input)].needs_grad) active[size_t(input)] = 1;
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (active[i])
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    else
      n.grad.resize(0, 0);
  }
  loss.grad(0, 0) = 1.0;
  for (int i = scalar_loss.id; i >= 0; --i)
    if (active[size_t(i)] && nodes_[size_t(i)].op != Op::kLeaf) backprop_node(i);
}

void Tape::backprop_node(int i) {
  Node& n = nodes_[size_t(i)];
  const Mat& g = n.grad;
  auto ga = [&]() -> Mat& { return nodes_[size_t(n.a)].grad; };
  auto gb = [&]() -> Mat& { return nodes_[size_t(n.b)].grad; };
  auto gc = [&]() -> Mat& { return nodes_[size_t(n.c)].grad; };
  auto va = [&]() -> const Mat& { return nodes_[size_t(n.a)].value; };
  auto vb = [&]() -> const Mat& { return nodes_[size_t(n.b)].value; };
  const bool wa = n.a >= 0 && ga().size() > 0;
  const bool wb = n.b >= 0 && gb().size() > 0;
  const bool wc = n.c >= 0 && gc().size() > 0;

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
      if (wa) ga() += g;
      if (wb) gb() += g;
      break;
    case Op::kSub:
      if (wa) ga() += g;
      if (wb) gb() -= g;
      break;
    case Op::kCMul:
      if (wa) ga() += g.cwiseProduct(vb());
      if (wb) gb() += g.cwiseProduct(va());
      break;
    case Op::kScale:
      if (wa) ga() += g * n.s0;
      break;
    case Op::kAddScalar:
      if (wa) ga() += g;
      break;
    case Op::kMatMulNN:
      if (wa) ga().noalias() += g * vb().transpose();
      if (wb) gb().noalias() += va().transpose() * g;
      break;
    case Op::kMatMulNT:
      if (wa) ga().noalias() += g * vb();
      if (wb) gb().noalias() += g.transpose() * va();
      break;
    case Op::kMatMulTN:
      if (wa) ga().noalias() += vb() * g.transpose();
      if (wb) gb().noalias() += va() * g;
      break;
    case Op::kBmmNN: {
      const int blocks = n.i0;
      const Index ra = va().rows() / blocks, rb = vb().rows() / blocks;
      for (int k = 0; k < blocks; ++k) {
        if (wa)
          ga().middleRows(k * ra, ra).noalias() +=
              g.middleRows(k * ra, ra) * vb().middleRows(k * rb, rb).transpose();
        if (wb)
          gb().middleRows(k * rb, rb).noalias() +=
              va().middleRows(k * ra, ra).transpose() * g.middleRows(k * ra, ra);
      }
      break;
    }
    case Op::kBmmNT: {
      const int blocks = n.i0;
      const Index ra = va().rows() / blocks, rb = vb().rows() / blocks;
      for (int k = 0; k < blocks; ++k) {
        if (wa)
          ga().middleRows(k * ra, ra).noalias() +=
              g.middleRows(k * ra, ra) * vb().middleRows(k * rb, rb);
        if (wb)
          gb().middleRows(k * rb, rb).noalias() +=
              g.middleRows(k * ra, ra).transpose() * va().middleRows(k * ra, ra);
      }
      break;
    }
    case Op::kBmmTN: {
      const int blocks = n.i0;
      const Index ra = va().rows() / blocks, rb = vb().rows() / blocks;
      const Index ca = va().cols();
      for (int k = 0; k < blocks; ++k) {
        if (wa)
          ga().middleRows(k * ra, ra).noalias() +=
              vb().middleRows(k * rb, rb) * g.middleRows(k * ca, ca).transpose();
        if (wb)
          gb().middleRows(k * rb, rb).noalias() +=
              va().middleRows(k * ra, ra) * g.middleRows(k * ca, ca);
      }
      break;
    }
    case Op::kSoftmaxRows:
      if (wa) {
        for (Index r = 0; r < g.rows(); ++r) {
          const double dot = g.row(r).cwiseProduct(n.value.row(r)).sum();
          ga().row(r) += (g.row(r).array() - dot).matrix().cwiseProduct(n.value.row(r));
        }
      }
      break;
    case Op::kNormalizeRows:
      if (wa) {
        for (Index r = 0; r < g.rows(); ++r) {
          const double inv = 1.0 / n.aux(r, 0);
          const double dot = g.row(r).cwiseProduct(n.value.row(r)).sum();
          ga().row(r) += (g.row(r).array() * inv - dot * inv).matrix();
        }
      }
      break;
    case Op::kNormalizeColsBlocked:
      if (wa) {
        const int blocks = n.i0;
        const Index br = n.value.rows() / blocks;
        for (int k = 0; k < blocks; ++k)
          for (Index c = 0; c < n.value.cols(); ++c) {
            const double inv = 1.0 / n.aux(k, c);
            const double dot =
                g.block(k * br, c, br, 1).cwiseProduct(n.value.block(k * br, c, br, 1)).sum();
            ga().block(k * br, c, br, 1) +=
                (g.block(k * br, c, br, 1).array() * inv - dot * inv).matrix();
          }
      }
      break;
    case Op::kRelu:
      if (wa)
        ga() += g.cwiseProduct(
            va().unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
      break;
    case Op::kGelu:
      if (wa)
        ga() += g.cwiseProduct(va().unaryExpr([](double v) {
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          return cdf + v * pdf;
        }));
      break;
    case Op::kSigmoid:
      if (wa) ga() += g.cwiseProduct(n.value.cwiseProduct((1.0 - n.value.array()).matrix()));
      break;
    case Op::kTanh:
      if (wa) ga() += g.cwiseProduct((1.0 - n.value.array().square()).matrix());
      break;
    case Op::kLog:
      if (wa) ga() += g.cwiseQuotient(va());
      break;
    case Op::kExp:
      if (wa) ga() += g.cwiseProduct(n.value);
      break;
    case Op::kLayerNormRows: {
      const Index d = n.value.cols();
      const Mat& gamma = vb();
      for (Index r = 0; r < n.value.rows(); ++r) {
        const auto xhat = n.aux.block(r, 0, 1, d);
        if (wc) gc().row(0) += g.row(r);
        if (wb) gb().row(0) += g.row(r).cwiseProduct(xhat);
        if (wa) {
          const Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gamma.row(0));
          const double m1 = dxhat.mean();
          const double m2 = dxhat.cwiseProduct(xhat).mean();
          ga().row(r) +=
              n.aux(r, d) * (dxhat.array() - m1 - xhat.array() * m2).matrix();
        }
      }
      break;
    }
    case Op::kConcatCols:
      if (wa) ga() += g.leftCols(va().cols());
      if (wb) gb() += g.rightCols(vb().cols());
      break;
    case Op::kConcatRows:
      if (wa) ga() += g.topRows(va().rows());
      if (wb) gb() += g.bottomRows(vb().rows());
      break;
    case Op::kSliceCols:
      if (wa) ga().middleCols(n.i0, n.i1) += g;
      break;
    case Op::kSliceRows:
      if (wa) ga().middleRows(n.i0, n.i1) += g;
      break;
    case Op::kPermuteRows:
      if (wa)
        for (size_t r = 0; r < n.idx.size(); ++r) ga().row(n.idx[r]) += g.row(Index(r));
      break;
    case Op::kPermuteColsBlocked:
      if (wa) {
        const int blocks = n.i0;
        const Index k = n.value.cols();
        const Index br = n.value.rows() / blocks;
        for (int bl = 0; bl < blocks; ++bl)
          for (Index j = 0; j < k; ++j)
            ga().block(bl * br, n.idx[size_t(bl * k + j)], br, 1) += g.block(bl * br, j, br, 1);
      }
      break;
    case Op::kRepeatEachRow:
      if (wa) {
        const int times = n.i0;
        for (Index r = 0; r < va().rows(); ++r)
          ga().row(r) += g.middleRows(r * times, times).colwise().sum();
      }
      break;
    case Op::kTileRows:
      if (wa) {
        const Index br = va().rows();
        for (int k = 0; k < n.i0; ++k) ga() += g.middleRows(k * br, br);
      }
      break;
    case Op::kAlphaCombine: {
      const int blocks = n.i0, slots = n.i1, patches = n.i2;
      const Mat& alpha = vb();
      const Mat& feats = va();
      for (int bl = 0; bl < blocks; ++bl)
        for (int k = 0; k < slots; ++k) {
          const Index fr = (Index(bl) * slots + k) * patches;
          const Index ar = Index(bl) * patches;
          if (wa)
            ga().middleRows(fr, patches).noalias() +=
                alpha.block(ar, k, patches, 1).asDiagonal() * g.middleRows(ar, patches);
          if (wb)
            gb().block(ar, k, patches, 1) +=
                g.middleRows(ar, patches).cwiseProduct(feats.middleRows(fr, patches)).rowwise().sum();
        }
      break;
    }
    case Op::kSlotMajorToCols:
      if (wa) {
        const int blocks = n.i0, slots = n.i1, patches = n.i2;
        for (int bl = 0; bl < blocks; ++bl)
          for (int k = 0; k < slots; ++k)
            ga().middleRows((Index(bl) * slots + k) * patches, patches) +=
                g.block(Index(bl) * patches, k, patches, 1);
      }
      break;
    case Op::kGatherRowwise:
      if (wa)
        for (Index r = 0; r < n.value.rows(); ++r) ga()(r, n.idx[size_t(r)]) += g(r, 0);
      break;
    case Op::kSumAll:
      if (wa) ga().array() += g(0, 0);
      break;
    case Op::kMeanAll:
      if (wa) ga().array() += g(0, 0) / double(va().size());
      break;
    case Op::kAddRowVec:
      if (wa) ga() += g;
      if (wb) gb().row(0) += g.colwise().sum();
      break;
    case Op::kMulScalarVar:
      if (wa) ga() += g * vb()(0, 0);
      if (wb) gb()(0, 0) += g.cwiseProduct(va()).sum();
      break;
    case Op::kAddConstMat:
      if (wa) ga() += g;
      break;
    case Op::kShiftDownBlocked:
      if (wa) {
        const int blocks = n.i0;
        const Index br = n.value.rows() / blocks;
        for (int bl = 0; bl < blocks; ++bl)
          if (br > 1)
            ga().middleRows(bl * br, br - 1) += g.middleRows(bl * br + 1, br - 1);
      }
      break;
    case Op::kTranspose:
      if (wa) ga() += g.transpose();
      break;
  }
}

}  // namespace mufasa::ad
