#pragma once

#include "mufasa/support.hpp"

namespace mufasa::ad {

// Reverse-mode tape over dense double matrices. Operations are coarse
// (matrix products, row softmax, layer norm, ...) so the per-node overhead
// stays negligible next to the Eigen kernels they wrap.
//
// Batched variants ("Bmm*", "*Blocked") treat their operands as B equally
// sized row blocks, one block per image, so a whole minibatch runs through a
// single graph. Backward visits nodes in reverse construction order; only
// ancestors of the loss that require gradients are touched.
//
// Permutation-typed inputs (Hungarian alignment, argmax targets) enter the
// graph as plain index arrays: they are data, not differentiable values.

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kCMul,
  kScale,
  kAddScalar,
  kMatMulNN,
  kMatMulNT,
  kMatMulTN,
  kBmmNN,
  kBmmNT,
  kBmmTN,
  kSoftmaxRows,
  kNormalizeRows,
  kNormalizeColsBlocked,
  kRelu,
  kGelu,
  kSigmoid,
  kTanh,
  kLog,
  kExp,
  kLayerNormRows,
  kConcatCols,
  kConcatRows,
  kSliceCols,
  kSliceRows,
  kPermuteRows,
  kPermuteColsBlocked,
  kRepeatEachRow,
  kTileRows,
  kAlphaCombine,
  kSlotMajorToCols,
  kGatherRowwise,
  kSumAll,
  kMeanAll,
  kAddRowVec,
  kMulScalarVar,
  kAddConstMat,
  kShiftDownBlocked,
  kTranspose,
};

struct Node {
  Mat value;
  Mat grad;
  Mat aux;                // op-dependent cache (row sums, normalized input, ...)
  std::vector<int> idx;   // permutations / gather indices
  double s0 = 0.0;
  int a = -1, b = -1, c = -1;
  int i0 = 0, i1 = 0, i2 = 0;
  Op op = Op::kLeaf;
  bool needs_grad = false;
};

class Tape {
 public:
  explicit Tape(size_t reserve_nodes = 256) { nodes_.reserve(reserve_nodes); }

  Var leaf(Mat v, bool needs_grad = true);
  Var constant(Mat v) { return leaf(std::move(v), false); }

  const Mat& value(Var v) const { return nodes_[size_t(v.id)].value; }
  // Gradient of the last backward() target w.r.t. v; zero matrix if v was not
  // on the path.
  Mat grad(Var v) const;

  void backward(Var scalar_loss);

  size_t size() const { return nodes_.size(); }

  // --- graph construction -------------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var cmul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var matmul(Var a, Var b);      // A * B
  Var matmul_nt(Var a, Var b);   // A * B^T
  Var matmul_tn(Var a, Var b);   // A^T * B
  Var bmm(Var a, Var b, int blocks);     // per-block A_i * B_i
  Var bmm_nt(Var a, Var b, int blocks);  // per-block A_i * B_i^T
  Var bmm_tn(Var a, Var b, int blocks);  // per-block A_i^T * B_i
  Var softmax_rows(Var a);
  Var normalize_rows(Var a, double eps);          // x / (rowsum + eps)
  Var normalize_cols_blocked(Var a, int blocks, double eps);
  Var relu(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var log(Var a);
  Var exp(Var a);
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-6);
  Var concat_cols(Var a, Var b);
  Var concat_rows(Var a, Var b);
  Var slice_cols(Var a, int start, int count);
  Var slice_rows(Var a, int start, int count);
  Var permute_rows(Var a, std::vector<int> perm);  // y.row(i) = x.row(perm[i])
  Var permute_cols_blocked(Var a, int blocks, std::vector<int> perms);
  Var repeat_each_row(Var a, int times);
  Var tile_rows(Var a, int times);
  Var alpha_combine(Var feats, Var alpha, int blocks, int slots, int patches);
  Var slot_major_to_cols(Var a, int blocks, int slots, int patches);
  Var gather_rowwise(Var a, std::vector<int> col_per_row);
  Var sum_all(Var a);
  Var mean_all(Var a);
  Var add_rowvec(Var a, Var row);  // broadcast 1 x d over rows
  Var mul_scalar_var(Var a, Var scalar_1x1);
  Var add_const(Var a, Mat constant);
  Var shift_down_blocked(Var a, int blocks);  // per block: row 0 -> zeros, row t -> x row t-1
  Var transpose(Var a);

 private:
  friend struct Var;
  Var push(Node&& n);
  const Node& at(Var v) const;
  void backprop_node(int i);

  std::vector<Node> nodes_;
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }

}  // namespace mufasa::ad
