#pragma once

#include "mufasa/autodiff.hpp"
#include "mufasa/support.hpp"

namespace mufasa {

// Parameter containers are plain structs of dense matrices (biases and
// 1-D parameters are stored 1 x d). Training binds them onto a tape per step
// via ParamBinding and reads gradients back through the same mapping.

struct LinearParams {
  Mat w;  // in x out
  Mat b;  // 1 x out
  Index in() const { return w.rows(); }
  Index out() const { return w.cols(); }
};

struct LayerNormParams {
  Mat gamma;  // 1 x d
  Mat beta;   // 1 x d
};

struct GruParams {
  Mat w_ir, w_iz, w_in;  // input x hidden
  Mat w_hr, w_hz, w_hn;  // hidden x hidden
  Mat b_ir, b_iz, b_in;  // 1 x hidden
  Mat b_hr, b_hz, b_hn;  // 1 x hidden
};

LinearParams make_linear(int in, int out, Rng& rng);
LayerNormParams make_layer_norm(int d);
GruParams make_gru(int input, int hidden, Rng& rng);
Mat truncated_normal_matrix(Index rows, Index cols, double stddev, Rng& rng);
Mat xavier_matrix(Index rows, Index cols, Rng& rng);

// Binds parameter matrices as tape leaves and remembers the mapping so
// gradients can be accumulated back after backward().
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, bool needs_grad) : tape_(&tape), needs_grad_(needs_grad) {}

  ad::Var bind(Mat& m) {
    const ad::Var v = tape_->leaf(m, needs_grad_);
    entries_.push_back({&m, v});
    return v;
  }

  // fn(parameter, gradient) for every bound parameter.
  void for_each_grad(const std::function<void(Mat&, const Mat&)>& fn) const {
    for (const auto& [mat, var] : entries_) fn(*mat, var.tape->grad(var));
  }

  ad::Tape& tape() { return *tape_; }
  bool needs_grad() const { return needs_grad_; }

 private:
  ad::Tape* tape_;
  bool needs_grad_;
  std::vector<std::pair<Mat*, ad::Var>> entries_;
};

struct LinearVars {
  ad::Var w, b;
};
struct LayerNormVars {
  ad::Var gamma, beta;
};
struct GruVars {
  ad::Var w_ir, w_iz, w_in, w_hr, w_hz, w_hn;
  ad::Var b_ir, b_iz, b_in, b_hr, b_hz, b_hn;
};

LinearVars bind(ParamBinding& pb, LinearParams& p);
LayerNormVars bind(ParamBinding& pb, LayerNormParams& p);
GruVars bind(ParamBinding& pb, GruParams& p);

ad::Var linear(ad::Tape& t, ad::Var x, const LinearVars& p);
ad::Var layer_norm(ad::Tape& t, ad::Var x, const LayerNormVars& p);
ad::Var gru_cell(ad::Tape& t, ad::Var input, ad::Var hidden, const GruVars& p);

// Multi-head self/cross attention over row blocks (one block per image).
// q: (B*Nq) x width, k/v: (B*Nk) x width; optional additive logit mask
// (B*Nq) x Nk (e.g. causal). When head_softmaxes is non-null the per-head
// post-softmax scores are appended.
ad::Var multihead_attention(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, int heads, int blocks,
                            const Mat* additive_mask = nullptr,
                            std::vector<ad::Var>* head_softmaxes = nullptr);

void visit_params(LinearParams& p, const std::string& prefix,
                  const std::function<void(const std::string&, Mat&)>& fn);
void visit_params(LayerNormParams& p, const std::string& prefix,
                  const std::function<void(const std::string&, Mat&)>& fn);
void visit_params(GruParams& p, const std::string& prefix,
                  const std::function<void(const std::string&, Mat&)>& fn);

}  // namespace mufasa
