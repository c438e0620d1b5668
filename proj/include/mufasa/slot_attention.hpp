#pragma once

#include "mufasa/nn.hpp"

namespace mufasa {

enum class SlotInitMode { gaussian, learned };

struct SlotInitParams {
  SlotInitMode mode = SlotInitMode::gaussian;
  int slots = 0;
  Mat mean;       // 1 x d_slot (gaussian)
  Mat log_sigma;  // 1 x d_slot (gaussian)
  Mat learned;    // K x d_slot (learned)
};

// One slot-attention module: key/value project features, query projects
// slots, a GRU plus residual MLP refines slots over `iters` rounds. Modules
// for different feature layers never share parameters.
struct SaParams {
  LinearParams key;    // d_emb -> d
  LinearParams query;  // d_slot -> d
  LinearParams value;  // d_emb -> d_slot
  GruParams gru;       // input d_slot, hidden d_slot
  LinearParams mlp_in;   // d_slot -> hidden
  LinearParams mlp_out;  // hidden -> d_slot
  SlotInitParams init;
  int iters = 3;

  int d_emb() const { return int(key.in()); }
  int attn_dim() const { return int(key.out()); }
  int d_slot() const { return int(value.out()); }
  int slots() const { return init.slots; }
};

SaParams make_sa_params(int d_emb, int d_slot, int attn_dim, int mlp_hidden, int slots,
                        SlotInitMode mode, int iters, Rng& rng);

// Column sums get this floor before renormalization, keeping dead slots from
// dividing by zero.
inline constexpr double kSlotUpdateEps = 1e-8;

// Gaussian mode samples s_k = mu + exp(log_sigma) .* eps_k with i.i.d.
// standard-normal eps under `seed`; learned mode returns the stored matrix.
Mat init_slots(const SaParams& params, std::uint64_t seed);

// Eq.-style scaled dot-product assignment: softmax over the K slots of
// (f_Key(h) f_Query(S)^T / sqrt(d)); every row sums to 1.
Mat compute_attention(const Eigen::Ref<const Mat>& features, const Eigen::Ref<const Mat>& slots,
                      const SaParams& params);

struct SaResult {
  Mat slots;  // K x d_slot
  Mat mask;   // N x K, rows sum to 1 (from the final attention evaluation)
};

// T refinement rounds; the returned mask is the attention computed at the
// top of the final round, i.e. from the pre-update slots (for T = 0, the
// attention of the initial slots). Throws NumericError naming the iteration
// if an intermediate becomes non-finite.
SaResult run_slot_attention(const Eigen::Ref<const Mat>& features, const SaParams& params,
                            std::uint64_t seed, std::vector<Mat>* iteration_masks = nullptr);
SaResult run_slot_attention_from(const Eigen::Ref<const Mat>& features, const SaParams& params,
                                 const Eigen::Ref<const Mat>& initial_slots,
                                 std::vector<Mat>* iteration_masks = nullptr);

// --- tape interface (batched) ----------------------------------------------

struct SaVars {
  LinearVars key, query, value;
  GruVars gru;
  LinearVars mlp_in, mlp_out;
  ad::Var init_mean, init_log_sigma, init_learned;
};

SaVars bind_sa(ParamBinding& pb, SaParams& p);

struct SaForward {
  ad::Var slots;  // (B*K) x d_slot
  ad::Var mask;   // (B*N) x K
};

// `features`: (B*N) x d_emb. For gaussian init, `noise` supplies the
// (B*K) x d_slot standard-normal draws; learned init ignores it. When
// `initial_slots` is valid it overrides the module's initializer entirely.
SaForward sa_forward(ad::Tape& t, ad::Var features, const SaVars& vars, const SaParams& meta,
                     int batch, const Mat* noise, ad::Var initial_slots = {},
                     std::vector<ad::Var>* iteration_masks = nullptr);

}  // namespace mufasa
