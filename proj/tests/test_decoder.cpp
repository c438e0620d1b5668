#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fd_check.hpp"
#include "mufasa/decoder.hpp"
#include "oracles.hpp"

using namespace mufasa;
using mufasa::testing::random_mat;

TEST_CASE("transformer decode: shapes and row-stochastic mask") {
  Rng rng(3);
  const int n = 16, k = 3, d_emb = 6, d_slot = 8;
  TransformerDecoderParams params =
      make_transformer_decoder(d_emb, d_slot, 8, 2, 2, n, DecodeOrder::raster, rng);
  const Mat slots = random_mat(k, d_slot, rng);
  const Mat target = random_mat(n, d_emb, rng);
  const DecodeResult res = transformer_decode(slots, target, params);
  CHECK(res.reconstruction.rows() == n);
  CHECK(res.reconstruction.cols() == d_emb);
  CHECK(res.mask.rows() == n);
  CHECK(res.mask.cols() == k);
  for (Index r = 0; r < n; ++r)
    CHECK(res.mask.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("causality: perturbing a decoding step leaves earlier steps bit-exact") {
  Rng rng(7);
  const int n = 12, k = 2, d_emb = 5, d_slot = 6;
  for (DecodeOrder order : {DecodeOrder::raster, DecodeOrder::reverse, DecodeOrder::random}) {
    TransformerDecoderParams params =
        make_transformer_decoder(d_emb, d_slot, 8, 2, 2, n, order, rng);
    const Mat slots = random_mat(k, d_slot, rng);
    const Mat target = random_mat(n, d_emb, rng);
    const DecodeResult base = transformer_decode(slots, target, params);

    const int step_j = 5;  // perturb the token consumed after step_j
    Mat perturbed = target;
    perturbed.row(params.perm[size_t(step_j)]).array() += 0.5;
    const DecodeResult changed = transformer_decode(slots, perturbed, params);

    // outputs are in raster order; steps 0..step_j decode before the
    // perturbed token is visible
    for (int t = 0; t <= step_j; ++t) {
      const int raster = params.perm[size_t(t)];
      CHECK(base.reconstruction.row(raster) == changed.reconstruction.row(raster));
      CHECK(base.mask.row(raster) == changed.mask.row(raster));
    }
    bool later_changed = false;
    for (int t = step_j + 1; t < n; ++t)
      later_changed = later_changed ||
                      base.reconstruction.row(params.perm[size_t(t)]) !=
                          changed.reconstruction.row(params.perm[size_t(t)]);
    CHECK(later_changed);
  }
}

TEST_CASE("transformer decode with K=1 yields an all-ones mask") {
  Rng rng(11);
  TransformerDecoderParams params =
      make_transformer_decoder(4, 5, 8, 2, 2, 8, DecodeOrder::raster, rng);
  const DecodeResult res =
      transformer_decode(random_mat(1, 5, rng), random_mat(8, 4, rng), params);
  CHECK((res.mask.array() == 1.0).all());
}

TEST_CASE("broadcast decode: degenerate and symmetric slots") {
  Rng rng(13);
  const int n = 9, d_emb = 5, d_slot = 6;
  BroadcastDecoderParams params = make_broadcast_decoder(d_emb, d_slot, 16, 4, n, rng);

  SUBCASE("K=1: all-ones alpha, reconstruction equals the slot's map") {
    const Mat slot = random_mat(1, d_slot, rng);
    const DecodeResult res = broadcast_decode(slot, params);
    CHECK((res.mask.array() == 1.0).all());
    // with a single slot the convex combination is the slot's feature map
    Mat x(n, d_slot);
    for (int i = 0; i < n; ++i) x.row(i) = slot.row(0) + params.posenc.row(i);
    for (size_t l = 0; l < params.mlp.size(); ++l) {
      x = (x * params.mlp[l].w).rowwise() + params.mlp[l].b.row(0);
      if (l + 1 < params.mlp.size()) x = x.cwiseMax(0.0);
    }
    CHECK((res.reconstruction - x.leftCols(d_emb)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("two identical slots split alpha evenly, reconstruction unchanged") {
    Mat slots(2, d_slot);
    const Mat one = random_mat(1, d_slot, rng);
    slots.row(0) = one.row(0);
    slots.row(1) = one.row(0);
    const DecodeResult res = broadcast_decode(slots, params);
    CHECK((res.mask.array() - 0.5).cwiseAbs().maxCoeff() < 1e-12);
    const DecodeResult single = broadcast_decode(one, params);
    CHECK((res.reconstruction - single.reconstruction).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("random K=3 reconstruction matches the direct convex combination") {
    const Mat slots = random_mat(3, d_slot, rng);
    const DecodeResult res = broadcast_decode(slots, params);
    for (Index r = 0; r < n; ++r)
      CHECK(res.mask.row(r).sum() == doctest::Approx(1.0).epsilon(1e-9));
    // recompute each slot's map independently and combine with the alphas
    for (int patch = 0; patch < n; ++patch) {
      Eigen::RowVectorXd expect = Eigen::RowVectorXd::Zero(d_emb);
      for (int s = 0; s < 3; ++s) {
        Eigen::RowVectorXd x = slots.row(s) + params.posenc.row(patch);
        for (size_t l = 0; l < params.mlp.size(); ++l) {
          x = (x * params.mlp[l].w) + params.mlp[l].b.row(0);
          if (l + 1 < params.mlp.size()) x = x.cwiseMax(0.0);
        }
        expect += res.mask(patch, s) * x.leftCols(d_emb);
      }
      CHECK((res.reconstruction.row(patch) - expect).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("broadcast decode is equivariant to slot permutation") {
  Rng rng(17);
  const int n = 8, d_emb = 4, d_slot = 5, k = 4;
  BroadcastDecoderParams params = make_broadcast_decoder(d_emb, d_slot, 12, 3, n, rng);
  const Mat slots = random_mat(k, d_slot, rng);
  const std::vector<int> perm = {3, 0, 2, 1};
  Mat permuted(k, d_slot);
  for (int i = 0; i < k; ++i) permuted.row(i) = slots.row(perm[size_t(i)]);

  const DecodeResult base = broadcast_decode(slots, params);
  const DecodeResult swapped = broadcast_decode(permuted, params);
  CHECK((base.reconstruction - swapped.reconstruction).cwiseAbs().maxCoeff() < 1e-9);
  for (int i = 0; i < k; ++i)
    CHECK((swapped.mask.col(i) - base.mask.col(perm[size_t(i)])).cwiseAbs().maxCoeff() < 1e-9);
}

namespace {

template <typename Params, typename BindFn, typename ForwardFn>
void decoder_fd_check(Params& params, BindFn bind_fn, ForwardFn forward_fn, Mat& slots) {
  auto loss_fn = [&]() {
    ad::Tape t;
    ParamBinding pb(t, false);
    const auto vars = bind_fn(pb, params);
    const ad::Var s = t.constant(slots);
    const ad::Var recon = forward_fn(t, s, vars);
    return t.mean_all(t.cmul(recon, recon)).value()(0, 0);
  };

  ad::Tape t;
  ParamBinding pb(t, true);
  const auto vars = bind_fn(pb, params);
  const ad::Var s = t.leaf(slots);
  const ad::Var recon = forward_fn(t, s, vars);
  const ad::Var loss = t.mean_all(t.cmul(recon, recon));
  t.backward(loss);

  std::vector<std::pair<std::string, Mat*>> params_list;
  std::map<std::string, Mat> grads;
  int idx = 0;
  pb.for_each_grad([&](Mat& param, const Mat& grad) {
    const std::string name = "p" + std::to_string(idx++);
    params_list.push_back({name, &param});
    grads[name] = grad;
  });
  params_list.push_back({"slots", &slots});
  grads["slots"] = t.grad(s);

  const auto report = mufasa::testing::finite_difference_check(
      params_list, loss_fn, [&](const std::string& name) { return grads.at(name); });
  CHECK_MESSAGE(report.max_rel_err < 1e-4, report.worst);
}

}  // namespace

TEST_CASE("decoder gradients match finite differences") {
  Rng rng(23);
  const int n = 16, k = 3, d_emb = 6, d_slot = 8;
  Mat slots = random_mat(k, d_slot, rng, 0.5);
  const Mat target = random_mat(n, d_emb, rng, 0.5);

  SUBCASE("transformer") {
    TransformerDecoderParams params =
        make_transformer_decoder(d_emb, d_slot, 8, 2, 2, n, DecodeOrder::raster, rng);
    decoder_fd_check(
        params,
        [](ParamBinding& pb, TransformerDecoderParams& p) { return bind_decoder(pb, p); },
        [&](ad::Tape& t, ad::Var s, const TransformerDecoderVars& vars) {
          return transformer_decode_forward(t, s, t.constant(target), vars, params, 1)
              .reconstruction;
        },
        slots);
  }

  SUBCASE("broadcast") {
    BroadcastDecoderParams params = make_broadcast_decoder(d_emb, d_slot, 8, 3, n, rng);
    decoder_fd_check(
        params, [](ParamBinding& pb, BroadcastDecoderParams& p) { return bind_decoder(pb, p); },
        [&](ad::Tape& t, ad::Var s, const BroadcastDecoderVars& vars) {
          return broadcast_decode_forward(t, s, vars, params, 1).reconstruction;
        },
        slots);
  }
}
