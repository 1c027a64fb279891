#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cvc/blocks.hpp"
#include "cvc/model.hpp"
#include "testutil.hpp"

using namespace cvc;
using test::fd_max_rel_err;
using test::random_tensor;

namespace {

// Naive dense reference: per-head softmax(q k^T / sqrt(Dh)) v with explicit
// loops, then output projection applied by the caller.
TensorD naive_attention_core(const TensorD& Q, const TensorD& K, const TensorD& V,
                             int heads) {
  const int64_t Nq = Q.rows(), Nk = K.rows(), D = Q.cols(), Dh = D / heads;
  TensorD out({Nq, D});
  for (int h = 0; h < heads; ++h)
    for (int64_t i = 0; i < Nq; ++i) {
      std::vector<double> scores(Nk);
      for (int64_t j = 0; j < Nk; ++j) {
        double s = 0;
        for (int64_t d = 0; d < Dh; ++d) s += Q.at(i, h * Dh + d) * K.at(j, h * Dh + d);
        scores[j] = s / std::sqrt(static_cast<double>(Dh));
      }
      double mx = *std::max_element(scores.begin(), scores.end());
      double z = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (int64_t d = 0; d < Dh; ++d) {
        double acc = 0;
        for (int64_t j = 0; j < Nk; ++j) acc += scores[j] / z * V.at(j, h * Dh + d);
        out.at(i, h * Dh + d) = acc;
      }
    }
  return out;
}

void zero_all(ParamSet<double>& ps) {
  for (auto& p : ps) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
}

}  // namespace

TEST_CASE("attention with a single key returns V through identity proj") {
  GraphD g;
  TensorD q = TensorD({1, 4}, {0.3, -0.2, 0.9, 0.1});
  TensorD k = TensorD({1, 4}, {2.0, 0.0, -1.0, 0.5});
  TensorD v = TensorD({1, 4}, {1.0, 2.0, 3.0, 4.0});
  auto out = g.attention(g.constant(q), g.constant(k), g.constant(v), 2);
  for (int64_t c = 0; c < 4; ++c)
    CHECK(g.val(out).at(0, c) == doctest::Approx(v.at(0, c)).epsilon(1e-12));
}

TEST_CASE("attention weights rows sum to one (via uniform V probe)") {
  // With V = all-ones, the output equals the row sums of the attention
  // weights, which must be 1.
  auto rng = test::rng_of(31);
  GraphD g;
  auto q = g.constant(random_tensor({5, 8}, rng));
  auto k = g.constant(random_tensor({7, 8}, rng));
  auto v = g.constant(TensorD::full({7, 8}, 1.0));
  auto out = g.attention(q, k, v, 4);
  for (double x : g.val(out).data) CHECK(x == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention matches the naive dense oracle") {
  auto rng = test::rng_of(32);
  for (int heads : {1, 2, 4}) {
    TensorD Q = random_tensor({3, 4}, rng);
    TensorD K = random_tensor({5, 4}, rng);
    TensorD V = random_tensor({5, 4}, rng);
    GraphD g;
    auto out = g.attention(g.constant(Q), g.constant(K), g.constant(V), heads);
    TensorD ref = naive_attention_core(Q, K, V, heads);
    for (int64_t i = 0; i < ref.numel(); ++i)
      CHECK(g.val(out).data[i] == doctest::Approx(ref.data[i]).epsilon(1e-6));
  }
}

TEST_CASE("attention rejects empty context and bad head split") {
  GraphD g;
  auto q = g.constant(TensorD({2, 4}));
  auto empty = g.constant(TensorD({0, 4}));
  CHECK_THROWS_AS(g.attention(q, empty, empty, 2), DimError);
  auto k = g.constant(TensorD({2, 4}));
  CHECK_THROWS_AS(g.attention(q, k, k, 3), DimError);
}

TEST_CASE("attention core gradient check") {
  auto rng = test::rng_of(33);
  TensorD Q = random_tensor({3, 6}, rng);
  TensorD K = random_tensor({4, 6}, rng);
  TensorD V = random_tensor({4, 6}, rng);
  TensorD w = random_tensor({3, 6}, rng);
  auto run = [&](int which, bool backward) -> TensorD {
    GraphD g;
    auto qi = g.input(Q), ki = g.input(K), vi = g.input(V);
    auto y = g.sum(g.mul(g.attention(qi, ki, vi, 3), g.constant(w)));
    if (backward) {
      g.backward(y);
      return g.grad_of(which == 0 ? qi : which == 1 ? ki : vi);
    }
    return TensorD::scalar_of(g.val(y).scalar());
  };
  CHECK(fd_max_rel_err([&]() { return run(0, false).scalar(); }, Q, run(0, true)) <= 1e-6);
  CHECK(fd_max_rel_err([&]() { return run(1, false).scalar(); }, K, run(1, true)) <= 1e-6);
  CHECK(fd_max_rel_err([&]() { return run(2, false).scalar(); }, V, run(2, true)) <= 1e-6);
}

TEST_CASE("encoder block: zero weights make it the identity") {
  ParamSet<double> ps;
  Init<double> init(41);
  auto blk = EncoderBlockParams<double>::create(ps, "blk", 8, 2, init);
  zero_all(ps);
  auto rng = test::rng_of(42);
  TensorD x = random_tensor({5, 8}, rng);
  GraphD g;
  auto y = blk.forward(g, g.constant(x));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.val(y).data[i] == x.data[i]);
}

TEST_CASE("encoder block: zeroing only sublayer output projections is identity") {
  ParamSet<double> ps;
  Init<double> init(43);
  auto blk = EncoderBlockParams<double>::create(ps, "blk", 8, 2, init);
  std::fill(blk.attn.proj.W->value.data.begin(), blk.attn.proj.W->value.data.end(), 0.0);
  std::fill(blk.attn.proj.b->value.data.begin(), blk.attn.proj.b->value.data.end(), 0.0);
  std::fill(blk.mlp.fc_out.W->value.data.begin(), blk.mlp.fc_out.W->value.data.end(), 0.0);
  std::fill(blk.mlp.fc_out.b->value.data.begin(), blk.mlp.fc_out.b->value.data.end(), 0.0);
  auto rng = test::rng_of(44);
  TensorD x = random_tensor({4, 8}, rng);
  GraphD g;
  auto y = blk.forward(g, g.constant(x));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.val(y).data[i] == x.data[i]);
}

TEST_CASE("encoder block is permutation equivariant") {
  ParamSet<double> ps;
  Init<double> init(45);
  auto blk = EncoderBlockParams<double>::create(ps, "blk", 8, 4, init);
  auto rng = test::rng_of(46);
  TensorD x = random_tensor({6, 8}, rng);
  std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
  TensorD xp({6, 8});
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t c = 0; c < 8; ++c) xp.at(r, c) = x.at(perm[r], c);
  GraphD g;
  auto y = blk.forward(g, g.constant(x));
  auto yp = blk.forward(g, g.constant(xp));
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t c = 0; c < 8; ++c)
      CHECK(g.val(yp).at(r, c) == doctest::Approx(g.val(y).at(perm[r], c)).epsilon(1e-9));
}

TEST_CASE("encoder block gradient check") {
  ParamSet<double> ps;
  Init<double> init(47);
  auto blk = EncoderBlockParams<double>::create(ps, "blk", 8, 2, init);
  auto rng = test::rng_of(48);
  TensorD x = random_tensor({4, 8}, rng);
  TensorD w = random_tensor({4, 8}, rng);
  auto loss_fn = [&]() {
    GraphD g;
    return g.val(g.sum(g.mul(blk.forward(g, g.constant(x)), g.constant(w)))).scalar();
  };
  ps.zero_grad();
  {
    GraphD g;
    g.backward(g.sum(g.mul(blk.forward(g, g.constant(x)), g.constant(w))));
  }
  for (auto& p : ps) {
    INFO(p->name);
    CHECK(fd_max_rel_err(loss_fn, p->value, p->grad, 1e-5, 32) <= 1e-4);
  }
}

TEST_CASE("cross block reduces to encoder block when cross value path is zero") {
  ParamSet<double> ps;
  Init<double> init(51);
  auto cb = CrossBlockParams<double>::create(ps, "cb", 8, 2, init);
  std::fill(cb.cross_attn.wv.W->value.data.begin(), cb.cross_attn.wv.W->value.data.end(), 0.0);
  std::fill(cb.cross_attn.wv.b->value.data.begin(), cb.cross_attn.wv.b->value.data.end(), 0.0);
  std::fill(cb.cross_attn.proj.b->value.data.begin(), cb.cross_attn.proj.b->value.data.end(), 0.0);
  // equivalent encoder block sharing the self-attention weights
  EncoderBlockParams<double> eb;
  eb.norm1 = cb.norm1;
  eb.attn = cb.self_attn;
  eb.norm2 = cb.norm3;
  eb.mlp = cb.mlp;
  auto rng = test::rng_of(52);
  TensorD x = random_tensor({4, 8}, rng);
  TensorD y = random_tensor({5, 8}, rng);
  GraphD g;
  auto a = cb.forward(g, g.constant(x), g.constant(y));
  auto b = eb.forward(g, g.constant(x));
  for (int64_t i = 0; i < g.val(a).numel(); ++i)
    CHECK(g.val(a).data[i] == doctest::Approx(g.val(b).data[i]).epsilon(1e-12));
}

TEST_CASE("cross attention over the reference stream is a set operation") {
  ParamSet<double> ps;
  Init<double> init(53);
  auto cb = CrossBlockParams<double>::create(ps, "cb", 8, 2, init);
  auto rng = test::rng_of(54);
  TensorD x = random_tensor({4, 8}, rng);
  TensorD y = random_tensor({6, 8}, rng);
  std::vector<int64_t> perm = {5, 2, 0, 4, 1, 3};
  TensorD yp({6, 8});
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t c = 0; c < 8; ++c) yp.at(r, c) = y.at(perm[r], c);
  GraphD g;
  auto a = cb.forward(g, g.constant(x), g.constant(y));
  auto b = cb.forward(g, g.constant(x), g.constant(yp));
  for (int64_t i = 0; i < g.val(a).numel(); ++i)
    CHECK(g.val(a).data[i] == doctest::Approx(g.val(b).data[i]).epsilon(1e-9));
}

TEST_CASE("cross block rejects an empty reference stream") {
  ParamSet<double> ps;
  Init<double> init(55);
  auto cb = CrossBlockParams<double>::create(ps, "cb", 8, 2, init);
  GraphD g;
  auto rng = test::rng_of(56);
  CHECK_THROWS_AS(
      cb.forward(g, g.constant(random_tensor({3, 8}, rng)), g.constant(TensorD({0, 8}))),
      DimError);
}

TEST_CASE("cross block gradient check (x, y and all weights)") {
  ParamSet<double> ps;
  Init<double> init(57);
  auto cb = CrossBlockParams<double>::create(ps, "cb", 8, 2, init);
  auto rng = test::rng_of(58);
  TensorD x = random_tensor({3, 8}, rng);
  TensorD y = random_tensor({4, 8}, rng);
  TensorD w = random_tensor({3, 8}, rng);
  auto run = [&](int which, bool backward) -> TensorD {
    GraphD g;
    auto xi = g.input(x), yi = g.input(y);
    auto out = g.sum(g.mul(cb.forward(g, xi, yi), g.constant(w)));
    if (backward) {
      g.backward(out);
      return g.grad_of(which == 0 ? xi : yi);
    }
    return TensorD::scalar_of(g.val(out).scalar());
  };
  auto loss_fn = [&]() { return run(0, false).scalar(); };
  CHECK(fd_max_rel_err(loss_fn, x, run(0, true)) <= 1e-4);
  CHECK(fd_max_rel_err(loss_fn, y, run(1, true)) <= 1e-4);
  ps.zero_grad();
  run(0, true);
  run(1, true);  // grads accumulate twice; halve when comparing
  for (auto& p : ps) {
    TensorD half = p->grad;
    for (auto& v : half.data) v *= 0.5;
    INFO(p->name);
    CHECK(fd_max_rel_err(loss_fn, p->value, half, 1e-5, 24) <= 1e-4);
  }
}

TEST_CASE("cat stack with zero view embeddings and empty Y equals plain encoder stack") {
  ParamSet<double> ps;
  Init<double> init(61);
  std::vector<EncoderBlockParams<double>> blocks;
  blocks.push_back(EncoderBlockParams<double>::create(ps, "b0", 8, 2, init));
  blocks.push_back(EncoderBlockParams<double>::create(ps, "b1", 8, 2, init));
  auto ve = ViewEmbeddings<double>::create(ps, "view", 8, init);
  std::fill(ve.v1->value.data.begin(), ve.v1->value.data.end(), 0.0);
  std::fill(ve.v2->value.data.begin(), ve.v2->value.data.end(), 0.0);
  auto rng = test::rng_of(62);
  TensorD x = random_tensor({5, 8}, rng);
  GraphD g;
  auto a = cat_stack_forward(g, g.constant(x), g.constant(TensorD({0, 8})), ve, blocks);
  auto b = g.constant(x);
  for (const auto& blk : blocks) b = blk.forward(g, b);
  for (int64_t i = 0; i < g.val(a).numel(); ++i)
    CHECK(g.val(a).data[i] == doctest::Approx(g.val(b).data[i]).epsilon(1e-12));
}

TEST_CASE("cat stack swap symmetry") {
  ParamSet<double> ps;
  Init<double> init(63);
  std::vector<EncoderBlockParams<double>> blocks;
  blocks.push_back(EncoderBlockParams<double>::create(ps, "b0", 8, 2, init));
  auto ve = ViewEmbeddings<double>::create(ps, "view", 8, init);
  auto rng = test::rng_of(64);
  TensorD x = random_tensor({3, 8}, rng);
  TensorD y = random_tensor({3, 8}, rng);
  GraphD g;
  // unswapped: read the first half
  auto first = cat_stack_forward(g, g.constant(x), g.constant(y), ve, blocks);
  // swapped inputs and embeddings: read the second half
  ViewEmbeddings<double> swapped{ve.v2, ve.v1};
  typename GraphD::Value full{};
  cat_stack_forward(g, g.constant(y), g.constant(x), swapped, blocks, &full);
  auto second = g.slice_rows(full, 3, 6);
  for (int64_t i = 0; i < g.val(first).numel(); ++i)
    CHECK(g.val(first).data[i] == doctest::Approx(g.val(second).data[i]).epsilon(1e-9));
}

TEST_CASE("one cat layer costs more flops than one cross layer at equal N") {
  const int64_t N = 196, D = 512;
  CHECK(flops_cat_layer(N, D) > flops_cross_layer(N, D));
}

namespace {

// Term-by-term reference for the pre-norm equations, all plain loops.
TensorD naive_layer_norm(const TensorD& x, const TensorD& gamma, const TensorD& beta,
                         double eps) {
  TensorD out(x.shape);
  const int64_t C = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    double mean = 0, var = 0;
    for (int64_t c = 0; c < C; ++c) mean += x.at(r, c);
    mean /= C;
    for (int64_t c = 0; c < C; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
    var /= C;
    for (int64_t c = 0; c < C; ++c)
      out.at(r, c) = gamma.data[c] * (x.at(r, c) - mean) / std::sqrt(var + eps) +
                     beta.data[c];
  }
  return out;
}

TensorD naive_linear(const TensorD& x, const TensorD& W, const TensorD& b) {
  TensorD out({x.rows(), W.dim(1)});
  for (int64_t r = 0; r < x.rows(); ++r)
    for (int64_t o = 0; o < W.dim(1); ++o) {
      double acc = b.data[o];
      for (int64_t k = 0; k < x.cols(); ++k) acc += x.at(r, k) * W.at(k, o);
      out.at(r, o) = acc;
    }
  return out;
}

TensorD naive_add(const TensorD& a, const TensorD& b) {
  TensorD out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

TensorD naive_attention_full(const AttentionParams<double>& p, const TensorD& q_src,
                             const TensorD& kv_k, const TensorD& kv_v) {
  TensorD q = naive_linear(q_src, p.wq.W->value, p.wq.b->value);
  TensorD k = naive_linear(kv_k, p.wk.W->value, p.wk.b->value);
  TensorD v = naive_linear(kv_v, p.wv.W->value, p.wv.b->value);
  TensorD core = naive_attention_core(q, k, v, p.heads);
  return naive_linear(core, p.proj.W->value, p.proj.b->value);
}

TensorD naive_mlp(const MlpParams<double>& p, const TensorD& x) {
  TensorD h = naive_linear(x, p.fc_in.W->value, p.fc_in.b->value);
  for (auto& v : h.data) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return naive_linear(h, p.fc_out.W->value, p.fc_out.b->value);
}

}  // namespace

TEST_CASE("encoder block equals a term-by-term naive reference") {
  ParamSet<double> ps;
  Init<double> init(71);
  auto blk = EncoderBlockParams<double>::create(ps, "blk", 8, 2, init);
  auto rng = test::rng_of(72);
  TensorD x = random_tensor({5, 8}, rng);

  TensorD xbar = naive_layer_norm(x, blk.norm1.gamma->value, blk.norm1.beta->value, 1e-6);
  TensorD x1 = naive_add(x, naive_attention_full(blk.attn, xbar, xbar, xbar));
  TensorD x1bar = naive_layer_norm(x1, blk.norm2.gamma->value, blk.norm2.beta->value, 1e-6);
  TensorD ref = naive_add(x1, naive_mlp(blk.mlp, x1bar));

  GraphD g;
  auto out = blk.forward(g, g.constant(x));
  for (int64_t i = 0; i < ref.numel(); ++i)
    CHECK(g.val(out).data[i] == doctest::Approx(ref.data[i]).epsilon(1e-9));
}

TEST_CASE("cross block equals a term-by-term naive reference") {
  ParamSet<double> ps;
  Init<double> init(73);
  auto cb = CrossBlockParams<double>::create(ps, "cb", 8, 2, init);
  auto rng = test::rng_of(74);
  TensorD x = random_tensor({4, 8}, rng);
  TensorD y = random_tensor({6, 8}, rng);

  TensorD xbar = naive_layer_norm(x, cb.norm1.gamma->value, cb.norm1.beta->value, 1e-6);
  TensorD ybar = naive_layer_norm(y, cb.norm_y.gamma->value, cb.norm_y.beta->value, 1e-6);
  TensorD x1 = naive_add(x, naive_attention_full(cb.self_attn, xbar, xbar, xbar));
  TensorD x1bar = naive_layer_norm(x1, cb.norm2.gamma->value, cb.norm2.beta->value, 1e-6);
  TensorD x2 = naive_add(x1, naive_attention_full(cb.cross_attn, x1bar, ybar, ybar));
  TensorD x2bar = naive_layer_norm(x2, cb.norm3.gamma->value, cb.norm3.beta->value, 1e-6);
  TensorD ref = naive_add(x2, naive_mlp(cb.mlp, x2bar));

  GraphD g;
  auto out = cb.forward(g, g.constant(x), g.constant(y));
  for (int64_t i = 0; i < ref.numel(); ++i)
    CHECK(g.val(out).data[i] == doctest::Approx(ref.data[i]).epsilon(1e-9));
}

TEST_CASE("cat stack equals naive blocks over the concatenated sequence") {
  ParamSet<double> ps;
  Init<double> init(75);
  std::vector<EncoderBlockParams<double>> blocks = {
      EncoderBlockParams<double>::create(ps, "b0", 8, 2, init)};
  auto ve = ViewEmbeddings<double>::create(ps, "view", 8, init);
  auto rng = test::rng_of(76);
  TensorD x = random_tensor({3, 8}, rng);
  TensorD y = random_tensor({2, 8}, rng);

  TensorD z({5, 8});
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t c = 0; c < 8; ++c) z.at(r, c) = x.at(r, c) + ve.v1->value.data[c];
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t c = 0; c < 8; ++c) z.at(3 + r, c) = y.at(r, c) + ve.v2->value.data[c];
  const auto& b = blocks[0];
  TensorD zbar = naive_layer_norm(z, b.norm1.gamma->value, b.norm1.beta->value, 1e-6);
  TensorD z1 = naive_add(z, naive_attention_full(b.attn, zbar, zbar, zbar));
  TensorD z1bar = naive_layer_norm(z1, b.norm2.gamma->value, b.norm2.beta->value, 1e-6);
  TensorD full = naive_add(z1, naive_mlp(b.mlp, z1bar));

  GraphD g;
  auto out = cat_stack_forward(g, g.constant(x), g.constant(y), ve, blocks);
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t c = 0; c < 8; ++c)
      CHECK(g.val(out).at(r, c) == doctest::Approx(full.at(r, c)).epsilon(1e-9));
}
