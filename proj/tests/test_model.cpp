#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "cvc/model.hpp"
#include "testutil.hpp"

using namespace cvc;
using test::fd_max_rel_err;

namespace {

Image random_image(int64_t h, int64_t w, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(0.f, 1.f);
  Image img(h, w);
  for (auto& v : img.data) v = dist(rng);
  return img;
}

// 224-px geometry with reduced depth; token/shape contracts only care about
// image size, patch size and widths.
ModelConfig shallow224(DecoderVariant v = DecoderVariant::kCross) {
  ModelConfig c;
  c.enc_depth = 1;
  c.dec_depth = 1;
  c.variant = v;
  return c;
}

ModelConfig toy16(DecoderVariant v = DecoderVariant::kCross) {
  // 32x32 images, 16 tokens, narrow widths; used for end-to-end checks
  ModelConfig c;
  c.image_size = 32;
  c.patch = 8;
  c.enc_depth = 1;
  c.enc_dim = 16;
  c.enc_heads = 2;
  c.dec_depth = 1;
  c.dec_dim = 12;
  c.dec_heads = 2;
  c.variant = v;
  c.mask_ratio = 0.75;
  return c;
}

}  // namespace

TEST_CASE("encode with r=0 equals unmasked encoding and has full length") {
  auto cfg = toy16();
  auto model = Model<double>::create(cfg, 3);
  auto ps = patchify<double>(random_image(32, 32, 1), cfg.patch);
  MaskSpec none = sample_mask(cfg.n_tokens(), 0.0, 5);
  auto vis = none.visible_indices();
  GraphD g;
  auto a = model.encode(g, ps.tokens, &vis);
  auto b = model.encode(g, ps.tokens, nullptr);
  CHECK(g.val(a).rows() == cfg.n_tokens());
  CHECK(g.val(a).data == g.val(b).data);
}

TEST_CASE("masked encoding differs from rows of the full encoding") {
  auto cfg = toy16();
  auto model = Model<double>::create(cfg, 3);
  auto ps = patchify<double>(random_image(32, 32, 2), cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), 0.5, 6);
  auto vis = mask.visible_indices();
  GraphD g;
  auto masked = model.encode(g, ps.tokens, &vis);
  auto full = model.encode(g, ps.tokens, nullptr);
  // restricting the attention context changes the representations
  double max_diff = 0;
  for (size_t i = 0; i < vis.size(); ++i)
    for (int64_t c = 0; c < cfg.enc_dim; ++c)
      max_diff = std::max(max_diff, std::abs(g.val(masked).at(i, c) -
                                             g.val(full).at(vis[i], c)));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("encode rejects an all-masked view") {
  auto cfg = toy16();
  auto model = Model<double>::create(cfg, 3);
  auto ps = patchify<double>(random_image(32, 32, 3), cfg.patch);
  std::vector<int64_t> empty;
  GraphD g;
  CHECK_THROWS_AS(model.encode(g, ps.tokens, &empty), DataError);
}

TEST_CASE("encoder output shape at full image size with r=0.9") {
  auto cfg = shallow224();
  auto model = Model<float>::create(cfg, 1);
  auto ps = patchify<float>(random_image(224, 224, 4), cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), 0.9, 7);
  CHECK(mask.n_masked() == 176);
  auto vis = mask.visible_indices();
  GraphF g;
  auto enc = model.encode(g, ps.tokens, &vis);
  CHECK(g.val(enc).dim(0) == 20);
  CHECK(g.val(enc).dim(1) == 768);
}

TEST_CASE("decoder output covers all positions with P*P*3 values each") {
  auto cfg = shallow224();
  auto model = Model<float>::create(cfg, 1);
  auto ps1 = patchify<float>(random_image(224, 224, 5), cfg.patch);
  auto ps2 = patchify<float>(random_image(224, 224, 6), cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), 0.9, 8);
  TensorF pred = model.reconstruct(ps1, mask, ps2);
  CHECK(pred.dim(0) == 196);
  CHECK(pred.dim(1) == 768);
}

TEST_CASE("with zero decoder sublayer outputs, masked predictions depend only on position") {
  for (auto variant : {DecoderVariant::kCross, DecoderVariant::kCat}) {
    auto cfg = toy16(variant);
    auto model = Model<double>::create(cfg, 11);
    // zero every decoder attention/mlp output projection
    for (auto& p : model.params()) {
      const bool sublayer_out = p->name.find("dec.block") != std::string::npos &&
                                (p->name.find(".proj.") != std::string::npos ||
                                 p->name.find(".fc_out.") != std::string::npos);
      if (sublayer_out) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    }
    auto ps1 = patchify<double>(random_image(32, 32, 12), cfg.patch);
    auto ps2 = patchify<double>(random_image(32, 32, 13), cfg.patch);
    auto ps1b = patchify<double>(random_image(32, 32, 14), cfg.patch);
    auto ps2b = patchify<double>(random_image(32, 32, 15), cfg.patch);
    MaskSpec mask = sample_mask(cfg.n_tokens(), cfg.mask_ratio, 16);
    TensorD pred_a = model.reconstruct(ps1, mask, ps2);
    TensorD pred_b = model.reconstruct(ps1b, mask, ps2b);

    // analytic expectation: head(LN(e_mask + pos)) per masked position,
    // with the view embedding added for the concatenated variant
    const auto& mt = model.mask_token().value;
    const auto& pos = model.decoder_pos();
    const auto& gamma = model.decoder_norm().gamma->value;
    const auto& beta = model.decoder_norm().beta->value;
    const auto& Wh = model.head().W->value;
    const auto& bh = model.head().b->value;
    for (int64_t i = 0; i < cfg.n_tokens(); ++i) {
      if (!mask.mask[i]) continue;
      std::vector<double> tok(cfg.dec_dim);
      for (int64_t c = 0; c < cfg.dec_dim; ++c) {
        tok[c] = mt.data[c] + pos.at(i, c);
        if (variant == DecoderVariant::kCat)
          tok[c] += model.view_emb_.v1->value.data[c];
      }
      double mean = 0, var = 0;
      for (double v : tok) mean += v;
      mean /= static_cast<double>(cfg.dec_dim);
      for (double v : tok) var += (v - mean) * (v - mean);
      var /= static_cast<double>(cfg.dec_dim);
      const double istd = 1.0 / std::sqrt(var + 1e-6);
      for (int64_t o = 0; o < cfg.token_len(); ++o) {
        double acc = bh.data[o];
        for (int64_t c = 0; c < cfg.dec_dim; ++c)
          acc += (gamma.data[c] * (tok[c] - mean) * istd + beta.data[c]) * Wh.at(c, o);
        CHECK(pred_a.at(i, o) == doctest::Approx(acc).epsilon(1e-9));
        CHECK(pred_b.at(i, o) == doctest::Approx(acc).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("replacing the reference encoding with noise changes masked predictions") {
  auto cfg = toy16();
  auto model = Model<double>::create(cfg, 21);
  auto ps1 = patchify<double>(random_image(32, 32, 22), cfg.patch);
  auto ps2 = patchify<double>(random_image(32, 32, 23), cfg.patch);
  Image noise = random_image(32, 32, 24);
  auto psn = patchify<double>(noise, cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), cfg.mask_ratio, 25);
  TensorD a = model.reconstruct(ps1, mask, ps2);
  TensorD b = model.reconstruct(ps1, mask, psn);
  double max_diff = 0;
  for (int64_t i = 0; i < cfg.n_tokens(); ++i)
    if (mask.mask[i])
      for (int64_t c = 0; c < cfg.token_len(); ++c)
        max_diff = std::max(max_diff, std::abs(a.at(i, c) - b.at(i, c)));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("loss: zero on exact masked prediction, constant-error case, locality") {
  auto cfg = toy16();
  auto ps = patchify<double>(random_image(32, 32, 31), cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), 0.5, 32);

  GraphD g;
  // exact prediction -> 0 (raw targets)
  auto pred0 = g.constant(ps.tokens);
  CHECK(g.val(pretrain_loss(g, pred0, ps, mask, false)).scalar() == 0.0);

  // perturbing only visible positions leaves the loss unchanged, exactly
  TensorD noisy = ps.tokens;
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> dist(-10.0, 10.0);
  for (int64_t i = 0; i < cfg.n_tokens(); ++i)
    if (!mask.mask[i])
      for (int64_t c = 0; c < cfg.token_len(); ++c) noisy.at(i, c) = dist(rng);
  auto pred1 = g.constant(noisy);
  CHECK(g.val(pretrain_loss(g, pred1, ps, mask, false)).scalar() == 0.0);

  // single masked token with constant 0.5 error -> 0.25
  MaskSpec one;
  one.mask.assign(cfg.n_tokens(), 0);
  one.mask[3] = 1;
  TensorD shifted = ps.tokens;
  for (int64_t c = 0; c < cfg.token_len(); ++c) shifted.at(3, c) += 0.5;
  auto pred2 = g.constant(shifted);
  CHECK(g.val(pretrain_loss(g, pred2, ps, one, false)).scalar() ==
        doctest::Approx(0.25).epsilon(1e-12));

  // empty mask is an error
  MaskSpec none;
  none.mask.assign(cfg.n_tokens(), 0);
  CHECK_THROWS_AS(pretrain_loss(g, pred0, ps, none, false), DataError);
}

TEST_CASE("normalized-target loss runs targets through per-patch statistics") {
  auto cfg = toy16();
  auto ps = patchify<double>(random_image(32, 32, 34), cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), 0.5, 35);
  GraphD g;
  auto pred = g.constant(normalize_targets(ps).tokens);
  CHECK(g.val(pretrain_loss(g, pred, ps, mask, true)).scalar() ==
        doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("pretrain_step is deterministic") {
  auto cfg = toy16();
  Image a = random_image(32, 32, 41), b = random_image(32, 32, 42);
  AdamWConfig oc;
  oc.base_lr = 1e-3;
  oc.warmup_steps = 2;
  oc.total_steps = 100;
  double l1, l2;
  {
    auto model = Model<float>::create(cfg, 43);
    AdamW<float> opt(model.params(), oc);
    pretrain_step(model, opt, a, b, 77);
    l1 = pretrain_step(model, opt, a, b, 78);
  }
  {
    auto model = Model<float>::create(cfg, 43);
    AdamW<float> opt(model.params(), oc);
    pretrain_step(model, opt, a, b, 77);
    l2 = pretrain_step(model, opt, a, b, 78);
  }
  CHECK(l1 == l2);  // bit identical
}

TEST_CASE("short overfit run decreases the loss") {
  auto cfg = toy16();
  cfg.normalized_targets = true;
  auto model = Model<float>::create(cfg, 51);
  AdamWConfig oc;
  oc.base_lr = 4e-3;
  oc.warmup_steps = 20;
  oc.total_steps = 420;
  AdamW<float> opt(model.params(), oc);
  Image a = random_image(32, 32, 52), b = random_image(32, 32, 53);
  double first = 0, last = 0;
  for (int s = 0; s < 400; ++s) {
    const double l = pretrain_step(model, opt, a, b, 1000 + s);
    if (s == 0) first = l;
    last = l;
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("end-to-end gradient of the full pipeline matches finite differences") {
  for (auto variant : {DecoderVariant::kCross, DecoderVariant::kCat}) {
    auto cfg = toy16(variant);
    auto model = Model<double>::create(cfg, 61);
    Image a = random_image(32, 32, 62), b = random_image(32, 32, 63);
    auto ps1 = patchify<double>(a, cfg.patch);
    auto ps2 = patchify<double>(b, cfg.patch);
    MaskSpec mask = sample_mask(cfg.n_tokens(), cfg.mask_ratio, 64);
    auto vis = mask.visible_indices();
    auto loss_fn = [&]() {
      GraphD g;
      auto enc1 = model.encode(g, ps1.tokens, &vis);
      auto enc2 = model.encode(g, ps2.tokens, nullptr);
      auto feats = model.decode_features(g, enc1, mask, enc2);
      auto pred = model.predict_pixels(g, feats);
      return g.val(pretrain_loss(g, pred, ps1, mask, cfg.normalized_targets)).scalar();
    };
    model.params().zero_grad();
    {
      GraphD g;
      auto enc1 = model.encode(g, ps1.tokens, &vis);
      auto enc2 = model.encode(g, ps2.tokens, nullptr);
      auto feats = model.decode_features(g, enc1, mask, enc2);
      auto pred = model.predict_pixels(g, feats);
      g.backward(pretrain_loss(g, pred, ps1, mask, cfg.normalized_targets));
    }
    for (auto& p : model.params()) {
      INFO(to_string(variant), " ", p->name);
      CHECK(fd_max_rel_err(loss_fn, p->value, p->grad, 1e-5, 12) <= 1e-3);
    }
  }
}

TEST_CASE("mono duplication: shape, determinism, and cat-variant halves") {
  {
    auto cfg = shallow224();
    auto model = Model<float>::create(cfg, 71);
    auto ps = patchify<float>(random_image(224, 224, 72), cfg.patch);
    TensorF f1 = model.mono_dup_features(ps);
    CHECK(f1.dim(0) == 196);
    CHECK(f1.dim(1) == 512);
    TensorF f2 = model.mono_dup_features(ps);
    CHECK(f1.data == f2.data);
  }
  {
    auto cfg = toy16(DecoderVariant::kCat);
    auto model = Model<double>::create(cfg, 73);
    // with v1 == v2 the two halves of the concatenated sequence coincide
    model.view_emb_.v2->value = model.view_emb_.v1->value;
    auto ps = patchify<double>(random_image(32, 32, 74), cfg.patch);
    GraphD g;
    auto enc = model.encode(g, ps.tokens, nullptr);
    MaskSpec none = sample_mask(cfg.n_tokens(), 0.0, 0);
    typename GraphD::Value full{};
    model.decode_features(g, enc, none, enc, &full);
    const auto& F = g.val(full);
    REQUIRE(F.dim(0) == 2 * cfg.n_tokens());
    for (int64_t i = 0; i < cfg.n_tokens(); ++i)
      for (int64_t c = 0; c < cfg.dec_dim; ++c)
        CHECK(F.at(i, c) == doctest::Approx(F.at(cfg.n_tokens() + i, c)).epsilon(1e-12));
  }
}

TEST_CASE("flops formula closed-form values") {
  // minimal formula evaluation
  CHECK(flops_encoder_layer(1, 1) == 28);
  // full-scale encoder
  const double enc = static_cast<double>(12 * flops_encoder_layer(196, 768));
  CHECK(std::abs(enc / 1e9 - 34.7) / 34.7 <= 0.01);
  ModelConfig cross, cat;
  cat.variant = DecoderVariant::kCat;
  CHECK(flops_total(cat) > flops_total(cross));
}

TEST_CASE("parameter count formula matches constructed models exactly") {
  for (auto variant : {DecoderVariant::kCross, DecoderVariant::kCat}) {
    for (auto cfg : {toy16(variant), ModelConfig::tiny()}) {
      cfg.variant = variant;
      auto model = Model<float>::create(cfg, 81);
      CHECK(model.params().total_elements() == count_params_total(cfg));
    }
  }
}

TEST_CASE("full-scale parameter counts sit at the published sizes") {
  ModelConfig cross;
  CHECK(std::abs(static_cast<double>(count_params_total(cross)) / 1e6 - 120.0) / 120.0 <=
        0.03);
  ModelConfig cat;
  cat.variant = DecoderVariant::kCat;
  CHECK(std::abs(static_cast<double>(count_params_total(cat)) / 1e6 - 111.0) / 111.0 <=
        0.03);
}

TEST_CASE("checkpoint round trip is byte identical and preserves the loss") {
  namespace fs = std::filesystem;
  auto cfg = toy16();
  auto model = Model<float>::create(cfg, 91);
  Image a = random_image(32, 32, 92), b = random_image(32, 32, 93);
  MaskSpec mask = sample_mask(cfg.n_tokens(), cfg.mask_ratio, 94);
  const double loss_before = eval_pair_loss(model, a, b, mask);

  const std::string p1 = (fs::temp_directory_path() / "cvc_ckpt_a.bin").string();
  const std::string p2 = (fs::temp_directory_path() / "cvc_ckpt_b.bin").string();
  checkpoint_save(model, p1);
  auto loaded = Model<float>::create(cfg, 999);  // different init
  checkpoint_load(loaded, p1);
  checkpoint_save(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(!s1.empty());
  CHECK(s1 == s2);
  CHECK(eval_pair_loss(loaded, a, b, mask) == loss_before);

  // loading into a mismatched architecture names the offending tensor
  auto other_cfg = toy16();
  other_cfg.dec_dim = 16;
  auto other = Model<float>::create(other_cfg, 95);
  CHECK_THROWS_AS(checkpoint_load(other, p1), DataError);
  CHECK(checkpoint_peek_config(p1) == cfg);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("checkpoint with optimizer state resumes the step counter") {
  namespace fs = std::filesystem;
  auto cfg = toy16();
  auto model = Model<float>::create(cfg, 96);
  AdamWConfig oc;
  oc.base_lr = 1e-3;
  oc.warmup_steps = 2;
  oc.total_steps = 50;
  AdamW<float> opt(model.params(), oc);
  Image a = random_image(32, 32, 97), b = random_image(32, 32, 98);
  for (int s = 0; s < 3; ++s) pretrain_step(model, opt, a, b, 200 + s);
  const std::string path = (fs::temp_directory_path() / "cvc_ckpt_opt.bin").string();
  checkpoint_save(model, path, &opt);

  auto resumed = Model<float>::create(cfg, 1234);
  AdamW<float> opt2(resumed.params(), oc);
  auto step = checkpoint_load(resumed, path, &opt2);
  REQUIRE(step.has_value());
  CHECK(*step == 3);
  // the next step reproduces the original run bit for bit
  const double l_orig = pretrain_step(model, opt, a, b, 203);
  const double l_resumed = pretrain_step(resumed, opt2, a, b, 203);
  CHECK(l_orig == l_resumed);
  fs::remove(path);
}

TEST_CASE("model config validation") {
  ModelConfig c;
  c.image_size = 225;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig();
  c.mask_ratio = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig();
  c.enc_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(ModelConfig::tiny().validate());
}

TEST_CASE("siamese weight sharing: both views accumulate into the same tensors") {
  auto cfg = toy16();
  auto model = Model<double>::create(cfg, 101);
  auto psA = patchify<double>(random_image(32, 32, 102), cfg.patch);
  auto psB = patchify<double>(random_image(32, 32, 103), cfg.patch);
  auto rng = test::rng_of(104);
  TensorD w = test::random_tensor({cfg.n_tokens(), cfg.enc_dim}, rng);

  auto encode_loss = [&](const PatchSet<double>& ps) {
    GraphD g;
    auto y = g.sum(g.mul(model.encode(g, ps.tokens, nullptr), g.constant(w)));
    g.backward(y);
  };
  // grads from encoding A and B separately...
  model.params().zero_grad();
  encode_loss(psA);
  std::vector<std::vector<double>> grads_a;
  for (auto& p : model.params()) grads_a.push_back(p->grad.data);
  model.params().zero_grad();
  encode_loss(psB);
  std::vector<std::vector<double>> grads_b;
  for (auto& p : model.params()) grads_b.push_back(p->grad.data);
  // ...sum into the same parameter tensors when both views are encoded
  model.params().zero_grad();
  {
    GraphD g;
    auto ya = g.sum(g.mul(model.encode(g, psA.tokens, nullptr), g.constant(w)));
    auto yb = g.sum(g.mul(model.encode(g, psB.tokens, nullptr), g.constant(w)));
    g.backward(g.add(ya, yb));
  }
  size_t i = 0;
  for (auto& p : model.params()) {
    for (size_t k = 0; k < p->grad.data.size(); ++k)
      CHECK(p->grad.data[k] ==
            doctest::Approx(grads_a[i][k] + grads_b[i][k]).epsilon(1e-9));
    ++i;
  }
  // and there is exactly one encoder parameter set (no per-view copies)
  int patch_embeds = 0;
  for (auto& p : model.params())
    if (p->name.rfind("patch_embed", 0) == 0) ++patch_embeds;
  CHECK(patch_embeds == 2);  // W and b
}

TEST_CASE("non-finite parameters trip the numeric guard during a step") {
  auto cfg = toy16();
  auto model = Model<float>::create(cfg, 111);
  AdamWConfig oc;
  oc.warmup_steps = 1;
  oc.total_steps = 10;
  AdamW<float> opt(model.params(), oc);
  (*model.params().begin())->value.data[0] = std::numeric_limits<float>::quiet_NaN();
  Image a = random_image(32, 32, 112), b = random_image(32, 32, 113);
  CHECK_THROWS_AS(pretrain_step(model, opt, a, b, 1), NumericError);
}

TEST_CASE("concurrent forward passes over frozen parameters agree") {
  auto cfg = toy16();
  auto model = Model<float>::create(cfg, 121);
  auto ps1 = patchify<float>(random_image(32, 32, 122), cfg.patch);
  auto ps2 = patchify<float>(random_image(32, 32, 123), cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), 0.5, 124);
  TensorF expected = model.reconstruct(ps1, mask, ps2);
  std::vector<TensorF> results(4);
  {
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
      threads.emplace_back(
          [&, t]() { results[t] = model.reconstruct(ps1, mask, ps2); });
    for (auto& th : threads) th.join();
  }
  for (const auto& r : results) CHECK(r.data == expected.data);
}
