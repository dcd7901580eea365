#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "detext/losses.hpp"
#include "testutil.hpp"

using namespace detext;
using testutil::random_tensor;

namespace {

Tensor<double> ones_mask(int h, int w) { return Tensor<double>::full({1, 1, h, w}, 1.0); }

Tensor<double> rect_mask(int h, int w, int y0, int y1, int x0, int x1) {
  Tensor<double> m = Tensor<double>::zeros({1, 1, h, w});
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(0, 0, y, x) = 1;
  return m;
}

// a ready-made pyramid plus zero-score attention outputs at matching scales
struct AttnFixture {
  MaskPyramid<double> pyr;
  std::array<GAOutput<double>, 5> outs;
  std::array<Var<double>, 5> score_t, score_s;
};

AttnFixture make_attn_fixture(const Tensor<double>& box, const Tensor<double>& stroke,
                              double t_val = 0.0, double s_val = 0.0) {
  AttnFixture fx;
  fx.pyr = build_mask_pyramid(box, stroke);
  for (int i = 0; i < 5; ++i) {
    const auto& lv = fx.pyr.levels[static_cast<size_t>(i)];
    fx.score_t[i] = make_leaf(Tensor<double>::full(lv.box.shape, t_val), true,
                              "t" + std::to_string(i));
    fx.score_s[i] = make_leaf(Tensor<double>::full(lv.box.shape, s_val), true,
                              "s" + std::to_string(i));
    fx.outs[i].score_t = fx.score_t[i];
    fx.outs[i].score_s = fx.score_s[i];
  }
  return fx;
}

}  // namespace

TEST_CASE("composites take the output inside the mask and the input outside", "[losses]") {
  Rng rng(1);
  auto in = make_leaf(random_tensor(rng, {1, 3, 8, 8}));
  auto out = make_leaf(random_tensor(rng, {1, 3, 8, 8}));
  auto mask = rect_mask(8, 8, 2, 5, 3, 6);
  auto comp = composite(in, out, mask);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double want = mask.at(0, 0, y, x) > 0 ? out->value.at(0, c, y, x)
                                                    : in->value.at(0, c, y, x);
        REQUIRE(comp->value.at(0, c, y, x) == want);  // bitwise, not approximate
      }
  auto all_in = composite(in, out, Tensor<double>::zeros({1, 1, 8, 8}));
  for (int64_t i = 0; i < in->value.numel(); ++i) REQUIRE(all_in->value[i] == in->value[i]);
  auto all_out = composite(in, out, ones_mask(8, 8));
  for (int64_t i = 0; i < out->value.numel(); ++i) REQUIRE(all_out->value[i] == out->value[i]);
}

TEST_CASE("roi regression sums weighted per-scale masked means", "[losses]") {
  const double d = 0.37;
  std::array<Var<double>, 3> aux = {
      make_leaf(Tensor<double>::full({1, 1, 1, 1}, d)),
      make_leaf(Tensor<double>::full({1, 1, 2, 2}, d)),
      make_leaf(Tensor<double>::full({1, 1, 4, 4}, d)),
  };
  auto gt = Tensor<double>::zeros({1, 1, 4, 4});
  auto loss = roi_regression_loss(aux, gt, ones_mask(4, 4), {0.6, 0.8, 1.0});
  // constant error d at every scale: 0.6 d + 0.8 d + 1.0 d
  REQUIRE(loss->value[0] == Catch::Approx(2.4 * d).margin(1e-6));

  SECTION("empty mask gives exactly zero") {
    auto z = roi_regression_loss(aux, gt, Tensor<double>::zeros({1, 1, 4, 4}), {0.6, 0.8, 1.0});
    REQUIRE(z->value[0] == 0.0);
  }
  SECTION("perfect prediction gives exactly zero") {
    std::array<Var<double>, 3> exact = {
        make_leaf(Tensor<double>::zeros({1, 1, 1, 1})),
        make_leaf(Tensor<double>::zeros({1, 1, 2, 2})),
        make_leaf(Tensor<double>::zeros({1, 1, 4, 4})),
    };
    auto z = roi_regression_loss(exact, gt, ones_mask(4, 4), {0.6, 0.8, 1.0});
    REQUIRE(z->value[0] == 0.0);
  }
  SECTION("gradient passes finite differences") {
    Rng rng(2);
    std::array<Var<double>, 3> r = {
        make_leaf(random_tensor(rng, {1, 3, 4, 4}), true),
        make_leaf(random_tensor(rng, {1, 3, 8, 8}), true),
        make_leaf(random_tensor(rng, {1, 3, 16, 16}), true),
    };
    auto g = random_tensor(rng, {1, 3, 16, 16});
    auto box = rect_mask(16, 16, 3, 12, 2, 10);
    auto fn = [&]() { return roi_regression_loss(r, g, box, {0.6, 0.8, 1.0}); };
    REQUIRE(testutil::grad_check({r[0], r[1], r[2]}, fn) < 1e-4);
  }
}

TEST_CASE("perceptual and style losses vanish on perfect restoration", "[losses]") {
  Rng rng(3);
  PerceptualExtractor<double> ex;
  REQUIRE(ex.mode == "fixed_random");
  REQUIRE_FALSE(ex.s1.w->requires_grad);
  auto gt = make_leaf(random_tensor(rng, {1, 3, 16, 16}, 0, 1));
  CompositePair<double> comps{gt, gt};
  REQUIRE(perceptual_loss(comps, gt, ex)->value[0] == 0.0);
  REQUIRE(style_loss(comps, gt, ex)->value[0] == 0.0);
}

TEST_CASE("extractor features stack conv relu pool three times", "[losses]") {
  Rng rng(4);
  PerceptualExtractor<double> ex;
  auto img = constant(random_tensor(rng, {1, 3, 16, 16}, 0, 1));
  NoGradGuard ng;
  auto f = ex.features(img);
  REQUIRE(f[0]->value.shape == std::vector<int>({1, 16, 8, 8}));
  REQUIRE(f[1]->value.shape == std::vector<int>({1, 32, 4, 4}));
  REQUIRE(f[2]->value.shape == std::vector<int>({1, 64, 2, 2}));
  // same seed, same features
  PerceptualExtractor<double> ex2;
  auto f2 = ex2.features(img);
  for (int64_t i = 0; i < f[2]->value.numel(); ++i)
    REQUIRE(f[2]->value[i] == f2[2]->value[i]);

  // stage one against the nested-loop oracle
  auto ref = testutil::conv_naive(img->value, ex.s1.w->value, &ex.s1.b->value, 1, 1);
  for (int64_t i = 0; i < ref.numel(); ++i) ref[i] = std::max(0.0, ref[i]);
  Tensor<double> pooled = maxpool_by_factor(ref, 2);
  for (int64_t i = 0; i < pooled.numel(); ++i)
    REQUIRE(f[0]->value[i] == Catch::Approx(pooled[i]).margin(1e-10));
}

TEST_CASE("pretrained extractor stages are honored", "[losses]") {
  Rng rng(5);
  auto w1 = random_tensor(rng, {16, 3, 3, 3});
  auto b1 = random_tensor(rng, {16});
  auto w2 = random_tensor(rng, {32, 16, 3, 3});
  auto b2 = random_tensor(rng, {32});
  auto w3 = random_tensor(rng, {64, 32, 3, 3});
  auto b3 = random_tensor(rng, {64});
  PerceptualExtractor<double> ex(w1, b1, w2, b2, w3, b3);
  REQUIRE(ex.mode == "pretrained");
  REQUIRE_FALSE(ex.s1.w->requires_grad);
  for (int64_t i = 0; i < w1.numel(); ++i) REQUIRE(ex.s1.w->value[i] == w1[i]);
}

TEST_CASE("gram distance is spatially permutation invariant", "[losses]") {
  Rng rng(6);
  auto a = random_tensor(rng, {1, 4, 3, 3});
  auto b = random_tensor(rng, {1, 4, 3, 3});
  // reverse the 9 pixels of a, same reorder in every channel
  Tensor<double> ar(a.shape);
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 9; ++p) {
      const int q = 8 - p;
      ar.at(0, c, p / 3, p % 3) = a.at(0, c, q / 3, q % 3);
    }
  auto d1 = gram_l1(make_leaf(a), make_leaf(b));
  auto d2 = gram_l1(make_leaf(ar), make_leaf(b));
  REQUIRE(d1->value[0] == Catch::Approx(d2->value[0]).margin(1e-12));

  SECTION("hand-computed two-channel case") {
    Tensor<double> x({1, 2, 1, 2});
    x[0] = 1;  // channel 0: [1, 2]
    x[1] = 2;
    x[2] = 3;  // channel 1: [3, 4]
    x[3] = 4;
    // raw gram [[5,11],[11,25]] scaled by 1/(2*1*2)
    auto z = Tensor<double>::zeros({1, 2, 1, 2});
    auto d = gram_l1(make_leaf(x), make_leaf(z));
    const double mean_abs = (5.0 + 11 + 11 + 25) / 4.0 / 4.0;
    REQUIRE(d->value[0] == Catch::Approx(mean_abs).margin(1e-12));
  }
}

TEST_CASE("total variation is zero on constants and known on edges", "[losses]") {
  auto flat = make_leaf(Tensor<double>::full({1, 3, 8, 8}, 0.42));
  REQUIRE(total_variation_loss(flat)->value[0] == 0.0);

  Rng rng(7);
  auto x = random_tensor(rng, {1, 2, 5, 6});
  double h = 0, v = 0;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 6; ++xx) {
        if (xx + 1 < 6) h += std::abs(x.at(0, c, y, xx + 1) - x.at(0, c, y, xx));
        if (y + 1 < 5) v += std::abs(x.at(0, c, y + 1, xx) - x.at(0, c, y, xx));
      }
  const double want = h / (2 * 5 * 5) + v / (2 * 4 * 6);
  REQUIRE(total_variation_loss(make_leaf(x))->value[0] == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("reconstruction terms ignore pixels outside the box", "[losses]") {
  Rng rng(8);
  const int H = 32, W = 32;
  auto input = make_leaf(random_tensor(rng, {1, 3, H, W}, 0, 1));
  auto gt = make_leaf(random_tensor(rng, {1, 3, H, W}, 0, 1));
  auto box = rect_mask(H, W, 8, 20, 10, 24);
  auto stroke = rect_mask(H, W, 10, 14, 12, 20);
  PerceptualExtractor<double> ex;

  std::array<Tensor<double>, 3> raw = {random_tensor(rng, {1, 3, H / 4, W / 4}),
                                       random_tensor(rng, {1, 3, H / 2, W / 2}),
                                       random_tensor(rng, {1, 3, H, W})};
  auto eval_all = [&](const std::array<Tensor<double>, 3>& t) {
    NoGradGuard ng;
    std::array<Var<double>, 3> aux = {constant(t[0]), constant(t[1]), constant(t[2])};
    auto comps = make_composites(input, aux[2], box, stroke);
    return std::array<double, 4>{
        roi_regression_loss(aux, gt->value, box, {0.6, 0.8, 1.0})->value[0],
        perceptual_loss(comps, gt, ex)->value[0],
        style_loss(comps, gt, ex)->value[0],
        total_variation_loss(comps.box_comp)->value[0],
    };
  };
  const auto base = eval_all(raw);

  // poke each scale at a location its own pooled mask excludes
  std::array<Tensor<double>, 3> masks = {maxpool_by_factor(box, 4), maxpool_by_factor(box, 2),
                                         box};
  Rng poke(9);
  int changed_checks = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const int s = static_cast<int>(poke.uniform_int(0, 2));
    auto t = raw;
    const int h = t[s].dim(2), w = t[s].dim(3);
    int y, x;
    do {
      y = static_cast<int>(poke.uniform_int(0, h - 1));
      x = static_cast<int>(poke.uniform_int(0, w - 1));
    } while (masks[s].at(0, 0, y, x) != 0.0);
    const int c = static_cast<int>(poke.uniform_int(0, 2));
    t[s].at(0, c, y, x) += poke.uniform(0.1, 2.0);
    const auto now = eval_all(t);
    for (int i = 0; i < 4; ++i) REQUIRE(now[i] == base[i]);  // exact, not approximate
    ++changed_checks;
  }
  REQUIRE(changed_checks == 30);

  // a poke inside the stroke region must move at least one term
  auto t = raw;
  t[2].at(0, 1, 12, 14) += 1.0;
  const auto moved = eval_all(t);
  REQUIRE((moved[0] != base[0] || moved[1] != base[1] || moved[2] != base[2] ||
           moved[3] != base[3]));
}

TEST_CASE("attention loss on uniform half scores is log two per branch", "[losses]") {
  auto box = rect_mask(64, 64, 8, 40, 8, 48);
  auto stroke = rect_mask(64, 64, 16, 24, 16, 32);
  auto fx = make_attn_fixture(box, stroke);
  int nonempty = 0;
  for (const auto& lv : fx.pyr.levels) {
    double c = 0;
    for (int64_t i = 0; i < lv.box.numel(); ++i) c += lv.box[i];
    if (c > 0) ++nonempty;
  }
  REQUIRE(nonempty == 5);
  auto l_ga = attention_loss(fx.outs, fx.pyr, AttentionKind::ga);
  REQUIRE(l_ga->value[0] == Catch::Approx(2.0 * nonempty * std::log(2.0)).margin(1e-9));
  auto l_t = attention_loss(fx.outs, fx.pyr, AttentionKind::tsra);
  REQUIRE(l_t->value[0] == Catch::Approx(nonempty * std::log(2.0)).margin(1e-9));
  auto l_s = attention_loss(fx.outs, fx.pyr, AttentionKind::tssra);
  REQUIRE(l_s->value[0] == Catch::Approx(nonempty * std::log(2.0)).margin(1e-9));
  REQUIRE(attention_loss(fx.outs, fx.pyr, AttentionKind::none)->value[0] == 0.0);
  REQUIRE(attention_loss(fx.outs, fx.pyr, AttentionKind::sa)->value[0] == 0.0);
}

TEST_CASE("attention loss rewards confident correct scores", "[losses]") {
  auto box = rect_mask(64, 64, 0, 64, 0, 64);
  auto stroke = rect_mask(64, 64, 10, 30, 10, 30);
  auto fx = make_attn_fixture(box, stroke);
  for (int i = 0; i < 5; ++i) {
    const auto& lv = fx.pyr.levels[static_cast<size_t>(i)];
    for (int64_t k = 0; k < lv.box.numel(); ++k) {
      fx.score_t[i]->value[k] = lv.stroke[k] > 0 ? 20.0 : -20.0;
      fx.score_s[i]->value[k] = lv.surround[k] > 0 ? 20.0 : -20.0;
    }
  }
  // floor: 5 levels x 2 branches x -log(1 - clamp_eps) ~= 1.0000000494e-6
  REQUIRE(attention_loss(fx.outs, fx.pyr, AttentionKind::ga)->value[0] < 2e-6);
}

TEST_CASE("literal variant drops the false-positive penalty", "[losses]") {
  auto box = rect_mask(64, 64, 0, 32, 0, 32);
  auto stroke = rect_mask(64, 64, 4, 12, 4, 12);
  auto fx = make_attn_fixture(box, stroke, 20.0, 20.0);  // confident ones everywhere
  auto full = attention_loss(fx.outs, fx.pyr, AttentionKind::tsra, false);
  auto literal = attention_loss(fx.outs, fx.pyr, AttentionKind::tsra, true);
  REQUIRE(literal->value[0] < 1e-6);       // predicted strokes where strokes exist
  REQUIRE(full->value[0] > 1.0);           // but false positives everywhere else in the box
}

TEST_CASE("attention gradients stop at the box boundary on every level", "[losses][grad]") {
  auto box = rect_mask(64, 64, 8, 40, 16, 48);
  auto stroke = rect_mask(64, 64, 16, 24, 20, 28);
  auto fx = make_attn_fixture(box, stroke, 0.3, -0.2);
  auto loss = attention_loss(fx.outs, fx.pyr, AttentionKind::ga);
  backward(loss);
  for (int i = 0; i < 5; ++i) {
    const auto& lv = fx.pyr.levels[static_cast<size_t>(i)];
    bool inside_any_t = false, inside_any_s = false;
    for (int64_t k = 0; k < lv.box.numel(); ++k) {
      if (lv.box[k] == 0.0) {
        REQUIRE(fx.score_t[i]->grad[k] == 0.0);
        REQUIRE(fx.score_s[i]->grad[k] == 0.0);
      } else {
        inside_any_t = inside_any_t || fx.score_t[i]->grad[k] != 0.0;
        inside_any_s = inside_any_s || fx.score_s[i]->grad[k] != 0.0;
      }
    }
    REQUIRE(inside_any_t);
    REQUIRE(inside_any_s);
  }
}

TEST_CASE("attention loss gradient passes finite differences", "[losses][grad]") {
  Rng rng(10);
  auto box = rect_mask(64, 64, 0, 32, 0, 64);
  auto stroke = rect_mask(64, 64, 4, 12, 8, 40);
  auto fx = make_attn_fixture(box, stroke);
  for (int i = 0; i < 5; ++i)
    for (int64_t k = 0; k < fx.score_t[i]->value.numel(); ++k) {
      fx.score_t[i]->value[k] = rng.uniform(-2.0, 2.0);
      fx.score_s[i]->value[k] = rng.uniform(-2.0, 2.0);
    }
  auto fn = [&]() { return attention_loss(fx.outs, fx.pyr, AttentionKind::ga); };
  // deepest two levels keep the test cheap while covering the normalization
  REQUIRE(testutil::grad_check({fx.score_t[3], fx.score_s[3], fx.score_t[4], fx.score_s[4]}, fn) <
          1e-6);
}

TEST_CASE("adversarial losses at chance level equal log two", "[losses]") {
  auto real = make_leaf(Tensor<double>::full({1, 1, 4, 4}, 0.5));
  auto fake = make_leaf(Tensor<double>::full({1, 1, 4, 4}, 0.5));
  auto ones = Tensor<double>::full({1, 1, 4, 4}, 1.0);
  Tensor<double> loc = ones;
  loc.at(0, 0, 1, 1) = 0;
  loc.at(0, 0, 2, 2) = 0;
  auto [g, d] = adversarial_losses(real, fake, ones, loc);
  REQUIRE(d->value[0] == Catch::Approx(2.0 * std::log(2.0)).margin(1e-9));
  REQUIRE(g->value[0] == Catch::Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("adversarial losses reward the right player", "[losses]") {
  auto ones = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  Tensor<double> loc = ones;
  loc.at(0, 0, 0, 0) = 0;
  SECTION("confident correct discriminator drives d_loss to zero") {
    auto real = make_leaf(Tensor<double>::full({1, 1, 2, 2}, 1.0 - 1e-9));
    Tensor<double> fv({1, 1, 2, 2});
    for (int64_t i = 0; i < 4; ++i) fv[i] = loc[i] > 0 ? 1.0 - 1e-9 : 1e-9;
    auto fake = make_leaf(fv);
    auto [g, d] = adversarial_losses(real, fake, ones, loc);
    REQUIRE(d->value[0] < 1e-5);
    REQUIRE(g->value[0] > 10.0);  // generator is fully caught
  }
  SECTION("fooled discriminator drives g_loss to zero") {
    auto real = make_leaf(Tensor<double>::full({1, 1, 2, 2}, 0.5));
    auto fake = make_leaf(Tensor<double>::full({1, 1, 2, 2}, 1.0 - 1e-9));
    auto [g, d] = adversarial_losses(real, fake, ones, loc);
    REQUIRE(g->value[0] < 1e-5);
  }
  SECTION("no text patches leaves the generator term at zero") {
    auto real = make_leaf(Tensor<double>::full({1, 1, 2, 2}, 0.5));
    auto fake = make_leaf(Tensor<double>::full({1, 1, 2, 2}, 0.5));
    auto [g, d] = adversarial_losses(real, fake, ones, ones);
    REQUIRE(g->value[0] == 0.0);
    REQUIRE(d->value[0] > 0.0);
  }
}

TEST_CASE("adversarial gradients pass finite differences", "[losses][grad]") {
  Rng rng(11);
  auto real = make_leaf(random_tensor(rng, {1, 1, 3, 3}, 0.1, 0.9), true);
  auto fake = make_leaf(random_tensor(rng, {1, 1, 3, 3}, 0.1, 0.9), true);
  auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  Tensor<double> loc = ones;
  loc.at(0, 0, 1, 1) = 0;
  auto d_fn = [&]() { return adversarial_losses(real, fake, ones, loc).second; };
  REQUIRE(testutil::grad_check({real, fake}, d_fn) < 1e-6);
  auto g_fn = [&]() { return adversarial_losses(real, fake, ones, loc).first; };
  REQUIRE(testutil::grad_check({fake}, g_fn) < 1e-6);
}

TEST_CASE("total generator loss applies the reference weights", "[losses]") {
  LossBreakdown<double> parts;
  auto one = []() { return constant(Tensor<double>::full({1}, 1.0)); };
  parts.l_r = one();
  parts.l_p = one();
  parts.l_s = one();
  parts.l_tv = one();
  parts.l_adv = one();
  parts.l_att = one();
  LossWeights w;
  auto total = total_generator_loss(parts, w);
  REQUIRE(total->value[0] == Catch::Approx(186.5).margin(1e-9));
  REQUIRE(parts.total.get() == total.get());

  SECTION("absent terms contribute nothing") {
    LossBreakdown<double> sparse;
    sparse.l_r = one();
    auto t = total_generator_loss(sparse, w);
    REQUIRE(t->value[0] == Catch::Approx(100.0).margin(1e-9));
  }
  SECTION("random values follow the weighted sum") {
    Rng rng(12);
    LossBreakdown<double> p2;
    double vals[6];
    Var<double>* slots[6] = {&p2.l_r, &p2.l_p, &p2.l_s, &p2.l_tv, &p2.l_adv, &p2.l_att};
    for (int i = 0; i < 6; ++i) {
      vals[i] = rng.uniform(0.0, 3.0);
      *slots[i] = constant(Tensor<double>::full({1}, vals[i]));
    }
    const double want = 100 * vals[0] + 0.5 * vals[1] + 50 * vals[2] + 25 * vals[3] +
                        1 * vals[4] + 10 * vals[5];
    REQUIRE(total_generator_loss(p2, w)->value[0] == Catch::Approx(want).margin(1e-9));
  }
}
