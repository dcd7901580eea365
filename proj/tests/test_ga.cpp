#include <catch2/catch_amalgamated.hpp>

#include "detext/ga.hpp"
#include "testutil.hpp"

using namespace detext;
using testutil::random_tensor;

namespace {

GABlock<double> make_block(AttentionKind kind, uint64_t seed = 1) {
  Rng rng(seed);
  return GABlock<double>(rng, kind, "ga0");
}

}  // namespace

TEST_CASE("attention output matches the direct-equation oracle", "[ga]") {
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(1000 + trial);
    auto block = make_block(AttentionKind::ga, 500 + trial);
    block.alpha->value[0] = rng.uniform(-2.0, 2.0);
    block.beta->value[0] = rng.uniform(-2.0, 2.0);
    auto f = random_tensor(rng, {1, 4, 8, 8}, -2, 2);
    auto mask = Tensor<double>::zeros({1, 1, 8, 8});
    for (int y = 2; y < 6; ++y)
      for (int x = 1; x < 5; ++x) mask.at(0, 0, y, x) = 1;

    auto out = block.forward(make_leaf(f), constant(mask));

    testutil::GaOracleParams p;
    p.wt = block.conv_t.w->value;
    p.bt = block.conv_t.b->value;
    p.ws = block.conv_s.w->value;
    p.bs = block.conv_s.b->value;
    p.alpha = block.alpha->value[0];
    p.beta = block.beta->value[0];
    auto ref = testutil::ga_naive(f, mask, p);

    REQUIRE(out.features_out->value.same_shape(ref));
    for (int64_t i = 0; i < ref.numel(); ++i)
      REQUIRE(out.features_out->value[i] == Catch::Approx(ref[i]).margin(1e-10));
  }
}

TEST_CASE("zero gates give a uniform half attention map", "[ga]") {
  auto block = make_block(AttentionKind::ga);
  block.alpha->value[0] = 0;
  block.beta->value[0] = 0;
  Rng rng(2);
  auto f = make_leaf(random_tensor(rng, {1, 3, 8, 8}));
  auto out = block.forward(f, constant(Tensor<double>::zeros({1, 1, 8, 8})));
  for (int64_t i = 0; i < out.attn->value.numel(); ++i)
    REQUIRE(out.attn->value[i] == Catch::Approx(0.5).margin(1e-12));
  for (int64_t i = 0; i < f->value.numel(); ++i)
    REQUIRE(out.features_out->value[i] == Catch::Approx(0.5 * f->value[i]).margin(1e-12));
}

TEST_CASE("gates scale the branch scores linearly", "[ga]") {
  auto block = make_block(AttentionKind::ga, 7);
  Rng rng(3);
  auto f = make_leaf(random_tensor(rng, {1, 3, 8, 8}));
  auto mask = constant(Tensor<double>::zeros({1, 1, 8, 8}));
  block.beta->value[0] = 0;
  block.alpha->value[0] = 1;
  auto one = block.forward(f, mask);
  block.alpha->value[0] = 3;
  auto three = block.forward(f, mask);
  // logit(attn) must scale by exactly 3 when only alpha changes 1 -> 3
  for (int64_t i = 0; i < one.attn->value.numel(); ++i) {
    const double l1 = std::log(one.attn->value[i] / (1 - one.attn->value[i]));
    const double l3 = std::log(three.attn->value[i] / (1 - three.attn->value[i]));
    REQUIRE(l3 == Catch::Approx(3 * l1).margin(1e-8));
  }
}

TEST_CASE("attention values stay strictly inside (0,1)", "[ga]") {
  auto block = make_block(AttentionKind::ga, 11);
  Rng rng(4);
  auto f = make_leaf(random_tensor(rng, {2, 5, 8, 8}, -10, 10));
  auto mask = constant(Tensor<double>::zeros({2, 1, 8, 8}));
  auto out = block.forward(f, mask);
  for (int64_t i = 0; i < out.attn->value.numel(); ++i) {
    REQUIRE(out.attn->value[i] > 0.0);
    REQUIRE(out.attn->value[i] < 1.0);
  }
}

TEST_CASE("disabled branches have no parameters and no influence", "[ga]") {
  SECTION("tsra has only the supervised-by-strokes branch") {
    auto block = make_block(AttentionKind::tsra);
    REQUIRE(block.conv_t.w);
    REQUIRE_FALSE(block.conv_s.w);
    REQUIRE(block.alpha);
    REQUIRE_FALSE(block.beta);
    nn::NamedParams<double> ps;
    block.collect(ps);
    REQUIRE(nn::count_parameters(ps) == 149);
  }
  SECTION("tssra has only the surround branch") {
    auto block = make_block(AttentionKind::tssra);
    REQUIRE_FALSE(block.conv_t.w);
    REQUIRE(block.conv_s.w);
    nn::NamedParams<double> ps;
    block.collect(ps);
    REQUIRE(nn::count_parameters(ps) == 149);
  }
  SECTION("sa runs without a mask and has a 2-channel conv") {
    auto block = make_block(AttentionKind::sa);
    nn::NamedParams<double> ps;
    block.collect(ps);
    REQUIRE(nn::count_parameters(ps) == 99);
    Rng rng(5);
    auto f = make_leaf(random_tensor(rng, {1, 3, 8, 8}));
    auto out = block.forward(f, Var<double>());
    REQUIRE(out.attn);
    REQUIRE_FALSE(out.score_s);
  }
  SECTION("full block holds both branches plus gates") {
    auto block = make_block(AttentionKind::ga);
    nn::NamedParams<double> ps;
    block.collect(ps);
    REQUIRE(nn::count_parameters(ps) == 298);
  }
  SECTION("none passes features through untouched") {
    auto block = make_block(AttentionKind::none);
    Rng rng(6);
    auto f = make_leaf(random_tensor(rng, {1, 3, 8, 8}));
    auto out = block.forward(f, Var<double>());
    REQUIRE(out.features_out.get() == f.get());
    REQUIRE_FALSE(out.attn);
  }
}

TEST_CASE("attention gradients pass finite differences", "[ga][grad]") {
  auto block = make_block(AttentionKind::ga, 13);
  Rng rng(7);
  auto f = make_leaf(random_tensor(rng, {1, 3, 6, 6}), true);
  Tensor<double> mvals = Tensor<double>::zeros({1, 1, 6, 6});
  mvals.at(0, 0, 2, 2) = 1;
  mvals.at(0, 0, 2, 3) = 1;
  auto mask = constant(mvals);
  auto t = random_tensor(rng, {1, 3, 6, 6});
  auto loss_fn = [&]() {
    auto out = block.forward(f, mask);
    return ops::mean_all(ops::mul(ops::sub(out.features_out, constant(t)),
                                  ops::sub(out.features_out, constant(t))));
  };
  std::vector<Var<double>> leaves = {f, block.conv_t.w, block.conv_t.b, block.conv_s.w,
                                     block.conv_s.b, block.alpha, block.beta};
  REQUIRE(testutil::grad_check(leaves, loss_fn) < 1e-6);
}

TEST_CASE("visualization maps score and attention ranges to bytes", "[ga]") {
  Tensor<double> score({1, 1, 2, 2});
  score[0] = -4;
  score[1] = 0;
  score[2] = 2;
  score[3] = 6;
  Tensor<double> attn({1, 1, 2, 2});
  attn[0] = 0.1;
  attn[1] = 0.4;
  attn[2] = 0.6;
  attn[3] = 0.9;
  auto imgs = ga_visualize(score, score, attn);
  REQUIRE(imgs.size() == 3);
  for (int i = 0; i < 2; ++i) {
    REQUIRE(imgs[i].h == 2);
    REQUIRE(imgs[i].pix[0] == 0);    // min maps to black
    REQUIRE(imgs[i].pix[3] == 255);  // max maps to white
    REQUIRE(imgs[i].pix[1] < imgs[i].pix[2]);
  }
  REQUIRE(imgs[2].pix[0] == 0);
  REQUIRE(imgs[2].pix[3] == 255);

  // constant maps collapse to black rather than dividing by zero
  auto flat = ga_visualize(Tensor<double>::full({1, 1, 2, 2}, 1.5),
                           Tensor<double>(), Tensor<double>::full({1, 1, 2, 2}, 0.5));
  for (uint8_t v : flat[0].pix) REQUIRE(v == 0);
  REQUIRE(flat[1].pix.empty());  // absent branch gives an empty image
  for (uint8_t v : flat[2].pix) REQUIRE(v == 0);
}
