#pragma once

#include <array>
#include <vector>

#include "detext/data.hpp"
#include "detext/ga.hpp"
#include "detext/nn.hpp"

namespace detext {

struct LossWeights {
  double lambda_r = 100.0;
  double lambda_p = 0.5;
  double lambda_s = 50.0;
  double lambda_t = 25.0;
  double lambda_adv = 1.0;
  double lambda_att = 10.0;
  std::array<double, 3> scale_weights = {0.6, 0.8, 1.0};
};

constexpr double kLogEps = 1e-7;    // clamp on all log arguments
constexpr double kCountEps = 1e-8;  // guard on mask-count denominators

template <class T>
Tensor<T> one_minus(const Tensor<T>& m) {
  Tensor<T> r(m.shape);
  for (int64_t i = 0; i < m.numel(); ++i) r[i] = T(1) - m[i];
  return r;
}

template <class T>
Var<T> zero_scalar() {
  return constant(Tensor<T>::zeros({1}));
}

// Pixelwise blend: input outside the mask, output inside. With a 0/1 mask the
// out-of-mask pixels are bit-identical to the input, which is what makes the
// don't-care property exact rather than approximate.
template <class T>
Var<T> composite(const Var<T>& input, const Var<T>& output, const Tensor<T>& mask) {
  DETEXT_CHECK(input->value.same_shape(output->value), "composite: shape mismatch");
  DETEXT_CHECK(mask.dim(1) == 1 && mask.dim(2) == input->value.dim(2) &&
                   mask.dim(3) == input->value.dim(3),
               "composite: mask shape mismatch");
  auto m = constant(mask);
  auto inv = constant(one_minus(mask));
  return ops::add(ops::mul_bc(input, inv), ops::mul_bc(output, m));
}

template <class T>
struct CompositePair {
  Var<T> box_comp;     // generator output inside box mask, input elsewhere
  Var<T> stroke_comp;  // generator output inside stroke mask, input elsewhere
};

template <class T>
CompositePair<T> make_composites(const Var<T>& input, const Var<T>& output,
                                 const Tensor<T>& box_mask, const Tensor<T>& stroke_mask) {
  return {composite(input, output, box_mask), composite(input, output, stroke_mask)};
}

// Multi-scale L1 restricted to the box interior. gt is resized bilinearly and
// the mask max-pooled to each auxiliary scale; each scale's term is the mean
// absolute error over masked elements.
template <class T>
Var<T> roi_regression_loss(const std::array<Var<T>, 3>& aux_outputs, const Tensor<T>& gt,
                           const Tensor<T>& box_mask,
                           const std::array<double, 3>& scale_weights) {
  Var<T> total = zero_scalar<T>();
  for (int i = 0; i < 3; ++i) {
    const auto& out = aux_outputs[static_cast<size_t>(i)];
    DETEXT_CHECK(static_cast<bool>(out), "roi_regression_loss: missing aux output");
    const int h = out->value.dim(2), w = out->value.dim(3);
    DETEXT_CHECK(gt.dim(2) % h == 0 && gt.dim(3) % w == 0,
                 "roi_regression_loss: aux scale does not divide gt");
    const int factor = gt.dim(2) / h;
    Tensor<T> gt_i = factor == 1 ? gt : resize_bilinear(gt, h, w);
    Tensor<T> mask_i = factor == 1 ? box_mask : maxpool_by_factor(box_mask, factor);
    double count = 0;
    for (int64_t k = 0; k < mask_i.numel(); ++k) count += mask_i[k];
    const double denom = count * out->value.dim(1) + kCountEps;
    auto masked = ops::mul_bc(ops::abs(ops::sub(out, constant(gt_i))), constant(mask_i));
    total = ops::add(total, ops::scale(ops::sum_all(masked),
                                       scale_weights[static_cast<size_t>(i)] / denom));
  }
  return total;
}

// Three fixed convolutional stages with 2x pooling, used as the feature space
// for the perceptual and style terms. Weights are frozen at construction;
// random mode needs no external asset, pretrained mode takes supplied stages.
template <class T>
struct PerceptualExtractor {
  nn::Conv2d<T> s1, s2, s3;
  std::string mode = "fixed_random";

  explicit PerceptualExtractor(uint64_t seed = 1234567) {
    Rng rng(seed);
    s1 = nn::Conv2d<T>(rng, 3, 16, 3, 1, 1, true, "percep.s1");
    s2 = nn::Conv2d<T>(rng, 16, 32, 3, 1, 1, true, "percep.s2");
    s3 = nn::Conv2d<T>(rng, 32, 64, 3, 1, 1, true, "percep.s3");
    freeze();
  }

  PerceptualExtractor(Tensor<T> w1, Tensor<T> b1, Tensor<T> w2, Tensor<T> b2, Tensor<T> w3,
                      Tensor<T> b3) {
    mode = "pretrained";
    auto stage = [](Tensor<T> w, Tensor<T> b, const std::string& name) {
      nn::Conv2d<T> c;
      c.stride = 1;
      c.pad = (w.dim(2) - 1) / 2;
      c.w = make_leaf(std::move(w), false, name + ".w");
      c.b = make_leaf(std::move(b), false, name + ".b");
      return c;
    };
    s1 = stage(std::move(w1), std::move(b1), "percep.s1");
    s2 = stage(std::move(w2), std::move(b2), "percep.s2");
    s3 = stage(std::move(w3), std::move(b3), "percep.s3");
  }

  void freeze() {
    for (auto* c : {&s1, &s2, &s3}) {
      c->w->requires_grad = false;
      if (c->b) c->b->requires_grad = false;
    }
  }

  std::array<Var<T>, 3> features(const Var<T>& img) const {
    auto f1 = ops::maxpool2x2(ops::relu(s1.forward(img)));
    auto f2 = ops::maxpool2x2(ops::relu(s2.forward(f1)));
    auto f3 = ops::maxpool2x2(ops::relu(s3.forward(f2)));
    return {f1, f2, f3};
  }
};

template <class T>
Var<T> perceptual_loss(const CompositePair<T>& comps, const Var<T>& gt,
                       const PerceptualExtractor<T>& ex) {
  const auto fb = ex.features(comps.box_comp);
  const auto fs = ex.features(comps.stroke_comp);
  const auto fg = ex.features(gt);
  Var<T> total = zero_scalar<T>();
  for (int n = 0; n < 3; ++n) {
    total = ops::add(total, ops::mean_all(ops::abs(ops::sub(fb[static_cast<size_t>(n)],
                                                            fg[static_cast<size_t>(n)]))));
    total = ops::add(total, ops::mean_all(ops::abs(ops::sub(fs[static_cast<size_t>(n)],
                                                            fg[static_cast<size_t>(n)]))));
  }
  return total;
}

// Gram matrix scaled by 1/(C·H·W); distance is the mean absolute entry
// difference. Exposed so the style sub-step can be tested on bare features.
template <class T>
Var<T> gram_l1(const Var<T>& a, const Var<T>& b) {
  DETEXT_CHECK(a->value.same_shape(b->value), "gram_l1: shape mismatch");
  const double norm =
      1.0 / (static_cast<double>(a->value.dim(1)) * a->value.dim(2) * a->value.dim(3));
  auto ga = ops::scale(ops::gram(a), norm);
  auto gb = ops::scale(ops::gram(b), norm);
  return ops::mean_all(ops::abs(ops::sub(ga, gb)));
}

template <class T>
Var<T> style_loss(const CompositePair<T>& comps, const Var<T>& gt,
                  const PerceptualExtractor<T>& ex) {
  const auto fb = ex.features(comps.box_comp);
  const auto fs = ex.features(comps.stroke_comp);
  const auto fg = ex.features(gt);
  Var<T> total = zero_scalar<T>();
  for (int n = 0; n < 3; ++n) {
    total = ops::add(total, gram_l1(fb[static_cast<size_t>(n)], fg[static_cast<size_t>(n)]));
    total = ops::add(total, gram_l1(fs[static_cast<size_t>(n)], fg[static_cast<size_t>(n)]));
  }
  return total;
}

template <class T>
Var<T> total_variation_loss(const Var<T>& box_comp) {
  return ops::total_variation(box_comp);
}

namespace detail {

// sum over box pixels of the cross-entropy between sigmoid(score) and target
// G (a 0/1 mask contained in box). literal drops the (1-G)·log(1-p) term.
template <class T>
Var<T> attention_bce_sum(const Var<T>& score, const Tensor<T>& target, const Tensor<T>& box,
                         bool literal) {
  auto p = ops::clamp(ops::sigmoid(score), kLogEps, 1.0 - kLogEps);
  auto pos = ops::mul(constant(target), ops::log(p));
  Var<T> s;
  if (literal) {
    s = pos;
  } else {
    Tensor<T> neg_w(box.shape);
    for (int64_t i = 0; i < box.numel(); ++i) neg_w[i] = box[i] - target[i];
    auto neg = ops::mul(constant(neg_w), ops::log(ops::affine(p, -1.0, 1.0)));
    s = ops::add(pos, neg);
  }
  return ops::scale(ops::sum_all(s), -1.0);
}

}  // namespace detail

// Per level: cross-entropy of the TSR branch against the stroke mask and the
// TSSR branch against the surround mask, accumulated over in-box pixels only
// and normalized by the in-box pixel count. Levels with empty boxes
// contribute zero. Branch supervision follows the attention kind.
template <class T>
Var<T> attention_loss(const std::array<GAOutput<T>, 5>& ga_outputs, const MaskPyramid<T>& pyr,
                      AttentionKind kind, bool literal = false) {
  Var<T> total = zero_scalar<T>();
  if (kind == AttentionKind::none || kind == AttentionKind::sa) return total;
  const bool sup_t = kind == AttentionKind::tsra || kind == AttentionKind::ga;
  const bool sup_s = kind == AttentionKind::tssra || kind == AttentionKind::ga;
  DETEXT_CHECK(pyr.levels.size() == 5, "attention_loss: pyramid must have 5 levels");
  for (int i = 0; i < 5; ++i) {
    const auto& lv = pyr.levels[static_cast<size_t>(i)];
    const auto& out = ga_outputs[static_cast<size_t>(i)];
    double count = 0;
    for (int64_t k = 0; k < lv.box.numel(); ++k) count += lv.box[k];
    if (count == 0) continue;
    Var<T> level = zero_scalar<T>();
    if (sup_t) {
      DETEXT_CHECK(static_cast<bool>(out.score_t), "attention_loss: missing TSR score");
      level = ops::add(level, detail::attention_bce_sum(out.score_t, lv.stroke, lv.box, literal));
    }
    if (sup_s) {
      DETEXT_CHECK(static_cast<bool>(out.score_s), "attention_loss: missing TSSR score");
      level = ops::add(level, detail::attention_bce_sum(out.score_s, lv.surround, lv.box, literal));
    }
    total = ops::add(total, ops::scale(level, 1.0 / (count + kCountEps)));
  }
  return total;
}

namespace detail {

template <class T>
Var<T> bce_mean(const Var<T>& score, const Tensor<T>& labels) {
  DETEXT_CHECK(score->value.same_shape(labels), "bce: label shape mismatch");
  auto p = ops::clamp(score, kLogEps, 1.0 - kLogEps);
  auto pos = ops::mul(constant(labels), ops::log(p));
  auto neg = ops::mul(constant(one_minus(labels)), ops::log(ops::affine(p, -1.0, 1.0)));
  return ops::scale(ops::sum_all(ops::add(pos, neg)),
                    -1.0 / static_cast<double>(labels.numel()));
}

}  // namespace detail

// d_loss: full-map BCE, real scores against all-ones and fake scores against
// the locality labels. g_loss: non-saturating -log D averaged over the text
// patches only (cells where the fake label is 0).
template <class T>
std::pair<Var<T>, Var<T>> adversarial_losses(const Var<T>& disc_real_scores,
                                             const Var<T>& disc_fake_scores,
                                             const Tensor<T>& labels_real,
                                             const Tensor<T>& labels_fake) {
  auto d_loss = ops::add(detail::bce_mean(disc_real_scores, labels_real),
                         detail::bce_mean(disc_fake_scores, labels_fake));
  Tensor<T> text_cells = one_minus(labels_fake);
  double count = 0;
  for (int64_t i = 0; i < text_cells.numel(); ++i) count += text_cells[i];
  auto p = ops::clamp(disc_fake_scores, kLogEps, 1.0 - kLogEps);
  auto g_loss = ops::scale(ops::sum_all(ops::mul(constant(text_cells), ops::log(p))),
                           -1.0 / (count + kCountEps));
  return {g_loss, d_loss};
}

template <class T>
struct LossBreakdown {
  Var<T> l_r, l_p, l_s, l_tv, l_adv, l_att;
  Var<T> total;
};

template <class T>
Var<T> total_generator_loss(LossBreakdown<T>& parts, const LossWeights& w) {
  auto term = [](Var<T> acc, const Var<T>& v, double lambda) {
    if (!v) return acc;
    return ops::add(acc, ops::scale(v, lambda));
  };
  Var<T> total = zero_scalar<T>();
  total = term(total, parts.l_r, w.lambda_r);
  total = term(total, parts.l_p, w.lambda_p);
  total = term(total, parts.l_s, w.lambda_s);
  total = term(total, parts.l_tv, w.lambda_t);
  total = term(total, parts.l_adv, w.lambda_adv);
  total = term(total, parts.l_att, w.lambda_att);
  parts.total = total;
  return total;
}

}  // namespace detext
