#pragma once

#include <string>

#include "detext/nn.hpp"
#include "detext/tensor.hpp"

namespace detext {

enum class DiscBranch { real, fake };

template <class T>
struct DiscriminatorOutput {
  Var<T> score;  // [N,1,H/16,W/16], sigmoid applied
  int downsample_factor = 16;
};

// Conditional patch discriminator: the condition (input image plus box mask)
// is concatenated with the candidate image, giving 7 input channels. Four
// stride-2 stages shrink by 16x, a 1x1 head and sigmoid emit per-patch
// realness scores.
template <class T>
struct Discriminator {
  nn::Conv2d<T> c0, c1, c2, c3, head;

  Discriminator() = default;

  Discriminator(Rng& rng, int base) {
    c0 = nn::Conv2d<T>(rng, 7, base, 4, 2, 1, true, "disc.c0");
    c1 = nn::Conv2d<T>(rng, base, 2 * base, 4, 2, 1, false, "disc.c1");
    c2 = nn::Conv2d<T>(rng, 2 * base, 4 * base, 4, 2, 1, false, "disc.c2");
    c3 = nn::Conv2d<T>(rng, 4 * base, 4 * base, 4, 2, 1, false, "disc.c3");
    head = nn::Conv2d<T>(rng, 4 * base, 1, 1, 1, 0, true, "disc.head");
  }

  DiscriminatorOutput<T> forward(const Var<T>& cond_image, const Var<T>& box_mask,
                                 const Var<T>& candidate) const {
    DETEXT_CHECK(cond_image->value.same_shape(candidate->value),
                 "discriminator: candidate shape mismatch");
    DETEXT_CHECK(cond_image->value.dim(2) % 16 == 0 && cond_image->value.dim(3) % 16 == 0,
                 "discriminator: H and W must be multiples of 16");
    auto x = ops::concat_channels<T>({cond_image, box_mask, candidate});
    x = ops::leaky_relu(c0.forward(x));
    x = ops::leaky_relu(ops::instance_norm(c1.forward(x)));
    x = ops::leaky_relu(ops::instance_norm(c2.forward(x)));
    x = ops::leaky_relu(ops::instance_norm(c3.forward(x)));
    DiscriminatorOutput<T> out;
    out.score = ops::sigmoid(head.forward(x));
    out.downsample_factor = 16;
    return out;
  }

  nn::NamedParams<T> named_params() const {
    nn::NamedParams<T> ps;
    c0.collect(ps);
    c1.collect(ps);
    c2.collect(ps);
    c3.collect(ps);
    head.collect(ps);
    return ps;
  }

  int64_t count_parameters() const { return nn::count_parameters(named_params()); }
};

// Real branch sees all-ones. Fake branch labels a patch 0 exactly when any
// stroke pixel falls inside it, so untouched patches keep the real label on
// both branches.
template <class T>
Tensor<T> locality_labels(const Tensor<T>& stroke_mask, int downsample_factor, DiscBranch branch) {
  const int N = stroke_mask.dim(0);
  const int h = stroke_mask.dim(2) / downsample_factor;
  const int w = stroke_mask.dim(3) / downsample_factor;
  if (branch == DiscBranch::real) return Tensor<T>::full({N, 1, h, w}, T(1));
  Tensor<T> pooled = maxpool_by_factor(stroke_mask, downsample_factor);
  for (int64_t i = 0; i < pooled.numel(); ++i) pooled[i] = T(1) - pooled[i];
  return pooled;
}

}  // namespace detext
