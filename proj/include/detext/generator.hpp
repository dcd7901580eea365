#pragma once

#include <array>
#include <string>

#include "detext/data.hpp"
#include "detext/ga.hpp"
#include "detext/nn.hpp"

namespace detext {

struct GeneratorConfig {
  int base_channels = 8;  // 64 is the full-size configuration (12.9M params)
  int input_size = 64;
  int levels = 5;
  AttentionKind attention = AttentionKind::ga;
  bool roig = true;  // loss wiring flag, carried along for checkpoints

  // stage widths: base * {1,2,3,4,4}
  std::array<int, 5> widths() const {
    return {base_channels, 2 * base_channels, 3 * base_channels, 4 * base_channels,
            4 * base_channels};
  }
};

template <class T>
struct GeneratorOutput {
  Var<T> full;                        // same node as aux[2]
  std::array<Var<T>, 3> aux;          // H/4, H/2, H scales
  std::array<GAOutput<T>, 5> ga;      // per encoder scale, inner levels first
  std::array<Tensor<T>, 5> box_levels;  // box mask at H/2..H/32
};

// Encoder: five stride-2 4x4 conv stages, each with two residual blocks and a
// GA block. Decoder: five stride-2 4x4 deconvs with skip concatenation from
// the attended encoder features. RGB heads (1x1 conv + tanh) hang off the
// last three decoder stages.
template <class T>
struct Generator {
  GeneratorConfig cfg;

  struct EncStage {
    nn::Conv2d<T> conv;
    nn::ResBlock<T> res0, res1;
  };
  std::array<EncStage, 5> enc;
  std::array<GABlock<T>, 5> ga;
  std::array<nn::Deconv2d<T>, 5> dec;
  std::array<nn::Conv2d<T>, 3> heads;

  Generator() = default;

  Generator(Rng& rng, const GeneratorConfig& cfg_) : cfg(cfg_) {
    DETEXT_CHECK(cfg.levels == 5, "generator is fixed at 5 levels");
    DETEXT_CHECK(cfg.base_channels >= 2, "base_channels must be at least 2");
    const auto w = cfg.widths();
    int in_ch = 4;  // RGB plus box mask
    for (int i = 0; i < 5; ++i) {
      const std::string base = "enc" + std::to_string(i);
      enc[i].conv = nn::Conv2d<T>(rng, in_ch, w[i], 4, 2, 1, false, base + ".conv");
      enc[i].res0 = nn::ResBlock<T>(rng, w[i], base + ".res0");
      enc[i].res1 = nn::ResBlock<T>(rng, w[i], base + ".res1");
      ga[i] = GABlock<T>(rng, cfg.attention, "ga" + std::to_string(i));
      in_ch = w[i];
    }
    const std::array<int, 5> dec_in = {w[4], w[4] + w[3], 3 * cfg.base_channels + w[2],
                                       2 * cfg.base_channels + w[1], cfg.base_channels + w[0]};
    const std::array<int, 5> dec_out = {4 * cfg.base_channels, 3 * cfg.base_channels,
                                        2 * cfg.base_channels, cfg.base_channels,
                                        cfg.base_channels};
    for (int i = 0; i < 5; ++i)
      dec[i] = nn::Deconv2d<T>(rng, dec_in[i], dec_out[i], 4, 2, 1, false,
                               "dec" + std::to_string(i));
    const std::array<int, 3> head_in = {dec_out[2], dec_out[3], dec_out[4]};
    for (int i = 0; i < 3; ++i)
      heads[i] = nn::Conv2d<T>(rng, head_in[i], 3, 1, 1, 0, true, "head" + std::to_string(i));
  }

  // image in [-1,1], box_mask 0/1, both [N,·,H,W] with H, W multiples of 32
  GeneratorOutput<T> forward(const Var<T>& image, const Var<T>& box_mask) const {
    DETEXT_CHECK(image->value.ndim() == 4 && image->value.dim(1) == 3,
                 "generator: image must be [N,3,H,W]");
    const int H = image->value.dim(2), W = image->value.dim(3);
    DETEXT_CHECK(H % 32 == 0 && W % 32 == 0, "generator: H and W must be multiples of 32");
    DETEXT_CHECK(box_mask->value.dim(1) == 1 && box_mask->value.dim(2) == H &&
                     box_mask->value.dim(3) == W,
                 "generator: box mask must be [N,1,H,W]");

    GeneratorOutput<T> out;
    Tensor<T> box_l = box_mask->value;
    Var<T> x = ops::concat_channels<T>({image, box_mask});
    std::array<Var<T>, 5> skips;
    for (int i = 0; i < 5; ++i) {
      x = ops::relu(ops::instance_norm(enc[i].conv.forward(x)));
      x = enc[i].res1.forward(enc[i].res0.forward(x));
      box_l = maxpool_by_factor(box_l, 2);
      out.box_levels[static_cast<size_t>(i)] = box_l;
      out.ga[static_cast<size_t>(i)] = ga[i].forward(x, constant(box_l));
      x = out.ga[static_cast<size_t>(i)].features_out;
      skips[static_cast<size_t>(i)] = x;
    }
    for (int i = 0; i < 5; ++i) {
      Var<T> in = i == 0 ? x : ops::concat_channels<T>({x, skips[static_cast<size_t>(4 - i)]});
      x = ops::relu(ops::instance_norm(dec[i].forward(in)));
      if (i >= 2) out.aux[static_cast<size_t>(i - 2)] = ops::tanh(heads[i - 2].forward(x));
    }
    out.full = out.aux[2];
    return out;
  }

  nn::NamedParams<T> named_params() const {
    nn::NamedParams<T> ps;
    for (int i = 0; i < 5; ++i) {
      enc[i].conv.collect(ps);
      enc[i].res0.collect(ps);
      enc[i].res1.collect(ps);
      ga[i].collect(ps);
    }
    for (int i = 0; i < 5; ++i) dec[i].collect(ps);
    for (int i = 0; i < 3; ++i) heads[i].collect(ps);
    return ps;
  }

  int64_t count_parameters() const { return nn::count_parameters(named_params()); }
};

}  // namespace detext
