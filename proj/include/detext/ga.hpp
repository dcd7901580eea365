#pragma once

#include <string>
#include <vector>

#include "detext/image.hpp"
#include "detext/nn.hpp"

namespace detext {

enum class AttentionKind { none, sa, tsra, tssra, ga };

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::none: return "none";
    case AttentionKind::sa: return "sa";
    case AttentionKind::tsra: return "tsra";
    case AttentionKind::tssra: return "tssra";
    case AttentionKind::ga: return "ga";
  }
  return "?";
}

inline AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "none") return AttentionKind::none;
  if (s == "sa") return AttentionKind::sa;
  if (s == "tsra") return AttentionKind::tsra;
  if (s == "tssra") return AttentionKind::tssra;
  if (s == "ga") return AttentionKind::ga;
  throw ValidationError("unknown attention kind: " + s);
}

template <class T>
struct GAOutput {
  Var<T> features_out;
  Var<T> attn;     // [N,1,H,W], open interval (0,1)
  Var<T> score_t;  // raw logits, absent when the branch is disabled
  Var<T> score_s;
};

// Spatial attention over one encoder scale. The full variant pools the
// feature map (max and mean over channels), appends the box mask, pushes the
// 3-channel map through two 7x7 convs, and blends the branch scores with
// learnable gates before the sigmoid. Branch subsets give the sa/tsra/tssra
// ablations; sa drops the mask channel and runs one unsupervised conv.
template <class T>
struct GABlock {
  AttentionKind kind = AttentionKind::none;
  nn::Conv2d<T> conv_t, conv_s;
  Var<T> alpha, beta;

  GABlock() = default;
  GABlock(Rng& rng, AttentionKind kind_, const std::string& name) : kind(kind_) {
    switch (kind) {
      case AttentionKind::none:
        break;
      case AttentionKind::sa:
        conv_t = nn::Conv2d<T>(rng, 2, 1, 7, 1, 3, true, name + ".t");
        break;
      case AttentionKind::tsra:
        conv_t = nn::Conv2d<T>(rng, 3, 1, 7, 1, 3, true, name + ".t");
        alpha = make_leaf(Tensor<T>::full({1}, T(1)), true, name + ".alpha");
        break;
      case AttentionKind::tssra:
        conv_s = nn::Conv2d<T>(rng, 3, 1, 7, 1, 3, true, name + ".s");
        beta = make_leaf(Tensor<T>::full({1}, T(1)), true, name + ".beta");
        break;
      case AttentionKind::ga:
        conv_t = nn::Conv2d<T>(rng, 3, 1, 7, 1, 3, true, name + ".t");
        conv_s = nn::Conv2d<T>(rng, 3, 1, 7, 1, 3, true, name + ".s");
        alpha = make_leaf(Tensor<T>::full({1}, T(1)), true, name + ".alpha");
        beta = make_leaf(Tensor<T>::full({1}, T(1)), true, name + ".beta");
        break;
    }
  }

  GAOutput<T> forward(const Var<T>& f, const Var<T>& box_mask_level) const {
    GAOutput<T> out;
    if (kind == AttentionKind::none) {
      out.features_out = f;
      return out;
    }
    DETEXT_CHECK(kind == AttentionKind::sa ||
                     (box_mask_level && box_mask_level->value.dim(2) == f->value.dim(2) &&
                      box_mask_level->value.dim(3) == f->value.dim(3) &&
                      box_mask_level->value.dim(1) == 1),
                 "GABlock: box mask does not match feature map");
    auto mx = ops::channel_max(f);
    auto mn = ops::channel_mean(f);
    if (kind == AttentionKind::sa) {
      auto pooled = ops::concat_channels<T>({mx, mn});
      out.score_t = conv_t.forward(pooled);
      out.attn = ops::sigmoid(out.score_t);
    } else {
      auto pooled = ops::concat_channels<T>({mx, mn, box_mask_level});
      Var<T> blended;
      if (kind == AttentionKind::tsra || kind == AttentionKind::ga) {
        out.score_t = conv_t.forward(pooled);
        blended = ops::mul_scalar_var(out.score_t, alpha);
      }
      if (kind == AttentionKind::tssra || kind == AttentionKind::ga) {
        out.score_s = conv_s.forward(pooled);
        auto term = ops::mul_scalar_var(out.score_s, beta);
        blended = blended ? ops::add(blended, term) : term;
      }
      out.attn = ops::sigmoid(blended);
    }
    out.features_out = ops::mul_bc(f, out.attn);
    return out;
  }

  void collect(nn::NamedParams<T>& out) const {
    if (conv_t.w) conv_t.collect(out);
    if (conv_s.w) conv_s.collect(out);
    if (alpha) out.emplace_back(alpha->name, alpha);
    if (beta) out.emplace_back(beta->name, beta);
  }
};

template <class T>
GAOutput<T> ga_forward(const GABlock<T>& block, const Var<T>& features,
                       const Var<T>& box_mask_level) {
  return block.forward(features, box_mask_level);
}

namespace detail {

template <class T>
Image heatmap_from(const Tensor<T>& m) {
  if (!m.defined()) return Image();
  const int H = m.dim(2), W = m.dim(3);
  T lo = m[0], hi = m[0];
  for (int64_t i = 1; i < m.numel(); ++i) {
    lo = std::min(lo, m[i]);
    hi = std::max(hi, m[i]);
  }
  Image img(H, W, 1);
  if (hi == lo) return img;  // zero range maps to all-black
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      img.at(y, x, 0) =
          static_cast<uint8_t>(255.0 * (m.at(0, 0, y, x) - lo) / (hi - lo) + 0.5);
  return img;
}

}  // namespace detail

// raw scores pass through a sigmoid, then all three maps are min-max scaled
template <class T>
std::vector<Image> ga_visualize(const Tensor<T>& score_t, const Tensor<T>& score_s,
                                const Tensor<T>& attn) {
  auto squash = [](const Tensor<T>& s) {
    Tensor<T> o;
    if (!s.defined()) return o;
    o = Tensor<T>(s.shape);
    for (int64_t i = 0; i < s.numel(); ++i) o[i] = T(1) / (T(1) + std::exp(-s[i]));
    return o;
  };
  return {detail::heatmap_from(squash(score_t)), detail::heatmap_from(squash(score_s)),
          detail::heatmap_from(attn)};
}

}  // namespace detext
