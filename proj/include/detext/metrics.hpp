#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "detext/data.hpp"
#include "detext/generator.hpp"
#include "detext/image.hpp"

namespace detext {

inline double bt601_gray(double r, double g, double b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

namespace detail {

inline std::vector<double> to_gray(const Image& img) {
  std::vector<double> g(static_cast<size_t>(img.h) * img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      g[static_cast<size_t>(y) * img.w + x] =
          img.c == 1 ? img.at(y, x, 0)
                     : bt601_gray(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
  return g;
}

}  // namespace detail

// MSE over all channels; identical images hit the 99 dB cap
inline double psnr(const Image& a, const Image& b) {
  DETEXT_CHECK(a.h == b.h && a.w == b.w && a.c == b.c, "psnr: shape mismatch");
  double se = 0;
  for (size_t i = 0; i < a.pix.size(); ++i) {
    const double d = static_cast<double>(a.pix[i]) - b.pix[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pix.size());
  if (mse == 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

// grayscale SSIM, 11x11 Gaussian window sigma 1.5, valid windows only
inline double ssim(const Image& a, const Image& b) {
  DETEXT_CHECK(a.h == b.h && a.w == b.w && a.c == b.c, "ssim: shape mismatch");
  constexpr int kWin = 11;
  DETEXT_CHECK(a.h >= kWin && a.w >= kWin, "ssim: image smaller than 11x11 window");
  const double sigma = 1.5, L = 255.0, k1 = 0.01, k2 = 0.03;
  const double c1 = (k1 * L) * (k1 * L), c2 = (k2 * L) * (k2 * L);

  double kernel[kWin][kWin];
  double ksum = 0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double dy = i - kWin / 2, dx = j - kWin / 2;
      kernel[i][j] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
      ksum += kernel[i][j];
    }
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) kernel[i][j] /= ksum;

  const auto ga = detail::to_gray(a);
  const auto gb = detail::to_gray(b);
  const int W = a.w;
  double total = 0;
  int64_t count = 0;
  for (int y = 0; y + kWin <= a.h; ++y)
    for (int x = 0; x + kWin <= a.w; ++x) {
      double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          const double va = ga[static_cast<size_t>(y + i) * W + (x + j)];
          const double vb = gb[static_cast<size_t>(y + i) * W + (x + j)];
          const double k = kernel[i][j];
          ma += k * va;
          mb += k * vb;
          maa += k * va * va;
          mbb += k * vb * vb;
          mab += k * va * vb;
        }
      const double va = maa - ma * ma;
      const double vb = mbb - mb * mb;
      const double cov = mab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

// mean absolute difference of BT.601 luma
inline double age(const Image& a, const Image& b) {
  DETEXT_CHECK(a.h == b.h && a.w == b.w && a.c == b.c, "age: shape mismatch");
  const auto ga = detail::to_gray(a);
  const auto gb = detail::to_gray(b);
  double s = 0;
  for (size_t i = 0; i < ga.size(); ++i) s += std::abs(ga[i] - gb[i]);
  return s / static_cast<double>(ga.size());
}

// uint8 select: model output inside the box mask, input elsewhere, bit-exact
template <class T>
Image paste_back(const Image& input, const Image& output, const Tensor<T>& box_mask) {
  DETEXT_CHECK(input.h == output.h && input.w == output.w && input.c == output.c,
               "paste_back: shape mismatch");
  DETEXT_CHECK(box_mask.dim(2) == input.h && box_mask.dim(3) == input.w,
               "paste_back: mask shape mismatch");
  Image out = input;
  for (int y = 0; y < input.h; ++y)
    for (int x = 0; x < input.w; ++x)
      if (box_mask.at(0, 0, y, x) > 0)
        for (int c = 0; c < input.c; ++c) out.at(y, x, c) = output.at(y, x, c);
  return out;
}

// ---------------------------------------------------------------------------
// detection P/R/F over externally supplied detections

struct ScoredQuad {
  Quad quad{};
  double confidence = 0;
};

namespace detail {

using Poly = std::vector<std::pair<double, double>>;

inline double poly_area(const Poly& p) {
  double a = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    const auto& [x1, y1] = p[i];
    const auto& [x2, y2] = p[(i + 1) % p.size()];
    a += x1 * y2 - x2 * y1;
  }
  return std::abs(a) / 2.0;
}

// Sutherland-Hodgman; clip polygon must be convex
inline Poly clip_poly(const Poly& subject, const Poly& clip) {
  // orientation of the clip polygon decides the inside test sign
  double orient = 0;
  for (size_t i = 0; i < clip.size(); ++i) {
    const auto& [x1, y1] = clip[i];
    const auto& [x2, y2] = clip[(i + 1) % clip.size()];
    orient += x1 * y2 - x2 * y1;
  }
  const double sign = orient >= 0 ? 1.0 : -1.0;
  Poly out = subject;
  for (size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const auto [ex1, ey1] = clip[e];
    const auto [ex2, ey2] = clip[(e + 1) % clip.size()];
    auto inside = [&](const std::pair<double, double>& p) {
      return sign * ((ex2 - ex1) * (p.second - ey1) - (ey2 - ey1) * (p.first - ex1)) >= 0;
    };
    auto intersect = [&](const std::pair<double, double>& a, const std::pair<double, double>& b) {
      const double dx = b.first - a.first, dy = b.second - a.second;
      const double den = (ex2 - ex1) * dy - (ey2 - ey1) * dx;
      const double t = den == 0 ? 0.0
                                : (((ex1 - a.first) * (ey2 - ey1) - (ey1 - a.second) * (ex2 - ex1)) /
                                   -den);
      return std::make_pair(a.first + t * dx, a.second + t * dy);
    };
    Poly next;
    for (size_t i = 0; i < out.size(); ++i) {
      const auto& cur = out[i];
      const auto& prev = out[(i + out.size() - 1) % out.size()];
      const bool cin = inside(cur), pin = inside(prev);
      if (cin) {
        if (!pin) next.push_back(intersect(prev, cur));
        next.push_back(cur);
      } else if (pin) {
        next.push_back(intersect(prev, cur));
      }
    }
    out = std::move(next);
  }
  return out;
}

inline Poly quad_to_poly(const Quad& q) {
  Poly p;
  for (int i = 0; i < 4; ++i) p.emplace_back(q[2 * i], q[2 * i + 1]);
  return p;
}

inline double quad_iou(const Quad& a, const Quad& b) {
  const Poly pa = quad_to_poly(a), pb = quad_to_poly(b);
  const double aa = poly_area(pa), ab = poly_area(pb);
  if (aa == 0 || ab == 0) return 0;
  const double inter = poly_area(clip_poly(pa, pb));
  const double uni = aa + ab - inter;
  return uni <= 0 ? 0 : inter / uni;
}

}  // namespace detail

struct PrfResult {
  double precision = 0, recall = 0, f1 = 0;
  int matches = 0;
};

// greedy one-to-one matching in confidence order, IoU threshold 0.5
inline PrfResult detection_prf(const std::vector<ScoredQuad>& detections,
                               const std::vector<Quad>& gt_boxes, double iou_thresh = 0.5) {
  std::vector<size_t> order(detections.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return detections[a].confidence > detections[b].confidence;
  });
  std::vector<bool> used(gt_boxes.size(), false);
  int matches = 0;
  for (const size_t di : order) {
    double best = 0;
    int best_gt = -1;
    for (size_t gi = 0; gi < gt_boxes.size(); ++gi) {
      if (used[gi]) continue;
      const double iou = detail::quad_iou(detections[di].quad, gt_boxes[gi]);
      if (iou > best) {
        best = iou;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0 && best >= iou_thresh) {
      used[static_cast<size_t>(best_gt)] = true;
      ++matches;
    }
  }
  PrfResult r;
  r.matches = matches;
  r.precision = detections.empty() ? 0 : static_cast<double>(matches) / detections.size();
  r.recall = gt_boxes.empty() ? 0 : static_cast<double>(matches) / gt_boxes.size();
  r.f1 = (r.precision + r.recall) == 0 ? 0
                                       : 2 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

// one detection file per image: lines x1,y1,...,x4,y4,conf
inline std::vector<ScoredQuad> parse_detections_file(const std::string& path) {
  std::ifstream f(path);
  DETEXT_CHECK_IO(f.good(), "cannot open " + path);
  std::vector<ScoredQuad> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) continue;
    std::string body = line;
    std::replace(body.begin(), body.end(), ',', ' ');
    std::istringstream ss(body);
    ScoredQuad d;
    for (int i = 0; i < 8; ++i)
      if (!(ss >> d.quad[i]))
        throw ValidationError(path + ":" + std::to_string(lineno) +
                              ": expected 8 integers and a confidence");
    if (!(ss >> d.confidence))
      throw ValidationError(path + ":" + std::to_string(lineno) + ": missing confidence");
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// model-level evaluation

template <class T>
struct InferResult {
  Image raw;        // full generator output
  Image pasted;     // paste_back(input, raw, box)
  Tensor<T> box;    // rasterized box mask at input size
  GeneratorOutput<T> net;  // graph-free (forward under NoGradGuard)
};

template <class T>
InferResult<T> infer_image(const Generator<T>& gen, const Image& input,
                           const std::vector<Quad>& boxes) {
  NoGradGuard ng;
  InferResult<T> r;
  r.box = rasterize_box_mask<T>(boxes, input.h, input.w);
  Tensor<T> x = tensor_from_image<T>(input);
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = 2 * x[i] - 1;
  Tensor<T> xp = pad_to_multiple(x, 32);
  Tensor<T> mp = r.box;
  if (xp.dim(2) != x.dim(2) || xp.dim(3) != x.dim(3)) {
    Tensor<T> padded = Tensor<T>::zeros({1, 1, xp.dim(2), xp.dim(3)});
    for (int y = 0; y < input.h; ++y)
      for (int xx = 0; xx < input.w; ++xx) padded.at(0, 0, y, xx) = r.box.at(0, 0, y, xx);
    mp = std::move(padded);
  }
  r.net = gen.forward(constant(xp), constant(mp));
  Tensor<T> out = crop_to(r.net.full->value, input.h, input.w);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = (out[i] + 1) / 2;
  r.raw = image_from_tensor(out);
  r.pasted = paste_back(input, r.raw, r.box);
  return r;
}

struct ImageMetrics {
  std::string id;
  double psnr = 0, ssim = 0, age = 0;
};

struct MetricsReport {
  std::string variant;  // raw or pasted
  std::vector<ImageMetrics> per_image;
  double mean_psnr = 0, mean_ssim = 0, mean_age = 0;
  int skipped = 0;

  void finalize() {
    if (per_image.empty()) return;
    for (const auto& m : per_image) {
      mean_psnr += m.psnr;
      mean_ssim += m.ssim;
      mean_age += m.age;
    }
    mean_psnr /= static_cast<double>(per_image.size());
    mean_ssim /= static_cast<double>(per_image.size());
    mean_age /= static_cast<double>(per_image.size());
  }
};

template <class T>
MetricsReport evaluate_dataset(const Generator<T>& gen, const std::vector<SampleRecord>& records,
                               const std::string& variant) {
  DETEXT_CHECK(variant == "raw" || variant == "pasted", "variant must be raw or pasted");
  MetricsReport rep;
  rep.variant = variant;
  for (const auto& rec : records) {
    if (rec.gt_path.empty()) {
      ++rep.skipped;
      std::cerr << "eval: skipping " << rec.id << " (no gt)\n";
      continue;
    }
    const Image input = read_png(rec.image_path);
    const Image gt = read_png(rec.gt_path);
    auto res = infer_image(gen, input, rec.boxes);
    const Image& cand = variant == "raw" ? res.raw : res.pasted;
    ImageMetrics m;
    m.id = rec.id;
    m.psnr = psnr(cand, gt);
    m.ssim = ssim(cand, gt);
    m.age = age(cand, gt);
    rep.per_image.push_back(m);
  }
  rep.finalize();
  return rep;
}

}  // namespace detext
