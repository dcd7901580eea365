#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "detext/image.hpp"
#include "detext/rng.hpp"
#include "detext/tensor.hpp"

namespace detext {

// quadrilateral as x1,y1,x2,y2,x3,y3,x4,y4
using Quad = std::array<int, 8>;

inline int64_t quad_area2(const Quad& q) {
  // twice the signed shoelace area
  int64_t a = 0;
  for (int i = 0; i < 4; ++i) {
    const int64_t x1 = q[2 * i], y1 = q[2 * i + 1];
    const int64_t x2 = q[(2 * i + 2) % 8], y2 = q[(2 * i + 3) % 8];
    a += x1 * y2 - x2 * y1;
  }
  return a;
}

namespace detail {

// boundary-inclusive even-odd test at integer lattice point (px,py)
inline bool point_in_quad(const Quad& q, int px, int py) {
  bool inside = false;
  for (int i = 0; i < 4; ++i) {
    const int64_t x1 = q[2 * i], y1 = q[2 * i + 1];
    const int64_t x2 = q[(2 * i + 2) % 8], y2 = q[(2 * i + 3) % 8];
    // on-segment check, exact integer arithmetic
    const int64_t cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
    if (cross == 0 && px >= std::min(x1, x2) && px <= std::max(x1, x2) &&
        py >= std::min(y1, y2) && py <= std::max(y1, y2))
      return true;
    if ((y1 > py) != (y2 > py)) {
      // px < x1 + (py-y1)(x2-x1)/(y2-y1), cross-multiplied by dy with sign care
      const int64_t dy = y2 - y1;
      const int64_t lhs = (px - x1) * dy;
      const int64_t rhs = (py - y1) * (x2 - x1);
      if (dy > 0 ? lhs < rhs : lhs > rhs) inside = !inside;
    }
  }
  return inside;
}

}  // namespace detail

// masks are [1,1,H,W] tensors with exact 0/1 entries
template <class T>
Tensor<T> rasterize_box_mask(const std::vector<Quad>& quads, int height, int width) {
  Tensor<T> m = Tensor<T>::zeros({1, 1, height, width});
  for (const auto& q : quads) {
    if (quad_area2(q) == 0) {
      std::cerr << "warning: skipping zero-area box\n";
      continue;
    }
    int x_lo = q[0], x_hi = q[0], y_lo = q[1], y_hi = q[1];
    for (int i = 1; i < 4; ++i) {
      x_lo = std::min(x_lo, q[2 * i]);
      x_hi = std::max(x_hi, q[2 * i]);
      y_lo = std::min(y_lo, q[2 * i + 1]);
      y_hi = std::max(y_hi, q[2 * i + 1]);
    }
    x_lo = std::max(x_lo, 0);
    y_lo = std::max(y_lo, 0);
    x_hi = std::min(x_hi, width - 1);
    y_hi = std::min(y_hi, height - 1);
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x)
        if (detail::point_in_quad(q, x, y)) m.at(0, 0, y, x) = T(1);
  }
  return m;
}

template <class T>
Tensor<T> dilate_mask(const Tensor<T>& mask, int iterations) {
  DETEXT_CHECK(iterations >= 0, "dilate_mask: negative iterations");
  const int H = mask.dim(2), W = mask.dim(3);
  Tensor<T> cur = mask;
  for (int it = 0; it < iterations; ++it) {
    Tensor<T> next = Tensor<T>::zeros(mask.shape);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        T v = 0;
        for (int dy = -1; dy <= 1 && v == T(0); ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < H && xx >= 0 && xx < W && cur.at(0, 0, yy, xx) > 0) {
              v = T(1);
              break;
            }
          }
        next.at(0, 0, y, x) = v;
      }
    cur = std::move(next);
  }
  return cur;
}

// pixel = 1 iff max over channels of |input - gt| > threshold, within the box
// mask; optional dilation runs on the thresholded map before the box clip
template <class T>
Tensor<T> derive_stroke_mask(const Image& input, const Image& gt, const Tensor<T>& box_mask,
                             int threshold = 25, int dilate_iterations = 0) {
  DETEXT_CHECK(input.h == gt.h && input.w == gt.w && input.c == gt.c,
               "derive_stroke_mask: image shape mismatch");
  DETEXT_CHECK(threshold >= 0 && threshold <= 255, "derive_stroke_mask: threshold out of range");
  DETEXT_CHECK(box_mask.dim(2) == input.h && box_mask.dim(3) == input.w,
               "derive_stroke_mask: mask shape mismatch");
  Tensor<T> m = Tensor<T>::zeros({1, 1, input.h, input.w});
  for (int y = 0; y < input.h; ++y)
    for (int x = 0; x < input.w; ++x) {
      int d = 0;
      for (int ch = 0; ch < input.c; ++ch)
        d = std::max(d, std::abs(static_cast<int>(input.at(y, x, ch)) - gt.at(y, x, ch)));
      if (d > threshold) m.at(0, 0, y, x) = T(1);
    }
  if (dilate_iterations > 0) m = dilate_mask(m, dilate_iterations);
  for (int64_t i = 0; i < m.numel(); ++i)
    if (box_mask[i] == T(0)) m[i] = T(0);
  return m;
}

template <class T>
Tensor<T> derive_surround_mask(const Tensor<T>& box_mask, const Tensor<T>& stroke_mask) {
  DETEXT_CHECK(box_mask.same_shape(stroke_mask), "derive_surround_mask: shape mismatch");
  Tensor<T> m(box_mask.shape);
  for (int64_t i = 0; i < m.numel(); ++i) {
    DETEXT_CHECK(!(stroke_mask[i] > 0 && box_mask[i] == T(0)),
                 "derive_surround_mask: stroke mask not contained in box mask");
    m[i] = (box_mask[i] > 0 && stroke_mask[i] == T(0)) ? T(1) : T(0);
  }
  return m;
}

template <class T>
struct MaskLevel {
  Tensor<T> box, stroke, surround;
};

// levels at H/2..H/32, tracking the five encoder scales
template <class T>
struct MaskPyramid {
  std::vector<MaskLevel<T>> levels;
};

template <class T>
MaskPyramid<T> build_mask_pyramid(const Tensor<T>& box_mask, const Tensor<T>& stroke_mask) {
  DETEXT_CHECK(box_mask.dim(2) % 32 == 0 && box_mask.dim(3) % 32 == 0,
               "build_mask_pyramid: H and W must be multiples of 32");
  MaskPyramid<T> pyr;
  Tensor<T> box = box_mask, stroke = stroke_mask;
  for (int level = 1; level <= 5; ++level) {
    box = maxpool_by_factor(box, 2);
    stroke = maxpool_by_factor(stroke, 2);
    for (int64_t i = 0; i < stroke.numel(); ++i)
      if (box[i] == T(0)) stroke[i] = T(0);
    MaskLevel<T> lv;
    lv.box = box;
    lv.stroke = stroke;
    lv.surround = derive_surround_mask(box, stroke);
    pyr.levels.push_back(std::move(lv));
  }
  return pyr;
}

// ---------------------------------------------------------------------------
// synthetic data

struct SynthConfig {
  int height = 64;
  int width = 64;
  int min_boxes = 1;
  int max_boxes = 4;
  int min_thickness = 1;
  int max_thickness = 3;
  int color_offset = 60;  // stroke color distance from local background mean
  int max_retries = 50;
};

struct SynthSample {
  Image input;  // background with strokes
  Image gt;     // clean background
  std::vector<Quad> boxes;
};

namespace detail {

inline Image synth_background(Rng& rng, int h, int w) {
  Image img(h, w, 3);
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(40.0, 215.0);
    gx[c] = rng.uniform(-40.0, 40.0);
    gy[c] = rng.uniform(-40.0, 40.0);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + gx[c] * (static_cast<double>(x) / w - 0.5) +
                   gy[c] * (static_cast<double>(y) / h - 0.5) + rng.uniform(-6.0, 6.0);
        v = std::clamp(v, 0.0, 255.0);
        img.at(y, x, c) = static_cast<uint8_t>(v + 0.5);
      }
  return img;
}

inline void stamp_disc(Image& img, int cy, int cx, int radius, const uint8_t rgb[3]) {
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dy * dy + dx * dx > radius * radius) continue;
      const int y = cy + dy, x = cx + dx;
      if (y < 0 || y >= img.h || x < 0 || x >= img.w) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
    }
}

inline void draw_segment(Image& img, int y0, int x0, int y1, int x1, int radius,
                         const uint8_t rgb[3]) {
  const int steps = std::max(std::abs(y1 - y0), std::abs(x1 - x0));
  for (int s = 0; s <= steps; ++s) {
    const double t = steps == 0 ? 0.0 : static_cast<double>(s) / steps;
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    stamp_disc(img, y, x, radius, rgb);
  }
}

inline bool boxes_overlap(const Quad& a, const Quad& b) {
  auto bbox = [](const Quad& q, int& xlo, int& xhi, int& ylo, int& yhi) {
    xlo = xhi = q[0];
    ylo = yhi = q[1];
    for (int i = 1; i < 4; ++i) {
      xlo = std::min(xlo, q[2 * i]);
      xhi = std::max(xhi, q[2 * i]);
      ylo = std::min(ylo, q[2 * i + 1]);
      yhi = std::max(yhi, q[2 * i + 1]);
    }
  };
  int ax0, ax1, ay0, ay1, bx0, bx1, by0, by1;
  bbox(a, ax0, ax1, ay0, ay1);
  bbox(b, bx0, bx1, by0, by1);
  return ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1;
}

}  // namespace detail

inline SynthSample synthesize_sample(const Image& background, uint64_t seed,
                                     const SynthConfig& cfg) {
  DETEXT_CHECK(background.h >= 64 && background.w >= 64,
               "synthesize_sample: background must be at least 64x64");
  DETEXT_CHECK(background.c == 3, "synthesize_sample: background must be RGB");
  Rng rng(seed);
  SynthSample s;
  s.gt = background;
  s.input = background;
  const int H = background.h, W = background.w;
  const int want = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
  for (int b = 0; b < want; ++b) {
    Quad q{};
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
      const int bw = rng.uniform_int(14, std::max(15, W / 2));
      const int bh = rng.uniform_int(10, std::max(11, H / 2));
      const int x0 = rng.uniform_int(1, W - bw - 2);
      const int y0 = rng.uniform_int(1, H - bh - 2);
      // slight corner jitter so quads are not always axis-aligned
      auto j = [&]() { return static_cast<int>(rng.uniform_int(-1, 1)); };
      q = {x0 + j(), y0 + j(), x0 + bw + j(), y0 + j(),
           x0 + bw + j(), y0 + bh + j(), x0 + j(), y0 + bh + j()};
      for (int i = 0; i < 4; ++i) {
        q[2 * i] = std::clamp(q[2 * i], 0, W - 1);
        q[2 * i + 1] = std::clamp(q[2 * i + 1], 0, H - 1);
      }
      bool clash = false;
      for (const auto& other : s.boxes)
        if (detail::boxes_overlap(q, other)) {
          clash = true;
          break;
        }
      if (!clash && quad_area2(q) != 0) {
        placed = true;
        break;
      }
    }
    if (!placed) {
      std::cerr << "warning: box placement failed after " << cfg.max_retries
                << " retries, emitting fewer boxes\n";
      break;
    }
    // inner region with margin for stroke thickness
    int xlo = q[0], xhi = q[0], ylo = q[1], yhi = q[1];
    for (int i = 1; i < 4; ++i) {
      xlo = std::min(xlo, q[2 * i]);
      xhi = std::max(xhi, q[2 * i]);
      ylo = std::min(ylo, q[2 * i + 1]);
      yhi = std::max(yhi, q[2 * i + 1]);
    }
    const int thickness = rng.uniform_int(cfg.min_thickness, cfg.max_thickness);
    const int radius = thickness / 2;
    const int margin = radius + 2;
    const int ix0 = xlo + margin, ix1 = xhi - margin;
    const int iy0 = ylo + margin, iy1 = yhi - margin;
    if (ix1 <= ix0 || iy1 <= iy0) continue;

    // stroke color pushed away from the local background mean so the
    // threshold-25 stroke derivation always fires
    double mean[3] = {0, 0, 0};
    int cnt = 0;
    for (int y = iy0; y <= iy1; ++y)
      for (int x = ix0; x <= ix1; ++x, ++cnt)
        for (int c = 0; c < 3; ++c) mean[c] += background.at(y, x, c);
    uint8_t rgb[3];
    for (int c = 0; c < 3; ++c) {
      mean[c] /= std::max(1, cnt);
      const double off = rng.uniform(static_cast<double>(cfg.color_offset),
                                     cfg.color_offset + 60.0);
      const double v = mean[c] < 128 ? mean[c] + off : mean[c] - off;
      rgb[c] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }

    const int npts = rng.uniform_int(3, 7);
    int py = rng.uniform_int(iy0, iy1), px = rng.uniform_int(ix0, ix1);
    for (int p = 1; p < npts; ++p) {
      const int ny = rng.uniform_int(iy0, iy1), nx = rng.uniform_int(ix0, ix1);
      detail::draw_segment(s.input, py, px, ny, nx, radius, rgb);
      py = ny;
      px = nx;
    }
    s.boxes.push_back(q);
  }
  return s;
}

// ---------------------------------------------------------------------------
// on-disk dataset

struct SampleRecord {
  std::string id;
  std::string image_path;
  std::string gt_path;  // empty when the set has no ground truth
  std::vector<Quad> boxes;
};

inline std::vector<Quad> parse_boxes_file(const std::string& path) {
  std::ifstream f(path);
  DETEXT_CHECK_IO(f.good(), "cannot open " + path);
  std::vector<Quad> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    // trim whitespace and skip blanks
    const auto first = line.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r\n");
    std::string body = line.substr(first, last - first + 1);
    std::replace(body.begin(), body.end(), ',', ' ');
    std::istringstream ss(body);
    Quad q{};
    for (int i = 0; i < 8; ++i) {
      if (!(ss >> q[i]))
        throw ValidationError(path + ":" + std::to_string(lineno) +
                              ": expected 8 comma-separated integers");
    }
    int extra;
    if (ss >> extra)
      throw ValidationError(path + ":" + std::to_string(lineno) +
                            ": expected 8 comma-separated integers");
    out.push_back(q);
  }
  return out;
}

inline std::vector<SampleRecord> load_dataset(const std::string& root, bool require_gt = true,
                                              int* skipped = nullptr) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(root) / "images";
  DETEXT_CHECK_IO(fs::is_directory(images), "dataset has no images/ directory: " + root);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file() && e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  std::vector<SampleRecord> out;
  int skip_count = 0;
  for (const auto& id : ids) {
    SampleRecord r;
    r.id = id;
    r.image_path = (images / (id + ".png")).string();
    const fs::path gt = fs::path(root) / "gt" / (id + ".png");
    const fs::path boxes = fs::path(root) / "boxes" / (id + ".txt");
    if (require_gt && !fs::exists(gt)) {
      std::cerr << "skipping " << id << ": missing gt\n";
      ++skip_count;
      continue;
    }
    if (!fs::exists(boxes)) {
      std::cerr << "skipping " << id << ": missing boxes\n";
      ++skip_count;
      continue;
    }
    r.gt_path = fs::exists(gt) ? gt.string() : "";
    try {
      r.boxes = parse_boxes_file(boxes.string());
    } catch (const ValidationError& e) {
      std::cerr << "skipping " << id << ": " << e.what() << "\n";
      ++skip_count;
      continue;
    }
    out.push_back(std::move(r));
  }
  if (skip_count > 0) std::cerr << "load_dataset: skipped " << skip_count << " sample(s)\n";
  if (skipped) *skipped = skip_count;
  return out;
}

// loaded and mask-derived sample, ready for the network
template <class T>
struct LoadedSample {
  std::string id;
  Image input_img, gt_img;
  Tensor<T> input;   // [1,3,H,W] in [0,1]
  Tensor<T> gt;      // [1,3,H,W] in [0,1]
  Tensor<T> box;     // [1,1,H,W] 0/1
  Tensor<T> stroke;  // [1,1,H,W] 0/1
};

template <class T>
Image mask_to_image(const Tensor<T>& m) {
  Image img(m.dim(2), m.dim(3), 1);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) img.at(y, x, 0) = m.at(0, 0, y, x) > 0 ? 255 : 0;
  return img;
}

template <class T>
Tensor<T> mask_from_image(const Image& img) {
  DETEXT_CHECK(img.c == 1, "mask_from_image: want single channel");
  Tensor<T> m({1, 1, img.h, img.w});
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) m.at(0, 0, y, x) = img.at(y, x, 0) >= 128 ? T(1) : T(0);
  return m;
}

template <class T>
LoadedSample<T> load_sample(const SampleRecord& rec, const std::string& cache_dir,
                            int threshold = 25, int stroke_dilate = 0, bool use_cache = true) {
  namespace fs = std::filesystem;
  LoadedSample<T> s;
  s.id = rec.id;
  s.input_img = read_png(rec.image_path);
  DETEXT_CHECK_IO(s.input_img.c == 3, "expected RGB image: " + rec.image_path);
  const bool has_gt = !rec.gt_path.empty();
  if (has_gt) {
    s.gt_img = read_png(rec.gt_path);
    DETEXT_CHECK(s.gt_img.h == s.input_img.h && s.gt_img.w == s.input_img.w && s.gt_img.c == 3,
                 "gt shape mismatch for " + rec.id);
  }
  const fs::path box_png = fs::path(cache_dir) / (rec.id + ".box.png");
  const fs::path stroke_png = fs::path(cache_dir) / (rec.id + ".stroke.png");
  if (use_cache && fs::exists(box_png) && (!has_gt || fs::exists(stroke_png))) {
    s.box = mask_from_image<T>(read_png(box_png.string()));
    if (has_gt) s.stroke = mask_from_image<T>(read_png(stroke_png.string()));
  } else {
    s.box = rasterize_box_mask<T>(rec.boxes, s.input_img.h, s.input_img.w);
    if (has_gt)
      s.stroke = derive_stroke_mask<T>(s.input_img, s.gt_img, s.box, threshold, stroke_dilate);
    if (use_cache) {
      std::error_code ec;
      fs::create_directories(cache_dir, ec);
      if (!ec) {
        write_png(box_png.string(), mask_to_image(s.box));
        if (has_gt) write_png(stroke_png.string(), mask_to_image(s.stroke));
      }
    }
  }
  if (!has_gt) s.stroke = Tensor<T>::zeros({1, 1, s.input_img.h, s.input_img.w});
  s.input = tensor_from_image<T>(s.input_img);
  if (has_gt) s.gt = tensor_from_image<T>(s.gt_img);
  return s;
}

// ---------------------------------------------------------------------------
// geometry helpers for arbitrary-size inference

// reflect-pads on the bottom/right so H and W become multiples of `multiple`
template <class T>
Tensor<T> pad_to_multiple(const Tensor<T>& x, int multiple) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Hp = (H + multiple - 1) / multiple * multiple;
  const int Wp = (W + multiple - 1) / multiple * multiple;
  if (Hp == H && Wp == W) return x;
  DETEXT_CHECK(H >= 2 && W >= 2, "pad_to_multiple: image too small to reflect");
  Tensor<T> y({N, C, Hp, Wp});
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
  };
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int yy = 0; yy < Hp; ++yy)
        for (int xx = 0; xx < Wp; ++xx)
          y.at(n, c, yy, xx) = x.at(n, c, reflect(yy, H), reflect(xx, W));
  return y;
}

template <class T>
Tensor<T> crop_to(const Tensor<T>& x, int H, int W) {
  if (x.dim(2) == H && x.dim(3) == W) return x;
  Tensor<T> y({x.dim(0), x.dim(1), H, W});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) y.at(n, c, yy, xx) = x.at(n, c, yy, xx);
  return y;
}

}  // namespace detext
