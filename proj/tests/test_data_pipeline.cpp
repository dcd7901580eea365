#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "detext/data.hpp"
#include "detext/image.hpp"
#include "testutil.hpp"

using namespace detext;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("detext_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int64_t mask_sum(const Tensor<double>& m) {
  int64_t s = 0;
  for (int64_t i = 0; i < m.numel(); ++i) {
    REQUIRE((m[i] == 0.0 || m[i] == 1.0));
    s += m[i] > 0 ? 1 : 0;
  }
  return s;
}

}  // namespace

TEST_CASE("box rasterization covers the expected pixels", "[data]") {
  SECTION("no boxes gives an empty mask") {
    auto m = rasterize_box_mask<double>({}, 8, 8);
    REQUIRE(mask_sum(m) == 0);
  }
  SECTION("axis-aligned rectangle is boundary inclusive") {
    Quad q{2, 2, 5, 2, 5, 4, 2, 4};
    auto m = rasterize_box_mask<double>({q}, 8, 8);
    REQUIRE(mask_sum(m) == 12);  // 4 columns x 3 rows
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const bool inside = x >= 2 && x <= 5 && y >= 2 && y <= 4;
        REQUIRE(m.at(0, 0, y, x) == (inside ? 1.0 : 0.0));
      }
  }
  SECTION("full-frame quad covers everything") {
    Quad q{0, 0, 7, 0, 7, 7, 0, 7};
    REQUIRE(mask_sum(rasterize_box_mask<double>({q}, 8, 8)) == 64);
  }
  SECTION("degenerate quads are skipped") {
    Quad q{3, 3, 3, 3, 3, 3, 3, 3};
    REQUIRE(mask_sum(rasterize_box_mask<double>({q}, 8, 8)) == 0);
  }
  SECTION("random axis-aligned rectangles match a bounds check") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
      const int x0 = static_cast<int>(rng.uniform_int(0, 20)), y0 = static_cast<int>(rng.uniform_int(0, 20));
      const int x1 = x0 + static_cast<int>(rng.uniform_int(1, 10)), y1 = y0 + static_cast<int>(rng.uniform_int(1, 10));
      Quad q{x0, y0, x1, y0, x1, y1, x0, y1};
      auto m = rasterize_box_mask<double>({q}, 32, 32);
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          const bool inside = x >= x0 && x <= std::min(x1, 31) && y >= y0 && y <= std::min(y1, 31);
          REQUIRE(m.at(0, 0, y, x) == (inside ? 1.0 : 0.0));
        }
    }
  }
  SECTION("overlapping quads stay binary") {
    Quad a{1, 1, 6, 1, 6, 6, 1, 6};
    Quad b{4, 4, 7, 4, 7, 7, 4, 7};
    auto m = rasterize_box_mask<double>({a, b}, 8, 8);
    mask_sum(m);  // asserts all values are 0/1
    REQUIRE(m.at(0, 0, 5, 5) == 1.0);
  }
}

TEST_CASE("stroke derivation thresholds the channel-wise difference", "[data]") {
  Image in(8, 8, 3), gt(8, 8, 3);
  for (int i = 0; i < 8 * 8 * 3; ++i) {
    in.pix[i] = 100;
    gt.pix[i] = 100;
  }
  Quad q{0, 0, 7, 0, 7, 7, 0, 7};
  auto box = rasterize_box_mask<double>({q}, 8, 8);

  SECTION("identical images give no strokes") {
    REQUIRE(mask_sum(derive_stroke_mask<double>(in, gt, box)) == 0);
  }
  SECTION("difference must strictly exceed the threshold") {
    in.at(3, 3, 1) = 125;  // delta 25, not a stroke
    REQUIRE(mask_sum(derive_stroke_mask<double>(in, gt, box)) == 0);
    in.at(3, 3, 1) = 126;  // delta 26, stroke
    auto m = derive_stroke_mask<double>(in, gt, box);
    REQUIRE(mask_sum(m) == 1);
    REQUIRE(m.at(0, 0, 3, 3) == 1.0);
  }
  SECTION("pixels outside every box are never strokes") {
    auto small = rasterize_box_mask<double>({Quad{0, 0, 3, 0, 3, 3, 0, 3}}, 8, 8);
    in.at(6, 6, 0) = 255;
    auto m = derive_stroke_mask<double>(in, gt, small);
    REQUIRE(m.at(0, 0, 6, 6) == 0.0);
  }
  SECTION("matches a brute-force evaluation on random images") {
    Rng rng(7);
    Image a(16, 16, 3), b(16, 16, 3);
    for (int i = 0; i < 16 * 16 * 3; ++i) {
      a.pix[i] = static_cast<uint8_t>(rng.uniform_int(0, 255));
      b.pix[i] = static_cast<uint8_t>(rng.uniform_int(0, 255));
    }
    auto allbox = rasterize_box_mask<double>({Quad{0, 0, 15, 0, 15, 15, 0, 15}}, 16, 16);
    auto m = derive_stroke_mask<double>(a, b, allbox);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        int maxd = 0;
        for (int c = 0; c < 3; ++c)
          maxd = std::max(maxd, std::abs(static_cast<int>(a.at(y, x, c)) - static_cast<int>(b.at(y, x, c))));
        REQUIRE(m.at(0, 0, y, x) == (maxd > 25 ? 1.0 : 0.0));
      }
  }
}

TEST_CASE("mask dilation grows by one ring per iteration", "[data]") {
  Tensor<double> m = Tensor<double>::zeros({1, 1, 9, 9});
  m.at(0, 0, 4, 4) = 1;
  SECTION("zero iterations is the identity") {
    auto d = dilate_mask(m, 0);
    for (int64_t i = 0; i < m.numel(); ++i) REQUIRE(d[i] == m[i]);
  }
  SECTION("one iteration fills the 3x3 neighbourhood") {
    auto d = dilate_mask(m, 1);
    REQUIRE(mask_sum(d) == 9);
    for (int y = 3; y <= 5; ++y)
      for (int x = 3; x <= 5; ++x) REQUIRE(d.at(0, 0, y, x) == 1.0);
  }
  SECTION("iterations compose") {
    auto once_twice = dilate_mask(dilate_mask(m, 1), 2);
    auto three = dilate_mask(m, 3);
    for (int64_t i = 0; i < m.numel(); ++i) REQUIRE(once_twice[i] == three[i]);
    REQUIRE(mask_sum(three) == 49);  // 7x7 block
  }
  SECTION("dilation clips at the border") {
    Tensor<double> edge = Tensor<double>::zeros({1, 1, 4, 4});
    edge.at(0, 0, 0, 0) = 1;
    REQUIRE(mask_sum(dilate_mask(edge, 1)) == 4);
  }
}

TEST_CASE("stroke dilation composes with the box clip", "[data]") {
  Image in(8, 8, 3), gt(8, 8, 3);
  for (int i = 0; i < 8 * 8 * 3; ++i) in.pix[i] = gt.pix[i] = 100;
  in.at(3, 3, 0) = 200;
  auto box = rasterize_box_mask<double>({Quad{2, 2, 4, 2, 4, 4, 2, 4}}, 8, 8);
  auto m = derive_stroke_mask<double>(in, gt, box, 25, 1);
  // dilation spreads to the 3x3 ring but the box clip wins afterwards
  REQUIRE(m.at(0, 0, 3, 3) == 1.0);
  REQUIRE(m.at(0, 0, 2, 2) == 1.0);
  REQUIRE(m.at(0, 0, 4, 4) == 1.0);
  REQUIRE(mask_sum(m) == 9);
  // box has a 3x3 interior here so everything stayed inside
  for (int64_t i = 0; i < m.numel(); ++i)
    if (m[i] > 0) REQUIRE(box[i] == 1.0);
}

TEST_CASE("surround mask is box minus stroke", "[data]") {
  auto box = rasterize_box_mask<double>({Quad{1, 1, 4, 1, 4, 4, 1, 4}}, 8, 8);
  Tensor<double> stroke = Tensor<double>::zeros({1, 1, 8, 8});
  stroke.at(0, 0, 2, 2) = 1;
  auto sur = derive_surround_mask(box, stroke);
  REQUIRE(mask_sum(sur) == 16 - 1);
  REQUIRE(sur.at(0, 0, 2, 2) == 0.0);
  REQUIRE(sur.at(0, 0, 1, 1) == 1.0);
  REQUIRE(sur.at(0, 0, 0, 0) == 0.0);

  // strokes outside the box violate the contract
  Tensor<double> bad = Tensor<double>::zeros({1, 1, 8, 8});
  bad.at(0, 0, 7, 7) = 1;
  REQUIRE_THROWS_AS(derive_surround_mask(box, bad), ValidationError);
}

TEST_CASE("mask pyramid halves five times and keeps the invariants", "[data]") {
  const int H = 64, W = 64;
  auto box = rasterize_box_mask<double>({Quad{10, 10, 40, 10, 40, 30, 10, 30}}, H, W);
  Tensor<double> stroke = Tensor<double>::zeros({1, 1, H, W});
  stroke.at(0, 0, 15, 20) = 1;
  stroke.at(0, 0, 16, 21) = 1;
  auto pyr = build_mask_pyramid(box, stroke);
  REQUIRE(pyr.levels.size() == 5);
  for (int i = 0; i < 5; ++i) {
    const int f = 2 << i;
    REQUIRE(pyr.levels[i].box.dim(2) == H / f);
    REQUIRE(pyr.levels[i].box.dim(3) == W / f);
    for (int64_t j = 0; j < pyr.levels[i].box.numel(); ++j) {
      const double b = pyr.levels[i].box[j], s = pyr.levels[i].stroke[j],
                   r = pyr.levels[i].surround[j];
      REQUIRE((b == 0.0 || b == 1.0));
      REQUIRE(s <= b);
      REQUIRE(r == b - s);
    }
  }
  // a max pool can only keep a pixel lit if some source pixel was lit
  for (int i = 0; i < 5; ++i) {
    const int f = 2 << i;
    for (int y = 0; y < H / f; ++y)
      for (int x = 0; x < W / f; ++x) {
        if (pyr.levels[i].stroke.at(0, 0, y, x) == 0.0) continue;
        bool found = false;
        for (int dy = 0; dy < f && !found; ++dy)
          for (int dx = 0; dx < f && !found; ++dx)
            if (stroke.at(0, 0, y * f + dy, x * f + dx) > 0) found = true;
        REQUIRE(found);
      }
  }
  // the two stroke pixels survive into every level
  for (int i = 0; i < 5; ++i) REQUIRE(mask_sum(pyr.levels[i].stroke) >= 1);

  SECTION("all-zero and all-one inputs") {
    auto z = Tensor<double>::zeros({1, 1, 64, 64});
    auto o = Tensor<double>::full({1, 1, 64, 64}, 1.0);
    auto pz = build_mask_pyramid(z, z);
    auto po = build_mask_pyramid(o, o);
    for (int i = 0; i < 5; ++i) {
      REQUIRE(mask_sum(pz.levels[i].box) == 0);
      REQUIRE(mask_sum(po.levels[i].box) == po.levels[i].box.numel());
      REQUIRE(mask_sum(po.levels[i].surround) == 0);
    }
  }
  SECTION("sizes not divisible by 32 are rejected") {
    auto z = Tensor<double>::zeros({1, 1, 48, 64});
    REQUIRE_THROWS_AS(build_mask_pyramid(z, z), ValidationError);
  }
}

TEST_CASE("synthetic samples are deterministic and self-consistent", "[data]") {
  Rng bg_rng(99);
  Image bg = detail::synth_background(bg_rng, 64, 64);
  SynthConfig cfg;
  auto a = synthesize_sample(bg, 1234, cfg);
  auto b = synthesize_sample(bg, 1234, cfg);
  REQUIRE(a.input.pix == b.input.pix);
  REQUIRE(a.gt.pix == b.gt.pix);
  REQUIRE(a.boxes == b.boxes);

  auto c = synthesize_sample(bg, 1235, cfg);
  REQUIRE(a.input.pix != c.input.pix);

  // gt is the untouched background
  REQUIRE(a.gt.pix == bg.pix);

  // every stroke pixel lands inside some reported box, with margin for thickness
  if (!a.boxes.empty()) {
    auto box = rasterize_box_mask<double>(a.boxes, 64, 64);
    auto stroke = derive_stroke_mask<double>(a.input, a.gt, box);
    REQUIRE(mask_sum(stroke) > 0);
    // the modified pixels really exceed the detection threshold somewhere
    auto full = rasterize_box_mask<double>({Quad{0, 0, 63, 0, 63, 63, 0, 63}}, 64, 64);
    auto all_changed = derive_stroke_mask<double>(a.input, a.gt, full);
    for (int64_t i = 0; i < all_changed.numel(); ++i)
      if (all_changed[i] > 0) REQUIRE(box[i] == 1.0);
  }
}

TEST_CASE("boxes files parse strictly", "[data]") {
  auto dir = fresh_dir("boxes");
  const auto path = (dir / "b.txt").string();
  SECTION("well-formed lines with blanks") {
    std::ofstream(path) << "1,2,3,4,5,6,7,8\n\n  9, 10 ,11,12,13,14,15,16  \n";
    auto qs = parse_boxes_file(path);
    REQUIRE(qs.size() == 2);
    REQUIRE(qs[0] == Quad{1, 2, 3, 4, 5, 6, 7, 8});
    REQUIRE(qs[1] == Quad{9, 10, 11, 12, 13, 14, 15, 16});
  }
  SECTION("short lines name the offending line") {
    std::ofstream(path) << "1,2,3,4,5,6,7,8\n1,2,3\n";
    try {
      parse_boxes_file(path);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      REQUIRE(std::string(e.what()).find(":2:") != std::string::npos);
    }
  }
  SECTION("trailing tokens are rejected") {
    std::ofstream(path) << "1,2,3,4,5,6,7,8,9\n";
    REQUIRE_THROWS_AS(parse_boxes_file(path), ValidationError);
  }
  SECTION("non-numeric tokens are rejected") {
    std::ofstream(path) << "1,2,x,4,5,6,7,8\n";
    REQUIRE_THROWS_AS(parse_boxes_file(path), ValidationError);
  }
  SECTION("missing file raises an io error") {
    REQUIRE_THROWS_AS(parse_boxes_file((dir / "missing.txt").string()), IoError);
  }
}

TEST_CASE("dataset loading skips broken samples and keeps order", "[data]") {
  auto dir = fresh_dir("dataset");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "boxes");
  Rng rng(3);
  Image img = detail::synth_background(rng, 64, 64);
  for (const std::string id : {"a", "b", "c"}) {
    write_png((dir / "images" / (id + ".png")).string(), img);
    write_png((dir / "gt" / (id + ".png")).string(), img);
  }
  std::ofstream((dir / "boxes" / "a.txt").string()) << "1,1,10,1,10,10,1,10\n";
  std::ofstream((dir / "boxes" / "b.txt").string()) << "bad line\n";
  // c has no boxes file at all
  int skipped = 0;
  auto recs = load_dataset(dir.string(), true, &skipped);
  REQUIRE(recs.size() == 1);
  REQUIRE(recs[0].id == "a");
  REQUIRE(recs[0].boxes.size() == 1);
  REQUIRE(skipped == 2);

  SECTION("gt optional mode keeps samples without gt") {
    fs::remove(dir / "gt" / "a.png");
    std::ofstream((dir / "boxes" / "c.txt").string()) << "1,1,10,1,10,10,1,10\n";
    auto eval_recs = load_dataset(dir.string(), false, &skipped);
    REQUIRE(eval_recs.size() == 2);  // a (no gt) and c
    REQUIRE(eval_recs[0].gt_path.empty());
    REQUIRE_FALSE(eval_recs[1].gt_path.empty());
  }
  SECTION("missing images directory raises io error") {
    REQUIRE_THROWS_AS(load_dataset((dir / "nope").string()), IoError);
  }
}

TEST_CASE("sample loading caches masks as images and reuses them", "[data]") {
  auto dir = fresh_dir("cache");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "boxes");
  Rng rng(8);
  Image bg = detail::synth_background(rng, 64, 64);
  auto synth = synthesize_sample(bg, 77, SynthConfig{});
  write_png((dir / "images" / "s.png").string(), synth.input);
  write_png((dir / "gt" / "s.png").string(), synth.gt);
  std::ofstream bf((dir / "boxes" / "s.txt").string());
  for (const auto& q : synth.boxes) {
    for (int i = 0; i < 8; ++i) bf << q[i] << (i == 7 ? '\n' : ',');
  }
  bf.close();

  auto recs = load_dataset(dir.string());
  REQUIRE(recs.size() == 1);
  const auto cache = (dir / "cache").string();
  auto s1 = load_sample<double>(recs[0], cache);
  REQUIRE(fs::exists(fs::path(cache) / "s.box.png"));
  REQUIRE(fs::exists(fs::path(cache) / "s.stroke.png"));
  // cached PNGs hold only 0 and 255
  Image cached = read_png((fs::path(cache) / "s.box.png").string());
  REQUIRE(cached.c == 1);
  for (uint8_t v : cached.pix) REQUIRE((v == 0 || v == 255));

  auto s2 = load_sample<double>(recs[0], cache);  // cache hit
  REQUIRE(s1.box.shape == s2.box.shape);
  for (int64_t i = 0; i < s1.box.numel(); ++i) {
    REQUIRE(s1.box[i] == s2.box[i]);
    REQUIRE(s1.stroke[i] == s2.stroke[i]);
  }
  // input tensor is the image scaled to [0,1]
  REQUIRE(s1.input.dim(1) == 3);
  REQUIRE(s1.input.at(0, 0, 0, 0) == Catch::Approx(synth.input.at(0, 0, 0) / 255.0).margin(1e-9));
}

TEST_CASE("padding reflects and cropping restores", "[data]") {
  Rng rng(21);
  auto x = testutil::random_tensor(rng, {1, 3, 37, 45});
  auto p = pad_to_multiple(x, 32);
  REQUIRE(p.dim(2) == 64);
  REQUIRE(p.dim(3) == 64);
  auto back = crop_to(p, 37, 45);
  for (int64_t i = 0; i < x.numel(); ++i) REQUIRE(back[i] == x[i]);
  // reflected row: row 37 mirrors row 36-? reflect(37,37) = 2*37-2-37 = 35
  REQUIRE(p.at(0, 0, 37, 0) == x.at(0, 0, 35, 0));
  REQUIRE(p.at(0, 1, 0, 45) == x.at(0, 1, 0, 43));
  // already-aligned tensors pass through untouched
  auto q = pad_to_multiple(p, 32);
  REQUIRE(q.dim(2) == 64);
}

TEST_CASE("png round trip preserves bytes", "[data]") {
  auto dir = fresh_dir("png");
  Rng rng(17);
  Image img = detail::synth_background(rng, 33, 47);
  const auto path = (dir / "x.png").string();
  write_png(path, img);
  Image back = read_png(path);
  REQUIRE(back.h == img.h);
  REQUIRE(back.w == img.w);
  REQUIRE(back.c == 3);
  REQUIRE(back.pix == img.pix);

  Image gray(5, 6, 1);
  for (int i = 0; i < 30; ++i) gray.pix[i] = static_cast<uint8_t>(i * 8);
  write_png(path, gray);
  Image gback = read_png(path);
  REQUIRE(gback.c == 1);
  REQUIRE(gback.pix == gray.pix);

  REQUIRE_THROWS_AS(read_png((dir / "missing.png").string()), IoError);
}
