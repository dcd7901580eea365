#pragma once

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "detext/checkpoint.hpp"
#include "detext/discriminator.hpp"
#include "detext/generator.hpp"
#include "detext/losses.hpp"
#include "detext/metrics.hpp"

namespace detext {

struct TrainConfig {
  int batch_size = 4;       // apply_paper_scale sets 30
  int epochs = 6;
  int steps = 0;            // > 0 overrides the epoch count
  double lr0 = 0.0005;
  int lr_decay_every = 500;  // 50,000 at full scale (apply_paper_scale)
  double beta1 = 0.9, beta2 = 0.999;
  uint64_t seed = 1;
  std::string ablation = "baseline+ga+roig";
  int base_channels = 8;
  int disc_base = 8;
  int checkpoint_every = 500;
  int threshold = 25;
  int stroke_dilate = 0;
  bool attention_literal = false;
  bool paper_scale = false;
  LossWeights weights;
  std::string out_dir = "run";
};

inline void apply_paper_scale(TrainConfig& c) {
  c.batch_size = 30;
  c.lr_decay_every = 50000;
  c.base_channels = 64;
  c.disc_base = 64;
}

struct AblationWiring {
  AttentionKind attention = AttentionKind::none;
  bool roig = false;
};

inline AblationWiring apply_ablation(const std::string& name) {
  if (name == "baseline") return {AttentionKind::none, false};
  if (name == "baseline+sa") return {AttentionKind::sa, false};
  if (name == "baseline+tsra") return {AttentionKind::tsra, false};
  if (name == "baseline+tssra") return {AttentionKind::tssra, false};
  if (name == "baseline+ga") return {AttentionKind::ga, false};
  if (name == "baseline+roig") return {AttentionKind::none, true};
  if (name == "baseline+ga+roig") return {AttentionKind::ga, true};
  throw ValidationError("unknown ablation: " + name);
}

inline const std::vector<std::string>& all_ablations() {
  static const std::vector<std::string> names = {
      "baseline",      "baseline+sa",   "baseline+tsra",    "baseline+tssra",
      "baseline+ga",   "baseline+roig", "baseline+ga+roig"};
  return names;
}

inline double lr_at(int64_t step, const TrainConfig& cfg) {
  return cfg.lr0 / std::pow(5.0, static_cast<double>(step / cfg.lr_decay_every));
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"steps", c.steps},
          {"lr0", c.lr0},
          {"lr_decay_every", c.lr_decay_every},
          {"seed", c.seed},
          {"ablation", c.ablation},
          {"base_channels", c.base_channels},
          {"disc_base", c.disc_base},
          {"checkpoint_every", c.checkpoint_every},
          {"threshold", c.threshold},
          {"stroke_dilate", c.stroke_dilate},
          {"attention_literal", c.attention_literal},
          {"paper_scale", c.paper_scale},
          {"out_dir", c.out_dir},
          {"weights",
           {{"lambda_r", c.weights.lambda_r},
            {"lambda_p", c.weights.lambda_p},
            {"lambda_s", c.weights.lambda_s},
            {"lambda_t", c.weights.lambda_t},
            {"lambda_adv", c.weights.lambda_adv},
            {"lambda_att", c.weights.lambda_att},
            {"scale_weights", c.weights.scale_weights}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.steps = j.value("steps", c.steps);
  c.lr0 = j.value("lr0", c.lr0);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.seed = j.value("seed", c.seed);
  c.ablation = j.value("ablation", c.ablation);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.disc_base = j.value("disc_base", c.disc_base);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.threshold = j.value("threshold", c.threshold);
  c.stroke_dilate = j.value("stroke_dilate", c.stroke_dilate);
  c.attention_literal = j.value("attention_literal", c.attention_literal);
  c.paper_scale = j.value("paper_scale", c.paper_scale);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.lambda_r = w.value("lambda_r", c.weights.lambda_r);
    c.weights.lambda_p = w.value("lambda_p", c.weights.lambda_p);
    c.weights.lambda_s = w.value("lambda_s", c.weights.lambda_s);
    c.weights.lambda_t = w.value("lambda_t", c.weights.lambda_t);
    c.weights.lambda_adv = w.value("lambda_adv", c.weights.lambda_adv);
    c.weights.lambda_att = w.value("lambda_att", c.weights.lambda_att);
    if (w.contains("scale_weights")) {
      auto sw = w.at("scale_weights").get<std::vector<double>>();
      DETEXT_CHECK(sw.size() == 3, "scale_weights must have 3 entries");
      std::copy(sw.begin(), sw.end(), c.weights.scale_weights.begin());
    }
  }
  if (c.paper_scale) apply_paper_scale(c);
  return c;
}

struct RunManifest {
  nlohmann::json config;
  std::string code_hash;
  int64_t steps_run = 0;
  std::vector<nlohmann::json> epoch_summaries;
  std::vector<std::string> checkpoint_paths;
  std::string final_checkpoint;

  nlohmann::json to_json() const {
    return {{"config", config},
            {"code_hash", code_hash},
            {"steps_run", steps_run},
            {"epochs", epoch_summaries},
            {"checkpoints", checkpoint_paths},
            {"final_checkpoint", final_checkpoint}};
  }
};

inline std::string code_version_hash() {
#ifdef DETEXT_CODE_HASH
  return DETEXT_CODE_HASH;
#else
  return "unknown";
#endif
}

struct StepStats {
  int64_t step = 0;
  double l_r = 0, l_p = 0, l_s = 0, l_tv = 0, l_adv = 0, l_att = 0, total = 0;
  double d_loss = 0;
  double in_box_l1 = 0;  // mean |output - gt| over box pixels, model units
  double lr = 0;
};

template <class T>
struct TrainSample {
  std::string id;
  Tensor<T> x, gt;        // [1,3,H,W] in [-1,1]
  Tensor<T> box, stroke;  // [1,1,H,W]
};

template <class T>
std::vector<TrainSample<T>> load_train_samples(const std::vector<SampleRecord>& records,
                                               const std::string& cache_dir, int threshold,
                                               int stroke_dilate) {
  std::vector<TrainSample<T>> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    auto s = load_sample<T>(rec, cache_dir, threshold, stroke_dilate);
    DETEXT_CHECK(s.gt.defined(), "training requires ground truth for " + rec.id);
    TrainSample<T> t;
    t.id = s.id;
    t.x = std::move(s.input);
    t.gt = std::move(s.gt);
    for (int64_t i = 0; i < t.x.numel(); ++i) t.x[i] = 2 * t.x[i] - 1;
    for (int64_t i = 0; i < t.gt.numel(); ++i) t.gt[i] = 2 * t.gt[i] - 1;
    t.box = std::move(s.box);
    t.stroke = std::move(s.stroke);
    out.push_back(std::move(t));
  }
  return out;
}

namespace detail {

template <class T>
Tensor<T> stack_batch(const std::vector<TrainSample<T>>& samples, const std::vector<int>& idx,
                      Tensor<T> TrainSample<T>::* field) {
  const Tensor<T>& first = samples[static_cast<size_t>(idx[0])].*field;
  std::vector<int> shape = first.shape;
  shape[0] = static_cast<int>(idx.size());
  Tensor<T> out(shape);
  const int64_t per = first.numel();
  for (size_t k = 0; k < idx.size(); ++k) {
    const Tensor<T>& src = samples[static_cast<size_t>(idx[k])].*field;
    DETEXT_CHECK(src.numel() == per, "batch members must share one image size");
    std::copy_n(src.data.data(), static_cast<size_t>(per),
                out.data.data() + static_cast<int64_t>(k) * per);
  }
  return out;
}

template <class T>
double masked_l1(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask) {
  const int N = a.dim(0), C = a.dim(1);
  const int64_t hw = static_cast<int64_t>(a.dim(2)) * a.dim(3);
  double num = 0, cnt = 0;
  for (int n = 0; n < N; ++n)
    for (int64_t i = 0; i < hw; ++i) {
      if (mask[static_cast<int64_t>(n) * hw + i] <= 0) continue;
      cnt += C;
      for (int c = 0; c < C; ++c) {
        const int64_t off = (static_cast<int64_t>(n) * C + c) * hw + i;
        num += std::abs(static_cast<double>(a[off]) - b[off]);
      }
    }
  return cnt == 0 ? 0.0 : num / cnt;
}

}  // namespace detail

// Returning true from the callback stops training early (used by the overfit
// harness); pass nullptr to run the full budget.
template <class T>
using StepCallback = std::function<bool(const StepStats&, const Generator<T>&)>;

template <class T>
struct TrainResult {
  RunManifest manifest;
  Generator<T> generator;
  Discriminator<T> discriminator;
};

template <class T>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<TrainSample<T>>& samples,
                     StepCallback<T> on_step = nullptr) {
  namespace fs = std::filesystem;
  DETEXT_CHECK(!samples.empty(), "train: dataset is empty");
  DETEXT_CHECK(cfg.batch_size >= 1, "train: batch_size must be positive");
  fs::create_directories(cfg.out_dir);

  const AblationWiring wiring = apply_ablation(cfg.ablation);
  GeneratorConfig gcfg;
  gcfg.base_channels = cfg.base_channels;
  gcfg.input_size = samples[0].x.dim(3);
  gcfg.attention = wiring.attention;
  gcfg.roig = wiring.roig;

  Rng rng(cfg.seed);
  Generator<T> gen(rng, gcfg);
  Discriminator<T> disc(rng, cfg.disc_base);
  PerceptualExtractor<T> percep;
  nn::Adam<T> g_opt(gen.named_params());
  nn::Adam<T> d_opt(disc.named_params());
  g_opt.beta1 = d_opt.beta1 = cfg.beta1;
  g_opt.beta2 = d_opt.beta2 = cfg.beta2;

  const int n = static_cast<int>(samples.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps =
      cfg.steps > 0 ? cfg.steps : steps_per_epoch * static_cast<int64_t>(cfg.epochs);

  RunManifest manifest;
  manifest.config = train_config_json(cfg);
  manifest.code_hash = code_version_hash();

  std::ofstream loss_log(fs::path(cfg.out_dir) / "loss_log.jsonl", std::ios::trunc);
  DETEXT_CHECK_IO(loss_log.good(), "cannot open loss log in " + cfg.out_dir);

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  auto reshuffle = [&]() {
    for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)],
                                              order[static_cast<size_t>(rng.uniform_int(0, i))]);
  };
  reshuffle();

  double epoch_total = 0, epoch_d = 0;
  int64_t epoch_steps = 0, epoch_index = 0;
  auto flush_epoch = [&]() {
    if (epoch_steps == 0) return;
    manifest.epoch_summaries.push_back({{"epoch", epoch_index},
                                        {"mean_total", epoch_total / epoch_steps},
                                        {"mean_d_loss", epoch_d / epoch_steps},
                                        {"steps", epoch_steps}});
    epoch_total = epoch_d = 0;
    epoch_steps = 0;
    ++epoch_index;
  };

  auto check_finite = [&](double v, const char* what, int64_t step, const std::vector<int>& idx) {
    if (std::isfinite(v)) return;
    nlohmann::json dump = {{"step", step}, {"component", what}};
    for (const int i : idx) dump["batch_ids"].push_back(samples[static_cast<size_t>(i)].id);
    std::ofstream(fs::path(cfg.out_dir) / "numeric_failure.json") << dump.dump(2) << "\n";
    throw NumericError(std::string("non-finite ") + what + " at step " + std::to_string(step) +
                       "; offending batch dumped to numeric_failure.json");
  };

  for (int64_t step = 0; step < total_steps; ++step) {
    std::vector<int> idx(static_cast<size_t>(cfg.batch_size));
    for (int k = 0; k < cfg.batch_size; ++k) {
      const int64_t cursor = step * cfg.batch_size + k;
      if (cursor % n == 0 && cursor > 0) reshuffle();
      idx[static_cast<size_t>(k)] = order[static_cast<size_t>(cursor % n)];
    }

    Tensor<T> xb = detail::stack_batch(samples, idx, &TrainSample<T>::x);
    Tensor<T> gtb = detail::stack_batch(samples, idx, &TrainSample<T>::gt);
    Tensor<T> boxb = detail::stack_batch(samples, idx, &TrainSample<T>::box);
    Tensor<T> strokeb = detail::stack_batch(samples, idx, &TrainSample<T>::stroke);
    MaskPyramid<T> pyr = build_mask_pyramid(boxb, strokeb);

    auto img = constant(xb);
    auto box_v = constant(boxb);
    auto gt_v = constant(gtb);

    g_opt.zero_grad();
    auto out = gen.forward(img, box_v);

    LossBreakdown<T> parts;
    if (wiring.roig) {
      auto comps = make_composites(img, out.full, boxb, strokeb);
      parts.l_r = roi_regression_loss(out.aux, gtb, boxb, cfg.weights.scale_weights);
      parts.l_p = perceptual_loss(comps, gt_v, percep);
      parts.l_s = style_loss(comps, gt_v, percep);
      parts.l_tv = total_variation_loss(comps.box_comp);
    } else {
      CompositePair<T> raw_pair{out.full, out.full};
      parts.l_r = roi_regression_loss(out.aux, gtb, Tensor<T>::full(boxb.shape, T(1)),
                                      cfg.weights.scale_weights);
      parts.l_p = perceptual_loss(raw_pair, gt_v, percep);
      parts.l_s = style_loss(raw_pair, gt_v, percep);
      parts.l_tv = total_variation_loss(out.full);
    }
    parts.l_att = attention_loss(out.ga, pyr, wiring.attention, cfg.attention_literal);

    const Tensor<T> labels_real = locality_labels(strokeb, 16, DiscBranch::real);
    const Tensor<T> labels_fake = locality_labels(strokeb, 16, DiscBranch::fake);
    auto d_fake_live = disc.forward(img, box_v, out.full);
    {
      // real scores are irrelevant for the generator term; reuse fake ones
      auto [g_adv, unused] =
          adversarial_losses(d_fake_live.score, d_fake_live.score, labels_real, labels_fake);
      (void)unused;
      parts.l_adv = g_adv;
    }

    auto total = total_generator_loss(parts, cfg.weights);

    StepStats st;
    st.step = step;
    st.l_r = parts.l_r->value[0];
    st.l_p = parts.l_p->value[0];
    st.l_s = parts.l_s->value[0];
    st.l_tv = parts.l_tv->value[0];
    st.l_adv = parts.l_adv->value[0];
    st.l_att = parts.l_att->value[0];
    st.total = total->value[0];
    st.lr = lr_at(step, cfg);
    st.in_box_l1 = detail::masked_l1(out.full->value, gtb, boxb);
    check_finite(st.total, "generator loss", step, idx);

    backward(total);
    g_opt.step(st.lr);

    d_opt.zero_grad();
    auto fake_frozen = detach(out.full);
    auto d_real = disc.forward(img, box_v, gt_v);
    auto d_fake = disc.forward(img, box_v, fake_frozen);
    auto [g_unused, d_loss] = adversarial_losses(d_real.score, d_fake.score, labels_real,
                                                 labels_fake);
    (void)g_unused;
    st.d_loss = d_loss->value[0];
    check_finite(st.d_loss, "discriminator loss", step, idx);
    backward(d_loss);
    d_opt.step(st.lr);

    nlohmann::json line = {{"step", step},     {"l_r", st.l_r},     {"l_p", st.l_p},
                           {"l_s", st.l_s},    {"l_tv", st.l_tv},   {"l_adv", st.l_adv},
                           {"l_att", st.l_att}, {"total", st.total}};
    loss_log << line.dump() << "\n";

    epoch_total += st.total;
    epoch_d += st.d_loss;
    ++epoch_steps;
    manifest.steps_run = step + 1;
    if ((step + 1) % steps_per_epoch == 0) flush_epoch();

    const bool last = step + 1 == total_steps;
    bool stop = false;
    if (on_step && on_step(st, gen)) stop = true;

    if (stop || last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)) {
      nlohmann::json ckpt_cfg = generator_config_json(gcfg);
      ckpt_cfg["disc_base"] = cfg.disc_base;
      ckpt_cfg["step"] = step + 1;
      nn::NamedParams<T> all = gen.named_params();
      for (auto& p : disc.named_params()) all.push_back(p);
      const std::string path =
          (fs::path(cfg.out_dir) / ("ckpt_step" + std::to_string(step + 1) + ".bin")).string();
      save_checkpoint(path, ckpt_cfg, all);
      manifest.checkpoint_paths.push_back(path);
      manifest.final_checkpoint = path;
    }
    if (stop) break;
  }
  flush_epoch();
  loss_log.flush();

  // a stable alias for the newest weights
  if (!manifest.final_checkpoint.empty()) {
    const std::string latest = (fs::path(cfg.out_dir) / "model.ckpt").string();
    std::error_code ec;
    fs::copy_file(manifest.final_checkpoint, latest, fs::copy_options::overwrite_existing, ec);
    if (!ec) manifest.final_checkpoint = latest;
  }
  std::ofstream(fs::path(cfg.out_dir) / "manifest.json") << manifest.to_json().dump(2) << "\n";

  TrainResult<T> result{std::move(manifest), std::move(gen), std::move(disc)};
  return result;
}

}  // namespace detext
