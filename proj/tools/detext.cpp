#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "detext/checkpoint.hpp"
#include "detext/data.hpp"
#include "detext/metrics.hpp"
#include "detext/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_boxes_file(const std::string& path, const std::vector<detext::Quad>& boxes) {
  std::ofstream f(path, std::ios::trunc);
  DETEXT_CHECK_IO(f.good(), "cannot open " + path + " for writing");
  for (const auto& q : boxes) {
    for (int i = 0; i < 8; ++i) f << q[i] << (i == 7 ? "" : ",");
    f << "\n";
  }
}

int cmd_make_data(const std::string& out, int n, uint64_t seed, int size,
                  const detext::SynthConfig& base_cfg) {
  detext::SynthConfig cfg = base_cfg;
  cfg.height = cfg.width = size;
  fs::create_directories(fs::path(out) / "images");
  fs::create_directories(fs::path(out) / "gt");
  fs::create_directories(fs::path(out) / "boxes");
  detext::Rng master(seed);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    detext::Rng bg_rng(master.fork(static_cast<uint64_t>(2 * i)));
    const detext::Image bg = detext::detail::synth_background(bg_rng, size, size);
    const auto sample =
        detext::synthesize_sample(bg, master.fork(static_cast<uint64_t>(2 * i + 1)), cfg);
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%05d", i);
    detext::write_png((fs::path(out) / "images" / (std::string(id) + ".png")).string(),
                      sample.input);
    detext::write_png((fs::path(out) / "gt" / (std::string(id) + ".png")).string(), sample.gt);
    write_boxes_file((fs::path(out) / "boxes" / (std::string(id) + ".txt")).string(),
                     sample.boxes);
    ids.emplace_back(id);
  }
  json manifest = {{"seed", seed},
                   {"count", n},
                   {"ids", ids},
                   {"config",
                    {{"height", cfg.height},
                     {"width", cfg.width},
                     {"min_boxes", cfg.min_boxes},
                     {"max_boxes", cfg.max_boxes},
                     {"min_thickness", cfg.min_thickness},
                     {"max_thickness", cfg.max_thickness},
                     {"color_offset", cfg.color_offset},
                     {"max_retries", cfg.max_retries}}}};
  std::ofstream mf(fs::path(out) / "manifest.json", std::ios::trunc);
  DETEXT_CHECK_IO(mf.good(), "cannot write manifest in " + out);
  mf << manifest.dump(2) << "\n";
  std::cout << "wrote " << n << " samples to " << out << "\n";
  return 0;
}

void write_report(const detext::MetricsReport& rep, const std::string& json_path,
                  const std::string& csv_path) {
  json per = json::array();
  for (const auto& m : rep.per_image)
    per.push_back({{"id", m.id}, {"psnr", m.psnr}, {"ssim", m.ssim}, {"age", m.age}});
  json j = {{"variant", rep.variant},
            {"per_image", per},
            {"mean", {{"psnr", rep.mean_psnr}, {"ssim", rep.mean_ssim}, {"age", rep.mean_age}}}};
  std::ofstream jf(json_path, std::ios::trunc);
  DETEXT_CHECK_IO(jf.good(), "cannot write " + json_path);
  jf << j.dump(2) << "\n";
  std::ofstream cf(csv_path, std::ios::trunc);
  DETEXT_CHECK_IO(cf.good(), "cannot write " + csv_path);
  cf << "id,psnr,ssim,age\n";
  for (const auto& m : rep.per_image)
    cf << m.id << "," << m.psnr << "," << m.ssim << "," << m.age << "\n";
  cf << "mean," << rep.mean_psnr << "," << rep.mean_ssim << "," << rep.mean_age << "\n";
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& variant,
             const std::string& out_prefix, const std::string& attention_dir,
             const std::string& detections_dir) {
  auto gen = detext::load_generator<float>(ckpt_path);
  auto records = detext::load_dataset(data);
  std::vector<std::string> variants;
  if (variant == "both") {
    variants = {"raw", "pasted"};
  } else {
    variants = {variant};
  }
  for (const auto& v : variants) {
    auto rep = detext::evaluate_dataset(gen, records, v);
    write_report(rep, out_prefix + "." + v + ".json", out_prefix + "." + v + ".csv");
    std::cout << v << ": mean psnr " << rep.mean_psnr << " dB, ssim " << rep.mean_ssim
              << ", age " << rep.mean_age << " over " << rep.per_image.size() << " image(s)\n";
  }
  if (!attention_dir.empty()) {
    fs::create_directories(attention_dir);
    int dumped = 0;
    for (const auto& rec : records) {
      if (dumped >= 4) break;
      const detext::Image input = detext::read_png(rec.image_path);
      auto res = detext::infer_image(gen, input, rec.boxes);
      for (int lvl = 0; lvl < 5; ++lvl) {
        const auto& ga = res.net.ga[static_cast<size_t>(lvl)];
        if (!ga.attn) continue;
        auto maps = detext::ga_visualize(
            ga.score_t ? ga.score_t->value : detext::Tensor<float>(),
            ga.score_s ? ga.score_s->value : detext::Tensor<float>(), ga.attn->value);
        const std::string base =
            (fs::path(attention_dir) / (rec.id + "_ga" + std::to_string(lvl))).string();
        const char* names[3] = {"_tsr", "_tssr", "_attn"};
        for (int m = 0; m < 3; ++m)
          if (!maps[static_cast<size_t>(m)].empty())
            detext::write_png(base + names[m] + ".png", maps[static_cast<size_t>(m)]);
      }
      ++dumped;
    }
  }
  if (!detections_dir.empty()) {
    int64_t matches = 0, dets = 0, gts = 0;
    for (const auto& rec : records) {
      const fs::path det_file = fs::path(detections_dir) / (rec.id + ".txt");
      std::vector<detext::ScoredQuad> d;
      if (fs::exists(det_file)) d = detext::parse_detections_file(det_file.string());
      auto r = detext::detection_prf(d, rec.boxes);
      matches += r.matches;
      dets += static_cast<int64_t>(d.size());
      gts += static_cast<int64_t>(rec.boxes.size());
    }
    const double p = dets == 0 ? 0 : static_cast<double>(matches) / static_cast<double>(dets);
    const double r = gts == 0 ? 0 : static_cast<double>(matches) / static_cast<double>(gts);
    const double f = (p + r) == 0 ? 0 : 2 * p * r / (p + r);
    std::cout << "detection: precision " << p << ", recall " << r << ", f1 " << f << "\n";
    std::ofstream df(out_prefix + ".detection.json", std::ios::trunc);
    df << json{{"precision", p}, {"recall", r}, {"f1", f}}.dump(2) << "\n";
  }
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& image_path,
              const std::string& boxes_path, const std::string& out_path, bool raw) {
  DETEXT_CHECK_IO(fs::exists(ckpt_path), "missing checkpoint: " + ckpt_path);
  DETEXT_CHECK_IO(fs::exists(image_path), "missing image: " + image_path);
  DETEXT_CHECK_IO(fs::exists(boxes_path), "missing boxes file: " + boxes_path);
  const auto boxes = detext::parse_boxes_file(boxes_path);
  if (boxes.empty() && !raw) {
    // nothing selected: the output must be byte-identical to the input
    detext::write_file_bytes(out_path, detext::read_file_bytes(image_path));
    std::cout << "no boxes given; copied input unchanged to " << out_path << "\n";
    return 0;
  }
  auto gen = detext::load_generator<float>(ckpt_path);
  const detext::Image input = detext::read_png(image_path);
  auto res = detext::infer_image(gen, input, boxes);
  detext::write_png(out_path, raw ? res.raw : res.pasted);
  std::cout << "wrote " << out_path << (raw ? " (raw output)" : " (paste-back)") << "\n";
  return 0;
}

int cmd_train(detext::TrainConfig cfg, const std::string& data) {
  auto records = detext::load_dataset(data);
  auto samples = detext::load_train_samples<float>(records, (fs::path(data) / "cache").string(),
                                                   cfg.threshold, cfg.stroke_dilate);
  auto result = detext::train<float>(cfg, samples);
  std::cout << "trained " << result.manifest.steps_run << " step(s); checkpoint "
            << result.manifest.final_checkpoint << "\n";
  return 0;
}

int cmd_ablate(const std::string& data, const std::string& out, std::vector<std::string> variants,
               detext::TrainConfig base_cfg) {
  if (variants.empty()) variants = detext::all_ablations();
  auto records = detext::load_dataset(data);
  auto samples = detext::load_train_samples<float>(records, (fs::path(data) / "cache").string(),
                                                   base_cfg.threshold, base_cfg.stroke_dilate);
  fs::create_directories(out);
  struct Row {
    std::string variant;
    bool ok = false;
    detext::MetricsReport raw, pasted;
    std::string error;
  };
  std::vector<Row> rows;
  for (const auto& v : variants) {
    Row row;
    row.variant = v;
    try {
      detext::TrainConfig cfg = base_cfg;
      cfg.ablation = v;
      cfg.out_dir = (fs::path(out) / v).string();
      auto result = detext::train<float>(cfg, samples);
      row.raw = detext::evaluate_dataset(result.generator, records, "raw");
      row.pasted = detext::evaluate_dataset(result.generator, records, "pasted");
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
      std::cerr << "variant " << v << " failed: " << e.what() << "\n";
    }
    rows.push_back(std::move(row));
  }

  std::ofstream md(fs::path(out) / "table.md", std::ios::trunc);
  std::ofstream csv(fs::path(out) / "table.csv", std::ios::trunc);
  DETEXT_CHECK_IO(md.good() && csv.good(), "cannot write ablation tables in " + out);
  md << "| variant | psnr_raw | ssim_raw | age_raw | psnr_pasted | ssim_pasted | age_pasted |\n";
  md << "|---|---|---|---|---|---|---|\n";
  csv << "variant,psnr_raw,ssim_raw,age_raw,psnr_pasted,ssim_pasted,age_pasted,status\n";
  for (const auto& r : rows) {
    if (r.ok) {
      md << "| " << r.variant << " | " << r.raw.mean_psnr << " | " << r.raw.mean_ssim << " | "
         << r.raw.mean_age << " | " << r.pasted.mean_psnr << " | " << r.pasted.mean_ssim << " | "
         << r.pasted.mean_age << " |\n";
      csv << r.variant << "," << r.raw.mean_psnr << "," << r.raw.mean_ssim << ","
          << r.raw.mean_age << "," << r.pasted.mean_psnr << "," << r.pasted.mean_ssim << ","
          << r.pasted.mean_age << ",ok\n";
    } else {
      md << "| " << r.variant << " | failed | failed | failed | failed | failed | failed |\n";
      csv << r.variant << ",,,,,,,failed\n";
    }
  }
  std::cout << "ablation table written to " << (fs::path(out) / "table.md").string() << "\n";
  for (const auto& r : rows)
    if (!r.ok) return 4;  // at least one variant did not finish
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scene text removal toolkit"};
  app.require_subcommand(1);

  // make-data
  auto* mk = app.add_subcommand("make-data", "synthesize a training set");
  std::string mk_out;
  int mk_n = 8, mk_size = 64;
  uint64_t mk_seed = 1;
  detext::SynthConfig synth_cfg;
  mk->add_option("--out", mk_out, "output dataset root")->required();
  mk->add_option("--n", mk_n, "number of samples");
  mk->add_option("--seed", mk_seed, "RNG seed");
  mk->add_option("--size", mk_size, "square image size (multiple of 32)");
  mk->add_option("--min-boxes", synth_cfg.min_boxes, "minimum boxes per image");
  mk->add_option("--max-boxes", synth_cfg.max_boxes, "maximum boxes per image");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_config;
  detext::TrainConfig tcfg;
  bool tr_paper = false;
  tr->add_option("--data", tr_data, "dataset root")->required();
  tr->add_option("--config", tr_config, "JSON config file (flags override)");
  auto* tr_out = tr->add_option("--out", tcfg.out_dir, "run output directory");
  auto* tr_abl = tr->add_option("--ablation", tcfg.ablation, "model/loss wiring");
  auto* tr_seed = tr->add_option("--seed", tcfg.seed, "RNG seed");
  auto* tr_steps = tr->add_option("--steps", tcfg.steps, "step budget (overrides epochs)");
  auto* tr_epochs = tr->add_option("--epochs", tcfg.epochs, "epoch count");
  auto* tr_batch = tr->add_option("--batch", tcfg.batch_size, "batch size");
  auto* tr_base = tr->add_option("--base-channels", tcfg.base_channels, "generator width");
  tr->add_flag("--paper-scale", tr_paper, "use full-scale hyperparameters");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_variant = "both", ev_out = "report", ev_attn, ev_dets;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset root")->required();
  ev->add_option("--variant", ev_variant, "raw, pasted or both")
      ->check(CLI::IsMember({"raw", "pasted", "both"}));
  ev->add_option("--out", ev_out, "report path prefix");
  ev->add_option("--dump-attention", ev_attn, "directory for attention heatmaps");
  ev->add_option("--detections", ev_dets, "directory of detector outputs to score");

  // infer
  auto* in = app.add_subcommand("infer", "erase text in selected boxes");
  std::string in_ckpt, in_image, in_boxes, in_out;
  bool in_raw = false;
  in->add_option("--checkpoint", in_ckpt, "model checkpoint")->required();
  in->add_option("--image", in_image, "input image (PNG)")->required();
  in->add_option("--boxes", in_boxes, "boxes file, one x1,y1,...,x4,y4 line per box")->required();
  in->add_option("--out", in_out, "output image path")->required();
  in->add_flag("--raw", in_raw, "write the raw generator output instead of paste-back");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and compare ablation variants");
  std::string ab_data, ab_out = "ablation";
  std::vector<std::string> ab_variants;
  detext::TrainConfig ab_cfg;
  ab_cfg.steps = 200;
  ab->add_option("--data", ab_data, "dataset root")->required();
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--variants", ab_variants, "subset of variants (default: all)");
  ab->add_option("--seed", ab_cfg.seed, "shared RNG seed");
  ab->add_option("--steps", ab_cfg.steps, "training steps per variant");
  ab->add_option("--batch", ab_cfg.batch_size, "batch size");
  ab->add_option("--base-channels", ab_cfg.base_channels, "generator width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 3;
  }

  try {
    if (mk->parsed()) {
      DETEXT_CHECK(mk_size >= 64 && mk_size % 32 == 0, "--size must be a multiple of 32, >= 64");
      return cmd_make_data(mk_out, mk_n, mk_seed, mk_size, synth_cfg);
    }
    if (tr->parsed()) {
      if (!tr_config.empty()) {
        std::ifstream f(tr_config);
        DETEXT_CHECK_IO(f.good(), "cannot open config " + tr_config);
        json j = json::parse(f, nullptr, false);
        DETEXT_CHECK(!j.is_discarded(), "config is not valid JSON: " + tr_config);
        detext::TrainConfig from_file = detext::train_config_from_json(j);
        // command-line flags take precedence over the file
        if (*tr_out) from_file.out_dir = tcfg.out_dir;
        if (*tr_abl) from_file.ablation = tcfg.ablation;
        if (*tr_seed) from_file.seed = tcfg.seed;
        if (*tr_steps) from_file.steps = tcfg.steps;
        if (*tr_epochs) from_file.epochs = tcfg.epochs;
        if (*tr_batch) from_file.batch_size = tcfg.batch_size;
        if (*tr_base) from_file.base_channels = tcfg.base_channels;
        tcfg = from_file;
      }
      if (tr_paper) detext::apply_paper_scale(tcfg);
      return cmd_train(tcfg, tr_data);
    }
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_variant, ev_out, ev_attn, ev_dets);
    if (in->parsed()) return cmd_infer(in_ckpt, in_image, in_boxes, in_out, in_raw);
    if (ab->parsed()) return cmd_ablate(ab_data, ab_out, ab_variants, ab_cfg);
  } catch (const detext::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const detext::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const detext::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
