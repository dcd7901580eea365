#pragma once

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "detext/discriminator.hpp"
#include "detext/generator.hpp"

namespace detext {

// Single-file binary archive: magic, config JSON, then named float64 tensors.
// Parameters are always stored at 64-bit so checkpoints round-trip between
// float and double builds of the model.
struct Checkpoint {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor<double>>> tensors;

  const Tensor<double>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

constexpr char kCkptMagic[8] = {'D', 'T', 'X', 'C', 'K', 'P', 'T', '1'};

template <class V>
void write_pod(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::ifstream& f) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const nn::NamedParams<T>& params) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    DETEXT_CHECK_IO(f.good(), "cannot open " + tmp + " for writing");
    f.write(detail::kCkptMagic, 8);
    const std::string cfg = config.dump();
    detail::write_pod(f, static_cast<uint32_t>(cfg.size()));
    f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    detail::write_pod(f, static_cast<uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
      detail::write_pod(f, static_cast<uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_pod(f, static_cast<uint32_t>(p->value.ndim()));
      for (int d = 0; d < p->value.ndim(); ++d)
        detail::write_pod(f, static_cast<int32_t>(p->value.dim(d)));
      for (int64_t i = 0; i < p->value.numel(); ++i)
        detail::write_pod(f, static_cast<double>(p->value[i]));
    }
    DETEXT_CHECK_IO(f.good(), "short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  DETEXT_CHECK_IO(!ec, "cannot move checkpoint into place: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  DETEXT_CHECK_IO(f.good(), "cannot open checkpoint " + path);
  char magic[8];
  f.read(magic, 8);
  DETEXT_CHECK_IO(f.good() && std::memcmp(magic, detail::kCkptMagic, 8) == 0,
                  "not a checkpoint file: " + path);
  Checkpoint ck;
  const auto cfg_len = detail::read_pod<uint32_t>(f);
  std::string cfg(cfg_len, '\0');
  f.read(cfg.data(), cfg_len);
  DETEXT_CHECK_IO(f.good(), "truncated checkpoint: " + path);
  ck.config = nlohmann::json::parse(cfg, nullptr, false);
  DETEXT_CHECK_IO(!ck.config.is_discarded(), "corrupt config JSON in " + path);
  const auto n = detail::read_pod<uint32_t>(f);
  for (uint32_t i = 0; i < n; ++i) {
    const auto name_len = detail::read_pod<uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto ndim = detail::read_pod<uint32_t>(f);
    DETEXT_CHECK_IO(ndim <= 8, "corrupt tensor rank in " + path);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = detail::read_pod<int32_t>(f);
    Tensor<double> t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    DETEXT_CHECK_IO(f.good(), "truncated checkpoint: " + path);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

template <class T>
void assign_params(const nn::NamedParams<T>& params, const Checkpoint& ck) {
  for (const auto& [name, p] : params) {
    const Tensor<double>* t = ck.find(name);
    DETEXT_CHECK(t != nullptr, "checkpoint missing parameter " + name);
    DETEXT_CHECK(t->numel() == p->value.numel(), "checkpoint shape mismatch for " + name);
    for (int64_t i = 0; i < t->numel(); ++i) p->value[i] = static_cast<T>((*t)[i]);
  }
}

inline nlohmann::json generator_config_json(const GeneratorConfig& cfg) {
  return {{"base_channels", cfg.base_channels}, {"input_size", cfg.input_size},
          {"levels", cfg.levels},               {"attention", to_string(cfg.attention)},
          {"roig", cfg.roig},                   {"version", 1}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig cfg;
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.input_size = j.value("input_size", 64);
  cfg.levels = j.value("levels", 5);
  cfg.attention = attention_kind_from_string(j.at("attention").get<std::string>());
  cfg.roig = j.value("roig", true);
  return cfg;
}

template <class T>
void save_generator(const std::string& path, const Generator<T>& gen) {
  save_checkpoint(path, generator_config_json(gen.cfg), gen.named_params());
}

template <class T>
Generator<T> generator_from_checkpoint(const Checkpoint& ck) {
  const GeneratorConfig cfg = generator_config_from_json(ck.config);
  Rng rng(0);  // weights are immediately overwritten
  Generator<T> gen(rng, cfg);
  assign_params(gen.named_params(), ck);
  return gen;
}

template <class T>
Generator<T> load_generator(const std::string& path) {
  return generator_from_checkpoint<T>(load_checkpoint(path));
}

}  // namespace detext
