#pragma once

// Architecture presets: loading the shipped .cfg files and building the
// compact configurations used for synthetic-data runs.

#include "cmkt/common.hpp"
#include "cmkt/nn.hpp"
#include "cmkt/training.hpp"

#include <json.hpp>

#include <fstream>
#include <string>

namespace cmkt::presets {

using json = nlohmann::json;

inline training::PipelineSpecs load_pipeline_specs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open preset file: " + path);
  return training::PipelineSpecs::from_json(json::parse(is));
}

namespace detail {

// Shared convolutional trunk for the compact synthetic-scale networks:
// 80x80 -> 40x40 (stride-2 conv) -> 20x20 (pool) -> 10x10 (stride-2 conv).
inline nn::ArchitectureSpec small_encoder(std::size_t in_channels) {
  nn::ArchitectureSpec e;
  e.input_shape = {in_channels, 80, 80};
  e.layers.push_back({nn::ConvSpec{4, 3, 2, 1, false}, ""});
  e.layers.push_back({nn::ActSpec{"relu"}, ""});
  e.layers.push_back({nn::PoolSpec{2, 2}, ""});
  e.layers.push_back({nn::ConvSpec{8, 3, 2, 1, false}, ""});
  e.layers.push_back({nn::ActSpec{"relu"}, ""});
  e.layers.push_back({nn::FlattenSpec{}, "flatten"});  // 8 x 10 x 10 = 800
  return e;
}

inline nn::ArchitectureSpec small_classifier(std::size_t in_dim) {
  nn::ArchitectureSpec c;
  c.input_shape = {1, 1, in_dim};
  c.layers.push_back({nn::FlattenSpec{}, ""});
  c.layers.push_back({nn::DenseSpec{32}, ""});
  c.layers.push_back({nn::ActSpec{"relu"}, ""});
  c.layers.push_back({nn::DropoutSpec{0.02}, ""});
  c.layers.push_back({nn::DenseSpec{1}, ""});
  c.layers.push_back({nn::ActSpec{"sigmoid"}, ""});
  return c;
}

inline nn::ArchitectureSpec small_autoencoder(std::size_t bottleneck) {
  nn::ArchitectureSpec a;
  a.input_shape = {1, 80, 80};
  a.layers.push_back({nn::ConvSpec{6, 3, 2, 1, false}, ""});
  a.layers.push_back({nn::ActSpec{"relu"}, ""});
  a.layers.push_back({nn::ConvSpec{12, 3, 2, 1, false}, ""});
  a.layers.push_back({nn::ActSpec{"relu"}, ""});
  a.layers.push_back({nn::FlattenSpec{}, ""});  // 12 x 20 x 20 = 4800
  a.layers.push_back({nn::DenseSpec{bottleneck}, ""});
  a.layers.push_back({nn::ActSpec{"relu"}, "bottleneck"});
  a.layers.push_back({nn::DenseSpec{4800}, ""});
  a.layers.push_back({nn::ActSpec{"relu"}, ""});
  a.layers.push_back({nn::UnflattenSpec{{12, 20, 20}}, ""});
  a.layers.push_back({nn::DeconvSpec{6, 3, 2, 1, 1}, ""});
  a.layers.push_back({nn::ActSpec{"relu"}, ""});
  a.layers.push_back({nn::DeconvSpec{1, 3, 2, 1, 1}, ""});
  a.layers.push_back({nn::ActSpec{"sigmoid"}, ""});
  return a;
}

inline nn::ArchitectureSpec mlp(std::size_t in_dim, std::vector<std::size_t> hidden,
                                std::size_t out_dim, bool sigmoid_out) {
  nn::ArchitectureSpec m;
  m.input_shape = {1, 1, in_dim};
  m.layers.push_back({nn::FlattenSpec{}, ""});
  for (std::size_t h : hidden) {
    m.layers.push_back({nn::DenseSpec{h}, ""});
    m.layers.push_back({nn::ActSpec{"relu"}, ""});
  }
  m.layers.push_back({nn::DenseSpec{out_dim}, ""});
  if (sigmoid_out) m.layers.push_back({nn::ActSpec{"sigmoid"}, ""});
  return m;
}

}  // namespace detail

// Compact specs for desk-scale synthetic runs of every method.
inline training::PipelineSpecs desk_specs(training::Method method) {
  using training::Method;
  training::PipelineSpecs s;
  switch (method) {
    case Method::visual_only:
    case Method::audio_only:
    case Method::semantic_alignment: {
      s.parts.emplace("encoder", detail::small_encoder(1));
      s.parts.emplace("classifier", detail::small_classifier(800));
      break;
    }
    case Method::fusion_data: {
      s.parts.emplace("encoder", detail::small_encoder(2));
      s.parts.emplace("classifier", detail::small_classifier(800));
      break;
    }
    case Method::fusion_feature: {
      s.parts.emplace("visual_encoder", detail::small_encoder(1));
      s.parts.emplace("audio_encoder", detail::small_encoder(1));
      s.parts.emplace("classifier", detail::small_classifier(1600));
      break;
    }
    case Method::fusion_decision: {
      s.parts.emplace("visual_encoder", detail::small_encoder(1));
      s.parts.emplace("audio_encoder", detail::small_encoder(1));
      s.parts.emplace("classifier", detail::mlp(1600, {}, 1, true));
      break;
    }
    case Method::fsl_mapping: {
      // source classifier with a 15-wide tagged hidden boundary
      nn::ArchitectureSpec source = detail::small_encoder(1);
      source.layers.push_back({nn::DenseSpec{32}, ""});
      source.layers.push_back({nn::ActSpec{"relu"}, ""});
      source.layers.push_back({nn::DenseSpec{15}, ""});
      source.layers.push_back({nn::ActSpec{"relu"}, "hidden"});
      source.layers.push_back({nn::DenseSpec{1}, ""});
      source.layers.push_back({nn::ActSpec{"sigmoid"}, ""});
      nn::ArchitectureSpec mapping = detail::small_encoder(1);
      mapping.layers.push_back({nn::DenseSpec{64}, ""});
      mapping.layers.push_back({nn::ActSpec{"relu"}, ""});
      mapping.layers.push_back({nn::DenseSpec{15}, ""});
      s.parts.emplace("source", std::move(source));
      s.parts.emplace("mapping", std::move(mapping));
      s.parts.emplace("head", detail::mlp(15, {16}, 1, true));
      break;
    }
    case Method::ssl_mapping: {
      s.parts.emplace("visual_autoencoder", detail::small_autoencoder(16));
      s.parts.emplace("audio_autoencoder", detail::small_autoencoder(24));
      // defaults are wired for the v2a direction (audio -> visual features)
      s.parts.emplace("mapping", detail::mlp(24, {32}, 16, false));
      s.parts.emplace("head", detail::mlp(16, {}, 1, true));
      break;
    }
  }
  return s;
}

// Mapping specs for the opposite direction (visual -> audio features).
inline training::PipelineSpecs desk_specs_ssl_a2v() {
  training::PipelineSpecs s = desk_specs(training::Method::ssl_mapping);
  s.parts.erase("mapping");
  s.parts.erase("head");
  s.parts.emplace("mapping", detail::mlp(16, {32}, 24, false));
  s.parts.emplace("head", detail::mlp(24, {}, 1, true));
  return s;
}

inline training::TrainConfig desk_train_config(training::Method method, std::uint64_t seed) {
  training::TrainConfig cfg;
  cfg.seed = seed;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 1e-5;
  switch (method) {
    case training::Method::semantic_alignment:
      cfg.epochs = 30;
      cfg.learning_rate = 7e-4;
      break;
    default:
      cfg.epochs = 30;
      break;
  }
  return cfg;
}

inline training::PhasedConfig desk_phased_config(training::Method method, std::uint64_t seed) {
  training::PhasedConfig cfg;
  cfg.phase1 = desk_train_config(method, seed);
  cfg.phase2 = desk_train_config(method, derive_seed(seed, 2));
  cfg.phase3 = desk_train_config(method, derive_seed(seed, 3));
  cfg.phase1.epochs = method == training::Method::ssl_mapping ? 25 : 30;
  cfg.phase2.epochs = 30;
  cfg.phase3.epochs = 40;
  return cfg;
}

}  // namespace cmkt::presets
