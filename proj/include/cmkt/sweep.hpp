#pragma once

// Noise-sweep experiment driver: retrains each method at every corruption
// level of one modality (the other kept clean) and tabulates test accuracy.

#include "cmkt/common.hpp"
#include "cmkt/data.hpp"
#include "cmkt/eval.hpp"
#include "cmkt/training.hpp"

#include <json.hpp>

#include <sstream>
#include <string>
#include <vector>

namespace cmkt::eval {

using json = nlohmann::json;

// Everything needed to train one method with its fixed configuration.
struct MethodSetup {
  training::Method method = training::Method::visual_only;
  training::Direction direction = training::Direction::v2a;
  training::TrainConfig cfg;       // single-config pipelines
  training::PhasedConfig phased;   // mapping pipelines
  training::PipelineSpecs specs;
};

inline training::TrainResult train_method(const MethodSetup& setup,
                                          const training::SplitTensors& split) {
  using training::Method;
  switch (setup.method) {
    case Method::visual_only:
      return training::train_single_modal(split, nn::Modality::visual, setup.cfg, setup.specs);
    case Method::audio_only:
      return training::train_single_modal(split, nn::Modality::audio, setup.cfg, setup.specs);
    case Method::semantic_alignment: {
      auto r = training::train_semantic_alignment(split, setup.cfg, setup.specs);
      r.pipeline.direction = setup.direction;
      return r;
    }
    case Method::fsl_mapping:
      return training::train_fully_supervised_mapping(split, setup.direction, setup.phased,
                                                      setup.specs);
    case Method::ssl_mapping:
      return training::train_semi_supervised_mapping(split, setup.direction, setup.phased,
                                                     setup.specs);
    case Method::fusion_data:
    case Method::fusion_feature:
    case Method::fusion_decision:
      return training::train_fusion(split, setup.method, setup.cfg, setup.specs);
  }
  throw Error("train_method: unreachable");
}

struct NoiseSweepCell {
  std::string axis;  // "visual" or "audio"
  double level = 0.0;
  std::string method;
  double test_accuracy = 0.0;
};

struct NoiseSweepTable {
  std::vector<NoiseSweepCell> cells;

  json to_json() const {
    json rows = json::array();
    for (const auto& c : cells) {
      rows.push_back({{"axis", c.axis},
                      {"level", c.level},
                      {"method", c.method},
                      {"test_accuracy", c.test_accuracy}});
    }
    return rows;
  }

  // Delimited text for plotting: axis, level, method, accuracy.
  std::string to_csv() const {
    std::ostringstream os;
    os << "axis,level,method,test_accuracy\n";
    for (const auto& c : cells) {
      os << c.axis << "," << c.level << "," << c.method << "," << c.test_accuracy << "\n";
    }
    return os.str();
  }
};

// Corrupt train, validation, and test at the same level; each axis sweeps
// independently while the other modality stays clean. The zero/infinite
// levels are identity corruptions, so that column reproduces the baselines.
inline NoiseSweepTable noise_sweep(const data::DatasetSplit& split,
                                   const std::vector<MethodSetup>& methods,
                                   const std::vector<double>& visual_sigmas,
                                   const std::vector<double>& audio_snrs_db,
                                   std::uint64_t seed) {
  if (methods.empty()) throw Error("noise_sweep: no method configurations given");
  NoiseSweepTable table;

  const auto run_axis = [&](const std::string& axis, const std::vector<double>& levels) {
    for (std::size_t li = 0; li < levels.size(); ++li) {
      const double level = levels[li];
      data::DatasetSplit corrupted;
      const std::uint64_t level_seed = derive_seed(seed, 0x5eed + li);
      if (axis == "visual") {
        corrupted.train = data::corrupt_visual(split.train, level, level_seed);
        corrupted.validation = data::corrupt_visual(split.validation, level, level_seed + 1);
        corrupted.test = data::corrupt_visual(split.test, level, level_seed + 2);
      } else {
        corrupted.train = data::corrupt_audio(split.train, level, level_seed);
        corrupted.validation = data::corrupt_audio(split.validation, level, level_seed + 1);
        corrupted.test = data::corrupt_audio(split.test, level, level_seed + 2);
      }
      const auto tensors = training::SplitTensors::from(corrupted);
      for (const auto& setup : methods) {
        auto result = train_method(setup, tensors);
        const Vec scores = result.pipeline.predict(tensors.test.visual, tensors.test.audio);
        const double acc = accuracy(confusion(scores, tensors.test.labels));
        table.cells.push_back({axis, level, training::to_string(setup.method), acc});
      }
    }
  };

  run_axis("visual", visual_sigmas);
  run_axis("audio", audio_snrs_db);
  return table;
}

}  // namespace cmkt::eval
