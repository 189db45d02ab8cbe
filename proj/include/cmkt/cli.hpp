#pragma once

// Command implementations behind the command-line tool: dataset ingestion,
// preprocessing, synthetic generation, training, search, evaluation,
// explanation, noise sweeps, and report aggregation. Every command writes a
// run manifest tying its outputs to the configuration and data that produced
// them.

#include "cmkt/common.hpp"
#include "cmkt/data.hpp"
#include "cmkt/diag.hpp"
#include "cmkt/eval.hpp"
#include "cmkt/io.hpp"
#include "cmkt/presets.hpp"
#include "cmkt/sweep.hpp"
#include "cmkt/training.hpp"
#include "cmkt/xai.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace cmkt::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::string iso_now() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string data_manifest_hash;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> outputs;

  json to_json() const {
    return json{{"command", command},
                {"config_hash", config_hash},
                {"data_manifest_hash", data_manifest_hash},
                {"seed", seed},
                {"started_at", started_at},
                {"finished_at", finished_at},
                {"outputs", outputs}};
  }

  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream os(dir / "run_manifest.json");
    os << to_json().dump(2) << "\n";
    if (!os) throw Error("cannot write run manifest in " + dir.string());
  }
};

namespace detail {

inline std::string data_manifest_hash(const std::string& cache_dir) {
  const fs::path m = fs::path(cache_dir) / "manifest.json";
  if (!fs::exists(m)) return "";
  std::ifstream is(m, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return io::sha256_hex(content);
}

inline std::string resolve_data_dir(const std::string& path) {
  if (!path.empty() && path.front() != '/') {
    if (const char* root = std::getenv("CMKT_CACHE_ROOT")) {
      return (fs::path(root) / path).string();
    }
  }
  return path;
}

inline RunManifest begin_manifest(const std::string& command, const json& config) {
  RunManifest m;
  m.command = command;
  m.config_hash = io::sha256_hex(config.dump());
  m.seed = config.value("seed", std::uint64_t{0});
  m.started_at = iso_now();
  if (config.contains("data")) {
    m.data_manifest_hash = data_manifest_hash(resolve_data_dir(config["data"].get<std::string>()));
  }
  return m;
}

inline training::PipelineSpecs specs_from_config(const json& config, training::Method method) {
  if (config.contains("specs")) {
    const json& s = config["specs"];
    if (s.contains("preset")) return presets::load_pipeline_specs(s["preset"].get<std::string>());
    return training::PipelineSpecs::from_json(s);
  }
  if (method == training::Method::ssl_mapping &&
      config.value("direction", "v2a") == std::string("a2v")) {
    return presets::desk_specs_ssl_a2v();
  }
  return presets::desk_specs(method);
}

inline eval::MethodSetup setup_from_config(const json& config) {
  eval::MethodSetup setup;
  setup.method = training::method_from_string(config.value("method", "visual-only"));
  setup.direction = training::direction_from_string(config.value("direction", "v2a"));
  const auto seed = config.value("seed", std::uint64_t{0});
  if (config.contains("train")) {
    setup.cfg = training::TrainConfig::from_json(config["train"]);
  } else {
    setup.cfg = presets::desk_train_config(setup.method, seed);
  }
  if (config.contains("phased")) {
    setup.phased.phase1 = training::TrainConfig::from_json(config["phased"]["phase1"]);
    setup.phased.phase2 = training::TrainConfig::from_json(config["phased"]["phase2"]);
    setup.phased.phase3 = training::TrainConfig::from_json(config["phased"]["phase3"]);
    setup.phased.feature_tag = config["phased"].value("feature_tag", "hidden");
  } else {
    setup.phased = presets::desk_phased_config(setup.method, seed);
  }
  setup.specs = specs_from_config(config, setup.method);
  return setup;
}

inline void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << content;
  if (!os) throw Error("cannot write " + path.string());
}

struct UrlParts {
  bool https = false;
  std::string host;
  int port = 0;
  std::string path;
};

inline UrlParts parse_url(const std::string& url) {
  UrlParts u;
  std::string rest;
  if (url.rfind("https://", 0) == 0) {
    u.https = true;
    rest = url.substr(8);
  } else if (url.rfind("http://", 0) == 0) {
    rest = url.substr(7);
  } else {
    throw Error("unsupported URL scheme: " + url);
  }
  const auto slash = rest.find('/');
  std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  u.path = slash == std::string::npos ? "/" : rest.substr(slash);
  const auto colon = hostport.find(':');
  if (colon != std::string::npos) {
    u.host = hostport.substr(0, colon);
    u.port = std::stoi(hostport.substr(colon + 1));
  } else {
    u.host = hostport;
    u.port = u.https ? 443 : 80;
  }
  return u;
}

inline std::string http_get(const UrlParts& u) {
  std::string body;
  auto handle = [&](auto& client) {
    client.set_follow_location(true);
    client.set_read_timeout(120, 0);
    auto res = client.Get(u.path);
    if (!res || res->status != 200) {
      throw Error("GET " + u.path + " failed" +
                  (res ? " with status " + std::to_string(res->status) : ""));
    }
    body = res->body;
  };
  if (u.https) {
    httplib::SSLClient client(u.host, u.port);
    client.enable_server_certificate_verification(false);
    handle(client);
  } else {
    httplib::Client client(u.host, u.port);
    handle(client);
  }
  return body;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fetch: download a published record (or a direct archive URL), verify
// checksums, and unpack into the dataset layout. Re-running over a complete
// download is a no-op; a checksum mismatch aborts and removes partial files.

inline int cmd_fetch(const std::string& url, const std::string& dest,
                     const std::string& expected_md5 = "") {
  const fs::path root(dest);
  const fs::path marker = root / ".fetch_complete.json";
  if (fs::exists(marker)) {
    std::fprintf(stderr, "fetch: %s already complete, nothing to do\n", dest.c_str());
    return 0;
  }
  fs::create_directories(root);
  const fs::path staging = root / ".download";
  fs::create_directories(staging);

  struct FileRef {
    std::string name, url, md5;
  };
  std::vector<FileRef> files;

  const auto u = detail::parse_url(url);
  const auto records_pos = u.path.find("/records/");
  if (records_pos != std::string::npos && u.path.find("/api/") == std::string::npos) {
    // resolve the record id through the JSON API to enumerate files
    const std::string record_id = u.path.substr(records_pos + 9);
    detail::UrlParts api = u;
    api.path = "/api/records/" + record_id;
    const json record = json::parse(detail::http_get(api));
    for (const auto& f : record.at("files")) {
      FileRef ref;
      ref.name = f.at("key").get<std::string>();
      ref.url = f.at("links").at("self").get<std::string>();
      std::string checksum = f.value("checksum", "");
      if (checksum.rfind("md5:", 0) == 0) checksum = checksum.substr(4);
      ref.md5 = checksum;
      files.push_back(ref);
    }
  } else {
    FileRef ref;
    ref.name = fs::path(u.path).filename().string();
    if (ref.name.empty()) ref.name = "download.bin";
    ref.url = url;
    ref.md5 = expected_md5;
    files.push_back(ref);
  }

  json marker_json;
  try {
    for (const auto& f : files) {
      std::fprintf(stderr, "fetch: downloading %s\n", f.name.c_str());
      const std::string body = detail::http_get(detail::parse_url(f.url));
      if (!f.md5.empty()) {
        const std::string actual = io::md5_hex(body);
        if (actual != f.md5) {
          throw Error("checksum mismatch for " + f.name + ": expected " + f.md5 + ", got " +
                      actual);
        }
      }
      const fs::path staged = staging / f.name;
      std::ofstream os(staged, std::ios::binary);
      os.write(body.data(), static_cast<std::streamsize>(body.size()));
      os.close();
      if (staged.extension() == ".zip") {
        io::extract_zip(staged.string(), dest);
      } else {
        fs::copy_file(staged, root / f.name, fs::copy_options::overwrite_existing);
      }
      marker_json["files"][f.name] = f.md5.empty() ? io::md5_hex(body) : f.md5;
    }
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }
  fs::remove_all(staging);
  marker_json["url"] = url;
  marker_json["fetched_at"] = iso_now();
  detail::write_text(marker, marker_json.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------

inline int cmd_preprocess(const json& config) {
  RunManifest manifest = detail::begin_manifest("preprocess", config);
  const std::string raw = config.at("raw").get<std::string>();
  const std::string out = config.at("out").get<std::string>();
  const auto seed = config.value("seed", std::uint64_t{0});
  std::array<int, 3> ratio{8, 1, 1};
  if (config.contains("ratio")) {
    for (int i = 0; i < 3; ++i) ratio[static_cast<std::size_t>(i)] = config["ratio"][i].get<int>();
  }

  // every frame on disk must carry a label
  const auto labels = io::read_labels_csv((fs::path(raw) / "labels.csv").string());
  if (fs::exists(fs::path(raw) / "frames")) {
    for (const auto& entry : fs::directory_iterator(fs::path(raw) / "frames")) {
      if (entry.path().extension() != ".png") continue;
      const std::string stem = entry.path().stem().string();
      if (stem.find_first_not_of("0123456789") != std::string::npos) continue;
      const std::size_t index = std::stoul(stem);
      if (!labels.count(index)) {
        throw Error("preprocess: no label row for index " + std::to_string(index));
      }
    }
  }

  auto samples = io::read_raw_dataset(raw);
  auto split = data::split_dataset(samples, ratio, seed);
  json params{{"seed", seed},
              {"ratio", {ratio[0], ratio[1], ratio[2]}},
              {"stft", {{"fft", data::kFftSize}, {"hop", data::kHop}, {"window", "hann"}}},
              {"grayscale", {0.299, 0.587, 0.114}},
              {"resize", "6x6 block mean"}};
  io::write_cache(out, split, params);

  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/manifest.json"};
  manifest.write(out);
  std::fprintf(stderr, "preprocess: %zu pairs -> %zu/%zu/%zu\n", samples.size(),
               split.train.size(), split.validation.size(), split.test.size());
  return 0;
}

inline int cmd_synth(const json& config) {
  RunManifest manifest = detail::begin_manifest("synth", config);
  const std::string out = config.at("out").get<std::string>();
  data::SyntheticConfig cfg;
  const json& s = config.value("synthetic", json::object());
  cfg.n_samples = s.value("n_samples", cfg.n_samples);
  cfg.seed = s.value("seed", config.value("seed", std::uint64_t{0}));
  cfg.shared_signal_strength = s.value("shared_signal_strength", cfg.shared_signal_strength);
  cfg.visual_nuisance_strength = s.value("visual_nuisance_strength", cfg.visual_nuisance_strength);
  cfg.visual_noise_std = s.value("visual_noise_std", cfg.visual_noise_std);
  cfg.audio_noise_std = s.value("audio_noise_std", cfg.audio_noise_std);
  cfg.class_ratio = s.value("class_ratio", cfg.class_ratio);

  auto samples = data::generate_synthetic(cfg);
  auto split = data::split_dataset(samples, {8, 1, 1},
                                   config.value("split_seed", derive_seed(cfg.seed, 0x5917)));
  json params{{"synthetic", s}, {"split_seed", config.value("split_seed", std::uint64_t{0})}};
  io::write_cache(out, split, params);
  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/manifest.json"};
  manifest.write(out);
  return 0;
}

namespace detail {

inline std::string history_csv(const training::TrainLog& log) {
  std::ostringstream os;
  const bool ccsa = !log.loss_ccsa.empty();
  os << (ccsa ? "epoch,loss,loss_csa,loss_c,loss_ccsa,train_accuracy\n" : "epoch,loss\n");
  for (std::size_t e = 0; e < log.loss.size(); ++e) {
    os << (e + 1) << "," << log.loss[e];
    if (ccsa && e < log.loss_ccsa.size()) {
      os << "," << log.loss_csa[e] << "," << log.loss_c[e] << "," << log.loss_ccsa[e] << ","
         << log.train_accuracy[e];
    }
    os << "\n";
  }
  return os.str();
}

inline std::string snapshots_csv(const training::TrainLog& log) {
  std::ostringstream os;
  os << "epoch,d_audio,d_visual,d_cross_defect_free,d_cross_defective\n";
  for (const auto& s : log.snapshots) {
    os << s.epoch << "," << s.mmds.audio_between_classes << "," << s.mmds.visual_between_classes
       << "," << s.mmds.cross_modal_defect_free << "," << s.mmds.cross_modal_defective << "\n";
  }
  return os.str();
}

}  // namespace detail

inline int cmd_train(const json& config) {
  RunManifest manifest = detail::begin_manifest("train", config);
  const std::string data_dir = detail::resolve_data_dir(config.at("data").get<std::string>());
  const std::string out = config.at("out").get<std::string>();
  auto setup = detail::setup_from_config(config);

  auto split = io::read_cache(data_dir);
  auto tensors = training::SplitTensors::from(split);
  auto result = eval::train_method(setup, tensors);

  fs::create_directories(out);
  const std::string ckpt = (fs::path(out) / "checkpoint.cmkt").string();
  training::save_pipeline(ckpt, result.pipeline);
  auto report = training::evaluate_pipeline(result.pipeline, tensors.test, tensors.validation,
                                            result.record.training_seconds);
  detail::write_text(fs::path(out) / "metrics.json", report.to_json().dump(2) + "\n");
  detail::write_text(fs::path(out) / "history.csv", detail::history_csv(result.log));
  if (!result.log.snapshots.empty()) {
    detail::write_text(fs::path(out) / "mmd_snapshots.csv", detail::snapshots_csv(result.log));
  }

  if (const auto every = config.value("export_encodings_every", std::size_t{0}); every > 0) {
    // re-export from the final encoder only; mid-training export is wired
    // through TrainConfig::snapshot_every
    nn::Model& encoder = result.pipeline.part("encoder");
    auto ev = nn::encode(encoder, tensors.test.visual, tensors.test.labels, nn::Modality::visual);
    auto ea = nn::encode(encoder, tensors.test.audio, tensors.test.labels, nn::Modality::audio);
    diag::export_encodings((fs::path(out) / "encodings_visual.tsv").string(), setup.cfg.epochs, ev);
    diag::export_encodings((fs::path(out) / "encodings_audio.tsv").string(), setup.cfg.epochs, ea);
  }

  manifest.finished_at = iso_now();
  manifest.outputs = {ckpt, out + "/metrics.json", out + "/history.csv"};
  manifest.write(out);
  std::fprintf(stderr, "train: %s val_acc=%.4f test_acc=%.4f\n",
               training::to_string(setup.method).c_str(), result.record.validation_accuracy,
               report.accuracy);
  return 0;
}

inline int cmd_search(const json& config) {
  RunManifest manifest = detail::begin_manifest("search", config);
  const std::string data_dir = detail::resolve_data_dir(config.at("data").get<std::string>());
  const std::string out = config.at("out").get<std::string>();
  const auto method = training::method_from_string(config.value("method", "semantic-alignment"));
  if (method == training::Method::fsl_mapping || method == training::Method::ssl_mapping) {
    throw Error("search: the sampled architecture template covers the encoder/classifier "
                "pipelines; mapping pipelines take explicit specs");
  }
  const auto trials = config.value("trials", std::size_t{300});
  const auto seed = config.value("seed", std::uint64_t{0});
  const auto space = config.contains("space")
                         ? training::SearchSpace::from_json(config["space"])
                         : training::SearchSpace{};
  training::TrainConfig base = config.contains("train")
                                   ? training::TrainConfig::from_json(config["train"])
                                   : presets::desk_train_config(method, seed);

  auto split = io::read_cache(data_dir);
  auto tensors = training::SplitTensors::from(split);
  const auto dims = training::search_dims(space);

  fs::create_directories(out);
  std::ofstream ledger(fs::path(out) / "ledger.jsonl", std::ios::app);

  const nn::Shape3 input{method == training::Method::fusion_data ? std::size_t{2} : std::size_t{1},
                         80, 80};
  const auto objective = [&](const std::vector<double>& values,
                             std::size_t trial) -> training::TrialOutcome {
    training::PipelineSpecs sampled = training::specs_from_search_point(dims, values, input);
    eval::MethodSetup setup;
    setup.method = method;
    setup.cfg = base;
    setup.cfg.seed = derive_seed(seed, 1000 + trial);
    const auto lr_it = std::find_if(dims.begin(), dims.end(),
                                    [](const auto& d) { return d.name == "learning_rate"; });
    setup.cfg.learning_rate = values[static_cast<std::size_t>(lr_it - dims.begin())];
    const auto wd_it = std::find_if(dims.begin(), dims.end(),
                                    [](const auto& d) { return d.name == "weight_decay"; });
    setup.cfg.weight_decay = values[static_cast<std::size_t>(wd_it - dims.begin())];

    if (method == training::Method::fusion_feature || method == training::Method::fusion_decision) {
      training::PipelineSpecs fusion;
      const auto& enc = sampled.at("encoder");
      fusion.parts.emplace("visual_encoder", enc);
      fusion.parts.emplace("audio_encoder", enc);
      const std::size_t cat = 2 * enc.output_shape().flat;
      if (method == training::Method::fusion_decision) {
        fusion.parts.emplace("classifier", presets::detail::mlp(cat, {}, 1, true));
      } else {
        nn::ArchitectureSpec clf = sampled.at("classifier");
        clf.input_shape = {1, 1, cat};
        fusion.parts.emplace("classifier", std::move(clf));
      }
      setup.specs = std::move(fusion);
    } else {
      setup.specs = std::move(sampled);
    }

    auto result = eval::train_method(setup, tensors);
    return {result.record.validation_accuracy, result.record.training_seconds, ""};
  };

  auto records = training::hyperparameter_search(dims, objective, trials, seed);
  for (const auto& r : records) {
    ledger << r.to_json().dump() << "\n";
    ledger.flush();
  }

  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/ledger.jsonl"};
  manifest.write(out);
  std::fprintf(stderr, "search: %zu trials written to %s/ledger.jsonl\n", records.size(),
               out.c_str());
  return 0;
}

inline int cmd_evaluate(const json& config) {
  RunManifest manifest = detail::begin_manifest("evaluate", config);
  const std::string data_dir = detail::resolve_data_dir(config.at("data").get<std::string>());
  const std::string out = config.at("out").get<std::string>();
  auto pipeline = training::load_pipeline(config.at("checkpoint").get<std::string>());
  if (config.contains("direction")) {
    pipeline.direction = training::direction_from_string(config["direction"].get<std::string>());
  }

  auto split = io::read_cache(data_dir);
  auto tensors = training::SplitTensors::from(split);
  auto report = training::evaluate_pipeline(pipeline, tensors.test, tensors.validation);
  fs::create_directories(out);
  detail::write_text(fs::path(out) / "metrics.json", report.to_json().dump(2) + "\n");

  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/metrics.json"};
  manifest.write(out);
  std::fprintf(stderr, "evaluate: accuracy=%.4f balanced=%.4f auc=%.4f\n", report.accuracy,
               report.balanced_accuracy, report.auc_roc);
  return 0;
}

inline int cmd_explain(const json& config) {
  RunManifest manifest = detail::begin_manifest("explain", config);
  const std::string data_dir = detail::resolve_data_dir(config.at("data").get<std::string>());
  const std::string out = config.at("out").get<std::string>();
  const std::string modality = config.value("modality", "visual");
  auto pipeline = training::load_pipeline(config.at("checkpoint").get<std::string>());

  auto split = io::read_cache(data_dir);
  auto tensors = training::SplitTensors::from(split);
  const Mat& images = modality == "visual" ? tensors.test.visual : tensors.test.audio;
  const IVec& labels = tensors.test.labels;
  const auto n = std::min<std::size_t>(config.value("samples", std::size_t{0}) == 0
                                           ? static_cast<std::size_t>(images.rows())
                                           : config.value("samples", std::size_t{0}),
                                       static_cast<std::size_t>(images.rows()));

  xai::LimeConfig lime;
  if (config.contains("lime")) {
    const json& l = config["lime"];
    lime.n_perturb = l.value("n_perturb", lime.n_perturb);
    lime.ridge_alpha = l.value("ridge_alpha", lime.ridge_alpha);
    lime.kernel_width = l.value("kernel_width", lime.kernel_width);
    lime.seed = l.value("seed", lime.seed);
  }
  const auto top_k = config.value("top_k", std::size_t{5});

  const auto predict = [&](const Vec& image) {
    Mat row(1, image.size());
    row.row(0) = image.transpose();
    return pipeline.predict(row, row)[0];
  };

  std::optional<xai::Mask> reference;
  if (config.contains("mask")) {
    std::ifstream is(config["mask"].get<std::string>());
    if (!is) throw Error("cannot open mask file");
    reference = xai::load_mask_text(is);
  }

  const auto spmap = xai::segment_grid();
  fs::create_directories(out);
  std::ofstream records(fs::path(out) / "explanations.jsonl");
  std::vector<xai::Mask> masks_class[2];
  std::vector<std::size_t> intersections;

  for (std::size_t i = 0; i < n; ++i) {
    xai::LimeConfig sample_cfg = lime;
    sample_cfg.seed = derive_seed(lime.seed, i);
    const auto expl =
        xai::lime_explain(predict, images.row(static_cast<Eigen::Index>(i)).transpose(), spmap,
                          sample_cfg);
    const auto mask = xai::positive_mask(expl, top_k);
    const int label = labels[static_cast<Eigen::Index>(i)];
    masks_class[label == 1 ? 1 : 0].push_back(mask);

    json rec{{"index", i},
             {"label", label},
             {"intercept", expl.intercept},
             {"fidelity", expl.fidelity},
             {"weights", std::vector<double>(expl.weights.data(),
                                             expl.weights.data() + expl.weights.size())}};
    json rle = json::array();
    for (const auto& [start, len] : xai::mask_rle(mask)) rle.push_back({start, len});
    rec["mask_rle"] = rle;
    if (reference) {
      const std::size_t count = xai::mask_intersection_count(mask, *reference);
      intersections.push_back(count);
      rec["mask_intersection"] = count;
    }
    records << rec.dump() << "\n";
  }

  // per-class frequency-range histograms (spectrogram rows for audio)
  std::ostringstream hist;
  hist << "row,count_defect_free,count_defective\n";
  const auto h0 = xai::frequency_histogram(masks_class[0]);
  const auto h1 = xai::frequency_histogram(masks_class[1]);
  for (std::size_t r = 0; r < h0.size(); ++r) {
    hist << r << "," << h0[r] << "," << h1[r] << "\n";
  }
  detail::write_text(fs::path(out) / "frequency_histogram.csv", hist.str());

  json summary{{"samples", n}, {"modality", modality}};
  if (reference && !intersections.empty()) {
    double mean = 0.0;
    std::ostringstream ic;
    ic << "index,intersection\n";
    for (std::size_t i = 0; i < intersections.size(); ++i) {
      mean += static_cast<double>(intersections[i]);
      ic << i << "," << intersections[i] << "\n";
    }
    mean /= static_cast<double>(intersections.size());
    summary["mean_mask_intersection"] = mean;
    detail::write_text(fs::path(out) / "intersections.csv", ic.str());
  }
  detail::write_text(fs::path(out) / "summary.json", summary.dump(2) + "\n");

  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/explanations.jsonl", out + "/frequency_histogram.csv",
                      out + "/summary.json"};
  manifest.write(out);
  return 0;
}

inline int cmd_noise_sweep(const json& config) {
  RunManifest manifest = detail::begin_manifest("noise-sweep", config);
  const std::string data_dir = detail::resolve_data_dir(config.at("data").get<std::string>());
  const std::string out = config.at("out").get<std::string>();
  const auto seed = config.value("seed", std::uint64_t{0});

  if (!config.contains("methods") || config["methods"].empty()) {
    throw Error("noise-sweep: per-method configurations are required");
  }
  std::vector<eval::MethodSetup> methods;
  for (const auto& m : config["methods"]) methods.push_back(detail::setup_from_config(m));

  const auto parse_levels = [](const json& arr, bool snr) {
    std::vector<double> levels;
    for (const auto& v : arr) {
      if (v.is_string() && (v == "inf" || v == "Inf")) {
        levels.push_back(kInfSnr);
      } else {
        levels.push_back(v.get<double>());
      }
    }
    if (levels.empty() && snr) levels.push_back(kInfSnr);
    return levels;
  };
  const std::vector<double> sigmas = config.contains("visual_sigmas")
                                         ? parse_levels(config["visual_sigmas"], false)
                                         : std::vector<double>{0, 5, 10, 15, 20, 25};
  const std::vector<double> snrs = config.contains("audio_snrs")
                                       ? parse_levels(config["audio_snrs"], true)
                                       : std::vector<double>{kInfSnr, 70, 65, 60, 55, 50};

  auto split = io::read_cache(data_dir);
  const auto table = eval::noise_sweep(split, methods, sigmas, snrs, seed);

  fs::create_directories(out);
  detail::write_text(fs::path(out) / "noise.csv", table.to_csv());
  detail::write_text(fs::path(out) / "noise.json", table.to_json().dump(2) + "\n");
  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/noise.csv", out + "/noise.json"};
  manifest.write(out);
  return 0;
}

inline int cmd_report(const json& config) {
  RunManifest manifest = detail::begin_manifest("report", config);
  const std::string run = config.at("run").get<std::string>();
  const std::string out = config.value("out", run);
  const auto top_k = config.value("top_k", std::size_t{50});

  json report;
  fs::create_directories(out);

  const fs::path reports_path = fs::path(run) / "reports.jsonl";
  if (fs::exists(reports_path)) {
    std::ifstream is(reports_path);
    std::vector<eval::MetricsReport> reports;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) reports.push_back(eval::MetricsReport::from_json(json::parse(line)));
    }
    if (!reports.empty()) {
      if (reports.size() > top_k) reports.resize(top_k);
      const auto summary = eval::summarize_topk(reports);
      report["test_summary"] = summary.to_json();
      std::ostringstream cs;
      cs << "metric,mean,max,min\n";
      const auto row = [&](const char* name, const eval::MetricStats& s) {
        cs << name << "," << s.mean << "," << s.max << "," << s.min << "\n";
      };
      row("accuracy", summary.accuracy);
      row("balanced_accuracy", summary.balanced_accuracy);
      row("auc_roc", summary.auc_roc);
      row("training_runtime_s", summary.training_runtime_s);
      row("prediction_runtime_s", summary.prediction_runtime_s);
      detail::write_text(fs::path(out) / "report.csv", cs.str());
    }
  }

  const fs::path ledger_path = fs::path(run) / "ledger.jsonl";
  if (fs::exists(ledger_path)) {
    std::ifstream is(ledger_path);
    std::vector<training::TrialRecord> trials;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) trials.push_back(training::TrialRecord::from_json(json::parse(line)));
    }
    std::sort(trials.begin(), trials.end(), [](const auto& a, const auto& b) {
      if (a.validation_accuracy != b.validation_accuracy) {
        return a.validation_accuracy > b.validation_accuracy;
      }
      return a.trial_id < b.trial_id;
    });
    const std::size_t k = std::min(top_k, trials.size());
    double mean = 0.0, best = 0.0, worst = 1.0;
    for (std::size_t i = 0; i < k; ++i) {
      mean += trials[i].validation_accuracy;
      best = std::max(best, trials[i].validation_accuracy);
      worst = std::min(worst, trials[i].validation_accuracy);
    }
    if (k > 0) {
      report["validation_summary"] = {{"count", k},
                                      {"mean", mean / static_cast<double>(k)},
                                      {"max", best},
                                      {"min", worst}};
    }
  }

  const fs::path noise_path = fs::path(run) / "noise.json";
  if (fs::exists(noise_path)) {
    std::ifstream is(noise_path);
    report["noise_table"] = json::parse(is);
  }

  if (report.empty()) throw Error("report: no ledger.jsonl, reports.jsonl, or noise.json in " + run);
  detail::write_text(fs::path(out) / "report.json", report.dump(2) + "\n");
  manifest.finished_at = iso_now();
  manifest.outputs = {out + "/report.json"};
  manifest.write(out);
  return 0;
}

}  // namespace cmkt::cli
