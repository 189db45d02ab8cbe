// Command-line front end for the cross-modality knowledge-transfer toolkit.
//
// Subcommands: fetch, preprocess, synth, train, search, evaluate, explain,
// noise-sweep, report. Each takes a JSON config file and a handful of flag
// overrides, and writes its outputs plus a run manifest under --out.

#include "cmkt/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>

namespace {

using cmkt::cli::json;

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw cmkt::Error("cannot open config file: " + path);
  return json::parse(is);
}

void merge_flag(json& config, const char* key, const std::string& value) {
  if (!value.empty()) config[key] = value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modality knowledge transfer toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, method, direction, checkpoint, modality, mask;
  std::string raw_dir, url, dest, md5, run_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t trials = 0, top_k = 0, samples = 0, epochs = 0;

  auto* fetch = app.add_subcommand("fetch", "download and unpack a published dataset record");
  fetch->add_option("url", url)->required();
  fetch->add_option("dest", dest)->required();
  fetch->add_option("--md5", md5, "expected archive checksum");

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--data", data_dir, "preprocessed cache directory");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });
  };

  auto* preprocess = app.add_subcommand("preprocess", "build the preprocessed cache from raw data");
  preprocess->add_option("--raw", raw_dir, "raw dataset directory");
  add_common(preprocess);

  auto* synth = app.add_subcommand("synth", "generate a synthetic paired dataset cache");
  add_common(synth);

  auto* train = app.add_subcommand("train", "train one method");
  add_common(train);
  train->add_option("--method", method);
  train->add_option("--direction", direction);
  train->add_option("--epochs", epochs);

  auto* search = app.add_subcommand("search", "hyperparameter search");
  add_common(search);
  search->add_option("--method", method);
  search->add_option("--trials", trials);

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a trained checkpoint on the test set");
  add_common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint);
  evaluate->add_option("--direction", direction);

  auto* explain = app.add_subcommand("explain", "local surrogate explanations on the test set");
  add_common(explain);
  explain->add_option("--checkpoint", checkpoint);
  explain->add_option("--modality", modality);
  explain->add_option("--mask", mask, "reference mask file (80x80 text grid)");
  explain->add_option("--samples", samples);

  auto* sweep = app.add_subcommand("noise-sweep", "accuracy table across noise levels");
  add_common(sweep);

  auto* report = app.add_subcommand("report", "aggregate ledgers and reports into summary tables");
  report->add_option("--run", run_dir, "run directory with ledger.jsonl / reports.jsonl");
  report->add_option("--top-k", top_k);
  add_common(report);

  CLI11_PARSE(app, argc, argv);

  try {
    if (fetch->parsed()) return cmkt::cli::cmd_fetch(url, dest, md5);

    json config = load_config(config_path);
    merge_flag(config, "data", data_dir);
    merge_flag(config, "out", out_dir);
    merge_flag(config, "method", method);
    merge_flag(config, "direction", direction);
    merge_flag(config, "checkpoint", checkpoint);
    merge_flag(config, "modality", modality);
    merge_flag(config, "mask", mask);
    merge_flag(config, "raw", raw_dir);
    merge_flag(config, "run", run_dir);
    if (seed_set) config["seed"] = seed;
    if (trials > 0) config["trials"] = trials;
    if (top_k > 0) config["top_k"] = top_k;
    if (samples > 0) config["samples"] = samples;
    if (epochs > 0) {
      if (!config.contains("train")) config["train"] = json::object();
      config["train"]["epochs"] = epochs;
    }

    if (preprocess->parsed()) return cmkt::cli::cmd_preprocess(config);
    if (synth->parsed()) return cmkt::cli::cmd_synth(config);
    if (train->parsed()) return cmkt::cli::cmd_train(config);
    if (search->parsed()) return cmkt::cli::cmd_search(config);
    if (evaluate->parsed()) return cmkt::cli::cmd_evaluate(config);
    if (explain->parsed()) return cmkt::cli::cmd_explain(config);
    if (sweep->parsed()) return cmkt::cli::cmd_noise_sweep(config);
    if (report->parsed()) return cmkt::cli::cmd_report(config);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
