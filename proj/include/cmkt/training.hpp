#pragma once

// Training pipelines: the two single-modal baselines, semantic alignment with
// its alternating two-step update, the fully and semi supervised mapping
// pipelines, three fusion variants, and the sequential hyperparameter search
// with top-k retraining.

#include "cmkt/common.hpp"
#include "cmkt/data.hpp"
#include "cmkt/diag.hpp"
#include "cmkt/eval.hpp"
#include "cmkt/losses.hpp"
#include "cmkt/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace cmkt::training {

using json = nlohmann::json;

enum class Method {
  visual_only,
  audio_only,
  semantic_alignment,
  fsl_mapping,
  ssl_mapping,
  fusion_data,
  fusion_feature,
  fusion_decision,
};

enum class Direction { v2a, a2v };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::visual_only: return "visual-only";
    case Method::audio_only: return "audio-only";
    case Method::semantic_alignment: return "semantic-alignment";
    case Method::fsl_mapping: return "fsl-mapping";
    case Method::ssl_mapping: return "ssl-mapping";
    case Method::fusion_data: return "fusion-data";
    case Method::fusion_feature: return "fusion-feature";
    case Method::fusion_decision: return "fusion-decision";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::visual_only, Method::audio_only, Method::semantic_alignment,
                   Method::fsl_mapping, Method::ssl_mapping, Method::fusion_data,
                   Method::fusion_feature, Method::fusion_decision}) {
    if (to_string(m) == s) return m;
  }
  throw Error("unknown method '" + s + "'");
}

inline std::string to_string(Direction d) { return d == Direction::v2a ? "v2a" : "a2v"; }

inline Direction direction_from_string(const std::string& s) {
  if (s == "v2a") return Direction::v2a;
  if (s == "a2v") return Direction::a2v;
  throw Error("unknown direction '" + s + "' (expected v2a or a2v)");
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  losses::CCSAConfig ccsa{};
  // Adam moments fixed at the usual defaults (0.9 / 0.999, eps 1e-8).
  std::string alternate = "per-batch";  // semantic alignment: per-batch | per-epoch
  std::size_t snapshot_every = 0;       // encoded-space snapshots every N epochs

  void validate() const {
    if (!(learning_rate > 0)) throw Error("TrainConfig: learning_rate must be > 0");
    if (epochs < 1) throw Error("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
    if (weight_decay < 0) throw Error("TrainConfig: weight_decay must be >= 0");
    if (alternate != "per-batch" && alternate != "per-epoch") {
      throw Error("TrainConfig: alternate must be per-batch or per-epoch");
    }
    ccsa.validate();
  }

  json to_json() const {
    return json{{"learning_rate", learning_rate},
                {"weight_decay", weight_decay},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"seed", seed},
                {"margin", ccsa.margin},
                {"gamma", ccsa.gamma},
                {"class_weights", {ccsa.class_weights[0], ccsa.class_weights[1]}},
                {"alternate", alternate},
                {"snapshot_every", snapshot_every}};
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.ccsa.margin = j.value("margin", c.ccsa.margin);
    c.ccsa.gamma = j.value("gamma", c.ccsa.gamma);
    if (j.contains("class_weights")) {
      c.ccsa.class_weights = {j["class_weights"][0].get<double>(),
                              j["class_weights"][1].get<double>()};
    }
    c.alternate = j.value("alternate", c.alternate);
    c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
    c.validate();
    return c;
  }
};

// Named architecture parts of one method's pipeline.
struct PipelineSpecs {
  std::map<std::string, nn::ArchitectureSpec> parts;

  const nn::ArchitectureSpec& at(const std::string& name) const {
    auto it = parts.find(name);
    if (it == parts.end()) throw Error("pipeline specs: missing part '" + name + "'");
    return it->second;
  }

  json to_json() const {
    json p;
    for (const auto& [name, spec] : parts) p[name] = spec.to_json();
    return json{{"parts", p}};
  }

  static PipelineSpecs from_json(const json& j) {
    PipelineSpecs s;
    for (const auto& [name, spec] : j.at("parts").items()) {
      s.parts.emplace(name, nn::ArchitectureSpec::from_json(spec));
    }
    return s;
  }
};

struct PhasedConfig {
  TrainConfig phase1, phase2, phase3;
  std::string feature_tag = "hidden";  // source layer of the transferred features
};

// ---------------------------------------------------------------------------
// Trained pipeline

struct Pipeline {
  Method method = Method::visual_only;
  Direction direction = Direction::v2a;
  std::map<std::string, nn::Model> models;

  nn::Model& part(const std::string& name) {
    auto it = models.find(name);
    if (it == models.end()) throw Error("pipeline: missing model part '" + name + "'");
    return it->second;
  }
  const nn::Model& part(const std::string& name) const {
    return const_cast<Pipeline*>(this)->part(name);
  }

  nn::Modality target_modality() const {
    switch (method) {
      case Method::visual_only: return nn::Modality::visual;
      case Method::audio_only: return nn::Modality::audio;
      default:
        return direction == Direction::v2a ? nn::Modality::audio : nn::Modality::visual;
    }
  }

  // Probability scores for a batch; unused modalities are ignored.
  Vec predict(const Mat& visual, const Mat& audio) {
    switch (method) {
      case Method::visual_only:
        return chain2("encoder", "classifier", visual);
      case Method::audio_only:
        return chain2("encoder", "classifier", audio);
      case Method::semantic_alignment:
        return chain2("encoder", "classifier",
                      target_modality() == nn::Modality::audio ? audio : visual);
      case Method::fsl_mapping: {
        const Mat& x = target_modality() == nn::Modality::audio ? audio : visual;
        return chain2("mapping", "head", x);
      }
      case Method::ssl_mapping: {
        const bool audio_in = target_modality() == nn::Modality::audio;
        const Mat& x = audio_in ? audio : visual;
        nn::Model& ae = part(audio_in ? "audio_autoencoder" : "visual_autoencoder");
        const Mat bottleneck = ae.forward_until(x, ae.resolve_tag("bottleneck"));
        return chain2("mapping", "head", bottleneck);
      }
      case Method::fusion_data: {
        Mat stacked(visual.rows(), visual.cols() + audio.cols());
        stacked << visual, audio;
        return chain2("encoder", "classifier", stacked);
      }
      case Method::fusion_feature:
      case Method::fusion_decision: {
        nn::Model& ev = part("visual_encoder");
        nn::Model& ea = part("audio_encoder");
        ev.eval();
        ea.eval();
        const Mat fv = ev.forward(visual);
        const Mat fa = ea.forward(audio);
        Mat cat(fv.rows(), fv.cols() + fa.cols());
        cat << fv, fa;
        nn::Model& clf = part("classifier");
        clf.eval();
        return clf.forward(cat).col(0);
      }
    }
    throw Error("predict: unreachable");
  }

 private:
  Vec chain2(const std::string& a, const std::string& b, const Mat& x) {
    nn::Model& ma = part(a);
    nn::Model& mb = part(b);
    ma.eval();
    mb.eval();
    return mb.forward(ma.forward(x)).col(0);
  }
};

// ---------------------------------------------------------------------------
// Records and logs

struct TrialRecord {
  std::size_t trial_id = 0;
  json params;
  double validation_accuracy = 0.0;
  double training_seconds = 0.0;
  std::string checkpoint_path;

  json to_json() const {
    return json{{"trial_id", trial_id},
                {"params", params},
                {"validation_accuracy", validation_accuracy},
                {"training_seconds", training_seconds},
                {"checkpoint_path", checkpoint_path}};
  }

  static TrialRecord from_json(const json& j) {
    TrialRecord r;
    r.trial_id = j.at("trial_id").get<std::size_t>();
    r.params = j.value("params", json::object());
    r.validation_accuracy = j.at("validation_accuracy").get<double>();
    r.training_seconds = j.value("training_seconds", 0.0);
    r.checkpoint_path = j.value("checkpoint_path", std::string{});
    return r;
  }
};

struct MmdSnapshot {
  std::size_t epoch = 0;
  diag::GroupMMDs mmds;
};

struct TrainLog {
  std::vector<double> loss;       // per-epoch mean of the main objective
  std::vector<double> loss_csa;   // semantic alignment only
  std::vector<double> loss_c;     // semantic alignment only
  std::vector<double> loss_ccsa;  // semantic alignment only
  std::vector<double> train_accuracy;
  std::vector<MmdSnapshot> snapshots;
};

struct TrainResult {
  Pipeline pipeline;
  TrialRecord record;
  TrainLog log;
};

struct SplitTensors {
  data::TensorSplit train, validation, test;

  static SplitTensors from(const data::DatasetSplit& split) {
    return {data::to_tensors(split.train), data::to_tensors(split.validation),
            data::to_tensors(split.test)};
  }
};

// ---------------------------------------------------------------------------
// Internals shared by the pipelines

namespace detail {

inline void check_finite(double loss, const char* what, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw Error(std::string(what) + ": training diverged (non-finite loss) at epoch " +
                std::to_string(epoch + 1));
  }
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    const std::size_t take = std::min(batch_size, n - at);
    batches.emplace_back(order.begin() + static_cast<long>(at),
                         order.begin() + static_cast<long>(at + take));
  }
  return batches;
}

inline Mat gather_rows(const Mat& m, const std::vector<std::size_t>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

inline IVec gather_labels(const IVec& v, const std::vector<std::size_t>& idx) {
  IVec out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(idx[i])];
  }
  return out;
}

inline bool has_dropout(const nn::ArchitectureSpec& spec) {
  for (const auto& l : spec.layers) {
    if (std::holds_alternative<nn::DropoutSpec>(l.op)) return true;
  }
  return false;
}

// Joint forward/backward across a stack of models wired head to tail.
struct Stack {
  std::vector<nn::Model*> models;

  Mat forward(const Mat& x) {
    Mat cur = x;
    for (auto* m : models) cur = m->forward(cur);
    return cur;
  }
  void backward(const Mat& dy) {
    Mat cur = dy;
    for (auto it = models.rbegin(); it != models.rend(); ++it) cur = (*it)->backward(cur);
  }
  void train() {
    for (auto* m : models) m->train();
  }
  void eval() {
    for (auto* m : models) m->eval();
  }
  void zero_grad() {
    for (auto* m : models) m->zero_grad();
  }
};

inline double batch_accuracy(const Vec& probs, const IVec& labels) {
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    correct += ((probs[i] >= 0.5) == (labels[i] == 1)) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

}  // namespace detail

inline double validation_accuracy(Pipeline& p, const data::TensorSplit& val) {
  const Vec scores = p.predict(val.visual, val.audio);
  return eval::accuracy(eval::confusion(scores, val.labels));
}

// ---------------------------------------------------------------------------
// Single-modal baseline: encoder + classifier trained end to end with
// weighted binary cross entropy.

inline TrainResult train_single_modal(const SplitTensors& split, nn::Modality modality,
                                      const TrainConfig& cfg, const PipelineSpecs& specs) {
  cfg.validate();
  if (split.train.labels.size() == 0) throw Error("train_single_modal: empty training split");
  Stopwatch total;

  TrainResult result;
  result.pipeline.method =
      modality == nn::Modality::visual ? Method::visual_only : Method::audio_only;
  result.pipeline.models.emplace("encoder",
                                 nn::build_model(specs.at("encoder"), derive_seed(cfg.seed, 1)));
  result.pipeline.models.emplace(
      "classifier", nn::build_model(specs.at("classifier"), derive_seed(cfg.seed, 2)));
  nn::Model& encoder = result.pipeline.part("encoder");
  nn::Model& classifier = result.pipeline.part("classifier");

  nn::AdamConfig adam_cfg{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay};
  nn::Adam opt_e(encoder, adam_cfg), opt_c(classifier, adam_cfg);
  detail::Stack stack{{&encoder, &classifier}};

  const Mat& X = modality == nn::Modality::visual ? split.train.visual : split.train.audio;
  const IVec& y = split.train.labels;
  Rng batch_rng(derive_seed(cfg.seed, 0xba7c));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0, epoch_acc = 0.0;
    const auto batches =
        detail::make_batches(static_cast<std::size_t>(X.rows()), cfg.batch_size, batch_rng);
    for (const auto& idx : batches) {
      const Mat xb = detail::gather_rows(X, idx);
      const IVec yb = detail::gather_labels(y, idx);
      stack.train();
      stack.zero_grad();
      const Mat probs = stack.forward(xb);
      auto bce = losses::weighted_bce_grad(probs.col(0), yb, cfg.ccsa.class_weights);
      detail::check_finite(bce.value, "single-modal", epoch);
      stack.backward(Mat(bce.grad));
      opt_e.step(encoder);
      opt_c.step(classifier);
      epoch_loss += bce.value * static_cast<double>(idx.size());
      epoch_acc += detail::batch_accuracy(probs.col(0), yb) * static_cast<double>(idx.size());
    }
    result.log.loss.push_back(epoch_loss / static_cast<double>(X.rows()));
    result.log.train_accuracy.push_back(epoch_acc / static_cast<double>(X.rows()));
  }

  result.record.training_seconds = total.seconds();
  result.record.validation_accuracy = validation_accuracy(result.pipeline, split.validation);
  result.record.params = cfg.to_json();
  return result;
}

// ---------------------------------------------------------------------------
// Semantic alignment: shared encoder and classifier over both modalities.
// Each update step first moves the classifier under the mean classification
// loss with the encoder held fixed, then moves the encoder under the full
// objective with the classifier held fixed.

struct TrainHooks {
  // stage is "classifier" or "encoder" (per-epoch alternation) or "epoch"
  // (per-batch alternation); invoked after the corresponding updates
  std::function<void(const std::string& stage, std::size_t epoch, nn::Model& encoder,
                     nn::Model& classifier)>
      on_stage;
};

inline TrainResult train_semantic_alignment(const SplitTensors& split, const TrainConfig& cfg,
                                            const PipelineSpecs& specs,
                                            const TrainHooks* hooks = nullptr) {
  cfg.validate();
  if (split.train.labels.size() == 0) throw Error("train_semantic_alignment: empty training split");
  if (detail::has_dropout(specs.at("encoder"))) {
    // the encoder is re-run between value and gradient passes; a stochastic
    // encoder would make those passes disagree
    throw Error("train_semantic_alignment: encoder spec must not contain dropout");
  }
  Stopwatch total;

  TrainResult result;
  result.pipeline.method = Method::semantic_alignment;
  result.pipeline.models.emplace("encoder",
                                 nn::build_model(specs.at("encoder"), derive_seed(cfg.seed, 1)));
  result.pipeline.models.emplace(
      "classifier", nn::build_model(specs.at("classifier"), derive_seed(cfg.seed, 2)));
  nn::Model& encoder = result.pipeline.part("encoder");
  nn::Model& classifier = result.pipeline.part("classifier");

  nn::AdamConfig adam_cfg{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay};
  nn::Adam opt_e(encoder, adam_cfg), opt_t(classifier, adam_cfg);

  const Mat& XV = split.train.visual;
  const Mat& XA = split.train.audio;
  const IVec& y = split.train.labels;
  const auto n = static_cast<std::size_t>(y.size());
  Rng batch_rng(derive_seed(cfg.seed, 0xba7c));
  const auto& w = cfg.ccsa.class_weights;
  const double gamma = cfg.ccsa.gamma;
  const bool per_epoch = cfg.alternate == "per-epoch";

  const auto classifier_step = [&](const Mat& ev, const Mat& ea, const IVec& yb, double& lc,
                                   double& acc) {
    classifier.train();
    classifier.zero_grad();
    const Mat pv = classifier.forward(ev);
    auto bv = losses::weighted_bce_grad(pv.col(0), yb, w);
    classifier.backward(Mat(0.5 * bv.grad));
    const Mat pa = classifier.forward(ea);
    auto ba = losses::weighted_bce_grad(pa.col(0), yb, w);
    classifier.backward(Mat(0.5 * ba.grad));
    lc = losses::mean_classification_loss(bv.value, ba.value);
    acc = (detail::batch_accuracy(pv.col(0), yb) + detail::batch_accuracy(pa.col(0), yb)) / 2.0;
  };

  // Gradient of the full objective w.r.t. one modality's embeddings, routed
  // through the frozen classifier. Also surfaces that modality's BCE value
  // and batch accuracy for the epoch log.
  struct EmbeddingGrad {
    Mat grad;
    double bce = 0.0;
    double acc = 0.0;
  };
  const auto embedding_grad = [&](const Mat& e, const IVec& yb, const Mat& pair_grad) {
    classifier.train();
    classifier.zero_grad();  // discarded; the classifier is not stepped here
    const Mat p = classifier.forward(e);
    auto b = losses::weighted_bce_grad(p.col(0), yb, w);
    const Mat de_cls = classifier.backward(Mat(b.grad));
    return EmbeddingGrad{Mat((1.0 - gamma) * pair_grad + gamma * 0.5 * de_cls), b.value,
                         detail::batch_accuracy(p.col(0), yb)};
  };

  const auto take_snapshot = [&](std::size_t epoch_1based) {
    nn::EncodedBatch ev = nn::encode(encoder, split.test.visual, split.test.labels,
                                     nn::Modality::visual);
    nn::EncodedBatch ea = nn::encode(encoder, split.test.audio, split.test.labels,
                                     nn::Modality::audio);
    result.log.snapshots.push_back({epoch_1based, diag::group_mmds(ev, ea)});
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::make_batches(n, cfg.batch_size, batch_rng);
    double s_csa = 0.0, s_c = 0.0, s_ccsa = 0.0, s_acc = 0.0;

    // per-epoch alternation: all classifier steps first, then encoder steps
    for (int phase = per_epoch ? 0 : 2; phase < (per_epoch ? 2 : 3); ++phase) {
      for (const auto& idx : batches) {
        const Mat xv = detail::gather_rows(XV, idx);
        const Mat xa = detail::gather_rows(XA, idx);
        const IVec yb = detail::gather_labels(y, idx);

        if (phase == 0 || phase == 2) {
          encoder.eval();
          const Mat ev = encoder.forward(xv);
          const Mat ea = encoder.forward(xa);
          double lc = 0.0, acc = 0.0;
          classifier_step(ev, ea, yb, lc, acc);
          detail::check_finite(lc, "semantic-alignment", epoch);
          opt_t.step(classifier);
          if (phase == 0) continue;  // per-epoch: encoder handled in phase 1
        }

        // encoder update under the full objective, classifier frozen
        encoder.train();
        encoder.zero_grad();
        const Mat ea_value = encoder.forward(xa);
        const Mat ev_value = encoder.forward(xv);  // cache now holds the visual batch
        nn::EncodedBatch evb{ev_value, yb, nn::Modality::visual};
        nn::EncodedBatch eab{ea_value, yb, nn::Modality::audio};
        auto sa = losses::semantic_alignment_loss_grad(evb, eab);
        auto sep = losses::separation_loss_grad(evb, eab, cfg.ccsa.margin);

        const auto gv = embedding_grad(ev_value, yb, Mat(sa.grad_visual + sep.grad_visual));
        encoder.backward(gv.grad);
        encoder.forward(xa);  // restore the audio caches for the second backward
        const auto ga = embedding_grad(ea_value, yb, Mat(sa.grad_audio + sep.grad_audio));
        encoder.backward(ga.grad);
        opt_e.step(encoder);

        const double lc = losses::mean_classification_loss(gv.bce, ga.bce);
        const double lcsa = sa.value + sep.value;
        const double lccsa = losses::ccsa_loss(sa.value, sep.value, lc, gamma);
        detail::check_finite(lccsa, "semantic-alignment", epoch);
        const double bsz = static_cast<double>(idx.size());
        s_csa += lcsa * bsz;
        s_c += lc * bsz;
        s_ccsa += lccsa * bsz;
        s_acc += bsz * (gv.acc + ga.acc) / 2.0;
      }
      if (hooks && hooks->on_stage) {
        const char* stage = !per_epoch ? "epoch" : (phase == 0 ? "classifier" : "encoder");
        hooks->on_stage(stage, epoch + 1, encoder, classifier);
      }
    }

    const double dn = static_cast<double>(n);
    result.log.loss_csa.push_back(s_csa / dn);
    result.log.loss_c.push_back(s_c / dn);
    result.log.loss_ccsa.push_back(s_ccsa / dn);
    result.log.loss.push_back(s_ccsa / dn);
    result.log.train_accuracy.push_back(s_acc / dn);

    if (cfg.snapshot_every > 0) {
      if (epoch == 0 || (epoch + 1) % cfg.snapshot_every == 0) take_snapshot(epoch + 1);
    }
  }

  result.record.training_seconds = total.seconds();
  result.record.validation_accuracy = validation_accuracy(result.pipeline, split.validation);
  result.record.params = cfg.to_json();
  return result;
}

// ---------------------------------------------------------------------------
// Generic BCE / MSE phase helpers used by the mapping pipelines

namespace detail {

inline std::vector<double> fit_bce(Stack stack, std::vector<nn::Adam*> opts,
                                   std::vector<nn::Model*> stepped, const Mat& X, const IVec& y,
                                   const TrainConfig& cfg, const char* what) {
  Rng batch_rng(derive_seed(cfg.seed, 0xf17b));
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double acc = 0.0;
    const auto batches = make_batches(static_cast<std::size_t>(X.rows()), cfg.batch_size, batch_rng);
    for (const auto& idx : batches) {
      const Mat xb = gather_rows(X, idx);
      const IVec yb = gather_labels(y, idx);
      stack.train();
      stack.zero_grad();
      const Mat probs = stack.forward(xb);
      auto bce = losses::weighted_bce_grad(probs.col(0), yb, cfg.ccsa.class_weights);
      check_finite(bce.value, what, epoch);
      stack.backward(Mat(bce.grad));
      for (std::size_t i = 0; i < opts.size(); ++i) opts[i]->step(*stepped[i]);
      acc += bce.value * static_cast<double>(idx.size());
    }
    history.push_back(acc / static_cast<double>(X.rows()));
  }
  return history;
}

inline std::vector<double> fit_mse(Stack stack, std::vector<nn::Adam*> opts,
                                   std::vector<nn::Model*> stepped, const Mat& X, const Mat& target,
                                   const TrainConfig& cfg, const char* what) {
  Rng batch_rng(derive_seed(cfg.seed, 0xf175));
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double acc = 0.0;
    const auto batches = make_batches(static_cast<std::size_t>(X.rows()), cfg.batch_size, batch_rng);
    for (const auto& idx : batches) {
      const Mat xb = gather_rows(X, idx);
      const Mat tb = gather_rows(target, idx);
      stack.train();
      stack.zero_grad();
      const Mat out = stack.forward(xb);
      const double value = losses::mse(out, tb);
      check_finite(value, what, epoch);
      stack.backward(losses::mse_grad(out, tb));
      for (std::size_t i = 0; i < opts.size(); ++i) opts[i]->step(*stepped[i]);
      acc += value * static_cast<double>(idx.size());
    }
    history.push_back(acc / static_cast<double>(X.rows()));
  }
  return history;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fully supervised mapping. Phase 1 trains the source classifier; phase 2
// regresses the tagged source hidden features from the target modality;
// phase 3 trains a classification head on the mapped features.

inline TrainResult train_fully_supervised_mapping(const SplitTensors& split, Direction direction,
                                                  const PhasedConfig& cfg,
                                                  const PipelineSpecs& specs) {
  cfg.phase1.validate();
  cfg.phase2.validate();
  cfg.phase3.validate();
  if (split.train.labels.size() == 0) throw Error("fsl-mapping: empty training split");
  Stopwatch total;

  TrainResult result;
  result.pipeline.method = Method::fsl_mapping;
  result.pipeline.direction = direction;
  result.pipeline.models.emplace("source",
                                 nn::build_model(specs.at("source"), derive_seed(cfg.phase1.seed, 11)));
  result.pipeline.models.emplace("mapping",
                                 nn::build_model(specs.at("mapping"), derive_seed(cfg.phase2.seed, 12)));
  result.pipeline.models.emplace("head",
                                 nn::build_model(specs.at("head"), derive_seed(cfg.phase3.seed, 13)));
  nn::Model& source = result.pipeline.part("source");
  nn::Model& mapping = result.pipeline.part("mapping");
  nn::Model& head = result.pipeline.part("head");

  const std::size_t fh_dim = source.tagged_dim(cfg.feature_tag);
  if (mapping.output_shape().flat != fh_dim) {
    throw Error("fsl-mapping: mapping output dim " + std::to_string(mapping.output_shape().flat) +
                " does not match feature dim " + std::to_string(fh_dim) +
                " at tag '" + cfg.feature_tag + "' (phases wired out of order?)");
  }
  if (head.input_dim() != fh_dim) {
    throw Error("fsl-mapping: head input dim " + std::to_string(head.input_dim()) +
                " does not match feature dim " + std::to_string(fh_dim));
  }

  const bool v2a = direction == Direction::v2a;
  const Mat& source_train = v2a ? split.train.visual : split.train.audio;
  const Mat& target_train = v2a ? split.train.audio : split.train.visual;

  // Phase 1: source classifier.
  nn::AdamConfig a1{cfg.phase1.learning_rate, 0.9, 0.999, 1e-8, cfg.phase1.weight_decay};
  nn::Adam o1(source, a1);
  result.log.loss = detail::fit_bce({{&source}}, {&o1}, {&source}, source_train,
                                    split.train.labels, cfg.phase1, "fsl phase 1");

  // Phase 2: regress the frozen hidden features from the target modality.
  const Mat features = source.forward_until(source_train, source.resolve_tag(cfg.feature_tag));
  nn::AdamConfig a2{cfg.phase2.learning_rate, 0.9, 0.999, 1e-8, cfg.phase2.weight_decay};
  nn::Adam o2(mapping, a2);
  const auto phase2_history = detail::fit_mse({{&mapping}}, {&o2}, {&mapping}, target_train,
                                              features, cfg.phase2, "fsl phase 2");
  result.log.loss.insert(result.log.loss.end(), phase2_history.begin(), phase2_history.end());

  // Phase 3: classification head on the frozen mapped features.
  mapping.eval();
  const Mat mapped = mapping.forward(target_train);
  nn::AdamConfig a3{cfg.phase3.learning_rate, 0.9, 0.999, 1e-8, cfg.phase3.weight_decay};
  nn::Adam o3(head, a3);
  const auto phase3_history = detail::fit_bce({{&head}}, {&o3}, {&head}, mapped,
                                              split.train.labels, cfg.phase3, "fsl phase 3");
  result.log.loss.insert(result.log.loss.end(), phase3_history.begin(), phase3_history.end());

  result.record.training_seconds = total.seconds();
  result.record.validation_accuracy = validation_accuracy(result.pipeline, split.validation);
  result.record.params = json{{"phase1", cfg.phase1.to_json()},
                              {"phase2", cfg.phase2.to_json()},
                              {"phase3", cfg.phase3.to_json()},
                              {"direction", to_string(direction)}};
  return result;
}

// ---------------------------------------------------------------------------
// Semi-supervised mapping. Phase 1 trains one autoencoder per modality;
// phase 2 maps between the two bottlenecks; phase 3 trains a classification
// head (a logistic-regression style single dense layer by default).

inline TrainResult train_semi_supervised_mapping(const SplitTensors& split, Direction direction,
                                                 const PhasedConfig& cfg,
                                                 const PipelineSpecs& specs) {
  cfg.phase1.validate();
  cfg.phase2.validate();
  cfg.phase3.validate();
  if (split.train.labels.size() == 0) throw Error("ssl-mapping: empty training split");
  Stopwatch total;

  TrainResult result;
  result.pipeline.method = Method::ssl_mapping;
  result.pipeline.direction = direction;
  result.pipeline.models.emplace(
      "visual_autoencoder",
      nn::build_model(specs.at("visual_autoencoder"), derive_seed(cfg.phase1.seed, 21)));
  result.pipeline.models.emplace(
      "audio_autoencoder",
      nn::build_model(specs.at("audio_autoencoder"), derive_seed(cfg.phase1.seed, 22)));
  result.pipeline.models.emplace("mapping",
                                 nn::build_model(specs.at("mapping"), derive_seed(cfg.phase2.seed, 23)));
  result.pipeline.models.emplace("head",
                                 nn::build_model(specs.at("head"), derive_seed(cfg.phase3.seed, 24)));
  nn::Model& vae = result.pipeline.part("visual_autoencoder");
  nn::Model& aae = result.pipeline.part("audio_autoencoder");
  nn::Model& mapping = result.pipeline.part("mapping");
  nn::Model& head = result.pipeline.part("head");

  // Phase 1: reconstruction.
  nn::AdamConfig a1{cfg.phase1.learning_rate, 0.9, 0.999, 1e-8, cfg.phase1.weight_decay};
  nn::Adam ov(vae, a1), oa(aae, a1);
  result.log.loss = detail::fit_mse({{&vae}}, {&ov}, {&vae}, split.train.visual,
                                    split.train.visual, cfg.phase1, "ssl phase 1 (visual)");
  const auto audio_history = detail::fit_mse({{&aae}}, {&oa}, {&aae}, split.train.audio,
                                             split.train.audio, cfg.phase1, "ssl phase 1 (audio)");
  result.log.loss.insert(result.log.loss.end(), audio_history.begin(), audio_history.end());

  // Phase 2: bottleneck-to-bottleneck mapping. For v2a the prediction input is
  // audio, so the mapping learns audio -> visual features.
  const Mat fv = vae.forward_until(split.train.visual, vae.resolve_tag("bottleneck"));
  const Mat fa = aae.forward_until(split.train.audio, aae.resolve_tag("bottleneck"));
  const bool v2a = direction == Direction::v2a;
  const Mat& mapping_in = v2a ? fa : fv;
  const Mat& mapping_out = v2a ? fv : fa;
  if (mapping.input_dim() != static_cast<std::size_t>(mapping_in.cols()) ||
      mapping.output_shape().flat != static_cast<std::size_t>(mapping_out.cols())) {
    throw Error("ssl-mapping: mapping dims " + std::to_string(mapping.input_dim()) + "->" +
                std::to_string(mapping.output_shape().flat) + " do not match bottlenecks " +
                std::to_string(mapping_in.cols()) + "->" + std::to_string(mapping_out.cols()));
  }
  nn::AdamConfig a2{cfg.phase2.learning_rate, 0.9, 0.999, 1e-8, cfg.phase2.weight_decay};
  nn::Adam om(mapping, a2);
  const auto phase2_history = detail::fit_mse({{&mapping}}, {&om}, {&mapping}, mapping_in,
                                              mapping_out, cfg.phase2, "ssl phase 2");
  result.log.loss.insert(result.log.loss.end(), phase2_history.begin(), phase2_history.end());

  // Phase 3: head on the frozen mapped features.
  mapping.eval();
  const Mat mapped = mapping.forward(mapping_in);
  nn::AdamConfig a3{cfg.phase3.learning_rate, 0.9, 0.999, 1e-8, cfg.phase3.weight_decay};
  nn::Adam oh(head, a3);
  const auto phase3_history = detail::fit_bce({{&head}}, {&oh}, {&head}, mapped,
                                              split.train.labels, cfg.phase3, "ssl phase 3");
  result.log.loss.insert(result.log.loss.end(), phase3_history.begin(), phase3_history.end());

  result.record.training_seconds = total.seconds();
  result.record.validation_accuracy = validation_accuracy(result.pipeline, split.validation);
  result.record.params = json{{"phase1", cfg.phase1.to_json()},
                              {"phase2", cfg.phase2.to_json()},
                              {"phase3", cfg.phase3.to_json()},
                              {"direction", to_string(direction)}};
  return result;
}

// ---------------------------------------------------------------------------
// Multimodal fusion.

inline TrainResult train_fusion(const SplitTensors& split, Method level, const TrainConfig& cfg,
                                const PipelineSpecs& specs) {
  cfg.validate();
  if (level != Method::fusion_data && level != Method::fusion_feature &&
      level != Method::fusion_decision) {
    throw Error("train_fusion: unknown fusion level");
  }
  if (split.train.labels.size() == 0) throw Error("train_fusion: empty training split");
  Stopwatch total;

  TrainResult result;
  result.pipeline.method = level;

  if (level == Method::fusion_data) {
    // two-channel stacked input through a single network
    const nn::ArchitectureSpec& enc = specs.at("encoder");
    if (enc.input_shape.c != 2) throw Error("fusion-data: encoder input must have 2 channels");
    result.pipeline.models.emplace("encoder", nn::build_model(enc, derive_seed(cfg.seed, 31)));
    result.pipeline.models.emplace(
        "classifier", nn::build_model(specs.at("classifier"), derive_seed(cfg.seed, 32)));
    nn::Model& encoder = result.pipeline.part("encoder");
    nn::Model& classifier = result.pipeline.part("classifier");
    Mat stacked(split.train.visual.rows(), split.train.visual.cols() + split.train.audio.cols());
    stacked << split.train.visual, split.train.audio;
    nn::AdamConfig ac{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay};
    nn::Adam oe(encoder, ac), oc(classifier, ac);
    result.log.loss = detail::fit_bce({{&encoder, &classifier}}, {&oe, &oc},
                                      {&encoder, &classifier}, stacked, split.train.labels, cfg,
                                      "fusion-data");
  } else {
    if (level == Method::fusion_decision) {
      // direct prediction from the concatenated representations
      std::size_t dense_count = 0;
      for (const auto& l : specs.at("classifier").layers) {
        if (std::holds_alternative<nn::DenseSpec>(l.op)) ++dense_count;
      }
      if (dense_count != 1) {
        throw Error("fusion-decision: classifier must be a single linear layer");
      }
    }
    result.pipeline.models.emplace(
        "visual_encoder", nn::build_model(specs.at("visual_encoder"), derive_seed(cfg.seed, 33)));
    result.pipeline.models.emplace(
        "audio_encoder", nn::build_model(specs.at("audio_encoder"), derive_seed(cfg.seed, 34)));
    result.pipeline.models.emplace(
        "classifier", nn::build_model(specs.at("classifier"), derive_seed(cfg.seed, 35)));
    nn::Model& ev = result.pipeline.part("visual_encoder");
    nn::Model& ea = result.pipeline.part("audio_encoder");
    nn::Model& clf = result.pipeline.part("classifier");
    const auto dv = static_cast<Eigen::Index>(ev.output_shape().flat);
    const auto da = static_cast<Eigen::Index>(ea.output_shape().flat);
    if (clf.input_dim() != static_cast<std::size_t>(dv + da)) {
      throw Error("fusion: classifier input dim must equal the concatenated encoder dims");
    }

    nn::AdamConfig ac{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay};
    nn::Adam oev(ev, ac), oea(ea, ac), oc(clf, ac);
    Rng batch_rng(derive_seed(cfg.seed, 0xba7c));
    const auto n = static_cast<std::size_t>(split.train.labels.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      double epoch_loss = 0.0;
      const auto batches = detail::make_batches(n, cfg.batch_size, batch_rng);
      for (const auto& idx : batches) {
        const Mat xv = detail::gather_rows(split.train.visual, idx);
        const Mat xa = detail::gather_rows(split.train.audio, idx);
        const IVec yb = detail::gather_labels(split.train.labels, idx);
        ev.train();
        ea.train();
        clf.train();
        ev.zero_grad();
        ea.zero_grad();
        clf.zero_grad();
        const Mat fv = ev.forward(xv);
        const Mat fa = ea.forward(xa);
        Mat cat(fv.rows(), dv + da);
        cat << fv, fa;
        const Mat probs = clf.forward(cat);
        auto bce = losses::weighted_bce_grad(probs.col(0), yb, cfg.ccsa.class_weights);
        detail::check_finite(bce.value, "fusion", epoch);
        const Mat dcat = clf.backward(Mat(bce.grad));
        ev.backward(dcat.leftCols(dv));
        ea.backward(dcat.rightCols(da));
        oev.step(ev);
        oea.step(ea);
        oc.step(clf);
        epoch_loss += bce.value * static_cast<double>(idx.size());
      }
      result.log.loss.push_back(epoch_loss / static_cast<double>(n));
    }
  }

  result.record.training_seconds = total.seconds();
  result.record.validation_accuracy = validation_accuracy(result.pipeline, split.validation);
  result.record.params = cfg.to_json();
  return result;
}

// ---------------------------------------------------------------------------
// Hyperparameter search

struct SearchSpace {
  struct Range {
    double lo = 0.0, hi = 1.0;
    bool log_scale = false;
  };
  struct IntRange {
    long lo = 0, hi = 1;
  };

  Range learning_rate{1e-6, 1e-3, true};
  Range weight_decay{1e-7, 1e-3, true};
  IntRange conv_layers{3, 5};
  IntRange filters{16, 48};   // per convolution layer
  IntRange kernel{2, 4};      // per convolution layer
  IntRange dense_layers{1, 3};
  IntRange neurons{32, 360};  // per hidden dense layer
  Range dropout{0.01, 0.1, false};

  json to_json() const {
    const auto range = [](const Range& r) {
      return json{{"lo", r.lo}, {"hi", r.hi}, {"log", r.log_scale}};
    };
    const auto irange = [](const IntRange& r) { return json{{"lo", r.lo}, {"hi", r.hi}}; };
    return json{{"learning_rate", range(learning_rate)}, {"weight_decay", range(weight_decay)},
                {"conv_layers", irange(conv_layers)},    {"filters", irange(filters)},
                {"kernel", irange(kernel)},              {"dense_layers", irange(dense_layers)},
                {"neurons", irange(neurons)},            {"dropout", range(dropout)}};
  }

  static SearchSpace from_json(const json& j) {
    SearchSpace s;
    const auto range = [&](const char* k, Range& r) {
      if (!j.contains(k)) return;
      r.lo = j[k].value("lo", r.lo);
      r.hi = j[k].value("hi", r.hi);
      r.log_scale = j[k].value("log", r.log_scale);
    };
    const auto irange = [&](const char* k, IntRange& r) {
      if (!j.contains(k)) return;
      r.lo = j[k].value("lo", r.lo);
      r.hi = j[k].value("hi", r.hi);
    };
    range("learning_rate", s.learning_rate);
    range("weight_decay", s.weight_decay);
    irange("conv_layers", s.conv_layers);
    irange("filters", s.filters);
    irange("kernel", s.kernel);
    irange("dense_layers", s.dense_layers);
    irange("neurons", s.neurons);
    range("dropout", s.dropout);
    return s;
  }
};

// One searchable dimension, continuous or integer, optionally log scaled.
struct ParamDim {
  std::string name;
  double lo = 0.0, hi = 1.0;
  bool log_scale = false;
  bool integer = false;
};

struct Observation {
  std::vector<double> values;  // one per dimension, in natural units
  double score = 0.0;
};

// suggest() proposes the next point given the history so far.
class SearchStrategy {
 public:
  virtual ~SearchStrategy() = default;
  virtual std::vector<double> suggest(Rng& rng, const std::vector<ParamDim>& dims,
                                      const std::vector<Observation>& history) = 0;
};

namespace detail {

inline double to_unit(const ParamDim& d, double v) {
  if (d.log_scale) return (std::log(v) - std::log(d.lo)) / (std::log(d.hi) - std::log(d.lo));
  return (v - d.lo) / (d.hi - d.lo);
}

inline double from_unit(const ParamDim& d, double u) {
  u = std::clamp(u, 0.0, 1.0);
  double v = d.log_scale ? std::exp(std::log(d.lo) + u * (std::log(d.hi) - std::log(d.lo)))
                         : d.lo + u * (d.hi - d.lo);
  if (d.integer) v = std::clamp(std::round(v), d.lo, d.hi);
  return v;
}

}  // namespace detail

class RandomStrategy final : public SearchStrategy {
 public:
  std::vector<double> suggest(Rng& rng, const std::vector<ParamDim>& dims,
                              const std::vector<Observation>&) override {
    std::vector<double> out;
    out.reserve(dims.size());
    for (const auto& d : dims) out.push_back(detail::from_unit(d, rng.uniform()));
    return out;
  }
};

// Tree-of-Parzen-style sequential sampler: after a random startup phase the
// history is split into good/bad halves by score quantile, per-dimension
// kernel densities are built over each, and candidates are drawn from the
// good density and ranked by the density ratio.
class TpeStrategy final : public SearchStrategy {
 public:
  explicit TpeStrategy(std::size_t startup_trials = 10, std::size_t candidates = 24,
                       double good_fraction = 0.25)
      : startup_(startup_trials), candidates_(candidates), good_fraction_(good_fraction) {}

  std::vector<double> suggest(Rng& rng, const std::vector<ParamDim>& dims,
                              const std::vector<Observation>& history) override {
    if (history.size() < startup_) return fallback_.suggest(rng, dims, history);

    std::vector<std::size_t> order(history.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return history[a].score > history[b].score;
    });
    const std::size_t n_good = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(good_fraction_ * static_cast<double>(history.size()))));

    std::vector<double> out(dims.size());
    for (std::size_t d = 0; d < dims.size(); ++d) {
      std::vector<double> good, bad;
      for (std::size_t i = 0; i < history.size(); ++i) {
        const double u = detail::to_unit(dims[d], history[order[i]].values[d]);
        (i < n_good ? good : bad).push_back(u);
      }
      const double bw_good = bandwidth(good.size());
      const double bw_bad = bandwidth(bad.size());
      double best_u = 0.5, best_ratio = -1.0;
      for (std::size_t c = 0; c < candidates_; ++c) {
        // draw from the good mixture (with a uniform prior component)
        double u = 0.0;
        if (rng.index(good.size() + 1) == good.size()) {
          u = rng.uniform();
        } else {
          u = std::clamp(good[rng.index(good.size())] + bw_good * rng.normal(), 0.0, 1.0);
        }
        const double ratio = density(good, bw_good, u) / std::max(1e-12, density(bad, bw_bad, u));
        if (ratio > best_ratio) {
          best_ratio = ratio;
          best_u = u;
        }
      }
      out[d] = detail::from_unit(dims[d], best_u);
    }
    return out;
  }

 private:
  static double bandwidth(std::size_t n) {
    return std::max(0.05, 1.0 / std::pow(static_cast<double>(n) + 1.0, 0.6));
  }

  static double density(const std::vector<double>& pts, double bw, double u) {
    // mixture of the points plus one uniform prior component
    double acc = 1.0;  // uniform on [0,1]
    const double inv = 1.0 / bw;
    for (double p : pts) {
      const double t = (u - p) * inv;
      acc += std::exp(-0.5 * t * t) * inv / std::sqrt(2.0 * M_PI);
    }
    return acc / static_cast<double>(pts.size() + 1);
  }

  std::size_t startup_, candidates_;
  double good_fraction_;
  RandomStrategy fallback_;
};

struct TrialOutcome {
  double score = 0.0;  // validation accuracy
  double seconds = 0.0;
  std::string checkpoint_path;
};

using Objective = std::function<TrialOutcome(const std::vector<double>& values, std::size_t trial)>;

// Sequential suggest -> evaluate -> observe loop maximizing the objective.
// A throwing trial is recorded with score 0 and the search continues.
inline std::vector<TrialRecord> hyperparameter_search(const std::vector<ParamDim>& dims,
                                                      const Objective& objective,
                                                      std::size_t n_trials, std::uint64_t seed,
                                                      SearchStrategy* strategy = nullptr) {
  if (dims.empty()) throw Error("hyperparameter_search: empty search space");
  TpeStrategy default_strategy;
  SearchStrategy* strat = strategy ? strategy : &default_strategy;
  Rng rng(derive_seed(seed, 0x7350));

  std::vector<TrialRecord> records;
  std::vector<Observation> history;
  for (std::size_t t = 0; t < n_trials; ++t) {
    const std::vector<double> values = strat->suggest(rng, dims, history);
    TrialRecord rec;
    rec.trial_id = t;
    for (std::size_t d = 0; d < dims.size(); ++d) rec.params[dims[d].name] = values[d];
    try {
      const TrialOutcome outcome = objective(values, t);
      rec.validation_accuracy = outcome.score;
      rec.training_seconds = outcome.seconds;
      rec.checkpoint_path = outcome.checkpoint_path;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "trial %zu failed: %s\n", t, e.what());
      rec.validation_accuracy = 0.0;
    }
    history.push_back({values, rec.validation_accuracy});
    records.push_back(std::move(rec));
  }
  return records;
}

// The searched dimensions. Per-layer integers get one slot per possible
// layer; slots beyond the sampled layer count are ignored by the builder.
inline std::vector<ParamDim> search_dims(const SearchSpace& s) {
  std::vector<ParamDim> dims;
  dims.push_back({"learning_rate", s.learning_rate.lo, s.learning_rate.hi,
                  s.learning_rate.log_scale, false});
  dims.push_back({"weight_decay", s.weight_decay.lo, s.weight_decay.hi,
                  s.weight_decay.log_scale, false});
  dims.push_back({"conv_layers", static_cast<double>(s.conv_layers.lo),
                  static_cast<double>(s.conv_layers.hi), false, true});
  for (long i = 0; i < s.conv_layers.hi; ++i) {
    dims.push_back({"filters_" + std::to_string(i + 1), static_cast<double>(s.filters.lo),
                    static_cast<double>(s.filters.hi), false, true});
    dims.push_back({"kernel_" + std::to_string(i + 1), static_cast<double>(s.kernel.lo),
                    static_cast<double>(s.kernel.hi), false, true});
  }
  dims.push_back({"dense_layers", static_cast<double>(s.dense_layers.lo),
                  static_cast<double>(s.dense_layers.hi), false, true});
  for (long i = 0; i + 1 < s.dense_layers.hi; ++i) {
    dims.push_back({"neurons_" + std::to_string(i + 1), static_cast<double>(s.neurons.lo),
                    static_cast<double>(s.neurons.hi), false, true});
  }
  dims.push_back({"dropout", s.dropout.lo, s.dropout.hi, s.dropout.log_scale, false});
  return dims;
}

// Encoder/classifier pair from one sampled point. Convolution modules keep
// the spatial size ('same' padding, stride 1); halving pools sit on the first
// module and the final two so three halvings land regardless of depth.
inline PipelineSpecs specs_from_search_point(const std::vector<ParamDim>& dims,
                                             const std::vector<double>& values,
                                             nn::Shape3 input_shape) {
  const auto get = [&](const std::string& name) {
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (dims[i].name == name) return values[i];
    }
    throw Error("search point: missing dimension " + name);
  };

  const auto n_conv = static_cast<std::size_t>(get("conv_layers"));
  const auto n_dense = static_cast<std::size_t>(get("dense_layers"));
  const double dropout = get("dropout");

  nn::ArchitectureSpec encoder;
  encoder.input_shape = input_shape;
  for (std::size_t i = 0; i < n_conv; ++i) {
    const auto filters = static_cast<std::size_t>(get("filters_" + std::to_string(i + 1)));
    const auto kernel = static_cast<std::size_t>(get("kernel_" + std::to_string(i + 1)));
    encoder.layers.push_back({nn::ConvSpec{filters, kernel, 1, 0, true}, ""});
    encoder.layers.push_back({nn::ActSpec{"relu"}, ""});
    const bool halve = (i == 0) || (i + 2 >= n_conv);
    encoder.layers.push_back({nn::PoolSpec{halve ? 2u : 1u, halve ? 2u : 1u}, ""});
  }
  encoder.layers.push_back({nn::FlattenSpec{}, "flatten"});
  encoder.chain();

  nn::ArchitectureSpec classifier;
  classifier.input_shape = {1, 1, encoder.output_shape().flat};
  classifier.layers.push_back({nn::FlattenSpec{}, ""});
  for (std::size_t i = 0; i + 1 < n_dense; ++i) {
    const auto neurons = static_cast<std::size_t>(get("neurons_" + std::to_string(i + 1)));
    classifier.layers.push_back({nn::DenseSpec{neurons}, ""});
    classifier.layers.push_back({nn::ActSpec{"relu"}, ""});
    classifier.layers.push_back({nn::DropoutSpec{dropout}, ""});
  }
  classifier.layers.push_back({nn::DenseSpec{1}, ""});
  classifier.layers.push_back({nn::ActSpec{"sigmoid"}, ""});
  classifier.chain();

  PipelineSpecs specs;
  specs.parts.emplace("encoder", std::move(encoder));
  specs.parts.emplace("classifier", std::move(classifier));
  return specs;
}

// ---------------------------------------------------------------------------
// Top-k selection: sort by validation accuracy (ties -> lower trial id),
// retrain each winner with a fresh seed, and evaluate on the test set.

using RetrainFn =
    std::function<std::pair<Pipeline, eval::MetricsReport>(const TrialRecord&, std::uint64_t)>;

struct RetrainedModel {
  TrialRecord trial;
  eval::MetricsReport test_report;
};

inline std::vector<RetrainedModel> select_top_k_and_retrain(const std::vector<TrialRecord>& trials,
                                                            std::size_t k,
                                                            const RetrainFn& retrain,
                                                            std::uint64_t seed) {
  if (trials.size() < k) {
    throw Error("select_top_k_and_retrain: " + std::to_string(trials.size()) +
                " trials < k = " + std::to_string(k));
  }
  std::vector<std::size_t> order(trials.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (trials[a].validation_accuracy != trials[b].validation_accuracy) {
      return trials[a].validation_accuracy > trials[b].validation_accuracy;
    }
    return trials[a].trial_id < trials[b].trial_id;
  });

  std::vector<RetrainedModel> out;
  for (std::size_t i = 0; i < k; ++i) {
    const TrialRecord& trial = trials[order[i]];
    const std::uint64_t fresh_seed = derive_seed(seed, 0x2e72a1 + trial.trial_id);
    auto [pipeline, report] = retrain(trial, fresh_seed);
    (void)pipeline;
    out.push_back({trial, report});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation plumbing shared by the CLI and the sweeps

inline eval::MetricsReport evaluate_pipeline(Pipeline& p, const data::TensorSplit& test,
                                             const data::TensorSplit& validation,
                                             double training_seconds = 0.0) {
  const Vec scores = p.predict(test.visual, test.audio);
  eval::MetricsReport report = eval::evaluate_scores(scores, test.labels, to_string(p.method));
  report.training_runtime_s = training_seconds;
  report.prediction_runtime_s = eval::measure_runtime(
      [&] { p.predict(validation.visual, validation.audio); }, validation.labels.size() == 0);
  return report;
}

// ---------------------------------------------------------------------------
// Pipeline checkpoints: one file holding every model part.

namespace detail {
constexpr char kPipeMagic[] = "CMKT.PIPE.1\n";
}

inline void save_pipeline(const std::string& path, const Pipeline& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open pipeline checkpoint for writing: " + path);
  json manifest;
  manifest["method"] = to_string(p.method);
  manifest["direction"] = to_string(p.direction);
  manifest["substrate_version"] = nn::kSubstrateVersion;
  json parts = json::array();
  std::vector<std::pair<Vec, Vec>> blobs;
  for (const auto& [role, model] : p.models) {
    Vec params = model.flat_params();
    Vec buffers = model.flat_buffers();
    parts.push_back({{"role", role},
                     {"spec", model.spec().to_json()},
                     {"seed", model.seed()},
                     {"param_count", params.size()},
                     {"buffer_count", buffers.size()}});
    blobs.emplace_back(std::move(params), std::move(buffers));
  }
  manifest["parts"] = parts;
  const std::string m = manifest.dump();
  os.write(detail::kPipeMagic, sizeof(detail::kPipeMagic) - 1);
  nn::detail::write_u64(os, m.size());
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& [params, buffers] : blobs) {
    nn::detail::write_vec(os, params);
    nn::detail::write_vec(os, buffers);
  }
  if (!os) throw Error("pipeline checkpoint write failed: " + path);
}

inline Pipeline load_pipeline(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open pipeline checkpoint: " + path);
  char magic[sizeof(detail::kPipeMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kPipeMagic, sizeof(magic)) != 0) {
    throw Error("not a pipeline checkpoint: " + path);
  }
  const std::uint64_t mlen = nn::detail::read_u64(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  const json manifest = json::parse(mstr);

  Pipeline p;
  p.method = method_from_string(manifest.at("method").get<std::string>());
  p.direction = direction_from_string(manifest.at("direction").get<std::string>());
  for (const auto& part : manifest.at("parts")) {
    nn::Model model(nn::ArchitectureSpec::from_json(part.at("spec")),
                    part.at("seed").get<std::uint64_t>());
    model.set_flat_params(nn::detail::read_vec(is, part.at("param_count").get<std::size_t>()));
    model.set_flat_buffers(nn::detail::read_vec(is, part.at("buffer_count").get<std::size_t>()));
    p.models.emplace(part.at("role").get<std::string>(), std::move(model));
  }
  if (!is) throw Error("truncated pipeline checkpoint: " + path);
  return p;
}

}  // namespace cmkt::training
