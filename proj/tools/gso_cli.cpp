// gso: gradient-subspace OOD detection pipeline driver.
//
// Subcommands: synth, train, fit-subspace, embed, fit-detector, score, eval,
// spectrum. Flags override an optional JSON config file, which overrides
// built-in defaults. Exit codes: 0 success, 1 usage/config error, 2 data or
// format error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gso/detectors.hpp"
#include "gso/evalharness.hpp"
#include "gso/gradembed.hpp"
#include "gso/io.hpp"
#include "gso/micronet.hpp"
#include "gso/subspace.hpp"

namespace {

using gso::Index;
using gso::Matrix;
using gso::Vector;
using json = nlohmann::ordered_json;

// JSON reader for CLI11's config machinery. The file is an object; top-level
// scalar keys map to global flags, and per-subcommand sections are objects
// keyed by the subcommand name. Command-line flags take precedence, and keys
// that match no flag are errors.
class JsonConfig : public CLI::Config {
public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override {
    return "{}\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json root;
    try {
      root = json::parse(input);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::FileError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!root.is_object()) {
      throw CLI::FileError("config file root must be a JSON object");
    }
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : root.items()) {
      if (value.is_object()) {
        for (const auto& [name, inner] : value.items()) {
          items.push_back(make_item({key}, name, inner));
        }
      } else {
        items.push_back(make_item({}, key, value));
      }
    }
    return items;
  }

private:
  static CLI::ConfigItem make_item(std::vector<std::string> parents,
                                   const std::string& name, const json& value) {
    CLI::ConfigItem item;
    item.parents = std::move(parents);
    item.name = name;
    if (value.is_array()) {
      for (const auto& entry : value) item.inputs.push_back(scalar_to_string(entry));
    } else {
      item.inputs.push_back(scalar_to_string(value));
    }
    return item;
  }

  static std::string scalar_to_string(const json& value) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_boolean()) return value.get<bool>() ? "true" : "false";
    return value.dump();
  }
};

struct GlobalFlags {
  int threads = 1;
  bool json_logs = false;
};

void log_stage(const GlobalFlags& g, const std::string& command,
               const std::string& stage, const json& detail = json::object()) {
  if (g.json_logs) {
    json record;
    record["tool"] = "gso";
    record["command"] = command;
    record["stage"] = stage;
    if (!detail.empty()) record["detail"] = detail;
    std::cerr << record.dump() << '\n';
  } else {
    std::cerr << "[gso " << command << "] " << stage;
    if (!detail.empty()) std::cerr << ' ' << detail.dump();
    std::cerr << '\n';
  }
}

// Every artifact gets a sidecar with the resolved configuration and tool
// version, so a run can be reproduced from its outputs alone.
void write_sidecar(const std::string& artifact_path, const std::string& command,
                   const json& resolved, const json& extra = json::object()) {
  json side;
  side["tool_version"] = gso::kToolVersion;
  side["command"] = command;
  side["config"] = resolved;
  for (const auto& [key, value] : extra.items()) side[key] = value;
  gso::write_text_file(artifact_path + ".meta.json", side.dump(2) + "\n");
}

std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

Index infer_classes(const std::vector<int>& labels) {
  int max_label = -1;
  for (int y : labels) max_label = std::max(max_label, y);
  if (max_label < 0) throw gso::UsageError("dataset labels are empty");
  return static_cast<Index>(max_label) + 1;
}

const std::vector<int>& require_labels(const gso::SampleBatch& batch,
                                       const std::string& path) {
  if (!batch.labels) throw gso::UsageError(path + ": dataset has no labels");
  return *batch.labels;
}

// ---------------------------------------------------------------------------
// synth

struct SynthFlags {
  std::string out_prefix;
  std::uint64_t seed = 0;
  Index dim = 8;
  Index classes = 4;
  Index train_per_class = 500;
  Index test_per_class = 125;
  double sigma = 1.0;
  double spread = 6.0;
  std::vector<double> ood_distances = {12.0};
  Index ood_count = 500;
};

json synth_config_json(const SynthFlags& f) {
  json j;
  j["out-prefix"] = f.out_prefix;
  j["seed"] = f.seed;
  j["dim"] = f.dim;
  j["classes"] = f.classes;
  j["train-per-class"] = f.train_per_class;
  j["test-per-class"] = f.test_per_class;
  j["sigma"] = f.sigma;
  j["spread"] = f.spread;
  j["ood-distance"] = f.ood_distances;
  j["ood-count"] = f.ood_count;
  return j;
}

void cmd_synth(const GlobalFlags& g, const SynthFlags& f) {
  if (f.dim < 1) throw gso::UsageError("dim must be >= 1");
  if (f.classes < 1) throw gso::UsageError("classes must be >= 1");

  gso::SynthSpec spec;
  spec.seed = f.seed;
  for (Index c = 0; c < f.classes; ++c) {
    gso::GaussianComponent comp;
    comp.mean = Vector::Zero(f.dim);
    // Axis-aligned class means, alternating sign once the axes run out.
    comp.mean[c % f.dim] = (c / f.dim) % 2 == 0 ? f.spread : -f.spread;
    comp.cov_scale = f.sigma;
    comp.count = f.train_per_class;
    comp.test_count = f.test_per_class;
    comp.label = static_cast<int>(c);
    spec.id_components.push_back(std::move(comp));
  }
  for (std::size_t s = 0; s < f.ood_distances.size(); ++s) {
    gso::GaussianComponent comp;
    comp.mean = Vector::Constant(f.dim, 1.0 / std::sqrt(static_cast<double>(f.dim)));
    if (s % 2 == 1) comp.mean = -comp.mean;  // alternate the diagonal direction
    comp.mean *= f.ood_distances[s];
    comp.cov_scale = f.sigma;
    comp.count = f.ood_count;
    spec.ood_sets.push_back({"ood" + std::to_string(s + 1), {comp}});
  }

  log_stage(g, "synth", "generate",
            {{"seed", f.seed}, {"classes", f.classes}, {"dim", f.dim}});
  gso::SynthData data = gso::generate_synth(spec);

  const json resolved = synth_config_json(f);
  auto emit = [&](const gso::SampleBatch& batch, const std::string& suffix) {
    const std::string path = f.out_prefix + "-" + suffix + ".gso";
    gso::save_dataset(batch, path);
    write_sidecar(path, "synth", resolved, {{"stream", suffix}});
    log_stage(g, "synth", "write-output", {{"path", path}, {"n", batch.size()}});
  };
  emit(data.train, "train");
  emit(data.id_test, "id-test");
  for (const auto& [name, batch] : data.ood_sets) emit(batch, name);
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string data_path;
  std::string out_path;
  std::vector<Index> hidden = {16, 16};
  bool affine_norm = false;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  Index epochs = 50;
  Index batch_size = 32;
  std::uint64_t seed = 0;
  double label_smoothing = 0.0;
};

json train_config_json(const TrainFlags& f) {
  json j;
  j["data"] = f.data_path;
  j["out"] = f.out_path;
  j["hidden"] = f.hidden;
  j["affine-norm"] = f.affine_norm;
  j["lr"] = f.lr;
  j["momentum"] = f.momentum;
  j["weight-decay"] = f.weight_decay;
  j["epochs"] = f.epochs;
  j["batch-size"] = f.batch_size;
  j["seed"] = f.seed;
  j["label-smoothing"] = f.label_smoothing;
  return j;
}

void cmd_train(const GlobalFlags& g, const TrainFlags& f) {
  log_stage(g, "train", "load-inputs", {{"data", f.data_path}});
  gso::SampleBatch data = gso::load_dataset(f.data_path);
  const std::vector<int>& labels = require_labels(data, f.data_path);
  const Index classes = infer_classes(labels);
  data.validate(static_cast<int>(classes));

  gso::ModelSpec spec;
  spec.layer_dims.push_back(data.dim());
  for (Index h : f.hidden) spec.layer_dims.push_back(h);
  spec.layer_dims.push_back(classes);
  spec.has_affine_norm_per_hidden = f.affine_norm;
  spec.validate();

  gso::TrainConfig config;
  config.lr = f.lr;
  config.momentum = f.momentum;
  config.weight_decay = f.weight_decay;
  config.epochs = f.epochs;
  config.batch_size = f.batch_size;
  config.seed = f.seed;
  config.label_smoothing = f.label_smoothing;

  log_stage(g, "train", "train",
            {{"epochs", f.epochs}, {"classes", classes}, {"params", spec.param_count()}});
  gso::TrainResult result = gso::train_classifier(spec, data, config);
  log_stage(g, "train", "trained", {{"train_accuracy", result.train_accuracy}});

  const json resolved = train_config_json(f);
  std::map<std::string, std::string> metadata;
  metadata["tool_version"] = gso::kToolVersion;
  metadata["train_accuracy"] = std::to_string(result.train_accuracy);
  metadata["config"] = resolved.dump();  // single line, safe in the manifest
  gso::save_model(spec, result.params, metadata, f.out_path);
  write_sidecar(f.out_path, "train", resolved,
                {{"train_accuracy", result.train_accuracy}});
  log_stage(g, "train", "write-output", {{"path", f.out_path}});
}

// ---------------------------------------------------------------------------
// fit-subspace

struct SubspaceFlags {
  std::string model_path;
  std::string data_path;
  std::string out_path;
  std::string kind = "pca";
  Index K = 16;
  Index iters = 30;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  Index chunk_size = 256;
};

json subspace_config_json(const SubspaceFlags& f) {
  json j;
  j["model"] = f.model_path;
  j["data"] = f.data_path;
  j["out"] = f.out_path;
  j["kind"] = f.kind;
  j["k"] = f.K;
  j["iters"] = f.iters;
  j["tol"] = f.tol;
  j["seed"] = f.seed;
  j["chunk-size"] = f.chunk_size;
  return j;
}

void cmd_fit_subspace(const GlobalFlags& g, const SubspaceFlags& f) {
  log_stage(g, "fit-subspace", "load-inputs",
            {{"model", f.model_path}, {"data", f.data_path}});
  gso::LoadedModel model = gso::load_model(f.model_path);
  gso::SampleBatch data = gso::load_dataset(f.data_path);
  if (data.dim() != model.spec.input_dim()) {
    throw gso::UsageError(f.data_path + ": dataset dimension does not match model");
  }

  gso::Subspace sub;
  if (f.kind == "pca") {
    gso::PowerIterConfig config;
    config.iters = f.iters;
    config.tol = f.tol;
    config.seed = f.seed;
    config.chunk_size = f.chunk_size;
    log_stage(g, "fit-subspace", "power-iteration",
              {{"k", f.K}, {"iters", f.iters}});
    sub = gso::extract_pca_subspace(model.spec, model.params, data, f.K, config);
    log_stage(g, "fit-subspace", "converged",
              {{"converged", sub.converged}});
  } else if (f.kind == "class-mean") {
    const std::vector<int>& labels = require_labels(data, f.data_path);
    const Index classes = infer_classes(labels);
    log_stage(g, "fit-subspace", "class-means", {{"classes", classes}});
    gso::NormStats stats = gso::fit_norm_stats(model.spec, model.params, data,
                                               1e-12, f.chunk_size);
    Matrix raw = gso::embed_raw_batch(model.spec, model.params, data);
    Matrix normalized = gso::normalize_rows(raw, stats);
    sub = gso::extract_classmean_subspace(normalized, labels, classes, stats);
  } else {
    throw gso::UsageError("kind must be 'pca' or 'class-mean', got " + f.kind);
  }

  gso::save_subspace(sub, f.out_path);
  write_sidecar(f.out_path, "fit-subspace", subspace_config_json(f),
                {{"reduced_dim", sub.reduced_dim()}, {"converged", sub.converged}});
  log_stage(g, "fit-subspace", "write-output", {{"path", f.out_path}});
}

// ---------------------------------------------------------------------------
// embed

struct EmbedFlags {
  std::string model_path;
  std::string subspace_path;
  std::string data_path;
  std::string out_path;
};

json embed_config_json(const EmbedFlags& f) {
  json j;
  j["model"] = f.model_path;
  j["subspace"] = f.subspace_path;
  j["data"] = f.data_path;
  j["out"] = f.out_path;
  return j;
}

Matrix embed_batch(const gso::LoadedModel& model, const gso::Subspace& sub,
                   const gso::SampleBatch& data, int threads) {
  Matrix embedded(data.size(), sub.reduced_dim());
  gso::parallel_for(data.size(), threads, [&](Index i) {
    Vector raw = gso::embed_raw(model.spec, model.params,
                                data.inputs.row(i).transpose());
    embedded.row(i) =
        gso::project(sub, gso::normalize(raw, sub.norm_stats)).transpose();
  });
  return embedded;
}

void cmd_embed(const GlobalFlags& g, const EmbedFlags& f) {
  log_stage(g, "embed", "load-inputs",
            {{"model", f.model_path}, {"subspace", f.subspace_path},
             {"data", f.data_path}});
  gso::LoadedModel model = gso::load_model(f.model_path);
  gso::Subspace sub = gso::load_subspace(f.subspace_path);
  gso::SampleBatch data = gso::load_dataset(f.data_path);
  if (data.dim() != model.spec.input_dim()) {
    throw gso::UsageError(f.data_path + ": dataset dimension does not match model");
  }
  if (sub.basis.rows() != model.spec.param_count()) {
    throw gso::UsageError(f.subspace_path + ": subspace does not match model");
  }

  log_stage(g, "embed", "project", {{"n", data.size()}, {"k", sub.reduced_dim()}});
  gso::SampleBatch out;
  out.inputs = embed_batch(model, sub, data, g.threads);
  out.labels = data.labels;  // carried through for detector fitting
  gso::save_dataset(out, f.out_path);
  write_sidecar(f.out_path, "embed", embed_config_json(f));
  log_stage(g, "embed", "write-output", {{"path", f.out_path}});
}

// ---------------------------------------------------------------------------
// detector flags, shared between fit-detector and eval

struct DetectorFlags {
  std::string detector = "knn";
  double head_lr = 0.01;
  double head_momentum = 0.9;
  Index head_batch_size = 512;
  Index head_epochs = 3;
  std::uint64_t head_seed = 0;
  double bn_momentum = 0.1;
  Index clip_d = 50;
  double react_p = 90.0;
  double bats_lambda = 0.1;
  double temperature = 1.0;
  double ridge_scale = 1e-6;
  bool maha_global = false;
  Index knn_k = 10;
};

void add_detector_flags(CLI::App* app, DetectorFlags& f) {
  app->add_option("--detector", f.detector,
                  "Detector kind: msp, energy, react, bats, maha, knn")
      ->capture_default_str();
  app->add_option("--head-lr", f.head_lr, "Head SGD learning rate")
      ->capture_default_str();
  app->add_option("--head-momentum", f.head_momentum, "Head SGD momentum")
      ->capture_default_str();
  app->add_option("--head-batch-size", f.head_batch_size, "Head SGD batch size")
      ->capture_default_str();
  app->add_option("--head-epochs", f.head_epochs, "Head SGD epochs")
      ->capture_default_str();
  app->add_option("--head-seed", f.head_seed, "Head init/shuffle seed")
      ->capture_default_str();
  app->add_option("--bn-momentum", f.bn_momentum, "Head BN running-stat momentum")
      ->capture_default_str();
  app->add_option("--clip-d", f.clip_d, "Tail dimensions clipped by react/bats")
      ->capture_default_str();
  app->add_option("--react-p", f.react_p, "ReAct percentile in (0, 100]")
      ->capture_default_str();
  app->add_option("--bats-lambda", f.bats_lambda, "BATS typical-set width")
      ->capture_default_str();
  app->add_option("--temperature", f.temperature, "Energy score temperature")
      ->capture_default_str();
  app->add_option("--ridge-scale", f.ridge_scale,
                  "Mahalanobis ridge as a fraction of trace/K")
      ->capture_default_str();
  app->add_flag("--maha-global", f.maha_global,
                "Use the global covariance instead of pooled within-class");
  app->add_option("--knn-k", f.knn_k, "KNN neighbor rank")->capture_default_str();
}

gso::DetectorConfig detector_config_from(const DetectorFlags& f) {
  gso::DetectorConfig config;
  config.kind = gso::detector_kind_from_string(f.detector);
  config.head.lr = f.head_lr;
  config.head.momentum = f.head_momentum;
  config.head.batch_size = f.head_batch_size;
  config.head.epochs = f.head_epochs;
  config.head.seed = f.head_seed;
  config.head.bn_momentum = f.bn_momentum;
  config.clip.d = f.clip_d;
  config.clip.p = f.react_p;
  config.clip.lambda = f.bats_lambda;
  config.temperature = f.temperature;
  config.ridge_scale = f.ridge_scale;
  config.maha_pooled = !f.maha_global;
  config.knn_k = f.knn_k;
  return config;
}

json detector_config_json(const DetectorFlags& f) {
  json j;
  j["detector"] = f.detector;
  j["head-lr"] = f.head_lr;
  j["head-momentum"] = f.head_momentum;
  j["head-batch-size"] = f.head_batch_size;
  j["head-epochs"] = f.head_epochs;
  j["head-seed"] = f.head_seed;
  j["bn-momentum"] = f.bn_momentum;
  j["clip-d"] = f.clip_d;
  j["react-p"] = f.react_p;
  j["bats-lambda"] = f.bats_lambda;
  j["temperature"] = f.temperature;
  j["ridge-scale"] = f.ridge_scale;
  j["maha-global"] = f.maha_global;
  j["knn-k"] = f.knn_k;
  return j;
}

// ---------------------------------------------------------------------------
// fit-detector

struct FitDetectorFlags {
  std::string embeddings_path;
  std::string out_path;
  DetectorFlags detector;
};

void cmd_fit_detector(const GlobalFlags& g, const FitDetectorFlags& f) {
  log_stage(g, "fit-detector", "load-inputs", {{"embeddings", f.embeddings_path}});
  gso::SampleBatch emb = gso::load_dataset(f.embeddings_path);
  const std::vector<int>& labels = require_labels(emb, f.embeddings_path);
  const Index classes = infer_classes(labels);

  gso::DetectorConfig config = detector_config_from(f.detector);
  log_stage(g, "fit-detector", "fit",
            {{"detector", f.detector.detector}, {"classes", classes}});
  gso::DetectorModel model = gso::fit_detector(emb.inputs, labels, classes, config);
  gso::save_detector(model, f.out_path);

  json resolved = detector_config_json(f.detector);
  resolved["embeddings"] = f.embeddings_path;
  resolved["out"] = f.out_path;
  write_sidecar(f.out_path, "fit-detector", resolved,
                {{"head_accuracy", model.head_accuracy}, {"classes", classes}});
  log_stage(g, "fit-detector", "write-output", {{"path", f.out_path}});
}

// ---------------------------------------------------------------------------
// score

struct ScoreFlags {
  std::string detector_path;
  std::string embeddings_path;
  std::string out_path;
};

void cmd_score(const GlobalFlags& g, const ScoreFlags& f) {
  log_stage(g, "score", "load-inputs",
            {{"detector", f.detector_path}, {"embeddings", f.embeddings_path}});
  gso::DetectorModel model = gso::load_detector(f.detector_path);
  gso::SampleBatch emb = gso::load_dataset(f.embeddings_path);

  log_stage(g, "score", "score", {{"n", emb.size()}});
  Vector scores = gso::score_stream(model, emb.inputs, g.threads);

  gso::SampleBatch out;  // score streams reuse the dataset container, dim=1
  out.inputs = scores;
  gso::save_dataset(out, f.out_path);
  json resolved;
  resolved["detector"] = f.detector_path;
  resolved["embeddings"] = f.embeddings_path;
  resolved["out"] = f.out_path;
  write_sidecar(f.out_path, "score", resolved);
  log_stage(g, "score", "write-output", {{"path", f.out_path}});
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  std::string model_path;
  std::string subspace_path;
  std::string train_path;
  std::string id_test_path;
  std::vector<std::string> ood_paths;
  std::string out_prefix;
  DetectorFlags detector;
  double alpha = 1.0;
  bool no_ensemble = false;
  double tpr_target = 0.95;
  Index histogram_bins = 20;
  bool keep_intermediates = false;
};

json eval_config_json(const EvalFlags& f) {
  json j = detector_config_json(f.detector);
  j["model"] = f.model_path;
  j["subspace"] = f.subspace_path;
  j["train"] = f.train_path;
  j["id-test"] = f.id_test_path;
  j["ood"] = f.ood_paths;
  j["out-prefix"] = f.out_prefix;
  j["alpha"] = f.alpha;
  j["no-ensemble"] = f.no_ensemble;
  j["tpr-target"] = f.tpr_target;
  j["histogram-bins"] = f.histogram_bins;
  j["keep-intermediates"] = f.keep_intermediates;
  return j;
}

std::string sanitize_stream_name(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == '/' || c == ' ') c = '-';
  }
  return out;
}

void cmd_eval(const GlobalFlags& g, const EvalFlags& f) {
  log_stage(g, "eval", "load-inputs",
            {{"model", f.model_path}, {"subspace", f.subspace_path}});
  gso::LoadedModel model = gso::load_model(f.model_path);
  gso::Subspace sub = gso::load_subspace(f.subspace_path);
  if (sub.basis.rows() != model.spec.param_count()) {
    throw gso::UsageError(f.subspace_path + ": subspace does not match model");
  }

  gso::SynthData data;
  data.train = gso::load_dataset(f.train_path);
  require_labels(data.train, f.train_path);
  data.id_test = gso::load_dataset(f.id_test_path);
  for (const std::string& path : f.ood_paths) {
    data.ood_sets.emplace_back(stem_of(path), gso::load_dataset(path));
  }
  if (data.ood_sets.empty()) throw gso::UsageError("eval needs at least one --ood set");

  gso::PipelineConfig config;
  config.detector = detector_config_from(f.detector);
  config.alpha = f.alpha;
  config.with_ensemble = !f.no_ensemble;
  config.tpr_target = f.tpr_target;
  config.histogram_bins = f.histogram_bins;
  config.threads = g.threads;

  const json resolved = eval_config_json(f);
  log_stage(g, "eval", "pipeline", {{"detector", f.detector.detector}});
  gso::EvalReport report =
      gso::run_pipeline(model.spec, model.params, sub, data, config);
  report.config_echo = resolved.dump();

  const std::string json_path = f.out_prefix + "-report.json";
  const std::string csv_path = f.out_prefix + "-report.csv";
  gso::write_text_file(json_path, gso::report_to_json(report));
  gso::write_text_file(csv_path, gso::report_to_csv(report));
  log_stage(g, "eval", "write-output", {{"path", json_path}});
  log_stage(g, "eval", "write-output", {{"path", csv_path}});
  for (const auto& hist : report.histograms) {
    const std::string path =
        f.out_prefix + "-hist-" + sanitize_stream_name(hist.stream) + ".csv";
    gso::write_text_file(path, gso::histogram_to_csv(hist.data));
    log_stage(g, "eval", "write-output", {{"path", path}});
  }

  if (f.keep_intermediates) {
    auto persist = [&](const gso::SampleBatch& batch, const std::string& name) {
      gso::SampleBatch emb;
      emb.inputs = embed_batch(model, sub, batch, g.threads);
      emb.labels = batch.labels;
      const std::string path = f.out_prefix + "-emb-" + name + ".gso";
      gso::save_dataset(emb, path);
      write_sidecar(path, "eval", resolved, {{"stream", name}});
      log_stage(g, "eval", "write-intermediate", {{"path", path}});
    };
    persist(data.train, "train");
    persist(data.id_test, "id-test");
    for (const auto& [name, batch] : data.ood_sets) {
      persist(batch, sanitize_stream_name(name));
    }
  }
}

// ---------------------------------------------------------------------------
// spectrum

struct SpectrumFlags {
  std::string subspace_path;
  std::string out_path;
};

void cmd_spectrum(const GlobalFlags& g, const SpectrumFlags& f) {
  log_stage(g, "spectrum", "load-inputs", {{"subspace", f.subspace_path}});
  gso::Subspace sub = gso::load_subspace(f.subspace_path);
  gso::Spectrum sp = gso::spectrum(sub);

  std::ostringstream out;
  out.precision(17);
  out << "index,eigenvalue,ratio,cumulative\n";
  for (Index j = 0; j < sp.eigenvalues.size(); ++j) {
    out << j << ',' << sp.eigenvalues[j] << ',' << sp.explained_ratio[j] << ','
        << sp.cumulative_ratio[j] << '\n';
  }
  gso::write_text_file(f.out_path, out.str());
  json resolved;
  resolved["subspace"] = f.subspace_path;
  resolved["out"] = f.out_path;
  write_sidecar(f.out_path, "spectrum", resolved,
                {{"total_variance", sp.total_variance}});
  log_stage(g, "spectrum", "write-output", {{"path", f.out_path}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gso: out-of-distribution detection with low-dimensional "
               "gradient subspaces"};
  app.require_subcommand(1);
  app.set_version_flag("--version", gso::kToolVersion);
  app.set_config("--config", "", "JSON config file (flags take precedence)");
  app.config_formatter(std::make_shared<JsonConfig>());
  app.allow_config_extras(CLI::config_extras_mode::error);

  GlobalFlags global;
  app.add_option("--threads", global.threads, "Worker thread cap")
      ->capture_default_str();
  app.add_flag("--json-logs", global.json_logs,
               "Emit one JSON log record per pipeline stage");

  SynthFlags synth;
  CLI::App* synth_app =
      app.add_subcommand("synth", "Generate a seeded synthetic ID/OOD benchmark");
  synth_app->add_option("--out-prefix", synth.out_prefix, "Output path prefix")
      ->required();
  synth_app->add_option("--seed", synth.seed, "Sampling seed")->capture_default_str();
  synth_app->add_option("--dim", synth.dim, "Input dimension")->capture_default_str();
  synth_app->add_option("--classes", synth.classes, "Number of ID classes")
      ->capture_default_str();
  synth_app->add_option("--train-per-class", synth.train_per_class,
                        "Training samples per class")
      ->capture_default_str();
  synth_app->add_option("--test-per-class", synth.test_per_class,
                        "ID test samples per class")
      ->capture_default_str();
  synth_app->add_option("--sigma", synth.sigma, "Isotropic component std-dev")
      ->capture_default_str();
  synth_app->add_option("--spread", synth.spread, "Class mean distance from origin")
      ->capture_default_str();
  synth_app
      ->add_option("--ood-distance", synth.ood_distances,
                   "OOD set mean distance (repeatable, one set per value)")
      ->capture_default_str();
  synth_app->add_option("--ood-count", synth.ood_count, "Samples per OOD set")
      ->capture_default_str();
  synth_app->callback([&] { cmd_synth(global, synth); });

  TrainFlags train;
  CLI::App* train_app = app.add_subcommand("train", "Train the ReLU classifier");
  train_app->add_option("--data", train.data_path, "Labeled training dataset")
      ->required();
  train_app->add_option("--out", train.out_path, "Model artifact path")->required();
  train_app->add_option("--hidden", train.hidden, "Hidden layer widths")
      ->capture_default_str();
  train_app->add_flag("--affine-norm", train.affine_norm,
                      "Learnable per-hidden scale/shift before each ReLU");
  train_app->add_option("--lr", train.lr, "Learning rate")->capture_default_str();
  train_app->add_option("--momentum", train.momentum, "SGD momentum")
      ->capture_default_str();
  train_app->add_option("--weight-decay", train.weight_decay, "L2 penalty")
      ->capture_default_str();
  train_app->add_option("--epochs", train.epochs, "Training epochs")
      ->capture_default_str();
  train_app->add_option("--batch-size", train.batch_size, "Mini-batch size")
      ->capture_default_str();
  train_app->add_option("--seed", train.seed, "Init/shuffle seed")
      ->capture_default_str();
  train_app->add_option("--label-smoothing", train.label_smoothing,
                        "Cross-entropy label smoothing")
      ->capture_default_str();
  train_app->callback([&] { cmd_train(global, train); });

  SubspaceFlags subspace;
  CLI::App* subspace_app = app.add_subcommand(
      "fit-subspace", "Extract the principal or class-mean gradient subspace");
  subspace_app->add_option("--model", subspace.model_path, "Model artifact")
      ->required();
  subspace_app->add_option("--data", subspace.data_path, "Training dataset")
      ->required();
  subspace_app->add_option("--out", subspace.out_path, "Subspace artifact path")
      ->required();
  subspace_app->add_option("--kind", subspace.kind, "pca or class-mean")
      ->capture_default_str();
  subspace_app->add_option("--k", subspace.K, "Subspace dimension (pca)")
      ->capture_default_str();
  subspace_app->add_option("--iters", subspace.iters, "Power iteration cap")
      ->capture_default_str();
  subspace_app->add_option("--tol", subspace.tol, "Principal-angle tolerance")
      ->capture_default_str();
  subspace_app->add_option("--seed", subspace.seed, "Start-block seed")
      ->capture_default_str();
  subspace_app->add_option("--chunk-size", subspace.chunk_size,
                           "Streaming reduction chunk size")
      ->capture_default_str();
  subspace_app->callback([&] { cmd_fit_subspace(global, subspace); });

  EmbedFlags embed;
  CLI::App* embed_app =
      app.add_subcommand("embed", "Project gradient embeddings for a dataset");
  embed_app->add_option("--model", embed.model_path, "Model artifact")->required();
  embed_app->add_option("--subspace", embed.subspace_path, "Subspace artifact")
      ->required();
  embed_app->add_option("--data", embed.data_path, "Input dataset")->required();
  embed_app->add_option("--out", embed.out_path, "Embedding output path")->required();
  embed_app->callback([&] { cmd_embed(global, embed); });

  FitDetectorFlags fit_det;
  CLI::App* fit_det_app =
      app.add_subcommand("fit-detector", "Fit a detector on training embeddings");
  fit_det_app
      ->add_option("--embeddings", fit_det.embeddings_path,
                   "Labeled training embeddings")
      ->required();
  fit_det_app->add_option("--out", fit_det.out_path, "Detector artifact path")
      ->required();
  add_detector_flags(fit_det_app, fit_det.detector);
  fit_det_app->callback([&] { cmd_fit_detector(global, fit_det); });

  ScoreFlags score;
  CLI::App* score_app =
      app.add_subcommand("score", "Score an embedding stream with a detector");
  score_app->add_option("--detector", score.detector_path, "Detector artifact")
      ->required();
  score_app->add_option("--embeddings", score.embeddings_path, "Embedding file")
      ->required();
  score_app->add_option("--out", score.out_path, "Score stream output path")
      ->required();
  score_app->callback([&] { cmd_score(global, score); });

  EvalFlags eval;
  CLI::App* eval_app =
      app.add_subcommand("eval", "Run the full pipeline and emit a report");
  eval_app->add_option("--model", eval.model_path, "Model artifact")->required();
  eval_app->add_option("--subspace", eval.subspace_path, "Subspace artifact")
      ->required();
  eval_app->add_option("--train", eval.train_path, "Labeled training dataset")
      ->required();
  eval_app->add_option("--id-test", eval.id_test_path, "ID test dataset")->required();
  eval_app->add_option("--ood", eval.ood_paths, "OOD dataset (repeatable)")
      ->required();
  eval_app->add_option("--out-prefix", eval.out_prefix, "Report path prefix")
      ->required();
  add_detector_flags(eval_app, eval.detector);
  eval_app->add_option("--alpha", eval.alpha, "Ensemble weight on the gradient score")
      ->capture_default_str();
  eval_app->add_flag("--no-ensemble", eval.no_ensemble,
                     "Skip the forward and ensemble score streams");
  eval_app->add_option("--tpr-target", eval.tpr_target, "TPR used for calibration")
      ->capture_default_str();
  eval_app->add_option("--histogram-bins", eval.histogram_bins,
                       "Score histogram bin count")
      ->capture_default_str();
  eval_app->add_flag("--keep-intermediates", eval.keep_intermediates,
                     "Persist embedding files for every stream");
  eval_app->callback([&] { cmd_eval(global, eval); });

  SpectrumFlags spectrum_flags;
  CLI::App* spectrum_app =
      app.add_subcommand("spectrum", "Emit the explained-variance spectrum as CSV");
  spectrum_app->add_option("--subspace", spectrum_flags.subspace_path,
                           "PCA subspace artifact")
      ->required();
  spectrum_app->add_option("--out", spectrum_flags.out_path, "Spectrum CSV path")
      ->required();
  spectrum_app->callback([&] { cmd_spectrum(global, spectrum_flags); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "gso: " << e.what() << '\n';
    return 1;
  } catch (const gso::FormatError& e) {
    std::cerr << "gso: " << e.what() << '\n';
    return 2;
  } catch (const gso::UsageError& e) {
    std::cerr << "gso: " << e.what() << '\n';
    return 1;
  } catch (const gso::ConfigError& e) {
    std::cerr << "gso: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "gso: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
