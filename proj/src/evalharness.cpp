#include "gso/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "gso/gradembed.hpp"
#include "gso/rng.hpp"

namespace gso {

double calibrate_lambda(const Vector& id_scores, double tpr_target) {
  const Index n = id_scores.size();
  if (n < 20) throw UsageError("calibrate_lambda needs at least 20 ID scores");
  if (tpr_target <= 0.0 || tpr_target > 1.0) {
    throw UsageError("tpr_target must be in (0, 1]");
  }
  std::vector<double> sorted(id_scores.data(), id_scores.data() + n);
  std::sort(sorted.begin(), sorted.end());
  auto idx = static_cast<Index>(
      std::floor(static_cast<double>(n) * (1.0 - tpr_target)));
  if (idx >= n) idx = n - 1;
  return sorted[static_cast<std::size_t>(idx)];
}

double fpr_at_tpr(const Vector& id_scores, const Vector& ood_scores,
                  double tpr_target) {
  if (ood_scores.size() < 1) throw UsageError("fpr needs at least one OOD score");
  const double lambda = calibrate_lambda(id_scores, tpr_target);
  const Index hits = (ood_scores.array() >= lambda).count();
  return static_cast<double>(hits) / static_cast<double>(ood_scores.size());
}

double auroc(const Vector& id_scores, const Vector& ood_scores) {
  const Index n_id = id_scores.size();
  const Index n_ood = ood_scores.size();
  if (n_id < 1 || n_ood < 1) throw UsageError("auroc needs non-empty score streams");

  struct Entry {
    double score;
    bool is_id;
  };
  std::vector<Entry> all;
  all.reserve(static_cast<std::size_t>(n_id + n_ood));
  for (Index i = 0; i < n_id; ++i) all.push_back({id_scores[i], true});
  for (Index i = 0; i < n_ood; ++i) all.push_back({ood_scores[i], false});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Rank sum with average ranks over tie groups.
  double id_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (all[t].is_id) id_rank_sum += avg_rank;
    }
    i = j;
  }
  const double u = id_rank_sum -
                   static_cast<double>(n_id) * (static_cast<double>(n_id) + 1.0) / 2.0;
  return u / (static_cast<double>(n_id) * static_cast<double>(n_ood));
}

void SynthSpec::validate() const {
  if (id_components.empty()) throw UsageError("need at least one ID component");
  for (const auto& c : id_components) {
    if (c.label < 0) throw UsageError("ID components require labels");
    if (c.count < 1) throw UsageError("component counts must be >= 1");
    if (c.cov_scale <= 0.0) throw UsageError("covariance scales must be positive");
  }
  for (const auto& set : ood_sets) {
    for (const auto& c : set.components) {
      if (c.count < 1) throw UsageError("component counts must be >= 1");
      if (c.cov_scale <= 0.0) throw UsageError("covariance scales must be positive");
    }
  }
}

namespace {

void sample_component(Rng& rng, const GaussianComponent& comp, Index count,
                      Matrix& inputs, std::vector<int>* labels, Index& row) {
  for (Index i = 0; i < count; ++i) {
    for (Index d = 0; d < comp.mean.size(); ++d) {
      inputs(row, d) = comp.mean[d] + comp.cov_scale * rng.gaussian();
    }
    if (labels) labels->push_back(comp.label);
    ++row;
  }
}

}  // namespace

SynthData generate_synth(const SynthSpec& spec) {
  spec.validate();
  const Index dim = spec.id_components.front().mean.size();

  Index n_train = 0, n_test = 0;
  for (const auto& c : spec.id_components) {
    if (c.mean.size() != dim) throw UsageError("component dimension mismatch");
    n_train += c.count;
    n_test += c.test_count;
  }

  Rng rng(spec.seed);
  SynthData data;
  data.train.inputs.resize(n_train, dim);
  data.train.labels.emplace();
  data.id_test.inputs.resize(n_test, dim);
  data.id_test.labels.emplace();

  Index train_row = 0, test_row = 0;
  for (const auto& c : spec.id_components) {
    sample_component(rng, c, c.count, data.train.inputs, &*data.train.labels, train_row);
    sample_component(rng, c, c.test_count, data.id_test.inputs,
                     &*data.id_test.labels, test_row);
  }

  for (const auto& set : spec.ood_sets) {
    Index n = 0;
    for (const auto& c : set.components) {
      if (c.mean.size() != dim) throw UsageError("component dimension mismatch");
      n += c.count;
    }
    SampleBatch batch;
    batch.inputs.resize(n, dim);
    Index row = 0;
    for (const auto& c : set.components) {
      sample_component(rng, c, c.count, batch.inputs, nullptr, row);
    }
    data.ood_sets.emplace_back(set.name, std::move(batch));
  }
  return data;
}

HistogramData histogram(const Vector& values, Index bins) {
  if (values.size() < 1) throw UsageError("histogram needs values");
  if (bins < 1) throw UsageError("histogram needs at least one bin");
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  HistogramData h;
  h.edges.resize(bins + 1);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (Index b = 0; b <= bins; ++b) h.edges[b] = lo + width * static_cast<double>(b);
  h.edges[bins] = hi;
  for (Index i = 0; i < values.size(); ++i) {
    Index b = 0;
    if (width > 0.0) {
      b = static_cast<Index>((values[i] - lo) / width);
      b = std::clamp<Index>(b, 0, bins - 1);
    }
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

ClassCosineReport class_cosine_report(const Matrix& normalized_rows,
                                      const std::vector<int>& labels,
                                      Index num_classes) {
  const Index n = normalized_rows.rows();
  if (static_cast<Index>(labels.size()) != n) {
    throw UsageError("label count does not match gradient rows");
  }

  Matrix means = Matrix::Zero(num_classes, normalized_rows.cols());
  std::vector<Index> counts(static_cast<std::size_t>(num_classes), 0);
  for (Index i = 0; i < n; ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= num_classes) throw UsageError("label out of range");
    means.row(c) += normalized_rows.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Index c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw UsageError("class " + std::to_string(c) + " has no samples");
    }
    means.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }

  auto cosine = [](const Vector& a, const Vector& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
  };

  ClassCosineReport report;
  report.per_class_within = Vector::Zero(num_classes);
  double cross_sum = 0.0;
  Index cross_count = 0;
  for (Index i = 0; i < n; ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    Vector g = normalized_rows.row(i).transpose();
    report.per_class_within[c] += cosine(g, means.row(c).transpose());
    for (Index other = 0; other < num_classes; ++other) {
      if (other == c) continue;
      cross_sum += cosine(g, means.row(other).transpose());
      ++cross_count;
    }
  }
  double within_sum = report.per_class_within.sum();
  for (Index c = 0; c < num_classes; ++c) {
    report.per_class_within[c] /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  report.within_avg = within_sum / static_cast<double>(n);
  report.cross_avg = cross_count > 0 ? cross_sum / static_cast<double>(cross_count) : 0.0;
  return report;
}

void parallel_for(Index n, int threads, const std::function<void(Index)>& fn) {
  if (threads <= 1 || n < 2) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min<int>(threads, static_cast<int>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (Index i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

Vector score_stream(const DetectorModel& model, const Matrix& embeddings,
                    int threads) {
  Vector scores(embeddings.rows());
  parallel_for(embeddings.rows(), threads, [&](Index i) {
    scores[i] = model.score(embeddings.row(i).transpose());
  });
  return scores;
}

namespace {

DetectorReport make_report(const std::string& name, const Vector& id_scores,
                           const std::vector<std::pair<std::string, Vector>>& ood,
                           double tpr_target) {
  DetectorReport rep;
  rep.detector = name;
  rep.lambda_at_95tpr = calibrate_lambda(id_scores, tpr_target);
  double fpr_sum = 0.0, auc_sum = 0.0;
  for (const auto& [ds, scores] : ood) {
    ScoreStreamMetrics m;
    m.dataset = ds;
    m.fpr95 = fpr_at_tpr(id_scores, scores, tpr_target);
    m.auroc_value = auroc(id_scores, scores);
    fpr_sum += m.fpr95;
    auc_sum += m.auroc_value;
    rep.per_dataset.push_back(std::move(m));
  }
  const auto count = static_cast<double>(rep.per_dataset.size());
  rep.macro_fpr95 = count > 0 ? fpr_sum / count : 0.0;
  rep.macro_auroc = count > 0 ? auc_sum / count : 0.0;
  return rep;
}

Vector forward_energy_scores(const ModelSpec& spec, const ParamVector& params,
                             const SampleBatch& batch, int threads) {
  Matrix logits = forward(spec, params, batch);
  Vector scores(logits.rows());
  parallel_for(logits.rows(), threads, [&](Index i) {
    // Negative free energy of the classifier: higher on ID.
    scores[i] = -energy_from_logits(logits.row(i).transpose());
  });
  return scores;
}

}  // namespace

EvalReport run_pipeline(const ModelSpec& spec, const ParamVector& params,
                        const Subspace& sub, const SynthData& data,
                        const PipelineConfig& config) {
  if (!data.train.labels) throw UsageError("pipeline training data requires labels");

  auto embed = [&](const SampleBatch& batch) {
    Matrix embedded(batch.size(), sub.reduced_dim());
    parallel_for(batch.size(), config.threads, [&](Index i) {
      Vector raw = embed_raw(spec, params, batch.inputs.row(i).transpose());
      embedded.row(i) = project(sub, normalize(raw, sub.norm_stats)).transpose();
    });
    return embedded;
  };

  Matrix train_emb = embed(data.train);
  Matrix id_emb = embed(data.id_test);

  DetectorModel detector = fit_detector(train_emb, *data.train.labels,
                                        spec.num_classes(), config.detector);

  Vector id_backward = score_stream(detector, id_emb, config.threads);
  std::vector<std::pair<std::string, Vector>> ood_backward;
  std::vector<std::pair<std::string, Matrix>> ood_emb;
  for (const auto& [name, batch] : data.ood_sets) {
    Matrix emb = embed(batch);
    ood_backward.emplace_back(name, score_stream(detector, emb, config.threads));
    ood_emb.emplace_back(name, std::move(emb));
  }

  EvalReport report;
  const std::string backward_name = detector_kind_name(config.detector.kind);
  report.detectors.push_back(
      make_report(backward_name, id_backward, ood_backward, config.tpr_target));

  Vector id_forward;
  std::vector<std::pair<std::string, Vector>> ood_forward;
  if (config.with_ensemble) {
    id_forward = forward_energy_scores(spec, params, data.id_test, config.threads);
    for (const auto& [name, batch] : data.ood_sets) {
      ood_forward.emplace_back(
          name, forward_energy_scores(spec, params, batch, config.threads));
    }
    report.detectors.push_back(
        make_report("forward-energy", id_forward, ood_forward, config.tpr_target));

    Vector id_ens = id_forward + config.alpha * id_backward;
    std::vector<std::pair<std::string, Vector>> ood_ens;
    for (std::size_t s = 0; s < ood_forward.size(); ++s) {
      ood_ens.emplace_back(ood_forward[s].first,
                           ood_forward[s].second +
                               config.alpha * ood_backward[s].second);
    }
    report.detectors.push_back(
        make_report("ensemble", id_ens, ood_ens, config.tpr_target));
  }

  const Index bins = config.histogram_bins;
  report.histograms.push_back({backward_name + "/id_test", histogram(id_backward, bins)});
  for (const auto& [name, scores] : ood_backward) {
    report.histograms.push_back({backward_name + "/" + name, histogram(scores, bins)});
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["tool_version"] = kToolVersion;
  j["metadata"] = {
      {"fpr95_convention",
       "ID iff score >= lambda on both calibration and FPR sides; "
       "lambda is a nearest-rank order statistic, no interpolation"},
      {"reference_results",
       {{"note",
         "published large-scale benchmark values, informational only; "
         "not reproducible on synthetic data and never used as test targets"},
        {"gradient-react-imagenet", {{"fpr95", 23.03}, {"auroc", 95.45}}}}},
  };
  if (!report.config_echo.empty()) {
    j["config"] = nlohmann::ordered_json::parse(report.config_echo);
  }
  auto& dets = j["detectors"];
  dets = nlohmann::ordered_json::array();
  for (const auto& rep : report.detectors) {
    nlohmann::ordered_json d;
    d["detector"] = rep.detector;
    d["lambda_at_95tpr"] = rep.lambda_at_95tpr;
    auto& per = d["per_dataset"];
    per = nlohmann::ordered_json::array();
    for (const auto& m : rep.per_dataset) {
      per.push_back({{"dataset", m.dataset},
                     {"fpr95", m.fpr95},
                     {"auroc", m.auroc_value}});
    }
    d["macro"] = {{"fpr95", rep.macro_fpr95}, {"auroc", rep.macro_auroc}};
    dets.push_back(std::move(d));
  }
  auto& hists = j["histograms"];
  hists = nlohmann::ordered_json::array();
  for (const auto& h : report.histograms) {
    nlohmann::ordered_json e;
    e["stream"] = h.stream;
    e["edges"] = std::vector<double>(h.data.edges.data(),
                                     h.data.edges.data() + h.data.edges.size());
    e["counts"] = h.data.counts;
    hists.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "dataset,detector,fpr95,auroc\n";
  for (const auto& rep : report.detectors) {
    for (const auto& m : rep.per_dataset) {
      out << m.dataset << ',' << rep.detector << ',' << m.fpr95 << ','
          << m.auroc_value << '\n';
    }
    out << "macro-average," << rep.detector << ',' << rep.macro_fpr95 << ','
        << rep.macro_auroc << '\n';
  }
  return out.str();
}

std::string histogram_to_csv(const HistogramData& hist) {
  std::ostringstream out;
  out.precision(17);
  out << "bin_left,bin_right,count\n";
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    out << hist.edges[static_cast<Index>(b)] << ','
        << hist.edges[static_cast<Index>(b + 1)] << ',' << hist.counts[b] << '\n';
  }
  return out.str();
}

}  // namespace gso
