#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gso/evalharness.hpp"
#include "gso/gradembed.hpp"
#include "gso/rng.hpp"
#include "test_helpers.hpp"

using namespace gso;
using namespace gso::testing;

namespace {

Vector iota_scores(Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = static_cast<double>(i + 1);
  return v;
}

// O(n^2) pairwise Mann-Whitney oracle with 0.5 tie credit.
double auroc_pairwise(const Vector& id, const Vector& ood) {
  double acc = 0.0;
  for (Index i = 0; i < id.size(); ++i) {
    for (Index j = 0; j < ood.size(); ++j) {
      if (id[i] > ood[j]) acc += 1.0;
      else if (id[i] == ood[j]) acc += 0.5;
    }
  }
  return acc / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Brute-force threshold sweep: the largest candidate threshold that keeps the
// TPR at or above target.
double lambda_sweep(const Vector& id, double target) {
  double best = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < id.size(); ++i) {
    const double cand = id[i];
    const double tpr = static_cast<double>((id.array() >= cand).count()) /
                       static_cast<double>(id.size());
    if (tpr >= target && cand > best) best = cand;
  }
  return best;
}

}  // namespace

TEST_CASE("calibrate_lambda: integers 1..100 at 95% TPR") {
  Vector id = iota_scores(100);
  const double lambda = calibrate_lambda(id, 0.95);
  CHECK(lambda == doctest::Approx(6.0));
  CHECK((id.array() >= lambda).count() == 95);
}

TEST_CASE("calibrate_lambda: all-equal scores give TPR 1") {
  Vector id = Vector::Constant(25, 3.25);
  const double lambda = calibrate_lambda(id, 0.95);
  CHECK(lambda == 3.25);
  CHECK((id.array() >= lambda).count() == 25);
}

TEST_CASE("calibrate_lambda: fewer than 20 ID scores is a usage error") {
  CHECK_THROWS_AS(calibrate_lambda(iota_scores(19), 0.95), UsageError);
}

TEST_CASE("calibrate_lambda: threshold sweep oracle on random streams") {
  Rng rng(331);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 20 + static_cast<Index>(rng.below(200));
    Vector id(n);
    for (Index i = 0; i < n; ++i) {
      // Mix of continuous values and deliberate ties.
      id[i] = rng.uniform() < 0.3 ? std::floor(3.0 * rng.gaussian()) : rng.gaussian();
    }
    const double target = 0.80 + 0.19 * rng.uniform();
    const double lambda = calibrate_lambda(id, target);
    const double tpr = static_cast<double>((id.array() >= lambda).count()) /
                       static_cast<double>(n);
    CHECK(tpr >= target);
    CHECK(lambda == lambda_sweep(id, target));
  }
}

TEST_CASE("fpr_at_tpr: trivial half split") {
  Vector id = iota_scores(100);
  Vector ood(2);
  ood << 0.0, 10.0;
  CHECK(fpr_at_tpr(id, ood) == doctest::Approx(0.5));
}

TEST_CASE("fpr_at_tpr: perfect separation gives zero") {
  Vector id = iota_scores(40);
  Vector ood(3);
  ood << -5.0, 0.0, 0.5;
  CHECK(fpr_at_tpr(id, ood) == 0.0);
}

TEST_CASE("fpr_at_tpr: sweep oracle and monotonicity") {
  Rng rng(337);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n_id = 20 + static_cast<Index>(rng.below(100));
    const Index n_ood = 1 + static_cast<Index>(rng.below(100));
    Vector id(n_id), ood(n_ood);
    for (Index i = 0; i < n_id; ++i) id[i] = rng.gaussian();
    for (Index i = 0; i < n_ood; ++i) ood[i] = rng.gaussian() + 0.5;

    const double lambda = lambda_sweep(id, 0.95);
    const double oracle = static_cast<double>((ood.array() >= lambda).count()) /
                          static_cast<double>(n_ood);
    CHECK(fpr_at_tpr(id, ood) == oracle);

    // Decreasing every OOD score cannot increase the FPR.
    CHECK(fpr_at_tpr(id, ood.array() - 0.7) <= fpr_at_tpr(id, ood));
  }
}

TEST_CASE("auroc trivials") {
  Vector id2(2), ood2(2);
  id2 << 3.0, 4.0;
  ood2 << 1.0, 2.0;
  CHECK(auroc(id2, ood2) == doctest::Approx(1.0));

  Vector one_a = Vector::Constant(1, 1.0);
  Vector one_b = Vector::Constant(1, 1.0);
  CHECK(auroc(one_a, one_b) == doctest::Approx(0.5));

  Vector id_x(2), ood_x(2);
  id_x << 1.0, 3.0;
  ood_x << 2.0, 4.0;
  CHECK(auroc(id_x, ood_x) == doctest::Approx(0.25));

  CHECK_THROWS_AS(auroc(Vector(), ood_x), UsageError);
  CHECK_THROWS_AS(auroc(id_x, Vector()), UsageError);
}

TEST_CASE("auroc: rank-sum equals the pairwise oracle, with ties") {
  Rng rng(347);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n_id = 1 + static_cast<Index>(rng.below(120));
    const Index n_ood = 1 + static_cast<Index>(rng.below(120));
    Vector id(n_id), ood(n_ood);
    for (Index i = 0; i < n_id; ++i) id[i] = std::floor(4.0 * rng.gaussian());
    for (Index i = 0; i < n_ood; ++i) ood[i] = std::floor(4.0 * rng.gaussian());
    CHECK(std::abs(auroc(id, ood) - auroc_pairwise(id, ood)) <= 1e-12);
  }
}

TEST_CASE("auroc: symmetry and monotone-transform invariance") {
  Rng rng(349);
  const Index n = 60;
  Vector id(n), ood(n);
  for (Index i = 0; i < n; ++i) {
    id[i] = rng.gaussian();
    ood[i] = rng.gaussian();
  }
  CHECK(std::abs(auroc(id, ood) + auroc(ood, id) - 1.0) <= 1e-12);

  // Strictly increasing transform leaves the value unchanged.
  Vector id_t = id.array().exp();
  Vector ood_t = ood.array().exp();
  CHECK(std::abs(auroc(id, ood) - auroc(id_t, ood_t)) <= 1e-12);
}

TEST_CASE("generate_synth: determinism, counts, and separation") {
  SynthSpec spec;
  GaussianComponent a;
  a.mean = Vector(2);
  a.mean << -3.0, 0.0;
  a.cov_scale = 0.5;
  a.count = 30;
  a.test_count = 10;
  a.label = 0;
  GaussianComponent b = a;
  b.mean << 3.0, 0.0;
  b.label = 1;
  spec.id_components = {a, b};

  GaussianComponent far;
  far.mean = Vector(2);
  far.mean << 0.0, 10.0;
  far.cov_scale = 0.5;
  far.count = 15;
  spec.ood_sets.push_back({"far", {far}});
  spec.seed = 7;

  SynthData d1 = generate_synth(spec);
  SynthData d2 = generate_synth(spec);
  CHECK((d1.train.inputs - d2.train.inputs).cwiseAbs().maxCoeff() == 0.0);
  CHECK((d1.id_test.inputs - d2.id_test.inputs).cwiseAbs().maxCoeff() == 0.0);
  CHECK((d1.ood_sets[0].second.inputs - d2.ood_sets[0].second.inputs)
            .cwiseAbs()
            .maxCoeff() == 0.0);

  CHECK(d1.train.size() == 60);
  CHECK(d1.id_test.size() == 20);
  CHECK(d1.ood_sets[0].second.size() == 15);
  CHECK(std::count(d1.train.labels->begin(), d1.train.labels->end(), 0) == 30);
  CHECK(std::count(d1.train.labels->begin(), d1.train.labels->end(), 1) == 30);

  // Means are 12 sigma apart, so every class-0 point stays left of every
  // class-1 point with overwhelming margin at this sample size.
  double max0 = -1e9, min1 = 1e9;
  for (Index i = 0; i < d1.train.size(); ++i) {
    if ((*d1.train.labels)[static_cast<std::size_t>(i)] == 0) {
      max0 = std::max(max0, d1.train.inputs(i, 0));
    } else {
      min1 = std::min(min1, d1.train.inputs(i, 0));
    }
  }
  CHECK(max0 < min1);
}

TEST_CASE("generate_synth: invalid specs are usage errors") {
  SynthSpec spec;
  CHECK_THROWS_AS(generate_synth(spec), UsageError);  // no components

  GaussianComponent c;
  c.mean = Vector::Zero(2);
  c.count = 5;
  c.label = -1;  // ID components need labels
  spec.id_components = {c};
  CHECK_THROWS_AS(generate_synth(spec), UsageError);

  spec.id_components[0].label = 0;
  spec.id_components[0].cov_scale = 0.0;
  CHECK_THROWS_AS(generate_synth(spec), UsageError);
}

TEST_CASE("histogram: forced edges and counts") {
  Vector values(4);
  values << 0.0, 1.0, 2.0, 3.0;
  HistogramData h = histogram(values, 2);
  CHECK(h.edges.size() == 3);
  CHECK(h.edges[0] == doctest::Approx(0.0));
  CHECK(h.edges[1] == doctest::Approx(1.5));
  CHECK(h.edges[2] == doctest::Approx(3.0));
  CHECK(h.counts[0] == 2);
  CHECK(h.counts[1] == 2);
}

TEST_CASE("histogram: degenerate all-equal values occupy one bin") {
  Vector values = Vector::Constant(7, 2.5);
  HistogramData h = histogram(values, 4);
  CHECK(h.counts[0] == 7);
  CHECK(h.counts[1] + h.counts[2] + h.counts[3] == 0);
}

TEST_CASE("histogram: counts sum to n on random data") {
  Rng rng(353);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(500));
    Vector values(n);
    for (Index i = 0; i < n; ++i) values[i] = rng.gaussian();
    HistogramData h = histogram(values, 13);
    Index total = 0;
    for (Index c : h.counts) total += c;
    CHECK(total == n);
  }
}

TEST_CASE("class_cosine_report: identical same-class gradients") {
  Matrix rows(4, 3);
  rows << 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0;
  std::vector<int> labels = {0, 0, 1, 1};
  ClassCosineReport rep = class_cosine_report(rows, labels, 2);
  CHECK(rep.per_class_within[0] == doctest::Approx(1.0));
  CHECK(rep.per_class_within[1] == doctest::Approx(1.0));
  CHECK(rep.within_avg == doctest::Approx(1.0));
  // Classes live on orthogonal axes.
  CHECK(std::abs(rep.cross_avg) <= 1e-10);
}

TEST_CASE("class_cosine_report: clustered gradients separate within from cross") {
  Rng rng(359);
  const Index n_per = 40, dim = 10;
  Matrix rows(2 * n_per, dim);
  std::vector<int> labels;
  Vector m0 = Vector::Zero(dim), m1 = Vector::Zero(dim);
  m0[0] = 3.0;
  m1[1] = 3.0;
  for (Index i = 0; i < 2 * n_per; ++i) {
    const int label = i < n_per ? 0 : 1;
    Vector noise(dim);
    for (Index j = 0; j < dim; ++j) noise[j] = rng.gaussian();
    rows.row(i) = ((label == 0 ? m0 : m1) + 0.5 * noise).transpose();
    labels.push_back(label);
  }
  ClassCosineReport rep = class_cosine_report(rows, labels, 2);
  CHECK(rep.within_avg > rep.cross_avg + 0.05);
}

TEST_CASE("parallel_for and score_stream are thread-count invariant") {
  Rng rng(367);
  KnnModel km;
  km.bank.resize(50, 4);
  for (Index i = 0; i < km.bank.size(); ++i) km.bank.data()[i] = rng.gaussian();
  km.k = 3;
  DetectorModel model;
  model.kind = DetectorKind::knn;
  model.knn = km;

  Matrix queries(33, 4);
  for (Index i = 0; i < queries.size(); ++i) queries.data()[i] = rng.gaussian();

  Vector serial = score_stream(model, queries, 1);
  Vector parallel = score_stream(model, queries, 4);
  CHECK((serial - parallel).cwiseAbs().maxCoeff() == 0.0);
}

namespace {

struct PipelineFixture {
  ModelSpec spec;
  ParamVector params;
  Subspace sub;
  SynthData data;
};

// Two well-separated ID blobs, one OOD blob 20 sigma away, and a small
// trained classifier with its PCA gradient subspace.
PipelineFixture make_pipeline_fixture() {
  PipelineFixture fx;
  SynthSpec synth;
  GaussianComponent a;
  a.mean = Vector(3);
  a.mean << -3.0, 0.0, 0.0;
  a.cov_scale = 0.5;
  a.count = 60;
  a.test_count = 25;
  a.label = 0;
  GaussianComponent b = a;
  b.mean << 3.0, 0.0, 0.0;
  b.label = 1;
  synth.id_components = {a, b};
  GaussianComponent far;
  far.mean = Vector(3);
  far.mean << 0.0, 10.0, 0.0;  // 20 sigma from either ID mean
  far.cov_scale = 0.5;
  far.count = 25;
  synth.ood_sets.push_back({"far", {far}});
  synth.seed = 11;
  fx.data = generate_synth(synth);

  fx.spec.layer_dims = {3, 8, 2};
  TrainConfig tc;
  tc.epochs = 40;
  tc.seed = 5;
  TrainResult tr = train_classifier(fx.spec, fx.data.train, tc);
  fx.params = std::move(tr.params);

  PowerIterConfig pc;
  pc.iters = 50;
  pc.seed = 3;
  fx.sub = extract_pca_subspace(fx.spec, fx.params, fx.data.train, 4, pc);
  return fx;
}

}  // namespace

TEST_CASE("run_pipeline: perfect separation with the KNN detector") {
  PipelineFixture fx = make_pipeline_fixture();

  // Oracle: the benchmark must already be separable on raw inputs before the
  // gradient pipeline gets credit for separating it.
  KnnModel raw;
  raw.bank = fx.data.train.inputs;
  raw.k = 5;
  Vector raw_id(fx.data.id_test.size());
  for (Index i = 0; i < raw_id.size(); ++i) {
    raw_id[i] = score_knn(raw, fx.data.id_test.inputs.row(i).transpose());
  }
  const SampleBatch& ood = fx.data.ood_sets[0].second;
  Vector raw_ood(ood.size());
  for (Index i = 0; i < raw_ood.size(); ++i) {
    raw_ood[i] = score_knn(raw, ood.inputs.row(i).transpose());
  }
  REQUIRE(auroc(raw_id, raw_ood) == doctest::Approx(1.0));

  PipelineConfig config;
  config.detector.kind = DetectorKind::knn;
  config.detector.knn_k = 5;
  EvalReport report = run_pipeline(fx.spec, fx.params, fx.sub, fx.data, config);

  const DetectorReport& backward = report.detectors[0];
  CHECK(backward.detector == "knn");
  CHECK(backward.per_dataset[0].fpr95 == 0.0);
  CHECK(backward.per_dataset[0].auroc_value == doctest::Approx(1.0));

  // Macro rows equal recomputed means of the per-dataset values.
  for (const DetectorReport& rep : report.detectors) {
    double fpr_sum = 0.0, auc_sum = 0.0;
    for (const auto& m : rep.per_dataset) {
      fpr_sum += m.fpr95;
      auc_sum += m.auroc_value;
    }
    const auto count = static_cast<double>(rep.per_dataset.size());
    CHECK(std::abs(rep.macro_fpr95 - fpr_sum / count) <= 1e-12);
    CHECK(std::abs(rep.macro_auroc - auc_sum / count) <= 1e-12);
  }
}

TEST_CASE("run_pipeline: deterministic report bytes, thread-count invariant") {
  PipelineFixture fx = make_pipeline_fixture();
  PipelineConfig config;
  config.detector.kind = DetectorKind::knn;
  config.detector.knn_k = 5;

  EvalReport r1 = run_pipeline(fx.spec, fx.params, fx.sub, fx.data, config);
  EvalReport r2 = run_pipeline(fx.spec, fx.params, fx.sub, fx.data, config);
  CHECK(report_to_json(r1) == report_to_json(r2));
  CHECK(report_to_csv(r1) == report_to_csv(r2));

  config.threads = 4;
  EvalReport r4 = run_pipeline(fx.spec, fx.params, fx.sub, fx.data, config);
  CHECK(report_to_json(r1) == report_to_json(r4));
}

TEST_CASE("run_pipeline: alpha=0 ensemble equals the forward-only stream") {
  PipelineFixture fx = make_pipeline_fixture();
  PipelineConfig config;
  config.detector.kind = DetectorKind::knn;
  config.detector.knn_k = 5;
  config.alpha = 0.0;
  EvalReport report = run_pipeline(fx.spec, fx.params, fx.sub, fx.data, config);

  REQUIRE(report.detectors.size() == 3);
  const DetectorReport& forward = report.detectors[1];
  const DetectorReport& ensemble = report.detectors[2];
  CHECK(forward.detector == "forward-energy");
  CHECK(ensemble.detector == "ensemble");
  CHECK(ensemble.lambda_at_95tpr == forward.lambda_at_95tpr);
  for (std::size_t s = 0; s < forward.per_dataset.size(); ++s) {
    CHECK(ensemble.per_dataset[s].fpr95 == forward.per_dataset[s].fpr95);
    CHECK(ensemble.per_dataset[s].auroc_value == forward.per_dataset[s].auroc_value);
  }
}

TEST_CASE("report serialization: json parses and csv has the expected shape") {
  PipelineFixture fx = make_pipeline_fixture();
  PipelineConfig config;
  config.detector.kind = DetectorKind::knn;
  config.detector.knn_k = 5;
  EvalReport report = run_pipeline(fx.spec, fx.params, fx.sub, fx.data, config);

  const std::string json = report_to_json(report);
  CHECK(json.find("\"detectors\"") != std::string::npos);
  CHECK(json.find("\"fpr95_convention\"") != std::string::npos);

  const std::string csv = report_to_csv(report);
  CHECK(csv.rfind("dataset,detector,fpr95,auroc\n", 0) == 0);
  CHECK(csv.find("macro-average,knn,") != std::string::npos);

  const std::string hist_csv = histogram_to_csv(report.histograms[0].data);
  CHECK(hist_csv.rfind("bin_left,bin_right,count\n", 0) == 0);
}
