#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gso/common.hpp"
#include "gso/detectors.hpp"
#include "gso/io.hpp"
#include "gso/micronet.hpp"
#include "gso/subspace.hpp"

namespace gso {

// lambda = the floor(n * (1 - tpr_target))-th ascending order statistic
// (0-indexed), so at least tpr_target of ID scores are >= lambda.
double calibrate_lambda(const Vector& id_scores, double tpr_target = 0.95);

// Fraction of OOD scores >= calibrate_lambda(id_scores).
double fpr_at_tpr(const Vector& id_scores, const Vector& ood_scores,
                  double tpr_target = 0.95);

// Mann-Whitney statistic via rank sums, average ranks for ties.
double auroc(const Vector& id_scores, const Vector& ood_scores);

struct GaussianComponent {
  Vector mean;
  double cov_scale = 1.0;  // isotropic standard deviation
  Index count = 0;         // training samples
  Index test_count = 0;
  int label = -1;          // -1 for OOD components
};

struct OodSetSpec {
  std::string name;
  std::vector<GaussianComponent> components;
};

struct SynthSpec {
  std::vector<GaussianComponent> id_components;  // labels required
  std::vector<OodSetSpec> ood_sets;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  SampleBatch train;
  SampleBatch id_test;
  std::vector<std::pair<std::string, SampleBatch>> ood_sets;
};

SynthData generate_synth(const SynthSpec& spec);

struct HistogramData {
  Vector edges;               // bins + 1 entries
  std::vector<Index> counts;  // bins entries, sums to n
};

HistogramData histogram(const Vector& values, Index bins);

struct ClassCosineReport {
  Vector per_class_within;  // mean cosine to own class-mean gradient
  double within_avg = 0.0;
  double cross_avg = 0.0;  // mean cosine to other classes' mean gradients
};

ClassCosineReport class_cosine_report(const Matrix& normalized_rows,
                                      const std::vector<int>& labels,
                                      Index num_classes);

// Parallel map over [0, n) with static chunking; each index writes its own
// output slot, so results do not depend on the thread count.
void parallel_for(Index n, int threads, const std::function<void(Index)>& fn);

Vector score_stream(const DetectorModel& model, const Matrix& embeddings,
                    int threads = 1);

struct ScoreStreamMetrics {
  std::string dataset;
  double fpr95 = 0.0;
  double auroc_value = 0.0;
};

struct DetectorReport {
  std::string detector;
  double lambda_at_95tpr = 0.0;
  std::vector<ScoreStreamMetrics> per_dataset;
  double macro_fpr95 = 0.0;
  double macro_auroc = 0.0;
};

struct NamedHistogram {
  std::string stream;
  HistogramData data;
};

struct EvalReport {
  std::vector<DetectorReport> detectors;
  std::vector<NamedHistogram> histograms;
  std::string config_echo;  // resolved run configuration, JSON text
};

struct PipelineConfig {
  DetectorConfig detector;
  double alpha = 1.0;       // ensemble weight
  bool with_ensemble = true;
  double tpr_target = 0.95;
  Index histogram_bins = 20;
  int threads = 1;
};

// End-to-end: embed -> normalize -> project -> fit detector on train
// embeddings -> score test streams -> metrics. The forward stream is the
// energy score of the classifier logits; the ensemble adds alpha times the
// gradient-detector score.
EvalReport run_pipeline(const ModelSpec& spec, const ParamVector& params,
                        const Subspace& sub, const SynthData& data,
                        const PipelineConfig& config);

std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);
std::string histogram_to_csv(const HistogramData& hist);

}  // namespace gso
