#pragma once

#include <Eigen/Cholesky>

#include <optional>
#include <string>
#include <vector>

#include "gso/common.hpp"

namespace gso {

// Auxiliary linear network over gradient embeddings: g -> BN -> FC -> y.
struct LinearHead {
  Vector bn_mean;    // running mean, length K
  Vector bn_var;     // running variance, length K, >= 0
  Vector bn_scale;   // learnable scale
  Vector bn_shift;   // learnable shift
  Matrix fc_weight;  // C x K
  Vector fc_bias;    // length C
  double bn_epsilon = 1e-5;

  Index reduced_dim() const { return bn_mean.size(); }
  Index num_classes() const { return fc_bias.size(); }
  void validate() const;

  // Inference-mode BN with frozen running stats.
  Vector batch_norm(const Vector& g) const;
};

struct HeadTrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  Index batch_size = 512;
  Index epochs = 3;
  std::uint64_t seed = 0;
  double bn_momentum = 0.1;
};

struct HeadTrainResult {
  LinearHead head;
  double train_accuracy = 0.0;
};

HeadTrainResult train_head(const Matrix& embeddings, const std::vector<int>& labels,
                           Index num_classes, const HeadTrainConfig& config);

Matrix head_logits_batch(const LinearHead& head, const Matrix& embeddings);

enum class ClipMethod : std::uint8_t { none = 0, react = 1, bats = 2 };

struct ClipConfig {
  ClipMethod method = ClipMethod::none;
  Index d = 0;          // tail dimension count, 0 < d <= K for react/bats
  double p = 90.0;      // react percentile in (0, 100]
  double lambda = 0.1;  // bats typical-set width

  void validate(Index K) const;
};

// Fitted clip state. For react this is the percentile threshold over pooled
// post-BN tail values of ID data; bats reuses the head's learned BN
// scale/shift as the typical-set center and width.
struct ClipState {
  double react_threshold = 0.0;
};

// Nearest-rank percentile of the pooled tail values (post-BN) of ID data.
double fit_react_threshold(const Matrix& post_bn_tail, double p);

Vector clip_react(const Vector& tail, double threshold);

// Three-branch BATS rectification. Values are already post-BN at this stage,
// so the middle branch is the identity.
Vector clip_bats(const Vector& tail, const Vector& mu, const Vector& delta,
                 double lambda);

// BN -> Clip(last d dims) -> FC.
Vector head_logits(const LinearHead& head, const Vector& g, const ClipConfig& clip,
                   const ClipState* clip_state = nullptr);

double score_msp(const Vector& logits);
double score_energy(const Vector& logits, double temperature = 1.0);

struct MahaModel {
  Matrix class_means;  // C x K
  Matrix shared_cov;   // K x K, SPD after ridge
  Eigen::LLT<Matrix> cov_factor;

  void refactorize();
  void validate() const;
};

// Pooled within-class covariance (population normalization) plus
// ridge_scale * trace / K on the diagonal. Set pooled=false for the global
// covariance variant.
MahaModel fit_maha(const Matrix& embeddings, const std::vector<int>& labels,
                   Index num_classes, double ridge_scale = 1e-6,
                   bool pooled = true);

// max_c -(g - mu_c)^T Sigma^-1 (g - mu_c), via the cached factorization.
double score_maha(const MahaModel& model, const Vector& g);

struct KnnModel {
  Matrix bank;  // n_train x K
  Index k = 10;

  void validate() const;
};

// -distance to the k-th nearest bank vector; exact brute force, ties broken
// by bank index order.
double score_knn(const KnnModel& model, const Vector& g);

double score_ensemble(double s_forward, double s_backward, double alpha = 1.0);

enum class Verdict { ID, OOD };

// ID iff score >= lambda (boundary inclusive).
Verdict classify(double score, double lambda_threshold);

enum class DetectorKind : std::uint8_t {
  msp = 0,
  energy = 1,
  react = 2,
  bats = 3,
  maha = 4,
  knn = 5,
};

DetectorKind detector_kind_from_string(const std::string& name);
std::string detector_kind_name(DetectorKind kind);

struct DetectorConfig {
  DetectorKind kind = DetectorKind::knn;
  HeadTrainConfig head;
  ClipConfig clip;
  double temperature = 1.0;  // energy/react/bats score temperature
  double ridge_scale = 1e-6;
  bool maha_pooled = true;
  Index knn_k = 10;
};

// Fitted detector state; immutable after fitting, safe for concurrent scoring.
struct DetectorModel {
  DetectorKind kind = DetectorKind::knn;
  std::optional<LinearHead> head;
  ClipConfig clip;
  ClipState clip_state;
  double temperature = 1.0;
  std::optional<MahaModel> maha;
  std::optional<KnnModel> knn;
  double head_accuracy = 0.0;

  double score(const Vector& embedding) const;
  void validate() const;
};

DetectorModel fit_detector(const Matrix& embeddings, const std::vector<int>& labels,
                           Index num_classes, const DetectorConfig& config);

// Detector artifact: magic "GSO-DET\0\0", version u16=1, kind u8,
// kind-specific payload, CRC32.
void save_detector(const DetectorModel& model, const std::string& path);
DetectorModel load_detector(const std::string& path);

}  // namespace gso
