#include "gso/detectors.hpp"

#include "gso/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gso/rng.hpp"

namespace gso {

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
  Matrix expd = shifted.array().exp();
  return expd.array().colwise() / expd.rowwise().sum().array();
}

}  // namespace

void LinearHead::validate() const {
  const Index K = bn_mean.size();
  const Index C = fc_bias.size();
  if (bn_var.size() != K || bn_scale.size() != K || bn_shift.size() != K ||
      fc_weight.rows() != C || fc_weight.cols() != K) {
    throw ConfigError("linear head shapes are inconsistent");
  }
  if ((bn_var.array() < 0.0).any()) throw ConfigError("negative BN variance");
  if (bn_epsilon <= 0.0) throw ConfigError("BN epsilon must be positive");
}

Vector LinearHead::batch_norm(const Vector& g) const {
  Vector normed =
      (g - bn_mean).array() / (bn_var.array() + bn_epsilon).sqrt();
  return bn_scale.cwiseProduct(normed) + bn_shift;
}

HeadTrainResult train_head(const Matrix& embeddings, const std::vector<int>& labels,
                           Index num_classes, const HeadTrainConfig& config) {
  const Index n = embeddings.rows();
  const Index K = embeddings.cols();
  const Index C = num_classes;
  if (static_cast<Index>(labels.size()) != n) {
    throw ConfigError("label count does not match embedding rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= C) throw UsageError("label out of range");
  }
  if (config.epochs < 1) throw UsageError("epochs must be >= 1");
  if (config.batch_size < 1) throw UsageError("batch_size must be >= 1");

  LinearHead head;
  head.bn_mean = Vector::Zero(K);
  head.bn_var = Vector::Ones(K);
  head.bn_scale = Vector::Ones(K);
  head.bn_shift = Vector::Zero(K);
  head.fc_bias = Vector::Zero(C);
  head.fc_weight.resize(C, K);
  Rng rng(config.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(K));
  for (Index r = 0; r < C; ++r)
    for (Index c = 0; c < K; ++c) head.fc_weight(r, c) = rng.uniform(-bound, bound);

  Vector vel_scale = Vector::Zero(K);
  Vector vel_shift = Vector::Zero(K);
  Matrix vel_w = Matrix::Zero(C, K);
  Vector vel_b = Vector::Zero(C);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min(config.batch_size, n - start);
      Matrix xb(len, K);
      std::vector<int> yb(static_cast<std::size_t>(len));
      for (Index i = 0; i < len; ++i) {
        xb.row(i) = embeddings.row(order[static_cast<std::size_t>(start + i)]);
        yb[static_cast<std::size_t>(i)] =
            labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])];
      }

      // Training-mode BN with batch statistics.
      Vector mu_b = xb.colwise().mean().transpose();
      Matrix centered = xb.rowwise() - mu_b.transpose();
      Vector var_b =
          centered.array().square().colwise().mean().transpose();
      Matrix xhat = centered.array().rowwise() /
                    (var_b.array() + head.bn_epsilon).sqrt().transpose();
      Matrix h = xhat.array().rowwise() * head.bn_scale.transpose().array();
      h.rowwise() += head.bn_shift.transpose();

      Matrix logits = h * head.fc_weight.transpose();
      logits.rowwise() += head.fc_bias.transpose();

      Matrix dlogits = softmax_rows(logits);
      for (Index i = 0; i < len; ++i) dlogits(i, yb[static_cast<std::size_t>(i)]) -= 1.0;
      dlogits /= static_cast<double>(len);

      Matrix grad_w = dlogits.transpose() * h;
      Vector grad_b = dlogits.colwise().sum().transpose();
      Matrix dh = dlogits * head.fc_weight;
      Vector grad_scale = dh.cwiseProduct(xhat).colwise().sum().transpose();
      Vector grad_shift = dh.colwise().sum().transpose();

      vel_w = config.momentum * vel_w + grad_w;
      vel_b = config.momentum * vel_b + grad_b;
      vel_scale = config.momentum * vel_scale + grad_scale;
      vel_shift = config.momentum * vel_shift + grad_shift;
      head.fc_weight -= config.lr * vel_w;
      head.fc_bias -= config.lr * vel_b;
      head.bn_scale -= config.lr * vel_scale;
      head.bn_shift -= config.lr * vel_shift;

      head.bn_mean = (1.0 - config.bn_momentum) * head.bn_mean + config.bn_momentum * mu_b;
      head.bn_var = (1.0 - config.bn_momentum) * head.bn_var + config.bn_momentum * var_b;
    }
  }

  head.validate();
  HeadTrainResult result;
  result.head = std::move(head);
  Matrix logits = head_logits_batch(result.head, embeddings);
  Index correct = 0;
  for (Index i = 0; i < n; ++i) {
    Index pred;
    logits.row(i).maxCoeff(&pred);
    if (pred == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return result;
}

Matrix head_logits_batch(const LinearHead& head, const Matrix& embeddings) {
  Matrix normed = embeddings.rowwise() - head.bn_mean.transpose();
  normed.array().rowwise() /=
      (head.bn_var.array() + head.bn_epsilon).sqrt().transpose();
  normed.array().rowwise() *= head.bn_scale.transpose().array();
  normed.rowwise() += head.bn_shift.transpose();
  Matrix logits = normed * head.fc_weight.transpose();
  logits.rowwise() += head.fc_bias.transpose();
  return logits;
}

void ClipConfig::validate(Index K) const {
  if (method == ClipMethod::none) return;
  if (d < 1 || d > K) throw UsageError("clip tail dimension d must be in (0, K]");
  if (method == ClipMethod::react && (p <= 0.0 || p > 100.0)) {
    throw UsageError("react percentile must be in (0, 100]");
  }
  if (method == ClipMethod::bats && lambda <= 0.0) {
    throw UsageError("bats lambda must be positive");
  }
}

double fit_react_threshold(const Matrix& post_bn_tail, double p) {
  if (post_bn_tail.size() == 0) throw UsageError("react fit needs values");
  if (p <= 0.0 || p > 100.0) throw UsageError("percentile must be in (0, 100]");
  std::vector<double> pool(post_bn_tail.data(), post_bn_tail.data() + post_bn_tail.size());
  std::sort(pool.begin(), pool.end());
  // Nearest-rank: smallest value with at least p% of the pool at or below it.
  const auto n = pool.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(p / 100.0 * static_cast<double>(n)));
  if (rank < 1) rank = 1;
  if (rank > n) rank = n;
  return pool[rank - 1];
}

Vector clip_react(const Vector& tail, double threshold) {
  return tail.cwiseMin(threshold);
}

Vector clip_bats(const Vector& tail, const Vector& mu, const Vector& delta,
                 double lambda) {
  if (tail.size() != mu.size() || tail.size() != delta.size()) {
    throw ConfigError("bats clip length mismatch");
  }
  if ((delta.array() <= 0.0).any()) throw UsageError("bats delta must be positive");
  Vector out(tail.size());
  for (Index i = 0; i < tail.size(); ++i) {
    const double band = lambda * delta[i];
    const double dev = tail[i] - mu[i];
    if (dev >= band) {
      out[i] = mu[i] + band;
    } else if (dev <= -band) {
      out[i] = mu[i] - band;
    } else {
      out[i] = tail[i];  // already the BN output at this pipeline stage
    }
  }
  return out;
}

Vector head_logits(const LinearHead& head, const Vector& g, const ClipConfig& clip,
                   const ClipState* clip_state) {
  if (g.size() != head.reduced_dim()) throw ConfigError("embedding length mismatch");
  clip.validate(head.reduced_dim());
  Vector h = head.batch_norm(g);
  if (clip.method != ClipMethod::none) {
    Vector tail = h.tail(clip.d);
    if (clip.method == ClipMethod::react) {
      if (!clip_state) throw UsageError("react clip requires a fitted threshold");
      h.tail(clip.d) = clip_react(tail, clip_state->react_threshold);
    } else {
      Vector mu = head.bn_shift.tail(clip.d);
      Vector delta = head.bn_scale.tail(clip.d).cwiseAbs().cwiseMax(1e-12);
      h.tail(clip.d) = clip_bats(tail, mu, delta, clip.lambda);
    }
  }
  return head.fc_weight * h + head.fc_bias;
}

double score_msp(const Vector& logits) {
  Vector shifted = logits.array() - logits.maxCoeff();
  Vector expd = shifted.array().exp();
  return expd.maxCoeff() / expd.sum();
}

double score_energy(const Vector& logits, double temperature) {
  if (temperature <= 0.0) throw UsageError("temperature must be positive");
  Vector scaled = logits / temperature;
  const double m = scaled.maxCoeff();
  return -temperature * (m + std::log((scaled.array() - m).exp().sum()));
}

void MahaModel::refactorize() {
  cov_factor.compute(shared_cov);
  if (cov_factor.info() != Eigen::Success) {
    throw ConfigError("mahalanobis covariance is not positive definite");
  }
}

void MahaModel::validate() const {
  if (class_means.cols() != shared_cov.rows() || shared_cov.rows() != shared_cov.cols()) {
    throw ConfigError("mahalanobis model shapes are inconsistent");
  }
  if ((shared_cov - shared_cov.transpose()).cwiseAbs().maxCoeff() > 1e-10) {
    throw ConfigError("mahalanobis covariance is not symmetric");
  }
}

MahaModel fit_maha(const Matrix& embeddings, const std::vector<int>& labels,
                   Index num_classes, double ridge_scale, bool pooled) {
  const Index n = embeddings.rows();
  const Index K = embeddings.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw ConfigError("label count does not match embedding rows");
  }

  MahaModel model;
  model.class_means = Matrix::Zero(num_classes, K);
  std::vector<Index> counts(static_cast<std::size_t>(num_classes), 0);
  for (Index i = 0; i < n; ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= num_classes) throw UsageError("label out of range");
    model.class_means.row(c) += embeddings.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Index c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] < 2) {
      throw UsageError("class " + std::to_string(c) + " has fewer than 2 samples");
    }
    model.class_means.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }

  Matrix scatter = Matrix::Zero(K, K);
  if (pooled) {
    for (Index i = 0; i < n; ++i) {
      Vector d = embeddings.row(i).transpose() -
                 model.class_means.row(labels[static_cast<std::size_t>(i)]).transpose();
      scatter += d * d.transpose();
    }
  } else {
    Vector global_mean = embeddings.colwise().mean().transpose();
    for (Index i = 0; i < n; ++i) {
      Vector d = embeddings.row(i).transpose() - global_mean;
      scatter += d * d.transpose();
    }
  }
  model.shared_cov = scatter / static_cast<double>(n);

  const double trace = model.shared_cov.trace();
  const double ridge =
      ridge_scale * (trace > 0.0 ? trace / static_cast<double>(K) : 1.0);
  model.shared_cov.diagonal().array() += ridge;
  model.validate();
  model.refactorize();
  return model;
}

double score_maha(const MahaModel& model, const Vector& g) {
  if (g.size() != model.class_means.cols()) throw ConfigError("embedding length mismatch");
  double best = -std::numeric_limits<double>::infinity();
  for (Index c = 0; c < model.class_means.rows(); ++c) {
    Vector d = g - model.class_means.row(c).transpose();
    const double dist2 = d.dot(model.cov_factor.solve(d));
    best = std::max(best, -dist2);
  }
  return best;
}

void KnnModel::validate() const {
  if (k < 1 || k > bank.rows()) throw UsageError("knn k must be in [1, n_train]");
  if (!bank.allFinite()) throw ConfigError("knn bank has non-finite values");
}

double score_knn(const KnnModel& model, const Vector& g) {
  if (g.size() != model.bank.cols()) throw ConfigError("embedding length mismatch");
  const Index n = model.bank.rows();
  std::vector<std::pair<double, Index>> dists(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    dists[static_cast<std::size_t>(i)] = {
        (model.bank.row(i).transpose() - g).squaredNorm(), i};
  }
  std::nth_element(dists.begin(), dists.begin() + (model.k - 1), dists.end());
  return -std::sqrt(dists[static_cast<std::size_t>(model.k - 1)].first);
}

double score_ensemble(double s_forward, double s_backward, double alpha) {
  return s_forward + alpha * s_backward;
}

Verdict classify(double score, double lambda_threshold) {
  return score >= lambda_threshold ? Verdict::ID : Verdict::OOD;
}

DetectorKind detector_kind_from_string(const std::string& name) {
  if (name == "msp") return DetectorKind::msp;
  if (name == "energy") return DetectorKind::energy;
  if (name == "react") return DetectorKind::react;
  if (name == "bats") return DetectorKind::bats;
  if (name == "maha") return DetectorKind::maha;
  if (name == "knn") return DetectorKind::knn;
  throw UsageError("unknown detector kind: " + name);
}

std::string detector_kind_name(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::msp: return "msp";
    case DetectorKind::energy: return "energy";
    case DetectorKind::react: return "react";
    case DetectorKind::bats: return "bats";
    case DetectorKind::maha: return "maha";
    case DetectorKind::knn: return "knn";
  }
  throw UsageError("invalid detector kind");
}

void DetectorModel::validate() const {
  switch (kind) {
    case DetectorKind::msp:
    case DetectorKind::energy:
    case DetectorKind::react:
    case DetectorKind::bats:
      if (!head) throw ConfigError("detector requires a linear head");
      head->validate();
      if (kind == DetectorKind::react || kind == DetectorKind::bats) {
        clip.validate(head->reduced_dim());
      }
      break;
    case DetectorKind::maha:
      if (!maha) throw ConfigError("detector requires a mahalanobis model");
      maha->validate();
      break;
    case DetectorKind::knn:
      if (!knn) throw ConfigError("detector requires a knn model");
      knn->validate();
      break;
  }
}

double DetectorModel::score(const Vector& embedding) const {
  switch (kind) {
    case DetectorKind::msp: {
      ClipConfig none;
      return score_msp(head_logits(*head, embedding, none));
    }
    case DetectorKind::energy: {
      // Detection orientation: higher on ID, i.e. the negative free energy.
      ClipConfig none;
      return -score_energy(head_logits(*head, embedding, none), temperature);
    }
    case DetectorKind::react:
    case DetectorKind::bats:
      return -score_energy(head_logits(*head, embedding, clip, &clip_state),
                           temperature);
    case DetectorKind::maha:
      return score_maha(*maha, embedding);
    case DetectorKind::knn:
      return score_knn(*knn, embedding);
  }
  throw UsageError("invalid detector kind");
}

DetectorModel fit_detector(const Matrix& embeddings, const std::vector<int>& labels,
                           Index num_classes, const DetectorConfig& config) {
  DetectorModel model;
  model.kind = config.kind;
  model.temperature = config.temperature;

  switch (config.kind) {
    case DetectorKind::msp:
    case DetectorKind::energy:
    case DetectorKind::react:
    case DetectorKind::bats: {
      HeadTrainResult hr = train_head(embeddings, labels, num_classes, config.head);
      model.head = std::move(hr.head);
      model.head_accuracy = hr.train_accuracy;
      model.clip = config.clip;
      if (config.kind == DetectorKind::react) {
        model.clip.method = ClipMethod::react;
        model.clip.validate(model.head->reduced_dim());
        // Percentile is fit on post-BN ID tail values.
        Matrix post_bn(embeddings.rows(), model.clip.d);
        for (Index i = 0; i < embeddings.rows(); ++i) {
          post_bn.row(i) =
              model.head->batch_norm(embeddings.row(i).transpose()).tail(model.clip.d);
        }
        model.clip_state.react_threshold = fit_react_threshold(post_bn, model.clip.p);
      } else if (config.kind == DetectorKind::bats) {
        model.clip.method = ClipMethod::bats;
        model.clip.validate(model.head->reduced_dim());
      } else {
        model.clip.method = ClipMethod::none;
      }
      break;
    }
    case DetectorKind::maha:
      model.maha = fit_maha(embeddings, labels, num_classes, config.ridge_scale,
                            config.maha_pooled);
      break;
    case DetectorKind::knn: {
      KnnModel km;
      km.bank = embeddings;
      km.k = config.knn_k;
      km.validate();
      model.knn = std::move(km);
      break;
    }
  }
  model.validate();
  return model;
}

namespace {
constexpr char kDetectorMagic[] = "GSO-DET\0\0";
constexpr std::size_t kDetectorMagicLen = 9;
constexpr std::uint16_t kDetectorVersion = 1;
}  // namespace

void save_detector(const DetectorModel& model, const std::string& path) {
  model.validate();
  BinaryWriter w;
  w.magic(kDetectorMagic, kDetectorMagicLen);
  w.u16(kDetectorVersion);
  w.u8(static_cast<std::uint8_t>(model.kind));
  switch (model.kind) {
    case DetectorKind::msp:
    case DetectorKind::energy:
    case DetectorKind::react:
    case DetectorKind::bats: {
      const LinearHead& h = *model.head;
      w.u32(static_cast<std::uint32_t>(h.reduced_dim()));
      w.u32(static_cast<std::uint32_t>(h.num_classes()));
      w.f32_vector(h.bn_mean);
      w.f32_vector(h.bn_var);
      w.f32_vector(h.bn_scale);
      w.f32_vector(h.bn_shift);
      w.f32_matrix_rowmajor(h.fc_weight);
      w.f32_vector(h.fc_bias);
      w.f32(static_cast<float>(h.bn_epsilon));
      w.f32(static_cast<float>(model.temperature));
      w.u32(static_cast<std::uint32_t>(model.clip.d));
      w.f32(static_cast<float>(model.clip.p));
      w.f32(static_cast<float>(model.clip.lambda));
      w.f32(static_cast<float>(model.clip_state.react_threshold));
      w.f32(static_cast<float>(model.head_accuracy));
      break;
    }
    case DetectorKind::maha: {
      const MahaModel& m = *model.maha;
      w.u32(static_cast<std::uint32_t>(m.class_means.rows()));
      w.u32(static_cast<std::uint32_t>(m.class_means.cols()));
      w.f32_matrix_rowmajor(m.class_means);
      w.f32_matrix_rowmajor(m.shared_cov);
      break;
    }
    case DetectorKind::knn: {
      const KnnModel& m = *model.knn;
      w.u32(static_cast<std::uint32_t>(m.bank.rows()));
      w.u32(static_cast<std::uint32_t>(m.bank.cols()));
      w.u32(static_cast<std::uint32_t>(m.k));
      w.f32_matrix_rowmajor(m.bank);
      break;
    }
  }
  w.finish_to_file(path);
}

DetectorModel load_detector(const std::string& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic(kDetectorMagic, kDetectorMagicLen);
  const std::uint16_t ver = r.u16();
  if (ver != kDetectorVersion) {
    throw FormatError(path + ": unsupported detector version " + std::to_string(ver));
  }
  const std::uint8_t kind_byte = r.u8();
  if (kind_byte > 5) throw FormatError(path + ": unknown detector kind");

  DetectorModel model;
  model.kind = static_cast<DetectorKind>(kind_byte);
  switch (model.kind) {
    case DetectorKind::msp:
    case DetectorKind::energy:
    case DetectorKind::react:
    case DetectorKind::bats: {
      const auto K = static_cast<Index>(r.u32());
      const auto C = static_cast<Index>(r.u32());
      LinearHead h;
      h.bn_mean = r.f32_vector(K);
      h.bn_var = r.f32_vector(K);
      h.bn_scale = r.f32_vector(K);
      h.bn_shift = r.f32_vector(K);
      h.fc_weight = r.f32_matrix_rowmajor(C, K);
      h.fc_bias = r.f32_vector(C);
      h.bn_epsilon = r.f32();
      model.temperature = r.f32();
      model.clip.d = static_cast<Index>(r.u32());
      model.clip.p = r.f32();
      model.clip.lambda = r.f32();
      model.clip_state.react_threshold = r.f32();
      model.head_accuracy = r.f32();
      model.head = std::move(h);
      if (model.kind == DetectorKind::react) model.clip.method = ClipMethod::react;
      if (model.kind == DetectorKind::bats) model.clip.method = ClipMethod::bats;
      break;
    }
    case DetectorKind::maha: {
      const auto C = static_cast<Index>(r.u32());
      const auto K = static_cast<Index>(r.u32());
      MahaModel m;
      m.class_means = r.f32_matrix_rowmajor(C, K);
      m.shared_cov = r.f32_matrix_rowmajor(K, K);
      model.maha = std::move(m);
      break;
    }
    case DetectorKind::knn: {
      const auto n = static_cast<Index>(r.u32());
      const auto K = static_cast<Index>(r.u32());
      const auto k = static_cast<Index>(r.u32());
      KnnModel m;
      m.k = k;
      m.bank = r.f32_matrix_rowmajor(n, K);
      model.knn = std::move(m);
      break;
    }
  }
  r.verify_crc_and_end();
  try {
    model.validate();
    if (model.maha) model.maha->refactorize();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  } catch (const UsageError& e) {
    throw FormatError(path + ": " + e.what());
  }
  return model;
}

}  // namespace gso
