#include "gso/gradembed.hpp"

#include <cmath>

namespace gso {

void NormStats::validate() const {
  if (mean.size() != var_diag.size()) throw ConfigError("norm stats length mismatch");
  if (epsilon <= 0.0) throw ConfigError("norm stats epsilon must be positive");
  if (n_fit < 2) throw ConfigError("norm stats fit on fewer than 2 samples");
  if ((var_diag.array() < 0.0).any()) throw ConfigError("negative variance entry");
}

double energy_from_logits(const Vector& logits) {
  const double m = logits.maxCoeff();
  return -(m + std::log((logits.array() - m).exp().sum()));
}

double energy(const ModelSpec& spec, const ParamVector& params, const Vector& x) {
  if (!x.allFinite()) throw UsageError("input has non-finite values");
  ForwardTape tape = forward_tape(spec, params, x.transpose());
  return energy_from_logits(tape.logits.row(0).transpose());
}

Vector embed_raw(const ModelSpec& spec, const ParamVector& params, const Vector& x) {
  return per_sample_energy_gradient(spec, params, x);
}

Matrix embed_raw_batch(const ModelSpec& spec, const ParamVector& params,
                       const SampleBatch& batch) {
  const Index n = batch.size();
  Matrix out(n, spec.param_count());
  for (Index i = 0; i < n; ++i) {
    out.row(i) =
        per_sample_energy_gradient(spec, params, batch.inputs.row(i).transpose())
            .transpose();
  }
  return out;
}

NormStats fit_norm_stats(const ModelSpec& spec, const ParamVector& params,
                         const SampleBatch& train_data, double epsilon,
                         Index chunk_size) {
  const Index n = train_data.size();
  if (n < 2) throw UsageError("fit_norm_stats needs at least 2 samples");
  if (chunk_size < 1) throw UsageError("chunk_size must be positive");
  const Index dim = spec.param_count();

  // Pass 1: mean.
  Vector sum = Vector::Zero(dim);
  for (Index start = 0; start < n; start += chunk_size) {
    const Index len = std::min(chunk_size, n - start);
    Vector chunk_sum = Vector::Zero(dim);
    for (Index i = 0; i < len; ++i) {
      chunk_sum += per_sample_energy_gradient(
          spec, params, train_data.inputs.row(start + i).transpose());
    }
    sum += chunk_sum;
  }
  Vector mean = sum / static_cast<double>(n);

  // Pass 2: centered second moment (population, 1/n).
  Vector sq_sum = Vector::Zero(dim);
  for (Index start = 0; start < n; start += chunk_size) {
    const Index len = std::min(chunk_size, n - start);
    Vector chunk_sum = Vector::Zero(dim);
    for (Index i = 0; i < len; ++i) {
      Vector centered = per_sample_energy_gradient(
                            spec, params, train_data.inputs.row(start + i).transpose()) -
                        mean;
      chunk_sum += centered.cwiseProduct(centered);
    }
    sq_sum += chunk_sum;
  }

  NormStats stats;
  stats.mean = std::move(mean);
  stats.var_diag = sq_sum / static_cast<double>(n);
  stats.var_diag = stats.var_diag.cwiseMax(0.0);
  stats.epsilon = epsilon;
  stats.n_fit = n;
  stats.validate();
  return stats;
}

Vector normalize(const Vector& raw, const NormStats& stats) {
  if (raw.size() != stats.mean.size()) throw ConfigError("gradient length mismatch");
  return (raw - stats.mean).array() / (stats.var_diag.array() + stats.epsilon).sqrt();
}

Matrix normalize_rows(const Matrix& raw_rows, const NormStats& stats) {
  if (raw_rows.cols() != stats.mean.size()) throw ConfigError("gradient length mismatch");
  Matrix out = raw_rows.rowwise() - stats.mean.transpose();
  out.array().rowwise() /= (stats.var_diag.array() + stats.epsilon).sqrt().transpose();
  return out;
}

}  // namespace gso
