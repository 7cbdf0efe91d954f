#pragma once

#include "gso/common.hpp"
#include "gso/micronet.hpp"

namespace gso {

// Per-dimension mean/variance of raw energy gradients over the training set.
// Variance is the centered population second moment (1/n).
struct NormStats {
  Vector mean;      // length |theta|
  Vector var_diag;  // length |theta|, >= 0
  double epsilon = 1e-12;
  Index n_fit = 0;

  void validate() const;
};

// Label-free energy: -log sum_y exp(f^y(x)), max-shifted.
double energy(const ModelSpec& spec, const ParamVector& params, const Vector& x);

double energy_from_logits(const Vector& logits);

// Raw per-sample energy gradient (delegates to the reverse sweep).
Vector embed_raw(const ModelSpec& spec, const ParamVector& params, const Vector& x);

// Raw gradients for a whole batch, one row per sample.
Matrix embed_raw_batch(const ModelSpec& spec, const ParamVector& params,
                       const SampleBatch& batch);

// Streaming fit of mean then centered second moment, fixed chunk order.
NormStats fit_norm_stats(const ModelSpec& spec, const ParamVector& params,
                         const SampleBatch& train_data, double epsilon = 1e-12,
                         Index chunk_size = 256);

// out_j = (raw_j - mean_j) / sqrt(var_diag_j + epsilon)
Vector normalize(const Vector& raw, const NormStats& stats);

Matrix normalize_rows(const Matrix& raw_rows, const NormStats& stats);

}  // namespace gso
