#pragma once

#include <optional>
#include <string>

#include "gso/common.hpp"
#include "gso/gradembed.hpp"
#include "gso/micronet.hpp"

namespace gso {

// Abstract normalized-gradient matrix operator. apply is G v (rows are
// per-sample normalized gradients), apply_adjoint is G^T u.
class GradientOperator {
public:
  virtual ~GradientOperator() = default;
  virtual Index dim() const = 0;      // |theta|
  virtual Index samples() const = 0;  // n
  virtual Matrix apply(const Matrix& v) const = 0;          // dim x K -> n x K
  virtual Matrix apply_adjoint(const Matrix& u) const = 0;  // n x K -> dim x K
};

// Explicit matrix backend, used by tests and the class-mean path.
class DenseGradientOperator final : public GradientOperator {
public:
  explicit DenseGradientOperator(Matrix rows) : rows_(std::move(rows)) {}
  Index dim() const override { return rows_.cols(); }
  Index samples() const override { return rows_.rows(); }
  Matrix apply(const Matrix& v) const override { return rows_ * v; }
  Matrix apply_adjoint(const Matrix& u) const override {
    return rows_.transpose() * u;
  }

private:
  Matrix rows_;
};

// Model-backed operator with mean/variance normalization folded into the
// forward and adjoint applications, so per-sample gradients are never
// materialized.
class ModelGradientOperator final : public GradientOperator {
public:
  ModelGradientOperator(const ModelSpec& spec, const ParamVector& params,
                        const SampleBatch& batch, const NormStats& stats);
  Index dim() const override { return spec_.param_count(); }
  Index samples() const override { return batch_.size(); }
  Matrix apply(const Matrix& v) const override;
  Matrix apply_adjoint(const Matrix& u) const override;

private:
  const ModelSpec& spec_;
  const ParamVector& params_;
  const SampleBatch& batch_;
  const NormStats& stats_;
  Vector inv_sigma_;  // (var_diag + eps)^(-1/2)
};

// Modified Gram-Schmidt with one re-orthogonalization pass. Returns false if
// a column is numerically rank deficient.
bool modified_gram_schmidt(Matrix& block);

struct PowerIterConfig {
  Index iters = 30;
  std::uint64_t seed = 0;
  double tol = 1e-6;
  Index chunk_size = 256;
};

struct PowerIterResult {
  Matrix basis;        // dim x K, orthonormal columns
  Vector eigenvalues;  // nonincreasing, |G v_j|^2 at the final iterate
  bool converged = false;
  Index iterations_used = 0;
};

PowerIterResult block_power_iteration(const GradientOperator& op, Index K,
                                      const PowerIterConfig& config);

enum class SubspaceKind : std::uint8_t { pca = 0, class_mean = 1 };

struct Subspace {
  Matrix basis;  // |theta| x K
  std::optional<Vector> eigenvalues;
  SubspaceKind kind = SubspaceKind::pca;
  NormStats norm_stats;
  bool orthonormalized = false;
  bool converged = true;
  double total_variance = 0.0;  // trace of the normalized-gradient covariance

  Index reduced_dim() const { return basis.cols(); }
  void validate(double ortho_tol = 1e-8) const;
};

// Fits NormStats on train_data, then runs block power iteration through the
// model-backed operator.
Subspace extract_pca_subspace(const ModelSpec& spec, const ParamVector& params,
                              const SampleBatch& train_data, Index K,
                              const PowerIterConfig& config);

// Column c = mean of normalized gradient rows with label c.
Subspace extract_classmean_subspace(const Matrix& normalized_rows,
                                    const std::vector<int>& labels,
                                    Index num_classes, const NormStats& stats,
                                    bool orthonormalize = false);

Vector project(const Subspace& sub, const Vector& normalized_grad);
Matrix project_rows(const Subspace& sub, const Matrix& normalized_rows);

struct Spectrum {
  Vector eigenvalues;
  Vector explained_ratio;
  Vector cumulative_ratio;
  double total_variance = 0.0;
};

Spectrum spectrum(const Subspace& sub);

// Subspace artifact: magic "GSO-SUBSP\0", version u16=1, kind u8, u64 |theta|,
// u32 K, orthonormalized u8, f32 blocks (mean, var_diag, basis column-major,
// eigenvalues, total_variance), CRC32.
void save_subspace(const Subspace& sub, const std::string& path);
Subspace load_subspace(const std::string& path);

}  // namespace gso
