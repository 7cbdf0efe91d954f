#include "gso/subspace.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gso/rng.hpp"

namespace gso {

ModelGradientOperator::ModelGradientOperator(const ModelSpec& spec,
                                             const ParamVector& params,
                                             const SampleBatch& batch,
                                             const NormStats& stats)
    : spec_(spec), params_(params), batch_(batch), stats_(stats) {
  stats_.validate();
  if (stats_.mean.size() != spec_.param_count()) {
    throw ConfigError("norm stats length does not match model parameter count");
  }
  inv_sigma_ = (stats_.var_diag.array() + stats_.epsilon).rsqrt();
}

Matrix ModelGradientOperator::apply(const Matrix& v) const {
  // G v = (raw - mean)^T scaled: scale directions first, then subtract the
  // mean term from the directional derivatives.
  Matrix scaled = v.array().colwise() * inv_sigma_.array();
  Matrix out = param_jvp(spec_, params_, batch_, scaled);
  out.rowwise() -= (stats_.mean.transpose() * scaled).eval();
  return out;
}

Matrix ModelGradientOperator::apply_adjoint(const Matrix& u) const {
  Matrix raw = param_vjp(spec_, params_, batch_, u);
  Vector col_sums = u.colwise().sum().transpose();
  raw -= stats_.mean * col_sums.transpose();
  return raw.array().colwise() * inv_sigma_.array();
}

bool modified_gram_schmidt(Matrix& block) {
  const Index K = block.cols();
  for (int pass = 0; pass < 2; ++pass) {
    for (Index j = 0; j < K; ++j) {
      for (Index i = 0; i < j; ++i) {
        block.col(j) -= block.col(i).dot(block.col(j)) * block.col(i);
      }
      const double norm = block.col(j).norm();
      if (norm < 1e-12) return false;
      block.col(j) /= norm;
    }
  }
  return true;
}

namespace {

// Largest principal angle between two orthonormal bases.
double largest_principal_angle(const Matrix& a, const Matrix& b) {
  Eigen::JacobiSVD<Matrix> svd(a.transpose() * b);
  const double s = std::clamp(svd.singularValues().minCoeff(), -1.0, 1.0);
  return std::acos(s);
}

// Make the first coordinate with magnitude > 1e-10 positive in each column.
void apply_sign_convention(Matrix& basis) {
  for (Index j = 0; j < basis.cols(); ++j) {
    for (Index i = 0; i < basis.rows(); ++i) {
      const double v = basis(i, j);
      if (std::abs(v) > 1e-10) {
        if (v < 0) basis.col(j) = -basis.col(j);
        break;
      }
    }
  }
}

}  // namespace

PowerIterResult block_power_iteration(const GradientOperator& op, Index K,
                                      const PowerIterConfig& config) {
  const Index dim = op.dim();
  const Index n = op.samples();
  if (K < 1 || K > std::min(n, dim)) {
    throw UsageError("K must be in [1, min(n, |theta|)], got " + std::to_string(K));
  }
  if (config.iters < 1) throw UsageError("iteration count must be >= 1");

  Rng rng(config.seed);
  Matrix v(dim, K);
  for (Index j = 0; j < K; ++j)
    for (Index i = 0; i < dim; ++i) v(i, j) = rng.gaussian();
  if (!modified_gram_schmidt(v)) {
    throw UsageError("random start block is rank deficient");
  }

  PowerIterResult result;
  result.converged = false;
  for (Index t = 1; t <= config.iters; ++t) {
    Matrix prev = v;
    v = op.apply_adjoint(op.apply(v));
    if (!modified_gram_schmidt(v)) {
      throw UsageError("power iteration block became rank deficient");
    }
    result.iterations_used = t;
    if (largest_principal_angle(prev, v) < config.tol) {
      result.converged = true;
      break;
    }
  }

  // Rayleigh quotients |G v_j|^2 at the final iterate.
  Matrix gv = op.apply(v);
  Vector eigs = gv.colwise().squaredNorm().transpose();

  std::vector<Index> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return eigs[a] > eigs[b]; });

  Matrix sorted_basis(dim, K);
  Vector sorted_eigs(K);
  for (Index j = 0; j < K; ++j) {
    sorted_basis.col(j) = v.col(order[static_cast<std::size_t>(j)]);
    sorted_eigs[j] = eigs[order[static_cast<std::size_t>(j)]];
  }
  apply_sign_convention(sorted_basis);

  result.basis = std::move(sorted_basis);
  result.eigenvalues = std::move(sorted_eigs);
  return result;
}

void Subspace::validate(double ortho_tol) const {
  norm_stats.validate();
  if (basis.rows() != norm_stats.mean.size()) {
    throw ConfigError("subspace basis rows do not match norm stats length");
  }
  if (!basis.allFinite()) throw ConfigError("subspace basis has non-finite values");
  if (orthonormalized) {
    const Index K = basis.cols();
    Matrix gram = basis.transpose() * basis;
    if ((gram - Matrix::Identity(K, K)).cwiseAbs().maxCoeff() > ortho_tol) {
      throw ConfigError("subspace flagged orthonormal but columns are not");
    }
  }
  if (kind == SubspaceKind::pca) {
    if (!eigenvalues) throw ConfigError("pca subspace requires eigenvalues");
    if (!orthonormalized) throw ConfigError("pca subspace must be orthonormal");
    for (Index j = 0; j + 1 < eigenvalues->size(); ++j) {
      if ((*eigenvalues)[j] + 1e-12 < (*eigenvalues)[j + 1]) {
        throw ConfigError("pca eigenvalues are not nonincreasing");
      }
    }
    if (eigenvalues->size() > 0 && eigenvalues->minCoeff() < -1e-12) {
      throw ConfigError("negative pca eigenvalue");
    }
  }
}

Subspace extract_pca_subspace(const ModelSpec& spec, const ParamVector& params,
                              const SampleBatch& train_data, Index K,
                              const PowerIterConfig& config) {
  NormStats stats =
      fit_norm_stats(spec, params, train_data, 1e-12, config.chunk_size);
  ModelGradientOperator op(spec, params, train_data, stats);
  PowerIterResult pr = block_power_iteration(op, K, config);

  Subspace sub;
  sub.basis = std::move(pr.basis);
  sub.eigenvalues = std::move(pr.eigenvalues);
  sub.kind = SubspaceKind::pca;
  sub.norm_stats = std::move(stats);
  sub.orthonormalized = true;
  sub.converged = pr.converged;
  // trace(G^T G) = sum_i |G(x_i)|^2 = n * sum_j var_j / (var_j + eps).
  sub.total_variance =
      static_cast<double>(train_data.size()) *
      (sub.norm_stats.var_diag.array() /
       (sub.norm_stats.var_diag.array() + sub.norm_stats.epsilon))
          .sum();
  sub.validate();
  return sub;
}

Subspace extract_classmean_subspace(const Matrix& normalized_rows,
                                    const std::vector<int>& labels,
                                    Index num_classes, const NormStats& stats,
                                    bool orthonormalize) {
  if (static_cast<Index>(labels.size()) != normalized_rows.rows()) {
    throw UsageError("label count does not match gradient rows");
  }
  Subspace sub;
  sub.basis = Matrix::Zero(normalized_rows.cols(), num_classes);
  std::vector<Index> counts(static_cast<std::size_t>(num_classes), 0);
  for (Index i = 0; i < normalized_rows.rows(); ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= num_classes) throw UsageError("label out of range");
    sub.basis.col(c) += normalized_rows.row(i).transpose();
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Index c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw UsageError("class " + std::to_string(c) + " has no samples");
    }
    sub.basis.col(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  if (orthonormalize) {
    if (!modified_gram_schmidt(sub.basis)) {
      throw UsageError("class-mean basis is rank deficient; cannot orthonormalize");
    }
    sub.orthonormalized = true;
  }
  sub.kind = SubspaceKind::class_mean;
  sub.norm_stats = stats;
  sub.total_variance = normalized_rows.squaredNorm();
  sub.validate();
  return sub;
}

Vector project(const Subspace& sub, const Vector& normalized_grad) {
  if (normalized_grad.size() != sub.basis.rows()) {
    throw ConfigError("gradient length does not match subspace dimension");
  }
  return sub.basis.transpose() * normalized_grad;
}

Matrix project_rows(const Subspace& sub, const Matrix& normalized_rows) {
  if (normalized_rows.cols() != sub.basis.rows()) {
    throw ConfigError("gradient length does not match subspace dimension");
  }
  return normalized_rows * sub.basis;
}

Spectrum spectrum(const Subspace& sub) {
  if (sub.kind != SubspaceKind::pca) {
    throw UsageError("spectrum is only defined for pca subspaces");
  }
  Spectrum sp;
  sp.eigenvalues = *sub.eigenvalues;
  sp.total_variance = sub.total_variance;
  sp.explained_ratio = sp.eigenvalues / sp.total_variance;
  sp.cumulative_ratio.resize(sp.eigenvalues.size());
  double acc = 0.0;
  for (Index j = 0; j < sp.eigenvalues.size(); ++j) {
    acc += sp.explained_ratio[j];
    sp.cumulative_ratio[j] = acc;
  }
  return sp;
}

namespace {
constexpr char kSubspaceMagic[] = "GSO-SUBSP\0";
constexpr std::size_t kSubspaceMagicLen = 10;
constexpr std::uint16_t kSubspaceVersion = 1;
}  // namespace

void save_subspace(const Subspace& sub, const std::string& path) {
  sub.validate(1e-4);
  BinaryWriter w;
  w.magic(kSubspaceMagic, kSubspaceMagicLen);
  w.u16(kSubspaceVersion);
  w.u8(static_cast<std::uint8_t>(sub.kind));
  w.u64(static_cast<std::uint64_t>(sub.basis.rows()));
  w.u32(static_cast<std::uint32_t>(sub.basis.cols()));
  w.u8(sub.orthonormalized ? 1 : 0);
  w.f32_vector(sub.norm_stats.mean);
  w.f32_vector(sub.norm_stats.var_diag);
  w.f32_matrix_colmajor(sub.basis);
  if (sub.kind == SubspaceKind::pca) {
    w.f32_vector(*sub.eigenvalues);
  }
  w.f32(static_cast<float>(sub.total_variance));
  w.finish_to_file(path);
}

Subspace load_subspace(const std::string& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic(kSubspaceMagic, kSubspaceMagicLen);
  const std::uint16_t ver = r.u16();
  if (ver != kSubspaceVersion) {
    throw FormatError(path + ": unsupported subspace version " + std::to_string(ver));
  }
  const std::uint8_t kind_byte = r.u8();
  if (kind_byte > 1) throw FormatError(path + ": unknown subspace kind");
  const auto dim = static_cast<Index>(r.u64());
  const auto K = static_cast<Index>(r.u32());
  const bool ortho = r.u8() != 0;

  Subspace sub;
  sub.kind = static_cast<SubspaceKind>(kind_byte);
  sub.orthonormalized = ortho;
  sub.norm_stats.mean = r.f32_vector(dim);
  sub.norm_stats.var_diag = r.f32_vector(dim);
  sub.norm_stats.epsilon = 1e-12;
  sub.norm_stats.n_fit = 2;  // actual count is not persisted
  sub.basis = r.f32_matrix_colmajor(dim, K);
  if (sub.kind == SubspaceKind::pca) {
    sub.eigenvalues = r.f32_vector(K);
  }
  sub.total_variance = r.f32();
  r.verify_crc_and_end();
  try {
    // f32 storage loosens the in-memory orthonormality bound.
    sub.validate(1e-4);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }
  return sub;
}

}  // namespace gso
