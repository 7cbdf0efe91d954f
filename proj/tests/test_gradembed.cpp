#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gso/gradembed.hpp"
#include "gso/rng.hpp"
#include "test_helpers.hpp"

using namespace gso;
using namespace gso::testing;

TEST_CASE("energy: uniform two-class logits") {
  Vector logits(2);
  logits << 0.0, 0.0;
  CHECK(energy_from_logits(logits) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("energy: constant three-class logits") {
  Vector logits(3);
  logits << 1.0, 1.0, 1.0;
  CHECK(energy_from_logits(logits) ==
        doctest::Approx(-(1.0 + std::log(3.0))).epsilon(1e-12));
}

TEST_CASE("energy: extreme logits do not overflow") {
  Vector logits(2);
  logits << 1000.0, 0.0;
  const double e = energy_from_logits(logits);
  CHECK(std::isfinite(e));
  CHECK(e == doctest::Approx(-1000.0).epsilon(1e-12));
}

TEST_CASE("energy: shift property through output biases") {
  Rng rng(71);
  RandomModel m = random_model(rng);
  Vector x = kink_free_input(m, rng);
  const double e1 = energy(m.spec, m.params, x);

  ParamVector shifted = m.params;
  const Index C = m.spec.num_classes();
  const double c = 2.5;
  for (Index i = 0; i < C; ++i) shifted.values[shifted.values.size() - C + i] += c;
  const double e2 = energy(m.spec, shifted, x);
  CHECK(std::abs((e2 - e1) + c) <= 1e-10);
}

TEST_CASE("fit_norm_stats: duplicated sample gives zero variance") {
  Rng rng(73);
  RandomModel m = random_model(rng);
  SampleBatch data;
  Vector x = kink_free_input(m, rng);
  data.inputs.resize(4, x.size());
  for (Index i = 0; i < 4; ++i) data.inputs.row(i) = x.transpose();

  NormStats stats = fit_norm_stats(m.spec, m.params, data);
  Vector raw = embed_raw(m.spec, m.params, x);
  CHECK((stats.mean - raw).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(stats.var_diag.maxCoeff() <= 1e-18);
}

TEST_CASE("fit_norm_stats: fewer than two samples is an error") {
  Rng rng(79);
  RandomModel m = random_model(rng);
  SampleBatch data;
  data.inputs = Matrix::Random(1, m.spec.input_dim());
  CHECK_THROWS_AS(fit_norm_stats(m.spec, m.params, data), UsageError);
}

TEST_CASE("fit_norm_stats: matches a dense two-pass oracle") {
  Rng rng(83);
  RandomModel m = random_model(rng);
  SampleBatch data;
  data.inputs.resize(20, m.spec.input_dim());
  for (Index i = 0; i < data.inputs.size(); ++i) data.inputs.data()[i] = rng.gaussian();

  // Odd chunk size so chunk boundaries land mid-dataset.
  NormStats stats = fit_norm_stats(m.spec, m.params, data, 1e-12, 7);

  Matrix g = materialized_gradients(m, data);
  Vector mean = g.colwise().mean().transpose();
  Matrix centered = g.rowwise() - mean.transpose();
  Vector var = centered.array().square().colwise().mean().transpose();

  CHECK((stats.mean - mean).cwiseAbs().maxCoeff() <=
        1e-10 * (mean.cwiseAbs().maxCoeff() + 1.0));
  CHECK((stats.var_diag - var).cwiseAbs().maxCoeff() <=
        1e-10 * (var.cwiseAbs().maxCoeff() + 1.0));
}

TEST_CASE("normalize: raw equal to mean maps to zero") {
  NormStats stats;
  stats.mean = Vector::Constant(3, 1.5);
  stats.var_diag = Vector::Constant(3, 2.0);
  stats.n_fit = 5;
  Vector out = normalize(stats.mean, stats);
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("normalize: zero variance with epsilon scales by 1e6") {
  NormStats stats;
  stats.mean = Vector::Zero(2);
  stats.var_diag = Vector::Zero(2);
  stats.epsilon = 1e-12;
  stats.n_fit = 2;
  Vector raw(2);
  raw << 1.0, -2.0;
  Vector out = normalize(raw, stats);
  CHECK(out[0] == doctest::Approx(1e6).epsilon(1e-9));
  CHECK(out[1] == doctest::Approx(-2e6).epsilon(1e-9));
}

TEST_CASE("normalize o fit self-check: unit moments over the fit set") {
  Rng rng(89);
  RandomModel m = random_model(rng);
  SampleBatch data;
  data.inputs.resize(30, m.spec.input_dim());
  for (Index i = 0; i < data.inputs.size(); ++i) data.inputs.data()[i] = rng.gaussian();

  NormStats stats = fit_norm_stats(m.spec, m.params, data, 1e-12);
  Matrix normalized = normalize_rows(materialized_gradients(m, data), stats);

  Vector mean = normalized.colwise().mean().transpose();
  CHECK(mean.cwiseAbs().maxCoeff() <= 1e-8);
  Matrix centered = normalized.rowwise() - mean.transpose();
  Vector var = centered.array().square().colwise().mean().transpose();
  for (Index j = 0; j < var.size(); ++j) {
    if (stats.var_diag[j] > 1e-6) {
      CHECK(std::abs(var[j] - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("softmax weights inside the gradient match the logits softmax") {
  // Zero-weight model: uniform softmax forces equal bias-block gradients.
  ModelSpec spec{{3, 4}};
  ParamVector params = zero_params(spec);
  Vector x1(3), x2(3);
  x1 << 1.0, 0.0, 0.0;
  x2 << 0.0, 1.0, 0.0;
  Vector g1 = per_sample_energy_gradient(spec, params, x1);
  Vector g2 = per_sample_energy_gradient(spec, params, x2);
  // Bias block is the last C entries.
  const Index C = 4;
  for (Index i = 0; i < C; ++i) {
    CHECK(g1[g1.size() - C + i] == doctest::Approx(-0.25).epsilon(1e-12));
    CHECK(g2[g2.size() - C + i] == doctest::Approx(-0.25).epsilon(1e-12));
  }
}

TEST_CASE("embed_raw batch version equals per-sample rows") {
  Rng rng(97);
  RandomModel m = random_model(rng);
  SampleBatch data;
  data.inputs.resize(6, m.spec.input_dim());
  for (Index i = 0; i < data.inputs.size(); ++i) data.inputs.data()[i] = rng.gaussian();
  Matrix batch = embed_raw_batch(m.spec, m.params, data);
  for (Index i = 0; i < data.size(); ++i) {
    Vector g = embed_raw(m.spec, m.params, data.inputs.row(i).transpose());
    CHECK((batch.row(i).transpose() - g).cwiseAbs().maxCoeff() == 0.0);
  }
}
