#pragma once

#include <map>
#include <string>
#include <vector>

#include "gso/common.hpp"
#include "gso/io.hpp"

namespace gso {

enum class Activation { relu };

// Fully-connected ReLU classifier. layer_dims = {d_in, h1, ..., C}.
// When has_affine_norm_per_hidden is set, each hidden linear layer is followed
// by an elementwise learnable scale/shift before the ReLU.
struct ModelSpec {
  std::vector<Index> layer_dims;
  Activation activation = Activation::relu;
  bool has_affine_norm_per_hidden = false;

  Index num_linear_layers() const { return static_cast<Index>(layer_dims.size()) - 1; }
  Index input_dim() const { return layer_dims.front(); }
  Index num_classes() const { return layer_dims.back(); }
  Index param_count() const;
  void validate() const;
};

struct ParamSlice {
  std::string layer_id;
  Index offset;
  Index length;
};

// Flat parameter vector plus a manifest describing the per-layer slices.
struct ParamVector {
  Vector values;
  std::vector<ParamSlice> manifest;

  void validate(const ModelSpec& spec) const;
};

std::vector<ParamSlice> build_manifest(const ModelSpec& spec);
ParamVector zero_params(const ModelSpec& spec);

// Uniform init in +-1/sqrt(fan_in) for weights, zeros for biases; affine norm
// starts at scale 1, shift 0.
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

// Recorded straight-line forward pass. Reverse-mode and forward-mode both
// replay this tape, sharing one set of ReLU masks.
struct ForwardTape {
  Matrix input;                    // n x d_in
  std::vector<Matrix> linear_out;  // z_l = a_l W_l^T + b_l, per linear layer
  std::vector<Matrix> pre_relu;    // affine output feeding the ReLU
  std::vector<Matrix> hidden_act;  // post-ReLU activation per hidden layer
  std::vector<Matrix> relu_mask;   // 1 where pre-ReLU value > 0, else 0
  Matrix logits;                   // n x C
};

ForwardTape forward_tape(const ModelSpec& spec, const ParamVector& params,
                         const Matrix& inputs);

Matrix forward(const ModelSpec& spec, const ParamVector& params,
               const SampleBatch& batch);

// Reverse sweep: accumulates sum_i d(logits_i) contributions into a flat
// parameter gradient. dlogits is n x C.
Vector backprop_params(const ModelSpec& spec, const ParamVector& params,
                       const ForwardTape& tape, const Matrix& dlogits);

// Label-free energy gradient of a single input:
//   -sum_y p(y|x) * d f^y(x) / d theta.
Vector per_sample_energy_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Vector& x);

// Directional derivatives of the per-sample energy along parameter directions.
// Returns n x K with entry (i, j) = <grad E(x_i), v_j>, computed by tangent
// propagation without materializing per-sample gradients.
Matrix param_jvp(const ModelSpec& spec, const ParamVector& params,
                 const SampleBatch& batch, const Matrix& directions);

// Weighted accumulation of per-sample energy gradients. Returns |theta| x K
// with column j = sum_i weights(i, j) * grad E(x_i), one reverse sweep per
// column over fixed-order batch chunks.
Matrix param_vjp(const ModelSpec& spec, const ParamVector& params,
                 const SampleBatch& batch, const Matrix& weights);

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  Index epochs = 50;
  Index batch_size = 32;
  std::uint64_t seed = 0;
  double label_smoothing = 0.0;
};

struct TrainResult {
  ParamVector params;
  double train_accuracy = 0.0;
};

// SGD with momentum on cross-entropy; deterministic given the seed.
TrainResult train_classifier(const ModelSpec& spec, const SampleBatch& data,
                             const TrainConfig& config);

double accuracy(const ModelSpec& spec, const ParamVector& params,
                const SampleBatch& data);

// Model artifact: magic "GSO-MODEL\0", version u16=1, u64 param count,
// u32 manifest length + text manifest (key=value lines), f32 blob, CRC32.
void save_model(const ModelSpec& spec, const ParamVector& params,
                const std::map<std::string, std::string>& metadata,
                const std::string& path);

struct LoadedModel {
  ModelSpec spec;
  ParamVector params;
  std::map<std::string, std::string> metadata;
};

LoadedModel load_model(const std::string& path);

}  // namespace gso
