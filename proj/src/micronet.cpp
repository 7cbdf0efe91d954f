#include "gso/micronet.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "gso/rng.hpp"

namespace gso {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapRM = Eigen::Map<const RowMajorMatrix>;
using ConstMapVec = Eigen::Map<const Vector>;
using MapRM = Eigen::Map<RowMajorMatrix>;
using MapVec = Eigen::Map<Vector>;

struct LayerLayout {
  Index in = 0;
  Index out = 0;
  Index w_off = 0;
  Index b_off = 0;
  Index g_off = -1;  // affine scale, hidden layers only
  Index s_off = -1;  // affine shift
  bool affine = false;
};

std::vector<LayerLayout> layer_layouts(const ModelSpec& spec) {
  std::vector<LayerLayout> out;
  Index off = 0;
  const Index L = spec.num_linear_layers();
  for (Index l = 0; l < L; ++l) {
    LayerLayout lay;
    lay.in = spec.layer_dims[static_cast<std::size_t>(l)];
    lay.out = spec.layer_dims[static_cast<std::size_t>(l + 1)];
    lay.w_off = off;
    off += lay.in * lay.out;
    lay.b_off = off;
    off += lay.out;
    if (spec.has_affine_norm_per_hidden && l + 1 < L) {
      lay.affine = true;
      lay.g_off = off;
      off += lay.out;
      lay.s_off = off;
      off += lay.out;
    }
    out.push_back(lay);
  }
  return out;
}

ConstMapRM weight_map(const Vector& flat, const LayerLayout& lay) {
  return ConstMapRM(flat.data() + lay.w_off, lay.out, lay.in);
}
ConstMapVec bias_map(const Vector& flat, const LayerLayout& lay) {
  return ConstMapVec(flat.data() + lay.b_off, lay.out);
}
ConstMapVec scale_map(const Vector& flat, const LayerLayout& lay) {
  return ConstMapVec(flat.data() + lay.g_off, lay.out);
}
ConstMapVec shift_map(const Vector& flat, const LayerLayout& lay) {
  return ConstMapVec(flat.data() + lay.s_off, lay.out);
}

// Row-wise softmax with max shift.
Matrix softmax_rows(const Matrix& logits) {
  Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
  Matrix expd = shifted.array().exp();
  return expd.array().colwise() / expd.rowwise().sum().array();
}

}  // namespace

Index ModelSpec::param_count() const {
  Index total = 0;
  for (const auto& lay : layer_layouts(*this)) {
    total += lay.in * lay.out + lay.out;
    if (lay.affine) total += 2 * lay.out;
  }
  return total;
}

void ModelSpec::validate() const {
  if (layer_dims.size() < 2) throw ConfigError("layer_dims needs at least 2 entries");
  for (Index d : layer_dims) {
    if (d < 1) throw ConfigError("layer_dims entries must be positive");
  }
  if (num_classes() < 2) throw ConfigError("class count must be >= 2");
}

void ParamVector::validate(const ModelSpec& spec) const {
  if (values.size() != spec.param_count()) {
    throw ConfigError("parameter vector length " + std::to_string(values.size()) +
                      " does not match spec param count " +
                      std::to_string(spec.param_count()));
  }
  if (!values.allFinite()) throw ConfigError("parameter vector has non-finite values");
  Index expect = 0;
  for (const auto& s : manifest) {
    if (s.offset != expect) throw ConfigError("manifest slices not contiguous");
    expect += s.length;
  }
  if (expect != values.size()) throw ConfigError("manifest does not cover parameter vector");
}

std::vector<ParamSlice> build_manifest(const ModelSpec& spec) {
  std::vector<ParamSlice> manifest;
  const auto lays = layer_layouts(spec);
  for (std::size_t l = 0; l < lays.size(); ++l) {
    const auto& lay = lays[l];
    const std::string id = "L" + std::to_string(l);
    manifest.push_back({id + ".W", lay.w_off, lay.in * lay.out});
    manifest.push_back({id + ".b", lay.b_off, lay.out});
    if (lay.affine) {
      manifest.push_back({id + ".scale", lay.g_off, lay.out});
      manifest.push_back({id + ".shift", lay.s_off, lay.out});
    }
  }
  return manifest;
}

ParamVector zero_params(const ModelSpec& spec) {
  ParamVector pv;
  pv.values = Vector::Zero(spec.param_count());
  pv.manifest = build_manifest(spec);
  if (spec.has_affine_norm_per_hidden) {
    for (const auto& lay : layer_layouts(spec)) {
      if (lay.affine) {
        MapVec(pv.values.data() + lay.g_off, lay.out).setOnes();
      }
    }
  }
  return pv;
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector pv = zero_params(spec);
  Rng rng(seed);
  for (const auto& lay : layer_layouts(spec)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(lay.in));
    for (Index i = 0; i < lay.in * lay.out; ++i) {
      pv.values[lay.w_off + i] = rng.uniform(-bound, bound);
    }
  }
  return pv;
}

ForwardTape forward_tape(const ModelSpec& spec, const ParamVector& params,
                         const Matrix& inputs) {
  if (inputs.cols() != spec.input_dim()) {
    throw ConfigError("input dim " + std::to_string(inputs.cols()) +
                      " does not match model input dim " +
                      std::to_string(spec.input_dim()));
  }
  const auto lays = layer_layouts(spec);
  const Index L = spec.num_linear_layers();

  ForwardTape tape;
  tape.input = inputs;
  Matrix a = inputs;
  for (Index l = 0; l < L; ++l) {
    const auto& lay = lays[static_cast<std::size_t>(l)];
    Matrix z = a * weight_map(params.values, lay).transpose();
    z.rowwise() += bias_map(params.values, lay).transpose();
    tape.linear_out.push_back(z);
    if (l + 1 < L) {
      Matrix h = z;
      if (lay.affine) {
        h.array().rowwise() *= scale_map(params.values, lay).transpose().array();
        h.rowwise() += shift_map(params.values, lay).transpose();
      }
      // Subgradient convention: ReLU'(0) = 0.
      Matrix mask = (h.array() > 0.0).cast<double>();
      a = h.cwiseProduct(mask);
      tape.pre_relu.push_back(std::move(h));
      tape.relu_mask.push_back(std::move(mask));
      tape.hidden_act.push_back(a);
    } else {
      tape.logits = z;
    }
  }
  return tape;
}

Matrix forward(const ModelSpec& spec, const ParamVector& params,
               const SampleBatch& batch) {
  params.validate(spec);
  batch.validate(static_cast<int>(spec.num_classes()));
  return forward_tape(spec, params, batch.inputs).logits;
}

Vector backprop_params(const ModelSpec& spec, const ParamVector& params,
                       const ForwardTape& tape, const Matrix& dlogits) {
  const auto lays = layer_layouts(spec);
  const Index L = spec.num_linear_layers();
  Vector grad = Vector::Zero(spec.param_count());

  Matrix dz = dlogits;
  for (Index l = L - 1; l >= 0; --l) {
    const auto& lay = lays[static_cast<std::size_t>(l)];
    const Matrix& a = (l == 0) ? tape.input : tape.hidden_act[static_cast<std::size_t>(l - 1)];
    MapRM(grad.data() + lay.w_off, lay.out, lay.in) = dz.transpose() * a;
    MapVec(grad.data() + lay.b_off, lay.out) = dz.colwise().sum().transpose();
    if (l == 0) break;

    Matrix da = dz * weight_map(params.values, lay);
    const auto& prev = lays[static_cast<std::size_t>(l - 1)];
    Matrix dh = da.cwiseProduct(tape.relu_mask[static_cast<std::size_t>(l - 1)]);
    if (prev.affine) {
      const Matrix& z = tape.linear_out[static_cast<std::size_t>(l - 1)];
      MapVec(grad.data() + prev.g_off, prev.out) =
          dh.cwiseProduct(z).colwise().sum().transpose();
      MapVec(grad.data() + prev.s_off, prev.out) = dh.colwise().sum().transpose();
      dh.array().rowwise() *= scale_map(params.values, prev).transpose().array();
    }
    dz = std::move(dh);
  }
  return grad;
}

Vector per_sample_energy_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Vector& x) {
  params.validate(spec);
  if (x.size() != spec.input_dim()) throw ConfigError("input dim mismatch");
  if (!x.allFinite()) throw UsageError("input has non-finite values");
  ForwardTape tape = forward_tape(spec, params, x.transpose());
  Matrix dlogits = -softmax_rows(tape.logits);
  return backprop_params(spec, params, tape, dlogits);
}

Matrix param_jvp(const ModelSpec& spec, const ParamVector& params,
                 const SampleBatch& batch, const Matrix& directions) {
  params.validate(spec);
  batch.validate(static_cast<int>(spec.num_classes()));
  if (directions.rows() != spec.param_count()) {
    throw ConfigError("direction rows must equal parameter count");
  }
  if (directions.cols() < 1) throw UsageError("need at least one direction");
  if (!directions.allFinite()) throw UsageError("directions have non-finite values");

  const auto lays = layer_layouts(spec);
  const Index L = spec.num_linear_layers();
  const Index n = batch.size();
  const Index K = directions.cols();

  ForwardTape tape = forward_tape(spec, params, batch.inputs);
  Matrix neg_p = -softmax_rows(tape.logits);

  Matrix out(n, K);
  for (Index j = 0; j < K; ++j) {
    const Vector& v = directions.col(j);
    Matrix ta = Matrix::Zero(n, spec.input_dim());
    Matrix tlogits;
    for (Index l = 0; l < L; ++l) {
      const auto& lay = lays[static_cast<std::size_t>(l)];
      const Matrix& a = (l == 0) ? tape.input : tape.hidden_act[static_cast<std::size_t>(l - 1)];
      Matrix tz = a * ConstMapRM(v.data() + lay.w_off, lay.out, lay.in).transpose() +
                  ta * weight_map(params.values, lay).transpose();
      tz.rowwise() += ConstMapVec(v.data() + lay.b_off, lay.out).transpose();
      if (l + 1 < L) {
        Matrix th = tz;
        if (lay.affine) {
          th.array().rowwise() *= scale_map(params.values, lay).transpose().array();
          Matrix zg = tape.linear_out[static_cast<std::size_t>(l)];
          zg.array().rowwise() *=
              ConstMapVec(v.data() + lay.g_off, lay.out).transpose().array();
          th += zg;
          th.rowwise() += ConstMapVec(v.data() + lay.s_off, lay.out).transpose();
        }
        ta = th.cwiseProduct(tape.relu_mask[static_cast<std::size_t>(l)]);
      } else {
        tlogits = std::move(tz);
      }
    }
    out.col(j) = neg_p.cwiseProduct(tlogits).rowwise().sum();
  }
  return out;
}

Matrix param_vjp(const ModelSpec& spec, const ParamVector& params,
                 const SampleBatch& batch, const Matrix& weights) {
  params.validate(spec);
  batch.validate(static_cast<int>(spec.num_classes()));
  if (weights.rows() != batch.size()) {
    throw ConfigError("weight rows must equal batch size");
  }
  if (!weights.allFinite()) throw UsageError("weights have non-finite values");

  const Index K = weights.cols();
  const Index n = batch.size();
  Matrix out = Matrix::Zero(spec.param_count(), K);

  // Fixed sequential chunk order keeps the accumulation bitwise reproducible.
  const Index chunk = 256;
  for (Index start = 0; start < n; start += chunk) {
    const Index len = std::min(chunk, n - start);
    ForwardTape tape = forward_tape(spec, params, batch.inputs.middleRows(start, len));
    Matrix neg_p = -softmax_rows(tape.logits);
    for (Index j = 0; j < K; ++j) {
      Matrix dlogits = neg_p.array().colwise() *
                       weights.col(j).segment(start, len).array();
      out.col(j) += backprop_params(spec, params, tape, dlogits);
    }
  }
  return out;
}

TrainResult train_classifier(const ModelSpec& spec, const SampleBatch& data,
                             const TrainConfig& config) {
  spec.validate();
  if (!data.labels) throw UsageError("training requires labels");
  if (config.epochs < 1) throw UsageError("epochs must be >= 1");
  if (config.batch_size < 1) throw UsageError("batch_size must be >= 1");
  data.validate(static_cast<int>(spec.num_classes()));

  const Index n = data.size();
  const Index C = spec.num_classes();
  ParamVector params = init_params(spec, config.seed);
  Vector velocity = Vector::Zero(params.values.size());
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min(config.batch_size, n - start);
      Matrix xb(len, spec.input_dim());
      std::vector<int> yb(static_cast<std::size_t>(len));
      for (Index i = 0; i < len; ++i) {
        const Index src = order[static_cast<std::size_t>(start + i)];
        xb.row(i) = data.inputs.row(src);
        yb[static_cast<std::size_t>(i)] = (*data.labels)[static_cast<std::size_t>(src)];
      }
      ForwardTape tape = forward_tape(spec, params, xb);
      Matrix p = softmax_rows(tape.logits);
      // Cross-entropy with label smoothing: target = (1-ls)*onehot + ls/C.
      Matrix dlogits = p;
      dlogits.array() -= config.label_smoothing / static_cast<double>(C);
      for (Index i = 0; i < len; ++i) {
        dlogits(i, yb[static_cast<std::size_t>(i)]) -= 1.0 - config.label_smoothing;
      }
      dlogits /= static_cast<double>(len);

      Vector grad = backprop_params(spec, params, tape, dlogits);
      if (config.weight_decay != 0.0) grad += config.weight_decay * params.values;
      velocity = config.momentum * velocity + grad;
      params.values -= config.lr * velocity;
    }
  }

  TrainResult result;
  result.params = std::move(params);
  result.train_accuracy = accuracy(spec, result.params, data);
  return result;
}

double accuracy(const ModelSpec& spec, const ParamVector& params,
                const SampleBatch& data) {
  if (!data.labels) throw UsageError("accuracy requires labels");
  Matrix logits = forward(spec, params, data);
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index pred;
    logits.row(i).maxCoeff(&pred);
    if (pred == (*data.labels)[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

namespace {
constexpr char kModelMagic[] = "GSO-MODEL\0";
constexpr std::size_t kModelMagicLen = 10;
constexpr std::uint16_t kModelVersion = 1;
}  // namespace

void save_model(const ModelSpec& spec, const ParamVector& params,
                const std::map<std::string, std::string>& metadata,
                const std::string& path) {
  params.validate(spec);
  std::ostringstream manifest;
  manifest << "layer_dims=";
  for (std::size_t i = 0; i < spec.layer_dims.size(); ++i) {
    if (i) manifest << ',';
    manifest << spec.layer_dims[i];
  }
  manifest << "\nactivation=relu\naffine_norm="
           << (spec.has_affine_norm_per_hidden ? 1 : 0) << "\n";
  for (const auto& [key, value] : metadata) {
    manifest << "meta." << key << '=' << value << '\n';
  }
  const std::string text = manifest.str();

  BinaryWriter w;
  w.magic(kModelMagic, kModelMagicLen);
  w.u16(kModelVersion);
  w.u64(static_cast<std::uint64_t>(params.values.size()));
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.f32_vector(params.values);
  w.finish_to_file(path);
}

LoadedModel load_model(const std::string& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic(kModelMagic, kModelMagicLen);
  const std::uint16_t ver = r.u16();
  if (ver != kModelVersion) {
    throw FormatError(path + ": unsupported model version " + std::to_string(ver));
  }
  const auto count = static_cast<Index>(r.u64());
  const auto manifest_len = r.u32();
  const auto manifest_bytes = r.raw(manifest_len);
  const std::string text(manifest_bytes.begin(), manifest_bytes.end());

  LoadedModel model;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "layer_dims") {
      std::istringstream ds(value);
      std::string tok;
      while (std::getline(ds, tok, ',')) {
        model.spec.layer_dims.push_back(static_cast<Index>(std::stoll(tok)));
      }
    } else if (key == "activation") {
      if (value != "relu") throw FormatError(path + ": unknown activation " + value);
    } else if (key == "affine_norm") {
      model.spec.has_affine_norm_per_hidden = (value == "1");
    } else if (key.rfind("meta.", 0) == 0) {
      model.metadata[key.substr(5)] = value;
    }
  }
  model.spec.validate();
  if (model.spec.param_count() != count) {
    throw FormatError(path + ": parameter count does not match layer dims");
  }
  model.params.values = r.f32_vector(count);
  model.params.manifest = build_manifest(model.spec);
  r.verify_crc_and_end();
  model.params.validate(model.spec);
  return model;
}

}  // namespace gso
