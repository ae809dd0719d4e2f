#pragma once

// Minimal dense feed-forward network with reverse-mode gradients and a
// deterministic mini-batch SGD trainer.  The network is viewed as a
// composition head(feature(x)): `split_index` marks the first layer of the
// prediction head, and both halves must contain at least one affine layer.
// Hidden layers use ReLU, the output layer is linear.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fcp/matrix.hpp"
#include "fcp/rng.hpp"

namespace fcp {

struct MlpSpec {
  std::vector<std::size_t> layer_widths;  // input, hidden..., output

  std::size_t num_layers() const {
    return layer_widths.empty() ? 0 : layer_widths.size() - 1;
  }
  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t output_width() const { return layer_widths.back(); }

  void validate() const {
    if (layer_widths.size() < 2)
      throw std::invalid_argument("MlpSpec: need at least two widths (one affine map)");
    for (std::size_t w : layer_widths)
      if (w == 0) throw std::invalid_argument("MlpSpec: all layer widths must be >= 1");
  }
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;
};

struct MlpParams {
  std::vector<DenseLayer> layers;
};

struct LossKind {
  enum Kind { kMse, kPinball, kSoftmaxCrossEntropy };
  Kind kind = kMse;
  double tau = 0.5;  // pinball level, only meaningful for kPinball

  static LossKind mse() { return {kMse, 0.5}; }
  static LossKind pinball(double tau) {
    if (!(tau > 0.0 && tau < 1.0))
      throw std::invalid_argument("pinball tau must lie strictly inside (0,1)");
    return {kPinball, tau};
  }
  static LossKind softmax_cross_entropy() { return {kSoftmaxCrossEntropy, 0.5}; }
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (weight_decay < 0.0)
      throw std::invalid_argument("TrainConfig: weight_decay must be nonnegative");
  }
};

namespace detail {

// Seed salts for the independent random streams used below.
inline constexpr std::uint64_t kStreamInit = 0x11;
inline constexpr std::uint64_t kStreamShuffle = 0x12;

inline void affine(const DenseLayer& layer, std::span<const double> in, Vector& out) {
  if (layer.weight.cols != in.size())
    throw std::invalid_argument("layer input dimension mismatch");
  out.assign(layer.weight.rows, 0.0);
  for (std::size_t i = 0; i < layer.weight.rows; ++i)
    out[i] = layer.bias[i] + dot(layer.weight.row(i), in);
}

inline void relu_inplace(Vector& v) {
  for (double& x : v)
    if (x < 0.0) x = 0.0;
}

}  // namespace detail

// Applies layers [begin, end); ReLU after every layer except the last layer of
// the full stack.
inline Vector run_layers(const MlpParams& params, std::size_t begin, std::size_t end,
                         std::span<const double> x) {
  const std::size_t total = params.layers.size();
  Vector cur(x.begin(), x.end());
  Vector next;
  for (std::size_t l = begin; l < end; ++l) {
    detail::affine(params.layers[l], cur, next);
    if (l + 1 < total) detail::relu_inplace(next);
    cur.swap(next);
  }
  return cur;
}

inline Vector mlp_forward(const MlpParams& params, std::span<const double> x) {
  return run_layers(params, 0, params.layers.size(), x);
}

inline Vector softmax(std::span<const double> logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  Vector p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// A trained network partitioned into feature extractor and prediction head.
// Immutable after construction; all member operations are pure.
class SplitModel {
 public:
  SplitModel(MlpSpec spec, MlpParams params, std::size_t split_index)
      : spec_(std::move(spec)), params_(std::move(params)), split_index_(split_index) {
    spec_.validate();
    if (params_.layers.size() != spec_.num_layers())
      throw std::invalid_argument("SplitModel: params/spec layer count mismatch");
    for (std::size_t l = 0; l < params_.layers.size(); ++l) {
      const DenseLayer& layer = params_.layers[l];
      if (layer.weight.rows != spec_.layer_widths[l + 1] ||
          layer.weight.cols != spec_.layer_widths[l] ||
          layer.bias.size() != spec_.layer_widths[l + 1])
        throw std::invalid_argument("SplitModel: layer shape mismatch");
      if (!layer.weight.all_finite() || !all_finite(layer.bias))
        throw std::invalid_argument("SplitModel: non-finite parameter");
    }
    if (split_index_ < 1 || split_index_ >= spec_.num_layers())
      throw std::invalid_argument(
          "SplitModel: split_index must leave at least one affine layer on each side");
  }

  std::size_t num_layers() const { return spec_.num_layers(); }
  std::size_t split_index() const { return split_index_; }
  std::size_t input_width() const { return spec_.input_width(); }
  std::size_t output_width() const { return spec_.output_width(); }
  std::size_t feature_width() const { return spec_.layer_widths[split_index_]; }
  const MlpSpec& spec() const { return spec_; }
  const MlpParams& params() const { return params_; }
  const DenseLayer& layer(std::size_t l) const { return params_.layers[l]; }
  bool relu_after(std::size_t l) const { return l + 1 < num_layers(); }

  // Returns a view of the same parameters with a different split point.
  SplitModel with_split_index(std::size_t split_index) const {
    return SplitModel(spec_, params_, split_index);
  }

  Vector forward(std::span<const double> x) const {
    check_width(x.size(), input_width(), "forward");
    return run_layers(params_, 0, num_layers(), x);
  }

  // Activations after the last feature layer (post-ReLU).
  Vector feature_forward(std::span<const double> x) const {
    check_width(x.size(), input_width(), "feature_forward");
    return run_layers(params_, 0, split_index_, x);
  }

  Vector head_forward(std::span<const double> v) const {
    check_width(v.size(), feature_width(), "head_forward");
    return run_layers(params_, split_index_, num_layers(), v);
  }

  // d loss(head(v), y) / dv by reverse accumulation.  Loss is the squared l2
  // norm ||head(v) - y||^2 for kMse, cross-entropy against the distribution y
  // for kSoftmaxCrossEntropy.  Pinball is a training-only loss and is rejected.
  Vector head_input_gradient(std::span<const double> v, std::span<const double> y,
                             LossKind loss) const {
    return head_value_and_input_gradient(v, y, loss).second;
  }

  // Same as head_input_gradient but also returns head(v); the surrogate search
  // needs both per iteration.
  std::pair<Vector, Vector> head_value_and_input_gradient(std::span<const double> v,
                                                          std::span<const double> y,
                                                          LossKind loss) const {
    check_width(v.size(), feature_width(), "head_value_and_input_gradient");
    if (y.size() != output_width())
      throw std::invalid_argument("head gradient: target dimension mismatch");
    if (loss.kind == LossKind::kPinball)
      throw std::invalid_argument("head gradient: pinball loss not supported here");

    const std::size_t total = num_layers();
    std::vector<Vector> preact(total - split_index_);
    Vector cur(v.begin(), v.end());
    for (std::size_t l = split_index_; l < total; ++l) {
      detail::affine(params_.layers[l], cur, preact[l - split_index_]);
      cur = preact[l - split_index_];
      if (l + 1 < total) detail::relu_inplace(cur);
    }
    Vector out = cur;

    Vector g(output_width());
    if (loss.kind == LossKind::kMse) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * (out[i] - y[i]);
    } else {
      Vector p = softmax(out);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = p[i] - y[i];
    }

    Vector gz, gprev;
    for (std::size_t l = total; l-- > split_index_;) {
      const DenseLayer& layer = params_.layers[l];
      const Vector& z = preact[l - split_index_];
      gz = g;
      if (l + 1 < total) {
        for (std::size_t i = 0; i < gz.size(); ++i)
          if (z[i] <= 0.0) gz[i] = 0.0;
      }
      gprev.assign(layer.weight.cols, 0.0);
      for (std::size_t i = 0; i < layer.weight.rows; ++i) {
        const double gi = gz[i];
        if (gi == 0.0) continue;
        const auto row = layer.weight.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) gprev[j] += gi * row[j];
      }
      g.swap(gprev);
    }
    return {std::move(out), std::move(g)};
  }

 private:
  static void check_width(std::size_t got, std::size_t want, const char* where) {
    if (got != want)
      throw std::invalid_argument(std::string(where) + ": dimension mismatch, got " +
                                  std::to_string(got) + ", expected " + std::to_string(want));
  }

  MlpSpec spec_;
  MlpParams params_;
  std::size_t split_index_;
};

// He-style uniform initialization, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero.
inline MlpParams init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, detail::kStreamInit);
  MlpParams params;
  params.layers.resize(spec.num_layers());
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t fan_in = spec.layer_widths[l];
    const std::size_t fan_out = spec.layer_widths[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    DenseLayer& layer = params.layers[l];
    layer.weight = Matrix(fan_out, fan_in);
    for (double& w : layer.weight.data) w = rng.uniform(-limit, limit);
    layer.bias.assign(fan_out, 0.0);
  }
  return params;
}

inline SplitModel init_model(const MlpSpec& spec, std::size_t split_index,
                             std::uint64_t seed) {
  return SplitModel(spec, init_params(spec, seed), split_index);
}

struct TrainTrace {
  double initial_loss = 0.0;  // full training set, before the first update
  double final_loss = 0.0;    // full training set, after the last epoch
};

namespace detail {

// Per-sample loss and output gradient for training.
inline double loss_and_output_gradient(std::span<const double> out,
                                       std::span<const double> y, LossKind loss,
                                       Vector& g) {
  g.resize(out.size());
  double value = 0.0;
  switch (loss.kind) {
    case LossKind::kMse:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double e = out[i] - y[i];
        value += e * e;
        g[i] = 2.0 * e;
      }
      break;
    case LossKind::kPinball:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double e = y[i] - out[i];
        value += e > 0.0 ? loss.tau * e : (loss.tau - 1.0) * e;
        g[i] = e > 0.0 ? -loss.tau : (1.0 - loss.tau);
      }
      break;
    case LossKind::kSoftmaxCrossEntropy: {
      Vector p = softmax(out);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (y[i] > 0.0) value -= y[i] * std::log(std::max(p[i], 1e-300));
        g[i] = p[i] - y[i];
      }
      break;
    }
  }
  return value;
}

inline double dataset_loss(const MlpParams& params, const Matrix& X, const Matrix& Y,
                           LossKind loss) {
  double total = 0.0;
  Vector g;
  for (std::size_t i = 0; i < X.rows; ++i) {
    Vector out = mlp_forward(params, X.row(i));
    total += loss_and_output_gradient(out, Y.row(i), loss, g);
  }
  return total / static_cast<double>(X.rows);
}

}  // namespace detail

// Deterministic mini-batch SGD.  Weight decay applies to weights only.  Given
// identical inputs and config, the result is bitwise reproducible.
inline MlpParams train_params(const MlpSpec& spec, const Matrix& X, const Matrix& Y,
                              LossKind loss, const TrainConfig& cfg,
                              TrainTrace* trace = nullptr) {
  spec.validate();
  cfg.validate();
  if (X.rows != Y.rows) throw std::invalid_argument("train: X/Y row count mismatch");
  if (X.rows == 0) throw std::invalid_argument("train: empty training set");
  if (X.cols != spec.input_width() || Y.cols != spec.output_width())
    throw std::invalid_argument("train: spec widths do not match data");

  MlpParams params = init_params(spec, cfg.seed);
  if (trace) trace->initial_loss = detail::dataset_loss(params, X, Y, loss);

  const std::size_t n = X.rows;
  const std::size_t total = spec.num_layers();
  Rng shuffle_rng(cfg.seed, detail::kStreamShuffle);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  // Per-layer gradient accumulators and per-sample caches.
  std::vector<Matrix> grad_w(total);
  std::vector<Vector> grad_b(total);
  std::vector<Vector> inputs(total), preact(total);
  Vector gout, gz, gprev;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, n);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      for (std::size_t l = 0; l < total; ++l) {
        grad_w[l] = Matrix(spec.layer_widths[l + 1], spec.layer_widths[l]);
        grad_b[l].assign(spec.layer_widths[l + 1], 0.0);
      }
      double batch_loss = 0.0;

      for (std::size_t bi = start; bi < stop; ++bi) {
        const std::size_t idx = order[bi];
        Vector cur(X.row(idx).begin(), X.row(idx).end());
        for (std::size_t l = 0; l < total; ++l) {
          inputs[l] = cur;
          detail::affine(params.layers[l], cur, preact[l]);
          cur = preact[l];
          if (l + 1 < total) detail::relu_inplace(cur);
        }
        batch_loss += detail::loss_and_output_gradient(cur, Y.row(idx), loss, gout);

        Vector* g = &gout;
        for (std::size_t l = total; l-- > 0;) {
          gz = *g;
          if (l + 1 < total) {
            for (std::size_t i = 0; i < gz.size(); ++i)
              if (preact[l][i] <= 0.0) gz[i] = 0.0;
          }
          Matrix& gw = grad_w[l];
          for (std::size_t i = 0; i < gw.rows; ++i) {
            const double gi = gz[i] * inv_batch;
            if (gi == 0.0) continue;
            grad_b[l][i] += gi;
            auto grow = gw.row(i);
            const Vector& in = inputs[l];
            for (std::size_t j = 0; j < grow.size(); ++j) grow[j] += gi * in[j];
          }
          if (l > 0) {
            gprev.assign(params.layers[l].weight.cols, 0.0);
            for (std::size_t i = 0; i < gz.size(); ++i) {
              const double gi = gz[i];
              if (gi == 0.0) continue;
              const auto wrow = params.layers[l].weight.row(i);
              for (std::size_t j = 0; j < wrow.size(); ++j) gprev[j] += gi * wrow[j];
            }
            gout = gprev;  // reuse gout as the carried gradient
            g = &gout;
          }
        }
      }

      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 " (diverged; reduce the learning rate)");

      const double lr = cfg.learning_rate;
      for (std::size_t l = 0; l < total; ++l) {
        DenseLayer& layer = params.layers[l];
        for (std::size_t k = 0; k < layer.weight.data.size(); ++k)
          layer.weight.data[k] -=
              lr * (grad_w[l].data[k] + cfg.weight_decay * layer.weight.data[k]);
        for (std::size_t k = 0; k < layer.bias.size(); ++k)
          layer.bias[k] -= lr * grad_b[l][k];
      }
    }
  }

  if (trace) trace->final_loss = detail::dataset_loss(params, X, Y, loss);
  return params;
}

inline SplitModel train(const MlpSpec& spec, std::size_t split_index, const Matrix& X,
                        const Matrix& Y, LossKind loss, const TrainConfig& cfg,
                        TrainTrace* trace = nullptr) {
  return SplitModel(spec, train_params(spec, X, Y, loss, cfg, trace), split_index);
}

// --- serialization ---------------------------------------------------------
//
// Flat binary container: magic, version, widths, split index, then raw
// row-major doubles.  Round-trips bitwise on the same platform.

namespace detail {
inline constexpr std::uint32_t kModelMagic = 0x4d504346;  // "FCPM"
inline constexpr std::uint32_t kModelVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace detail

inline void save_model(const SplitModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open " + path);
  detail::write_pod(os, detail::kModelMagic);
  detail::write_pod(os, detail::kModelVersion);
  const auto& widths = model.spec().layer_widths;
  detail::write_pod(os, static_cast<std::uint64_t>(widths.size()));
  for (std::size_t w : widths) detail::write_pod(os, static_cast<std::uint64_t>(w));
  detail::write_pod(os, static_cast<std::uint64_t>(model.split_index()));
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const DenseLayer& layer = model.layer(l);
    os.write(reinterpret_cast<const char*>(layer.weight.data.data()),
             static_cast<std::streamsize>(layer.weight.data.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(layer.bias.data()),
             static_cast<std::streamsize>(layer.bias.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("save_model: write failed for " + path);
}

inline SplitModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path);
  std::uint32_t magic = 0, version = 0;
  detail::read_pod(is, magic);
  detail::read_pod(is, version);
  if (magic != detail::kModelMagic)
    throw std::runtime_error("load_model: bad magic in " + path);
  if (version != detail::kModelVersion)
    throw std::runtime_error("load_model: unsupported version in " + path);
  std::uint64_t nwidths = 0;
  detail::read_pod(is, nwidths);
  if (nwidths < 2 || nwidths > 1024) throw std::runtime_error("load_model: corrupt widths");
  MlpSpec spec;
  spec.layer_widths.resize(nwidths);
  for (auto& w : spec.layer_widths) {
    std::uint64_t v = 0;
    detail::read_pod(is, v);
    w = static_cast<std::size_t>(v);
  }
  std::uint64_t split_index = 0;
  detail::read_pod(is, split_index);
  MlpParams params;
  params.layers.resize(spec.num_layers());
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    DenseLayer& layer = params.layers[l];
    layer.weight = Matrix(spec.layer_widths[l + 1], spec.layer_widths[l]);
    is.read(reinterpret_cast<char*>(layer.weight.data.data()),
            static_cast<std::streamsize>(layer.weight.data.size() * sizeof(double)));
    layer.bias.resize(spec.layer_widths[l + 1]);
    is.read(reinterpret_cast<char*>(layer.bias.data()),
            static_cast<std::streamsize>(layer.bias.size() * sizeof(double)));
  }
  if (!is) throw std::runtime_error("load_model: truncated file " + path);
  return SplitModel(std::move(spec), std::move(params),
                    static_cast<std::size_t>(split_index));
}

}  // namespace fcp
