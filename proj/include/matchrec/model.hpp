#pragma once

// CNN rating regressor over matching matrices:
//   [conv -> ReLU -> batchnorm -> maxpool] x blocks -> flatten -> dense+ReLU -> linear head
// with an exact hand-written backward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "matchrec/error.hpp"
#include "matchrec/matching.hpp"
#include "matchrec/util.hpp"

namespace matchrec {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Configuration

struct ConvBlockConfig {
  std::size_t kernels = 8;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t pool_h = 2;
  std::size_t pool_w = 2;

  friend bool operator==(const ConvBlockConfig&, const ConvBlockConfig&) = default;
};

struct SpatialShape {
  std::size_t channels, height, width;
};

struct ModelConfig {
  std::size_t n_max = 256;
  std::size_t m_max = 256;
  std::size_t embedding_dim = 64;  // recorded for consistency checks; not a model parameter
  std::vector<ConvBlockConfig> conv_blocks{{8, 3, 3, 2, 2}, {16, 3, 3, 2, 2}};
  std::size_t dense_units = 32;
  bool use_batchnorm = true;
  std::uint64_t init_seed = 1;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  /// Shape after each block (conv then pool). Throws ModelError naming the
  /// first block whose output would fall below 1x1.
  std::vector<SpatialShape> block_shapes() const {
    if (n_max == 0 || m_max == 0) throw ModelError("input shape must be at least 1x1");
    if (conv_blocks.empty()) throw ModelError("at least one conv block is required");
    if (dense_units == 0) throw ModelError("dense_units must be >= 1");
    std::vector<SpatialShape> shapes;
    std::size_t h = n_max, w = m_max;
    for (std::size_t b = 0; b < conv_blocks.size(); ++b) {
      const auto& blk = conv_blocks[b];
      const auto where = "conv block " + std::to_string(b + 1) + ": ";
      if (blk.kernels == 0 || blk.kernel_h == 0 || blk.kernel_w == 0 || blk.pool_h == 0 ||
          blk.pool_w == 0)
        throw ModelError(where + "kernel count, kernel and pool dims must be >= 1");
      if (blk.kernel_h > h || blk.kernel_w > w)
        throw ModelError(where + "kernel " + std::to_string(blk.kernel_h) + "x" +
                         std::to_string(blk.kernel_w) + " exceeds input " + std::to_string(h) +
                         "x" + std::to_string(w));
      h = h - blk.kernel_h + 1;
      w = w - blk.kernel_w + 1;
      if (blk.pool_h > h || blk.pool_w > w)
        throw ModelError(where + "pool " + std::to_string(blk.pool_h) + "x" +
                         std::to_string(blk.pool_w) + " exceeds conv output " +
                         std::to_string(h) + "x" + std::to_string(w));
      h /= blk.pool_h;
      w /= blk.pool_w;
      shapes.push_back({blk.kernels, h, w});
    }
    return shapes;
  }

  std::size_t flattened_size() const {
    auto s = block_shapes().back();
    return s.channels * s.height * s.width;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["n_max"] = n_max;
    j["m_max"] = m_max;
    j["embedding_dim"] = embedding_dim;
    auto blocks = nlohmann::ordered_json::array();
    for (const auto& b : conv_blocks) {
      nlohmann::ordered_json jb;
      jb["kernels"] = b.kernels;
      jb["kernel_h"] = b.kernel_h;
      jb["kernel_w"] = b.kernel_w;
      jb["pool_h"] = b.pool_h;
      jb["pool_w"] = b.pool_w;
      blocks.push_back(jb);
    }
    j["conv_blocks"] = blocks;
    j["dense_units"] = dense_units;
    j["use_batchnorm"] = use_batchnorm;
    j["init_seed"] = init_seed;
    return j;
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  template <typename Json>
  static ModelConfig from_json(const Json& j) {
    if (!j.is_object()) throw InputError("model config must be a JSON object");
    ModelConfig c;
    try {
      for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const auto& v = it.value();
        if (k == "n_max") c.n_max = v.template get<std::size_t>();
        else if (k == "m_max") c.m_max = v.template get<std::size_t>();
        else if (k == "embedding_dim") c.embedding_dim = v.template get<std::size_t>();
        else if (k == "dense_units") c.dense_units = v.template get<std::size_t>();
        else if (k == "use_batchnorm") c.use_batchnorm = v.template get<bool>();
        else if (k == "init_seed") c.init_seed = v.template get<std::uint64_t>();
        else if (k == "conv_blocks") {
          c.conv_blocks.clear();
          for (const auto& jb : v) {
            ConvBlockConfig b;
            for (auto bt = jb.begin(); bt != jb.end(); ++bt) {
              const std::string& bk = bt.key();
              auto n = bt.value().template get<std::size_t>();
              if (bk == "kernels") b.kernels = n;
              else if (bk == "kernel_h") b.kernel_h = n;
              else if (bk == "kernel_w") b.kernel_w = n;
              else if (bk == "pool_h") b.pool_h = n;
              else if (bk == "pool_w") b.pool_w = n;
              else throw InputError("unknown conv block key '" + bk + "'");
            }
            c.conv_blocks.push_back(b);
          }
        } else {
          throw InputError("unknown model config key '" + k + "'");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("model config: ") + e.what());
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Tensors and layers

/// Dense NCHW tensor.
template <typename T>
struct Tensor4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, fill) {}

  std::size_t index(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
    return ((i * c + ch) * h + y) * w + x;
  }
  T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) {
    return data[index(i, ch, y, x)];
  }
  const T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
    return data[index(i, ch, y, x)];
  }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

template <typename T>
struct ConvLayer {
  std::size_t out_channels = 0, in_channels = 0, kernel_h = 0, kernel_w = 0;
  std::vector<T> weight;  // [out][in][kh][kw]
  std::vector<T> bias;    // [out]

  ConvLayer() = default;
  ConvLayer(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw)
      : out_channels(out), in_channels(in), kernel_h(kh), kernel_w(kw),
        weight(out * in * kh * kw, T(0)), bias(out, T(0)) {}

  T& w(std::size_t o, std::size_t i, std::size_t a, std::size_t b) {
    return weight[((o * in_channels + i) * kernel_h + a) * kernel_w + b];
  }
  const T& w(std::size_t o, std::size_t i, std::size_t a, std::size_t b) const {
    return weight[((o * in_channels + i) * kernel_h + a) * kernel_w + b];
  }
};

template <typename T>
struct BatchNormLayer {
  static constexpr double epsilon = 1e-5;
  static constexpr double momentum = 0.1;

  std::vector<T> gamma, beta, running_mean, running_var;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels)
      : gamma(channels, T(1)), beta(channels, T(0)), running_mean(channels, T(0)),
        running_var(channels, T(1)) {}
  std::size_t channels() const noexcept { return gamma.size(); }
};

template <typename T>
struct DenseLayer {
  std::size_t in = 0, out = 0;
  std::vector<T> weight;  // [out][in]
  std::vector<T> bias;    // [out]

  DenseLayer() = default;
  DenseLayer(std::size_t in_, std::size_t out_)
      : in(in_), out(out_), weight(in_ * out_, T(0)), bias(out_, T(0)) {}
};

template <typename T>
struct ConvBlock {
  ConvLayer<T> conv;
  BatchNormLayer<T> bn;  // empty when the config disables batchnorm
  std::size_t pool_h = 1, pool_w = 1;
};

template <typename T>
struct CnnRegressor {
  ModelConfig config;
  std::vector<ConvBlock<T>> blocks;
  DenseLayer<T> dense;
  std::vector<T> head_weight;   // W
  std::vector<T> head_bias{0};  // g
  // Bumped by every optimizer update; traces remember the value they saw.
  std::uint64_t revision = 0;
};

/// Model of the right shapes with every tensor zero (batchnorm gamma and
/// running_var included). Used for gradient accumulators.
template <typename T>
CnnRegressor<T> zero_model(const ModelConfig& config) {
  auto shapes = config.block_shapes();
  CnnRegressor<T> m;
  m.config = config;
  std::size_t in_ch = 1;
  for (std::size_t b = 0; b < config.conv_blocks.size(); ++b) {
    const auto& bc = config.conv_blocks[b];
    ConvBlock<T> blk;
    blk.conv = ConvLayer<T>(bc.kernels, in_ch, bc.kernel_h, bc.kernel_w);
    if (config.use_batchnorm) {
      blk.bn = BatchNormLayer<T>(bc.kernels);
      std::fill(blk.bn.gamma.begin(), blk.bn.gamma.end(), T(0));
      std::fill(blk.bn.running_var.begin(), blk.bn.running_var.end(), T(0));
    }
    blk.pool_h = bc.pool_h;
    blk.pool_w = bc.pool_w;
    m.blocks.push_back(std::move(blk));
    in_ch = bc.kernels;
  }
  m.dense = DenseLayer<T>(config.flattened_size(), config.dense_units);
  m.head_weight.assign(config.dense_units, T(0));
  m.head_bias.assign(1, T(0));
  return m;
}

/// Fills `values` with Normal(0, sqrt(2 / fan_in)) draws.
template <typename T, typename Rng>
void he_normal(std::span<T> values, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : values) v = static_cast<T>(normal(rng));
}

/// He-initialized weights, zero biases, batchnorm gamma 1 / beta 0.
/// Deterministic for a given config.init_seed.
template <typename T>
CnnRegressor<T> init_params(const ModelConfig& config) {
  CnnRegressor<T> m = zero_model<T>(config);
  std::mt19937_64 rng(mix_seed(config.init_seed, 0x1417));
  for (auto& blk : m.blocks) {
    const auto& c = blk.conv;
    he_normal(std::span<T>(blk.conv.weight), c.in_channels * c.kernel_h * c.kernel_w, rng);
    if (config.use_batchnorm) blk.bn = BatchNormLayer<T>(c.out_channels);
  }
  he_normal(std::span<T>(m.dense.weight), m.dense.in, rng);
  he_normal(std::span<T>(m.head_weight), m.head_weight.size(), rng);
  return m;
}

/// Calls f(name, span) for each tensor in declared (checkpoint) order.
/// Batchnorm running statistics are included only when `with_state`.
template <typename Model, typename F>
void for_each_tensor(Model& m, F&& f, bool with_state) {
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "block" + std::to_string(b + 1) + ".";
    f(p + "conv.weight", std::span(blk.conv.weight));
    f(p + "conv.bias", std::span(blk.conv.bias));
    if (m.config.use_batchnorm) {
      f(p + "bn.gamma", std::span(blk.bn.gamma));
      f(p + "bn.beta", std::span(blk.bn.beta));
      if (with_state) {
        f(p + "bn.running_mean", std::span(blk.bn.running_mean));
        f(p + "bn.running_var", std::span(blk.bn.running_var));
      }
    }
  }
  f(std::string("dense.weight"), std::span(m.dense.weight));
  f(std::string("dense.bias"), std::span(m.dense.bias));
  f(std::string("head.weight"), std::span(m.head_weight));
  f(std::string("head.bias"), std::span(m.head_bias));
}

template <typename Model, typename F>
void for_each_parameter(Model& m, F&& f) {
  for_each_tensor(m, std::forward<F>(f), false);
}

// ---------------------------------------------------------------------------
// Layer forward passes

/// Valid cross-correlation with stride 1, summed over input channels, then
/// ReLU. Output spatial dims are (h - kh + 1) x (w - kw + 1).
template <typename T>
Tensor4<T> conv_forward(const Tensor4<T>& x, const ConvLayer<T>& layer) {
  if (x.c != layer.in_channels)
    throw ModelError("conv input has " + std::to_string(x.c) + " channels, layer expects " +
                     std::to_string(layer.in_channels));
  if (layer.kernel_h > x.h || layer.kernel_w > x.w)
    throw ModelError("conv kernel larger than input");
  const std::size_t oh = x.h - layer.kernel_h + 1, ow = x.w - layer.kernel_w + 1;
  Tensor4<T> out(x.n, layer.out_channels, oh, ow);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t o = 0; o < layer.out_channels; ++o) {
      T* dst = &out(i, o, 0, 0);
      std::fill(dst, dst + oh * ow, layer.bias[o]);
      for (std::size_t ci = 0; ci < x.c; ++ci)
        for (std::size_t a = 0; a < layer.kernel_h; ++a)
          for (std::size_t b = 0; b < layer.kernel_w; ++b) {
            const T k = layer.w(o, ci, a, b);
            for (std::size_t y = 0; y < oh; ++y) {
              const T* src = &x(i, ci, y + a, b);
              T* row = dst + y * ow;
              for (std::size_t xx = 0; xx < ow; ++xx) row[xx] += k * src[xx];
            }
          }
      for (std::size_t e = 0; e < oh * ow; ++e) dst[e] = std::max(dst[e], T(0));
    }
  }
  return out;
}

template <typename T>
struct BatchNormOutput {
  Tensor4<T> y;
  Tensor4<T> xhat;
  std::vector<double> mean;     // statistics used for normalization
  std::vector<double> var;      // biased variance
  std::size_t count = 0;        // elements per channel (batch x spatial)
};

/// Per-channel normalization without side effects. Train uses batch
/// statistics over batch x spatial; Eval uses the running statistics.
template <typename T>
BatchNormOutput<T> batchnorm_normalize(const Tensor4<T>& x, const BatchNormLayer<T>& layer,
                                       Mode mode) {
  if (x.c != layer.channels()) throw ModelError("batchnorm channel mismatch");
  BatchNormOutput<T> out;
  out.y = Tensor4<T>(x.n, x.c, x.h, x.w);
  out.xhat = Tensor4<T>(x.n, x.c, x.h, x.w);
  out.mean.assign(x.c, 0.0);
  out.var.assign(x.c, 0.0);
  out.count = x.n * x.h * x.w;
  const std::size_t plane = x.h * x.w;
  for (std::size_t ch = 0; ch < x.c; ++ch) {
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.n; ++i) {
        const T* p = &x(i, ch, 0, 0);
        for (std::size_t e = 0; e < plane; ++e) s += p[e];
      }
      mean = s / static_cast<double>(out.count);
      double ss = 0.0;
      for (std::size_t i = 0; i < x.n; ++i) {
        const T* p = &x(i, ch, 0, 0);
        for (std::size_t e = 0; e < plane; ++e) {
          const double d = p[e] - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(out.count);
    } else {
      mean = layer.running_mean[ch];
      var = layer.running_var[ch];
    }
    out.mean[ch] = mean;
    out.var[ch] = var;
    const double inv_std = 1.0 / std::sqrt(var + BatchNormLayer<T>::epsilon);
    const double g = layer.gamma[ch], be = layer.beta[ch];
    for (std::size_t i = 0; i < x.n; ++i) {
      const T* p = &x(i, ch, 0, 0);
      T* xh = &out.xhat(i, ch, 0, 0);
      T* yy = &out.y(i, ch, 0, 0);
      for (std::size_t e = 0; e < plane; ++e) {
        const double n = (p[e] - mean) * inv_std;
        xh[e] = static_cast<T>(n);
        yy[e] = static_cast<T>(g * n + be);
      }
    }
  }
  return out;
}

/// Momentum update of the running statistics; running_var receives the
/// unbiased batch variance.
template <typename T>
void update_running_stats(BatchNormLayer<T>& layer, std::span<const double> mean,
                          std::span<const double> var, std::size_t count) {
  const double mom = BatchNormLayer<T>::momentum;
  const double unbias =
      count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
  for (std::size_t ch = 0; ch < layer.channels(); ++ch) {
    layer.running_mean[ch] =
        static_cast<T>((1.0 - mom) * layer.running_mean[ch] + mom * mean[ch]);
    layer.running_var[ch] =
        static_cast<T>((1.0 - mom) * layer.running_var[ch] + mom * var[ch] * unbias);
  }
}

/// Layer-level convenience: normalizes and, in Train mode, updates the
/// layer's running statistics.
template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, BatchNormLayer<T>& layer, Mode mode) {
  auto out = batchnorm_normalize(x, layer, mode);
  if (mode == Mode::Train) update_running_stats(layer, out.mean, out.var, out.count);
  return std::move(out.y);
}

template <typename T>
struct PoolOutput {
  Tensor4<T> y;
  std::vector<std::size_t> argmax;  // flat index into the pooled input, per output element
};

/// Non-overlapping max pooling, stride = window. Trailing rows/cols that do
/// not fill a window are dropped. Ties resolve to the first element in
/// row-major window order.
template <typename T>
PoolOutput<T> maxpool_forward(const Tensor4<T>& x, std::size_t pool_h, std::size_t pool_w) {
  if (pool_h == 0 || pool_w == 0 || pool_h > x.h || pool_w > x.w)
    throw ModelError("pool window does not fit the input");
  const std::size_t oh = x.h / pool_h, ow = x.w / pool_w;
  PoolOutput<T> out;
  out.y = Tensor4<T>(x.n, x.c, oh, ow);
  out.argmax.resize(out.y.data.size());
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t ch = 0; ch < x.c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          std::size_t best = x.index(i, ch, y * pool_h, xx * pool_w);
          for (std::size_t a = 0; a < pool_h; ++a)
            for (std::size_t b = 0; b < pool_w; ++b) {
              const std::size_t idx = x.index(i, ch, y * pool_h + a, xx * pool_w + b);
              if (x.data[idx] > x.data[best]) best = idx;
            }
          const std::size_t o = out.y.index(i, ch, y, xx);
          out.y.data[o] = x.data[best];
          out.argmax[o] = best;
        }
  return out;
}

// ---------------------------------------------------------------------------
// Full model

template <typename T>
struct BlockTrace {
  Tensor4<T> input;     // block input (needed for kernel gradients)
  Tensor4<T> conv_out;  // post-ReLU activations; > 0 marks the ReLU pass-through
  Tensor4<T> bn_xhat;   // normalized activations (batchnorm only)
  std::vector<double> bn_mean, bn_var;
  std::size_t bn_count = 0;
  std::size_t pooled_h = 0, pooled_w = 0;
  std::vector<std::size_t> argmax;
};

template <typename T>
struct ForwardTrace {
  Mode mode = Mode::Eval;
  std::size_t batch = 0;
  std::vector<BlockTrace<T>> blocks;
  std::vector<T> flat;       // batch x flattened_size
  std::vector<T> dense_out;  // batch x dense_units, post-ReLU
  std::vector<T> predictions;
  // Identity of the model state that produced the trace.
  std::uint64_t config_hash = 0;
  std::uint64_t revision = 0;
};

inline std::uint64_t config_hash(const ModelConfig& c) { return fnv1a64(c.to_json().dump()); }

/// Stacks matching matrices into an (N, 1, n_max, m_max) batch.
template <typename T>
Tensor4<T> stack_matrices(std::span<const MatchingMatrix<T>* const> matrices,
                          const ModelConfig& config) {
  Tensor4<T> x(matrices.size(), 1, config.n_max, config.m_max);
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    const auto& M = *matrices[i];
    if (M.rows != config.n_max || M.cols != config.m_max)
      throw ModelError("matching matrix is " + std::to_string(M.rows) + "x" +
                       std::to_string(M.cols) + ", model expects " +
                       std::to_string(config.n_max) + "x" + std::to_string(config.m_max));
    std::copy(M.values.begin(), M.values.end(), x.data.begin() + static_cast<std::ptrdiff_t>(
                                                                   i * M.values.size()));
  }
  return x;
}

/// Batched forward pass. Pure: Train-mode batch statistics are recorded in
/// the trace; apply them with commit_batch_statistics().
template <typename T>
ForwardTrace<T> forward(const CnnRegressor<T>& model, Tensor4<T> input, Mode mode) {
  const auto& cfg = model.config;
  if (input.c != 1 || input.h != cfg.n_max || input.w != cfg.m_max)
    throw ModelError("input shape does not match model config");
  ForwardTrace<T> tr;
  tr.mode = mode;
  tr.batch = input.n;
  tr.config_hash = config_hash(cfg);
  tr.revision = model.revision;
  Tensor4<T> x = std::move(input);
  for (const auto& blk : model.blocks) {
    BlockTrace<T> bt;
    Tensor4<T> act = conv_forward(x, blk.conv);
    bt.input = std::move(x);
    Tensor4<T> normed;
    if (cfg.use_batchnorm) {
      auto bn = batchnorm_normalize(act, blk.bn, mode);
      normed = std::move(bn.y);
      bt.bn_xhat = std::move(bn.xhat);
      bt.bn_mean = std::move(bn.mean);
      bt.bn_var = std::move(bn.var);
      bt.bn_count = bn.count;
      bt.conv_out = std::move(act);
    } else {
      bt.conv_out = act;
      normed = std::move(act);
    }
    auto pooled = maxpool_forward(normed, blk.pool_h, blk.pool_w);
    bt.argmax = std::move(pooled.argmax);
    bt.pooled_h = pooled.y.h;
    bt.pooled_w = pooled.y.w;
    x = std::move(pooled.y);
    tr.blocks.push_back(std::move(bt));
  }
  const std::size_t F = x.c * x.h * x.w, U = model.dense.out;
  if (F != model.dense.in) throw ModelError("flattened size does not match dense layer");
  tr.flat = std::move(x.data);
  tr.dense_out.assign(tr.batch * U, T(0));
  tr.predictions.assign(tr.batch, T(0));
  for (std::size_t i = 0; i < tr.batch; ++i) {
    const T* f = &tr.flat[i * F];
    T* o = &tr.dense_out[i * U];
    for (std::size_t u = 0; u < U; ++u) {
      const T* wrow = &model.dense.weight[u * F];
      T s = model.dense.bias[u];
      for (std::size_t k = 0; k < F; ++k) s += wrow[k] * f[k];
      o[u] = std::max(s, T(0));
    }
    T r = model.head_bias[0];
    for (std::size_t u = 0; u < U; ++u) r += model.head_weight[u] * o[u];
    tr.predictions[i] = r;
  }
  return tr;
}

/// Applies the Train-mode batch statistics of a trace to the running stats.
template <typename T>
void commit_batch_statistics(CnnRegressor<T>& model, const ForwardTrace<T>& trace) {
  if (trace.mode != Mode::Train || !model.config.use_batchnorm) return;
  for (std::size_t b = 0; b < model.blocks.size(); ++b)
    update_running_stats(model.blocks[b].bn, trace.blocks[b].bn_mean, trace.blocks[b].bn_var,
                         trace.blocks[b].bn_count);
}

/// Raw (unclamped) rating estimate for one matching matrix.
template <typename T>
std::pair<T, ForwardTrace<T>> predict_rating(const MatchingMatrix<T>& matrix,
                                             const CnnRegressor<T>& model, Mode mode) {
  const MatchingMatrix<T>* one[] = {&matrix};
  auto tr = forward(model, stack_matrices<T>(one, model.config), mode);
  T r = tr.predictions[0];
  return {r, std::move(tr)};
}

inline double clamp_rating(double r) { return std::clamp(r, 1.0, 5.0); }

// ---------------------------------------------------------------------------
// Backward

/// Exact gradients of sum_i d_pred[i] * prediction[i] with respect to every
/// trainable parameter. Returned in a model-shaped container whose running
/// statistics are zero. In Train mode batchnorm gradients include the
/// dependence of the batch statistics on the inputs.
template <typename T>
CnnRegressor<T> backward(const ForwardTrace<T>& tr, const CnnRegressor<T>& model,
                         std::span<const T> d_pred) {
  const auto& cfg = model.config;
  if (tr.config_hash != config_hash(cfg) || tr.blocks.size() != model.blocks.size())
    throw ModelError("trace was produced by a model with a different config");
  if (tr.revision != model.revision)
    throw ModelError("stale trace: model parameters changed since the forward pass");
  if (d_pred.size() != tr.batch)
    throw ModelError("expected " + std::to_string(tr.batch) + " output gradients, got " +
                     std::to_string(d_pred.size()));

  CnnRegressor<T> g = zero_model<T>(cfg);
  const std::size_t F = model.dense.in, U = model.dense.out, N = tr.batch;

  // Regression head and dense layer.
  std::vector<T> d_flat(N * F, T(0));
  for (std::size_t i = 0; i < N; ++i) {
    const T dp = d_pred[i];
    g.head_bias[0] += dp;
    const T* o = &tr.dense_out[i * U];
    const T* f = &tr.flat[i * F];
    T* df = &d_flat[i * F];
    for (std::size_t u = 0; u < U; ++u) {
      g.head_weight[u] += dp * o[u];
      if (o[u] <= T(0)) continue;
      const T dz = dp * model.head_weight[u];
      g.dense.bias[u] += dz;
      T* gw = &g.dense.weight[u * F];
      const T* w = &model.dense.weight[u * F];
      for (std::size_t k = 0; k < F; ++k) {
        gw[k] += dz * f[k];
        df[k] += dz * w[k];
      }
    }
  }

  std::vector<T> d_out = std::move(d_flat);  // gradient w.r.t. current block's pooled output
  for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
    const auto& blk = model.blocks[bi];
    const auto& bt = tr.blocks[bi];
    auto& gb = g.blocks[bi];
    const Tensor4<T>& act = bt.conv_out;
    const std::size_t C = act.c, plane = act.h * act.w;

    // Max pool: route to argmax.
    Tensor4<T> d_act(act.n, act.c, act.h, act.w);
    for (std::size_t o = 0; o < d_out.size(); ++o) d_act.data[bt.argmax[o]] += d_out[o];

    // Batch normalization.
    if (cfg.use_batchnorm) {
      const double M = static_cast<double>(bt.bn_count);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double inv_std = 1.0 / std::sqrt(bt.bn_var[ch] + BatchNormLayer<T>::epsilon);
        const double gamma = blk.bn.gamma[ch];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t i = 0; i < act.n; ++i) {
          const T* dy = &d_act(i, ch, 0, 0);
          const T* xh = &bt.bn_xhat(i, ch, 0, 0);
          for (std::size_t e = 0; e < plane; ++e) {
            sum_dy += dy[e];
            sum_dy_xhat += static_cast<double>(dy[e]) * xh[e];
          }
        }
        gb.bn.beta[ch] = static_cast<T>(sum_dy);
        gb.bn.gamma[ch] = static_cast<T>(sum_dy_xhat);
        for (std::size_t i = 0; i < act.n; ++i) {
          T* dy = &d_act(i, ch, 0, 0);
          const T* xh = &bt.bn_xhat(i, ch, 0, 0);
          for (std::size_t e = 0; e < plane; ++e) {
            double dx;
            if (tr.mode == Mode::Train)
              dx = gamma * inv_std * (dy[e] - sum_dy / M - xh[e] * sum_dy_xhat / M);
            else
              dx = gamma * inv_std * dy[e];
            dy[e] = static_cast<T>(dx);
          }
        }
      }
    }

    // ReLU mask.
    for (std::size_t e = 0; e < act.data.size(); ++e)
      if (act.data[e] <= T(0)) d_act.data[e] = T(0);

    // Convolution: kernel and bias gradients, plus input gradient when an
    // earlier block needs it.
    const Tensor4<T>& x = bt.input;
    const auto& L = blk.conv;
    const std::size_t oh = act.h, ow = act.w;
    const bool need_dx = bi > 0;
    Tensor4<T> dx;
    if (need_dx) dx = Tensor4<T>(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.n; ++i)
      for (std::size_t o = 0; o < L.out_channels; ++o) {
        const T* dz = &d_act(i, o, 0, 0);
        T s = T(0);
        for (std::size_t e = 0; e < plane; ++e) s += dz[e];
        gb.conv.bias[o] += s;
        for (std::size_t ci = 0; ci < x.c; ++ci)
          for (std::size_t a = 0; a < L.kernel_h; ++a)
            for (std::size_t b = 0; b < L.kernel_w; ++b) {
              T acc = T(0);
              for (std::size_t y = 0; y < oh; ++y) {
                const T* src = &x(i, ci, y + a, b);
                const T* dzr = dz + y * ow;
                for (std::size_t xx = 0; xx < ow; ++xx) acc += dzr[xx] * src[xx];
              }
              gb.conv.w(o, ci, a, b) += acc;
              if (need_dx) {
                const T k = L.w(o, ci, a, b);
                for (std::size_t y = 0; y < oh; ++y) {
                  T* dst = &dx(i, ci, y + a, b);
                  const T* dzr = dz + y * ow;
                  for (std::size_t xx = 0; xx < ow; ++xx) dst[xx] += k * dzr[xx];
                }
              }
            }
      }
    if (need_dx) d_out = std::move(dx.data);
  }
  return g;
}

template <typename T>
CnnRegressor<T> backward(const ForwardTrace<T>& tr, const CnnRegressor<T>& model, T d_pred) {
  const T one[] = {d_pred};
  return backward(tr, model, std::span<const T>(one));
}

/// Converts parameters between precisions (e.g. an f64 checkpoint view of an f32 model).
template <typename To, typename From>
CnnRegressor<To> convert_model(const CnnRegressor<From>& src) {
  CnnRegressor<To> dst = zero_model<To>(src.config);
  std::vector<std::span<const From>> from;
  for_each_tensor(src, [&](const std::string&, auto s) { from.push_back(s); }, true);
  std::size_t k = 0;
  for_each_tensor(
      dst,
      [&](const std::string&, std::span<To> s) {
        for (std::size_t e = 0; e < s.size(); ++e) s[e] = static_cast<To>(from[k][e]);
        ++k;
      },
      true);
  dst.revision = src.revision;
  return dst;
}

}  // namespace matchrec
