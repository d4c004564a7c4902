#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sfdd/autodiff.hpp"
#include "sfdd/error.hpp"
#include "sfdd/rng.hpp"
#include "sfdd/tensor.hpp"

namespace sfdd::nn {

enum class Act { Relu, Sigmoid };
enum class Norm { Instance, None };
enum class Pool { Avg, None };

// Conv blocks (conv 3x3 -> bias -> norm -> activation -> pool) followed by a
// single linear head on the flattened features.
struct ModelSpec {
  int width = 32;
  int depth = 2;
  Act act = Act::Relu;
  Norm norm = Norm::Instance;
  Pool pool = Pool::Avg;
  int in_channels = 1;
  int in_h = 28;
  int in_w = 28;
  int n_c = 10;
};

struct FeatureDims {
  int h = 0, w = 0, channels = 0;
  int flat() const { return h * w * channels; }
};

inline FeatureDims feature_dims(const ModelSpec& spec) {
  require(spec.depth >= 1, ErrorKind::InvalidSpec, "net_depth must be >= 1");
  require(spec.width >= 1, ErrorKind::InvalidSpec, "net_width must be >= 1");
  require(spec.n_c >= 2, ErrorKind::InvalidSpec, "n_c must be >= 2");
  int h = spec.in_h, w = spec.in_w;
  for (int d = 0; d < spec.depth; ++d) {
    if (spec.pool == Pool::Avg) {
      h /= 2;
      w /= 2;
    }
    require(h >= 1 && w >= 1, ErrorKind::InvalidSpec,
            "pooling collapses spatial dims below 1 at block " + std::to_string(d));
  }
  return {h, w, spec.width};
}

// Human-readable layer plan, used by configuration checks and tests.
inline std::vector<std::string> layer_plan(const ModelSpec& spec) {
  std::vector<std::string> plan;
  for (int d = 0; d < spec.depth; ++d) {
    plan.push_back("conv3x3");
    if (spec.norm == Norm::Instance) plan.push_back("instance_norm");
    plan.push_back(spec.act == Act::Relu ? "relu" : "sigmoid");
    if (spec.pool == Pool::Avg) plan.push_back("avgpool2x2");
  }
  plan.push_back("linear");
  return plan;
}

// Ordered layer-major: conv0 kernel, conv0 bias, ..., head weight, head bias.
struct ModelParams {
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> params;
  std::uint64_t init_seed = 0;

  size_t size() const { return params.size(); }
  std::vector<Tensor> values() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& e : params) out.push_back(e.value);
    return out;
  }
};

struct TrainerConfig {
  float lr = 0.01f;
  int batch = 64;
  int steps = 100;
};

inline void validate(const TrainerConfig& cfg) {
  require(cfg.lr >= 0.0f, ErrorKind::InvalidParameter, "lr_net must be >= 0");
  require(cfg.batch >= 1, ErrorKind::InvalidParameter, "batch_size must be >= 1");
  require(cfg.steps >= 0, ErrorKind::InvalidParameter, "steps must be >= 0");
}

namespace detail {

inline Tensor kaiming_uniform(Shape shape, int fan_in, RngStream& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::vector<float> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<float>((rng.uniform01() * 2.0 - 1.0) * bound);
  return Tensor(std::move(shape), std::move(d));
}

}  // namespace detail

// Deterministic Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases.
inline ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
  const FeatureDims dims = feature_dims(spec);
  ModelParams mp;
  mp.init_seed = seed;
  int cin = spec.in_channels;
  for (int d = 0; d < spec.depth; ++d) {
    RngStream rng(seed, "conv", static_cast<std::uint64_t>(d));
    mp.params.push_back({"conv" + std::to_string(d) + ".w",
                         detail::kaiming_uniform({spec.width, cin, 3, 3}, cin * 9, rng)});
    mp.params.push_back({"conv" + std::to_string(d) + ".b", Tensor::zeros({spec.width})});
    cin = spec.width;
  }
  RngStream rng(seed, "head");
  mp.params.push_back(
      {"head.w", detail::kaiming_uniform({spec.n_c, dims.flat()}, dims.flat(), rng)});
  mp.params.push_back({"head.b", Tensor::zeros({spec.n_c})});
  return mp;
}

// Forward pass over explicit parameter tensors (watched handles pass through,
// so the logits stay differentiable w.r.t. whatever the caller watched).
inline Tensor forward(const ModelSpec& spec, std::span<const Tensor> params,
                      const Tensor& batch) {
  require(batch.shape().size() == 4, ErrorKind::InvalidShape, "forward: batch must be NCHW");
  require(batch.shape()[1] == spec.in_channels && batch.shape()[2] == spec.in_h &&
              batch.shape()[3] == spec.in_w,
          ErrorKind::InvalidShape,
          "forward: batch " + shape_str(batch.shape()) + " does not match model input");
  require(params.size() == static_cast<size_t>(2 * spec.depth + 2), ErrorKind::Contract,
          "forward: wrong parameter count");
  const int n = batch.shape()[0];
  Tensor x = batch;
  int h = spec.in_h, w = spec.in_w;
  for (int d = 0; d < spec.depth; ++d) {
    x = conv2d(x, params[static_cast<size_t>(2 * d)]);
    x = add(x, channel_broadcast(params[static_cast<size_t>(2 * d + 1)], n, h, w));
    if (spec.norm == Norm::Instance) x = instance_norm(x);
    x = spec.act == Act::Relu ? relu(x) : sigmoid(x);
    if (spec.pool == Pool::Avg) {
      x = avgpool2x2(x);
      h /= 2;
      w /= 2;
    }
  }
  const FeatureDims dims = feature_dims(spec);
  Tensor flat = reshape(x, {n, dims.flat()});
  const Tensor& hw = params[params.size() - 2];
  const Tensor& hb = params[params.size() - 1];
  return add(matmul(flat, transpose(hw)), col_broadcast(hb, n));
}

inline Tensor forward(const ModelSpec& spec, const ModelParams& mp, const Tensor& batch) {
  return forward(spec, mp.values(), batch);
}

// Hard labels (class ids) or per-sample soft rows. Exactly one is set.
struct Labels {
  std::vector<int> hard;
  Tensor soft;

  static Labels classes(std::vector<int> ids) { return {std::move(ids), {}}; }
  static Labels soft_rows(Tensor rows) { return {{}, std::move(rows)}; }
  bool is_soft() const { return soft.defined(); }
};

namespace detail {

inline Tensor label_matrix(const Labels& labels, int n, int n_c) {
  if (labels.is_soft()) {
    const Tensor& p = labels.soft;
    require(p.shape().size() == 2 && p.shape()[0] == n && p.shape()[1] == n_c,
            ErrorKind::InvalidLabel, "soft labels must be [n x n_c]");
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n_c; ++j) {
        const float v = p.data()[static_cast<size_t>(i) * n_c + j];
        require(v >= 0.0f, ErrorKind::InvalidLabel, "negative soft label probability");
        s += v;
      }
      require(std::abs(s - 1.0) <= 1e-6, ErrorKind::InvalidLabel,
              "soft label row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
    return p.detached();
  }
  require(static_cast<int>(labels.hard.size()) == n, ErrorKind::InvalidLabel,
          "label count does not match batch");
  std::vector<float> d(static_cast<size_t>(n) * n_c, 0.0f);
  for (int i = 0; i < n; ++i) {
    const int c = labels.hard[static_cast<size_t>(i)];
    require(c >= 0 && c < n_c, ErrorKind::InvalidLabel,
            "class id " + std::to_string(c) + " out of range");
    d[static_cast<size_t>(i) * n_c + c] = 1.0f;
  }
  return Tensor({n, n_c}, std::move(d));
}

}  // namespace detail

// Mean over the batch of -sum_j p_j * log softmax(logits)_j.
inline Tensor cross_entropy(const Tensor& logits, const Labels& labels) {
  require(logits.shape().size() == 2, ErrorKind::InvalidShape, "cross_entropy: need [n x n_c]");
  const int n = logits.shape()[0], n_c = logits.shape()[1];
  Tensor p = detail::label_matrix(labels, n, n_c);
  return mul_scalar(sum(mul(p, log_softmax_rows(logits))), -1.0f / static_cast<float>(n));
}

// Per-parameter gradients of the cross-entropy on one batch. With
// create_graph=true this must run under the caller's active tape; the
// returned gradients stay differentiable w.r.t. the batch handle the caller
// watched (the path the distillation pixel updates need).
inline GradientSet grad_params_on(Tape& tape, const ModelSpec& spec, const ModelParams& mp,
                                  std::vector<Tensor>& watched_out, const Tensor& batch,
                                  const Labels& labels, bool create_graph) {
  watched_out.clear();
  for (const auto& e : mp.params) watched_out.push_back(tape.watch(e.value));
  Tensor logits = forward(spec, watched_out, batch);
  Tensor loss = cross_entropy(logits, labels);
  return tape.backward(loss, watched_out, create_graph);
}

inline GradientSet grad_params(const ModelSpec& spec, const ModelParams& mp, const Tensor& batch,
                               const Labels& labels, bool create_graph = false) {
  if (create_graph) {
    Tape* tp = Tape::active();
    require(tp != nullptr, ErrorKind::Contract, "grad_params: create_graph needs an active tape");
    std::vector<Tensor> watched;
    return grad_params_on(*tp, spec, mp, watched, batch, labels, create_graph);
  }
  Tape tape;
  Tape::Scope scope(tape);
  std::vector<Tensor> watched;
  GradientSet gs = grad_params_on(tape, spec, mp, watched, batch, labels, false);
  for (auto& g : gs.grads) g = g.detached();
  return gs;
}

// Plain minibatch SGD; batches cycle through a seeded reshuffle of the data.
inline ModelParams train(const ModelSpec& spec, ModelParams mp, const Tensor& images,
                         const std::vector<int>& labels, const TrainerConfig& cfg,
                         std::uint64_t seed) {
  validate(cfg);
  require(images.shape().size() == 4, ErrorKind::InvalidInput, "train: images must be NCHW");
  const int m = images.shape()[0];
  require(m >= 1 && static_cast<int>(labels.size()) == m, ErrorKind::InvalidInput,
          "train: empty data or label mismatch");
  if (cfg.steps == 0 || cfg.lr == 0.0f) return mp;

  RngStream rng(seed, "sgd");
  std::vector<int> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();  // force initial shuffle

  const int b = std::min(cfg.batch, m);
  std::vector<int> idx(static_cast<size_t>(b));
  for (int step = 0; step < cfg.steps; ++step) {
    for (int i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        for (size_t j = order.size(); j > 1; --j)
          std::swap(order[j - 1], order[rng.uniform_int(j)]);
        cursor = 0;
      }
      idx[static_cast<size_t>(i)] = order[cursor++];
    }
    Tensor batch = take_rows(images, idx);
    std::vector<int> batch_labels(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i)
      batch_labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];

    Tape tape;
    Tape::Scope scope(tape);
    std::vector<Tensor> watched;
    GradientSet gs = grad_params_on(tape, spec, mp, watched, batch, Labels::classes(batch_labels),
                                    false);
    for (size_t p = 0; p < mp.params.size(); ++p)
      mp.params[p].value = axpy(mp.params[p].value, -cfg.lr, gs.grads[p].detached());
  }
  return mp;
}

// Softmax of each logits row, computed without tape recording (metrics path).
inline Tensor softmax_rows_plain(const Tensor& logits) {
  Tape::NoGrad ng;
  return exp(log_softmax_rows(logits));
}

}  // namespace sfdd::nn
