#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sfdd/error.hpp"
#include "sfdd/rng.hpp"

namespace sfdd {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check_shape(const Shape& s) {
  require(!s.empty(), ErrorKind::InvalidShape, "empty shape");
  for (int e : s)
    require(e >= 1, ErrorKind::InvalidShape, "non-positive extent in " + shape_str(s));
}

// Dense row-major float tensor with shared immutable storage. A tensor may
// carry a handle into the tape that recorded it (tape generation + node id);
// tensors without a live handle are constants for differentiation purposes.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
    check_shape(shape_);
    require(static_cast<std::int64_t>(data.size()) == numel(shape_), ErrorKind::InvalidShape,
            "data length does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<float>>(std::move(data));
  }

  static Tensor zeros(Shape shape) {
    check_shape(shape);
    std::vector<float> d(static_cast<size_t>(numel(shape)), 0.0f);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor constant(Shape shape, float v) {
    check_shape(shape);
    std::vector<float> d(static_cast<size_t>(numel(shape)), v);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor gaussian(Shape shape, float mu, float sigma, RngStream& rng) {
    check_shape(shape);
    require(sigma >= 0.0f, ErrorKind::InvalidParameter, "gaussian sigma must be >= 0");
    std::vector<float> d(static_cast<size_t>(numel(shape)));
    for (auto& x : d) x = static_cast<float>(mu + sigma * rng.normal());
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor scalar(float v) { return constant({1}, v); }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  const float* data() const { return data_->data(); }
  std::span<const float> values() const { return {data_->data(), data_->size()}; }
  float item() const {
    require(size() == 1, ErrorKind::Contract, "item() on non-scalar tensor");
    return (*data_)[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (float v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Tape bookkeeping. node() is meaningful only together with tape_gen().
  bool has_node() const { return node_ >= 0; }
  int node() const { return node_; }
  std::uint64_t tape_gen() const { return tape_gen_; }
  void bind_node(std::uint64_t gen, int node) {
    tape_gen_ = gen;
    node_ = node;
  }
  Tensor detached() const {
    Tensor t = *this;
    t.node_ = -1;
    t.tape_gen_ = 0;
    return t;
  }
  bool requires_grad() const { return has_node(); }

 private:
  std::shared_ptr<std::vector<float>> data_;
  Shape shape_;
  std::uint64_t tape_gen_ = 0;
  int node_ = -1;
};

// Gathers slices along the first dimension (plain data op, never taped).
inline Tensor take_rows(const Tensor& t, std::span<const int> idx) {
  require(!t.shape().empty(), ErrorKind::InvalidShape, "take_rows: undefined tensor");
  const int m = t.shape()[0];
  const std::int64_t stride = t.size() / m;
  Shape out_shape = t.shape();
  out_shape[0] = static_cast<int>(idx.size());
  require(out_shape[0] >= 1, ErrorKind::InvalidInput, "take_rows: empty index list");
  std::vector<float> d(static_cast<size_t>(stride) * idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    const int r = idx[i];
    require(r >= 0 && r < m, ErrorKind::InvalidInput, "take_rows: index out of range");
    const float* src = t.data() + static_cast<size_t>(r) * stride;
    std::copy(src, src + stride, d.begin() + static_cast<std::int64_t>(i) * stride);
  }
  return Tensor(std::move(out_shape), std::move(d));
}

enum class InitKind { Zeros, Constant, Gaussian };

struct Init {
  InitKind kind = InitKind::Zeros;
  float value = 0.0f;  // Constant
  float mu = 0.0f, sigma = 1.0f;  // Gaussian

  static Init zeros() { return {}; }
  static Init constant(float v) { return {InitKind::Constant, v, 0.0f, 0.0f}; }
  static Init gaussian(float mu, float sigma) { return {InitKind::Gaussian, 0.0f, mu, sigma}; }
};

// Deterministic creation: gaussian draws use the SplitMix64 counter stream
// keyed by (seed, "create"), so content depends only on (shape, init, seed).
inline Tensor create(Shape shape, const Init& init, std::uint64_t seed) {
  switch (init.kind) {
    case InitKind::Zeros: return Tensor::zeros(std::move(shape));
    case InitKind::Constant: return Tensor::constant(std::move(shape), init.value);
    case InitKind::Gaussian: {
      RngStream rng(seed, "create");
      return Tensor::gaussian(std::move(shape), init.mu, init.sigma, rng);
    }
  }
  fail(ErrorKind::InvalidParameter, "unknown init kind");
}

}  // namespace sfdd
