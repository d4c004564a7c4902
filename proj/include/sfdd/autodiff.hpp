#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sfdd/error.hpp"
#include "sfdd/tensor.hpp"

namespace sfdd {

// ---------------------------------------------------------------------------
// Tape
//
// Records primitive applications in topological order. Backward walks the
// recorded nodes in reverse; every vector-Jacobian product is itself built
// from taped primitives, so when create_graph=true the returned gradients are
// ordinary graph tensors and can be differentiated again (second and higher
// order). A tape is confined to one thread of control at a time.
// ---------------------------------------------------------------------------

struct GradientSet {
  std::vector<Tensor> grads;

  size_t size() const { return grads.size(); }
  const Tensor& operator[](size_t i) const { return grads[i]; }
};

class Tape {
 public:
  using Sink = std::function<void(int slot, const Tensor& contrib)>;
  using BackFn = std::function<void(const Tensor& g, bool need0, bool need1, const Sink& sink)>;

  struct Node {
    int in0 = -1, in1 = -1;  // input node ids, -1 = constant input
    BackFn back;             // empty for leaves
  };

  Tape() : gen_(next_gen()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t gen() const { return gen_; }
  size_t size() const { return nodes_.size(); }

  static Tape* active() { return active_slot(); }

  // RAII activation. Scopes may nest; NoGrad suppresses recording entirely.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  class NoGrad {
   public:
    NoGrad() : prev_(active_slot()) { active_slot() = nullptr; }
    ~NoGrad() { active_slot() = prev_; }
    NoGrad(const NoGrad&) = delete;

   private:
    Tape* prev_;
  };

  // Registers a leaf; the returned handle is the differentiation target.
  Tensor watch(const Tensor& t) {
    Tensor out = t.detached();
    nodes_.push_back(Node{});
    out.bind_node(gen_, static_cast<int>(nodes_.size()) - 1);
    return out;
  }

  int add_node(int in0, int in1, BackFn back) {
    nodes_.push_back(Node{in0, in1, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // For ops whose VJP closes over their own (node-bound) output.
  void set_back(int node, BackFn back) { nodes_[static_cast<size_t>(node)].back = std::move(back); }

  // Reverse pass from a scalar loss. Returns one gradient per wrt entry,
  // shape-aligned; a wrt tensor unreachable from the loss gets a zero
  // gradient. With create_graph=true the gradients are tape-recorded and can
  // be differentiated further. The tape is never consumed: backward can be
  // replayed and yields identical results.
  GradientSet backward(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph);

 private:
  static std::uint64_t next_gen() {
    static std::uint64_t g = 0;
    return ++g;
  }
  static Tape*& active_slot() {
    thread_local Tape* a = nullptr;
    return a;
  }

  std::uint64_t gen_;
  std::vector<Node> nodes_;
};

namespace detail {

inline int node_on(const Tensor& t, const Tape* tp) {
  return (t.has_node() && t.tape_gen() == tp->gen()) ? t.node() : -1;
}

inline Tensor record1(Shape out_shape, std::vector<float> out_data, const Tensor& a,
                      Tape::BackFn back) {
  Tensor out(std::move(out_shape), std::move(out_data));
  Tape* tp = Tape::active();
  if (!tp) return out;
  int i0 = node_on(a, tp);
  if (i0 < 0) return out;
  out.bind_node(tp->gen(), tp->add_node(i0, -1, std::move(back)));
  return out;
}

inline Tensor record2(Shape out_shape, std::vector<float> out_data, const Tensor& a,
                      const Tensor& b, Tape::BackFn back) {
  Tensor out(std::move(out_shape), std::move(out_data));
  Tape* tp = Tape::active();
  if (!tp) return out;
  int i0 = node_on(a, tp);
  int i1 = node_on(b, tp);
  if (i0 < 0 && i1 < 0) return out;
  out.bind_node(tp->gen(), tp->add_node(i0, i1, std::move(back)));
  return out;
}

// Variants for ops whose VJP needs the output itself: the closure is built
// after the node is bound so the captured output carries its node id (this
// keeps higher-order derivatives exact through e.g. sigmoid and sqrt).
template <class MakeBack>
inline Tensor record1_out(Tensor out, const Tensor& a, MakeBack mk) {
  Tape* tp = Tape::active();
  if (!tp) return out;
  const int i0 = node_on(a, tp);
  if (i0 < 0) return out;
  const int nid = tp->add_node(i0, -1, {});
  out.bind_node(tp->gen(), nid);
  tp->set_back(nid, mk(out));
  return out;
}

template <class MakeBack>
inline Tensor record2_out(Tensor out, const Tensor& a, const Tensor& b, MakeBack mk) {
  Tape* tp = Tape::active();
  if (!tp) return out;
  const int i0 = node_on(a, tp);
  const int i1 = node_on(b, tp);
  if (i0 < 0 && i1 < 0) return out;
  const int nid = tp->add_node(i0, i1, {});
  out.bind_node(tp->gen(), nid);
  tp->set_back(nid, mk(out));
  return out;
}

}  // namespace detail

// --------------------------- primitive declarations ------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, int k);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor clamp_min(const Tensor& x, float c);
Tensor sum(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor row_sum(const Tensor& a);
Tensor row_broadcast(const Tensor& v, int cols);
Tensor col_sum(const Tensor& a);
Tensor col_broadcast(const Tensor& v, int rows);
Tensor channel_sum(const Tensor& x);
Tensor channel_broadcast(const Tensor& b, int n, int h, int w);
Tensor avgpool2x2(const Tensor& x);
Tensor upsample2x2(const Tensor& v, int out_h, int out_w);
Tensor reshape(const Tensor& x, Shape s);
Tensor broadcast_scalar(const Tensor& s, Shape shape);
Tensor patch_scatter(const Tensor& p, int n, int c, int h, int w, int y0, int x0);
Tensor patch_gather(const Tensor& x, int y0, int x0, int t);

// --------------------------- plain (never-taped) helpers -------------------

// y + alpha * x, elementwise; optimizer updates live outside any tape.
inline Tensor axpy(const Tensor& y, float alpha, const Tensor& x) {
  require(y.same_shape(x), ErrorKind::InvalidShape, "axpy: shape mismatch");
  std::vector<float> o(static_cast<size_t>(y.size()));
  const float* py = y.data();
  const float* px = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = py[i] + alpha * px[i];
  return Tensor(y.shape(), std::move(o));
}

inline Tensor clamp_values(const Tensor& t, float lo, float hi) {
  std::vector<float> o(static_cast<size_t>(t.size()));
  const float* p = t.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::min(hi, std::max(lo, p[i]));
  return Tensor(t.shape(), std::move(o));
}

inline void assert_finite(const Tensor& t, const char* what) {
  require(t.all_finite(), ErrorKind::Contract, std::string(what) + ": non-finite values");
}

namespace detail {

inline Tensor mask_gt(const Tensor& x, float c) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = p[i] > c ? 1.0f : 0.0f;
  return Tensor(x.shape(), std::move(o));
}

inline Tensor row_max_const(const Tensor& a) {
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<float> o(static_cast<size_t>(r));
  const float* p = a.data();
  for (int i = 0; i < r; ++i) {
    float m = p[static_cast<size_t>(i) * c];
    for (int j = 1; j < c; ++j) m = std::max(m, p[static_cast<size_t>(i) * c + j]);
    o[static_cast<size_t>(i)] = m;
  }
  return Tensor({r, 1}, std::move(o));
}

}  // namespace detail

// --------------------------- elementwise primitives ------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::InvalidShape,
          "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> o(static_cast<size_t>(a.size()));
  const float* pa = a.data();
  const float* pb = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];
  return detail::record2(a.shape(), std::move(o), a, b,
                         [](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, g);
                           if (n1) s(1, g);
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::InvalidShape,
          "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> o(static_cast<size_t>(a.size()));
  const float* pa = a.data();
  const float* pb = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] - pb[i];
  return detail::record2(a.shape(), std::move(o), a, b,
                         [](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, g);
                           if (n1) s(1, mul_scalar(g, -1.0f));
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::InvalidShape,
          "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> o(static_cast<size_t>(a.size()));
  const float* pa = a.data();
  const float* pb = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * pb[i];
  return detail::record2(a.shape(), std::move(o), a, b,
                         [a, b](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, mul(g, b));
                           if (n1) s(1, mul(g, a));
                         });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::InvalidShape,
          "div: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> o(static_cast<size_t>(a.size()));
  const float* pa = a.data();
  const float* pb = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] / pb[i];
  return detail::record2_out(Tensor(a.shape(), std::move(o)), a, b, [&b](const Tensor& out) {
    return [b, out](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
      if (n0) s(0, div(g, b));
      if (n1) s(1, mul_scalar(mul(g, div(out, b)), -1.0f));
    };
  });
}

inline Tensor mul_scalar(const Tensor& a, float c) {
  std::vector<float> o(static_cast<size_t>(a.size()));
  const float* pa = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * c;
  return detail::record1(a.shape(), std::move(o), a,
                         [c](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, mul_scalar(g, c));
                         });
}

inline Tensor add_scalar(const Tensor& a, float c) {
  std::vector<float> o(static_cast<size_t>(a.size()));
  const float* pa = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + c;
  return detail::record1(a.shape(), std::move(o), a,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, g);
                         });
}

// --------------------------- activations -----------------------------------

inline Tensor sigmoid(const Tensor& x) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = 1.0f / (1.0f + std::exp(-p[i]));
  return detail::record1_out(Tensor(x.shape(), std::move(o)), x, [](const Tensor& out) {
    return [out](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
      if (n0) s(0, mul(g, sub(out, mul(out, out))));
    };
  });
}

// Derivative at exactly 0 is defined as 0.
inline Tensor relu(const Tensor& x) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = p[i] > 0.0f ? p[i] : 0.0f;
  return detail::record1(x.shape(), std::move(o), x,
                         [x](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, mul(g, detail::mask_gt(x, 0.0f)));
                         });
}

inline Tensor exp(const Tensor& x) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::exp(p[i]);
  return detail::record1_out(Tensor(x.shape(), std::move(o)), x, [](const Tensor& out) {
    return [out](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
      if (n0) s(0, mul(g, out));
    };
  });
}

// Arguments are floored at 1e-12 so log never sees 0.
inline Tensor log(const Tensor& x) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::log(std::max(p[i], 1e-12f));
  return detail::record1(x.shape(), std::move(o), x,
                         [x](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, div(g, clamp_min(x, 1e-12f)));
                         });
}

inline Tensor sqrt(const Tensor& x) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::sqrt(p[i]);
  return detail::record1_out(Tensor(x.shape(), std::move(o)), x, [](const Tensor& out) {
    return [out](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
      if (n0) s(0, div(mul_scalar(g, 0.5f), clamp_min(out, 1e-12f)));
    };
  });
}

inline Tensor clamp_min(const Tensor& x, float c) {
  std::vector<float> o(static_cast<size_t>(x.size()));
  const float* p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::max(p[i], c);
  return detail::record1(x.shape(), std::move(o), x,
                         [x, c](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, mul(g, detail::mask_gt(x, c)));
                         });
}

// --------------------------- linear algebra --------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
          ErrorKind::InvalidShape,
          "matmul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<float> o(static_cast<size_t>(m) * n, 0.0f);
  const float* pa = a.data();
  const float* pb = b.data();
  for (int i = 0; i < m; ++i) {
    float* orow = o.data() + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float av = pa[static_cast<size_t>(i) * k + l];
      const float* brow = pb + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::record2({m, n}, std::move(o), a, b,
                         [a, b](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, matmul(g, transpose(b)));
                           if (n1) s(1, matmul(transpose(a), g));
                         });
}

inline Tensor transpose(const Tensor& a) {
  require(a.shape().size() == 2, ErrorKind::InvalidShape, "transpose: need rank-2");
  const int m = a.shape()[0], n = a.shape()[1];
  std::vector<float> o(static_cast<size_t>(m) * n);
  const float* p = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) o[static_cast<size_t>(j) * m + i] = p[static_cast<size_t>(i) * n + j];
  return detail::record1({n, m}, std::move(o), a,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, transpose(g));
                         });
}

// --------------------------- convolution trilogy ---------------------------
//
// Same-size convolution: stride 1, odd square kernel k, padding (k-1)/2.
// The three linear maps conv2d / conv2d_input_grad / conv2d_weight_grad are
// mutual adjoints, so each one's VJP is expressed through the other two and
// the set is closed under differentiation at any order.

namespace detail {

inline void conv_shapes(const Tensor& x, const Tensor& w, int& n, int& ci, int& h, int& wd,
                        int& co, int& k) {
  require(x.shape().size() == 4 && w.shape().size() == 4, ErrorKind::InvalidShape,
          "conv2d: need NCHW input and OIKK kernel");
  n = x.shape()[0];
  ci = x.shape()[1];
  h = x.shape()[2];
  wd = x.shape()[3];
  co = w.shape()[0];
  k = w.shape()[2];
  require(w.shape()[1] == ci, ErrorKind::InvalidShape, "conv2d: channel mismatch");
  require(w.shape()[3] == k && (k % 2) == 1, ErrorKind::InvalidShape,
          "conv2d: kernel must be odd and square");
}

// Zero-padded copy of all channel planes of one image: [ci][(h+2p)x(w+2p)].
inline void fill_padded(const float* src, int ci, int h, int w, int pad, float* dst) {
  const int pw = w + 2 * pad;
  const int ph = h + 2 * pad;
  std::fill(dst, dst + static_cast<size_t>(ci) * ph * pw, 0.0f);
  for (int c = 0; c < ci; ++c) {
    const float* s = src + static_cast<size_t>(c) * h * w;
    float* d = dst + static_cast<size_t>(c) * ph * pw + static_cast<size_t>(pad) * pw + pad;
    for (int i = 0; i < h; ++i) std::copy(s + static_cast<size_t>(i) * w,
                                          s + static_cast<size_t>(i) * w + w,
                                          d + static_cast<size_t>(i) * pw);
  }
}

// acc[h x w] += correlation of one padded plane with a k x k tap set.
inline void corr_accum(float* acc, const float* padded, const float* taps, int h, int w, int k) {
  const int pw = w + k - 1;
  if (k == 3) {
    const float w00 = taps[0], w01 = taps[1], w02 = taps[2];
    const float w10 = taps[3], w11 = taps[4], w12 = taps[5];
    const float w20 = taps[6], w21 = taps[7], w22 = taps[8];
    for (int i = 0; i < h; ++i) {
      const float* r0 = padded + static_cast<size_t>(i) * pw;
      const float* r1 = r0 + pw;
      const float* r2 = r1 + pw;
      float* dst = acc + static_cast<size_t>(i) * w;
      for (int j = 0; j < w; ++j)
        dst[j] += w00 * r0[j] + w01 * r0[j + 1] + w02 * r0[j + 2] + w10 * r1[j] +
                  w11 * r1[j + 1] + w12 * r1[j + 2] + w20 * r2[j] + w21 * r2[j + 1] +
                  w22 * r2[j + 2];
    }
    return;
  }
  for (int i = 0; i < h; ++i) {
    float* dst = acc + static_cast<size_t>(i) * w;
    for (int p = 0; p < k; ++p) {
      const float* row = padded + static_cast<size_t>(i + p) * pw;
      for (int q = 0; q < k; ++q) {
        const float tap = taps[static_cast<size_t>(p) * k + q];
        for (int j = 0; j < w; ++j) dst[j] += tap * row[j + q];
      }
    }
  }
}

// taps[k x k] += per-tap dots of gy rows with shifted padded-x rows.
inline void tap_accum(double* taps, const float* gy_plane, const float* padded, int h, int w,
                      int k) {
  const int pw = w + k - 1;
  for (int i = 0; i < h; ++i) {
    const float* gr = gy_plane + static_cast<size_t>(i) * w;
    for (int p = 0; p < k; ++p) {
      const float* row = padded + static_cast<size_t>(i + p) * pw;
      for (int q = 0; q < k; ++q) {
        float partial = 0.0f;
        const float* r = row + q;
        for (int j = 0; j < w; ++j) partial += gr[j] * r[j];
        taps[static_cast<size_t>(p) * k + q] += partial;
      }
    }
  }
}

}  // namespace detail

// y[n,o,i,j] = sum_{c,p,q} x[n,c,i+p-pad,j+q-pad] * w[o,c,p,q], zero padded.
inline Tensor conv2d(const Tensor& x, const Tensor& w) {
  int n, ci, h, wd, co, k;
  detail::conv_shapes(x, w, n, ci, h, wd, co, k);
  const int pad = (k - 1) / 2;
  const size_t plane = static_cast<size_t>(h) * wd;
  const size_t pplane = static_cast<size_t>(h + 2 * pad) * (wd + 2 * pad);
  std::vector<float> o(static_cast<size_t>(n) * co * plane, 0.0f);
  std::vector<float> padded(static_cast<size_t>(ci) * pplane);
  const float* px = x.data();
  const float* pw = w.data();
  for (int in = 0; in < n; ++in) {
    detail::fill_padded(px + static_cast<size_t>(in) * ci * plane, ci, h, wd, pad, padded.data());
    for (int io = 0; io < co; ++io) {
      float* acc = o.data() + (static_cast<size_t>(in) * co + io) * plane;
      for (int ic = 0; ic < ci; ++ic)
        detail::corr_accum(acc, padded.data() + static_cast<size_t>(ic) * pplane,
                           pw + (static_cast<size_t>(io) * ci + ic) * k * k, h, wd, k);
    }
  }
  return detail::record2({n, co, h, wd}, std::move(o), x, w,
                         [x, w, k](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, conv2d_input_grad(g, w));
                           if (n1) s(1, conv2d_weight_grad(x, g, k));
                         });
}

// gx[n,c,a,b] = sum_{o,p,q} gy[n,o,a-p+pad,b-q+pad] * w[o,c,p,q]; this is a
// correlation of gy with the kernel flipped in both spatial axes and
// transposed in (o,c).
inline Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w) {
  require(gy.shape().size() == 4 && w.shape().size() == 4, ErrorKind::InvalidShape,
          "conv2d_input_grad: need NCHW and OIKK");
  const int n = gy.shape()[0], co = gy.shape()[1], h = gy.shape()[2], wd = gy.shape()[3];
  const int ci = w.shape()[1], k = w.shape()[2];
  require(w.shape()[0] == co, ErrorKind::InvalidShape, "conv2d_input_grad: channel mismatch");
  const int pad = (k - 1) / 2;
  const size_t plane = static_cast<size_t>(h) * wd;
  const size_t pplane = static_cast<size_t>(h + 2 * pad) * (wd + 2 * pad);
  std::vector<float> o(static_cast<size_t>(n) * ci * plane, 0.0f);
  std::vector<float> padded(static_cast<size_t>(co) * pplane);
  std::vector<float> flipped(static_cast<size_t>(k) * k);
  const float* pg = gy.data();
  const float* pw = w.data();
  for (int in = 0; in < n; ++in) {
    detail::fill_padded(pg + static_cast<size_t>(in) * co * plane, co, h, wd, pad, padded.data());
    for (int ic = 0; ic < ci; ++ic) {
      float* acc = o.data() + (static_cast<size_t>(in) * ci + ic) * plane;
      for (int io = 0; io < co; ++io) {
        const float* wk = pw + (static_cast<size_t>(io) * ci + ic) * k * k;
        for (int p = 0; p < k; ++p)
          for (int q = 0; q < k; ++q)
            flipped[static_cast<size_t>(p) * k + q] =
                wk[static_cast<size_t>(k - 1 - p) * k + (k - 1 - q)];
        detail::corr_accum(acc, padded.data() + static_cast<size_t>(io) * pplane, flipped.data(),
                           h, wd, k);
      }
    }
  }
  return detail::record2({n, ci, h, wd}, std::move(o), gy, w,
                         [gy, w, k](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, conv2d(g, w));
                           if (n1) s(1, conv2d_weight_grad(g, gy, k));
                         });
}

// gw[o,c,p,q] = sum_{n,i,j} gy[n,o,i,j] * x[n,c,i+p-pad,j+q-pad].
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, int k) {
  require(x.shape().size() == 4 && gy.shape().size() == 4, ErrorKind::InvalidShape,
          "conv2d_weight_grad: need NCHW inputs");
  const int n = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int co = gy.shape()[1];
  require(gy.shape()[0] == n && gy.shape()[2] == h && gy.shape()[3] == wd, ErrorKind::InvalidShape,
          "conv2d_weight_grad: shape mismatch");
  const int pad = (k - 1) / 2;
  const size_t plane = static_cast<size_t>(h) * wd;
  const size_t pplane = static_cast<size_t>(h + 2 * pad) * (wd + 2 * pad);
  std::vector<double> acc(static_cast<size_t>(co) * ci * k * k, 0.0);
  std::vector<float> padded(static_cast<size_t>(ci) * pplane);
  const float* px = x.data();
  const float* pg = gy.data();
  for (int in = 0; in < n; ++in) {
    detail::fill_padded(px + static_cast<size_t>(in) * ci * plane, ci, h, wd, pad, padded.data());
    for (int io = 0; io < co; ++io) {
      const float* gy_plane = pg + (static_cast<size_t>(in) * co + io) * plane;
      for (int ic = 0; ic < ci; ++ic)
        detail::tap_accum(acc.data() + (static_cast<size_t>(io) * ci + ic) * k * k, gy_plane,
                          padded.data() + static_cast<size_t>(ic) * pplane, h, wd, k);
    }
  }
  std::vector<float> o(acc.size());
  for (size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<float>(acc[i]);
  return detail::record2({co, ci, k, k}, std::move(o), x, gy,
                         [x, gy, k](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, conv2d_input_grad(gy, g));
                           if (n1) s(1, conv2d(x, g));
                         });
}

// --------------------------- reductions & broadcasts -----------------------

// Reductions accumulate in double; the matching losses difference
// near-equal quantities and 32-bit accumulation drifts at desk scale.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  const float* p = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) acc += p[i];
  std::vector<float> o{static_cast<float>(acc)};
  return detail::record1({1}, std::move(o), x,
                         [shape = x.shape()](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, broadcast_scalar(g, shape));
                         });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::InvalidShape, "dot: shape mismatch");
  double acc = 0.0;
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(pa[i]) * pb[i];
  std::vector<float> o{static_cast<float>(acc)};
  return detail::record2({1}, std::move(o), a, b,
                         [a, b](const Tensor& g, bool n0, bool n1, const Tape::Sink& s) {
                           if (n0) s(0, mul(broadcast_scalar(g, a.shape()), b));
                           if (n1) s(1, mul(broadcast_scalar(g, b.shape()), a));
                         });
}

inline Tensor row_sum(const Tensor& a) {
  require(a.shape().size() == 2, ErrorKind::InvalidShape, "row_sum: need rank-2");
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<float> o(static_cast<size_t>(r));
  const float* p = a.data();
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    const float* row = p + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) acc += row[j];
    o[static_cast<size_t>(i)] = static_cast<float>(acc);
  }
  return detail::record1({r, 1}, std::move(o), a,
                         [c](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, row_broadcast(g, c));
                         });
}

inline Tensor row_broadcast(const Tensor& v, int cols) {
  require(v.shape().size() == 2 && v.shape()[1] == 1, ErrorKind::InvalidShape,
          "row_broadcast: need [R,1]");
  const int r = v.shape()[0];
  std::vector<float> o(static_cast<size_t>(r) * cols);
  const float* p = v.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < cols; ++j) o[static_cast<size_t>(i) * cols + j] = p[i];
  return detail::record1({r, cols}, std::move(o), v,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, row_sum(g));
                         });
}

inline Tensor col_sum(const Tensor& a) {
  require(a.shape().size() == 2, ErrorKind::InvalidShape, "col_sum: need rank-2");
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<double> acc(static_cast<size_t>(c), 0.0);
  const float* p = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) acc[static_cast<size_t>(j)] += p[static_cast<size_t>(i) * c + j];
  std::vector<float> o(static_cast<size_t>(c));
  for (int j = 0; j < c; ++j) o[static_cast<size_t>(j)] = static_cast<float>(acc[static_cast<size_t>(j)]);
  return detail::record1({c}, std::move(o), a,
                         [r](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, col_broadcast(g, r));
                         });
}

inline Tensor col_broadcast(const Tensor& v, int rows) {
  require(v.shape().size() == 1, ErrorKind::InvalidShape, "col_broadcast: need rank-1");
  const int c = v.shape()[0];
  std::vector<float> o(static_cast<size_t>(rows) * c);
  const float* p = v.data();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) o[static_cast<size_t>(i) * c + j] = p[j];
  return detail::record1({rows, c}, std::move(o), v,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, col_sum(g));
                         });
}

inline Tensor channel_sum(const Tensor& x) {
  require(x.shape().size() == 4, ErrorKind::InvalidShape, "channel_sum: need NCHW");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<double> acc(static_cast<size_t>(c), 0.0);
  const float* p = x.data();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const float* src = p + (static_cast<size_t>(in) * c + ic) * plane;
      double a = 0.0;
      for (size_t i = 0; i < plane; ++i) a += src[i];
      acc[static_cast<size_t>(ic)] += a;
    }
  std::vector<float> o(static_cast<size_t>(c));
  for (int ic = 0; ic < c; ++ic) o[static_cast<size_t>(ic)] = static_cast<float>(acc[static_cast<size_t>(ic)]);
  return detail::record1({c}, std::move(o), x,
                         [n, h, w](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, channel_broadcast(g, n, h, w));
                         });
}

inline Tensor channel_broadcast(const Tensor& b, int n, int h, int w) {
  require(b.shape().size() == 1, ErrorKind::InvalidShape, "channel_broadcast: need rank-1");
  const int c = b.shape()[0];
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<float> o(static_cast<size_t>(n) * c * plane);
  const float* p = b.data();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      float* dst = o.data() + (static_cast<size_t>(in) * c + ic) * plane;
      for (size_t i = 0; i < plane; ++i) dst[i] = p[ic];
    }
  return detail::record1({n, c, h, w}, std::move(o), b,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, channel_sum(g));
                         });
}

inline Tensor broadcast_scalar(const Tensor& s, Shape shape) {
  require(s.size() == 1, ErrorKind::InvalidShape, "broadcast_scalar: need scalar");
  check_shape(shape);
  std::vector<float> o(static_cast<size_t>(numel(shape)), s.data()[0]);
  return detail::record1(std::move(shape), std::move(o), s,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& sk) {
                           if (n0) sk(0, sum(g));
                         });
}

// --------------------------- pooling ---------------------------------------

inline Tensor avgpool2x2(const Tensor& x) {
  require(x.shape().size() == 4, ErrorKind::InvalidShape, "avgpool2x2: need NCHW");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int oh = h / 2, ow = w / 2;
  require(oh >= 1 && ow >= 1, ErrorKind::InvalidShape, "avgpool2x2: spatial dims too small");
  std::vector<float> o(static_cast<size_t>(n) * c * oh * ow);
  const float* p = x.data();
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(oh) * ow;
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const float* src = p + (static_cast<size_t>(in) * c + ic) * plane;
      float* dst = o.data() + (static_cast<size_t>(in) * c + ic) * oplane;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const float* r0 = src + static_cast<size_t>(2 * i) * w + 2 * j;
          const float* r1 = r0 + w;
          dst[static_cast<size_t>(i) * ow + j] = 0.25f * (r0[0] + r0[1] + r1[0] + r1[1]);
        }
    }
  return detail::record1({n, c, oh, ow}, std::move(o), x,
                         [h, w](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, upsample2x2(mul_scalar(g, 0.25f), h, w));
                         });
}

// Each value is replicated into its 2x2 block; odd tail rows/cols get zero.
inline Tensor upsample2x2(const Tensor& v, int out_h, int out_w) {
  require(v.shape().size() == 4, ErrorKind::InvalidShape, "upsample2x2: need NCHW");
  const int n = v.shape()[0], c = v.shape()[1], h = v.shape()[2], w = v.shape()[3];
  require(out_h / 2 == h && out_w / 2 == w, ErrorKind::InvalidShape,
          "upsample2x2: target size mismatch");
  std::vector<float> o(static_cast<size_t>(n) * c * out_h * out_w, 0.0f);
  const float* p = v.data();
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(out_h) * out_w;
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const float* src = p + (static_cast<size_t>(in) * c + ic) * plane;
      float* dst = o.data() + (static_cast<size_t>(in) * c + ic) * oplane;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const float val = src[static_cast<size_t>(i) * w + j];
          float* r0 = dst + static_cast<size_t>(2 * i) * out_w + 2 * j;
          r0[0] = val;
          r0[1] = val;
          r0[out_w] = val;
          r0[out_w + 1] = val;
        }
    }
  return detail::record1({n, c, out_h, out_w}, std::move(o), v,
                         [](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, mul_scalar(avgpool2x2(g), 4.0f));
                         });
}

// --------------------------- shape ops -------------------------------------

inline Tensor reshape(const Tensor& x, Shape s) {
  check_shape(s);
  require(numel(s) == x.size(), ErrorKind::InvalidShape,
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(s) + " changes element count");
  std::vector<float> o(x.values().begin(), x.values().end());
  return detail::record1(std::move(s), std::move(o), x,
                         [shape = x.shape()](const Tensor& g, bool n0, bool, const Tape::Sink& sk) {
                           if (n0) sk(0, reshape(g, shape));
                         });
}

// --------------------------- patch ops (trigger embedding) -----------------

// Places patch p (t x t) at (y0,x0) of every image and channel; zeros
// elsewhere. Adjoint of patch_gather.
inline Tensor patch_scatter(const Tensor& p, int n, int c, int h, int w, int y0, int x0) {
  require(p.shape().size() == 2 && p.shape()[0] == p.shape()[1], ErrorKind::InvalidShape,
          "patch_scatter: need square patch");
  const int t = p.shape()[0];
  require(y0 >= 0 && x0 >= 0 && y0 + t <= h && x0 + t <= w, ErrorKind::InvalidShape,
          "patch_scatter: patch out of bounds");
  std::vector<float> o(static_cast<size_t>(n) * c * h * w, 0.0f);
  const float* pp = p.data();
  const size_t plane = static_cast<size_t>(h) * w;
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      float* dst = o.data() + (static_cast<size_t>(in) * c + ic) * plane;
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j)
          dst[static_cast<size_t>(y0 + i) * w + (x0 + j)] = pp[static_cast<size_t>(i) * t + j];
    }
  return detail::record1({n, c, h, w}, std::move(o), p,
                         [y0, x0, t](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, patch_gather(g, y0, x0, t));
                         });
}

inline Tensor patch_gather(const Tensor& x, int y0, int x0, int t) {
  require(x.shape().size() == 4, ErrorKind::InvalidShape, "patch_gather: need NCHW");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  require(y0 >= 0 && x0 >= 0 && y0 + t <= h && x0 + t <= w, ErrorKind::InvalidShape,
          "patch_gather: region out of bounds");
  std::vector<float> o(static_cast<size_t>(t) * t, 0.0f);
  const float* p = x.data();
  const size_t plane = static_cast<size_t>(h) * w;
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const float* src = p + (static_cast<size_t>(in) * c + ic) * plane;
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j)
          o[static_cast<size_t>(i) * t + j] += src[static_cast<size_t>(y0 + i) * w + (x0 + j)];
    }
  return detail::record1({t, t}, std::move(o), x,
                         [n, c, h, w, y0, x0](const Tensor& g, bool n0, bool, const Tape::Sink& s) {
                           if (n0) s(0, patch_scatter(g, n, c, h, w, y0, x0));
                         });
}

// --------------------------- composites ------------------------------------

inline Tensor mean(const Tensor& x) {
  return mul_scalar(sum(x), 1.0f / static_cast<float>(x.size()));
}

inline Tensor l2_norm(const Tensor& x) { return sqrt(clamp_min(dot(x, x), 1e-20f)); }

// Per-(n,c) spatial normalization, epsilon 1e-5, no affine parameters.
inline Tensor instance_norm(const Tensor& x, float eps = 1e-5f) {
  require(x.shape().size() == 4, ErrorKind::InvalidShape, "instance_norm: need NCHW");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int r = n * c, sp = h * w;
  Tensor xf = reshape(x, {r, sp});
  Tensor m = mul_scalar(row_sum(xf), 1.0f / static_cast<float>(sp));
  Tensor xc = sub(xf, row_broadcast(m, sp));
  Tensor var = mul_scalar(row_sum(mul(xc, xc)), 1.0f / static_cast<float>(sp));
  Tensor inv = div(Tensor::constant({r, 1}, 1.0f), sqrt(add_scalar(var, eps)));
  return reshape(mul(xc, row_broadcast(inv, sp)), x.shape());
}

// Row-wise log softmax; the row max is subtracted as a detached constant
// (softmax is shift invariant, so values and all derivatives are exact).
inline Tensor log_softmax_rows(const Tensor& z) {
  require(z.shape().size() == 2, ErrorKind::InvalidShape, "log_softmax_rows: need rank-2");
  const int k = z.shape()[1];
  Tensor zs = sub(z, row_broadcast(detail::row_max_const(z), k));
  Tensor lse = log(row_sum(exp(zs)));
  return sub(zs, row_broadcast(lse, k));
}

// --------------------------- backward --------------------------------------

inline GradientSet Tape::backward(const Tensor& loss, std::span<const Tensor> wrt,
                                  bool create_graph) {
  require(loss.size() == 1, ErrorKind::Contract, "backward: loss must be scalar");
  GradientSet out;
  out.grads.reserve(wrt.size());

  const int loss_node = detail::node_on(loss, this);
  if (loss_node < 0) {
    for (const Tensor& t : wrt) out.grads.push_back(Tensor::zeros(t.shape()));
    return out;
  }

  std::vector<Tensor> adj(static_cast<size_t>(loss_node) + 1);
  adj[static_cast<size_t>(loss_node)] = Tensor::scalar(1.0f);

  auto run = [&] {
    for (int i = loss_node; i >= 0; --i) {
      const Node& nd = nodes_[static_cast<size_t>(i)];
      Tensor& g = adj[static_cast<size_t>(i)];
      if (!g.defined() || !nd.back) continue;
      const bool need0 = nd.in0 >= 0;
      const bool need1 = nd.in1 >= 0;
      nd.back(g, need0, need1, [&](int slot, const Tensor& contrib) {
        const int j = slot == 0 ? nd.in0 : nd.in1;
        if (j < 0) return;
        Tensor& a = adj[static_cast<size_t>(j)];
        a = a.defined() ? add(a, contrib) : contrib;
      });
    }
  };

  if (create_graph) {
    require(active() == this, ErrorKind::Contract,
            "backward: create_graph requires this tape to be active");
    run();
  } else {
    NoGrad ng;
    run();
  }

  for (const Tensor& t : wrt) {
    const int n = detail::node_on(t, this);
    require(n >= 0, ErrorKind::Contract, "backward: wrt tensor is not watched on this tape");
    if (n <= loss_node && adj[static_cast<size_t>(n)].defined())
      out.grads.push_back(adj[static_cast<size_t>(n)]);
    else
      out.grads.push_back(Tensor::zeros(t.shape()));
  }
  return out;
}

// --------------------------- finite differences ----------------------------

// Central-difference gradient oracle; f is evaluated with recording disabled.
// The divisor is the actually-stored perturbation, which removes the float32
// input-quantization error from the estimate.
template <class F>
Tensor finite_diff(F&& f, const Tensor& x, double h) {
  require(h > 0.0, ErrorKind::InvalidParameter, "finite_diff: h must be > 0");
  Tape::NoGrad ng;
  std::vector<float> base(x.values().begin(), x.values().end());
  std::vector<float> g(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<float> up = base, dn = base;
    up[i] = static_cast<float>(base[i] + h);
    dn[i] = static_cast<float>(base[i] - h);
    const double span = static_cast<double>(up[i]) - static_cast<double>(dn[i]);
    const double fp = f(Tensor(x.shape(), std::move(up)));
    const double fm = f(Tensor(x.shape(), std::move(dn)));
    g[i] = static_cast<float>((fp - fm) / span);
  }
  return Tensor(x.shape(), std::move(g));
}

// --------------------------- generic dispatch ------------------------------

enum class OpKind {
  Add,
  Sub,
  MulScalar,
  Matmul,
  Conv2d,
  Sigmoid,
  Relu,
  InstanceNorm,
  AvgPool2x2,
  Reshape,
  Sum,
  Mean,
  L2Norm,
  Dot,
};

struct OpAttrs {
  float scalar = 0.0f;
  Shape shape;
};

inline Tensor apply(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs = {}) {
  auto arity = [&](size_t n) {
    require(in.size() == n, ErrorKind::Contract, "apply: wrong input count");
  };
  switch (kind) {
    case OpKind::Add: arity(2); return add(in[0], in[1]);
    case OpKind::Sub: arity(2); return sub(in[0], in[1]);
    case OpKind::MulScalar: arity(1); return mul_scalar(in[0], attrs.scalar);
    case OpKind::Matmul: arity(2); return matmul(in[0], in[1]);
    case OpKind::Conv2d: arity(2); return conv2d(in[0], in[1]);
    case OpKind::Sigmoid: arity(1); return sigmoid(in[0]);
    case OpKind::Relu: arity(1); return relu(in[0]);
    case OpKind::InstanceNorm: arity(1); return instance_norm(in[0]);
    case OpKind::AvgPool2x2: arity(1); return avgpool2x2(in[0]);
    case OpKind::Reshape: arity(1); return reshape(in[0], attrs.shape);
    case OpKind::Sum: arity(1); return sum(in[0]);
    case OpKind::Mean: arity(1); return mean(in[0]);
    case OpKind::L2Norm: arity(1); return l2_norm(in[0]);
    case OpKind::Dot: arity(2); return dot(in[0], in[1]);
  }
  fail(ErrorKind::InvalidParameter, "apply: unknown op kind");
}

}  // namespace sfdd
