#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>

#include "tess/common.hpp"

namespace tess {

// Reverse-mode autodiff over dense row-major tensors. Every op that sees a
// tape-participating input records its parents and an adjoint closure on the
// produced node; backward() replays those closures once, in reverse
// topological order.
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  bool on_tape = false;
  bool backward_done = false;
  bool visit_mark = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  std::size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
  }
};

class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Real(0), requires_grad);
  }

  static Tensor filled(Shape shape, Real value, bool requires_grad = false) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data.assign(numel(t.node_->shape), value);
    t.node_->requires_grad = requires_grad;
    t.node_->on_tape = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<Real> data,
                          bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    t.node_->on_tape = requires_grad;
    return t;
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }

  std::vector<Real>& data() { return node_->data; }
  const std::vector<Real>& data() const { return node_->data; }
  std::vector<Real>& grad() { return node_->grad; }
  const std::vector<Real>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  Real item() const {
    if (size() != 1)
      throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode> node() const { return node_; }

  // Identity of the underlying storage; two Tensors sharing a node are the
  // same parameter (the basis of cross-layer weight sharing).
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    std::size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size());
  std::size_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

// Strides of `shape` viewed as broadcast to `out_shape` (0 on expanded dims).
inline std::vector<std::size_t> broadcast_strides(const Shape& shape,
                                                  const Shape& out_shape) {
  auto base = row_major_strides(shape);
  std::vector<std::size_t> s(out_shape.size(), 0);
  std::size_t off = out_shape.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i)
    s[off + i] = shape[i] == 1 ? 0 : base[i];
  return s;
}

// Accumulate an out_shape-sized gradient buffer into a grad buffer of
// operand shape, summing over broadcast dimensions.
inline void reduce_into(const std::vector<Real>& g, const Shape& out_shape,
                        std::vector<Real>& dst, const Shape& dst_shape) {
  auto strides = broadcast_strides(dst_shape, out_shape);
  auto out_strides = row_major_strides(out_shape);
  std::size_t n = numel(out_shape);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, idx = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      std::size_t coord = rem / out_strides[d];
      rem %= out_strides[d];
      idx += coord * strides[d];
    }
    dst[idx] += g[flat];
  }
}

inline bool tape_active(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->node()->on_tape) return true;
  return false;
}

inline void attach(Tensor& out, std::vector<Tensor> parents,
                   std::function<void(TensorNode&)> backprop) {
  auto node = out.node();
  node->on_tape = true;
  for (auto& p : parents) node->parents.push_back(p.node());
  node->backprop = std::move(backprop);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast ops

template <typename Fwd, typename Bwd>
inline Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(out_shape);
  auto sa = detail::broadcast_strides(a.shape(), out_shape);
  auto sb = detail::broadcast_strides(b.shape(), out_shape);
  auto so = detail::row_major_strides(out_shape);
  std::size_t n = out.size();
  const auto& da = a.data();
  const auto& db = b.data();
  auto& dout = out.data();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, ia = 0, ib = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      std::size_t coord = rem / so[d];
      rem %= so[d];
      ia += coord * sa[d];
      ib += coord * sb[d];
    }
    dout[flat] = fwd(da[ia], db[ib]);
  }
  if (detail::tape_active({&a, &b})) {
    auto an = a.node();
    auto bn = b.node();
    detail::attach(out, {a, b}, [an, bn, sa, sb, so, out_shape,
                                 bwd](TensorNode& o) {
      std::size_t n = o.size();
      bool ga = an->on_tape, gb = bn->on_tape;
      if (ga) an->ensure_grad();
      if (gb) bn->ensure_grad();
      for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, ia = 0, ib = 0;
        for (std::size_t d = 0; d < out_shape.size(); ++d) {
          std::size_t coord = rem / so[d];
          rem %= so[d];
          ia += coord * sa[d];
          ib += coord * sb[d];
        }
        Real dda, ddb;
        bwd(an->data[ia], bn->data[ib], o.grad[flat], dda, ddb);
        if (ga) an->grad[ia] += dda;
        if (gb) bn->grad[ib] += ddb;
      }
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real g, Real& dx, Real& dy) {
        dx = g;
        dy = g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real g, Real& dx, Real& dy) {
        dx = g;
        dy = -g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real g, Real& dx, Real& dy) {
        dx = g * y;
        dy = g * x;
      });
}

inline Tensor scale(const Tensor& a, Real c) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  if (a.node()->on_tape) {
    auto an = a.node();
    detail::attach(out, {a}, [an, c](TensorNode& o) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i] * c;
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  Real s = 0;
  for (Real v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (a.node()->on_tape) {
    auto an = a.node();
    detail::attach(out, {a}, [an](TensorNode& o) {
      an->ensure_grad();
      for (std::size_t i = 0; i < an->size(); ++i) an->grad[i] += o.grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul: a[..,m,k] x b[..,k,n] with broadcast-compatible leading dims.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul needs >=2-d operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  std::size_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  if (k != k2)
    throw ShapeError("matmul inner dimension mismatch: " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch = detail::broadcast_shape(abatch, bbatch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = Tensor::zeros(out_shape);

  auto sa = detail::broadcast_strides(abatch, batch);
  auto sb = detail::broadcast_strides(bbatch, batch);
  auto sbatch = detail::row_major_strides(batch);
  std::size_t nbatch = numel(batch);
  std::size_t a_mat = m * k, b_mat = k * n, o_mat = m * n;

  auto slice_offsets = [sa, sb, sbatch, a_mat, b_mat](
                           std::size_t bi, std::size_t& oa, std::size_t& ob) {
    std::size_t rem = bi;
    oa = ob = 0;
    for (std::size_t d = 0; d < sbatch.size(); ++d) {
      std::size_t coord = rem / sbatch[d];
      rem %= sbatch[d];
      oa += coord * sa[d];
      ob += coord * sb[d];
    }
    oa *= a_mat;
    ob *= b_mat;
  };

  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  Real* po = out.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (long long bi = 0; bi < static_cast<long long>(nbatch); ++bi) {
    std::size_t oa, ob;
    slice_offsets(static_cast<std::size_t>(bi), oa, ob);
    const Real* A = pa + oa;
    const Real* B = pb + ob;
    Real* C = po + static_cast<std::size_t>(bi) * o_mat;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        Real av = A[i * k + kk];
        const Real* brow = B + kk * n;
        Real* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  if (detail::tape_active({&a, &b})) {
    auto an = a.node();
    auto bn = b.node();
    detail::attach(out, {a, b},
                   [an, bn, slice_offsets, nbatch, m, k, n, o_mat,
                    a_mat, b_mat](TensorNode& o) {
      bool ga = an->on_tape, gb = bn->on_tape;
      if (ga) an->ensure_grad();
      if (gb) bn->ensure_grad();
      for (std::size_t bi = 0; bi < nbatch; ++bi) {
        std::size_t oa, ob;
        slice_offsets(bi, oa, ob);
        const Real* A = an->data.data() + oa;
        const Real* B = bn->data.data() + ob;
        const Real* G = o.grad.data() + bi * o_mat;
        if (ga) {
          Real* dA = an->grad.data() + oa;
          // dA = G . B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              Real gv = G[i * n + j];
              const Real* bcol = B + j;
              for (std::size_t kk = 0; kk < k; ++kk)
                dA[i * k + kk] += gv * bcol[kk * n];
            }
        }
        if (gb) {
          Real* dB = bn->grad.data() + ob;
          // dB = A^T . G
          for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t i = 0; i < m; ++i) {
              Real av = A[i * k + kk];
              const Real* grow = G + i * n;
              Real* drow = dB + kk * n;
              for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(new_shape) + " changes element count");
  Tensor out = Tensor::from_data(std::move(new_shape), a.data());
  if (a.node()->on_tape) {
    auto an = a.node();
    detail::attach(out, {a}, [an](TensorNode& o) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a, std::size_t d0, std::size_t d1) {
  if (d0 >= a.ndim() || d1 >= a.ndim())
    throw ShapeError("transpose axes out of range for " +
                     shape_str(a.shape()));
  Shape out_shape = a.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  Tensor out = Tensor::zeros(out_shape);
  auto sin = detail::row_major_strides(a.shape());
  auto sout = detail::row_major_strides(out_shape);
  std::swap(sin[d0], sin[d1]);  // sin now indexed by output coordinates
  std::size_t n = a.size();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      std::size_t coord = rem / sout[d];
      rem %= sout[d];
      src += coord * sin[d];
    }
    out.data()[flat] = a.data()[src];
  }
  if (a.node()->on_tape) {
    auto an = a.node();
    detail::attach(out, {a}, [an, sin, sout, out_shape](TensorNode& o) {
      an->ensure_grad();
      for (std::size_t flat = 0; flat < o.size(); ++flat) {
        std::size_t rem = flat, src = 0;
        for (std::size_t d = 0; d < out_shape.size(); ++d) {
          std::size_t coord = rem / sout[d];
          rem %= sout[d];
          src += coord * sin[d];
        }
        an->grad[src] += o.grad[flat];
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
                    std::size_t len) {
  if (axis >= a.ndim() || start + len > a.dim(axis))
    throw ShapeError("slice out of range on " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.dim(d);
  Tensor out = Tensor::zeros(out_shape);
  std::size_t src_axis = a.dim(axis);
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(out.data().data() + o * len * inner,
                a.data().data() + (o * src_axis + start) * inner,
                len * inner * sizeof(Real));
  if (a.node()->on_tape) {
    auto an = a.node();
    detail::attach(out, {a}, [an, outer, inner, len, src_axis,
                              start](TensorNode& o) {
      an->ensure_grad();
      for (std::size_t ou = 0; ou < outer; ++ou)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i)
            an->grad[(ou * src_axis + start + l) * inner + i] +=
                o.grad[(ou * len + l) * inner + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim())
    throw ShapeError("softmax axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1, len = x.dim(axis);
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t base = o * len * inner + i;
      Real mx = xd[base];
      for (std::size_t l = 1; l < len; ++l)
        mx = std::max(mx, xd[base + l * inner]);
      Real z = 0;
      for (std::size_t l = 0; l < len; ++l) {
        Real e = std::exp(xd[base + l * inner] - mx);
        od[base + l * inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < len; ++l) od[base + l * inner] /= z;
    }
  if (x.node()->on_tape) {
    auto xn = x.node();
    // use o.data for y; capturing out's node here would create a shared_ptr
    // cycle (node -> backprop closure -> node) and leak every graph
    detail::attach(out, {x}, [xn, outer, inner, len](TensorNode& o) {
      xn->ensure_grad();
      const auto& y = o.data;
      for (std::size_t ou = 0; ou < outer; ++ou)
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t base = ou * len * inner + i;
          Real dot = 0;
          for (std::size_t l = 0; l < len; ++l)
            dot += o.grad[base + l * inner] * y[base + l * inner];
          for (std::size_t l = 0; l < len; ++l)
            xn->grad[base + l * inner] +=
                y[base + l * inner] * (o.grad[base + l * inner] - dot);
        }
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& x) {
  // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  const Real c = Real(0.7978845608028654);  // sqrt(2/pi)
  const Real a3 = Real(0.044715);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Real v = x.data()[i];
    Real t = std::tanh(c * (v + a3 * v * v * v));
    out.data()[i] = Real(0.5) * v * (1 + t);
  }
  if (x.node()->on_tape) {
    auto xn = x.node();
    detail::attach(out, {x}, [xn, c, a3](TensorNode& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.size(); ++i) {
        Real v = xn->data[i];
        Real u = c * (v + a3 * v * v * v);
        Real t = std::tanh(u);
        Real du = c * (1 + 3 * a3 * v * v);
        Real d = Real(0.5) * (1 + t) + Real(0.5) * v * (1 - t * t) * du;
        xn->grad[i] += o.grad[i] * d;
      }
    });
  }
  return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, Real eps = Real(1e-12)) {
  if (x.ndim() < 1) throw ShapeError("layer_norm on 0-d tensor");
  std::size_t h = x.dim(x.ndim() - 1);
  if (gamma.shape() != Shape{h} || beta.shape() != Shape{h})
    throw ShapeError("layer_norm gamma/beta must have shape [" +
                     std::to_string(h) + "], got " + shape_str(gamma.shape()) +
                     " and " + shape_str(beta.shape()));
  std::size_t rows = x.size() / h;
  Tensor out = Tensor::zeros(x.shape());
  // cache per-row mean and inverse stddev for the backward pass
  auto stats = std::make_shared<std::vector<Real>>(rows * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data().data() + r * h;
    Real mean = 0;
    for (std::size_t i = 0; i < h; ++i) mean += xr[i];
    mean /= Real(h);
    Real var = 0;
    for (std::size_t i = 0; i < h; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= Real(h);  // biased, 1/H
    Real inv = Real(1) / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = inv;
    Real* orow = out.data().data() + r * h;
    for (std::size_t i = 0; i < h; ++i)
      orow[i] = (xr[i] - mean) * inv * gamma.data()[i] + beta.data()[i];
  }
  if (detail::tape_active({&x, &gamma, &beta})) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    detail::attach(out, {x, gamma, beta},
                   [xn, gn, bn, stats, rows, h](TensorNode& o) {
      bool gx = xn->on_tape, gg = gn->on_tape, gb = bn->on_tape;
      if (gx) xn->ensure_grad();
      if (gg) gn->ensure_grad();
      if (gb) bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = xn->data.data() + r * h;
        const Real* go = o.grad.data() + r * h;
        Real mean = (*stats)[2 * r], inv = (*stats)[2 * r + 1];
        Real sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < h; ++i) {
          Real xhat = (xr[i] - mean) * inv;
          Real gi = go[i] * gn->data[i];
          sum_g += gi;
          sum_gx += gi * xhat;
          if (gg) gn->grad[i] += go[i] * xhat;
          if (gb) bn->grad[i] += go[i];
        }
        if (gx) {
          for (std::size_t i = 0; i < h; ++i) {
            Real xhat = (xr[i] - mean) * inv;
            Real gi = go[i] * gn->data[i];
            xn->grad[r * h + i] +=
                inv * (gi - (sum_g + xhat * sum_gx) / Real(h));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup (gather rows; adjoint scatter-adds into the table)

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                        Shape ids_shape) {
  if (table.ndim() != 2)
    throw ShapeError("embedding table must be 2-d, got " +
                     shape_str(table.shape()));
  if (numel(ids_shape) != ids.size())
    throw ShapeError("embedding ids length does not match ids shape");
  std::size_t v = table.dim(0), e = table.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw InputError("embedding id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
  Shape out_shape = ids_shape;
  out_shape.push_back(e);
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data().data() + i * e,
                table.data().data() + static_cast<std::size_t>(ids[i]) * e,
                e * sizeof(Real));
  if (table.node()->on_tape) {
    auto tn = table.node();
    detail::attach(out, {table}, [tn, ids, e](TensorNode& o) {
      tn->ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        Real* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * e;
        const Real* src = o.grad.data() + i * e;
        for (std::size_t j = 0; j < e; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when not training)

inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  auto mask = std::make_shared<std::vector<Real>>(x.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Real keep_scale = Real(1.0 / (1.0 - p));
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Real m = u(rng) < p ? Real(0) : keep_scale;
    (*mask)[i] = m;
    out.data()[i] = x.data()[i] * m;
  }
  if (x.node()->on_tape) {
    auto xn = x.node();
    detail::attach(out, {x}, [xn, mask](TensorNode& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.size(); ++i)
        xn->grad[i] += o.grad[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross entropy: mean -log softmax(logits)[label] over non-ignored rows.

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                            int ignore_label = -100,
                            bool* all_ignored = nullptr) {
  if (logits.ndim() != 2)
    throw ShapeError("cross_entropy expects [N,V] logits, got " +
                     shape_str(logits.shape()));
  std::size_t n = logits.dim(0), v = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("cross_entropy label count " +
                     std::to_string(labels.size()) + " != rows " +
                     std::to_string(n));
  for (int l : labels)
    if (l != ignore_label && (l < 0 || static_cast<std::size_t>(l) >= v))
      throw InputError("label " + std::to_string(l) + " out of range [0," +
                       std::to_string(v) + ")");
  std::size_t active = 0;
  Real loss = 0;
  // softmax probabilities cached for the adjoint
  auto probs = std::make_shared<std::vector<Real>>(logits.data().size());
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = logits.data().data() + r * v;
    Real* prow = probs->data() + r * v;
    Real mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (std::size_t j = 0; j < v; ++j) prow[j] /= z;
    if (labels[r] != ignore_label) {
      ++active;
      loss -= std::log(std::max(prow[static_cast<std::size_t>(labels[r])],
                                std::numeric_limits<Real>::min()));
    }
  }
  if (all_ignored) *all_ignored = (active == 0);
  Tensor out = Tensor::scalar(active ? loss / Real(active) : Real(0));
  if (logits.node()->on_tape && active > 0) {
    auto ln = logits.node();
    detail::attach(out, {logits},
                   [ln, labels, probs, n, v, active,
                    ignore_label](TensorNode& o) {
      ln->ensure_grad();
      Real g = o.grad[0] / Real(active);
      for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] == ignore_label) continue;
        const Real* prow = probs->data() + r * v;
        Real* grow = ln->grad.data() + r * v;
        for (std::size_t j = 0; j < v; ++j) grow[j] += g * prow[j];
        grow[static_cast<std::size_t>(labels[r])] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw UsageError("backward requires a scalar loss, got shape " +
                     shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->on_tape)
    throw UsageError("backward on a tensor with no tape participation");
  if (root->backward_done)
    throw UsageError("backward called twice on the same graph");
  root->backward_done = true;

  // reverse topological order via iterative DFS
  std::vector<TensorNode*> order;
  std::vector<std::pair<TensorNode*, std::size_t>> stack{{root.get(), 0}};
  root->visit_mark = true;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->on_tape && !p->visit_mark) {
        p->visit_mark = true;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) n->visit_mark = false;

  root->ensure_grad();
  root->grad[0] = Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace tess
