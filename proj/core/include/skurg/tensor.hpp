#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace skurg {

// Operand shapes do not conform; the message names the op and the shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Misuse of the computation graph (non-scalar backward root, degenerate mask, ...).
class GraphError : public std::runtime_error {
 public:
  explicit GraphError(const std::string& msg) : std::runtime_error(msg) {}
};

// All tensors in this project are rank-2, row-major. Vectors are 1xN, scalars 1x1.
struct Shape {
  int rows = 0;
  int cols = 0;

  std::int64_t numel() const { return std::int64_t(rows) * cols; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << rows << "x" << cols;
    return os.str();
  }
};

// Boolean key-keep matrix for masked attention. keep(r, c) == 1 means query r may
// attend key c.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> keep;

  Mask() = default;
  Mask(int r, int c, bool value) : rows(r), cols(c), keep(std::size_t(r) * c, value ? 1 : 0) {}

  std::uint8_t at(int r, int c) const { return keep[std::size_t(r) * cols + c]; }
  void set(int r, int c, bool v) { keep[std::size_t(r) * cols + c] = v ? 1 : 0; }

  static Mask causal(int n) {
    Mask m(n, n, false);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c <= r; ++c) m.set(r, c, true);
    return m;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_recording() { return detail::grad_enabled; }

// Disables graph recording in scope (inference, finite differences).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // sized lazily during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (std::int64_t(grad.size()) != shape.numel()) grad.assign(std::size_t(shape.numel()), Real(0));
  }
};

// Value handle plus (optionally) a position in the reverse-mode graph. Copies are
// shallow; values of existing tensors are treated as immutable by all ops.
template <class Real>
class TensorT {
 public:
  using Node = TensorNode<Real>;

  TensorT() = default;

  static TensorT zeros(Shape s, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value.assign(std::size_t(s.numel()), Real(0));
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT full(Shape s, Real v) {
    auto t = zeros(s);
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  static TensorT scalar(Real v) { return full({1, 1}, v); }

  static TensorT from(Shape s, std::vector<Real> vals, bool requires_grad = false) {
    if (std::int64_t(vals.size()) != s.numel())
      throw ShapeError("tensor: " + std::to_string(vals.size()) + " values for shape " + s.str());
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value = std::move(vals);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rows() const { return node_->shape.rows; }
  int cols() const { return node_->shape.cols; }
  std::int64_t numel() const { return node_->shape.numel(); }

  Real at(int r, int c) const { return node_->value[std::size_t(r) * cols() + c]; }
  Real item() const {
    if (numel() != 1) throw GraphError("item: tensor is " + shape().str() + ", expected 1x1");
    return node_->value[0];
  }

  std::span<const Real> values() const { return node_->value; }
  // In-place edit of a leaf (optimizer update, finite-difference probe).
  std::span<Real> values_mut() { return node_->value; }

  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
  }

  const char* op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Value copy detached from the graph.
  TensorT detach() const { return from(shape(), node_->value); }

  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <class Real>
void attach(TensorT<Real>& out, const char* op, std::initializer_list<TensorT<Real>> inputs,
            std::function<void(TensorNode<Real>&)> backprop) {
  out.node()->op = op;
  if (!grad_recording()) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  out.node()->requires_grad = true;
  out.node()->parents.reserve(inputs.size());
  for (const auto& in : inputs) out.node()->parents.push_back(in.node());
  out.node()->backprop = std::move(backprop);
}

template <class Real>
void attach_many(TensorT<Real>& out, const char* op, const std::vector<TensorT<Real>>& inputs,
                 std::function<void(TensorNode<Real>&)> backprop) {
  out.node()->op = op;
  if (!grad_recording()) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  out.node()->requires_grad = true;
  out.node()->parents.reserve(inputs.size());
  for (const auto& in : inputs) out.node()->parents.push_back(in.node());
  out.node()->backprop = std::move(backprop);
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " + b.str() + " do not conform");
}

// C[m,n] += A[m,k] * B[k,n]
template <class Real>
void gemm_nn_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + std::size_t(i) * k;
    Real* crow = c + std::size_t(i) * n;
    for (int l = 0; l < k; ++l) {
      const Real al = arow[l];
      if (al == Real(0)) continue;
      const Real* brow = b + std::size_t(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += al * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <class Real>
void gemm_nt_acc(const Real* a, const Real* b, Real* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + std::size_t(i) * n;
    Real* crow = c + std::size_t(i) * k;
    for (int j = 0; j < k; ++j) {
      const Real* brow = b + std::size_t(j) * n;
      Real acc = 0;
      for (int l = 0; l < n; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class Real>
void gemm_tn_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int l = 0; l < m; ++l) {
    const Real* arow = a + std::size_t(l) * k;
    const Real* brow = b + std::size_t(l) * n;
    for (int i = 0; i < k; ++i) {
      const Real ai = arow[i];
      if (ai == Real(0)) continue;
      Real* crow = c + std::size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += ai * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each op validates shapes, computes its value, and registers a
// backward rule when any input participates in the graph.
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.cols() != b.rows()) detail::shape_fail("matmul", a.shape(), b.shape());
  auto out = TensorT<Real>::zeros({a.rows(), b.cols()});
  detail::gemm_nn_acc(a.values().data(), b.values().data(), out.values_mut().data(), a.rows(),
                      a.cols(), b.cols());
  detail::attach<Real>(out, "matmul", {a, b}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const int m = pa.shape.rows, k = pa.shape.cols, n = pb.shape.cols;
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::gemm_nt_acc(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::gemm_tn_acc(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
    }
  });
  return out;
}

template <class Real>
TensorT<Real> transpose(const TensorT<Real>& a) {
  auto out = TensorT<Real>::zeros({a.cols(), a.rows()});
  const int r = a.rows(), c = a.cols();
  auto src = a.values();
  auto dst = out.values_mut();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[std::size_t(j) * r + i] = src[std::size_t(i) * c + j];
  detail::attach<Real>(out, "transpose", {a}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const int r = pa.shape.rows, c = pa.shape.cols;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) pa.grad[std::size_t(i) * c + j] += self.grad[std::size_t(j) * r + i];
  });
  return out;
}

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (!(a.shape() == b.shape())) detail::shape_fail("add", a.shape(), b.shape());
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto va = a.values(), vb = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] + vb[i];
  detail::attach<Real>(out, "add", {a, b}, [](TensorNode<Real>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& par = *self.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
    }
  });
  return out;
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (!(a.shape() == b.shape())) detail::shape_fail("sub", a.shape(), b.shape());
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto va = a.values(), vb = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] - vb[i];
  detail::attach<Real>(out, "sub", {a, b}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
  return out;
}

// Elementwise product.
template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (!(a.shape() == b.shape())) detail::shape_fail("multiply", a.shape(), b.shape());
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto va = a.values(), vb = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] * vb[i];
  detail::attach<Real>(out, "multiply", {a, b}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
  return out;
}

// a + v with v broadcast over rows; v must be 1 x a.cols().
template <class Real>
TensorT<Real> add_rowvec(const TensorT<Real>& a, const TensorT<Real>& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) detail::shape_fail("add_rowvec", a.shape(), v.shape());
  auto out = TensorT<Real>::zeros(a.shape());
  const int r = a.rows(), c = a.cols();
  auto dst = out.values_mut();
  auto va = a.values(), vv = v.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[std::size_t(i) * c + j] = va[std::size_t(i) * c + j] + vv[j];
  detail::attach<Real>(out, "add_rowvec", {a, v}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pv = *self.parents[1];
    const int r = pa.shape.rows, c = pa.shape.cols;
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) pv.grad[j] += self.grad[std::size_t(i) * c + j];
    }
  });
  return out;
}

template <class Real>
TensorT<Real> mul_rowvec(const TensorT<Real>& a, const TensorT<Real>& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) detail::shape_fail("mul_rowvec", a.shape(), v.shape());
  auto out = TensorT<Real>::zeros(a.shape());
  const int r = a.rows(), c = a.cols();
  auto dst = out.values_mut();
  auto va = a.values(), vv = v.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[std::size_t(i) * c + j] = va[std::size_t(i) * c + j] * vv[j];
  detail::attach<Real>(out, "mul_rowvec", {a, v}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pv = *self.parents[1];
    const int r = pa.shape.rows, c = pa.shape.cols;
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pa.grad[std::size_t(i) * c + j] += self.grad[std::size_t(i) * c + j] * pv.value[j];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pv.grad[j] += self.grad[std::size_t(i) * c + j] * pa.value[std::size_t(i) * c + j];
    }
  });
  return out;
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& a, Real k) {
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto va = a.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] * k;
  detail::attach<Real>(out, "scale", {a}, [k](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * k;
  });
  return out;
}

template <class Real>
TensorT<Real> add_scalar(const TensorT<Real>& a, Real k) {
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto va = a.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] + k;
  detail::attach<Real>(out, "add_scalar", {a}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
  return out;
}

template <class Real>
TensorT<Real> concat_rows(const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int c = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) detail::shape_fail("concat", parts[0].shape(), p.shape());
    total += p.rows();
  }
  auto out = TensorT<Real>::zeros({total, c});
  auto dst = out.values_mut();
  std::size_t off = 0;
  for (const auto& p : parts) {
    auto v = p.values();
    std::copy(v.begin(), v.end(), dst.begin() + off);
    off += v.size();
  }
  detail::attach_many<Real>(out, "concat", parts, [](TensorNode<Real>& self) {
    std::size_t off = 0;
    for (auto& par : self.parents) {
      const std::size_t n = par->value.size();
      if (par->requires_grad) {
        par->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) par->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
  return out;
}

template <class Real>
TensorT<Real> concat_cols(const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) detail::shape_fail("concat", parts[0].shape(), p.shape());
    total += p.cols();
  }
  auto out = TensorT<Real>::zeros({r, total});
  auto dst = out.values_mut();
  int coff = 0;
  for (const auto& p : parts) {
    auto v = p.values();
    const int c = p.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) dst[std::size_t(i) * total + coff + j] = v[std::size_t(i) * c + j];
    coff += c;
  }
  detail::attach_many<Real>(out, "concat", parts, [total](TensorNode<Real>& self) {
    const int r = self.shape.rows;
    int coff = 0;
    for (auto& par : self.parents) {
      const int c = par->shape.cols;
      if (par->requires_grad) {
        par->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            par->grad[std::size_t(i) * c + j] += self.grad[std::size_t(i) * total + coff + j];
      }
      coff += c;
    }
  });
  return out;
}

template <class Real>
TensorT<Real> slice_rows(const TensorT<Real>& a, int r0, int r1) {
  if (r0 < 0 || r1 > a.rows() || r0 >= r1)
    throw ShapeError("slice: rows [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                     a.shape().str());
  const int c = a.cols();
  auto out = TensorT<Real>::zeros({r1 - r0, c});
  auto dst = out.values_mut();
  auto src = a.values();
  std::copy(src.begin() + std::size_t(r0) * c, src.begin() + std::size_t(r1) * c, dst.begin());
  detail::attach<Real>(out, "slice", {a}, [r0](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const int c = pa.shape.cols;
    const std::size_t base = std::size_t(r0) * c;
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[base + i] += self.grad[i];
  });
  return out;
}

template <class Real>
TensorT<Real> slice_cols(const TensorT<Real>& a, int c0, int c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1)
    throw ShapeError("slice: cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                     a.shape().str());
  const int r = a.rows(), c = a.cols(), w = c1 - c0;
  auto out = TensorT<Real>::zeros({r, w});
  auto dst = out.values_mut();
  auto src = a.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) dst[std::size_t(i) * w + j] = src[std::size_t(i) * c + c0 + j];
  detail::attach<Real>(out, "slice", {a}, [c0](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const int r = self.shape.rows, w = self.shape.cols, c = pa.shape.cols;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        pa.grad[std::size_t(i) * c + c0 + j] += self.grad[std::size_t(i) * w + j];
  });
  return out;
}

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& a) {
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  auto out = TensorT<Real>::scalar(acc);
  detail::attach<Real>(out, "sum", {a}, [](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const Real g = self.grad[0];
    for (auto& x : pa.grad) x += g;
  });
  return out;
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& a) {
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  const Real inv = Real(1) / Real(a.numel());
  auto out = TensorT<Real>::scalar(acc * inv);
  detail::attach<Real>(out, "mean", {a}, [inv](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const Real g = self.grad[0] * inv;
    for (auto& x : pa.grad) x += g;
  });
  return out;
}

// Column-wise mean over rows: [m,n] -> [1,n].
template <class Real>
TensorT<Real> mean_rows(const TensorT<Real>& a) {
  const int r = a.rows(), c = a.cols();
  auto out = TensorT<Real>::zeros({1, c});
  auto dst = out.values_mut();
  auto src = a.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[j] += src[std::size_t(i) * c + j];
  const Real inv = Real(1) / Real(r);
  for (int j = 0; j < c; ++j) dst[j] *= inv;
  detail::attach<Real>(out, "mean", {a}, [inv](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const int r = pa.shape.rows, c = pa.shape.cols;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) pa.grad[std::size_t(i) * c + j] += self.grad[j] * inv;
  });
  return out;
}

namespace detail {

template <class Real, class Fwd, class Dfy>
TensorT<Real> unary_elementwise(const TensorT<Real>& a, const char* op, Fwd f, Dfy dfy) {
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto src = a.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(src[i]);
  attach<Real>(out, op, {a}, [dfy](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa.grad[i] += self.grad[i] * dfy(pa.value[i], self.value[i]);
  });
  return out;
}

}  // namespace detail

template <class Real>
TensorT<Real> sigmoid(const TensorT<Real>& a) {
  return detail::unary_elementwise(
      a, "sigmoid",
      [](Real x) {
        // evaluate on the negative side to avoid overflow
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
TensorT<Real> tanh_op(const TensorT<Real>& a) {
  return detail::unary_elementwise(
      a, "tanh", [](Real x) { return std::tanh(x); },
      [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
TensorT<Real> relu(const TensorT<Real>& a) {
  return detail::unary_elementwise(
      a, "relu", [](Real x) { return x > 0 ? x : Real(0); },
      [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

// Exact erf-based GELU.
template <class Real>
TensorT<Real> gelu(const TensorT<Real>& a) {
  constexpr Real inv_sqrt2 = Real(0.70710678118654752440);
  constexpr Real inv_sqrt2pi = Real(0.39894228040143267794);
  return detail::unary_elementwise(
      a, "gelu",
      [=](Real x) { return Real(0.5) * x * (Real(1) + std::erf(x * inv_sqrt2)); },
      [=](Real x, Real) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * inv_sqrt2));
        const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <class Real>
TensorT<Real> log_op(const TensorT<Real>& a) {
  return detail::unary_elementwise(
      a, "log", [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

namespace detail {

template <class Real>
void softmax_backward_rows(TensorNode<Real>& self) {
  auto& pa = *self.parents[0];
  if (!pa.requires_grad) return;
  pa.ensure_grad();
  const int r = self.shape.rows, c = self.shape.cols;
  for (int i = 0; i < r; ++i) {
    const Real* y = self.value.data() + std::size_t(i) * c;
    const Real* g = self.grad.data() + std::size_t(i) * c;
    Real dot = 0;
    for (int j = 0; j < c; ++j) dot += y[j] * g[j];
    Real* out = pa.grad.data() + std::size_t(i) * c;
    for (int j = 0; j < c; ++j) out[j] += y[j] * (g[j] - dot);
  }
}

}  // namespace detail

// Softmax along the last axis (per row).
template <class Real>
TensorT<Real> softmax_rows(const TensorT<Real>& a) {
  const int r = a.rows(), c = a.cols();
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto src = a.values();
  for (int i = 0; i < r; ++i) {
    const Real* x = src.data() + std::size_t(i) * c;
    Real* y = dst.data() + std::size_t(i) * c;
    Real mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    Real sum = 0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < c; ++j) y[j] *= inv;
  }
  detail::attach<Real>(out, "softmax", {a}, detail::softmax_backward_rows<Real>);
  return out;
}

// Softmax per row over kept columns; masked columns get exactly zero weight.
// A fully masked row is a degenerate attention query and raises GraphError.
template <class Real>
TensorT<Real> masked_softmax_rows(const TensorT<Real>& a, const Mask& mask) {
  if (mask.rows != a.rows() || mask.cols != a.cols())
    detail::shape_fail("masked_softmax", a.shape(), Shape{mask.rows, mask.cols});
  const int r = a.rows(), c = a.cols();
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto src = a.values();
  for (int i = 0; i < r; ++i) {
    const Real* x = src.data() + std::size_t(i) * c;
    Real* y = dst.data() + std::size_t(i) * c;
    Real mx = 0;
    bool any = false;
    for (int j = 0; j < c; ++j) {
      if (!mask.at(i, j)) continue;
      mx = any ? std::max(mx, x[j]) : x[j];
      any = true;
    }
    if (!any)
      throw GraphError("masked_softmax: all keys masked for query row " + std::to_string(i));
    Real sum = 0;
    for (int j = 0; j < c; ++j) {
      if (!mask.at(i, j)) {
        y[j] = 0;
        continue;
      }
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < c; ++j) y[j] *= inv;
  }
  // masked entries have y == 0, so the plain softmax rule routes them no gradient
  detail::attach<Real>(out, "softmax", {a}, detail::softmax_backward_rows<Real>);
  return out;
}

// Per-row normalization to zero mean and unit variance (no affine part).
template <class Real>
TensorT<Real> layer_norm_rows(const TensorT<Real>& a, Real eps) {
  const int r = a.rows(), c = a.cols();
  auto out = TensorT<Real>::zeros(a.shape());
  auto dst = out.values_mut();
  auto src = a.values();
  std::vector<Real> rstd(std::size_t(r));
  for (int i = 0; i < r; ++i) {
    const Real* x = src.data() + std::size_t(i) * c;
    Real* y = dst.data() + std::size_t(i) * c;
    Real mean = 0;
    for (int j = 0; j < c; ++j) mean += x[j];
    mean /= Real(c);
    Real var = 0;
    for (int j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= Real(c);
    const Real rs = Real(1) / std::sqrt(var + eps);
    rstd[std::size_t(i)] = rs;
    for (int j = 0; j < c; ++j) y[j] = (x[j] - mean) * rs;
  }
  detail::attach<Real>(out, "layer_normalize", {a}, [rstd](TensorNode<Real>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const int r = self.shape.rows, c = self.shape.cols;
    for (int i = 0; i < r; ++i) {
      const Real* y = self.value.data() + std::size_t(i) * c;
      const Real* g = self.grad.data() + std::size_t(i) * c;
      Real gmean = 0, gymean = 0;
      for (int j = 0; j < c; ++j) {
        gmean += g[j];
        gymean += g[j] * y[j];
      }
      gmean /= Real(c);
      gymean /= Real(c);
      const Real rs = rstd[std::size_t(i)];
      Real* out = pa.grad.data() + std::size_t(i) * c;
      for (int j = 0; j < c; ++j) out[j] += rs * (g[j] - gmean - y[j] * gymean);
    }
  });
  return out;
}

// Row gather from an embedding table: [V,D] x ids -> [T,D].
template <class Real>
TensorT<Real> embedding_lookup(const TensorT<Real>& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ShapeError("embedding-lookup: id " + std::to_string(id) + " outside table " +
                       table.shape().str());
  auto out = TensorT<Real>::zeros({int(ids.size()), d});
  auto dst = out.values_mut();
  auto src = table.values();
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy(src.begin() + std::size_t(ids[t]) * d, src.begin() + std::size_t(ids[t] + 1) * d,
              dst.begin() + t * d);
  detail::attach<Real>(out, "embedding-lookup", {table}, [ids](TensorNode<Real>& self) {
    auto& pt = *self.parents[0];
    if (!pt.requires_grad) return;
    pt.ensure_grad();
    const int d = pt.shape.cols;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      Real* row = pt.grad.data() + std::size_t(ids[t]) * d;
      const Real* g = self.grad.data() + t * d;
      for (int j = 0; j < d; ++j) row[j] += g[j];
    }
  });
  return out;
}

enum class Reduction { Mean, Sum };

// -log softmax(logits_row)[target] reduced over rows; target -1 excludes a row.
// Returns 0 when every row is excluded.
template <class Real>
TensorT<Real> cross_entropy_rows(const TensorT<Real>& logits, const std::vector<int>& targets,
                                 Reduction reduction) {
  const int r = logits.rows(), c = logits.cols();
  if (int(targets.size()) != r)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     logits.shape().str());
  int included = 0;
  for (int t : targets) {
    if (t >= c) throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range");
    if (t >= 0) ++included;
  }
  std::vector<Real> probs(std::size_t(r) * c, Real(0));
  Real total = 0;
  auto src = logits.values();
  for (int i = 0; i < r; ++i) {
    if (targets[std::size_t(i)] < 0) continue;
    const Real* x = src.data() + std::size_t(i) * c;
    Real* p = probs.data() + std::size_t(i) * c;
    Real mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    Real sum = 0;
    for (int j = 0; j < c; ++j) {
      p[j] = std::exp(x[j] - mx);
      sum += p[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < c; ++j) p[j] *= inv;
    total += -(x[targets[std::size_t(i)]] - mx - std::log(sum));
  }
  const Real norm = (reduction == Reduction::Mean && included > 0) ? Real(1) / Real(included) : Real(1);
  auto out = TensorT<Real>::scalar(included > 0 ? total * norm : Real(0));
  if (included == 0) {
    out.node()->op = "cross_entropy";
    return out;
  }
  detail::attach<Real>(out, "cross_entropy", {logits},
                       [probs, targets, norm](TensorNode<Real>& self) {
                         auto& pl = *self.parents[0];
                         if (!pl.requires_grad) return;
                         pl.ensure_grad();
                         const int r = pl.shape.rows, c = pl.shape.cols;
                         const Real s = self.grad[0] * norm;
                         for (int i = 0; i < r; ++i) {
                           const int t = targets[std::size_t(i)];
                           if (t < 0) continue;
                           const Real* p = probs.data() + std::size_t(i) * c;
                           Real* g = pl.grad.data() + std::size_t(i) * c;
                           for (int j = 0; j < c; ++j) g[j] += s * p[j];
                           g[t] -= s;
                         }
                       });
  return out;
}

// Numerically stable mean binary cross-entropy on logits.
template <class Real>
TensorT<Real> bce_with_logits_mean(const TensorT<Real>& logits, const std::vector<Real>& labels) {
  if (std::int64_t(labels.size()) != logits.numel())
    throw ShapeError("bce_with_logits: " + std::to_string(labels.size()) + " labels for " +
                     logits.shape().str());
  auto src = logits.values();
  Real total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Real z = src[i], y = labels[i];
    total += std::max(z, Real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  const Real inv = Real(1) / Real(labels.size());
  auto out = TensorT<Real>::scalar(total * inv);
  detail::attach<Real>(out, "bce_with_logits", {logits}, [labels, inv](TensorNode<Real>& self) {
    auto& pl = *self.parents[0];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    const Real s = self.grad[0] * inv;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const Real z = pl.value[i];
      const Real p = z >= 0 ? Real(1) / (Real(1) + std::exp(-z)) : std::exp(z) / (Real(1) + std::exp(z));
      pl.grad[i] += s * (p - labels[i]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward driver.
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Gradients accumulate into every
// reachable node with requires_grad; leaves off the path keep whatever their
// grad already holds (zero after zero_grad).
template <class Real>
void backward(const TensorT<Real>& root) {
  if (root.numel() != 1)
    throw GraphError("backward: root must be a scalar, got " + root.shape().str());
  if (!root.requires_grad() || !root.node()->backprop) {
    if (!root.requires_grad())
      throw GraphError("backward: root is not connected to any gradient-tracked input");
  }
  using Node = TensorNode<Real>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* next = node->parents[idx++].get();
      if (next->requires_grad && !seen.count(next)) {
        seen.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] = Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) node->backprop(*node);
  }
}

// ---------------------------------------------------------------------------
// Tag-dispatched entry point over the primitive set.
// ---------------------------------------------------------------------------

enum class OpTag {
  Matmul,
  Add,
  Multiply,
  Concat,
  Slice,
  Sum,
  Mean,
  Sigmoid,
  Tanh,
  Gelu,
  Softmax,
  Log,
  EmbeddingLookup,
  LayerNormalize,
  Transpose,
};

inline const char* to_string(OpTag tag) {
  switch (tag) {
    case OpTag::Matmul: return "matmul";
    case OpTag::Add: return "add";
    case OpTag::Multiply: return "multiply";
    case OpTag::Concat: return "concat";
    case OpTag::Slice: return "slice";
    case OpTag::Sum: return "sum";
    case OpTag::Mean: return "mean";
    case OpTag::Sigmoid: return "sigmoid";
    case OpTag::Tanh: return "tanh";
    case OpTag::Gelu: return "relu-or-gelu";
    case OpTag::Softmax: return "softmax-over-last-axis";
    case OpTag::Log: return "log";
    case OpTag::EmbeddingLookup: return "embedding-lookup";
    case OpTag::LayerNormalize: return "layer-normalize";
    case OpTag::Transpose: return "transpose";
  }
  return "?";
}

// Parameterized tags take their extra arguments as trailing tensors:
// Slice ......... inputs[1] is 1x4 [r0, r1, c0, c1]
// EmbeddingLookup inputs[1] is 1xT of token ids
template <class Real>
TensorT<Real> apply_primitive(OpTag tag, const std::vector<TensorT<Real>>& inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw ShapeError(std::string(to_string(tag)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
  };
  switch (tag) {
    case OpTag::Matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpTag::Add: need(2); return add(inputs[0], inputs[1]);
    case OpTag::Multiply: need(2); return mul(inputs[0], inputs[1]);
    case OpTag::Concat: return concat_rows(inputs);
    case OpTag::Slice: {
      need(2);
      auto r = inputs[1].values();
      if (r.size() != 4) throw ShapeError("slice: range tensor must hold [r0,r1,c0,c1]");
      auto t = slice_rows(inputs[0], int(r[0]), int(r[1]));
      return slice_cols(t, int(r[2]), int(r[3]));
    }
    case OpTag::Sum: need(1); return sum_all(inputs[0]);
    case OpTag::Mean: need(1); return mean_all(inputs[0]);
    case OpTag::Sigmoid: need(1); return sigmoid(inputs[0]);
    case OpTag::Tanh: need(1); return tanh_op(inputs[0]);
    case OpTag::Gelu: need(1); return gelu(inputs[0]);
    case OpTag::Softmax: need(1); return softmax_rows(inputs[0]);
    case OpTag::Log: need(1); return log_op(inputs[0]);
    case OpTag::EmbeddingLookup: {
      need(2);
      std::vector<int> ids;
      ids.reserve(std::size_t(inputs[1].numel()));
      for (Real v : inputs[1].values()) ids.push_back(int(v));
      return embedding_lookup(inputs[0], ids);
    }
    case OpTag::LayerNormalize: need(1); return layer_norm_rows(inputs[0], Real(1e-5));
    case OpTag::Transpose: need(1); return transpose(inputs[0]);
  }
  throw ShapeError("apply_primitive: unknown op tag");
}

}  // namespace skurg
