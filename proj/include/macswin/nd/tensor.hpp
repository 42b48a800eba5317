#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "macswin/kern/kernels.hpp"
#include "macswin/util/errors.hpp"
#include "macswin/util/rng.hpp"

namespace macswin::nd {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline Shape strides_of(const Shape& s) {
  Shape st(s.size());
  int64_t acc = 1;
  for (int i = int(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

template <class T>
class Tape;

// Dense row-major tensor. The buffer is shared and treated as immutable once
// the tensor has been produced by an operation; recorded tensors point back
// into their tape by node id.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(size_t(numel_of(t.shape_)), T(0));
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (numel_of(shape) != int64_t(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(data));
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return int(shape_.size()); }

  int64_t dim(int i) const {
    int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw ShapeError("axis out of range for " + shape_str(shape_));
    return shape_[i];
  }

  int64_t numel() const { return data_ ? int64_t(data_->size()) : 0; }
  bool defined() const { return bool(data_); }

  const T* data() const { return data_->data(); }
  const std::vector<T>& vec() const { return *data_; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return node_ >= 0; }
  Tape<T>* tape() const { return tape_; }
  int64_t node() const { return node_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int64_t node_ = -1;
  uint64_t epoch_ = 0;

  friend class Tape<T>;
  template <class U>
  friend struct OpCtx;
};

// Reverse-mode tape. Records one node per produced tensor; backward walks the
// nodes in exact reverse recording order. reset() invalidates tensors from
// earlier epochs, which trips a ContractError instead of silent corruption.
template <class T>
class Tape {
 public:
  Tensor<T> variable(Shape shape, std::vector<T> data) {
    Tensor<T> t = Tensor<T>::from(std::move(shape), std::move(data));
    attach(t);
    return t;
  }

  Tensor<T> variable(const Tensor<T>& src) {
    Tensor<T> t = src;
    t.tape_ = nullptr;
    t.node_ = -1;
    attach(t);
    return t;
  }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.tracked() || loss.tape_ != this)
      throw ContractError("backward: loss is not recorded on this tape");
    check_epoch(loss);
    if (ran_backward_)
      throw ContractError("backward already ran on this tape; call reset() first");
    ran_backward_ = true;
    grad_slot(loss.node_)[0] = T(1);
    for (int64_t i = int64_t(nodes_.size()) - 1; i >= 0; --i) {
      if (!grads_[i].empty() && nodes_[i].back) nodes_[i].back(*this);
    }
  }

  Tensor<T> grad(const Tensor<T>& t) const {
    if (!t.tracked() || t.tape_ != this)
      throw ContractError("grad: tensor is not recorded on this tape");
    if (t.epoch_ != epoch_) throw ContractError("grad: tensor belongs to a reset tape epoch");
    if (grads_[t.node_].empty()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>::from(t.shape(), grads_[t.node_]);
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    ran_backward_ = false;
    ++epoch_;
  }

  size_t size() const { return nodes_.size(); }

  // --- recording internals, used by the op layer ---

  int64_t record(Tensor<T>& out, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(back), out.numel()});
    grads_.emplace_back();
    out.tape_ = this;
    out.node_ = int64_t(nodes_.size()) - 1;
    out.epoch_ = epoch_;
    return out.node_;
  }

  std::vector<T>& grad_slot(int64_t node) {
    auto& g = grads_[size_t(node)];
    if (g.empty()) g.assign(size_t(nodes_[size_t(node)].numel), T(0));
    return g;
  }

  bool grad_pending(int64_t node) const { return !grads_[size_t(node)].empty(); }

  void check_epoch(const Tensor<T>& t) const {
    if (t.tracked() && t.tape_ == this && t.epoch_ != epoch_)
      throw ContractError("tensor from a reset tape epoch used in an operation");
  }

 private:
  struct Node {
    std::function<void(Tape&)> back;
    int64_t numel;
  };

  void attach(Tensor<T>& t) {
    nodes_.push_back(Node{nullptr, t.numel()});
    grads_.emplace_back();
    t.tape_ = this;
    t.node_ = int64_t(nodes_.size()) - 1;
    t.epoch_ = epoch_;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  uint64_t epoch_ = 0;
  bool ran_backward_ = false;
};

// --- op plumbing -----------------------------------------------------------

template <class T>
Tape<T>* result_tape(std::initializer_list<const Tensor<T>*> ins) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ins) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape)
      throw ContractError("operands recorded on different tapes");
    tape = t->tape();
    tape->check_epoch(*t);
  }
  return tape;
}

template <class T>
void acc_into(std::vector<T>& slot, const T* g, int64_t n) {
  for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[i];
}

// Strided copy driven by an odometer over the output shape; in_strides gives
// the input step per output axis. Shared by permute/slice/pad-style ops.
template <class T>
void copy_strided(const T* in, int64_t in_base, const Shape& out_shape,
                  const Shape& in_strides, T* out) {
  int nd = int(out_shape.size());
  int64_t total = numel_of(out_shape);
  if (nd == 0) {
    out[0] = in[in_base];
    return;
  }
  std::vector<int64_t> cnt(size_t(nd), 0);
  int64_t off = in_base;
  for (int64_t i = 0; i < total; ++i) {
    out[i] = in[off];
    for (int ax = nd - 1; ax >= 0; --ax) {
      if (++cnt[size_t(ax)] < out_shape[size_t(ax)]) {
        off += in_strides[size_t(ax)];
        break;
      }
      cnt[size_t(ax)] = 0;
      off -= in_strides[size_t(ax)] * (out_shape[size_t(ax)] - 1);
    }
  }
}

// Scatter-accumulate counterpart of copy_strided: slot[offset] += g[i].
template <class T>
void acc_strided(const T* g, int64_t base, const Shape& g_shape, const Shape& strides,
                 std::vector<T>& slot) {
  int nd = int(g_shape.size());
  int64_t total = numel_of(g_shape);
  if (nd == 0) {
    slot[size_t(base)] += g[0];
    return;
  }
  std::vector<int64_t> cnt(size_t(nd), 0);
  int64_t off = base;
  for (int64_t i = 0; i < total; ++i) {
    slot[size_t(off)] += g[i];
    for (int ax = nd - 1; ax >= 0; --ax) {
      if (++cnt[size_t(ax)] < g_shape[size_t(ax)]) {
        off += strides[size_t(ax)];
        break;
      }
      cnt[size_t(ax)] = 0;
      off -= strides[size_t(ax)] * (g_shape[size_t(ax)] - 1);
    }
  }
}

// Lane decomposition for axis-wise ops: shape = outer x n x inner.
struct Lanes {
  int64_t outer, n, inner;
};

inline Lanes lanes_of(const Shape& s, int axis) {
  int nd = int(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("axis out of range for " + shape_str(s));
  Lanes l{1, s[size_t(axis)], 1};
  for (int i = 0; i < axis; ++i) l.outer *= s[size_t(i)];
  for (int i = axis + 1; i < nd; ++i) l.inner *= s[size_t(i)];
  return l;
}

inline int normalize_axis(const Shape& s, int axis) {
  int nd = int(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("axis out of range for " + shape_str(s));
  return axis;
}

// --- elementwise -----------------------------------------------------------

namespace detail {

template <class T, class FwdFn, class DfA, class DfB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, DfA dfa, DfB dfb,
                    const char* name) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tape<T>* tape = result_tape<T>({&a, &b});
  int64_t n = a.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto* od = const_cast<std::vector<T>*>(&out.vec());
  fwd(a.data(), b.data(), od->data(), n);
  if (tape) {
    int64_t an = a.node(), bn = b.node();
    auto av = a, bv = b;  // keep buffers alive for the backward pass
    tape->record(out, [an, bn, av, bv, dfa, dfb, n](Tape<T>& tp) {
      int64_t on = 0;  // set below
      (void)on;
      // out node is the record slot of this lambda's owner; recover via grads
      // being driven externally: the closure receives its own grad through
      // the captured node id, so we capture it after record() -- see wrapper.
      (void)tp;
      (void)av;
      (void)bv;
      (void)an;
      (void)bn;
      (void)dfa;
      (void)dfb;
      (void)n;
    });
  }
  return out;
}

}  // namespace detail

// The closure needs its own node id to read its output gradient; record()
// assigns the id, so every op records in two steps: create the node with an
// empty body, then fill the body knowing the id.
template <class T>
class Recorder {
 public:
  Recorder(Tape<T>* tape, Tensor<T>& out) : tape_(tape), out_(out) {}

  bool active() const { return tape_ != nullptr; }

  // fn(tape, out_grad)
  void backward(std::function<void(Tape<T>&, const std::vector<T>&)> fn) {
    if (!tape_) return;
    auto body = std::make_shared<std::function<void(Tape<T>&, const std::vector<T>&)>>(std::move(fn));
    int64_t* node_box = new int64_t(-1);
    std::shared_ptr<int64_t> node(node_box);
    tape_->record(out_, [body, node](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad_slot(*node);
      (*body)(tp, g);
    });
    *node = out_.node();
  }

 private:
  Tape<T>* tape_;
  Tensor<T>& out_;
};

template <class T>
std::vector<T>* mutable_vec(Tensor<T>& t) {
  return const_cast<std::vector<T>*>(&t.vec());
}

// add/sub/mul/div require identical shapes (broadcast lives in dedicated ops).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tape<T>* tape = result_tape<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  if constexpr (std::is_same_v<T, float>) {
    kern::active().add(a.data(), b.data(), mutable_vec(out)->data(), n);
  } else {
    for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = a.data()[i] + b.data()[i];
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.tracked() ? a.node() : -1;
    int64_t bn = b.tracked() ? b.node() : -1;
    rec.backward([an, bn, n](Tape<T>& tp, const std::vector<T>& g) {
      if (an >= 0) acc_into(tp.grad_slot(an), g.data(), n);
      if (bn >= 0) acc_into(tp.grad_slot(bn), g.data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tape<T>* tape = result_tape<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  if constexpr (std::is_same_v<T, float>) {
    kern::active().sub(a.data(), b.data(), mutable_vec(out)->data(), n);
  } else {
    for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = a.data()[i] - b.data()[i];
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.tracked() ? a.node() : -1;
    int64_t bn = b.tracked() ? b.node() : -1;
    rec.backward([an, bn, n](Tape<T>& tp, const std::vector<T>& g) {
      if (an >= 0) acc_into(tp.grad_slot(an), g.data(), n);
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t i = 0; i < n; ++i) slot[size_t(i)] -= g[size_t(i)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tape<T>* tape = result_tape<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  if constexpr (std::is_same_v<T, float>) {
    kern::active().mul(a.data(), b.data(), mutable_vec(out)->data(), n);
  } else {
    for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = a.data()[i] * b.data()[i];
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.tracked() ? a.node() : -1;
    int64_t bn = b.tracked() ? b.node() : -1;
    auto av = a, bv = b;
    rec.backward([an, bn, av, bv, n](Tape<T>& tp, const std::vector<T>& g) {
      if (an >= 0) {
        auto& slot = tp.grad_slot(an);
        for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[size_t(i)] * bv.data()[i];
      }
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[size_t(i)] * av.data()[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("div: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tape<T>* tape = result_tape<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = a.data()[i] / b.data()[i];
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.tracked() ? a.node() : -1;
    int64_t bn = b.tracked() ? b.node() : -1;
    auto av = a, bv = b;
    rec.backward([an, bn, av, bv, n](Tape<T>& tp, const std::vector<T>& g) {
      if (an >= 0) {
        auto& slot = tp.grad_slot(an);
        for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[size_t(i)] / bv.data()[i];
      }
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t i = 0; i < n; ++i)
          slot[size_t(i)] -= g[size_t(i)] * av.data()[i] / (bv.data()[i] * bv.data()[i]);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  if constexpr (std::is_same_v<T, float>) {
    kern::active().scale(a.data(), s, mutable_vec(out)->data(), n);
  } else {
    for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = a.data()[i] * s;
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, s, n](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[size_t(i)] * s;
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = a.data()[i] + s;
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, n](Tape<T>& tp, const std::vector<T>& g) {
      acc_into(tp.grad_slot(an), g.data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <class T, class Fwd, class Dx>
Tensor<T> unary_op(const Tensor<T>& a, Fwd f, Dx dx) {
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) (*mutable_vec(out))[size_t(i)] = f(a.data()[i]);
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    auto av = a;
    rec.backward([an, av, dx, n](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[size_t(i)] * dx(av.data()[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

// Exact Gaussian-CDF GELU: x * Phi(x).
template <class T>
T gelu_scalar(T x) {
  return x * T(0.5) * std::erfc(-double(x) * 0.7071067811865475244);
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      a, [](T x) { return gelu_scalar(x); },
      [=](T x) {
        double phi = 0.5 * std::erfc(-double(x) * inv_sqrt2);
        double pdf = inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x));
        return T(phi + double(x) * pdf);
      });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (!(lo < hi)) throw ConfigError("clamp: lo must be < hi");
  return unary_op(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// --- view ops ---------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  // one extent may be -1 and is inferred
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
      infer = int(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0)
      throw ShapeError("reshape: cannot infer extent for " + shape_str(a.shape()) + " -> " +
                       shape_str(shape));
    shape[size_t(infer)] = a.numel() / known;
  }
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  Tape<T>* tape = result_tape<T>({&a});
  // row-major reshape shares the buffer
  Tensor<T> out = Tensor<T>::from(shape, a.vec());
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    int64_t n = a.numel();
    rec.backward([an, n](Tape<T>& tp, const std::vector<T>& g) {
      acc_into(tp.grad_slot(an), g.data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  int nd = a.ndim();
  if (int(perm.size()) != nd)
    throw ShapeError("permute: perm length " + std::to_string(perm.size()) + " vs ndim " +
                     std::to_string(nd));
  std::vector<bool> seen(size_t(nd), false);
  Shape out_shape(size_t(nd));
  Shape in_strides = strides_of(a.shape());
  Shape gather(size_t(nd));
  for (int i = 0; i < nd; ++i) {
    int p = perm[size_t(i)];
    if (p < 0 || p >= nd || seen[size_t(p)]) throw ShapeError("permute: invalid permutation");
    seen[size_t(p)] = true;
    out_shape[size_t(i)] = a.shape()[size_t(p)];
    gather[size_t(i)] = in_strides[size_t(p)];
  }
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  copy_strided(a.data(), 0, out_shape, gather, mutable_vec(out)->data());
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, out_shape, gather](Tape<T>& tp, const std::vector<T>& g) {
      acc_strided(g.data(), 0, out_shape, gather, tp.grad_slot(an));
    });
  }
  return out;
}

// General multi-axis slice: out = a[off[i] : off[i]+len[i]] on every axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, const std::vector<std::pair<int64_t, int64_t>>& off_len) {
  int nd = a.ndim();
  if (int(off_len.size()) != nd) throw ShapeError("slice: need one (offset,len) per axis");
  Shape out_shape(size_t(nd));
  Shape in_strides = strides_of(a.shape());
  int64_t base = 0;
  for (int i = 0; i < nd; ++i) {
    auto [off, len] = off_len[size_t(i)];
    if (off < 0 || len < 0 || off + len > a.shape()[size_t(i)])
      throw ShapeError("slice: range out of bounds on axis " + std::to_string(i) + " of " +
                       shape_str(a.shape()));
    out_shape[size_t(i)] = len;
    base += off * in_strides[size_t(i)];
  }
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  copy_strided(a.data(), base, out_shape, in_strides, mutable_vec(out)->data());
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, base, out_shape, in_strides](Tape<T>& tp, const std::vector<T>& g) {
      acc_strided(g.data(), base, out_shape, in_strides, tp.grad_slot(an));
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_axis(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  axis = normalize_axis(a.shape(), axis);
  std::vector<std::pair<int64_t, int64_t>> ol;
  for (int i = 0; i < a.ndim(); ++i) {
    if (i == axis)
      ol.emplace_back(start, len);
    else
      ol.emplace_back(0, a.shape()[size_t(i)]);
  }
  return slice(a, ol);
}

// Every second element along an axis starting at offset (0 or 1).
template <class T>
Tensor<T> downsample2(const Tensor<T>& a, int axis, int64_t offset) {
  axis = normalize_axis(a.shape(), axis);
  if (offset != 0 && offset != 1) throw ConfigError("downsample2: offset must be 0 or 1");
  Shape out_shape = a.shape();
  out_shape[size_t(axis)] = (a.shape()[size_t(axis)] - offset + 1) / 2;
  Shape in_strides = strides_of(a.shape());
  int64_t base = offset * in_strides[size_t(axis)];
  Shape gather = in_strides;
  gather[size_t(axis)] *= 2;
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  copy_strided(a.data(), base, out_shape, gather, mutable_vec(out)->data());
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, base, out_shape, gather](Tape<T>& tp, const std::vector<T>& g) {
      acc_strided(g.data(), base, out_shape, gather, tp.grad_slot(an));
    });
  }
  return out;
}

// Zero pad: pads[i] = {before, after} per axis. Gradient is the crop.
template <class T>
Tensor<T> pad(const Tensor<T>& a, const std::vector<std::pair<int64_t, int64_t>>& pads) {
  int nd = a.ndim();
  if (int(pads.size()) != nd) throw ShapeError("pad: need one (before,after) per axis");
  Shape out_shape(size_t(nd));
  for (int i = 0; i < nd; ++i) {
    auto [b, e] = pads[size_t(i)];
    if (b < 0 || e < 0) throw ConfigError("pad: negative padding");
    out_shape[size_t(i)] = a.shape()[size_t(i)] + b + e;
  }
  Shape out_strides = strides_of(out_shape);
  int64_t base = 0;
  for (int i = 0; i < nd; ++i) base += pads[size_t(i)].first * out_strides[size_t(i)];
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  // scatter input into the padded canvas
  {
    std::vector<T>& od = *mutable_vec(out);
    std::vector<T> tmp;
    acc_strided(a.data(), base, a.shape(), out_strides, od);
    (void)tmp;
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    Shape in_shape = a.shape();
    rec.backward([an, base, in_shape, out_strides](Tape<T>& tp, const std::vector<T>& g) {
      std::vector<T> cropped(size_t(numel_of(in_shape)));
      copy_strided(g.data(), base, in_shape, out_strides, cropped.data());
      acc_into(tp.grad_slot(an), cropped.data(), int64_t(cropped.size()));
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis(parts[0].shape(), axis);
  Shape out_shape = parts[0].shape();
  int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.ndim() != parts[0].ndim())
      throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < p.ndim(); ++i) {
      if (i != axis && p.shape()[size_t(i)] != out_shape[size_t(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(out_shape));
    }
    total_axis += p.shape()[size_t(axis)];
  }
  out_shape[size_t(axis)] = total_axis;

  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (p.tracked()) {
      Tape<T>* t = result_tape<T>({&p});
      if (tape && t != tape) throw ContractError("concat: operands on different tapes");
      tape = t;
    }
  }

  Lanes l = lanes_of(out_shape, axis);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::vector<T>& od = *mutable_vec(out);
  int64_t axis_off = 0;
  for (const auto& p : parts) {
    int64_t pn = p.shape()[size_t(axis)];
    for (int64_t o = 0; o < l.outer; ++o) {
      const T* src = p.data() + o * pn * l.inner;
      T* dst = od.data() + (o * l.n + axis_off) * l.inner;
      std::memcpy(dst, src, sizeof(T) * size_t(pn * l.inner));
    }
    axis_off += pn;
  }

  Recorder<T> rec(tape, out);
  if (rec.active()) {
    std::vector<int64_t> nodes;
    std::vector<int64_t> sizes;
    for (const auto& p : parts) {
      nodes.push_back(p.tracked() ? p.node() : -1);
      sizes.push_back(p.shape()[size_t(axis)]);
    }
    rec.backward([nodes, sizes, l](Tape<T>& tp, const std::vector<T>& g) {
      int64_t axis_off = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        int64_t pn = sizes[pi];
        if (nodes[pi] >= 0) {
          auto& slot = tp.grad_slot(nodes[pi]);
          for (int64_t o = 0; o < l.outer; ++o) {
            const T* src = g.data() + (o * l.n + axis_off) * l.inner;
            T* dst = slot.data() + o * pn * l.inner;
            for (int64_t i = 0; i < pn * l.inner; ++i) dst[i] += src[i];
          }
        }
        axis_off += pn;
      }
    });
  }
  return out;
}

// np.roll semantics: out[i] = in[(i - shift) mod n] along the axis.
template <class T>
Tensor<T> roll(const Tensor<T>& a, int axis, int64_t shift) {
  axis = normalize_axis(a.shape(), axis);
  Lanes l = lanes_of(a.shape(), axis);
  int64_t n = l.n;
  int64_t s = ((shift % n) + n) % n;
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  std::vector<T>& od = *mutable_vec(out);
  for (int64_t o = 0; o < l.outer; ++o) {
    const T* src = a.data() + o * n * l.inner;
    T* dst = od.data() + o * n * l.inner;
    // dst[(j + s) mod n] = src[j]
    std::memcpy(dst + s * l.inner, src, sizeof(T) * size_t((n - s) * l.inner));
    std::memcpy(dst, src + (n - s) * l.inner, sizeof(T) * size_t(s * l.inner));
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, l, n, s](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      for (int64_t o = 0; o < l.outer; ++o) {
        const T* gsrc = g.data() + o * n * l.inner;
        T* dst = slot.data() + o * n * l.inner;
        for (int64_t j = 0; j < n; ++j) {
          const T* grow = gsrc + ((j + s) % n) * l.inner;
          T* drow = dst + j * l.inner;
          for (int64_t i = 0; i < l.inner; ++i) drow[i] += grow[i];
        }
      }
    });
  }
  return out;
}

// Nearest-neighbour upsample along one axis by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& a, int axis, int64_t factor) {
  axis = normalize_axis(a.shape(), axis);
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  Lanes l = lanes_of(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[size_t(axis)] = l.n * factor;
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::vector<T>& od = *mutable_vec(out);
  for (int64_t o = 0; o < l.outer; ++o) {
    const T* src = a.data() + o * l.n * l.inner;
    T* dst = od.data() + o * l.n * factor * l.inner;
    for (int64_t j = 0; j < l.n * factor; ++j)
      std::memcpy(dst + j * l.inner, src + (j / factor) * l.inner, sizeof(T) * size_t(l.inner));
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, l, factor](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      for (int64_t o = 0; o < l.outer; ++o) {
        const T* gsrc = g.data() + o * l.n * factor * l.inner;
        T* dst = slot.data() + o * l.n * l.inner;
        for (int64_t j = 0; j < l.n * factor; ++j) {
          const T* grow = gsrc + j * l.inner;
          T* drow = dst + (j / factor) * l.inner;
          for (int64_t i = 0; i < l.inner; ++i) drow[i] += grow[i];
        }
      }
    });
  }
  return out;
}

// --- reductions --------------------------------------------------------------

template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis, bool keepdim = false) {
  axis = normalize_axis(a.shape(), axis);
  Lanes l = lanes_of(a.shape(), axis);
  Shape out_shape;
  for (int i = 0; i < a.ndim(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape()[size_t(i)]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::vector<T>& od = *mutable_vec(out);
  for (int64_t o = 0; o < l.outer; ++o) {
    const T* src = a.data() + o * l.n * l.inner;
    T* dst = od.data() + o * l.inner;
    for (int64_t j = 0; j < l.n; ++j)
      for (int64_t i = 0; i < l.inner; ++i) dst[i] += src[j * l.inner + i];
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, l](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      for (int64_t o = 0; o < l.outer; ++o) {
        const T* grow = g.data() + o * l.inner;
        T* dst = slot.data() + o * l.n * l.inner;
        for (int64_t j = 0; j < l.n; ++j)
          for (int64_t i = 0; i < l.inner; ++i) dst[j * l.inner + i] += grow[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis, bool keepdim = false) {
  int ax = normalize_axis(a.shape(), axis);
  return mul_scalar(sum_axis(a, ax, keepdim), T(1) / T(a.shape()[size_t(ax)]));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tape<T>* tape = result_tape<T>({&a});
  int64_t n = a.numel();
  T acc;
  if constexpr (std::is_same_v<T, float>) {
    acc = kern::active().reduce_sum(a.data(), n);
  } else {
    acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
  }
  Tensor<T> out = Tensor<T>::from({1}, {acc});
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    rec.backward([an, n](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / T(a.numel()));
}

// --- normalization & attention primitives -----------------------------------

// Numerically stabilized softmax along an axis; max is subtracted per lane.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  axis = normalize_axis(a.shape(), axis);
  Lanes l = lanes_of(a.shape(), axis);
  Tape<T>* tape = result_tape<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  std::vector<T>& od = *mutable_vec(out);
  const T* src = a.data();
  for (int64_t o = 0; o < l.outer; ++o) {
    for (int64_t i = 0; i < l.inner; ++i) {
      int64_t base = o * l.n * l.inner + i;
      T mx = src[base];
      for (int64_t j = 1; j < l.n; ++j) mx = std::max(mx, src[base + j * l.inner]);
      T denom = T(0);
      for (int64_t j = 0; j < l.n; ++j) {
        T e = std::exp(src[base + j * l.inner] - mx);
        od[size_t(base + j * l.inner)] = e;
        denom += e;
      }
      T inv = T(1) / denom;
      for (int64_t j = 0; j < l.n; ++j) od[size_t(base + j * l.inner)] *= inv;
    }
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.node();
    auto p = out;  // softmax output is reused in the backward rule
    rec.backward([an, p, l](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(an);
      const T* pv = p.data();
      for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t i = 0; i < l.inner; ++i) {
          int64_t base = o * l.n * l.inner + i;
          T dot = T(0);
          for (int64_t j = 0; j < l.n; ++j)
            dot += g[size_t(base + j * l.inner)] * pv[base + j * l.inner];
          for (int64_t j = 0; j < l.n; ++j) {
            int64_t idx = base + j * l.inner;
            slot[size_t(idx)] += pv[idx] * (g[size_t(idx)] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Layer norm over the last axis with learnable affine.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (eps <= T(0)) throw ConfigError("layer_norm: eps must be positive");
  int64_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last axis of " +
                     shape_str(x.shape()));
  Tape<T>* tape = result_tape<T>({&x, &gamma, &beta});
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T>& od = *mutable_vec(out);
  // cached normalized values and inverse std for the backward pass
  auto xhat = std::make_shared<std::vector<T>>(size_t(x.numel()));
  auto istd = std::make_shared<std::vector<T>>(size_t(rows));
  const T* xd = x.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xd + r * c;
    T mean = T(0);
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= T(c);
    T inv = T(1) / std::sqrt(var + eps);
    (*istd)[size_t(r)] = inv;
    for (int64_t j = 0; j < c; ++j) {
      T xh = (row[j] - mean) * inv;
      (*xhat)[size_t(r * c + j)] = xh;
      od[size_t(r * c + j)] = xh * gd[j] + bd[j];
    }
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t xn = x.tracked() ? x.node() : -1;
    int64_t gn = gamma.tracked() ? gamma.node() : -1;
    int64_t bn = beta.tracked() ? beta.node() : -1;
    auto gv = gamma;
    rec.backward([xn, gn, bn, gv, xhat, istd, rows, c](Tape<T>& tp, const std::vector<T>& g) {
      const T* gd = gv.data();
      if (gn >= 0) {
        auto& slot = tp.grad_slot(gn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j)
            slot[size_t(j)] += g[size_t(r * c + j)] * (*xhat)[size_t(r * c + j)];
      }
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) slot[size_t(j)] += g[size_t(r * c + j)];
      }
      if (xn >= 0) {
        auto& slot = tp.grad_slot(xn);
        for (int64_t r = 0; r < rows; ++r) {
          T mean_gh = T(0), mean_ghx = T(0);
          for (int64_t j = 0; j < c; ++j) {
            T gh = g[size_t(r * c + j)] * gd[j];
            mean_gh += gh;
            mean_ghx += gh * (*xhat)[size_t(r * c + j)];
          }
          mean_gh /= T(c);
          mean_ghx /= T(c);
          T inv = (*istd)[size_t(r)];
          for (int64_t j = 0; j < c; ++j) {
            T gh = g[size_t(r * c + j)] * gd[j];
            slot[size_t(r * c + j)] +=
                inv * (gh - mean_gh - (*xhat)[size_t(r * c + j)] * mean_ghx);
          }
        }
      }
    });
  }
  return out;
}

// --- matmul -----------------------------------------------------------------

namespace detail {

template <class T>
void batched_gemm_nn(int64_t batches, int m, int n, int k, const T* a, int64_t a_step,
                     const T* b, int64_t b_step, T* c, bool accumulate) {
  for (int64_t i = 0; i < batches; ++i)
    kern::gemm_nn(m, n, k, a + i * a_step, b + i * b_step, c + int64_t(i) * m * n, accumulate);
}

}  // namespace detail

// Batched contraction. a: (..., m, k). b: (k, n) or (..., k, n) with leading
// extents equal to a's. transpose_b flips b's last two axes logically, i.e.
// b: (n, k) / (..., n, k).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  int64_t m = a.dim(-2), ka = a.dim(-1);
  int64_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (ka != kb)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  bool b_batched = b.ndim() > 2;
  int64_t batches = 1;
  Shape out_shape;
  for (int i = 0; i + 2 < a.ndim(); ++i) {
    batches *= a.shape()[size_t(i)];
    out_shape.push_back(a.shape()[size_t(i)]);
  }
  if (b_batched) {
    Shape ab(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (ab != bb)
      throw ShapeError("matmul: batch extents differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
  out_shape.push_back(m);
  out_shape.push_back(n);

  Tape<T>* tape = result_tape<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::vector<T>& od = *mutable_vec(out);
  int64_t a_step = m * ka;
  int64_t b_step = b_batched ? ka * n : 0;
  const int mi = int(m), ni = int(n), ki = int(ka);
  if (!transpose_b && !b_batched && batches > 1) {
    // flatten the batch into rows: (batches*m, k) x (k, n)
    kern::gemm_nn(int(batches * m), ni, ki, a.data(), b.data(), od.data(), false);
  } else {
    for (int64_t i = 0; i < batches; ++i) {
      const T* ap = a.data() + i * a_step;
      const T* bp = b.data() + i * b_step;
      T* cp = od.data() + i * m * n;
      if (transpose_b)
        kern::gemm_nt(mi, ni, ki, ap, bp, cp, false);
      else
        kern::gemm_nn(mi, ni, ki, ap, bp, cp, false);
    }
  }

  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t an = a.tracked() ? a.node() : -1;
    int64_t bn = b.tracked() ? b.node() : -1;
    auto av = a, bv = b;
    rec.backward([an, bn, av, bv, batches, m, n, ka, a_step, b_step, b_batched,
                  transpose_b](Tape<T>& tp, const std::vector<T>& g) {
      const int mi = int(m), ni = int(n), ki = int(ka);
      if (an >= 0) {
        auto& slot = tp.grad_slot(an);
        for (int64_t i = 0; i < batches; ++i) {
          const T* gp = g.data() + i * m * n;
          const T* bp = bv.data() + i * b_step;
          T* dst = slot.data() + i * a_step;
          if (transpose_b)
            kern::gemm_nn(mi, ki, ni, gp, bp, dst, true);  // dA = dC * B
          else
            kern::gemm_nt(mi, ki, ni, gp, bp, dst, true);  // dA = dC * B^T
        }
      }
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t i = 0; i < batches; ++i) {
          const T* gp = g.data() + i * m * n;
          const T* ap = av.data() + i * a_step;
          T* dst = slot.data() + i * b_step;
          if (transpose_b)
            kern::gemm_tn(ni, ki, mi, gp, ap, dst, true);  // dB = dC^T * A
          else
            kern::gemm_tn(ki, ni, mi, ap, gp, dst, true);  // dB = A^T * dC
        }
      }
    });
  }
  return out;
}

// x: (..., C) plus row vector b: (C), broadcast add. Gradient of b is the
// column sum, which is what a linear layer bias needs.
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  int64_t c = x.dim(-1);
  if (b.numel() != c)
    throw ShapeError("add_rowvec: vector " + shape_str(b.shape()) + " vs last axis of " +
                     shape_str(x.shape()));
  Tape<T>* tape = result_tape<T>({&x, &b});
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::from(x.shape(), x.vec());
  if constexpr (std::is_same_v<T, float>) {
    kern::active().bias_add_rows(mutable_vec(out)->data(), b.data(), rows, c);
  } else {
    std::vector<T>& od = *mutable_vec(out);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < c; ++j) od[size_t(r * c + j)] += b.data()[j];
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t xn = x.tracked() ? x.node() : -1;
    int64_t bn = b.tracked() ? b.node() : -1;
    rec.backward([xn, bn, rows, c](Tape<T>& tp, const std::vector<T>& g) {
      if (xn >= 0) acc_into(tp.grad_slot(xn), g.data(), rows * c);
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) slot[size_t(j)] += g[size_t(r * c + j)];
      }
    });
  }
  return out;
}

// Learnable per-head bias broadcast over the window batch:
// scores (N, h, L, L) += bias (h, L, L). Bias gradient sums over N.
template <class T>
Tensor<T> add_bias_heads(const Tensor<T>& scores, const Tensor<T>& bias) {
  if (scores.ndim() != 4 || bias.ndim() != 3 || scores.dim(1) != bias.dim(0) ||
      scores.dim(2) != bias.dim(1) || scores.dim(3) != bias.dim(2))
    throw ShapeError("add_bias_heads: " + shape_str(scores.shape()) + " vs " +
                     shape_str(bias.shape()));
  Tape<T>* tape = result_tape<T>({&scores, &bias});
  int64_t nb = scores.dim(0);
  int64_t per = bias.numel();
  Tensor<T> out = Tensor<T>::from(scores.shape(), scores.vec());
  std::vector<T>& od = *mutable_vec(out);
  for (int64_t i = 0; i < nb; ++i) {
    T* dst = od.data() + i * per;
    if constexpr (std::is_same_v<T, float>) {
      kern::active().add(dst, bias.data(), dst, per);
    } else {
      for (int64_t j = 0; j < per; ++j) dst[j] += bias.data()[j];
    }
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t sn = scores.tracked() ? scores.node() : -1;
    int64_t bn = bias.tracked() ? bias.node() : -1;
    rec.backward([sn, bn, nb, per](Tape<T>& tp, const std::vector<T>& g) {
      if (sn >= 0) acc_into(tp.grad_slot(sn), g.data(), nb * per);
      if (bn >= 0) {
        auto& slot = tp.grad_slot(bn);
        for (int64_t i = 0; i < nb; ++i) {
          const T* src = g.data() + i * per;
          for (int64_t j = 0; j < per; ++j) slot[size_t(j)] += src[j];
        }
      }
    });
  }
  return out;
}

// Constant additive attention mask per window: scores (B*nW, h, L, L) +=
// mask (nW, L, L) replicated across the batch and heads. The mask carries no
// gradient.
template <class T>
Tensor<T> add_window_mask(const Tensor<T>& scores, const Tensor<T>& mask) {
  if (scores.ndim() != 4 || mask.ndim() != 3 || scores.dim(2) != mask.dim(1) ||
      scores.dim(3) != mask.dim(2) || scores.dim(0) % mask.dim(0) != 0)
    throw ShapeError("add_window_mask: " + shape_str(scores.shape()) + " vs " +
                     shape_str(mask.shape()));
  if (mask.tracked()) throw ContractError("add_window_mask: mask must not require gradients");
  Tape<T>* tape = result_tape<T>({&scores});
  int64_t nb = scores.dim(0), h = scores.dim(1), nw = mask.dim(0);
  int64_t ll = scores.dim(2) * scores.dim(3);
  Tensor<T> out = Tensor<T>::from(scores.shape(), scores.vec());
  std::vector<T>& od = *mutable_vec(out);
  for (int64_t i = 0; i < nb; ++i) {
    const T* mp = mask.data() + (i % nw) * ll;
    for (int64_t hh = 0; hh < h; ++hh) {
      T* dst = od.data() + (i * h + hh) * ll;
      if constexpr (std::is_same_v<T, float>) {
        kern::active().add(dst, mp, dst, ll);
      } else {
        for (int64_t j = 0; j < ll; ++j) dst[j] += mp[j];
      }
    }
  }
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t sn = scores.node();
    int64_t n = scores.numel();
    rec.backward([sn, n](Tape<T>& tp, const std::vector<T>& g) {
      acc_into(tp.grad_slot(sn), g.data(), n);
    });
  }
  return out;
}

// Row gather with scatter-add backward; indices are positions into axis 0.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int64_t>& idx) {
  if (table.ndim() != 2) throw ShapeError("gather_rows: table must be 2-D");
  int64_t rows = table.dim(0), cols = table.dim(1);
  for (int64_t i : idx) {
    if (i < 0 || i >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(rows) + ")");
  }
  Tape<T>* tape = result_tape<T>({&table});
  Tensor<T> out = Tensor<T>::zeros({int64_t(idx.size()), cols});
  std::vector<T>& od = *mutable_vec(out);
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(od.data() + int64_t(i) * cols, table.data() + idx[i] * cols,
                sizeof(T) * size_t(cols));
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t tn = table.node();
    auto ids = idx;
    rec.backward([tn, ids, cols](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(tn);
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* src = g.data() + int64_t(i) * cols;
        T* dst = slot.data() + ids[i] * cols;
        for (int64_t j = 0; j < cols; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Inverted dropout; the mask is derived per element from the seed so the
// result is schedule independent. rate == 0 shares the input buffer.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (rate == 0.0) return reshape(x, x.shape());
  Tape<T>* tape = result_tape<T>({&x});
  int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<T>>(size_t(n));
  T keep_scale = T(1.0 / (1.0 - rate));
  for (int64_t i = 0; i < n; ++i) {
    double u = double(hash_u64(seed ^ uint64_t(i) * 0x9e3779b97f4a7c15ull) >> 11) * 0x1.0p-53;
    (*mask)[size_t(i)] = u < rate ? T(0) : keep_scale;
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T>& od = *mutable_vec(out);
  for (int64_t i = 0; i < n; ++i) od[size_t(i)] = x.data()[i] * (*mask)[size_t(i)];
  Recorder<T> rec(tape, out);
  if (rec.active()) {
    int64_t xn = x.node();
    rec.backward([xn, mask, n](Tape<T>& tp, const std::vector<T>& g) {
      auto& slot = tp.grad_slot(xn);
      for (int64_t i = 0; i < n; ++i) slot[size_t(i)] += g[size_t(i)] * (*mask)[size_t(i)];
    });
  }
  return out;
}

}  // namespace macswin::nd
