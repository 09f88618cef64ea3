#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sicrn/common.hpp"
#include "sicrn/fft.hpp"
#include "sicrn/tensor.hpp"

namespace sicrn {

template <class T>
class Tape;

// Lightweight handle into a tape slot. Copyable; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  long id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
  const Shape& shape() const { return value().shape; }
};

// Reverse-mode tape. Recording order is topological order; backward walks
// nodes exactly once in reverse, accumulating into per-slot grad buffers,
// so two backward passes over identical tapes are bit-identical.
template <class T>
class Tape {
 public:
  // Closure receives the tape and the node's first output slot id.
  using BackwardFn = std::function<void(Tape&, long)>;

  Var<T> leaf(Tensor<T> v) {
    slots_.push_back(SlotData{std::move(v), Tensor<T>(), false});
    return Var<T>{this, static_cast<long>(slots_.size()) - 1};
  }

  // Binds an externally owned parameter tensor. Idempotent per tape: the
  // same tensor address always maps to the same slot, so gradients from
  // every use accumulate together.
  Var<T> param(Tensor<T>& t) {
    auto it = param_ids_.find(&t);
    if (it != param_ids_.end()) return Var<T>{this, it->second};
    Var<T> v = leaf(t);
    param_ids_.emplace(&t, v.id);
    return v;
  }

  // Gradient of a bound parameter; null if the parameter was never bound.
  const Tensor<T>* grad_of_param(const Tensor<T>& t) const {
    auto it = param_ids_.find(&t);
    if (it == param_ids_.end()) return nullptr;
    return &grad(it->second);
  }

  const Tensor<T>& value(long id) const { return slots_[static_cast<std::size_t>(id)].value; }

  // Zero tensor of the slot's shape if no gradient ever reached it.
  const Tensor<T>& grad(long id) const {
    const SlotData& s = slots_[static_cast<std::size_t>(id)];
    if (!s.grad_alloc) {
      zero_like_ = Tensor<T>(s.value.shape);
      return zero_like_;
    }
    return s.grad;
  }

  bool has_grad(long id) const { return slots_[static_cast<std::size_t>(id)].grad_alloc; }

  Tensor<T>& grad_buf(long id) {
    SlotData& s = slots_[static_cast<std::size_t>(id)];
    if (!s.grad_alloc) {
      s.grad = Tensor<T>(s.value.shape);
      s.grad_alloc = true;
    }
    return s.grad;
  }

  std::vector<Var<T>> record(std::vector<Tensor<T>> outputs, BackwardFn backward) {
    std::vector<Var<T>> vars;
    vars.reserve(outputs.size());
    long first = static_cast<long>(slots_.size());
    for (auto& o : outputs) vars.push_back(leaf(std::move(o)));
    nodes_.push_back(Node{first, static_cast<long>(vars.size()), std::move(backward)});
    return vars;
  }

  Var<T> record1(Tensor<T> output, BackwardFn backward) {
    return record({std::move(output)}, std::move(backward))[0];
  }

  // Reverse sweep from a scalar loss. With release_memory set, each node's
  // output buffers are dropped right after the node is processed, keeping
  // peak memory near the forward-activation footprint.
  void backward(const Var<T>& loss, bool release_memory = false) {
    require_usage(loss.tape == this, "backward: loss lives on a different tape");
    require_usage(loss.value().numel() == 1, "backward: loss must be scalar");
    grad_buf(loss.id).fill(T(1));
    for (long i = static_cast<long>(nodes_.size()) - 1; i >= 0; --i) {
      Node& node = nodes_[static_cast<std::size_t>(i)];
      bool any = false;
      for (long k = 0; k < node.n_out; ++k) any = any || has_grad(node.first_out + k);
      if (any) node.backward(*this, node.first_out);
      if (release_memory) {
        for (long k = 0; k < node.n_out; ++k) {
          if (node.first_out + k == loss.id) continue;
          release_slot(node.first_out + k);
        }
      }
    }
  }

  long num_slots() const { return static_cast<long>(slots_.size()); }
  long num_nodes() const { return static_cast<long>(nodes_.size()); }

  void check_same_tape(std::initializer_list<const Var<T>*> vars) const {
    for (const Var<T>* v : vars)
      require_usage(v->tape == this, "op: inputs recorded on different tapes");
  }

 private:
  struct SlotData {
    Tensor<T> value;
    Tensor<T> grad;
    bool grad_alloc = false;
  };
  struct Node {
    long first_out;
    long n_out;
    BackwardFn backward;
  };

  void release_slot(long id) {
    SlotData& s = slots_[static_cast<std::size_t>(id)];
    s.value.data = std::vector<T>();
    s.grad.data = std::vector<T>();
    s.grad_alloc = false;
  }

  std::vector<SlotData> slots_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, long> param_ids_;
  mutable Tensor<T> zero_like_;
};

namespace ad {

// Accumulates `contrib` into the grad buffer of slot `id`. When the slot
// holds a broadcast single-element tensor the contribution is summed.
template <class T>
void accumulate(Tape<T>& tape, long id, const Tensor<T>& contrib) {
  Tensor<T>& g = tape.grad_buf(id);
  if (g.numel() == contrib.numel()) {
    for (long i = 0; i < g.numel(); ++i) g[i] += contrib[i];
  } else {
    require_usage(g.numel() == 1, "accumulate: incompatible gradient shapes");
    T s = 0;
    for (long i = 0; i < contrib.numel(); ++i) s += contrib[i];
    g[0] += s;
  }
}

template <class T>
void check_binary_shapes(const Tensor<T>& a, const Tensor<T>& b, const char* name) {
  require_arg(a.same_shape(b) || a.numel() == 1 || b.numel() == 1,
              std::string(name) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                  shape_str(b.shape));
}

template <class T, class F>
Tensor<T> binary_forward(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.same_shape(b)) {
    Tensor<T> out(a.shape);
    for (long i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (a.numel() == 1) {
    Tensor<T> out(b.shape);
    for (long i = 0; i < b.numel(); ++i) out[i] = f(a[0], b[i]);
    return out;
  }
  Tensor<T> out(a.shape);
  for (long i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[0]);
  return out;
}

// Reads operand value at flat index under scalar broadcast.
template <class T>
inline T bcast(const Tensor<T>& t, long i) {
  return t.numel() == 1 ? t[0] : t[i];
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Elementwise binary ops (exact shape match, or single-element broadcast).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  ad::check_binary_shapes(a, b, "add");
  return ad::binary_forward(a, b, [](T x, T y) { return x + y; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  return a.tape->record1(add(a.value(), b.value()), [ia, ib](Tape<T>& tp, long out) {
    const Tensor<T>& g = tp.grad(out);
    ad::accumulate(tp, ia, g);
    ad::accumulate(tp, ib, g);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  ad::check_binary_shapes(a, b, "sub");
  return ad::binary_forward(a, b, [](T x, T y) { return x - y; });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  return a.tape->record1(sub(a.value(), b.value()), [ia, ib](Tape<T>& tp, long out) {
    const Tensor<T>& g = tp.grad(out);
    ad::accumulate(tp, ia, g);
    Tensor<T> neg(g.shape);
    for (long i = 0; i < g.numel(); ++i) neg[i] = -g[i];
    ad::accumulate(tp, ib, neg);
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  ad::check_binary_shapes(a, b, "mul");
  return ad::binary_forward(a, b, [](T x, T y) { return x * y; });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  return a.tape->record1(mul(a.value(), b.value()), [ia, ib](Tape<T>& tp, long out) {
    const Tensor<T>& g = tp.grad(out);
    const Tensor<T>& av = tp.value(ia);
    const Tensor<T>& bv = tp.value(ib);
    Tensor<T> ga(g.shape), gb(g.shape);
    for (long i = 0; i < g.numel(); ++i) {
      ga[i] = g[i] * ad::bcast(bv, i);
      gb[i] = g[i] * ad::bcast(av, i);
    }
    ad::accumulate(tp, ia, ga);
    ad::accumulate(tp, ib, gb);
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  ad::check_binary_shapes(a, b, "div");
  return ad::binary_forward(a, b, [](T x, T y) { return x / y; });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  return a.tape->record1(div(a.value(), b.value()), [ia, ib](Tape<T>& tp, long out) {
    const Tensor<T>& g = tp.grad(out);
    const Tensor<T>& av = tp.value(ia);
    const Tensor<T>& bv = tp.value(ib);
    Tensor<T> ga(g.shape), gb(g.shape);
    for (long i = 0; i < g.numel(); ++i) {
      T y = ad::bcast(bv, i);
      ga[i] = g[i] / y;
      gb[i] = -g[i] * ad::bcast(av, i) / (y * y);
    }
    ad::accumulate(tp, ia, ga);
    ad::accumulate(tp, ib, gb);
  });
}

// ---------------------------------------------------------------------------
// Unary elementwise ops.
// ---------------------------------------------------------------------------

namespace ad {

// df is evaluated as df(x_i, y_i) where y is the forward output.
template <class T, class FwdF, class DerF>
Var<T> unary_taped(const Var<T>& a, FwdF f, DerF df) {
  Tensor<T> out(a.value().shape);
  const Tensor<T>& x = a.value();
  for (long i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  long ia = a.id;
  return a.tape->record1(std::move(out), [ia, df](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ia);
    const Tensor<T>& yv = tp.value(o);
    Tensor<T> gx(g.shape);
    for (long i = 0; i < g.numel(); ++i) gx[i] = g[i] * df(xv[i], yv[i]);
    ad::accumulate(tp, ia, gx);
  });
}

}  // namespace ad

template <class T>
T elu_scalar(T x) {
  return x > T(0) ? x : static_cast<T>(std::expm1(static_cast<double>(x)));
}

// Numerically stable logistic; saturates cleanly to 0/1 for large |x|.
template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    T e = static_cast<T>(std::exp(-static_cast<double>(x)));
    return T(1) / (T(1) + e);
  }
  T e = static_cast<T>(std::exp(static_cast<double>(x)));
  return e / (T(1) + e);
}

template <class T>
Tensor<T> elu(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = elu_scalar(x[i]);
  return out;
}
template <class T>
Var<T> elu(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return elu_scalar(x); },
                         [](T x, T y) { return x > T(0) ? T(1) : y + T(1); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}
template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return sigmoid_scalar(x); },
                         [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(std::tanh(static_cast<double>(x[i])));
  return out;
}
template <class T>
Var<T> tanh_op(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return static_cast<T>(std::tanh(static_cast<double>(x))); },
                         [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(std::exp(static_cast<double>(x[i])));
  return out;
}
template <class T>
Var<T> exp_op(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return static_cast<T>(std::exp(static_cast<double>(x))); },
                         [](T, T y) { return y; });
}

template <class T>
Tensor<T> log10_op(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(std::log10(static_cast<double>(x[i])));
  return out;
}
template <class T>
Var<T> log10_op(const Var<T>& a) {
  const T inv_ln10 = static_cast<T>(0.43429448190325182765);
  return ad::unary_taped(a, [](T x) { return static_cast<T>(std::log10(static_cast<double>(x))); },
                         [inv_ln10](T x, T) { return inv_ln10 / x; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = x[i] * x[i];
  return out;
}
template <class T>
Var<T> square(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(std::sqrt(static_cast<double>(x[i])));
  return out;
}
template <class T>
Var<T> sqrt_op(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return static_cast<T>(std::sqrt(static_cast<double>(x))); },
                         [](T, T y) { return T(1) / (T(2) * y); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = -x[i];
  return out;
}
template <class T>
Var<T> neg(const Var<T>& a) {
  return ad::unary_taped(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = c * x[i];
  return out;
}
template <class T>
Var<T> scale(const Var<T>& a, T c) {
  return ad::unary_taped(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_const(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.numel(); ++i) out[i] = x[i] + c;
  return out;
}
template <class T>
Var<T> add_const(const Var<T>& a, T c) {
  return ad::unary_taped(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (long i = 0; i < x.numel(); ++i) s += x[i];
  return Tensor<T>({1}, std::vector<T>{s});
}
template <class T>
Var<T> sum_all(const Var<T>& a) {
  long ia = a.id;
  return a.tape->record1(sum_all(a.value()), [ia](Tape<T>& tp, long o) {
    T g = tp.grad(o)[0];
    Tensor<T> gx(tp.value(ia).shape, g);
    ad::accumulate(tp, ia, gx);
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  Tensor<T> s = sum_all(x);
  s[0] /= static_cast<T>(x.numel());
  return s;
}
template <class T>
Var<T> mean_all(const Var<T>& a) {
  long ia = a.id;
  const T inv = T(1) / static_cast<T>(a.value().numel());
  return a.tape->record1(mean_all(a.value()), [ia, inv](Tape<T>& tp, long o) {
    T g = tp.grad(o)[0] * inv;
    Tensor<T> gx(tp.value(ia).shape, g);
    ad::accumulate(tp, ia, gx);
  });
}

// Row-wise sum of a rank-2 tensor [R, C] -> [R].
template <class T>
Tensor<T> row_sum(const Tensor<T>& x) {
  require_arg(x.rank() == 2, "row_sum: expects rank-2 input");
  const long r = x.dim(0), c = x.dim(1);
  Tensor<T> out({r});
  for (long i = 0; i < r; ++i) {
    T s = 0;
    const T* p = x.ptr() + i * c;
    for (long j = 0; j < c; ++j) s += p[j];
    out[i] = s;
  }
  return out;
}
template <class T>
Var<T> row_sum(const Var<T>& a) {
  long ia = a.id;
  return a.tape->record1(row_sum(a.value()), [ia](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Shape& s = tp.value(ia).shape;
    Tensor<T> gx(s);
    for (long i = 0; i < s[0]; ++i)
      for (long j = 0; j < s[1]; ++j) gx.at(i, j) = g[i];
    ad::accumulate(tp, ia, gx);
  });
}

// Multiplies each row of [R, C] by the matching entry of [R].
template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& r) {
  require_arg(x.rank() == 2 && r.rank() == 1 && r.dim(0) == x.dim(0),
              "mul_rows: wants [R,C] x [R]");
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.dim(0); ++i)
    for (long j = 0; j < x.dim(1); ++j) out.at(i, j) = x.at(i, j) * r[i];
  return out;
}
template <class T>
Var<T> mul_rows(const Var<T>& x, const Var<T>& r) {
  x.tape->check_same_tape({&x, &r});
  long ix = x.id, ir = r.id;
  return x.tape->record1(mul_rows(x.value(), r.value()), [ix, ir](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ix);
    const Tensor<T>& rv = tp.value(ir);
    Tensor<T> gx(xv.shape);
    Tensor<T> gr(rv.shape);
    for (long i = 0; i < xv.dim(0); ++i) {
      T acc = 0;
      for (long j = 0; j < xv.dim(1); ++j) {
        gx.at(i, j) = g.at(i, j) * rv[i];
        acc += g.at(i, j) * xv.at(i, j);
      }
      gr[i] = acc;
    }
    ad::accumulate(tp, ix, gx);
    ad::accumulate(tp, ir, gr);
  });
}

// Per-channel mean of a rank-4 tensor over (batch, time, freq): [B,C,T,F] -> [C].
template <class T>
Tensor<T> mean_channels(const Tensor<T>& x) {
  require_arg(x.rank() == 4, "mean_channels: expects rank-4 input");
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3);
  Tensor<T> out({c});
  const long plane = t * f;
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* p = x.ptr() + (bi * c + ci) * plane;
      T s = 0;
      for (long i = 0; i < plane; ++i) s += p[i];
      out[ci] += s;
    }
  const T inv = T(1) / static_cast<T>(b * plane);
  for (long ci = 0; ci < c; ++ci) out[ci] *= inv;
  return out;
}
template <class T>
Var<T> mean_channels(const Var<T>& a) {
  long ia = a.id;
  return a.tape->record1(mean_channels(a.value()), [ia](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ia);
    const long b = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
    const T inv = T(1) / static_cast<T>(b * plane);
    Tensor<T> gx(xv.shape);
    for (long bi = 0; bi < b; ++bi)
      for (long ci = 0; ci < c; ++ci) {
        T* p = gx.ptr() + (bi * c + ci) * plane;
        const T gv = g[ci] * inv;
        for (long i = 0; i < plane; ++i) p[i] = gv;
      }
    ad::accumulate(tp, ia, gx);
  });
}

// x[B,C,T,F] + v[C], broadcasting v over batch, time and frequency.
template <class T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  require_arg(x.rank() == 4 && v.rank() == 1 && v.dim(0) == x.dim(1),
              "add_channel: wants [B,C,T,F] + [C]");
  Tensor<T> out(x.shape);
  const long b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* p = x.ptr() + (bi * c + ci) * plane;
      T* q = out.ptr() + (bi * c + ci) * plane;
      const T vv = v[ci];
      for (long i = 0; i < plane; ++i) q[i] = p[i] + vv;
    }
  return out;
}
template <class T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  x.tape->check_same_tape({&x, &v});
  long ix = x.id, iv = v.id;
  return x.tape->record1(add_channel(x.value(), v.value()), [ix, iv](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    ad::accumulate(tp, ix, g);
    const long b = g.dim(0), c = g.dim(1), plane = g.dim(2) * g.dim(3);
    Tensor<T> gv({c});
    for (long bi = 0; bi < b; ++bi)
      for (long ci = 0; ci < c; ++ci) {
        const T* p = g.ptr() + (bi * c + ci) * plane;
        T s = 0;
        for (long i = 0; i < plane; ++i) s += p[i];
        gv[ci] += s;
      }
    ad::accumulate(tp, iv, gv);
  });
}

template <class T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& v) {
  require_arg(x.rank() == 4 && v.rank() == 1 && v.dim(0) == x.dim(1),
              "mul_channel: wants [B,C,T,F] * [C]");
  Tensor<T> out(x.shape);
  const long b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* p = x.ptr() + (bi * c + ci) * plane;
      T* q = out.ptr() + (bi * c + ci) * plane;
      const T vv = v[ci];
      for (long i = 0; i < plane; ++i) q[i] = p[i] * vv;
    }
  return out;
}
template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& v) {
  x.tape->check_same_tape({&x, &v});
  long ix = x.id, iv = v.id;
  return x.tape->record1(mul_channel(x.value(), v.value()), [ix, iv](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ix);
    const Tensor<T>& vv = tp.value(iv);
    const long b = g.dim(0), c = g.dim(1), plane = g.dim(2) * g.dim(3);
    Tensor<T> gx(xv.shape);
    Tensor<T> gv({c});
    for (long bi = 0; bi < b; ++bi)
      for (long ci = 0; ci < c; ++ci) {
        const T* gp = g.ptr() + (bi * c + ci) * plane;
        const T* xp = xv.ptr() + (bi * c + ci) * plane;
        T* q = gx.ptr() + (bi * c + ci) * plane;
        T s = 0;
        const T vi = vv[ci];
        for (long i = 0; i < plane; ++i) {
          q[i] = gp[i] * vi;
          s += gp[i] * xp[i];
        }
        gv[ci] += s;
      }
    ad::accumulate(tp, ix, gx);
    ad::accumulate(tp, iv, gv);
  });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  long ia = a.id;
  Shape prev = a.value().shape;
  return a.tape->record1(a.value().reshaped(std::move(s)),
                         [ia, prev](Tape<T>& tp, long o) {
                           ad::accumulate(tp, ia, tp.grad(o).reshaped(prev));
                         });
}

// [B,C,T,F] -> [B,T,C,F]; its own inverse, so the adjoint is itself.
template <class T>
Tensor<T> permute_bctf_to_btcf(const Tensor<T>& x) {
  require_arg(x.rank() == 4, "permute: expects rank-4 input");
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3);
  Tensor<T> out({b, t, c, f});
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci)
      for (long ti = 0; ti < t; ++ti) {
        const T* src = x.ptr() + ((bi * c + ci) * t + ti) * f;
        T* dst = out.ptr() + ((bi * t + ti) * c + ci) * f;
        for (long fi = 0; fi < f; ++fi) dst[fi] = src[fi];
      }
  return out;
}
template <class T>
Var<T> permute_bctf_to_btcf(const Var<T>& a) {
  long ia = a.id;
  return a.tape->record1(permute_bctf_to_btcf(a.value()), [ia](Tape<T>& tp, long o) {
    ad::accumulate(tp, ia, permute_bctf_to_btcf(tp.grad(o)));
  });
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, long c0, long c1) {
  require_arg(x.rank() == 4 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1),
              "slice_channels: bad channel range");
  const long b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({b, c1 - c0, x.dim(2), x.dim(3)});
  for (long bi = 0; bi < b; ++bi)
    for (long ci = c0; ci < c1; ++ci) {
      const T* src = x.ptr() + (bi * c + ci) * plane;
      T* dst = out.ptr() + (bi * (c1 - c0) + (ci - c0)) * plane;
      for (long i = 0; i < plane; ++i) dst[i] = src[i];
    }
  return out;
}
template <class T>
Var<T> slice_channels(const Var<T>& a, long c0, long c1) {
  long ia = a.id;
  return a.tape->record1(slice_channels(a.value(), c0, c1), [ia, c0, c1](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ia);
    Tensor<T> gx(xv.shape);
    const long b = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
    for (long bi = 0; bi < b; ++bi)
      for (long ci = c0; ci < c1; ++ci) {
        const T* src = g.ptr() + (bi * (c1 - c0) + (ci - c0)) * plane;
        T* dst = gx.ptr() + (bi * c + ci) * plane;
        for (long i = 0; i < plane; ++i) dst[i] = src[i];
      }
    ad::accumulate(tp, ia, gx);
  });
}

// Reverses the frequency (last) axis of a rank-4 tensor.
template <class T>
Tensor<T> flip_freq(const Tensor<T>& x) {
  require_arg(x.rank() == 4, "flip_freq: expects rank-4 input");
  const long rows = x.numel() / x.dim(3), f = x.dim(3);
  Tensor<T> out(x.shape);
  for (long r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * f;
    T* dst = out.ptr() + r * f;
    for (long i = 0; i < f; ++i) dst[i] = src[f - 1 - i];
  }
  return out;
}
template <class T>
Var<T> flip_freq(const Var<T>& a) {
  long ia = a.id;
  return a.tape->record1(flip_freq(a.value()), [ia](Tape<T>& tp, long o) {
    ad::accumulate(tp, ia, flip_freq(tp.grad(o)));
  });
}

// Extracts time step t from [B,T,D] -> [B,D].
template <class T>
Tensor<T> time_slice(const Tensor<T>& x, long t) {
  require_arg(x.rank() == 3 && t >= 0 && t < x.dim(1), "time_slice: bad index");
  const long b = x.dim(0), tt = x.dim(1), d = x.dim(2);
  Tensor<T> out({b, d});
  for (long bi = 0; bi < b; ++bi) {
    const T* src = x.ptr() + (bi * tt + t) * d;
    T* dst = out.ptr() + bi * d;
    for (long i = 0; i < d; ++i) dst[i] = src[i];
  }
  return out;
}
template <class T>
Var<T> time_slice(const Var<T>& a, long t) {
  long ia = a.id;
  return a.tape->record1(time_slice(a.value(), t), [ia, t](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ia);
    Tensor<T> gx(xv.shape);
    const long b = xv.dim(0), tt = xv.dim(1), d = xv.dim(2);
    for (long bi = 0; bi < b; ++bi) {
      const T* src = g.ptr() + bi * d;
      T* dst = gx.ptr() + (bi * tt + t) * d;
      for (long i = 0; i < d; ++i) dst[i] = src[i];
    }
    ad::accumulate(tp, ia, gx);
  });
}

// Stacks T tensors of shape [B,D] into [B,T,D].
template <class T>
Tensor<T> stack_time(const std::vector<Tensor<T>>& steps) {
  require_arg(!steps.empty(), "stack_time: empty input");
  const long b = steps[0].dim(0), d = steps[0].dim(1), tt = static_cast<long>(steps.size());
  Tensor<T> out({b, tt, d});
  for (long t = 0; t < tt; ++t) {
    require_arg(steps[static_cast<std::size_t>(t)].same_shape(steps[0]),
                "stack_time: inconsistent step shapes");
    for (long bi = 0; bi < b; ++bi) {
      const T* src = steps[static_cast<std::size_t>(t)].ptr() + bi * d;
      T* dst = out.ptr() + (bi * tt + t) * d;
      for (long i = 0; i < d; ++i) dst[i] = src[i];
    }
  }
  return out;
}
template <class T>
Var<T> stack_time(const std::vector<Var<T>>& steps) {
  require_arg(!steps.empty(), "stack_time: empty input");
  Tape<T>* tape = steps[0].tape;
  std::vector<Tensor<T>> vals;
  std::vector<long> ids;
  vals.reserve(steps.size());
  for (const auto& s : steps) {
    tape->check_same_tape({&s});
    vals.push_back(s.value());
    ids.push_back(s.id);
  }
  return tape->record1(stack_time(vals), [ids](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const long b = g.dim(0), tt = g.dim(1), d = g.dim(2);
    for (long t = 0; t < tt; ++t) {
      Tensor<T> gs({b, d});
      for (long bi = 0; bi < b; ++bi) {
        const T* src = g.ptr() + (bi * tt + t) * d;
        T* dst = gs.ptr() + bi * d;
        for (long i = 0; i < d; ++i) dst[i] = src[i];
      }
      ad::accumulate(tp, ids[static_cast<std::size_t>(t)], gs);
    }
  });
}

// Slice of the last dim of [B,D] -> [B, d1-d0] (gate extraction).
template <class T>
Tensor<T> col_slice(const Tensor<T>& x, long d0, long d1) {
  require_arg(x.rank() == 2 && 0 <= d0 && d0 < d1 && d1 <= x.dim(1), "col_slice: bad range");
  const long b = x.dim(0), d = x.dim(1);
  Tensor<T> out({b, d1 - d0});
  for (long bi = 0; bi < b; ++bi)
    for (long j = d0; j < d1; ++j) out.at(bi, j - d0) = x.at(bi, j);
  return out;
}
template <class T>
Var<T> col_slice(const Var<T>& a, long d0, long d1) {
  long ia = a.id;
  return a.tape->record1(col_slice(a.value(), d0, d1), [ia, d0, d1](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& xv = tp.value(ia);
    Tensor<T> gx(xv.shape);
    for (long bi = 0; bi < xv.dim(0); ++bi)
      for (long j = d0; j < d1; ++j) gx.at(bi, j) = g.at(bi, j - d0);
    ad::accumulate(tp, ia, gx);
  });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_arg(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                  a.dim(3) == b.dim(3),
              "concat_channels: incompatible shapes");
  const long bb = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor<T> out({bb, ca + cb, a.dim(2), a.dim(3)});
  for (long bi = 0; bi < bb; ++bi) {
    for (long ci = 0; ci < ca; ++ci) {
      const T* src = a.ptr() + (bi * ca + ci) * plane;
      T* dst = out.ptr() + (bi * (ca + cb) + ci) * plane;
      for (long i = 0; i < plane; ++i) dst[i] = src[i];
    }
    for (long ci = 0; ci < cb; ++ci) {
      const T* src = b.ptr() + (bi * cb + ci) * plane;
      T* dst = out.ptr() + (bi * (ca + cb) + ca + ci) * plane;
      for (long i = 0; i < plane; ++i) dst[i] = src[i];
    }
  }
  return out;
}
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  const long ca = a.value().dim(1);
  return a.tape->record1(concat_channels(a.value(), b.value()),
                         [ia, ib, ca](Tape<T>& tp, long o) {
                           const Tensor<T>& g = tp.grad(o);
                           ad::accumulate(tp, ia, slice_channels(g, 0, ca));
                           ad::accumulate(tp, ib, slice_channels(g, ca, g.dim(1)));
                         });
}

// ---------------------------------------------------------------------------
// Matrix multiplication. Kernels cover the three transpose patterns needed
// by forward and both VJPs.
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
Tensor<T> mm_nn(const Tensor<T>& a, const Tensor<T>& b) {  // [M,K] x [K,N]
  require_arg(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul: shape mismatch");
  const long m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (long i = 0; i < m; ++i) {
    T* dst = out.ptr() + i * n;
    const T* ap = a.ptr() + i * k;
    for (long kk = 0; kk < k; ++kk) {
      const T av = ap[kk];
      const T* bp = b.ptr() + kk * n;
      for (long j = 0; j < n; ++j) dst[j] += av * bp[j];
    }
  }
  return out;
}

template <class T>
Tensor<T> mm_nt(const Tensor<T>& a, const Tensor<T>& b) {  // [M,K] x [N,K]^T
  require_arg(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "matmul_nt: shape mismatch");
  const long m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> out({m, n});
  for (long i = 0; i < m; ++i) {
    const T* ap = a.ptr() + i * k;
    T* dst = out.ptr() + i * n;
    for (long j = 0; j < n; ++j) {
      const T* bp = b.ptr() + j * k;
      T s = 0;
      for (long kk = 0; kk < k; ++kk) s += ap[kk] * bp[kk];
      dst[j] = s;
    }
  }
  return out;
}

template <class T>
Tensor<T> mm_tn(const Tensor<T>& a, const Tensor<T>& b) {  // [M,N]^T x [M,K]
  require_arg(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), "matmul_tn: shape mismatch");
  const long m = a.dim(0), n = a.dim(1), k = b.dim(1);
  Tensor<T> out({n, k});
  for (long i = 0; i < m; ++i) {
    const T* ap = a.ptr() + i * n;
    const T* bp = b.ptr() + i * k;
    for (long j = 0; j < n; ++j) {
      const T av = ap[j];
      T* dst = out.ptr() + j * k;
      for (long kk = 0; kk < k; ++kk) dst[kk] += av * bp[kk];
    }
  }
  return out;
}

}  // namespace ad

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return ad::mm_nn(a, b);
}
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  return a.tape->record1(ad::mm_nn(a.value(), b.value()), [ia, ib](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    ad::accumulate(tp, ia, ad::mm_nt(g, tp.value(ib)));
    ad::accumulate(tp, ib, ad::mm_tn(tp.value(ia), g));
  });
}

// y = a * b^T for b stored row-major [N,K]; the natural layout for layers
// that keep weights as [out, in].
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return ad::mm_nt(a, b);
}
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  a.tape->check_same_tape({&a, &b});
  long ia = a.id, ib = b.id;
  return a.tape->record1(ad::mm_nt(a.value(), b.value()), [ia, ib](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    ad::accumulate(tp, ia, ad::mm_nn(g, tp.value(ib)));
    ad::accumulate(tp, ib, ad::mm_tn(g, tp.value(ia)));
  });
}

// Adds a row vector [D] to every row of [B,D].
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& v) {
  require_arg(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.dim(1), "add_row: wants [B,D]+[D]");
  Tensor<T> out(x.shape);
  for (long i = 0; i < x.dim(0); ++i)
    for (long j = 0; j < x.dim(1); ++j) out.at(i, j) = x.at(i, j) + v[j];
  return out;
}
template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& v) {
  x.tape->check_same_tape({&x, &v});
  long ix = x.id, iv = v.id;
  return x.tape->record1(add_row(x.value(), v.value()), [ix, iv](Tape<T>& tp, long o) {
    const Tensor<T>& g = tp.grad(o);
    ad::accumulate(tp, ix, g);
    Tensor<T> gv({g.dim(1)});
    for (long i = 0; i < g.dim(0); ++i)
      for (long j = 0; j < g.dim(1); ++j) gv[j] += g.at(i, j);
    ad::accumulate(tp, iv, gv);
  });
}

// ---------------------------------------------------------------------------
// Complex helpers over (re, im) pairs.
// ---------------------------------------------------------------------------

template <class H>
struct ComplexPair {
  H re;
  H im;
};

template <class H>
ComplexPair<H> cmul(const ComplexPair<H>& a, const ComplexPair<H>& b) {
  return {sub(mul(a.re, b.re), mul(a.im, b.im)), add(mul(a.re, b.im), mul(a.im, b.re))};
}

template <class H>
ComplexPair<H> cadd(const ComplexPair<H>& a, const ComplexPair<H>& b) {
  return {add(a.re, b.re), add(a.im, b.im)};
}

// a / b via the real-pair quotient rule.
template <class H>
ComplexPair<H> cdiv(const ComplexPair<H>& a, const ComplexPair<H>& b) {
  H den = add(mul(b.re, b.re), mul(b.im, b.im));
  H re = div(add(mul(a.re, b.re), mul(a.im, b.im)), den);
  H im = div(sub(mul(a.im, b.re), mul(a.re, b.im)), den);
  return {re, im};
}

// ---------------------------------------------------------------------------
// DFT as a tape op over (re, im) pairs. The VJP of the unnormalized forward
// DFT is the conjugate-transpose DFT, i.e. the unnormalized inverse; the VJP
// of the 1/N inverse is the 1/N-scaled forward.
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
std::pair<Tensor<T>, Tensor<T>> dft_pair_raw(const Tensor<T>& re, const Tensor<T>& im,
                                             const FftPlan<T>& plan, T post_scale) {
  const long n = plan.length();
  std::vector<std::complex<T>> x(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = {re[i], im[i]};
  auto y = plan.execute_raw(x);
  Tensor<T> out_re(re.shape), out_im(re.shape);
  for (long i = 0; i < n; ++i) {
    out_re[i] = y[static_cast<std::size_t>(i)].real() * post_scale;
    out_im[i] = y[static_cast<std::size_t>(i)].imag() * post_scale;
  }
  return {std::move(out_re), std::move(out_im)};
}

}  // namespace ad

template <class T>
ComplexPair<Var<T>> fft_taped(const ComplexPair<Var<T>>& x) {
  Tape<T>& tape = *x.re.tape;
  tape.check_same_tape({&x.re, &x.im});
  const long n = x.re.value().numel();
  require_arg(x.re.value().same_shape(x.im.value()) && x.re.value().rank() == 1,
              "fft_taped: wants matching rank-1 re/im");
  auto fwd = std::make_shared<FftPlan<T>>(n, FftDirection::forward);
  auto inv = std::make_shared<FftPlan<T>>(n, FftDirection::inverse);
  auto [yr, yi] = ad::dft_pair_raw(x.re.value(), x.im.value(), *fwd, T(1));
  long ir = x.re.id, ii = x.im.id;
  auto outs = tape.record({std::move(yr), std::move(yi)}, [ir, ii, inv](Tape<T>& tp, long o) {
    auto [gr, gi] = ad::dft_pair_raw(tp.grad(o), tp.grad(o + 1), *inv, T(1));
    ad::accumulate(tp, ir, gr);
    ad::accumulate(tp, ii, gi);
  });
  return {outs[0], outs[1]};
}

template <class T>
ComplexPair<Var<T>> ifft_taped(const ComplexPair<Var<T>>& x) {
  Tape<T>& tape = *x.re.tape;
  tape.check_same_tape({&x.re, &x.im});
  const long n = x.re.value().numel();
  require_arg(x.re.value().same_shape(x.im.value()) && x.re.value().rank() == 1,
              "ifft_taped: wants matching rank-1 re/im");
  auto fwd = std::make_shared<FftPlan<T>>(n, FftDirection::forward);
  auto inv = std::make_shared<FftPlan<T>>(n, FftDirection::inverse);
  const T inv_n = T(1) / static_cast<T>(n);
  auto [yr, yi] = ad::dft_pair_raw(x.re.value(), x.im.value(), *inv, inv_n);
  long ir = x.re.id, ii = x.im.id;
  auto outs =
      tape.record({std::move(yr), std::move(yi)}, [ir, ii, fwd, inv_n](Tape<T>& tp, long o) {
        auto [gr, gi] = ad::dft_pair_raw(tp.grad(o), tp.grad(o + 1), *fwd, inv_n);
        ad::accumulate(tp, ir, gr);
        ad::accumulate(tp, ii, gi);
      });
  return {outs[0], outs[1]};
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

struct FdReport {
  std::vector<double> per_param_max_rel_err;
  double worst = 0.0;
  long worst_param = -1;
  bool pass = false;
};

// f builds a scalar loss on a fresh tape, binding each tensor in `params`
// through tape.param(). Relative error per element is
// |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
template <class T, class F>
FdReport grad_check(F f, const std::vector<Tensor<T>*>& params, double h, double tol) {
  auto eval = [&]() -> double {
    Tape<T> tape;
    Var<T> loss = f(tape);
    require_usage(loss.value().numel() == 1, "grad_check: f must return a scalar");
    return static_cast<double>(loss.value()[0]);
  };

  Tape<T> tape;
  Var<T> loss = f(tape);
  require_usage(loss.value().numel() == 1, "grad_check: f must return a scalar");
  if (!std::isfinite(static_cast<double>(loss.value()[0])))
    throw NumericError("grad_check: non-finite loss value");
  tape.backward(loss);

  FdReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& t = *params[p];
    const Tensor<T>* g = tape.grad_of_param(t);
    Tensor<T> g_ad = g ? *g : Tensor<T>(t.shape);
    double worst = 0.0;
    for (long i = 0; i < t.numel(); ++i) {
      T saved = t[i];
      t[i] = saved + static_cast<T>(h);
      double up = eval();
      t[i] = saved - static_cast<T>(h);
      double dn = eval();
      t[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericError("grad_check: non-finite output at parameter " + std::to_string(p) +
                           " element " + std::to_string(i));
      double fd = (up - dn) / (2.0 * h);
      double adv = static_cast<double>(g_ad[i]);
      double rel = std::abs(adv - fd) / (std::abs(adv) + std::abs(fd) + 1e-12);
      worst = std::max(worst, rel);
    }
    report.per_param_max_rel_err.push_back(worst);
    if (worst > report.worst) {
      report.worst = worst;
      report.worst_param = static_cast<long>(p);
    }
  }
  report.pass = report.worst <= tol;
  return report;
}

}  // namespace sicrn
