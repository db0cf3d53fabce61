#pragma once

// Pointwise, reduction and shape operations with reverse-mode rules.
// The 3D structured kernels (convolution, pooling, normalization, resize)
// live in kernels.hpp.

#include <cmath>
#include <limits>

#include "vsx/tensor.hpp"

namespace vsx {

namespace detail {

// Numpy-style broadcast: align shapes right, each dim equal or 1.
struct BroadcastPlan {
  Shape out;
  std::vector<i64> stride_a, stride_b;  // element strides per out dim; 0 where broadcast
  bool same = false;
};

inline BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  size_t nd = std::max(a.size(), b.size());
  plan.out.resize(nd);
  plan.stride_a.resize(nd);
  plan.stride_b.resize(nd);
  // contiguous strides of each operand
  std::vector<i64> ca(a.size(), 1), cb(b.size(), 1);
  for (int i = static_cast<int>(a.size()) - 2; i >= 0; --i) ca[i] = ca[i + 1] * a[i + 1];
  for (int i = static_cast<int>(b.size()) - 2; i >= 0; --i) cb[i] = cb[i + 1] * b[i + 1];
  for (size_t i = 0; i < nd; ++i) {
    i64 da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    i64 db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("operands not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    }
    plan.out[i] = std::max(da, db);
    plan.stride_a[i] = (da == 1 && plan.out[i] != 1) ? 0 : (i < nd - a.size() ? 0 : ca[i - (nd - a.size())]);
    plan.stride_b[i] = (db == 1 && plan.out[i] != 1) ? 0 : (i < nd - b.size() ? 0 : cb[i - (nd - b.size())]);
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  i64 total = numel(plan.out);
  if (plan.same) {
    for (i64 i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  size_t nd = plan.out.size();
  std::vector<i64> idx(nd, 0);
  i64 ia = 0, ib = 0;
  for (i64 io = 0; io < total; ++io) {
    f(io, ia, ib);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      idx[d]++;
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.stride_a[d] * plan.out[d];
      ib -= plan.stride_b[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

// Shared skeleton for broadcasting binary ops. FwdFn: S(S,S).
// GradA/GradB: (g, av, bv, outv) -> contribution.
template <typename S, typename FwdFn, typename GradA, typename GradB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, FwdFn fwd, GradA ga_fn,
                    GradB gb_fn, const char* name) {
  auto plan = make_broadcast_plan(a.shape(), b.shape());
  std::vector<S> out(static_cast<size_t>(numel(plan.out)));
  const S* pa = a.data();
  const S* pb = b.data();
  for_each_broadcast(plan, [&](i64 io, i64 ia, i64 ib) { out[io] = fwd(pa[ia], pb[ib]); });

  auto a_node = a.impl();
  auto b_node = b.impl();
  auto backward = [a_node, b_node, plan, ga_fn, gb_fn](TensorNode<S>& self) {
    const S* pa = a_node->values.data();
    const S* pb = b_node->values.data();
    const S* po = self.values.data();
    const S* g = self.grad.data();
    bool need_a = a_node->requires_grad;
    bool need_b = b_node->requires_grad;
    if (need_a) a_node->ensure_grad();
    if (need_b) b_node->ensure_grad();
    S* gra = need_a ? a_node->grad.data() : nullptr;
    S* grb = need_b ? b_node->grad.data() : nullptr;
    for_each_broadcast(plan, [&](i64 io, i64 ia, i64 ib) {
      if (need_a) gra[ia] += ga_fn(g[io], pa[ia], pb[ib], po[io]);
      if (need_b) grb[ib] += gb_fn(g[io], pa[ia], pb[ib], po[io]);
    });
  };
  return make_op_result<S>(plan.out, std::move(out), {a, b}, backward, name);
}

// Shared skeleton for elementwise unary ops. GradFn: (g, x, y) -> dL/dx.
template <typename S, typename FwdFn, typename GradFn>
Tensor<S> unary_op(const Tensor<S>& x, FwdFn fwd, GradFn grad_fn, const char* name) {
  std::vector<S> out(x.vals().size());
  const S* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  auto x_node = x.impl();
  auto backward = [x_node, grad_fn](TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    const S* px = x_node->values.data();
    const S* py = self.values.data();
    const S* g = self.grad.data();
    S* gx = x_node->grad.data();
    for (size_t i = 0; i < self.values.size(); ++i) gx[i] += grad_fn(g[i], px[i], py[i]);
  };
  return make_op_result<S>(x.shape(), std::move(out), {x}, backward, name);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, [](S x, S y) { return x + y; }, [](S g, S, S, S) { return g; },
      [](S g, S, S, S) { return g; }, "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, [](S x, S y) { return x - y; }, [](S g, S, S, S) { return g; },
      [](S g, S, S, S) { return -g; }, "sub");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, [](S x, S y) { return x * y; }, [](S g, S, S y, S) { return g * y; },
      [](S g, S x, S, S) { return g * x; }, "mul");
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, [](S x, S y) { return x / y; }, [](S g, S, S y, S) { return g / y; },
      [](S g, S, S y, S out) { return -g * out / y; }, "div");
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op<S>(
      x, [c](S v) { return v + c; }, [](S g, S, S) { return g; }, "add_scalar");
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op<S>(
      x, [c](S v) { return v * c; }, [c](S g, S, S) { return g * c; }, "mul_scalar");
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return mul_scalar(x, S(-1));
}

// ---------------------------------------------------------------------------
// Activations and pointwise transcendentals

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S g, S v, S) { return v > S(0) ? g : S(0); }, "relu");
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x,
      [](S v) {
        // Split by sign to avoid overflow in exp.
        if (v >= S(0)) {
          S e = std::exp(-v);
          return S(1) / (S(1) + e);
        }
        S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S g, S, S y) { return g * y * (S(1) - y); }, "sigmoid");
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, [](S v) { return std::log(v); }, [](S g, S v, S) { return g / v; }, "log");
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, [](S v) { return std::exp(v); }, [](S g, S, S y) { return g * y; }, "exp");
}

/// Clamps to [lo, hi]; gradient passes only through the interior.
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  return detail::unary_op<S>(
      x, [lo, hi](S v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](S g, S v, S) { return (v > lo && v < hi) ? g : S(0); }, "clamp");
}

/// Softmax along `axis` (negative counts from the end); max-subtracted for
/// stability. Output sums to one along the axis.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const Shape& s = x.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "softmax axis out of range");
  i64 axis_len = s[axis];
  i64 inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= s[i];
  for (int i = 0; i < axis; ++i) outer *= s[i];

  std::vector<S> out(x.vals().size());
  const S* px = x.data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 in = 0; in < inner; ++in) {
      i64 base = o * axis_len * inner + in;
      S m = px[base];
      for (i64 k = 1; k < axis_len; ++k) m = std::max(m, px[base + k * inner]);
      double z = 0.0;
      for (i64 k = 0; k < axis_len; ++k) {
        S e = std::exp(px[base + k * inner] - m);
        out[base + k * inner] = e;
        z += static_cast<double>(e);
      }
      S zi = static_cast<S>(1.0 / z);
      for (i64 k = 0; k < axis_len; ++k) out[base + k * inner] *= zi;
    }
  }

  auto x_node = x.impl();
  auto backward = [x_node, axis_len, inner, outer](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    const S* y = self.values.data();
    const S* g = self.grad.data();
    S* gx = x_node->grad.data();
    for (i64 o = 0; o < outer; ++o) {
      for (i64 in = 0; in < inner; ++in) {
        i64 base = o * axis_len * inner + in;
        double dot = 0.0;
        for (i64 k = 0; k < axis_len; ++k) {
          i64 i = base + k * inner;
          dot += static_cast<double>(g[i]) * static_cast<double>(y[i]);
        }
        for (i64 k = 0; k < axis_len; ++k) {
          i64 i = base + k * inner;
          gx[i] += y[i] * (g[i] - static_cast<S>(dot));
        }
      }
    }
  };
  return detail::make_op_result<S>(s, std::move(out), {x}, backward, "softmax");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  double acc = 0.0;
  for (S v : x.vals()) acc += static_cast<double>(v);
  auto x_node = x.impl();
  auto backward = [x_node](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S g = self.grad[0];
    for (auto& gv : x_node->grad) gv += g;
  };
  return detail::make_op_result<S>({}, {static_cast<S>(acc)}, {x}, backward, "sum");
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  i64 n = x.numel();
  require(n > 0, "mean of empty tensor");
  double acc = 0.0;
  for (S v : x.vals()) acc += static_cast<double>(v);
  acc /= static_cast<double>(n);
  auto x_node = x.impl();
  auto backward = [x_node, n](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S g = self.grad[0] / static_cast<S>(n);
    for (auto& gv : x_node->grad) gv += g;
  };
  return detail::make_op_result<S>({}, {static_cast<S>(acc)}, {x}, backward, "mean");
}

// ---------------------------------------------------------------------------
// Shape surgery

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape target) {
  require_shape(numel(target) == x.numel(), "reshape " + shape_str(x.shape()) + " -> " +
                                                shape_str(target) + " changes element count");
  std::vector<S> out = x.vals();
  auto x_node = x.impl();
  auto backward = [x_node](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    detail::accumulate(*x_node, self.grad);
  };
  return detail::make_op_result<S>(std::move(target), std::move(out), {x}, backward, "reshape");
}

/// Copies elements [start, start+len) along `axis`.
template <typename S>
Tensor<S> narrow(const Tensor<S>& x, int axis, i64 start, i64 len) {
  const Shape& s = x.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "narrow axis out of range");
  require(start >= 0 && len >= 0 && start + len <= s[axis],
          "narrow range [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") outside axis of size " + std::to_string(s[axis]));
  i64 inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= s[i];
  for (int i = 0; i < axis; ++i) outer *= s[i];

  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<S> out(static_cast<size_t>(outer * len * inner));
  const S* px = x.data();
  for (i64 o = 0; o < outer; ++o) {
    const S* src = px + (o * s[axis] + start) * inner;
    S* dst = out.data() + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }

  auto x_node = x.impl();
  i64 axis_len = s[axis];
  auto backward = [x_node, outer, inner, axis_len, start, len](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    const S* g = self.grad.data();
    S* gx = x_node->grad.data();
    for (i64 o = 0; o < outer; ++o) {
      S* dst = gx + (o * axis_len + start) * inner;
      const S* src = g + o * len * inner;
      for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  };
  return detail::make_op_result<S>(std::move(out_shape), std::move(out), {x}, backward, "narrow");
}

/// Joins a and b along `axis`; every other dimension must agree.
template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis = 1) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require_shape(sa.size() == sb.size(),
                "concat rank mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
  int nd = static_cast<int>(sa.size());
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "concat axis out of range");
  for (int i = 0; i < nd; ++i) {
    if (i != axis) {
      require_shape(sa[i] == sb[i], "concat: dimension " + std::to_string(i) +
                                        " differs: " + shape_str(sa) + " vs " + shape_str(sb));
    }
  }
  i64 inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= sa[i];
  for (int i = 0; i < axis; ++i) outer *= sa[i];
  i64 la = sa[axis], lb = sb[axis];

  Shape out_shape = sa;
  out_shape[axis] = la + lb;
  std::vector<S> out(static_cast<size_t>(outer * (la + lb) * inner));
  const S* pa = a.data();
  const S* pb = b.data();
  for (i64 o = 0; o < outer; ++o) {
    S* dst = out.data() + o * (la + lb) * inner;
    std::copy(pa + o * la * inner, pa + (o + 1) * la * inner, dst);
    std::copy(pb + o * lb * inner, pb + (o + 1) * lb * inner, dst + la * inner);
  }

  auto a_node = a.impl();
  auto b_node = b.impl();
  auto backward = [a_node, b_node, outer, inner, la, lb](detail::TensorNode<S>& self) {
    const S* g = self.grad.data();
    if (a_node->requires_grad) {
      a_node->ensure_grad();
      S* ga = a_node->grad.data();
      for (i64 o = 0; o < outer; ++o) {
        const S* src = g + o * (la + lb) * inner;
        S* dst = ga + o * la * inner;
        for (i64 i = 0; i < la * inner; ++i) dst[i] += src[i];
      }
    }
    if (b_node->requires_grad) {
      b_node->ensure_grad();
      S* gb = b_node->grad.data();
      for (i64 o = 0; o < outer; ++o) {
        const S* src = g + o * (la + lb) * inner + la * inner;
        S* dst = gb + o * lb * inner;
        for (i64 i = 0; i < lb * inner; ++i) dst[i] += src[i];
      }
    }
  };
  return detail::make_op_result<S>(std::move(out_shape), std::move(out), {a, b}, backward,
                                   "concat");
}

/// Splits along `axis` into pieces of the given sizes (must cover the axis).
template <typename S>
std::vector<Tensor<S>> split(const Tensor<S>& x, int axis, const std::vector<i64>& sizes) {
  i64 total = 0;
  for (i64 v : sizes) total += v;
  int nd = static_cast<int>(x.shape().size());
  int ax = axis < 0 ? axis + nd : axis;
  require(ax >= 0 && ax < nd, "split axis out of range");
  require_shape(total == x.shape()[ax], "split sizes sum to " + std::to_string(total) +
                                            " but axis has " + std::to_string(x.shape()[ax]));
  std::vector<Tensor<S>> parts;
  i64 off = 0;
  for (i64 sz : sizes) {
    parts.push_back(narrow(x, ax, off, sz));
    off += sz;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Descriptor poolings (N x C x D x H x W)

namespace detail {
template <typename S>
void check_5d(const Tensor<S>& x, const char* op) {
  require_shape(x.ndim() == 5,
                std::string(op) + " expects an NxCxDxHxW tensor, got " + shape_str(x.shape()));
}
}  // namespace detail

/// Per-channel spatial mean: [N,C,D,H,W] -> [N,C,1,1,1].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  detail::check_5d(x, "global_avg_pool");
  const Shape& s = x.shape();
  i64 n = s[0], c = s[1], vox = s[2] * s[3] * s[4];
  std::vector<S> out(static_cast<size_t>(n * c));
  const S* px = x.data();
  for (i64 i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const S* p = px + i * vox;
    for (i64 v = 0; v < vox; ++v) acc += static_cast<double>(p[v]);
    out[i] = static_cast<S>(acc / static_cast<double>(vox));
  }
  auto x_node = x.impl();
  auto backward = [x_node, vox](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S* gx = x_node->grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      S g = self.grad[i] / static_cast<S>(vox);
      S* p = gx + i * vox;
      for (i64 v = 0; v < vox; ++v) p[v] += g;
    }
  };
  return detail::make_op_result<S>({n, c, 1, 1, 1}, std::move(out), {x}, backward,
                                   "global_avg_pool");
}

/// Per-channel spatial max: [N,C,D,H,W] -> [N,C,1,1,1]. Gradient routes to the
/// first maximal voxel.
template <typename S>
Tensor<S> global_max_pool(const Tensor<S>& x) {
  detail::check_5d(x, "global_max_pool");
  const Shape& s = x.shape();
  i64 n = s[0], c = s[1], vox = s[2] * s[3] * s[4];
  require_shape(vox > 0, "global_max_pool over empty volume");
  std::vector<S> out(static_cast<size_t>(n * c));
  auto argmax = std::make_shared<std::vector<i64>>(static_cast<size_t>(n * c));
  const S* px = x.data();
  for (i64 i = 0; i < n * c; ++i) {
    const S* p = px + i * vox;
    i64 best = 0;
    for (i64 v = 1; v < vox; ++v) {
      if (p[v] > p[best]) best = v;
    }
    out[i] = p[best];
    (*argmax)[i] = i * vox + best;
  }
  auto x_node = x.impl();
  auto backward = [x_node, argmax](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S* gx = x_node->grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i) gx[(*argmax)[i]] += self.grad[i];
  };
  return detail::make_op_result<S>({n, c, 1, 1, 1}, std::move(out), {x}, backward,
                                   "global_max_pool");
}

/// Mean over channels: [N,C,D,H,W] -> [N,1,D,H,W].
template <typename S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  detail::check_5d(x, "channel_mean");
  const Shape& s = x.shape();
  i64 n = s[0], c = s[1], vox = s[2] * s[3] * s[4];
  require_shape(c > 0, "channel_mean over zero channels");
  std::vector<S> out(static_cast<size_t>(n * vox), S(0));
  const S* px = x.data();
  for (i64 b = 0; b < n; ++b) {
    S* po = out.data() + b * vox;
    for (i64 ch = 0; ch < c; ++ch) {
      const S* p = px + (b * c + ch) * vox;
      for (i64 v = 0; v < vox; ++v) po[v] += p[v];
    }
    S inv = S(1) / static_cast<S>(c);
    for (i64 v = 0; v < vox; ++v) po[v] *= inv;
  }
  auto x_node = x.impl();
  auto backward = [x_node, n, c, vox](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S* gx = x_node->grad.data();
    const S* g = self.grad.data();
    S inv = S(1) / static_cast<S>(c);
    for (i64 b = 0; b < n; ++b) {
      for (i64 ch = 0; ch < c; ++ch) {
        S* p = gx + (b * c + ch) * vox;
        const S* pg = g + b * vox;
        for (i64 v = 0; v < vox; ++v) p[v] += pg[v] * inv;
      }
    }
  };
  return detail::make_op_result<S>({n, 1, s[2], s[3], s[4]}, std::move(out), {x}, backward,
                                   "channel_mean");
}

/// Max over channels: [N,C,D,H,W] -> [N,1,D,H,W]. Gradient routes to the
/// first maximal channel per voxel.
template <typename S>
Tensor<S> channel_max(const Tensor<S>& x) {
  detail::check_5d(x, "channel_max");
  const Shape& s = x.shape();
  i64 n = s[0], c = s[1], vox = s[2] * s[3] * s[4];
  require_shape(c > 0, "channel_max over zero channels");
  std::vector<S> out(static_cast<size_t>(n * vox));
  auto argmax = std::make_shared<std::vector<i64>>(static_cast<size_t>(n * vox));
  const S* px = x.data();
  for (i64 b = 0; b < n; ++b) {
    for (i64 v = 0; v < vox; ++v) {
      i64 best_c = 0;
      S best = px[(b * c) * vox + v];
      for (i64 ch = 1; ch < c; ++ch) {
        S cand = px[(b * c + ch) * vox + v];
        if (cand > best) {
          best = cand;
          best_c = ch;
        }
      }
      out[b * vox + v] = best;
      (*argmax)[b * vox + v] = (b * c + best_c) * vox + v;
    }
  }
  auto x_node = x.impl();
  auto backward = [x_node, argmax](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S* gx = x_node->grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i) gx[(*argmax)[i]] += self.grad[i];
  };
  return detail::make_op_result<S>({n, 1, s[2], s[3], s[4]}, std::move(out), {x}, backward,
                                   "channel_max");
}

}  // namespace vsx
