#pragma once

// Structured 3D kernels over NxCxDxHxW tensors: convolution, transposed
// convolution, max pooling, group normalization, trilinear resize.
// Forward and backward passes decompose into slabs where every output
// element is written by exactly one task and inner reductions run in a
// fixed order, so results are bit-identical for any thread count.

#include <cmath>

#include "vsx/ops.hpp"

namespace vsx {

struct Stride3 {
  i64 d = 1, h = 1, w = 1;
  Stride3() = default;
  Stride3(i64 s) : d(s), h(s), w(s) {}
  Stride3(i64 sd, i64 sh, i64 sw) : d(sd), h(sh), w(sw) {}
};

struct Pad3 {
  i64 d = 0, h = 0, w = 0;
  Pad3() = default;
  Pad3(i64 p) : d(p), h(p), w(p) {}
  Pad3(i64 pd, i64 ph, i64 pw) : d(pd), h(ph), w(pw) {}
};

namespace detail {

// Copies one [D,H,W] slab into a zero-padded [D+2pd, H+2ph, W+2pw] scratch.
template <typename S>
void pad_slab(const S* x, S* xp, i64 D, i64 H, i64 W, Pad3 pad) {
  i64 HP = H + 2 * pad.h, WP = W + 2 * pad.w;
  i64 DP = D + 2 * pad.d;
  std::fill(xp, xp + DP * HP * WP, S(0));
  for (i64 d = 0; d < D; ++d) {
    for (i64 h = 0; h < H; ++h) {
      std::copy(x + (d * H + h) * W, x + (d * H + h) * W + W,
                xp + ((d + pad.d) * HP + h + pad.h) * WP + pad.w);
    }
  }
}

// Fused cubic-kernel forward slab over pre-padded input: every output voxel
// gathers all K^3 taps in one pass, so rows are written once per channel.
// Compile-time K lets the tap loops unroll and the ow loop vectorize.
template <typename S, int K>
void conv_slab_fused(const S* xp, const S* kc, S* out, i64 ci_count, i64 pslab, i64 HP, i64 WP,
                     i64 OD, i64 OH, i64 OW) {
  for (i64 ci = 0; ci < ci_count; ++ci) {
    const S* xs = xp + ci * pslab;
    S w[K * K * K];
    for (int t = 0; t < K * K * K; ++t) w[t] = kc[ci * K * K * K + t];
    for (i64 od = 0; od < OD; ++od) {
      for (i64 oh = 0; oh < OH; ++oh) {
        const S* base = xs + (od * HP + oh) * WP;
        S* orow = out + (od * OH + oh) * OW;
        for (i64 ow = 0; ow < OW; ++ow) {
          S acc = S(0);
          for (int kd = 0; kd < K; ++kd) {
            for (int kh = 0; kh < K; ++kh) {
              const S* r = base + (kd * HP + kh) * WP + ow;
              const S* wt = w + (kd * K + kh) * K;
              for (int kw = 0; kw < K; ++kw) acc += wt[kw] * r[kw];
            }
          }
          orow[ow] += acc;
        }
      }
    }
  }
}

// Fused cubic kernel-gradient slab: per (kd,kh) plane, K shifted dot
// products accumulate in lane blocks (fixed lane count and combine order,
// so sums are reproducible), then fold into per-tap accumulators.
template <typename S, int K>
void conv_grad_kernel_slab_fused(const S* xp, const S* gout, S* gk, i64 HP, i64 WP, i64 OD,
                                 i64 OH, i64 OW) {
  constexpr int LA = 8;
  for (int kd = 0; kd < K; ++kd) {
    for (int kh = 0; kh < K; ++kh) {
      S lanes[K][LA];
      for (int t = 0; t < K; ++t) {
        for (int l = 0; l < LA; ++l) lanes[t][l] = S(0);
      }
      for (i64 od = 0; od < OD; ++od) {
        for (i64 oh = 0; oh < OH; ++oh) {
          const S* xrow = xp + ((od + kd) * HP + oh + kh) * WP;
          const S* grow = gout + (od * OH + oh) * OW;
          i64 ow = 0;
          for (; ow + LA <= OW; ow += LA) {
            for (int t = 0; t < K; ++t) {
              const S* xs = xrow + ow + t;
              const S* gs = grow + ow;
              for (int l = 0; l < LA; ++l) lanes[t][l] += gs[l] * xs[l];
            }
          }
          for (; ow < OW; ++ow) {
            for (int t = 0; t < K; ++t) lanes[t][0] += grow[ow] * xrow[ow + t];
          }
        }
      }
      for (int t = 0; t < K; ++t) {
        S total = S(0);
        for (int l = 0; l < LA; ++l) total += lanes[t][l];
        gk[(kd * K + kh) * K + t] += total;
      }
    }
  }
}

// Volumetric cross-correlation, all-stride-one fast path. Accumulates
// shifted input rows into output rows; bias (if any) is pre-filled.
// Runs the slab for one (n, co) pair.
template <typename S>
void conv3d_slab_s1(const S* x, const S* k, S* out, i64 ci_count, i64 D, i64 H, i64 W, i64 KD,
                    i64 KH, i64 KW, i64 OD, i64 OH, i64 OW, Pad3 pad) {
  for (i64 ci = 0; ci < ci_count; ++ci) {
    const S* xc = x + ci * D * H * W;
    const S* kc = k + ci * KD * KH * KW;
    for (i64 kd = 0; kd < KD; ++kd) {
      i64 od_lo = std::max<i64>(0, pad.d - kd);
      i64 od_hi = std::min<i64>(OD, D + pad.d - kd);
      for (i64 od = od_lo; od < od_hi; ++od) {
        i64 id = od + kd - pad.d;
        for (i64 kh = 0; kh < KH; ++kh) {
          i64 oh_lo = std::max<i64>(0, pad.h - kh);
          i64 oh_hi = std::min<i64>(OH, H + pad.h - kh);
          for (i64 oh = oh_lo; oh < oh_hi; ++oh) {
            i64 ih = oh + kh - pad.h;
            const S* xrow = xc + (id * H + ih) * W;
            S* orow = out + (od * OH + oh) * OW;
            for (i64 kw = 0; kw < KW; ++kw) {
              S wv = kc[(kd * KH + kh) * KW + kw];
              i64 shift = kw - pad.w;
              i64 lo = std::max<i64>(0, -shift);
              i64 hi = std::min<i64>(OW, W - shift);
              const S* xs = xrow + shift;
              for (i64 ow = lo; ow < hi; ++ow) orow[ow] += wv * xs[ow];
            }
          }
        }
      }
    }
  }
}

// Input-gradient slab for stride one: transposed shifted-row accumulation.
// Runs for one (n, ci) pair; `k` points at kernel taps laid out [Co,Ci,...].
template <typename S>
void conv3d_grad_input_slab_s1(const S* gout, const S* k, S* gin, i64 co_count, i64 ci, i64 Ci,
                               i64 D, i64 H, i64 W, i64 KD, i64 KH, i64 KW, i64 OD, i64 OH,
                               i64 OW, Pad3 pad) {
  for (i64 co = 0; co < co_count; ++co) {
    const S* gc = gout + co * OD * OH * OW;
    const S* kc = k + (co * Ci + ci) * KD * KH * KW;
    for (i64 kd = 0; kd < KD; ++kd) {
      i64 id_lo = std::max<i64>(0, kd - pad.d);
      i64 id_hi = std::min<i64>(D, OD + kd - pad.d);
      for (i64 id = id_lo; id < id_hi; ++id) {
        i64 od = id - kd + pad.d;
        for (i64 kh = 0; kh < KH; ++kh) {
          i64 ih_lo = std::max<i64>(0, kh - pad.h);
          i64 ih_hi = std::min<i64>(H, OH + kh - pad.h);
          for (i64 ih = ih_lo; ih < ih_hi; ++ih) {
            i64 oh = ih - kh + pad.h;
            const S* grow = gc + (od * OH + oh) * OW;
            S* irow = gin + (id * H + ih) * W;
            for (i64 kw = 0; kw < KW; ++kw) {
              S wv = kc[(kd * KH + kh) * KW + kw];
              i64 shift = pad.w - kw;  // ow = iw + shift
              i64 lo = std::max<i64>(0, -shift);
              i64 hi = std::min<i64>(W, OW - shift);
              const S* gs = grow + shift;
              for (i64 iw = lo; iw < hi; ++iw) irow[iw] += wv * gs[iw];
            }
          }
        }
      }
    }
  }
}

// Kernel-gradient slab for stride one: per-tap row dot products, summed in
// double in a fixed n/od/oh order. Runs for one (co, ci) pair.
template <typename S>
void conv3d_grad_kernel_slab_s1(const S* x, const S* gout, S* gk, i64 N, i64 Ci, i64 Co, i64 ci,
                                i64 co, i64 D, i64 H, i64 W, i64 KD, i64 KH, i64 KW, i64 OD,
                                i64 OH, i64 OW, Pad3 pad) {
  std::vector<double> acc(static_cast<size_t>(KD * KH * KW), 0.0);
  for (i64 n = 0; n < N; ++n) {
    const S* xc = x + (n * Ci + ci) * D * H * W;
    const S* gc = gout + (n * Co + co) * OD * OH * OW;
    for (i64 kd = 0; kd < KD; ++kd) {
      i64 od_lo = std::max<i64>(0, pad.d - kd);
      i64 od_hi = std::min<i64>(OD, D + pad.d - kd);
      for (i64 od = od_lo; od < od_hi; ++od) {
        i64 id = od + kd - pad.d;
        for (i64 kh = 0; kh < KH; ++kh) {
          i64 oh_lo = std::max<i64>(0, pad.h - kh);
          i64 oh_hi = std::min<i64>(OH, H + pad.h - kh);
          for (i64 oh = oh_lo; oh < oh_hi; ++oh) {
            i64 ih = oh + kh - pad.h;
            const S* xrow = xc + (id * H + ih) * W;
            const S* grow = gc + (od * OH + oh) * OW;
            for (i64 kw = 0; kw < KW; ++kw) {
              i64 shift = kw - pad.w;
              i64 lo = std::max<i64>(0, -shift);
              i64 hi = std::min<i64>(OW, W - shift);
              const S* xs = xrow + shift;
              double dot = 0.0;
              for (i64 ow = lo; ow < hi; ++ow) {
                dot += static_cast<double>(grow[ow]) * static_cast<double>(xs[ow]);
              }
              acc[(kd * KH + kh) * KW + kw] += dot;
            }
          }
        }
      }
    }
  }
  for (i64 t = 0; t < KD * KH * KW; ++t) gk[t] += static_cast<S>(acc[t]);
}

}  // namespace detail

/// Volumetric cross-correlation. input [N,Ci,D,H,W], kernel [Co,Ci,kd,kh,kw],
/// optional bias [Co]. Output spatial dims follow floor((in + 2p - k)/s) + 1.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 Stride3 stride = Stride3(1), Pad3 pad = Pad3(0)) {
  detail::check_5d(input, "conv3d");
  require_shape(kernel.ndim() == 5,
                "conv3d kernel must be [Co,Ci,kd,kh,kw], got " + shape_str(kernel.shape()));
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  i64 N = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
  i64 Co = ks[0], KD = ks[2], KH = ks[3], KW = ks[4];
  require_shape(ks[1] == Ci, "conv3d channel mismatch: input has " + std::to_string(Ci) +
                                 " channels, kernel expects " + std::to_string(ks[1]));
  require(stride.d >= 1 && stride.h >= 1 && stride.w >= 1, "conv3d stride must be positive");
  require(pad.d >= 0 && pad.h >= 0 && pad.w >= 0, "conv3d padding must be non-negative");
  require_shape(KD >= 1 && KH >= 1 && KW >= 1, "conv3d kernel dims must be positive");
  require_shape(KD <= D + 2 * pad.d && KH <= H + 2 * pad.h && KW <= W + 2 * pad.w,
                "conv3d kernel " + shape_str(ks) + " larger than padded input " + shape_str(xs));
  bool has_bias = bias.defined();
  if (has_bias) {
    require_shape(bias.ndim() == 1 && bias.shape()[0] == Co,
                  "conv3d bias must be [" + std::to_string(Co) + "], got " +
                      shape_str(bias.shape()));
  }
  i64 OD = (D + 2 * pad.d - KD) / stride.d + 1;
  i64 OH = (H + 2 * pad.h - KH) / stride.h + 1;
  i64 OW = (W + 2 * pad.w - KW) / stride.w + 1;

  std::vector<S> out(static_cast<size_t>(N * Co * OD * OH * OW));
  const S* px = input.data();
  const S* pk = kernel.data();
  const S* pb = has_bias ? bias.data() : nullptr;
  bool unit_stride = stride.d == 1 && stride.h == 1 && stride.w == 1;
  // Cubic kernels at unit stride take the fused single-pass path.
  int KC = (KD == KH && KH == KW && (KD == 1 || KD == 3 || KD == 7)) ? static_cast<int>(KD) : 0;
  bool fused = unit_stride && KC != 0;

  i64 HP = H + 2 * pad.h, WP = W + 2 * pad.w;
  i64 pslab = (D + 2 * pad.d) * HP * WP;
  std::vector<S> xpad_store;
  const S* xpad = px;
  bool needs_pad = pad.d != 0 || pad.h != 0 || pad.w != 0;
  if (fused && needs_pad) {
    xpad_store.resize(static_cast<size_t>(N * Ci * pslab));
    S* xp = xpad_store.data();
    parallel_for(N * Ci, [&](i64 begin, i64 end) {
      for (i64 s = begin; s < end; ++s) {
        detail::pad_slab(px + s * D * H * W, xp + s * pslab, D, H, W, pad);
      }
    });
    xpad = xp;
  }

  parallel_for(N * Co, [&](i64 begin, i64 end) {
    for (i64 slab = begin; slab < end; ++slab) {
      i64 n = slab / Co, co = slab % Co;
      S* o = out.data() + slab * OD * OH * OW;
      S fill = has_bias ? pb[co] : S(0);
      std::fill(o, o + OD * OH * OW, fill);
      if (fused) {
        const S* xs = xpad + n * Ci * pslab;
        const S* kc = pk + co * Ci * KD * KH * KW;
        switch (KC) {
          case 1:
            detail::conv_slab_fused<S, 1>(xs, kc, o, Ci, pslab, HP, WP, OD, OH, OW);
            break;
          case 3:
            detail::conv_slab_fused<S, 3>(xs, kc, o, Ci, pslab, HP, WP, OD, OH, OW);
            break;
          default:
            detail::conv_slab_fused<S, 7>(xs, kc, o, Ci, pslab, HP, WP, OD, OH, OW);
        }
      } else if (unit_stride) {
        detail::conv3d_slab_s1(px + n * Ci * D * H * W, pk + co * Ci * KD * KH * KW, o, Ci, D, H,
                               W, KD, KH, KW, OD, OH, OW, pad);
      } else {
        for (i64 ci = 0; ci < Ci; ++ci) {
          const S* xc = px + (n * Ci + ci) * D * H * W;
          const S* kc = pk + (co * Ci + ci) * KD * KH * KW;
          for (i64 od = 0; od < OD; ++od) {
            for (i64 oh = 0; oh < OH; ++oh) {
              for (i64 ow = 0; ow < OW; ++ow) {
                S acc = S(0);
                for (i64 kd = 0; kd < KD; ++kd) {
                  i64 id = od * stride.d + kd - pad.d;
                  if (id < 0 || id >= D) continue;
                  for (i64 kh = 0; kh < KH; ++kh) {
                    i64 ih = oh * stride.h + kh - pad.h;
                    if (ih < 0 || ih >= H) continue;
                    for (i64 kw = 0; kw < KW; ++kw) {
                      i64 iw = ow * stride.w + kw - pad.w;
                      if (iw < 0 || iw >= W) continue;
                      acc += xc[(id * H + ih) * W + iw] * kc[(kd * KH + kh) * KW + kw];
                    }
                  }
                }
                o[(od * OH + oh) * OW + ow] += acc;
              }
            }
          }
        }
      }
    }
  });

  auto x_node = input.impl();
  auto k_node = kernel.impl();
  auto b_node = has_bias ? bias.impl() : nullptr;
  std::vector<Tensor<S>> parents = {input, kernel};
  if (has_bias) parents.push_back(bias);

  auto backward = [x_node, k_node, b_node, N, Ci, Co, D, H, W, KD, KH, KW, OD, OH, OW, stride,
                   pad, unit_stride, KC, fused](detail::TensorNode<S>& self) {
    const S* gout = self.grad.data();
    const S* px = x_node->values.data();
    const S* pk = k_node->values.data();
    i64 kt = KD * KH * KW;
    i64 out_vox = OD * OH * OW;

    if (x_node->requires_grad) {
      x_node->ensure_grad();
      S* gin = x_node->grad.data();
      Pad3 ipad{KD - 1 - pad.d, KH - 1 - pad.h, KW - 1 - pad.w};
      bool fused_input = fused && ipad.d >= 0 && ipad.h >= 0 && ipad.w >= 0;
      if (fused_input) {
        // Input grad is a convolution of the (re-padded) output grad with the
        // kernel flipped on all spatial axes and regrouped per input channel.
        std::vector<S> kflip(static_cast<size_t>(Ci * Co * kt));
        for (i64 co = 0; co < Co; ++co) {
          for (i64 ci = 0; ci < Ci; ++ci) {
            const S* src = pk + (co * Ci + ci) * kt;
            S* dst = kflip.data() + (ci * Co + co) * kt;
            for (i64 t = 0; t < kt; ++t) dst[t] = src[kt - 1 - t];
          }
        }
        i64 GHP = OH + 2 * ipad.h, GWP = OW + 2 * ipad.w;
        i64 gpslab = (OD + 2 * ipad.d) * GHP * GWP;
        std::vector<S> gpad_store;
        const S* gp = gout;
        if (ipad.d != 0 || ipad.h != 0 || ipad.w != 0) {
          gpad_store.resize(static_cast<size_t>(N * Co * gpslab));
          S* buf = gpad_store.data();
          parallel_for(N * Co, [&](i64 begin, i64 end) {
            for (i64 s = begin; s < end; ++s) {
              detail::pad_slab(gout + s * out_vox, buf + s * gpslab, OD, OH, OW, ipad);
            }
          });
          gp = buf;
        } else {
          gpslab = out_vox;
        }
        parallel_for(N * Ci, [&](i64 begin, i64 end) {
          for (i64 slab = begin; slab < end; ++slab) {
            i64 n = slab / Ci, ci = slab % Ci;
            const S* gs = gp + n * Co * gpslab;
            const S* kc = kflip.data() + ci * Co * kt;
            S* o = gin + slab * D * H * W;
            switch (KC) {
              case 1:
                detail::conv_slab_fused<S, 1>(gs, kc, o, Co, gpslab, GHP, GWP, D, H, W);
                break;
              case 3:
                detail::conv_slab_fused<S, 3>(gs, kc, o, Co, gpslab, GHP, GWP, D, H, W);
                break;
              default:
                detail::conv_slab_fused<S, 7>(gs, kc, o, Co, gpslab, GHP, GWP, D, H, W);
            }
          }
        });
      } else if (unit_stride) {
        parallel_for(N * Ci, [&](i64 begin, i64 end) {
          for (i64 slab = begin; slab < end; ++slab) {
            i64 n = slab / Ci, ci = slab % Ci;
            detail::conv3d_grad_input_slab_s1(gout + n * Co * OD * OH * OW, pk,
                                              gin + slab * D * H * W, Co, ci, Ci, D, H, W, KD,
                                              KH, KW, OD, OH, OW, pad);
          }
        });
      } else {
        parallel_for(N * Ci, [&](i64 begin, i64 end) {
          for (i64 slab = begin; slab < end; ++slab) {
            i64 n = slab / Ci, ci = slab % Ci;
            S* gi = gin + slab * D * H * W;
            for (i64 id = 0; id < D; ++id) {
              for (i64 ih = 0; ih < H; ++ih) {
                for (i64 iw = 0; iw < W; ++iw) {
                  S acc = S(0);
                  for (i64 co = 0; co < Co; ++co) {
                    const S* gc = gout + (n * Co + co) * OD * OH * OW;
                    const S* kc = pk + (co * Ci + ci) * KD * KH * KW;
                    for (i64 kd = 0; kd < KD; ++kd) {
                      i64 t = id + pad.d - kd;
                      if (t < 0 || t % stride.d != 0) continue;
                      i64 od = t / stride.d;
                      if (od >= OD) continue;
                      for (i64 kh = 0; kh < KH; ++kh) {
                        i64 u = ih + pad.h - kh;
                        if (u < 0 || u % stride.h != 0) continue;
                        i64 oh = u / stride.h;
                        if (oh >= OH) continue;
                        for (i64 kw = 0; kw < KW; ++kw) {
                          i64 v = iw + pad.w - kw;
                          if (v < 0 || v % stride.w != 0) continue;
                          i64 ow = v / stride.w;
                          if (ow >= OW) continue;
                          acc += gc[(od * OH + oh) * OW + ow] * kc[(kd * KH + kh) * KW + kw];
                        }
                      }
                    }
                  }
                  gi[(id * H + ih) * W + iw] += acc;
                }
              }
            }
          }
        });
      }
    }

    if (k_node->requires_grad) {
      k_node->ensure_grad();
      S* gk = k_node->grad.data();
      if (fused) {
        i64 HP = H + 2 * pad.h, WP = W + 2 * pad.w;
        i64 pslab = (D + 2 * pad.d) * HP * WP;
        std::vector<S> xpad_store;
        const S* xpad = px;
        if (pad.d != 0 || pad.h != 0 || pad.w != 0) {
          xpad_store.resize(static_cast<size_t>(N * Ci * pslab));
          S* buf = xpad_store.data();
          parallel_for(N * Ci, [&](i64 begin, i64 end) {
            for (i64 s = begin; s < end; ++s) {
              detail::pad_slab(px + s * D * H * W, buf + s * pslab, D, H, W, pad);
            }
          });
          xpad = buf;
        } else {
          pslab = D * H * W;
        }
        parallel_for(Co * Ci, [&](i64 begin, i64 end) {
          for (i64 slab = begin; slab < end; ++slab) {
            i64 co = slab / Ci, ci = slab % Ci;
            S* gkt = gk + slab * kt;
            for (i64 n = 0; n < N; ++n) {
              const S* xs = xpad + (n * Ci + ci) * pslab;
              const S* gs = gout + (n * Co + co) * out_vox;
              switch (KC) {
                case 1:
                  detail::conv_grad_kernel_slab_fused<S, 1>(xs, gs, gkt, HP, WP, OD, OH, OW);
                  break;
                case 3:
                  detail::conv_grad_kernel_slab_fused<S, 3>(xs, gs, gkt, HP, WP, OD, OH, OW);
                  break;
                default:
                  detail::conv_grad_kernel_slab_fused<S, 7>(xs, gs, gkt, HP, WP, OD, OH, OW);
              }
            }
          }
        });
      } else if (unit_stride) {
        parallel_for(Co * Ci, [&](i64 begin, i64 end) {
          for (i64 slab = begin; slab < end; ++slab) {
            i64 co = slab / Ci, ci = slab % Ci;
            detail::conv3d_grad_kernel_slab_s1(px, gout, gk + slab * KD * KH * KW, N, Ci, Co, ci,
                                               co, D, H, W, KD, KH, KW, OD, OH, OW, pad);
          }
        });
      } else {
        parallel_for(Co * Ci, [&](i64 begin, i64 end) {
          for (i64 slab = begin; slab < end; ++slab) {
            i64 co = slab / Ci, ci = slab % Ci;
            S* gkt = gk + slab * KD * KH * KW;
            for (i64 kd = 0; kd < KD; ++kd) {
              for (i64 kh = 0; kh < KH; ++kh) {
                for (i64 kw = 0; kw < KW; ++kw) {
                  double acc = 0.0;
                  for (i64 n = 0; n < N; ++n) {
                    const S* xc = px + (n * Ci + ci) * D * H * W;
                    const S* gc = gout + (n * Co + co) * OD * OH * OW;
                    for (i64 od = 0; od < OD; ++od) {
                      i64 id = od * stride.d + kd - pad.d;
                      if (id < 0 || id >= D) continue;
                      for (i64 oh = 0; oh < OH; ++oh) {
                        i64 ih = oh * stride.h + kh - pad.h;
                        if (ih < 0 || ih >= H) continue;
                        for (i64 ow = 0; ow < OW; ++ow) {
                          i64 iw = ow * stride.w + kw - pad.w;
                          if (iw < 0 || iw >= W) continue;
                          acc += static_cast<double>(gc[(od * OH + oh) * OW + ow]) *
                                 static_cast<double>(xc[(id * H + ih) * W + iw]);
                        }
                      }
                    }
                  }
                  gkt[(kd * KH + kh) * KW + kw] += static_cast<S>(acc);
                }
              }
            }
          }
        });
      }
    }

    if (b_node && b_node->requires_grad) {
      b_node->ensure_grad();
      S* gb = b_node->grad.data();
      i64 vox = OD * OH * OW;
      for (i64 co = 0; co < Co; ++co) {
        double acc = 0.0;
        for (i64 n = 0; n < N; ++n) {
          const S* gc = gout + (n * Co + co) * vox;
          for (i64 v = 0; v < vox; ++v) acc += static_cast<double>(gc[v]);
        }
        gb[co] += static_cast<S>(acc);
      }
    }
  };

  return detail::make_op_result<S>({N, Co, OD, OH, OW}, std::move(out), parents, backward,
                                   "conv3d");
}

template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, Stride3 stride = Stride3(1),
                 Pad3 pad = Pad3(0)) {
  return conv3d(input, kernel, Tensor<S>(), stride, pad);
}

/// Transposed volumetric convolution (adjoint of conv3d at the same stride,
/// zero padding). input [N,C1,D,H,W], kernel [C1,C2,kd,kh,kw]; output spatial
/// dims are (in - 1) * stride + k.
template <typename S>
Tensor<S> conv_transpose3d(const Tensor<S>& input, const Tensor<S>& kernel,
                           Stride3 stride = Stride3(1)) {
  detail::check_5d(input, "conv_transpose3d");
  require_shape(kernel.ndim() == 5, "conv_transpose3d kernel must be [C1,C2,kd,kh,kw], got " +
                                        shape_str(kernel.shape()));
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  i64 N = xs[0], C1 = xs[1], D = xs[2], H = xs[3], W = xs[4];
  i64 C2 = ks[1], KD = ks[2], KH = ks[3], KW = ks[4];
  require_shape(ks[0] == C1, "conv_transpose3d channel mismatch: input has " +
                                 std::to_string(C1) + " channels, kernel expects " +
                                 std::to_string(ks[0]));
  require(stride.d >= 1 && stride.h >= 1 && stride.w >= 1,
          "conv_transpose3d stride must be positive");
  i64 OD = (D - 1) * stride.d + KD;
  i64 OH = (H - 1) * stride.h + KH;
  i64 OW = (W - 1) * stride.w + KW;

  std::vector<S> out(static_cast<size_t>(N * C2 * OD * OH * OW), S(0));
  const S* px = input.data();
  const S* pk = kernel.data();

  parallel_for(N * C2, [&](i64 begin, i64 end) {
    for (i64 slab = begin; slab < end; ++slab) {
      i64 n = slab / C2, co = slab % C2;
      S* o = out.data() + slab * OD * OH * OW;
      for (i64 ci = 0; ci < C1; ++ci) {
        const S* xc = px + (n * C1 + ci) * D * H * W;
        const S* kc = pk + (ci * C2 + co) * KD * KH * KW;
        for (i64 id = 0; id < D; ++id) {
          for (i64 ih = 0; ih < H; ++ih) {
            for (i64 iw = 0; iw < W; ++iw) {
              S v = xc[(id * H + ih) * W + iw];
              if (v == S(0)) continue;
              i64 od0 = id * stride.d, oh0 = ih * stride.h, ow0 = iw * stride.w;
              for (i64 kd = 0; kd < KD; ++kd) {
                for (i64 kh = 0; kh < KH; ++kh) {
                  S* orow = o + ((od0 + kd) * OH + oh0 + kh) * OW + ow0;
                  const S* krow = kc + (kd * KH + kh) * KW;
                  for (i64 kw = 0; kw < KW; ++kw) orow[kw] += v * krow[kw];
                }
              }
            }
          }
        }
      }
    }
  });

  auto x_node = input.impl();
  auto k_node = kernel.impl();
  auto backward = [x_node, k_node, N, C1, C2, D, H, W, KD, KH, KW, OD, OH,
                   OW, stride](detail::TensorNode<S>& self) {
    const S* gout = self.grad.data();
    const S* px = x_node->values.data();
    const S* pk = k_node->values.data();

    if (x_node->requires_grad) {
      x_node->ensure_grad();
      S* gin = x_node->grad.data();
      parallel_for(N * C1, [&](i64 begin, i64 end) {
        for (i64 slab = begin; slab < end; ++slab) {
          i64 n = slab / C1, ci = slab % C1;
          S* gi = gin + slab * D * H * W;
          for (i64 co = 0; co < C2; ++co) {
            const S* gc = gout + (n * C2 + co) * OD * OH * OW;
            const S* kc = pk + (ci * C2 + co) * KD * KH * KW;
            for (i64 id = 0; id < D; ++id) {
              for (i64 ih = 0; ih < H; ++ih) {
                for (i64 iw = 0; iw < W; ++iw) {
                  i64 od0 = id * stride.d, oh0 = ih * stride.h, ow0 = iw * stride.w;
                  S acc = S(0);
                  for (i64 kd = 0; kd < KD; ++kd) {
                    for (i64 kh = 0; kh < KH; ++kh) {
                      const S* grow = gc + ((od0 + kd) * OH + oh0 + kh) * OW + ow0;
                      const S* krow = kc + (kd * KH + kh) * KW;
                      for (i64 kw = 0; kw < KW; ++kw) acc += grow[kw] * krow[kw];
                    }
                  }
                  gi[(id * H + ih) * W + iw] += acc;
                }
              }
            }
          }
        }
      });
    }

    if (k_node->requires_grad) {
      k_node->ensure_grad();
      S* gk = k_node->grad.data();
      parallel_for(C1 * C2, [&](i64 begin, i64 end) {
        for (i64 slab = begin; slab < end; ++slab) {
          i64 ci = slab / C2, co = slab % C2;
          std::vector<double> acc(static_cast<size_t>(KD * KH * KW), 0.0);
          for (i64 n = 0; n < N; ++n) {
            const S* xc = px + (n * C1 + ci) * D * H * W;
            const S* gc = gout + (n * C2 + co) * OD * OH * OW;
            for (i64 id = 0; id < D; ++id) {
              for (i64 ih = 0; ih < H; ++ih) {
                for (i64 iw = 0; iw < W; ++iw) {
                  double v = static_cast<double>(xc[(id * H + ih) * W + iw]);
                  if (v == 0.0) continue;
                  i64 od0 = id * stride.d, oh0 = ih * stride.h, ow0 = iw * stride.w;
                  for (i64 kd = 0; kd < KD; ++kd) {
                    for (i64 kh = 0; kh < KH; ++kh) {
                      const S* grow = gc + ((od0 + kd) * OH + oh0 + kh) * OW + ow0;
                      double* arow = acc.data() + (kd * KH + kh) * KW;
                      for (i64 kw = 0; kw < KW; ++kw) {
                        arow[kw] += v * static_cast<double>(grow[kw]);
                      }
                    }
                  }
                }
              }
            }
          }
          S* gkt = gk + slab * KD * KH * KW;
          for (i64 t = 0; t < KD * KH * KW; ++t) gkt[t] += static_cast<S>(acc[t]);
        }
      });
    }
  };

  return detail::make_op_result<S>({N, C2, OD, OH, OW}, std::move(out), {input, kernel},
                                   backward, "conv_transpose3d");
}

/// 2x2x2 max pooling at stride 2. Spatial dims must be even. `argmax` holds,
/// per output element, the linear index of the winning input voxel (first in
/// d-h-w scan order on ties).
template <typename S>
struct MaxPoolResult {
  Tensor<S> output;
  std::shared_ptr<const std::vector<i64>> argmax;
};

template <typename S>
MaxPoolResult<S> maxpool3d_with_indices(const Tensor<S>& x) {
  detail::check_5d(x, "maxpool3d");
  const Shape& s = x.shape();
  i64 N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
  const char* axis_names[3] = {"depth", "height", "width"};
  i64 dims[3] = {D, H, W};
  for (int i = 0; i < 3; ++i) {
    if (dims[i] % 2 != 0) {
      throw ArgumentError("maxpool3d requires even spatial dims; " + std::string(axis_names[i]) +
                          " is " + std::to_string(dims[i]));
    }
  }
  i64 OD = D / 2, OH = H / 2, OW = W / 2;
  std::vector<S> out(static_cast<size_t>(N * C * OD * OH * OW));
  auto argmax = std::make_shared<std::vector<i64>>(out.size());
  const S* px = x.data();

  parallel_for(N * C, [&](i64 begin, i64 end) {
    for (i64 slab = begin; slab < end; ++slab) {
      const S* xc = px + slab * D * H * W;
      S* o = out.data() + slab * OD * OH * OW;
      i64* am = argmax->data() + slab * OD * OH * OW;
      for (i64 od = 0; od < OD; ++od) {
        for (i64 oh = 0; oh < OH; ++oh) {
          for (i64 ow = 0; ow < OW; ++ow) {
            S best = -std::numeric_limits<S>::infinity();
            i64 best_idx = -1;
            for (i64 dd = 0; dd < 2; ++dd) {
              for (i64 dh = 0; dh < 2; ++dh) {
                for (i64 dw = 0; dw < 2; ++dw) {
                  i64 idx = ((od * 2 + dd) * H + oh * 2 + dh) * W + ow * 2 + dw;
                  if (xc[idx] > best) {
                    best = xc[idx];
                    best_idx = idx;
                  }
                }
              }
            }
            o[(od * OH + oh) * OW + ow] = best;
            am[(od * OH + oh) * OW + ow] = slab * D * H * W + best_idx;
          }
        }
      }
    }
  });

  auto x_node = x.impl();
  i64 out_vox = OD * OH * OW;
  auto backward = [x_node, argmax, out_vox](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S* gx = x_node->grad.data();
    const S* g = self.grad.data();
    i64 slabs = static_cast<i64>(self.grad.size()) / out_vox;
    parallel_for(slabs, [&](i64 begin, i64 end) {
      for (i64 slab = begin; slab < end; ++slab) {
        const i64* am = argmax->data() + slab * out_vox;
        const S* gs = g + slab * out_vox;
        for (i64 v = 0; v < out_vox; ++v) gx[am[v]] += gs[v];
      }
    });
  };
  Tensor<S> out_t = detail::make_op_result<S>({N, C, OD, OH, OW}, std::move(out), {x}, backward,
                                              "maxpool3d");
  return {out_t, argmax};
}

template <typename S>
Tensor<S> maxpool3d(const Tensor<S>& x) {
  return maxpool3d_with_indices(x).output;
}

/// Group normalization with affine parameters. Statistics are computed per
/// (sample, group) over all voxels of the group's channels; channel count
/// must be divisible by `groups`.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, i64 groups, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5)) {
  detail::check_5d(x, "group_norm");
  const Shape& s = x.shape();
  i64 N = s[0], C = s[1], vox = s[2] * s[3] * s[4];
  require(groups >= 1, "group_norm groups must be positive");
  if (C % groups != 0) {
    throw ArgumentError("group_norm: " + std::to_string(C) + " channels not divisible by " +
                        std::to_string(groups) + " groups");
  }
  require_shape(gamma.ndim() == 1 && gamma.shape()[0] == C,
                "group_norm gamma must be [" + std::to_string(C) + "], got " +
                    shape_str(gamma.shape()));
  require_shape(beta.ndim() == 1 && beta.shape()[0] == C,
                "group_norm beta must be [" + std::to_string(C) + "], got " +
                    shape_str(beta.shape()));
  require(eps > S(0), "group_norm eps must be positive");

  i64 cpg = C / groups;      // channels per group
  i64 m = cpg * vox;         // elements per (sample, group)
  std::vector<S> out(x.vals().size());
  auto mean_v = std::make_shared<std::vector<S>>(static_cast<size_t>(N * groups));
  auto inv_v = std::make_shared<std::vector<S>>(static_cast<size_t>(N * groups));
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pbeta = beta.data();

  parallel_for(N * groups, [&](i64 begin, i64 end) {
    for (i64 slab = begin; slab < end; ++slab) {
      i64 n = slab / groups, g = slab % groups;
      const S* base = px + (n * C + g * cpg) * vox;
      double acc = 0.0;
      for (i64 i = 0; i < m; ++i) acc += static_cast<double>(base[i]);
      double mu = acc / static_cast<double>(m);
      double var = 0.0;
      for (i64 i = 0; i < m; ++i) {
        double d = static_cast<double>(base[i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      (*mean_v)[slab] = static_cast<S>(mu);
      (*inv_v)[slab] = static_cast<S>(inv);
      S* o = out.data() + (n * C + g * cpg) * vox;
      for (i64 c = 0; c < cpg; ++c) {
        S ga = pg[g * cpg + c];
        S be = pbeta[g * cpg + c];
        S scale = static_cast<S>(inv) * ga;
        S shift = be - static_cast<S>(mu) * scale;
        const S* bp = base + c * vox;
        S* op = o + c * vox;
        for (i64 v = 0; v < vox; ++v) op[v] = bp[v] * scale + shift;
      }
    }
  });

  auto x_node = x.impl();
  auto g_node = gamma.impl();
  auto b_node = beta.impl();
  auto backward = [x_node, g_node, b_node, N, C, groups, cpg, vox, m, mean_v,
                   inv_v](detail::TensorNode<S>& self) {
    const S* gout = self.grad.data();
    const S* px = x_node->values.data();
    const S* pg = g_node->values.data();

    if (x_node->requires_grad) {
      x_node->ensure_grad();
      S* gx = x_node->grad.data();
      parallel_for(N * groups, [&](i64 begin, i64 end) {
        for (i64 slab = begin; slab < end; ++slab) {
          i64 n = slab / groups, g = slab % groups;
          S mu = (*mean_v)[slab];
          S inv = (*inv_v)[slab];
          const S* base = px + (n * C + g * cpg) * vox;
          const S* gb = gout + (n * C + g * cpg) * vox;
          // u = gout * gamma; need sum(u) and sum(u * xhat)
          double sum_u = 0.0, sum_ux = 0.0;
          for (i64 c = 0; c < cpg; ++c) {
            S ga = pg[g * cpg + c];
            const S* bp = base + c * vox;
            const S* gp = gb + c * vox;
            for (i64 v = 0; v < vox; ++v) {
              double u = static_cast<double>(gp[v]) * static_cast<double>(ga);
              double xh = (static_cast<double>(bp[v]) - static_cast<double>(mu)) *
                          static_cast<double>(inv);
              sum_u += u;
              sum_ux += u * xh;
            }
          }
          double mu_u = sum_u / static_cast<double>(m);
          double mu_ux = sum_ux / static_cast<double>(m);
          S* gxp = gx + (n * C + g * cpg) * vox;
          for (i64 c = 0; c < cpg; ++c) {
            S ga = pg[g * cpg + c];
            const S* bp = base + c * vox;
            const S* gp = gb + c * vox;
            S* gxc = gxp + c * vox;
            for (i64 v = 0; v < vox; ++v) {
              double u = static_cast<double>(gp[v]) * static_cast<double>(ga);
              double xh = (static_cast<double>(bp[v]) - static_cast<double>(mu)) *
                          static_cast<double>(inv);
              gxc[v] += static_cast<S>(static_cast<double>(inv) * (u - mu_u - xh * mu_ux));
            }
          }
        }
      });
    }

    bool need_gamma = g_node->requires_grad;
    bool need_beta = b_node->requires_grad;
    if (need_gamma) g_node->ensure_grad();
    if (need_beta) b_node->ensure_grad();
    if (need_gamma || need_beta) {
      S* ggamma = need_gamma ? g_node->grad.data() : nullptr;
      S* gbeta = need_beta ? b_node->grad.data() : nullptr;
      parallel_for(C, [&](i64 begin, i64 end) {
        for (i64 c = begin; c < end; ++c) {
          i64 g = c / cpg;
          double acc_g = 0.0, acc_b = 0.0;
          for (i64 n = 0; n < N; ++n) {
            S mu = (*mean_v)[n * groups + g];
            S inv = (*inv_v)[n * groups + g];
            const S* bp = px + (n * C + c) * vox;
            const S* gp = gout + (n * C + c) * vox;
            for (i64 v = 0; v < vox; ++v) {
              double xh = (static_cast<double>(bp[v]) - static_cast<double>(mu)) *
                          static_cast<double>(inv);
              acc_g += static_cast<double>(gp[v]) * xh;
              acc_b += static_cast<double>(gp[v]);
            }
          }
          if (ggamma) ggamma[c] += static_cast<S>(acc_g);
          if (gbeta) gbeta[c] += static_cast<S>(acc_b);
        }
      });
    }
  };

  return detail::make_op_result<S>(s, std::move(out), {x, gamma, beta}, backward, "group_norm");
}

/// Trilinear resize to the given spatial dims; corner-aligned sampling is
/// off (half-voxel centers, clamped at the borders).
template <typename S>
Tensor<S> trilinear_resize(const Tensor<S>& x, i64 OD, i64 OH, i64 OW) {
  detail::check_5d(x, "trilinear_resize");
  require(OD >= 1 && OH >= 1 && OW >= 1, "trilinear_resize target dims must be positive");
  const Shape& s = x.shape();
  i64 N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
  if (D == OD && H == OH && W == OW) {
    // Still a real op so gradients flow; copy via reshape.
    return reshape(x, s);
  }

  struct AxisTap {
    i64 i0, i1;
    S w1;  // weight of i1; i0 gets 1 - w1
  };
  auto make_taps = [](i64 in, i64 out) {
    std::vector<AxisTap> taps(static_cast<size_t>(out));
    double scale = static_cast<double>(in) / static_cast<double>(out);
    for (i64 i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      if (src < 0.0) src = 0.0;
      if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
      i64 i0 = static_cast<i64>(src);
      if (i0 > in - 1) i0 = in - 1;
      i64 i1 = std::min<i64>(i0 + 1, in - 1);
      taps[i] = {i0, i1, static_cast<S>(src - static_cast<double>(i0))};
    }
    return taps;
  };
  auto td = std::make_shared<std::vector<AxisTap>>(make_taps(D, OD));
  auto th = std::make_shared<std::vector<AxisTap>>(make_taps(H, OH));
  auto tw = std::make_shared<std::vector<AxisTap>>(make_taps(W, OW));

  std::vector<S> out(static_cast<size_t>(N * C * OD * OH * OW));
  const S* px = x.data();
  parallel_for(N * C, [&](i64 begin, i64 end) {
    for (i64 slab = begin; slab < end; ++slab) {
      const S* xc = px + slab * D * H * W;
      S* o = out.data() + slab * OD * OH * OW;
      for (i64 od = 0; od < OD; ++od) {
        const AxisTap& ad = (*td)[od];
        for (i64 oh = 0; oh < OH; ++oh) {
          const AxisTap& ah = (*th)[oh];
          for (i64 ow = 0; ow < OW; ++ow) {
            const AxisTap& aw = (*tw)[ow];
            S c000 = xc[(ad.i0 * H + ah.i0) * W + aw.i0];
            S c001 = xc[(ad.i0 * H + ah.i0) * W + aw.i1];
            S c010 = xc[(ad.i0 * H + ah.i1) * W + aw.i0];
            S c011 = xc[(ad.i0 * H + ah.i1) * W + aw.i1];
            S c100 = xc[(ad.i1 * H + ah.i0) * W + aw.i0];
            S c101 = xc[(ad.i1 * H + ah.i0) * W + aw.i1];
            S c110 = xc[(ad.i1 * H + ah.i1) * W + aw.i0];
            S c111 = xc[(ad.i1 * H + ah.i1) * W + aw.i1];
            S w_d1 = ad.w1, w_h1 = ah.w1, w_w1 = aw.w1;
            S w_d0 = S(1) - w_d1, w_h0 = S(1) - w_h1, w_w0 = S(1) - w_w1;
            S v = w_d0 * (w_h0 * (w_w0 * c000 + w_w1 * c001) +
                          w_h1 * (w_w0 * c010 + w_w1 * c011)) +
                  w_d1 * (w_h0 * (w_w0 * c100 + w_w1 * c101) +
                          w_h1 * (w_w0 * c110 + w_w1 * c111));
            o[(od * OH + oh) * OW + ow] = v;
          }
        }
      }
    }
  });

  auto x_node = x.impl();
  auto backward = [x_node, td, th, tw, N, C, D, H, W, OD, OH, OW](detail::TensorNode<S>& self) {
    if (!x_node->requires_grad) return;
    x_node->ensure_grad();
    S* gx = x_node->grad.data();
    const S* g = self.grad.data();
    parallel_for(N * C, [&](i64 begin, i64 end) {
      for (i64 slab = begin; slab < end; ++slab) {
        S* gxc = gx + slab * D * H * W;
        const S* gc = g + slab * OD * OH * OW;
        for (i64 od = 0; od < OD; ++od) {
          const AxisTap& ad = (*td)[od];
          for (i64 oh = 0; oh < OH; ++oh) {
            const AxisTap& ah = (*th)[oh];
            for (i64 ow = 0; ow < OW; ++ow) {
              const AxisTap& aw = (*tw)[ow];
              S gv = gc[(od * OH + oh) * OW + ow];
              S w_d1 = ad.w1, w_h1 = ah.w1, w_w1 = aw.w1;
              S w_d0 = S(1) - w_d1, w_h0 = S(1) - w_h1, w_w0 = S(1) - w_w1;
              gxc[(ad.i0 * H + ah.i0) * W + aw.i0] += gv * w_d0 * w_h0 * w_w0;
              gxc[(ad.i0 * H + ah.i0) * W + aw.i1] += gv * w_d0 * w_h0 * w_w1;
              gxc[(ad.i0 * H + ah.i1) * W + aw.i0] += gv * w_d0 * w_h1 * w_w0;
              gxc[(ad.i0 * H + ah.i1) * W + aw.i1] += gv * w_d0 * w_h1 * w_w1;
              gxc[(ad.i1 * H + ah.i0) * W + aw.i0] += gv * w_d1 * w_h0 * w_w0;
              gxc[(ad.i1 * H + ah.i0) * W + aw.i1] += gv * w_d1 * w_h0 * w_w1;
              gxc[(ad.i1 * H + ah.i1) * W + aw.i0] += gv * w_d1 * w_h1 * w_w0;
              gxc[(ad.i1 * H + ah.i1) * W + aw.i1] += gv * w_d1 * w_h1 * w_w1;
            }
          }
        }
      }
    });
  };
  return detail::make_op_result<S>({N, C, OD, OH, OW}, std::move(out), {x}, backward,
                                   "trilinear_resize");
}

}  // namespace vsx
