#pragma once

// Reusable network building blocks: encoder/decoder blocks, residual blocks,
// CBAM (channel + spatial attention) and additive attention gates. Blocks are
// pure functions of (input, params); parameter tensors are created by the
// make_* builders, which also register them under a stable dotted path in a
// BlockParams registry (the naming convention the checkpoint format relies
// on: "enc{i}|dec{i}|bridge.{sub}.{kernel|bias|gamma|beta}").

#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vsx/kernels.hpp"
#include "vsx/ops.hpp"

namespace vsx {

// ---------------------------------------------------------------------------
// Parameter registry

template <typename S>
class BlockParamsT {
 public:
  Tensor<S>& add(const std::string& path, Tensor<S> t) {
    require(index_.find(path) == index_.end(), "duplicate parameter path '" + path + "'");
    t.set_requires_grad(true);
    index_[path] = items_.size();
    items_.emplace_back(path, std::move(t));
    return items_.back().second;
  }

  bool has(const std::string& path) const { return index_.find(path) != index_.end(); }

  Tensor<S>& get(const std::string& path) {
    auto it = index_.find(path);
    require(it != index_.end(), "no parameter at path '" + path + "'");
    return items_[it->second].second;
  }

  const Tensor<S>& get(const std::string& path) const {
    auto it = index_.find(path);
    require(it != index_.end(), "no parameter at path '" + path + "'");
    return items_[it->second].second;
  }

  size_t size() const { return items_.size(); }

  // Registration order; stable across runs for a fixed architecture.
  const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }

  std::vector<Tensor<S>> tensors() const {
    std::vector<Tensor<S>> out;
    out.reserve(items_.size());
    for (const auto& kv : items_) out.push_back(kv.second);
    return out;
  }

  i64 parameter_count() const {
    i64 n = 0;
    for (const auto& kv : items_) n += kv.second.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

using BlockParams = BlockParamsT<float>;

// ---------------------------------------------------------------------------
// Attention records

enum class AttentionKind { gate, cbam_channel, cbam_spatial };

inline const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::gate:
      return "gate";
    case AttentionKind::cbam_channel:
      return "cbam-channel";
    default:
      return "cbam-spatial";
  }
}

template <typename S>
struct AttentionRecordT {
  int site = -1;  // skip-connection index, 0 = highest resolution
  Tensor<S> weights;
  AttentionKind kind = AttentionKind::gate;
};

using AttentionRecord = AttentionRecordT<float>;

// ---------------------------------------------------------------------------
// Initialization & shared helpers

template <typename S>
Tensor<S> he_uniform(Shape shape, i64 fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(std::max<i64>(fan_in, 1)));
  return Tensor<S>::uniform(std::move(shape), rng, -bound, bound);
}

// Group count: the largest divisor of C not exceeding min(8, C/2). Capping at
// half the channels keeps at least two channels per group, so normalization
// statistics never become per-channel (which would null conv-bias gradients).
inline i64 norm_groups(i64 channels) {
  i64 cap = std::min<i64>(8, std::max<i64>(1, channels / 2));
  for (i64 g = cap; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

// One convolution sub-layer's parameters: 3x3x3 kernel + bias and the
// normalization affine pair.
template <typename S>
struct ConvUnitT {
  Tensor<S> kernel, bias, gamma, beta;
};

template <typename S>
ConvUnitT<S> make_conv_unit(BlockParamsT<S>& reg, const std::string& prefix, i64 in_c, i64 out_c,
                            i64 k, Rng& rng) {
  ConvUnitT<S> u;
  u.kernel = reg.add(prefix + ".kernel", he_uniform<S>({out_c, in_c, k, k, k}, in_c * k * k * k, rng));
  u.bias = reg.add(prefix + ".bias", Tensor<S>::zeros({out_c}));
  u.gamma = reg.add(prefix + ".gamma", Tensor<S>::ones({out_c}));
  u.beta = reg.add(prefix + ".beta", Tensor<S>::zeros({out_c}));
  return u;
}

namespace detail {

// conv (3x3x3, same-padded) -> group norm -> relu
template <typename S>
Tensor<S> conv_gn_relu(const Tensor<S>& x, const ConvUnitT<S>& u, bool normalize) {
  i64 pad = (u.kernel.dim(2) - 1) / 2;
  Tensor<S> y = conv3d(x, u.kernel, u.bias, Stride3(1), Pad3(pad));
  if (normalize) y = group_norm(y, norm_groups(y.dim(1)), u.gamma, u.beta);
  return relu(y);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder block: two conv->GN->ReLU sub-layers, then 2x2x2 maxpool.
// `features` feeds the skip connection, `pooled` the next level down.

template <typename S>
struct EncoderParamsT {
  ConvUnitT<S> conv1, conv2;
  bool normalize = true;  // test hook: false bypasses group norm
};

template <typename S>
EncoderParamsT<S> make_encoder_params(BlockParamsT<S>& reg, const std::string& prefix, i64 in_c,
                                      i64 out_c, Rng& rng) {
  EncoderParamsT<S> p;
  p.conv1 = make_conv_unit(reg, prefix + ".conv1", in_c, out_c, 3, rng);
  p.conv2 = make_conv_unit(reg, prefix + ".conv2", out_c, out_c, 3, rng);
  return p;
}

template <typename S>
struct EncoderOutT {
  Tensor<S> features, pooled;
};

template <typename S>
EncoderOutT<S> encoder_block(const Tensor<S>& input, const EncoderParamsT<S>& p) {
  Tensor<S> h = detail::conv_gn_relu(input, p.conv1, p.normalize);
  Tensor<S> features = detail::conv_gn_relu(h, p.conv2, p.normalize);
  return {features, maxpool3d(features)};
}

// ---------------------------------------------------------------------------
// Residual block: ReLU(F(x) + proj(x)) with F = conv->GN->ReLU->conv->GN and
// a 1x1x1 projection shortcut only when channel counts differ.

template <typename S>
struct ResidualParamsT {
  ConvUnitT<S> conv1, conv2;
  Tensor<S> proj;  // undefined when in/out channels match
  bool normalize = true;
};

template <typename S>
ResidualParamsT<S> make_residual_params(BlockParamsT<S>& reg, const std::string& prefix, i64 in_c,
                                        i64 out_c, Rng& rng) {
  ResidualParamsT<S> p;
  p.conv1 = make_conv_unit(reg, prefix + ".conv1", in_c, out_c, 3, rng);
  p.conv2 = make_conv_unit(reg, prefix + ".conv2", out_c, out_c, 3, rng);
  if (in_c != out_c) {
    p.proj = reg.add(prefix + ".proj.kernel", he_uniform<S>({out_c, in_c, 1, 1, 1}, in_c, rng));
  }
  return p;
}

template <typename S>
Tensor<S> residual_block(const Tensor<S>& input, const ResidualParamsT<S>& p) {
  Tensor<S> h = detail::conv_gn_relu(input, p.conv1, p.normalize);
  i64 pad = (p.conv2.kernel.dim(2) - 1) / 2;
  Tensor<S> f = conv3d(h, p.conv2.kernel, p.conv2.bias, Stride3(1), Pad3(pad));
  if (p.normalize) f = group_norm(f, norm_groups(f.dim(1)), p.conv2.gamma, p.conv2.beta);
  Tensor<S> shortcut = p.proj.defined() ? conv3d(input, p.proj) : input;
  return relu(add(f, shortcut));
}

// ---------------------------------------------------------------------------
// CBAM: channel attention (shared bottleneck over average- and max-pooled
// descriptors) followed by spatial attention (7x7x7 convolution over the
// channel-wise mean/max maps).

template <typename S>
struct CbamParamsT {
  Tensor<S> mlp1_kernel, mlp1_bias;  // [C/r, C, 1,1,1]
  Tensor<S> mlp2_kernel, mlp2_bias;  // [C, C/r, 1,1,1]
  Tensor<S> spatial_kernel, spatial_bias;  // [1, 2, 7,7,7]
  int site = -1;
};

template <typename S>
CbamParamsT<S> make_cbam_params(BlockParamsT<S>& reg, const std::string& prefix, i64 channels,
                                Rng& rng, int site = -1) {
  require(channels >= 2, "cbam needs at least 2 channels, got " + std::to_string(channels));
  const i64 ratio = 8;
  if (channels < ratio) {
    emit_warning(prefix + ": cbam reduction ratio clamped from " + std::to_string(ratio) +
                 " to " + std::to_string(channels) + " (channel count below ratio)");
  }
  i64 mid = std::max<i64>(1, channels / std::min<i64>(ratio, channels));
  CbamParamsT<S> p;
  p.site = site;
  // One-sided init: pooled descriptors of post-ReLU features are non-negative,
  // so non-negative first-layer weights keep the bottleneck ReLU active from
  // the first step (its hidden width can be as small as 1, where a dead unit
  // would silence the whole channel-attention path).
  double mlp1_bound = std::sqrt(6.0 / static_cast<double>(channels));
  p.mlp1_kernel =
      reg.add(prefix + ".mlp1.kernel", Tensor<S>::uniform({mid, channels, 1, 1, 1}, rng, 0.0, mlp1_bound));
  p.mlp1_bias = reg.add(prefix + ".mlp1.bias", Tensor<S>::zeros({mid}));
  p.mlp2_kernel = reg.add(prefix + ".mlp2.kernel", he_uniform<S>({channels, mid, 1, 1, 1}, mid, rng));
  p.mlp2_bias = reg.add(prefix + ".mlp2.bias", Tensor<S>::zeros({channels}));
  p.spatial_kernel = reg.add(prefix + ".spatial.kernel", he_uniform<S>({1, 2, 7, 7, 7}, 2 * 343, rng));
  p.spatial_bias = reg.add(prefix + ".spatial.bias", Tensor<S>::zeros({1}));
  return p;
}

template <typename S>
struct CbamOutT {
  Tensor<S> refined;
  AttentionRecordT<S> channel, spatial;
};

template <typename S>
CbamOutT<S> cbam(const Tensor<S>& features, const CbamParamsT<S>& p) {
  detail::check_5d(features, "cbam");
  require(features.dim(1) >= 2, "cbam needs at least 2 channels, got " +
                                    std::to_string(features.dim(1)));

  auto bottleneck = [&](const Tensor<S>& desc) {
    Tensor<S> h = relu(conv3d(desc, p.mlp1_kernel, p.mlp1_bias));
    return conv3d(h, p.mlp2_kernel, p.mlp2_bias);
  };
  Tensor<S> channel_logits =
      add(bottleneck(global_avg_pool(features)), bottleneck(global_max_pool(features)));
  Tensor<S> channel_w = sigmoid(channel_logits);  // [N,C,1,1,1]
  Tensor<S> refined_c = mul(features, channel_w);

  Tensor<S> maps = concat(channel_mean(refined_c), channel_max(refined_c), 1);  // [N,2,D,H,W]
  Tensor<S> spatial_w =
      sigmoid(conv3d(maps, p.spatial_kernel, p.spatial_bias, Stride3(1), Pad3(3)));
  Tensor<S> refined = mul(refined_c, spatial_w);

  CbamOutT<S> out{refined,
                  {p.site, channel_w, AttentionKind::cbam_channel},
                  {p.site, spatial_w, AttentionKind::cbam_spatial}};
  return out;
}

// ---------------------------------------------------------------------------
// Additive attention gate on a skip connection. The coarser gating signal is
// projected 1x1x1, resized to the skip grid, and combined additively:
//   alpha = sigmoid(psi(ReLU(Wx*skip + Wg*gating))),  gated = alpha ⊙ skip.

template <typename S>
struct GateParamsT {
  Tensor<S> wx_kernel;             // [F_int, C_skip, 1,1,1], no bias
  Tensor<S> wg_kernel, wg_bias;    // [F_int, C_gate, 1,1,1]
  Tensor<S> psi_kernel, psi_bias;  // [1, F_int, 1,1,1]
  int site = -1;
};

template <typename S>
GateParamsT<S> make_gate_params(BlockParamsT<S>& reg, const std::string& prefix, i64 skip_c,
                                i64 gate_c, Rng& rng, int site = -1) {
  i64 inter = std::max<i64>(1, skip_c / 2);
  GateParamsT<S> p;
  p.site = site;
  p.wx_kernel = reg.add(prefix + ".wx.kernel", he_uniform<S>({inter, skip_c, 1, 1, 1}, skip_c, rng));
  p.wg_kernel = reg.add(prefix + ".wg.kernel", he_uniform<S>({inter, gate_c, 1, 1, 1}, gate_c, rng));
  p.wg_bias = reg.add(prefix + ".wg.bias", Tensor<S>::zeros({inter}));
  p.psi_kernel = reg.add(prefix + ".psi.kernel", he_uniform<S>({1, inter, 1, 1, 1}, inter, rng));
  p.psi_bias = reg.add(prefix + ".psi.bias", Tensor<S>::zeros({1}));
  return p;
}

template <typename S>
struct GateOutT {
  Tensor<S> gated;
  AttentionRecordT<S> record;
};

template <typename S>
GateOutT<S> attention_gate(const Tensor<S>& skip, const Tensor<S>& gating,
                           const GateParamsT<S>& p) {
  detail::check_5d(skip, "attention_gate");
  detail::check_5d(gating, "attention_gate");
  Tensor<S> x_proj = conv3d(skip, p.wx_kernel);
  Tensor<S> g_proj = conv3d(gating, p.wg_kernel, p.wg_bias);
  g_proj = trilinear_resize(g_proj, skip.dim(2), skip.dim(3), skip.dim(4));
  Tensor<S> alpha = sigmoid(conv3d(relu(add(x_proj, g_proj)), p.psi_kernel, p.psi_bias));
  GateOutT<S> out{mul(skip, alpha), {p.site, alpha, AttentionKind::gate}};
  return out;
}

// ---------------------------------------------------------------------------
// Decoder block: 2x2x2 stride-2 transposed convolution, optional attention
// path on the skip (CBAM first, then the gate), concatenation, and two
// conv->GN->ReLU sub-layers.

template <typename S>
struct AttentionPathT {
  CbamParamsT<S> cbam;
  GateParamsT<S> gate;
};

template <typename S>
struct DecoderParamsT {
  Tensor<S> up_kernel;  // [C_in, C_out, 2,2,2]
  ConvUnitT<S> conv1, conv2;
  std::optional<AttentionPathT<S>> attention;
  bool normalize = true;
};

template <typename S>
DecoderParamsT<S> make_decoder_params(BlockParamsT<S>& reg, const std::string& prefix, i64 in_c,
                                      i64 skip_c, i64 out_c, Rng& rng, bool attention = false,
                                      int site = -1) {
  DecoderParamsT<S> p;
  p.up_kernel = reg.add(prefix + ".up.kernel", he_uniform<S>({in_c, out_c, 2, 2, 2}, in_c * 8, rng));
  if (attention) {
    AttentionPathT<S> path;
    path.cbam = make_cbam_params(reg, prefix + ".cbam", skip_c, rng, site);
    path.gate = make_gate_params(reg, prefix + ".gate", skip_c, in_c, rng, site);
    p.attention = std::move(path);
  }
  p.conv1 = make_conv_unit(reg, prefix + ".conv1", out_c + skip_c, out_c, 3, rng);
  p.conv2 = make_conv_unit(reg, prefix + ".conv2", out_c, out_c, 3, rng);
  return p;
}

template <typename S>
struct DecoderOutT {
  Tensor<S> output;
  std::vector<AttentionRecordT<S>> records;  // cbam-channel, cbam-spatial, gate
  Tensor<S> refined_skip;  // gate input after cbam; defined only on attention paths
};

template <typename S>
DecoderOutT<S> decoder_block(const Tensor<S>& upstream, const Tensor<S>& skip_features,
                             const DecoderParamsT<S>& p) {
  Tensor<S> up = conv_transpose3d(upstream, p.up_kernel, Stride3(2));
  DecoderOutT<S> out;
  Tensor<S> skip = skip_features;
  if (p.attention) {
    CbamOutT<S> c = cbam(skip, p.attention->cbam);
    GateOutT<S> g = attention_gate(c.refined, upstream, p.attention->gate);
    skip = g.gated;
    out.records = {c.channel, c.spatial, g.record};
    out.refined_skip = c.refined;
  }
  Tensor<S> h = detail::conv_gn_relu(concat(up, skip, 1), p.conv1, p.normalize);
  out.output = detail::conv_gn_relu(h, p.conv2, p.normalize);
  return out;
}

}  // namespace vsx
