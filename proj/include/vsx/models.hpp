#pragma once

// The three full segmentation architectures: a four-level encoder, a bridge,
// four decoder levels and a 3-channel sigmoid head.
//   unet    — plain double-conv blocks
//   resunet — residual blocks with projection shortcuts
//   attunet — unet blocks plus CBAM + additive attention gates on every skip
//
// forward() returns a Prediction carrying probabilities, pre-sigmoid logits,
// named activation hooks ("final_conv", and "skip_top.attention" on attunet)
// and the attention records, so explanation code can replay gradients
// through the captured graph.

#include <algorithm>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vsx/blocks.hpp"
#include "vsx/serialize.hpp"

namespace vsx {

enum class ModelKind { unet, resunet, attunet };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::unet:
      return "unet";
    case ModelKind::resunet:
      return "resunet";
    default:
      return "attunet";
  }
}

inline ModelKind parse_model_kind(const std::string& name) {
  if (name == "unet") return ModelKind::unet;
  if (name == "resunet") return ModelKind::resunet;
  if (name == "attunet") return ModelKind::attunet;
  throw ArgumentError("unknown model kind '" + name + "' (expected unet|resunet|attunet)");
}

constexpr int kModelLevels = 4;
constexpr i64 kMaskChannels = 3;  // WT, TC, ET

// ---------------------------------------------------------------------------
// Model graph

template <typename S>
struct ModelGraphT {
  ModelKind kind = ModelKind::unet;
  i64 in_channels = 4;
  i64 base_width = 8;
  std::vector<i64> widths;  // four encoder widths then the bridge width

  BlockParamsT<S> params;

  // unet / attunet blocks
  std::vector<EncoderParamsT<S>> enc;
  ConvUnitT<S> bridge1, bridge2;
  std::vector<DecoderParamsT<S>> dec;  // index = skip level, 0 = top

  // resunet blocks
  std::vector<ResidualParamsT<S>> enc_res;
  ResidualParamsT<S> bridge_res;
  std::vector<Tensor<S>> dec_up;  // transposed-conv kernels per level
  std::vector<ResidualParamsT<S>> dec_res;

  Tensor<S> head_kernel, head_bias;  // 1x1x1 conv to 3 channels
};

using ModelGraph = ModelGraphT<float>;

template <typename S>
ModelGraphT<S> build(ModelKind kind, i64 in_channels, i64 base_width, u64 seed) {
  require(in_channels >= 1, "build: in_channels must be positive");
  require(base_width >= 4, "build: base_width must be at least 4, got " +
                               std::to_string(base_width));
  Rng rng(seed);
  ModelGraphT<S> m;
  m.kind = kind;
  m.in_channels = in_channels;
  m.base_width = base_width;
  const i64 w = base_width;
  m.widths = {w, 2 * w, 4 * w, 8 * w, 16 * w};

  auto& reg = m.params;
  bool residual = kind == ModelKind::resunet;
  bool attention = kind == ModelKind::attunet;

  for (int i = 0; i < kModelLevels; ++i) {
    i64 in_c = i == 0 ? in_channels : m.widths[static_cast<size_t>(i - 1)];
    i64 out_c = m.widths[static_cast<size_t>(i)];
    std::string prefix = "enc" + std::to_string(i);
    if (residual) {
      m.enc_res.push_back(make_residual_params(reg, prefix, in_c, out_c, rng));
    } else {
      m.enc.push_back(make_encoder_params(reg, prefix, in_c, out_c, rng));
    }
  }

  i64 deep = m.widths[3], bridge_w = m.widths[4];
  if (residual) {
    m.bridge_res = make_residual_params(reg, "bridge", deep, bridge_w, rng);
  } else {
    m.bridge1 = make_conv_unit(reg, "bridge.conv1", deep, bridge_w, 3, rng);
    m.bridge2 = make_conv_unit(reg, "bridge.conv2", bridge_w, bridge_w, 3, rng);
  }

  // deepest decoder first, mirroring the forward pass
  if (residual) {
    m.dec_up.resize(kModelLevels);
    m.dec_res.resize(kModelLevels);
  } else {
    m.dec.resize(kModelLevels);
  }
  for (int i = kModelLevels - 1; i >= 0; --i) {
    i64 skip_c = m.widths[static_cast<size_t>(i)];
    i64 in_c = m.widths[static_cast<size_t>(i + 1)];
    std::string prefix = "dec" + std::to_string(i);
    if (residual) {
      m.dec_up[static_cast<size_t>(i)] = reg.add(
          prefix + ".up.kernel", he_uniform<S>({in_c, skip_c, 2, 2, 2}, in_c * 8, rng));
      m.dec_res[static_cast<size_t>(i)] =
          make_residual_params(reg, prefix + ".res", 2 * skip_c, skip_c, rng);
    } else {
      m.dec[static_cast<size_t>(i)] =
          make_decoder_params(reg, prefix, in_c, skip_c, skip_c, rng, attention, i);
    }
  }

  m.head_kernel = reg.add("head.kernel", he_uniform<S>({kMaskChannels, w, 1, 1, 1}, w, rng));
  m.head_bias = reg.add("head.bias", Tensor<S>::zeros({kMaskChannels}));
  return m;
}

template <typename S = float>
ModelGraphT<S> build(const std::string& kind, i64 in_channels, i64 base_width, u64 seed) {
  return build<S>(parse_model_kind(kind), in_channels, base_width, seed);
}

// ---------------------------------------------------------------------------
// Forward / predict

template <typename S>
struct PredictionT {
  Tensor<S> probabilities;  // [N,3,D,H,W], strictly inside (0,1)
  Tensor<S> logits;         // same shape, pre-sigmoid
  Tensor<S> binary_mask;    // defined by predict(); values in {0,1}
  std::unordered_map<std::string, Tensor<S>> hooks;
  std::vector<AttentionRecordT<S>> attention;
};

using Prediction = PredictionT<float>;

namespace detail {

inline void check_pool_divisible(const Shape& s) {
  const char* axis_name[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    i64 extent = s[static_cast<size_t>(2 + a)];
    if (extent % 16 != 0) {
      throw ArgumentError(std::string("forward: ") + axis_name[a] + " " +
                          std::to_string(extent) + " is not divisible by 16");
    }
  }
}

}  // namespace detail

template <typename S>
PredictionT<S> forward(const ModelGraphT<S>& m, const Tensor<S>& batch) {
  detail::check_5d(batch, "forward");
  require_shape(batch.dim(1) == m.in_channels,
                "forward: batch has " + std::to_string(batch.dim(1)) + " channels, model expects " +
                    std::to_string(m.in_channels));
  detail::check_pool_divisible(batch.shape());

  PredictionT<S> out;
  bool residual = m.kind == ModelKind::resunet;

  std::vector<Tensor<S>> skips;
  skips.reserve(kModelLevels);
  Tensor<S> x = batch;
  for (int i = 0; i < kModelLevels; ++i) {
    if (residual) {
      Tensor<S> f = residual_block(x, m.enc_res[static_cast<size_t>(i)]);
      skips.push_back(f);
      x = maxpool3d(f);
    } else {
      EncoderOutT<S> e = encoder_block(x, m.enc[static_cast<size_t>(i)]);
      skips.push_back(e.features);
      x = e.pooled;
    }
  }

  if (residual) {
    x = residual_block(x, m.bridge_res);
  } else {
    x = detail::conv_gn_relu(x, m.bridge1, true);
    x = detail::conv_gn_relu(x, m.bridge2, true);
  }

  for (int i = kModelLevels - 1; i >= 0; --i) {
    if (residual) {
      Tensor<S> up = conv_transpose3d(x, m.dec_up[static_cast<size_t>(i)], Stride3(2));
      x = residual_block(concat(up, skips[static_cast<size_t>(i)], 1),
                         m.dec_res[static_cast<size_t>(i)]);
    } else {
      DecoderOutT<S> d = decoder_block(x, skips[static_cast<size_t>(i)],
                                       m.dec[static_cast<size_t>(i)]);
      if (i == 0 && m.kind == ModelKind::attunet) {
        // inputs of the topmost gate, kept for attention analysis
        out.hooks["skip_top.features"] = d.refined_skip;
        out.hooks["skip_top.gating"] = x;
      }
      x = d.output;
      for (auto& r : d.records) out.attention.push_back(r);
    }
  }

  out.hooks["final_conv"] = x;
  out.logits = conv3d(x, m.head_kernel, m.head_bias);
  out.probabilities = sigmoid(out.logits);
  if (m.kind == ModelKind::attunet) {
    for (const auto& r : out.attention) {
      if (r.kind == AttentionKind::gate && r.site == 0) {
        out.hooks["skip_top.attention"] = r.weights;
      }
    }
  }
  return out;
}

// Per-channel strict-greater thresholding; ties at the threshold map to
// background. Channels are independent nested classes, so no argmax. The
// optional postprocess restores WT ⊇ TC ⊇ ET by intersection.
template <typename S>
PredictionT<S> predict(const ModelGraphT<S>& m, const Tensor<S>& batch, double threshold = 0.5,
                       bool nested_postprocess = false) {
  require(threshold > 0.0 && threshold < 1.0,
          "predict: threshold must lie strictly inside (0,1)");
  NoGradGuard inference;
  PredictionT<S> out = forward(m, batch);
  const auto& p = out.probabilities.vals();
  std::vector<S> mask(p.size());
  for (size_t i = 0; i < p.size(); ++i) mask[i] = p[i] > static_cast<S>(threshold) ? S(1) : S(0);

  if (nested_postprocess) {
    const Shape& s = out.probabilities.shape();
    i64 vox = s[2] * s[3] * s[4];
    for (i64 n = 0; n < s[0]; ++n) {
      i64 wt = (n * kMaskChannels + 0) * vox;
      i64 tc = (n * kMaskChannels + 1) * vox;
      i64 et = (n * kMaskChannels + 2) * vox;
      for (i64 v = 0; v < vox; ++v) {
        auto iw = static_cast<size_t>(wt + v);
        auto it = static_cast<size_t>(tc + v);
        auto ie = static_cast<size_t>(et + v);
        mask[it] = mask[it] * mask[iw];  // TC ⊆ WT
        mask[ie] = mask[ie] * mask[it];  // ET ⊆ TC
      }
    }
  }
  out.binary_mask = Tensor<S>::from_data(out.probabilities.shape(), std::move(mask));
  return out;
}

// ---------------------------------------------------------------------------
// Degenerate-attention configuration: every CBAM and gate weight saturates to
// exactly 1, making the attention paths transparent. With shared non-attention
// parameters the model then matches a plain unet.

template <typename S>
void saturate_attention(ModelGraphT<S>& m) {
  require(m.kind == ModelKind::attunet, "saturate_attention: model has no attention blocks");
  const S open = S(100);  // sigmoid(100) rounds to exactly 1
  for (auto& d : m.dec) {
    if (!d.attention) continue;
    auto& a = *d.attention;
    std::fill(a.cbam.mlp1_kernel.vals().begin(), a.cbam.mlp1_kernel.vals().end(), S(0));
    std::fill(a.cbam.mlp1_bias.vals().begin(), a.cbam.mlp1_bias.vals().end(), S(0));
    std::fill(a.cbam.mlp2_kernel.vals().begin(), a.cbam.mlp2_kernel.vals().end(), S(0));
    std::fill(a.cbam.mlp2_bias.vals().begin(), a.cbam.mlp2_bias.vals().end(), open);
    std::fill(a.cbam.spatial_kernel.vals().begin(), a.cbam.spatial_kernel.vals().end(), S(0));
    std::fill(a.cbam.spatial_bias.vals().begin(), a.cbam.spatial_bias.vals().end(), open);
    std::fill(a.gate.psi_kernel.vals().begin(), a.gate.psi_kernel.vals().end(), S(0));
    std::fill(a.gate.psi_bias.vals().begin(), a.gate.psi_bias.vals().end(), open);
  }
}

// Copies every parameter whose path and shape exist in both models.
// Returns the number of tensors copied.
template <typename S>
int copy_shared_parameters(ModelGraphT<S>& dst, const ModelGraphT<S>& src) {
  int copied = 0;
  for (const auto& kv : src.params.items()) {
    if (!dst.params.has(kv.first)) continue;
    Tensor<S> d = dst.params.get(kv.first);
    if (d.shape() != kv.second.shape()) continue;
    d.vals() = kv.second.vals();
    copied++;
  }
  return copied;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "VSXC", version u16, kind tag, architecture
// descriptor, then (path, shape, raw little-endian f32) records. Bit-exact
// round-trip.

namespace detail {

constexpr uint16_t kCheckpointVersion = 1;

}  // namespace detail

inline void save_checkpoint(const ModelGraph& m, const std::string& path) {
  io::atomic_write_file(path, [&](std::ostream& os) {
    io::write_exact(os, "VSXC", 4);
    io::write_scalar<uint16_t>(os, detail::kCheckpointVersion);
    io::write_scalar<uint8_t>(os, static_cast<uint8_t>(m.kind));
    io::write_scalar<uint16_t>(os, static_cast<uint16_t>(m.in_channels));
    io::write_scalar<uint16_t>(os, static_cast<uint16_t>(m.base_width));
    io::write_scalar<uint8_t>(os, static_cast<uint8_t>(m.widths.size()));
    for (i64 w : m.widths) io::write_scalar<uint32_t>(os, static_cast<uint32_t>(w));
    io::write_scalar<uint32_t>(os, static_cast<uint32_t>(m.params.size()));
    for (const auto& kv : m.params.items()) {
      io::write_string(os, kv.first);
      const Shape& s = kv.second.shape();
      io::write_scalar<uint8_t>(os, static_cast<uint8_t>(s.size()));
      for (i64 d : s) io::write_scalar<uint32_t>(os, static_cast<uint32_t>(d));
      io::write_f32_array(os, kv.second.vals().data(), kv.second.vals().size());
    }
  });
}

inline ModelGraph load_checkpoint(const std::string& path) {
  std::ifstream is = io::open_input(path);
  char magic[4];
  io::read_exact(is, magic, 4);
  if (std::string(magic, 4) != "VSXC") {
    throw DataError("'" + path + "' is not a checkpoint file (bad magic)");
  }
  uint16_t version = io::read_scalar<uint16_t>(is);
  if (version != detail::kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  uint8_t kind_tag = io::read_scalar<uint8_t>(is);
  if (kind_tag > 2) throw DataError("corrupt checkpoint: unknown kind tag");
  auto in_channels = static_cast<i64>(io::read_scalar<uint16_t>(is));
  auto base_width = static_cast<i64>(io::read_scalar<uint16_t>(is));
  uint8_t width_count = io::read_scalar<uint8_t>(is);
  std::vector<i64> widths(width_count);
  for (auto& w : widths) w = static_cast<i64>(io::read_scalar<uint32_t>(is));

  ModelGraph m = build<float>(static_cast<ModelKind>(kind_tag), in_channels, base_width, 0);
  if (m.widths != widths) throw DataError("corrupt checkpoint: width table mismatch");

  uint32_t records = io::read_scalar<uint32_t>(is);
  if (records != m.params.size()) {
    throw DataError("corrupt checkpoint: expected " + std::to_string(m.params.size()) +
                    " parameter records, found " + std::to_string(records));
  }
  std::unordered_set<std::string> seen;
  for (uint32_t r = 0; r < records; ++r) {
    std::string p = io::read_string(is);
    if (!seen.insert(p).second) {
      throw DataError("corrupt checkpoint: duplicate parameter '" + p + "'");
    }
    uint8_t nd = io::read_scalar<uint8_t>(is);
    Shape s(nd);
    for (auto& d : s) d = static_cast<i64>(io::read_scalar<uint32_t>(is));
    if (!m.params.has(p)) throw DataError("checkpoint parameter '" + p + "' not in model");
    Tensor<float> t = m.params.get(p);
    if (t.shape() != s) {
      throw DataError("checkpoint parameter '" + p + "' has shape " + shape_str(s) +
                      ", model expects " + shape_str(t.shape()));
    }
    io::read_f32_array(is, t.vals().data(), t.vals().size());
  }
  return m;
}

}  // namespace vsx
