#pragma once

// Explanation tooling: class-activation maps from the final convolution's
// input features, attention-gate weight extraction, and heatmap export as
// volumes plus PGM slices rendered through a fixed warm-cool ramp.

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "vsx/data.hpp"
#include "vsx/losses.hpp"
#include "vsx/models.hpp"

namespace vsx {

enum class HeatmapSource { gradcam, attention };

struct Heatmap {
  TensorF grid;              // [D, H, W], values in [0, 1]
  TensorF raw;               // [D, H, W] before display normalization
  std::string target_class;  // "WT" | "TC" | "ET"; "all" for attention maps
  HeatmapSource source = HeatmapSource::gradcam;
};

/// Min-max rescale of a 3D map to [0,1]. A constant map (including all-zero)
/// comes back as zeros, so normalizing twice equals normalizing once.
inline TensorF minmax_normalize(const TensorF& raw) {
  require_shape(raw.shape().size() == 3,
                "minmax_normalize: expected [depth, height, width], got " +
                    shape_str(raw.shape()));
  const auto& v = raw.vals();
  double lo = v.empty() ? 0.0 : static_cast<double>(v[0]);
  double hi = lo;
  for (float x : v) {
    lo = std::min(lo, static_cast<double>(x));
    hi = std::max(hi, static_cast<double>(x));
  }
  std::vector<float> out(v.size(), 0.0f);
  if (hi > lo) {
    double span = hi - lo;
    for (size_t i = 0; i < v.size(); ++i) {
      out[i] = static_cast<float>((static_cast<double>(v[i]) - lo) / span);
    }
  }
  return TensorF::from_data(raw.shape(), std::move(out));
}

/// Core of the class-activation map: per-map weights are the spatial mean of
/// the gradient, the map is the ReLU of the weighted activation sum.
/// `activations` and `gradients` are [K, d, h, w] flat buffers.
inline TensorF weighted_activation_map(const std::vector<float>& activations,
                                       const std::vector<float>& gradients, i64 k, i64 d,
                                       i64 h, i64 w) {
  i64 vox = d * h * w;
  require(k >= 1 && vox >= 1, "weighted_activation_map: degenerate dimensions");
  require(static_cast<i64>(activations.size()) == k * vox &&
              activations.size() == gradients.size(),
          "weighted_activation_map: buffer sizes do not match the dimensions");
  std::vector<double> acc(static_cast<size_t>(vox), 0.0);
  for (i64 map = 0; map < k; ++map) {
    const float* g = gradients.data() + map * vox;
    const float* a = activations.data() + map * vox;
    double alpha = 0.0;
    for (i64 i = 0; i < vox; ++i) alpha += static_cast<double>(g[i]);
    alpha /= static_cast<double>(vox);
    for (i64 i = 0; i < vox; ++i) acc[static_cast<size_t>(i)] += alpha * a[i];
  }
  std::vector<float> out(static_cast<size_t>(vox));
  for (i64 i = 0; i < vox; ++i) {
    out[static_cast<size_t>(i)] =
        acc[static_cast<size_t>(i)] > 0.0 ? static_cast<float>(acc[static_cast<size_t>(i)])
                                          : 0.0f;
  }
  return TensorF::from_data({d, h, w}, std::move(out));
}

/// Numerically stable softmax over a score list; the weights sum to one.
inline std::vector<double> softmax_weights(const std::vector<double>& scores) {
  require(!scores.empty(), "softmax_weights: empty score list");
  double peak = scores[0];
  for (double s : scores) peak = std::max(peak, s);
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - peak);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

namespace detail {

inline TensorF resize_to(const TensorF& small, i64 d, i64 h, i64 w) {
  const Shape& s = small.shape();  // [1, 1, ds, hs, ws] expected
  if (s[2] == d && s[3] == h && s[4] == w) {
    return TensorF::from_data({d, h, w}, small.vals());
  }
  TensorF up = trilinear_resize(small, d, h, w);
  return TensorF::from_data({d, h, w}, up.vals());
}

}  // namespace detail

/// Class-activation heatmap for one class of a single [C, D, H, W] volume.
/// Runs a fresh forward, differentiates the summed pre-sigmoid logits of the
/// class channel, weights the hooked feature maps by their mean gradients and
/// resizes the rectified sum to the input dims. `raw` keeps the unscaled map;
/// `grid` is min-max normalized for display.
inline Heatmap grad_cam(ModelGraphT<float>& model, const TensorF& volume, int class_index) {
  require_shape(volume.shape().size() == 4,
                "grad_cam: expected a [channels, depth, height, width] volume, got " +
                    shape_str(volume.shape()));
  if (class_index < 0 || class_index >= kMaskChannels) {
    throw ArgumentError("grad_cam: class index " + std::to_string(class_index) +
                        " out of range [0, " + std::to_string(kMaskChannels) + ")");
  }
  const Shape& s = volume.shape();
  TensorF batch = TensorF::from_data({1, s[0], s[1], s[2], s[3]}, volume.vals());

  auto out = forward(model, batch);
  if (!out.hooks.count("final_conv")) {
    throw StateError("grad_cam: forward produced no 'final_conv' hook");
  }
  TensorF hooked = out.hooks.at("final_conv");
  sum(narrow(out.logits, 1, class_index, 1)).backward();
  if (!hooked.has_grad()) {
    throw StateError("grad_cam: hook gradient not captured; autograd must be enabled");
  }

  const Shape& hs = hooked.shape();  // [1, K, d', h', w']
  TensorF small = weighted_activation_map(hooked.vals(), hooked.grad(), hs[1], hs[2],
                                          hs[3], hs[4]);
  TensorF raw = detail::resize_to(
      TensorF::from_data({1, 1, hs[2], hs[3], hs[4]}, small.vals()), s[1], s[2], s[3]);

  // leave the graph clean for whoever owns the parameters next
  for (const auto& kv : model.params.items()) {
    Tensor<float> p = kv.second;
    p.zero_grad();
  }

  Heatmap h;
  h.raw = raw;
  h.grid = minmax_normalize(raw);
  h.target_class = tumor_class_names()[static_cast<size_t>(class_index)];
  h.source = HeatmapSource::gradcam;
  return h;
}

enum class AttentionMode { gate, softmax };

/// Attention heatmap from the topmost skip gate of an attention model. The
/// default mode emits the gate's sigmoid weights directly; the softmax mode
/// scores each voxel's projected feature vector against a query pooled from
/// the projected gating signal and normalizes the scores to sum to one.
inline Heatmap attention_map(const ModelGraphT<float>& model, const TensorF& volume,
                             AttentionMode mode = AttentionMode::gate) {
  if (model.kind != ModelKind::attunet) {
    throw ArgumentError(std::string("attention_map: model kind '") +
                        model_kind_name(model.kind) + "' has no attention gates");
  }
  require_shape(volume.shape().size() == 4,
                "attention_map: expected a [channels, depth, height, width] volume, got " +
                    shape_str(volume.shape()));
  const Shape& s = volume.shape();
  TensorF batch = TensorF::from_data({1, s[0], s[1], s[2], s[3]}, volume.vals());

  NoGradGuard off;
  auto out = forward(model, batch);

  Heatmap h;
  h.target_class = "all";
  h.source = HeatmapSource::attention;
  if (mode == AttentionMode::gate) {
    const TensorF* gate = nullptr;
    for (const auto& r : out.attention) {
      if (r.kind == AttentionKind::gate && r.site == 0) gate = &r.weights;
    }
    if (!gate) throw StateError("attention_map: forward produced no topmost gate record");
    h.raw = detail::resize_to(*gate, s[1], s[2], s[3]);
    h.grid = h.raw;  // sigmoid output already lies in [0, 1]
    return h;
  }

  // softmax mode: scores are dot products between projected skip features and
  // a query pooled from the projected gating signal
  TensorF features = out.hooks.at("skip_top.features");  // [1, C, D, H, W]
  TensorF gating = out.hooks.at("skip_top.gating");      // [1, 2C, D/2, H/2, W/2]
  const GateParamsT<float>& gp = model.dec[0].attention->gate;
  TensorF x_proj = conv3d(features, gp.wx_kernel);
  TensorF g_proj = conv3d(gating, gp.wg_kernel, gp.wg_bias);

  const Shape& gs = g_proj.shape();
  i64 f_int = gs[1], g_vox = gs[2] * gs[3] * gs[4];
  std::vector<double> query(static_cast<size_t>(f_int), 0.0);
  for (i64 f = 0; f < f_int; ++f) {
    double acc = 0.0;
    for (i64 v = 0; v < g_vox; ++v) {
      acc += static_cast<double>(g_proj.vals()[static_cast<size_t>(f * g_vox + v)]);
    }
    query[static_cast<size_t>(f)] = acc / static_cast<double>(g_vox);
  }

  i64 vox = s[1] * s[2] * s[3];
  std::vector<double> scores(static_cast<size_t>(vox), 0.0);
  for (i64 f = 0; f < f_int; ++f) {
    double q = query[static_cast<size_t>(f)];
    const float* row = x_proj.vals().data() + f * vox;
    for (i64 v = 0; v < vox; ++v) scores[static_cast<size_t>(v)] += q * row[v];
  }
  std::vector<double> weights = softmax_weights(scores);
  std::vector<float> grid(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) grid[i] = static_cast<float>(weights[i]);
  h.raw = TensorF::from_data({s[1], s[2], s[3]}, grid);
  h.grid = h.raw;
  return h;
}

// ---------------------------------------------------------------------------
// export

/// 256-entry display ramp: luma of a cool-to-warm diverging colormap, dark
/// blue through near-white to warm red, so bright PGM pixels mean "cool" ends
/// and the warm extreme reads dark against it.
inline const std::array<uint8_t, 256>& heatmap_colormap() {
  static const std::array<uint8_t, 256> lut = [] {
    std::array<uint8_t, 256> t{};
    for (int i = 0; i < 256; ++i) {
      double s = static_cast<double>(i) / 255.0;
      double r, g, b;
      if (s < 0.5) {
        double u = s / 0.5;  // cool (59,76,192) toward white (221,221,221)
        r = 59.0 + (221.0 - 59.0) * u;
        g = 76.0 + (221.0 - 76.0) * u;
        b = 192.0 + (221.0 - 192.0) * u;
      } else {
        double u = (s - 0.5) / 0.5;  // white toward warm (180,4,38)
        r = 221.0 + (180.0 - 221.0) * u;
        g = 221.0 + (4.0 - 221.0) * u;
        b = 221.0 + (38.0 - 221.0) * u;
      }
      t[static_cast<size_t>(i)] =
          static_cast<uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
    }
    return t;
  }();
  return lut;
}

/// Writes one slice of the heatmap as a binary PGM, pixels looked up through
/// the fixed ramp. Axis 0 slices along depth, 1 along height, 2 along width.
inline void write_heatmap_slice(const Heatmap& h, int axis, i64 index,
                                const std::string& path) {
  require(axis >= 0 && axis <= 2, "write_heatmap_slice: axis must be 0, 1 or 2");
  const Shape& s = h.grid.shape();
  require(index >= 0 && index < s[static_cast<size_t>(axis)],
          "write_heatmap_slice: slice index out of range");
  i64 rows = axis == 0 ? s[1] : s[0];
  i64 cols = axis == 2 ? s[1] : s[2];
  const auto& lut = heatmap_colormap();
  io::atomic_write_file(path, [&](std::ostream& os) {
    os << "P5\n" << cols << " " << rows << "\n255\n";
    for (i64 r = 0; r < rows; ++r) {
      for (i64 c = 0; c < cols; ++c) {
        i64 d = axis == 0 ? index : r;
        i64 hh = axis == 0 ? r : (axis == 1 ? index : c);
        i64 w = axis == 2 ? index : c;
        float v = h.grid.vals()[static_cast<size_t>((d * s[1] + hh) * s[2] + w)];
        v = std::min(1.0f, std::max(0.0f, v));
        os.put(static_cast<char>(lut[static_cast<size_t>(std::lround(v * 255.0f))]));
      }
    }
  });
}

/// Writes the normalized grid as a single-channel volume; with slice_axis in
/// {0,1,2} also writes every slice along that axis as "<stem>_sNNNN.pgm".
/// Returns the paths written, volume first.
inline std::vector<std::string> export_heatmap(const Heatmap& h, const std::string& path,
                                               int slice_axis = -1) {
  require_shape(h.grid.shape().size() == 3,
                "export_heatmap: heatmap grid must be [depth, height, width]");
  const Shape& s = h.grid.shape();
  std::vector<std::string> written;
  write_volume(path, TensorF::from_data({1, s[0], s[1], s[2]}, h.grid.vals()));
  written.push_back(path);
  if (slice_axis >= 0) {
    require(slice_axis <= 2, "export_heatmap: slice axis must be 0, 1 or 2");
    std::string stem = path;
    if (stem.size() > 5 && stem.substr(stem.size() - 5) == ".vsxv") {
      stem = stem.substr(0, stem.size() - 5);
    }
    for (i64 i = 0; i < s[static_cast<size_t>(slice_axis)]; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "_s%04lld.pgm", static_cast<long long>(i));
      write_heatmap_slice(h, slice_axis, i, stem + name);
      written.push_back(stem + name);
    }
  }
  return written;
}

}  // namespace vsx
