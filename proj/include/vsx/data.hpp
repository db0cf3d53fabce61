#pragma once

// Volume storage, preprocessing and the synthetic phantom generator.
//
// VSXV volume layout (little-endian):
//   bytes 0-3   magic "VSXV"
//   bytes 4-5   u16 version (currently 1)
//   byte  6     u8 dtype tag (0 = float32, the only defined value)
//   byte  7     u8 voxel order tag (0 = channel-major, width fastest)
//   bytes 8-23  u32 depth, height, width, channels
//   payload     channels * depth * height * width float32 values

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vsx/common.hpp"
#include "vsx/serialize.hpp"
#include "vsx/tensor.hpp"

namespace vsx {

// ---------------------------------------------------------------------------
// volume files

inline void write_volume(const std::string& path, const TensorF& volume) {
  require_shape(volume.shape().size() == 4,
                "write_volume: expected a [channels, depth, height, width] tensor, got " +
                    shape_str(volume.shape()));
  const Shape& s = volume.shape();
  io::atomic_write_file(path, [&](std::ostream& os) {
    io::write_exact(os, "VSXV", 4);
    io::write_scalar<uint16_t>(os, 1);
    io::write_scalar<uint8_t>(os, 0);  // float32
    io::write_scalar<uint8_t>(os, 0);  // channel-major
    io::write_scalar<uint32_t>(os, static_cast<uint32_t>(s[1]));
    io::write_scalar<uint32_t>(os, static_cast<uint32_t>(s[2]));
    io::write_scalar<uint32_t>(os, static_cast<uint32_t>(s[3]));
    io::write_scalar<uint32_t>(os, static_cast<uint32_t>(s[0]));
    io::write_f32_array(os, volume.vals().data(), volume.vals().size());
  });
}

inline TensorF read_volume(const std::string& path) {
  std::ifstream is = io::open_input(path);
  char magic[4];
  io::read_exact(is, magic, 4);
  if (std::string(magic, 4) != "VSXV") {
    throw DataError("read_volume: '" + path + "' is not a VSXV volume");
  }
  uint16_t version = io::read_scalar<uint16_t>(is);
  if (version != 1) {
    throw DataError("read_volume: unsupported version " + std::to_string(version));
  }
  uint8_t dtype = io::read_scalar<uint8_t>(is);
  if (dtype != 0) throw DataError("read_volume: unsupported dtype tag");
  uint8_t order = io::read_scalar<uint8_t>(is);
  if (order != 0) throw DataError("read_volume: unsupported voxel order tag");
  i64 d = io::read_scalar<uint32_t>(is);
  i64 h = io::read_scalar<uint32_t>(is);
  i64 w = io::read_scalar<uint32_t>(is);
  i64 c = io::read_scalar<uint32_t>(is);
  if (d <= 0 || h <= 0 || w <= 0 || c <= 0) {
    throw DataError("read_volume: degenerate dimensions in '" + path + "'");
  }
  std::vector<float> payload(static_cast<size_t>(c * d * h * w));
  io::read_f32_array(is, payload.data(), payload.size());
  if (is.peek() != std::char_traits<char>::eof()) {
    throw DataError("read_volume: trailing bytes after payload in '" + path + "'");
  }
  return TensorF::from_data({c, d, h, w}, std::move(payload));
}

// ---------------------------------------------------------------------------
// masks and cases

struct SegmentationMask {
  TensorF channels;  // [3, D, H, W]: whole region, core, enhancing; values {0,1}
};

struct CaseRecord {
  std::string id;
  TensorF image;  // [C, D, H, W]
  SegmentationMask mask;
  std::string split;  // "train", "val", "test" or empty when unassigned
};

/// Expands an annotation grid with labels {0,1,2,4} into the three nested
/// binary channels: whole = {1,2,4}, core = {1,4}, enhancing = {4}.
inline SegmentationMask map_labels(const std::vector<float>& raw, i64 d, i64 h, i64 w) {
  require(d > 0 && h > 0 && w > 0, "map_labels: dimensions must be positive");
  require(static_cast<i64>(raw.size()) == d * h * w,
          "map_labels: grid size does not match the given dimensions");
  i64 vox = d * h * w;
  std::vector<float> out(static_cast<size_t>(3 * vox), 0.0f);
  std::vector<std::string> offenders;
  i64 offender_count = 0;
  for (i64 v = 0; v < vox; ++v) {
    float lab = raw[static_cast<size_t>(v)];
    if (lab != 0.0f && lab != 1.0f && lab != 2.0f && lab != 4.0f) {
      offender_count++;
      if (offenders.size() < 5) {
        i64 dd = v / (h * w), hh = (v / w) % h, ww = v % w;
        std::ostringstream one;
        one << "(" << dd << ", " << hh << ", " << ww << ")=" << lab;
        offenders.push_back(one.str());
      }
      continue;
    }
    if (lab == 0.0f) continue;
    out[static_cast<size_t>(v)] = 1.0f;                                   // whole
    if (lab == 1.0f || lab == 4.0f) out[static_cast<size_t>(vox + v)] = 1.0f;  // core
    if (lab == 4.0f) out[static_cast<size_t>(2 * vox + v)] = 1.0f;        // enhancing
  }
  if (offender_count > 0) {
    std::ostringstream msg;
    msg << "map_labels: " << offender_count << " voxel(s) with labels outside {0,1,2,4}: ";
    for (size_t i = 0; i < offenders.size(); ++i) msg << (i ? ", " : "") << offenders[i];
    if (offender_count > static_cast<i64>(offenders.size())) {
      msg << ", and " << (offender_count - static_cast<i64>(offenders.size())) << " more";
    }
    throw DataError(msg.str());
  }
  return SegmentationMask{TensorF::from_data({3, d, h, w}, std::move(out))};
}

// ---------------------------------------------------------------------------
// crop and pad

inline i64 next_multiple_of_16(i64 x) { return (x + 15) / 16 * 16; }

struct CropInfo {
  i64 off_d = 0, off_h = 0, off_w = 0;  // source coordinate of the crop origin
  i64 crop_d = 0, crop_h = 0, crop_w = 0;
  i64 out_d = 0, out_h = 0, out_w = 0;  // after padding to multiples of 16

  /// Maps an output voxel back to source coordinates; returns false for
  /// voxels that lie in the zero padding.
  bool to_source(i64 d, i64 h, i64 w, i64& sd, i64& sh, i64& sw) const {
    if (d >= crop_d || h >= crop_h || w >= crop_w) return false;
    sd = d + off_d;
    sh = h + off_h;
    sw = w + off_w;
    return true;
  }
};

struct CropPadResult {
  TensorF volume;
  CropInfo info;
};

/// Center-crops each axis to the target (floor offsets), then zero-pads at the
/// high side of each axis up to the next multiple of 16 so four rounds of
/// pooling divide evenly.
inline CropPadResult crop_and_pad(const TensorF& volume, i64 td, i64 th, i64 tw) {
  require_shape(volume.shape().size() == 4,
                "crop_and_pad: expected [channels, depth, height, width], got " +
                    shape_str(volume.shape()));
  const Shape& s = volume.shape();
  i64 c = s[0], d = s[1], h = s[2], w = s[3];
  require(td >= 1 && th >= 1 && tw >= 1, "crop_and_pad: target dims must be positive");
  if (td > d || th > h || tw > w) {
    throw ArgumentError("crop_and_pad: target " + std::to_string(td) + "x" +
                        std::to_string(th) + "x" + std::to_string(tw) +
                        " exceeds source " + std::to_string(d) + "x" + std::to_string(h) +
                        "x" + std::to_string(w));
  }
  CropInfo info;
  info.off_d = (d - td) / 2;
  info.off_h = (h - th) / 2;
  info.off_w = (w - tw) / 2;
  info.crop_d = td;
  info.crop_h = th;
  info.crop_w = tw;
  info.out_d = next_multiple_of_16(td);
  info.out_h = next_multiple_of_16(th);
  info.out_w = next_multiple_of_16(tw);

  std::vector<float> out(
      static_cast<size_t>(c * info.out_d * info.out_h * info.out_w), 0.0f);
  const std::vector<float>& in = volume.vals();
  for (i64 ch = 0; ch < c; ++ch) {
    for (i64 dd = 0; dd < td; ++dd) {
      for (i64 hh = 0; hh < th; ++hh) {
        i64 src = ((ch * d + dd + info.off_d) * h + hh + info.off_h) * w + info.off_w;
        i64 dst = ((ch * info.out_d + dd) * info.out_h + hh) * info.out_w;
        std::copy(in.begin() + src, in.begin() + src + tw, out.begin() + dst);
      }
    }
  }
  return CropPadResult{
      TensorF::from_data({c, info.out_d, info.out_h, info.out_w}, std::move(out)), info};
}

// ---------------------------------------------------------------------------
// dataset split

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ArgumentError("unknown split '" + name + "' (expected train|val|test)");
}

/// Assigns 70/20/10 split tags. The shuffled order is cut at the cumulative
/// floors floor(0.7n) and floor(0.9n); the tail is the test set. These
/// boundaries reproduce the reference counts (368 -> 257/74/37, 10 -> 7/2/1).
/// Returned tags are indexed by the original case position.
inline std::vector<Split> split_dataset(i64 n, u64 seed) {
  require(n >= 0, "split_dataset: case count must be non-negative");
  std::vector<i64> order(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);
  i64 train_end = static_cast<i64>(std::floor(0.7 * static_cast<double>(n)));
  i64 val_end = static_cast<i64>(std::floor(0.9 * static_cast<double>(n)));
  std::vector<Split> tags(static_cast<size_t>(n), Split::train);
  for (i64 pos = 0; pos < n; ++pos) {
    Split tag = pos < train_end ? Split::train : (pos < val_end ? Split::val : Split::test);
    tags[static_cast<size_t>(order[static_cast<size_t>(pos)])] = tag;
  }
  return tags;
}

// ---------------------------------------------------------------------------
// synthetic phantoms

struct PhantomInfo {
  double center_d = 0.0, center_h = 0.0, center_w = 0.0;
  double semi[3][3] = {};  // [whole|core|enhancing][depth|height|width] semi-axes

  double analytic_volume(int region) const {
    return 4.0 / 3.0 * 3.14159265358979323846 * semi[region][0] * semi[region][1] *
           semi[region][2];
  }
};

/// Builds one nested-ellipsoid case: outer ellipsoid marks the whole region,
/// a middle one the core, an inner one the enhancing part. The four image
/// channels get class-dependent intensity levels with an additive radial
/// brightness ramp plus seeded noise; everything outside the outer ellipsoid
/// is exactly zero.
inline CaseRecord make_phantom(i64 d, i64 h, i64 w, u64 seed, PhantomInfo* info = nullptr) {
  if (d < 16 || h < 16 || w < 16) {
    throw ArgumentError("make_phantom: dims " + std::to_string(d) + "x" +
                        std::to_string(h) + "x" + std::to_string(w) +
                        " are too small to nest three ellipsoids (minimum 16 per axis)");
  }
  Rng rng(seed);
  double cd = 0.5 * static_cast<double>(d) * (1.0 + 0.1 * (rng.uniform() - 0.5));
  double ch = 0.5 * static_cast<double>(h) * (1.0 + 0.1 * (rng.uniform() - 0.5));
  double cw = 0.5 * static_cast<double>(w) * (1.0 + 0.1 * (rng.uniform() - 0.5));
  auto semi = [&](i64 dim) {
    return (0.55 + 0.15 * rng.uniform()) * 0.5 * static_cast<double>(dim);
  };
  double a0 = semi(d), b0 = semi(h), c0 = semi(w);      // whole region
  double f1 = 0.72 + 0.08 * rng.uniform();              // core fraction
  double f2 = 0.62 + 0.08 * rng.uniform();              // enhancing fraction
  double a1 = a0 * f1, b1 = b0 * f1, c1 = c0 * f1;
  double a2 = a1 * f2, b2 = b1 * f2, c2 = c1 * f2;
  if (info) {
    *info = PhantomInfo{cd, ch, cw, {{a0, b0, c0}, {a1, b1, c1}, {a2, b2, c2}}};
  }

  // per-channel class levels: distinct contrasts so no single channel solves
  // the task alone. The ramp is additive and smaller than the class step, so
  // bands never overlap; noise sits well inside the remaining gap.
  const double contrast = 1.2;
  double level[4][3];
  for (int chn = 0; chn < 4; ++chn) {
    double base = 1.0 + 0.2 * chn;
    for (int cls = 0; cls < 3; ++cls) {
      int order = (cls + chn) % 3;  // rotate which class is brightest per channel
      level[chn][cls] = base + contrast * order;
    }
  }
  const double sigma = 0.10;
  const double ramp_amp = 0.25;

  i64 vox = d * h * w;
  std::vector<float> img(static_cast<size_t>(4 * vox), 0.0f);
  std::vector<float> msk(static_cast<size_t>(3 * vox), 0.0f);
  for (i64 dd = 0; dd < d; ++dd) {
    for (i64 hh = 0; hh < h; ++hh) {
      for (i64 ww = 0; ww < w; ++ww) {
        double xd = static_cast<double>(dd) - cd;
        double xh = static_cast<double>(hh) - ch;
        double xw = static_cast<double>(ww) - cw;
        double r0 = (xd * xd) / (a0 * a0) + (xh * xh) / (b0 * b0) + (xw * xw) / (c0 * c0);
        if (r0 > 1.0) continue;  // background stays exactly zero
        double r1 = (xd * xd) / (a1 * a1) + (xh * xh) / (b1 * b1) + (xw * xw) / (c1 * c1);
        double r2 = (xd * xd) / (a2 * a2) + (xh * xh) / (b2 * b2) + (xw * xw) / (c2 * c2);
        int cls = r2 <= 1.0 ? 2 : (r1 <= 1.0 ? 1 : 0);
        i64 v = (dd * h + hh) * w + ww;
        msk[static_cast<size_t>(v)] = 1.0f;
        if (cls >= 1) msk[static_cast<size_t>(vox + v)] = 1.0f;
        if (cls == 2) msk[static_cast<size_t>(2 * vox + v)] = 1.0f;
        double ramp = ramp_amp * (1.0 - std::sqrt(r0));
        for (int chn = 0; chn < 4; ++chn) {
          double value = level[chn][cls] + ramp + sigma * rng.normal();
          img[static_cast<size_t>(chn * vox + v)] = static_cast<float>(value);
        }
      }
    }
  }
  CaseRecord rec;
  rec.id = "phantom-" + std::to_string(seed);
  rec.image = TensorF::from_data({4, d, h, w}, std::move(img));
  rec.mask = SegmentationMask{TensorF::from_data({3, d, h, w}, std::move(msk))};
  return rec;
}

// ---------------------------------------------------------------------------
// intensity normalization

/// Per-channel z-score over the nonzero voxels; exact-zero background is left
/// untouched. A channel whose nonzero voxels are constant becomes zero there.
inline TensorF normalize_intensities(const TensorF& volume) {
  require_shape(volume.shape().size() == 4,
                "normalize_intensities: expected [channels, depth, height, width], got " +
                    shape_str(volume.shape()));
  const Shape& s = volume.shape();
  i64 c = s[0], vox = s[1] * s[2] * s[3];
  std::vector<float> out(volume.vals());
  for (i64 chn = 0; chn < c; ++chn) {
    i64 base = chn * vox;
    double sum = 0.0;
    i64 n = 0;
    for (i64 v = 0; v < vox; ++v) {
      float x = out[static_cast<size_t>(base + v)];
      if (x != 0.0f) {
        sum += static_cast<double>(x);
        n += 1;
      }
    }
    if (n == 0) continue;
    double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (i64 v = 0; v < vox; ++v) {
      float x = out[static_cast<size_t>(base + v)];
      if (x != 0.0f) {
        double delta = static_cast<double>(x) - mean;
        ss += delta * delta;
      }
    }
    double sd = std::sqrt(ss / static_cast<double>(n));
    for (i64 v = 0; v < vox; ++v) {
      float& x = out[static_cast<size_t>(base + v)];
      if (x != 0.0f) {
        x = sd > 0.0 ? static_cast<float>((static_cast<double>(x) - mean) / sd) : 0.0f;
      }
    }
  }
  return TensorF::from_data(volume.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// minimal single-file NIfTI-1 import (float32 only)

inline TensorF read_nifti(const std::string& path) {
  std::ifstream is = io::open_input(path);
  std::vector<char> header(348);
  io::read_exact(is, header.data(), header.size());
  auto at_i32 = [&](size_t off) {
    int32_t v;
    std::memcpy(&v, header.data() + off, 4);
    return v;
  };
  auto at_i16 = [&](size_t off) {
    int16_t v;
    std::memcpy(&v, header.data() + off, 2);
    return v;
  };
  auto at_f32 = [&](size_t off) {
    float v;
    std::memcpy(&v, header.data() + off, 4);
    return v;
  };
  if (at_i32(0) != 348) {
    throw DataError("read_nifti: '" + path + "' has no valid 348-byte header");
  }
  if (std::string(header.data() + 344, 3) != "n+1") {
    throw DataError("read_nifti: only single-file (magic n+1) volumes are supported");
  }
  int16_t ndim = at_i16(40);
  if (ndim != 3 && ndim != 4) {
    throw DataError("read_nifti: expected 3 or 4 dimensions, got " + std::to_string(ndim));
  }
  i64 nx = at_i16(42), ny = at_i16(44), nz = at_i16(46);
  i64 nt = ndim == 4 ? at_i16(48) : 1;
  if (nx <= 0 || ny <= 0 || nz <= 0 || nt <= 0) {
    throw DataError("read_nifti: degenerate dimensions");
  }
  int16_t datatype = at_i16(70);
  if (datatype != 16) {
    throw DataError("read_nifti: unsupported datatype " + std::to_string(datatype) +
                    " (only float32, code 16)");
  }
  i64 offset = static_cast<i64>(at_f32(108));
  if (offset < 348) throw DataError("read_nifti: data offset inside the header");
  is.seekg(offset, std::ios::beg);
  if (!is) throw DataError("read_nifti: cannot seek to data offset");
  // fastest-varying x maps to width, then y to height, z to depth, t to channel
  std::vector<float> payload(static_cast<size_t>(nt * nz * ny * nx));
  io::read_f32_array(is, payload.data(), payload.size());
  return TensorF::from_data({nt, nz, ny, nx}, std::move(payload));
}

// ---------------------------------------------------------------------------
// manifests

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;
  std::string split;
};

/// Tab-separated, one case per line: id, image path, mask path, split tag.
inline void write_manifest(const std::string& path,
                           const std::vector<ManifestEntry>& entries) {
  io::atomic_write_file(path, [&](std::ostream& os) {
    for (const auto& e : entries) {
      parse_split(e.split);  // refuse to persist unknown tags
      os << e.id << '\t' << e.image_path << '\t' << e.mask_path << '\t' << e.split << '\n';
    }
  });
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is = io::open_input(path);
  std::vector<ManifestEntry> entries;
  std::string line;
  i64 line_no = 0;
  while (std::getline(is, line)) {
    line_no += 1;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 4 fields, got " +
                      std::to_string(fields.size()));
    }
    try {
      parse_split(fields[3]);
    } catch (const ArgumentError& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    entries.push_back({fields[0], fields[1], fields[2], fields[3]});
  }
  return entries;
}

/// Directory part of a path, without the trailing separator.
inline std::string parent_dir(const std::string& path) {
  size_t slash = path.find_last_of('/');
  return slash == std::string::npos ? std::string(".") : path.substr(0, slash);
}

inline std::string join_path(const std::string& base, const std::string& rel) {
  if (!rel.empty() && rel.front() == '/') return rel;
  return base + "/" + rel;
}

/// Loads one manifest entry; relative paths resolve against base_dir.
inline CaseRecord load_case(const ManifestEntry& entry, const std::string& base_dir) {
  CaseRecord rec;
  rec.id = entry.id;
  rec.split = entry.split;
  rec.image = read_volume(join_path(base_dir, entry.image_path));
  TensorF mask = read_volume(join_path(base_dir, entry.mask_path));
  if (mask.shape()[0] != 3) {
    throw DataError("case '" + entry.id + "': mask has " + std::to_string(mask.shape()[0]) +
                    " channels, expected 3");
  }
  if (mask.shape()[1] != rec.image.shape()[1] || mask.shape()[2] != rec.image.shape()[2] ||
      mask.shape()[3] != rec.image.shape()[3]) {
    throw DataError("case '" + entry.id + "': mask dims " + shape_str(mask.shape()) +
                    " do not match image dims " + shape_str(rec.image.shape()));
  }
  for (float v : mask.vals()) {
    if (v != 0.0f && v != 1.0f) {
      throw DataError("case '" + entry.id + "': mask values must be 0 or 1");
    }
  }
  rec.mask = SegmentationMask{mask};
  return rec;
}

}  // namespace vsx
