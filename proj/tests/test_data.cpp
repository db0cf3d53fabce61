// Volume format round-trips, label mapping, crop/pad bookkeeping, split
// boundaries, phantom geometry, normalization and manifest handling.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "catch_amalgamated.hpp"
#include "vsx/data.hpp"

using namespace vsx;

namespace {

std::string tmp_file(const char* name) { return std::string("/tmp/vsx_data_") + name; }

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("volume files: bit-exact round-trip and validation") {
  Rng rng(3);
  TensorF v = TensorF::uniform({4, 8, 6, 5}, rng, -3.0, 3.0);
  v.vals()[0] = 0.0f;
  v.vals()[1] = -0.0f;
  v.vals()[2] = 1e-38f;  // subnormal range survives untouched
  std::string path = tmp_file("vol.vsxv");
  write_volume(path, v);

  TensorF r = read_volume(path);
  CHECK(r.shape() == Shape{4, 8, 6, 5});
  CHECK(bit_equal(r.vals(), v.vals()));
  std::ifstream left_tmp(path + ".tmp");
  CHECK_FALSE(left_tmp.good());

  CHECK_THROWS_AS(read_volume(tmp_file("missing.vsxv")), IoError);
  CHECK_THROWS_AS(write_volume(path, TensorF::zeros({8, 6, 5})), ShapeError);

  SECTION("wrong magic") {
    std::string bad = tmp_file("bad.vsxv");
    std::ofstream os(bad, std::ios::binary);
    os << "JUNKJUNKJUNKJUNKJUNKJUNKJUNK";
    os.close();
    CHECK_THROWS_AS(read_volume(bad), DataError);
    std::remove(bad.c_str());
  }
  SECTION("truncated payload") {
    std::ifstream is(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
    is.close();
    std::string cut = tmp_file("cut.vsxv");
    std::ofstream os(cut, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    os.close();
    CHECK_THROWS_AS(read_volume(cut), DataError);
    std::remove(cut.c_str());
  }
  SECTION("trailing bytes") {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os << "extra";
    os.close();
    CHECK_THROWS_AS(read_volume(path), DataError);
  }
  std::remove(path.c_str());
}

TEST_CASE("map_labels: class composition table") {
  // labels 0 / 1 / 2 / 4 in a 1x2x2 grid
  auto m = map_labels({0.0f, 1.0f, 2.0f, 4.0f}, 1, 2, 2);
  CHECK(m.channels.shape() == Shape{3, 1, 2, 2});
  const auto& v = m.channels.vals();
  // whole region channel
  CHECK(v[0] == 0.0f);
  CHECK(v[1] == 1.0f);
  CHECK(v[2] == 1.0f);
  CHECK(v[3] == 1.0f);
  // core channel: labels 1 and 4
  CHECK(v[4] == 0.0f);
  CHECK(v[5] == 1.0f);
  CHECK(v[6] == 0.0f);
  CHECK(v[7] == 1.0f);
  // enhancing channel: label 4 only
  CHECK(v[8] == 0.0f);
  CHECK(v[9] == 0.0f);
  CHECK(v[10] == 0.0f);
  CHECK(v[11] == 1.0f);

  SECTION("nesting holds on random valid grids") {
    Rng rng(17);
    std::vector<float> raw(6 * 5 * 4);
    const float menu[4] = {0.0f, 1.0f, 2.0f, 4.0f};
    for (auto& x : raw) x = menu[rng.below(4)];
    auto mm = map_labels(raw, 6, 5, 4);
    i64 vox = 6 * 5 * 4;
    for (i64 i = 0; i < vox; ++i) {
      float wt = mm.channels.vals()[static_cast<size_t>(i)];
      float tc = mm.channels.vals()[static_cast<size_t>(vox + i)];
      float et = mm.channels.vals()[static_cast<size_t>(2 * vox + i)];
      CHECK(et <= tc);
      CHECK(tc <= wt);
    }
  }
  SECTION("unexpected labels are reported with coordinates") {
    std::vector<float> raw = {0.0f, 3.0f, 1.0f, 5.0f};
    CHECK_THROWS_WITH(map_labels(raw, 1, 2, 2),
                      Catch::Matchers::ContainsSubstring("(0, 0, 1)=3") &&
                          Catch::Matchers::ContainsSubstring("(0, 1, 1)=5") &&
                          Catch::Matchers::ContainsSubstring("2 voxel(s)"));
    CHECK_THROWS_AS(map_labels({1.0f}, 1, 1, 2), ArgumentError);
  }
}

TEST_CASE("crop_and_pad: reference dims, identity, bookkeeping") {
  SECTION("standard acquisition dims") {
    TensorF big = TensorF::zeros({1, 155, 240, 240});  // [C, D, H, W]
    auto r = crop_and_pad(big, 100, 170, 170);
    CHECK(r.volume.shape() == Shape{1, 112, 176, 176});
    CHECK(r.info.off_d == 27);
    CHECK(r.info.off_h == 35);
    CHECK(r.info.off_w == 35);
    CHECK(r.info.crop_d == 100);
    CHECK(r.info.out_d == 112);
    CHECK(r.info.out_h == 176);
  }
  SECTION("identity when target equals pool-ready source") {
    Rng rng(8);
    TensorF v = TensorF::uniform({2, 16, 16, 16}, rng, -1.0, 1.0);
    auto r = crop_and_pad(v, 16, 16, 16);
    CHECK(bit_equal(r.volume.vals(), v.vals()));
    CHECK(r.info.off_d == 0);
  }
  SECTION("target larger than source") {
    CHECK_THROWS_AS(crop_and_pad(TensorF::zeros({1, 8, 8, 8}), 8, 8, 9), ArgumentError);
  }
  SECTION("values map back through the recorded offsets") {
    std::vector<float> seq(static_cast<size_t>(1 * 6 * 7 * 8));
    for (size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<float>(i);
    TensorF v = TensorF::from_data({1, 6, 7, 8}, std::move(seq));
    auto r = crop_and_pad(v, 4, 5, 6);
    CHECK(r.volume.shape() == Shape{1, 16, 16, 16});
    for (i64 d = 0; d < 16; ++d)
      for (i64 h = 0; h < 16; ++h)
        for (i64 w = 0; w < 16; ++w) {
          float got = r.volume.vals()[static_cast<size_t>((d * 16 + h) * 16 + w)];
          i64 sd, sh, sw;
          if (r.info.to_source(d, h, w, sd, sh, sw)) {
            CHECK(got == v.vals()[static_cast<size_t>((sd * 7 + sh) * 8 + sw)]);
          } else {
            CHECK(got == 0.0f);
          }
        }
  }
  SECTION("image and mask stay voxel-aligned") {
    Rng rng(9);
    TensorF img = TensorF::uniform({1, 20, 22, 24}, rng, 0.0, 1.0);
    std::vector<float> mv(img.vals().size());
    for (size_t i = 0; i < mv.size(); ++i) mv[i] = img.vals()[i] > 0.7f ? 1.0f : 0.0f;
    TensorF msk = TensorF::from_data(img.shape(), std::move(mv));
    auto ri = crop_and_pad(img, 14, 15, 16);
    auto rm = crop_and_pad(msk, 14, 15, 16);
    REQUIRE(ri.volume.shape() == rm.volume.shape());
    for (size_t i = 0; i < ri.volume.vals().size(); ++i) {
      if (rm.volume.vals()[i] == 1.0f) CHECK(ri.volume.vals()[i] > 0.7f);
    }
  }
}

TEST_CASE("split_dataset: floor boundaries and determinism") {
  auto count = [](const std::vector<Split>& tags, Split s) {
    return std::count(tags.begin(), tags.end(), s);
  };
  auto t368 = split_dataset(368, 4);
  CHECK(count(t368, Split::train) == 257);
  CHECK(count(t368, Split::val) == 74);
  CHECK(count(t368, Split::test) == 37);

  auto t10 = split_dataset(10, 4);
  CHECK(count(t10, Split::train) == 7);
  CHECK(count(t10, Split::val) == 2);
  CHECK(count(t10, Split::test) == 1);

  CHECK(split_dataset(368, 4) == t368);          // same seed reproduces
  CHECK(split_dataset(368, 5) != t368);          // another seed shuffles anew
  CHECK(split_dataset(0, 1).empty());
  CHECK(split_dataset(1, 1) == std::vector<Split>{Split::test});

  CHECK(split_name(Split::val) == std::string("val"));
  CHECK(parse_split("test") == Split::test);
  CHECK_THROWS_AS(parse_split("holdout"), ArgumentError);
}

TEST_CASE("make_phantom: nesting, determinism, zero background") {
  CHECK_THROWS_AS(make_phantom(15, 16, 16, 1), ArgumentError);

  auto a = make_phantom(16, 24, 20, 42);
  CHECK(a.image.shape() == Shape{4, 16, 24, 20});
  CHECK(a.mask.channels.shape() == Shape{3, 16, 24, 20});
  CHECK_FALSE(a.id.empty());

  auto b = make_phantom(16, 24, 20, 42);
  CHECK(bit_equal(a.image.vals(), b.image.vals()));
  CHECK(bit_equal(a.mask.channels.vals(), b.mask.channels.vals()));
  auto c = make_phantom(16, 24, 20, 43);
  CHECK_FALSE(bit_equal(a.image.vals(), c.image.vals()));

  for (u64 seed : {1ull, 2ull, 3ull}) {
    auto p = make_phantom(24, 24, 24, seed);
    i64 vox = 24 * 24 * 24;
    const auto& m = p.mask.channels.vals();
    const auto& img = p.image.vals();
    i64 wt_count = 0;
    for (i64 v = 0; v < vox; ++v) {
      float wt = m[static_cast<size_t>(v)];
      float tc = m[static_cast<size_t>(vox + v)];
      float et = m[static_cast<size_t>(2 * vox + v)];
      CHECK((wt == 0.0f || wt == 1.0f));
      CHECK(et <= tc);
      CHECK(tc <= wt);
      if (wt == 0.0f) {
        for (i64 chn = 0; chn < 4; ++chn) {
          CHECK(img[static_cast<size_t>(chn * vox + v)] == 0.0f);
        }
      } else {
        wt_count++;
      }
    }
    CHECK(wt_count > 0);
  }
}

TEST_CASE("make_phantom: voxel counts track analytic ellipsoid volumes") {
  for (u64 seed : {11ull, 12ull, 13ull, 14ull, 15ull}) {
    PhantomInfo info;
    auto p = make_phantom(32, 32, 32, seed, &info);
    i64 vox = 32 * 32 * 32;
    double counts[3] = {0.0, 0.0, 0.0};
    for (i64 region = 0; region < 3; ++region) {
      for (i64 v = 0; v < vox; ++v) {
        counts[region] += p.mask.channels.vals()[static_cast<size_t>(region * vox + v)];
      }
    }
    for (int region = 0; region < 3; ++region) {
      double analytic = info.analytic_volume(region);
      INFO("seed " << seed << " region " << region << ": " << counts[region] << " vs "
                   << analytic);
      CHECK(std::abs(counts[region] - analytic) / analytic < 0.10);
    }
  }
}

TEST_CASE("normalize_intensities: z-score over nonzero voxels") {
  SECTION("constant nonzero channel collapses to zero") {
    std::vector<float> v(2 * 4 * 4 * 4, 0.0f);
    for (size_t i = 0; i < 32; ++i) v[i] = 7.5f;        // channel 0, half filled
    for (size_t i = 64; i < 128; ++i) v[i] = -2.0f;     // channel 1, fully filled
    TensorF t = TensorF::from_data({2, 4, 4, 4}, std::move(v));
    TensorF n = normalize_intensities(t);
    for (float x : n.vals()) CHECK(x == 0.0f);
  }
  SECTION("mean zero, unit spread, background untouched") {
    Rng rng(5);
    std::vector<float> v(3 * 6 * 6 * 6, 0.0f);
    for (size_t i = 0; i < v.size(); ++i) {
      if (rng.uniform() < 0.6) v[i] = static_cast<float>(1.0 + rng.normal() * 2.5);
    }
    TensorF t = TensorF::from_data({3, 6, 6, 6}, std::move(v));
    TensorF n = normalize_intensities(t);
    i64 vox = 6 * 6 * 6;
    for (i64 chn = 0; chn < 3; ++chn) {
      double sum = 0.0, ss = 0.0;
      i64 cnt = 0;
      for (i64 i = 0; i < vox; ++i) {
        float before = t.vals()[static_cast<size_t>(chn * vox + i)];
        float after = n.vals()[static_cast<size_t>(chn * vox + i)];
        if (before == 0.0f) {
          CHECK(after == 0.0f);
        } else {
          sum += after;
          cnt++;
        }
      }
      double mean = sum / static_cast<double>(cnt);
      for (i64 i = 0; i < vox; ++i) {
        float before = t.vals()[static_cast<size_t>(chn * vox + i)];
        if (before != 0.0f) {
          double delta = n.vals()[static_cast<size_t>(chn * vox + i)] - mean;
          ss += delta * delta;
        }
      }
      CHECK(std::abs(mean) < 1e-4);
      CHECK(std::abs(std::sqrt(ss / static_cast<double>(cnt)) - 1.0) < 1e-4);
    }
  }
  SECTION("all-zero channel passes through") {
    TensorF n = normalize_intensities(TensorF::zeros({1, 4, 4, 4}));
    for (float x : n.vals()) CHECK(x == 0.0f);
  }
}

namespace {

std::vector<char> nifti_header(int16_t ndim, int16_t nx, int16_t ny, int16_t nz,
                               int16_t nt, int16_t datatype, float offset) {
  std::vector<char> hd(static_cast<size_t>(offset), 0);
  int32_t sz = 348;
  std::memcpy(hd.data(), &sz, 4);
  int16_t dim[8] = {ndim, nx, ny, nz, nt, 1, 1, 1};
  std::memcpy(hd.data() + 40, dim, sizeof(dim));
  std::memcpy(hd.data() + 70, &datatype, 2);
  int16_t bitpix = 32;
  std::memcpy(hd.data() + 72, &bitpix, 2);
  std::memcpy(hd.data() + 108, &offset, 4);
  std::memcpy(hd.data() + 344, "n+1\0", 4);
  return hd;
}

}  // namespace

TEST_CASE("read_nifti: float32 single-file import") {
  std::string path = tmp_file("vol.nii");
  SECTION("4d volume with channel as the slowest axis") {
    auto hd = nifti_header(4, 3, 4, 2, 2, 16, 352.0f);
    std::ofstream os(path, std::ios::binary);
    os.write(hd.data(), static_cast<std::streamsize>(hd.size()));
    for (int i = 0; i < 48; ++i) {
      float f = static_cast<float>(i);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
    os.close();
    TensorF t = read_nifti(path);
    CHECK(t.shape() == Shape{2, 2, 4, 3});
    for (int i = 0; i < 48; ++i) CHECK(t.vals()[static_cast<size_t>(i)] == static_cast<float>(i));
  }
  SECTION("3d volume becomes a single channel") {
    auto hd = nifti_header(3, 5, 4, 3, 1, 16, 352.0f);
    std::ofstream os(path, std::ios::binary);
    os.write(hd.data(), static_cast<std::streamsize>(hd.size()));
    std::vector<float> data(60, 1.5f);
    os.write(reinterpret_cast<const char*>(data.data()), 240);
    os.close();
    CHECK(read_nifti(path).shape() == Shape{1, 3, 4, 5});
  }
  SECTION("unsupported datatype") {
    auto hd = nifti_header(3, 2, 2, 2, 1, 8, 352.0f);
    std::ofstream os(path, std::ios::binary);
    os.write(hd.data(), static_cast<std::streamsize>(hd.size()));
    os.close();
    CHECK_THROWS_WITH(read_nifti(path), Catch::Matchers::ContainsSubstring("datatype"));
  }
  SECTION("wrong magic") {
    auto hd = nifti_header(3, 2, 2, 2, 1, 16, 352.0f);
    hd[344] = 'x';
    std::ofstream os(path, std::ios::binary);
    os.write(hd.data(), static_cast<std::streamsize>(hd.size()));
    os.close();
    CHECK_THROWS_AS(read_nifti(path), DataError);
  }
  SECTION("broken header size") {
    auto hd = nifti_header(3, 2, 2, 2, 1, 16, 352.0f);
    hd[0] = 0;
    std::ofstream os(path, std::ios::binary);
    os.write(hd.data(), static_cast<std::streamsize>(hd.size()));
    os.close();
    CHECK_THROWS_AS(read_nifti(path), DataError);
  }
  std::remove(path.c_str());
}

TEST_CASE("manifest: round-trip, validation, case loading") {
  std::string dir = "/tmp";
  std::string man = tmp_file("manifest.tsv");

  auto rec = make_phantom(16, 16, 16, 7);
  write_volume(tmp_file("case0_img.vsxv"), rec.image);
  write_volume(tmp_file("case0_msk.vsxv"), rec.mask.channels);

  std::vector<ManifestEntry> entries = {
      {"case0", "vsx_data_case0_img.vsxv", "vsx_data_case0_msk.vsxv", "train"},
      {"case1", "missing_img.vsxv", "missing_msk.vsxv", "test"},
  };
  write_manifest(man, entries);
  auto back = read_manifest(man);
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "case0");
  CHECK(back[0].image_path == "vsx_data_case0_img.vsxv");
  CHECK(back[1].split == "test");

  auto loaded = load_case(back[0], dir);
  CHECK(loaded.id == "case0");
  CHECK(loaded.split == "train");
  CHECK(bit_equal(loaded.image.vals(), rec.image.vals()));
  CHECK(bit_equal(loaded.mask.channels.vals(), rec.mask.channels.vals()));
  CHECK_THROWS_AS(load_case(back[1], dir), IoError);

  SECTION("unknown split tag refuses to persist") {
    CHECK_THROWS_AS(write_manifest(man, {{"x", "a", "b", "holdout"}}), ArgumentError);
    std::ifstream left(man + ".tmp");
    CHECK_FALSE(left.good());
  }
  SECTION("malformed lines carry the line number") {
    std::ofstream os(man);
    os << "case0\timg\tmsk\ttrain\n\nonly\ttwo\n";
    os.close();
    CHECK_THROWS_WITH(read_manifest(man), Catch::Matchers::ContainsSubstring("line 3"));
  }
  SECTION("bad split tag in a line") {
    std::ofstream os(man);
    os << "case0\timg\tmsk\tvalidation\n";
    os.close();
    CHECK_THROWS_AS(read_manifest(man), DataError);
  }
  SECTION("mask with wrong channel count") {
    write_volume(tmp_file("badmask.vsxv"), TensorF::zeros({2, 16, 16, 16}));
    ManifestEntry e{"case0", "vsx_data_case0_img.vsxv", "vsx_data_badmask.vsxv", "train"};
    CHECK_THROWS_AS(load_case(e, dir), DataError);
    std::remove(tmp_file("badmask.vsxv").c_str());
  }
  SECTION("non-binary mask values") {
    TensorF m = TensorF::zeros({3, 16, 16, 16});
    m.vals()[5] = 0.25f;
    write_volume(tmp_file("softmask.vsxv"), m);
    ManifestEntry e{"case0", "vsx_data_case0_img.vsxv", "vsx_data_softmask.vsxv", "train"};
    CHECK_THROWS_AS(load_case(e, dir), DataError);
    std::remove(tmp_file("softmask.vsxv").c_str());
  }

  std::remove(man.c_str());
  std::remove(tmp_file("case0_img.vsxv").c_str());
  std::remove(tmp_file("case0_msk.vsxv").c_str());
}
