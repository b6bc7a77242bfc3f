#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ptdr/metrics.hpp"
#include "ptdr/segdata.hpp"

using namespace ptdr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

double class_mean(const SegSample& s, std::int32_t cls) {
  double total = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < s.mask.data.size(); ++i) {
    if (s.mask.data[i] == cls) {
      total += s.image.data()[i];
      ++n;
    }
  }
  return n > 0 ? total / n : std::nan("");
}

}  // namespace

TEST_SUITE("segdata") {

TEST_CASE("generator covers background plus at least three classes") {
  auto samples = generate_synthetic(100, 32, 6, 2024);
  int ok = 0;
  for (const auto& s : samples) {
    std::set<std::int32_t> present(s.mask.data.begin(), s.mask.data.end());
    if (present.contains(0) && present.size() >= 4) ++ok;
    for (std::int32_t v : present) {
      CHECK(v >= 0);
      CHECK(v < 6);
    }
  }
  CHECK(ok >= 95);
}

TEST_CASE("generator is bit-deterministic under a fixed seed") {
  auto a = generate_synthetic(5, 32, 6, 77);
  auto b = generate_synthetic(5, 32, 6, 77);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].mask == b[i].mask);
    REQUIRE(a[i].image.size() == b[i].image.size());
    for (std::int64_t j = 0; j < a[i].image.size(); ++j)
      CHECK(a[i].image.data()[j] == b[i].image.data()[j]);
  }
  auto c = generate_synthetic(5, 32, 6, 78);
  bool any_differs = false;
  for (std::int64_t j = 0; j < a[0].image.size(); ++j)
    if (a[0].image.data()[j] != c[0].image.data()[j]) any_differs = true;
  CHECK(any_differs);
}

TEST_CASE("class-conditional intensities are ordered pulp < dentine < enamel") {
  auto samples = generate_synthetic(100, 32, 6, 555);
  int ordered = 0, scored = 0;
  for (const auto& s : samples) {
    const double pulp = class_mean(s, 3);
    const double dentine = class_mean(s, 2);
    const double enamel = class_mean(s, 1);
    if (std::isnan(pulp) || std::isnan(dentine) || std::isnan(enamel)) continue;
    ++scored;
    if (pulp < dentine && dentine < enamel) ++ordered;
  }
  REQUIRE(scored >= 95);
  CHECK(ordered >= scored * 99 / 100);
}

TEST_CASE("lunglike variant uses four classes with two lobes") {
  auto samples = generate_synthetic(20, 32, 4, 99, SyntheticKind::lunglike);
  int with_lungs = 0;
  for (const auto& s : samples) {
    std::set<std::int32_t> present(s.mask.data.begin(), s.mask.data.end());
    for (std::int32_t v : present) CHECK(v < 4);
    if (present.contains(1) && present.contains(3)) ++with_lungs;
  }
  CHECK(with_lungs >= 19);
  CHECK_THROWS_AS(generate_synthetic(1, 32, 3, 1, SyntheticKind::lunglike), ConfigError);
  CHECK_THROWS_AS(generate_synthetic(1, 32, 5, 1, SyntheticKind::bitewing), ConfigError);
}

TEST_CASE("identity affine leaves the sample unchanged") {
  auto s = generate_synthetic(1, 32, 6, 31)[0];
  SegSample t = affine_apply(s, AffineParams{});
  CHECK(t.mask == s.mask);
  for (std::int64_t i = 0; i < s.image.size(); ++i)
    CHECK(std::fabs(t.image.data()[i] - s.image.data()[i]) < 1e-6f);
}

TEST_CASE("rotation round trip preserves the interior mask") {
  auto s = generate_synthetic(1, 64, 6, 645)[0];
  AffineParams fwd, bwd;
  fwd.rotate_deg = 20.0;
  bwd.rotate_deg = -20.0;
  SegSample t = affine_apply(affine_apply(s, fwd), bwd);

  // foreground IoU on the central crop, away from resampling borders
  const std::int64_t n = 64, lo = n / 5, hi = n - n / 5;
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t y = lo; y < hi; ++y) {
    for (std::int64_t x = lo; x < hi; ++x) {
      const bool a = s.mask.data[static_cast<std::size_t>(y * n + x)] != 0;
      const bool b = t.mask.data[static_cast<std::size_t>(y * n + x)] != 0;
      inter += (a && b) ? 1 : 0;
      uni += (a || b) ? 1 : 0;
    }
  }
  REQUIRE(uni > 0);
  CHECK(static_cast<double>(inter) / uni > 0.95);
}

TEST_CASE("affine never invents new classes") {
  auto s = generate_synthetic(1, 32, 6, 7)[0];
  std::set<std::int32_t> before(s.mask.data.begin(), s.mask.data.end());
  before.insert(0);  // fill value
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    SegSample t = random_affine(s, rng);
    for (std::int32_t v : t.mask.data) CHECK(before.contains(v));
  }
}

TEST_CASE("mask transform agrees with transporting a one-hot painting") {
  auto s = generate_synthetic(1, 32, 6, 17)[0];
  AffineParams p;
  p.rotate_deg = 33.0;
  p.scale = 1.05;
  p.translate_x = 0.02;
  SegSample t = affine_apply(s, p);

  // paint class-2 support into an image channel, move it with the same
  // transform, threshold, compare with the transformed mask
  SegSample onehot;
  onehot.id = "onehot";
  onehot.image = Tensor::zeros(s.image.shape());
  float* q = onehot.image.mutable_data().data();
  for (std::size_t i = 0; i < s.mask.data.size(); ++i)
    q[i] = s.mask.data[i] == 2 ? 1.0f : -1.0f;
  SegSample moved = affine_apply(onehot, p);

  std::int64_t agree = 0;
  const std::int64_t total = t.image.size();
  for (std::int64_t i = 0; i < total; ++i) {
    const bool from_mask = t.mask.data[static_cast<std::size_t>(i)] == 2;
    const bool from_paint = moved.image.data()[i] > 0.0f;
    agree += (from_mask == from_paint) ? 1 : 0;
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(total) > 0.99);
}

TEST_CASE("normalize maps the 8-bit range onto [-1, 1]") {
  Tensor raw = Tensor::from_data({3}, {0.0f, 255.0f, 64.0f});
  Tensor v = normalize_u8(raw);
  CHECK(v.data()[0] == doctest::Approx(-1.0f));
  CHECK(v.data()[1] == doctest::Approx(1.0f));
  CHECK(v.data()[2] == doctest::Approx(-0.4980f).epsilon(1e-4));
  CHECK_THROWS_AS(normalize_u8(Tensor::from_data({1}, {-3.0f})), ContractError);
  CHECK_THROWS_AS(normalize_u8(Tensor::from_data({1}, {256.0f})), ContractError);
}

TEST_CASE("dataset save/load round trip") {
  TempDir tmp("ptdr_segdata_roundtrip");
  Dataset ds = make_synthetic_dataset(12, 32, SyntheticKind::bitewing, 5);
  save_dataset(tmp.path.string(), ds);
  Dataset back = load_dataset(tmp.path.string());
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.num_classes == ds.num_classes);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].id == ds.samples[i].id);
    CHECK(back.splits[i] == ds.splits[i]);
    CHECK(back.samples[i].mask == ds.samples[i].mask);
    // image equality after quantization
    auto q1 = quantize_u8(ds.samples[i].image);
    auto q2 = quantize_u8(back.samples[i].image);
    CHECK(q1 == q2);
  }
  // a second save must produce byte-identical files
  TempDir tmp2("ptdr_segdata_roundtrip2");
  save_dataset(tmp2.path.string(), back);
  for (const auto& entry : fs::recursive_directory_iterator(tmp.path)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), tmp.path);
    std::ifstream f1(entry.path(), std::ios::binary), f2(tmp2.path / rel, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
  }
}

TEST_CASE("default dataset split is 10/5/85 with disjoint pools") {
  Dataset ds = make_synthetic_dataset(2600, 32, SyntheticKind::bitewing, 9);
  CHECK(ds.indices_of(Split::pretrain).size() == 2500);
  CHECK(ds.indices_of(Split::train).size() == 10);
  CHECK(ds.indices_of(Split::val).size() == 5);
  CHECK(ds.indices_of(Split::test).size() == 85);

  std::set<std::string> pool_ids;
  for (const auto& id : ds.ids_of(Split::pretrain)) pool_ids.insert(id);
  for (Split sp : {Split::train, Split::val, Split::test})
    for (const auto& id : ds.ids_of(sp)) CHECK(!pool_ids.contains(id));
}

TEST_CASE("loader rejects malformed inputs") {
  TempDir tmp("ptdr_segdata_bad");
  CHECK_THROWS_AS(load_dataset(tmp.path.string()), FormatError);  // missing manifest

  {
    std::ofstream out(tmp.path / "index.json");
    out << "{not json";
  }
  CHECK_THROWS_AS(load_dataset(tmp.path.string()), FormatError);

  // manifest referring to a mask with an out-of-range class
  Dataset ds = make_synthetic_dataset(3, 32, SyntheticKind::bitewing, 5);
  save_dataset(tmp.path.string(), ds);
  {
    // corrupt one mask pixel to class 250
    const std::string mask_path =
        (tmp.path / ("masks/" + ds.samples[ds.samples.size() - 1].id + ".pgm")).string();
    std::fstream f(mask_path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put(static_cast<char>(250));
  }
  CHECK_THROWS_AS(load_dataset(tmp.path.string()), FormatError);

  // malformed pgm header
  {
    std::ofstream out(tmp.path / "bad.pgm", std::ios::binary);
    out << "P5\n-3 4\n255\n";
  }
  std::int64_t w, h;
  CHECK_THROWS_AS(read_pgm((tmp.path / "bad.pgm").string(), w, h), FormatError);
  {
    std::ofstream out(tmp.path / "bad2.pgm", std::ios::binary);
    out << "P2\n2 2\n255\n0 0 0 0\n";
  }
  CHECK_THROWS_AS(read_pgm((tmp.path / "bad2.pgm").string(), w, h), FormatError);
}

}  // TEST_SUITE
