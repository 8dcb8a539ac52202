#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "pdlatent/error.hpp"
#include "pdlatent/volume.hpp"
#include "test_util.hpp"

using namespace pdlatent;

namespace {

Volume random_volume(Dims d, std::mt19937_64& rng, double lo = -2.0, double hi = 5.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<float> data(d.voxels());
  for (auto& x : data) x = static_cast<float>(u(rng));
  return Volume(d, {2.0, 2.5, 3.0}, std::move(data));
}

}  // namespace

TEST_CASE("volume construction enforces payload length and finiteness") {
  CHECK_THROWS_AS(Volume({2, 2, 2}, {}, std::vector<float>(7)), ShapeError);
  std::vector<float> bad(8, 0.0f);
  bad[3] = std::nanf("");
  CHECK_THROWS_AS(Volume({2, 2, 2}, {}, bad), DataError);
  Volume v({2, 3, 4}, {}, std::vector<float>(24, 1.0f));
  CHECK(v.index(1, 2, 3) == 1 + 2 * (2 + 3 * 3));
}

TEST_CASE("rawf32 round trip is bitwise") {
  TempDir tmp;
  std::mt19937_64 rng(1);
  const Volume v = random_volume({5, 4, 3}, rng);
  save_volume(v, tmp.path / "v.dlvol", VolumeFormat::RawF32);
  const Volume w = load_volume(tmp.path / "v.dlvol", VolumeFormat::RawF32);
  CHECK(w.dims() == v.dims());
  CHECK(w.spacing() == v.spacing());
  CHECK(std::memcmp(w.data().data(), v.data().data(), v.size() * sizeof(float)) == 0);

  const Volume two({2, 2, 2}, {}, {0, 1, 2, 3, 4, 5, 6, 7});
  save_volume(two, tmp.path / "two.dlvol", VolumeFormat::RawF32);
  CHECK(load_volume(tmp.path / "two.dlvol", VolumeFormat::RawF32).dims() == Dims{2, 2, 2});
}

TEST_CASE("rawf32 layout: magic, length-prefixed json, float payload") {
  TempDir tmp;
  save_volume(Volume::zeros({4, 4, 4}), tmp.path / "z.dlvol", VolumeFormat::RawF32);
  std::ifstream in(tmp.path / "z.dlvol", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.data(), 8) == "DLVOL001");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  CHECK(bytes.size() == 12 + len + 64 * 4);
  for (std::size_t i = 12 + len; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("full-scale payload is 4*91*109*91 bytes") {
  TempDir tmp;
  const Volume v = Volume::zeros({91, 109, 91}, {2, 2, 2});
  save_volume(v, tmp.path / "big.nii", VolumeFormat::Nifti1);
  save_volume(v, tmp.path / "big.dlvol", VolumeFormat::RawF32);
  CHECK(std::filesystem::file_size(tmp.path / "big.nii") == 352u + 3610516u);
  const Volume back = load_volume(tmp.path / "big.nii", VolumeFormat::Nifti1);
  CHECK(back.dims() == Dims{91, 109, 91});
  CHECK(back.spacing() == Spacing{2, 2, 2});
}

TEST_CASE("nifti float32 round trip and int16 scaling") {
  TempDir tmp;
  std::mt19937_64 rng(2);
  const Volume v = random_volume({3, 5, 2}, rng);
  save_volume(v, tmp.path / "v.nii", VolumeFormat::Nifti1);
  const Volume w = load_volume(tmp.path / "v.nii", VolumeFormat::Nifti1);
  CHECK(std::memcmp(w.data().data(), v.data().data(), v.size() * sizeof(float)) == 0);

  // Patch into an int16 file with slope 0.5, intercept 1.
  std::ifstream in(tmp.path / "v.nii", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  bytes.resize(352 + v.size() * 2);
  const std::int16_t dt = 4, bitpix = 16;
  std::memcpy(bytes.data() + 70, &dt, 2);
  std::memcpy(bytes.data() + 72, &bitpix, 2);
  const float slope = 0.5f, inter = 1.0f;
  std::memcpy(bytes.data() + 112, &slope, 4);
  std::memcpy(bytes.data() + 116, &inter, 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto raw = static_cast<std::int16_t>(i * 3);
    std::memcpy(bytes.data() + 352 + 2 * i, &raw, 2);
  }
  std::ofstream(tmp.path / "i16.nii", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  const Volume s = load_volume(tmp.path / "i16.nii", VolumeFormat::Nifti1);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(s.data()[i] == doctest::Approx(i * 3 * 0.5 + 1.0));
}

TEST_CASE("loader error paths") {
  TempDir tmp;
  CHECK_THROWS_AS(load_volume(tmp.path / "missing.dlvol", VolumeFormat::RawF32), IoError);

  std::ofstream(tmp.path / "junk.dlvol") << "not a volume";
  CHECK_THROWS_AS(load_volume(tmp.path / "junk.dlvol", VolumeFormat::RawF32), FormatError);

  save_volume(Volume::zeros({2, 2, 2}), tmp.path / "t.dlvol", VolumeFormat::RawF32);
  std::filesystem::resize_file(tmp.path / "t.dlvol", std::filesystem::file_size(tmp.path / "t.dlvol") - 4);
  CHECK_THROWS_AS(load_volume(tmp.path / "t.dlvol", VolumeFormat::RawF32), CorruptFileError);

  save_volume(Volume::zeros({2, 2, 2}), tmp.path / "t.nii", VolumeFormat::Nifti1);
  {
    std::fstream f(tmp.path / "t.nii", std::ios::in | std::ios::out | std::ios::binary);
    const std::int16_t dt = 64;  // float64
    f.seekp(70);
    f.write(reinterpret_cast<const char*>(&dt), 2);
  }
  CHECK_THROWS_AS(load_volume(tmp.path / "t.nii", VolumeFormat::Nifti1), UnsupportedError);

  std::ofstream(tmp.path / "short.nii") << "tiny";
  CHECK_THROWS_AS(load_volume(tmp.path / "short.nii", VolumeFormat::Nifti1), FormatError);
}

TEST_CASE("normalize_intensity two-step formula") {
  // voxel 0..3 background (2), 4..5 reference (6), voxel 6 striatal (10), voxel 7 other.
  const Volume v({2, 2, 2}, {}, {2, 2, 2, 2, 6, 6, 10, 4});
  const Mask bg({2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0});
  const Mask ref({2, 2, 2}, {0, 0, 0, 0, 1, 1, 0, 0});
  const Volume n = normalize_intensity(v, bg, ref);
  CHECK(n.data()[6] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(masked_mean(n, ref) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(n.data()[0] == 0.0f);

  const Volume flat({2, 2, 2}, {}, std::vector<float>(8, 3.0f));
  CHECK_THROWS_AS(normalize_intensity(flat, bg, ref), DegenerateReferenceError);
  CHECK_THROWS_AS(normalize_intensity(v, bg, Mask::filled({2, 2, 2}, false)), DegenerateReferenceError);
  CHECK_THROWS_AS(normalize_intensity(v, bg, Mask::filled({2, 2, 1}, true)), ShapeError);
}

TEST_CASE("normalize_intensity is invariant to positive affine rescaling") {
  std::mt19937_64 rng(7);
  const Dims d{6, 5, 4};
  std::uniform_real_distribution<double> coef(0.1, 10.0);
  std::bernoulli_distribution pick(0.3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint8_t> bgb(d.voxels()), refb(d.voxels());
    for (std::size_t i = 0; i < d.voxels(); ++i) {
      bgb[i] = i < 20;
      refb[i] = i >= 20 && pick(rng);
    }
    refb[40] = 1;
    // Background near 0, reference near 1 as in a scan; the rest anywhere in [0, 4].
    std::uniform_real_distribution<double> low(0.0, 0.2), mid(0.9, 1.1), any(0.0, 4.0);
    std::vector<float> raw(d.voxels());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      raw[i] = static_cast<float>(bgb[i] ? low(rng) : (refb[i] ? mid(rng) : any(rng)));
    }
    const Volume v(d, {}, raw);
    const Mask bg(d, bgb), ref(d, refb);
    const double a = coef(rng);
    const double b = coef(rng) - 5.0;
    std::vector<float> scaled(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = static_cast<float>(a * v.data()[i] + b);
    const Volume n1 = normalize_intensity(v, bg, ref);
    const Volume n2 = normalize_intensity(Volume(d, v.spacing(), scaled), bg, ref);
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(std::abs(n1.data()[i] - n2.data()[i]) <= 1e-5 * std::max(1.0f, std::abs(n1.data()[i])) + 1e-5);
    }
  }
}

TEST_CASE("compress_upper_tail") {
  const Volume v({4, 1, 1}, {}, {1.0f, 3.0f, 5.0f, 1e6f});
  const Volume c = compress_upper_tail(v, 3.0, 2.0);
  CHECK(c.data()[0] == 1.0f);
  CHECK(c.data()[1] == 3.0f);
  // 3 + 4 (logistic(1) - 1/2), logistic(1) = 0.7310585786300049
  CHECK(c.data()[2] == doctest::Approx(3.0 + 4.0 * (0.7310585786300049 - 0.5)).epsilon(1e-6));
  CHECK(c.data()[2] == doctest::Approx(3.9242).epsilon(1e-4));
  CHECK(c.data()[3] == doctest::Approx(5.0).epsilon(1e-6));
  CHECK(c.data()[3] <= 5.0f);
  CHECK_THROWS_AS(compress_upper_tail(v, 3.0, 0.0), ParameterError);
  CHECK_THROWS_AS(compress_upper_tail(v, 3.0, -1.0), ParameterError);
}

TEST_CASE("compress_upper_tail is monotone and identity below tau") {
  std::vector<float> xs;
  for (int i = -400; i <= 4000; ++i) xs.push_back(static_cast<float>(i) * 0.01f);
  const Volume v({static_cast<int>(xs.size()), 1, 1}, {}, xs);
  const Volume c = compress_upper_tail(v, 1.7, 0.85);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] <= 1.7f) CHECK(c.data()[i] == xs[i]);
    CHECK(c.data()[i] <= 1.7 + 0.85 + 1e-6);
    if (i) CHECK(c.data()[i] >= c.data()[i - 1]);
  }
}

TEST_CASE("default compression anchors tau at the 97.5th percentile") {
  std::vector<float> xs(201);
  std::iota(xs.begin(), xs.end(), 0.0f);
  const Volume v({201, 1, 1}, {}, xs);
  const auto p = default_compression(v);
  CHECK(p.tau == doctest::Approx(195.0));
  CHECK(p.w == doctest::Approx(97.5));
}

TEST_CASE("crop_pad") {
  const Volume v = Volume::zeros({91, 109, 91});
  CHECK(crop_pad(v, {96, 112, 96}).dims() == Dims{96, 112, 96});

  std::mt19937_64 rng(3);
  const Volume r = random_volume({5, 4, 3}, rng);
  const Volume same = crop_pad(r, r.dims());
  CHECK(std::equal(same.data().begin(), same.data().end(), r.data().begin()));

  const Volume padded = crop_pad(r, {8, 7, 6});
  double s1 = 0.0, s2 = 0.0;
  for (float x : r.data()) s1 += x;
  for (float x : padded.data()) s2 += x;
  CHECK(s2 == doctest::Approx(s1).epsilon(1e-9));
  // offsets (8-5)/2 = 1, (7-4)/2 = 1, (6-3)/2 = 1
  CHECK(padded.at(1, 1, 1) == r.at(0, 0, 0));
  CHECK(padded.at(5, 4, 3) == r.at(4, 3, 2));

  const Volume cropped = crop_pad(padded, r.dims());
  CHECK(std::equal(cropped.data().begin(), cropped.data().end(), r.data().begin()));
  CHECK_THROWS_AS(crop_pad(r, {0, 1, 1}), ConfigError);
}

TEST_CASE("crop_pad keeps content centred within one voxel") {
  const Dims d{9, 8, 7};
  std::vector<float> data(d.voxels(), 0.0f);
  const Volume blob(d, {}, std::vector<float>(d.voxels(), 1.0f));
  for (Dims target : {Dims{12, 12, 12}, Dims{5, 5, 5}, Dims{10, 6, 9}}) {
    const Volume out = crop_pad(blob, target);
    for (int a = 0; a < 3; ++a) {
      double num = 0.0, den = 0.0;
      for (int z = 0; z < target.nz; ++z)
        for (int y = 0; y < target.ny; ++y)
          for (int x = 0; x < target.nx; ++x) {
            const double w = out.at(x, y, z);
            num += w * (a == 0 ? x : (a == 1 ? y : z));
            den += w;
          }
      const double centre = (target[a] - 1) / 2.0;
      CHECK(std::abs(num / den - centre) <= 1.0);
    }
  }
}

TEST_CASE("downsample") {
  std::mt19937_64 rng(4);
  const Volume r = random_volume({4, 6, 2}, rng);
  const Volume same = downsample(r, 1);
  CHECK(std::equal(same.data().begin(), same.data().end(), r.data().begin()));

  const Volume ones({4, 4, 4}, {1, 1, 1}, std::vector<float>(64, 1.0f));
  const Volume half = downsample(ones, 2);
  CHECK(half.dims() == Dims{2, 2, 2});
  CHECK(half.spacing() == Spacing{2, 2, 2});
  for (float x : half.data()) CHECK(x == 1.0f);

  const Volume ramp({2, 2, 2}, {}, {0, 1, 2, 3, 4, 5, 6, 7});
  const Volume one = downsample(ramp, 2);
  CHECK(one.dims() == Dims{1, 1, 1});
  CHECK(one.data()[0] == doctest::Approx(3.5));

  CHECK(downsample(Volume::zeros({5, 3, 1}), 2).dims() == Dims{3, 2, 1});
  CHECK_THROWS_AS(downsample(r, 0), ConfigError);
}

TEST_CASE("downsample preserves the global mean for divisible dims") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Volume v = random_volume({6, 9, 12}, rng);
    const Volume d = downsample(v, 3);
    double m1 = 0.0, m2 = 0.0;
    for (float x : v.data()) m1 += x;
    for (float x : d.data()) m2 += x;
    CHECK(std::abs(m1 / v.size() - m2 / d.size()) <= 1e-6);
  }
}

TEST_CASE("heuristic masks are non-empty and disjoint") {
  Volume head = Volume::zeros({20, 24, 20});
  std::vector<float> data(head.size(), 0.0f);
  for (int z = 2; z < 18; ++z)
    for (int y = 2; y < 22; ++y)
      for (int x = 2; x < 18; ++x) data[head.index(x, y, z)] = 1.0f;
  const Volume v(head.dims(), {}, data);
  const auto masks = heuristic_masks(v);
  CHECK(masks.background.count() > 0);
  CHECK(masks.reference.count() > 0);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK_FALSE((masks.background[i] && masks.reference[i]));
  CHECK(masked_mean(normalize_intensity(v, masks.background, masks.reference), masks.reference) ==
        doctest::Approx(1.0));
}
