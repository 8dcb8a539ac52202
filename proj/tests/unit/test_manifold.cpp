#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "pdlatent/error.hpp"
#include "pdlatent/manifold.hpp"
#include "test_util.hpp"

using namespace pdlatent;

namespace {

CvaeConfig tiny_config() {
  CvaeConfig c;
  c.latent_dim = 3;
  c.input_dims = {8, 8, 8};
  c.channels = {2, 3, 3, 4};
  c.hidden = 6;
  c.seed = 5;
  return c;
}

Volume ramp(Dims d, float scale) {
  std::vector<float> v(d.voxels());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = scale * static_cast<float>(i % 17);
  return Volume(d, Spacing{}, std::move(v));
}

}  // namespace

TEST_CASE("grid codes") {
  GridSpec s;
  s.feat_a = 2;
  s.feat_b = 0;
  s.g = 3;
  const auto zs = grid_codes(s, 4);
  REQUIRE(zs.size() == 9);
  CHECK(zs[0] == std::vector<double>{-3, 0, -3, 0});
  CHECK(zs[1] == std::vector<double>{-3, 0, 0, 0});
  CHECK(zs[3] == std::vector<double>{0, 0, -3, 0});
  CHECK(zs[4] == std::vector<double>{0, 0, 0, 0});
  CHECK(zs[8] == std::vector<double>{3, 0, 3, 0});

  for (const GridSpec& bad : {GridSpec{1, 1, 3}, GridSpec{0, 4, 3}, GridSpec{-1, 0, 3}, GridSpec{0, 1, 1},
                              GridSpec{0, 1, 3, 1.0, 1.0}}) {
    CHECK_THROWS_AS(grid_codes(bad, 4), ConfigError);
  }
}

TEST_CASE("decode grid") {
  const Cvae<float> model(tiny_config());
  GridSpec s;
  s.g = 3;
  const auto vols = decode_grid(model, s);
  REQUIRE(vols.size() == 9);
  for (const auto& v : vols) CHECK(v.dims() == Dims{8, 8, 8});
  const std::vector<double> zero(3, 0.0);
  const auto centre = decode(model, zero);
  const auto a = vols[4].data(), b = centre.data();
  CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  const auto again = decode_grid(model, s);
  for (std::size_t i = 0; i < vols.size(); ++i) {
    const auto x = vols[i].data(), y = again[i].data();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
}

TEST_CASE("slices") {
  const Dims d{4, 5, 6};
  const auto v = ramp(d, 1.0f);
  const auto ax = extract_slice(v, SliceAxis::Axial, 2);
  CHECK(ax.width == 4);
  CHECK(ax.height == 5);
  CHECK(ax.values[3 * 4 + 1] == v.at(1, 3, 2));
  const auto co = extract_slice(v, SliceAxis::Coronal, 4);
  CHECK(co.width == 4);
  CHECK(co.height == 6);
  CHECK(co.values[5 * 4 + 2] == v.at(2, 4, 5));
  const auto sa = extract_slice(v, SliceAxis::Sagittal, 3);
  CHECK(sa.width == 5);
  CHECK(sa.height == 6);
  CHECK(sa.values[1 * 5 + 4] == v.at(3, 4, 1));
  CHECK_THROWS_AS(extract_slice(v, SliceAxis::Axial, 6), ShapeError);
  CHECK_THROWS_AS(extract_slice(v, SliceAxis::Sagittal, -1), ShapeError);
}

TEST_CASE("montage tiling and window") {
  const Dims d{8, 8, 3};
  std::vector<Volume> vols;
  for (int i = 0; i < 4; ++i) vols.push_back(ramp(d, 0.5f + static_cast<float>(i)));
  const auto img = montage(vols, 2, SliceAxis::Axial, 1);
  CHECK(img.width == 16);
  CHECK(img.height == 16);
  // Global window: the brightest voxel of tile (1,1) maps to 255, zeros to 0.
  float hi = 0.0f;
  for (const auto& v : vols)
    for (float x : extract_slice(v, SliceAxis::Axial, 1).values) hi = std::max(hi, x);
  const auto s00 = extract_slice(vols[0], SliceAxis::Axial, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const float val = s00.values[y * 8 + x];
      CHECK(img.at(x, y) == static_cast<int>(std::lround(val / hi * 255.0)));
    }
  const auto s11 = extract_slice(vols[3], SliceAxis::Axial, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) CHECK(img.at(8 + x, 8 + y) == static_cast<int>(std::lround(s11.values[y * 8 + x] / hi * 255.0)));

  std::vector<Volume> zeros(4, Volume::zeros(d));
  const auto black = montage(zeros, 2, SliceAxis::Axial, 0);
  for (auto p : black.pixels) CHECK(p == 0);
  CHECK(montage(vols, 2, SliceAxis::Axial, 1).pixels == img.pixels);

  CHECK_THROWS_AS(montage(vols, 3, SliceAxis::Axial, 0), ShapeError);
  CHECK_THROWS_AS(montage(vols, 2, SliceAxis::Axial, 3), ShapeError);
  vols[2] = Volume::zeros({8, 8, 4});
  CHECK_THROWS_AS(montage(vols, 2, SliceAxis::Axial, 0), ShapeError);
}

TEST_CASE("png round trip") {
  TempDir dir;
  Image img;
  img.width = 5;
  img.height = 3;
  for (int i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  write_png(img, dir.path / "m.png");
  const auto back = read_png(dir.path / "m.png");
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.pixels == img.pixels);
  std::ofstream(dir.path / "bad.png") << "not a png";
  CHECK_THROWS_AS(read_png(dir.path / "bad.png"), FormatError);
}

TEST_CASE("centroid slice") {
  const Dims d{6, 6, 6};
  std::vector<std::uint8_t> m(d.voxels(), 0);
  m[(4 * 6 + 1) * 6 + 2] = 1;  // z=4, y=1, x=2
  m[(2 * 6 + 3) * 6 + 2] = 1;  // z=2, y=3, x=2
  const Mask mask(d, m);
  CHECK(centroid_slice(mask, SliceAxis::Axial) == 3);
  CHECK(centroid_slice(mask, SliceAxis::Coronal) == 2);
  CHECK(centroid_slice(mask, SliceAxis::Sagittal) == 2);
  CHECK_THROWS_AS(centroid_slice(Mask::filled(d, false), SliceAxis::Axial), DataError);
}

TEST_CASE("tile means and csv") {
  TempDir dir;
  const Dims d{4, 4, 4};
  std::vector<Volume> vols;
  for (int i = 0; i < 4; ++i) vols.push_back(Volume(d, Spacing{}, std::vector<float>(d.voxels(), static_cast<float>(i))));
  const auto means = tile_means(vols, Mask::filled(d, true));
  CHECK(means == std::vector<double>{0, 1, 2, 3});
  GridSpec s;
  s.g = 2;
  write_tile_csv(s, means, dir.path / "t.csv");
  std::ifstream in(dir.path / "t.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "row,col,z_1,z_0,striatal_mean");
  std::getline(in, line);
  CHECK(line == "0,0,-3,-3,0");
}

TEST_CASE("monotone fraction") {
  // Means increase along columns in every row, with tiny non-monotone row noise.
  const int g = 5;
  std::vector<double> m(g * g);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) m[i * g + j] = 2.0 * j + 0.01 * ((i * 7 + j * 3) % 5);
  auto r = monotone_fraction(m, g);
  CHECK(r.axis == 0);
  CHECK(r.fraction == 1.0);
  // Break one row.
  m[2 * g + 3] = 100.0;
  r = monotone_fraction(m, g);
  CHECK(r.fraction == doctest::Approx(0.8));
  // Transposed table: dominant axis switches.
  std::vector<double> t(g * g);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) t[j * g + i] = -3.0 * j;
  CHECK(monotone_fraction(t, g).axis == 1);
  CHECK(monotone_fraction(t, g).fraction == 1.0);
  CHECK_THROWS_AS(monotone_fraction(t, 4), ShapeError);
}

TEST_CASE("latent ranking by correlation") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> mu;
  std::vector<double> f;
  for (int i = 0; i < 300; ++i) {
    const double a = g(rng);
    f.push_back(a);
    mu.push_back({g(rng), -2.0 * a + 0.1 * g(rng), 0.5 * a + g(rng)});
  }
  CHECK(rank_by_correlation(mu, f) == std::vector<int>{1, 2, 0});
  CHECK_THROWS_AS(rank_by_correlation(mu, std::vector<double>{1.0}), ShapeError);
}
