#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "pdlatent/error.hpp"
#include "pdlatent/nn/adam.hpp"
#include "pdlatent/nn/autograd.hpp"

using namespace pdlatent;
using namespace pdlatent::nn;
using gradcheck::random_tensor;

namespace {

LayerSpec conv_spec(int cin, int cout, int k, int s, int p) {
  LayerSpec spec;
  spec.kind = LayerKind::Conv3d;
  spec.in_channels = cin;
  spec.out_channels = cout;
  spec.kernel = k;
  spec.stride = s;
  spec.padding = p;
  return spec;
}

LayerSpec convt_spec(int cin, int cout, int k, int s, int p, Size3 op) {
  LayerSpec spec = conv_spec(cin, cout, k, s, p);
  spec.kind = LayerKind::ConvTranspose3d;
  spec.output_padding = op;
  return spec;
}

// Direct-loop cross-correlation, used as the oracle for the im2col path.
Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                            const LayerSpec& s) {
  const int n = x.dim(0), ci = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const int co = s.out_channels, k = s.kernel;
  const Size3 o = s.output_size({d, h, wd});
  Tensor<double> y({n, co, o[0], o[1], o[2]});
  auto xi = [&](int a, int c, int z, int yy, int xx) {
    return x[(((static_cast<std::size_t>(a) * ci + c) * d + z) * h + yy) * wd + xx];
  };
  std::size_t idx = 0;
  for (int a = 0; a < n; ++a)
    for (int c = 0; c < co; ++c)
      for (int oz = 0; oz < o[0]; ++oz)
        for (int oy = 0; oy < o[1]; ++oy)
          for (int ox = 0; ox < o[2]; ++ox) {
            double acc = b[c];
            for (int q = 0; q < ci; ++q)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    const int z = oz * s.stride - s.padding + kz;
                    const int yy = oy * s.stride - s.padding + ky;
                    const int xx = ox * s.stride - s.padding + kx;
                    if (z < 0 || z >= d || yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                    acc += xi(a, q, z, yy, xx) * w[(((static_cast<std::size_t>(c) * ci + q) * k + kz) * k + ky) * k + kx];
                  }
            y[idx++] = acc;
          }
  return y;
}

// Scatter form of the transposed convolution: every input voxel stamps its kernel.
Tensor<double> naive_convt3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                             const LayerSpec& s) {
  const int n = x.dim(0), ci = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const int co = s.out_channels, k = s.kernel;
  const Size3 o = s.output_size({d, h, wd});
  Tensor<double> y({n, co, o[0], o[1], o[2]});
  auto yi = [&](int a, int c, int z, int yy, int xx) -> double& {
    return y[(((static_cast<std::size_t>(a) * co + c) * o[0] + z) * o[1] + yy) * o[2] + xx];
  };
  for (int a = 0; a < n; ++a)
    for (int c = 0; c < co; ++c)
      for (int z = 0; z < o[0]; ++z)
        for (int yy = 0; yy < o[1]; ++yy)
          for (int xx = 0; xx < o[2]; ++xx) yi(a, c, z, yy, xx) = b[c];
  for (int a = 0; a < n; ++a)
    for (int q = 0; q < ci; ++q)
      for (int iz = 0; iz < d; ++iz)
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < wd; ++ix) {
            const double v = x[(((static_cast<std::size_t>(a) * ci + q) * d + iz) * h + iy) * wd + ix];
            for (int c = 0; c < co; ++c)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    const int z = iz * s.stride - s.padding + kz;
                    const int yy = iy * s.stride - s.padding + ky;
                    const int xx = ix * s.stride - s.padding + kx;
                    if (z < 0 || z >= o[0] || yy < 0 || yy >= o[1] || xx < 0 || xx >= o[2]) continue;
                    yi(a, c, z, yy, xx) +=
                        v * w[(((static_cast<std::size_t>(q) * co + c) * k + kz) * k + ky) * k + kx];
                  }
          }
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv3d output size on the full-scale grid") {
  const LayerSpec spec = conv_spec(1, 32, 3, 2, 1);
  CHECK(spec.output_size({91, 109, 91}) == Size3{46, 55, 46});
  Tensor<float> x({1, 1, 91, 109, 91}, 0.5f);
  Tensor<float> w(spec.weight_shape());
  Tensor<float> b({32});
  const auto y = conv3d_forward(x, w, b, spec);
  CHECK(y.shape() == Shape{1, 32, 46, 55, 46});
  for (float v : y.data()) REQUIRE(v == 0.0f);
}

TEST_CASE("conv3d of ones with a ones kernel gives 27") {
  const LayerSpec spec = conv_spec(1, 1, 3, 1, 0);
  const auto y = conv3d_forward(Tensor<float>({1, 1, 3, 3, 3}, 1.0f), Tensor<float>({1, 1, 3, 3, 3}, 1.0f),
                                Tensor<float>({1}), spec);
  REQUIRE(y.size() == 1);
  CHECK(y[0] == 27.0f);
}

TEST_CASE("conv3d matches the direct-loop oracle") {
  std::mt19937_64 rng(1);
  for (const auto& spec : {conv_spec(2, 3, 3, 2, 1), conv_spec(3, 2, 3, 1, 1), conv_spec(1, 4, 2, 2, 0)}) {
    const auto x = random_tensor<double>({2, spec.in_channels, 5, 6, 7}, rng);
    const auto w = random_tensor<double>(spec.weight_shape(), rng);
    const auto b = random_tensor<double>({spec.out_channels}, rng);
    CHECK(max_abs_diff(conv3d_forward(x, w, b, spec), naive_conv3d(x, w, b, spec)) < 1e-12);
  }
}

TEST_CASE("conv_transpose3d output sizes") {
  CHECK(conv_transpose_output_size(6, 3, 2, 1, 1) == 12);
  CHECK(conv_transpose_output_size(6, 3, 2, 1, 0) == 11);
  const LayerSpec spec = convt_spec(2, 1, 3, 2, 1, {1, 0, 1});
  CHECK(spec.output_size({6, 6, 6}) == Size3{12, 11, 12});
}

TEST_CASE("conv_transpose3d with zero weights is zero") {
  const LayerSpec spec = convt_spec(2, 3, 3, 2, 1, {1, 1, 1});
  const auto y = conv_transpose3d_forward(Tensor<float>({1, 2, 4, 4, 4}, 2.0f), Tensor<float>(spec.weight_shape()),
                                          Tensor<float>({3}), spec);
  CHECK(y.shape() == Shape{1, 3, 8, 8, 8});
  for (float v : y.data()) REQUIRE(v == 0.0f);
}

TEST_CASE("conv_transpose3d matches the scatter oracle") {
  std::mt19937_64 rng(2);
  for (const auto& spec : {convt_spec(2, 3, 3, 2, 1, {1, 0, 1}), convt_spec(3, 1, 3, 1, 1, {0, 0, 0}),
                           convt_spec(1, 2, 2, 2, 0, {1, 1, 0})}) {
    const auto x = random_tensor<double>({2, spec.in_channels, 3, 4, 5}, rng);
    const auto w = random_tensor<double>(spec.weight_shape(), rng);
    const auto b = random_tensor<double>({spec.out_channels}, rng);
    CHECK(max_abs_diff(conv_transpose3d_forward(x, w, b, spec), naive_convt3d(x, w, b, spec)) < 1e-12);
  }
}

TEST_CASE("conv then matched transposed conv restores spatial dims") {
  for (const Size3 in : {Size3{32, 40, 32}, Size3{91, 109, 91}, Size3{7, 8, 9}, Size3{96, 112, 96}}) {
    const LayerSpec down = conv_spec(1, 1, 3, 2, 1);
    const Size3 mid = down.output_size(in);
    Size3 op{};
    for (int a = 0; a < 3; ++a) op[a] = in[a] - conv_transpose_output_size(mid[a], 3, 2, 1, 0);
    const LayerSpec up = convt_spec(1, 1, 3, 2, 1, op);
    CHECK_NOTHROW(up.validate());
    CHECK(up.output_size(mid) == in);
  }
}

TEST_CASE("layer spec validation") {
  CHECK_THROWS_AS(conv_spec(1, 1, 0, 1, 0).validate(), ShapeError);
  CHECK_THROWS_AS(conv_spec(1, 1, 3, 0, 0).validate(), ShapeError);
  CHECK_THROWS_AS(conv_spec(1, 1, 3, 1, -1).validate(), ShapeError);
  CHECK_THROWS_AS(convt_spec(1, 1, 3, 2, 1, {2, 0, 0}).validate(), ShapeError);
  CHECK_NOTHROW(convt_spec(1, 1, 3, 2, 1, {1, 1, 1}).validate());
}

TEST_CASE("conv shape mismatches raise") {
  const LayerSpec spec = conv_spec(2, 3, 3, 1, 1);
  CHECK_THROWS_AS(conv3d_forward(Tensor<float>({1, 1, 4, 4, 4}), Tensor<float>(spec.weight_shape()),
                                 Tensor<float>({3}), spec),
                  ShapeError);
  CHECK_THROWS_AS(conv3d_forward(Tensor<float>({1, 2, 4, 4, 4}), Tensor<float>({3, 2, 2, 2, 2}),
                                 Tensor<float>({3}), spec),
                  ShapeError);
  CHECK_THROWS_AS(linear_forward(Tensor<float>({1, 3}), Tensor<float>({2, 1}), Tensor<float>({1})), ShapeError);
}

TEST_CASE("linear examples") {
  const auto y = linear_forward(Tensor<float>({1, 2}, {1, 2}), Tensor<float>({2, 1}, {1, 1}), Tensor<float>({1}, {3}));
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y[0] == 6.0f);

  const Tensor<float> x({2, 3}, {1, -2, 3, 0.5f, 4, -6});
  Tensor<float> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[static_cast<std::size_t>(i * 3 + i)] = 1.0f;
  const auto same = linear_forward(x, eye, Tensor<float>({3}));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(same[i] == x[i]);

  const auto bias = linear_forward(Tensor<float>({2, 2}), Tensor<float>({2, 3}, 1.0f), Tensor<float>({3}, {1, 2, 3}));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) CHECK(bias[static_cast<std::size_t>(r * 3 + c)] == static_cast<float>(c + 1));
}

TEST_CASE("backward of simple forms") {
  std::mt19937_64 rng(3);
  const auto xt = random_tensor<double>({4, 5}, rng);
  const auto wt = random_tensor<double>({4, 5}, rng);

  auto w = Var<double>::parameter(wt);
  backward(sum(mul(w, Var<double>(xt))));
  for (std::size_t i = 0; i < xt.size(); ++i) CHECK(w.grad()[i] == xt[i]);

  auto w2 = Var<double>::parameter(wt);
  backward(sum(square(w2)));
  for (std::size_t i = 0; i < wt.size(); ++i) CHECK(w2.grad()[i] == doctest::Approx(2.0 * wt[i]));
}

TEST_CASE("backward on a non-scalar raises") {
  auto w = Var<float>::parameter(Tensor<float>({2, 2}, 1.0f));
  CHECK_THROWS_AS(backward(square(w)), ShapeError);
}

TEST_CASE("gradients accumulate until zero_grad") {
  auto w = Var<double>::parameter(Tensor<double>({3}, {1, 2, 3}));
  backward(sum(w));
  backward(sum(w));
  CHECK(w.grad()[1] == 2.0);
  w.zero_grad();
  CHECK(w.grad()[1] == 0.0);
}

TEST_CASE("layer gradients match finite differences") {
  std::mt19937_64 rng(4);
  using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

  SUBCASE("conv3d") {
    const LayerSpec spec = conv_spec(2, 2, 3, 2, 1);
    const std::vector<Tensor<double>> in{random_tensor<double>({2, 2, 4, 5, 3}, rng),
                                         random_tensor<double>(spec.weight_shape(), rng),
                                         random_tensor<double>({2}, rng)};
    const Fn f = [&](const auto& v) { return gradcheck::weighted_sum(conv3d(v[0], v[1], v[2], spec)); };
    CHECK(gradcheck::max_rel_error<double>(in, f) < 1e-6);
  }
  SUBCASE("conv_transpose3d") {
    const LayerSpec spec = convt_spec(2, 2, 3, 2, 1, {1, 0, 1});
    const std::vector<Tensor<double>> in{random_tensor<double>({2, 2, 3, 2, 3}, rng),
                                         random_tensor<double>(spec.weight_shape(), rng),
                                         random_tensor<double>({2}, rng)};
    const Fn f = [&](const auto& v) { return gradcheck::weighted_sum(conv_transpose3d(v[0], v[1], v[2], spec)); };
    CHECK(gradcheck::max_rel_error<double>(in, f) < 1e-6);
  }
  SUBCASE("linear") {
    const std::vector<Tensor<double>> in{random_tensor<double>({3, 7}, rng), random_tensor<double>({7, 4}, rng),
                                         random_tensor<double>({4}, rng)};
    const Fn f = [](const auto& v) { return gradcheck::weighted_sum(linear(v[0], v[1], v[2])); };
    CHECK(gradcheck::max_rel_error<double>(in, f) < 1e-6);
  }
  SUBCASE("elementwise ops") {
    // Values kept away from 0 so relu is differentiable at every probe.
    auto a = random_tensor<double>({4, 6}, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < a.size(); i += 2) a[i] = -a[i];
    const std::vector<Tensor<double>> in{a, random_tensor<double>({4, 6}, rng)};
    const Fn f = [](const auto& v) {
      auto r = relu(v[0]);
      auto e = exp(scale(v[1], 0.5));
      auto t = add(mul(r, e), square(sub(v[0], v[1])));
      return gradcheck::weighted_sum(reshape(add_scalar(t, 1.5), Shape{24}));
    };
    CHECK(gradcheck::max_rel_error<double>(in, f) < 1e-6);
  }
}

TEST_CASE("float gradients match finite differences to 1e-3") {
  std::mt19937_64 rng(5);
  const LayerSpec spec = conv_spec(1, 2, 3, 2, 1);
  const std::vector<Tensor<float>> in{random_tensor<float>({1, 1, 4, 4, 4}, rng),
                                      random_tensor<float>(spec.weight_shape(), rng), random_tensor<float>({2}, rng)};
  const std::function<Var<float>(const std::vector<Var<float>>&)> f = [&](const auto& v) {
    return gradcheck::weighted_sum(conv3d(v[0], v[1], v[2], spec));
  };
  // Loss is linear in each input, so the float difference quotient is exact up to rounding.
  CHECK(gradcheck::max_rel_error<float>(in, f, 0.25) < 1e-3);
}

TEST_CASE("adam first step moves by lr") {
  AdamState<double> st;
  Tensor<double> p({1}, {0.5});
  const Tensor<double> g({1}, {1.0});
  adam_step<double>(st, {&p}, {&g});
  CHECK(st.step == 1);
  CHECK(p[0] == doctest::Approx(0.5 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam with zero gradients leaves params and moments unchanged") {
  AdamState<float> st;
  Tensor<float> p({3}, {1, -2, 3});
  const Tensor<float> g({3});
  for (int i = 0; i < 3; ++i) adam_step<float>(st, {&p}, {&g});
  CHECK(p[0] == 1.0f);
  CHECK(p[1] == -2.0f);
  CHECK(p[2] == 3.0f);
  for (float v : st.m[0].data()) CHECK(v == 0.0f);
  for (float v : st.v[0].data()) CHECK(v == 0.0f);
}

TEST_CASE("adam first step is odd in the gradient") {
  std::mt19937_64 rng(6);
  const auto p0 = random_tensor<double>({10}, rng);
  const auto g = random_tensor<double>({10}, rng);
  Tensor<double> neg = g;
  for (auto& v : neg.data()) v = -v;
  Tensor<double> pa = p0, pb = p0;
  AdamState<double> sa, sb;
  adam_step<double>(sa, {&pa}, {&g});
  adam_step<double>(sb, {&pb}, {&neg});
  for (std::size_t i = 0; i < p0.size(); ++i) CHECK(pa[i] - p0[i] == doctest::Approx(-(pb[i] - p0[i])));
}

TEST_CASE("adam matches a hand-rolled reference over several steps") {
  std::mt19937_64 rng(7);
  Tensor<double> p = random_tensor<double>({5}, rng);
  std::vector<double> ref(p.data().begin(), p.data().end()), m(5, 0.0), v(5, 0.0);
  AdamState<double> st;
  st.options.lr = 0.01;
  for (int t = 1; t <= 6; ++t) {
    const auto g = random_tensor<double>({5}, rng);
    adam_step<double>(st, {&p}, {&g});
    for (int i = 0; i < 5; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("forward passes are bitwise deterministic") {
  std::mt19937_64 rng(8);
  const LayerSpec spec = conv_spec(3, 8, 3, 2, 1);
  const auto x = random_tensor<float>({2, 3, 9, 10, 11}, rng);
  const auto w = random_tensor<float>(spec.weight_shape(), rng);
  const auto b = random_tensor<float>({8}, rng);
  const auto y1 = conv3d_forward(x, w, b, spec);
  const auto y2 = conv3d_forward(x, w, b, spec);
  REQUIRE(y1.size() == y2.size());
  for (std::size_t i = 0; i < y1.size(); ++i) REQUIRE(std::memcmp(&y1[i], &y2[i], sizeof(float)) == 0);
}
