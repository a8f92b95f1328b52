#include <cmath>
#include <cstdint>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "protolab/nn.hpp"

using namespace protolab;

namespace {

Tensor random_tensor(std::mt19937_64& rng, int c, int h, int w, float lo = -2.0f, float hi = 2.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(c, h, w);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Direct 3x3 / pad 1 convolution in double.
std::vector<double> naive_conv(const ConvLayer& l, const std::vector<double>& x, int H, int W) {
  std::vector<double> y(static_cast<std::size_t>(l.out_channels) * H * W);
  for (int o = 0; o < l.out_channels; ++o) {
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        double acc = l.bias[o];
        for (int i = 0; i < l.in_channels; ++i) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int sr = r + ky - 1, sc = c + kx - 1;
              if (sr < 0 || sc < 0 || sr >= H || sc >= W) continue;
              acc += l.weight[o * l.fan_in() + i * 9 + ky * 3 + kx] * x[(i * H + sr) * W + sc];
            }
          }
        }
        y[(o * H + r) * W + c] = acc;
      }
    }
  }
  return y;
}

// Whole extractor in double: conv, relu, 2x2 max pool per block.
std::vector<double> naive_forward(const FeatureExtractor& fx, const Tensor& input) {
  std::vector<double> x(input.data.begin(), input.data.end());
  int H = input.height, W = input.width;
  for (const auto& l : fx.layers()) {
    auto y = naive_conv(l, x, H, W);
    for (auto& v : y) v = std::max(v, 0.0);
    std::vector<double> p(static_cast<std::size_t>(l.out_channels) * (H / 2) * (W / 2));
    for (int o = 0; o < l.out_channels; ++o) {
      for (int r = 0; r < H / 2; ++r) {
        for (int c = 0; c < W / 2; ++c) {
          double m = -1e300;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) m = std::max(m, y[(o * H + 2 * r + dy) * W + 2 * c + dx]);
          }
          p[(o * (H / 2) + r) * (W / 2) + c] = m;
        }
      }
    }
    x = std::move(p);
    H /= 2;
    W /= 2;
  }
  return x;
}

}  // namespace

ConvLayer random_conv(std::mt19937_64& rng, int in, int out) {
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  ConvLayer l;
  l.in_channels = in;
  l.out_channels = out;
  l.weight.resize(static_cast<std::size_t>(out) * in * 9);
  l.bias.resize(static_cast<std::size_t>(out));
  for (auto& w : l.weight) w = u(rng);
  for (auto& b : l.bias) b = u(rng);
  return l;
}

TEST_CASE("conv forward matches a direct convolution") {
  std::mt19937_64 rng(1);
  const auto l = random_conv(rng, 3, 5);
  const auto x = random_tensor(rng, 3, 9, 7);
  const auto y = l.forward(x);
  const auto ref = naive_conv(l, std::vector<double>(x.data.begin(), x.data.end()), 9, 7);
  REQUIRE(y.data.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref[i]).epsilon(1e-5));
}

TEST_CASE("conv backward matches direct sums") {
  std::mt19937_64 rng(2);
  const auto l = random_conv(rng, 2, 3);
  const int H = 6, W = 5;
  const auto x = random_tensor(rng, 2, H, W);
  const auto g = random_tensor(rng, 3, H, W);
  std::vector<float> dw(l.weight.size(), 0.0f), db(l.bias.size(), 0.0f);
  Tensor dx;
  l.backward(x, g, dw, db, &dx);
  for (int o = 0; o < 3; ++o) {
    double bsum = 0.0;
    for (int p = 0; p < H * W; ++p) bsum += g.data[o * H * W + p];
    CHECK(db[o] == doctest::Approx(bsum).epsilon(1e-5));
    for (int i = 0; i < 2; ++i) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          double acc = 0.0;
          for (int r = 0; r < H; ++r) {
            for (int c = 0; c < W; ++c) {
              const int sr = r + ky - 1, sc = c + kx - 1;
              if (sr < 0 || sc < 0 || sr >= H || sc >= W) continue;
              acc += g.at(o, r, c) * x.at(i, sr, sc);
            }
          }
          CHECK(dw[o * 18 + i * 9 + ky * 3 + kx] == doctest::Approx(acc).epsilon(1e-4));
        }
      }
    }
  }
  for (int i = 0; i < 2; ++i) {
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        double acc = 0.0;
        for (int o = 0; o < 3; ++o) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int yr = r - ky + 1, yc = c - kx + 1;
              if (yr < 0 || yc < 0 || yr >= H || yc >= W) continue;
              acc += g.at(o, yr, yc) * l.weight[o * 18 + i * 9 + ky * 3 + kx];
            }
          }
        }
        CHECK(dx.at(i, r, c) == doctest::Approx(acc).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("conv backward does not depend on buffer alignment") {
  std::mt19937_64 rng(5);
  const auto l = random_conv(rng, 2, 3);
  const auto x = random_tensor(rng, 2, 16, 16);
  const auto g = random_tensor(rng, 3, 16, 16);
  std::vector<float> ref_w(l.weight.size(), 0.0f), ref_b(l.bias.size(), 0.0f);
  l.backward(x, g, ref_w, ref_b, nullptr);
  // Odd-sized allocations shift where the next copy of dy lands.
  std::vector<std::vector<char>> junk;
  bool seen[2] = {false, false};
  for (int i = 1; i < 64; ++i) {
    junk.emplace_back(static_cast<std::size_t>(i * 8 + 8));
    const Tensor copy = g;
    seen[(reinterpret_cast<std::uintptr_t>(copy.data.data()) / 16) % 2] = true;
    std::vector<float> dw(l.weight.size(), 0.0f), db(l.bias.size(), 0.0f);
    l.backward(x, copy, dw, db, nullptr);
    CHECK(dw == ref_w);
    CHECK(db == ref_b);
  }
  CHECK((seen[0] && seen[1]));
}

TEST_CASE("im2col and col2im are adjoint") {
  std::mt19937_64 rng(3);
  const auto x = random_tensor(rng, 2, 5, 4);
  const auto col = im2col(x);
  std::vector<float> y(col.size());
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : y) v = u(rng);
  double lhs = 0.0;
  for (std::size_t i = 0; i < col.size(); ++i) lhs += double(col[i]) * y[i];
  const auto back = col2im(y, 2, 5, 4);
  double rhs = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) rhs += double(x.data[i]) * back.data[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("extractor forward matches a double-precision oracle") {
  ExtractorConfig cfg;
  cfg.channels = {3, 4, 5};
  cfg.input_size = 16;
  FeatureExtractor fx(cfg, 7);
  std::mt19937_64 rng(4);
  const auto x = random_tensor(rng, 3, 16, 16);
  const auto trace = fx.forward(x);
  const auto ref = naive_forward(fx, x);
  REQUIRE(trace.output().data.size() == ref.size());
  CHECK(trace.output().height == 2);
  CHECK(fx.latent_size() == 2);
  CHECK(fx.latent_depth() == 5);
  CHECK(fx.cell_size() == 8);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(trace.output().data[i] == doctest::Approx(ref[i]).epsilon(1e-4));
}

TEST_CASE("extractor backward matches finite differences of the double oracle") {
  ExtractorConfig cfg;
  cfg.channels = {2, 3};
  cfg.input_size = 8;
  FeatureExtractor fx(cfg, 11);
  std::mt19937_64 rng(5);
  const auto x = random_tensor(rng, 3, 8, 8);
  const auto trace = fx.forward(x);
  const auto g = random_tensor(rng, 3, 2, 2, -1.0f, 1.0f);
  auto grads = fx.make_grads();
  fx.backward(trace, g, grads);

  auto loss = [&](const FeatureExtractor& f) {
    const auto out = naive_forward(f, x);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * g.data[i];
    return s;
  };
  int checked = 0, good = 0;
  for (std::size_t layer = 0; layer < fx.layers().size(); ++layer) {
    for (std::size_t k = 0; k < fx.layers()[layer].weight.size(); ++k) {
      auto plus = fx, minus = fx;
      const float h = 1e-3f;
      plus.layers()[layer].weight[k] += h;
      minus.layers()[layer].weight[k] -= h;
      const double numeric = (loss(plus) - loss(minus)) / (2.0 * h);
      const double analytic = grads.weight[layer][k];
      ++checked;
      // Parameter nudges can cross ReLU / max-pool kinks; those few are not held against the gradient.
      good += std::abs(numeric - analytic) <= 1e-3 + 1e-2 * std::abs(numeric);
    }
  }
  CHECK(good >= checked * 95 / 100);
}

TEST_CASE("image normalization range") {
  Image img(128, 128, Rgb{0, 255, 128});
  const auto t = image_to_tensor(img);
  CHECK(t.at(0, 0, 0) == doctest::Approx(kInputLow));
  CHECK(t.at(1, 0, 0) == doctest::Approx(kInputHigh));
  CHECK(t.at(2, 5, 5) == doctest::Approx((128.0 / 255.0 - 0.5) / 0.25));
}

TEST_CASE("latent layout conversion") {
  Tensor t(2, 2, 3);
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(i);
  const auto z = to_latent(t);
  CHECK(z.depth == 2);
  CHECK(z.num_patches() == 6);
  CHECK(z.patch(1, 2)[0] == t.at(0, 1, 2));
  CHECK(z.patch(1, 2)[1] == t.at(1, 1, 2));
  std::vector<double> grad(z.values.begin(), z.values.end());
  const auto back = latent_grad_to_tensor(grad, 2, 3, 2);
  CHECK(back.data == t.data);
}

TEST_CASE("adam first step") {
  std::vector<double> params{1.0, -2.0, 0.5};
  const std::vector<double> grads{0.3, -0.1, 0.0};
  AdamState<double> state;
  AdamConfig cfg;
  cfg.lr = 0.01;
  state.update(params, grads, cfg);
  // First bias-corrected step is lr * g / (|g| + eps).
  CHECK(params[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)));
  CHECK(params[1] == doctest::Approx(-2.0 + 0.01 * 0.1 / (0.1 + 1e-8)));
  CHECK(params[2] == 0.5);
}

TEST_CASE("extractor init is seeded") {
  ExtractorConfig cfg;
  CHECK(FeatureExtractor(cfg, 1) == FeatureExtractor(cfg, 1));
  CHECK_FALSE(FeatureExtractor(cfg, 1) == FeatureExtractor(cfg, 2));
}
