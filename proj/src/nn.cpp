#include "protolab/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <random>
#include <stdexcept>

namespace protolab {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

constexpr int kK = ConvLayer::kKernel;

}  // namespace

LatentMap to_latent(const Tensor& chw) {
  LatentMap z;
  z.height = chw.height;
  z.width = chw.width;
  z.depth = chw.channels;
  z.values.resize(chw.data.size());
  const std::size_t plane = chw.plane();
  for (int c = 0; c < chw.channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      z.values[p * chw.channels + c] = chw.data[c * plane + p];
    }
  }
  return z;
}

Tensor latent_grad_to_tensor(const std::vector<double>& grad, int height, int width, int depth) {
  Tensor t(depth, height, width);
  const std::size_t plane = t.plane();
  for (int c = 0; c < depth; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      t.data[c * plane + p] = static_cast<float>(grad[p * depth + c]);
    }
  }
  return t;
}

Tensor image_to_tensor(const Image& image) {
  Tensor t(3, image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        t.at(c, y, x) = (image.at(y, x, c) / 255.0f - 0.5f) / 0.25f;
      }
    }
  }
  return t;
}

std::vector<float> im2col(const Tensor& x) {
  const int H = x.height, W = x.width;
  const std::size_t hw = x.plane();
  std::vector<float> col(static_cast<std::size_t>(x.channels) * kK * kK * hw, 0.0f);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.data.data() + c * hw;
    for (int ky = 0; ky < kK; ++ky) {
      for (int kx = 0; kx < kK; ++kx) {
        float* dst = col.data() + ((static_cast<std::size_t>(c) * kK + ky) * kK + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const int x_begin = std::max(0, -dx);
          const int x_end = std::min(W, W - dx);
          const float* srow = src + static_cast<std::size_t>(sy) * W + dx;
          float* drow = dst + static_cast<std::size_t>(y) * W;
          for (int xx = x_begin; xx < x_end; ++xx) drow[xx] = srow[xx];
        }
      }
    }
  }
  return col;
}

Tensor col2im(const std::vector<float>& col, int channels, int height, int width) {
  Tensor x(channels, height, width);
  const std::size_t hw = x.plane();
  for (int c = 0; c < channels; ++c) {
    float* dst = x.data.data() + c * hw;
    for (int ky = 0; ky < kK; ++ky) {
      for (int kx = 0; kx < kK; ++kx) {
        const float* src = col.data() + ((static_cast<std::size_t>(c) * kK + ky) * kK + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < height; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= height) continue;
          const int x_begin = std::max(0, -dx);
          const int x_end = std::min(width, width - dx);
          float* drow = dst + static_cast<std::size_t>(sy) * width + dx;
          const float* srow = src + static_cast<std::size_t>(y) * width;
          for (int xx = x_begin; xx < x_end; ++xx) drow[xx] += srow[xx];
        }
      }
    }
  }
  return x;
}

Tensor ConvLayer::forward(const Tensor& x) const {
  if (x.channels != in_channels) throw std::invalid_argument("conv input channel mismatch");
  const auto col = im2col(x);
  Tensor y(out_channels, x.height, x.width);
  const auto hw = static_cast<Eigen::Index>(x.plane());
  ConstMatrixMap w(weight.data(), out_channels, fan_in());
  ConstMatrixMap c(col.data(), fan_in(), hw);
  MatrixMap out(y.data.data(), out_channels, hw);
  out.noalias() = w * c;
  for (int o = 0; o < out_channels; ++o) out.row(o).array() += bias[o];
  return y;
}

void ConvLayer::backward(const Tensor& x, const Tensor& dy, std::vector<float>& dweight,
                         std::vector<float>& dbias, Tensor* dx) const {
  const auto col = im2col(x);
  const auto hw = static_cast<Eigen::Index>(x.plane());
  ConstMatrixMap c(col.data(), fan_in(), hw);
  ConstMatrixMap g(dy.data.data(), out_channels, hw);
  MatrixMap dw(dweight.data(), out_channels, fan_in());
  dw.noalias() += g * c.transpose();
  // A sequential sum: Eigen's vectorized reduction peels by buffer alignment,
  // which made retraining depend on where the heap put dy.
  for (int o = 0; o < out_channels; ++o) {
    float s = 0.0f;
    for (Eigen::Index k = 0; k < hw; ++k) s += g(o, k);
    dbias[o] += s;
  }
  if (dx) {
    ConstMatrixMap w(weight.data(), out_channels, fan_in());
    std::vector<float> dcol(static_cast<std::size_t>(fan_in()) * hw);
    MatrixMap dc(dcol.data(), fan_in(), hw);
    dc.noalias() = w.transpose() * g;
    *dx = col2im(dcol, in_channels, x.height, x.width);
  }
}

void ExtractorGrads::zero() {
  for (auto& w : weight) std::fill(w.begin(), w.end(), 0.0f);
  for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0f);
}

void ExtractorGrads::scale(float factor) {
  for (auto& w : weight) for (auto& v : w) v *= factor;
  for (auto& b : bias) for (auto& v : b) v *= factor;
}

FeatureExtractor::FeatureExtractor(const ExtractorConfig& config, std::uint64_t seed)
    : config_(config) {
  if (config.channels.empty()) throw std::invalid_argument("extractor needs at least one block");
  const int downsample = 1 << config.channels.size();
  if (config.input_size % downsample != 0) {
    throw std::invalid_argument("input size must be divisible by 2^blocks");
  }
  std::mt19937_64 rng(seed);
  int in = 3;
  for (int out : config.channels) {
    ConvLayer layer;
    layer.in_channels = in;
    layer.out_channels = out;
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(layer.fan_in())));
    layer.weight.resize(static_cast<std::size_t>(out) * layer.fan_in());
    for (auto& w : layer.weight) w = dist(rng);
    layer.bias.assign(static_cast<std::size_t>(out), 0.0f);
    layers_.push_back(std::move(layer));
    in = out;
  }
}

int FeatureExtractor::latent_size() const {
  return config_.input_size >> static_cast<int>(config_.channels.size());
}

ExtractorTrace FeatureExtractor::forward(const Tensor& input) const {
  if (input.channels != 3 || input.height != config_.input_size || input.width != config_.input_size) {
    throw std::invalid_argument("image shape does not match the extractor input size");
  }
  ExtractorTrace trace;
  trace.input = input;
  const Tensor* x = &trace.input;
  trace.blocks.reserve(layers_.size());
  for (const auto& layer : layers_) {
    BlockTrace b;
    b.input = *x;
    b.pre_activation = layer.forward(b.input);
    b.activation = b.pre_activation;
    for (auto& v : b.activation.data) v = v > 0.0f ? v : 0.0f;

    const Tensor& a = b.activation;
    Tensor pooled(a.channels, a.height / 2, a.width / 2);
    b.pool_argmax.resize(pooled.data.size());
    for (int c = 0; c < a.channels; ++c) {
      for (int y = 0; y < pooled.height; ++y) {
        for (int xx = 0; xx < pooled.width; ++xx) {
          float best = -std::numeric_limits<float>::infinity();
          int best_idx = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int yy = 2 * y + dy, xi = 2 * xx + dx;
              const float v = a.at(c, yy, xi);
              if (v > best) {
                best = v;
                best_idx = c * static_cast<int>(a.plane()) + yy * a.width + xi;
              }
            }
          }
          const std::size_t o = c * pooled.plane() + static_cast<std::size_t>(y) * pooled.width + xx;
          pooled.data[o] = best;
          b.pool_argmax[o] = best_idx;
        }
      }
    }
    b.pooled = std::move(pooled);
    trace.blocks.push_back(std::move(b));
    x = &trace.blocks.back().pooled;
  }
  return trace;
}

ExtractorGrads FeatureExtractor::make_grads() const {
  ExtractorGrads g;
  for (const auto& l : layers_) {
    g.weight.emplace_back(l.weight.size(), 0.0f);
    g.bias.emplace_back(l.bias.size(), 0.0f);
  }
  return g;
}

void FeatureExtractor::backward(const ExtractorTrace& trace, const Tensor& grad_output,
                                ExtractorGrads& grads) const {
  if (trace.blocks.size() != layers_.size()) throw std::invalid_argument("trace does not match extractor");
  Tensor grad = grad_output;
  for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
    const BlockTrace& b = trace.blocks[i];
    Tensor d_act(b.activation.channels, b.activation.height, b.activation.width);
    for (std::size_t o = 0; o < grad.data.size(); ++o) d_act.data[b.pool_argmax[o]] += grad.data[o];
    for (std::size_t k = 0; k < d_act.data.size(); ++k) {
      if (b.pre_activation.data[k] <= 0.0f) d_act.data[k] = 0.0f;
    }
    Tensor dx;
    layers_[i].backward(b.input, d_act, grads.weight[i], grads.bias[i], i > 0 ? &dx : nullptr);
    grad = std::move(dx);
  }
}

bool FeatureExtractor::operator==(const FeatureExtractor& other) const {
  if (config_.channels != other.config_.channels || config_.input_size != other.config_.input_size) {
    return false;
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].weight != other.layers_[i].weight || layers_[i].bias != other.layers_[i].bias) {
      return false;
    }
  }
  return true;
}

}  // namespace protolab
