#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "protolab/image.hpp"

namespace protolab {

// Channel-major float tensor (C x H x W).
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const {
    return data[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
  bool empty() const { return data.empty(); }
};

// Spatial feature map z, stored patch-contiguous (H x W x D).
struct LatentMap {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<float> values;

  int num_patches() const { return height * width; }
  std::span<const float> patch(int index) const {
    return {values.data() + static_cast<std::size_t>(index) * depth, static_cast<std::size_t>(depth)};
  }
  std::span<const float> patch(int row, int col) const { return patch(row * width + col); }
};

LatentMap to_latent(const Tensor& chw);
// Gradient w.r.t. a LatentMap (H x W x D, double) back to C x H x W.
Tensor latent_grad_to_tensor(const std::vector<double>& grad, int height, int width, int depth);

// Pixel normalization used by the network input: (v/255 - 0.5) / 0.25.
inline constexpr float kInputLow = -2.0f;
inline constexpr float kInputHigh = 2.0f;
Tensor image_to_tensor(const Image& image);

// 3x3 convolution, stride 1, zero padding 1.
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<float> weight;  // out x (in * 9), row-major
  std::vector<float> bias;    // out

  static constexpr int kKernel = 3;
  int fan_in() const { return in_channels * kKernel * kKernel; }

  Tensor forward(const Tensor& x) const;
  // Accumulates parameter gradients; writes the input gradient if `dx` is set.
  void backward(const Tensor& x, const Tensor& dy, std::vector<float>& dweight,
                std::vector<float>& dbias, Tensor* dx) const;
};

// im2col / col2im for 3x3, pad 1. The column matrix is (C*9) x (H*W), row-major.
std::vector<float> im2col(const Tensor& x);
Tensor col2im(const std::vector<float>& col, int channels, int height, int width);

struct BlockTrace {
  Tensor input;
  Tensor pre_activation;  // conv output
  Tensor activation;      // after ReLU
  Tensor pooled;          // after 2x2 max pool
  std::vector<int> pool_argmax;  // flat index into activation per pooled element
};

// Every intermediate of one forward pass; needed for backprop and relevance propagation.
struct ExtractorTrace {
  Tensor input;
  std::vector<BlockTrace> blocks;

  bool empty() const { return blocks.empty(); }
  const Tensor& output() const { return blocks.back().pooled; }
};

struct ExtractorConfig {
  std::vector<int> channels{8, 16, 32, 64};
  int input_size = 128;
};

struct ExtractorGrads {
  std::vector<std::vector<float>> weight;
  std::vector<std::vector<float>> bias;
  void zero();
  void scale(float factor);
};

// Stack of conv3x3 -> ReLU -> maxpool2 blocks.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const ExtractorConfig& config, std::uint64_t seed);

  const ExtractorConfig& config() const { return config_; }
  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }

  int latent_size() const;
  int latent_depth() const { return config_.channels.back(); }
  // Pixel stride of one latent cell.
  int cell_size() const { return config_.input_size / latent_size(); }

  ExtractorTrace forward(const Tensor& input) const;
  ExtractorTrace forward(const Image& image) const { return forward(image_to_tensor(image)); }
  LatentMap encode(const Image& image) const { return to_latent(forward(image).output()); }

  ExtractorGrads make_grads() const;
  void backward(const ExtractorTrace& trace, const Tensor& grad_output, ExtractorGrads& grads) const;

  bool operator==(const FeatureExtractor& other) const;

 private:
  ExtractorConfig config_;
  std::vector<ConvLayer> layers_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  long step = 0;

  void update(std::span<T> params, std::span<const T> grads, const AdamConfig& cfg) {
    if (m.size() != params.size()) {
      m.assign(params.size(), T{0});
      v.assign(params.size(), T{0});
    }
    ++step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g);
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      params[i] = static_cast<T>(params[i] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
};

}  // namespace protolab
