#include "protolab/explain.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace protolab {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double nearest_rank(std::vector<double> values, double percentile) {
  if (!(percentile >= 0.0 && percentile <= 100.0)) throw std::invalid_argument("percentile must be in [0, 100]");
  const auto idx = static_cast<std::size_t>(std::floor(percentile / 100.0 * static_cast<double>(values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx), values.end());
  return values[idx];
}

void check_heatmap(const Heatmap& h) {
  if (h.width <= 0 || h.height <= 0 || h.values.size() != static_cast<std::size_t>(h.width) * h.height) {
    throw std::invalid_argument("heatmap has inconsistent shape");
  }
  for (double v : h.values) {
    if (!std::isfinite(v)) throw std::invalid_argument("heatmap contains non-finite values");
  }
}

// Column matrix (in*9) x (H*W) of the input and of its in-bounds indicator.
MatD columns(const Tensor& x) {
  const auto col = im2col(x);
  return Eigen::Map<const MatF>(col.data(), static_cast<Eigen::Index>(x.channels) * 9,
                                static_cast<Eigen::Index>(x.plane()))
      .cast<double>();
}

MatD in_bounds(int channels, int height, int width) {
  return columns(Tensor(channels, height, width, 1.0f));
}

std::vector<double> fold(const MatD& col, int channels, int height, int width) {
  std::vector<double> out(static_cast<std::size_t>(channels) * height * width, 0.0);
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const auto row = (static_cast<Eigen::Index>(c) * 3 + ky) * 3 + kx;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < height; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= height) continue;
          for (int xx = std::max(0, -dx); xx < std::min(width, width - dx); ++xx) {
            out[c * hw + static_cast<std::size_t>(sy) * width + xx + dx] += col(row, static_cast<Eigen::Index>(y) * width + xx);
          }
        }
      }
    }
  }
  return out;
}

// Shared tail of the ratio-style rules: given z (out x P) and the matrices
// whose weighted sum forms z, push relevance back to the columns.
MatD ratio_back(const MatD& z, const Eigen::Map<const MatD>& R, double stabilizer) {
  MatD s = MatD::Zero(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double denom = z.data()[i] + (stabilizer > 0 ? (z.data()[i] >= 0 ? stabilizer : -stabilizer) : 0.0);
    if (denom != 0.0) s.data()[i] = R.data()[i] / denom;
  }
  return s;
}

// Relevance on units whose denominator vanished is spread uniformly over the
// in-bounds part of their receptive field, keeping the total intact.
void spread_orphans(const MatD& z, const Eigen::Map<const MatD>& R, const MatD& mask, MatD& rin) {
  for (Eigen::Index p = 0; p < z.cols(); ++p) {
    double orphan = 0.0;
    for (Eigen::Index o = 0; o < z.rows(); ++o) {
      if (z(o, p) == 0.0) orphan += R(o, p);
    }
    if (orphan == 0.0) continue;
    const double count = mask.col(p).sum();
    rin.col(p) += mask.col(p) * (orphan / count);
  }
}

std::vector<double> zplus_rule(const ConvLayer& layer, const Tensor& x, const std::vector<double>& relevance) {
  const auto P = static_cast<Eigen::Index>(x.plane());
  const MatD w = Eigen::Map<const MatF>(layer.weight.data(), layer.out_channels, layer.fan_in()).cast<double>();
  const MatD wp = w.cwiseMax(0.0);
  const MatD col = columns(x).cwiseMax(0.0);
  Eigen::Map<const MatD> R(relevance.data(), layer.out_channels, P);
  const MatD z = wp * col;
  const MatD s = ratio_back(z, R, 0.0);
  MatD rin = col.cwiseProduct(wp.transpose() * s);
  spread_orphans(z, R, in_bounds(x.channels, x.height, x.width), rin);
  return fold(rin, x.channels, x.height, x.width);
}

std::vector<double> zbox_rule(const ConvLayer& layer, const Tensor& x, const std::vector<double>& relevance) {
  const auto P = static_cast<Eigen::Index>(x.plane());
  const double lo = kInputLow, hi = kInputHigh;
  const MatD w = Eigen::Map<const MatF>(layer.weight.data(), layer.out_channels, layer.fan_in()).cast<double>();
  const MatD wp = w.cwiseMax(0.0);
  const MatD wn = w.cwiseMin(0.0);
  const MatD col = columns(x);
  const MatD mask = in_bounds(x.channels, x.height, x.width);
  Eigen::Map<const MatD> R(relevance.data(), layer.out_channels, P);
  // Every term x w - l w+ - h w- is nonnegative for x in [l, h].
  const MatD z = w * col - lo * (wp * mask) - hi * (wn * mask);
  const MatD s = ratio_back(z, R, 0.0);
  MatD rin = col.cwiseProduct(w.transpose() * s) - lo * mask.cwiseProduct(wp.transpose() * s) -
             hi * mask.cwiseProduct(wn.transpose() * s);
  spread_orphans(z, R, mask, rin);
  return fold(rin, x.channels, x.height, x.width);
}

std::vector<double> epsilon_rule(const ConvLayer& layer, const Tensor& x, const std::vector<double>& relevance) {
  const auto P = static_cast<Eigen::Index>(x.plane());
  const MatD w = Eigen::Map<const MatF>(layer.weight.data(), layer.out_channels, layer.fan_in()).cast<double>();
  const MatD col = columns(x);
  Eigen::Map<const MatD> R(relevance.data(), layer.out_channels, P);
  MatD z = w * col;
  for (int o = 0; o < layer.out_channels; ++o) z.row(o).array() += static_cast<double>(layer.bias[o]);
  const MatD s = ratio_back(z, R, 1e-6);
  return fold(col.cwiseProduct(w.transpose() * s), x.channels, x.height, x.width);
}

std::vector<double> contribution_rule(std::span<const float> z, std::span<const double> p, double R) {
  std::vector<double> w(z.size());
  double total = 0.0;
  for (std::size_t d = 0; d < z.size(); ++d) total += w[d] = (z[d] - p[d]) * (z[d] - p[d]);
  if (total == 0.0) {
    for (std::size_t d = 0; d < z.size(); ++d) total += w[d] = std::max(0.0f, z[d]);
  }
  if (total == 0.0) {
    std::fill(w.begin(), w.end(), 1.0);
    total = static_cast<double>(w.size());
  }
  for (auto& v : w) v *= R / total;
  return w;
}

std::vector<double> uniform_rule(std::span<const float> z, std::span<const double>, double R) {
  return std::vector<double>(z.size(), R / static_cast<double>(z.size()));
}

struct Registry {
  std::mutex mutex;
  std::map<std::string, DistanceRule> distance{{"contribution", contribution_rule}, {"uniform", uniform_rule}};
  std::map<std::string, ConvRule> conv{{"zplus", zplus_rule}, {"zbox", zbox_rule}, {"epsilon", epsilon_rule}};
};

Registry& registry() {
  static Registry r;
  return r;
}

double total(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

Heatmap upsample_map(const SimilarityMap& map, int size) {
  if (map.height <= 0 || map.width <= 0 || map.scores.size() != static_cast<std::size_t>(map.height) * map.width) {
    throw std::invalid_argument("similarity map has inconsistent shape");
  }
  if (size <= 0) throw std::invalid_argument("heatmap size must be positive");
  Heatmap h;
  h.width = h.height = size;
  h.backend = "upsample";
  h.values.resize(static_cast<std::size_t>(size) * size);
  auto coord = [size](int dst, int src_size, int& i0, int& i1, double& t) {
    double s = (dst + 0.5) * src_size / size - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_size - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, src_size - 1);
    t = s - i0;
  };
  auto at = [&](int r, int c) { return map.scores[static_cast<std::size_t>(r) * map.width + c]; };
  for (int y = 0; y < size; ++y) {
    int r0, r1;
    double ty;
    coord(y, map.height, r0, r1, ty);
    for (int x = 0; x < size; ++x) {
      int c0, c1;
      double tx;
      coord(x, map.width, c0, c1, tx);
      const double top = at(r0, c0) * (1 - tx) + at(r0, c1) * tx;
      const double bottom = at(r1, c0) * (1 - tx) + at(r1, c1) * tx;
      h.values[static_cast<std::size_t>(y) * size + x] = top * (1 - ty) + bottom * ty;
    }
  }
  return h;
}

Mask top_region(const Heatmap& heatmap, double percentile) {
  check_heatmap(heatmap);
  const double t = nearest_rank(heatmap.values, percentile);
  const double mx = *std::max_element(heatmap.values.begin(), heatmap.values.end());
  Mask m;
  m.width = heatmap.width;
  m.height = heatmap.height;
  m.bits.assign(heatmap.values.size(), false);
  bool any = false;
  for (std::size_t i = 0; i < heatmap.values.size(); ++i) {
    if (heatmap.values[i] > t) m.bits[i] = any = true;
  }
  if (!any) {
    for (std::size_t i = 0; i < heatmap.values.size(); ++i) m.bits[i] = heatmap.values[i] == mx;
  }
  return m;
}

PatchBox extract_patch(const Heatmap& heatmap, double percentile) {
  check_heatmap(heatmap);
  const auto [lo, hi] = std::minmax_element(heatmap.values.begin(), heatmap.values.end());
  if (*lo == *hi) return {0, 0, heatmap.height - 1, heatmap.width - 1, true};
  const auto region = top_region(heatmap, percentile);
  PatchBox box{heatmap.height, heatmap.width, -1, -1, false};
  for (int r = 0; r < heatmap.height; ++r) {
    for (int c = 0; c < heatmap.width; ++c) {
      if (!region.bits[static_cast<std::size_t>(r) * heatmap.width + c]) continue;
      box.top = std::min(box.top, r);
      box.left = std::min(box.left, c);
      box.bottom = std::max(box.bottom, r);
      box.right = std::max(box.right, c);
    }
  }
  return box;
}

double mass_in_mask(const Heatmap& heatmap, const Mask& mask) {
  if (mask.width != heatmap.width || mask.height != heatmap.height) {
    throw std::invalid_argument("mask and heatmap sizes differ");
  }
  double in = 0.0, all = 0.0;
  for (std::size_t i = 0; i < heatmap.values.size(); ++i) {
    const double v = std::abs(heatmap.values[i]);
    all += v;
    if (mask.bits[i]) in += v;
  }
  return all > 0.0 ? in / all : 0.0;
}

void register_distance_rule(const std::string& name, DistanceRule rule) {
  std::lock_guard lock(registry().mutex);
  registry().distance[name] = std::move(rule);
}

void register_conv_rule(const std::string& name, ConvRule rule) {
  std::lock_guard lock(registry().mutex);
  registry().conv[name] = std::move(rule);
}

const DistanceRule& distance_rule(const std::string& name) {
  std::lock_guard lock(registry().mutex);
  auto it = registry().distance.find(name);
  if (it == registry().distance.end()) throw UnknownRule("unknown distance rule '" + name + "'");
  return it->second;
}

const ConvRule& conv_rule(const std::string& name) {
  std::lock_guard lock(registry().mutex);
  auto it = registry().conv.find(name);
  if (it == registry().conv.end()) throw UnknownRule("unknown conv rule '" + name + "'");
  return it->second;
}

std::vector<std::string> conv_rule_names() {
  std::lock_guard lock(registry().mutex);
  std::vector<std::string> out;
  for (const auto& [name, rule] : registry().conv) out.push_back(name);
  return out;
}

double RelevanceAudit::max_relative_change() const {
  double worst = 0.0;
  for (std::size_t k = 1; k < totals.size(); ++k) {
    const double ref = std::abs(totals[k - 1]);
    const double diff = std::abs(totals[k] - totals[k - 1]);
    worst = std::max(worst, ref > 0.0 ? diff / ref : diff);
  }
  return worst;
}

PrpResult prp_relevance(const PrototypeModel& model, int prototype_index, const ExtractorTrace& trace,
                        const PrpRules& rules) {
  const auto& protos = model.prototypes();
  if (prototype_index < 0 || prototype_index >= static_cast<int>(protos.size())) {
    throw std::out_of_range("prototype index " + std::to_string(prototype_index) + " out of range");
  }
  if (trace.empty()) throw MissingActivations("no recorded forward activations");
  const auto& dist_rule = distance_rule(rules.distance);
  const auto& inner_rule = conv_rule(rules.conv);
  const auto& first_rule = conv_rule(rules.input);

  const auto z = to_latent(trace.output());
  const auto& proto = protos[static_cast<std::size_t>(prototype_index)];
  const auto sim = similarity_map(z, proto.vector, model.epsilon());

  PrpResult result;
  result.patch_row = sim.argmax_row();
  result.patch_col = sim.argmax_col();
  auto& audit = result.audit;
  auto record = [&audit](const std::string& name, const std::vector<double>& r) {
    audit.layers.push_back(name);
    audit.totals.push_back(total(r));
    for (double v : r) audit.min_value = std::min(audit.min_value, v);
  };

  const double R0 = sim.max_score();
  audit.layers.push_back("prototype");
  audit.totals.push_back(R0);
  audit.min_value = R0;

  // Relevance on the latent tensor, C x H x W.
  const auto split = dist_rule(z.patch(sim.argmax), proto.vector, R0);
  std::vector<double> rel(trace.output().data.size(), 0.0);
  const std::size_t hw = trace.output().plane();
  for (int d = 0; d < z.depth; ++d) rel[d * hw + static_cast<std::size_t>(sim.argmax)] = split[d];
  record("distance", rel);

  for (int b = static_cast<int>(trace.blocks.size()) - 1; b >= 0; --b) {
    const auto& block = trace.blocks[b];
    std::vector<double> unpooled(block.activation.data.size(), 0.0);
    for (std::size_t i = 0; i < rel.size(); ++i) unpooled[static_cast<std::size_t>(block.pool_argmax[i])] += rel[i];
    const std::string prefix = "block" + std::to_string(b);
    record(prefix + ".pool", unpooled);
    // ReLU passes relevance through unchanged.
    const auto& layer = model.extractor().layers()[b];
    rel = (b == 0 ? first_rule : inner_rule)(layer, block.input, unpooled);
    record(prefix + ".conv", rel);
  }

  result.input_relevance = rel;
  const auto& input = trace.input;
  auto& h = result.heatmap;
  h.width = input.width;
  h.height = input.height;
  h.backend = "prp";
  h.prototype_id = proto.id;
  h.values.assign(input.plane(), 0.0);
  for (int c = 0; c < input.channels; ++c) {
    for (std::size_t i = 0; i < input.plane(); ++i) h.values[i] += rel[c * input.plane() + i];
  }
  return result;
}

PrpResult prp_relevance(const PrototypeModel& model, int prototype_index, const Image& image, const PrpRules& rules) {
  return prp_relevance(model, prototype_index, model.extractor().forward(image), rules);
}

}  // namespace protolab
